use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::ViewRig;
use crate::warpfield::SceneGeometry;

pub const DEFAULT_PSNR_CAP: f64 = 99.0;

/// PSNR with peak 1 over the masked pixels; `None` on an empty mask.
pub fn psnr(a: &Array3<f64>, b: &Array3<f64>, mask: &Array2<bool>, cap: f64) -> Option<f64> {
    let (c, h, w) = a.dim();
    let (mut se, mut n) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] {
                for ch in 0..c {
                    se += (a[[ch, y, x]] - b[[ch, y, x]]).powi(2);
                }
                n += c;
            }
        }
    }
    if n == 0 {
        return None;
    }
    let mse = se / n as f64;
    if mse == 0.0 {
        return Some(cap);
    }
    Some((10.0 * (1.0 / mse).log10()).min(cap))
}

fn gaussian_window(radius: usize, sigma: f64) -> Vec<f64> {
    let k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over masked pixels, 11x11 Gaussian window (sigma 1.5),
/// `C1 = 0.01^2`, `C2 = 0.03^2`, peak 1. Window statistics use only masked
/// pixels, with the window weights renormalized.
pub fn ssim(a: &Array3<f64>, b: &Array3<f64>, mask: &Array2<bool>) -> Option<f64> {
    const R: usize = 5;
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let g = gaussian_window(R, 1.5);
    let (c, h, w) = a.dim();
    let (mut total, mut n) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] {
                continue;
            }
            for ch in 0..c {
                let (mut ws, mut ma, mut mb, mut aa, mut bb, mut ab) =
                    (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..=2 * R {
                    let yy = y as isize + dy as isize - R as isize;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for dx in 0..=2 * R {
                        let xx = x as isize + dx as isize - R as isize;
                        if xx < 0 || xx >= w as isize || !mask[[yy as usize, xx as usize]] {
                            continue;
                        }
                        let k = g[dy] * g[dx];
                        let (va, vb) = (
                            a[[ch, yy as usize, xx as usize]],
                            b[[ch, yy as usize, xx as usize]],
                        );
                        ws += k;
                        ma += k * va;
                        mb += k * vb;
                        aa += k * va * va;
                        bb += k * vb * vb;
                        ab += k * va * vb;
                    }
                }
                let (ma, mb) = (ma / ws, mb / ws);
                let va = aa / ws - ma * ma;
                let vb = bb / ws - mb * mb;
                let cov = ab / ws - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                n += 1;
            }
        }
    }
    (n > 0).then(|| total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetric {
    pub source: usize,
    pub target: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pairs: Vec<PairMetric>,
    /// `(source, target)` pairs without overlap.
    pub excluded: Vec<(usize, usize)>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl MetricsReport {
    pub fn from_pairs(pairs: Vec<PairMetric>, excluded: Vec<(usize, usize)>) -> Self {
        let n = pairs.len().max(1) as f64;
        let mean_psnr = pairs.iter().map(|p| p.psnr).sum::<f64>() / n;
        let mean_ssim = pairs.iter().map(|p| p.ssim).sum::<f64>() / n;
        Self {
            pairs,
            excluded,
            mean_psnr,
            mean_ssim,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
        w.write_record(["source", "target", "psnr", "ssim", "pixels"])
            .map_err(csv_error)?;
        for p in &self.pairs {
            w.write_record([
                p.source.to_string(),
                p.target.to_string(),
                format!("{:.6}", p.psnr),
                format!("{:.6}", p.ssim),
                p.pixels.to_string(),
            ])
            .map_err(csv_error)?;
        }
        for (s, t) in &self.excluded {
            w.write_record([
                s.to_string(),
                t.to_string(),
                "excluded".into(),
                "excluded".into(),
                "0".into(),
            ])
            .map_err(csv_error)?;
        }
        w.write_record([
            "mean".into(),
            "mean".into(),
            format!("{:.6}", self.mean_psnr),
            format!("{:.6}", self.mean_ssim),
            self.pairs
                .iter()
                .map(|p| p.pixels)
                .sum::<usize>()
                .to_string(),
        ])
        .map_err(csv_error)?;
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Warps every view's image into each rig neighbour and scores the overlap.
pub fn cross_view_consistency(
    images: &[Array3<f64>],
    rig: &ViewRig,
    geometry: &SceneGeometry,
    psnr_cap: f64,
) -> Result<MetricsReport> {
    if images.len() != rig.len() || geometry.len() != rig.len() {
        return Err(Error::config(
            "images",
            format!("{} images for a rig of {} views", images.len(), rig.len()),
        ));
    }
    let pairs: Vec<(usize, usize)> = (0..rig.len())
        .flat_map(|i| rig.neighbors(i).into_iter().map(move |j| (i, j)))
        .collect();
    let scored = geometry
        .exec
        .try_map(pairs.len(), |k| -> Result<Option<PairMetric>> {
            let (i, j) = pairs[k];
            let warped = geometry.warp_map(i, j)?.apply(&images[i])?;
            let pixels = warped.mask.iter().filter(|&&m| m).count();
            let Some(p) = psnr(&warped.image, &images[j], &warped.mask, psnr_cap) else {
                return Ok(None);
            };
            let s = ssim(&warped.image, &images[j], &warped.mask).unwrap_or(1.0);
            Ok(Some(PairMetric {
                source: i,
                target: j,
                psnr: p,
                ssim: s,
                pixels,
            }))
        })?;
    let mut ok = Vec::new();
    let mut excluded = Vec::new();
    for (pair, m) in pairs.into_iter().zip(scored) {
        match m {
            Some(m) => ok.push(m),
            None => excluded.push(pair),
        }
    }
    Ok(MetricsReport::from_pairs(ok, excluded))
}
