use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scene::{Track, ViewRig};
use crate::warpfield::{
    area_downsample, mask_to_f64, occlusion_weights, OcclusionParams, SceneGeometry, WarpMap,
};

/// Warp maps keyed by `(source, target)`.
#[derive(Debug, Clone, Default)]
pub struct WarpBank {
    maps: BTreeMap<(usize, usize), WarpMap>,
    identity: bool,
}

impl WarpBank {
    /// Every warp is the identity (views share one image plane).
    pub fn identity() -> Self {
        Self {
            maps: BTreeMap::new(),
            identity: true,
        }
    }

    pub fn from_geometry(geom: &SceneGeometry, pairs: &BTreeSet<(usize, usize)>) -> Result<Self> {
        let list: Vec<(usize, usize)> = pairs.iter().copied().collect();
        let maps = geom
            .exec
            .try_map(list.len(), |k| geom.warp_map(list[k].0, list[k].1))?;
        Ok(Self {
            maps: list.into_iter().zip(maps).collect(),
            identity: false,
        })
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    /// `None` means the identity warp.
    pub fn get(&self, src: usize, dst: usize) -> Result<Option<&WarpMap>> {
        if self.identity || src == dst {
            return Ok(None);
        }
        self.maps
            .get(&(src, dst))
            .map(Some)
            .ok_or_else(|| Error::contract(format!("no warp from view {src} to view {dst}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanEntry {
    pub source: usize,
    /// Occlusion weight `M` at latent resolution, zero where the source has
    /// no valid sample.
    pub weight: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetPlan {
    pub target: usize,
    /// The first entry is the target itself.
    pub entries: Vec<PlanEntry>,
    /// Entry holding the paired close-up view, for full-body targets.
    pub closeup: Option<usize>,
}

/// Per-target blend sources and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendPlan {
    pub targets: Vec<TargetPlan>,
}

impl BlendPlan {
    /// Each view blends only with itself, which reduces guided sampling to
    /// independent sampling.
    pub fn solo(n: usize, dims: (usize, usize)) -> Self {
        let targets = (0..n)
            .map(|i| TargetPlan {
                target: i,
                entries: vec![PlanEntry {
                    source: i,
                    weight: Array2::ones(dims),
                }],
                closeup: None,
            })
            .collect();
        Self { targets }
    }

    /// All views see the same image plane with unit weights (every view is a
    /// source of every other).
    pub fn all_to_all(n: usize, dims: (usize, usize)) -> Self {
        let targets = (0..n)
            .map(|i| {
                let mut order = vec![i];
                order.extend((0..n).filter(|&j| j != i));
                TargetPlan {
                    target: i,
                    entries: order
                        .into_iter()
                        .map(|j| PlanEntry {
                            source: j,
                            weight: Array2::ones(dims),
                        })
                        .collect(),
                    closeup: None,
                }
            })
            .collect();
        Self { targets }
    }

    /// Plan over a rig: each target blends with itself and its rig
    /// neighbours.
    pub fn from_rig(
        geom: &SceneGeometry,
        rig: &ViewRig,
        codec_ratio: usize,
        params: OcclusionParams,
        validity_threshold: f64,
        bank: &WarpBank,
    ) -> Result<Self> {
        params.validate()?;
        if geom.len() != rig.len() {
            return Err(Error::contract("geometry and rig disagree on view count"));
        }
        let targets = geom.exec.try_map(rig.len(), |i| {
            let gb = &geom.gbuffers[i];
            let mut sources = vec![i];
            sources.extend(rig.neighbors(i));
            let entries = sources
                .iter()
                .map(|&j| {
                    let own;
                    let warp = match bank.get(j, i)? {
                        Some(w) => w,
                        None => {
                            own = WarpMap::identity(&gb.mask);
                            &own
                        }
                    };
                    let m = occlusion_weights(gb, &geom.cameras[j], warp, params);
                    let validity = area_downsample(&mask_to_f64(&warp.mask()), codec_ratio);
                    let mut weight = area_downsample(&m.weights, codec_ratio);
                    weight.zip_mut_with(&validity, |w, &v| {
                        if v < validity_threshold - 1e-12 {
                            *w = 0.0;
                        }
                    });
                    Ok(PlanEntry { source: j, weight })
                })
                .collect::<Result<Vec<_>>>()?;
            let closeup = (rig.views()[i].track == Track::FullBody)
                .then(|| sources.iter().position(|&j| j == i + rig.per_track()))
                .flatten();
            Ok::<_, Error>(TargetPlan {
                target: i,
                entries,
                closeup,
            })
        })?;
        Ok(Self { targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Every `(source, target)` pair with a non-trivial warp.
    pub fn warp_pairs(&self) -> BTreeSet<(usize, usize)> {
        self.targets
            .iter()
            .flat_map(|t| t.entries.iter().map(move |e| (e.source, t.target)))
            .filter(|(s, d)| s != d)
            .collect()
    }

    pub fn validate(&self, n: usize, dims: (usize, usize)) -> Result<()> {
        if self.targets.len() != n {
            return Err(Error::contract(format!(
                "plan covers {} of {n} views",
                self.targets.len()
            )));
        }
        for (i, t) in self.targets.iter().enumerate() {
            if t.target != i || t.entries.first().map(|e| e.source) != Some(i) {
                return Err(Error::contract(format!(
                    "plan for view {i} must start with itself"
                )));
            }
            for e in &t.entries {
                if e.source >= n {
                    return Err(Error::contract(format!(
                        "plan source {} out of range",
                        e.source
                    )));
                }
                if e.weight.dim() != dims {
                    return Err(Error::contract(format!(
                        "plan weight {:?} does not match latent {dims:?}",
                        e.weight.dim()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Warp pairs needed by sampling and latent optimization on a rig.
pub fn rig_warp_pairs(rig: &ViewRig) -> BTreeSet<(usize, usize)> {
    let mut pairs = BTreeSet::new();
    for i in 0..rig.len() {
        for j in rig.neighbors(i) {
            pairs.insert((j, i));
            pairs.insert((i, j));
        }
    }
    let (phase1, phase2) = crate::latentopt::rig_pair_schedule(rig);
    for (i, j) in phase1.into_iter().chain(phase2) {
        pairs.insert((i, j));
        pairs.insert((j, i));
    }
    pairs
}
