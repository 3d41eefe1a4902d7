use ndarray::Array3;

use crate::error::{Error, Result};

/// Correlation taps `(dy, dx, kx, ky)` of the 3x3 Sobel pair.
pub(crate) const SOBEL_TAPS: [(isize, isize, f64, f64); 9] = [
    (-1, -1, -1.0, -1.0),
    (-1, 0, 0.0, -2.0),
    (-1, 1, 1.0, -1.0),
    (0, -1, -2.0, 0.0),
    (0, 0, 0.0, 0.0),
    (0, 1, 2.0, 0.0),
    (1, -1, -1.0, 1.0),
    (1, 0, 0.0, 2.0),
    (1, 1, 1.0, 1.0),
];

#[inline]
pub(crate) fn clamp_offset(i: usize, d: isize, n: usize) -> usize {
    (i as isize + d).clamp(0, n as isize - 1) as usize
}

/// Per-channel Sobel gradients `(gx, gy)` with replicated borders.
pub fn sobel_gradient(img: &Array3<f64>) -> Result<(Array3<f64>, Array3<f64>)> {
    let (c, h, w) = img.dim();
    if h < 3 || w < 3 {
        return Err(Error::contract(format!(
            "sobel needs at least 3x3, got {h}x{w}"
        )));
    }
    let mut gx = Array3::zeros((c, h, w));
    let mut gy = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                // differences first, so constant images give exact zeros
                let v = |dy: isize, dx: isize| {
                    img[[ch, clamp_offset(y, dy, h), clamp_offset(x, dx, w)]]
                };
                let (mut sx, mut sy) = (0.0, 0.0);
                for (d, k) in [(-1isize, 1.0), (0, 2.0), (1, 1.0)] {
                    sx += k * (v(d, 1) - v(d, -1));
                    sy += k * (v(1, d) - v(-1, d));
                }
                gx[[ch, y, x]] = sx;
                gy[[ch, y, x]] = sy;
            }
        }
    }
    Ok((gx, gy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_has_no_gradient() {
        let (gx, gy) = sobel_gradient(&Array3::from_elem((2, 4, 5), 0.7)).unwrap();
        assert!(gx.iter().chain(gy.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn ramp_gives_eight_times_step() {
        let img = Array3::from_shape_fn((1, 5, 6), |(_, _, x)| 0.25 * x as f64);
        let (gx, gy) = sobel_gradient(&img).unwrap();
        for y in 0..5 {
            for x in 1..5 {
                assert!((gx[[0, y, x]] - 2.0).abs() < 1e-12);
                assert_eq!(gy[[0, y, x]], 0.0);
            }
        }
        // replicated border halves the difference at the edges
        assert!((gx[[0, 2, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_swaps_axes() {
        let img = Array3::from_shape_fn((1, 6, 6), |(_, y, x)| ((x * 7 + y * 3) % 5) as f64);
        // rot[y][x] = img[x][w-1-y], a 90 degree counter-clockwise turn
        let rot = Array3::from_shape_fn((1, 6, 6), |(_, y, x)| img[[0, x, 5 - y]]);
        let (gx, gy) = sobel_gradient(&img).unwrap();
        let (rx, ry) = sobel_gradient(&rot).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                assert!((rx[[0, y, x]] - gy[[0, x, 5 - y]]).abs() < 1e-12);
                assert!((ry[[0, y, x]] + gx[[0, x, 5 - y]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn undersized_is_rejected() {
        assert!(sobel_gradient(&Array3::zeros((1, 2, 5))).is_err());
    }

    proptest! {
        #[test]
        fn bias_invariant(vals in proptest::collection::vec(-1.0f64..1.0, 48), bias in -3.0f64..3.0) {
            let img = Array3::from_shape_vec((3, 4, 4), vals).unwrap();
            let (gx, gy) = sobel_gradient(&img).unwrap();
            let (bx, by) = sobel_gradient(&(&img + bias)).unwrap();
            for (a, b) in gx.iter().zip(&bx).chain(gy.iter().zip(&by)) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
