//! Self-attention extended with keys and values from a reference view.

use ndarray::{concatenate, Array2, Axis};

use crate::error::{Error, Result};

/// Softmax attention matrix over the concatenated keys `[k_ref; k]`.
///
/// Returns an `n x (r + m)` row-stochastic matrix; reference keys come first.
pub fn attention_weights(
    q: &Array2<f64>,
    k: &Array2<f64>,
    k_ref: &Array2<f64>,
) -> Result<Array2<f64>> {
    let c = q.ncols();
    if k.ncols() != c || (k_ref.nrows() > 0 && k_ref.ncols() != c) {
        return Err(Error::contract(format!(
            "attention: key width {} / reference key width {} vs query width {c}",
            k.ncols(),
            k_ref.ncols()
        )));
    }
    if k.nrows() + k_ref.nrows() == 0 {
        return Err(Error::contract("attention: no keys"));
    }
    if c == 0 {
        return Err(Error::contract("attention: zero feature width"));
    }
    let keys = if k_ref.nrows() > 0 {
        concatenate(Axis(0), &[k_ref.view(), k.view()])
            .map_err(|e| Error::contract(format!("attention: {e}")))?
    } else {
        k.clone()
    };
    let scale = 1.0 / (c as f64).sqrt();
    let mut logits = q.dot(&keys.t()) * scale;
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    Ok(logits)
}

/// `Softmax(Q [K_ref; K]^T / sqrt(c)) [V_ref; V]`.
///
/// With an empty reference (`r = 0`) this is plain scaled dot-product
/// attention. Values may be wider or narrower than the keys.
pub fn extended_attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    k_ref: &Array2<f64>,
    v_ref: &Array2<f64>,
) -> Result<Array2<f64>> {
    if k.nrows() != v.nrows() {
        return Err(Error::contract(format!(
            "attention: {} keys but {} values",
            k.nrows(),
            v.nrows()
        )));
    }
    if k_ref.nrows() != v_ref.nrows() {
        return Err(Error::contract(format!(
            "attention: {} reference keys but {} reference values",
            k_ref.nrows(),
            v_ref.nrows()
        )));
    }
    if v_ref.nrows() > 0 && v_ref.ncols() != v.ncols() {
        return Err(Error::contract(format!(
            "attention: value width {} vs reference value width {}",
            v.ncols(),
            v_ref.ncols()
        )));
    }
    let w = attention_weights(q, k, k_ref)?;
    let values = if v_ref.nrows() > 0 {
        concatenate(Axis(0), &[v_ref.view(), v.view()])
            .map_err(|e| Error::contract(format!("attention: {e}")))?
    } else {
        v.clone()
    };
    Ok(w.dot(&values))
}

/// Plain scaled dot-product attention.
pub fn attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Result<Array2<f64>> {
    let empty = Array2::zeros((0, q.ncols()));
    let empty_v = Array2::zeros((0, v.ncols()));
    extended_attention(q, k, v, &empty, &empty_v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    /// Naive per-row softmax attention written without matrix helpers.
    fn naive(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Array2<f64> {
        let c = q.ncols() as f64;
        let mut out = Array2::zeros((q.nrows(), v.ncols()));
        for i in 0..q.nrows() {
            let mut logits = Vec::new();
            for j in 0..k.nrows() {
                let mut dot = 0.0;
                for d in 0..q.ncols() {
                    dot += q[[i, d]] * k[[j, d]];
                }
                logits.push(dot / c.sqrt());
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..k.nrows() {
                for d in 0..v.ncols() {
                    out[[i, d]] += exps[j] / sum * v[[j, d]];
                }
            }
        }
        out
    }

    #[test]
    fn two_key_hand_example() {
        let q = array![[0.0]];
        let out = extended_attention(
            &q,
            &array![[0.0]],
            &array![[3.0]],
            &array![[0.0]],
            &array![[1.0]],
        )
        .unwrap();
        assert!((out[[0, 0]] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_reference_is_standard_attention() {
        let q = array![[0.3, -1.0], [2.0, 0.5]];
        let k = array![[1.0, 0.0], [0.2, 0.7], [-0.4, 1.1]];
        let v = array![[1.0, 2.0], [3.0, -1.0], [0.0, 0.5]];
        let out = attention(&q, &k, &v).unwrap();
        let oracle = naive(&q, &k, &v);
        for (a, b) in out.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_self_reference_is_invisible() {
        let q = array![[0.3, -1.0]];
        let k = array![[1.0, 0.0], [0.2, 0.7]];
        let v = array![[1.0, 2.0], [3.0, -1.0]];
        let a = attention(&q, &k, &v).unwrap();
        let b = extended_attention(&q, &k, &v, &k, &v).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_dimensions_are_errors() {
        let q = array![[0.0, 1.0]];
        assert!(attention(&q, &array![[0.0]], &array![[1.0]]).is_err());
        assert!(attention(&q, &array![[0.0, 1.0]], &array![[1.0], [2.0]]).is_err());
        assert!(extended_attention(
            &q,
            &array![[0.0, 1.0]],
            &array![[1.0]],
            &array![[0.0, 1.0]],
            &array![[1.0, 2.0]]
        )
        .is_err());
    }

    fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
        proptest::collection::vec(-3.0f64..3.0, rows * cols)
            .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
    }

    proptest! {
        #[test]
        fn rows_are_stochastic_and_permutation_invariant(
            q in mat(3, 4), k in mat(5, 4), v in mat(5, 2), kr in mat(2, 4), vr in mat(2, 2),
            shift in 0usize..5,
        ) {
            let w = attention_weights(&q, &k, &kr).unwrap();
            for row in w.rows() {
                prop_assert!((row.sum() - 1.0).abs() <= 1e-6);
            }
            let out = extended_attention(&q, &k, &v, &kr, &vr).unwrap();
            let perm: Vec<usize> = (0..5).map(|i| (i + shift) % 5).collect();
            let kp = k.select(Axis(0), &perm);
            let vp = v.select(Axis(0), &perm);
            let outp = extended_attention(&q, &kp, &vp, &kr, &vr).unwrap();
            for (a, b) in out.iter().zip(outp.iter()) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }
    }
}
