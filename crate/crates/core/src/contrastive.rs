//! Bidirectional supervised contrastive loss over label-grouped positives.
//!
//! For a batch with image features `u_i`, text features `v_j` (both unit
//! norm), labels `y` and logit scale `τ`:
//!
//! ```text
//! L_i2t = -Σ_i 1/|P(i)| Σ_{k∈P(i)} log softmax_j(τ u_i·v_j)[k]
//! L_t2i = -Σ_j 1/|Q(j)| Σ_{k∈Q(j)} log softmax_i(τ u_i·v_j)[k]
//! ```
//!
//! with `P(i) = {k : y_k = y_i}` and `Q` the same sets seen from the text
//! side. Losses are summed over the batch, not averaged. With all labels
//! distinct this is exactly the symmetric InfoNCE objective used by CLIP.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MIN_NORM: f64 = 1e-12;
const UNIT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub i2t: f64,
    pub t2i: f64,
    pub total: f64,
}

pub fn normalize(v: ArrayView1<f64>) -> Result<Array1<f64>> {
    let norm = v.dot(&v).sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite("feature vector".into()));
    }
    if norm <= MIN_NORM {
        return Err(Error::invalid(format!("cannot normalize vector of norm {norm:e}")));
    }
    Ok(&v / norm)
}

/// Gradient of `x / ‖x‖` given the normalized vector, the original norm and
/// the upstream gradient.
pub fn normalize_backward(unit: ArrayView1<f64>, norm: f64, d_unit: ArrayView1<f64>) -> Array1<f64> {
    let proj = unit.dot(&d_unit);
    (&d_unit - &(&unit * proj)) / norm
}

/// `S[i][j] = u_i · v_j` for unit-norm rows.
pub fn similarity_matrix(u: &Array2<f64>, v: &Array2<f64>) -> Result<Array2<f64>> {
    if u.ncols() != v.ncols() {
        return Err(Error::Shape(format!(
            "feature widths differ: {} vs {}",
            u.ncols(),
            v.ncols()
        )));
    }
    for (side, m) in [("image", u), ("text", v)] {
        for (i, row) in m.rows().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if (n - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::invalid(format!(
                    "{side} row {i} has norm {n}, expected unit norm"
                )));
            }
        }
    }
    Ok(u.dot(&v.t()))
}

/// Index sets `P(i) = {k : y_k = y_i}` for every batch position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositiveSets {
    sets: Vec<Vec<usize>>,
}

impl PositiveSets {
    pub fn from_labels(labels: &[usize]) -> Self {
        PositiveSets {
            sets: labels
                .iter()
                .map(|y| (0..labels.len()).filter(|&k| labels[k] == *y).collect())
                .collect(),
        }
    }

    pub fn of(&self, i: usize) -> &[usize] {
        &self.sets[i]
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }
}

fn check_inputs(sim: &Array2<f64>, labels: &[usize], scale: f64) -> Result<()> {
    let b = labels.len();
    if b == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if sim.dim() != (b, b) {
        return Err(Error::Shape(format!(
            "similarity matrix is {:?}, expected {b}x{b}",
            sim.dim()
        )));
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::invalid(format!("temperature scale must be positive, got {scale}")));
    }
    if sim.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("similarity matrix".into()));
    }
    Ok(())
}

/// One direction of the loss over rows of `logits`; returns the value and
/// `d(loss)/d(logits)`.
fn directional(logits: &Array2<f64>, positives: &PositiveSets) -> (f64, Array2<f64>) {
    let mut loss = 0.0;
    let mut grad = Array2::zeros(logits.raw_dim());
    for (i, (row, mut g)) in logits.rows().into_iter().zip(grad.rows_mut()).enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let log_sum = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        let pos = positives.of(i);
        let w = 1.0 / pos.len() as f64;
        for &k in pos {
            loss -= w * (row[k] - log_sum);
        }
        for (gj, &v) in g.iter_mut().zip(row.iter()) {
            *gj = (v - log_sum).exp();
        }
        for &k in pos {
            g[k] -= w;
        }
    }
    (loss, grad)
}

pub fn unicl_loss(sim: &Array2<f64>, labels: &[usize], scale: f64) -> Result<LossTerms> {
    Ok(unicl_loss_with_grad(sim, labels, scale)?.0)
}

/// Loss terms plus gradients with respect to the similarity matrix and the
/// scale `τ`.
pub fn unicl_loss_with_grad(
    sim: &Array2<f64>,
    labels: &[usize],
    scale: f64,
) -> Result<(LossTerms, Array2<f64>, f64)> {
    check_inputs(sim, labels, scale)?;
    let positives = PositiveSets::from_labels(labels);
    let logits = sim * scale;
    let (i2t, g_rows) = directional(&logits, &positives);
    let logits_t = logits.t().to_owned();
    let (t2i, g_cols) = directional(&logits_t, &positives);
    let d_logits = g_rows + g_cols.t();
    let d_scale = (&d_logits * sim).sum();
    let d_sim = d_logits * scale;
    let terms = LossTerms {
        i2t,
        t2i,
        total: i2t + t2i,
    };
    if !terms.total.is_finite() {
        return Err(Error::NonFinite("contrastive loss".into()));
    }
    Ok((terms, d_sim, d_scale))
}

/// Raw encoder outputs for one batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub image_features: Array2<f64>,
    pub text_features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(image_features: Array2<f64>, text_features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if image_features.nrows() != text_features.nrows() || labels.len() != image_features.nrows() {
            return Err(Error::Shape(format!(
                "batch rows disagree: {} images, {} texts, {} labels",
                image_features.nrows(),
                text_features.nrows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        Ok(Batch {
            image_features,
            text_features,
            labels,
        })
    }

    /// Normalize both sides and evaluate the loss.
    pub fn loss(&self, scale: f64) -> Result<LossTerms> {
        let norm_rows = |m: &Array2<f64>| -> Result<Array2<f64>> {
            let mut out = Array2::zeros(m.raw_dim());
            for (src, mut dst) in m.rows().into_iter().zip(out.rows_mut()) {
                dst.assign(&normalize(src)?);
            }
            Ok(out)
        };
        let u = norm_rows(&self.image_features)?;
        let v = norm_rows(&self.text_features)?;
        unicl_loss(&similarity_matrix(&u, &v)?, &self.labels, scale)
    }
}

/// Row-wise argmax of `scale * sim`; ties resolve to the lowest index.
pub fn row_argmax(sim: &Array2<f64>) -> Vec<usize> {
    sim.axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (j, &v)| if v > bv { (j, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn normalize_examples() {
        let v = normalize(array![3.0, 4.0, 0.0].view()).unwrap();
        assert_eq!(v, array![0.6, 0.8, 0.0]);
        assert_eq!(normalize(v.view()).unwrap(), v);
        assert!(normalize(array![0.0, 0.0].view()).is_err());
    }

    #[test]
    fn normalize_backward_matches_difference() {
        let x: Array1<f64> = array![0.3, -1.1, 0.7];
        let d = array![0.2, 0.5, -0.4];
        let n: f64 = x.dot(&x).sqrt();
        let g = normalize_backward((&x / n).view(), n, d.view());
        let h = 1e-6;
        for i in 0..3 {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let f = |v: &Array1<f64>| normalize(v.view()).unwrap().dot(&d);
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn similarity_requires_unit_rows() {
        let eye = Array2::<f64>::eye(3);
        assert_eq!(similarity_matrix(&eye, &eye).unwrap(), eye);
        let one = array![[1.0, 0.0]];
        assert_eq!(similarity_matrix(&one, &one).unwrap(), array![[1.0]]);
        assert!(similarity_matrix(&array![[2.0, 0.0]], &one).is_err());
    }

    #[test]
    fn single_item_batch_has_zero_loss() {
        let l = unicl_loss(&array![[0.3]], &[7], 14.0).unwrap();
        assert_eq!(l.total, 0.0);
    }

    #[test]
    fn two_item_values() {
        let eye = Array2::<f64>::eye(2);
        let distinct = unicl_loss(&eye, &[0, 1], 1.0).unwrap();
        let expected = 2.0 * (1.0 + (-1.0f64).exp()).ln();
        assert!((distinct.i2t - expected).abs() < 1e-12);
        assert!((distinct.total - 2.0 * expected).abs() < 1e-12);
        assert!((distinct.total - 1.25305).abs() < 1e-5);

        let same = unicl_loss(&eye, &[4, 4], 1.0).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln() + (1.0 + 1.0f64.exp()).ln();
        assert!((same.i2t - expected).abs() < 1e-12);
        assert!((same.i2t - 1.62652).abs() < 1e-5);
    }

    #[test]
    fn bad_inputs() {
        let eye = Array2::<f64>::eye(2);
        assert!(unicl_loss(&eye, &[0, 1], 0.0).is_err());
        assert!(unicl_loss(&eye, &[0], 1.0).is_err());
        assert!(unicl_loss(&array![[f64::NAN, 0.0], [0.0, 1.0]], &[0, 1], 1.0).is_err());
    }

    #[test]
    fn positive_sets_contain_self() {
        let p = PositiveSets::from_labels(&[1, 2, 1]);
        assert_eq!(p.of(0), &[0, 2]);
        assert_eq!(p.of(1), &[1]);
    }
}
