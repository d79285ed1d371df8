//! Reconstruction and contrastive objectives.
//!
//! The contrastive term takes text views as anchors and mixed views as
//! candidates, with cosine similarity between `[CLS]` outputs:
//!
//! ```text
//! L_cl = - sum_m log( exp(f(T_m, S_m) / tau) / sum_l exp(f(T_m, S_l) / tau) )
//! ```
//!
//! The total objective is the unweighted sum `mlm + cl + mtm`.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub mlm: f64,
    pub cl: f64,
    pub mtm: f64,
    pub total: f64,
    pub mlm_targets: usize,
    pub cl_pairs: usize,
    pub mtm_targets: usize,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean over rows of `-log softmax(logits[r])[targets[r]]`; 0 without targets.
pub fn masked_nll_loss(logits: &Array2<f64>, targets: &[u32]) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    nll_sum_and_grad(logits, targets, 0.0).0 / targets.len() as f64
}

/// Sum of per-row negative log-likelihoods, and the gradient of
/// `scale * sum` with respect to the logits.
pub fn nll_sum_and_grad(logits: &Array2<f64>, targets: &[u32], scale: f64) -> (f64, Array2<f64>) {
    assert_eq!(logits.nrows(), targets.len(), "one logit row per target");
    let mut grad = Array2::zeros(logits.dim());
    let mut total = 0.0;
    for ((row, mut g), &t) in logits.rows().into_iter().zip(grad.rows_mut()).zip(targets) {
        let lse = log_sum_exp(row.iter().copied());
        total += lse - row[t as usize];
        g.zip_mut_with(&row, |gv, &l| *gv = scale * (l - lse).exp());
        g[t as usize] -= scale;
    }
    (total, grad)
}

pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> Result<f64> {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVectorInCosine);
    }
    Ok(a.dot(b) / (na * nb))
}

/// Gradient of `cos(a, b)` with respect to `a`.
fn cosine_grad(a: &Array1<f64>, b: &Array1<f64>, cos: f64) -> Array1<f64> {
    let na2 = a.dot(a);
    let na = na2.sqrt();
    let nb = b.dot(b).sqrt();
    b / (na * nb) - a * (cos / na2)
}

pub fn contrastive_loss(cls_t: &[Array1<f64>], cls_s: &[Array1<f64>], tau: f64) -> Result<f64> {
    Ok(contrastive_loss_with_grad(cls_t, cls_s, tau)?.0)
}

/// Loss plus its gradients with respect to each anchor and each candidate.
pub fn contrastive_loss_with_grad(
    cls_t: &[Array1<f64>],
    cls_s: &[Array1<f64>],
    tau: f64,
) -> Result<(f64, Vec<Array1<f64>>, Vec<Array1<f64>>)> {
    let m = cls_t.len();
    if m == 0 || cls_s.len() != m {
        return Err(Error::InvalidArgument(format!(
            "contrastive batch needs M >= 1 matched pairs, got {} and {}",
            m,
            cls_s.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be > 0")));
    }
    let mut sim = Array2::zeros((m, m));
    for (i, t) in cls_t.iter().enumerate() {
        for (j, s) in cls_s.iter().enumerate() {
            sim[[i, j]] = cosine(t, s)?;
        }
    }
    let mut loss = 0.0;
    // dL/dsim
    let mut dsim = Array2::zeros((m, m));
    for i in 0..m {
        let row = sim.row(i);
        let lse = log_sum_exp(row.iter().map(|v| v / tau));
        loss += lse - sim[[i, i]] / tau;
        for j in 0..m {
            dsim[[i, j]] = (sim[[i, j]] / tau - lse).exp() / tau;
        }
        dsim[[i, i]] -= 1.0 / tau;
    }
    let dim = cls_t[0].len();
    let mut d_t = vec![Array1::zeros(dim); m];
    let mut d_s = vec![Array1::zeros(dim); m];
    for i in 0..m {
        for j in 0..m {
            let g = dsim[[i, j]];
            if g == 0.0 {
                continue;
            }
            let c = sim[[i, j]];
            d_t[i].scaled_add(g, &cosine_grad(&cls_t[i], &cls_s[j], c));
            d_s[j].scaled_add(g, &cosine_grad(&cls_s[j], &cls_t[i], c));
        }
    }
    Ok((loss, d_t, d_s))
}

/// Sums the three parts, in the order mlm, cl, mtm.
pub fn total_loss(mlm: f64, cl: f64, mtm: f64) -> Result<LossReport> {
    for (name, v) in [("mlm", mlm), ("cl", cl), ("mtm", mtm)] {
        if !v.is_finite() {
            return Err(Error::NumericalDivergence(format!("{name} loss is {v}")));
        }
    }
    Ok(LossReport {
        mlm,
        cl,
        mtm,
        total: mlm + cl + mtm,
        ..LossReport::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_logits_give_log_v() {
        let logits = Array2::zeros((1, 100));
        assert!((masked_nll_loss(&logits, &[17]) - 100f64.ln()).abs() < 1e-12);
        assert_eq!(masked_nll_loss(&Array2::zeros((0, 100)), &[]), 0.0);
    }

    #[test]
    fn saturated_target() {
        let mut logits = Array2::zeros((1, 10));
        logits[[0, 3]] = 30.0;
        assert!(masked_nll_loss(&logits, &[3]) < 1e-9);
    }

    #[test]
    fn nll_falls_as_target_logit_rises() {
        let mut logits = array![[0.3, -0.2, 0.9, 0.1]];
        let mut last = masked_nll_loss(&logits, &[1]);
        for _ in 0..20 {
            logits[[0, 1]] += 0.25;
            let next = masked_nll_loss(&logits, &[1]);
            assert!(next < last);
            last = next;
        }
    }

    #[test]
    fn nll_gradient_sums_to_zero_per_row() {
        let logits = array![[0.3, -0.2, 0.9], [1.0, 2.0, 3.0]];
        let (_, g) = nll_sum_and_grad(&logits, &[0, 2], 0.5);
        for row in g.rows() {
            assert!(row.sum().abs() < 1e-12);
        }
    }

    #[test]
    fn all_equal_pair_gives_two_ln_two() {
        let v = array![0.3, -1.0, 2.0];
        let l = contrastive_loss(&[v.clone(), v.clone()], &[v.clone(), v], 0.1).unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_pair_is_zero() {
        let l = contrastive_loss(&[array![1.0, 0.0]], &[array![0.0, 1.0]], 0.1).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn zero_vector_is_rejected() {
        assert!(matches!(
            contrastive_loss(&[array![0.0, 0.0]], &[array![1.0, 0.0]], 0.1),
            Err(Error::ZeroVectorInCosine)
        ));
    }

    #[test]
    fn total_sums_parts() {
        assert_eq!(total_loss(1.0, 2.0, 3.0).unwrap().total, 6.0);
        assert_eq!(total_loss(0.0, 0.0, 0.0).unwrap().total, 0.0);
        assert!(matches!(
            total_loss(f64::NAN, 0.0, 0.0),
            Err(Error::NumericalDivergence(_))
        ));
    }
}
