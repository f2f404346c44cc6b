//! Loss terms with closed-form gradients, generic over the float type.
//!
//! Training evaluates these in `f32`; the gradient checks run them in `f64`.
//! Every function returns the value together with its gradient.

use num_traits::Float;

use crate::error::{Error, Result};

fn lit<T: Float>(v: f64) -> T {
    T::from(v).expect("literal fits the float type")
}

fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

/// `v / ‖v‖₂`.
pub fn normalize<T: Float>(v: &[T]) -> Result<Vec<T>> {
    let norm = dot(v, v).sqrt();
    if !(norm > T::zero()) || !norm.is_finite() {
        return Err(Error::Numerical(format!(
            "cannot normalize a vector of norm {}",
            norm.to_f64().unwrap_or(f64::NAN)
        )));
    }
    Ok(v.iter().map(|&x| x / norm).collect())
}

/// Vector-Jacobian product of [`normalize`] at `v`.
pub fn normalize_backward<T: Float>(v: &[T], grad_out: &[T]) -> Vec<T> {
    let norm = dot(v, v).sqrt();
    let y: Vec<T> = v.iter().map(|&x| x / norm).collect();
    let proj = dot(&y, grad_out);
    y.iter()
        .zip(grad_out)
        .map(|(&yi, &gi)| (gi - yi * proj) / norm)
        .collect()
}

/// Gradients of one InfoNCE evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceGrads<T> {
    pub anchor: Vec<T>,
    /// Row-major `d × d`.
    pub w: Vec<T>,
    pub positives: Vec<Vec<T>>,
    pub negatives: Vec<Vec<T>>,
}

impl<T: Float> InfoNceGrads<T> {
    fn zeros(d: usize, n_pos: usize, n_neg: usize) -> Self {
        Self {
            anchor: vec![T::zero(); d],
            w: vec![T::zero(); d * d],
            positives: vec![vec![T::zero(); d]; n_pos],
            negatives: vec![vec![T::zero(); d]; n_neg],
        }
    }
}

fn check_shapes<T>(anchor: &[T], w: &[T], candidates: &[&[T]]) -> Result<usize> {
    let d = anchor.len();
    if d == 0 {
        return Err(Error::Shape("empty anchor".into()));
    }
    if w.len() != d * d {
        return Err(Error::Shape(format!(
            "similarity matrix has {} entries, expected {}",
            w.len(),
            d * d
        )));
    }
    if let Some(c) = candidates.iter().find(|c| c.len() != d) {
        return Err(Error::Shape(format!(
            "candidate of dimension {} against anchor of dimension {d}",
            c.len()
        )));
    }
    Ok(d)
}

/// `−ln softmax` of the positive logit among `aᵀW c / τ` for the positive and
/// the `K` negatives. Logits are shifted by their maximum before `exp`.
pub fn infonce<T: Float>(
    anchor: &[T],
    w: &[T],
    positive: &[T],
    negatives: &[&[T]],
    tau: T,
) -> Result<(T, InfoNceGrads<T>)> {
    let (loss, mut g) = structured_infonce(anchor, w, &[positive], negatives, tau)?;
    debug_assert_eq!(g.positives.len(), 1);
    g.positives.truncate(1);
    Ok((loss, g))
}

/// Mean of the single-positive InfoNCE over several positives that share the
/// anchor and the negatives.
pub fn structured_infonce<T: Float>(
    anchor: &[T],
    w: &[T],
    positives: &[&[T]],
    negatives: &[&[T]],
    tau: T,
) -> Result<(T, InfoNceGrads<T>)> {
    if positives.is_empty() {
        return Err(Error::InvalidArgument("contrastive loss needs at least one positive".into()));
    }
    if negatives.is_empty() {
        return Err(Error::InvalidArgument("contrastive loss needs at least one negative".into()));
    }
    if !(tau > T::zero()) {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    let all: Vec<&[T]> = positives.iter().chain(negatives).copied().collect();
    let d = check_shapes(anchor, w, &all)?;

    // q = aᵀ W
    let mut q = vec![T::zero(); d];
    for (i, &ai) in anchor.iter().enumerate() {
        for (j, qj) in q.iter_mut().enumerate() {
            *qj = *qj + ai * w[i * d + j];
        }
    }
    let neg_logits: Vec<T> = negatives.iter().map(|n| dot(&q, n) / tau).collect();
    if let Some(bad) = neg_logits.iter().find(|l| !l.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite negative logit {}",
            bad.to_f64().unwrap_or(f64::NAN)
        )));
    }

    let scale = T::one() / T::from(positives.len()).unwrap();
    let mut grads = InfoNceGrads::zeros(d, positives.len(), negatives.len());
    let mut dq = vec![T::zero(); d];
    let mut total = T::zero();
    for (pi, pos) in positives.iter().enumerate() {
        let pos_logit = dot(&q, pos) / tau;
        if !pos_logit.is_finite() {
            return Err(Error::Numerical("non-finite positive logit".into()));
        }
        let max = neg_logits.iter().fold(pos_logit, |m, &l| m.max(l));
        let e_pos = (pos_logit - max).exp();
        let e_neg: Vec<T> = neg_logits.iter().map(|&l| (l - max).exp()).collect();
        let z = e_neg.iter().fold(e_pos, |s, &e| s + e);
        let loss = z.ln() - (pos_logit - max);
        total = total + loss * scale;

        // dL/dlogit: softmax minus the one-hot of the positive
        let g_pos = (e_pos / z - T::one()) * scale / tau;
        for k in 0..d {
            dq[k] = dq[k] + g_pos * pos[k];
            grads.positives[pi][k] = g_pos * q[k];
        }
        for (ni, (neg, &e)) in negatives.iter().zip(&e_neg).enumerate() {
            let g = e / z * scale / tau;
            for k in 0..d {
                dq[k] = dq[k] + g * neg[k];
                grads.negatives[ni][k] = grads.negatives[ni][k] + g * q[k];
            }
        }
    }
    for i in 0..d {
        let mut da = T::zero();
        for j in 0..d {
            da = da + w[i * d + j] * dq[j];
            grads.w[i * d + j] = anchor[i] * dq[j];
        }
        grads.anchor[i] = da;
    }
    Ok((total, grads))
}

/// `KL(N(μ, diag(exp(logvar))) ‖ N(0, I))` summed over dimensions, with its
/// gradients with respect to `μ` and `logvar`.
pub fn kl_normal<T: Float>(mean: &[T], logvar: &[T]) -> Result<(T, Vec<T>, Vec<T>)> {
    if mean.len() != logvar.len() {
        return Err(Error::Shape(format!(
            "mean has {} entries, logvar {}",
            mean.len(),
            logvar.len()
        )));
    }
    let half: T = lit(0.5);
    let mut kl = T::zero();
    let mut dmean = Vec::with_capacity(mean.len());
    let mut dlogvar = Vec::with_capacity(mean.len());
    for (&m, &lv) in mean.iter().zip(logvar) {
        let var = lv.exp();
        kl = kl + half * (m * m + var - T::one() - lv);
        dmean.push(m);
        dlogvar.push(half * (var - T::one()));
    }
    Ok((kl, dmean, dlogvar))
}

/// Mean softmax cross-entropy of `rows × classes` logits against integer
/// targets, with the gradient with respect to the logits.
pub fn cross_entropy<T: Float>(
    logits: &[T],
    targets: &[usize],
    classes: usize,
) -> Result<(T, Vec<T>)> {
    if classes == 0 || logits.len() != targets.len() * classes {
        return Err(Error::Shape(format!(
            "{} logits for {} targets over {classes} classes",
            logits.len(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::Shape("no targets".into()));
    }
    let inv_rows = T::one() / T::from(targets.len()).unwrap();
    let mut grad = vec![T::zero(); logits.len()];
    let mut total = T::zero();
    for (r, (row, &target)) in logits.chunks_exact(classes).zip(targets).enumerate() {
        if target >= classes {
            return Err(Error::Shape(format!("target {target} outside {classes} classes")));
        }
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        if !max.is_finite() {
            return Err(Error::Numerical(format!("non-finite logits in row {r}")));
        }
        let z = row.iter().fold(T::zero(), |s, &v| s + (v - max).exp());
        total = total + (z.ln() + max - row[target]) * inv_rows;
        let g = &mut grad[r * classes..(r + 1) * classes];
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = (v - max).exp() / z * inv_rows;
        }
        g[target] = g[target] - inv_rows;
    }
    Ok((total, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize(&[3.0f64, 4.0]).unwrap(), vec![0.6, 0.8]);
        let u = normalize(&[0.6f64, 0.8]).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-15 && (u[1] - 0.8).abs() < 1e-15);
        assert!(normalize(&[0.0f64, 0.0]).is_err());
    }

    fn identity(d: usize) -> Vec<f64> {
        (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn uniform_logits_give_log_k_plus_one() {
        let a = [1.0f64, 0.0];
        for k in [1usize, 3, 512] {
            let negs: Vec<&[f64]> = vec![&a; k];
            let (l, _) = infonce(&a, &identity(2), &a, &negs, 1.0).unwrap();
            assert!((l - ((k + 1) as f64).ln()).abs() < 1e-12, "K={k}: {l}");
        }
    }

    #[test]
    fn one_negative_closed_form() {
        let a = [1.0f64, 0.0];
        let n = [0.0f64, 1.0];
        let (l, _) = infonce(&a, &identity(2), &a, &[&n], 1.0).unwrap();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn structured_with_identical_positives_matches_single() {
        let a = [0.6f64, 0.8];
        let p = [0.8f64, 0.6];
        let n1 = [-0.6f64, 0.8];
        let n2 = [0.0f64, -1.0];
        let w = [1.2, -0.3, 0.4, 0.9];
        let (single, _) = infonce(&a, &w, &p, &[&n1, &n2], 0.7).unwrap();
        let (multi, _) = structured_infonce(&a, &w, &[&p, &p, &p], &[&n1, &n2], 0.7).unwrap();
        assert!((single - multi).abs() < 1e-14);
        assert!(structured_infonce(&a, &w, &[], &[&n1], 1.0).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_normal(&[0.0f64; 3], &[0.0; 3]).unwrap().0, 0.0);
        assert!((kl_normal(&[1.0f64], &[0.0]).unwrap().0 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_examples() {
        let (l, _) = cross_entropy(&vec![0.0f64; 2 * 130], &[5, 129], 130).unwrap();
        assert!((l - 130f64.ln()).abs() < 1e-12);
        let (l, _) = cross_entropy(&[0.0f64; 3], &[1], 3).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
        let mut logits = vec![0.0f64; 3 * 3];
        for (r, t) in [2usize, 0, 1].iter().enumerate() {
            logits[r * 3 + t] = 1e3;
        }
        assert!(cross_entropy(&logits, &[2, 0, 1], 3).unwrap().0 < 1e-12);
        assert!(cross_entropy(&logits, &[2, 0], 3).is_err());
    }
}
