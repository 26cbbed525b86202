//! Image-level losses on the pooled score vector.
//!
//! Multi-label training uses a sum of K binary cross-entropy losses with a
//! logistic squashing applied to the raw scores; binary training softmaxes
//! the two scores and applies categorical cross-entropy. Both return the
//! batch-mean loss and its exact analytic gradient w.r.t. the raw scores.

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

fn check_pair(y_pred: &Tensor4, targets: &Tensor4) -> Result<()> {
    if y_pred.dims() != targets.dims() {
        return Err(Error::shape(format!(
            "loss dims {:?} vs targets {:?}",
            y_pred.dims(),
            targets.dims()
        )));
    }
    let (_, _, h, w) = y_pred.dims();
    if (h, w) != (1, 1) {
        return Err(Error::shape(format!("loss expects (n, K, 1, 1) scores, got {:?}", y_pred.dims())));
    }
    for v in targets.data() {
        if *v != 0.0 && *v != 1.0 {
            return Err(Error::input(format!("target entry {v} outside {{0, 1}}")));
        }
    }
    Ok(())
}

/// Probability clamp inside the binary cross-entropy logs.
const BCE_EPS: f64 = 1e-6;

/// Sum over K of binary cross-entropies, averaged over the batch.
///
/// The multi-label scores are log-sum-exp pools of channel-softmaxed maps
/// and therefore already live in `[0, 1]`; they are treated directly as the
/// per-class Bernoulli probabilities (clamped away from the log
/// singularities): `loss = sum_k -[t ln y + (1 - t) ln(1 - y)]`.
pub fn bce_multilabel_loss(y_pred: &Tensor4, targets: &Tensor4) -> Result<(f64, Tensor4)> {
    check_pair(y_pred, targets)?;
    for v in y_pred.data() {
        if !(-1e-9..=1.0 + 1e-9).contains(v) {
            return Err(Error::input(format!(
                "multi-label score {v} outside [0, 1]; scores are pooled softmax probabilities"
            )));
        }
    }
    let n = y_pred.n() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; y_pred.len()];
    for (i, (&y, &t)) in y_pred.data().iter().zip(targets.data()).enumerate() {
        let p = y.clamp(BCE_EPS, 1.0 - BCE_EPS);
        loss -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        grad[i] = (-t / p + (1.0 - t) / (1.0 - p)) / n;
    }
    loss /= n;
    if !loss.is_finite() {
        return Err(Error::shape(format!("non-finite bce loss {loss}")));
    }
    Ok((loss, Tensor4::new(y_pred.dims(), grad)?))
}

/// Categorical cross-entropy on softmaxed scores, averaged over the batch.
/// Targets must be one-hot rows. The softmax is applied internally so the
/// returned gradient `(softmax(y) - t)/n` is exact.
pub fn categorical_ce_loss(y_pred: &Tensor4, targets: &Tensor4) -> Result<(f64, Tensor4)> {
    check_pair(y_pred, targets)?;
    let (n, k, _, _) = y_pred.dims();
    for ni in 0..n {
        let ones: f64 = (0..k).map(|ci| targets.get(ni, ci, 0, 0)).sum();
        if ones != 1.0 {
            return Err(Error::input(format!(
                "categorical targets must be one-hot, sample {ni} has {ones} set bits"
            )));
        }
    }
    let nf = n as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; y_pred.len()];
    for ni in 0..n {
        let row = &y_pred.data()[ni * k..(ni + 1) * k];
        let max = row.iter().fold(f64::NEG_INFINITY, |a, v| a.max(*v));
        let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for ci in 0..k {
            let log_q = (row[ci] - max) - log_sum;
            let t = targets.get(ni, ci, 0, 0);
            loss -= t * log_q;
            grad[ni * k + ci] = (log_q.exp() - t) / nf;
        }
    }
    loss /= nf;
    if !loss.is_finite() {
        return Err(Error::shape(format!("non-finite cross-entropy loss {loss}")));
    }
    Ok((loss, Tensor4::new(y_pred.dims(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use crate::tensor::SeededRng;

    #[test]
    fn confident_correct_prediction_drives_loss_to_zero() {
        let y = Tensor4::new((1, 3, 1, 1), vec![1.0, 0.0, 1.0]).unwrap();
        let t = Tensor4::new((1, 3, 1, 1), vec![1.0, 0.0, 1.0]).unwrap();
        let (loss, _) = bce_multilabel_loss(&y, &t).unwrap();
        assert!(loss < 1e-5);

        let y = Tensor4::new((1, 2, 1, 1), vec![-30.0, 30.0]).unwrap();
        let t = Tensor4::new((1, 2, 1, 1), vec![0.0, 1.0]).unwrap();
        let (loss, _) = categorical_ce_loss(&y, &t).unwrap();
        assert!(loss < 1e-10);
    }

    #[test]
    fn uniform_binary_prediction_costs_ln2() {
        let y = Tensor4::new((1, 2, 1, 1), vec![0.4, 0.4]).unwrap();
        let t = Tensor4::new((1, 2, 1, 1), vec![0.0, 1.0]).unwrap();
        let (loss, _) = categorical_ce_loss(&y, &t).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bad_targets_rejected() {
        let y = Tensor4::zeros((1, 2, 1, 1)).unwrap();
        let t = Tensor4::new((1, 2, 1, 1), vec![0.5, 1.0]).unwrap();
        assert!(matches!(bce_multilabel_loss(&y, &t), Err(Error::Input(_))));
        let two_hot = Tensor4::new((1, 2, 1, 1), vec![1.0, 1.0]).unwrap();
        assert!(matches!(categorical_ce_loss(&y, &two_hot), Err(Error::Input(_))));
    }

    #[test]
    fn out_of_range_multilabel_scores_rejected() {
        let y = Tensor4::new((1, 2, 1, 1), vec![0.5, 1.5]).unwrap();
        let t = Tensor4::new((1, 2, 1, 1), vec![1.0, 1.0]).unwrap();
        assert!(matches!(bce_multilabel_loss(&y, &t), Err(Error::Input(_))));
    }

    #[test]
    fn gradients_match_fd() {
        let mut rng = SeededRng::new(50);
        let y = Tensor4::uniform(&mut rng, (3, 4, 1, 1), 0.05, 0.95).unwrap();
        let mut tbits = vec![0.0; 12];
        for ni in 0..3 {
            tbits[ni * 4] = 1.0;
            tbits[ni * 4 + 1 + rng.below(3)] = 1.0;
        }
        let t = Tensor4::new((3, 4, 1, 1), tbits).unwrap();
        let (_, g) = bce_multilabel_loss(&y, &t).unwrap();
        let fd = reference::fd_grad(y.data(), 1e-5, |vals| {
            bce_multilabel_loss(&Tensor4::new(y.dims(), vals.to_vec()).unwrap(), &t).unwrap().0
        });
        assert!(reference::max_rel_err(g.data(), &fd) < 1e-6);

        let y2 = Tensor4::uniform(&mut rng, (3, 2, 1, 1), -2.0, 2.0).unwrap();
        let mut onehot = vec![0.0; 6];
        for ni in 0..3 {
            onehot[ni * 2 + rng.below(2)] = 1.0;
        }
        let t2 = Tensor4::new((3, 2, 1, 1), onehot).unwrap();
        let (_, g2) = categorical_ce_loss(&y2, &t2).unwrap();
        let fd2 = reference::fd_grad(y2.data(), 1e-5, |vals| {
            categorical_ce_loss(&Tensor4::new(y2.dims(), vals.to_vec()).unwrap(), &t2).unwrap().0
        });
        assert!(reference::max_rel_err(g2.data(), &fd2) < 1e-6);
    }
}
