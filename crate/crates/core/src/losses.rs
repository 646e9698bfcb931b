//! Training objectives: cross-entropy, cross-entropy plus mean predictive
//! entropy, and cross-entropy plus expected calibration error.
//!
//! Every term returns its scalar value together with the gradient with
//! respect to the `batch × classes` probability matrix it was given.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::metrics::{confidence_bin, ece_report};
use crate::numerics::{argmax, clamped_ln, Matrix, LOG_CLAMP};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Cross-entropy only (plain MC-Dropout).
    Ce,
    /// Cross-entropy plus the mean predictive entropy.
    CePe,
    /// Cross-entropy plus expected calibration error.
    CeEce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSpec {
    pub kind: LossKind,
    pub pe_weight: f64,
    pub ece_weight: f64,
    pub ece_bins: usize,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            kind: LossKind::Ce,
            pe_weight: 1.0,
            ece_weight: 1.0,
            ece_bins: 10,
        }
    }
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.pe_weight >= 0.0 && self.pe_weight.is_finite(),
            "pe_weight must be a finite non-negative number"
        );
        ensure!(
            self.ece_weight >= 0.0 && self.ece_weight.is_finite(),
            "ece_weight must be a finite non-negative number"
        );
        ensure!(self.ece_bins >= 1, "ece_bins must be >= 1");
        Ok(())
    }
}

/// A loss value and its gradient with respect to the probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    pub value: T,
    pub grad: Matrix<T>,
}

/// Value of every component that went into a [`total_loss`] call.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown<T> {
    pub total: LossOutput<T>,
    pub ce: T,
    pub pe: Option<T>,
    pub ece: Option<T>,
}

fn check_batch<T: Scalar>(probs: &Matrix<T>) -> Result<()> {
    ensure!(probs.rows() >= 1, "loss of an empty batch");
    ensure!(probs.cols() >= 2, "need at least two classes");
    ensure!(probs.is_finite(), "probabilities must be finite");
    Ok(())
}

fn check_labels<T: Scalar>(probs: &Matrix<T>, labels: &[usize]) -> Result<()> {
    ensure!(
        labels.len() == probs.rows(),
        "{} labels for a batch of {}",
        labels.len(),
        probs.rows()
    );
    if let Some(bad) = labels.iter().find(|&&y| y >= probs.cols()) {
        return Err(crate::Error::Contract(format!(
            "label {bad} out of range for {} classes",
            probs.cols()
        )));
    }
    Ok(())
}

/// Mean of `−ln p[true class]` with `p` clamped at 1e-12.
pub fn cross_entropy<T: Scalar>(probs: &Matrix<T>, labels: &[usize]) -> Result<LossOutput<T>> {
    check_batch(probs)?;
    check_labels(probs, labels)?;
    let n = T::from_count(probs.rows());
    let floor = T::lit(LOG_CLAMP);
    let mut grad = Matrix::zeros(probs.rows(), probs.cols());
    let mut value = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        let p = probs.get(i, y);
        value -= clamped_ln(p);
        grad.set(i, y, -T::one() / (n * p.max(floor)));
    }
    Ok(LossOutput {
        value: value / n,
        grad,
    })
}

/// Mean over the batch of the per-sample entropy `−Σ_c p_c ln p_c`.
pub fn pe_term<T: Scalar>(probs: &Matrix<T>) -> Result<LossOutput<T>> {
    check_batch(probs)?;
    let n = T::from_count(probs.rows());
    let mut grad = Matrix::zeros(probs.rows(), probs.cols());
    let mut value = T::zero();
    for (p, g) in probs.as_slice().iter().zip(grad.as_mut_slice().iter_mut()) {
        let ln = clamped_ln(*p);
        value -= *p * ln;
        *g = -(ln + T::one()) / n;
    }
    Ok(LossOutput {
        value: (value / n).max(T::zero()),
        grad,
    })
}

/// Expected calibration error of the batch's max-probability confidences,
/// with a straight-through subgradient.
///
/// Bin membership and the correctness indicator are held fixed; each
/// sample's max-probability entry receives `sign(conf_m − acc_m) / n`, where
/// `m` is its bin, and `sign(0) = 0`.
pub fn ece_term<T: Scalar>(
    probs: &Matrix<T>,
    labels: &[usize],
    bins: usize,
) -> Result<LossOutput<T>> {
    check_batch(probs)?;
    check_labels(probs, labels)?;
    ensure!(bins >= 1, "need at least one bin");
    let (argmaxes, confidences): (Vec<usize>, Vec<T>) = probs.row_iter().map(argmax).unzip();
    ensure!(
        confidences.iter().all(|&c| c <= T::one()),
        "probabilities must not exceed 1"
    );
    let correct: Vec<bool> = argmaxes.iter().zip(labels).map(|(a, y)| a == y).collect();
    let report = ece_report(&confidences, &correct, bins)?;

    let n = T::from_count(probs.rows());
    let mut grad = Matrix::zeros(probs.rows(), probs.cols());
    for (i, (&c, &top)) in confidences.iter().zip(&argmaxes).enumerate() {
        let bin = &report.bins[confidence_bin(c, bins)];
        let gap = bin.conf - bin.acc;
        let sign = if gap > T::zero() {
            T::one()
        } else if gap < T::zero() {
            -T::one()
        } else {
            T::zero()
        };
        grad.set(i, top, sign / n);
    }
    Ok(LossOutput {
        value: report.ece,
        grad,
    })
}

/// The configured objective with a per-component breakdown.
pub fn total_loss_breakdown<T: Scalar>(
    spec: &LossSpec,
    probs: &Matrix<T>,
    labels: &[usize],
) -> Result<LossBreakdown<T>> {
    spec.validate()?;
    let ce = cross_entropy(probs, labels)?;
    let ce_value = ce.value;
    let (extra, weight) = match spec.kind {
        LossKind::Ce => (None, 0.0),
        LossKind::CePe => (Some(pe_term(probs)?), spec.pe_weight),
        LossKind::CeEce => (
            Some(ece_term(probs, labels, spec.ece_bins)?),
            spec.ece_weight,
        ),
    };
    let mut total = ce;
    let mut extra_value = None;
    if let Some(term) = extra {
        let w = T::lit(weight);
        total.value += w * term.value;
        for (g, &t) in total
            .grad
            .as_mut_slice()
            .iter_mut()
            .zip(term.grad.as_slice())
        {
            *g += w * t;
        }
        extra_value = Some(term.value);
    }
    Ok(LossBreakdown {
        total,
        ce: ce_value,
        pe: extra_value.filter(|_| spec.kind == LossKind::CePe),
        ece: extra_value.filter(|_| spec.kind == LossKind::CeEce),
    })
}

/// `CE`, `CE + w·PE`, or `CE + w·ECE` according to `spec.kind`.
pub fn total_loss<T: Scalar>(
    spec: &LossSpec,
    probs: &Matrix<T>,
    labels: &[usize],
) -> Result<LossOutput<T>> {
    Ok(total_loss_breakdown(spec, probs, labels)?.total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random_probs(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Matrix<f64> {
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            let row: Vec<f64> = (0..c).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = row.iter().sum();
            data.extend(row.iter().map(|v| v / s));
        }
        Matrix::from_vec(n, c, data).unwrap()
    }

    fn fd_of<F>(probs: &Matrix<f64>, mut f: F) -> Vec<f64>
    where
        F: FnMut(&Matrix<f64>) -> f64,
    {
        let (r, c) = (probs.rows(), probs.cols());
        finite_diff_grad(
            |x: &[f64]| f(&Matrix::from_vec(r, c, x.to_vec()).unwrap()),
            probs.as_slice(),
            1e-6,
        )
        .unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let out = cross_entropy(&batch(&[&[1.0, 0.0]]), &[0]).unwrap();
        assert!(out.value.abs() <= 1e-11);
        let out = cross_entropy(&batch(&[&[0.5, 0.5]]), &[0]).unwrap();
        assert!((out.value - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(out.grad.as_slice(), &[-2.0, 0.0]);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        assert!(cross_entropy(&batch(&[&[0.5, 0.5]]), &[2]).is_err());
        assert!(cross_entropy(&batch(&[&[0.5, 0.5]]), &[0, 1]).is_err());
    }

    #[test]
    fn pe_term_examples() {
        let out = pe_term(&batch(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert_eq!(out.value, 0.0);
        let out = pe_term(&batch(&[&[0.5, 0.5], &[0.5, 0.5]])).unwrap();
        assert!((out.value - 2f64.ln()).abs() < 1e-15);
        let out = pe_term(&batch(&[&[0.9, 0.1]])).unwrap();
        assert!((out.value - 0.325083).abs() < 1e-6);
    }

    #[test]
    fn ece_term_examples() {
        let out = ece_term(&batch(&[&[1.0, 0.0], &[0.0, 1.0]]), &[0, 1], 10).unwrap();
        assert_eq!(out.value, 0.0);

        // confidences 0.9 ok, 0.8 wrong, 0.4 ok, 0.3 wrong; a 0.3 maximum
        // needs at least four classes
        let probs = batch(&[
            &[0.9, 0.04, 0.03, 0.03],
            &[0.8, 0.1, 0.05, 0.05],
            &[0.4, 0.3, 0.2, 0.1],
            &[0.3, 0.25, 0.25, 0.2],
        ]);
        let out = ece_term(&probs, &[0, 1, 0, 1], 2).unwrap();
        assert_eq!(out.value, 0.25);
        // bin (0.5, 1]: conf 0.85 > acc 0.5; bin [0, 0.5]: conf 0.35 < acc 0.5
        assert_eq!(out.grad.get(0, 0), 0.25);
        assert_eq!(out.grad.get(1, 0), 0.25);
        assert_eq!(out.grad.get(2, 0), -0.25);
        assert_eq!(out.grad.get(3, 0), -0.25);
    }

    #[test]
    fn ece_term_tie_has_zero_gradient() {
        // four 0.75-confidence predictions, three correct: acc = conf = 0.75
        let probs = batch(&[&[0.75, 0.25], &[0.75, 0.25], &[0.75, 0.25], &[0.75, 0.25]]);
        let out = ece_term(&probs, &[0, 0, 0, 1], 10).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grad.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn total_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let probs = random_probs(&mut rng, 9, 3);
        let labels = [0, 1, 2, 0, 1, 2, 0, 1, 2];

        let ce = total_loss(&LossSpec::new(LossKind::Ce), &probs, &labels).unwrap();
        let pe0 = LossSpec {
            pe_weight: 0.0,
            ..LossSpec::new(LossKind::CePe)
        };
        assert_eq!(total_loss(&pe0, &probs, &labels).unwrap(), ce);

        let calibrated = batch(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let a = total_loss(&LossSpec::new(LossKind::CeEce), &calibrated, &[0, 1]).unwrap();
        let b = total_loss(&LossSpec::new(LossKind::Ce), &calibrated, &[0, 1]).unwrap();
        assert_eq!(a.value, b.value);

        let uniform = batch(&[&[0.5, 0.5]]);
        let out = total_loss(&LossSpec::new(LossKind::CePe), &uniform, &[0]).unwrap();
        assert!((out.value - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!((out.value - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn additivity_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let probs = random_probs(&mut rng, 12, 3);
            let labels: Vec<usize> = (0..12).map(|_| rng.gen_range(0..3)).collect();
            let w = rng.gen_range(0.0..3.0);
            let ce = cross_entropy(&probs, &labels).unwrap().value;
            let pe = pe_term(&probs).unwrap().value;
            let ece = ece_term(&probs, &labels, 10).unwrap().value;
            let spec_pe = LossSpec {
                pe_weight: w,
                ..LossSpec::new(LossKind::CePe)
            };
            let spec_ece = LossSpec {
                ece_weight: w,
                ..LossSpec::new(LossKind::CeEce)
            };
            assert_eq!(
                total_loss(&spec_pe, &probs, &labels).unwrap().value,
                ce + w * pe
            );
            assert_eq!(
                total_loss(&spec_ece, &probs, &labels).unwrap().value,
                ce + w * ece
            );
        }
    }

    #[test]
    fn spec_validation() {
        let bad = LossSpec {
            pe_weight: -1.0,
            ..LossSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossSpec {
            ece_bins: 0,
            ..LossSpec::default()
        };
        assert!(total_loss(&bad, &batch(&[&[0.5, 0.5]]), &[0]).is_err());
    }

    #[test]
    fn ce_and_pe_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let n = rng.gen_range(1..10);
            let c = rng.gen_range(2..6);
            let probs = random_probs(&mut rng, n, c);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();

            let ce = cross_entropy(&probs, &labels).unwrap();
            let fd = fd_of(&probs, |p| cross_entropy(p, &labels).unwrap().value);
            assert!(relative_error(ce.grad.as_slice(), &fd) < 1e-6);

            let pe = pe_term(&probs).unwrap();
            let fd = fd_of(&probs, |p| pe_term(p).unwrap().value);
            assert!(relative_error(pe.grad.as_slice(), &fd) < 1e-6);
        }
    }

    #[test]
    fn ece_subgradient_matches_finite_differences_away_from_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut checked = 0;
        while checked < 100 {
            let n = rng.gen_range(1..20);
            let c = rng.gen_range(2..5);
            let bins = rng.gen_range(1..15);
            let probs = random_probs(&mut rng, n, c);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            if !away_from_kinks(&probs, &labels, bins) {
                continue;
            }
            let out = ece_term(&probs, &labels, bins).unwrap();
            let fd = fd_of(&probs, |p| ece_term(p, &labels, bins).unwrap().value);
            assert!(relative_error(out.grad.as_slice(), &fd) < 1e-4);
            checked += 1;
        }
    }

    /// No confidence within 1e-3 of a bin edge, a clear argmax, no acc = conf tie.
    fn away_from_kinks(probs: &Matrix<f64>, labels: &[usize], bins: usize) -> bool {
        let mut confs = Vec::new();
        for row in probs.row_iter() {
            let mut sorted = row.to_vec();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if sorted[0] - sorted[1] < 1e-3 {
                return false;
            }
            let scaled = sorted[0] * bins as f64;
            if (scaled - scaled.round()).abs() < 1e-3 * bins as f64 {
                return false;
            }
            confs.push(sorted[0]);
        }
        let correct: Vec<bool> = probs
            .row_iter()
            .zip(labels)
            .map(|(r, &y)| argmax(r).0 == y)
            .collect();
        let report = ece_report(&confs, &correct, bins).unwrap();
        report
            .bins
            .iter()
            .all(|b| b.count == 0 || (b.acc - b.conf).abs() > 1e-3)
    }
}
