//! Evaluation-time uncertainty measures: predictive entropy, expected
//! calibration error, the uncertainty confusion matrix, and per-group
//! entropy statistics.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::{clamped_ln, DoubleWord, ProbVector};
use crate::scalar::Scalar;

/// `−Σ p ln p` with `0 · ln 0 = 0`, optionally divided by `ln C`.
pub fn predictive_entropy<T: Scalar>(p: &ProbVector<T>, normalize: bool) -> T {
    let h = entropy(p.as_slice());
    if normalize {
        (h / T::from_count(p.len()).ln()).min(T::one())
    } else {
        h
    }
}

/// Entropy of a raw probability slice (clamped logarithm). Never negative.
pub(crate) fn entropy<T: Scalar>(p: &[T]) -> T {
    let h: T = p
        .iter()
        .filter(|&&v| v > T::zero())
        .map(|&v| -v * clamped_ln(v))
        .sum();
    h.max(T::zero())
}

/// Zero-based bin for confidence `c` among `bins` equal-width bins:
/// bin `m` (1-based) holds `(m−1)/M < c ≤ m/M`, and `c = 0` goes to bin 1.
///
/// The comparison is exact in the real numbers: `⌈c·M⌉` is recovered from the
/// rounded product and its FMA residual, so a confidence whose float is a
/// hair above `m/M` lands in bin `m + 1` even when `m as f64 / M as f64`
/// rounds up to it.
pub fn confidence_bin<T: Scalar>(c: T, bins: usize) -> usize {
    let m = T::from_count(bins);
    let p = c * m;
    let residual = c.mul_add(m, -p);
    let ceil = if p.fract() == T::zero() && residual > T::zero() {
        p + T::one()
    } else {
        p.ceil()
    };
    ceil.to_usize().unwrap_or(0).saturating_sub(1).min(bins - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EceBin<T> {
    pub count: usize,
    /// Fraction correct in the bin; 0 for an empty bin.
    pub acc: T,
    /// Mean confidence in the bin; 0 for an empty bin.
    pub conf: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct EceReport<T> {
    pub bins: Vec<EceBin<T>>,
    pub ece: T,
    pub n: usize,
}

/// Equal-width-bin ECE: `Σ_m |B_m|/n · |acc(B_m) − conf(B_m)|`.
///
/// Evaluated as `(1/n) Σ_m |hits_m − Σ_{i∈B_m} c_i|` in double-word
/// arithmetic, so the result is the exact ECE of the given inputs rounded
/// once (0.25 for the textbook 0.9/0.8/0.4/0.3 case, where naive summation
/// returns 0.25000000000000006).
pub fn ece_report<T: Scalar>(
    confidences: &[T],
    correct: &[bool],
    bins: usize,
) -> Result<EceReport<T>> {
    ensure!(
        confidences.len() == correct.len(),
        "{} confidences but {} correctness flags",
        confidences.len(),
        correct.len()
    );
    ensure!(!confidences.is_empty(), "ECE of an empty batch");
    ensure!(bins >= 1, "need at least one bin");
    ensure!(
        confidences.iter().all(|&c| c >= T::zero() && c <= T::one()),
        "confidences must lie in [0, 1]"
    );
    let n = confidences.len();
    let mut counts = vec![0usize; bins];
    let mut hits = vec![0usize; bins];
    let mut conf_sums = vec![DoubleWord::<T>::default(); bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = confidence_bin(c, bins);
        counts[b] += 1;
        hits[b] += usize::from(ok);
        conf_sums[b].add(c);
    }
    let mut total_gap = DoubleWord::default();
    let bins = (0..bins)
        .map(|b| {
            if counts[b] == 0 {
                return EceBin {
                    count: 0,
                    acc: T::zero(),
                    conf: T::zero(),
                };
            }
            let mut gap = DoubleWord::new(T::from_count(hits[b]));
            gap.add_word(-conf_sums[b]);
            total_gap.add_word(gap.abs());
            EceBin {
                count: counts[b],
                acc: T::from_count(hits[b]) / T::from_count(counts[b]),
                conf: conf_sums[b].div_count(counts[b]),
            }
        })
        .collect();
    Ok(EceReport {
        bins,
        ece: total_gap.div_count(n).min(T::one()),
        n,
    })
}

/// Counts of the 2×2 table crossing correctness with certain/uncertain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UncertaintyConfusion {
    /// incorrect and uncertain
    pub tu: usize,
    /// correct and certain
    pub tc: usize,
    /// correct and uncertain
    pub fu: usize,
    /// incorrect and certain
    pub fc: usize,
}

impl UncertaintyConfusion {
    pub fn total(&self) -> usize {
        self.tu + self.tc + self.fu + self.fc
    }

    pub fn uncertain(&self) -> usize {
        self.tu + self.fu
    }
}

/// A sample is uncertain iff its (normalized) uncertainty exceeds `threshold`.
pub fn uncertainty_confusion<T: Scalar>(
    correct: &[bool],
    uncertainty: &[T],
    threshold: T,
) -> Result<UncertaintyConfusion> {
    ensure!(
        correct.len() == uncertainty.len(),
        "{} correctness flags but {} uncertainty values",
        correct.len(),
        uncertainty.len()
    );
    ensure!(
        threshold >= T::zero() && threshold <= T::one(),
        "threshold must lie in [0, 1]"
    );
    ensure!(
        uncertainty.iter().all(|&u| u >= T::zero() && u <= T::one()),
        "uncertainty values must be normalized to [0, 1]"
    );
    let mut cm = UncertaintyConfusion {
        tu: 0,
        tc: 0,
        fu: 0,
        fc: 0,
    };
    for (&ok, &u) in correct.iter().zip(uncertainty) {
        match (ok, u > threshold) {
            (true, false) => cm.tc += 1,
            (true, true) => cm.fu += 1,
            (false, true) => cm.tu += 1,
            (false, false) => cm.fc += 1,
        }
    }
    Ok(cm)
}

/// Ratios derived from an [`UncertaintyConfusion`]. `None` marks a zero
/// denominator, which is distinct from a metric value of 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyMetrics {
    pub uacc: Option<f64>,
    pub usen: Option<f64>,
    pub uspe: Option<f64>,
    pub upre: Option<f64>,
}

pub fn uncertainty_metrics(cm: &UncertaintyConfusion) -> UncertaintyMetrics {
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    UncertaintyMetrics {
        uacc: ratio(cm.tu + cm.tc, cm.total()),
        usen: ratio(cm.tu, cm.tu + cm.fc),
        uspe: ratio(cm.tc, cm.tc + cm.fu),
        upre: ratio(cm.tu, cm.tu + cm.fu),
    }
}

/// Mean predictive entropy of correct (`mu_correct`) and incorrect
/// (`mu_incorrect`) predictions. An empty group leaves its mean undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub mu_correct: Option<f64>,
    pub mu_incorrect: Option<f64>,
    /// `mu_incorrect − mu_correct`
    pub distance: Option<f64>,
    pub n_correct: usize,
    pub n_incorrect: usize,
}

pub fn group_stats<T: Scalar>(pe: &[T], correct: &[bool]) -> Result<GroupStats> {
    ensure!(
        pe.len() == correct.len(),
        "{} entropies but {} correctness flags",
        pe.len(),
        correct.len()
    );
    let (mut sum_ok, mut sum_bad, mut n_ok, mut n_bad) = (0.0, 0.0, 0usize, 0usize);
    for (&h, &ok) in pe.iter().zip(correct) {
        if ok {
            sum_ok += h.as_f64();
            n_ok += 1;
        } else {
            sum_bad += h.as_f64();
            n_bad += 1;
        }
    }
    let mu_correct = (n_ok > 0).then(|| sum_ok / n_ok as f64);
    let mu_incorrect = (n_bad > 0).then(|| sum_bad / n_bad as f64);
    Ok(GroupStats {
        mu_correct,
        mu_incorrect,
        distance: mu_incorrect.zip(mu_correct).map(|(b, a)| b - a),
        n_correct: n_ok,
        n_incorrect: n_bad,
    })
}
