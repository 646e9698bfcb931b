//! Seeded synthetic 2-D classification data and train/test splitting.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

/// How a dataset was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: String,
    pub n: usize,
    /// Noise standard deviation (two moons) or cluster std (blobs).
    pub noise: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub centers: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(
        points: Vec<[f64; 2]>,
        labels: Vec<usize>,
        n_classes: usize,
        meta: DatasetMeta,
    ) -> Result<Self> {
        ensure!(
            points.len() == labels.len(),
            "{} points but {} labels",
            points.len(),
            labels.len()
        );
        ensure!(n_classes >= 2, "need at least two classes");
        ensure!(
            labels.iter().all(|&y| y < n_classes),
            "labels must lie in [0, {n_classes})"
        );
        ensure!(
            points.iter().flatten().all(|v| v.is_finite()),
            "coordinates must be finite"
        );
        Ok(Self {
            points,
            labels,
            n_classes,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points as an `n × 2` matrix in the requested precision.
    pub fn features<T: Scalar>(&self) -> Matrix<T> {
        let data = self.points.iter().flatten().map(|&v| T::lit(v)).collect();
        Matrix::from_vec(self.len(), 2, data).expect("finite points")
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            meta: self.meta.clone(),
        }
    }

    /// Writes `x1,x2,label` rows with a header.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "x1,x2,label")?;
        for (p, y) in self.points.iter().zip(&self.labels) {
            writeln!(w, "{},{},{}", p[0], p[1], y)?;
        }
        Ok(())
    }

    /// Parses the CSV written by [`Dataset::write_csv`]. The class count is
    /// taken from `meta` when given, otherwise from the largest label.
    pub fn read_csv<R: Read>(mut r: R, meta: Option<DatasetMeta>) -> Result<Self> {
        let mut text = String::new();
        r.read_to_string(&mut text)
            .map_err(|e| Error::Contract(format!("reading dataset: {e}")))?;
        let mut lines = text.lines();
        ensure!(
            lines.next().map(str::trim) == Some("x1,x2,label"),
            "dataset CSV must start with the header x1,x2,label"
        );
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::Contract(format!("malformed dataset row {}: {line}", lineno + 2));
            let mut cols = line.split(',').map(str::trim);
            let x1: f64 = cols.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let x2: f64 = cols.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let y: usize = cols.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            ensure!(
                cols.next().is_none(),
                "extra columns in dataset row {}",
                lineno + 2
            );
            points.push([x1, x2]);
            labels.push(y);
        }
        let max_label = labels.iter().copied().max().unwrap_or(0);
        let n_classes = meta
            .as_ref()
            .and_then(|m| (!m.centers.is_empty()).then_some(m.centers.len()))
            .unwrap_or(2)
            .max(max_label + 1);
        let meta = meta.unwrap_or_else(|| DatasetMeta {
            generator: "file".into(),
            n: points.len(),
            noise: 0.0,
            seed: 0,
            centers: Vec::new(),
        });
        Self::new(points, labels, n_classes, meta)
    }
}

/// Two interleaving half circles.
///
/// `⌈n/2⌉` points lie on `(cos t, sin t)` with label 0 and `⌊n/2⌋` on
/// `(1 − cos t, 0.5 − sin t)` with label 1, `t` evenly spaced over `[0, π]`,
/// each coordinate perturbed by `N(0, noise²)`.
pub fn two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    ensure!(n >= 2, "two moons needs n >= 2, got {n}");
    ensure!(noise >= 0.0 && noise.is_finite(), "noise must be >= 0");
    let upper = n.div_ceil(2);
    let lower = n / 2;
    let angle = |i: usize, count: usize| {
        if count <= 1 {
            0.0
        } else {
            PI * i as f64 / (count - 1) as f64
        }
    };
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..upper {
        let t = angle(i, upper);
        points.push([t.cos(), t.sin()]);
        labels.push(0);
    }
    for i in 0..lower {
        let t = angle(i, lower);
        points.push([1.0 - t.cos(), 0.5 - t.sin()]);
        labels.push(1);
    }
    if noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise).expect("valid std");
        for p in &mut points {
            p[0] += normal.sample(&mut rng);
            p[1] += normal.sample(&mut rng);
        }
    }
    Dataset::new(
        points,
        labels,
        2,
        DatasetMeta {
            generator: "two_moons".into(),
            n,
            noise,
            seed,
            centers: Vec::new(),
        },
    )
}

/// Default blob centers.
pub const DEFAULT_CENTERS: [[f64; 2]; 3] = [[-3.0, 0.0], [3.0, 0.0], [0.0, 4.0]];

/// Isotropic Gaussian clusters; point `i` belongs to center `i mod k`.
pub fn blobs(n: usize, centers: &[[f64; 2]], std: f64, seed: u64) -> Result<Dataset> {
    ensure!(!centers.is_empty(), "blobs needs at least one center");
    ensure!(
        n >= centers.len(),
        "blobs needs n >= {} centers, got {n}",
        centers.len()
    );
    ensure!(std > 0.0 && std.is_finite(), "blob std must be > 0");
    ensure!(
        centers.iter().flatten().all(|v| v.is_finite()),
        "centers must be finite"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("valid std");
    let (points, labels) = (0..n)
        .map(|i| {
            let k = i % centers.len();
            let c = centers[k];
            (
                [
                    c[0] + normal.sample(&mut rng),
                    c[1] + normal.sample(&mut rng),
                ],
                k,
            )
        })
        .unzip();
    Dataset::new(
        points,
        labels,
        centers.len().max(2),
        DatasetMeta {
            generator: "blobs".into(),
            n,
            noise: std,
            seed,
            centers: centers.to_vec(),
        },
    )
}

/// Seeded random partition into `⌊n(1−f)⌋` training and the remaining test points.
pub fn split(d: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    ensure!(
        test_fraction > 0.0 && test_fraction < 1.0,
        "test fraction must lie in (0, 1), got {test_fraction}"
    );
    let n = d.len();
    let n_train = (n as f64 * (1.0 - test_fraction)).floor() as usize;
    ensure!(
        n_train >= 1 && n_train < n,
        "split of {n} points at {test_fraction} leaves an empty part"
    );
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((d.subset(&idx[..n_train]), d.subset(&idx[n_train..])))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_moons_two_points() {
        let d = two_moons(2, 0.0, 1).unwrap();
        assert_eq!(d.points, vec![[1.0, 0.0], [0.0, 0.5]]);
        assert_eq!(d.labels, vec![0, 1]);
    }

    #[test]
    fn noiseless_moons_lie_on_arcs() {
        let d = two_moons(501, 0.0, 3).unwrap();
        for (p, &y) in d.points.iter().zip(&d.labels) {
            if y == 0 {
                assert!((p[0] * p[0] + p[1] * p[1] - 1.0).abs() < 1e-9);
            } else {
                let (x, yy) = (1.0 - p[0], 0.5 - p[1]);
                assert!((x * x + yy * yy - 1.0).abs() < 1e-9);
            }
        }
        assert_eq!(d.labels.iter().filter(|&&y| y == 0).count(), 251);
    }

    #[test]
    fn moons_are_deterministic() {
        assert_eq!(
            two_moons(100, 0.2, 9).unwrap(),
            two_moons(100, 0.2, 9).unwrap()
        );
        assert_ne!(
            two_moons(100, 0.2, 9).unwrap(),
            two_moons(100, 0.2, 10).unwrap()
        );
        assert!(two_moons(1, 0.2, 9).is_err());
    }

    #[test]
    fn moons_noise_level_is_respected() {
        let clean = two_moons(10_000, 0.0, 0).unwrap();
        let noisy = two_moons(10_000, 0.2, 4).unwrap();
        let residuals: Vec<f64> = clean
            .points
            .iter()
            .zip(&noisy.points)
            .flat_map(|(a, b)| [b[0] - a[0], b[1] - a[1]])
            .collect();
        let sd = (residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64).sqrt();
        assert!((sd - 0.2).abs() < 0.05 * 0.2, "sd {sd}");
    }

    #[test]
    fn blobs_examples() {
        let d = blobs(9, &DEFAULT_CENTERS, 1e-9, 2).unwrap();
        for k in 0..3 {
            assert_eq!(d.labels.iter().filter(|&&y| y == k).count(), 3);
        }
        for (p, &y) in d.points.iter().zip(&d.labels) {
            let c = DEFAULT_CENTERS[y];
            assert!((p[0] - c[0]).abs() < 1e-6 && (p[1] - c[1]).abs() < 1e-6);
        }
        assert!(blobs(5, &[], 1.0, 0).is_err());
        assert!(blobs(2, &DEFAULT_CENTERS, 1.0, 0).is_err());
        assert!(blobs(5, &DEFAULT_CENTERS, 0.0, 0).is_err());
    }

    #[test]
    fn blob_sample_mean_converges() {
        let center = [1.5, -2.0];
        let std = 0.8;
        let d = blobs(10_000, &[center], std, 17).unwrap();
        let tol = 3.0 * std / (10_000f64).sqrt();
        for axis in 0..2 {
            let mean = d.points.iter().map(|p| p[axis]).sum::<f64>() / 10_000.0;
            assert!((mean - center[axis]).abs() < tol);
        }
    }

    #[test]
    fn split_sizes_and_partition() {
        let d = two_moons(1000, 0.2, 1).unwrap();
        let (train, test) = split(&d, 0.3, 5).unwrap();
        assert_eq!((train.len(), test.len()), (700, 300));

        // points are distinct (noise > 0), so membership identifies indices
        let key = |p: &[f64; 2]| (p[0].to_bits(), p[1].to_bits());
        let mut seen: Vec<_> = train.points.iter().chain(&test.points).map(key).collect();
        seen.sort();
        let mut all: Vec<_> = d.points.iter().map(key).collect();
        all.sort();
        assert_eq!(seen, all);

        assert_eq!(split(&d, 0.3, 5).unwrap(), (train, test));
        assert!(split(&d, 0.0, 5).is_err());
        assert!(split(&d, 1.0, 5).is_err());
        assert!(split(&two_moons(2, 0.0, 0).unwrap(), 0.9, 0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let d = blobs(12, &DEFAULT_CENTERS, 0.5, 3).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(buf.as_slice(), Some(d.meta.clone())).unwrap();
        assert_eq!(back, d);
        assert!(Dataset::read_csv("a,b\n1,2".as_bytes(), None).is_err());
        assert!(Dataset::read_csv("x1,x2,label\n1,zz,0".as_bytes(), None).is_err());
    }
}
