//! Deterministic generators for the 2D synthetic datasets and latent priors,
//! plus CSV import/export of point clouds.
//!
//! Every generator is a pure function of `(n, seed)`: the same arguments
//! reproduce the same cloud bit for bit.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Matrix;

/// Divisor that brings the 5x5 Gaussian grid to unit per-coordinate variance.
pub const GAUSS25_SCALE: f64 = 2.828;
/// Standard deviation of each Gaussian mode before rescaling.
pub const GAUSS25_MODE_STD: f64 = 0.1;
/// Divisor applied to raw swiss-roll coordinates.
pub const SWISSROLL_SCALE: f64 = 7.5;

/// A finite set of same-dimension points, optionally labeled.
#[derive(Debug, Clone)]
pub struct PointCloud {
    pub points: Matrix,
    pub labels: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn unlabeled(points: Matrix) -> Self {
        PointCloud {
            points,
            labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    /// Rows at `idx`, labels carried along.
    pub fn select(&self, idx: &[usize]) -> PointCloud {
        let points = self.points.select(Axis(0), idx);
        let labels = self
            .labels
            .as_ref()
            .map(|ls| idx.iter().map(|&i| ls[i]).collect());
        PointCloud { points, labels }
    }

    /// Write `x0,x1[,label]` rows with a header line.
    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let dim = self.points.ncols();
        let mut header: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
        if self.labels.is_some() {
            header.push("label".into());
        }
        writeln!(out, "{}", header.join(","))?;
        for (i, row) in self.points.rows().into_iter().enumerate() {
            let mut fields: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            if let Some(ls) = &self.labels {
                fields.push(ls[i].to_string());
            }
            writeln!(out, "{}", fields.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<P: AsRef<Path>>(path: P) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty csv".into()))??;
        let cols: Vec<&str> = header.split(',').collect();
        let labeled = cols.last() == Some(&"label");
        let dim = if labeled { cols.len() - 1 } else { cols.len() };
        if dim == 0 {
            return Err(Error::Parse("csv has no coordinate columns".into()));
        }
        let mut flat = Vec::new();
        let mut labels = Vec::new();
        let mut n = 0usize;
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(Error::Parse(format!(
                    "csv row has {} fields, header has {}",
                    fields.len(),
                    cols.len()
                )));
            }
            for f in &fields[..dim] {
                flat.push(
                    f.parse::<f64>()
                        .map_err(|_| Error::Parse(format!("bad float `{f}`")))?,
                );
            }
            if labeled {
                labels.push(
                    fields[dim]
                        .parse::<usize>()
                        .map_err(|_| Error::Parse(format!("bad label `{}`", fields[dim])))?,
                );
            }
            n += 1;
        }
        let points = Matrix::from_shape_vec((n, dim), flat).expect("consistent row width");
        Ok(PointCloud {
            points,
            labels: if labeled { Some(labels) } else { None },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    UniformCube,
    StandardNormal,
}

/// Latent prior: `U([-1,1]^dim)` or `N(0, I_dim)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub kind: PriorKind,
    pub dim: usize,
}

impl PriorSpec {
    pub fn uniform(dim: usize) -> Self {
        PriorSpec {
            kind: PriorKind::UniformCube,
            dim,
        }
    }

    pub fn normal(dim: usize) -> Self {
        PriorSpec {
            kind: PriorKind::StandardNormal,
            dim,
        }
    }
}

/// Centers of the 25-Gaussian grid after rescaling, row-major over the
/// `{-4,-2,0,2,4}^2` grid (index = 5*row + col as `(x, y) = (col, row)`).
pub fn gauss25_centers() -> Matrix {
    let mut c = Matrix::zeros((25, 2));
    for i in 0..25 {
        c[(i, 0)] = (-4.0 + 2.0 * (i % 5) as f64) / GAUSS25_SCALE;
        c[(i, 1)] = (-4.0 + 2.0 * (i / 5) as f64) / GAUSS25_SCALE;
    }
    c
}

/// Mixture of 25 Gaussians on the scaled grid; unit data variance overall.
pub fn gen_25gaussians(n: usize, seed: u64) -> PointCloud {
    let cloud = labeled_gaussians(n, 25, seed);
    PointCloud::unlabeled(cloud.points)
}

/// Same mixture restricted to the first `k_classes` modes, with the mode
/// index emitted as label.
pub fn gen_labeled_gaussians(n: usize, k_classes: usize, seed: u64) -> Result<PointCloud> {
    if !(1..=25).contains(&k_classes) {
        return Err(Error::Contract(format!(
            "k_classes must be in 1..=25, got {k_classes}"
        )));
    }
    Ok(labeled_gaussians(n, k_classes, seed))
}

fn labeled_gaussians(n: usize, k: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, GAUSS25_MODE_STD).expect("valid std");
    let centers = gauss25_centers();
    let mut points = Matrix::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mode = rng.random_range(0..k);
        let nx = noise.sample(&mut rng);
        let ny = noise.sample(&mut rng);
        points[(i, 0)] = centers[(mode, 0)] + nx / GAUSS25_SCALE;
        points[(i, 1)] = centers[(mode, 1)] + ny / GAUSS25_SCALE;
        labels.push(mode);
    }
    PointCloud {
        points,
        labels: Some(labels),
    }
}

/// 2D spiral `(t cos t, t sin t)` with `t ~ U[1.5pi, 4.5pi]`, Gaussian noise
/// added before the final division by 7.5.
pub fn gen_swissroll(n: usize, noise: f64, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, 1.0).expect("valid std");
    let mut points = Matrix::zeros((n, 2));
    let lo = 1.5 * std::f64::consts::PI;
    let hi = 4.5 * std::f64::consts::PI;
    for i in 0..n {
        let t: f64 = rng.random_range(lo..hi);
        let nx = gauss.sample(&mut rng) * noise;
        let ny = gauss.sample(&mut rng) * noise;
        points[(i, 0)] = (t * t.cos() + nx) / SWISSROLL_SCALE;
        points[(i, 1)] = (t * t.sin() + ny) / SWISSROLL_SCALE;
    }
    PointCloud::unlabeled(points)
}

/// IID draws from a latent prior.
pub fn sample_prior(spec: &PriorSpec, n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_prior_with(spec, n, &mut rng)
}

/// Prior draws from a caller-managed RNG stream.
pub fn sample_prior_with<R: Rng>(spec: &PriorSpec, n: usize, rng: &mut R) -> PointCloud {
    let mut points = Matrix::zeros((n, spec.dim));
    match spec.kind {
        PriorKind::UniformCube => {
            for i in 0..n {
                for j in 0..spec.dim {
                    points[(i, j)] = rng.random_range(-1.0..=1.0);
                }
            }
        }
        PriorKind::StandardNormal => {
            let gauss = Normal::new(0.0, 1.0).expect("valid std");
            for i in 0..n {
                for j in 0..spec.dim {
                    points[(i, j)] = gauss.sample(rng);
                }
            }
        }
    }
    PointCloud::unlabeled(points)
}

/// Number of `centers` rows that have at least one sample within `radius`.
pub fn mode_coverage(samples: &Matrix, centers: &Matrix, radius: f64) -> usize {
    let r2 = radius * radius;
    centers
        .rows()
        .into_iter()
        .filter(|c| {
            samples.rows().into_iter().any(|s| {
                let dx = s[0] - c[0];
                let dy = s[1] - c[1];
                dx * dx + dy * dy <= r2
            })
        })
        .count()
}
