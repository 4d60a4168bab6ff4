//! Effective Lipschitz estimation and discriminator-guided transport of
//! samples, in target space and in latent space.
//!
//! The transported objective is `||x - y + delta||_2 - D(x)/K` (target
//! space) or `||z - z_y + delta||_2 - D(G(z))/k` (latent space), minimized by
//! gradient descent from the sample itself. The naive baselines drop the
//! proximity term and just ascend `D/K`. Latent descent respects the prior
//! support: gradients are projected onto the sphere tangent for a standard
//! normal prior, and iterates are clipped to the cube for a uniform prior.

use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PointCloud, PriorKind, PriorSpec};
use crate::error::{Error, Result};
use crate::nn::{MlpNetwork, Network};
use crate::optim::{OptSpec, Optimizer};
use crate::tape::{Matrix, Tape, Var};

/// Pairs closer than this are skipped by the ratio estimators.
pub const COINCIDENT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateScope {
    Target,
    Latent,
    Conditional(usize),
}

/// Empirical Lipschitz constant: max over sampled pair ratios, averaged over
/// independent trials. Records the protocol that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub value: f64,
    pub n_pairs: usize,
    pub n_trials: usize,
    pub scope: EstimateScope,
}

/// Either a measured estimate or a fixed constant (the `k = 1` shortcut).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum KSpec {
    Fixed(f64),
    Estimated(LipschitzEstimate),
}

impl KSpec {
    pub fn value(&self) -> f64 {
        match *self {
            KSpec::Fixed(v) => v,
            KSpec::Estimated(e) => e.value,
        }
    }
}

/// Knobs of one transport run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransportConfig {
    /// Descent learning rate.
    pub eps: f64,
    /// Overflow offset added inside the proximity norm, replicated to every
    /// coordinate.
    pub delta: f64,
    pub n_updates: usize,
    pub k: KSpec,
    pub optimizer: OptSpec,
    /// Prior support rules for latent-space transport; ignored in target
    /// space.
    pub prior: Option<PriorSpec>,
}

impl TransportConfig {
    /// Target-space defaults for 2D data: 100 Adam(0.01, 0, 0.9) updates.
    pub fn target_2d(k: KSpec) -> Self {
        TransportConfig {
            eps: 0.01,
            delta: 0.001,
            n_updates: 100,
            k,
            optimizer: OptSpec::adam(0.01, 0.0, 0.9),
            prior: None,
        }
    }

    /// Latent-space defaults: 20 SGD steps at 0.01.
    pub fn latent_default(k: KSpec, prior: PriorSpec) -> Self {
        TransportConfig {
            eps: 0.01,
            delta: 0.001,
            n_updates: 20,
            k,
            optimizer: OptSpec::Sgd { lr: 0.01 },
            prior: Some(prior),
        }
    }

    fn optimizer_with_lr(&self) -> OptSpec {
        match self.optimizer {
            OptSpec::Sgd { .. } => OptSpec::Sgd { lr: self.eps },
            adam => adam,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.eps <= 0.0 {
            return Err(Error::Contract("eps must be positive".into()));
        }
        if self.delta <= 0.0 {
            return Err(Error::Contract("delta must be positive".into()));
        }
        let k = self.k.value();
        if !(k > 0.0) || !k.is_finite() {
            return Err(Error::Contract(format!("K must be positive, got {k}")));
        }
        Ok(())
    }
}

/// Result of transporting a batch. Rows are ordered as the input batch.
#[derive(Debug, Clone)]
pub struct TransportOutcome {
    /// Transported points in data space.
    pub points: Matrix,
    /// Final latent iterates for latent-space modes.
    pub z_final: Option<Matrix>,
    pub objective_initial: Vec<f64>,
    pub objective_final: Vec<f64>,
    /// Data-space displacement from the untransported sample.
    pub displacement_l2: Vec<f64>,
    /// Per-sample flag: descent hit a non-finite value and the sample was
    /// left at its last finite iterate.
    pub warnings: Vec<bool>,
}

impl TransportOutcome {
    pub fn warning_count(&self) -> usize {
        self.warnings.iter().filter(|&&w| w).count()
    }

    pub fn warning_rate(&self) -> f64 {
        if self.warnings.is_empty() {
            0.0
        } else {
            self.warning_count() as f64 / self.warnings.len() as f64
        }
    }

    /// `sample_id,objective_initial,objective_final,displacement_l2,x0..`
    pub fn write_report_csv<P: AsRef<std::path::Path>>(&self, path: P) -> Result<()> {
        use std::io::Write;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let dim = self.points.ncols();
        let coords: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
        writeln!(
            out,
            "sample_id,objective_initial,objective_final,displacement_l2,{}",
            coords.join(",")
        )?;
        for i in 0..self.points.nrows() {
            let cs: Vec<String> = self.points.row(i).iter().map(|v| format!("{v}")).collect();
            writeln!(
                out,
                "{},{},{},{},{}",
                i,
                self.objective_initial[i],
                self.objective_final[i],
                self.displacement_l2[i],
                cs.join(",")
            )?;
        }
        Ok(())
    }
}

// --- Lipschitz estimation ----------------------------------------------------

fn max_ratio_over_pairs(
    f_left: &Matrix,
    f_right: &Matrix,
    x_left: &Matrix,
    x_right: &Matrix,
) -> Option<f64> {
    let mut best: Option<f64> = None;
    for i in 0..x_left.nrows() {
        let df = (f_left[(i, 0)] - f_right[(i, 0)]).abs();
        let mut d2 = 0.0;
        for j in 0..x_left.ncols() {
            let d = x_left[(i, j)] - x_right[(i, j)];
            d2 += d * d;
        }
        let dist = d2.sqrt();
        if dist < COINCIDENT_EPS {
            continue;
        }
        let r = df / dist;
        best = Some(best.map_or(r, |b: f64| b.max(r)));
    }
    best
}

/// Max `|D(x) - D(y)| / ||x - y||` over pairs drawn from a generated sample
/// cloud; mean over `n_trials` independent trials.
pub fn estimate_k_eff_target(
    d: &dyn Network,
    samples: &PointCloud,
    n_pairs: usize,
    n_trials: usize,
    seed: u64,
) -> Result<LipschitzEstimate> {
    if n_pairs == 0 || n_trials == 0 {
        return Err(Error::Contract("n_pairs and n_trials must be >= 1".into()));
    }
    if samples.len() < 2 {
        return Err(Error::Contract(
            "need at least two samples to form pairs".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..n_trials {
        let idx_a: Vec<usize> = (0..n_pairs)
            .map(|_| rng.random_range(0..samples.len()))
            .collect();
        let idx_b: Vec<usize> = (0..n_pairs)
            .map(|_| rng.random_range(0..samples.len()))
            .collect();
        let xa = samples.points.select(Axis(0), &idx_a);
        let xb = samples.points.select(Axis(0), &idx_b);
        let fa = d.forward(&xa)?;
        let fb = d.forward(&xb)?;
        let best = max_ratio_over_pairs(&fa, &fb, &xa, &xb).ok_or_else(|| {
            Error::Degenerate("all sampled pairs coincide; ratio undefined".into())
        })?;
        acc += best;
    }
    Ok(LipschitzEstimate {
        value: acc / n_trials as f64,
        n_pairs,
        n_trials,
        scope: EstimateScope::Target,
    })
}

/// Max `|D(G(z)) - D(G(z'))| / ||z - z'||` over fresh prior pairs.
pub fn estimate_k_eff_latent(
    g: &dyn Network,
    d: &dyn Network,
    prior: &PriorSpec,
    n_pairs: usize,
    n_trials: usize,
    seed: u64,
) -> Result<LipschitzEstimate> {
    estimate_latent_scoped(g, d, prior, n_pairs, n_trials, seed, EstimateScope::Latent)
}

fn estimate_latent_scoped(
    g: &dyn Network,
    d: &dyn Network,
    prior: &PriorSpec,
    n_pairs: usize,
    n_trials: usize,
    seed: u64,
    scope: EstimateScope,
) -> Result<LipschitzEstimate> {
    if n_pairs == 0 || n_trials == 0 {
        return Err(Error::Contract("n_pairs and n_trials must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..n_trials {
        let za = crate::data::sample_prior_with(prior, n_pairs, &mut rng).points;
        let zb = crate::data::sample_prior_with(prior, n_pairs, &mut rng).points;
        let fa = d.forward(&g.forward(&za)?)?;
        let fb = d.forward(&g.forward(&zb)?)?;
        let best = max_ratio_over_pairs(&fa, &fb, &za, &zb).ok_or_else(|| {
            Error::Degenerate("all sampled prior pairs coincide; ratio undefined".into())
        })?;
        acc += best;
    }
    Ok(LipschitzEstimate {
        value: acc / n_trials as f64,
        n_pairs,
        n_trials,
        scope,
    })
}

/// Latent estimate with the networks conditioned on a fixed label.
pub fn estimate_k_eff_conditional(
    g: &MlpNetwork,
    d: &MlpNetwork,
    label: usize,
    n_classes: usize,
    prior: &PriorSpec,
    n_pairs: usize,
    n_trials: usize,
    seed: u64,
) -> Result<LipschitzEstimate> {
    let gc = g.condition(label, n_classes);
    let dc = d.condition(label, n_classes);
    estimate_latent_scoped(
        &gc,
        &dc,
        prior,
        n_pairs,
        n_trials,
        seed,
        EstimateScope::Conditional(label),
    )
}

// --- Descent core ------------------------------------------------------------

enum Space<'a> {
    /// Optimize data-space points directly against `d`.
    Target { d: &'a dyn Network },
    /// Optimize latent points against `d . g`.
    Latent {
        g: &'a dyn Network,
        d: &'a dyn Network,
    },
}

impl Space<'_> {
    fn objective_tape(&self, tape: &mut Tape, x: Var, k: f64, prox: Option<Var>) -> Var {
        let dv = match self {
            Space::Target { d } => d.forward_frozen(tape, x),
            Space::Latent { g, d } => {
                let y = g.forward_frozen(tape, x);
                d.forward_frozen(tape, y)
            }
        };
        let scaled = tape.scale(dv, -1.0 / k);
        match prox {
            Some(p) => tape.add(p, scaled),
            None => scaled,
        }
    }

    fn data_points(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Space::Target { .. } => Ok(x.clone()),
            Space::Latent { g, .. } => g.forward(x),
        }
    }

    fn objective_plain(
        &self,
        x: &Matrix,
        start: &Matrix,
        delta: f64,
        k: f64,
        proximity: bool,
    ) -> Result<Vec<f64>> {
        let dv = match self {
            Space::Target { d } => d.forward(x)?,
            Space::Latent { g, d } => d.forward(&g.forward(x)?)?,
        };
        let mut out = Vec::with_capacity(x.nrows());
        for i in 0..x.nrows() {
            let mut prox = 0.0;
            if proximity {
                let mut d2 = 0.0;
                for j in 0..x.ncols() {
                    let dd = x[(i, j)] - start[(i, j)] + delta;
                    d2 += dd * dd;
                }
                prox = d2.sqrt();
            }
            out.push(prox - dv[(i, 0)] / k);
        }
        Ok(out)
    }
}

/// Project each row's gradient onto the tangent plane of the sphere through
/// the current iterate: `g <- g - (g . z) z / ||z||^2`.
fn project_to_sphere_tangent(grad: &mut Matrix, z: &Matrix) {
    for i in 0..grad.nrows() {
        let zi = z.row(i);
        let zz: f64 = zi.dot(&zi);
        if zz <= 0.0 {
            continue;
        }
        let gz: f64 = grad.row(i).dot(&zi);
        let coef = gz / zz;
        let mut grow = grad.row_mut(i);
        for (gv, zv) in grow.iter_mut().zip(zi.iter()) {
            *gv -= coef * zv;
        }
    }
}

fn descend(
    space: &Space,
    start: &Matrix,
    cfg: &TransportConfig,
    proximity: bool,
) -> Result<TransportOutcome> {
    cfg.validate()?;
    match space {
        Space::Target { d } => {
            if start.ncols() != d.in_dim() {
                return Err(Error::Contract(format!(
                    "point dim {} does not match discriminator input {}",
                    start.ncols(),
                    d.in_dim()
                )));
            }
        }
        Space::Latent { g, d } => {
            if start.ncols() != g.in_dim() {
                return Err(Error::Contract(format!(
                    "latent dim {} does not match generator input {}",
                    start.ncols(),
                    g.in_dim()
                )));
            }
            if g.out_dim() != d.in_dim() {
                return Err(Error::Contract(
                    "generator output does not match discriminator input".into(),
                ));
            }
        }
    }

    let n = start.nrows();
    let k = cfg.k.value();
    let bare = space.data_points(start)?;

    if cfg.n_updates == 0 {
        let obj = space.objective_plain(start, start, cfg.delta, k, proximity)?;
        return Ok(TransportOutcome {
            points: bare.clone(),
            z_final: match space {
                Space::Latent { .. } => Some(start.clone()),
                Space::Target { .. } => None,
            },
            objective_initial: obj.clone(),
            objective_final: obj,
            displacement_l2: vec![0.0; n],
            warnings: vec![false; n],
        });
    }

    let mut x = start.clone();
    let mut frozen = vec![false; n];
    let mut warnings = vec![false; n];
    let mut objective_initial = vec![0.0; n];
    let mut opt = Optimizer::new(cfg.optimizer_with_lr());

    for step in 0..cfg.n_updates {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let prox = if proximity {
            let start_c = tape.constant(start.clone());
            let diff = tape.sub(xv, start_c);
            let shifted = tape.add_const(diff, cfg.delta);
            Some(tape.row_norm(shifted))
        } else {
            None
        };
        let obj = space.objective_tape(&mut tape, xv, k, prox);
        let total = tape.sum(obj);
        let obj_vals = tape.value(obj).clone();
        if step == 0 {
            for i in 0..n {
                objective_initial[i] = obj_vals[(i, 0)];
            }
        }
        let grad_var = tape.grad(total, &[xv])?[0];
        let mut grad = tape.value(grad_var).clone();

        // Samples that went non-finite stay at their last finite iterate.
        for i in 0..n {
            let bad =
                !obj_vals[(i, 0)].is_finite() || grad.row(i).iter().any(|t| !t.is_finite());
            if bad && !frozen[i] {
                frozen[i] = true;
                warnings[i] = true;
            }
            if frozen[i] {
                grad.row_mut(i).fill(0.0);
            }
        }

        if let Some(prior) = &cfg.prior {
            if prior.kind == PriorKind::StandardNormal {
                project_to_sphere_tangent(&mut grad, &x);
            }
        }

        let saved = x.clone();
        {
            let mut binding = [&mut x];
            opt.step(&mut binding, std::slice::from_ref(&grad))?;
        }
        for i in 0..n {
            if frozen[i] {
                let row = saved.row(i).to_owned();
                x.row_mut(i).assign(&row);
            }
        }

        if let Some(prior) = &cfg.prior {
            if prior.kind == PriorKind::UniformCube {
                x.mapv_inplace(|t| t.clamp(-1.0, 1.0));
            }
        }
    }

    let points = space.data_points(&x)?;
    let objective_final = space.objective_plain(&x, start, cfg.delta, k, proximity)?;
    let displacement_l2 = (0..n)
        .map(|i| {
            let mut d2 = 0.0;
            for j in 0..points.ncols() {
                let dd = points[(i, j)] - bare[(i, j)];
                d2 += dd * dd;
            }
            d2.sqrt()
        })
        .collect();

    Ok(TransportOutcome {
        points,
        z_final: match space {
            Space::Latent { .. } => Some(x),
            Space::Target { .. } => None,
        },
        objective_initial,
        objective_final,
        displacement_l2,
        warnings,
    })
}

// --- Public transport operations ---------------------------------------------

/// Gradient-descent transport of data-space points along the discriminator.
pub fn target_dot_batch(
    d: &dyn Network,
    ys: &Matrix,
    cfg: &TransportConfig,
) -> Result<TransportOutcome> {
    descend(&Space::Target { d }, ys, cfg, true)
}

/// Baseline: ascend `D/K` from each point with no proximity term.
pub fn naive_target_batch(
    d: &dyn Network,
    ys: &Matrix,
    cfg: &TransportConfig,
) -> Result<TransportOutcome> {
    descend(&Space::Target { d }, ys, cfg, false)
}

/// Latent-space transport: descend on `||z - z_y + delta|| - D(G(z))/k` and
/// return the decoded points.
pub fn latent_dot_batch(
    g: &dyn Network,
    d: &dyn Network,
    zs: &Matrix,
    cfg: &TransportConfig,
) -> Result<TransportOutcome> {
    descend(&Space::Latent { g, d }, zs, cfg, true)
}

/// Baseline: latent ascent on `D(G(z))/k` alone, same prior rules.
pub fn naive_latent_batch(
    g: &dyn Network,
    d: &dyn Network,
    zs: &Matrix,
    cfg: &TransportConfig,
) -> Result<TransportOutcome> {
    descend(&Space::Latent { g, d }, zs, cfg, false)
}

/// Latent transport under a fixed label: identical to [`latent_dot_batch`]
/// over the conditioned network views.
pub fn conditional_latent_dot_batch(
    g: &MlpNetwork,
    d: &MlpNetwork,
    label: usize,
    n_classes: usize,
    zs: &Matrix,
    cfg: &TransportConfig,
) -> Result<TransportOutcome> {
    let gc = g.condition(label, n_classes);
    let dc = d.condition(label, n_classes);
    latent_dot_batch(&gc, &dc, zs, cfg)
}

/// Single-point convenience wrapper around [`target_dot_batch`].
pub fn target_dot(d: &dyn Network, y: &[f64], cfg: &TransportConfig) -> Result<Vec<f64>> {
    let ys = Matrix::from_shape_vec((1, y.len()), y.to_vec()).expect("row");
    let out = target_dot_batch(d, &ys, cfg)?;
    Ok(out.points.row(0).to_vec())
}

/// Single-point convenience wrapper around [`latent_dot_batch`].
pub fn latent_dot(
    g: &dyn Network,
    d: &dyn Network,
    z: &[f64],
    cfg: &TransportConfig,
) -> Result<Vec<f64>> {
    let zs = Matrix::from_shape_vec((1, z.len()), z.to_vec()).expect("row");
    let out = latent_dot_batch(g, d, &zs, cfg)?;
    Ok(out.points.row(0).to_vec())
}
