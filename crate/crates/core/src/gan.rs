//! GAN objectives and the alternating training loop.
//!
//! Three loss families are supported: non-saturating logistic, hinge, and
//! identity with gradient penalty (the WGAN-GP setup). The discriminator
//! ascends `V_D` (minus the penalty, when present); the generator descends
//! `V_G`. Whatever the loss, `V_D - penalty` never exceeds the plain mean
//! discrepancy `mean(D(real)) - mean(D(fake))`, which is what ties the
//! trained discriminator to a transport potential.

use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PointCloud, PriorSpec};
use crate::error::{Error, Result};
use crate::nn::{MlpNetwork, Network};
use crate::optim::{OptSpec, Optimizer};
use crate::tape::{Matrix, Tape, Var};
use crate::transport;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    /// Non-saturating logistic: `f(u) = -log(1+e^u)`, `g(u) = log(1+e^-u)`.
    Logistic,
    /// Hinge: `E[min(0,-1+D(x))] + E[min(0,-1-D(y))]`, `g(u) = -u`.
    Hinge,
    /// Identity loss with gradient penalty of weight `lambda`.
    IdentityGp { lambda: f64 },
}

impl LossKind {
    pub fn wgan_gp() -> Self {
        LossKind::IdentityGp { lambda: 10.0 }
    }

    pub fn uses_penalty(&self) -> bool {
        matches!(self, LossKind::IdentityGp { .. })
    }
}

fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Discriminator objective over a batch of scores (penalty excluded).
pub fn v_d(loss: LossKind, d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    Ok(match loss {
        LossKind::Logistic => {
            mean(&d_real.iter().map(|&u| -softplus(-u)).collect::<Vec<_>>())
                + mean(&d_fake.iter().map(|&u| -softplus(u)).collect::<Vec<_>>())
        }
        LossKind::Hinge => {
            mean(&d_real
                .iter()
                .map(|&u| (-1.0 + u).min(0.0))
                .collect::<Vec<_>>())
                + mean(&d_fake
                    .iter()
                    .map(|&u| (-1.0 - u).min(0.0))
                    .collect::<Vec<_>>())
        }
        LossKind::IdentityGp { .. } => mean(d_real) - mean(d_fake),
    })
}

/// Generator objective over fake scores.
pub fn v_g(loss: LossKind, d_fake: &[f64]) -> Result<f64> {
    if d_fake.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    Ok(match loss {
        LossKind::Logistic => mean(&d_fake.iter().map(|&u| softplus(-u)).collect::<Vec<_>>()),
        LossKind::Hinge => -mean(d_fake),
        LossKind::IdentityGp { .. } => mean(d_fake),
    })
}

/// Tape form of [`v_d`]; `d_real`/`d_fake` are `(n,1)` score nodes.
pub fn v_d_tape(tape: &mut Tape, loss: LossKind, d_real: Var, d_fake: Var) -> Var {
    match loss {
        LossKind::Logistic => {
            let neg_r = tape.neg(d_real);
            let sp_r = tape.softplus(neg_r);
            let term_r = tape.mean(sp_r);
            let term_r = tape.neg(term_r);
            let sp_f = tape.softplus(d_fake);
            let term_f = tape.mean(sp_f);
            let term_f = tape.neg(term_f);
            tape.add(term_r, term_f)
        }
        LossKind::Hinge => {
            let rm = tape.add_const(d_real, -1.0);
            let rmin = tape.min_zero(rm);
            let term_r = tape.mean(rmin);
            let nf = tape.neg(d_fake);
            let fm = tape.add_const(nf, -1.0);
            let fmin = tape.min_zero(fm);
            let term_f = tape.mean(fmin);
            tape.add(term_r, term_f)
        }
        LossKind::IdentityGp { .. } => {
            let mr = tape.mean(d_real);
            let mf = tape.mean(d_fake);
            tape.sub(mr, mf)
        }
    }
}

/// Tape form of [`v_g`].
pub fn v_g_tape(tape: &mut Tape, loss: LossKind, d_fake: Var) -> Var {
    match loss {
        LossKind::Logistic => {
            let neg = tape.neg(d_fake);
            let sp = tape.softplus(neg);
            tape.mean(sp)
        }
        LossKind::Hinge => {
            let m = tape.mean(d_fake);
            tape.neg(m)
        }
        LossKind::IdentityGp { .. } => tape.mean(d_fake),
    }
}

/// Draw per-sample interpolates `u*x_real + (1-u)*x_fake`.
fn interpolate<R: Rng>(x_real: &Matrix, x_fake: &Matrix, rng: &mut R) -> Matrix {
    let mut out = Matrix::zeros(x_real.dim());
    for i in 0..x_real.nrows() {
        let u: f64 = rng.random_range(0.0..1.0);
        for j in 0..x_real.ncols() {
            out[(i, j)] = u * x_real[(i, j)] + (1.0 - u) * x_fake[(i, j)];
        }
    }
    out
}

/// Penalty node `lambda * mean((||grad_x D(x_hat)|| - 1)^2)` on a tape where
/// `x_hat` is an input node and `d_out` its `(n,1)` score column.
fn penalty_tape(tape: &mut Tape, d_out: Var, x_hat: Var, lambda: f64) -> Result<Var> {
    let total = tape.sum(d_out);
    let gx = tape.grad(total, &[x_hat])?[0];
    let norms = tape.row_norm(gx);
    let shifted = tape.add_const(norms, -1.0);
    let sq = tape.square(shifted);
    let m = tape.mean(sq);
    Ok(tape.scale(m, lambda))
}

/// Standalone gradient-penalty value on random interpolates between the two
/// batches.
pub fn gradient_penalty(
    d: &MlpNetwork,
    x_real: &Matrix,
    x_fake: &Matrix,
    lambda: f64,
    seed: u64,
) -> Result<f64> {
    if x_real.dim() != x_fake.dim() {
        return Err(Error::Contract(
            "real and fake batches must have the same shape".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_hat = interpolate(x_real, x_fake, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.input(x_hat);
    let d_out = d.forward_frozen(&mut tape, xv);
    let p = penalty_tape(&mut tape, d_out, xv, lambda)?;
    let val = tape.scalar_value(p);
    if !val.is_finite() {
        return Err(Error::Numeric("gradient penalty is not finite".into()));
    }
    Ok(val)
}

/// How many discriminator steps to run per generator step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CriticSchedule {
    Fixed { steps: usize },
    /// `early` steps while `iter < threshold`, `late` afterwards.
    Warmup {
        threshold: usize,
        early: usize,
        late: usize,
    },
}

impl CriticSchedule {
    /// The warm-up schedule used with the gradient-penalty loss.
    pub fn wgan_gp_default() -> Self {
        CriticSchedule::Warmup {
            threshold: 25,
            early: 100,
            late: 10,
        }
    }

    pub fn at(&self, iter: usize) -> usize {
        match *self {
            CriticSchedule::Fixed { steps } => steps,
            CriticSchedule::Warmup {
                threshold,
                early,
                late,
            } => {
                if iter < threshold {
                    early
                } else {
                    late
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub iterations: usize,
    pub batch_size: usize,
    pub n_critic: CriticSchedule,
    pub g_opt: OptSpec,
    pub d_opt: OptSpec,
    pub prior: PriorSpec,
    pub seed: u64,
    /// Present when training on labeled data with one-hot conditioned nets.
    pub n_classes: Option<usize>,
    pub log_every: usize,
    /// Pairs used for the logged Lipschitz snapshot.
    pub keff_snapshot_pairs: usize,
    /// Abort when `|v_d|` or `|v_g|` exceeds this or goes non-finite.
    pub divergence_guard: f64,
}

impl TrainConfig {
    pub fn new(loss: LossKind, iterations: usize, batch_size: usize, prior: PriorSpec, seed: u64) -> Self {
        let (n_critic, g_opt, d_opt) = match loss {
            LossKind::IdentityGp { .. } => {
                let adam = OptSpec::adam(1e-4, 0.5, 0.9);
                (CriticSchedule::wgan_gp_default(), adam, adam)
            }
            _ => {
                let adam = OptSpec::adam(2e-4, 0.0, 0.9);
                (CriticSchedule::Fixed { steps: 5 }, adam, adam)
            }
        };
        TrainConfig {
            loss,
            iterations,
            batch_size,
            n_critic,
            g_opt,
            d_opt,
            prior,
            seed,
            n_classes: None,
            log_every: 100,
            keff_snapshot_pairs: 100,
            divergence_guard: 1e6,
        }
    }

    fn validate(&self, g: &MlpNetwork, d: &MlpNetwork, data: &PointCloud) -> Result<()> {
        if self.iterations >= 1 && self.batch_size < 2 {
            return Err(Error::Contract("batch_size must be >= 2".into()));
        }
        let classes = self.n_classes.unwrap_or(0);
        if self.n_classes.is_some() && data.labels.is_none() {
            return Err(Error::Contract(
                "conditional training needs labeled data".into(),
            ));
        }
        if g.in_dim() != self.prior.dim + classes {
            return Err(Error::Contract(format!(
                "generator input {} does not match prior dim {} (+{classes} classes)",
                g.in_dim(),
                self.prior.dim
            )));
        }
        if g.out_dim() != data.dim() {
            return Err(Error::Contract(format!(
                "generator output {} does not match data dim {}",
                g.out_dim(),
                data.dim()
            )));
        }
        if d.in_dim() != data.dim() + classes {
            return Err(Error::Contract(format!(
                "discriminator input {} does not match data dim {} (+{classes} classes)",
                d.in_dim(),
                data.dim()
            )));
        }
        if data.is_empty() && self.iterations > 0 {
            return Err(Error::Contract("empty dataset".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainLogRow {
    pub iter: usize,
    pub v_d: f64,
    pub v_g: f64,
    pub k_eff: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: Vec<TrainLogRow>,
    /// Iteration at which training was aborted on divergence; the networks
    /// are restored to the last logged snapshot in that case.
    pub diverged_at: Option<usize>,
}

fn onehot_append(x: &Matrix, labels: &[usize], classes: usize) -> Matrix {
    let (n, d) = x.dim();
    let mut out = Matrix::zeros((n, d + classes));
    for i in 0..n {
        for j in 0..d {
            out[(i, j)] = x[(i, j)];
        }
        out[(i, d + labels[i])] = 1.0;
    }
    out
}

struct Snapshot {
    g: MlpNetwork,
    d: MlpNetwork,
}

/// Alternating GAN training; mutates `g` and `d` in place.
pub fn train(
    g: &mut MlpNetwork,
    d: &mut MlpNetwork,
    cfg: &TrainConfig,
    data: &PointCloud,
) -> Result<TrainOutcome> {
    cfg.validate(g, d, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt_g = Optimizer::new(cfg.g_opt);
    let mut opt_d = Optimizer::new(cfg.d_opt);
    let mut log = Vec::new();
    let classes = cfg.n_classes.unwrap_or(0);

    let mut snapshot = Snapshot {
        g: g.clone(),
        d: d.clone(),
    };

    for iter in 0..cfg.iterations {
        let mut last_vd = 0.0;
        for _ in 0..cfg.n_critic.at(iter) {
            last_vd = critic_step(g, d, cfg, data, classes, &mut rng, &mut opt_d)?;
        }
        let vg = generator_step(g, d, cfg, classes, &mut rng, &mut opt_g)?;

        let bad = !last_vd.is_finite()
            || !vg.is_finite()
            || last_vd.abs() > cfg.divergence_guard
            || vg.abs() > cfg.divergence_guard;
        if bad {
            *g = snapshot.g;
            *d = snapshot.d;
            return Ok(TrainOutcome {
                log,
                diverged_at: Some(iter),
            });
        }

        if iter % cfg.log_every == 0 || iter + 1 == cfg.iterations {
            let k_eff = keff_snapshot(g, d, cfg, classes, &mut rng)?;
            log.push(TrainLogRow {
                iter,
                v_d: last_vd,
                v_g: vg,
                k_eff,
            });
            snapshot = Snapshot {
                g: g.clone(),
                d: d.clone(),
            };
        }
    }
    Ok(TrainOutcome {
        log,
        diverged_at: None,
    })
}

fn draw_real_batch<R: Rng>(
    data: &PointCloud,
    batch: usize,
    rng: &mut R,
) -> (Matrix, Option<Vec<usize>>) {
    let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..data.len())).collect();
    let x = data.points.select(Axis(0), &idx);
    let labels = data
        .labels
        .as_ref()
        .map(|ls| idx.iter().map(|&i| ls[i]).collect());
    (x, labels)
}

fn critic_step(
    g: &MlpNetwork,
    d: &mut MlpNetwork,
    cfg: &TrainConfig,
    data: &PointCloud,
    classes: usize,
    rng: &mut ChaCha8Rng,
    opt_d: &mut Optimizer,
) -> Result<f64> {
    let (x_real_raw, labels) = draw_real_batch(data, cfg.batch_size, rng);
    let z_raw = crate::data::sample_prior_with(&cfg.prior, cfg.batch_size, rng).points;

    // Fake samples reuse the real batch's labels in the conditional case.
    let (x_real, z) = if classes > 0 {
        let ls = labels.as_ref().expect("validated labels");
        (
            onehot_append(&x_real_raw, ls, classes),
            onehot_append(&z_raw, ls, classes),
        )
    } else {
        (x_real_raw.clone(), z_raw)
    };
    let x_fake_data = g.forward(&z)?;
    let x_fake = if classes > 0 {
        onehot_append(&x_fake_data, labels.as_ref().expect("labels"), classes)
    } else {
        x_fake_data
    };

    if d.has_sn() {
        d.power_iterate();
    }

    let mut tape = Tape::new();
    let xr = tape.constant(x_real.clone());
    let xf = tape.constant(x_fake.clone());
    // One trainable pass defines the weight nodes; the second input reuses
    // them so both terms see the same parameters.
    let (dr, params) = d.forward_trainable(&mut tape, xr);
    let df = d.forward_with_param_vars(&mut tape, xf, &params);
    let vd = v_d_tape(&mut tape, cfg.loss, dr, df);

    let objective = if let LossKind::IdentityGp { lambda } = cfg.loss {
        let x_hat = interpolate(&x_real, &x_fake, rng);
        let xh = tape.input(x_hat);
        let dh = d.forward_with_param_vars(&mut tape, xh, &params);
        let pen = penalty_tape(&mut tape, dh, xh, lambda)?;
        tape.sub(vd, pen)
    } else {
        vd
    };

    let value = tape.scalar_value(objective);
    // Ascent on the objective = descent on its negation.
    let loss = tape.neg(objective);
    let grads = tape.grad_values(loss, &params)?;
    if grads.iter().any(|g| g.iter().any(|t| !t.is_finite())) {
        return Ok(f64::NAN);
    }
    opt_d.step(&mut d.params_mut(), &grads)?;
    Ok(value)
}

fn generator_step(
    g: &mut MlpNetwork,
    d: &MlpNetwork,
    cfg: &TrainConfig,
    classes: usize,
    rng: &mut ChaCha8Rng,
    opt_g: &mut Optimizer,
) -> Result<f64> {
    let z_raw = crate::data::sample_prior_with(&cfg.prior, cfg.batch_size, rng).points;
    let labels: Vec<usize> = if classes > 0 {
        (0..cfg.batch_size)
            .map(|_| rng.random_range(0..classes))
            .collect()
    } else {
        Vec::new()
    };
    let z = if classes > 0 {
        onehot_append(&z_raw, &labels, classes)
    } else {
        z_raw
    };

    if g.has_sn() {
        g.power_iterate();
    }

    let mut tape = Tape::new();
    let zc = tape.constant(z);
    let (y, params) = g.forward_trainable(&mut tape, zc);
    let y_ext = if classes > 0 {
        append_onehot_tape(&mut tape, y, &labels, classes)
    } else {
        y
    };
    let df = d.forward_frozen(&mut tape, y_ext);
    let vg = v_g_tape(&mut tape, cfg.loss, df);
    let value = tape.scalar_value(vg);
    let grads = tape.grad_values(vg, &params)?;
    if grads.iter().any(|g| g.iter().any(|t| !t.is_finite())) {
        return Ok(f64::NAN);
    }
    opt_g.step(&mut g.params_mut(), &grads)?;
    Ok(value)
}

// Appends constant one-hot columns to a tape node: out = [y | onehot] via
// y . P^T + C where P embeds the data block.
fn append_onehot_tape(tape: &mut Tape, y: Var, labels: &[usize], classes: usize) -> Var {
    let (n, d) = tape.shape(y);
    let mut proj = Matrix::zeros((d + classes, d));
    for j in 0..d {
        proj[(j, j)] = 1.0;
    }
    let mut hot = Matrix::zeros((n, d + classes));
    for (i, &l) in labels.iter().enumerate() {
        hot[(i, d + l)] = 1.0;
    }
    let p = tape.constant(proj);
    let widened = tape.matmul_tt_var(y, p, false, true);
    let h = tape.constant(hot);
    tape.add(widened, h)
}

fn keff_snapshot(
    g: &MlpNetwork,
    d: &MlpNetwork,
    cfg: &TrainConfig,
    classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let n = cfg.keff_snapshot_pairs.max(2) * 2;
    let seed = rng.random::<u64>();
    let z_raw = crate::data::sample_prior_with(&cfg.prior, n, rng).points;
    let est = if classes > 0 {
        let gc = g.condition(0, classes);
        let dc = d.condition(0, classes);
        let samples = PointCloud::unlabeled(gc.forward(&z_raw)?);
        transport::estimate_k_eff_target(&dc, &samples, cfg.keff_snapshot_pairs, 1, seed)?
    } else {
        let samples = PointCloud::unlabeled(g.forward(&z_raw)?);
        transport::estimate_k_eff_target(d, &samples, cfg.keff_snapshot_pairs, 1, seed)?
    };
    Ok(est.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data;
    use approx::assert_relative_eq;

    #[test]
    fn discriminator_objective_hand_values() {
        let ln2 = std::f64::consts::LN_2;
        let v = v_d(LossKind::Logistic, &[0.0], &[0.0]).unwrap();
        assert_relative_eq!(v, -2.0 * ln2, max_relative = 1e-12);

        let v = v_d(LossKind::Hinge, &[1.0, 1.0], &[-1.0, -1.0]).unwrap();
        assert_eq!(v, 0.0);

        let v = v_d(LossKind::wgan_gp(), &[3.0], &[1.0]).unwrap();
        assert_eq!(v, 2.0);
    }

    #[test]
    fn generator_objective_hand_values() {
        let ln2 = std::f64::consts::LN_2;
        assert_relative_eq!(
            v_g(LossKind::Logistic, &[0.0]).unwrap(),
            ln2,
            max_relative = 1e-12
        );
        assert_eq!(v_g(LossKind::Hinge, &[2.0]).unwrap(), -2.0);
        assert_eq!(v_g(LossKind::wgan_gp(), &[2.0]).unwrap(), 2.0);
    }

    #[test]
    fn empty_batches_are_contract_violations() {
        assert!(v_d(LossKind::Logistic, &[], &[1.0]).is_err());
        assert!(v_d(LossKind::Hinge, &[1.0], &[]).is_err());
        assert!(v_g(LossKind::Logistic, &[]).is_err());
    }

    #[test]
    fn tape_objectives_match_plain_evaluation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for loss in [LossKind::Logistic, LossKind::Hinge, LossKind::wgan_gp()] {
            for _ in 0..50 {
                let n = rng.random_range(1..40usize);
                let m = rng.random_range(1..40usize);
                let dr: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
                let df: Vec<f64> = (0..m).map(|_| rng.random_range(-4.0..4.0)).collect();

                let plain_d = v_d(loss, &dr, &df).unwrap();
                let plain_g = v_g(loss, &df).unwrap();

                let mut tape = Tape::new();
                let r = tape.constant(Matrix::from_shape_vec((n, 1), dr.clone()).unwrap());
                let f = tape.constant(Matrix::from_shape_vec((m, 1), df.clone()).unwrap());
                let vd_var = v_d_tape(&mut tape, loss, r, f);
                let vg_var = v_g_tape(&mut tape, loss, f);
                assert_relative_eq!(
                    tape.scalar_value(vd_var),
                    plain_d,
                    max_relative = 1e-12,
                    epsilon = 1e-12
                );
                assert_relative_eq!(
                    tape.scalar_value(vg_var),
                    plain_g,
                    max_relative = 1e-12,
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn objectives_are_monotone_in_scores() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for loss in [LossKind::Logistic, LossKind::Hinge] {
            for _ in 0..200 {
                let n = rng.random_range(1..10usize);
                let dr: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
                let df: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
                let base = v_d(loss, &dr, &df).unwrap();

                let mut dr_up = dr.clone();
                let k = rng.random_range(0..n);
                dr_up[k] += rng.random_range(0.0..2.0);
                assert!(v_d(loss, &dr_up, &df).unwrap() >= base - 1e-12);

                let mut df_up = df.clone();
                df_up[k] += rng.random_range(0.0..2.0);
                assert!(v_d(loss, &dr, &df_up).unwrap() <= base + 1e-12);
            }
        }
    }

    fn linear_net(w: &[f64]) -> MlpNetwork {
        use rand::SeedableRng;
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut net = MlpNetwork::new(
            &[w.len(), 1],
            &[crate::nn::Activation::Identity],
            &[false],
            &mut r,
        );
        net.layers[0].w = Matrix::from_shape_vec((1, w.len()), w.to_vec()).unwrap();
        net.layers[0].b.fill(0.0);
        net
    }

    #[test]
    fn unit_linear_discriminator_has_zero_penalty() {
        let d = linear_net(&[0.6, 0.8]); // ||w|| = 1
        let xr = Matrix::from_shape_fn((16, 2), |(i, j)| (i as f64) * 0.1 + j as f64);
        let xf = Matrix::from_shape_fn((16, 2), |(i, j)| -(i as f64) * 0.07 + 0.3 * j as f64);
        let p = gradient_penalty(&d, &xr, &xf, 10.0, 3).unwrap();
        assert!(p.abs() < 1e-20, "penalty {p}");
    }

    #[test]
    fn constant_discriminator_pays_full_penalty() {
        let d = linear_net(&[0.0, 0.0]);
        let xr = Matrix::from_shape_fn((8, 2), |(i, _)| i as f64);
        let xf = Matrix::zeros((8, 2));
        let p = gradient_penalty(&d, &xr, &xf, 10.0, 3).unwrap();
        assert_relative_eq!(p, 10.0, max_relative = 1e-12);
    }

    #[test]
    fn penalty_matches_finite_difference_gradient_norms() {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(29);
        let d = MlpNetwork::mlp_lrelu(2, 24, 2, 1, false, &mut r);
        let xr = Matrix::from_shape_fn((12, 2), |_| r.random_range(-1.0..1.0));
        let xf = Matrix::from_shape_fn((12, 2), |_| r.random_range(-1.0..1.0));
        let lambda = 10.0;
        let seed = 77;
        let got = gradient_penalty(&d, &xr, &xf, lambda, seed).unwrap();

        // Recreate the interpolates the same way, then estimate each row's
        // gradient by central differences of the plain forward pass.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut acc = 0.0;
        let mut x_hat = Matrix::zeros(xr.dim());
        for i in 0..xr.nrows() {
            let u: f64 = rng.random_range(0.0..1.0);
            for j in 0..xr.ncols() {
                x_hat[(i, j)] = u * xr[(i, j)] + (1.0 - u) * xf[(i, j)];
            }
        }
        for i in 0..x_hat.nrows() {
            let row: Vec<f64> = x_hat.row(i).to_vec();
            let f = |p: &[f64]| {
                let m = Matrix::from_shape_vec((1, p.len()), p.to_vec()).unwrap();
                d.forward(&m).unwrap()[(0, 0)]
            };
            let g = crate::reference::central_difference(f, &row, 1e-6);
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            acc += (norm - 1.0) * (norm - 1.0);
        }
        let fd = lambda * acc / x_hat.nrows() as f64;
        assert_relative_eq!(got, fd, max_relative = 1e-4);
    }

    #[test]
    fn lower_bound_on_mean_discrepancy_holds_for_all_losses() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(43);
        let d = MlpNetwork::mlp_lrelu(2, 12, 2, 1, false, &mut r);
        for loss in [LossKind::Logistic, LossKind::Hinge, LossKind::wgan_gp()] {
            for case in 0..100 {
                let n = rng.random_range(2..32usize);
                let xr = Matrix::from_shape_fn((n, 2), |_| rng.random_range(-2.0..2.0));
                let xf = Matrix::from_shape_fn((n, 2), |_| rng.random_range(-2.0..2.0));
                let dr: Vec<f64> = d.forward(&xr).unwrap().column(0).to_vec();
                let df: Vec<f64> = d.forward(&xf).unwrap().column(0).to_vec();
                let penalty = if let LossKind::IdentityGp { lambda } = loss {
                    gradient_penalty(&d, &xr, &xf, lambda, case as u64).unwrap()
                } else {
                    0.0
                };
                let lhs = v_d(loss, &dr, &df).unwrap() - penalty;
                let rhs = mean(&dr) - mean(&df);
                assert!(
                    lhs <= rhs + 1e-12,
                    "loss {loss:?}: lhs {lhs} exceeds rhs {rhs}"
                );
            }
        }
    }

    fn tiny_setup(seed: u64) -> (MlpNetwork, MlpNetwork, TrainConfig, crate::data::PointCloud) {
        use rand::SeedableRng;
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let g = MlpNetwork::mlp_lrelu(2, 16, 2, 2, false, &mut r);
        let d = MlpNetwork::mlp_lrelu(2, 16, 2, 1, false, &mut r);
        let mut cfg = TrainConfig::new(
            LossKind::wgan_gp(),
            8,
            8,
            crate::data::PriorSpec::uniform(2),
            seed,
        );
        cfg.n_critic = CriticSchedule::Fixed { steps: 2 };
        cfg.log_every = 4;
        let dataset = data::gen_25gaussians(512, seed);
        (g, d, cfg, dataset)
    }

    #[test]
    fn zero_iterations_leave_networks_unchanged() {
        let (mut g, mut d, mut cfg, dataset) = tiny_setup(1);
        cfg.iterations = 0;
        let g0 = g.clone();
        let d0 = d.clone();
        let out = train(&mut g, &mut d, &cfg, &dataset).unwrap();
        assert!(out.diverged_at.is_none());
        for (a, b) in g.layers.iter().zip(&g0.layers) {
            assert_eq!(a.w, b.w);
            assert_eq!(a.b, b.b);
        }
        for (a, b) in d.layers.iter().zip(&d0.layers) {
            assert_eq!(a.w, b.w);
        }
    }

    #[test]
    fn short_training_is_deterministic_and_finite() {
        let (mut g1, mut d1, cfg, dataset) = tiny_setup(2);
        let out1 = train(&mut g1, &mut d1, &cfg, &dataset).unwrap();
        let (mut g2, mut d2, cfg2, dataset2) = tiny_setup(2);
        let out2 = train(&mut g2, &mut d2, &cfg2, &dataset2).unwrap();

        assert!(out1.diverged_at.is_none());
        assert_eq!(out1.log.len(), out2.log.len());
        for (a, b) in out1.log.iter().zip(&out2.log) {
            assert_eq!(a.v_d.to_bits(), b.v_d.to_bits());
            assert_eq!(a.v_g.to_bits(), b.v_g.to_bits());
            assert_eq!(a.k_eff.to_bits(), b.k_eff.to_bits());
        }
        for (a, b) in g1.layers.iter().zip(&g2.layers) {
            assert_eq!(a.w, b.w);
            assert_eq!(a.b, b.b);
        }
        for row in &out1.log {
            assert!(row.v_d.is_finite() && row.v_g.is_finite() && row.k_eff.is_finite());
        }
    }

    #[test]
    fn divergent_training_restores_last_snapshot() {
        let (mut g, mut d, mut cfg, dataset) = tiny_setup(3);
        cfg.d_opt = OptSpec::Sgd { lr: 1e18 };
        cfg.g_opt = OptSpec::Sgd { lr: 1e18 };
        cfg.iterations = 6;
        let out = train(&mut g, &mut d, &cfg, &dataset).unwrap();
        assert!(out.diverged_at.is_some());
        for l in &g.layers {
            assert!(l.w.iter().all(|t| t.is_finite()));
        }
        for l in &d.layers {
            assert!(l.w.iter().all(|t| t.is_finite()));
        }
    }

    #[test]
    fn conditional_training_runs_on_labeled_data() {
        use rand::SeedableRng;
        let classes = 2;
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut g = MlpNetwork::mlp_lrelu(2 + classes, 16, 2, 2, false, &mut r);
        let mut d = MlpNetwork::mlp_lrelu(2 + classes, 16, 2, 1, false, &mut r);
        let mut cfg = TrainConfig::new(
            LossKind::wgan_gp(),
            4,
            8,
            crate::data::PriorSpec::uniform(2),
            9,
        );
        cfg.n_critic = CriticSchedule::Fixed { steps: 1 };
        cfg.n_classes = Some(classes);
        cfg.log_every = 2;
        let dataset = data::gen_labeled_gaussians(256, classes, 9).unwrap();
        let out = train(&mut g, &mut d, &cfg, &dataset).unwrap();
        assert!(out.diverged_at.is_none());
        assert!(!out.log.is_empty());
    }

    #[test]
    fn critic_schedule_warmup_switches_at_threshold() {
        let s = CriticSchedule::wgan_gp_default();
        assert_eq!(s.at(0), 100);
        assert_eq!(s.at(24), 100);
        assert_eq!(s.at(25), 10);
        assert_eq!(s.at(19_999), 10);
    }
}
