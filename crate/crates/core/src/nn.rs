//! Dense MLP networks with optional spectral normalization.
//!
//! The same `MlpNetwork` type serves as generator and discriminator. Forward
//! passes come in two flavors: a plain numeric pass, and a tape pass that
//! records onto a [`Tape`] for differentiation. Spectrally normalized layers
//! divide their weight by the current power-iteration estimate of the top
//! singular value; the estimate lives on the layer and is refreshed
//! explicitly (one step per training update, plus [`MlpNetwork::thermalize`]
//! before transport).

use ndarray::{s, Array1};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Matrix, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    LRelu { slope: f64 },
    Tanh,
    Identity,
}

impl Activation {
    pub fn lrelu() -> Self {
        Activation::LRelu { slope: 0.2 }
    }

    fn apply_plain(&self, z: Matrix) -> Matrix {
        match *self {
            Activation::LRelu { slope } => z.mapv(|t| if t > 0.0 { t } else { slope * t }),
            Activation::Tanh => z.mapv(f64::tanh),
            Activation::Identity => z,
        }
    }

    fn apply_tape(&self, tape: &mut Tape, z: Var) -> Var {
        match *self {
            Activation::LRelu { slope } => tape.lrelu(z, slope),
            Activation::Tanh => tape.tanh(z),
            Activation::Identity => z,
        }
    }
}

/// Result of running power iteration on a weight matrix.
#[derive(Debug, Clone)]
pub struct SigmaEstimate {
    pub sigma: f64,
    pub u: Array1<f64>,
    pub v: Array1<f64>,
    /// Set when the matrix (or the reachable subspace) is numerically zero;
    /// `sigma` is 0 in that case.
    pub degenerate: bool,
}

/// Power-iteration estimate of the largest singular value of `w`, starting
/// from left vector `u` (unit norm). Returns the estimate and the updated
/// singular vector pair.
pub fn power_iteration_sigma(w: &Matrix, u: &Array1<f64>, iters: usize) -> SigmaEstimate {
    let mut u_cur = u.clone();
    let mut v_cur = Array1::zeros(w.ncols());
    let mut sigma = 0.0;
    for _ in 0..iters.max(1) {
        let wv = w.t().dot(&u_cur);
        let nv = wv.dot(&wv).sqrt();
        if nv <= 0.0 {
            return SigmaEstimate {
                sigma: 0.0,
                u: u_cur,
                v: v_cur,
                degenerate: true,
            };
        }
        v_cur = wv / nv;
        let wu = w.dot(&v_cur);
        let nu = wu.dot(&wu).sqrt();
        if nu <= 0.0 {
            return SigmaEstimate {
                sigma: 0.0,
                u: u_cur,
                v: v_cur,
                degenerate: true,
            };
        }
        u_cur = wu / nu;
        sigma = nu;
    }
    SigmaEstimate {
        sigma,
        u: u_cur,
        v: v_cur,
        degenerate: false,
    }
}

/// One dense layer `x -> x W^T + b`, optionally spectrally normalized.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub w: Matrix, // out x in
    pub b: Matrix, // 1 x out
    pub sn: bool,
    u: Array1<f64>,
    v: Array1<f64>,
    sigma: f64,
    degenerate: bool,
}

impl DenseLayer {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, sn: bool, rng: &mut R) -> Self {
        // He-normal initialization with gain 0.8, zero bias.
        let std = 0.8 * (2.0 / in_dim as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let w = Matrix::from_shape_fn((out_dim, in_dim), |_| normal.sample(rng));
        let unit = Normal::new(0.0, 1.0).expect("valid std");
        let mut u: Array1<f64> = Array1::from_shape_fn(out_dim, |_| unit.sample(rng));
        let norm = u.dot(&u).sqrt();
        if norm > 0.0 {
            u.mapv_inplace(|t| t / norm);
        } else {
            u[0] = 1.0;
        }
        let mut layer = DenseLayer {
            w,
            b: Matrix::zeros((1, out_dim)),
            sn,
            u,
            v: Array1::zeros(in_dim),
            sigma: 1.0,
            degenerate: false,
        };
        if sn {
            layer.refresh_sn(1);
        }
        layer
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Run `iters` power-iteration steps, updating the persistent vectors
    /// and the cached estimate.
    pub fn refresh_sn(&mut self, iters: usize) {
        if !self.sn || iters == 0 {
            return;
        }
        let est = power_iteration_sigma(&self.w, &self.u, iters);
        self.sigma = est.sigma;
        self.degenerate = est.degenerate;
        if !est.degenerate {
            self.u = est.u;
            self.v = est.v;
        }
    }

    /// Weight actually used in forward passes: `W / sigma` under spectral
    /// normalization, `W` otherwise.
    pub fn effective_weight(&self) -> Matrix {
        if self.sn && !self.degenerate && self.sigma > 0.0 {
            self.w.mapv(|t| t / self.sigma)
        } else {
            self.w.clone()
        }
    }

    fn forward_plain(&self, h: &Matrix, extra_bias: Option<&Matrix>) -> Matrix {
        let w_eff = self.effective_weight();
        let mut z = crate::tape::matmul_tt(h, &w_eff, false, true);
        for mut row in z.rows_mut() {
            row += &self.b.row(0);
            if let Some(eb) = extra_bias {
                row += &eb.row(0);
            }
        }
        z
    }

    /// Record the layer on a tape reusing existing weight/bias nodes. Under
    /// spectral normalization the division by `sigma = u^T W v` is part of
    /// the recorded graph (u, v held constant), so gradients flow through
    /// the normalization.
    fn apply_tape_with(&self, tape: &mut Tape, h: Var, w_var: Var, b_var: Var) -> Var {
        let w_used = if self.sn && !self.degenerate && self.sigma > 0.0 {
            let out_dim = self.out_dim();
            let in_dim = self.in_dim();
            let u_row = tape.constant(
                self.u
                    .clone()
                    .into_shape_with_order((1, out_dim))
                    .expect("u shape"),
            );
            let v_col = tape.constant(
                self.v
                    .clone()
                    .into_shape_with_order((in_dim, 1))
                    .expect("v shape"),
            );
            let uw = tape.matmul(u_row, w_var);
            let sigma = tape.matmul(uw, v_col);
            let inv = tape.pow_const(sigma, -1.0);
            let inv_b = tape.bcast_scalar(inv, out_dim, in_dim);
            tape.hadamard(w_var, inv_b)
        } else {
            w_var
        };
        let z = tape.matmul_tt_var(h, w_used, false, true);
        tape.add_row(z, b_var)
    }

    fn forward_tape_frozen(&self, tape: &mut Tape, h: Var, extra_bias: Option<&Matrix>) -> Var {
        let w_eff = tape.constant(self.effective_weight());
        let mut bias = self.b.clone();
        if let Some(eb) = extra_bias {
            bias += eb;
        }
        let b = tape.constant(bias);
        let z = tape.matmul_tt_var(h, w_eff, false, true);
        tape.add_row(z, b)
    }
}

/// A stack of dense layers with per-layer activations.
#[derive(Debug, Clone)]
pub struct MlpNetwork {
    pub layers: Vec<DenseLayer>,
    pub activations: Vec<Activation>,
}

impl MlpNetwork {
    /// Build from `dims = [in, h1, ..., out]`. `activations` and `sn` have
    /// one entry per layer (`dims.len() - 1`).
    pub fn new<R: Rng>(
        dims: &[usize],
        activations: &[Activation],
        sn: &[bool],
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "need at least one layer");
        assert_eq!(activations.len(), dims.len() - 1);
        assert_eq!(sn.len(), dims.len() - 1);
        let layers = dims
            .windows(2)
            .zip(sn)
            .map(|(w, &s)| DenseLayer::new(w[0], w[1], s, rng))
            .collect();
        MlpNetwork {
            layers,
            activations: activations.to_vec(),
        }
    }

    /// `in -> width x (depth) lReLU -> out` with identity output, no
    /// spectral normalization. The generator shape used for 2D data.
    pub fn mlp_lrelu<R: Rng>(
        in_dim: usize,
        width: usize,
        depth: usize,
        out_dim: usize,
        sn: bool,
        rng: &mut R,
    ) -> Self {
        let mut dims = vec![in_dim];
        dims.extend(std::iter::repeat(width).take(depth));
        dims.push(out_dim);
        let mut acts = vec![Activation::lrelu(); depth];
        acts.push(Activation::Identity);
        let sn_flags = vec![sn; depth + 1];
        MlpNetwork::new(&dims, &acts, &sn_flags, rng)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("nonempty").out_dim()
    }

    pub fn has_sn(&self) -> bool {
        self.layers.iter().any(|l| l.sn)
    }

    /// One power-iteration step on every normalized layer. Called once per
    /// training update.
    pub fn power_iterate(&mut self) {
        for l in &mut self.layers {
            l.refresh_sn(1);
        }
    }

    /// Extra power iterations to settle the normalization estimates before
    /// the network is used as a frozen transport field.
    pub fn thermalize(&mut self, iters: usize) {
        for l in &mut self.layers {
            l.refresh_sn(iters);
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.forward_conditioned(x, None)
    }

    fn forward_conditioned(&self, x: &Matrix, cond: Option<(usize, usize)>) -> Result<Matrix> {
        let expect = match cond {
            Some((_, classes)) => self.in_dim() - classes,
            None => self.in_dim(),
        };
        if x.ncols() != expect {
            return Err(Error::Contract(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                expect
            )));
        }
        let mut h = match cond {
            None => self.layers[0].forward_plain(x, None),
            Some((label, classes)) => {
                let (wz, eb) = self.split_first_layer(label, classes);
                let mut z = crate::tape::matmul_tt(x, &wz, false, true);
                for mut row in z.rows_mut() {
                    row += &self.layers[0].b.row(0);
                    row += &eb.row(0);
                }
                z
            }
        };
        h = self.activations[0].apply_plain(h);
        for (layer, act) in self.layers[1..].iter().zip(&self.activations[1..]) {
            h = layer.forward_plain(&h, None);
            h = act.apply_plain(h);
        }
        Ok(h)
    }

    /// Tape forward with frozen (constant) weights. Panics on shape
    /// mismatch; use [`MlpNetwork::forward`] for checked evaluation.
    pub fn forward_frozen(&self, tape: &mut Tape, x: Var) -> Var {
        self.forward_frozen_conditioned(tape, x, None)
    }

    fn forward_frozen_conditioned(
        &self,
        tape: &mut Tape,
        x: Var,
        cond: Option<(usize, usize)>,
    ) -> Var {
        let mut h = match cond {
            None => self.layers[0].forward_tape_frozen(tape, x, None),
            Some((label, classes)) => {
                let (wz, eb) = self.split_first_layer(label, classes);
                let w_const = tape.constant(wz);
                let mut bias = self.layers[0].b.clone();
                bias += &eb;
                let b_const = tape.constant(bias);
                let z = tape.matmul_tt_var(x, w_const, false, true);
                tape.add_row(z, b_const)
            }
        };
        h = self.activations[0].apply_tape(tape, h);
        for (layer, act) in self.layers[1..].iter().zip(&self.activations[1..]) {
            h = layer.forward_tape_frozen(tape, h, None);
            h = act.apply_tape(tape, h);
        }
        h
    }

    /// Tape forward with weights as differentiable inputs. Returns the
    /// output node and the parameter nodes in `[w0, b0, w1, b1, ...]` order,
    /// matching [`MlpNetwork::params_mut`].
    pub fn forward_trainable(&self, tape: &mut Tape, x: Var) -> (Var, Vec<Var>) {
        let mut params = Vec::with_capacity(self.layers.len() * 2);
        for layer in &self.layers {
            params.push(tape.input(layer.w.clone()));
            params.push(tape.input(layer.b.clone()));
        }
        let out = self.forward_with_param_vars(tape, x, &params);
        (out, params)
    }

    /// Tape forward reusing previously created parameter nodes, so several
    /// passes can share one set of differentiable weights.
    pub fn forward_with_param_vars(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Var {
        assert_eq!(params.len(), self.layers.len() * 2, "param node count");
        let mut h = x;
        for (i, (layer, act)) in self.layers.iter().zip(&self.activations).enumerate() {
            let z = layer.apply_tape_with(tape, h, params[2 * i], params[2 * i + 1]);
            h = act.apply_tape(tape, z);
        }
        h
    }

    /// Mutable parameter tensors in `[w0, b0, w1, b1, ...]` order.
    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Split the first layer for a fixed one-hot condition: the weight block
    /// acting on the raw input, plus the bias contribution of the selected
    /// class column.
    fn split_first_layer(&self, label: usize, classes: usize) -> (Matrix, Matrix) {
        let l0 = &self.layers[0];
        let w_eff = l0.effective_weight();
        let d = w_eff.ncols() - classes;
        assert!(label < classes, "label out of range");
        let wz = w_eff.slice(s![.., ..d]).to_owned();
        let col = w_eff.column(d + label);
        let eb = col
            .to_owned()
            .into_shape_with_order((1, w_eff.nrows()))
            .expect("bias shape");
        (wz, eb)
    }

    /// View of this network with the trailing one-hot inputs pinned to
    /// `label`; behaves as a network on the raw input alone.
    pub fn condition(&self, label: usize, n_classes: usize) -> Conditioned<'_> {
        assert!(n_classes >= 1 && label < n_classes);
        assert!(
            self.in_dim() > n_classes,
            "network input must include the one-hot block"
        );
        Conditioned {
            net: self,
            label,
            n_classes,
        }
    }
}

/// Abstraction over "something that maps a batch of rows to a batch of rows
/// and can be recorded on a tape with frozen weights". Transport only needs
/// this surface.
pub trait Network {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn forward(&self, x: &Matrix) -> Result<Matrix>;
    fn forward_frozen(&self, tape: &mut Tape, x: Var) -> Var;
}

impl Network for MlpNetwork {
    fn in_dim(&self) -> usize {
        MlpNetwork::in_dim(self)
    }

    fn out_dim(&self) -> usize {
        MlpNetwork::out_dim(self)
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        MlpNetwork::forward(self, x)
    }

    fn forward_frozen(&self, tape: &mut Tape, x: Var) -> Var {
        MlpNetwork::forward_frozen(self, tape, x)
    }
}

/// A label-conditioned view of an [`MlpNetwork`] whose input ends in a
/// one-hot block.
pub struct Conditioned<'a> {
    net: &'a MlpNetwork,
    label: usize,
    n_classes: usize,
}

impl Network for Conditioned<'_> {
    fn in_dim(&self) -> usize {
        self.net.in_dim() - self.n_classes
    }

    fn out_dim(&self) -> usize {
        self.net.out_dim()
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.net
            .forward_conditioned(x, Some((self.label, self.n_classes)))
    }

    fn forward_frozen(&self, tape: &mut Tape, x: Var) -> Var {
        self.net
            .forward_frozen_conditioned(tape, x, Some((self.label, self.n_classes)))
    }
}

// --- Checkpoint format -----------------------------------------------------

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub sn: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub seed: u64,
    pub arch: Vec<CheckpointLayer>,
    /// Per layer: weight matrix in row-major order, then bias.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub optimizer: Option<crate::optim::OptimizerCheckpoint>,
}

impl MlpNetwork {
    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            seed,
            arch: self
                .layers
                .iter()
                .zip(&self.activations)
                .map(|(l, &a)| CheckpointLayer {
                    in_dim: l.in_dim(),
                    out_dim: l.out_dim(),
                    activation: a,
                    sn: l.sn,
                })
                .collect(),
            weights: self
                .layers
                .iter()
                .map(|l| l.w.iter().copied().collect())
                .collect(),
            biases: self
                .layers
                .iter()
                .map(|l| l.b.iter().copied().collect())
                .collect(),
            optimizer: None,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Contract(format!(
                "unsupported checkpoint format version {}",
                ck.format_version
            )));
        }
        if ck.arch.len() != ck.weights.len() || ck.arch.len() != ck.biases.len() {
            return Err(Error::Contract(
                "checkpoint arch/weights length mismatch".into(),
            ));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(ck.seed);
        let mut layers = Vec::with_capacity(ck.arch.len());
        let mut activations = Vec::with_capacity(ck.arch.len());
        for (i, spec) in ck.arch.iter().enumerate() {
            let expect = spec.in_dim * spec.out_dim;
            if ck.weights[i].len() != expect || ck.biases[i].len() != spec.out_dim {
                return Err(Error::Contract(format!(
                    "checkpoint layer {i} has wrong weight shape"
                )));
            }
            let mut layer = DenseLayer::new(spec.in_dim, spec.out_dim, spec.sn, &mut rng);
            layer.w = Matrix::from_shape_vec((spec.out_dim, spec.in_dim), ck.weights[i].clone())
                .expect("checked length");
            layer.b = Matrix::from_shape_vec((1, spec.out_dim), ck.biases[i].clone())
                .expect("checked length");
            if spec.sn {
                layer.refresh_sn(1);
            }
            layers.push(layer);
            activations.push(spec.activation);
        }
        Ok(MlpNetwork {
            layers,
            activations,
        })
    }
}
