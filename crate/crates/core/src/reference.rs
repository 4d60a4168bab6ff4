//! Independent reference computations used as oracles by tests and the
//! `verify` suites. Nothing here shares code with the implementations it
//! checks: differentiation is done by finite differences or hand-written
//! chain rule, singular values by Jacobi rotations, assignments by
//! exhaustive permutation search.

use ndarray::Array2;

use crate::nn::MlpNetwork;
use crate::tape::Matrix;

/// Central finite difference of a scalar function, one coordinate at a time.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Central finite difference along a fixed direction; equals `grad . dir`.
pub fn directional_difference<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x: &[f64],
    dir: &[f64],
    h: f64,
) -> f64 {
    let xp: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a + h * d).collect();
    let xm: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a - h * d).collect();
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// Singular values of a dense matrix by one-sided Jacobi rotations,
/// descending order. Accurate to near machine precision for the small
/// matrices it is used on.
pub fn singular_values(a: &Matrix) -> Vec<f64> {
    let (m, n) = a.dim();
    if m < n {
        let at = a.t().to_owned();
        return singular_values(&at);
    }
    let mut u: Array2<f64> = a.clone();
    let tol = 1e-15;
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let cp = u.column(p);
                let cq = u.column(q);
                let alpha: f64 = cp.dot(&cp);
                let beta: f64 = cq.dot(&cq);
                let gamma: f64 = cp.dot(&cq);
                if gamma.abs() <= tol * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let up = u[(i, p)];
                    let uq = u[(i, q)];
                    u[(i, p)] = c * up - s * uq;
                    u[(i, q)] = s * up + c * uq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..n)
        .map(|j| {
            let col = u.column(j);
            col.dot(&col).sqrt()
        })
        .collect();
    sv.sort_by(|a, b| b.partial_cmp(a).expect("singular values are finite"));
    sv
}

/// Exhaustive minimum-cost assignment over all permutations. `n <= 9`.
pub fn min_cost_assignment_exhaustive(cost: &Matrix) -> (Vec<usize>, f64) {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "square cost matrix required");
    assert!(n <= 9, "exhaustive search is factorial; keep n small");
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_cost = assignment_cost(cost, &perm);
    // Heap's algorithm.
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            let cst = assignment_cost(cost, &perm);
            if cst < best_cost {
                best_cost = cst;
                best = perm.clone();
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    (best, best_cost)
}

fn assignment_cost(cost: &Matrix, perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum()
}

/// Gradient of the summed network output with respect to the input batch,
/// by hand-written chain rule on plain array ops (no tape involved).
pub fn mlp_input_gradient(net: &MlpNetwork, x: &Matrix) -> Matrix {
    let weights: Vec<Matrix> = net.layers.iter().map(|l| l.effective_weight()).collect();
    let biases: Vec<&Matrix> = net.layers.iter().map(|l| &l.b).collect();

    // Forward, keeping pre-activations.
    let mut h = x.clone();
    let mut preacts: Vec<Matrix> = Vec::with_capacity(weights.len());
    for ((w, b), act) in weights.iter().zip(&biases).zip(&net.activations) {
        let mut z = h.dot(&w.t());
        for mut row in z.rows_mut() {
            row += &b.row(0);
        }
        preacts.push(z.clone());
        h = apply_activation(act, z);
    }

    // Backward from d(sum of outputs)/d(out) = 1.
    let (n, out_dim) = (x.nrows(), weights.last().expect("layer").nrows());
    let mut delta = Array2::<f64>::ones((n, out_dim));
    for l in (0..weights.len()).rev() {
        delta = &delta * &activation_derivative(&net.activations[l], &preacts[l]);
        delta = delta.dot(&weights[l]);
    }
    delta
}

fn apply_activation(act: &crate::nn::Activation, z: Matrix) -> Matrix {
    use crate::nn::Activation;
    match *act {
        Activation::LRelu { slope } => z.mapv(|t| if t > 0.0 { t } else { slope * t }),
        Activation::Tanh => z.mapv(f64::tanh),
        Activation::Identity => z,
    }
}

fn activation_derivative(act: &crate::nn::Activation, z: &Matrix) -> Matrix {
    use crate::nn::Activation;
    match *act {
        Activation::LRelu { slope } => z.mapv(|t| if t > 0.0 { 1.0 } else { slope }),
        Activation::Tanh => z.mapv(|t| {
            let y = t.tanh();
            1.0 - y * y
        }),
        Activation::Identity => Matrix::ones(z.dim()),
    }
}
