//! Layer-wise Lipschitz estimates.
//!
//! For consecutive feature maps `F^{k-1}`, `F^k` of a batch (rows
//! L2-normalized), the transmitting matrix is `AᵀA` with
//! `A = (F^k)ᵀ F^{k-1}`. Its dominant eigenvalue, found by power iteration,
//! stands in for the spectral norm of layer `k`. A cyclic Jacobi solver is
//! provided as an exact reference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backbone::{ForwardTrace, MlpBackbone};
use crate::error::{shape_err, Error, Result};
use crate::tape::{Tape, Var, NORM_EPS};
use crate::tensor::Tensor;

/// Power-iteration steps used during training.
pub const TRAIN_POWER_ITERS: usize = 5;

/// One dominant-eigenvalue estimate per weight layer, live on the tape.
#[derive(Clone, Debug)]
pub struct SpectralEstimate<'t> {
    pub lambdas: Vec<Var<'t>>,
}

impl<'t> SpectralEstimate<'t> {
    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.lambdas
            .iter()
            .map(|l| l.item().expect("lambda is scalar"))
            .collect()
    }

    pub fn product(&self) -> f64 {
        self.values().iter().product()
    }
}

/// `TM = AᵀA` with `A = F̂_curᵀ F̂_prev`; shape `d_prev × d_prev`.
pub fn transmitting_matrix<'t>(f_prev: Var<'t>, f_cur: Var<'t>) -> Result<Var<'t>> {
    let (bp, bc) = (f_prev.value().rows(), f_cur.value().rows());
    if bp != bc {
        return Err(shape_err(
            "transmitting_matrix",
            format!("batch sizes {} and {}", bp, bc),
        ));
    }
    let prev = f_prev.l2_normalize_rows()?;
    let cur = f_cur.l2_normalize_rows()?;
    let a = cur.t()?.matmul(prev)?;
    a.t()?.matmul(a)
}

/// Seeded unit start vector followed by `iters` normalized multiplications.
pub fn dominant_direction(m: &Tensor, iters: usize, seed: u64) -> Result<Vec<f64>> {
    let n = square_dim(m, "power_iteration")?;
    if iters == 0 {
        return Err(Error::Config("power iteration needs at least one step".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n0 = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
    v.iter_mut().for_each(|x| *x /= n0);

    let data = m.data();
    let mut mv = vec![0.0; n];
    for _ in 0..iters {
        for (i, out) in mv.iter_mut().enumerate() {
            *out = data[i * n..(i + 1) * n]
                .iter()
                .zip(&v)
                .map(|(a, b)| a * b)
                .sum();
        }
        let norm = mv.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
        for (vi, mi) in v.iter_mut().zip(&mv) {
            *vi = mi / norm;
        }
    }
    Ok(v)
}

/// Rayleigh quotient `vᵀMv` at the power-iteration direction `v`.
///
/// `v` enters the tape as a constant, so the gradient with respect to `M`
/// is `vvᵀ`.
pub fn power_iteration<'t>(m: Var<'t>, iters: usize, seed: u64) -> Result<Var<'t>> {
    let v = dominant_direction(&m.value(), iters, seed)?;
    let n = v.len();
    let tape = m.tape();
    let row = tape.constant(Tensor::matrix(1, n, v.clone())?);
    let col = tape.constant(Tensor::matrix(n, 1, v)?);
    row.matmul(m)?.matmul(col)
}

/// Detached power-iteration estimate of a plain matrix.
pub fn power_iteration_value(m: &Tensor, iters: usize, seed: u64) -> Result<f64> {
    let tape = Tape::new();
    power_iteration(tape.constant(m.clone()), iters, seed)?.item()
}

fn square_dim(m: &Tensor, op: &'static str) -> Result<usize> {
    match m.shape() {
        [r, c] if r == c && *r > 0 => Ok(*r),
        s => Err(shape_err(op, format!("expected a non-empty square matrix, got {:?}", s))),
    }
}

/// All eigenvalues of a symmetric matrix, descending, by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(m: &Tensor) -> Result<Vec<f64>> {
    let n = square_dim(m, "dense_max_eigenvalue")?;
    let scale = m.data().iter().fold(1.0f64, |acc, x| acc.max(x.abs()));
    for i in 0..n {
        for j in (i + 1)..n {
            if (m.get(i, j) - m.get(j, i)).abs() > 1e-9 * scale {
                return Err(Error::Numeric(format!(
                    "matrix is not symmetric at ({}, {})",
                    i, j
                )));
            }
        }
    }

    let mut a = m.data().to_vec();
    let idx = |r: usize, c: usize| r * n + c;
    let frob = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-12 * frob.max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[idx(i, j)].powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[idx(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[idx(q, q)] - a[idx(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                a[idx(p, p)] -= t * apq;
                a[idx(q, q)] += t * apq;
                a[idx(p, q)] = 0.0;
                a[idx(q, p)] = 0.0;
                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let arp = a[idx(r, p)];
                    let arq = a[idx(r, q)];
                    let new_rp = c * arp - s * arq;
                    let new_rq = s * arp + c * arq;
                    a[idx(r, p)] = new_rp;
                    a[idx(p, r)] = new_rp;
                    a[idx(r, q)] = new_rq;
                    a[idx(q, r)] = new_rq;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[idx(i, i)]).collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    Ok(eig)
}

/// Exact dominant eigenvalue of a symmetric matrix. Not differentiable.
pub fn dense_max_eigenvalue(m: &Tensor) -> Result<f64> {
    Ok(symmetric_eigenvalues(m)?[0])
}

/// Per-call seed for layer `k`, so layers never share a start vector.
pub fn layer_seed(seed: u64, k: usize) -> u64 {
    crate::seed::derive(seed, k as u64)
}

/// `λ₁^k` for every weight layer `k = 1..K` of a trace.
pub fn layer_lipschitz_estimates<'t>(
    trace: &ForwardTrace<'t>,
    iters: usize,
    seed: u64,
) -> Result<SpectralEstimate<'t>> {
    let lambdas = trace
        .feature_maps
        .windows(2)
        .enumerate()
        .map(|(k, pair)| {
            let tm = transmitting_matrix(pair[0], pair[1])?;
            power_iteration(tm, iters, layer_seed(seed, k))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SpectralEstimate { lambdas })
}

/// Product of the layer estimates over one batch: an upper-bound proxy for
/// the network's Lipschitz constant. Detached.
pub fn model_lipschitz_product(
    model: &MlpBackbone,
    batch: &Tensor,
    iters: usize,
    seed: u64,
) -> Result<f64> {
    Ok(model_layer_estimates(model, batch, iters, seed)?.iter().product())
}

/// Detached per-layer estimates of `model` on `batch`.
pub fn model_layer_estimates(
    model: &MlpBackbone,
    batch: &Tensor,
    iters: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if batch.rows() == 0 || batch.is_empty() {
        return Err(Error::Empty("Lipschitz product over an empty batch".into()));
    }
    let tape = Tape::new();
    let trace = model.bind(&tape, false).forward_with_trace(batch)?;
    Ok(layer_lipschitz_estimates(&trace, iters, seed)?.values())
}
