//! Lipschitz-driven regularizer for replay examples.
//!
//! Two terms over the per-layer estimates `λ₁^k`:
//!
//! * `L_c = (1/K) Σ |λ₁^k − c_k|` pulls each layer towards a target `c_k`;
//! * `L_0 = (1/K) Σ |λ₁^k|` pushes the estimates towards zero.
//!
//! The total is `α·L_c + β·L_0`. Targets are either learned by gradient
//! descent alongside the backbone or fixed.

use serde::{Deserialize, Serialize};

use crate::backbone::ForwardTrace;
use crate::error::{shape_err, Error, Result};
use crate::spectral::{layer_lipschitz_estimates, SpectralEstimate, TRAIN_POWER_ITERS};
use crate::tape::{sgd_step, Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    Learned,
    Fixed(f64),
}

/// Which batch the regularizer is computed on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizationTarget {
    Buffer,
    Stream,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LiderConfig {
    pub alpha: f64,
    pub beta: f64,
    pub power_iters: usize,
    pub target_mode: TargetMode,
    /// Learning rate of the targets; `None` means the backbone rate.
    pub target_lr: Option<f64>,
    pub regularization_target: RegularizationTarget,
}

impl Default for LiderConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.1,
            power_iters: TRAIN_POWER_ITERS,
            target_mode: TargetMode::Learned,
            target_lr: None,
            regularization_target: RegularizationTarget::Buffer,
        }
    }
}

impl LiderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("lider.alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("lider.beta must be >= 0, got {}", self.beta)));
        }
        if self.power_iters == 0 {
            return Err(Error::Config("lider.power_iters must be >= 1".into()));
        }
        if let Some(lr) = self.target_lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("lider.target_lr must be > 0, got {}", lr)));
            }
        }
        if let TargetMode::Fixed(c) = self.target_mode {
            if !c.is_finite() {
                return Err(Error::Config("fixed Lipschitz target must be finite".into()));
            }
        }
        Ok(())
    }
}

/// Per-layer Lipschitz targets `c_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzTargets {
    values: Vec<f64>,
    initialized: bool,
}

impl LipschitzTargets {
    /// Uninitialized targets for a `depth`-layer network.
    pub fn new(depth: usize) -> Self {
        Self {
            values: vec![0.0; depth],
            initialized: false,
        }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        Self {
            values,
            initialized: true,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Sets `c_k` to the detached measurements on first use; no-op afterwards.
    pub fn initialize_from(&mut self, lambdas: &[f64]) -> Result<()> {
        if lambdas.len() != self.values.len() {
            return Err(shape_err(
                "initialize_targets",
                format!("{} estimates for {} targets", lambdas.len(), self.values.len()),
            ));
        }
        if !self.initialized {
            self.values.copy_from_slice(lambdas);
            self.initialized = true;
        }
        Ok(())
    }

    /// One gradient step on the targets.
    pub fn apply_gradient(&mut self, grad: &Tensor, lr: f64) -> Result<()> {
        let mut p = [Tensor::vector(std::mem::take(&mut self.values))];
        let res = sgd_step(&mut p, std::slice::from_ref(grad), lr);
        let [t] = p;
        self.values = t.into_data();
        res
    }
}

/// `(1/K) Σ_k |λ₁^k − c_k|`.
pub fn loss_c_lip<'t>(est: &SpectralEstimate<'t>, targets: Var<'t>) -> Result<Var<'t>> {
    if est.is_empty() {
        return Err(Error::Empty("c-Lipschitz loss over zero layers".into()));
    }
    let k = targets.value().len();
    if k != est.len() {
        return Err(shape_err(
            "loss_c_lip",
            format!("{} estimates, {} targets", est.len(), k),
        ));
    }
    let tape = targets.tape();
    let lam = tape.stack(&est.lambdas)?;
    lam.sub(targets)?.abs_mean()
}

/// `(1/K) Σ_k |λ₁^k|`.
pub fn loss_0_lip<'t>(est: &SpectralEstimate<'t>) -> Result<Var<'t>> {
    let first = est
        .lambdas
        .first()
        .ok_or_else(|| Error::Empty("0-Lipschitz loss over zero layers".into()))?;
    first.tape().stack(&est.lambdas)?.abs_mean()
}

/// Regularizer terms recorded on a tape.
pub struct LiderTerms<'t> {
    pub total: Var<'t>,
    pub c_lip: Var<'t>,
    pub zero_lip: Var<'t>,
    /// Present only for learned targets.
    pub targets: Option<Var<'t>>,
    pub lambdas: Vec<f64>,
}

/// `α·L_c + β·L_0` on the trace of the designated batch.
///
/// `targets` must already be initialized in learned mode (see
/// [`LipschitzTargets::initialize_from`]); the function never mutates them.
pub fn lider_terms<'t>(
    trace: &ForwardTrace<'t>,
    targets: &LipschitzTargets,
    cfg: &LiderConfig,
    seed: u64,
) -> Result<LiderTerms<'t>> {
    let est = layer_lipschitz_estimates(trace, cfg.power_iters, seed)?;
    terms_from_estimate(&est, targets, cfg)
}

/// As [`lider_terms`], from precomputed estimates.
pub fn terms_from_estimate<'t>(
    est: &SpectralEstimate<'t>,
    targets: &LipschitzTargets,
    cfg: &LiderConfig,
) -> Result<LiderTerms<'t>> {
    let tape: &'t Tape = match est.lambdas.first() {
        Some(l) => l.tape(),
        None => return Err(Error::Empty("no layer estimates".into())),
    };
    let (c_var, learned) = match cfg.target_mode {
        TargetMode::Learned => {
            if !targets.is_initialized() {
                return Err(Error::Config("learned Lipschitz targets used before initialization".into()));
            }
            (tape.param(Tensor::vector(targets.values().to_vec())), true)
        }
        TargetMode::Fixed(c) => (tape.constant(Tensor::filled(&[est.len()], c)), false),
    };
    let c_lip = loss_c_lip(est, c_var)?;
    let zero_lip = loss_0_lip(est)?;
    let total = c_lip.scale(cfg.alpha).add(zero_lip.scale(cfg.beta))?;
    Ok(LiderTerms {
        total,
        c_lip,
        zero_lip,
        targets: learned.then_some(c_var),
        lambdas: est.values(),
    })
}

/// Training-loop owner of the targets.
#[derive(Clone, Debug)]
pub struct LiderRegularizer {
    pub cfg: LiderConfig,
    pub targets: LipschitzTargets,
}

impl LiderRegularizer {
    pub fn new(cfg: LiderConfig, depth: usize) -> Result<Self> {
        cfg.validate()?;
        let targets = match cfg.target_mode {
            TargetMode::Learned => LipschitzTargets::new(depth),
            TargetMode::Fixed(c) => LipschitzTargets::from_values(vec![c; depth]),
        };
        Ok(Self { cfg, targets })
    }

    /// Records the regularizer on `trace`, initializing learned targets on
    /// the first call.
    pub fn terms<'t>(&mut self, trace: &ForwardTrace<'t>, seed: u64) -> Result<LiderTerms<'t>> {
        let est = layer_lipschitz_estimates(trace, self.cfg.power_iters, seed)?;
        if self.cfg.target_mode == TargetMode::Learned && !self.targets.is_initialized() {
            self.targets.initialize_from(&est.values())?;
        }
        terms_from_estimate(&est, &self.targets, &self.cfg)
    }

    /// Gradient step on learned targets after a backward pass.
    pub fn update_targets(&mut self, terms: &LiderTerms<'_>, grads: &Gradients, backbone_lr: f64) -> Result<()> {
        if let Some(c) = terms.targets {
            let lr = self.cfg.target_lr.unwrap_or(backbone_lr);
            self.targets.apply_gradient(&grads.wrt(c), lr)?;
        }
        Ok(())
    }
}
