//! ELBO terms, the capacity-constrained Lagrangian, and the training loop.
//!
//! Training minimizes `recon + β·(R − C)` over the model parameters with Adam
//! while β is pushed up or down by momentum-SGD ascent on an unconstrained
//! `λ` with `β = softplus(λ)`. The hierarchical model gets one multiplier per
//! latent level. Both optimizers step on every batch, with the dual step
//! using the batch-mean rate from the same forward pass.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::model::{LossWeights, Model, Noise, Reconstruction};
use crate::numerics::{sgd_momentum_step, sigmoid, softplus, softplus_inverse, AdamConfig};

/// Dual learning rate before the toy-scale multiplier.
pub const BASE_DUAL_LR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LagrangeState {
    pub lambda_raw: f64,
    pub momentum_buffer: f64,
    pub lr: f64,
    pub momentum: f64,
}

impl LagrangeState {
    /// Starts at `β = 1`.
    pub fn new(lr: f64, momentum: f64) -> Self {
        LagrangeState {
            lambda_raw: softplus_inverse(1.0),
            momentum_buffer: 0.0,
            lr,
            momentum,
        }
    }

    pub fn beta(&self) -> f64 {
        softplus(self.lambda_raw)
    }

    /// One ascent step on `β·(R − C)` with `R` held fixed.
    pub fn ascend(&mut self, rate: f64, capacity: f64) {
        let g = dual_grad(self.lambda_raw, rate, capacity);
        let (v, b) = sgd_momentum_step(self.lambda_raw, g, self.momentum_buffer, self.lr, self.momentum);
        self.lambda_raw = v;
        self.momentum_buffer = b;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CapacityTarget {
    Flat(f64),
    Hierarchical { high: f64, low: f64 },
}

impl CapacityTarget {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            CapacityTarget::Flat(c) => c >= 0.0,
            CapacityTarget::Hierarchical { high, low } => high >= 0.0 && low >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("capacity must be non-negative, got {self}")))
        }
    }

    /// Total budget on `R`.
    pub fn total(&self) -> f64 {
        match *self {
            CapacityTarget::Flat(c) => c,
            CapacityTarget::Hierarchical { high, low } => high + low,
        }
    }
}

impl fmt::Display for CapacityTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CapacityTarget::Flat(c) => write!(f, "{c}"),
            CapacityTarget::Hierarchical { high, low } => write!(f, "{high}/{low}"),
        }
    }
}

impl FromStr for CapacityTarget {
    type Err = Error;

    /// `C` or `C_H/C_L`.
    fn from_str(s: &str) -> Result<Self> {
        let num = |x: &str| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| Error::config(format!("bad capacity '{s}'")))
        };
        let t = match s.split_once('/') {
            Some((h, l)) => CapacityTarget::Hierarchical {
                high: num(h)?,
                low: num(l)?,
            },
            None => CapacityTarget::Flat(num(s)?),
        };
        t.validate()?;
        Ok(t)
    }
}

/// `recon + β·(R − C)`.
pub fn lagrangian(recon: f64, rate: f64, beta: f64, capacity: f64) -> f64 {
    recon + beta * (rate - capacity)
}

/// Derivative of `softplus(λ)·(R − C)` with respect to `λ`.
pub fn dual_grad(lambda_raw: f64, rate: f64, capacity: f64) -> f64 {
    sigmoid(lambda_raw) * (rate - capacity)
}

/// `recon + β_H·(R_H − C_H) + β_L·(R_L − C_L)`.
pub fn hier_lagrangian(recon: f64, r_high: f64, r_low: f64, b_high: f64, b_low: f64, c_high: f64, c_low: f64) -> f64 {
    recon + b_high * (r_high - c_high) + b_low * (r_low - c_low)
}

/// Dual gradients for `(λ_H, λ_L)`.
pub fn hier_dual_grads(
    lambda_high: f64,
    lambda_low: f64,
    r_high: f64,
    r_low: f64,
    c_high: f64,
    c_low: f64,
) -> (f64, f64) {
    (dual_grad(lambda_high, r_high, c_high), dual_grad(lambda_low, r_low, c_low))
}

/// Single-sample reconstruction NLL and closed-form `KL(q(z|x) ‖ N(0, I))`.
pub fn elbo_terms<R: Rng + ?Sized>(model: &Model, u: &Utterance, rng: &mut R) -> Result<(Reconstruction, f64)> {
    if model.config().hierarchical || !model.config().is_variational() {
        return Err(Error::config("elbo_terms needs a flat variational model"));
    }
    let noise = Noise::draw(model.config(), rng);
    let t = model.example_loss(u, &noise, &LossWeights::default(), None)?;
    Ok((t.recon, t.rate))
}

/// Single-sample reconstruction NLL, `R_H`, and `R_L`.
pub fn hier_elbo_terms<R: Rng + ?Sized>(model: &Model, u: &Utterance, rng: &mut R) -> Result<(Reconstruction, f64, f64)> {
    if !model.config().hierarchical {
        return Err(Error::config("hier_elbo_terms needs a hierarchical model"));
    }
    let noise = Noise::draw(model.config(), rng);
    let t = model.example_loss(u, &noise, &LossWeights::default(), None)?;
    Ok((t.recon, t.rate_high, t.rate_low))
}

/// Piecewise-constant learning rate: `rates[i]` applies from
/// `fractions[i]·total_steps` on.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub fractions: Vec<f64>,
    pub rates: Vec<f64>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            fractions: vec![0.0, 1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0, 4.0 / 6.0],
            rates: vec![1e-3, 5e-4, 3e-4, 1e-4, 5e-5],
        }
    }
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            fractions: vec![0.0],
            rates: vec![lr],
        }
    }

    /// Same shape with every rate multiplied by `factor`.
    pub fn scaled(mut self, factor: f64) -> Self {
        self.rates.iter_mut().for_each(|r| *r *= factor);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.rates.is_empty() || self.rates.len() != self.fractions.len() {
            return Err(Error::config("lr schedule needs matching non-empty fractions and rates"));
        }
        if self.fractions[0] != 0.0 || self.fractions.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::config("lr schedule fractions must start at 0 and not decrease"));
        }
        if self.rates.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::config("learning rates must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let frac = step as f64 / total.max(1) as f64;
        let mut lr = self.rates[0];
        for (f, r) in self.fractions.iter().zip(&self.rates) {
            if frac >= *f {
                lr = *r;
            }
        }
        lr
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    /// Multiplies [`BASE_DUAL_LR`].
    pub dual_lr_multiplier: f64,
    pub dual_momentum: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Freeze β (all multipliers) at this value and skip dual updates.
    pub fixed_beta: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch_size: 32,
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
            dual_lr_multiplier: 1000.0,
            dual_momentum: 0.9,
            clip_norm: Some(5.0),
            fixed_beta: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::config("steps and batch_size must be positive"));
        }
        if let Some(b) = self.fixed_beta {
            if !(b >= 0.0) {
                return Err(Error::config("fixed beta must be non-negative"));
            }
        }
        self.schedule.validate()
    }

    pub fn dual_lr(&self) -> f64 {
        BASE_DUAL_LR * self.dual_lr_multiplier
    }
}

/// Batch means for one training step.
///
/// For the flat model `rate` is the closed-form KL and the split fields are
/// zero. For the hierarchical model `rate = rate_high + rate_low` by
/// construction of the estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub recon_nll: f64,
    pub rate: f64,
    pub rate_high: f64,
    pub rate_low: f64,
    pub beta: f64,
    pub beta_high: f64,
    pub beta_low: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "step,recon_nll,R,R_H,R_L,beta,beta_H,beta_L,lr";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.recon_nll,
            self.rate,
            self.rate_high,
            self.rate_low,
            self.beta,
            self.beta_high,
            self.beta_low,
            self.lr
        )
    }
}

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[StepMetrics]) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Multipliers at the end of training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DualState {
    Flat(LagrangeState),
    Hierarchical { high: LagrangeState, low: LagrangeState },
    /// Tanh bottleneck or frozen β: nothing to ascend.
    None,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters after the last successful step.
    pub model: Model,
    pub metrics: Vec<StepMetrics>,
    pub dual: DualState,
    /// Set when training stopped early on a non-finite loss or gradient.
    pub aborted: Option<Error>,
}

impl TrainOutcome {
    /// Mean of `f` over the last `window` logged steps.
    pub fn trailing_mean(&self, window: usize, f: impl Fn(&StepMetrics) -> f64) -> f64 {
        trailing_mean(&self.metrics, window, f)
    }
}

pub fn trailing_mean(metrics: &[StepMetrics], window: usize, f: impl Fn(&StepMetrics) -> f64) -> f64 {
    let start = metrics.len().saturating_sub(window);
    let tail = &metrics[start..];
    if tail.is_empty() {
        return f64::NAN;
    }
    tail.iter().map(f).sum::<f64>() / tail.len() as f64
}

/// Labels and channel counts must fit the model.
pub fn check_dataset(model: &Model, data: &[Utterance]) -> Result<()> {
    let c = model.config();
    for (i, u) in data.iter().enumerate() {
        if u.channels() != c.channels || u.is_empty() {
            return Err(Error::input(format!(
                "utterance {i}: {}x{} frames do not fit a {}-channel model",
                u.len(),
                u.channels(),
                c.channels
            )));
        }
        if u.y_t >= c.num_text_classes || u.y_s >= c.num_speakers {
            return Err(Error::input(format!("utterance {i}: label out of range")));
        }
    }
    Ok(())
}

/// Run simultaneous Adam descent on θ and momentum ascent on the multipliers.
/// Deterministic given `cfg.seed`.
pub fn train(mut model: Model, data: &[Utterance], target: CapacityTarget, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    cfg.validate()?;
    target.validate()?;
    let mcfg = model.config().clone();
    match (mcfg.hierarchical, target) {
        (true, CapacityTarget::Flat(_)) => {
            return Err(Error::config("hierarchical model needs a C_H/C_L capacity target"));
        }
        (false, CapacityTarget::Hierarchical { .. }) => {
            return Err(Error::config("flat model needs a single capacity target"));
        }
        _ => {}
    }
    check_dataset(&model, data)?;
    let dual_active = mcfg.is_variational() && cfg.fixed_beta.is_none();
    let mut flat = LagrangeState::new(cfg.dual_lr(), cfg.dual_momentum);
    let mut high = flat;
    let mut low = flat;

    // Separate streams for batch selection and latent noise keep the batch
    // sequence identical across models with different latent sizes.
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    batch_rng.set_stream(1);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(2);
    let mut grads = model.params().grad_buffer();
    let mut metrics = Vec::with_capacity(cfg.steps);
    let inv_b = 1.0 / cfg.batch_size as f64;
    let mut aborted = None;

    for step in 0..cfg.steps {
        let weights = match cfg.fixed_beta {
            Some(b) => LossWeights {
                beta: b,
                beta_high: b,
                beta_low: b,
            },
            None => LossWeights {
                beta: flat.beta(),
                beta_high: high.beta(),
                beta_low: low.beta(),
            },
        };
        grads.zero();
        let (mut recon, mut rate, mut r_h, mut r_l) = (0.0, 0.0, 0.0, 0.0);
        let mut loss = 0.0;
        let mut failure = None;
        for _ in 0..cfg.batch_size {
            let u = &data[batch_rng.random_range(0..data.len())];
            let noise = Noise::draw(&mcfg, &mut noise_rng);
            let t = match model.example_loss(u, &noise, &weights, Some(&mut grads)) {
                Ok(t) => t,
                Err(e) => {
                    failure = Some(e.to_string());
                    break;
                }
            };
            recon += t.recon.total();
            rate += t.rate;
            r_h += t.rate_high;
            r_l += t.rate_low;
            loss += t.weighted(&mcfg, &weights);
        }
        if let Some(message) = failure {
            aborted = Some(Error::Training { step, message });
            break;
        }
        recon *= inv_b;
        rate *= inv_b;
        r_h *= inv_b;
        r_l *= inv_b;
        if !loss.is_finite() {
            aborted = Some(Error::Training {
                step,
                message: format!("non-finite loss {loss}"),
            });
            break;
        }
        let lr = cfg.schedule.lr_at(step, cfg.steps);
        let store = model.params_mut();
        store.zero_grads();
        store.add_grads(&grads, inv_b);
        if let Some(c) = cfg.clip_norm {
            store.clip_grad_norm(c);
        }
        if let Err(e) = store.adam_step(lr, cfg.adam) {
            store.zero_grads();
            aborted = Some(Error::Training {
                step,
                message: e.to_string(),
            });
            break;
        }
        metrics.push(StepMetrics {
            step,
            recon_nll: recon,
            rate,
            rate_high: r_h,
            rate_low: r_l,
            beta: weights.beta,
            beta_high: weights.beta_high,
            beta_low: weights.beta_low,
            lr,
        });
        if dual_active {
            match target {
                CapacityTarget::Flat(c) => flat.ascend(rate, c),
                CapacityTarget::Hierarchical { high: ch, low: cl } => {
                    high.ascend(r_h, ch);
                    low.ascend(r_l, cl);
                }
            }
        }
    }

    let dual = if !dual_active {
        DualState::None
    } else if mcfg.hierarchical {
        DualState::Hierarchical { high, low }
    } else {
        DualState::Flat(flat)
    };
    Ok(TrainOutcome {
        model,
        metrics,
        dual,
        aborted,
    })
}

/// Held-out averages over a dataset, with a fixed noise seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeldOut {
    /// Mean reconstruction NLL per utterance (single posterior sample).
    pub recon_nll: f64,
    /// Mean reconstruction NLL per frame.
    pub recon_per_frame: f64,
    /// Mean L1 part of the reconstruction NLL per utterance.
    pub l1: f64,
    /// Mean stop cross-entropy per utterance.
    pub stop_xent: f64,
    pub rate: f64,
    pub rate_high: f64,
    pub rate_low: f64,
}

pub fn evaluate_heldout(model: &Model, data: &[Utterance], seed: u64) -> Result<HeldOut> {
    if data.is_empty() {
        return Err(Error::input("evaluation set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = HeldOut {
        recon_nll: 0.0,
        recon_per_frame: 0.0,
        l1: 0.0,
        stop_xent: 0.0,
        rate: 0.0,
        rate_high: 0.0,
        rate_low: 0.0,
    };
    let mut frames = 0usize;
    for u in data {
        let noise = Noise::draw(model.config(), &mut rng);
        let t = model.example_loss(u, &noise, &LossWeights::default(), None)?;
        acc.recon_nll += t.recon.total();
        acc.l1 += t.recon.l1;
        acc.stop_xent += t.recon.stop_xent;
        frames += t.recon.frames;
        acc.rate += t.rate;
        acc.rate_high += t.rate_high;
        acc.rate_low += t.rate_low;
    }
    let n = data.len() as f64;
    acc.recon_per_frame = acc.recon_nll / frames as f64;
    acc.recon_nll /= n;
    acc.l1 /= n;
    acc.stop_xent /= n;
    acc.rate /= n;
    acc.rate_high /= n;
    acc.rate_low /= n;
    Ok(acc)
}
