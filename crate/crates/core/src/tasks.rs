//! Transfer and sampling tasks, scored with MCD-DTW.
//!
//! A reference utterance is encoded, its latent is held fixed or resampled
//! at the chosen level, and the decoder runs free with (possibly different)
//! text and speaker labels.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Utterance;
use crate::distributions::standard_normal_vec;
use crate::error::{Error, Result};
use crate::mcd::{mcd_dtw_frames, McdOptions};
use crate::model::Model;
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentLevel {
    /// Single latent; the reference posterior mean (or a sample with
    /// `sample_reference`) is reused for every output.
    Flat,
    /// Infer `z_H` from the reference, then draw `z_L ~ p(z_L | z_H)` per output.
    ViaHigh,
    /// Draw `z_L ~ q(z_L | x_ref)` per output.
    ViaLow,
}

impl fmt::Display for LatentLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LatentLevel::Flat => "flat",
            LatentLevel::ViaHigh => "via_z_H",
            LatentLevel::ViaLow => "via_z_L",
        })
    }
}

impl FromStr for LatentLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(LatentLevel::Flat),
            "via_z_H" | "via_zh" | "high" => Ok(LatentLevel::ViaHigh),
            "via_z_L" | "via_zl" | "low" => Ok(LatentLevel::ViaLow),
            _ => Err(Error::config(format!("unknown latent level '{s}' (flat, via_z_H, via_z_L)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferJob {
    pub reference: Utterance,
    pub target_y_t: usize,
    pub target_y_s: usize,
    pub level: LatentLevel,
    pub num_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferOptions {
    /// Free-running length cap.
    pub max_len: usize,
    /// Flat level only: sample `z_ref ~ q` per output instead of the mean.
    pub sample_reference: bool,
}

/// Twice the longest utterance in `data`.
pub fn default_max_len(data: &[Utterance]) -> usize {
    2 * data.iter().map(Utterance::len).max().unwrap_or(1)
}

fn check_job(model: &Model, job: &TransferJob) -> Result<()> {
    let cfg = model.config();
    if job.num_samples == 0 {
        return Err(Error::input("num_samples must be at least 1"));
    }
    if job.level != LatentLevel::Flat && !cfg.hierarchical {
        return Err(Error::config(format!("{} transfer needs a hierarchical model", job.level)));
    }
    if job.level == LatentLevel::Flat && cfg.hierarchical {
        return Err(Error::config("hierarchical model: use via_z_H or via_z_L"));
    }
    if job.target_y_t >= cfg.num_text_classes || job.target_y_s >= cfg.num_speakers {
        return Err(Error::input(format!(
            "target labels ({}, {}) out of range",
            job.target_y_t, job.target_y_s
        )));
    }
    if job.reference.channels() != cfg.channels {
        return Err(Error::input("reference channel count does not match the model"));
    }
    Ok(())
}

/// Generate `job.num_samples` outputs. Reads the model only.
pub fn transfer(model: &Model, job: &TransferJob, opts: &TransferOptions, seed: u64) -> Result<Vec<Matrix>> {
    check_job(model, job)?;
    let v = model.view();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let decode = |z: &[f64]| v.decode_free_running(z, job.target_y_t, job.target_y_s, opts.max_len);
    let u = &job.reference;
    match job.level {
        LatentLevel::Flat => {
            if opts.sample_reference && model.config().is_variational() {
                let r = v.encode_reference(&u.frames)?;
                let q = v.posterior(&r, &v.condition_summary(u.y_t, u.y_s)?)?;
                (0..job.num_samples).map(|_| decode(&q.sample(&mut rng).0)).collect()
            } else {
                // Deterministic latent: every request decodes identically.
                let out = decode(&v.reference_latent(u)?)?;
                Ok(vec![out; job.num_samples])
            }
        }
        LatentLevel::ViaHigh | LatentLevel::ViaLow => {
            let r = v.encode_reference(&u.frames)?;
            let q_low = v.posterior(&r, &v.condition_summary(u.y_t, u.y_s)?)?;
            if job.level == LatentLevel::ViaLow {
                return (0..job.num_samples).map(|_| decode(&q_low.sample(&mut rng).0)).collect();
            }
            let z_low_ref = q_low.sample(&mut rng).0;
            let z_high = v.high_posterior(&z_low_ref)?.sample(&mut rng).0;
            let p_low = v.conditional_prior(&z_high)?;
            (0..job.num_samples).map(|_| decode(&p_low.sample(&mut rng).0)).collect()
        }
    }
}

/// Decode `n` latents drawn from the prior: `z ~ N(0, I)` for a flat model,
/// `z_H ~ N(0, I)` then `z_L ~ p(z_L | z_H)` for a hierarchical one.
pub fn prior_sample(model: &Model, y_t: usize, y_s: usize, n: usize, seed: u64, max_len: usize) -> Result<Vec<Matrix>> {
    let cfg = model.config();
    if !cfg.is_variational() {
        return Err(Error::config("the tanh bottleneck has no prior to sample"));
    }
    let v = model.view();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let z = if cfg.hierarchical {
                let z_high = standard_normal_vec(&mut rng, cfg.high_latent_dim);
                v.conditional_prior(&z_high)?.sample(&mut rng).0
            } else {
                standard_normal_vec(&mut rng, cfg.latent_dim)
            };
            v.decode_free_running(&z, y_t, y_s, max_len)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Length consistency

/// Whether `len` lies in the length range a class with `base` frames can
/// produce across the tempo range.
pub fn length_consistent(len: usize, base: usize) -> bool {
    let lo = crate::data::utterance_length(base, crate::data::TEMPO_MIN);
    let hi = crate::data::utterance_length(base, crate::data::TEMPO_MAX);
    (lo..=hi).contains(&len)
}

/// Fraction of prior samples whose length fits the requested class, over
/// `per_class` samples for every class (speaker cycled).
pub fn prior_length_consistency(model: &Model, base_lengths: &[usize], per_class: usize, seed: u64, max_len: usize) -> Result<f64> {
    let cfg = model.config();
    if base_lengths.len() != cfg.num_text_classes {
        return Err(Error::input("one base length per text class is required"));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for (y_t, &base) in base_lengths.iter().enumerate() {
        let y_s = y_t % cfg.num_speakers;
        for out in prior_sample(model, y_t, y_s, per_class, seed.wrapping_add(y_t as u64), max_len)? {
            hits += usize::from(length_consistent(out.rows(), base));
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

// ---------------------------------------------------------------------------
// Evaluation

/// Which labels the decoder receives relative to the reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    SameText,
    InterText,
    InterSpeaker,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::SameText => "same_text",
            TaskKind::InterText => "inter_text",
            TaskKind::InterSpeaker => "inter_speaker",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same_text" => Ok(TaskKind::SameText),
            "inter_text" => Ok(TaskKind::InterText),
            "inter_speaker" => Ok(TaskKind::InterSpeaker),
            _ => Err(Error::config(format!("unknown task '{s}' (same_text, inter_text, inter_speaker)"))),
        }
    }
}

impl TaskKind {
    /// Target labels for a reference: the next class or speaker, cyclically,
    /// for the inter-* tasks.
    pub fn targets(self, u: &Utterance, num_text_classes: usize, num_speakers: usize) -> (usize, usize) {
        match self {
            TaskKind::SameText => (u.y_t, u.y_s),
            TaskKind::InterText => ((u.y_t + 1) % num_text_classes, u.y_s),
            TaskKind::InterSpeaker => (u.y_t, (u.y_s + 1) % num_speakers),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub level: LatentLevel,
    pub num_samples: usize,
    pub seed: u64,
    pub transfer: TransferOptions,
    pub mcd: McdOptions,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, level: LatentLevel, max_len: usize) -> Self {
        TaskSpec {
            kind,
            level,
            num_samples: 5,
            seed: 0,
            transfer: TransferOptions {
                max_len,
                sample_reference: false,
            },
            mcd: McdOptions::default(),
        }
    }
}

/// Anything that turns a job into output frames; lets the metric pipeline be
/// checked against stub decoders.
pub trait Synthesizer {
    fn num_labels(&self) -> (usize, usize);
    fn synthesize(&self, job: &TransferJob, opts: &TransferOptions, seed: u64) -> Result<Vec<Matrix>>;
}

impl Synthesizer for Model {
    fn num_labels(&self) -> (usize, usize) {
        (self.config().num_text_classes, self.config().num_speakers)
    }

    fn synthesize(&self, job: &TransferJob, opts: &TransferOptions, seed: u64) -> Result<Vec<Matrix>> {
        transfer(self, job, opts, seed)
    }
}

/// Returns the reference frames unchanged.
#[derive(Debug, Clone, Copy)]
pub struct CopyOracle {
    pub num_text_classes: usize,
    pub num_speakers: usize,
}

impl Synthesizer for CopyOracle {
    fn num_labels(&self) -> (usize, usize) {
        (self.num_text_classes, self.num_speakers)
    }

    fn synthesize(&self, job: &TransferJob, _: &TransferOptions, _: u64) -> Result<Vec<Matrix>> {
        Ok(vec![job.reference.frames.clone(); job.num_samples])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferSummary {
    pub kind: TaskKind,
    pub level: LatentLevel,
    /// Mean over references of the mean distance from each output to the reference.
    pub ref_dist: f64,
    /// Mean over references of the mean distance from output 0 to outputs 1..
    /// (`NaN` with a single sample).
    pub xsamp_dist: f64,
    pub per_reference: Vec<f64>,
    pub per_reference_xsamp: Vec<f64>,
}

impl TransferSummary {
    pub fn n(&self) -> usize {
        self.per_reference.len()
    }

    pub fn task_label(&self) -> String {
        format!("{}/{}", self.kind, self.level)
    }
}

pub const SUMMARY_HEADER: &str = "task,capacity,ref_dist,xsamp_dist,n";

/// One CSV row; `capacity` is the target as text (`C` or `C_H/C_L`).
pub fn summary_row(s: &TransferSummary, capacity: &str) -> String {
    format!("{},{},{},{},{}", s.task_label(), capacity, s.ref_dist, s.xsamp_dist, s.n())
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Run `spec` on every reference. Reference `i` uses seed stream
/// `spec.seed + i`, so results are independent of evaluation order.
pub fn evaluate_transfer<S: Synthesizer>(synth: &S, references: &[Utterance], spec: &TaskSpec) -> Result<TransferSummary> {
    if references.is_empty() {
        return Err(Error::input("no references to evaluate"));
    }
    let (nt, ns) = synth.num_labels();
    let mut per_ref = Vec::with_capacity(references.len());
    let mut per_xs = Vec::with_capacity(references.len());
    for (i, u) in references.iter().enumerate() {
        let (y_t, y_s) = spec.kind.targets(u, nt, ns);
        let job = TransferJob {
            reference: u.clone(),
            target_y_t: y_t,
            target_y_s: y_s,
            level: spec.level,
            num_samples: spec.num_samples,
        };
        let outs = synth.synthesize(&job, &spec.transfer, spec.seed.wrapping_add(i as u64))?;
        let d: Vec<f64> = outs
            .iter()
            .map(|o| mcd_dtw_frames(o, &u.frames, &spec.mcd))
            .collect::<Result<_>>()?;
        per_ref.push(mean(&d));
        let xs: Vec<f64> = outs[1..]
            .iter()
            .map(|o| mcd_dtw_frames(&outs[0], o, &spec.mcd))
            .collect::<Result<_>>()?;
        per_xs.push(mean(&xs));
    }
    Ok(TransferSummary {
        kind: spec.kind,
        level: spec.level,
        ref_dist: mean(&per_ref),
        xsamp_dist: mean(&per_xs),
        per_reference: per_ref,
        per_reference_xsamp: per_xs,
    })
}

// ---------------------------------------------------------------------------
// Paired sign test

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignTest {
    /// Pairs with `a < b`.
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// One-sided exact binomial p-value for "a < b more often than chance";
    /// ties are dropped.
    pub p_value: f64,
}

fn ln_choose(n: u64, k: u64) -> f64 {
    let k = k.min(n - k);
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

/// `P(X ≥ k)` for `X ~ Binomial(n, 1/2)`.
pub fn binomial_upper_tail(n: u64, k: u64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    let half = -(n as f64) * std::f64::consts::LN_2;
    (k..=n).map(|j| (ln_choose(n, j) + half).exp()).sum::<f64>().min(1.0)
}

pub fn sign_test(a: &[f64], b: &[f64]) -> Result<SignTest> {
    if a.len() != b.len() {
        return Err(Error::input("sign test needs paired samples of equal length"));
    }
    let (mut wins, mut losses, mut ties) = (0, 0, 0);
    for (x, y) in a.iter().zip(b) {
        if x < y {
            wins += 1;
        } else if x > y {
            losses += 1;
        } else {
            ties += 1;
        }
    }
    Ok(SignTest {
        wins,
        losses,
        ties,
        p_value: binomial_upper_tail((wins + losses) as u64, wins as u64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, ToySpec};
    use crate::model::{Bottleneck, ModelConfig};

    fn small() -> (ToySpec, Vec<Utterance>) {
        let spec = ToySpec::new(3, 4, 2, 5);
        let data = generate_dataset(&spec, 6).unwrap();
        (spec, data)
    }

    #[test]
    fn binomial_tail_small_cases() {
        assert!((binomial_upper_tail(3, 3) - 0.125).abs() < 1e-15);
        assert!((binomial_upper_tail(3, 2) - 0.5).abs() < 1e-15);
        assert_eq!(binomial_upper_tail(5, 0), 1.0);
        assert!((binomial_upper_tail(10, 9) - 11.0 / 1024.0).abs() < 1e-15);
        let t = sign_test(&[1.0, 2.0, 3.0, 4.0], &[2.0, 3.0, 3.0, 1.0]).unwrap();
        assert_eq!((t.wins, t.losses, t.ties), (2, 1, 1));
        assert!((t.p_value - 0.5).abs() < 1e-15);
    }

    #[test]
    fn level_parsing_and_mismatch() {
        assert_eq!("via_z_H".parse::<LatentLevel>().unwrap(), LatentLevel::ViaHigh);
        assert!("mid".parse::<LatentLevel>().is_err());
        let (spec, data) = small();
        let model = Model::new(ModelConfig::for_data(&spec), 1).unwrap();
        let job = TransferJob {
            reference: data[0].clone(),
            target_y_t: 0,
            target_y_s: 0,
            level: LatentLevel::ViaHigh,
            num_samples: 2,
        };
        let opts = TransferOptions {
            max_len: 10,
            sample_reference: false,
        };
        assert!(matches!(transfer(&model, &job, &opts, 0), Err(Error::Config(_))));
    }

    #[test]
    fn flat_transfer_repeats_and_prior_is_reproducible() {
        let (spec, data) = small();
        let model = Model::new(ModelConfig::for_data(&spec), 1).unwrap();
        let job = TransferJob {
            reference: data[0].clone(),
            target_y_t: 1,
            target_y_s: 0,
            level: LatentLevel::Flat,
            num_samples: 3,
        };
        let opts = TransferOptions {
            max_len: default_max_len(&data),
            sample_reference: false,
        };
        let outs = transfer(&model, &job, &opts, 9).unwrap();
        assert_eq!(outs.len(), 3);
        assert!(outs.iter().all(|o| o == &outs[0]));
        assert!(prior_sample(&model, 0, 0, 0, 1, 10).unwrap().is_empty());
        let a = prior_sample(&model, 0, 1, 3, 4, 10).unwrap();
        let b = prior_sample(&model, 0, 1, 3, 4, 10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tanh_model_has_no_prior() {
        let (spec, _) = small();
        let mut cfg = ModelConfig::for_data(&spec);
        cfg.bottleneck = Bottleneck::TanhHeuristic;
        let model = Model::new(cfg, 1).unwrap();
        assert!(prior_sample(&model, 0, 0, 1, 0, 5).is_err());
    }

    #[test]
    fn copy_oracle_scores_zero() {
        let (spec, data) = small();
        let oracle = CopyOracle {
            num_text_classes: spec.num_text_classes,
            num_speakers: spec.num_speakers,
        };
        let s = evaluate_transfer(&oracle, &data, &TaskSpec::new(TaskKind::InterText, LatentLevel::Flat, 10)).unwrap();
        assert_eq!(s.ref_dist, 0.0);
        assert_eq!(s.xsamp_dist, 0.0);
        assert_eq!(s.n(), data.len());
        assert_eq!(summary_row(&s, "2"), format!("inter_text/flat,2,0,0,{}", data.len()));
    }

    #[test]
    fn length_window() {
        // base 20: tempo 0.75..1.25 gives 15..=25 frames.
        assert!(length_consistent(15, 20));
        assert!(length_consistent(25, 20));
        assert!(!length_consistent(14, 20));
        assert!(!length_consistent(26, 20));
    }
}
