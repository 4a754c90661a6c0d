//! The conditional sequence model.
//!
//! A tanh recurrent encoder summarizes the reference frames. A posterior head
//! maps `[summary ‖ cond]` to a diagonal Gaussian over `z`, where `cond` holds
//! optional text and speaker embeddings. A recurrent decoder, teacher-forced
//! during training, predicts each frame plus a stop logit from
//! `[z ‖ text_emb ‖ speaker_emb]`.
//!
//! In hierarchical mode the posterior produces `z_L`. A second head gives
//! `q(z_H | z_L)`, and a prior head gives `p(z_L | z_H)`. The decoder only
//! sees `z_L`.
//!
//! Backward passes are written by hand for this fixed graph. Gradients go into
//! a [`GradBuffer`], so evaluation only needs a shared borrow of the
//! parameters.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::binio::{ByteReader, ByteWriter};
use crate::config::Ini;
use crate::data::{ToySpec, Utterance};
use crate::distributions::{kl_to_standard, log_prob_grads, log_var_in_range, standard_normal_vec, DiagGaussian};
use crate::error::{Error, Result};
use crate::numerics::{add_assign, matvec_acc, matvec_t_acc, outer_acc, sigmoid, softplus, GradBuffer, Matrix, ParamId, ParamStore};

/// Width of each label embedding.
pub const EMBED_DIM: usize = 8;
/// Free-running outputs are clamped to `±OUTPUT_CLAMP`.
pub const OUTPUT_CLAMP: f64 = 50.0;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CAPCKPT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bottleneck {
    Variational,
    /// Deterministic `tanh(W·summary + b)` embedding with no KL term.
    TanhHeuristic,
}

impl fmt::Display for Bottleneck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Bottleneck::Variational => "variational",
            Bottleneck::TanhHeuristic => "tanh",
        })
    }
}

impl FromStr for Bottleneck {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "variational" => Ok(Bottleneck::Variational),
            "tanh" | "tanh_heuristic" => Ok(Bottleneck::TanhHeuristic),
            _ => Err(Error::config(format!("unknown bottleneck '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub num_text_classes: usize,
    pub num_speakers: usize,
    /// Dimension of `z` (or `z_L`).
    pub latent_dim: usize,
    /// Dimension of `z_H`; only used in hierarchical mode.
    pub high_latent_dim: usize,
    pub hidden_dim: usize,
    pub hierarchical: bool,
    pub condition_on_text: bool,
    pub condition_on_speaker: bool,
    pub bottleneck: Bottleneck,
}

impl ModelConfig {
    /// Defaults sized to a dataset: 2-D latent, 32 hidden units, no
    /// posterior conditioning.
    pub fn for_data(spec: &ToySpec) -> Self {
        ModelConfig {
            channels: spec.channels,
            num_text_classes: spec.num_text_classes,
            num_speakers: spec.num_speakers,
            latent_dim: 2,
            high_latent_dim: 2,
            hidden_dim: 32,
            hierarchical: false,
            condition_on_text: false,
            condition_on_speaker: false,
            bottleneck: Bottleneck::Variational,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden_dim == 0 || self.channels == 0 {
            return Err(Error::config("latent_dim, hidden_dim and channels must be positive"));
        }
        if self.num_text_classes == 0 || self.num_speakers == 0 {
            return Err(Error::config("label vocabularies must be non-empty"));
        }
        if self.hierarchical && self.bottleneck != Bottleneck::Variational {
            return Err(Error::config("hierarchical mode requires the variational bottleneck"));
        }
        if self.hierarchical && self.high_latent_dim == 0 {
            return Err(Error::config("high_latent_dim must be positive"));
        }
        Ok(())
    }

    pub fn is_variational(&self) -> bool {
        self.bottleneck == Bottleneck::Variational
    }

    /// Length of the posterior's conditioning vector.
    pub fn cond_dim(&self) -> usize {
        EMBED_DIM * (self.condition_on_text as usize + self.condition_on_speaker as usize)
    }

    pub fn write_ini(&self, ini: &mut Ini, section: &str) {
        ini.set(section, "channels", self.channels);
        ini.set(section, "num_text_classes", self.num_text_classes);
        ini.set(section, "num_speakers", self.num_speakers);
        ini.set(section, "latent_dim", self.latent_dim);
        ini.set(section, "high_latent_dim", self.high_latent_dim);
        ini.set(section, "hidden_dim", self.hidden_dim);
        ini.set(section, "hierarchical", self.hierarchical);
        ini.set(section, "condition_on_text", self.condition_on_text);
        ini.set(section, "condition_on_speaker", self.condition_on_speaker);
        ini.set(section, "bottleneck", self.bottleneck);
    }

    pub const INI_KEYS: &'static [&'static str] = &[
        "channels",
        "num_text_classes",
        "num_speakers",
        "latent_dim",
        "high_latent_dim",
        "hidden_dim",
        "hierarchical",
        "condition_on_text",
        "condition_on_speaker",
        "bottleneck",
    ];

    /// Read a section, falling back to `base` for absent keys.
    pub fn read_ini(ini: &Ini, section: &str, base: &ModelConfig) -> Result<Self> {
        ini.check_keys(section, Self::INI_KEYS)?;
        let latent_dim = ini.parse_or(section, "latent_dim", base.latent_dim)?;
        let cfg = ModelConfig {
            channels: ini.parse_or(section, "channels", base.channels)?,
            num_text_classes: ini.parse_or(section, "num_text_classes", base.num_text_classes)?,
            num_speakers: ini.parse_or(section, "num_speakers", base.num_speakers)?,
            latent_dim,
            high_latent_dim: ini.parse_or(section, "high_latent_dim", latent_dim)?,
            hidden_dim: ini.parse_or(section, "hidden_dim", base.hidden_dim)?,
            hierarchical: ini.parse_or(section, "hierarchical", base.hierarchical)?,
            condition_on_text: ini.parse_or(section, "condition_on_text", base.condition_on_text)?,
            condition_on_speaker: ini.parse_or(section, "condition_on_speaker", base.condition_on_speaker)?,
            bottleneck: ini.parse_or(section, "bottleneck", base.bottleneck)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Layer helpers

/// `W x + b`
fn lin(p: &ParamStore, w: ParamId, b: ParamId, x: &[f64]) -> Vec<f64> {
    let mut out = p.value(b).data().to_vec();
    matvec_acc(p.value(w), x, &mut out);
    out
}

/// Accumulate `dW += d xᵀ`, `db += d`; return `Wᵀ d`.
fn lin_back(p: &ParamStore, g: &mut GradBuffer, w: ParamId, b: ParamId, x: &[f64], d: &[f64]) -> Vec<f64> {
    outer_acc(g.get_mut(w), d, x);
    add_assign(g.get_mut(b).data_mut(), d);
    let mut dx = vec![0.0; x.len()];
    matvec_t_acc(p.value(w), d, &mut dx);
    dx
}

fn tanh_vec(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.tanh());
}

/// `d ⊙ (1 − y²)` for `y = tanh(·)`.
fn tanh_back(y: &[f64], d: &[f64]) -> Vec<f64> {
    y.iter().zip(d).map(|(y, d)| d * (1.0 - y * y)).collect()
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

/// Per-parameter RNG streams keyed by name, so a parameter's initial value
/// does not depend on which other parameters exist. Models that differ only
/// in latent size then share most of their initialization.
struct Init {
    seed: u64,
}

impl Init {
    fn gaussian(&self, name: &str, rows: usize, cols: usize, std: f64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(fnv1a(name));
        let n = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| n.sample(&mut rng)).collect();
        Matrix::from_vec(rows, cols, data).expect("shape")
    }

    /// `N(0, 1/fan_in)` weights.
    fn weight(&self, name: &str, rows: usize, cols: usize) -> Matrix {
        self.gaussian(name, rows, cols, 1.0 / (cols.max(1) as f64).sqrt())
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// One tanh hidden layer feeding separate mean and log-variance outputs.
#[derive(Debug, Clone)]
struct GaussHead {
    w1: ParamId,
    b1: ParamId,
    wm: ParamId,
    bm: ParamId,
    wv: ParamId,
    bv: ParamId,
}

struct HeadTrace {
    input: Vec<f64>,
    hidden: Vec<f64>,
    log_var_raw: Vec<f64>,
    dist: DiagGaussian,
}

impl GaussHead {
    fn register(
        store: &mut ParamStore,
        init: &Init,
        prefix: &str,
        input: usize,
        hidden: usize,
        out: usize,
    ) -> Result<Self> {
        Ok(GaussHead {
            w1: {
                let n = format!("{prefix}.w1");
                store.add(&n, init.weight(&n, hidden, input))?
            },
            b1: store.add(&format!("{prefix}.b1"), Matrix::zeros(1, hidden))?,
            wm: {
                let n = format!("{prefix}.w_mean");
                store.add(&n, init.weight(&n, out, hidden))?
            },
            bm: store.add(&format!("{prefix}.b_mean"), Matrix::zeros(1, out))?,
            wv: {
                let n = format!("{prefix}.w_logvar");
                store.add(&n, init.gaussian(&n, out, hidden, 0.1 / (hidden as f64).sqrt()))?
            },
            bv: store.add(&format!("{prefix}.b_logvar"), Matrix::zeros(1, out))?,
        })
    }

    fn forward(&self, p: &ParamStore, input: Vec<f64>) -> HeadTrace {
        let mut hidden = lin(p, self.w1, self.b1, &input);
        tanh_vec(&mut hidden);
        let mean = lin(p, self.wm, self.bm, &hidden);
        let log_var_raw = lin(p, self.wv, self.bv, &hidden);
        let dist = DiagGaussian::new(mean, log_var_raw.clone());
        HeadTrace {
            input,
            hidden,
            log_var_raw,
            dist,
        }
    }

    /// Gradients with respect to the (clamped) distribution parameters in,
    /// gradient with respect to the head input out. Clamped entries pass no
    /// gradient.
    fn backward(&self, p: &ParamStore, g: &mut GradBuffer, t: &HeadTrace, d_mean: &[f64], d_log_var: &[f64]) -> Vec<f64> {
        let d_lv: Vec<f64> = d_log_var
            .iter()
            .zip(&t.log_var_raw)
            .map(|(d, raw)| if log_var_in_range(*raw) { *d } else { 0.0 })
            .collect();
        let mut d_hidden = lin_back(p, g, self.wm, self.bm, &t.hidden, d_mean);
        add_assign(&mut d_hidden, &lin_back(p, g, self.wv, self.bv, &t.hidden, &d_lv));
        let d_pre = tanh_back(&t.hidden, &d_hidden);
        lin_back(p, g, self.w1, self.b1, &t.input, &d_pre)
    }
}

#[derive(Debug, Clone)]
struct Ids {
    enc_wx: ParamId,
    enc_wh: ParamId,
    enc_b: ParamId,
    emb_text: ParamId,
    emb_speaker: ParamId,
    posterior: Option<GaussHead>,
    bottleneck: Option<(ParamId, ParamId)>,
    high_posterior: Option<GaussHead>,
    low_prior: Option<GaussHead>,
    dec_wh: ParamId,
    dec_wx: ParamId,
    dec_wc: ParamId,
    dec_b: ParamId,
    dec_wo: ParamId,
    dec_bo: ParamId,
    dec_ws: ParamId,
    dec_bs: ParamId,
}

// ---------------------------------------------------------------------------
// Public value types

/// Final hidden state of the reference encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedReference {
    pub summary: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierLatents {
    pub z_high: Vec<f64>,
    pub z_low: Vec<f64>,
    pub q_low: DiagGaussian,
    pub q_high: DiagGaussian,
    pub p_low_given_high: DiagGaussian,
}

/// Reconstruction negative log-likelihood, split into its two parts. The
/// Laplace normalizer is dropped, so `l1` is the L1 distance itself.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Reconstruction {
    pub l1: f64,
    pub stop_xent: f64,
    pub frames: usize,
}

impl Reconstruction {
    pub fn total(&self) -> f64 {
        self.l1 + self.stop_xent
    }

    pub fn per_frame(&self) -> f64 {
        self.total() / self.frames.max(1) as f64
    }
}

/// Standard-normal draws used for reparameterized sampling of one example.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    pub eps_low: Vec<f64>,
    pub eps_high: Vec<f64>,
}

impl Noise {
    pub fn draw<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let eps_low = standard_normal_vec(rng, cfg.latent_dim);
        let eps_high = if cfg.hierarchical {
            standard_normal_vec(rng, cfg.high_latent_dim)
        } else {
            Vec::new()
        };
        Noise { eps_low, eps_high }
    }

    /// All-zero noise: every latent sits at its posterior mean.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Noise {
            eps_low: vec![0.0; cfg.latent_dim],
            eps_high: vec![0.0; if cfg.hierarchical { cfg.high_latent_dim } else { 0 }],
        }
    }
}

/// Multipliers on the rate terms. Which ones apply depends on the mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub beta_high: f64,
    pub beta_low: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta: 1.0,
            beta_high: 1.0,
            beta_low: 1.0,
        }
    }
}

/// Per-example objective terms.
///
/// In hierarchical mode `rate = rate_high + rate_low`, where `rate_low` is
/// the single-sample estimate `log q(z_L|x) − log p(z_L|z_H)` at the jointly
/// sampled pair. In flat mode `rate` is the closed-form KL and the split
/// fields are zero. The tanh bottleneck has no rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExampleTerms {
    pub recon: Reconstruction,
    pub rate: f64,
    pub rate_high: f64,
    pub rate_low: f64,
}

impl ExampleTerms {
    /// `recon + Σ β·rate` with whichever multipliers apply.
    pub fn weighted(&self, cfg: &ModelConfig, w: &LossWeights) -> f64 {
        let r = if cfg.hierarchical {
            w.beta_high * self.rate_high + w.beta_low * self.rate_low
        } else if cfg.is_variational() {
            w.beta * self.rate
        } else {
            0.0
        };
        self.recon.total() + r
    }
}

// ---------------------------------------------------------------------------
// Model

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    ids: Ids,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let (h, d, z) = (c.hidden_dim, c.channels, c.latent_dim);
        let init = Init { seed };
        let mut s = ParamStore::new();
        let enc_wx = s.add("enc.wx", init.weight("enc.wx", h, d))?;
        let enc_wh = s.add("enc.wh", init.weight("enc.wh", h, h))?;
        let enc_b = s.add("enc.b", Matrix::zeros(1, h))?;
        let emb_text = s.add("emb.text", init.gaussian("emb.text", c.num_text_classes, EMBED_DIM, 1.0))?;
        let emb_speaker = s.add("emb.speaker", init.gaussian("emb.speaker", c.num_speakers, EMBED_DIM, 1.0))?;
        let (posterior, bottleneck) = match c.bottleneck {
            Bottleneck::Variational => (
                Some(GaussHead::register(&mut s, &init, "post", h + c.cond_dim(), h, z)?),
                None,
            ),
            Bottleneck::TanhHeuristic => (
                None,
                Some((
                    s.add("bottleneck.w", init.weight("bottleneck.w", z, h))?,
                    s.add("bottleneck.b", Matrix::zeros(1, z))?,
                )),
            ),
        };
        let (high_posterior, low_prior) = if c.hierarchical {
            let zh = c.high_latent_dim;
            (
                Some(GaussHead::register(&mut s, &init, "q_high", z, h, zh)?),
                Some(GaussHead::register(&mut s, &init, "p_low", zh, h, z)?),
            )
        } else {
            (None, None)
        };
        let cdim = z + 2 * EMBED_DIM;
        let dec_wh = s.add("dec.wh", init.weight("dec.wh", h, h))?;
        let dec_wx = s.add("dec.wx", init.weight("dec.wx", h, d))?;
        let dec_wc = s.add("dec.wc", init.weight("dec.wc", h, cdim))?;
        let dec_b = s.add("dec.b", Matrix::zeros(1, h))?;
        let dec_wo = s.add("dec.wo", init.weight("dec.wo", d, h))?;
        let dec_bo = s.add("dec.bo", Matrix::zeros(1, d))?;
        let dec_ws = s.add("dec.ws", init.weight("dec.ws", 1, h))?;
        let dec_bs = s.add("dec.bs", Matrix::zeros(1, 1))?;
        let ids = Ids {
            enc_wx,
            enc_wh,
            enc_b,
            emb_text,
            emb_speaker,
            posterior,
            bottleneck,
            high_posterior,
            low_prior,
            dec_wh,
            dec_wx,
            dec_wc,
            dec_b,
            dec_wo,
            dec_bo,
            dec_ws,
            dec_bs,
        };
        Ok(Model {
            config,
            store: s,
            ids,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Evaluate with the model's own parameters.
    pub fn view(&self) -> ModelView<'_> {
        ModelView {
            cfg: &self.config,
            ids: &self.ids,
            p: &self.store,
        }
    }

    /// Evaluate this architecture with another parameter store of the same
    /// layout (used for finite-difference checks).
    pub fn view_with<'a>(&'a self, store: &'a ParamStore) -> ModelView<'a> {
        ModelView {
            cfg: &self.config,
            ids: &self.ids,
            p: store,
        }
    }

    /// Copy all values from `other`, which must have the same layout.
    pub fn load_params(&mut self, other: &ParamStore) -> Result<()> {
        check_layout(&self.store, other)?;
        for (dst, src) in self.store.params_mut().iter_mut().zip(other.params()) {
            dst.value = src.value.clone();
        }
        Ok(())
    }

    pub fn encode_reference(&self, frames: &Matrix) -> Result<EncodedReference> {
        self.view().encode_reference(frames)
    }

    pub fn condition_summary(&self, y_t: usize, y_s: usize) -> Result<Vec<f64>> {
        self.view().condition_summary(y_t, y_s)
    }

    pub fn posterior(&self, r: &EncodedReference, cond: &[f64]) -> Result<DiagGaussian> {
        self.view().posterior(r, cond)
    }

    pub fn decode_free_running(&self, z: &[f64], y_t: usize, y_s: usize, max_len: usize) -> Result<Matrix> {
        self.view().decode_free_running(z, y_t, y_s, max_len)
    }

    pub fn example_loss(
        &self,
        u: &Utterance,
        noise: &Noise,
        w: &LossWeights,
        grads: Option<&mut GradBuffer>,
    ) -> Result<ExampleTerms> {
        self.view().example_loss(u, noise, w, grads)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut ini = Ini::new();
        self.config.write_ini(&mut ini, "model");
        let text = ini.to_text();
        let mut w = ByteWriter::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.string(&text);
        w.u32(self.store.len() as u32);
        for p in self.store.params() {
            w.string(&p.name);
            w.u64(p.value.rows() as u64);
            w.u64(p.value.cols() as u64);
            w.f64_slice(p.value.data());
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(CHECKPOINT_MAGIC.len(), "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "not a CAPCKPT1 checkpoint (bad magic or version)"));
        }
        let cfg_at = r.offset();
        let text = r.string("config")?;
        let ini = Ini::parse(&text).map_err(|e| Error::format(cfg_at, e.to_string()))?;
        let base = ModelConfig::read_ini(&ini, "model", &placeholder_config())
            .map_err(|e| Error::format(cfg_at, e.to_string()))?;
        let mut model = Model::new(base, 0).map_err(|e| Error::format(cfg_at, e.to_string()))?;
        let count_at = r.offset();
        let n = r.u32("tensor count")? as usize;
        if n != model.store.len() {
            return Err(Error::format(
                count_at,
                format!("checkpoint has {n} tensors, architecture expects {}", model.store.len()),
            ));
        }
        for i in 0..n {
            let at = r.offset();
            let name = r.string("tensor name")?;
            let rows = r.u64("rows")? as usize;
            let cols = r.u64("cols")? as usize;
            let p = &mut model.store.params_mut()[i];
            if p.name != name || p.value.rows() != rows || p.value.cols() != cols {
                return Err(Error::format(
                    at,
                    format!(
                        "tensor {i}: found '{name}' {rows}x{cols}, expected '{}' {}x{}",
                        p.name,
                        p.value.rows(),
                        p.value.cols()
                    ),
                ));
            }
            let data = r.f64_vec(rows * cols, "tensor data")?;
            p.value.data_mut().copy_from_slice(&data);
        }
        if !r.is_empty() {
            return Err(Error::format(r.offset(), "trailing bytes after last tensor"));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn placeholder_config() -> ModelConfig {
    ModelConfig {
        channels: 0,
        num_text_classes: 0,
        num_speakers: 0,
        latent_dim: 0,
        high_latent_dim: 0,
        hidden_dim: 0,
        hierarchical: false,
        condition_on_text: false,
        condition_on_speaker: false,
        bottleneck: Bottleneck::Variational,
    }
}

fn check_layout(a: &ParamStore, b: &ParamStore) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::config("parameter layouts differ"));
    }
    for (x, y) in a.params().iter().zip(b.params()) {
        if x.name != y.name || x.value.rows() != y.value.rows() || x.value.cols() != y.value.cols() {
            return Err(Error::config(format!("parameter '{}' does not match '{}'", x.name, y.name)));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Evaluation

/// A model architecture bound to a parameter store.
#[derive(Clone, Copy)]
pub struct ModelView<'a> {
    cfg: &'a ModelConfig,
    ids: &'a Ids,
    p: &'a ParamStore,
}

struct EncoderTrace {
    hs: Vec<Vec<f64>>,
}

struct DecoderTrace {
    c: Vec<f64>,
    gs: Vec<Vec<f64>>,
    preds: Matrix,
    stop_logits: Vec<f64>,
}

impl<'a> ModelView<'a> {
    pub fn config(&self) -> &ModelConfig {
        self.cfg
    }

    fn check_labels(&self, y_t: usize, y_s: usize) -> Result<()> {
        if y_t >= self.cfg.num_text_classes {
            return Err(Error::input(format!(
                "text label {y_t} out of range (have {})",
                self.cfg.num_text_classes
            )));
        }
        if y_s >= self.cfg.num_speakers {
            return Err(Error::input(format!(
                "speaker label {y_s} out of range (have {})",
                self.cfg.num_speakers
            )));
        }
        Ok(())
    }

    fn check_frames(&self, frames: &Matrix) -> Result<()> {
        if frames.rows() == 0 {
            return Err(Error::input("reference must have at least one frame"));
        }
        if frames.cols() != self.cfg.channels {
            return Err(Error::config(format!(
                "frames have {} channels, model expects {}",
                frames.cols(),
                self.cfg.channels
            )));
        }
        Ok(())
    }

    fn encoder_forward(&self, frames: &Matrix) -> EncoderTrace {
        let ids = self.ids;
        let mut hs = Vec::with_capacity(frames.rows() + 1);
        hs.push(vec![0.0; self.cfg.hidden_dim]);
        for t in 0..frames.rows() {
            let mut a = lin(self.p, ids.enc_wx, ids.enc_b, frames.row(t));
            matvec_acc(self.p.value(ids.enc_wh), &hs[t], &mut a);
            tanh_vec(&mut a);
            hs.push(a);
        }
        EncoderTrace { hs }
    }

    /// Backprop through time from a gradient on the final hidden state.
    fn encoder_backward(&self, g: &mut GradBuffer, frames: &Matrix, tr: &EncoderTrace, d_summary: &[f64]) {
        let ids = self.ids;
        let mut d_h = d_summary.to_vec();
        for t in (0..frames.rows()).rev() {
            let d_pre = tanh_back(&tr.hs[t + 1], &d_h);
            outer_acc(g.get_mut(ids.enc_wx), &d_pre, frames.row(t));
            add_assign(g.get_mut(ids.enc_b).data_mut(), &d_pre);
            outer_acc(g.get_mut(ids.enc_wh), &d_pre, &tr.hs[t]);
            let mut next = vec![0.0; d_h.len()];
            matvec_t_acc(self.p.value(ids.enc_wh), &d_pre, &mut next);
            d_h = next;
        }
    }

    pub fn encode_reference(&self, frames: &Matrix) -> Result<EncodedReference> {
        self.check_frames(frames)?;
        let mut tr = self.encoder_forward(frames);
        Ok(EncodedReference {
            summary: tr.hs.pop().expect("non-empty"),
        })
    }

    /// `[text_emb(y_T)] ‖ [speaker_emb(y_S)]`, each part present only when
    /// its conditioning flag is set.
    pub fn condition_summary(&self, y_t: usize, y_s: usize) -> Result<Vec<f64>> {
        self.check_labels(y_t, y_s)?;
        let mut v = Vec::with_capacity(self.cfg.cond_dim());
        if self.cfg.condition_on_text {
            v.extend_from_slice(self.p.value(self.ids.emb_text).row(y_t));
        }
        if self.cfg.condition_on_speaker {
            v.extend_from_slice(self.p.value(self.ids.emb_speaker).row(y_s));
        }
        Ok(v)
    }

    fn condition_backward(&self, g: &mut GradBuffer, y_t: usize, y_s: usize, d_cond: &[f64]) {
        let mut off = 0;
        if self.cfg.condition_on_text {
            add_assign(g.get_mut(self.ids.emb_text).row_mut(y_t), &d_cond[..EMBED_DIM]);
            off = EMBED_DIM;
        }
        if self.cfg.condition_on_speaker {
            add_assign(g.get_mut(self.ids.emb_speaker).row_mut(y_s), &d_cond[off..off + EMBED_DIM]);
        }
    }

    fn posterior_head(&self) -> Result<&'a GaussHead> {
        self.ids
            .posterior
            .as_ref()
            .ok_or_else(|| Error::config("model has no variational posterior (tanh bottleneck)"))
    }

    fn hier_heads(&self) -> Result<(&'a GaussHead, &'a GaussHead)> {
        match (&self.ids.high_posterior, &self.ids.low_prior) {
            (Some(q), Some(p)) => Ok((q, p)),
            _ => Err(Error::config("model is not hierarchical")),
        }
    }

    fn check_cond(&self, cond: &[f64]) -> Result<()> {
        if cond.len() != self.cfg.cond_dim() {
            return Err(Error::config(format!(
                "conditioning vector has length {}, expected {}",
                cond.len(),
                self.cfg.cond_dim()
            )));
        }
        Ok(())
    }

    /// `q(z | x, cond)`; in hierarchical mode this is `q(z_L | x, cond)`.
    pub fn posterior(&self, r: &EncodedReference, cond: &[f64]) -> Result<DiagGaussian> {
        self.check_cond(cond)?;
        Ok(self.posterior_head()?.forward(self.p, concat(&r.summary, cond)).dist)
    }

    /// `tanh(W·summary + b)`.
    pub fn heuristic_bottleneck(&self, r: &EncodedReference) -> Result<Vec<f64>> {
        let (w, b) = self
            .ids
            .bottleneck
            .ok_or_else(|| Error::config("model has no tanh bottleneck"))?;
        let mut z = lin(self.p, w, b, &r.summary);
        tanh_vec(&mut z);
        Ok(z)
    }

    /// `q(z_H | z_L)`.
    pub fn high_posterior(&self, z_low: &[f64]) -> Result<DiagGaussian> {
        Ok(self.hier_heads()?.0.forward(self.p, z_low.to_vec()).dist)
    }

    /// `p(z_L | z_H)`.
    pub fn conditional_prior(&self, z_high: &[f64]) -> Result<DiagGaussian> {
        Ok(self.hier_heads()?.1.forward(self.p, z_high.to_vec()).dist)
    }

    /// Sample `z_L ~ q_L` with `eps_low`, then `z_H ~ q_H(·|z_L)` with
    /// `eps_high`, and evaluate the conditional prior at `z_H`.
    pub fn hierarchical_posterior(&self, r: &EncodedReference, cond: &[f64], noise: &Noise) -> Result<HierLatents> {
        let q_low = self.posterior(r, cond)?;
        let (qh, pl) = self.hier_heads()?;
        let z_low = q_low.sample_reparam(&noise.eps_low);
        let q_high = qh.forward(self.p, z_low.clone()).dist;
        let z_high = q_high.sample_reparam(&noise.eps_high);
        let p_low_given_high = pl.forward(self.p, z_high.clone()).dist;
        Ok(HierLatents {
            z_high,
            z_low,
            q_low,
            q_high,
            p_low_given_high,
        })
    }

    fn decoder_context(&self, z: &[f64], y_t: usize, y_s: usize) -> Result<Vec<f64>> {
        self.check_labels(y_t, y_s)?;
        if z.len() != self.cfg.latent_dim {
            return Err(Error::config(format!(
                "latent has length {}, expected {}",
                z.len(),
                self.cfg.latent_dim
            )));
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::input("latent vector is not finite"));
        }
        let mut c = z.to_vec();
        c.extend_from_slice(self.p.value(self.ids.emb_text).row(y_t));
        c.extend_from_slice(self.p.value(self.ids.emb_speaker).row(y_s));
        Ok(c)
    }

    /// The time-invariant part of the decoder pre-activation, `W_c c + b`.
    fn context_drive(&self, c: &[f64]) -> Vec<f64> {
        lin(self.p, self.ids.dec_wc, self.ids.dec_b, c)
    }

    fn decoder_step(&self, drive: &[f64], g_prev: &[f64], x_prev: Option<&[f64]>) -> (Vec<f64>, Vec<f64>, f64) {
        let ids = self.ids;
        let mut a = drive.to_vec();
        matvec_acc(self.p.value(ids.dec_wh), g_prev, &mut a);
        if let Some(x) = x_prev {
            matvec_acc(self.p.value(ids.dec_wx), x, &mut a);
        }
        tanh_vec(&mut a);
        let out = lin(self.p, ids.dec_wo, ids.dec_bo, &a);
        let s = self.p.value(ids.dec_ws).data().iter().zip(&a).map(|(w, g)| w * g).sum::<f64>()
            + self.p.value(ids.dec_bs).data()[0];
        (a, out, s)
    }

    fn decoder_forward(&self, c: Vec<f64>, x: &Matrix) -> (DecoderTrace, Reconstruction) {
        let len = x.rows();
        let drive = self.context_drive(&c);
        let mut gs = Vec::with_capacity(len + 1);
        gs.push(vec![0.0; self.cfg.hidden_dim]);
        let mut preds = Matrix::zeros(len, self.cfg.channels);
        let mut stop_logits = Vec::with_capacity(len);
        let mut rec = Reconstruction {
            frames: len,
            ..Default::default()
        };
        for t in 0..len {
            let x_prev = if t == 0 { None } else { Some(x.row(t - 1)) };
            let (g, out, s) = self.decoder_step(&drive, &gs[t], x_prev);
            rec.l1 += out.iter().zip(x.row(t)).map(|(a, b)| (a - b).abs()).sum::<f64>();
            let target = if t + 1 == len { 1.0 } else { 0.0 };
            rec.stop_xent += softplus(s) - target * s;
            preds.row_mut(t).copy_from_slice(&out);
            stop_logits.push(s);
            gs.push(g);
        }
        (
            DecoderTrace {
                c,
                gs,
                preds,
                stop_logits,
            },
            rec,
        )
    }

    /// Returns the gradient with respect to the context `c`.
    fn decoder_backward(&self, g: &mut GradBuffer, x: &Matrix, tr: &DecoderTrace) -> Vec<f64> {
        let ids = self.ids;
        let len = x.rows();
        let h = self.cfg.hidden_dim;
        let mut carry = vec![0.0; h];
        let mut d_pre_sum = vec![0.0; h];
        let ws = self.p.value(ids.dec_ws).data().to_vec();
        for t in (0..len).rev() {
            let gt = &tr.gs[t + 1];
            let d_out: Vec<f64> = tr
                .preds
                .row(t)
                .iter()
                .zip(x.row(t))
                .map(|(a, b)| {
                    if a > b {
                        1.0
                    } else if a < b {
                        -1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            let target = if t + 1 == len { 1.0 } else { 0.0 };
            let d_s = sigmoid(tr.stop_logits[t]) - target;
            let mut d_g = lin_back(self.p, g, ids.dec_wo, ids.dec_bo, gt, &d_out);
            for (k, dg) in d_g.iter_mut().enumerate() {
                *dg += ws[k] * d_s + carry[k];
            }
            let gws = g.get_mut(ids.dec_ws).data_mut();
            for (k, v) in gws.iter_mut().enumerate() {
                *v += d_s * gt[k];
            }
            g.get_mut(ids.dec_bs).data_mut()[0] += d_s;

            let d_pre = tanh_back(gt, &d_g);
            outer_acc(g.get_mut(ids.dec_wh), &d_pre, &tr.gs[t]);
            if t > 0 {
                outer_acc(g.get_mut(ids.dec_wx), &d_pre, x.row(t - 1));
            }
            add_assign(&mut d_pre_sum, &d_pre);
            carry.iter_mut().for_each(|c| *c = 0.0);
            matvec_t_acc(self.p.value(ids.dec_wh), &d_pre, &mut carry);
        }
        lin_back(self.p, g, ids.dec_wc, ids.dec_b, &tr.c, &d_pre_sum)
    }

    /// Teacher-forced predictions for `x` and the reconstruction NLL.
    pub fn decode_teacher_forced(&self, z: &[f64], y_t: usize, y_s: usize, x: &Matrix) -> Result<(Matrix, Reconstruction)> {
        self.check_frames(x)?;
        let c = self.decoder_context(z, y_t, y_s)?;
        let (tr, rec) = self.decoder_forward(c, x);
        Ok((tr.preds, rec))
    }

    /// Feed predictions back in until the stop probability exceeds one half
    /// or `max_len` frames have been produced.
    pub fn decode_free_running(&self, z: &[f64], y_t: usize, y_s: usize, max_len: usize) -> Result<Matrix> {
        if max_len == 0 {
            return Err(Error::input("max_len must be at least 1"));
        }
        let c = self.decoder_context(z, y_t, y_s)?;
        let drive = self.context_drive(&c);
        let mut g = vec![0.0; self.cfg.hidden_dim];
        let mut prev: Option<Vec<f64>> = None;
        let mut out = Vec::new();
        for _ in 0..max_len {
            let (g_next, mut frame, s) = self.decoder_step(&drive, &g, prev.as_deref());
            for v in frame.iter_mut() {
                *v = if v.is_finite() { v.clamp(-OUTPUT_CLAMP, OUTPUT_CLAMP) } else { 0.0 };
            }
            out.extend_from_slice(&frame);
            g = g_next;
            if sigmoid(s) > 0.5 {
                break;
            }
            prev = Some(frame);
        }
        let rows = out.len() / self.cfg.channels;
        Matrix::from_vec(rows, self.cfg.channels, out)
    }

    /// The latent the decoder would see for a reference at zero noise: the
    /// posterior mean (or `z_L` mean), or the tanh embedding.
    pub fn reference_latent(&self, u: &Utterance) -> Result<Vec<f64>> {
        let r = self.encode_reference(&u.frames)?;
        if self.cfg.is_variational() {
            let cond = self.condition_summary(u.y_t, u.y_s)?;
            Ok(self.posterior(&r, &cond)?.mean().to_vec())
        } else {
            self.heuristic_bottleneck(&r)
        }
    }

    /// Forward one example with fixed noise; when `grads` is given, add the
    /// gradient of `terms.weighted(cfg, w)` into it.
    pub fn example_loss(
        &self,
        u: &Utterance,
        noise: &Noise,
        w: &LossWeights,
        grads: Option<&mut GradBuffer>,
    ) -> Result<ExampleTerms> {
        self.check_frames(&u.frames)?;
        let cfg = self.cfg;
        if noise.eps_low.len() != cfg.latent_dim || (cfg.hierarchical && noise.eps_high.len() != cfg.high_latent_dim) {
            return Err(Error::config("noise dimensions do not match the model"));
        }
        let enc = self.encoder_forward(&u.frames);
        let summary = enc.hs.last().expect("non-empty");
        let cond = self.condition_summary(u.y_t, u.y_s)?;

        enum Latent {
            Flat(HeadTrace),
            Hier {
                low: HeadTrace,
                z_low: Vec<f64>,
                high: HeadTrace,
                prior: HeadTrace,
            },
            Tanh(Vec<f64>),
        }

        let (latent, z, rate, rate_high, rate_low) = if let Some((bw, bb)) = self.ids.bottleneck {
            let mut z = lin(self.p, bw, bb, summary);
            tanh_vec(&mut z);
            (Latent::Tanh(z.clone()), z, 0.0, 0.0, 0.0)
        } else if cfg.hierarchical {
            let (qh, pl) = self.hier_heads()?;
            let low = self.posterior_head()?.forward(self.p, concat(summary, &cond));
            let z_low = low.dist.sample_reparam(&noise.eps_low);
            let high = qh.forward(self.p, z_low.clone());
            let z_high = high.dist.sample_reparam(&noise.eps_high);
            let prior = pl.forward(self.p, z_high.clone());
            let r_h = kl_to_standard(&high.dist);
            let r_l = low.dist.log_prob(&z_low) - prior.dist.log_prob(&z_low);
            let z = z_low.clone();
            (
                Latent::Hier {
                    low,
                    z_low,
                    high,
                    prior,
                },
                z,
                r_h + r_l,
                r_h,
                r_l,
            )
        } else {
            let head = self.posterior_head()?.forward(self.p, concat(summary, &cond));
            let z = head.dist.sample_reparam(&noise.eps_low);
            let r = kl_to_standard(&head.dist);
            (Latent::Flat(head), z, r, 0.0, 0.0)
        };

        let c = self.decoder_context(&z, u.y_t, u.y_s)?;
        let (dec, recon) = self.decoder_forward(c, &u.frames);
        let terms = ExampleTerms {
            recon,
            rate,
            rate_high,
            rate_low,
        };

        let Some(g) = grads else {
            return Ok(terms);
        };

        let d_c = self.decoder_backward(g, &u.frames, &dec);
        let zd = cfg.latent_dim;
        add_assign(g.get_mut(self.ids.emb_text).row_mut(u.y_t), &d_c[zd..zd + EMBED_DIM]);
        add_assign(
            g.get_mut(self.ids.emb_speaker).row_mut(u.y_s),
            &d_c[zd + EMBED_DIM..zd + 2 * EMBED_DIM],
        );
        let mut d_z = d_c[..zd].to_vec();

        let d_input = match latent {
            Latent::Tanh(z) => {
                let (bw, bb) = self.ids.bottleneck.expect("tanh mode");
                let d_pre = tanh_back(&z, &d_z);
                lin_back(self.p, g, bw, bb, summary, &d_pre)
            }
            Latent::Flat(head) => {
                let (d_mean, d_lv) = reparam_and_kl_grads(&head.dist, &noise.eps_low, &d_z, w.beta);
                self.posterior_head()?.backward(self.p, g, &head, &d_mean, &d_lv)
            }
            Latent::Hier {
                low,
                z_low,
                high,
                prior,
            } => {
                let (qh, pl) = self.hier_heads()?;
                // R_L = log q_L(z_L) − log p(z_L | z_H)
                let (dz_q, dm_q, dlv_q) = log_prob_grads(&low.dist, &z_low);
                let (dz_p, dm_p, dlv_p) = log_prob_grads(&prior.dist, &z_low);
                for i in 0..zd {
                    d_z[i] += w.beta_low * (dz_q[i] - dz_p[i]);
                }
                let dm_p: Vec<f64> = dm_p.iter().map(|v| -w.beta_low * v).collect();
                let dlv_p: Vec<f64> = dlv_p.iter().map(|v| -w.beta_low * v).collect();
                let d_z_high = pl.backward(self.p, g, &prior, &dm_p, &dlv_p);

                let (dm_h, dlv_h) = reparam_and_kl_grads(&high.dist, &noise.eps_high, &d_z_high, w.beta_high);
                add_assign(&mut d_z, &qh.backward(self.p, g, &high, &dm_h, &dlv_h));

                let (mut dm_l, mut dlv_l) = reparam_and_kl_grads(&low.dist, &noise.eps_low, &d_z, 0.0);
                for i in 0..zd {
                    dm_l[i] += w.beta_low * dm_q[i];
                    dlv_l[i] += w.beta_low * dlv_q[i];
                }
                self.posterior_head()?.backward(self.p, g, &low, &dm_l, &dlv_l)
            }
        };

        let h = cfg.hidden_dim;
        if d_input.len() > h {
            self.condition_backward(g, u.y_t, u.y_s, &d_input[h..]);
        }
        self.encoder_backward(g, &u.frames, &enc, &d_input[..h]);
        Ok(terms)
    }
}

/// Gradients on `(mean, log_var)` from a downstream gradient on
/// `z = mean + exp(log_var/2)·eps` plus `beta · KL(q ‖ N(0, I))`.
fn reparam_and_kl_grads(q: &DiagGaussian, eps: &[f64], d_z: &[f64], beta: f64) -> (Vec<f64>, Vec<f64>) {
    let n = q.dim();
    let mut dm = vec![0.0; n];
    let mut dlv = vec![0.0; n];
    for i in 0..n {
        let lv = q.log_var()[i];
        let sd = (0.5 * lv).exp();
        dm[i] = d_z[i] + beta * q.mean()[i];
        dlv[i] = d_z[i] * 0.5 * sd * eps[i] + beta * 0.5 * (lv.exp() - 1.0);
    }
    (dm, dlv)
}
