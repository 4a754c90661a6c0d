//! Run configuration, single runs, and sweeps.
//!
//! A run directory holds `config.ini` (the fully resolved configuration),
//! `checkpoint.bin`, `metrics.csv` and `heldout.txt`. Re-running from the
//! stored `config.ini` reproduces `metrics.csv` byte for byte.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::config::{format_list, parse_list, Ini};
use crate::data::{generate_dataset, load_dataset, split, ToySpec, Utterance};
use crate::error::{Error, Result};
use crate::model::{Bottleneck, Model, ModelConfig};
use crate::numerics::AdamConfig;
use crate::objective::{
    evaluate_heldout, train, write_metrics_csv, CapacityTarget, HeldOut, LrSchedule, TrainConfig, TrainOutcome,
};

pub const CONFIG_FILE: &str = "config.ini";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const HELDOUT_FILE: &str = "heldout.txt";
pub const SUMMARY_FILE: &str = "summary.csv";
/// Window for the trailing averages reported after training.
pub const TRAILING_WINDOW: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// A dataset file written by `gen-data`.
    File(PathBuf),
    /// Generate `examples` utterances from `spec` in memory.
    Generate { spec: ToySpec, examples: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSource,
    /// Leading fraction used for training; the rest is held out.
    pub train_fraction: f64,
    pub model: ModelConfig,
    pub target: CapacityTarget,
    pub train: TrainConfig,
}

const RUN_KEYS: &[&str] = &["seed", "out_dir"];
const DATA_KEYS: &[&str] = &[
    "path",
    "examples",
    "channels",
    "num_text_classes",
    "num_speakers",
    "base_lengths",
    "data_seed",
    "noiseless",
    "train_fraction",
];
const TARGET_KEYS: &[&str] = &["capacity"];
const TRAIN_KEYS: &[&str] = &[
    "steps",
    "batch_size",
    "lr_fractions",
    "lr_rates",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "dual_lr_multiplier",
    "dual_momentum",
    "clip_norm",
    "fixed_beta",
];

impl RunConfig {
    /// Defaults for an in-memory toy dataset; `seed` is required everywhere
    /// else, so it is an argument here too.
    pub fn toy(seed: u64, out_dir: impl Into<PathBuf>) -> Self {
        let spec = ToySpec::default();
        RunConfig {
            seed,
            out_dir: out_dir.into(),
            model: ModelConfig::for_data(&spec),
            data: DataSource::Generate { spec, examples: 2000 },
            train_fraction: 0.9,
            target: CapacityTarget::Flat(2.0),
            train: TrainConfig {
                seed,
                ..Default::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::config("train_fraction must lie in (0, 1]"));
        }
        if let DataSource::Generate { spec, examples } = &self.data {
            spec.validate()?;
            if *examples == 0 {
                return Err(Error::config("examples must be positive"));
            }
        }
        self.model.validate()?;
        self.target.validate()?;
        self.train.validate()?;
        if self.model.hierarchical != matches!(self.target, CapacityTarget::Hierarchical { .. }) {
            return Err(Error::config(
                "hierarchical models take a C_H/C_L capacity and flat models a single C",
            ));
        }
        Ok(())
    }

    pub fn to_ini(&self) -> Ini {
        let mut ini = Ini::new();
        ini.set("run", "seed", self.seed);
        ini.set("run", "out_dir", self.out_dir.display());
        match &self.data {
            DataSource::File(p) => ini.set("data", "path", p.display()),
            DataSource::Generate { spec, examples } => {
                ini.set("data", "examples", examples);
                ini.set("data", "channels", spec.channels);
                ini.set("data", "num_text_classes", spec.num_text_classes);
                ini.set("data", "num_speakers", spec.num_speakers);
                ini.set("data", "base_lengths", format_list(&spec.base_lengths));
                ini.set("data", "data_seed", spec.rng_seed);
                ini.set("data", "noiseless", spec.noiseless);
            }
        }
        ini.set("data", "train_fraction", self.train_fraction);
        self.model.write_ini(&mut ini, "model");
        ini.set("target", "capacity", self.target);
        let t = &self.train;
        ini.set("train", "steps", t.steps);
        ini.set("train", "batch_size", t.batch_size);
        ini.set("train", "lr_fractions", format_list(&t.schedule.fractions));
        ini.set("train", "lr_rates", format_list(&t.schedule.rates));
        ini.set("train", "adam_beta1", t.adam.beta1);
        ini.set("train", "adam_beta2", t.adam.beta2);
        ini.set("train", "adam_eps", t.adam.eps);
        ini.set("train", "dual_lr_multiplier", t.dual_lr_multiplier);
        ini.set("train", "dual_momentum", t.dual_momentum);
        ini.set("train", "clip_norm", t.clip_norm.map_or("none".to_string(), |c| c.to_string()));
        ini.set("train", "fixed_beta", t.fixed_beta.map_or("none".to_string(), |b| b.to_string()));
        ini
    }

    /// Parse a config. `[run] seed` is mandatory; everything else falls back
    /// to [`RunConfig::toy`]. A relative `[data] path` resolves against
    /// `base_dir` and must exist, since model shapes default to its header.
    pub fn from_ini(ini: &Ini, base_dir: &Path) -> Result<Self> {
        for (section, keys) in [
            ("run", RUN_KEYS),
            ("data", DATA_KEYS),
            ("target", TARGET_KEYS),
            ("train", TRAIN_KEYS),
        ] {
            ini.check_keys(section, keys)?;
        }
        let seed: u64 = ini.require("run", "seed")?;
        let out_dir: PathBuf = ini.parse_or("run", "out_dir", PathBuf::from("run"))?;
        let mut cfg = RunConfig::toy(seed, out_dir);

        let data = if let Some(p) = ini.get("data", "path") {
            let p = PathBuf::from(p);
            // Stored absolute so a config copied into a run directory still resolves.
            DataSource::File(std::path::absolute(base_dir.join(p))?)
        } else {
            let d = ToySpec::default();
            let channels = ini.parse_or("data", "channels", d.channels)?;
            let classes = ini.parse_or("data", "num_text_classes", d.num_text_classes)?;
            let speakers = ini.parse_or("data", "num_speakers", d.num_speakers)?;
            let data_seed = ini.parse_or("data", "data_seed", d.rng_seed)?;
            let mut spec = ToySpec::new(channels, classes, speakers, data_seed);
            if let Some(b) = ini.get("data", "base_lengths") {
                spec.base_lengths = parse_list(b)?;
            }
            spec.noiseless = ini.parse_or("data", "noiseless", false)?;
            DataSource::Generate {
                examples: ini.parse_or("data", "examples", 2000usize)?,
                spec,
            }
        };
        cfg.train_fraction = ini.parse_or("data", "train_fraction", cfg.train_fraction)?;

        // Model shape defaults follow the generated spec when one is given.
        let base_model = match &data {
            DataSource::Generate { spec, .. } => ModelConfig::for_data(spec),
            DataSource::File(p) => ModelConfig::for_data(&load_dataset(p)?.0),
        };
        cfg.data = data;
        cfg.model = ModelConfig::read_ini(ini, "model", &base_model)?;

        cfg.target = match ini.get("target", "capacity") {
            Some(s) => s.parse()?,
            None if cfg.model.hierarchical => CapacityTarget::Hierarchical { high: 1.0, low: 1.0 },
            None => cfg.target,
        };

        let d = TrainConfig::default();
        let opt_f64 = |key: &str, default: Option<f64>| -> Result<Option<f64>> {
            match ini.get("train", key) {
                None => Ok(default),
                Some("none") => Ok(None),
                Some(v) => v
                    .parse()
                    .map(Some)
                    .map_err(|_| Error::config(format!("[train] {key}: cannot parse '{v}'"))),
            }
        };
        let schedule = LrSchedule {
            fractions: match ini.get("train", "lr_fractions") {
                Some(s) => parse_list(s)?,
                None => d.schedule.fractions.clone(),
            },
            rates: match ini.get("train", "lr_rates") {
                Some(s) => parse_list(s)?,
                None => d.schedule.rates.clone(),
            },
        };
        cfg.train = TrainConfig {
            steps: ini.parse_or("train", "steps", d.steps)?,
            batch_size: ini.parse_or("train", "batch_size", d.batch_size)?,
            schedule,
            adam: AdamConfig {
                beta1: ini.parse_or("train", "adam_beta1", d.adam.beta1)?,
                beta2: ini.parse_or("train", "adam_beta2", d.adam.beta2)?,
                eps: ini.parse_or("train", "adam_eps", d.adam.eps)?,
            },
            dual_lr_multiplier: ini.parse_or("train", "dual_lr_multiplier", d.dual_lr_multiplier)?,
            dual_momentum: ini.parse_or("train", "dual_momentum", d.dual_momentum)?,
            clip_norm: opt_f64("clip_norm", d.clip_norm)?,
            fixed_beta: opt_f64("fixed_beta", d.fixed_beta)?,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_ini(&Ini::parse(&text)?, base)
    }

    /// Load or generate the data, then split it.
    pub fn load_data(&self) -> Result<(ToySpec, Vec<Utterance>, Vec<Utterance>)> {
        let (spec, all) = match &self.data {
            DataSource::File(p) => load_dataset(p)?,
            DataSource::Generate { spec, examples } => (spec.clone(), generate_dataset(spec, *examples)?),
        };
        if spec.channels != self.model.channels
            || spec.num_text_classes != self.model.num_text_classes
            || spec.num_speakers != self.model.num_speakers
        {
            return Err(Error::config("dataset shape does not match [model] channels/classes/speakers"));
        }
        let (tr, te) = split(&all, self.train_fraction)?;
        if tr.is_empty() {
            return Err(Error::config("training split is empty"));
        }
        Ok((spec, tr, te))
    }
}

#[derive(Debug)]
pub struct RunResult {
    pub outcome: TrainOutcome,
    /// `None` when nothing was held out.
    pub heldout: Option<HeldOut>,
}

impl RunResult {
    pub fn trailing_rate(&self) -> f64 {
        self.outcome.trailing_mean(TRAILING_WINDOW, |m| m.rate)
    }

    pub fn final_beta(&self) -> f64 {
        self.outcome.metrics.last().map_or(f64::NAN, |m| m.beta)
    }
}

fn heldout_text(h: &HeldOut) -> String {
    let mut ini = Ini::new();
    for (k, v) in [
        ("recon_nll", h.recon_nll),
        ("recon_per_frame", h.recon_per_frame),
        ("l1", h.l1),
        ("stop_xent", h.stop_xent),
        ("rate", h.rate),
        ("rate_high", h.rate_high),
        ("rate_low", h.rate_low),
    ] {
        ini.set("", k, v);
    }
    ini.to_text()
}

/// Train without touching the filesystem (beyond reading a dataset file).
pub fn execute_in_memory(cfg: &RunConfig) -> Result<RunResult> {
    cfg.validate()?;
    let (_, tr, te) = cfg.load_data()?;
    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    let outcome = train(model, &tr, cfg.target, &cfg.train)?;
    let heldout = if te.is_empty() {
        None
    } else {
        Some(evaluate_heldout(&outcome.model, &te, cfg.seed)?)
    };
    Ok(RunResult { outcome, heldout })
}

/// Train and write the run directory. A divergence abort still writes the
/// last good checkpoint and the metrics so far, then returns the error.
pub fn execute(cfg: &RunConfig) -> Result<RunResult> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join(CONFIG_FILE), cfg.to_ini().to_text())?;
    let result = execute_in_memory(cfg)?;
    result.outcome.model.save(cfg.out_dir.join(CHECKPOINT_FILE))?;
    let f = fs::File::create(cfg.out_dir.join(METRICS_FILE))?;
    write_metrics_csv(std::io::BufWriter::new(f), &result.outcome.metrics)?;
    if let Some(h) = &result.heldout {
        fs::write(cfg.out_dir.join(HELDOUT_FILE), heldout_text(h))?;
    }
    if let Some(e) = &result.outcome.aborted {
        return Err(Error::Training {
            step: result.outcome.metrics.len(),
            message: e.to_string(),
        });
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// Sweeps

/// Values to expand; empty axes keep the base config's value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepGrid {
    pub capacities: Vec<CapacityTarget>,
    pub latent_dims: Vec<usize>,
    pub fixed_betas: Vec<f64>,
    pub bottlenecks: Vec<Bottleneck>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub index: usize,
    pub config: RunConfig,
}

impl SweepGrid {
    /// Cartesian product in (bottleneck, latent_dim, capacity, β) order, one
    /// sub-directory per cell.
    pub fn expand(&self, base: &RunConfig) -> Vec<SweepCell> {
        fn axis<T: Clone>(v: &[T], d: T) -> Vec<T> {
            if v.is_empty() {
                vec![d]
            } else {
                v.to_vec()
            }
        }
        let bots = axis(&self.bottlenecks, base.model.bottleneck);
        let dims = axis(&self.latent_dims, base.model.latent_dim);
        let caps = axis(&self.capacities, base.target);
        let betas = axis(&self.fixed_betas.iter().map(|&b| Some(b)).collect::<Vec<_>>(), base.train.fixed_beta);
        let mut out = Vec::new();
        for &b in &bots {
            for &d in &dims {
                for &c in &caps {
                    for &beta in &betas {
                        let index = out.len();
                        let mut cfg = base.clone();
                        cfg.model.bottleneck = b;
                        cfg.model.latent_dim = d;
                        cfg.target = c;
                        cfg.model.hierarchical = matches!(c, CapacityTarget::Hierarchical { .. });
                        if cfg.model.hierarchical && !self.latent_dims.is_empty() {
                            cfg.model.high_latent_dim = d;
                        }
                        cfg.train.fixed_beta = beta;
                        cfg.out_dir = base.out_dir.join(format!("cell{index:03}"));
                        out.push(SweepCell { index, config: cfg });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug)]
pub struct SweepRow {
    pub cell: SweepCell,
    pub result: Result<RunResult>,
}

pub const SWEEP_HEADER: &str = "cell,capacity,latent_dim,bottleneck,fixed_beta,status,recon_nll,l1,stop_xent,rate,rate_high,rate_low,trailing_rate,final_beta,error";

impl SweepRow {
    pub fn csv_row(&self) -> String {
        let c = &self.cell.config;
        let beta = c.train.fixed_beta.map_or(String::new(), |b| b.to_string());
        let head = format!(
            "{},{},{},{},{}",
            self.cell.index, c.target, c.model.latent_dim, c.model.bottleneck, beta
        );
        match &self.result {
            Ok(r) => {
                let h = r.heldout.unwrap_or(HeldOut {
                    recon_nll: f64::NAN,
                    recon_per_frame: f64::NAN,
                    l1: f64::NAN,
                    stop_xent: f64::NAN,
                    rate: f64::NAN,
                    rate_high: f64::NAN,
                    rate_low: f64::NAN,
                });
                format!(
                    "{head},ok,{},{},{},{},{},{},{},{},",
                    h.recon_nll,
                    h.l1,
                    h.stop_xent,
                    h.rate,
                    h.rate_high,
                    h.rate_low,
                    r.trailing_rate(),
                    r.final_beta()
                )
            }
            Err(e) => {
                let msg = e.to_string().replace([',', '\n'], ";");
                format!("{head},failed,,,,,,,,,{msg}")
            }
        }
    }
}

/// Run every cell on up to `jobs` worker threads and write `summary.csv`
/// under `base.out_dir`. Failed cells are listed in the summary; the others
/// still run.
pub fn run_sweep(base: &RunConfig, grid: &SweepGrid, jobs: usize, write_dirs: bool) -> Result<Vec<SweepRow>> {
    let cells = grid.expand(base);
    for c in &cells {
        c.config.validate()?;
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunResult>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1).min(cells.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                let r = if write_dirs {
                    execute(&cell.config)
                } else {
                    execute_in_memory(&cell.config)
                };
                slots.lock().unwrap_or_else(|p| p.into_inner())[i] = Some(r);
            });
        }
    });
    let results = slots.into_inner().unwrap_or_else(|p| p.into_inner());
    let rows: Vec<SweepRow> = cells
        .into_iter()
        .zip(results)
        .map(|(cell, r)| SweepRow {
            cell,
            result: r.unwrap_or_else(|| Err(Error::config("cell did not run"))),
        })
        .collect();
    if write_dirs {
        fs::create_dir_all(&base.out_dir)?;
        let mut text = String::from(SWEEP_HEADER);
        text.push('\n');
        for r in &rows {
            text.push_str(&r.csv_row());
            text.push('\n');
        }
        fs::write(base.out_dir.join(SUMMARY_FILE), text)?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64, dir: &Path) -> RunConfig {
        let mut c = RunConfig::toy(seed, dir);
        c.data = DataSource::Generate {
            spec: ToySpec::new(2, 3, 2, 1),
            examples: 24,
        };
        c.model = ModelConfig::for_data(&ToySpec::new(2, 3, 2, 1));
        c.model.hidden_dim = 4;
        c.train.steps = 5;
        c.train.batch_size = 4;
        c.train_fraction = 0.75;
        c
    }

    #[test]
    fn ini_round_trip_is_exact() {
        let mut c = tiny(7, Path::new("/tmp/x"));
        c.train.schedule = LrSchedule::default().scaled(3.0);
        c.train.fixed_beta = Some(0.1 + 0.2);
        c.train.clip_norm = None;
        let back = RunConfig::from_ini(&Ini::parse(&c.to_ini().to_text()).unwrap(), Path::new("/")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn seed_is_mandatory_and_keys_checked() {
        let e = RunConfig::from_ini(&Ini::parse("[model]\nlatent_dim = 2\n").unwrap(), Path::new("."));
        assert!(matches!(e, Err(Error::Config(_))));
        let e = RunConfig::from_ini(&Ini::parse("[run]\nseed = 1\n[train]\nstepz = 3\n").unwrap(), Path::new("."));
        assert!(matches!(e, Err(Error::Config(_))));
        let ok = RunConfig::from_ini(&Ini::parse("[run]\nseed = 1\n").unwrap(), Path::new(".")).unwrap();
        assert_eq!(ok.train.seed, 1);
    }

    #[test]
    fn capacity_kind_must_match_model() {
        let mut c = tiny(1, Path::new("/tmp/x"));
        c.target = CapacityTarget::Hierarchical { high: 1.0, low: 1.0 };
        assert!(c.validate().is_err());
    }

    #[test]
    fn grid_expansion() {
        let base = tiny(1, Path::new("/tmp/s"));
        let g = SweepGrid {
            capacities: vec![CapacityTarget::Flat(0.5), CapacityTarget::Flat(2.0)],
            latent_dims: vec![1, 2, 8],
            ..Default::default()
        };
        let cells = g.expand(&base);
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[5].config.model.latent_dim, 8);
        assert_eq!(cells[5].config.out_dir, Path::new("/tmp/s/cell005"));
    }

    #[test]
    fn sweep_reports_failed_cells() {
        let dir = tempfile::tempdir().unwrap();
        let mut base = tiny(1, dir.path());
        base.data = DataSource::File(dir.path().join("missing.bin"));
        let g = SweepGrid {
            capacities: vec![CapacityTarget::Flat(1.0)],
            ..Default::default()
        };
        let rows = run_sweep(&base, &g, 2, true).unwrap();
        assert!(rows[0].result.is_err());
        let summary = fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap();
        assert!(summary.lines().nth(1).unwrap().contains(",failed,"));
    }
}
