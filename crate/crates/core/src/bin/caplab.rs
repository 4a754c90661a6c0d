use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use caplab::capacity::{
    check_flat_report, mi_monte_carlo, mi_quadrature, verify_hier_bounds, HierConfig, QuadConfig, Verification,
};
use caplab::config::{parse_list, Ini};
use caplab::data::{encode_dataset, generate_dataset, load_dataset, save_dataset, split, GroundTruth, ToySpec, Utterance};
use caplab::mcd::{mcd_dtw, wav_read, McdInput, McdOptions, Normalization};
use caplab::model::{Bottleneck, Model};
use caplab::numerics::Matrix;
use caplab::objective::CapacityTarget;
use caplab::run::{execute, run_sweep, RunConfig, SweepGrid};
use caplab::tasks::{
    default_max_len, evaluate_transfer, length_consistent, prior_sample, summary_row, LatentLevel, TaskKind, TaskSpec,
    SUMMARY_HEADER,
};
use caplab::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_BOUNDS: u8 = 3;

#[derive(Parser)]
#[command(name = "caplab", version, about = "Capacity-constrained latent-variable models on toy sequence data")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a toy dataset file.
    GenData {
        /// Read `[run] seed` and the `[data]` section from this config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        examples: Option<usize>,
        #[arg(long)]
        channels: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        speakers: Option<usize>,
        /// Unit amplitude, unit tempo, no noise.
        #[arg(long)]
        noiseless: bool,
    },
    /// Train one model and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Report R^avg, I_q and the aggregate KL for a checkpoint.
    EvalCapacity {
        #[command(flatten)]
        io: EvalArgs,
        #[arg(long, value_enum, default_value = "auto")]
        method: MethodArg,
        /// Quadrature points per axis.
        #[arg(long, default_value_t = 512)]
        points: usize,
        /// Monte-Carlo samples per example.
        #[arg(long, default_value_t = 16)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check every capacity bound numerically; exits 3 on any violation.
    VerifyBounds {
        #[command(flatten)]
        io: EvalArgs,
        #[arg(long, default_value_t = 512)]
        points: usize,
        /// `z_L` draws per example for the hierarchical marginalization.
        #[arg(long, default_value_t = 256)]
        mc_samples: usize,
    },
    /// Run a transfer task over references and write outputs plus metrics.
    Transfer {
        #[command(flatten)]
        io: EvalArgs,
        #[arg(long, default_value = "same_text")]
        task: String,
        #[arg(long, default_value = "flat")]
        level: String,
        #[arg(long, default_value_t = 5)]
        samples: usize,
        /// Sample the flat reference latent instead of using the posterior mean.
        #[arg(long)]
        sample_reference: bool,
        /// Text written into the capacity column of the summary row.
        #[arg(long, default_value = "")]
        capacity_label: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode latents drawn from the prior.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset supplying the class base lengths and the length cap.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        text: usize,
        #[arg(long)]
        speaker: usize,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// MCD-DTW between WAV files or dataset utterances (`file.bin#index`).
    McdDtw {
        a: String,
        b: String,
        #[arg(long, default_value_t = 1.0)]
        penalty: f64,
        #[arg(long, value_enum, default_value = "path")]
        normalize: NormArg,
        /// Apply the 10·√2/ln 10 dB factor.
        #[arg(long)]
        scaled: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Expand a grid over capacity, latent dimension, fixed β or bottleneck.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Comma-separated `C` or `C_H/C_L` values.
        #[arg(long)]
        capacities: Option<String>,
        #[arg(long)]
        dims: Option<String>,
        #[arg(long)]
        betas: Option<String>,
        /// `variational` and/or `tanh`.
        #[arg(long)]
        bottlenecks: Option<String>,
    },
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Use only the part after this training fraction (the held-out split).
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    max_examples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Auto,
    Quadrature,
    MonteCarlo,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    Path,
    Max,
}

enum Failure {
    Err(Error),
    Bounds(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Err(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Err(e.into())
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Bounds(msg)) => {
            eprintln!("bound verification failed:\n{msg}");
            ExitCode::from(EXIT_BOUNDS)
        }
        Err(Failure::Err(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Input(_) => ExitCode::from(EXIT_USAGE),
                _ => ExitCode::from(EXIT_RUNTIME),
            }
        }
    }
}

fn run(cmd: Cmd) -> CmdResult {
    match cmd {
        Cmd::GenData {
            config,
            seed,
            out,
            examples,
            channels,
            classes,
            speakers,
            noiseless,
        } => gen_data(config, seed, &out, examples, channels, classes, speakers, noiseless),
        Cmd::Train {
            config,
            seed,
            out,
            steps,
        } => {
            let mut cfg = load_config(&config, seed, out)?;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            let r = execute(&cfg)?;
            println!(
                "trained {} steps; trailing R = {:.4}; final beta = {:.4}; wrote {}",
                r.outcome.metrics.len(),
                r.trailing_rate(),
                r.final_beta(),
                cfg.out_dir.display()
            );
            Ok(())
        }
        Cmd::EvalCapacity {
            io,
            method,
            points,
            samples,
            out,
        } => {
            let (model, data) = load_eval(&io)?;
            let quad = match method {
                MethodArg::Auto => model.config().latent_dim <= 2,
                MethodArg::Quadrature => true,
                MethodArg::MonteCarlo => false,
            };
            let rep = if quad {
                mi_quadrature(
                    &model,
                    &data,
                    QuadConfig {
                        points,
                        ..Default::default()
                    },
                )?
            } else {
                mi_monte_carlo(&model, &data, samples, io.seed)?
            };
            emit(out.as_deref(), &rep.to_kv())
        }
        Cmd::VerifyBounds { io, points, mc_samples } => {
            let (model, data) = load_eval(&io)?;
            let v = verify(&model, &data, points, mc_samples, io.seed)?;
            for c in &v.checks {
                println!("{}", c.describe());
            }
            if v.passed() {
                Ok(())
            } else {
                let lines: Vec<String> = v.failures().iter().map(|c| c.describe()).collect();
                Err(Failure::Bounds(lines.join("\n")))
            }
        }
        Cmd::Transfer {
            io,
            task,
            level,
            samples,
            sample_reference,
            capacity_label,
            out,
        } => {
            let (spec, all) = load_dataset(&io.data)?;
            let max_len = default_max_len(&all);
            let (model, refs) = load_eval(&io)?;
            let mut ts = TaskSpec::new(task.parse::<TaskKind>()?, level.parse::<LatentLevel>()?, max_len);
            ts.num_samples = samples;
            ts.seed = io.seed;
            ts.transfer.sample_reference = sample_reference;
            let summary = evaluate_transfer(&model, &refs, &ts)?;
            fs::create_dir_all(&out)?;
            let mut per = String::from("reference,ref_dist,xsamp_dist\n");
            for (i, (r, x)) in summary.per_reference.iter().zip(&summary.per_reference_xsamp).enumerate() {
                per.push_str(&format!("{i},{r},{x}\n"));
            }
            fs::write(out.join("transfer.csv"), per)?;
            fs::write(
                out.join("summary.csv"),
                format!("{SUMMARY_HEADER}\n{}\n", summary_row(&summary, &capacity_label)),
            )?;
            // Regenerate the outputs with the same per-reference seeds.
            let mut outputs = Vec::new();
            for (i, u) in refs.iter().enumerate() {
                let (y_t, y_s) = ts.kind.targets(u, spec.num_text_classes, spec.num_speakers);
                let job = caplab::tasks::TransferJob {
                    reference: u.clone(),
                    target_y_t: y_t,
                    target_y_s: y_s,
                    level: ts.level,
                    num_samples: ts.num_samples,
                };
                for m in caplab::tasks::transfer(&model, &job, &ts.transfer, ts.seed.wrapping_add(i as u64))? {
                    outputs.push(generated(m, y_t, y_s));
                }
            }
            fs::write(out.join("outputs.bin"), encode_dataset(&spec, &outputs))?;
            println!("{SUMMARY_HEADER}\n{}", summary_row(&summary, &capacity_label));
            Ok(())
        }
        Cmd::Sample {
            checkpoint,
            data,
            text,
            speaker,
            n,
            seed,
            out,
        } => {
            let model = Model::load(&checkpoint)?;
            let (spec, all) = load_dataset(&data)?;
            if text >= spec.num_text_classes || speaker >= spec.num_speakers {
                return Err(Error::Input(format!("labels ({text}, {speaker}) out of range")).into());
            }
            let outs = prior_sample(&model, text, speaker, n, seed, default_max_len(&all))?;
            fs::create_dir_all(&out)?;
            let mut csv = String::from("sample,length,length_consistent\n");
            for (i, m) in outs.iter().enumerate() {
                csv.push_str(&format!(
                    "{i},{},{}\n",
                    m.rows(),
                    length_consistent(m.rows(), spec.base_lengths[text])
                ));
            }
            fs::write(out.join("samples.csv"), csv)?;
            let utts: Vec<Utterance> = outs.into_iter().map(|m| generated(m, text, speaker)).collect();
            save_dataset(out.join("samples.bin"), &spec, &utts)?;
            println!("wrote {} samples to {}", utts.len(), out.display());
            Ok(())
        }
        Cmd::McdDtw {
            a,
            b,
            penalty,
            normalize,
            scaled,
            out,
        } => {
            let opts = McdOptions {
                warp_penalty: penalty,
                normalization: match normalize {
                    NormArg::Path => Normalization::PathLength,
                    NormArg::Max => Normalization::MaxLength,
                },
                db_scaled: scaled,
            };
            let xs = load_mcd_inputs(&a)?;
            let ys = load_mcd_inputs(&b)?;
            let pairs: Vec<(usize, usize)> = match (xs.len(), ys.len()) {
                (1, m) => (0..m).map(|j| (0, j)).collect(),
                (n, 1) => (0..n).map(|i| (i, 0)).collect(),
                (n, m) if n == m => (0..n).map(|i| (i, i)).collect(),
                (n, m) => {
                    return Err(Error::Input(format!("cannot pair {n} inputs with {m}")).into());
                }
            };
            let mut csv = String::from("id_a,id_b,mcd_dtw\n");
            for (i, j) in pairs {
                let d = mcd_dtw(&xs[i].1, &ys[j].1, &opts)?;
                csv.push_str(&format!("{},{},{d}\n", xs[i].0, ys[j].0));
            }
            emit(out.as_deref(), &csv)
        }
        Cmd::Sweep {
            config,
            seed,
            out,
            jobs,
            capacities,
            dims,
            betas,
            bottlenecks,
        } => {
            let base = load_config(&config, seed, out)?;
            let split_items = |s: &str| s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(String::from).collect::<Vec<_>>();
            let grid = SweepGrid {
                capacities: match capacities {
                    Some(s) => split_items(&s)
                        .iter()
                        .map(|x| x.parse::<CapacityTarget>())
                        .collect::<caplab::Result<_>>()?,
                    None => Vec::new(),
                },
                latent_dims: dims.map(|s| parse_list(&s)).transpose()?.unwrap_or_default(),
                fixed_betas: betas.map(|s| parse_list(&s)).transpose()?.unwrap_or_default(),
                bottlenecks: match bottlenecks {
                    Some(s) => split_items(&s)
                        .iter()
                        .map(|x| x.parse::<Bottleneck>())
                        .collect::<caplab::Result<_>>()?,
                    None => Vec::new(),
                },
            };
            let rows = run_sweep(&base, &grid, jobs, true)?;
            let failed = rows.iter().filter(|r| r.result.is_err()).count();
            println!(
                "{} cells, {} failed; summary in {}",
                rows.len(),
                failed,
                base.out_dir.join(caplab::run::SUMMARY_FILE).display()
            );
            if failed > 0 {
                return Err(Error::Training {
                    step: 0,
                    message: format!("{failed} sweep cell(s) failed; see summary.csv"),
                }
                .into());
            }
            Ok(())
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn gen_data(
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: &Path,
    examples: Option<usize>,
    channels: Option<usize>,
    classes: Option<usize>,
    speakers: Option<usize>,
    noiseless: bool,
) -> CmdResult {
    let (mut spec, mut n) = match &config {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            let ini = Ini::parse(&text)?;
            let cfg = RunConfig::from_ini(&ini, p.parent().unwrap_or(Path::new(".")))?;
            match cfg.data {
                caplab::run::DataSource::Generate { spec, examples } => (spec, examples),
                caplab::run::DataSource::File(_) => {
                    return Err(Error::Config("config names a data file; nothing to generate".into()).into())
                }
            }
        }
        None => (ToySpec::default(), 2000),
    };
    match (seed, &config) {
        (Some(s), _) => spec.rng_seed = s,
        (None, None) => return Err(Error::Config("--seed is required without --config".into()).into()),
        (None, Some(_)) => {}
    }
    if let Some(c) = channels {
        spec.channels = c;
    }
    if let Some(t) = classes {
        spec.num_text_classes = t;
        spec.base_lengths = caplab::data::default_base_lengths(t);
    }
    if let Some(s) = speakers {
        spec.num_speakers = s;
    }
    if let Some(e) = examples {
        n = e;
    }
    spec.noiseless |= noiseless;
    spec.validate()?;
    let data = generate_dataset(&spec, n)?;
    save_dataset(out, &spec, &data)?;
    println!("wrote {n} utterances to {}", out.display());
    Ok(())
}

fn load_config(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    Ok(cfg)
}

fn load_eval(io: &EvalArgs) -> Result<(Model, Vec<Utterance>), Error> {
    let model = Model::load(&io.checkpoint)?;
    let (_, mut data) = load_dataset(&io.data)?;
    if let Some(f) = io.train_fraction {
        data = split(&data, f)?.1;
    }
    if let Some(m) = io.max_examples {
        data.truncate(m);
    }
    if data.is_empty() {
        return Err(Error::Input("no utterances selected for evaluation".into()));
    }
    Ok((model, data))
}

fn verify(model: &Model, data: &[Utterance], points: usize, mc_samples: usize, seed: u64) -> Result<Verification, Error> {
    let cfg = model.config();
    if cfg.hierarchical {
        let hc = HierConfig {
            mc_samples,
            points,
            seed,
            ..Default::default()
        };
        return Ok(verify_hier_bounds(model, data, hc)?.1);
    }
    let rep = if cfg.latent_dim <= 2 {
        mi_quadrature(
            model,
            data,
            QuadConfig {
                points,
                ..Default::default()
            },
        )?
    } else {
        mi_monte_carlo(model, data, 16, seed)?
    };
    Ok(Verification {
        checks: check_flat_report(&rep),
        report_kv: rep.to_kv(),
    })
}

/// Generated sequences carry no ground truth; factors are stored as NaN.
fn generated(frames: Matrix, y_t: usize, y_s: usize) -> Utterance {
    let c = frames.cols();
    Utterance {
        frames,
        y_t,
        y_s,
        truth: GroundTruth {
            amplitude: f64::NAN,
            tempo: f64::NAN,
            offset: vec![f64::NAN; c],
        },
    }
}

/// `x.wav` → one audio input; `x.bin#i` → utterance `i`; `x.bin` → all.
fn load_mcd_inputs(arg: &str) -> Result<Vec<(String, McdInput)>, Error> {
    let (path, index) = match arg.rsplit_once('#') {
        Some((p, i)) => (
            p,
            Some(
                i.parse::<usize>()
                    .map_err(|_| Error::Input(format!("bad utterance index in '{arg}'")))?,
            ),
        ),
        None => (arg, None),
    };
    if path.to_ascii_lowercase().ends_with(".wav") {
        let (samples, rate) = wav_read(path)?;
        return Ok(vec![(arg.to_string(), McdInput::Audio { samples, rate })]);
    }
    let (_, data) = load_dataset(path)?;
    let pick = |i: usize, u: &Utterance| (format!("{path}#{i}"), McdInput::Frames(u.frames.clone()));
    match index {
        Some(i) => data
            .get(i)
            .map(|u| vec![pick(i, u)])
            .ok_or_else(|| Error::Input(format!("{path} has no utterance {i}"))),
        None => Ok(data.iter().enumerate().map(|(i, u)| pick(i, u)).collect()),
    }
}

fn emit(out: Option<&Path>, text: &str) -> CmdResult {
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}
