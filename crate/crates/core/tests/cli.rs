use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn caplab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_caplab"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn caplab")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const CONFIG: &str = "[run]
seed = 4
out_dir = run1
[data]
path = toy.bin
train_fraction = 0.8
[model]
hidden_dim = 6
[train]
steps = 60
batch_size = 8
";

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = caplab(
        dir.path(),
        &["gen-data", "--seed", "3", "--out", "toy.bin", "--examples", "60", "--classes", "3", "--speakers", "2", "--channels", "3"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    fs::write(dir.path().join("c.ini"), CONFIG).unwrap();
    dir
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&caplab(dir.path(), &["no-such-command"])), 1);
    assert_eq!(code(&caplab(dir.path(), &["gen-data"])), 1);
    assert_eq!(code(&caplab(dir.path(), &["--help"])), 0);
    // Config without a seed.
    fs::write(dir.path().join("bad.ini"), "[run]\nout_dir = x\n").unwrap();
    assert_eq!(code(&caplab(dir.path(), &["train", "--config", "bad.ini"])), 1);
}

#[test]
fn missing_and_corrupt_files_exit_two() {
    let dir = setup();
    let o = caplab(dir.path(), &["mcd-dtw", "nothing.wav", "nothing.wav"]);
    assert_eq!(code(&o), 2);
    let bytes = fs::read(dir.path().join("toy.bin")).unwrap();
    fs::write(dir.path().join("cut.bin"), &bytes[..bytes.len() / 2]).unwrap();
    let o = caplab(dir.path(), &["mcd-dtw", "cut.bin#0", "cut.bin#1"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_evaluate_and_reproduce() {
    let dir = setup();
    let p = dir.path();
    let o = caplab(p, &["train", "--config", "c.ini"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.ini", "checkpoint.bin", "metrics.csv", "heldout.txt"] {
        assert!(p.join("run1").join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(p.join("run1/metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,recon_nll,R,R_H,R_L,beta,beta_H,beta_L,lr"));
    assert_eq!(metrics.lines().count(), 61);

    // The saved config is self-contained.
    let o = caplab(p, &["train", "--config", "run1/config.ini", "--out", "run2"]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(p.join("run1/metrics.csv")).unwrap(), fs::read(p.join("run2/metrics.csv")).unwrap());

    let o = caplab(p, &["eval-capacity", "--checkpoint", "run1/checkpoint.bin", "--data", "toy.bin", "--points", "128"]);
    assert_eq!(code(&o), 0);
    let kv = stdout(&o);
    assert!(kv.contains("method=quadrature") && kv.contains("i_q="), "{kv}");

    let o = caplab(p, &["verify-bounds", "--checkpoint", "run1/checkpoint.bin", "--data", "toy.bin", "--points", "128"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let o = caplab(p, &["verify-bounds", "--checkpoint", "run1/checkpoint.bin", "--data", "toy.bin", "--points", "4"]);
    assert_eq!(code(&o), 3);

    let o = caplab(
        p,
        &["transfer", "--checkpoint", "run1/checkpoint.bin", "--data", "toy.bin", "--train-fraction", "0.8", "--samples", "2", "--out", "tr"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let o = caplab(
        p,
        &["sample", "--checkpoint", "run1/checkpoint.bin", "--data", "toy.bin", "--text", "1", "--speaker", "0", "--n", "3", "--seed", "9", "--out", "smp"],
    );
    assert_eq!(code(&o), 0);
    let (_, gen) = caplab::data::load_dataset(p.join("smp/samples.bin")).unwrap();
    assert_eq!(gen.len(), 3);
    assert!(gen.iter().all(|u| u.y_t == 1 && u.y_s == 0));

    // A hierarchical-only level on a flat model is a usage error.
    let o = caplab(p, &["transfer", "--checkpoint", "run1/checkpoint.bin", "--data", "toy.bin", "--level", "via_z_H", "--out", "tr2"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn mcd_between_dataset_utterances() {
    let dir = setup();
    let o = caplab(dir.path(), &["mcd-dtw", "toy.bin#0", "toy.bin#0"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    let last = out.lines().last().unwrap();
    assert!(last.ends_with(",0"), "{out}");
    let o = caplab(dir.path(), &["mcd-dtw", "toy.bin#0", "toy.bin#1"]);
    let v: f64 = stdout(&o).lines().last().unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert!(v > 0.0);
}

#[test]
fn sweep_writes_a_summary() {
    let dir = setup();
    let o = caplab(dir.path(), &["sweep", "--config", "c.ini", "--out", "sw", "--capacities", "0.5,2", "--dims", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = fs::read_to_string(dir.path().join("sw/summary.csv")).unwrap();
    assert_eq!(s.lines().count(), 3, "{s}");
}
