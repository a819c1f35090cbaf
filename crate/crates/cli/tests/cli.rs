use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use convdsr::io::{read_matrix, write_matrix, Checkpoint, MatrixEncoding, RunManifest};
use convdsr::metrics::generate_observations;

fn convdsr(args: &[&str], cache: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_convdsr"))
        .args(args)
        .env("CONVDSR_CACHE", cache)
        .output()
        .expect("run convdsr")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = "\
T = 3000
TR = 3
noise_sigma = 0.01
train_test_split = 2000
latent_dim = 3
hidden_dim = 10
sequence_length = 100
batch_size = 2
batches_per_epoch = 3
epochs = 3
";

/// Runs `generate` with the small config into `dir/data`.
fn generate(dir: &Path, extra: &str) -> PathBuf {
    let cfg = write_config(dir, "gen.cfg", &format!("{SMALL}{extra}"));
    let out = dir.join("data");
    let o = convdsr(&["generate", "--config", s(&cfg), "--out", s(&out)], &dir.join("cache"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn unknown_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.cfg", "latent_dim = 3\nfoo = 1\n");
    let o = convdsr(&["generate", "--config", s(&cfg), "--out", s(dir.path())], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("foo"));
}

#[test]
fn malformed_value_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.cfg", "epochs = many\n");
    let o = convdsr(&["train", "--config", s(&cfg)], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochs"));
}

#[test]
fn generate_is_reproducible_and_listed_in_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate(dir.path(), "");
    let b_dir = tempfile::tempdir().unwrap();
    let b = generate(b_dir.path(), "");
    for f in ["latent.csv", "observed.csv", "train.csv", "test.csv", "hrf.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let ma = RunManifest::load(&a.join("manifest.json")).unwrap();
    let mb = RunManifest::load(&b.join("manifest.json")).unwrap();
    let hashes = |m: &RunManifest| m.outputs.values().cloned().collect::<Vec<_>>();
    assert_eq!(hashes(&ma), hashes(&mb));
    assert_eq!(ma.outputs.len(), 6);
    assert_eq!(ma.extra["split_index"], "2000");
    assert_eq!(ma.config_hash, mb.config_hash);
    let obs = read_matrix(&a.join("observed.csv")).unwrap();
    assert_eq!(obs.shape(), (3000, 3));
}

#[test]
fn binary_encoding_roundtrips_through_generate() {
    let dir = tempfile::tempdir().unwrap();
    let out = generate(dir.path(), "matrix_encoding = binary\n");
    let m = read_matrix(&out.join("observed.cdsr")).unwrap();
    let p = dir.path().join("copy.csv");
    write_matrix(&p, &m, MatrixEncoding::Text).unwrap();
    assert_eq!(read_matrix(&p).unwrap(), m);
}

#[test]
fn deconvolve_reuses_the_cache_and_reproduces_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "");
    let cfg = write_config(dir.path(), "dec.cfg", "TR = 3\n");
    let cache = dir.path().join("cache");
    let run = |out: &str| {
        let out = dir.path().join(out);
        let o = convdsr(
            &["deconvolve", "--config", s(&cfg), "--input", s(&data.join("observed.csv")), "--out", s(&out)],
            &cache,
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (out, String::from_utf8_lossy(&o.stderr).to_string())
    };
    let (a, log_a) = run("a");
    let (b, log_b) = run("b");
    assert!(log_a.contains("cache miss"), "{log_a}");
    assert!(log_b.contains("cache hit"), "{log_b}");
    assert_eq!(fs::read(a.join("deconvolved.csv")).unwrap(), fs::read(b.join("deconvolved.csv")).unwrap());
    let m = read_matrix(&a.join("deconvolved.csv")).unwrap();
    assert_eq!(m.shape(), (3000, 3));
}

#[test]
fn identity_filter_deconvolution_returns_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "");
    let cfg = write_config(dir.path(), "dec.cfg", "decoder = standard\n");
    let out = dir.path().join("out");
    let input = data.join("latent.csv");
    let o = convdsr(
        &["deconvolve", "--config", s(&cfg), "--input", s(&input), "--out", s(&out)],
        &dir.path().join("cache"),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let x = read_matrix(&input).unwrap();
    let y = read_matrix(&out.join("deconvolved.csv")).unwrap();
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in x.as_slice().iter().zip(y.as_slice()) {
        num += (a - b) * (a - b);
        den += a * a;
    }
    assert!(num / den < 1e-6, "relative error {}", num / den);
}

#[test]
fn malformed_matrix_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "# CDSRMAT1 2 2\n1,2\n3\n").unwrap();
    let o = convdsr(&["deconvolve", "--input", s(&bad), "--out", s(dir.path())], &dir.path().join("cache"));
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn zero_epochs_checkpoint_is_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "");
    let cfg = write_config(dir.path(), "train.cfg", &format!("{SMALL}epochs = 0\n").replace("epochs = 3\n", ""));
    let out = dir.path().join("run");
    let o = convdsr(
        &["train", "--config", s(&cfg), "--input", s(&data.join("observed.csv")), "--out", s(&out)],
        &dir.path().join("cache"),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ck = Checkpoint::load(&out.join("checkpoint.cdsr")).unwrap();
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("train_report.json")).unwrap()).unwrap();
    let init: convdsr::ModelParams = serde_json::from_value(report["initial_params"].clone()).unwrap();
    assert_eq!(ck.params, init);
    assert_eq!(report["epoch_loss"].as_array().unwrap().len(), 0);
}

#[test]
fn training_is_deterministic_for_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "");
    let cfg = write_config(dir.path(), "train.cfg", SMALL);
    let run = |out: &str, threads: &str| {
        let out = dir.path().join(out);
        let o = convdsr(
            &[
                "train",
                "--config",
                s(&cfg),
                "--input",
                s(&data.join("observed.csv")),
                "--seed",
                "7",
                "--threads",
                threads,
                "--deterministic",
                "--out",
                s(&out),
            ],
            &dir.path().join("cache"),
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let a = run("a", "1");
    let b = run("b", "2");
    for f in ["checkpoint.cdsr", "train_report.json", "loss.tsv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let m = RunManifest::load(&a.join("manifest.json")).unwrap();
    assert_eq!(m.seed, 7);
    assert_eq!(m.extra["deterministic"], "true");
    assert_eq!(m.outputs.len(), 4);
    assert_eq!(m.input_hashes.len(), 1);
}

#[test]
fn evaluate_on_own_generated_data_is_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "");
    let cfg = write_config(
        dir.path(),
        "train.cfg",
        &format!("{SMALL}decoder = standard\nlyap_steps = 500\nlyap_transient = 100\nn_gen_trajectories = 4\npe_steps = 1,10\n"),
    );
    let run_dir = dir.path().join("run");
    let o = convdsr(
        &["train", "--config", s(&cfg), "--input", s(&data.join("observed.csv")), "--out", s(&run_dir)],
        &dir.path().join("cache"),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ck_path = run_dir.join("checkpoint.cdsr");
    let ck = Checkpoint::load(&ck_path).unwrap();
    let own = generate_observations(&ck.params, &ck.decoder, &[0.5, -0.3, 0.8], 1500, None).unwrap();
    let own_path = dir.path().join("own.csv");
    write_matrix(&own_path, &own, MatrixEncoding::Text).unwrap();

    let eval_dir = dir.path().join("eval");
    let o = convdsr(
        &[
            "evaluate",
            "--config",
            s(&cfg),
            "--input",
            s(&own_path),
            "--checkpoint",
            s(&ck_path),
            "--out",
            s(&eval_dir),
        ],
        &dir.path().join("cache"),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(eval_dir.join("metrics.tsv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split('\t').collect();
    let record: Vec<&str> = lines.next().unwrap().split('\t').collect();
    let field = |name: &str| record[header.iter().position(|h| *h == name).unwrap()];
    let d_stsp: f64 = field("d_stsp").parse().unwrap();
    assert!(d_stsp < 0.05, "D_stsp {d_stsp}");
    let pe10: f64 = field("pe")
        .split(',')
        .find_map(|kv| kv.strip_prefix("10:"))
        .unwrap()
        .parse()
        .unwrap();
    assert!(pe10 < 1e-12, "PE10 {pe10}");
    for b in ["baseline_noise_dstsp", "baseline_fixedpoint_dstsp"] {
        assert!(field(b).parse::<f64>().unwrap().is_finite());
    }
    for f in ["trajectory.tsv", "spectra.tsv", "manifest.json"] {
        assert!(eval_dir.join(f).exists(), "{f}");
    }

    let ly_dir = dir.path().join("lyap");
    let o = convdsr(
        &["lyapunov", "--config", s(&cfg), "--checkpoint", s(&ck_path), "--out", s(&ly_dir)],
        &dir.path().join("cache"),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(ly_dir.join("lyapunov.tsv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 4);
}

#[test]
fn single_point_sweep_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "sweep.cfg", "sweep_TR = 0.5\n");
    let o = convdsr(&["scaling", "--config", s(&cfg), "--out", s(dir.path())], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("at least 3"));
}

#[test]
fn scaling_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "sweep.cfg",
        "sweep_TR = 1.2, 2, 3\nsweep_hidden_dim =\nsweep_latent_dim =\nsweep_obs_dim = 3, 4, 5\n\
         scaling_length = 800\nsequence_length = 100\nbatch_size = 2\nbatches_per_epoch = 2\nhidden_dim = 10\n",
    );
    let o = convdsr(&["scaling", "--config", s(&cfg), "--out", s(dir.path())], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(dir.path().join("scaling_summary.tsv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(dir.path().join("scaling_TR.tsv").exists());
    assert!(dir.path().join("scaling_N.tsv").exists());
}
