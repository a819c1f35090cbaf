//! `convdsr` command-line front end.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 data error,
//! 4 numerical divergence.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use convdsr::benchmark::make_benchmark;
use convdsr::config::{DecoderKind, RunConfig};
use convdsr::io::{self, Checkpoint, MatrixEncoding, RunManifest};
use convdsr::metrics::{self, EvalData, MetricReport};
use convdsr::scaling::{run_sweep, ScalingSpec, SweepResult, SweepVariable};
use convdsr::training::{train_prepared, TrainData};
use convdsr::{Error, Matrix};

#[derive(Parser, Debug)]
#[command(name = "convdsr", version, about = "Dynamical systems reconstruction from convolved observations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat `key = value` run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for the internal thread pool.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Recorded in the manifest. Reductions and RNG streams are ordered in
    /// every mode, so reruns are byte-identical regardless.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a benchmark dataset.
    Generate,
    /// Deconvolve a matrix file with the configured filter.
    Deconvolve {
        /// Input matrix; defaults to the `data` key.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train a model on the training split.
    Train {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Largest Lyapunov exponents of one or more checkpoints.
    Lyapunov {
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
    },
    /// Time training epochs across TR and model sizes.
    Scaling,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Deconvolve { .. } => "deconvolve",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Lyapunov { .. } => "lyapunov",
            Command::Scaling => "scaling",
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Divergence { .. } | Error::TrainingDiverged(_) | Error::EnsembleFailure { .. } => 4,
        Error::Dimension(_)
        | Error::NanInput(_)
        | Error::TooShort(_)
        | Error::DegenerateWindow
        | Error::Format(_)
        | Error::Io(_) => 3,
    }
}

struct Ctx {
    cfg: RunConfig,
    snapshot: String,
    seed: u64,
    out: PathBuf,
    deterministic: bool,
    threads: Option<usize>,
}

impl Ctx {
    fn manifest(&self, command: &str) -> RunManifest {
        let mut m = RunManifest::new(command, &self.snapshot, self.seed);
        m.extra.insert("deterministic".into(), self.deterministic.to_string());
        if let Some(n) = self.threads {
            m.extra.insert("threads".into(), n.to_string());
        }
        m
    }

    fn ext(&self) -> &'static str {
        match self.cfg.matrix_encoding {
            MatrixEncoding::Text => "csv",
            MatrixEncoding::Binary => "cdsr",
        }
    }

    fn write_matrix(&self, manifest: &mut RunManifest, stem: &str, m: &Matrix) -> Result<PathBuf, Error> {
        let path = self.out.join(format!("{stem}.{}", self.ext()));
        io::write_matrix(&path, m, self.cfg.matrix_encoding)?;
        manifest.add_output(&path)?;
        Ok(path)
    }

    fn write_text(&self, manifest: &mut RunManifest, name: &str, text: &str) -> Result<PathBuf, Error> {
        let path = self.out.join(name);
        io::write_atomic(&path, text.as_bytes())?;
        manifest.add_output(&path)?;
        Ok(path)
    }

    fn data_path(&self, explicit: &Option<PathBuf>) -> Result<PathBuf, Error> {
        explicit
            .clone()
            .or_else(|| self.cfg.data.clone())
            .ok_or_else(|| Error::Config("no input: pass --input or set the 'data' key".into()))
    }
}

fn load_ctx(cli: &Cli) -> Result<Ctx, Error> {
    let snapshot = match &cli.config {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut cfg = RunConfig::from_text(&snapshot)?;
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    Ok(Ctx {
        seed: cfg.train.seed,
        cfg,
        snapshot,
        out: cli.out.clone(),
        deterministic: cli.deterministic,
        threads: cli.threads,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = load_ctx(&cli).and_then(|ctx| {
        fs::create_dir_all(&ctx.out)?;
        match &cli.command {
            Command::Generate => cmd_generate(&ctx),
            Command::Deconvolve { input } => cmd_deconvolve(&ctx, input),
            Command::Train { input } => cmd_train(&ctx, input),
            Command::Evaluate { input, checkpoint } => cmd_evaluate(&ctx, input, checkpoint),
            Command::Lyapunov { checkpoint } => cmd_lyapunov(&ctx, checkpoint),
            Command::Scaling => cmd_scaling(&ctx),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("convdsr {}: {e}", cli.command.name());
            ExitCode::from(exit_code(&e))
        }
    }
}

fn cmd_generate(ctx: &Ctx) -> Result<(), Error> {
    let cfg = &ctx.cfg;
    let split = cfg.train_test_split.index(cfg.lorenz.t_len);
    let ds = make_benchmark(&cfg.lorenz, cfg.tr, cfg.noise_sigma, split, ctx.seed)?;
    let mut man = ctx.manifest("generate");
    ctx.write_matrix(&mut man, "latent", &ds.latent_truth)?;
    ctx.write_matrix(&mut man, "observed", &ds.observed)?;
    ctx.write_matrix(&mut man, "train", &ds.train_observed())?;
    ctx.write_matrix(&mut man, "test", &ds.test_observed())?;
    ctx.write_matrix(&mut man, "test_latent", &ds.test_latent())?;
    ctx.write_text(&mut man, "hrf.txt", &ds.filter.to_text())?;
    man.extra.insert("split_index".into(), ds.split_index.to_string());
    man.extra.insert("dt".into(), ds.dt.to_string());
    man.extra.insert("TR".into(), cfg.tr.to_string());
    man.extra.insert("noise_sigma".into(), ds.noise_sigma.to_string());
    man.finish(&ctx.out)?;
    Ok(())
}

fn cmd_deconvolve(ctx: &Ctx, input: &Option<PathBuf>) -> Result<(), Error> {
    let path = ctx.data_path(input)?;
    let filter = ctx.cfg.hrf()?;
    let res = io::deconvolve_cached(&path, &filter, &ctx.cfg.deconv)?;
    eprintln!("deconvolution cache {} ({})", if res.hit { "hit" } else { "miss" }, res.key);
    let mut man = ctx.manifest("deconvolve");
    man.add_input(&path)?;
    ctx.write_matrix(&mut man, "deconvolved", &res.matrix)?;
    man.extra.insert("cache_key".into(), res.key);
    man.extra.insert("cache_hit".into(), res.hit.to_string());
    man.finish(&ctx.out)?;
    Ok(())
}

/// Training split of the data file (and the nuisance file, if any).
fn load_split(ctx: &Ctx, input: &Option<PathBuf>, man: &mut RunManifest) -> Result<(Matrix, Option<Matrix>, usize), Error> {
    let path = ctx.data_path(input)?;
    man.add_input(&path)?;
    let x = io::read_matrix(&path)?;
    let split = ctx.cfg.train_test_split.index(x.rows());
    let r = match &ctx.cfg.nuisance {
        Some(p) => {
            man.add_input(p)?;
            let r = io::read_matrix(p)?;
            if r.rows() != x.rows() {
                return Err(Error::Dimension(format!(
                    "nuisance file has {} rows, data has {}",
                    r.rows(),
                    x.rows()
                )));
            }
            Some(r)
        }
        None => None,
    };
    Ok((x, r, split))
}

fn prepare(ctx: &Ctx, x: &Matrix, r: Option<&Matrix>) -> Result<TrainData, Error> {
    match ctx.cfg.decoder {
        DecoderKind::Conv => TrainData::prepare(x, r, &ctx.cfg.hrf()?, &ctx.cfg.deconv),
        DecoderKind::Standard => TrainData::standard(x, r),
    }
}

fn cmd_train(ctx: &Ctx, input: &Option<PathBuf>) -> Result<(), Error> {
    let mut man = ctx.manifest("train");
    let (x, r, split) = load_split(ctx, input, &mut man)?;
    let x_train = x.row_block(0, split);
    let r_train = r.as_ref().map(|r| r.row_block(0, split));
    let data = prepare(ctx, &x_train, r_train.as_ref())?;
    let mut tcfg = ctx.cfg.train.clone();
    tcfg.seed = ctx.seed;
    let report = match train_prepared(&data, &tcfg, ctx.cfg.observation_model) {
        Ok(rep) => rep,
        Err(e @ (Error::TrainingDiverged(_) | Error::Divergence { .. })) => {
            let diag = ctx.out.join("diagnostics.txt");
            let text = format!("error: {e}\nseed: {}\nconfig_hash: {}\n\n{}", ctx.seed, man.config_hash, ctx.snapshot);
            io::write_atomic(&diag, text.as_bytes())?;
            eprintln!("diagnostics written to {}", diag.display());
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    let ck = Checkpoint {
        params: report.params.clone(),
        decoder: report.decoder.clone(),
        config_hash: man.config_hash.clone(),
    };
    let ck_path = ctx.out.join("checkpoint.cdsr");
    ck.save(&ck_path)?;
    man.add_output(&ck_path)?;

    // Wall-clock times go to their own table so the remaining outputs are
    // byte-identical across reruns.
    let mut json = serde_json::to_value(&report).map_err(|e| Error::Format(e.to_string()))?;
    if let Some(obj) = json.as_object_mut() {
        obj.remove("epoch_seconds");
    }
    let text = serde_json::to_string_pretty(&json).map_err(|e| Error::Format(e.to_string()))?;
    ctx.write_text(&mut man, "train_report.json", &text)?;

    let mut loss = String::from("epoch\tloss\tgrad_norm_median\tgrad_norm_max\n");
    for (k, l) in report.epoch_loss.iter().enumerate() {
        loss.push_str(&format!("{k}\t{l}\t{}\t{}\n", report.grad_norm_median[k], report.grad_norm_max[k]));
    }
    ctx.write_text(&mut man, "loss.tsv", &loss)?;
    let mut timing = String::from("epoch\tseconds\n");
    for (k, s) in report.epoch_seconds.iter().enumerate() {
        timing.push_str(&format!("{k}\t{s}\n"));
    }
    ctx.write_text(&mut man, "timing.tsv", &timing)?;
    man.extra.insert("split_index".into(), split.to_string());
    man.extra.insert("converged".into(), report.converged.to_string());
    man.finish(&ctx.out)?;
    Ok(())
}

fn checkpoint_path(ctx: &Ctx, explicit: &Option<PathBuf>) -> Result<PathBuf, Error> {
    explicit
        .clone()
        .or_else(|| ctx.cfg.checkpoint.clone())
        .ok_or_else(|| Error::Config("no checkpoint: pass --checkpoint or set the 'checkpoint' key".into()))
}

fn cmd_evaluate(ctx: &Ctx, input: &Option<PathBuf>, checkpoint: &Option<PathBuf>) -> Result<(), Error> {
    let mut man = ctx.manifest("evaluate");
    let ck_path = checkpoint_path(ctx, checkpoint)?;
    man.add_input(&ck_path)?;
    let ck = Checkpoint::load(&ck_path)?;
    let (x, r, split) = load_split(ctx, input, &mut man)?;
    // A file no longer than the split is taken to be a test set on its own.
    let start = if split < x.rows() { split } else { 0 };
    let x_test = x.row_block(start, x.rows() - start);
    let r_test = r.as_ref().map(|r| r.row_block(start, r.rows() - start));
    if x_test.cols() != ck.decoder.obs_dim() {
        return Err(Error::Dimension(format!(
            "checkpoint decodes {} channels, data has {}",
            ck.decoder.obs_dim(),
            x_test.cols()
        )));
    }
    let data = if ck.decoder.hrf.len() == 1 {
        TrainData::standard(&x_test, r_test.as_ref())?
    } else {
        TrainData::prepare(&x_test, r_test.as_ref(), &ck.decoder.hrf, &ctx.cfg.deconv)?
    };
    let forcing = data.forcing(&ck.decoder)?.d;
    let mut mcfg = ctx.cfg.metrics.clone();
    mcfg.seed = ctx.seed;
    let eval = EvalData {
        x: &x_test,
        r: r_test.as_ref(),
        forcing: &forcing,
        dt_model: ctx.cfg.lorenz.dt,
    };
    let report = metrics::ensemble_evaluate(&ck.params, &ck.decoder, &eval, &mcfg)?;
    ctx.write_text(
        &mut man,
        "metrics.tsv",
        &format!("{}\n{}\n", MetricReport::header(), report.to_record()),
    )?;

    // one unperturbed free run from the first usable forcing row
    let z0 = (0..forcing.rows())
        .find(|&t| !forcing.row_has_nan(t))
        .map(|t| forcing.row(t).to_vec())
        .ok_or_else(|| Error::TooShort("test forcing has no finite row".into()))?;
    let gen = metrics::generate_observations(&ck.params, &ck.decoder, &z0, x_test.rows(), r_test.as_ref())?;
    let n = x_test.cols();
    let mut traj = String::from("t");
    (0..n).for_each(|j| traj.push_str(&format!("\tobserved_{j}")));
    (0..n).for_each(|j| traj.push_str(&format!("\tgenerated_{j}")));
    traj.push('\n');
    for t in 0..x_test.rows() {
        traj.push_str(&t.to_string());
        for v in x_test.row(t).iter().chain(gen.row(t)) {
            traj.push_str(&format!("\t{v}"));
        }
        traj.push('\n');
    }
    ctx.write_text(&mut man, "trajectory.tsv", &traj)?;

    let mut spectra: Vec<Vec<f64>> = Vec::with_capacity(2 * n);
    for j in 0..n {
        spectra.push(metrics::normalized_spectrum(&x_test.column(j), mcfg.pse_smooth_sigma)?);
        spectra.push(metrics::normalized_spectrum(&gen.column(j), mcfg.pse_smooth_sigma)?);
    }
    let mut spec = String::from("frequency_bin");
    for j in 0..n {
        spec.push_str(&format!("\tobserved_{j}\tgenerated_{j}"));
    }
    spec.push('\n');
    for k in 0..spectra[0].len() {
        spec.push_str(&k.to_string());
        for s in &spectra {
            spec.push_str(&format!("\t{}", s[k]));
        }
        spec.push('\n');
    }
    ctx.write_text(&mut man, "spectra.tsv", &spec)?;

    if let Some(p) = &ctx.cfg.latent_truth {
        man.add_input(p)?;
        let latent = io::read_matrix(p)?;
        let z_truth = latent.row_block(start.min(latent.rows()), latent.rows() - start.min(latent.rows()));
        let m = ck.params.latent_dim();
        if z_truth.cols() > m {
            return Err(Error::Dimension(format!("latent truth has {} columns, model has {m}", z_truth.cols())));
        }
        let states = ck.params.generate(&z0, z_truth.rows())?.states;
        let states = Matrix::from_fn(states.rows(), z_truth.cols(), |i, j| states[(i, j)]);
        let ds = metrics::dstsp(&z_truth, &states, &mcfg, mcfg.seed)?;
        let dp = metrics::dpse(&z_truth, &states, mcfg.pse_smooth_sigma)?;
        ctx.write_text(&mut man, "latent_metrics.tsv", &format!("d_stsp\td_pse\n{ds}\t{dp}\n"))?;
    }
    man.extra.insert("test_start".into(), start.to_string());
    man.finish(&ctx.out)?;
    Ok(())
}

fn cmd_lyapunov(ctx: &Ctx, checkpoints: &[PathBuf]) -> Result<(), Error> {
    let mut man = ctx.manifest("lyapunov");
    let mcfg = &ctx.cfg.metrics;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let mut table = String::from("checkpoint\trun\tlambda_per_step\tlambda_per_time\n");
    let mut per_ck = Vec::new();
    for path in checkpoints {
        man.add_input(path)?;
        let ck = Checkpoint::load(path)?;
        let mut values = Vec::new();
        for run in 0..mcfg.n_gen_trajectories {
            let z0: Vec<f64> = (0..ck.params.latent_dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let seed = ctx.seed.wrapping_add(run as u64);
            let est = metrics::lyapunov_max(&ck.params, &z0, mcfg.lyap_steps, mcfg.lyap_transient, ctx.cfg.lorenz.dt, seed);
            let (s, t) = est.map(|e| (e.per_step, e.per_time)).unwrap_or((f64::NAN, f64::NAN));
            if t.is_finite() {
                values.push(t);
            }
            table.push_str(&format!("{}\t{run}\t{s}\t{t}\n", path.display()));
        }
        values.sort_by(f64::total_cmp);
        per_ck.push((path.clone(), metrics::quantile(&values, 0.5), values.len()));
    }
    ctx.write_text(&mut man, "lyapunov.tsv", &table)?;
    let mut summary = String::from("checkpoint\tmedian_lambda_per_time\tn_finite\n");
    for (p, med, k) in &per_ck {
        summary.push_str(&format!("{}\t{med}\t{k}\n", p.display()));
    }
    let mut meds: Vec<f64> = per_ck.iter().map(|p| p.1).filter(|v| v.is_finite()).collect();
    meds.sort_by(f64::total_cmp);
    summary.push_str(&format!("all\t{}\t{}\n", metrics::quantile(&meds, 0.5), meds.len()));
    ctx.write_text(&mut man, "lyapunov_summary.tsv", &summary)?;
    man.finish(&ctx.out)?;
    Ok(())
}

fn cmd_scaling(ctx: &Ctx) -> Result<(), Error> {
    let cfg = &ctx.cfg;
    let as_f64 = |v: &[usize]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let sweeps = [
        (SweepVariable::Tr, cfg.sweep_tr.clone()),
        (SweepVariable::HiddenDim, as_f64(&cfg.sweep_hidden_dim)),
        (SweepVariable::LatentDim, as_f64(&cfg.sweep_latent_dim)),
        (SweepVariable::ObsDim, as_f64(&cfg.sweep_obs_dim)),
    ];
    // an empty list skips that sweep; anything shorter than 3 is rejected
    // before any timing starts
    for (var, values) in &sweeps {
        if !values.is_empty() && values.len() < 3 {
            return Err(Error::Config(format!(
                "sweep over {} needs at least 3 points, got {}",
                var.name(),
                values.len()
            )));
        }
    }
    if cfg.scaling_epochs < 5 {
        return Err(Error::Config("key 'scaling_epochs': at least 5 timed epochs required".into()));
    }
    let mut base = cfg.train.clone();
    base.seed = ctx.seed;
    let spec = ScalingSpec {
        base,
        tr: cfg.tr,
        length: cfg.scaling_length,
        noise_sigma: cfg.noise_sigma,
        warmup_epochs: cfg.scaling_warmup,
        timed_epochs: cfg.scaling_epochs,
        deconv: cfg.deconv.clone(),
    };
    let mut man = ctx.manifest("scaling");
    let mut results: Vec<SweepResult> = Vec::new();
    for (var, values) in &sweeps {
        if values.is_empty() {
            continue;
        }
        let res = run_sweep(*var, values, &spec)?;
        ctx.write_text(&mut man, &format!("scaling_{}.tsv", var.name()), &res.to_table())?;
        results.push(res);
    }
    let mut summary = String::from("variable\tr_squared\tmax_min_ratio\tn_points\n");
    for r in &results {
        summary.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.variable.name(),
            r.r_squared,
            r.max_min_ratio,
            r.points.len()
        ));
    }
    ctx.write_text(&mut man, "scaling_summary.tsv", &summary)?;
    man.finish(&ctx.out)?;
    Ok(())
}
