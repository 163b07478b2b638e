use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use repap_cli::ablate::{run_sweep, SweepSpec};
use repap_cli::config::{load_config, ExperimentConfig, Mode, Precision};
use repap_cli::data::{generate, self_check};
use repap_cli::diagnose::{diagnose, DiagnoseOptions};
use repap_cli::run::{load_run_checkpoint, train_run, Experiment, RecordSink, RunOptions, RunRecord};
use repap_core::dataset::{write_dataset, ChannelKind};
use repap_core::datagen::DarcySourceSpec;
use repap_core::{Error, Field, Result, Scalar, Task};
use repap_nn::tasks::split_channels;

#[derive(Parser)]
#[command(name = "repap", version, about = "Physics-aligned diffusion experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dataset and print its residual self-check.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: Task,
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// Grid points (or elements) per side; defaults to the config or desk preset.
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Train one model per seed, writing records and checkpoints under the output directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print the fully defaulted configuration and exit.
        #[arg(long)]
        print_effective_config: bool,
    },
    /// Draw samples from a checkpoint (observations are clamped in reconstruction mode).
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        /// Switch to reconstruction with this observed fraction.
        #[arg(long)]
        mask_ratio: Option<f64>,
    },
    /// Evaluate a checkpoint on freshly drawn samples.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 32)]
        n: usize,
    },
    /// Run a one-axis sweep described by a sweep spec (`--config`).
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Compare two checkpoints: profiles, effective rank, CKA, attenuation and plots.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint_a: PathBuf,
        #[arg(long)]
        checkpoint_b: PathBuf,
        #[arg(long, default_value_t = 1024)]
        fit_samples: usize,
        #[arg(long, default_value_t = 64)]
        eval_samples: usize,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Argument(m) => Failure::Usage(m),
            other => Failure::Runtime(other),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn config(common: &Common) -> std::result::Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => load_config(p).map_err(|e| Failure::Usage(e.to_string()))?,
        None => repap_cli::parse_config("")?,
    };
    if let Some(s) = common.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string(v).expect("serializable"));
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn cmd_gen_data(common: &Common, task: Task, n: usize, resolution: Option<usize>) -> CmdResult {
    let cfg = config(common)?;
    let res = resolution.unwrap_or(if common.config.is_some() { cfg.data.resolution } else if task == Task::Topology { 16 } else { 32 });
    let seed = common.seed.unwrap_or(cfg.data.train_seed);
    let out = common.out.clone().ok_or_else(|| Failure::Usage("--out is required".into()))?;
    let ds = generate(task, n, seed, res)?;
    write_dataset(&out, &ds)?;
    let chk = self_check(&ds)?;
    print_json(&serde_json::json!({ "task": task, "path": out, "samples": ds.n, "seed": seed, "self_check": chk }));
    Ok(())
}

fn train_all<T: Scalar>(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<()> {
    mkdir(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml()).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let exp = Experiment::<T>::new(cfg)?;
    let mut sink = RecordSink::append(&cfg.out_dir.join("records.jsonl"))?;
    for &seed in &cfg.seeds {
        let dir = cfg.out_dir.join(format!("seed{seed}"));
        let opts = RunOptions {
            label: "train",
            dir: Some(&dir),
            resume,
        };
        let o = train_run(&exp, cfg, seed, &mut sink, &opts)?;
        print_json(&serde_json::json!({ "seed": seed, "config_hash": o.config_hash, "final": o.final_metrics, "checkpoint": o.checkpoint }));
    }
    Ok(())
}

fn cmd_train(common: &Common, resume: Option<&Path>, print_cfg: bool) -> CmdResult {
    let cfg = config(common)?;
    if print_cfg {
        print!("{}", cfg.to_toml());
        for &s in &cfg.seeds {
            println!("# seed {s}: config hash {}", cfg.with_seed(s).hash());
        }
        return Ok(());
    }
    info!("config hash {}", cfg.hash());
    match cfg.precision {
        Precision::F32 => train_all::<f32>(&cfg, resume)?,
        Precision::F64 => train_all::<f64>(&cfg, resume)?,
    }
    Ok(())
}

/// Experiment for a checkpoint; `--config` replaces the data section.
fn checkpoint_experiment(common: &Common, ckpt: &Path, mask_ratio: Option<f64>) -> std::result::Result<(Experiment<f64>, repap_nn::Model<f64>, u64), Failure> {
    let (model, meta, _) = load_run_checkpoint::<f64>(ckpt)?;
    let mut cfg = meta.config.clone();
    if common.config.is_some() {
        cfg.data = config(common)?.data;
    }
    if let Some(r) = mask_ratio {
        cfg.mode = Mode::Reconstruction;
        cfg.reconstruction.mask_ratio = r;
    }
    let exp = Experiment::<f64>::new(&cfg)?;
    if exp.train.data.norm != meta.norm {
        log::warn!("training data statistics differ from the checkpoint; using the checkpoint's");
    }
    let mut exp = exp;
    exp.test = repap_nn::tasks::prepare(&exp.test_ds, Some((&meta.norm, meta.cond_norm.as_ref())))?;
    if let (Some(m), true) = (&exp.test_masks, cfg.mode == Mode::Reconstruction) {
        let dc = cfg.task.data_channels();
        exp.test.data.observed = Some(m.iter().flat_map(|m| (0..dc).flat_map(move |_| m.values.iter().map(|&v| v as f64))).collect());
    }
    Ok((exp, model, meta.seed))
}

fn cmd_sample(common: &Common, ckpt: &Path, n: usize, mask_ratio: Option<f64>) -> CmdResult {
    let (exp, model, _) = checkpoint_experiment(common, ckpt, mask_ratio)?;
    let seed = common.seed.unwrap_or(0);
    let out = common.out.clone().ok_or_else(|| Failure::Usage("--out is required".into()))?;
    let (phys, rows) = exp.generate(&model, n, seed)?;
    let metrics = exp.metrics(&phys, &rows)?;
    let ds = &exp.test_ds;
    let (dch, _) = split_channels(ds);
    let plane = exp.plane();
    let mut res = repap_core::dataset::DatasetContainer::new(&ds.task, ds.grid(), ds.layout.clone(), ds.provenance.clone());
    for a in &ds.aux {
        res.declare_aux(&a.name, a.len);
    }
    let src: DarcySourceSpec = exp.src;
    for (b, &r) in rows.iter().enumerate() {
        let orig: Field<f64> = ds.sample(r);
        let mut vals = orig.values.clone();
        for (k, &c) in dch.iter().enumerate() {
            vals[c * plane..(c + 1) * plane].copy_from_slice(&phys[(b * dch.len() + k) * plane..(b * dch.len() + k + 1) * plane]);
        }
        let f = Field::from_vec(ds.grid(), ds.channels, vals)?;
        res.push_sample(&f)?;
        for a in &ds.aux {
            let v = ds.aux(&a.name, r).expect("declared aux").to_vec();
            let v = if a.name == "source_balance" {
                vec![src.balance_or_default(&Field::from_vec(ds.grid(), 1, f.values[..plane].to_vec())?)]
            } else {
                v
            };
            res.push_aux(&a.name, &v)?;
        }
    }
    debug_assert!(res.layout.iter().zip(&ds.layout).all(|(a, b)| a.kind == b.kind && a.kind != ChannelKind::Condition || a.name == b.name));
    write_dataset(&out, &res)?;
    let rec = RunRecord {
        config_hash: exp.cfg.hash(),
        run: "sample".into(),
        seed,
        iteration: 0,
        kind: "sample".into(),
        metrics,
        wall_clock_s: 0.0,
        checkpoint: Some(ckpt.display().to_string()),
    };
    let mpath = PathBuf::from(format!("{}.metrics.json", out.display()));
    std::fs::write(&mpath, serde_json::to_vec_pretty(&rec).expect("serializable")).map_err(|e| Error::io(&mpath, e))?;
    print_json(&rec);
    Ok(())
}

fn cmd_eval(common: &Common, ckpt: &Path, n: usize) -> CmdResult {
    let (exp, model, train_seed) = checkpoint_experiment(common, ckpt, None)?;
    let seed = common.seed.unwrap_or(train_seed ^ 0xe7a1_0000);
    let metrics = exp.evaluate(&model, n, seed)?;
    let rec = RunRecord {
        config_hash: exp.cfg.hash(),
        run: "eval".into(),
        seed,
        iteration: 0,
        kind: "eval".into(),
        metrics,
        wall_clock_s: 0.0,
        checkpoint: Some(ckpt.display().to_string()),
    };
    if let Some(o) = &common.out {
        let mut sink = RecordSink::append(o)?;
        sink.push(rec.clone())?;
    }
    print_json(&rec);
    Ok(())
}

fn cmd_ablate(common: &Common) -> CmdResult {
    let path = common.config.as_ref().ok_or_else(|| Failure::Usage("ablate needs --config <sweep spec>".into()))?;
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Runtime(Error::io(path, e)))?;
    let spec = SweepSpec::parse(&text).map_err(|e| Failure::Usage(e.to_string()))?;
    let mut base = spec.base_config().map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(s) = common.seed {
        base.seeds = vec![s];
    }
    let mut spec = spec;
    if common.seed.is_some() {
        spec.seeds = Some(base.seeds.clone());
    }
    let out = common.out.clone().unwrap_or_else(|| base.out_dir.join("ablate"));
    mkdir(&out)?;
    let mut sink = RecordSink::append(&out.join("records.jsonl"))?;
    let report = match base.precision {
        Precision::F32 => run_sweep::<f32>(&spec, &base, Some(&out), &mut sink)?,
        Precision::F64 => run_sweep::<f64>(&spec, &base, Some(&out), &mut sink)?,
    };
    let md = report.to_markdown();
    std::fs::write(out.join("report.md"), &md).map_err(|e| Error::io(&out, e))?;
    std::fs::write(out.join("report.json"), serde_json::to_vec_pretty(&report).expect("serializable")).map_err(|e| Error::io(&out, e))?;
    print!("{md}");
    Ok(())
}

fn cmd_diagnose(common: &Common, a: &Path, b: &Path, fit: usize, eval: usize) -> CmdResult {
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("diagnose"));
    let opts = DiagnoseOptions {
        fit_samples: fit,
        eval_samples: eval,
        seed: common.seed.unwrap_or(0),
    };
    let r = diagnose(a, b, &out, &opts)?;
    print!("{}", r.to_markdown());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match &cli.cmd {
        Cmd::GenData { common, task, n, resolution } => cmd_gen_data(common, *task, *n, *resolution),
        Cmd::Train {
            common,
            resume,
            print_effective_config,
        } => cmd_train(common, resume.as_deref(), *print_effective_config),
        Cmd::Sample {
            common,
            checkpoint,
            n,
            mask_ratio,
        } => cmd_sample(common, checkpoint, *n, *mask_ratio),
        Cmd::Eval { common, checkpoint, n } => cmd_eval(common, checkpoint, *n),
        Cmd::Ablate { common } => cmd_ablate(common),
        Cmd::Diagnose {
            common,
            checkpoint_a,
            checkpoint_b,
            fit_samples,
            eval_samples,
        } => cmd_diagnose(common, checkpoint_a, checkpoint_b, *fit_samples, *eval_samples),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
