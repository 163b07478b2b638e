//! Training runs, evaluation and run records.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use repap_core::dataset::DatasetContainer;
use repap_core::datagen::topology::case_from_dataset;
use repap_core::datagen::DarcySourceSpec;
use repap_core::metrics::{compliance_error_batch, masked_l2, psnr, volume_fraction_error};
use repap_core::{make_cosine_schedule, make_observation_mask, BinaryMask, Error, Result, Scalar, Task};
use repap_nn::alignment::Model;
use repap_nn::params::{load_checkpoint, save_checkpoint, Checkpoint};
use repap_nn::tasks::{darcy_source, generation_context, prepare, residual_maes, Prepared};
use repap_nn::train::{sample, Clamp, StepRecord, Trainer};
use repap_nn::Normalizer;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Mode};
use crate::data::load_splits;

pub const DETERMINISTIC_ENV: &str = "REPAP_DETERMINISTIC";

/// True when the deterministic-mode variable is set to a non-empty value other than `0`.
pub fn deterministic_mode() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| !v.is_empty() && v != "0")
}

pub type Metrics = BTreeMap<String, f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub run: String,
    pub seed: u64,
    pub iteration: u64,
    pub kind: String,
    pub metrics: Metrics,
    pub wall_clock_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

/// Append-only JSONL writer; a sink without a file only keeps records in memory.
pub struct RecordSink {
    out: Option<BufWriter<File>>,
    pub records: Vec<RunRecord>,
}

impl RecordSink {
    pub fn memory() -> Self {
        Self { out: None, records: vec![] }
    }

    pub fn append(path: &Path) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: Some(BufWriter::new(f)),
            records: vec![],
        })
    }

    pub fn push(&mut self, mut r: RunRecord) -> Result<()> {
        if deterministic_mode() {
            r.wall_clock_s = 0.0;
        }
        if let Some(w) = &mut self.out {
            let line = serde_json::to_string(&r).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io("records", e))?;
        }
        self.records.push(r);
        Ok(())
    }
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

/// Normalized train and test splits plus what evaluation needs from the raw containers.
pub struct Experiment<T> {
    pub cfg: ExperimentConfig,
    pub train: Prepared<T>,
    pub test: Prepared<T>,
    pub test_ds: DatasetContainer,
    pub src: DarcySourceSpec,
    /// Per-sample observation masks of the test split (reconstruction mode).
    pub test_masks: Option<Vec<BinaryMask>>,
}

fn masks(ds: &DatasetContainer, ratio: f64, seed: u64) -> Result<Vec<BinaryMask>> {
    (0..ds.n).map(|i| make_observation_mask(ds.grid(), ratio, seed.wrapping_add(i as u64))).collect()
}

fn observed_weights<T: Scalar>(masks: &[BinaryMask], channels: usize) -> Vec<T> {
    masks
        .iter()
        .flat_map(|m| (0..channels).flat_map(move |_| m.values.iter().map(|&v| T::lit(v as f64))))
        .collect()
}

impl<T: Scalar> Experiment<T> {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let (train, test) = load_splits(cfg)?;
        Self::from_datasets(cfg, &train, test)
    }

    pub fn from_datasets(cfg: &ExperimentConfig, train_ds: &DatasetContainer, test_ds: DatasetContainer) -> Result<Self> {
        cfg.validate()?;
        let mut train = prepare::<T>(train_ds, None)?;
        let mut test = prepare::<T>(&test_ds, Some((&train.data.norm, train.cond_norm.as_ref())))?;
        let dc = cfg.task.data_channels();
        let test_masks = if cfg.mode == Mode::Reconstruction {
            let r = &cfg.reconstruction;
            let tm = masks(train_ds, r.mask_ratio, r.mask_seed)?;
            train.data.observed = Some(observed_weights(&tm, dc));
            let em = masks(&test_ds, r.mask_ratio, r.mask_seed ^ 0x5eed_0000_0000)?;
            test.data.observed = Some(observed_weights(&em, dc));
            Some(em)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            src: darcy_source(&test_ds),
            train,
            test,
            test_ds,
            test_masks,
        })
    }

    pub fn plane(&self) -> usize {
        self.test_ds.height * self.test_ds.width
    }

    pub fn build_model(&self, run_cfg: &ExperimentConfig, seed: u64) -> Result<Model<T>> {
        Model::new(run_cfg.backbone.clone(), run_cfg.alignment.clone(), run_cfg.task.data_channels(), seed)
    }

    /// Samples for test rows `0..n` (cycled), in physical units, with the rows used.
    pub fn generate(&self, model: &Model<T>, n: usize, seed: u64) -> Result<(Vec<f64>, Vec<usize>)> {
        let rows: Vec<usize> = (0..n).map(|i| i % self.test.data.n).collect();
        let sched = make_cosine_schedule(self.cfg.train.steps)?;
        let cond = self.test.data.cond_rows(&rows);
        let per = self.test.data.sample_len();
        let clamp_parts = self.test.data.observed.as_ref().map(|o| {
            let pick = |v: &[T]| -> Vec<T> { rows.iter().flat_map(|&r| v[r * per..(r + 1) * per].iter().copied()).collect() };
            (pick(o), pick(&self.test.data.x0))
        });
        let clamp = clamp_parts.as_ref().map(|(m, v)| Clamp { mask: m, values: v });
        let z = sample(model, &sched, n, cond.as_deref(), clamp.as_ref(), seed)?;
        let z: Vec<f64> = z.iter().map(|v| v.to_f64_lossy()).collect();
        Ok((self.test.data.norm.to_physical(&z, self.plane()), rows))
    }

    /// Physics and task metrics of physical samples drawn for `rows`.
    pub fn metrics(&self, phys: &[f64], rows: &[usize]) -> Result<Metrics> {
        let plane = self.plane();
        let dc = self.cfg.task.data_channels();
        let per = dc * plane;
        let ctx = generation_context(&self.test.data.tctx, rows, phys, &self.src)?;
        let maes = residual_maes(&ctx, phys)?;
        let mut m = Metrics::new();
        m.insert("r_mae".into(), maes.iter().sum::<f64>() / maes.len() as f64);
        let reference: Vec<f64> = {
            let x0: Vec<f64> = self.test.data.x0.iter().map(|v| v.to_f64_lossy()).collect();
            let phys_ref = self.test.data.norm.to_physical(&x0, plane);
            rows.iter().flat_map(|&r| phys_ref[r * per..(r + 1) * per].to_vec()).collect()
        };
        match self.cfg.task {
            Task::Topology => {
                let cases = rows.iter().map(|&r| case_from_dataset(&self.test_ds, r)).collect::<Result<Vec<_>>>()?;
                let c_opt: Vec<f64> = rows
                    .iter()
                    .map(|&r| self.test_ds.aux("scalars", r).map_or(f64::NAN, |s| s[1]))
                    .collect();
                let items: Vec<(&[f64], _, f64)> = (0..rows.len()).map(|b| (&phys[b * plane..(b + 1) * plane], &cases[b], c_opt[b])).collect();
                if let Some(ce) = compliance_error_batch(&items) {
                    m.insert("compliance_error".into(), ce);
                }
                let vfe = (0..rows.len())
                    .map(|b| volume_fraction_error(&phys[b * plane..(b + 1) * plane], cases[b].v_target))
                    .sum::<f64>()
                    / rows.len() as f64;
                m.insert("volume_fraction_error".into(), vfe);
            }
            Task::Charge => {
                m.insert("charge_phys_loss".into(), m["r_mae"]);
            }
            _ => {}
        }
        if self.cfg.task != Task::Darcy && self.cfg.task != Task::Turbulence || self.test_masks.is_some() {
            let mse = phys.iter().zip(&reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / phys.len() as f64;
            m.insert("data_mse".into(), mse);
        }
        if let Some(masks) = &self.test_masks {
            let mut l2 = 0.0;
            let mut count = 0;
            for (b, &r) in rows.iter().enumerate() {
                for c in 0..dc {
                    let s = (b * dc + c) * plane;
                    l2 += masked_l2(&phys[s..s + plane], &reference[s..s + plane], &masks[r])?;
                    count += 1;
                }
            }
            m.insert("masked_l2".into(), l2 / count as f64);
            m.insert("psnr".into(), psnr(phys, &reference)?);
        }
        Ok(m)
    }

    pub fn evaluate(&self, model: &Model<T>, n: usize, seed: u64) -> Result<Metrics> {
        let (phys, rows) = self.generate(model, n, seed)?;
        self.metrics(&phys, &rows)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seed: u64,
    pub norm: Normalizer,
    pub cond_norm: Option<Normalizer>,
}

pub fn checkpoint_meta(cfg: &ExperimentConfig, seed: u64, norm: &Normalizer, cond_norm: Option<&Normalizer>) -> serde_json::Value {
    serde_json::to_value(CheckpointMeta {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        seed,
        norm: norm.clone(),
        cond_norm: cond_norm.cloned(),
    })
    .expect("meta serializes")
}

/// EMA model, metadata and iteration stored in a checkpoint.
pub fn load_run_checkpoint<T: Scalar>(path: &Path) -> Result<(Model<T>, CheckpointMeta, u64)> {
    let ck: Checkpoint<T> = load_checkpoint(path)?;
    let meta: CheckpointMeta = serde_json::from_value(ck.meta.clone()).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    let mut params = ck.params;
    if let Some(ema) = ck.ema {
        params.values = ema;
    }
    let model = Model {
        backbone: meta.config.backbone.clone(),
        align: meta.config.alignment.clone(),
        data_channels: meta.config.task.data_channels(),
        params,
    };
    Ok((model, meta, ck.iteration))
}

pub struct RunOutcome<T> {
    pub label: String,
    pub seed: u64,
    pub config_hash: String,
    /// EMA weights at the end of training.
    pub model: Model<T>,
    /// `(iteration, r_mae)` at every evaluation.
    pub curve: Vec<(u64, f64)>,
    pub final_metrics: Metrics,
    pub checkpoint: Option<PathBuf>,
}

pub struct RunOptions<'a> {
    pub label: &'a str,
    /// Directory for the checkpoint and NaN dumps; `None` keeps everything in memory.
    pub dir: Option<&'a Path>,
    pub resume: Option<&'a Path>,
}

fn eval_seed(seed: u64) -> u64 {
    seed ^ 0xe7a1_0000
}

/// Train one model with `run_cfg` on the experiment data, evaluating the EMA
/// weights every `eval_every` iterations and at the end.
pub fn train_run<T: Scalar>(exp: &Experiment<T>, run_cfg: &ExperimentConfig, seed: u64, sink: &mut RecordSink, opts: &RunOptions) -> Result<RunOutcome<T>> {
    let cfg = run_cfg.with_seed(seed);
    cfg.validate()?;
    let hash = cfg.hash();
    let tc = cfg.train.clone();
    let mut tr = match opts.resume {
        Some(p) => {
            let ck: Checkpoint<T> = load_checkpoint(p)?;
            let meta: CheckpointMeta = serde_json::from_value(ck.meta).map_err(|e| Error::Format(e.to_string()))?;
            if meta.config_hash != hash {
                return Err(Error::Argument("checkpoint was written by a different configuration".into()));
            }
            let model = Model {
                backbone: cfg.backbone.clone(),
                align: cfg.alignment.clone(),
                data_channels: cfg.task.data_channels(),
                params: ck.params,
            };
            let ema = ck.ema.ok_or_else(|| Error::Format("checkpoint has no EMA state".into()))?;
            Trainer::resume(model, tc.clone(), ema, ck.iteration)?
        }
        None => Trainer::new(exp.build_model(&cfg, seed)?, tc.clone())?,
    };
    let ckpt_path = opts.dir.map(|d| d.join("checkpoint.rpck"));
    if let Some(d) = opts.dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let start = Instant::now();
    let mut recent: Vec<StepRecord> = Vec::new();
    let mut curve = Vec::new();
    let mut final_metrics = Metrics::new();
    let record = |kind: &str, it: u64, metrics: Metrics, ck: Option<&PathBuf>| RunRecord {
        config_hash: hash.clone(),
        run: opts.label.to_string(),
        seed,
        iteration: it,
        kind: kind.into(),
        metrics,
        wall_clock_s: start.elapsed().as_secs_f64(),
        checkpoint: ck.map(|p| p.display().to_string()),
    };
    while (tr.iteration as usize) < tc.iterations {
        let rec = match tr.step(&exp.train.data) {
            Ok(r) => r,
            Err(e) => {
                if let Some(d) = opts.dir {
                    let dump = serde_json::json!({ "error": e.to_string(), "iteration": tr.iteration, "recent_steps": recent });
                    let p = d.join("nan_dump.json");
                    if std::fs::write(&p, serde_json::to_vec_pretty(&dump).unwrap_or_default()).is_err() {
                        warn!("could not write {}", p.display());
                    }
                }
                return Err(e);
            }
        };
        let it = rec.iteration;
        if recent.len() == 10 {
            recent.remove(0);
        }
        recent.push(rec.clone());
        if tc.log_every > 0 && (it % tc.log_every as u64 == 0 || it == 1) {
            let l = &rec.loss;
            let m = Metrics::from([
                ("loss".into(), l.total),
                ("data".into(), l.data),
                ("phys_out".into(), l.phys_out),
                ("mid".into(), l.mid),
                ("observed".into(), l.observed),
                ("grad_norm".into(), rec.grad_norm),
            ]);
            sink.push(record("train", it, m, None))?;
        }
        let last = it as usize == tc.iterations;
        if (tc.eval_every > 0 && it % tc.eval_every as u64 == 0) || last {
            let ema = tr.ema_model();
            let n = if last { tc.final_eval_samples.max(tc.eval_samples) } else { tc.eval_samples };
            let m = exp.evaluate(&ema, n, eval_seed(seed))?;
            info!("[{}] seed {seed} iteration {it}: r_mae {:.4e}", opts.label, m["r_mae"]);
            curve.push((it, m["r_mae"]));
            if let Some(p) = &ckpt_path {
                let ck = Checkpoint {
                    iteration: it,
                    meta: checkpoint_meta(&cfg, seed, &exp.train.data.norm, exp.train.cond_norm.as_ref()),
                    params: tr.model.params.clone(),
                    ema: Some(tr.ema.shadow.clone()),
                };
                save_checkpoint(p, &ck)?;
            }
            sink.push(record("eval", it, m.clone(), ckpt_path.as_ref()))?;
            if last {
                final_metrics = m;
            }
        }
    }
    if final_metrics.is_empty() {
        let n = tc.final_eval_samples.max(tc.eval_samples);
        final_metrics = exp.evaluate(&tr.ema_model(), n, eval_seed(seed))?;
        curve.push((tr.iteration, final_metrics["r_mae"]));
    }
    Ok(RunOutcome {
        label: opts.label.to_string(),
        seed,
        config_hash: hash,
        model: tr.ema_model(),
        curve,
        final_metrics,
        checkpoint: ckpt_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ExperimentConfig, Scale};
    use repap_nn::backbone::BackboneKind;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::preset(Task::Darcy, Scale::Desk, BackboneKind::Unet);
        c.data.resolution = 8;
        c.data.n_train = 4;
        c.data.n_test = 2;
        c.backbone.height = 8;
        c.backbone.width = 8;
        c.backbone.base_channels = 4;
        c.alignment.head_hidden = 4;
        c.train.iterations = 4;
        c.train.batch_size = 2;
        c.train.steps = 5;
        c.train.eval_every = 2;
        c.train.eval_samples = 2;
        c.train.final_eval_samples = 2;
        c.train.log_every = 1;
        c
    }

    #[test]
    fn run_logs_curve_and_repeats_exactly() {
        let cfg = tiny();
        let exp = Experiment::<f64>::new(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions {
            label: "t",
            dir: Some(dir.path()),
            resume: None,
        };
        let mut sink = RecordSink::memory();
        let a = train_run(&exp, &cfg, 3, &mut sink, &opts).unwrap();
        assert_eq!(a.curve.iter().map(|c| c.0).collect::<Vec<_>>(), vec![2, 4]);
        assert!(a.final_metrics["r_mae"].is_finite());
        assert!(sink.records.iter().any(|r| r.kind == "train" && r.metrics["loss"].is_finite()));
        let b = train_run(&exp, &cfg, 3, &mut RecordSink::memory(), &RunOptions { dir: None, ..opts }).unwrap();
        assert_eq!(a.model.params.values, b.model.params.values);
        let (m, meta, it) = load_run_checkpoint::<f64>(&dir.path().join("checkpoint.rpck")).unwrap();
        assert_eq!(it, 4);
        assert_eq!(meta.config.with_seed(3), cfg.with_seed(3));
        assert_eq!(m.params.values, a.model.params.values);
    }

    #[test]
    fn resume_continues_to_the_budget() {
        let mut cfg = tiny();
        let exp = Experiment::<f64>::new(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        cfg.train.iterations = 2;
        let opts = RunOptions {
            label: "r",
            dir: Some(dir.path()),
            resume: None,
        };
        train_run(&exp, &cfg, 1, &mut RecordSink::memory(), &opts).unwrap();
        let ck = dir.path().join("checkpoint.rpck");
        // a different budget hashes differently
        cfg.train.iterations = 4;
        let r = train_run(&exp, &cfg, 1, &mut RecordSink::memory(), &RunOptions { resume: Some(&ck), ..opts });
        assert!(r.is_err());
    }

    #[test]
    fn reconstruction_clamps_observed_entries() {
        let mut cfg = tiny();
        cfg.mode = Mode::Reconstruction;
        let exp = Experiment::<f64>::new(&cfg).unwrap();
        let model = exp.build_model(&cfg, 0).unwrap();
        let (phys, rows) = exp.generate(&model, 2, 7).unwrap();
        let masks = exp.test_masks.as_ref().unwrap();
        let x0: Vec<f64> = exp.test.data.norm.to_physical(&exp.test.data.x0, 64);
        for (b, &r) in rows.iter().enumerate() {
            for c in 0..2 {
                for (p, &o) in masks[r].values.iter().enumerate() {
                    if o == 1 {
                        let i = (b * 2 + c) * 64 + p;
                        assert!((phys[i] - x0[(r * 2 + c) * 64 + p]).abs() < 1e-12);
                    }
                }
            }
        }
        let m = exp.metrics(&phys, &rows).unwrap();
        assert!(m.contains_key("masked_l2") && m.contains_key("psnr"));
    }
}
