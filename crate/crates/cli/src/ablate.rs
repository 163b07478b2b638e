//! One-axis sweeps over alignment settings with per-seed aggregation.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::warn;
use repap_core::{Error, Result, Scalar};
use repap_nn::backbone::{BackboneKind, TapPosition};
use serde::{Deserialize, Serialize};

use crate::config::{parse_config, ExperimentConfig};
use crate::run::{deterministic_mode, train_run, Experiment, RecordSink, RunOptions, RunRecord};
use crate::study::Arm;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Each value is a position name or a list of names.
    Positions,
    CMid,
    HeadDim,
    /// DiT block index used as the single aligned position.
    DitBlock,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<toml::Value>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    /// Adds plain-DDPM and output-physics rows.
    #[serde(default)]
    pub baselines: bool,
    #[serde(default)]
    pub base: Option<toml::Table>,
}

impl SweepSpec {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("sweep spec: {e}")))
    }

    pub fn base_config(&self) -> Result<ExperimentConfig> {
        let text = match &self.base {
            Some(t) => toml::to_string(t).map_err(|e| Error::Format(e.to_string()))?,
            None => String::new(),
        };
        parse_config(&text)
    }
}

fn value_label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Array(a) => a.iter().map(value_label).collect::<Vec<_>>().join("+"),
        other => other.to_string(),
    }
}

/// `base` with one axis value applied.
pub fn apply_axis(base: &ExperimentConfig, axis: Axis, v: &toml::Value) -> Result<ExperimentConfig> {
    let bad = || Error::Argument(format!("value {v} does not fit axis {axis:?}"));
    let mut c = base.clone();
    match axis {
        Axis::Positions => {
            let names: Vec<&str> = match v {
                toml::Value::String(s) => vec![s.as_str()],
                toml::Value::Array(a) => a.iter().map(|x| x.as_str().ok_or_else(bad)).collect::<Result<_>>()?,
                _ => return Err(bad()),
            };
            c.alignment.positions = names.into_iter().map(str::parse).collect::<Result<Vec<TapPosition>>>()?;
        }
        Axis::CMid => c.alignment.c_mid = v.as_float().or_else(|| v.as_integer().map(|i| i as f64)).ok_or_else(bad)?,
        Axis::HeadDim => c.alignment.head_hidden = v.as_integer().filter(|&i| i > 0).ok_or_else(bad)? as usize,
        Axis::DitBlock => {
            if c.backbone.kind != BackboneKind::Dit {
                return Err(Error::Argument("the DiT block axis needs a DiT backbone".into()));
            }
            let k = v.as_integer().filter(|&i| i > 0).ok_or_else(bad)? as usize;
            c.alignment.positions = vec![TapPosition::Block(k)];
        }
    }
    c.validate()?;
    Ok(c)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub per_seed: Vec<(u64, f64)>,
    /// Mean and sample standard deviation per final metric over successful seeds.
    pub mean: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
    pub failures: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: Axis,
    pub rows: Vec<SweepRow>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = if v.len() > 1 {
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, s)
}

struct Cell {
    row: usize,
    seed: u64,
    cfg: Result<ExperimentConfig>,
}

/// Run every (value, seed) cell; failed cells are recorded and the sweep continues.
pub fn run_sweep<T: Scalar>(spec: &SweepSpec, base: &ExperimentConfig, out: Option<&Path>, sink: &mut RecordSink) -> Result<SweepReport> {
    let seeds = spec.seeds.clone().unwrap_or_else(|| base.seeds.clone());
    let mut labels = Vec::new();
    let mut cells = Vec::new();
    let mut row_cfgs: Vec<Result<ExperimentConfig>> = Vec::new();
    if spec.baselines {
        for arm in [Arm::Ddpm, Arm::OutputPhysics] {
            labels.push(arm.label());
            row_cfgs.push(Ok(arm.config(base)));
        }
    }
    for v in &spec.values {
        labels.push(format!("{:?}={}", spec.axis, value_label(v)).to_lowercase());
        row_cfgs.push(apply_axis(base, spec.axis, v));
    }
    for (row, rc) in row_cfgs.iter().enumerate() {
        for &seed in &seeds {
            cells.push(Cell {
                row,
                seed,
                cfg: match rc {
                    Ok(c) => Ok(c.clone()),
                    Err(e) => Err(Error::Argument(e.to_string())),
                },
            });
        }
    }
    let exp = Experiment::<T>::new(base)?;
    let workers = if deterministic_mode() { 1 } else { base.workers.max(1) };
    let next = AtomicUsize::new(0);
    type CellOut = (Result<crate::run::Metrics>, Vec<RunRecord>);
    let results: Mutex<Vec<Option<CellOut>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.min(cells.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                let mut local = RecordSink::memory();
                let res = match &cell.cfg {
                    Ok(cfg) => {
                        let label = labels[cell.row].clone();
                        let dir = out.map(|o| o.join(format!("{}-seed{}", label.replace(['=', '+', '/'], "_"), cell.seed)));
                        let opts = RunOptions {
                            label: &label,
                            dir: dir.as_deref(),
                            resume: None,
                        };
                        train_run(&exp, cfg, cell.seed, &mut local, &opts).map(|o| o.final_metrics)
                    }
                    Err(e) => Err(Error::Argument(e.to_string())),
                };
                results.lock().expect("results lock")[i] = Some((res, local.records));
            });
        }
    });
    let results = results.into_inner().expect("results lock");
    let mut rows: Vec<SweepRow> = labels
        .iter()
        .map(|l| SweepRow {
            label: l.clone(),
            per_seed: vec![],
            mean: BTreeMap::new(),
            std: BTreeMap::new(),
            failures: vec![],
        })
        .collect();
    let mut collected: Vec<Vec<crate::run::Metrics>> = vec![vec![]; rows.len()];
    for (cell, r) in cells.iter().zip(results) {
        let (res, records) = r.expect("every cell ran");
        for rec in records {
            sink.push(rec)?;
        }
        match res {
            Ok(m) => {
                rows[cell.row].per_seed.push((cell.seed, m["r_mae"]));
                collected[cell.row].push(m);
            }
            Err(e) => {
                warn!("sweep cell {} seed {} failed: {e}", labels[cell.row], cell.seed);
                rows[cell.row].failures.push(format!("seed {}: {e}", cell.seed));
            }
        }
    }
    for (row, ms) in rows.iter_mut().zip(&collected) {
        let keys: Vec<String> = ms.first().map(|m| m.keys().cloned().collect()).unwrap_or_default();
        for k in keys {
            let v: Vec<f64> = ms.iter().filter_map(|m| m.get(&k).copied()).collect();
            let (m, s) = mean_std(&v);
            row.mean.insert(k.clone(), m);
            row.std.insert(k, s);
        }
    }
    Ok(SweepReport { axis: spec.axis, rows })
}

impl SweepReport {
    /// Markdown table with `mean ± std` per metric.
    pub fn to_markdown(&self) -> String {
        let mut keys: Vec<String> = self.rows.iter().flat_map(|r| r.mean.keys().cloned()).collect();
        keys.sort();
        keys.dedup();
        let mut s = format!("| setting | {} | seeds | failures |\n", keys.join(" | "));
        s += &format!("|---|{}---|---|\n", "---|".repeat(keys.len()));
        for r in &self.rows {
            let cells: Vec<String> = keys
                .iter()
                .map(|k| match (r.mean.get(k), r.std.get(k)) {
                    (Some(m), Some(sd)) => format!("{m:.4e} ± {sd:.1e}"),
                    _ => "n/a".into(),
                })
                .collect();
            s += &format!("| {} | {} | {} | {} |\n", r.label, cells.join(" | "), r.per_seed.len(), r.failures.len());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_base() -> String {
        "[data]\nresolution = 8\nn_train = 4\nn_test = 2\n\
         [backbone]\nheight = 8\nwidth = 8\nbase_channels = 4\n\
         [alignment]\nhead_hidden = 4\n\
         [train]\niterations = 2\nbatch_size = 2\nsteps = 4\neval_every = 2\neval_samples = 2\nfinal_eval_samples = 2\n"
            .into()
    }

    #[test]
    fn axis_values_map_onto_the_config() {
        let base = parse_config("").unwrap();
        let c = apply_axis(&base, Axis::Positions, &toml::Value::Array(vec!["encoder_2".into(), "output".into()])).unwrap();
        assert_eq!(c.alignment.positions, vec![TapPosition::Encoder(2), TapPosition::Output]);
        assert_eq!(apply_axis(&base, Axis::CMid, &toml::Value::Float(0.5)).unwrap().alignment.c_mid, 0.5);
        assert_eq!(apply_axis(&base, Axis::HeadDim, &toml::Value::Integer(16)).unwrap().alignment.head_hidden, 16);
        assert!(apply_axis(&base, Axis::DitBlock, &toml::Value::Integer(2)).is_err());
        let dit = parse_config("[backbone]\nkind = \"dit\"").unwrap();
        assert!(apply_axis(&dit, Axis::DitBlock, &toml::Value::Integer(6)).is_err());
        assert_eq!(
            apply_axis(&dit, Axis::DitBlock, &toml::Value::Integer(4)).unwrap().alignment.positions,
            vec![TapPosition::Block(4)]
        );
    }

    #[test]
    fn failed_cells_are_recorded_and_the_sweep_continues() {
        let text = format!(
            "axis = \"positions\"\nvalues = [\"bottleneck\", \"encoder_9\"]\nseeds = [0, 1]\nbaselines = true\n[base]\n{}",
            tiny_base().replace("[data]", "[base.data]").replace("[backbone]", "[base.backbone]").replace("[alignment]", "[base.alignment]").replace("[train]", "[base.train]")
        );
        let spec = SweepSpec::parse(&text).unwrap();
        let base = spec.base_config().unwrap();
        let r = run_sweep::<f64>(&spec, &base, None, &mut RecordSink::memory()).unwrap();
        assert_eq!(r.rows.len(), 4);
        assert_eq!(r.rows[2].per_seed.len(), 2);
        assert_eq!(r.rows[3].failures.len(), 2);
        assert!(r.rows[2].mean["r_mae"].is_finite());
        let md = r.to_markdown();
        assert_eq!(md.lines().count(), 2 + 4);
    }
}
