//! Experiment configuration: presets, TOML overrides and hashing.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use repap_core::{Error, Result, Task};
use repap_nn::alignment::AlignmentConfig;
use repap_nn::backbone::{BackboneConfig, BackboneKind, TapPosition};
use repap_nn::params::AdamConfig;
use repap_nn::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Generation,
    Reconstruction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Full,
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "full" => Ok(Scale::Full),
            _ => Err(Error::Argument(format!("unknown scale '{s}' (expected desk or full)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_path: Option<PathBuf>,
    pub n_train: usize,
    pub n_test: usize,
    /// Grid points per side (Darcy, charge) or elements per side (topology).
    /// Turbulence uses its fixed channel grid.
    pub resolution: usize,
    pub train_seed: u64,
    pub test_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructionConfig {
    /// Fraction of observed grid points.
    pub mask_ratio: f64,
    pub mask_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub mode: Mode,
    pub scale: Scale,
    pub precision: Precision,
    pub schedule: ScheduleKind,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Concurrent runs in sweeps.
    pub workers: usize,
    pub backbone: BackboneConfig,
    pub alignment: AlignmentConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub reconstruction: ReconstructionConfig,
}

/// Alignment position used when none is configured: the bottleneck for a
/// U-Net, the middle block for a DiT.
pub fn default_position(backbone: &BackboneConfig) -> TapPosition {
    match backbone.kind {
        BackboneKind::Unet => TapPosition::Bottleneck,
        BackboneKind::Dit => TapPosition::Block(backbone.depth.div_ceil(2)),
    }
}

fn desk_backbone(task: Task, kind: BackboneKind, res: usize) -> BackboneConfig {
    let (h, w) = match task {
        Task::Turbulence => (48, 128),
        _ => (res, res),
    };
    let inc = task.data_channels() + task.cond_channels();
    match kind {
        BackboneKind::Unet => BackboneConfig::desk_unet(inc, task.data_channels(), h, w),
        BackboneKind::Dit => BackboneConfig::desk_dit(inc, task.data_channels(), h, w),
    }
}

fn full_backbone(task: Task, kind: BackboneKind) -> BackboneConfig {
    let inc = task.data_channels() + task.cond_channels();
    let (h, w) = if task == Task::Turbulence { (48, 128) } else { (64, 64) };
    match kind {
        BackboneKind::Dit => BackboneConfig::full_dit(inc, task.data_channels(), h, w),
        BackboneKind::Unet => match task {
            Task::Darcy => BackboneConfig::full_unet_darcy(),
            Task::Topology => BackboneConfig::full_unet_topology(),
            Task::Charge => BackboneConfig::full_unet_charge(),
            Task::Turbulence => BackboneConfig {
                in_channels: 1,
                out_channels: 1,
                height: h,
                width: w,
                ..BackboneConfig::full_unet_darcy()
            },
        },
    }
}

impl ExperimentConfig {
    pub fn preset(task: Task, scale: Scale, kind: BackboneKind) -> Self {
        let desk_res = if task == Task::Topology { 16 } else { 32 };
        let backbone = match scale {
            Scale::Desk => desk_backbone(task, kind, desk_res),
            Scale::Full => full_backbone(task, kind),
        };
        let alignment = AlignmentConfig {
            positions: vec![default_position(&backbone)],
            c_out: match task {
                Task::Darcy | Task::Topology => 1e-3,
                Task::Charge => 1e-2,
                Task::Turbulence => 0.0,
            },
            ..AlignmentConfig::task_default(task)
        };
        let train = match scale {
            Scale::Desk => TrainConfig::default(),
            Scale::Full => {
                let (iterations, lr, steps, ema_decay) = match task {
                    Task::Darcy => (120_000, 1e-4, 1000, 0.999),
                    Task::Topology => (150_000, 5e-5, 1000, 0.999),
                    Task::Charge => (120_000, 1e-4, 100, 0.99),
                    Task::Turbulence => (120_000, 1e-4, 1000, 0.999),
                };
                TrainConfig {
                    iterations,
                    batch_size: 32,
                    adam: AdamConfig { lr, ..AdamConfig::default() },
                    ema_decay,
                    steps,
                    log_every: 500,
                    eval_every: 10_000,
                    eval_samples: 16,
                    final_eval_samples: 64,
                    seed: 0,
                }
            }
        };
        let data = DataConfig {
            train_path: None,
            test_path: None,
            n_train: match (scale, task) {
                (Scale::Desk, Task::Topology) => 64,
                (Scale::Desk, _) => 256,
                (Scale::Full, _) => 10_000,
            },
            n_test: match task {
                Task::Topology => 16,
                _ => 64,
            },
            resolution: match scale {
                Scale::Desk => desk_res,
                Scale::Full => 64,
            },
            train_seed: 11,
            test_seed: 12,
        };
        Self {
            task,
            mode: Mode::Generation,
            scale,
            precision: Precision::F32,
            schedule: ScheduleKind::Cosine,
            seeds: vec![0, 1, 2],
            out_dir: PathBuf::from("runs").join(format!("{task}-{}", kind_name(kind))),
            workers: 1,
            backbone,
            alignment,
            train,
            data,
            reconstruction: ReconstructionConfig {
                mask_ratio: 0.3,
                mask_seed: 13,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.alignment.validate(&self.backbone)?;
        let t = self.task;
        if self.backbone.out_channels != t.data_channels() || self.backbone.in_channels != t.data_channels() + t.cond_channels() {
            return Err(Error::Argument(format!(
                "task {t} needs {} input and {} output channels",
                t.data_channels() + t.cond_channels(),
                t.data_channels()
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Argument("at least one seed is required".into()));
        }
        if self.data.n_train == 0 || self.data.n_test == 0 {
            return Err(Error::Argument("dataset sizes must be positive".into()));
        }
        if self.mode == Mode::Reconstruction && !(self.reconstruction.mask_ratio > 0.0 && self.reconstruction.mask_ratio < 1.0) {
            return Err(Error::Argument("mask ratio must lie in (0,1)".into()));
        }
        Ok(())
    }

    /// Copy with a single seed applied to both the seed list and the trainer.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seeds = vec![seed];
        c.train.seed = seed;
        c
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical (key-sorted) JSON form, without `out_dir` and `workers`.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("out_dir");
            m.remove("workers");
        }
        hex(&Sha256::digest(canonical_json(&v).as_bytes()))
    }
}

fn kind_name(k: BackboneKind) -> &'static str {
    match k {
        BackboneKind::Unet => "unet",
        BackboneKind::Dit => "dit",
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// JSON text with object keys sorted at every level.
pub fn canonical_json(v: &serde_json::Value) -> String {
    use serde_json::Value;
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical_json(&m[k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(a) => format!("[{}]", a.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parse TOML text over the preset selected by its `task`, `scale` and
/// `backbone.kind` keys (defaults: darcy, desk, unet).
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let user: toml::Value = text.parse::<toml::Table>().map_err(|e| Error::Format(format!("config: {e}")))?.into();
    let get = |k: &str| user.get(k).and_then(|v| v.as_str());
    let task: Task = get("task").unwrap_or("darcy").parse()?;
    let scale: Scale = get("scale").unwrap_or("desk").parse()?;
    let kind = match user.get("backbone").and_then(|b| b.get("kind")).and_then(|v| v.as_str()) {
        None | Some("unet") => BackboneKind::Unet,
        Some("dit") => BackboneKind::Dit,
        Some(other) => return Err(Error::Argument(format!("unknown backbone kind '{other}'"))),
    };
    let preset = ExperimentConfig::preset(task, scale, kind);
    let mut merged = toml::Value::try_from(&preset).map_err(|e| Error::Format(e.to_string()))?;
    merge(&mut merged, user);
    let cfg: ExperimentConfig = merged.try_into().map_err(|e| Error::Format(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

impl fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_toml())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use repap_nn::backbone::count_parameters;

    #[test]
    fn empty_file_is_desk_darcy() {
        let c = parse_config("").unwrap();
        assert_eq!(c, ExperimentConfig::preset(Task::Darcy, Scale::Desk, BackboneKind::Unet));
        assert_eq!(c.train.iterations, 2000);
        assert_eq!(c.backbone.base_channels, 8);
        assert_eq!(c.backbone.height, 32);
    }

    #[test]
    fn effective_config_round_trips() {
        for task in Task::ALL {
            for kind in [BackboneKind::Unet, BackboneKind::Dit] {
                let c = ExperimentConfig::preset(task, Scale::Desk, kind);
                c.validate().unwrap();
                assert_eq!(parse_config(&c.to_toml()).unwrap(), c);
            }
        }
    }

    #[test]
    fn hash_ignores_key_order() {
        let a = "task = \"charge\"\n[train]\niterations = 10\nbatch_size = 4\n[alignment]\nc_mid = 0.5\n";
        let b = "task = \"charge\"\n[alignment]\nc_mid = 0.5\n[train]\nbatch_size = 4\niterations = 10\n";
        let (ca, cb) = (parse_config(a).unwrap(), parse_config(&b).unwrap());
        assert_eq!(ca.hash(), cb.hash());
        assert_ne!(ca.hash(), parse_config("task = \"charge\"").unwrap().hash());
        let moved = parse_config(&format!("out_dir = \"elsewhere\"\nworkers = 4\n{a}")).unwrap();
        assert_eq!(moved.hash(), ca.hash());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(parse_config("[train]\niteratons = 5").is_err());
        assert!(parse_config("task = \"navier\"").is_err());
        assert!(parse_config("[alignment]\npositions = [\"encoder_9\"]").is_err());
        assert!(parse_config("[alignment]\nc_mid = -1.0").is_err());
    }

    #[test]
    fn dit_preset_aligns_middle_block() {
        let c = parse_config("[backbone]\nkind = \"dit\"").unwrap();
        assert_eq!(c.alignment.positions, vec![TapPosition::Block(2)]);
    }

    #[test]
    fn full_presets_carry_long_run_training_details() {
        let d = ExperimentConfig::preset(Task::Darcy, Scale::Full, BackboneKind::Unet);
        assert_eq!((d.train.iterations, d.train.batch_size, d.train.adam.lr), (120_000, 32, 1e-4));
        let t = ExperimentConfig::preset(Task::Topology, Scale::Full, BackboneKind::Unet);
        assert_eq!((t.train.iterations, t.train.batch_size, t.train.adam.lr), (150_000, 32, 5e-5));
        let c = ExperimentConfig::preset(Task::Charge, Scale::Full, BackboneKind::Unet);
        assert_eq!((c.train.iterations, c.train.steps, c.train.adam.lr, c.train.ema_decay), (120_000, 100, 1e-4, 0.99));
        let n = count_parameters(&d.backbone) as f64;
        assert!((n / 9.0e6 - 1.0).abs() < 0.15, "{n}");
    }
}
