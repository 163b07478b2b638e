//! Baseline comparison: plain DDPM, output-only physics and mid-layer
//! alignment trained on identical data, seeds and evaluation noise.

use std::path::Path;

use log::info;
use repap_core::{make_cosine_schedule, Result, Scalar};
use repap_nn::backbone::TapPosition;
use repap_nn::profile::{layer_residual_profile, make_eval_batch, ProfileEntry};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::run::{train_run, Experiment, RecordSink, RunOptions, RunOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arm", rename_all = "snake_case")]
pub enum Arm {
    /// No physics terms.
    Ddpm,
    /// Physics on the final prediction only.
    OutputPhysics,
    /// Output physics plus mid-layer alignment with the given weight.
    Aligned { c_mid: f64 },
}

impl Arm {
    pub fn label(&self) -> String {
        match self {
            Arm::Ddpm => "ddpm".into(),
            Arm::OutputPhysics => "output_physics".into(),
            Arm::Aligned { c_mid } => format!("aligned_c{c_mid}"),
        }
    }

    /// `base` with the loss weights and heads of this arm.
    pub fn config(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        match *self {
            Arm::Ddpm => {
                c.alignment.positions.clear();
                c.alignment.c_mid = 0.0;
                c.alignment.c_out = 0.0;
            }
            Arm::OutputPhysics => {
                c.alignment.positions.clear();
                c.alignment.c_mid = 0.0;
            }
            Arm::Aligned { c_mid } => c.alignment.c_mid = c_mid,
        }
        c
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StudySpec {
    pub base: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub c_mid_grid: Vec<f64>,
    /// The mid-layer weight is selected on this seed and reused for the others.
    pub tune_seed: u64,
    pub probe_fit_samples: usize,
    pub profile_eval_samples: usize,
}

impl StudySpec {
    pub fn new(base: ExperimentConfig) -> Self {
        Self {
            seeds: base.seeds.clone(),
            tune_seed: base.seeds[0],
            base,
            c_mid_grid: vec![0.01, 0.1],
            probe_fit_samples: 1024,
            profile_eval_samples: 64,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub seed: u64,
    pub final_r_mae: f64,
    pub curve: Vec<(u64, f64)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub aligned: f64,
    pub output_physics: f64,
    pub ddpm: f64,
}

impl SeedComparison {
    pub fn beats_output(&self) -> bool {
        self.aligned < self.output_physics
    }

    pub fn beats_ddpm(&self) -> bool {
        self.aligned < self.ddpm
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProfileComparison {
    pub seed: u64,
    pub position: TapPosition,
    /// Raw residual MAE decoded by the trained head.
    pub aligned_head: f64,
    /// Raw residual MAE decoded by a linear probe on the output-physics model.
    pub baseline_probe: f64,
    pub aligned_profile: Vec<ProfileEntry>,
    pub baseline_profile: Vec<ProfileEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: u64,
    pub aligned: f64,
    pub output_physics: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StudyReport {
    pub tuned_c_mid: f64,
    pub arms: Vec<ArmResult>,
    pub seeds: Vec<SeedComparison>,
    pub profiles: Vec<ProfileComparison>,
    /// Seed-averaged evaluation curves of the tuned aligned arm and the output-physics arm.
    pub curve: Vec<CurvePoint>,
}

impl StudyReport {
    pub fn wins_vs_output(&self) -> usize {
        self.seeds.iter().filter(|s| s.beats_output()).count()
    }

    pub fn wins_vs_ddpm(&self) -> usize {
        self.seeds.iter().filter(|s| s.beats_ddpm()).count()
    }

    /// Seeds where the aligned arm beats both baselines.
    pub fn wins_both(&self) -> usize {
        self.seeds.iter().filter(|s| s.beats_output() && s.beats_ddpm()).count()
    }

    /// Fraction of curve points past `skip` (a fraction of the budget) where
    /// the aligned arm is strictly lower.
    pub fn curve_below_fraction(&self, iterations: usize, skip: f64) -> f64 {
        let late: Vec<&CurvePoint> = self.curve.iter().filter(|p| p.iteration as f64 > skip * iterations as f64).collect();
        if late.is_empty() {
            return 0.0;
        }
        late.iter().filter(|p| p.aligned < p.output_physics).count() as f64 / late.len() as f64
    }

    pub fn profiles_lower(&self) -> bool {
        !self.profiles.is_empty() && self.profiles.iter().all(|p| p.aligned_head < p.baseline_probe)
    }
}

fn run_arm<T: Scalar>(exp: &Experiment<T>, spec: &StudySpec, arm: Arm, seed: u64, sink: &mut RecordSink, out: Option<&Path>) -> Result<RunOutcome<T>> {
    let label = arm.label();
    let dir = out.map(|o| o.join(format!("{label}-seed{seed}")));
    let opts = RunOptions {
        label: &label,
        dir: dir.as_deref(),
        resume: None,
    };
    train_run(exp, &arm.config(&spec.base), seed, sink, &opts)
}

fn mean_curve(runs: &[&RunOutcome<impl Scalar>]) -> Vec<(u64, f64)> {
    let first = &runs[0].curve;
    (0..first.len())
        .map(|i| (first[i].0, runs.iter().map(|r| r.curve[i].1).sum::<f64>() / runs.len() as f64))
        .collect()
}

pub fn run_study<T: Scalar>(spec: &StudySpec, sink: &mut RecordSink, out: Option<&Path>) -> Result<StudyReport> {
    let exp = Experiment::<T>::new(&spec.base)?;
    let mut arms = Vec::new();
    let push = |arms: &mut Vec<ArmResult>, arm: Arm, o: &RunOutcome<T>| {
        arms.push(ArmResult {
            arm,
            seed: o.seed,
            final_r_mae: o.final_metrics["r_mae"],
            curve: o.curve.clone(),
        })
    };
    let mut order = vec![spec.tune_seed];
    order.extend(spec.seeds.iter().copied().filter(|&s| s != spec.tune_seed));
    let mut tuned_c_mid = spec.c_mid_grid[0];
    let mut per_seed = Vec::new();
    for (k, &seed) in order.iter().enumerate() {
        let ddpm = run_arm(&exp, spec, Arm::Ddpm, seed, sink, out)?;
        push(&mut arms, Arm::Ddpm, &ddpm);
        let base = run_arm(&exp, spec, Arm::OutputPhysics, seed, sink, out)?;
        push(&mut arms, Arm::OutputPhysics, &base);
        let aligned = if k == 0 {
            let mut best: Option<(f64, RunOutcome<T>)> = None;
            for &c in &spec.c_mid_grid {
                let arm = Arm::Aligned { c_mid: c };
                let o = run_arm(&exp, spec, arm, seed, sink, out)?;
                push(&mut arms, arm, &o);
                if best.as_ref().is_none_or(|(_, b)| o.final_metrics["r_mae"] < b.final_metrics["r_mae"]) {
                    best = Some((c, o));
                }
            }
            let (c, o) = best.expect("non-empty grid");
            tuned_c_mid = c;
            info!("selected c_mid {c} on seed {seed}");
            o
        } else {
            let arm = Arm::Aligned { c_mid: tuned_c_mid };
            let o = run_arm(&exp, spec, arm, seed, sink, out)?;
            push(&mut arms, arm, &o);
            o
        };
        per_seed.push((seed, ddpm, base, aligned));
    }

    let sched = make_cosine_schedule(spec.base.train.steps)?;
    let mut seeds = Vec::new();
    let mut profiles = Vec::new();
    for (seed, ddpm, base, aligned) in &per_seed {
        seeds.push(SeedComparison {
            seed: *seed,
            aligned: aligned.final_metrics["r_mae"],
            output_physics: base.final_metrics["r_mae"],
            ddpm: ddpm.final_metrics["r_mae"],
        });
        let fit = make_eval_batch(&exp.train.data, &sched, spec.probe_fit_samples, 0x0f17 ^ seed)?;
        let ev = make_eval_batch(&exp.test.data, &sched, spec.profile_eval_samples, 0xe7a1 ^ seed)?;
        let am = aligned.model.cast::<f64>();
        let bm = base.model.cast::<f64>();
        let ap = layer_residual_profile(&am, &fit, &ev, &exp.train.data.norm, true)?;
        let bp = layer_residual_profile(&bm, &fit, &ev, &exp.train.data.norm, false)?;
        for &pos in spec.base.alignment.positions.iter().filter(|p| **p != TapPosition::Output) {
            let find = |v: &[ProfileEntry]| v.iter().find(|e| e.position == pos).map_or(f64::NAN, |e| e.raw);
            profiles.push(ProfileComparison {
                seed: *seed,
                position: pos,
                aligned_head: find(&ap),
                baseline_probe: find(&bp),
                aligned_profile: ap.clone(),
                baseline_profile: bp.clone(),
            });
        }
    }
    let a: Vec<&RunOutcome<T>> = per_seed.iter().map(|p| &p.3).collect();
    let b: Vec<&RunOutcome<T>> = per_seed.iter().map(|p| &p.2).collect();
    let curve = mean_curve(&a)
        .into_iter()
        .zip(mean_curve(&b))
        .map(|((it, x), (_, y))| CurvePoint {
            iteration: it,
            aligned: x,
            output_physics: y,
        })
        .collect();
    Ok(StudyReport {
        tuned_c_mid,
        arms,
        seeds,
        profiles,
        curve,
    })
}
