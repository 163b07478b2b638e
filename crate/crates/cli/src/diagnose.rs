//! Side-by-side diagnostics of two checkpoints with matching architecture.

use std::path::{Path, PathBuf};

use repap_core::diffusion::posterior_sigma2;
use repap_core::metrics::linear_cka;
use repap_core::{make_cosine_schedule, Error, Result};
use repap_nn::alignment::Model;
use repap_nn::attenuation::{model_attenuation_check, AttenuationRow};
use repap_nn::backbone::TapPosition;
use repap_nn::profile::{collect_features, compare_representations, layer_residual_profile, make_eval_batch, LayerDiagnostics, ProfileEntry};
use serde::{Deserialize, Serialize};

use crate::config::default_position;
use crate::plot::{heatmap, line_chart, Series};
use crate::run::{load_run_checkpoint, read_records, CheckpointMeta, Experiment};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiagnoseOptions {
    pub fit_samples: usize,
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for DiagnoseOptions {
    fn default() -> Self {
        Self {
            fit_samples: 1024,
            eval_samples: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CkaMatrix {
    pub positions: Vec<TapPosition>,
    /// Row `i`, column `j`: layer `i` of the first model against layer `j` of the second.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub checkpoint_a: String,
    pub checkpoint_b: String,
    pub profile_a: Vec<ProfileEntry>,
    pub profile_b: Vec<ProfileEntry>,
    pub layers: Vec<LayerDiagnostics>,
    pub cka: CkaMatrix,
    pub attenuation: Vec<AttenuationRow>,
    pub plots: Vec<String>,
}

pub const PLOT_NAMES: [&str; 4] = ["profile.svg", "effective_rank.svg", "cka.svg", "convergence.svg"];

fn headed_positions(m: &Model<f64>) -> Vec<TapPosition> {
    let p: Vec<TapPosition> = m.align.positions.iter().copied().filter(|p| *p != TapPosition::Output).collect();
    if p.is_empty() {
        vec![default_position(&m.backbone)]
    } else {
        p
    }
}

fn eval_curve(ckpt: &Path, meta: &CheckpointMeta) -> Vec<(f64, f64)> {
    let dirs: Vec<PathBuf> = ckpt.ancestors().skip(1).take(2).map(Path::to_path_buf).collect();
    for d in dirs {
        let f = d.join("records.jsonl");
        if let Ok(recs) = read_records(&f) {
            let pts: Vec<(f64, f64)> = recs
                .iter()
                .filter(|r| r.kind == "eval" && r.config_hash == meta.config_hash && r.seed == meta.seed)
                .filter_map(|r| r.metrics.get("r_mae").map(|&v| (r.iteration as f64, v)))
                .collect();
            if !pts.is_empty() {
                return pts;
            }
        }
    }
    vec![]
}

pub fn diagnose(ckpt_a: &Path, ckpt_b: &Path, out: &Path, opts: &DiagnoseOptions) -> Result<DiagnoseReport> {
    let (a, meta_a, _) = load_run_checkpoint::<f64>(ckpt_a)?;
    let (b, meta_b, _) = load_run_checkpoint::<f64>(ckpt_b)?;
    if a.backbone != b.backbone || meta_a.config.task != meta_b.config.task {
        return Err(Error::Argument("checkpoints differ in task or architecture".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let exp = Experiment::<f64>::new(&meta_a.config)?;
    let sched = make_cosine_schedule(meta_a.config.train.steps)?;
    let fit = make_eval_batch(&exp.train.data, &sched, opts.fit_samples, opts.seed ^ 0x0f17)?;
    let ev = make_eval_batch(&exp.test.data, &sched, opts.eval_samples, opts.seed ^ 0xe7a1)?;
    let profile_a = layer_residual_profile(&a, &fit, &ev, &meta_a.norm, true)?;
    let profile_b = layer_residual_profile(&b, &fit, &ev, &meta_b.norm, true)?;
    let layers = compare_representations(&a, &b, &ev)?;

    let positions = a.backbone.tap_positions();
    let fa = collect_features(&a, &ev, &positions)?;
    let fb = collect_features(&b, &ev, &positions)?;
    let n = ev.len();
    let mut values = Vec::with_capacity(positions.len() * positions.len());
    for x in &fa {
        for y in &fb {
            values.push(linear_cka(&x.0, &y.0, n)?);
        }
    }

    let dc = a.data_channels;
    let per = dc * a.backbone.height * a.backbone.width;
    let cper = (a.backbone.in_channels - dc) * a.backbone.height * a.backbone.width;
    let t = ev.ts[0];
    let tctx = ev.tctx.select(&[0]);
    let mut attenuation = Vec::new();
    for pos in headed_positions(&a) {
        attenuation.push(model_attenuation_check(
            &a,
            pos,
            &ev.x_t[..per],
            ev.cond.as_ref().map(|c| &c[..cper]),
            t,
            posterior_sigma2(t, &sched)?,
            &tctx,
            &meta_a.norm,
            opts.seed,
        )?);
    }

    let label = |p: &Path| p.display().to_string();
    let names: Vec<String> = positions.iter().map(ToString::to_string).collect();
    let idx = |v: &[ProfileEntry]| v.iter().enumerate().map(|(i, e)| (i as f64, e.normalized)).collect::<Vec<_>>();
    let plot = |name: &str| out.join(name);
    line_chart(
        &plot(PLOT_NAMES[0]),
        &format!("normalized residual by layer ({})", names.join(", ")),
        "layer index",
        "normalized residual",
        &[
            Series { name: "a".into(), points: idx(&profile_a) },
            Series { name: "b".into(), points: idx(&profile_b) },
        ],
        true,
    )?;
    line_chart(
        &plot(PLOT_NAMES[1]),
        "effective rank by layer",
        "layer index",
        "effective rank",
        &[
            Series {
                name: "a".into(),
                points: layers.iter().enumerate().map(|(i, l)| (i as f64, l.effective_rank_a)).collect(),
            },
            Series {
                name: "b".into(),
                points: layers.iter().enumerate().map(|(i, l)| (i as f64, l.effective_rank_b)).collect(),
            },
        ],
        false,
    )?;
    heatmap(&plot(PLOT_NAMES[2]), "linear CKA (rows: a, columns: b)", &names, &names, &values)?;
    let (ca, cb) = (eval_curve(ckpt_a, &meta_a), eval_curve(ckpt_b, &meta_b));
    let conv: Vec<Series> = [("a", ca), ("b", cb)]
        .into_iter()
        .filter(|(_, p)| !p.is_empty())
        .map(|(n, p)| Series { name: n.into(), points: p })
        .collect();
    let mut plots: Vec<String> = PLOT_NAMES[..3].iter().map(|s| s.to_string()).collect();
    if !conv.is_empty() {
        line_chart(&plot(PLOT_NAMES[3]), "test physics residual", "iteration", "r_mae", &conv, true)?;
        plots.push(PLOT_NAMES[3].into());
    }
    let report = DiagnoseReport {
        checkpoint_a: label(ckpt_a),
        checkpoint_b: label(ckpt_b),
        profile_a,
        profile_b,
        layers,
        cka: CkaMatrix { positions, values },
        attenuation,
        plots,
    };
    let json = serde_json::to_vec_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(out.join("report.json"), json).map_err(|e| Error::io(out.join("report.json"), e))?;
    std::fs::write(out.join("report.md"), report.to_markdown()).map_err(|e| Error::io(out.join("report.md"), e))?;
    Ok(report)
}

impl DiagnoseReport {
    pub fn to_markdown(&self) -> String {
        let mut s = format!("# Diagnostics\n\na: `{}`\n\nb: `{}`\n\n", self.checkpoint_a, self.checkpoint_b);
        s += "## Layers\n\n| position | residual a | decoder a | residual b | decoder b | eff. rank a | eff. rank b | CKA |\n|---|---|---|---|---|---|---|---|\n";
        for ((pa, pb), l) in self.profile_a.iter().zip(&self.profile_b).zip(&self.layers) {
            s += &format!(
                "| {} | {:.3e} | {} | {:.3e} | {} | {:.2} | {:.2} | {:.3} |\n",
                l.position, pa.raw, pa.decoder, pb.raw, pb.decoder, l.effective_rank_a, l.effective_rank_b, l.cka
            );
        }
        s += "\n## Attenuation (model a)\n\n| position | grad out | bound out | grad mid | bound mid | holds |\n|---|---|---|---|---|---|\n";
        for r in &self.attenuation {
            s += &format!(
                "| {} | {:.3e} | {:.3e} | {:.3e} | {:.3e} | {} |\n",
                r.position,
                r.lhs_out,
                r.bound_out,
                r.lhs_mid,
                r.bound_mid,
                r.lhs_out <= r.bound_out * (1.0 + r.slack) && (r.lhs_mid.is_nan() || r.lhs_mid <= r.bound_mid * (1.0 + r.slack))
            );
        }
        s += "\n## Plots\n\n";
        for p in &self.plots {
            s += &format!("- {p}\n");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;
    use crate::run::{train_run, RecordSink, RunOptions};

    const TINY: &str = "[data]\nresolution = 8\nn_train = 4\nn_test = 2\n\
        [backbone]\nheight = 8\nwidth = 8\nbase_channels = 4\n\
        [alignment]\nhead_hidden = 4\n\
        [train]\niterations = 2\nbatch_size = 2\nsteps = 4\neval_every = 1\neval_samples = 2\nfinal_eval_samples = 2\n";

    fn checkpoint(dir: &Path, text: &str) -> PathBuf {
        let cfg = parse_config(text).unwrap();
        let exp = Experiment::<f32>::new(&cfg).unwrap();
        let mut sink = RecordSink::append(&dir.join("records.jsonl")).unwrap();
        let run_dir = dir.join("seed0");
        let opts = RunOptions {
            label: "tiny",
            dir: Some(&run_dir),
            resume: None,
        };
        train_run(&exp, &cfg, 0, &mut sink, &opts).unwrap().checkpoint.unwrap()
    }

    #[test]
    fn self_comparison_report() {
        let dir = tempfile::tempdir().unwrap();
        let ck = checkpoint(dir.path(), TINY);
        let out = dir.path().join("diag");
        let opts = DiagnoseOptions {
            fit_samples: 8,
            eval_samples: 4,
            seed: 1,
        };
        let r = diagnose(&ck, &ck, &out, &opts).unwrap();
        let k = r.cka.positions.len();
        for i in 0..k {
            assert!((r.cka.values[i * k + i] - 1.0).abs() < 1e-9);
        }
        assert!(r.layers.iter().all(|l| (l.cka - 1.0).abs() < 1e-9));
        assert_eq!(r.attenuation.len(), 1);
        assert_eq!(r.attenuation[0].position, "bottleneck");
        assert_eq!(r.plots, PLOT_NAMES.to_vec());
        for p in PLOT_NAMES {
            assert!(out.join(p).exists(), "{p}");
        }
        assert!(out.join("report.json").exists() && out.join("report.md").exists());
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = checkpoint(dir.path(), TINY);
        let d2 = dir.path().join("other");
        std::fs::create_dir_all(&d2).unwrap();
        let b = checkpoint(&d2, &TINY.replace("base_channels = 4", "base_channels = 8"));
        assert!(diagnose(&a, &b, &dir.path().join("d"), &DiagnoseOptions::default()).is_err());
    }
}
