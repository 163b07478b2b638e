//! Dataset generation, loading and residual self-checks.

use repap_core::dataset::{read_dataset, ChannelRole, DatasetContainer, Provenance};
use repap_core::datagen::{
    channel_grid, generate_charge_dataset, generate_darcy_dataset, generate_topology_fixtures, sample_rng, turbulence_fixture, DarcyParams,
};
use repap_core::{Error, Result, Task};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

/// `n` samples of `task` at `resolution` (ignored for turbulence).
pub fn generate(task: Task, n: usize, seed: u64, resolution: usize) -> Result<DatasetContainer> {
    match task {
        Task::Darcy => generate_darcy_dataset(
            n,
            seed,
            &DarcyParams {
                n: resolution,
                ..Default::default()
            },
        ),
        Task::Charge => generate_charge_dataset(n, resolution, seed),
        Task::Topology => generate_topology_fixtures(resolution, resolution, n, seed),
        Task::Turbulence => {
            if n == 0 {
                return Err(Error::Argument("dataset needs at least one sample".into()));
            }
            let grid = channel_grid();
            let prov = Provenance {
                generator: "turbulence-modes".into(),
                seed,
                params: Default::default(),
            };
            let mut ds = DatasetContainer::new("turbulence", grid, vec![ChannelRole::data("u")], prov);
            for idx in 0..n {
                let s: u64 = sample_rng(seed, idx as u64).random();
                ds.push_sample(&turbulence_fixture::<f64>(grid, s)?.field)?;
            }
            Ok(ds)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfCheck {
    pub samples: usize,
    pub max_residual_mae: f64,
    pub mean_residual_mae: f64,
}

/// Residual MAE of the stored samples, evaluated in double precision.
pub fn self_check(ds: &DatasetContainer) -> Result<SelfCheck> {
    let tctx = repap_nn::tasks::task_context(ds)?;
    let (dch, _) = repap_nn::tasks::split_channels(ds);
    let plane = ds.height * ds.width;
    let per = ds.sample_len();
    let mut phys = Vec::with_capacity(ds.n * dch.len() * plane);
    for s in 0..ds.n {
        for &c in &dch {
            phys.extend(ds.payload[s * per + c * plane..s * per + (c + 1) * plane].iter().map(|&v| v as f64));
        }
    }
    let maes = repap_nn::tasks::residual_maes(&tctx, &phys)?;
    Ok(SelfCheck {
        samples: ds.n,
        max_residual_mae: maes.iter().copied().fold(0.0, f64::max),
        mean_residual_mae: maes.iter().sum::<f64>() / maes.len() as f64,
    })
}

/// Training and test containers: read from the configured paths or generated.
pub fn load_splits(cfg: &ExperimentConfig) -> Result<(DatasetContainer, DatasetContainer)> {
    let d = &cfg.data;
    let get = |path: &Option<std::path::PathBuf>, n: usize, seed: u64| -> Result<DatasetContainer> {
        let ds = match path {
            Some(p) => read_dataset(p)?,
            None => generate(cfg.task, n, seed, d.resolution)?,
        };
        if ds.task != cfg.task.as_str() {
            return Err(Error::Argument(format!("dataset holds {} samples, config task is {}", ds.task, cfg.task)));
        }
        if ds.height != cfg.backbone.height || ds.width != cfg.backbone.width {
            return Err(Error::Shape(format!(
                "dataset grid {}x{} does not match backbone {}x{}",
                ds.height, ds.width, cfg.backbone.height, cfg.backbone.width
            )));
        }
        Ok(ds)
    };
    Ok((get(&d.train_path, d.n_train, d.train_seed)?, get(&d.test_path, d.n_test, d.test_seed)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_task_generates_self_consistent_samples() {
        for (task, res, tol) in [(Task::Darcy, 16, 1e-5), (Task::Charge, 16, 1e-6), (Task::Turbulence, 0, f64::INFINITY)] {
            let ds = generate(task, 2, 3, res).unwrap();
            assert_eq!(ds.n, 2);
            let c = self_check(&ds).unwrap();
            assert!(c.max_residual_mae < tol, "{task}: {c:?}");
        }
    }

    #[test]
    fn turbulence_samples_differ_and_repeat_per_seed() {
        let a = generate(Task::Turbulence, 2, 5, 0).unwrap();
        let b = generate(Task::Turbulence, 2, 5, 0).unwrap();
        assert_eq!(a, b);
        let plane = a.height * a.width;
        assert_ne!(a.payload[..plane], a.payload[plane..]);
    }
}
