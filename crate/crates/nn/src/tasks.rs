//! Adapters from dataset containers to training tensors and evaluation contexts.

use repap_core::dataset::{ChannelKind, DatasetContainer};
use repap_core::datagen::topology::case_from_dataset;
use repap_core::datagen::DarcySourceSpec;
use repap_core::residual::TurbulenceWeights;
use repap_core::{Error, Field, Result, Scalar, Task};

use crate::physics::{Normalizer, TaskContext};
use crate::train::TrainData;

/// Data and conditioning channel indices of a container, in layout order.
pub fn split_channels(ds: &DatasetContainer) -> (Vec<usize>, Vec<usize>) {
    let mut data = Vec::new();
    let mut cond = Vec::new();
    for (i, r) in ds.layout.iter().enumerate() {
        match r.kind {
            ChannelKind::Data => data.push(i),
            ChannelKind::Condition => cond.push(i),
        }
    }
    (data, cond)
}

fn gather(ds: &DatasetContainer, chans: &[usize]) -> Vec<f64> {
    let plane = ds.height * ds.width;
    let per = ds.sample_len();
    let mut out = Vec::with_capacity(ds.n * chans.len() * plane);
    for s in 0..ds.n {
        for &c in chans {
            out.extend(ds.payload[s * per + c * plane..s * per + (c + 1) * plane].iter().map(|&v| v as f64));
        }
    }
    out
}

/// Source spec stored in a Darcy container's provenance, or the default.
pub fn darcy_source(ds: &DatasetContainer) -> DarcySourceSpec {
    ds.provenance
        .params
        .get("params")
        .and_then(|p| p.get("source"))
        .and_then(|s| serde_json::from_value(s.clone()).ok())
        .unwrap_or_default()
}

/// Residual conditioning for every sample of the container, in physical units.
pub fn task_context(ds: &DatasetContainer) -> Result<TaskContext> {
    let task: Task = ds.task.parse()?;
    let grid = ds.grid();
    let plane = grid.len();
    Ok(match task {
        Task::Darcy => {
            let src = darcy_source(ds);
            let f_s = (0..ds.n)
                .map(|i| {
                    let c = ds
                        .aux("source_balance", i)
                        .ok_or_else(|| Error::Format("darcy container lacks source_balance".into()))?[0];
                    Ok(src.field::<f64>(grid, c).values)
                })
                .collect::<Result<_>>()?;
            TaskContext::Darcy { grid, f_s }
        }
        Task::Charge => {
            let ci = ds
                .channel_index("rho")
                .ok_or_else(|| Error::Format("charge container lacks rho".into()))?;
            let rho = (0..ds.n)
                .map(|i| ds.sample::<f64>(i).values[ci * plane..(ci + 1) * plane].to_vec())
                .collect();
            TaskContext::Charge { grid, rho }
        }
        Task::Topology => {
            let cases = (0..ds.n).map(|i| case_from_dataset(ds, i)).collect::<Result<_>>()?;
            let u_ref = (0..ds.n).map(|i| ds.aux("u", i).map(<[f64]>::to_vec)).collect();
            TaskContext::Topology { grid, cases, u_ref }
        }
        Task::Turbulence => TaskContext::Turbulence {
            grid,
            batch: ds.n,
            weights: TurbulenceWeights::default(),
        },
    })
}

/// Model-space tensors plus the normalizers that produced them.
pub struct Prepared<T> {
    pub data: TrainData<T>,
    pub cond_norm: Option<Normalizer>,
}

/// Normalize a container; `norms` reuses statistics fitted elsewhere.
pub fn prepare<T: Scalar>(ds: &DatasetContainer, norms: Option<(&Normalizer, Option<&Normalizer>)>) -> Result<Prepared<T>> {
    if ds.n == 0 {
        return Err(Error::Argument("dataset is empty".into()));
    }
    let plane = ds.height * ds.width;
    let (dch, cch) = split_channels(ds);
    let x = gather(ds, &dch);
    let norm = match norms {
        Some((n, _)) => n.clone(),
        None => Normalizer::fit(&x, dch.len(), plane),
    };
    let x0 = norm.to_model::<f64>(&x, plane).into_iter().map(T::lit).collect();
    let (cond, cond_norm) = if cch.is_empty() {
        (None, None)
    } else {
        let c = gather(ds, &cch);
        let cn = match norms.and_then(|(_, c)| c) {
            Some(n) => n.clone(),
            None => Normalizer::fit(&c, cch.len(), plane),
        };
        let v = cn.to_model::<f64>(&c, plane).into_iter().map(T::lit).collect();
        (Some(v), Some(cn))
    };
    Ok(Prepared {
        data: TrainData {
            n: ds.n,
            x0,
            cond,
            tctx: task_context(ds)?,
            norm,
            observed: None,
        },
        cond_norm,
    })
}

/// Context for residuals of freshly generated samples.
///
/// Darcy sources are rebalanced against the generated permeability; the
/// other tasks reuse the conditioning of `rows`.
pub fn generation_context(reference: &TaskContext, rows: &[usize], phys: &[f64], src: &DarcySourceSpec) -> Result<TaskContext> {
    match reference {
        TaskContext::Darcy { grid, .. } => {
            let plane = grid.len();
            let f_s = (0..rows.len())
                .map(|b| {
                    let k = Field::from_vec(*grid, 1, phys[b * 2 * plane..b * 2 * plane + plane].to_vec())?;
                    Ok(src.field::<f64>(*grid, src.balance_or_default(&k)).values)
                })
                .collect::<Result<_>>()?;
            Ok(TaskContext::Darcy { grid: *grid, f_s })
        }
        other => Ok(other.select(rows)),
    }
}

/// Per-sample residual MAE of physical samples `[n, C, H, W]`.
pub fn residual_maes(tctx: &TaskContext, phys: &[f64]) -> Result<Vec<f64>> {
    let n = tctx.batch();
    let per = phys.len() / n.max(1);
    (0..n).map(|b| tctx.residual_mae(b, &phys[b * per..(b + 1) * per])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use repap_core::datagen::{generate_charge_dataset, generate_darcy_dataset, DarcyParams};

    #[test]
    fn darcy_round_trip_and_reference_residual() {
        let ds = generate_darcy_dataset(3, 1, &DarcyParams { n: 16, ..Default::default() }).unwrap();
        let p = prepare::<f64>(&ds, None).unwrap();
        assert_eq!(p.data.x0.len(), 3 * 2 * 256);
        assert!(p.data.cond.is_none());
        let phys = p.data.norm.to_physical(&p.data.x0, 256);
        let maes = residual_maes(&p.data.tctx, &phys).unwrap();
        assert!(maes.iter().all(|&m| m < 1e-5), "{maes:?}");
        let regen = generation_context(&p.data.tctx, &[0, 1, 2], &phys, &darcy_source(&ds)).unwrap();
        let maes2 = residual_maes(&regen, &phys).unwrap();
        for (a, b) in maes.iter().zip(&maes2) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn charge_splits_condition_from_data() {
        let ds = generate_charge_dataset(2, 16, 3).unwrap();
        let p = prepare::<f32>(&ds, None).unwrap();
        assert_eq!(p.data.x0.len(), 2 * 256);
        assert_eq!(p.data.cond.as_ref().unwrap().len(), 2 * 256);
        assert!(p.cond_norm.is_some());
    }
}
