//! Training loop, EMA tracking and ancestral sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use repap_core::diffusion::{forward_diffuse_slice, reverse_step_slice};
use repap_core::{make_cosine_schedule, EmaState, Error, NoiseSchedule, Result, Scalar};
use serde::{Deserialize, Serialize};

use crate::alignment::{discard_heads, total_loss, Batch, LossBreakdown, Model};
use crate::backbone::{forward, ForwardOpts};
use crate::graph::Graph;
use crate::params::{Adam, AdamConfig, Ctx};
use crate::physics::{Normalizer, TaskContext};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub ema_decay: f64,
    pub steps: usize,
    pub log_every: usize,
    pub eval_every: usize,
    pub eval_samples: usize,
    /// Samples drawn for the evaluation at the end of the budget.
    pub final_eval_samples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 8,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            ema_decay: 0.99,
            steps: 100,
            log_every: 50,
            eval_every: 200,
            eval_samples: 8,
            final_eval_samples: 32,
            seed: 0,
        }
    }
}

/// Training set in model units.
#[derive(Clone, Debug)]
pub struct TrainData<T> {
    pub n: usize,
    /// `[N, C_data, H, W]`.
    pub x0: Vec<T>,
    /// `[N, C_cond, H, W]`.
    pub cond: Option<Vec<T>>,
    pub tctx: TaskContext,
    pub norm: Normalizer,
    /// Observed-entry weights `[N, C_data, H, W]` in reconstruction mode.
    pub observed: Option<Vec<T>>,
}

impl<T: Scalar> TrainData<T> {
    fn rows(v: &[T], idx: &[usize], per: usize) -> Vec<T> {
        idx.iter().flat_map(|&i| v[i * per..(i + 1) * per].iter().copied()).collect()
    }

    pub fn sample_len(&self) -> usize {
        self.x0.len() / self.n
    }

    pub fn cond_len(&self) -> usize {
        self.cond.as_ref().map_or(0, |c| c.len() / self.n)
    }

    pub fn cond_rows(&self, idx: &[usize]) -> Option<Vec<T>> {
        self.cond.as_ref().map(|c| Self::rows(c, idx, self.cond_len()))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: u64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

pub struct Trainer<T> {
    pub model: Model<T>,
    pub sched: NoiseSchedule,
    pub cfg: TrainConfig,
    pub adam: Adam<T>,
    pub ema: EmaState<T>,
    pub iteration: u64,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, cfg: TrainConfig) -> Result<Self> {
        if cfg.batch_size == 0 || cfg.iterations == 0 {
            return Err(Error::Argument("batch size and iteration budget must be positive".into()));
        }
        let sched = make_cosine_schedule(cfg.steps)?;
        let adam = Adam::new(cfg.adam.clone(), &model.params);
        let ema = EmaState::new(T::lit(cfg.ema_decay), model.params.values.clone())?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
        Ok(Self {
            model,
            sched,
            cfg,
            adam,
            ema,
            iteration: 0,
            rng,
        })
    }

    /// Continue from saved parameters, EMA shadow and iteration count.
    ///
    /// Optimizer moments restart from zero; the batch stream is reseeded from
    /// the iteration count.
    pub fn resume(model: Model<T>, cfg: TrainConfig, ema_shadow: Vec<Vec<T>>, iteration: u64) -> Result<Self> {
        let mut tr = Self::new(model, cfg)?;
        if ema_shadow.len() != tr.model.params.values.len()
            || ema_shadow.iter().zip(&tr.model.params.values).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::Shape("EMA shadow does not match the parameters".into()));
        }
        tr.ema.shadow = ema_shadow;
        tr.iteration = iteration;
        tr.rng = ChaCha8Rng::seed_from_u64(tr.cfg.seed ^ 0x7261_696e ^ iteration.rotate_left(32));
        Ok(tr)
    }

    /// Parameters replaced by their EMA shadow.
    pub fn ema_model(&self) -> Model<T> {
        let mut m = self.model.clone();
        m.params.values = self.ema.shadow.clone();
        m
    }

    pub fn step(&mut self, data: &TrainData<T>) -> Result<StepRecord> {
        let b = self.cfg.batch_size;
        let idx: Vec<usize> = (0..b).map(|_| self.rng.random_range(0..data.n)).collect();
        let ts: Vec<usize> = (0..b).map(|_| self.rng.random_range(1..=self.sched.steps)).collect();
        let per = data.sample_len();
        let x0 = TrainData::rows(&data.x0, &idx, per);
        let eps: Vec<T> = (0..x0.len())
            .map(|_| T::lit(StandardNormal.sample(&mut self.rng)))
            .collect();
        let mut x_t = Vec::with_capacity(x0.len());
        for (k, &t) in ts.iter().enumerate() {
            x_t.extend(forward_diffuse_slice(&x0[k * per..(k + 1) * per], &eps[k * per..(k + 1) * per], t, &self.sched)?);
        }
        let cond = data.cond_rows(&idx);
        let observed = data.observed.as_ref().map(|o| TrainData::rows(o, &idx, per));
        let tctx = data.tctx.select(&idx);
        let opts = ForwardOpts {
            dropout_seed: (self.model.backbone.dropout > 0.0).then(|| self.rng.random()),
            overrides: vec![],
        };
        let mut g = Graph::new();
        let (root, parts) = {
            let mut ctx = Ctx::new(&mut g, &self.model.params);
            let batch = Batch {
                x0: &x0,
                x_t: &x_t,
                cond: cond.as_deref(),
                ts: &ts,
                tctx: &tctx,
                observed: observed.as_deref(),
            };
            let lg = total_loss(&mut ctx, &self.model, &batch, &self.sched, &data.norm, &opts)?;
            (lg.root, lg.parts)
        };
        if !parts.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at iteration {}: {:?} (timesteps {:?})",
                self.iteration, parts, ts
            )));
        }
        let grads = g.backward(root).params();
        let grad_norm = self.adam.update(&mut self.model.params, &grads);
        self.ema.update(self.model.params.values.iter().map(|v| v.as_slice()))?;
        self.iteration += 1;
        Ok(StepRecord {
            iteration: self.iteration,
            loss: parts,
            grad_norm,
        })
    }
}

/// Observed entries substituted during sampling.
pub struct Clamp<'a, T> {
    /// `[n, C_data, H, W]` weights, 1 where observed.
    pub mask: &'a [T],
    /// `[n, C_data, H, W]` observed values in model units.
    pub values: &'a [T],
}

fn apply_clamp<T: Scalar>(x: &mut [T], clamp: &Clamp<T>) {
    for ((v, &m), &o) in x.iter_mut().zip(clamp.mask).zip(clamp.values) {
        if m != T::zero() {
            *v = o;
        }
    }
}

/// Ancestral sampling with heads discarded. Returns `[n, C_data, H, W]` in model units.
///
/// With `clamp`, observed entries of every x̂0 prediction and of the final
/// sample are overwritten with the observations.
pub fn sample<T: Scalar>(
    model: &Model<T>,
    sched: &NoiseSchedule,
    n: usize,
    cond: Option<&[T]>,
    clamp: Option<&Clamp<T>>,
    seed: u64,
) -> Result<Vec<T>> {
    let cfg = &model.backbone;
    let per = model.data_channels * cfg.height * cfg.width;
    let cond_c = cfg.in_channels - model.data_channels;
    if cond_c > 0 && cond.is_none() {
        return Err(Error::Argument("this task needs conditioning fields for sampling".into()));
    }
    let inference = discard_heads(model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<T> = (0..n * per).map(|_| T::lit(StandardNormal.sample(&mut rng))).collect();
    for t in (1..=sched.steps).rev() {
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &inference.params);
        let xi = ctx.g.input(x.clone(), &[n, model.data_channels, cfg.height, cfg.width]);
        let ci = cond.map(|c| ctx.g.input(c.to_vec(), &[n, cond_c, cfg.height, cfg.width]));
        let out = forward(&mut ctx, cfg, xi, &vec![t; n], ci, &ForwardOpts::default())?;
        let mut x0_hat = g.value(out.x0_hat).to_vec();
        if let Some(c) = clamp {
            apply_clamp(&mut x0_hat, c);
        }
        let noise: Vec<T> = (0..n * per).map(|_| T::lit(StandardNormal.sample(&mut rng))).collect();
        x = reverse_step_slice(&x, &x0_hat, t, sched, &noise)?;
    }
    if let Some(c) = clamp {
        apply_clamp(&mut x, c);
    }
    Ok(x)
}
