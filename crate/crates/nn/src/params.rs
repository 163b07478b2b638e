//! Named parameter storage, initialisation, Adam and checkpoints.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use repap_core::{Error, Result, Scalar};
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};

pub const HEADS_NS: &str = "heads.";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Accumulates parameter specs under a dotted prefix.
#[derive(Default)]
pub struct SpecBuilder {
    pub specs: Vec<ParamSpec>,
}

impl SpecBuilder {
    pub fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.specs.push(ParamSpec { name, shape, init });
    }

    pub fn conv(&mut self, name: &str, ci: usize, co: usize, k: usize) {
        let fan = ci * k * k;
        self.push(format!("{name}.w"), vec![co, ci, k, k], Init::FanIn(fan));
        self.push(format!("{name}.b"), vec![co], Init::FanIn(fan));
    }

    pub fn linear(&mut self, name: &str, din: usize, dout: usize) {
        self.push(format!("{name}.w"), vec![dout, din], Init::FanIn(din));
        self.push(format!("{name}.b"), vec![dout], Init::FanIn(din));
    }

    pub fn norm(&mut self, name: &str, c: usize) {
        self.push(format!("{name}.g"), vec![c], Init::Ones);
        self.push(format!("{name}.b"), vec![c], Init::Zeros);
    }

    pub fn count(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    pub specs: Vec<ParamSpec>,
    pub values: Vec<Vec<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn from_specs(specs: Vec<ParamSpec>, rng: &mut ChaCha8Rng) -> Self {
        let values = specs
            .iter()
            .map(|s| match s.init {
                Init::Zeros => vec![T::zero(); s.numel()],
                Init::Ones => vec![T::one(); s.numel()],
                Init::FanIn(f) => {
                    let b = 1.0 / (f.max(1) as f64).sqrt();
                    (0..s.numel()).map(|_| T::lit(rng.random_range(-b..b))).collect()
                }
            })
            .collect();
        Self::from_parts(specs, values)
    }

    pub fn from_parts(specs: Vec<ParamSpec>, values: Vec<Vec<T>>) -> Self {
        let index = specs.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
        Self { specs, values, index }
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.id(name).map(|i| self.values[i].as_slice())
    }

    pub fn get_spec(&self, name: &str) -> Option<&ParamSpec> {
        self.id(name).map(|i| &self.specs[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<T>> {
        let i = self.id(name)?;
        Some(&mut self.values[i])
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.specs
            .iter()
            .zip(&self.values)
            .filter(|(s, _)| s.name.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Adds parameters that are not yet present.
    pub fn extend(&mut self, other: ParamStore<T>) {
        for (s, v) in other.specs.into_iter().zip(other.values) {
            if self.index.contains_key(&s.name) {
                continue;
            }
            self.index.insert(s.name.clone(), self.specs.len());
            self.specs.push(s);
            self.values.push(v);
        }
    }

    /// Copy without entries whose name starts with `prefix`.
    pub fn without_prefix(&self, prefix: &str) -> Self {
        let (specs, values): (Vec<_>, Vec<_>) = self
            .specs
            .iter()
            .zip(&self.values)
            .filter(|(s, _)| !s.name.starts_with(prefix))
            .map(|(s, v)| (s.clone(), v.clone()))
            .unzip();
        Self::from_parts(specs, values)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore::from_parts(
            self.specs.clone(),
            self.values
                .iter()
                .map(|v| v.iter().map(|x| U::lit(x.to_f64_lossy())).collect())
                .collect(),
        )
    }
}

/// Forward-pass context: graph plus parameter lookup with per-graph caching.
pub struct Ctx<'a, T: Scalar> {
    pub g: &'a mut Graph<T>,
    pub store: &'a ParamStore<T>,
    cache: HashMap<usize, Var>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(g: &'a mut Graph<T>, store: &'a ParamStore<T>) -> Self {
        Self {
            g,
            store,
            cache: HashMap::new(),
        }
    }

    pub fn p(&mut self, name: &str) -> Var {
        let id = self
            .store
            .id(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from store"));
        if let Some(&v) = self.cache.get(&id) {
            return v;
        }
        let v = self.g.param(id, &self.store.values[id], &self.store.specs[id].shape);
        self.cache.insert(id, v);
        v
    }

    pub fn used(&self) -> usize {
        self.cache.len()
    }

    pub fn conv(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Var {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        self.g.conv2d(x, w, Some(b), stride, pad)
    }

    pub fn linear(&mut self, name: &str, x: Var) -> Var {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        self.g.linear(x, w, Some(b))
    }

    pub fn group_norm(&mut self, name: &str, x: Var, groups: usize) -> Var {
        let gm = self.p(&format!("{name}.g"));
        let bt = self.p(&format!("{name}.b"));
        self.g.group_norm(x, gm, bt, groups)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
        }
    }
}

pub struct Adam<T> {
    pub cfg: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>) -> Self {
        let z: Vec<Vec<T>> = store.values.iter().map(|v| vec![T::zero(); v.len()]).collect();
        Self {
            cfg,
            m: z.clone(),
            v: z,
            step: 0,
        }
    }

    /// Apply one update; returns the pre-clip global gradient norm.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[(usize, Vec<T>)]) -> f64 {
        self.step += 1;
        let norm = grads
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|x| x.to_f64_lossy().powi(2))
            .sum::<f64>()
            .sqrt();
        let clip = if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            self.cfg.grad_clip / norm
        } else {
            1.0
        };
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let step = T::lit(self.cfg.lr * bc2.sqrt() / bc1);
        let (tb1, tb2) = (T::lit(b1), T::lit(b2));
        let eps = T::lit(self.cfg.eps * bc2.sqrt());
        let c = T::lit(clip);
        for (id, g) in grads {
            let (m, v, p) = (&mut self.m[*id], &mut self.v[*id], &mut store.values[*id]);
            for k in 0..g.len() {
                let gk = g[k] * c;
                m[k] = tb1 * m[k] + (T::one() - tb1) * gk;
                v[k] = tb2 * v[k] + (T::one() - tb2) * gk * gk;
                p[k] -= step * m[k] / (v[k].sqrt() + eps);
            }
        }
        norm
    }
}

const CKPT_MAGIC: &[u8; 4] = b"RPCK";
const CKPT_VERSION: u8 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CkptHeader {
    dtype: String,
    iteration: u64,
    meta: serde_json::Value,
    specs: Vec<ParamSpec>,
    has_ema: bool,
}

/// Parameters, optional EMA shadow, iteration counter and free-form metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub iteration: u64,
    pub meta: serde_json::Value,
    pub params: ParamStore<T>,
    pub ema: Option<Vec<Vec<T>>>,
}

fn put_values<T: Scalar>(w: &mut impl Write, vals: &[T]) -> std::io::Result<()> {
    for v in vals {
        if T::DTYPE == "f32" {
            w.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
        } else {
            w.write_all(&v.to_f64_lossy().to_le_bytes())?;
        }
    }
    Ok(())
}

fn get_values<T: Scalar>(r: &mut impl Read, n: usize, dtype: &str) -> Result<Vec<T>> {
    let width = if dtype == "f32" { 4 } else { 8 };
    let mut buf = vec![0u8; n * width];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Corrupt("checkpoint payload truncated".into()))?;
    Ok(buf
        .chunks(width)
        .map(|c| {
            if width == 4 {
                T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64)
            } else {
                T::lit(f64::from_le_bytes(c.try_into().unwrap()))
            }
        })
        .collect())
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, ck: &Checkpoint<T>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let header = CkptHeader {
        dtype: T::DTYPE.to_string(),
        iteration: ck.iteration,
        meta: ck.meta.clone(),
        specs: ck.params.specs.clone(),
        has_ema: ck.ema.is_some(),
    };
    let hjson = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let io = |e| Error::io(path, e);
    w.write_all(CKPT_MAGIC).map_err(io)?;
    w.write_all(&[CKPT_VERSION]).map_err(io)?;
    w.write_all(&(hjson.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&hjson).map_err(io)?;
    for v in &ck.params.values {
        put_values(&mut w, v).map_err(io)?;
    }
    if let Some(ema) = &ck.ema {
        for v in ema {
            put_values(&mut w, v).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("checkpoint too short".into()))?;
    if &magic[..4] != CKPT_MAGIC || magic[4] != CKPT_VERSION {
        return Err(Error::Format(format!("{} is not a version-{CKPT_VERSION} checkpoint", path.display())));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|_| Error::Corrupt("checkpoint header truncated".into()))?;
    let mut hbuf = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut hbuf)
        .map_err(|_| Error::Corrupt("checkpoint header truncated".into()))?;
    let header: CkptHeader = serde_json::from_slice(&hbuf).map_err(|e| Error::Format(e.to_string()))?;
    let mut values = Vec::with_capacity(header.specs.len());
    for s in &header.specs {
        values.push(get_values(&mut r, s.numel(), &header.dtype)?);
    }
    let ema = if header.has_ema {
        let mut e = Vec::with_capacity(header.specs.len());
        for s in &header.specs {
            e.push(get_values(&mut r, s.numel(), &header.dtype)?);
        }
        Some(e)
    } else {
        None
    };
    Ok(Checkpoint {
        iteration: header.iteration,
        meta: header.meta,
        params: ParamStore::from_parts(header.specs, values),
        ema,
    })
}
