//! Uniform-grid containers: [`Grid2D`], multi-channel [`Field`]s and [`BinaryMask`]s.
//!
//! Values are stored channel-major, then row (`y`, index `j`), then column
//! (`x`, index `i`): `values[(c * n_y + j) * n_x + i]`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub n_x: usize,
    pub n_y: usize,
    pub h: f64,
}

impl Grid2D {
    pub fn new(n_x: usize, n_y: usize, h: f64) -> Result<Self> {
        if n_x < 3 || n_y < 3 {
            return Err(Error::Argument(format!(
                "grid needs at least 3 points per side, got {n_x}x{n_y}"
            )));
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::Argument(format!("grid spacing must be positive, got {h}")));
        }
        Ok(Self { n_x, n_y, h })
    }

    /// Square grid on the unit square, `h = 1/(n-1)`.
    pub fn unit_square(n: usize) -> Result<Self> {
        Self::new(n, n, 1.0 / (n as f64 - 1.0))
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n_x * self.n_y
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * self.n_x + i
    }

    pub fn x(&self, i: usize) -> f64 {
        i as f64 * self.h
    }

    pub fn y(&self, j: usize) -> f64 {
        j as f64 * self.h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Field<T> {
    pub grid: Grid2D,
    pub channels: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> Field<T> {
    pub fn zeros(grid: Grid2D, channels: usize) -> Self {
        Self {
            grid,
            channels,
            values: vec![T::zero(); channels * grid.len()],
        }
    }

    pub fn constant(grid: Grid2D, channels: usize, value: T) -> Self {
        Self {
            grid,
            channels,
            values: vec![value; channels * grid.len()],
        }
    }

    pub fn from_vec(grid: Grid2D, channels: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != channels * grid.len() {
            return Err(Error::Shape(format!(
                "field expects {} values for {} channels on {}x{}, got {}",
                channels * grid.len(),
                channels,
                grid.n_x,
                grid.n_y,
                values.len()
            )));
        }
        Ok(Self {
            grid,
            channels,
            values,
        })
    }

    /// Single-channel field sampled from `f(x, y)` at the grid nodes.
    pub fn from_fn(grid: Grid2D, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for j in 0..grid.n_y {
            for i in 0..grid.n_x {
                values.push(T::lit(f(grid.x(i), grid.y(j))));
            }
        }
        Self {
            grid,
            channels: 1,
            values,
        }
    }

    #[inline]
    pub fn at(&self, c: usize, i: usize, j: usize) -> T {
        self.values[(c * self.grid.n_y + j) * self.grid.n_x + i]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, i: usize, j: usize) -> &mut T {
        let (nx, ny) = (self.grid.n_x, self.grid.n_y);
        &mut self.values[(c * ny + j) * nx + i]
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.grid.len();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn channel_field(&self, c: usize) -> Field<T> {
        Field {
            grid: self.grid,
            channels: 1,
            values: self.channel(c).to_vec(),
        }
    }

    /// Stack single- or multi-channel fields on a shared grid.
    pub fn stack(parts: &[&Field<T>]) -> Result<Self> {
        let grid = parts
            .first()
            .ok_or_else(|| Error::Argument("cannot stack zero fields".into()))?
            .grid;
        let mut values = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.grid != grid {
                return Err(Error::Shape("stacked fields must share a grid".into()));
            }
            values.extend_from_slice(&p.values);
            channels += p.channels;
        }
        Ok(Self {
            grid,
            channels,
            values,
        })
    }

    pub fn mean(&self) -> T {
        let n = T::from_usize(self.values.len()).unwrap();
        self.values.iter().copied().sum::<T>() / n
    }

    pub fn min(&self) -> T {
        self.values.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max(&self) -> T {
        self.values.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            grid: self.grid,
            channels: self.channels,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Field<U> {
        Field {
            grid: self.grid,
            channels: self.channels,
            values: self
                .values
                .iter()
                .map(|v| U::from_f64(v.to_f64_lossy()).unwrap())
                .collect(),
        }
    }

    pub fn shape_matches(&self, other: &Field<T>) -> bool {
        self.grid == other.grid && self.channels == other.channels
    }
}

/// Observation mask with an exact number of revealed entries.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    pub grid: Grid2D,
    pub values: Vec<u8>,
    pub ratio: f64,
}

impl BinaryMask {
    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn all(grid: Grid2D, on: bool) -> Self {
        Self {
            grid,
            values: vec![on as u8; grid.len()],
            ratio: if on { 1.0 } else { 0.0 },
        }
    }

    pub fn as_field<T: Scalar>(&self) -> Field<T> {
        Field {
            grid: self.grid,
            channels: 1,
            values: self
                .values
                .iter()
                .map(|&v| if v == 1 { T::one() } else { T::zero() })
                .collect(),
        }
    }
}

/// Reveal exactly `round(ratio * n_x * n_y)` grid points, chosen uniformly under `seed`.
pub fn make_observation_mask(grid: Grid2D, ratio: f64, seed: u64) -> Result<BinaryMask> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Argument(format!("mask ratio must lie in (0,1), got {ratio}")));
    }
    let n = grid.len();
    let ones = (ratio * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0u8; n];
    for k in sample(&mut rng, n, ones).iter() {
        values[k] = 1;
    }
    Ok(BinaryMask {
        grid,
        values,
        ratio,
    })
}
