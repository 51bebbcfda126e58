//! Loss evaluated on a 2-d slice of input space around one example.
//!
//! Directions are used as-is: `sign` of the input gradient, or a seeded
//! Rademacher vector. No filter normalization is applied.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attacks::input_gradient;
use crate::error::{Error, Result};
use crate::ledger::CostLedger;
use crate::models::{LossKind, Model, ParamSet};
use crate::ops::{apply_primitive, Primitive};
use crate::perturb::ValueRange;
use crate::tensor::{sign, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `sign(grad_x loss(x, y))`.
    Adversarial,
    /// Uniform `+-1` per input element.
    Rademacher { seed: u64 },
}

impl Direction {
    fn label(&self) -> String {
        match self {
            Direction::Adversarial => "adversarial".into(),
            Direction::Rademacher { seed } => format!("rademacher(seed={seed})"),
        }
    }

    /// The direction vector for a single example `x` of shape `[1, ..]`.
    pub fn vector(
        &self,
        model: &Model,
        params: &ParamSet,
        x: &Tensor,
        label: usize,
        ledger: &CostLedger,
    ) -> Result<Vec<f32>> {
        match *self {
            Direction::Adversarial => {
                let g = input_gradient(model, params, x, &[label], LossKind::CrossEntropy, ledger)?;
                Ok(g.data().iter().map(|&v| sign(v)).collect())
            }
            Direction::Rademacher { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Ok((0..x.numel())
                    .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                    .collect())
            }
        }
    }
}

/// `values[i][j]` is the loss at `coords[i]` along `dir_a` and `coords[j]`
/// along `dir_b`.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceGrid {
    pub coords: Vec<f32>,
    pub values: Vec<Vec<f32>>,
    pub dir_a: String,
    pub dir_b: String,
}

impl SurfaceGrid {
    pub fn center(&self) -> f32 {
        let c = self.coords.len() / 2;
        self.values[c][c]
    }

    /// Loss at `+extent` along `dir_a`, zero along `dir_b`.
    pub fn edge_a(&self) -> f32 {
        let c = self.coords.len() / 2;
        self.values[self.coords.len() - 1][c]
    }

    /// Loss at `+extent` along `dir_b`, zero along `dir_a`.
    pub fn edge_b(&self) -> f32 {
        let c = self.coords.len() / 2;
        self.values[c][self.coords.len() - 1]
    }

    /// CSV matrix: rows are `dir_a` coordinates, columns `dir_b` coordinates.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# rows: {}, columns: {}; plain sign/Rademacher directions, no filter normalization\n",
            self.dir_a, self.dir_b
        );
        out.push_str("a\\b");
        for b in &self.coords {
            let _ = write!(out, ",{b}");
        }
        out.push('\n');
        for (a, row) in self.coords.iter().zip(&self.values) {
            let _ = write!(out, "{a}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// `grid_n` evenly spaced coordinates in `[-extent, extent]`, centre exactly 0.
pub fn grid_coords(extent: f32, grid_n: usize) -> Vec<f32> {
    let half = (grid_n - 1) / 2;
    (0..grid_n)
        .map(|i| {
            let k = i as i64 - half as i64;
            (extent as f64 * k as f64 / half as f64) as f32
        })
        .collect()
}

/// Cross-entropy loss of a single example over a `grid_n x grid_n` grid of
/// perturbations `clamp(x + a*dir_a + b*dir_b)`, evaluated in one batched
/// forward pass.
#[allow(clippy::too_many_arguments)]
pub fn loss_surface(
    model: &Model,
    params: &ParamSet,
    x: &Tensor,
    label: usize,
    dir_a: Direction,
    dir_b: Direction,
    extent: f32,
    grid_n: usize,
    range: ValueRange,
    ledger: &CostLedger,
) -> Result<SurfaceGrid> {
    if grid_n % 2 == 0 {
        return Err(Error::InvalidArgument(format!("grid_n must be odd, got {grid_n}")));
    }
    if !(extent > 0.0 && extent.is_finite()) {
        return Err(Error::InvalidArgument(format!("extent must be > 0, got {extent}")));
    }
    if x.batch() != 1 {
        return Err(Error::shape("loss_surface", "a single example [1, ..]", format!("{:?}", x.shape())));
    }
    let va = dir_a.vector(model, params, x, label, ledger)?;
    let vb = dir_b.vector(model, params, x, label, ledger)?;
    let coords = if grid_n == 1 { vec![0.0] } else { grid_coords(extent, grid_n) };
    let row = x.numel();
    let mut data = Vec::with_capacity(grid_n * grid_n * row);
    for &a in &coords {
        for &b in &coords {
            data.extend(
                x.data()
                    .iter()
                    .zip(&va)
                    .zip(&vb)
                    .map(|((&xi, &da), &db)| range.clamp(xi + a * da + b * db)),
            );
        }
    }
    let mut shape = x.shape().to_vec();
    shape[0] = grid_n * grid_n;
    let batch = Tensor::new(shape, data)?;
    let logits = model.logits(params, &batch, ledger)?;
    let losses = apply_primitive(
        &Primitive::SoftmaxCrossEntropy {
            labels: vec![label; grid_n * grid_n],
        },
        &[&logits],
    )?;
    let values = losses.data().chunks(grid_n).map(<[f32]>::to_vec).collect();
    Ok(SurfaceGrid {
        coords,
        values,
        dir_a: dir_a.label(),
        dir_b: dir_b.label(),
    })
}
