use serde::{Deserialize, Serialize};

use super::ModelError;

/// One axis of the state lattice: nodes `min, min + h, ..., max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub h: f64,
}

impl Axis {
    pub fn new(min: f64, max: f64, h: f64) -> Self {
        Self { min, max, h }
    }

    /// Number of cells `(max - min) / h`, rounded; validated to be integral.
    fn cells(&self) -> usize {
        ((self.max - self.min) / self.h).round() as usize
    }
}

/// Rectangular lattice on a bounded box of `R^d`, nodes stored in row-major
/// order with the last axis varying fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateLattice {
    axes: Vec<Axis>,
    counts: Vec<usize>,
    strides: Vec<usize>,
}

impl StateLattice {
    pub fn new(axes: Vec<Axis>) -> Result<Self, ModelError> {
        if axes.is_empty() {
            return Err(ModelError::InvalidLattice("lattice needs at least one axis".into()));
        }
        for (i, ax) in axes.iter().enumerate() {
            if !(ax.min.is_finite() && ax.max.is_finite() && ax.h.is_finite()) {
                return Err(ModelError::InvalidLattice(format!("axis {i}: non-finite bounds")));
            }
            if ax.min >= ax.max {
                return Err(ModelError::InvalidLattice(format!(
                    "axis {i}: requires min < max, got [{}, {}]",
                    ax.min, ax.max
                )));
            }
            if ax.h <= 0.0 {
                return Err(ModelError::InvalidLattice(format!("axis {i}: spacing must be > 0")));
            }
            let ratio = (ax.max - ax.min) / ax.h;
            if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) || ratio.round() < 1.0 {
                return Err(ModelError::InvalidLattice(format!(
                    "axis {i}: (max - min) / h = {ratio} is not a positive integer"
                )));
            }
        }
        let counts: Vec<usize> = axes.iter().map(|a| a.cells() + 1).collect();
        let mut strides = vec![1usize; counts.len()];
        for a in (0..counts.len().saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * counts[a + 1];
        }
        Ok(Self { axes, counts, strides })
    }

    /// One-dimensional lattice convenience constructor.
    pub fn line(min: f64, max: f64, h: f64) -> Result<Self, ModelError> {
        Self::new(vec![Axis::new(min, max, h)])
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn n_nodes(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.axes[axis].h
    }

    pub fn multi_index(&self, node: usize) -> Vec<usize> {
        let mut rest = node;
        self.strides
            .iter()
            .map(|&s| {
                let q = rest / s;
                rest %= s;
                q
            })
            .collect()
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    /// Node shifted by signed per-axis offsets, each coordinate projected back
    /// onto the lattice (outgoing mass lands on the boundary node).
    pub fn shifted(&self, node: usize, offsets: &[i64]) -> usize {
        let mut out = 0usize;
        let mut rest = node;
        for a in 0..self.dim() {
            let i = (rest / self.strides[a]) as i64;
            rest %= self.strides[a];
            let j = (i + offsets[a]).clamp(0, self.counts[a] as i64 - 1) as usize;
            out += j * self.strides[a];
        }
        out
    }

    /// True when every shift by `offsets` stays inside the lattice.
    pub fn is_interior_for(&self, node: usize, offsets: &[i64]) -> bool {
        let idx = self.multi_index(node);
        idx.iter().enumerate().all(|(a, &i)| {
            let j = i as i64 + offsets[a];
            j >= 0 && j < self.counts[a] as i64
        })
    }

    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        let ax = &self.axes[axis];
        if i + 1 == self.counts[axis] {
            ax.max
        } else {
            ax.min + i as f64 * ax.h
        }
    }

    pub fn point(&self, node: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.point_into(node, &mut out);
        out
    }

    pub fn point_into(&self, node: usize, out: &mut [f64]) {
        let mut rest = node;
        for a in 0..self.dim() {
            let i = rest / self.strides[a];
            rest %= self.strides[a];
            out[a] = self.coord(a, i);
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter().zip(&self.axes).all(|(v, ax)| *v >= ax.min && *v <= ax.max)
    }

    /// Projects `x` onto the lattice box.
    pub fn clamp_into(&self, x: &[f64], out: &mut [f64]) {
        for ((o, v), ax) in out.iter_mut().zip(x).zip(&self.axes) {
            *o = v.clamp(ax.min, ax.max);
        }
    }

    /// Nearest node to `x` after clamping to the box.
    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut node = 0;
        for (a, ax) in self.axes.iter().enumerate() {
            let v = x[a].clamp(ax.min, ax.max);
            let i = ((v - ax.min) / ax.h).round() as usize;
            node += i.min(self.counts[a] - 1) * self.strides[a];
        }
        node
    }

    /// Exact node lookup; `None` when `x` is not within `1e-9 h` of a node.
    pub fn node_of(&self, x: &[f64]) -> Option<usize> {
        let node = self.nearest(x);
        let p = self.point(node);
        let close = p
            .iter()
            .zip(x)
            .zip(&self.axes)
            .all(|((a, b), ax)| (a - b).abs() <= 1e-9 * ax.h);
        close.then_some(node)
    }
}
