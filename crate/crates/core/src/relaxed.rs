//! Relaxed controls on a finite horizon.
//!
//! A [`YoungMeasure`] is a kernel `m(t, du)` that is constant on each time
//! cell and whose time marginal is Lebesgue measure: row `i` is a probability
//! vector over the control atoms. Ordinary piecewise-constant controls embed as
//! Dirac rows ([`embed_dirac`]); conversely [`chattering_approx`] builds
//! piecewise-constant controls whose embeddings approach a given measure.

use std::io::{Read, Write};

use crate::model::{ControlSet, TimeGrid};

/// Row-sum tolerance for a valid measure.
pub const ROW_TOL: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum RelaxedError {
    #[error("weights have shape {rows}x{cols}, expected {n_cells}x{n_atoms}")]
    Shape { rows: usize, cols: usize, n_cells: usize, n_atoms: usize },
    #[error("invalid measure at time cell {cell}: {reason}")]
    InvalidMeasure { cell: usize, reason: String },
    #[error("grids are not aligned: {0}")]
    Alignment(String),
    #[error("invalid piecewise control: {0}")]
    InvalidControl(String),
    #[error("test family is empty")]
    EmptyFamily,
    #[error("measures live on different grids or control sets")]
    Incompatible,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("csv parse: {0}")]
    Parse(String),
}

/// Deterministic-in-time relaxed control: one probability row per time cell.
#[derive(Debug, Clone, PartialEq)]
pub struct YoungMeasure {
    grid: TimeGrid,
    controls: ControlSet,
    weights: Vec<Vec<f64>>,
}

impl YoungMeasure {
    /// Validates and renormalizes rows (deviations below [`ROW_TOL`] only).
    pub fn new(
        grid: TimeGrid,
        controls: ControlSet,
        weights: Vec<Vec<f64>>,
    ) -> Result<Self, RelaxedError> {
        let mut m = Self { grid, controls, weights };
        validate_young(&m)?;
        for row in &mut m.weights {
            let s: f64 = row.iter().sum();
            if s != 1.0 {
                row.iter_mut().for_each(|w| *w /= s);
            }
        }
        Ok(m)
    }

    /// Dirac row at `atoms[i]` in every cell `i`.
    pub fn dirac(grid: TimeGrid, controls: ControlSet, atoms: &[usize]) -> Result<Self, RelaxedError> {
        let k = controls.len();
        if atoms.len() != grid.n_steps() {
            return Err(RelaxedError::Shape {
                rows: atoms.len(),
                cols: k,
                n_cells: grid.n_steps(),
                n_atoms: k,
            });
        }
        let weights = atoms
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                if a >= k {
                    return Err(RelaxedError::InvalidMeasure {
                        cell: i,
                        reason: format!("atom index {a} out of range"),
                    });
                }
                let mut row = vec![0.0; k];
                row[a] = 1.0;
                Ok(row)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(grid, controls, weights)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn controls(&self) -> &ControlSet {
        &self.controls
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn row(&self, cell: usize) -> &[f64] {
        &self.weights[cell]
    }

    /// Row of the cell containing `t`.
    pub fn row_at(&self, t: f64) -> &[f64] {
        &self.weights[self.grid.cell_of(t)]
    }

    /// `m(phi) = sum_i sum_k dt w[i][k] phi(t_i, u_k)`.
    pub fn integrate(&self, phi: &TimeControlFn) -> f64 {
        let dt = self.grid.dt();
        let mut acc = 0.0;
        for (i, row) in self.weights.iter().enumerate() {
            let t = self.grid.time(i);
            for (k, w) in row.iter().enumerate() {
                if *w != 0.0 {
                    acc += dt * w * phi(t, self.controls.atom(k));
                }
            }
        }
        acc
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), RelaxedError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.controls.labels())?;
        for row in &self.weights {
            w.write_record(row.iter().map(|v| crate::fmt::f17(*v)))?;
        }
        w.flush().map_err(|e| RelaxedError::Parse(e.to_string()))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(
        input: R,
        grid: TimeGrid,
        controls: ControlSet,
    ) -> Result<Self, RelaxedError> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        if header.len() != controls.len() {
            return Err(RelaxedError::Parse(format!(
                "header has {} atom labels, control set has {}",
                header.len(),
                controls.len()
            )));
        }
        let mut weights = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| RelaxedError::Parse(format!("row {i}: {e}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            weights.push(row);
        }
        Self::new(grid, controls, weights)
    }
}

/// Checks row sums and signs of a measure.
pub fn validate_young(m: &YoungMeasure) -> Result<(), RelaxedError> {
    let n = m.grid.n_steps();
    let k = m.controls.len();
    let bad_cols = m.weights.iter().find(|r| r.len() != k).map(|r| r.len());
    if m.weights.len() != n || bad_cols.is_some() {
        return Err(RelaxedError::Shape {
            rows: m.weights.len(),
            cols: bad_cols.unwrap_or(k),
            n_cells: n,
            n_atoms: k,
        });
    }
    for (i, row) in m.weights.iter().enumerate() {
        if let Some(w) = row.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(RelaxedError::InvalidMeasure { cell: i, reason: format!("weight {w}") });
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() >= ROW_TOL {
            return Err(RelaxedError::InvalidMeasure { cell: i, reason: format!("row sum {s}") });
        }
    }
    Ok(())
}

/// Ordinary control constant on each cell of a (fine) grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseControl {
    grid: TimeGrid,
    atoms: Vec<usize>,
}

impl PiecewiseControl {
    pub fn new(grid: TimeGrid, atoms: Vec<usize>, n_atoms: usize) -> Result<Self, RelaxedError> {
        if atoms.len() != grid.n_steps() {
            return Err(RelaxedError::InvalidControl(format!(
                "{} atoms for {} subcells",
                atoms.len(),
                grid.n_steps()
            )));
        }
        if let Some((i, a)) = atoms.iter().enumerate().find(|(_, a)| **a >= n_atoms) {
            return Err(RelaxedError::InvalidControl(format!(
                "subcell {i} uses atom {a}, only {n_atoms} atoms"
            )));
        }
        Ok(Self { grid, atoms })
    }

    pub fn constant(grid: TimeGrid, atom: usize, n_atoms: usize) -> Result<Self, RelaxedError> {
        Self::new(grid, vec![atom; grid.n_steps()], n_atoms)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn atoms(&self) -> &[usize] {
        &self.atoms
    }

    /// Atom applied on the subcell containing `t`.
    pub fn atom_at(&self, t: f64) -> usize {
        self.atoms[self.grid.cell_of(t)]
    }
}

/// Dirac embedding `dt x delta_{nu_t}(du)` averaged onto the cells of `grid`.
pub fn embed_dirac(
    nu: &PiecewiseControl,
    grid: &TimeGrid,
    controls: &ControlSet,
) -> Result<YoungMeasure, RelaxedError> {
    let factor = grid.refinement_factor(&nu.grid).ok_or_else(|| {
        RelaxedError::Alignment(format!(
            "{} subcells on [{}, {}] do not refine {} cells on [{}, {}]",
            nu.grid.n_steps(),
            nu.grid.t0(),
            nu.grid.t_end(),
            grid.n_steps(),
            grid.t0(),
            grid.t_end()
        ))
    })?;
    let k = controls.len();
    if let Some(a) = nu.atoms.iter().find(|a| **a >= k) {
        return Err(RelaxedError::InvalidControl(format!("atom {a} outside control set")));
    }
    let weights = nu
        .atoms
        .chunks(factor)
        .map(|sub| {
            let mut counts = vec![0usize; k];
            for &a in sub {
                counts[a] += 1;
            }
            counts.into_iter().map(|c| c as f64 / factor as f64).collect()
        })
        .collect();
    YoungMeasure::new(*grid, controls.clone(), weights)
}

/// Chattering approximation: each cell is split into `n_sub` subcells and atom
/// `k` occupies a contiguous run of `round(n_sub w[i][k])` of them, rounded by
/// largest remainder (ties to the lower atom index), atoms in index order.
pub fn chattering_approx(m: &YoungMeasure, n_sub: usize) -> Result<PiecewiseControl, RelaxedError> {
    if n_sub == 0 {
        return Err(RelaxedError::InvalidControl("n_sub must be >= 1".into()));
    }
    let fine = m
        .grid
        .refine(n_sub)
        .map_err(|e| RelaxedError::InvalidControl(e.to_string()))?;
    let mut atoms = Vec::with_capacity(fine.n_steps());
    for row in &m.weights {
        let counts = largest_remainder(row, n_sub);
        for (k, c) in counts.into_iter().enumerate() {
            atoms.extend(std::iter::repeat_n(k, c));
        }
    }
    PiecewiseControl::new(fine, atoms, m.controls.len())
}

/// Integer counts summing to `n` with `|count_k - n w_k| < 1`.
fn largest_remainder(w: &[f64], n: usize) -> Vec<usize> {
    let scaled: Vec<f64> = w.iter().map(|x| x * n as f64).collect();
    let mut counts: Vec<usize> = scaled.iter().map(|s| s.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..w.len()).collect();
    // Stable sort keeps lower indices first among equal remainders.
    order.sort_by(|&a, &b| {
        let ra = scaled[a] - scaled[a].floor();
        let rb = scaled[b] - scaled[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
    });
    if assigned <= n {
        for &k in order.iter().take(n - assigned) {
            counts[k] += 1;
        }
    } else {
        // Only reachable through round-off on rows summing to 1 + eps.
        let mut excess = assigned - n;
        for &k in order.iter().rev() {
            if excess == 0 {
                break;
            }
            if counts[k] > 0 {
                counts[k] -= 1;
                excess -= 1;
            }
        }
    }
    counts
}

/// Largest per-row l1 distance between two measures on the same grid.
pub fn row_l1_distance(m1: &YoungMeasure, m2: &YoungMeasure) -> Result<f64, RelaxedError> {
    if m1.grid != m2.grid || m1.controls != m2.controls {
        return Err(RelaxedError::Incompatible);
    }
    Ok(m1
        .weights
        .iter()
        .zip(&m2.weights)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>())
        .fold(0.0, f64::max))
}

/// Test function on `[t0, T] x U`.
pub type TimeControlFn = dyn Fn(f64, &[f64]) -> f64 + Send + Sync;

/// Seminorm distance `max_phi |m1(phi) - m2(phi)|` over a finite family; a
/// computable proxy for the stable topology on relaxed controls.
pub fn bl_distance(
    m1: &YoungMeasure,
    m2: &YoungMeasure,
    family: &[Box<TimeControlFn>],
) -> Result<f64, RelaxedError> {
    if family.is_empty() {
        return Err(RelaxedError::EmptyFamily);
    }
    if m1.grid != m2.grid || m1.controls != m2.controls {
        return Err(RelaxedError::Incompatible);
    }
    Ok(family
        .iter()
        .map(|phi| (m1.integrate(phi.as_ref()) - m2.integrate(phi.as_ref())).abs())
        .fold(0.0, f64::max))
}

/// Default family: products of time harmonics `cos(pi p s)`, `s` the rescaled
/// time in `[0, 1]`, with narrow Gaussian bumps centred on the atoms.
pub fn default_family(grid: &TimeGrid, controls: &ControlSet, n: usize) -> Vec<Box<TimeControlFn>> {
    let k = controls.len();
    let mut sep = f64::INFINITY;
    for a in 0..k {
        for b in (a + 1)..k {
            let d2: f64 = controls
                .atom(a)
                .iter()
                .zip(controls.atom(b))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            sep = sep.min(d2.sqrt());
        }
    }
    let width = if sep.is_finite() { sep / 4.0 } else { 1.0 };
    let (t0, horizon) = (grid.t0(), grid.horizon());
    (0..n)
        .map(|j| {
            let atom = controls.atom(j % k).to_vec();
            let p = (j / k) as f64;
            Box::new(move |t: f64, u: &[f64]| {
                let d2: f64 = u.iter().zip(&atom).map(|(x, y)| (x - y) * (x - y)).sum();
                let s = (t - t0) / horizon;
                (std::f64::consts::PI * p * s).cos() * (-0.5 * d2 / (width * width)).exp()
            }) as Box<TimeControlFn>
        })
        .collect()
}
