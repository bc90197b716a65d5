//! Countable family of smooth test functions `phi: R^d -> R` with analytic
//! gradient and Hessian.
//!
//! Enumeration for dimension `d` (1-based):
//!
//! 1. the constant `1`;
//! 2. the coordinates `x_i`;
//! 3. the products `x_i x_k`, `i <= k`;
//! 4. then, cycling in groups of three, `sin(c.x)`, `cos(c.x)` and
//!    `exp(-|x|^2 / 2) x_a^p`, where the group number fixes the axis `a`, a
//!    rational frequency vector `c` and the power `p`.
//!
//! For `d = 1` the first eight members are
//! `1, x, x^2, sin(x/2), cos(x/2), exp(-x^2/2), sin(x), cos(x)`.

use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum TestKind {
    Constant,
    Linear { axis: usize },
    Product { i: usize, k: usize },
    Sin { freq: Vec<f64> },
    Cos { freq: Vec<f64> },
    Gaussian { axis: usize, power: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestFunction {
    index: usize,
    dim: usize,
    kind: TestKind,
}

impl TestFunction {
    /// Member `index` (1-based) of the family in dimension `dim`.
    pub fn nth(index: usize, dim: usize) -> Self {
        assert!(index >= 1, "test functions are indexed from 1");
        assert!(dim >= 1);
        let n_prod = dim * (dim + 1) / 2;
        let kind = if index == 1 {
            TestKind::Constant
        } else if index <= 1 + dim {
            TestKind::Linear { axis: index - 2 }
        } else if index <= 1 + dim + n_prod {
            let mut j = index - 2 - dim;
            let mut found = (0, 0);
            'outer: for i in 0..dim {
                for k in i..dim {
                    if j == 0 {
                        found = (i, k);
                        break 'outer;
                    }
                    j -= 1;
                }
            }
            TestKind::Product { i: found.0, k: found.1 }
        } else {
            let j = index - 2 - dim - n_prod;
            let group = j / 3;
            let axis = group % dim;
            let level = group / dim;
            match j % 3 {
                0 => TestKind::Sin { freq: Self::frequency(dim, axis, level) },
                1 => TestKind::Cos { freq: Self::frequency(dim, axis, level) },
                _ => TestKind::Gaussian { axis, power: level as u32 },
            }
        };
        Self { index, dim, kind }
    }

    /// The first `n` members.
    pub fn family(n: usize, dim: usize) -> Vec<Self> {
        (1..=n).map(|i| Self::nth(i, dim)).collect()
    }

    fn frequency(dim: usize, axis: usize, level: usize) -> Vec<f64> {
        let mut c = vec![0.0; dim];
        c[axis] = (level + 1) as f64 / 2.0;
        if dim > 1 && level % 2 == 1 {
            c[(axis + 1) % dim] = 1.0 / 3.0;
        }
        c
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &TestKind {
        &self.kind
    }

    pub fn is_constant(&self) -> bool {
        self.kind == TestKind::Constant
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match &self.kind {
            TestKind::Constant => 1.0,
            TestKind::Linear { axis } => x[*axis],
            TestKind::Product { i, k } => x[*i] * x[*k],
            TestKind::Sin { freq } => dot(freq, x).sin(),
            TestKind::Cos { freq } => dot(freq, x).cos(),
            TestKind::Gaussian { axis, power } => gauss(x) * x[*axis].powi(*power as i32),
        }
    }

    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        match &self.kind {
            TestKind::Constant => {}
            TestKind::Linear { axis } => out[*axis] = 1.0,
            TestKind::Product { i, k } => {
                out[*i] += x[*k];
                out[*k] += x[*i];
            }
            TestKind::Sin { freq } => {
                let c = dot(freq, x).cos();
                for (o, f) in out.iter_mut().zip(freq) {
                    *o = f * c;
                }
            }
            TestKind::Cos { freq } => {
                let s = -dot(freq, x).sin();
                for (o, f) in out.iter_mut().zip(freq) {
                    *o = f * s;
                }
            }
            TestKind::Gaussian { axis, power } => {
                let g = gauss(x);
                let (m, dm, _) = monomial(x[*axis], *power);
                for (i, o) in out.iter_mut().enumerate() {
                    let dmi = if i == *axis { dm } else { 0.0 };
                    *o = g * (dmi - x[i] * m);
                }
            }
        }
    }

    /// Row-major `d x d` Hessian.
    pub fn hessian(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        out.iter_mut().for_each(|v| *v = 0.0);
        match &self.kind {
            TestKind::Constant | TestKind::Linear { .. } => {}
            TestKind::Product { i, k } => {
                out[i * d + k] += 1.0;
                out[k * d + i] += 1.0;
            }
            TestKind::Sin { freq } => {
                let s = -dot(freq, x).sin();
                outer(freq, s, d, out);
            }
            TestKind::Cos { freq } => {
                let c = -dot(freq, x).cos();
                outer(freq, c, d, out);
            }
            TestKind::Gaussian { axis, power } => {
                let g = gauss(x);
                let a = *axis;
                let (m, dm, ddm) = monomial(x[a], *power);
                let grad_m = |i: usize| if i == a { dm } else { 0.0 };
                for i in 0..d {
                    for j in 0..d {
                        let dij_m = if i == a && j == a { ddm } else { 0.0 };
                        let delta = if i == j { 1.0 } else { 0.0 };
                        out[i * d + j] = g
                            * (dij_m - x[j] * grad_m(i) - x[i] * grad_m(j) - delta * m
                                + x[i] * x[j] * m);
                    }
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

fn gauss(x: &[f64]) -> f64 {
    (-0.5 * dot(x, x)).exp()
}

fn outer(c: &[f64], scale: f64, d: usize, out: &mut [f64]) {
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = scale * c[i] * c[j];
        }
    }
}

/// `(v^p, p v^(p-1), p (p-1) v^(p-2))`.
fn monomial(v: f64, p: u32) -> (f64, f64, f64) {
    let p_i = p as i32;
    let m = v.powi(p_i);
    let dm = if p >= 1 { p as f64 * v.powi(p_i - 1) } else { 0.0 };
    let ddm = if p >= 2 { (p * (p - 1)) as f64 * v.powi(p_i - 2) } else { 0.0 };
    (m, dm, ddm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_members_in_one_dimension() {
        let f = TestFunction::family(8, 1);
        assert_eq!(f[0].kind, TestKind::Constant);
        assert_eq!(f[1].kind, TestKind::Linear { axis: 0 });
        assert_eq!(f[2].kind, TestKind::Product { i: 0, k: 0 });
        assert_eq!(f[3].kind, TestKind::Sin { freq: vec![0.5] });
        assert_eq!(f[4].kind, TestKind::Cos { freq: vec![0.5] });
        assert_eq!(f[5].kind, TestKind::Gaussian { axis: 0, power: 0 });
        assert_eq!(f[6].kind, TestKind::Sin { freq: vec![1.0] });
        assert_eq!(f[7].kind, TestKind::Cos { freq: vec![1.0] });
    }

    #[test]
    fn two_dimensional_products_enumerated_once() {
        let kinds: Vec<TestKind> = TestFunction::family(6, 2).into_iter().map(|f| f.kind).collect();
        assert_eq!(kinds[3], TestKind::Product { i: 0, k: 0 });
        assert_eq!(kinds[4], TestKind::Product { i: 0, k: 1 });
        assert_eq!(kinds[5], TestKind::Product { i: 1, k: 1 });
    }

    #[test]
    fn family_is_deterministic() {
        assert_eq!(TestFunction::family(30, 3), TestFunction::family(30, 3));
    }

    // Central differences: gradient error O(h^2), Hessian error O(h^2).
    fn check_derivatives(phi: &TestFunction, x: &[f64]) {
        let d = phi.dim();
        let h = 1e-4;
        let mut g = vec![0.0; d];
        let mut hess = vec![0.0; d * d];
        phi.gradient(x, &mut g);
        phi.hessian(x, &mut hess);
        let scale = 1.0 + g.iter().chain(&hess).fold(0.0f64, |m, v| m.max(v.abs()));
        let tol = 10.0 * h * h * scale;
        for i in 0..d {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let fd = (phi.value(&xp) - phi.value(&xm)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= tol, "grad {:?} axis {i}: {fd} vs {}", phi.kind, g[i]);
            let mut gp = vec![0.0; d];
            let mut gm = vec![0.0; d];
            phi.gradient(&xp, &mut gp);
            phi.gradient(&xm, &mut gm);
            for j in 0..d {
                let fd2 = (gp[j] - gm[j]) / (2.0 * h);
                assert!(
                    (fd2 - hess[i * d + j]).abs() <= tol,
                    "hess {:?} ({i},{j}): {fd2} vs {}",
                    phi.kind,
                    hess[i * d + j]
                );
            }
        }
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        for d in 1..=3 {
            for phi in TestFunction::family(24, d) {
                for x in [vec![0.3; d], vec![-1.1; d], (0..d).map(|i| 0.7 - 0.4 * i as f64).collect()] {
                    check_derivatives(&phi, &x);
                }
            }
        }
    }
}
