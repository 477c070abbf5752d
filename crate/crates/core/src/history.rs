//! Append-only per-marker trajectory record with dense output.
//!
//! Each level stores, for every marker, the position `x`, its rate `u = dx/ds`
//! and `a = du/ds`. Between knots the position is the quintic Hermite
//! interpolant of `(x, u, a)` at both ends, so `x`, `u`, `a` are all continuous.
//! Auxiliary channels carry values plus rates and use cubic Hermite.

use crate::kernels::SofteningSpec;
use crate::{SolverError, Vec3};

#[derive(Debug, Clone)]
pub struct Level {
    pub t: f64,
    pub x: Vec<Vec3>,
    pub u: Vec<Vec3>,
    pub a: Vec<Vec3>,
    pub aux: Vec<f64>,
    pub aux_rate: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub x: Vec3,
    pub u: Vec3,
    pub a: Vec3,
}

#[derive(Debug, Clone)]
pub struct History {
    pub dt: f64,
    pub n_markers: usize,
    pub aux_width: usize,
    /// Reads up to this far past the last knot extrapolate the last interval.
    pub max_extrapolation: f64,
    pub levels: Vec<Level>,
}

impl History {
    pub fn new(dt: f64, n_markers: usize, aux_width: usize) -> Self {
        History { dt, n_markers, aux_width, max_extrapolation: 0.0, levels: Vec::new() }
    }

    pub fn push(&mut self, level: Level) {
        debug_assert_eq!(level.x.len(), self.n_markers);
        debug_assert_eq!(level.aux.len(), self.n_markers * self.aux_width);
        self.levels.push(level);
    }

    pub fn t_first(&self) -> f64 {
        self.levels.first().map_or(0.0, |l| l.t)
    }

    pub fn t_last(&self) -> f64 {
        self.levels.last().map_or(0.0, |l| l.t)
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    fn locate(&self, s: f64) -> crate::Result<usize> {
        let lo = self.t_first();
        let hi = self.t_last();
        let tol = 1e-12 * (1.0 + hi.abs());
        if self.levels.is_empty() || s < lo - tol || s > hi + self.max_extrapolation + tol {
            return Err(SolverError::Range { t: s, lo, hi });
        }
        let nl = self.levels.len();
        if nl == 1 {
            return Ok(0);
        }
        let mut k = ((s - lo) / self.dt).floor();
        if k < 0.0 {
            k = 0.0;
        }
        let mut k = (k as usize).min(nl - 2);
        // Guard against round-off in the uniform-spacing guess.
        while k > 0 && s < self.levels[k].t {
            k -= 1;
        }
        while k + 2 < nl && s > self.levels[k + 1].t {
            k += 1;
        }
        Ok(k)
    }

    /// Position, velocity and acceleration of marker `j` at time `s`.
    pub fn sample(&self, j: usize, s: f64) -> crate::Result<Sample> {
        let k = self.locate(s)?;
        if self.levels.len() == 1 {
            let l = &self.levels[0];
            let tau = s - l.t;
            return Ok(Sample {
                x: l.x[j] + tau * l.u[j] + 0.5 * tau * tau * l.a[j],
                u: l.u[j] + tau * l.a[j],
                a: l.a[j],
            });
        }
        let l0 = &self.levels[k];
        let l1 = &self.levels[k + 1];
        Ok(quintic(l0.t, l1.t, &l0.x[j], &l0.u[j], &l0.a[j], &l1.x[j], &l1.u[j], &l1.a[j], s))
    }

    /// Auxiliary channel values of marker `j` at time `s`, written to `out`.
    pub fn aux(&self, j: usize, s: f64, out: &mut [f64]) -> crate::Result<()> {
        let k = self.locate(s)?;
        let w = self.aux_width;
        let base = j * w;
        if self.levels.len() == 1 {
            let l = &self.levels[0];
            for i in 0..w {
                out[i] = l.aux[base + i] + (s - l.t) * l.aux_rate[base + i];
            }
            return Ok(());
        }
        let l0 = &self.levels[k];
        let l1 = &self.levels[k + 1];
        let h = l1.t - l0.t;
        let tau = (s - l0.t) / h;
        let t2 = tau * tau;
        let t3 = t2 * tau;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + tau;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        for i in 0..w {
            out[i] = h00 * l0.aux[base + i]
                + h10 * h * l0.aux_rate[base + i]
                + h01 * l1.aux[base + i]
                + h11 * h * l1.aux_rate[base + i];
        }
        Ok(())
    }

    /// Emission time `s` of marker `j` for a signal reaching `x` at time `t`,
    /// the root of `c (t - s) = rho(x - X(s))`. `None` when even the first
    /// knot lies outside the backward cone. The root is unique while `|u| < c`.
    pub fn retarded_root(&self, j: usize, x: &Vec3, t: f64, c: f64, soft: &SofteningSpec) -> crate::Result<Option<f64>> {
        let t0 = self.t_first();
        let g = |s: f64| -> crate::Result<(f64, f64)> {
            let smp = self.sample(j, s)?;
            let d = x - smp.x;
            let r = soft.rho(&d);
            Ok((c * (t - s) - r, -c + d.dot(&smp.u) / r))
        };
        let (g0, _) = g(t0)?;
        if g0 < 0.0 {
            return Ok(None);
        }
        let (mut lo, mut hi) = (t0, t);
        let tol = 1e-14 * (1.0 + t.abs());
        let mut s = (t - soft.rho(&(x - self.sample(j, t)?.x)) / c).clamp(lo, hi);
        for _ in 0..100 {
            let (gs, dg) = g(s)?;
            if gs == 0.0 {
                return Ok(Some(s));
            }
            if gs > 0.0 {
                lo = s;
            } else {
                hi = s;
            }
            let mut next = s - gs / dg;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - s).abs() <= tol || hi - lo <= tol {
                return Ok(Some(next));
            }
            s = next;
        }
        Ok(Some(s))
    }

    /// All marker positions at time `s`.
    pub fn positions(&self, s: f64) -> crate::Result<Vec<Sample>> {
        (0..self.n_markers).map(|j| self.sample(j, s)).collect()
    }
}

/// Quintic Hermite interpolation on `[t0, t1]` matching value, first and
/// second derivative at both ends; also returns the derivatives at `s`.
#[allow(clippy::too_many_arguments)]
pub fn quintic(t0: f64, t1: f64, x0: &Vec3, u0: &Vec3, a0: &Vec3, x1: &Vec3, u1: &Vec3, a1: &Vec3, s: f64) -> Sample {
    let h = t1 - t0;
    let tau = (s - t0) / h;
    let c0 = *x0;
    let c1 = h * u0;
    let c2 = 0.5 * h * h * a0;
    let d = x1 - (c0 + c1 + c2);
    let e = h * u1 - (c1 + 2.0 * c2);
    let g = h * h * a1 - 2.0 * c2;
    let c3 = 10.0 * d - 4.0 * e + 0.5 * g;
    let c4 = -15.0 * d + 7.0 * e - g;
    let c5 = 6.0 * d - 3.0 * e + 0.5 * g;
    let x = c0 + tau * (c1 + tau * (c2 + tau * (c3 + tau * (c4 + tau * c5))));
    let dx = c1 + tau * (2.0 * c2 + tau * (3.0 * c3 + tau * (4.0 * c4 + tau * 5.0 * c5)));
    let ddx = 2.0 * c2 + tau * (6.0 * c3 + tau * (12.0 * c4 + tau * 20.0 * c5));
    Sample { x, u: dx / h, a: ddx / (h * h) }
}
