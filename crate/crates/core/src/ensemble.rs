//! Phase-space markers, deterministic grid sampling of the initial profile,
//! and mollified moments.

use crate::kernels::{relativistic_velocity, SofteningSpec};
use crate::sum::chunked_sum;
use crate::{SolverError, Vec3, Vec6};
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Marker {
    pub x: Vec3,
    pub v: Vec3,
    pub w: f64,
    pub w2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    VP,
    LVP,
    DVM,
    RVM,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Convention {
    Newtonian,
    Darwin,
    Relativistic,
}

/// `exp(-1/(1-s^2))` for `|s| < 1`, else 0.
pub fn bump(s: f64) -> f64 {
    if s.abs() < 1.0 {
        (-1.0 / (1.0 - s * s)).exp()
    } else {
        0.0
    }
}

fn bump_deriv(s: f64) -> f64 {
    if s.abs() < 1.0 {
        let q = 1.0 - s * s;
        bump(s) * (-2.0 * s / (q * q))
    } else {
        0.0
    }
}

/// Product bump profile `A b(|x-cx|/Rx) b(|v-cv|/Rv)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialProfile {
    pub center_x: Vec3,
    pub center_v: Vec3,
    pub radius_x: f64,
    pub radius_v: f64,
    pub amplitude: f64,
}

impl InitialProfile {
    pub fn eval(&self, x: &Vec3, v: &Vec3) -> f64 {
        let sx = (x - self.center_x).norm() / self.radius_x;
        let sv = (v - self.center_v).norm() / self.radius_v;
        self.amplitude * bump(sx) * bump(sv)
    }

    pub fn eval6(&self, z: &Vec6) -> f64 {
        self.eval(&z.fixed_rows::<3>(0).into(), &z.fixed_rows::<3>(3).into())
    }

    /// `(grad_x f, grad_v f)`.
    pub fn gradient(&self, x: &Vec3, v: &Vec3) -> Vec6 {
        let dx = x - self.center_x;
        let dv = v - self.center_v;
        let rx = dx.norm();
        let rv = dv.norm();
        let sx = rx / self.radius_x;
        let sv = rv / self.radius_v;
        let bx = bump(sx);
        let bv = bump(sv);
        let mut g = Vec6::zeros();
        if bx == 0.0 || bv == 0.0 {
            return g;
        }
        if rx > 0.0 {
            let gx = self.amplitude * bump_deriv(sx) * bv / (self.radius_x * rx) * dx;
            g.fixed_rows_mut::<3>(0).copy_from(&gx);
        }
        if rv > 0.0 {
            let gv = self.amplitude * bx * bump_deriv(sv) / (self.radius_v * rv) * dv;
            g.fixed_rows_mut::<3>(3).copy_from(&gv);
        }
        g
    }

    pub fn gradient6(&self, z: &Vec6) -> Vec6 {
        self.gradient(&z.fixed_rows::<3>(0).into(), &z.fixed_rows::<3>(3).into())
    }

    /// `int int f dx dv` by high-order radial quadrature.
    pub fn total_mass(&self) -> f64 {
        let m = radial_bump_moment(2);
        self.amplitude * (4.0 * PI * m).powi(2) * (self.radius_x * self.radius_v).powi(3)
    }

    /// Velocity moments of the normalized v-factor: `(int b dv, int |v-cv|^2 b dv / 3)`.
    pub fn velocity_moments(&self) -> (f64, f64) {
        let r = self.radius_v;
        let m0 = 4.0 * PI * radial_bump_moment(2) * r.powi(3);
        let m2 = 4.0 * PI * radial_bump_moment(4) * r.powi(5) / 3.0;
        (m0, m2)
    }

    /// Spatial factor `A b(|x-cx|/Rx)`.
    pub fn spatial_factor(&self, x: &Vec3) -> f64 {
        self.amplitude * bump((x - self.center_x).norm() / self.radius_x)
    }
}

/// `int_0^1 b(s) s^k ds`.
pub fn radial_bump_moment(k: i32) -> f64 {
    let breaks: Vec<f64> = (0..=64).map(|i| i as f64 / 64.0).collect();
    crate::quad::composite(&breaks, 16)
        .iter()
        .map(|&(s, w)| w * bump(s) * s.powi(k))
        .sum()
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub markers: Vec<Marker>,
    pub softening: SofteningSpec,
    pub t: f64,
    pub c: Option<f64>,
    pub kind: Kind,
    /// Phase-space cell volume of the sampling grid.
    pub cell_volume: f64,
}

impl Ensemble {
    pub fn empty(softening: SofteningSpec, kind: Kind) -> Self {
        Ensemble { markers: vec![], softening, t: 0.0, c: None, kind, cell_volume: 0.0 }
    }

    pub fn len(&self) -> usize {
        self.markers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.markers.is_empty()
    }

    pub fn total_charge(&self) -> f64 {
        chunked_sum(self.len(), 0.0, |i| self.markers[i].w)
    }

    pub fn with_kind(mut self, kind: Kind, c: Option<f64>) -> Self {
        self.kind = kind;
        self.c = c;
        self
    }

    /// Mollified density `sum w S_delta(x - x_i)`.
    pub fn charge_density(&self, x: &Vec3) -> f64 {
        chunked_sum(self.len(), 0.0, |i| {
            let m = &self.markers[i];
            m.w * self.softening.blob(&(x - m.x))
        })
    }

    pub fn current_density(&self, x: &Vec3, conv: Convention) -> crate::Result<Vec3> {
        let c = match (conv, self.c) {
            (Convention::Newtonian, _) => f64::INFINITY,
            (_, Some(c)) => c,
            (_, None) => {
                return Err(SolverError::Config("current convention needs c on the ensemble".into()))
            }
        };
        Ok(chunked_sum(self.len(), Vec3::zeros(), |i| {
            let m = &self.markers[i];
            m.w * self.softening.blob(&(x - m.x)) * velocity_map(&m.v, c, conv)
        }))
    }

    /// `(max |x_i|, max |v_i|)`.
    pub fn support_radius(&self) -> (f64, f64) {
        self.markers.iter().fold((0.0f64, 0.0f64), |(rx, rv), m| {
            (rx.max(m.x.norm()), rv.max(m.v.norm()))
        })
    }

    pub fn write_csv(&self, path: &Path) -> crate::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "t,x1,x2,x3,v1,v2,v3,w,w2")?;
        for m in &self.markers {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{}",
                crate::output::fmt17(self.t),
                crate::output::fmt17(m.x.x),
                crate::output::fmt17(m.x.y),
                crate::output::fmt17(m.x.z),
                crate::output::fmt17(m.v.x),
                crate::output::fmt17(m.v.y),
                crate::output::fmt17(m.v.z),
                crate::output::fmt17(m.w),
                crate::output::fmt17(m.w2),
            )?;
        }
        Ok(())
    }

    pub fn read_csv(path: &Path, softening: SofteningSpec, kind: Kind) -> crate::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut markers = Vec::new();
        let mut t = 0.0;
        for (k, line) in text.lines().enumerate() {
            if k == 0 || line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| SolverError::Config(format!("line {}: {e}", k + 1)))?;
            if vals.len() != 9 {
                return Err(SolverError::Config(format!("line {}: expected 9 columns", k + 1)));
            }
            t = vals[0];
            markers.push(Marker {
                x: Vec3::new(vals[1], vals[2], vals[3]),
                v: Vec3::new(vals[4], vals[5], vals[6]),
                w: vals[7],
                w2: vals[8],
            });
        }
        Ok(Ensemble { markers, softening, t, c: None, kind, cell_volume: 0.0 })
    }
}

pub fn velocity_map(v: &Vec3, c: f64, conv: Convention) -> Vec3 {
    match conv {
        Convention::Newtonian => *v,
        Convention::Darwin => (1.0 - 0.5 * v.norm_squared() / (c * c)) * v,
        Convention::Relativistic => relativistic_velocity(v, c),
    }
}

/// Markers at the midpoints of a regular `n^6` grid over the support box,
/// weighted by `f(node) * cell volume`. Zero and negligible weights are dropped.
pub fn sample_initial(
    profile: &InitialProfile,
    n_per_axis: usize,
    softening: SofteningSpec,
) -> crate::Result<Ensemble> {
    if n_per_axis < 2 {
        return Err(SolverError::Config("n_per_axis must be >= 2".into()));
    }
    let n = n_per_axis;
    let hx = 2.0 * profile.radius_x / n as f64;
    let hv = 2.0 * profile.radius_v / n as f64;
    let cell = hx.powi(3) * hv.powi(3);
    let node = |k: usize, h: f64, r: f64| -r + (k as f64 + 0.5) * h;
    let mut xs = Vec::new();
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let d = Vec3::new(node(i, hx, profile.radius_x), node(j, hx, profile.radius_x), node(k, hx, profile.radius_x));
                if d.norm() < profile.radius_x {
                    xs.push(profile.center_x + d);
                }
            }
        }
    }
    let mut vs = Vec::new();
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let d = Vec3::new(node(i, hv, profile.radius_v), node(j, hv, profile.radius_v), node(k, hv, profile.radius_v));
                if d.norm() < profile.radius_v {
                    vs.push(profile.center_v + d);
                }
            }
        }
    }
    let mut markers = Vec::new();
    for x in &xs {
        for v in &vs {
            let w = profile.eval(x, v) * cell;
            if w > 0.0 {
                markers.push(Marker { x: *x, v: *v, w, w2: 0.0 });
            }
        }
    }
    let wmax = markers.iter().fold(0.0f64, |a, m| a.max(m.w));
    markers.retain(|m| m.w >= 1e-16 * wmax);
    Ok(Ensemble { markers, softening, t: 0.0, c: None, kind: Kind::VP, cell_volume: cell })
}
