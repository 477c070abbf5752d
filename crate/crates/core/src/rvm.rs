//! Relativistic Vlasov-Maxwell through the Glassey-Strauss representation.
//!
//! A marker whose initial position lies inside the backward cone of `(x, t)`
//! contributes its softened retarded field: the `T` kernels on the retarded
//! velocity and the `S` kernels on the recorded Lorentz force, each times the
//! retardation Jacobian `1/(1 + ζ·v̂/c)`. A marker outside the cone has not
//! yet been seen from `x`; it contributes the data term, the field of the
//! initial data carried along its `t = 0` Taylor expansion.
//!
//! With point membership the sphere integrals over `|z| = ct` (the `DT`
//! terms and the sphere part of the data term) have no markers on them and
//! vanish; the membership switch carries that flux instead.
//!
//! The history stores position, `v̂` and `dv̂/ds`, so the Lorentz force at a
//! retarded time is recovered exactly from the interpolant.

use crate::darwin::{e2_pair, interior_kernel, Decomposition, Rho2Mode, Snapshot};
use crate::ensemble::{Ensemble, InitialProfile, Kind};
use crate::history::{History, Level};
use crate::kernels::{force_from_vhat_rate, k_s, k_t, l_t, momentum_from_velocity, relativistic_velocity, vhat_rate_from_force, SofteningSpec};
use crate::sum::{par_map, try_chunked_sum};
use crate::vp::{backward_grid, f6, join, marker_fields, split};
use crate::{SolverError, Vec3, Vec6};
use std::ops::Add;

/// The four parts of one field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GsParts {
    pub data: Vec3,
    /// Cone-surface term; zero in the marker reading.
    pub dt: Vec3,
    pub t: Vec3,
    pub s: Vec3,
}

impl GsParts {
    pub const ZERO: GsParts = GsParts { data: Vec3::new(0.0, 0.0, 0.0), dt: Vec3::new(0.0, 0.0, 0.0), t: Vec3::new(0.0, 0.0, 0.0), s: Vec3::new(0.0, 0.0, 0.0) };

    pub fn total(&self) -> Vec3 {
        self.data + self.dt + self.t + self.s
    }
}

impl Add for GsParts {
    type Output = GsParts;
    fn add(self, o: GsParts) -> GsParts {
        GsParts { data: self.data + o.data, dt: self.dt + o.dt, t: self.t + o.t, s: self.s + o.s }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GsField {
    pub e: GsParts,
    pub b: GsParts,
}

impl Add for GsField {
    type Output = GsField;
    fn add(self, o: GsField) -> GsField {
        GsField { e: self.e + o.e, b: self.b + o.b }
    }
}

const ZERO_FIELD: GsField = GsField { e: GsParts::ZERO, b: GsParts::ZERO };

/// Retarded field of one marker: `z = X(s*) - x`, `v̂` and force `F = dv/ds`
/// at the emission time. Returns `(E_T, E_S, B_T, B_S)`.
pub fn lw_pair(soft: &SofteningSpec, c: f64, w: f64, z: &Vec3, vhat: &Vec3, force: &Vec3) -> (Vec3, Vec3, Vec3, Vec3) {
    let r = soft.rho(z);
    let zeta = z / r;
    let jac = 1.0 / (1.0 + zeta.dot(vhat) / c);
    let ks_f = k_s(&zeta, vhat, c) * force;
    let et = -w * jac / (r * r) * k_t(&zeta, vhat, c);
    let es = -w * jac / (c * c * r) * ks_f;
    let bt = w * jac / (c * r * r) * l_t(&zeta, vhat, c);
    let bs = w * jac / (c * c * r) * zeta.cross(&ks_f);
    (et, es, bt, bs)
}

/// Data-term contribution of one marker with initial separation
/// `z = X0 - x`, momentum `v` and acceleration `a = E0(X0)`, at time `t`.
pub fn data_pair(soft: &SofteningSpec, c: f64, w: f64, z: &Vec3, v: &Vec3, a: &Vec3, t: f64) -> (Vec3, Vec3) {
    let r = soft.rho(z);
    let r2 = r * r;
    let r3 = r2 * r;
    let r5 = r3 * r2;
    let zv = z.dot(v);
    let dk = soft.dipole(z);
    let d2k = (6.0 * v * zv + 3.0 * z * v.norm_squared()) / r5 - 15.0 * z * zv * zv / (r5 * r2);
    let k = -z / r3;
    let e = w * (k + t * (dk * v) + 0.5 * t * t * (d2k + dk * a)) + w / (c * c) * e2_pair(soft, z, v, a);
    let zxv = z.cross(v);
    let b = w / c * (zxv / r3 + t * (z.cross(a) / r3 - 3.0 * zv * zxv / r5));
    (e, b)
}

#[derive(Debug, Clone)]
pub struct RVMState {
    pub ensemble: Ensemble,
    pub t: f64,
    pub c: f64,
    /// Knots: position, `v̂`, `dv̂/ds`.
    pub history: History,
    /// Sources at `t = 0` for the data terms.
    pub initial: Snapshot,
    pub e_markers: Vec<Vec3>,
    pub b_markers: Vec<Vec3>,
}

impl RVMState {
    /// Starts from matched data `E° = E0 + c⁻² E2`, `B° = c⁻¹ B1` of the
    /// ensemble at `t = 0`.
    pub fn new(mut ensemble: Ensemble, c: f64, dt: f64) -> crate::Result<Self> {
        if ensemble.t != 0.0 {
            return Err(SolverError::Domain(format!("RVM starts at t = 0, got {}", ensemble.t)));
        }
        if !(c > 0.0) || !(dt > 0.0) {
            return Err(SolverError::Config(format!("need c > 0 and dt > 0, got c = {c}, dt = {dt}")));
        }
        ensemble.kind = Kind::RVM;
        ensemble.c = Some(c);
        let soft = ensemble.softening;
        let (xs, ws) = split(&ensemble);
        let n = xs.len();
        let initial = Snapshot {
            soft,
            mode: Rho2Mode::Displacement,
            a: marker_fields(&xs, &ws, &soft),
            w: ws,
            x: xs,
            v: ensemble.markers.iter().map(|m| m.v).collect(),
            xi: vec![Vec3::zeros(); n],
            w2: vec![0.0; n],
        };
        let mut history = History::new(dt, n, 0);
        history.max_extrapolation = dt;
        let mut s = RVMState { ensemble, t: 0.0, c, history, initial, e_markers: vec![], b_markers: vec![] };
        s.commit_level(None)?;
        Ok(s)
    }

    fn vhats(&self) -> Vec<Vec3> {
        self.ensemble.markers.iter().map(|m| relativistic_velocity(&m.v, self.c)).collect()
    }

    /// Appends the knot at the current time. The provisional rate lets
    /// roots that land inside the last step read a consistent interpolant;
    /// it is replaced once the fields at the new positions are known.
    fn commit_level(&mut self, provisional: Option<Vec<Vec3>>) -> crate::Result<()> {
        let vh = self.vhats();
        let n = vh.len();
        self.history.push(Level {
            t: self.t,
            x: self.ensemble.markers.iter().map(|m| m.x).collect(),
            u: vh.clone(),
            a: provisional.unwrap_or_else(|| vec![Vec3::zeros(); n]),
            aux: vec![],
            aux_rate: vec![],
        });
        let xs: Vec<Vec3> = self.ensemble.markers.iter().map(|m| m.x).collect();
        let f = fields_at(self, &xs, self.t, true)?;
        let c = self.c;
        let level = self.history.levels.last_mut().expect("level just pushed");
        for i in 0..n {
            let force = f[i].0 + vh[i].cross(&f[i].1) / c;
            level.a[i] = vhat_rate_from_force(&vh[i], &force, c);
        }
        self.e_markers = f.iter().map(|p| p.0).collect();
        self.b_markers = f.iter().map(|p| p.1).collect();
        Ok(())
    }

    /// Lorentz force on every marker at the current time.
    pub fn forces(&self) -> Vec<Vec3> {
        let vh = self.vhats();
        (0..vh.len()).map(|i| self.e_markers[i] + vh[i].cross(&self.b_markers[i]) / self.c).collect()
    }

    pub fn momentum(&self) -> Vec3 {
        crate::sum::chunked_sum(self.ensemble.len(), Vec3::zeros(), |i| {
            let m = &self.ensemble.markers[i];
            m.w * m.v
        })
    }

    fn outside_cone(&self, j: usize, x: &Vec3, t: f64) -> bool {
        self.initial.soft.rho(&(x - self.initial.x[j])) > self.c * t
    }
}

/// `s*` with `s* + rho(x - X(s*))/c = t`, or `None` outside the backward cone.
pub fn retarded_time(history: &History, j: usize, x: &Vec3, t: f64, c: f64, soft: &SofteningSpec) -> crate::Result<Option<f64>> {
    history.retarded_root(j, x, t, c, soft)
}

fn marker_field(s: &RVMState, j: usize, x: &Vec3, t: f64) -> crate::Result<GsField> {
    let c = s.c;
    let soft = s.initial.soft;
    let w = s.initial.w[j];
    let root = if s.outside_cone(j, x, t) { None } else { s.history.retarded_root(j, x, t, c, &soft)? };
    match root {
        None => {
            let z = s.initial.x[j] - x;
            let (e, b) = data_pair(&soft, c, w, &z, &s.initial.v[j], &s.initial.a[j], t);
            Ok(GsField { e: GsParts { data: e, ..GsParts::ZERO }, b: GsParts { data: b, ..GsParts::ZERO } })
        }
        Some(sr) => {
            let smp = s.history.sample(j, sr)?;
            let force = force_from_vhat_rate(&smp.u, &smp.a, c);
            let (et, es, bt, bs) = lw_pair(&soft, c, w, &(smp.x - x), &smp.u, &force);
            Ok(GsField { e: GsParts { t: et, s: es, ..GsParts::ZERO }, b: GsParts { t: bt, s: bs, ..GsParts::ZERO } })
        }
    }
}

fn field_sum(s: &RVMState, x: &Vec3, t: f64, skip: Option<usize>) -> crate::Result<GsField> {
    try_chunked_sum(s.initial.len(), ZERO_FIELD, |j| if Some(j) == skip { Ok(ZERO_FIELD) } else { marker_field(s, j, x, t) })
}

/// `(E, B)` at the listed points; with `markers` the i-th point excludes marker i.
fn fields_at(s: &RVMState, xs: &[Vec3], t: f64, markers: bool) -> crate::Result<Vec<(Vec3, Vec3)>> {
    let out = par_map(xs.len(), |i| {
        field_sum(s, &xs[i], t, markers.then_some(i)).map(|f| (f.e.total(), f.b.total()))
    });
    out.into_iter().collect()
}

fn check_time(s: &RVMState, t: f64) -> crate::Result<()> {
    if t < 0.0 || t > s.t + 1e-12 * (1.0 + s.t) {
        return Err(SolverError::Range { t, lo: 0.0, hi: s.t });
    }
    Ok(())
}

/// Both fields with their four parts.
pub fn field_gs(s: &RVMState, x: &Vec3, t: f64) -> crate::Result<GsField> {
    check_time(s, t)?;
    field_sum(s, x, t, None)
}

pub fn field_e_gs(s: &RVMState, x: &Vec3, t: f64) -> crate::Result<Vec3> {
    Ok(field_gs(s, x, t)?.e.total())
}

pub fn field_b_gs(s: &RVMState, x: &Vec3, t: f64) -> crate::Result<Vec3> {
    Ok(field_gs(s, x, t)?.b.total())
}

pub fn data_term_e(s: &RVMState, x: &Vec3, t: f64) -> Vec3 {
    data_terms(s, x, t).0
}

pub fn data_term_b(s: &RVMState, x: &Vec3, t: f64) -> Vec3 {
    data_terms(s, x, t).1
}

fn data_terms(s: &RVMState, x: &Vec3, t: f64) -> (Vec3, Vec3) {
    let init = &s.initial;
    let pair = crate::sum::chunked_sum(init.len(), Vec6::zeros(), |j| {
        if !s.outside_cone(j, x, t) {
            return Vec6::zeros();
        }
        let (e, b) = data_pair(&init.soft, s.c, init.w[j], &(init.x[j] - x), &init.v[j], &init.a[j], t);
        join(&e, &b)
    });
    f6(&pair)
}

/// One coupled RK4 step of `x' = v̂`, `v' = E + v̂ × B/c`. Stage fields read
/// the committed history; with `c dt <= delta` every retarded time of a
/// stage lies at or before the last knot.
pub fn step_rvm(s: &mut RVMState, dt: f64) -> crate::Result<()> {
    if (dt - s.history.dt).abs() > 1e-12 * s.history.dt {
        return Err(SolverError::Config(format!("step {dt} differs from the history spacing {}", s.history.dt)));
    }
    let c = s.c;
    let n = s.ensemble.len();
    let x0: Vec<Vec3> = s.ensemble.markers.iter().map(|m| m.x).collect();
    let v0: Vec<Vec3> = s.ensemble.markers.iter().map(|m| m.v).collect();
    let t0 = s.t;
    let k1x = s.vhats();
    let k1v = s.forces();
    let stage = |h: f64, kx: &[Vec3], kv: &[Vec3]| -> crate::Result<(Vec<Vec3>, Vec<Vec3>)> {
        let xs: Vec<Vec3> = (0..n).map(|i| x0[i] + h * kx[i]).collect();
        let vs: Vec<Vec3> = (0..n).map(|i| v0[i] + h * kv[i]).collect();
        let f = fields_at(s, &xs, t0 + h, true)?;
        let vh: Vec<Vec3> = vs.iter().map(|v| relativistic_velocity(v, c)).collect();
        let force = (0..n).map(|i| f[i].0 + vh[i].cross(&f[i].1) / c).collect();
        Ok((vh, force))
    };
    let (k2x, k2v) = stage(0.5 * dt, &k1x, &k1v)?;
    let (k3x, k3v) = stage(0.5 * dt, &k2x, &k2v)?;
    let (k4x, k4v) = stage(dt, &k3x, &k3v)?;
    for i in 0..n {
        let m = &mut s.ensemble.markers[i];
        m.x = x0[i] + dt / 6.0 * (k1x[i] + 2.0 * k2x[i] + 2.0 * k3x[i] + k4x[i]);
        m.v = v0[i] + dt / 6.0 * (k1v[i] + 2.0 * k2v[i] + 2.0 * k3v[i] + k4v[i]);
        let speed = relativistic_velocity(&m.v, c).norm();
        if speed >= 0.999 * c {
            return Err(SolverError::Superluminal { speed });
        }
    }
    s.t = t0 + dt;
    s.ensemble.t = s.t;
    let provisional = (0..n).map(|i| vhat_rate_from_force(&k4x[i], &k4v[i], c)).collect();
    s.commit_level(Some(provisional))
}

/// `E = E_ext + E_int + E_bd`: the data term outside the cone, the expanded
/// interior kernel on the retarded history inside it, and the boundary term
/// (zero for point membership, as in [`crate::darwin::ed_decomposition`]).
pub fn expanded_field_e(s: &RVMState, x: &Vec3, t: f64) -> crate::Result<Decomposition> {
    check_time(s, t)?;
    let c = s.c;
    let soft = s.initial.soft;
    let int = try_chunked_sum::<_, SolverError, _>(s.initial.len(), Vec3::zeros(), |j| {
        if s.outside_cone(j, x, t) {
            return Ok(Vec3::zeros());
        }
        let Some(sr) = s.history.retarded_root(j, x, t, c, &soft)? else {
            return Ok(Vec3::zeros());
        };
        let smp = s.history.sample(j, sr)?;
        let v = momentum_from_velocity(&smp.u, c);
        let force = force_from_vhat_rate(&smp.u, &smp.a, c);
        Ok(s.initial.w[j] * interior_kernel(&soft, &(smp.x - x), &v, &force, c))
    })?;
    Ok(Decomposition { ext: data_term_e(s, x, t), int, bd: Vec3::zeros() })
}

/// `f(x, v, t)` by RK4 along backward characteristics in the represented fields.
pub fn eval_f(s: &RVMState, probes: &[Vec6], t: f64, profile: &InitialProfile) -> crate::Result<Vec<f64>> {
    check_time(s, t)?;
    let c = s.c;
    let grid = backward_grid(t, s.history.dt);
    let rhs = |y: &Vec6, tt: f64| -> crate::Result<Vec6> {
        let (x, v) = f6(y);
        let f = field_sum(s, &x, tt, None)?;
        let vh = relativistic_velocity(&v, c);
        Ok(join(&vh, &(f.e.total() + vh.cross(&f.b.total()) / c)))
    };
    let out = par_map(probes.len(), |p| -> crate::Result<f64> {
        let mut y = probes[p];
        for w in grid.windows(2) {
            let (ta, tb) = (w[0], w[1]);
            let h = tb - ta;
            let tm = 0.5 * (ta + tb);
            let k1 = rhs(&y, ta)?;
            let k2 = rhs(&(y + 0.5 * h * k1), tm)?;
            let k3 = rhs(&(y + 0.5 * h * k2), tm)?;
            let k4 = rhs(&(y + h * k3), tb)?;
            y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        Ok(profile.eval6(&y))
    });
    out.into_iter().collect()
}
