//! Order `1/c` and `1/c^2` objects: the magnetic field `B1`, the delta-f
//! solver for `f2`, both forms of `E2`, the composite Darwin triple, matched
//! initial fields and the exterior/interior/boundary split of `E^D`.
//!
//! `f1`, `E1` and `B2` vanish identically and are never computed.

use crate::ensemble::{Ensemble, InitialProfile};
use crate::history::{History, Level};
use crate::kernels::SofteningSpec;
use crate::quad::SphereRule;
use crate::sum::{chunked_sum, par_map};
use crate::vp::{f6, join, rk4_base, Stage, VPState};
use crate::{Mat3, Mat6, SolverError, Vec3, Vec6};
use std::ops::Add;

/// How the `rho2` contribution to `E2` is represented.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rho2Mode {
    /// `rho2 = -div(sum w xi delta)`: markers carry a position perturbation.
    Displacement,
    /// `rho2 = sum w2 delta`: the delta-f weights themselves.
    Weights,
}

/// `(ζ (3(ζ·v)^2 - v^2)/ρ^2 - (I + ζζ) a/ρ) / 2` with `z = X - x`, `ζ = z/ρ`.
#[inline]
pub fn e2_pair(soft: &SofteningSpec, z: &Vec3, v: &Vec3, a: &Vec3) -> Vec3 {
    let r = soft.rho(z);
    let zeta = z / r;
    let zv = zeta.dot(v);
    0.5 * zeta * (3.0 * zv * zv - v.norm_squared()) / (r * r) - 0.5 * (a + zeta * zeta.dot(a)) / r
}

/// The same contribution written as time derivatives of moments:
/// `½ d²/dt² ∇ρ(z) - d/dt (v/ρ)`, expanded along `z' = v`, `v' = a`.
#[inline]
pub fn e2_alt_pair(soft: &SofteningSpec, z: &Vec3, v: &Vec3, a: &Vec3) -> Vec3 {
    let r = soft.rho(z);
    let r3 = r * r * r;
    let zv = z.dot(v);
    let v2 = v.norm_squared();
    // Third derivative of rho contracted twice with v.
    let t3vv = -(z * v2 + 2.0 * v * zv) / r3 + 3.0 * z * zv * zv / (r3 * r * r);
    // Hessian of rho applied to a.
    let t2a = (a - z * (z.dot(a) / (r * r))) / r;
    0.5 * (t3vv + t2a) - (a / r - v * zv / r3)
}

/// `z × v / ρ^3` with `z = X - x`.
#[inline]
pub fn b1_pair(soft: &SofteningSpec, z: &Vec3, v: &Vec3) -> Vec3 {
    let r = soft.rho(z);
    z.cross(v) / (r * r * r)
}

/// Field of the `rho2` part of one marker at `z = X - x`.
#[inline]
fn rho2_pair(soft: &SofteningSpec, mode: Rho2Mode, z: &Vec3, w: f64, xi: &Vec3, w2: f64) -> Vec3 {
    match mode {
        Rho2Mode::Displacement => w * (soft.dipole(z) * xi),
        Rho2Mode::Weights => -w2 * soft.coulomb(z),
    }
}

#[derive(Debug, Clone, Copy)]
struct FieldSet {
    e0: Vec3,
    h: Mat3,
    e2: Vec3,
    b1: Vec3,
}

impl Add for FieldSet {
    type Output = FieldSet;
    fn add(self, o: FieldSet) -> FieldSet {
        FieldSet { e0: self.e0 + o.e0, h: self.h + o.h, e2: self.e2 + o.e2, b1: self.b1 + o.b1 }
    }
}

const ZERO_SET: FieldSet = FieldSet {
    e0: Vec3::new(0.0, 0.0, 0.0),
    h: Mat3::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0),
    e2: Vec3::new(0.0, 0.0, 0.0),
    b1: Vec3::new(0.0, 0.0, 0.0),
};

/// Every source of the order-`c^-2` fields at one instant.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub soft: SofteningSpec,
    pub mode: Rho2Mode,
    pub w: Vec<f64>,
    pub x: Vec<Vec3>,
    pub v: Vec<Vec3>,
    /// `E0` at each marker, self excluded.
    pub a: Vec<Vec3>,
    pub xi: Vec<Vec3>,
    pub w2: Vec<f64>,
}

impl Snapshot {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn e0(&self, x: &Vec3, skip: Option<usize>) -> Vec3 {
        crate::vp::e0_sum(&self.x, &self.w, &self.soft, x, skip)
    }

    pub fn b1(&self, x: &Vec3, skip: Option<usize>) -> Vec3 {
        chunked_sum(self.len(), Vec3::zeros(), |j| {
            if Some(j) == skip {
                return Vec3::zeros();
            }
            self.w[j] * b1_pair(&self.soft, &(self.x[j] - x), &self.v[j])
        })
    }

    fn rho2(&self, x: &Vec3, skip: Option<usize>) -> Vec3 {
        chunked_sum(self.len(), Vec3::zeros(), |j| {
            if Some(j) == skip {
                return Vec3::zeros();
            }
            rho2_pair(&self.soft, self.mode, &(self.x[j] - x), self.w[j], &self.xi[j], self.w2[j])
        })
    }

    /// `E2` from the moment form: velocity term, `E0 rho0` term and `rho2` term.
    pub fn e2(&self, x: &Vec3, skip: Option<usize>) -> Vec3 {
        self.e2_moments(x, skip) + self.rho2(x, skip)
    }

    /// The two `f0` terms of `E2` without the `rho2` part.
    pub fn e2_moments(&self, x: &Vec3, skip: Option<usize>) -> Vec3 {
        chunked_sum(self.len(), Vec3::zeros(), |j| {
            if Some(j) == skip {
                return Vec3::zeros();
            }
            self.w[j] * e2_pair(&self.soft, &(self.x[j] - x), &self.v[j], &self.a[j])
        })
    }

    /// `E2` from the time-derivative form.
    pub fn e2_alt(&self, x: &Vec3, skip: Option<usize>) -> Vec3 {
        let m = chunked_sum(self.len(), Vec3::zeros(), |j| {
            if Some(j) == skip {
                return Vec3::zeros();
            }
            self.w[j] * e2_alt_pair(&self.soft, &(self.x[j] - x), &self.v[j], &self.a[j])
        });
        m + self.rho2(x, skip)
    }

    /// `E0`, its gradient, `E2` and `B1` in one pass.
    fn all(&self, x: &Vec3, skip: Option<usize>) -> FieldSet {
        chunked_sum(self.len(), ZERO_SET, |j| {
            if Some(j) == skip {
                return ZERO_SET;
            }
            let z = self.x[j] - x;
            let w = self.w[j];
            let dk = self.soft.dipole(&z);
            let rho2 = match self.mode {
                Rho2Mode::Displacement => w * (dk * self.xi[j]),
                Rho2Mode::Weights => -self.w2[j] * self.soft.coulomb(&z),
            };
            FieldSet {
                e0: -w * self.soft.coulomb(&z),
                h: -w * dk,
                e2: w * e2_pair(&self.soft, &z, &self.v[j], &self.a[j]) + rho2,
                b1: w * b1_pair(&self.soft, &z, &self.v[j]),
            }
        })
    }
}

pub fn field_b1(s: &VPState, x: &Vec3) -> Vec3 {
    let soft = s.ensemble.softening;
    chunked_sum(s.ensemble.len(), Vec3::zeros(), |j| {
        let m = &s.ensemble.markers[j];
        m.w * b1_pair(&soft, &(m.x - x), &m.v)
    })
}

/// Time derivatives of the perturbation state of every marker.
#[derive(Debug, Clone)]
struct Rates {
    dxi: Vec<Vec3>,
    deta: Vec<Vec3>,
    djac: Vec<Mat6>,
    dw2: Vec<f64>,
}

/// Delta-f solver for the linearized system. Each marker carries, on top of
/// its `f0` characteristic, a phase-space displacement `(xi, eta)`, the
/// forward tangent map `jac` of its own characteristic, and the weight `w2`.
#[derive(Debug, Clone)]
pub struct LVPState {
    pub base: VPState,
    pub profile: InitialProfile,
    pub mode: Rho2Mode,
    pub xi: Vec<Vec3>,
    pub eta: Vec<Vec3>,
    pub jac: Vec<Mat6>,
    /// Initial phase-space label of each marker.
    pub z0: Vec<Vec6>,
    /// Knots: `xi`, its first two derivatives; aux channel `w2`.
    pub xi_log: History,
    pub t: f64,
    rates: Rates,
}

struct StageInput<'a> {
    x: &'a [Vec3],
    v: &'a [Vec3],
    e: &'a [Vec3],
    xi: &'a [Vec3],
    eta: &'a [Vec3],
    jac: &'a [Mat6],
    w2: &'a [f64],
}

fn lvp_rates(
    soft: &SofteningSpec,
    mode: Rho2Mode,
    ws: &[f64],
    profile: &InitialProfile,
    z0: &[Vec6],
    cell: f64,
    inp: &StageInput,
) -> Rates {
    let snap = Snapshot {
        soft: *soft,
        mode,
        w: ws.to_vec(),
        x: inp.x.to_vec(),
        v: inp.v.to_vec(),
        a: inp.e.to_vec(),
        xi: inp.xi.to_vec(),
        w2: inp.w2.to_vec(),
    };
    let per: Vec<(Vec3, Vec3, Mat6, f64)> = par_map(inp.x.len(), |i| {
        let fs = snap.all(&inp.x[i], Some(i));
        let v = inp.v[i];
        let drift = 0.5 * v.norm_squared() * v;
        let force = fs.e2 + v.cross(&fs.b1);
        let mut a = Mat6::zeros();
        a.fixed_view_mut::<3, 3>(0, 3).copy_from(&Mat3::identity());
        a.fixed_view_mut::<3, 3>(3, 0).copy_from(&fs.h);
        let g = grad_f0(profile, &inp.jac[i], &z0[i]);
        let (gx, gv) = f6(&g);
        (
            inp.eta[i] - drift,
            fs.h * inp.xi[i] + force,
            a * inp.jac[i],
            cell * (drift.dot(&gx) - force.dot(&gv)),
        )
    });
    let mut r = Rates { dxi: vec![], deta: vec![], djac: vec![], dw2: vec![] };
    for (a, b, c, d) in per {
        r.dxi.push(a);
        r.deta.push(b);
        r.djac.push(c);
        r.dw2.push(d);
    }
    r
}

/// `grad f0 = J^-T grad f°(z0)` at a marker with forward tangent `J`.
fn grad_f0(profile: &InitialProfile, jac: &Mat6, z0: &Vec6) -> Vec6 {
    let g = profile.gradient6(z0);
    jac.transpose().lu().solve(&g).unwrap_or_else(Vec6::zeros)
}

impl LVPState {
    pub fn new(ensemble: Ensemble, profile: InitialProfile, dt: f64, mode: Rho2Mode) -> Self {
        let mut base = VPState::new(ensemble, dt);
        for m in &mut base.ensemble.markers {
            m.w2 = 0.0;
        }
        let n = base.ensemble.len();
        let z0: Vec<Vec6> = base.ensemble.markers.iter().map(|m| join(&m.x, &m.v)).collect();
        let mut s = LVPState {
            t: base.t,
            base,
            profile,
            mode,
            xi: vec![Vec3::zeros(); n],
            eta: vec![Vec3::zeros(); n],
            jac: vec![Mat6::identity(); n],
            z0,
            xi_log: History::new(dt, n, 1),
            rates: Rates { dxi: vec![], deta: vec![], djac: vec![], dw2: vec![] },
        };
        s.rates = s.current_rates();
        s.log_level();
        s
    }

    /// Rescales the cached rates of `(xi, eta, w2)` by constant factors and
    /// maps the tangent rates through `jac`.
    pub(crate) fn scale_rates(&mut self, xi: f64, eta: f64, w2: f64, jac: impl Fn(&Mat6) -> Mat6) {
        let r = &mut self.rates;
        r.dxi.iter_mut().for_each(|d| *d *= xi);
        r.deta.iter_mut().for_each(|d| *d *= eta);
        r.dw2.iter_mut().for_each(|d| *d *= w2);
        r.djac.iter_mut().for_each(|d| *d = jac(d));
    }

    pub fn w2(&self) -> Vec<f64> {
        self.base.ensemble.markers.iter().map(|m| m.w2).collect()
    }

    fn current_rates(&self) -> Rates {
        let xs = self.base.positions();
        let vs: Vec<Vec3> = self.base.ensemble.markers.iter().map(|m| m.v).collect();
        let w2 = self.w2();
        lvp_rates(
            &self.base.ensemble.softening,
            self.mode,
            &self.base.weights(),
            &self.profile,
            &self.z0,
            self.base.ensemble.cell_volume,
            &StageInput { x: &xs, v: &vs, e: &self.base.acc, xi: &self.xi, eta: &self.eta, jac: &self.jac, w2: &w2 },
        )
    }

    fn log_level(&mut self) {
        let ms = &self.base.ensemble.markers;
        let ddxi: Vec<Vec3> = (0..ms.len())
            .map(|i| {
                let (v, a) = (ms[i].v, self.base.acc[i]);
                self.rates.deta[i] - (v.dot(&a) * v + 0.5 * v.norm_squared() * a)
            })
            .collect();
        self.xi_log.push(Level {
            t: self.t,
            x: self.xi.clone(),
            u: self.rates.dxi.clone(),
            a: ddxi,
            aux: self.w2(),
            aux_rate: self.rates.dw2.clone(),
        });
    }

    /// Sources at the current time.
    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            soft: self.base.ensemble.softening,
            mode: self.mode,
            w: self.base.weights(),
            x: self.base.positions(),
            v: self.base.ensemble.markers.iter().map(|m| m.v).collect(),
            a: self.base.acc.clone(),
            xi: self.xi.clone(),
            w2: self.w2(),
        }
    }

    /// Sources at a past time, interpolated from the logs.
    pub fn snapshot_at(&self, tt: f64) -> crate::Result<Snapshot> {
        let n = self.base.ensemble.len();
        let mut snap = Snapshot {
            soft: self.base.ensemble.softening,
            mode: self.mode,
            w: self.base.weights(),
            x: Vec::with_capacity(n),
            v: Vec::with_capacity(n),
            a: Vec::with_capacity(n),
            xi: Vec::with_capacity(n),
            w2: Vec::with_capacity(n),
        };
        let mut buf = [0.0];
        for j in 0..n {
            let b = self.base.flow_log.sample(j, tt)?;
            snap.x.push(b.x);
            snap.v.push(b.u);
            snap.a.push(b.a);
            snap.xi.push(self.xi_log.sample(j, tt)?.x);
            self.xi_log.aux(j, tt, &mut buf)?;
            snap.w2.push(buf[0]);
        }
        Ok(snap)
    }

    /// `max_i |w2_i + cell grad f0 · (xi_i, eta_i)|`: the weights against the
    /// displacement they must equal in exact arithmetic.
    pub fn identity_residual(&self) -> f64 {
        let cell = self.base.ensemble.cell_volume;
        (0..self.xi.len())
            .map(|i| {
                let g = grad_f0(&self.profile, &self.jac[i], &self.z0[i]);
                let d = join(&self.xi[i], &self.eta[i]);
                (self.base.ensemble.markers[i].w2 + cell * g.dot(&d)).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// One RK4 step of the base flow together with `(xi, eta, jac, w2)`. The base
/// positions and velocities are bitwise identical to [`crate::vp::step_vp`].
pub fn step_lvp(s: &mut LVPState, dt: f64) {
    let soft = s.base.ensemble.softening;
    let ws = s.base.weights();
    let cell = s.base.ensemble.cell_volume;
    let (mode, profile, z0) = (s.mode, s.profile, s.z0.clone());
    let (xi0, eta0, jac0, w20) = (s.xi.clone(), s.eta.clone(), s.jac.clone(), s.w2());
    let n = xi0.len();
    let first = s.rates.clone();
    let mut ks: Vec<Rates> = Vec::with_capacity(4);
    rk4_base(&mut s.base, dt, |st: Stage| {
        if st.k == 0 {
            ks.push(first.clone());
            return;
        }
        let h = if st.k == 3 { dt } else { 0.5 * dt };
        let p = &ks[st.k - 1];
        let xi: Vec<Vec3> = (0..n).map(|i| xi0[i] + h * p.dxi[i]).collect();
        let eta: Vec<Vec3> = (0..n).map(|i| eta0[i] + h * p.deta[i]).collect();
        let jac: Vec<Mat6> = (0..n).map(|i| jac0[i] + h * p.djac[i]).collect();
        let w2: Vec<f64> = (0..n).map(|i| w20[i] + h * p.dw2[i]).collect();
        let inp = StageInput { x: st.x, v: st.v, e: st.e, xi: &xi, eta: &eta, jac: &jac, w2: &w2 };
        ks.push(lvp_rates(&soft, mode, &ws, &profile, &z0, cell, &inp));
    });
    let comb = |a: &Vec3, b: &Vec3, c: &Vec3, d: &Vec3| (a + 2.0 * b + 2.0 * c + d) * (dt / 6.0);
    for i in 0..n {
        s.xi[i] = xi0[i] + comb(&ks[0].dxi[i], &ks[1].dxi[i], &ks[2].dxi[i], &ks[3].dxi[i]);
        s.eta[i] = eta0[i] + comb(&ks[0].deta[i], &ks[1].deta[i], &ks[2].deta[i], &ks[3].deta[i]);
        s.jac[i] = jac0[i]
            + (ks[0].djac[i] + 2.0 * ks[1].djac[i] + 2.0 * ks[2].djac[i] + ks[3].djac[i]) * (dt / 6.0);
        s.base.ensemble.markers[i].w2 =
            w20[i] + dt / 6.0 * (ks[0].dw2[i] + 2.0 * ks[1].dw2[i] + 2.0 * ks[2].dw2[i] + ks[3].dw2[i]);
    }
    s.t = s.base.t;
    s.rates = s.current_rates();
    s.log_level();
}

pub fn field_e2(s: &LVPState, x: &Vec3) -> Vec3 {
    s.snapshot().e2(x, None)
}

pub fn field_e2_alt(s: &LVPState, x: &Vec3) -> Vec3 {
    s.snapshot().e2_alt(x, None)
}

/// The `c`-independent pieces of the Darwin triple at one phase point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DarwinParts {
    pub f0: f64,
    pub f2: f64,
    pub e0: Vec3,
    pub e2: Vec3,
    pub b1: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DarwinTriple {
    pub f_d: f64,
    pub e_d: Vec3,
    pub b_d: Vec3,
}

impl DarwinParts {
    pub fn at(&self, c: f64) -> DarwinTriple {
        let ic2 = 1.0 / (c * c);
        DarwinTriple { f_d: self.f0 + ic2 * self.f2, e_d: self.e0 + ic2 * self.e2, b_d: self.b1 / c }
    }
}

pub fn darwin_triple(s: &LVPState, x: &Vec3, v: &Vec3, c: f64) -> crate::Result<DarwinTriple> {
    Ok(darwin_parts(s, x, v)?.at(c))
}

pub fn darwin_parts(s: &LVPState, x: &Vec3, v: &Vec3) -> crate::Result<DarwinParts> {
    let snap = s.snapshot();
    let (f0, f2) = f_parts(s, &[join(x, v)], s.t)?[0];
    Ok(DarwinParts { f0, f2, e0: snap.e0(x, None), e2: snap.e2(x, None), b1: snap.b1(x, None) })
}

/// One probe's state at the end of a backward linearized integration.
#[derive(Debug, Clone, Copy)]
struct BackEnd {
    z: Vec6,
    zeta: Vec6,
    m: Mat6,
}

/// Backward integration of the characteristic, the linearized displacement
/// `zeta` (zero at `t`) and the tangent map, over `grid` (descending).
/// Returns end states and, if asked, the `(tau, Z, M)` trail at every node.
#[allow(clippy::type_complexity)]
fn backward_linearized(
    s: &LVPState,
    probes: &[Vec6],
    grid: &[f64],
    record: bool,
) -> crate::Result<(Vec<BackEnd>, Vec<Vec<(f64, Vec6, Mat6)>>)> {
    let rhs = |snap: &Snapshot, st: &BackEnd| -> BackEnd {
        let (x, v) = f6(&st.z);
        let fs = snap.all(&x, None);
        let mut a = Mat6::zeros();
        a.fixed_view_mut::<3, 3>(0, 3).copy_from(&Mat3::identity());
        a.fixed_view_mut::<3, 3>(3, 0).copy_from(&fs.h);
        let src = join(&(-0.5 * v.norm_squared() * v), &(fs.e2 + v.cross(&fs.b1)));
        BackEnd { z: join(&v, &fs.e0), zeta: a * st.zeta + src, m: a * st.m }
    };
    let axpy = |y: &BackEnd, h: f64, k: &BackEnd| BackEnd { z: y.z + h * k.z, zeta: y.zeta + h * k.zeta, m: y.m + h * k.m };
    let mut st: Vec<BackEnd> =
        probes.iter().map(|z| BackEnd { z: *z, zeta: Vec6::zeros(), m: Mat6::identity() }).collect();
    let mut trail: Vec<Vec<(f64, Vec6, Mat6)>> = if record {
        st.iter().map(|b| vec![(grid[0], b.z, b.m)]).collect()
    } else {
        vec![]
    };
    for w in grid.windows(2) {
        let (ta, tb) = (w[0], w[1]);
        let h = tb - ta;
        let sa = s.snapshot_at(ta)?;
        let sm = s.snapshot_at(0.5 * (ta + tb))?;
        let sb = s.snapshot_at(tb)?;
        st = par_map(st.len(), |p| {
            let y = st[p];
            let k1 = rhs(&sa, &y);
            let k2 = rhs(&sm, &axpy(&y, 0.5 * h, &k1));
            let k3 = rhs(&sm, &axpy(&y, 0.5 * h, &k2));
            let k4 = rhs(&sb, &axpy(&y, h, &k3));
            BackEnd {
                z: y.z + h / 6.0 * (k1.z + 2.0 * k2.z + 2.0 * k3.z + k4.z),
                zeta: y.zeta + h / 6.0 * (k1.zeta + 2.0 * k2.zeta + 2.0 * k3.zeta + k4.zeta),
                m: y.m + (k1.m + 2.0 * k2.m + 2.0 * k3.m + k4.m) * (h / 6.0),
            }
        });
        if record {
            for (p, b) in st.iter().enumerate() {
                trail[p].push((tb, b.z, b.m));
            }
        }
    }
    Ok((st, trail))
}

/// `(f0, f2)` at phase points at time `t` by one backward pass:
/// `f2 = grad f°(Z(0)) · zeta(0)`.
pub fn f_parts(s: &LVPState, probes: &[Vec6], t: f64) -> crate::Result<Vec<(f64, f64)>> {
    check_time(s, t)?;
    let grid = crate::vp::backward_grid(t, s.base.flow_log.dt);
    let (end, _) = backward_linearized(s, probes, &grid, false)?;
    Ok(end
        .iter()
        .map(|b| (s.profile.eval6(&b.z), s.profile.gradient6(&b.z).dot(&b.zeta)))
        .collect())
}

/// `f2` by Duhamel's formula `-∫ grad f0 · S dτ` with `grad f0` transported
/// by the recorded tangent map; Simpson's rule on half steps.
pub fn f2_duhamel(s: &LVPState, probes: &[Vec6], t: f64) -> crate::Result<Vec<f64>> {
    check_time(s, t)?;
    if t == 0.0 {
        return Ok(vec![0.0; probes.len()]);
    }
    let n = 2 * (t / s.base.flow_log.dt - 1e-9).ceil().max(1.0) as usize;
    let grid: Vec<f64> = (0..=n).map(|k| t * (1.0 - k as f64 / n as f64)).collect();
    let (end, trail) = backward_linearized(s, probes, &grid, true)?;
    let snaps: Vec<Snapshot> = grid.iter().map(|&tt| s.snapshot_at(tt)).collect::<crate::Result<_>>()?;
    let h = t / n as f64;
    Ok(par_map(probes.len(), |p| {
        let z0 = end[p].z;
        let gz = s.profile.gradient6(&z0);
        let m0 = end[p].m;
        let integrand = |k: usize| -> f64 {
            let (_, z, m) = trail[p][k];
            let (x, v) = f6(&z);
            let fs = snaps[k].all(&x, None);
            let src = join(&(-0.5 * v.norm_squared() * v), &(fs.e2 + v.cross(&fs.b1)));
            let minv = m.try_inverse().unwrap_or_else(Mat6::zeros);
            let g = (m0 * minv).transpose() * gz;
            -g.dot(&src)
        };
        // grid runs from t down to 0; integrate over [0, t].
        let mut acc = 0.0;
        for k in (0..n).step_by(2) {
            acc += h / 3.0 * (integrand(k) + 4.0 * integrand(k + 1) + integrand(k + 2));
        }
        acc
    }))
}

fn check_time(s: &LVPState, t: f64) -> crate::Result<()> {
    if t < 0.0 || t > s.t + 1e-12 {
        return Err(SolverError::Range { t, lo: 0.0, hi: s.t });
    }
    Ok(())
}

/// Initial fields matched to the Darwin triple at `t = 0`:
/// `E° = E0 + c^-2 E2`, `B° = B1/c`. `rho2` vanishes there.
#[derive(Debug, Clone)]
pub struct MatchedFields {
    pub snapshot: Snapshot,
    pub c: f64,
}

impl MatchedFields {
    pub fn e(&self, x: &Vec3) -> Vec3 {
        let ic2 = if self.c.is_finite() { 1.0 / (self.c * self.c) } else { 0.0 };
        self.snapshot.e0(x, None) + ic2 * self.snapshot.e2_moments(x, None)
    }

    pub fn b(&self, x: &Vec3) -> Vec3 {
        if self.c.is_finite() {
            self.snapshot.b1(x, None) / self.c
        } else {
            Vec3::zeros()
        }
    }
}

pub fn matched_initial_fields(s0: &LVPState, c: f64) -> crate::Result<MatchedFields> {
    if s0.t != 0.0 {
        return Err(SolverError::Domain(format!("matched fields need t = 0, got {}", s0.t)));
    }
    Ok(MatchedFields { snapshot: s0.snapshot(), c })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decomposition {
    pub ext: Vec3,
    pub int: Vec3,
    pub bd: Vec3,
}

impl Decomposition {
    pub fn total(&self) -> Vec3 {
        self.ext + self.int + self.bd
    }
}

/// Cone-interior kernel of one source seen from `x` at the retarded time:
/// `z = X(s) - x`, momentum `v`, force `a`, times the retardation Jacobian.
pub fn interior_kernel(soft: &SofteningSpec, z: &Vec3, v: &Vec3, a: &Vec3, c: f64) -> Vec3 {
    let r = soft.rho(z);
    let zeta = z / r;
    let zv = zeta.dot(v);
    let ic = 1.0 / c;
    let jac = 1.0 / (1.0 + zv * ic);
    let r2 = r * r;
    let k = -zeta / r2
        + ic * (2.0 * zv * zeta - v) / r2
        + ic * ic * (v.norm_squared() * zeta + 2.0 * zv * v - 3.0 * zeta * zv * zv) / r2
        + ic * ic * (zeta * zeta.dot(a) - a) / r;
    jac * k
}

/// Exterior/interior/boundary split of `E^D(x, t)`. A marker is exterior
/// when its initial position lies outside the sphere `rho = ct` around `x`;
/// exterior markers contribute their Darwin field at `t`, interior ones the
/// expanded kernels at their retarded time on the `f0` history. In the
/// marker reading the moving-boundary flux is carried by the membership
/// switch, so `bd` is zero; [`bd_continuum`] gives the continuum term.
pub fn ed_decomposition(s: &LVPState, x: &Vec3, t: f64, c: f64) -> crate::Result<Decomposition> {
    check_time(s, t)?;
    let snap = s.snapshot_at(t)?;
    let soft = s.base.ensemble.softening;
    let log = &s.base.flow_log;
    let ic2 = 1.0 / (c * c);
    let n = snap.len();
    let parts: Vec<crate::Result<(Vec3, Vec3)>> = par_map(n, |j| {
        let w = snap.w[j];
        match log.retarded_root(j, x, t, c, &soft)? {
            None => {
                let z = snap.x[j] - x;
                let e = -w * soft.coulomb(&z)
                    + ic2
                        * (w * e2_pair(&soft, &z, &snap.v[j], &snap.a[j])
                            + rho2_pair(&soft, s.mode, &z, w, &snap.xi[j], snap.w2[j]));
                Ok((e, Vec3::zeros()))
            }
            Some(sr) => {
                let b = log.sample(j, sr)?;
                let xi = s.xi_log.sample(j, sr)?.x;
                let mut buf = [0.0];
                s.xi_log.aux(j, sr, &mut buf)?;
                let z = b.x - x;
                let e = w * interior_kernel(&soft, &z, &b.u, &b.a, c)
                    + ic2 * rho2_pair(&soft, s.mode, &z, w, &xi, buf[0]);
                Ok((Vec3::zeros(), e))
            }
        }
    });
    let parts: Vec<(Vec3, Vec3)> = parts.into_iter().collect::<crate::Result<_>>()?;
    Ok(Decomposition {
        ext: chunked_sum(n, Vec3::zeros(), |j| parts[j].0),
        int: chunked_sum(n, Vec3::zeros(), |j| parts[j].1),
        bd: Vec3::zeros(),
    })
}

/// Continuum boundary term: sphere `|z| = ct` integrals of the first and
/// second velocity moments of `f°`.
pub fn bd_continuum(profile: &InitialProfile, x: &Vec3, t: f64, c: f64, rule: &SphereRule) -> Vec3 {
    let r = c * t;
    if r == 0.0 {
        return Vec3::zeros();
    }
    let (m0, m2) = profile.velocity_moments();
    let cv = profile.center_v;
    rule.integrate_vec(|n| {
        let s = profile.spatial_factor(&(x + r * n));
        if s == 0.0 {
            return Vec3::zeros();
        }
        let j = s * m0 * cv;
        let p = s * (m0 * cv * cv.transpose() + m2 * Mat3::identity());
        let pn = p * n;
        r * (n * n.dot(&j) / c + (pn - n * n.dot(&pn)) / (c * c))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{sample_initial, Kind, Marker};
    use approx::assert_relative_eq;

    fn profile(cv: Vec3) -> InitialProfile {
        InitialProfile { center_x: Vec3::zeros(), center_v: cv, radius_x: 1.0, radius_v: 0.5, amplitude: 1.0 }
    }

    fn lvp(cv: Vec3, dt: f64, mode: Rho2Mode) -> LVPState {
        let p = profile(cv);
        let e = sample_initial(&p, 3, SofteningSpec::new(0.3).unwrap()).unwrap();
        LVPState::new(e, p, dt, mode)
    }

    fn single(x: Vec3, v: Vec3) -> VPState {
        let e = Ensemble {
            markers: vec![Marker { x, v, w: 1.0, w2: 0.0 }],
            softening: SofteningSpec::new(1e-4).unwrap(),
            t: 0.0,
            c: None,
            kind: Kind::VP,
            cell_volume: 1.0,
        };
        VPState::new(e, 0.1)
    }

    #[test]
    fn b1_single_marker_oracle() {
        let s = single(Vec3::zeros(), Vec3::new(0.0, 0.0, 1.0));
        let b = field_b1(&s, &Vec3::new(2.0, 0.0, 0.0));
        assert_relative_eq!(b, Vec3::new(0.0, 0.25, 0.0), max_relative = 1e-4);
        let s = single(Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(field_b1(&s, &Vec3::new(2.0, 0.0, 0.0)), Vec3::zeros());
        let s = single(Vec3::zeros(), Vec3::zeros());
        assert_eq!(field_b1(&s, &Vec3::new(0.3, 1.0, 0.0)), Vec3::zeros());
    }

    #[test]
    fn b1_vanishes_for_isotropic_profile() {
        let s = lvp(Vec3::zeros(), 0.05, Rho2Mode::Displacement);
        for x in [Vec3::new(0.3, 0.1, -0.2), Vec3::new(1.5, 0.0, 0.4)] {
            assert!(field_b1(&s.base, &x).norm() < 1e-14);
        }
    }

    #[test]
    fn e2_pair_forms_agree() {
        let soft = SofteningSpec::new(0.2).unwrap();
        let z = Vec3::new(0.3, -0.7, 0.4);
        let v = Vec3::new(0.5, 0.2, -0.9);
        let a = Vec3::new(-0.1, 0.8, 0.3);
        assert_relative_eq!(e2_pair(&soft, &z, &v, &a), e2_alt_pair(&soft, &z, &v, &a), max_relative = 1e-12);
    }

    #[test]
    fn e2_alt_pair_is_a_time_derivative() {
        // Along z(t) = z0 + v0 t + a t^2/2 the alt pair equals
        // ½ d²/dt² ∇ρ - d/dt (v/ρ), checked by finite differences.
        let soft = SofteningSpec::new(0.3).unwrap();
        let (z0, v0, a) = (Vec3::new(0.4, 0.1, -0.5), Vec3::new(0.3, -0.6, 0.2), Vec3::new(0.2, 0.1, 0.7));
        let zt = |t: f64| z0 + v0 * t + 0.5 * a * t * t;
        let grad = |t: f64| zt(t) / soft.rho(&zt(t));
        let jv = |t: f64| (v0 + a * t) / soft.rho(&zt(t));
        let h = 1e-4;
        let fd = 0.5 * (grad(h) - 2.0 * grad(0.0) + grad(-h)) / (h * h) - (jv(h) - jv(-h)) / (2.0 * h);
        assert_relative_eq!(fd, e2_alt_pair(&soft, &z0, &v0, &a), max_relative = 1e-6);
    }

    #[test]
    fn lone_marker_at_rest_has_no_e2() {
        let e = single(Vec3::zeros(), Vec3::zeros()).ensemble;
        let s = LVPState::new(e, profile(Vec3::zeros()), 0.1, Rho2Mode::Displacement);
        assert!(field_e2(&s, &Vec3::new(0.5, 0.2, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn base_flow_is_bitwise_vp() {
        let mut s = lvp(Vec3::new(0.2, 0.0, 0.0), 0.05, Rho2Mode::Displacement);
        let mut v = s.base.clone();
        for _ in 0..3 {
            step_lvp(&mut s, 0.05);
            crate::vp::step_vp(&mut v, 0.05);
        }
        for (a, b) in s.base.ensemble.markers.iter().zip(&v.ensemble.markers) {
            assert_eq!(a.x, b.x);
            assert_eq!(a.v, b.v);
        }
    }

    #[test]
    fn empty_base_keeps_zero_weights() {
        let p = InitialProfile { amplitude: 0.0, ..profile(Vec3::zeros()) };
        let e = sample_initial(&p, 3, SofteningSpec::new(0.3).unwrap()).unwrap();
        let mut s = LVPState::new(e, p, 0.1, Rho2Mode::Displacement);
        step_lvp(&mut s, 0.1);
        assert!(s.w2().is_empty());
    }

    #[test]
    fn weights_track_displacement_identity() {
        let mut s = lvp(Vec3::new(0.2, 0.1, 0.0), 0.05, Rho2Mode::Displacement);
        let mut last = 0.0;
        for _ in 0..10 {
            step_lvp(&mut s, 0.05);
            let wmax = s.w2().iter().fold(0.0f64, |a, b| a.max(b.abs()));
            last = s.identity_residual() / wmax;
        }
        assert!(last < 1e-6, "{last}");
    }

    #[test]
    fn t0_e2_has_only_f0_terms() {
        let s = lvp(Vec3::new(0.3, 0.0, 0.0), 0.05, Rho2Mode::Displacement);
        let snap = s.snapshot();
        let x = Vec3::new(0.4, 0.2, 0.1);
        assert_eq!(snap.e2(&x, None), snap.e2_moments(&x, None) + Vec3::zeros());
        let m = matched_initial_fields(&s, f64::INFINITY).unwrap();
        assert_eq!(m.e(&x), crate::vp::field_e0(&s.base, &x));
        let b4 = matched_initial_fields(&s, 4.0).unwrap().b(&x);
        let b8 = matched_initial_fields(&s, 8.0).unwrap().b(&x);
        assert_relative_eq!(b4 * 4.0, b8 * 8.0, max_relative = 1e-15);
    }

    #[test]
    fn two_forms_and_rho2_linearity() {
        let mut s = lvp(Vec3::new(0.3, 0.0, 0.1), 0.05, Rho2Mode::Displacement);
        for _ in 0..6 {
            step_lvp(&mut s, 0.05);
        }
        let probes = [Vec3::new(0.2, 0.0, 0.0), Vec3::new(-0.5, 0.3, 0.4), Vec3::new(1.5, -1.0, 0.2)];
        for x in &probes {
            let a = field_e2(&s, x);
            let b = field_e2_alt(&s, x);
            assert!((a - b).norm() <= 5e-3 * a.norm().max(1e-12));
        }
        let mut z = s.clone();
        z.xi.iter_mut().for_each(|v| *v = Vec3::zeros());
        let x = probes[1];
        let removed = field_e2(&s, &x) - field_e2(&z, &x);
        let rho2 = s.snapshot().rho2(&x, None);
        assert_relative_eq!(removed, rho2, max_relative = 1e-10);
    }

    #[test]
    fn darwin_scaling_is_exact() {
        let mut s = lvp(Vec3::new(0.3, 0.0, 0.0), 0.05, Rho2Mode::Displacement);
        step_lvp(&mut s, 0.05);
        let x = Vec3::new(0.2, 0.1, 0.0);
        let v = Vec3::new(0.25, 0.05, 0.0);
        let p = darwin_parts(&s, &x, &v).unwrap();
        let (a, b) = (p.at(4.0), p.at(8.0));
        assert_eq!(a.b_d * 4.0, p.b1);
        assert_eq!(b.b_d * 8.0, p.b1);
        assert_relative_eq!((a.e_d - p.e0) * 16.0, p.e2, max_relative = 1e-12);
        let inf = p.at(f64::INFINITY);
        assert_eq!((inf.f_d, inf.e_d, inf.b_d), (p.f0, p.e0, Vec3::zeros()));
        let t = darwin_triple(&s, &x, &v, 4.0).unwrap();
        assert_eq!(t, a);
    }

    #[test]
    fn f2_single_pass_matches_duhamel() {
        let mut s = lvp(Vec3::new(0.3, 0.0, 0.0), 0.05, Rho2Mode::Displacement);
        for _ in 0..8 {
            step_lvp(&mut s, 0.05);
        }
        let idx = [10usize, 100, 200];
        let probes: Vec<Vec6> =
            idx.iter().map(|&i| join(&s.base.ensemble.markers[i].x, &s.base.ensemble.markers[i].v)).collect();
        let fp = f_parts(&s, &probes, s.t).unwrap();
        let fd = f2_duhamel(&s, &probes, s.t).unwrap();
        let scale = fp.iter().fold(0.0f64, |a, b| a.max(b.1.abs()));
        for k in 0..probes.len() {
            assert!((fp[k].1 - fd[k]).abs() <= 1e-6 * scale, "{} vs {}", fp[k].1, fd[k]);
            // On a marker, f2 * cell matches its carried weight up to the
            // marker's own softened field, which the probe sees and the
            // marker excludes.
            let w2 = s.base.ensemble.markers[idx[k]].w2;
            let cell = s.base.ensemble.cell_volume;
            assert!((fp[k].1 * cell - w2).abs() <= 2e-2 * scale * cell, "{} vs {}", fp[k].1 * cell, w2);
        }
        assert_eq!(f_parts(&s, &probes, 0.0).unwrap()[0].1, 0.0);
    }

    #[test]
    fn decomposition_degenerate_limits() {
        let mut s = lvp(Vec3::new(0.3, 0.0, 0.0), 0.05, Rho2Mode::Displacement);
        let x = Vec3::new(0.3, 0.1, 0.0);
        let c = 8.0;
        let d = ed_decomposition(&s, &x, 0.0, c).unwrap();
        let snap = s.snapshot();
        let ed = snap.e0(&x, None) + snap.e2(&x, None) / (c * c);
        assert_eq!(d.int, Vec3::zeros());
        assert_relative_eq!(d.ext, ed, max_relative = 1e-13);
        for _ in 0..10 {
            step_lvp(&mut s, 0.05);
        }
        // Large c: every marker is inside the cone.
        let d = ed_decomposition(&s, &x, 0.5, 1e3).unwrap();
        assert_eq!(d.ext, Vec3::zeros());
        let rule = SphereRule::new(32, 64);
        assert_eq!(bd_continuum(&s.profile, &x, 0.0, c, &rule), Vec3::zeros());
    }

    #[test]
    fn decomposition_remainder_is_third_order() {
        let mut s = lvp(Vec3::new(0.3, 0.0, 0.0), 0.02, Rho2Mode::Displacement);
        for _ in 0..25 {
            step_lvp(&mut s, 0.02);
        }
        let probes = [Vec3::new(0.2, 0.1, 0.0), Vec3::new(-0.4, 0.3, 0.2)];
        let snap = s.snapshot();
        let mut pts = Vec::new();
        for &c in &[4.0, 8.0, 16.0, 32.0] {
            let err = probes
                .iter()
                .map(|x| {
                    let d = ed_decomposition(&s, x, s.t, c).unwrap();
                    let ed = snap.e0(x, None) + snap.e2(x, None) / (c * c);
                    (d.total() - ed).norm()
                })
                .fold(0.0, f64::max);
            pts.push((c, err));
        }
        let fit = crate::harness::fit_slope(&pts).unwrap();
        assert!(fit.slope <= -2.5, "{pts:?} slope {}", fit.slope);
    }
}
