//! Orchestration: matched multi-model runs, sup-norm comparisons, slope fits
//! and the rescaling checks.

use crate::config::RunConfig;
use crate::darwin::{ed_decomposition, f_parts, step_lvp, LVPState};
use crate::dvm::{eval_f_star, step_dvm, DVMState};
use crate::ensemble::{sample_initial, Ensemble, InitialProfile};
use crate::history::History;
use crate::kernels::{
    coulomb_direction_integral, coulomb_direction_quadrature, integrand_pair, sphere_mean_gradient, sphere_mean_inverse,
    sphere_mean_linear, Part, SofteningSpec,
};
use crate::quad::SphereRule;
use crate::rvm::{eval_f, expanded_field_e, field_gs, step_rvm, RVMState};
use crate::sum::par_map;
use crate::vp::{step_vp, VPState};
use crate::{Mat6, SolverError, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Least-squares fit of `log sup` against `log c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual in log space.
    pub residual: f64,
    pub points: usize,
    /// Only two usable points: the slope is exact and carries no residual.
    pub two_point: bool,
    /// Some points were zero or subnormal and were dropped.
    pub filtered: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FitError {
    #[error("fewer than two points above the noise floor")]
    BelowNoiseFloor,
}

pub fn fit_slope(pairs: &[(f64, f64)]) -> Result<SlopeFit, FitError> {
    let good: Vec<(f64, f64)> = pairs
        .iter()
        .filter(|(c, s)| *c > 0.0 && s.is_normal() && *s > 0.0)
        .map(|(c, s)| (c.ln(), s.ln()))
        .collect();
    if good.len() < 2 {
        return Err(FitError::BelowNoiseFloor);
    }
    let n = good.len() as f64;
    let mx = good.iter().map(|p| p.0).sum::<f64>() / n;
    let my = good.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = good.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = good.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(FitError::BelowNoiseFloor);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = good.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    Ok(SlopeFit {
        slope,
        intercept,
        residual: (rss / n).sqrt(),
        points: good.len(),
        two_point: good.len() == 2,
        filtered: good.len() < pairs.len(),
    })
}

// ----------------------------------------------------------------------------
// Closed-form integrals against quadrature.

#[derive(Debug, Clone, PartialEq)]
pub struct SelftestRow {
    pub name: &'static str,
    pub case: usize,
    pub value: f64,
    pub reference: f64,
    pub rel_err: f64,
    pub tol: f64,
}

impl SelftestRow {
    pub fn pass(&self) -> bool {
        self.rel_err <= self.tol
    }
}

/// Every closed-form sphere and velocity integral against a generic product
/// rule on the sphere (resp. the radial shell quadrature). Vector results are
/// compared in norm, relative to the natural scale of the integrand.
pub fn integrals_selftest() -> Vec<SelftestRow> {
    let rule = SphereRule::new(160, 320);
    let zs = [Vec3::new(0.0, 0.0, 2.0), Vec3::new(0.3, -0.4, 0.5), Vec3::new(1.0, 1.0, 1.0), Vec3::new(-0.2, 0.9, -1.4)];
    let rs = [0.4, 1.0, 2.5];
    let mut rows = Vec::new();
    let mut case = 0;
    for z in &zs {
        for &r in &rs {
            let n = z.norm();
            // Near the tie r = |z| the integrands are nearly singular.
            if (r - n).abs() < 0.25 * n.max(r) {
                continue;
            }
            let far = n.max(r);
            let quad_inv = rule.integrate(|w| 1.0 / (z - r * w).norm());
            let exact = sphere_mean_inverse(z, r);
            rows.push(SelftestRow { name: "sphere_mean_inverse", case, value: exact, reference: quad_inv, rel_err: (exact - quad_inv).abs() / quad_inv.abs(), tol: 1e-6 });
            let quad_grad = rule.integrate_vec(|w| {
                let d = z - r * w;
                d / d.norm().powi(3)
            });
            let exact = sphere_mean_gradient(z, r);
            let scale = 4.0 * std::f64::consts::PI / (far * far);
            rows.push(SelftestRow { name: "sphere_mean_gradient", case, value: exact.norm(), reference: quad_grad.norm(), rel_err: (exact - quad_grad).norm() / scale, tol: 1e-6 });
            let quad_lin = rule.integrate_vec(|w| {
                let d = z - r * w;
                d / d.norm()
            });
            let exact = sphere_mean_linear(z, r);
            rows.push(SelftestRow { name: "sphere_mean_linear", case, value: exact.norm(), reference: quad_lin.norm(), rel_err: (exact - quad_lin).norm() / (4.0 * std::f64::consts::PI), tol: 1e-6 });
            case += 1;
        }
    }
    for (k, z) in [Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.3, -0.2, 0.9), Vec3::new(2.0, 1.0, -1.0)].iter().enumerate() {
        let exact = coulomb_direction_integral(z).expect("nonzero z");
        let q = coulomb_direction_quadrature(z, 1e-3, 1e3).total();
        rows.push(SelftestRow {
            name: "coulomb_direction_integral",
            case: k,
            value: exact.norm(),
            reference: q.norm(),
            rel_err: (exact - q).norm() / exact.norm(),
            tol: 1e-3,
        });
    }
    rows
}

// ----------------------------------------------------------------------------
// Kernel expansions.

#[derive(Debug, Clone, PartialEq)]
pub struct KernelSlope {
    pub field: char,
    pub part: Part,
    /// Decay rate of the sup of the remainder over all samples.
    pub sup_slope: f64,
    /// Range of the per-sample decay rates.
    pub min_slope: f64,
    pub max_slope: f64,
    /// Samples whose remainder sat at round-off on some rung; they still
    /// enter the sup.
    pub skipped: usize,
}

/// Remainder `|exact - expanded|` of every cone kernel over the ladder on a
/// fixed random sample of inputs.
pub fn kernel_expansion_study(samples: usize, seed: u64, c_list: &[f64]) -> Vec<KernelSlope> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = |rng: &mut ChaCha8Rng| loop {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    };
    let inputs: Vec<(Vec3, Vec3, Vec3)> = (0..samples)
        .map(|_| {
            let z = unit(&mut rng);
            let v = unit(&mut rng) * rng.gen_range(0.1..1.0);
            let e = unit(&mut rng) * rng.gen_range(0.1..3.0);
            (z, v, e)
        })
        .collect();
    let mut out = Vec::new();
    for field in ['E', 'B'] {
        for part in [Part::DT, Part::T, Part::S] {
            let (mut lo, mut hi, mut skipped) = (f64::INFINITY, f64::NEG_INFINITY, 0);
            let mut sup = vec![0.0f64; c_list.len()];
            for (z, v, e) in &inputs {
                // The kernels themselves: the magnetic part of the force is a
                // separate c^-3 contribution.
                let pts: Vec<(f64, f64)> = c_list
                    .iter()
                    .map(|&c| {
                        let (ex, ap) = integrand_pair(field, part, z, v, e, &Vec3::zeros(), c);
                        (c, (ex - ap).norm())
                    })
                    .collect();
                for (s, p) in sup.iter_mut().zip(&pts) {
                    *s = s.max(p.1);
                }
                if pts.iter().any(|p| p.1 < 1e-13) {
                    skipped += 1;
                    continue;
                }
                match fit_slope(&pts) {
                    Ok(f) => {
                        lo = lo.min(-f.slope);
                        hi = hi.max(-f.slope);
                    }
                    Err(_) => skipped += 1,
                }
            }
            let pts: Vec<(f64, f64)> = c_list.iter().copied().zip(sup).collect();
            let sup_slope = fit_slope(&pts).map(|f| -f.slope).unwrap_or(f64::NAN);
            out.push(KernelSlope { field, part, sup_slope, min_slope: lo, max_slope: hi, skipped });
        }
    }
    out
}

// ----------------------------------------------------------------------------
// Rescaling.

/// The family `x -> x/eps`, `v -> sqrt(eps) v`, `t -> eps^(-3/2) t` that maps
/// the system at `c = eps^(-1/2)` onto `c = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scaling {
    pub eps: f64,
    /// Factor on lengths.
    pub len: f64,
    /// Factor on velocities.
    pub vel: f64,
    /// Factor on times.
    pub time: f64,
}

impl Scaling {
    pub fn new(eps: f64) -> Self {
        let root = eps.sqrt();
        Scaling { eps, len: 1.0 / eps, vel: root, time: 1.0 / (eps * root) }
    }

    /// Factor on rates `d/dt`.
    pub fn rate(&self) -> f64 {
        self.eps * self.vel
    }

    /// Factor on `E0` and `B1` (both `eps^2` times the field at `eps x`).
    pub fn field(&self) -> f64 {
        self.eps * self.eps
    }

    /// Phase-space map `diag(len, vel)` applied to a tangent matrix.
    fn tangent(&self, m: &Mat6) -> Mat6 {
        let mut out = *m;
        let up = self.len / self.vel;
        out.fixed_view_mut::<3, 3>(0, 3).scale_mut(up);
        out.fixed_view_mut::<3, 3>(3, 0).scale_mut(1.0 / up);
        out
    }
}

pub trait Rescale: Sized {
    fn rescaled(&self, s: &Scaling) -> Self;
}

/// Convenience wrapper.
pub fn rescale_state<T: Rescale>(state: &T, eps: f64) -> T {
    state.rescaled(&Scaling::new(eps))
}

impl Rescale for InitialProfile {
    fn rescaled(&self, s: &Scaling) -> Self {
        InitialProfile {
            center_x: self.center_x * s.len,
            center_v: self.center_v * s.vel,
            radius_x: self.radius_x * s.len,
            radius_v: self.radius_v * s.vel,
            amplitude: self.amplitude * s.eps * s.vel,
        }
    }
}

impl Rescale for Ensemble {
    fn rescaled(&self, s: &Scaling) -> Self {
        let mut e = self.clone();
        e.softening = SofteningSpec { delta: self.softening.delta * s.len };
        e.t = self.t * s.time;
        e.cell_volume = self.cell_volume * s.time;
        for m in &mut e.markers {
            m.x *= s.len;
            m.v *= s.vel;
            m.w2 *= s.eps;
        }
        e
    }
}

/// Scales every channel of a history; `f` holds the factors on `x`, `u`,
/// `a`, aux values and aux rates.
fn scale_history(h: &History, s: &Scaling, f: [f64; 5]) -> History {
    let mut out = h.clone();
    out.dt = h.dt * s.time;
    out.max_extrapolation = h.max_extrapolation * s.time;
    for l in &mut out.levels {
        l.t *= s.time;
        l.x.iter_mut().for_each(|v| *v *= f[0]);
        l.u.iter_mut().for_each(|v| *v *= f[1]);
        l.a.iter_mut().for_each(|v| *v *= f[2]);
        l.aux.iter_mut().for_each(|v| *v *= f[3]);
        l.aux_rate.iter_mut().for_each(|v| *v *= f[4]);
    }
    out
}

impl Rescale for VPState {
    fn rescaled(&self, s: &Scaling) -> Self {
        VPState {
            ensemble: self.ensemble.rescaled(s),
            t: self.t * s.time,
            flow_log: scale_history(&self.flow_log, s, [s.len, s.vel, s.field(), 1.0, 1.0]),
            acc: self.acc.iter().map(|a| a * s.field()).collect(),
        }
    }
}

/// `xi` is invariant, `eta` and `w2` scale like `eps^(3/2)` and `eps`.
impl Rescale for LVPState {
    fn rescaled(&self, s: &Scaling) -> Self {
        let r = s.rate();
        let eta = s.eps * s.vel * s.vel * s.eps;
        let mut out = self.clone();
        out.base = self.base.rescaled(s);
        out.profile = self.profile.rescaled(s);
        out.t = self.t * s.time;
        out.eta = self.eta.iter().map(|e| e * (s.eps * s.vel)).collect();
        out.jac = self.jac.iter().map(|m| s.tangent(m)).collect();
        out.z0 = self
            .z0
            .iter()
            .map(|z| {
                let mut y = *z;
                y.fixed_rows_mut::<3>(0).scale_mut(s.len);
                y.fixed_rows_mut::<3>(3).scale_mut(s.vel);
                y
            })
            .collect();
        out.xi_log = scale_history(&self.xi_log, s, [1.0, r, r * r, s.eps, s.eps * r]);
        out.scale_rates(r, eta, s.eps * r, |m| s.tangent(m) * r);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RescaleReport {
    pub eps: f64,
    /// Rescaled run against the run from rescaled data, relative sup.
    pub residual: f64,
    /// The same distance between the original run and its `dt/2` rerun.
    pub discretization_error: f64,
    /// `rescale(rescale(s, eps), 1/2)` against `rescale(s, eps/2)`.
    pub group_residual: f64,
    pub pass: bool,
}

fn rel_sup<T, F: Fn(&T) -> f64>(a: &[T], b: &[T], diff: impl Fn(&T, &T) -> f64, norm: F) -> f64 {
    let scale = a.iter().map(&norm).fold(0.0f64, f64::max);
    let d = a.iter().zip(b).map(|(x, y)| diff(x, y)).fold(0.0f64, f64::max);
    if scale == 0.0 {
        d
    } else {
        d / scale
    }
}

/// Largest relative difference between two LVP states in marker data and in
/// `E0`, `B1`, `E2` at the probes.
pub fn lvp_distance(a: &LVPState, b: &LVPState, probes: &[Vec3]) -> f64 {
    let (ma, mb) = (&a.base.ensemble.markers, &b.base.ensemble.markers);
    let vd = |x: &Vec3, y: &Vec3| (x - y).norm();
    let vn = |x: &Vec3| x.norm();
    let xa: Vec<Vec3> = ma.iter().map(|m| m.x).collect();
    let xb: Vec<Vec3> = mb.iter().map(|m| m.x).collect();
    let va: Vec<Vec3> = ma.iter().map(|m| m.v).collect();
    let vb: Vec<Vec3> = mb.iter().map(|m| m.v).collect();
    let (sa, sb) = (a.snapshot(), b.snapshot());
    let fa: Vec<[Vec3; 3]> = par_map(probes.len(), |i| [sa.e0(&probes[i], None), sa.b1(&probes[i], None), sa.e2(&probes[i], None)]);
    let fb: Vec<[Vec3; 3]> = par_map(probes.len(), |i| [sb.e0(&probes[i], None), sb.b1(&probes[i], None), sb.e2(&probes[i], None)]);
    let mut d = rel_sup(&xa, &xb, vd, vn).max(rel_sup(&va, &vb, vd, vn));
    d = d.max(rel_sup(&a.w2(), &b.w2(), |x, y| (x - y).abs(), |x| x.abs()));
    for k in 0..3 {
        let pa: Vec<Vec3> = fa.iter().map(|f| f[k]).collect();
        let pb: Vec<Vec3> = fb.iter().map(|f| f[k]).collect();
        d = d.max(rel_sup(&pa, &pb, vd, vn));
    }
    d
}

pub fn initial_ensemble(cfg: &RunConfig, n_per_axis: usize) -> crate::Result<Ensemble> {
    sample_initial(&cfg.profile(), n_per_axis, SofteningSpec::new(cfg.discretization.delta)?)
}

pub fn initial_lvp(cfg: &RunConfig, n_per_axis: usize, dt: f64) -> crate::Result<LVPState> {
    Ok(LVPState::new(initial_ensemble(cfg, n_per_axis)?, cfg.profile(), dt, cfg.rho2_mode()?))
}

fn advance_lvp(s: &mut LVPState, dt: f64, steps: usize) {
    for _ in 0..steps {
        step_lvp(s, dt);
    }
}

pub fn run_lvp(cfg: &RunConfig, n_per_axis: usize) -> crate::Result<LVPState> {
    let dt = cfg.discretization.dt;
    let mut s = initial_lvp(cfg, n_per_axis, dt)?;
    advance_lvp(&mut s, dt, cfg.steps());
    Ok(s)
}

/// Runs the Darwin pair at `c = eps^(-1/2)` and rescales it, runs the pair
/// again from the rescaled data, and compares. In exact arithmetic the two
/// coincide; the residual is measured against the `dt`-halving error.
pub fn rescale_equivalence_check(cfg: &RunConfig, eps: f64) -> crate::Result<RescaleReport> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(SolverError::Config(format!("eps must lie in (0, 1], got {eps}")));
    }
    let n = cfg.discretization.n_per_axis;
    let dt = cfg.discretization.dt;
    let steps = cfg.steps();
    let sc = Scaling::new(eps);
    let probes = cfg.box_probes();
    let a0 = initial_lvp(cfg, n, dt)?;
    let mut a = a0.clone();
    advance_lvp(&mut a, dt, steps);
    let mut b = a0.rescaled(&sc);
    advance_lvp(&mut b, dt * sc.time, steps);
    let scaled_probes: Vec<Vec3> = probes.iter().map(|p| p * sc.len).collect();
    let residual = lvp_distance(&a.rescaled(&sc), &b, &scaled_probes);
    let mut half = initial_lvp(cfg, n, 0.5 * dt)?;
    advance_lvp(&mut half, 0.5 * dt, 2 * steps);
    let discretization_error = lvp_distance(&a, &half, &probes);
    let twice = a.rescaled(&sc).rescaled(&Scaling::new(0.5));
    let once = a.rescaled(&Scaling::new(0.5 * eps));
    let group_residual = lvp_distance(&once, &twice, &scaled_probes.iter().map(|p| p * 2.0).collect::<Vec<_>>());
    let bound = if eps == 1.0 { 1e-12 } else { cfg.tolerances.rescale_factor * discretization_error };
    let pass = residual <= bound && group_residual <= 1e-12;
    Ok(RescaleReport { eps, residual, discretization_error, group_residual, pass })
}

// ----------------------------------------------------------------------------
// Matched multi-model runs.

pub fn run_rvm(cfg: &RunConfig, n_per_axis: usize, c: f64) -> crate::Result<RVMState> {
    let dt = cfg.discretization.dt;
    let mut s = RVMState::new(initial_ensemble(cfg, n_per_axis)?, c, dt)?;
    for _ in 0..cfg.steps() {
        step_rvm(&mut s, dt)?;
    }
    Ok(s)
}

pub fn run_dvm(cfg: &RunConfig, n_per_axis: usize, c: f64) -> crate::Result<DVMState> {
    let dt = cfg.discretization.dt;
    let mut s = DVMState::new(initial_ensemble(cfg, n_per_axis)?, c, dt, cfg.dvm_options())?;
    for _ in 0..cfg.steps() {
        step_dvm(&mut s, dt)?;
    }
    Ok(s)
}

/// Fields on the probe box and `f` on the phase probes at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub t: f64,
    pub e: Vec<Vec3>,
    pub b: Vec<Vec3>,
    pub f: Vec<f64>,
}

/// The `c`-independent pieces of the Darwin triple at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct DarwinSamples {
    pub t: f64,
    pub e0: Vec<Vec3>,
    pub e2: Vec<Vec3>,
    pub b1: Vec<Vec3>,
    pub f0: Vec<f64>,
    pub f2: Vec<f64>,
}

impl DarwinSamples {
    pub fn at(&self, c: f64) -> Samples {
        let ic2 = 1.0 / (c * c);
        Samples {
            t: self.t,
            e: self.e0.iter().zip(&self.e2).map(|(a, b)| a + ic2 * b).collect(),
            b: self.b1.iter().map(|b| b / c).collect(),
            f: self.f0.iter().zip(&self.f2).map(|(a, b)| a + ic2 * b).collect(),
        }
    }
}

pub fn darwin_samples(s: &LVPState, cfg: &RunConfig) -> crate::Result<Vec<DarwinSamples>> {
    let boxp = cfg.box_probes();
    let phase = cfg.phase_probes();
    cfg.check_times()
        .into_iter()
        .map(|t| {
            let snap = s.snapshot_at(t)?;
            let fields: Vec<[Vec3; 3]> = par_map(boxp.len(), |i| [snap.e0(&boxp[i], None), snap.e2(&boxp[i], None), snap.b1(&boxp[i], None)]);
            let f = f_parts(s, &phase, t)?;
            Ok(DarwinSamples {
                t,
                e0: fields.iter().map(|f| f[0]).collect(),
                e2: fields.iter().map(|f| f[1]).collect(),
                b1: fields.iter().map(|f| f[2]).collect(),
                f0: f.iter().map(|p| p.0).collect(),
                f2: f.iter().map(|p| p.1).collect(),
            })
        })
        .collect()
}

pub fn rvm_samples(s: &RVMState, cfg: &RunConfig) -> crate::Result<Vec<Samples>> {
    let boxp = cfg.box_probes();
    let phase = cfg.phase_probes();
    let profile = cfg.profile();
    cfg.check_times()
        .into_iter()
        .map(|t| {
            let fields: Vec<crate::Result<(Vec3, Vec3)>> = par_map(boxp.len(), |i| {
                field_gs(s, &boxp[i], t).map(|f| (f.e.total(), f.b.total()))
            });
            let fields: Vec<(Vec3, Vec3)> = fields.into_iter().collect::<crate::Result<_>>()?;
            Ok(Samples {
                t,
                e: fields.iter().map(|f| f.0).collect(),
                b: fields.iter().map(|f| f.1).collect(),
                f: eval_f(s, &phase, t, &profile)?,
            })
        })
        .collect()
}

pub fn dvm_samples(s: &DVMState, cfg: &RunConfig) -> crate::Result<Vec<Samples>> {
    let boxp = cfg.box_probes();
    let phase = cfg.phase_probes();
    let profile = cfg.profile();
    cfg.check_times()
        .into_iter()
        .map(|t| {
            let src = s.sources_at(t)?;
            let fields: Vec<(Vec3, Vec3)> = par_map(boxp.len(), |i| (src.e(&boxp[i], None), src.b(&boxp[i], None)));
            Ok(Samples {
                t,
                e: fields.iter().map(|f| f.0).collect(),
                b: fields.iter().map(|f| f.1).collect(),
                f: eval_f_star(s, &phase, t, &profile)?,
            })
        })
        .collect()
}

/// Sup norms of the differences over all probes and times.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sups {
    pub f: f64,
    pub e: f64,
    pub b: f64,
}

pub fn sups(a: &[Samples], b: &[Samples]) -> Sups {
    let mut s = Sups { f: 0.0, e: 0.0, b: 0.0 };
    for (x, y) in a.iter().zip(b) {
        debug_assert_eq!(x.t, y.t);
        for (p, q) in x.e.iter().zip(&y.e) {
            s.e = s.e.max((p - q).norm());
        }
        for (p, q) in x.b.iter().zip(&y.b) {
            s.b = s.b.max((p - q).norm());
        }
        for (p, q) in x.f.iter().zip(&y.f) {
            s.f = s.f.max((p - q).abs());
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelComparison {
    pub c: f64,
    pub markers: usize,
    /// RVM against the Darwin triple.
    pub darwin: Sups,
    /// `sup |E - E0|` and `sup |B|` of RVM against Vlasov-Poisson.
    pub newtonian_e: f64,
    pub newtonian_b: f64,
    /// DVM against RVM.
    pub dvm: Option<Sups>,
    /// `sup |E^D - (ext + int + bd)|` for the Darwin split.
    pub darwin_decomposition: f64,
    /// `sup |E - (ext + int + bd)|` for the RVM split.
    pub rvm_decomposition: f64,
    pub dvm_iterations: Option<usize>,
}

fn compare_with(cfg: &RunConfig, n: usize, lvp: &LVPState, ds: &[DarwinSamples], c: f64, with_dvm: bool) -> crate::Result<ModelComparison> {
    let rvm = run_rvm(cfg, n, c)?;
    let rs = rvm_samples(&rvm, cfg)?;
    let darwin: Vec<Samples> = ds.iter().map(|d| d.at(c)).collect();
    let vp: Vec<Samples> = ds.iter().map(|d| d.at(f64::INFINITY)).collect();
    let newton = sups(&rs, &vp);
    let boxp = cfg.box_probes();
    let mut darwin_decomposition = 0.0f64;
    let mut rvm_decomposition = 0.0f64;
    for (k, t) in cfg.check_times().into_iter().enumerate() {
        for (i, x) in boxp.iter().enumerate() {
            let d = ed_decomposition(lvp, x, t, c)?;
            darwin_decomposition = darwin_decomposition.max((darwin[k].e[i] - d.total()).norm());
            let r = expanded_field_e(&rvm, x, t)?;
            rvm_decomposition = rvm_decomposition.max((rs[k].e[i] - r.total()).norm());
        }
    }
    let (dvm, dvm_iterations) = if with_dvm {
        let d = run_dvm(cfg, n, c)?;
        (Some(sups(&dvm_samples(&d, cfg)?, &rs)), Some(d.stats().iterations))
    } else {
        (None, None)
    };
    Ok(ModelComparison {
        c,
        markers: rvm.ensemble.len(),
        darwin: sups(&rs, &darwin),
        newtonian_e: newton.e,
        newtonian_b: newton.b,
        dvm,
        darwin_decomposition,
        rvm_decomposition,
        dvm_iterations,
    })
}

/// RVM against the Darwin triple (and VP, and DVM when enabled) at one `c`,
/// all from the same markers, softening, step and probes.
pub fn compare_models(cfg: &RunConfig, c: f64) -> crate::Result<ModelComparison> {
    let n = cfg.discretization.n_per_axis;
    let lvp = run_lvp(cfg, n)?;
    let ds = darwin_samples(&lvp, cfg)?;
    compare_with(cfg, n, &lvp, &ds, c, cfg.ladder.with_dvm)
}

/// Quantities fitted against `c`, with the exponent each should decay at.
pub const FITTED: [&str; 10] =
    ["darwin_f", "darwin_e", "darwin_b", "newtonian_e", "newtonian_b", "dvm_f", "dvm_e", "dvm_b", "decomp_darwin", "decomp_rvm"];

fn quantity(r: &ModelComparison, name: &str) -> Option<f64> {
    Some(match name {
        "darwin_f" => r.darwin.f,
        "darwin_e" => r.darwin.e,
        "darwin_b" => r.darwin.b,
        "newtonian_e" => r.newtonian_e,
        "newtonian_b" => r.newtonian_b,
        "dvm_f" => r.dvm?.f,
        "dvm_e" => r.dvm?.e,
        "dvm_b" => r.dvm?.b,
        "decomp_darwin" => r.darwin_decomposition,
        "decomp_rvm" => r.rvm_decomposition,
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub rows: Vec<ModelComparison>,
    /// The same ladder at the guard resolution, if run.
    pub guard: Vec<ModelComparison>,
}

impl ConvergenceReport {
    /// Decay rate (minus the fitted slope) of one quantity.
    pub fn fit(&self, name: &str, guard: bool) -> Result<SlopeFit, FitError> {
        let rows = if guard { &self.guard } else { &self.rows };
        let pts: Vec<(f64, f64)> = rows.iter().filter_map(|r| quantity(r, name).map(|q| (r.c, q))).collect();
        fit_slope(&pts).map(|f| SlopeFit { slope: -f.slope, ..f })
    }

    pub fn rows_table(&self) -> crate::output::Table {
        let mut t = crate::output::Table::new(&[
            "markers", "c", "sup_df", "sup_dE", "sup_dB", "newton_dE", "newton_B", "dvm_df", "dvm_dE", "dvm_dB", "decomp_darwin", "decomp_rvm",
        ]);
        for r in self.rows.iter().chain(&self.guard) {
            let d = r.dvm.unwrap_or(Sups { f: f64::NAN, e: f64::NAN, b: f64::NAN });
            t.push_f64(&[
                r.markers as f64, r.c, r.darwin.f, r.darwin.e, r.darwin.b, r.newtonian_e, r.newtonian_b, d.f, d.e, d.b, r.darwin_decomposition, r.rvm_decomposition,
            ]);
        }
        t
    }

    /// One row per fitted quantity: rate, residual, point count, flags and
    /// the guard-resolution rate when available.
    pub fn fits_table(&self) -> crate::output::Table {
        let mut t = crate::output::Table::new(&["quantity", "rate", "residual", "points", "two_point", "filtered", "guard_rate"]);
        for name in FITTED {
            let g = self.fit(name, true).map(|f| crate::output::fmt17(f.slope)).unwrap_or_else(|_| "NA".into());
            match self.fit(name, false) {
                Ok(f) => t.push(vec![
                    name.into(),
                    crate::output::fmt17(f.slope),
                    crate::output::fmt17(f.residual),
                    f.points.to_string(),
                    f.two_point.to_string(),
                    f.filtered.to_string(),
                    g,
                ]),
                Err(e) => t.push(vec![name.into(), "NA".into(), "NA".into(), "0".into(), "false".into(), "true".into(), format!("{g} ({e})")]),
            }
        }
        t
    }
}

/// [`compare_models`] over the ladder, the Darwin pair run once per
/// resolution, plus the refinement guard (without DVM) when configured.
pub fn convergence_study(cfg: &RunConfig) -> crate::Result<ConvergenceReport> {
    if cfg.ladder.c_list.len() < 2 {
        return Err(SolverError::Config("convergence study needs at least two values of c".into()));
    }
    let ladder = |n: usize, with_dvm: bool| -> crate::Result<Vec<ModelComparison>> {
        let lvp = run_lvp(cfg, n)?;
        let ds = darwin_samples(&lvp, cfg)?;
        cfg.ladder.c_list.iter().map(|&c| compare_with(cfg, n, &lvp, &ds, c, with_dvm)).collect()
    };
    let rows = ladder(cfg.discretization.n_per_axis, cfg.ladder.with_dvm)?;
    // The guard only concerns the Darwin rates.
    let guard = match cfg.ladder.guard_n_per_axis {
        0 => vec![],
        n => ladder(n, false)?,
    };
    Ok(ConvergenceReport { rows, guard })
}

// ----------------------------------------------------------------------------
// Energy of the Darwin-Vlasov-Maxwell flow.

/// `max_t |H(t) - H(0)| / |H(0)|` over `[0, t_end]`.
pub fn dvm_energy_drift(cfg: &RunConfig, c: f64, dt: f64, t_end: f64) -> crate::Result<f64> {
    let mut s = DVMState::new(initial_ensemble(cfg, cfg.discretization.n_per_axis)?, c, dt, cfg.dvm_options())?;
    let h0 = crate::dvm::energy(&s).total;
    let steps = (t_end / dt).round() as usize;
    let mut drift = 0.0f64;
    for _ in 0..steps {
        step_dvm(&mut s, dt)?;
        drift = drift.max((crate::dvm::energy(&s).total - h0).abs() / h0.abs());
    }
    Ok(drift)
}

/// VP-only reference for the Newtonian limit: `E0` on the box at the check times.
pub fn vp_box_fields(cfg: &RunConfig) -> crate::Result<Vec<Vec<Vec3>>> {
    let dt = cfg.discretization.dt;
    let mut s = VPState::new(initial_ensemble(cfg, cfg.discretization.n_per_axis)?, dt);
    for _ in 0..cfg.steps() {
        step_vp(&mut s, dt);
    }
    let boxp = cfg.box_probes();
    cfg.check_times()
        .into_iter()
        .map(|t| {
            let xs = crate::vp::positions_at(&s.flow_log, t)?;
            let ws = s.weights();
            Ok(boxp.iter().map(|x| crate::vp::e0_sum(&xs, &ws, &s.ensemble.softening, x, None)).collect())
        })
        .collect()
}
