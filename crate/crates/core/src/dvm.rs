//! Darwin-Vlasov-Maxwell: instantaneous fields from a fixed point over the
//! marker forces, coupled RK4 for `x' = (1 - v^2/2c^2) v`, `v' = E* + v x B*/c`,
//! and the conserved energy.
//!
//! The correction term of `E*` uses the Darwin velocity `ṽ` and its time
//! derivative `ȧ` in place of `v` and the force (`quartic_terms`). The two
//! choices differ at order `c^-4`; with `ṽ` the marker energy below is
//! conserved exactly by the continuous-time flow.

use crate::darwin::e2_pair;
use crate::ensemble::{Ensemble, InitialProfile, Kind};
use crate::history::{History, Level};
use crate::kernels::SofteningSpec;
use crate::quad::SphereRule;
use crate::sum::{chunked_sum, par_map};
use crate::vp::{backward_grid, f6, join};
use crate::{Mat3, SolverError, Vec3, Vec6};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DvmOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub quartic_terms: bool,
}

impl Default for DvmOptions {
    fn default() -> Self {
        DvmOptions { tol: 1e-12, max_iter: 64, quartic_terms: true }
    }
}

/// Lowest accepted speed of light.
pub const C_MIN: f64 = 4.0;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterStats {
    pub iterations: usize,
    pub residual: f64,
    /// Relative change after each sweep.
    pub history: Vec<f64>,
}

#[inline]
pub fn darwin_velocity(v: &Vec3, c: f64) -> Vec3 {
    (1.0 - 0.5 * v.norm_squared() / (c * c)) * v
}

/// `d ṽ/dt` for `v' = f`.
#[inline]
pub fn darwin_velocity_rate(v: &Vec3, f: &Vec3, c: f64) -> Vec3 {
    let ic2 = 1.0 / (c * c);
    (1.0 - 0.5 * ic2 * v.norm_squared()) * f - ic2 * v.dot(f) * v
}

/// Inverse of [`darwin_velocity`] on the branch `|v| < c sqrt(2/3)`.
pub fn momentum_from_darwin_velocity(vt: &Vec3, c: f64) -> crate::Result<Vec3> {
    let target = vt.norm();
    let smax = c * (2.0f64 / 3.0).sqrt();
    if target >= smax * (1.0 - smax * smax / (2.0 * c * c)) {
        return Err(SolverError::Superluminal { speed: target });
    }
    if target == 0.0 {
        return Ok(Vec3::zeros());
    }
    let mut s = target;
    for _ in 0..50 {
        let g = s * (1.0 - 0.5 * s * s / (c * c)) - target;
        let dg = 1.0 - 1.5 * s * s / (c * c);
        let next = s - g / dg;
        if (next - s).abs() <= 1e-16 * s {
            s = next;
            break;
        }
        s = next;
    }
    Ok(vt * (s / target))
}

/// Recover the force from `ȧ` (a 3x3 linear solve).
pub fn force_from_rate(v: &Vec3, adot: &Vec3, c: f64) -> Vec3 {
    let ic2 = 1.0 / (c * c);
    let m = Mat3::identity() * (1.0 - 0.5 * ic2 * v.norm_squared()) - ic2 * v * v.transpose();
    m.lu().solve(adot).unwrap_or(*adot)
}

/// Sources of `E*`, `B*` at one instant.
#[derive(Debug, Clone)]
pub struct DvmSources {
    pub soft: SofteningSpec,
    pub c: f64,
    pub quartic: bool,
    pub w: Vec<f64>,
    pub x: Vec<Vec3>,
    pub v: Vec<Vec3>,
    pub vt: Vec<Vec3>,
    pub force: Vec<Vec3>,
    pub adot: Vec<Vec3>,
}

impl DvmSources {
    fn velocity_part(&self, z: &Vec3, j: usize) -> Vec3 {
        if self.quartic {
            e2_pair(&self.soft, z, &self.vt[j], &Vec3::zeros())
        } else {
            let v = &self.v[j];
            (1.0 - 0.5 * v.norm_squared() / (self.c * self.c)) * e2_pair(&self.soft, z, v, &Vec3::zeros())
        }
    }

    fn accel(&self, j: usize) -> Vec3 {
        if self.quartic {
            self.adot[j]
        } else {
            self.force[j]
        }
    }

    pub fn e(&self, x: &Vec3, skip: Option<usize>) -> Vec3 {
        let ic2 = 1.0 / (self.c * self.c);
        chunked_sum(self.x.len(), Vec3::zeros(), |j| {
            if Some(j) == skip {
                return Vec3::zeros();
            }
            let z = self.x[j] - x;
            let r = self.soft.rho(&z);
            let zeta = z / r;
            let q = self.accel(j);
            self.w[j]
                * (-self.soft.coulomb(&z)
                    + ic2 * (self.velocity_part(&z, j) - 0.5 * (q + zeta * zeta.dot(&q)) / r))
        })
    }

    pub fn b(&self, x: &Vec3, skip: Option<usize>) -> Vec3 {
        chunked_sum(self.x.len(), Vec3::zeros(), |j| {
            if Some(j) == skip {
                return Vec3::zeros();
            }
            self.w[j] * crate::darwin::b1_pair(&self.soft, &(self.x[j] - x), &self.vt[j])
        }) / self.c
    }
}

/// Converged fields: field evaluators plus the marker values.
#[derive(Debug, Clone)]
pub struct DvmFields {
    pub sources: DvmSources,
    pub e_markers: Vec<Vec3>,
    pub b_markers: Vec<Vec3>,
    pub stats: IterStats,
}

impl DvmFields {
    pub fn e(&self, x: &Vec3) -> Vec3 {
        self.sources.e(x, None)
    }

    pub fn b(&self, x: &Vec3) -> Vec3 {
        self.sources.b(x, None)
    }
}

/// Marker-local fixed point `F_i = E*(X_i; F) + v_i x B*(X_i)/c`. The field
/// part that does not involve the forces is summed once; each sweep only
/// re-sums the force-dependent term.
pub fn solve_fields_fixed_point(
    e: &Ensemble,
    opts: &DvmOptions,
    guess: Option<&[Vec3]>,
) -> crate::Result<DvmFields> {
    let c = e.c.ok_or_else(|| SolverError::Config("DVM ensemble needs c".into()))?;
    let xs: Vec<Vec3> = e.markers.iter().map(|m| m.x).collect();
    let vs: Vec<Vec3> = e.markers.iter().map(|m| m.v).collect();
    solve_at(&xs, &vs, &e.markers.iter().map(|m| m.w).collect::<Vec<_>>(), e.softening, c, opts, guess)
}

fn solve_at(
    xs: &[Vec3],
    vs: &[Vec3],
    ws: &[f64],
    soft: SofteningSpec,
    c: f64,
    opts: &DvmOptions,
    guess: Option<&[Vec3]>,
) -> crate::Result<DvmFields> {
    if c < C_MIN {
        return Err(SolverError::Config(format!("c = {c} is below the minimum {C_MIN}")));
    }
    let n = xs.len();
    let ic2 = 1.0 / (c * c);
    let mut src = DvmSources {
        soft,
        c,
        quartic: opts.quartic_terms,
        w: ws.to_vec(),
        x: xs.to_vec(),
        v: vs.to_vec(),
        vt: vs.iter().map(|v| darwin_velocity(v, c)).collect(),
        force: vec![Vec3::zeros(); n],
        adot: vec![Vec3::zeros(); n],
    };
    let b_markers: Vec<Vec3> = par_map(n, |i| src.b(&xs[i], Some(i)));
    let fixed: Vec<Vec3> = par_map(n, |i| {
        chunked_sum(n, Vec3::zeros(), |j| {
            if j == i {
                return Vec3::zeros();
            }
            let z = xs[j] - xs[i];
            ws[j] * (-soft.coulomb(&z) + ic2 * src.velocity_part(&z, j))
        }) + vs[i].cross(&b_markers[i]) / c
    });
    let mut force: Vec<Vec3> = match guess {
        Some(g) if g.len() == n => g.to_vec(),
        _ => crate::vp::marker_fields(xs, ws, &soft),
    };
    let mut stats = IterStats::default();
    loop {
        src.force = force.clone();
        src.adot = (0..n).map(|j| darwin_velocity_rate(&vs[j], &force[j], c)).collect();
        let next: Vec<Vec3> = par_map(n, |i| {
            fixed[i]
                + ic2
                    * chunked_sum(n, Vec3::zeros(), |j| {
                        if j == i {
                            return Vec3::zeros();
                        }
                        let z = xs[j] - xs[i];
                        let r = soft.rho(&z);
                        let zeta = z / r;
                        let q = src.accel(j);
                        -0.5 * ws[j] * (q + zeta * zeta.dot(&q)) / r
                    })
        });
        let scale = next.iter().fold(0.0f64, |a, f| a.max(f.norm())).max(f64::MIN_POSITIVE);
        let change = (0..n).fold(0.0f64, |a, i| a.max((next[i] - force[i]).norm())) / scale;
        stats.iterations += 1;
        stats.history.push(change);
        stats.residual = change;
        force = next;
        if change <= opts.tol || n == 0 {
            break;
        }
        if stats.iterations >= opts.max_iter {
            return Err(SolverError::NoConvergence { iters: stats.iterations, residual: change });
        }
    }
    src.force = force.clone();
    src.adot = (0..n).map(|j| darwin_velocity_rate(&vs[j], &force[j], c)).collect();
    let e_markers: Vec<Vec3> = (0..n).map(|i| force[i] - vs[i].cross(&b_markers[i]) / c).collect();
    Ok(DvmFields { sources: src, e_markers, b_markers, stats })
}

#[derive(Debug, Clone)]
pub struct DVMState {
    pub ensemble: Ensemble,
    pub t: f64,
    pub c: f64,
    pub opts: DvmOptions,
    pub fields: DvmFields,
    /// Knots: position, `ṽ`, `ȧ`.
    pub flow_log: History,
}

impl DVMState {
    pub fn new(mut ensemble: Ensemble, c: f64, dt: f64, opts: DvmOptions) -> crate::Result<Self> {
        ensemble.kind = Kind::DVM;
        ensemble.c = Some(c);
        let fields = solve_fields_fixed_point(&ensemble, &opts, None)?;
        let n = ensemble.len();
        let mut s = DVMState { t: ensemble.t, ensemble, c, opts, fields, flow_log: History::new(dt, n, 0) };
        s.log_level();
        Ok(s)
    }

    fn log_level(&mut self) {
        self.flow_log.push(Level {
            t: self.t,
            x: self.fields.sources.x.clone(),
            u: self.fields.sources.vt.clone(),
            a: self.fields.sources.adot.clone(),
            aux: vec![],
            aux_rate: vec![],
        });
    }

    pub fn stats(&self) -> &IterStats {
        &self.fields.stats
    }

    pub fn momentum(&self) -> Vec3 {
        chunked_sum(self.ensemble.len(), Vec3::zeros(), |i| {
            let m = &self.ensemble.markers[i];
            m.w * m.v
        })
    }

    /// Sources at a logged time.
    pub fn sources_at(&self, tt: f64) -> crate::Result<DvmSources> {
        let n = self.ensemble.len();
        let mut src = self.fields.sources.clone();
        for j in 0..n {
            let s = self.flow_log.sample(j, tt)?;
            let v = momentum_from_darwin_velocity(&s.u, self.c)?;
            src.x[j] = s.x;
            src.vt[j] = s.u;
            src.adot[j] = s.a;
            src.v[j] = v;
            src.force[j] = force_from_rate(&v, &s.a, self.c);
        }
        Ok(src)
    }
}

/// One coupled RK4 step; every stage solves the fixed point at the stage
/// positions and momenta, warm-started from the previous stage.
pub fn step_dvm(s: &mut DVMState, dt: f64) -> crate::Result<()> {
    let c = s.c;
    let soft = s.ensemble.softening;
    let ws: Vec<f64> = s.ensemble.markers.iter().map(|m| m.w).collect();
    let x0: Vec<Vec3> = s.ensemble.markers.iter().map(|m| m.x).collect();
    let v0: Vec<Vec3> = s.ensemble.markers.iter().map(|m| m.v).collect();
    let n = x0.len();
    let k1x = s.fields.sources.vt.clone();
    let k1v = s.fields.sources.force.clone();
    let stage = |h: f64, kx: &[Vec3], kv: &[Vec3], guess: &[Vec3]| -> crate::Result<(Vec<Vec3>, Vec<Vec3>)> {
        let xs: Vec<Vec3> = (0..n).map(|i| x0[i] + h * kx[i]).collect();
        let vs: Vec<Vec3> = (0..n).map(|i| v0[i] + h * kv[i]).collect();
        let f = solve_at(&xs, &vs, &ws, soft, c, &s.opts, Some(guess))?;
        Ok((f.sources.vt, f.sources.force))
    };
    let (k2x, k2v) = stage(0.5 * dt, &k1x, &k1v, &k1v)?;
    let (k3x, k3v) = stage(0.5 * dt, &k2x, &k2v, &k2v)?;
    let (k4x, k4v) = stage(dt, &k3x, &k3v, &k3v)?;
    for i in 0..n {
        let m = &mut s.ensemble.markers[i];
        m.x = x0[i] + dt / 6.0 * (k1x[i] + 2.0 * k2x[i] + 2.0 * k3x[i] + k4x[i]);
        m.v = v0[i] + dt / 6.0 * (k1v[i] + 2.0 * k2v[i] + 2.0 * k3v[i] + k4v[i]);
        let speed = m.v.norm();
        if speed >= 0.999 * c {
            return Err(SolverError::Superluminal { speed });
        }
    }
    s.t += dt;
    s.ensemble.t = s.t;
    s.fields = solve_fields_fixed_point(&s.ensemble, &s.opts, Some(&k4v))?;
    s.log_level();
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DvmEnergy {
    pub total: f64,
    pub kinetic: f64,
    pub electrostatic: f64,
    pub magnetic: f64,
}

/// `Σ w (v²/2 - v⁴/8c²) + ½ ΣΣ w w/ρ + ¼ c⁻² ΣΣ w w ṽ_i·(I + ζζ) ṽ_j/ρ`,
/// pairs `i ≠ j`.
pub fn energy(s: &DVMState) -> DvmEnergy {
    let src = &s.fields.sources;
    let (c, soft) = (s.c, src.soft);
    let n = src.x.len();
    let kinetic = chunked_sum(n, 0.0, |i| {
        let v2 = src.v[i].norm_squared();
        src.w[i] * (0.5 * v2 - 0.125 * v2 * v2 / (c * c))
    });
    let pairs: Vec<(f64, f64)> = par_map(n, |i| {
        let es = chunked_sum(n, 0.0, |j| if i == j { 0.0 } else { src.w[j] * soft.inv(&(src.x[j] - src.x[i])) });
        let mag = chunked_sum(n, 0.0, |j| {
            if i == j {
                return 0.0;
            }
            let z = src.x[j] - src.x[i];
            let r = soft.rho(&z);
            let zeta = z / r;
            src.w[j] * (src.vt[i].dot(&src.vt[j]) + zeta.dot(&src.vt[i]) * zeta.dot(&src.vt[j])) / r
        });
        (src.w[i] * es, src.w[i] * mag)
    });
    let electrostatic = 0.5 * chunked_sum(n, 0.0, |i| pairs[i].0);
    let magnetic = 0.25 / (c * c) * chunked_sum(n, 0.0, |i| pairs[i].1);
    DvmEnergy { total: kinetic + electrostatic + magnetic, kinetic, electrostatic, magnetic }
}

/// Grid estimate of `(1/8π) ∫ |B*|^2` on a cube, self energies included.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridMagnetic {
    pub value: f64,
    /// Analytic softened self energy `Σ π w² ṽ²/(16 δ c²)`.
    pub self_energy: f64,
    /// Share of the integrand on the outer shell of cells.
    pub boundary_share: f64,
    pub box_too_small: bool,
}

pub fn grid_magnetic_energy(s: &DVMState, half_width: f64, cells: usize) -> GridMagnetic {
    let src = &s.fields.sources;
    let h = 2.0 * half_width / cells as f64;
    let node = |k: usize| -half_width + (k as f64 + 0.5) * h;
    let rows: Vec<(f64, f64)> = par_map(cells * cells, |ij| {
        let (i, j) = (ij / cells, ij % cells);
        let mut total = 0.0;
        let mut shell = 0.0;
        for k in 0..cells {
            let x = Vec3::new(node(i), node(j), node(k));
            let b2 = src.b(&x, None).norm_squared();
            total += b2;
            if i == 0 || j == 0 || k == 0 || i == cells - 1 || j == cells - 1 || k == cells - 1 {
                shell += b2;
            }
        }
        (total, shell)
    });
    let vol = h * h * h / (8.0 * std::f64::consts::PI);
    let total = vol * chunked_sum(rows.len(), 0.0, |k| rows[k].0);
    let shell = vol * chunked_sum(rows.len(), 0.0, |k| rows[k].1);
    let delta = src.soft.delta;
    let self_energy = chunked_sum(src.x.len(), 0.0, |j| {
        std::f64::consts::PI * src.w[j] * src.w[j] * src.vt[j].norm_squared() / (16.0 * delta * s.c * s.c)
    });
    let share = if total > 0.0 { shell / total } else { 0.0 };
    GridMagnetic { value: total, self_energy, boundary_share: share, box_too_small: share > 1e-6 }
}

/// `f*(x, v, t)` by backward characteristics in the logged DVM fields.
pub fn eval_f_star(s: &DVMState, probes: &[Vec6], t: f64, profile: &InitialProfile) -> crate::Result<Vec<f64>> {
    if t > s.t + 1e-12 || t < 0.0 {
        return Err(SolverError::Range { t, lo: 0.0, hi: s.t });
    }
    let c = s.c;
    let grid = backward_grid(t, s.flow_log.dt);
    let mut z: Vec<Vec6> = probes.to_vec();
    let rhs = |src: &DvmSources, y: &Vec6| -> Vec6 {
        let (x, v) = f6(y);
        join(&darwin_velocity(&v, c), &(src.e(&x, None) + v.cross(&src.b(&x, None)) / c))
    };
    for w in grid.windows(2) {
        let (ta, tb) = (w[0], w[1]);
        let h = tb - ta;
        let sa = s.sources_at(ta)?;
        let sm = s.sources_at(0.5 * (ta + tb))?;
        let sb = s.sources_at(tb)?;
        z = par_map(z.len(), |p| {
            let y = z[p];
            let k1 = rhs(&sa, &y);
            let k2 = rhs(&sm, &(y + 0.5 * h * k1));
            let k3 = rhs(&sm, &(y + 0.5 * h * k2));
            let k4 = rhs(&sb, &(y + h * k3));
            y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        });
    }
    Ok(z.iter().map(|y| profile.eval6(y)).collect())
}

/// Sphere-quadrature check that `B*` is divergence free, by the flux
/// through a sphere of radius `r` around `x`.
pub fn bstar_flux(s: &DVMState, x: &Vec3, r: f64, rule: &SphereRule) -> f64 {
    rule.integrate(|n| r * r * s.fields.b(&(x + r * n)).dot(n))
}

pub fn field_bstar(e: &Ensemble, x: &Vec3) -> crate::Result<Vec3> {
    let c = e.c.ok_or_else(|| SolverError::Config("DVM ensemble needs c".into()))?;
    let soft = e.softening;
    Ok(chunked_sum(e.len(), Vec3::zeros(), |j| {
        let m = &e.markers[j];
        m.w * crate::darwin::b1_pair(&soft, &(m.x - x), &darwin_velocity(&m.v, c))
    }) / c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{sample_initial, Marker};
    use approx::assert_relative_eq;

    fn bump(c: f64, cv: Vec3, dt: f64) -> (DVMState, InitialProfile) {
        let p = InitialProfile { center_x: Vec3::zeros(), center_v: cv, radius_x: 1.0, radius_v: 0.5, amplitude: 1.0 };
        let e = sample_initial(&p, 3, SofteningSpec::new(0.3).unwrap()).unwrap();
        (DVMState::new(e, c, dt, DvmOptions::default()).unwrap(), p)
    }

    fn one(v: Vec3, c: f64) -> Ensemble {
        Ensemble {
            markers: vec![Marker { x: Vec3::zeros(), v, w: 1.0, w2: 0.0 }],
            softening: SofteningSpec::new(1e-4).unwrap(),
            t: 0.0,
            c: Some(c),
            kind: Kind::DVM,
            cell_volume: 1.0,
        }
    }

    #[test]
    fn bstar_oracles() {
        let e = one(Vec3::zeros(), 4.0);
        assert_eq!(field_bstar(&e, &Vec3::new(1.0, 2.0, 0.0)).unwrap(), Vec3::zeros());
        let v = Vec3::new(0.0, 0.0, 1.0);
        let e = one(v, 4.0);
        let x = Vec3::new(2.0, 0.0, 0.0);
        let b = field_bstar(&e, &x).unwrap();
        assert_relative_eq!(b, Vec3::new(0.0, 0.25, 0.0) * (1.0 - 0.5 / 16.0) / 4.0, max_relative = 1e-4);
        let mut vp = crate::vp::VPState::new(one(darwin_velocity(&v, 4.0), 4.0), 0.1);
        vp.ensemble.c = None;
        assert_relative_eq!(b * 4.0, crate::darwin::field_b1(&vp, &x), max_relative = 1e-15);
        assert!(field_bstar(&one(v, 4.0).with_kind(Kind::DVM, None), &x).is_err());
    }

    #[test]
    fn velocity_maps_invert() {
        let v = Vec3::new(0.7, -0.2, 1.1);
        let c = 4.0;
        let vt = darwin_velocity(&v, c);
        assert_relative_eq!(momentum_from_darwin_velocity(&vt, c).unwrap(), v, max_relative = 1e-14);
        let f = Vec3::new(0.3, 0.9, -0.4);
        assert_relative_eq!(force_from_rate(&v, &darwin_velocity_rate(&v, &f, c), c), f, max_relative = 1e-13);
        // Rate matches a finite difference of the velocity map.
        let h = 1e-6;
        let fd = (darwin_velocity(&(v + h * f), c) - darwin_velocity(&(v - h * f), c)) / (2.0 * h);
        assert_relative_eq!(fd, darwin_velocity_rate(&v, &f, c), max_relative = 1e-8);
    }

    #[test]
    fn newtonian_limit_of_fixed_point() {
        let (s, _) = bump(1e6, Vec3::new(0.2, 0.0, 0.0), 0.01);
        let vp = crate::vp::VPState::new(s.ensemble.clone(), 0.01);
        for x in [Vec3::new(0.1, 0.2, 0.0), Vec3::new(1.2, -0.4, 0.3)] {
            assert!((s.fields.e(&x) - crate::vp::field_e0(&vp, &x)).norm() < 1e-9);
        }
    }

    #[test]
    fn contraction_scales_like_inverse_c_squared() {
        let (s4, _) = bump(4.0, Vec3::new(0.3, 0.0, 0.0), 0.01);
        let (s8, _) = bump(8.0, Vec3::new(0.3, 0.0, 0.0), 0.01);
        // The first sweep measures the cold start and the last ones hit
        // round-off; the second ratio is the clean contraction factor.
        let ratio = |st: &IterStats| st.history[2] / st.history[1];
        assert!(s4.stats().iterations <= 12, "{:?}", s4.stats());
        let q = ratio(s4.stats()) / ratio(s8.stats());
        assert!((3.0..=5.0).contains(&q), "{q} {:?} {:?}", s4.stats(), s8.stats());
    }

    #[test]
    fn starting_guess_does_not_matter() {
        let (s, _) = bump(4.0, Vec3::new(0.3, 0.0, 0.0), 0.01);
        let warm = solve_fields_fixed_point(&s.ensemble, &s.opts, Some(&s.fields.sources.force)).unwrap();
        let cold = solve_fields_fixed_point(&s.ensemble, &s.opts, None).unwrap();
        for i in 0..cold.e_markers.len() {
            assert!((warm.e_markers[i] - cold.e_markers[i]).norm() <= 1e-11 * cold.e_markers[i].norm().max(1.0));
        }
        let fail = DvmOptions { max_iter: 2, ..s.opts };
        assert!(matches!(
            solve_fields_fixed_point(&s.ensemble, &fail, None),
            Err(SolverError::NoConvergence { .. })
        ));
        assert!(DVMState::new(s.ensemble.clone(), 2.0, 0.01, s.opts).is_err());
    }

    #[test]
    fn single_marker_moves_straight() {
        let v = Vec3::new(0.5, 0.2, 0.0);
        let mut s = DVMState::new(one(v, 4.0), 4.0, 0.1, DvmOptions::default()).unwrap();
        for _ in 0..10 {
            step_dvm(&mut s, 0.1).unwrap();
        }
        assert_relative_eq!(s.ensemble.markers[0].x, darwin_velocity(&v, 4.0), max_relative = 1e-14);
    }

    #[test]
    fn newtonian_limit_trajectories() {
        let (mut s, _) = bump(1e6, Vec3::new(0.2, 0.0, 0.0), 0.05);
        let mut v = crate::vp::VPState::new(s.ensemble.clone(), 0.05);
        for _ in 0..20 {
            step_dvm(&mut s, 0.05).unwrap();
            crate::vp::step_vp(&mut v, 0.05);
        }
        for (a, b) in s.ensemble.markers.iter().zip(&v.ensemble.markers) {
            assert!((a.x - b.x).norm() < 1e-8);
        }
    }

    #[test]
    fn time_reversal() {
        let dt = 0.05;
        let (mut s, _) = bump(4.0, Vec3::new(0.3, 0.0, 0.0), dt);
        let start = s.ensemble.clone();
        step_dvm(&mut s, dt).unwrap();
        let mut back = s.ensemble.clone();
        back.markers.iter_mut().for_each(|m| m.v = -m.v);
        let mut r = DVMState::new(back, 4.0, dt, s.opts).unwrap();
        step_dvm(&mut r, dt).unwrap();
        let err = r
            .ensemble
            .markers
            .iter()
            .zip(&start.markers)
            .map(|(a, b)| (a.x - b.x).norm() + (a.v + b.v).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn energy_parts_and_limits() {
        let (s, _) = bump(1e6, Vec3::new(0.2, 0.0, 0.0), 0.05);
        let vp = crate::vp::VPState::new(s.ensemble.clone(), 0.05);
        assert_relative_eq!(energy(&s).total, vp.energy(), max_relative = 1e-10);
        let (s, _) = bump(4.0, Vec3::zeros(), 0.05);
        let mut rest = s.ensemble.clone();
        rest.markers.iter_mut().for_each(|m| m.v = Vec3::zeros());
        let r = DVMState::new(rest, 4.0, 0.05, s.opts).unwrap();
        let en = energy(&r);
        assert_eq!(en.kinetic, 0.0);
        assert_eq!(en.magnetic, 0.0);
        assert_eq!(en.total, en.electrostatic);
    }

    #[test]
    fn energy_drift_is_high_order() {
        let mut drifts = Vec::new();
        for &dt in &[0.04, 0.02] {
            let (mut s, _) = bump(4.0, Vec3::new(0.4, 0.0, 0.0), dt);
            let h0 = energy(&s).total;
            for _ in 0..(0.8 / dt).round() as usize {
                step_dvm(&mut s, dt).unwrap();
            }
            drifts.push(((energy(&s).total - h0) / h0).abs());
        }
        assert!(drifts[1] < 1e-6, "{drifts:?}");
        assert!(drifts[0] / drifts[1] > 4.0, "{drifts:?}");
    }

    #[test]
    fn bstar_is_divergence_free() {
        let (s, _) = bump(4.0, Vec3::new(0.4, 0.1, 0.0), 0.05);
        let rule = SphereRule::new(24, 48);
        let flux = bstar_flux(&s, &Vec3::new(0.2, 0.0, 0.1), 0.5, &rule);
        let scale = rule.integrate(|n| 0.25 * s.fields.b(&(Vec3::new(0.2, 0.0, 0.1) + 0.5 * n)).norm());
        assert!(flux.abs() <= 1e-8 * scale.max(1e-12), "{flux} {scale}");
    }

    #[test]
    fn f_star_transport() {
        let dt = 0.05;
        let (mut s, p) = bump(4.0, Vec3::new(0.3, 0.0, 0.0), dt);
        let init = s.ensemble.clone();
        for _ in 0..6 {
            step_dvm(&mut s, dt).unwrap();
        }
        let idx = [5usize, 150];
        let probes: Vec<Vec6> =
            idx.iter().map(|&i| join(&s.ensemble.markers[i].x, &s.ensemble.markers[i].v)).collect();
        let f = eval_f_star(&s, &probes, s.t, &p).unwrap();
        for (k, &i) in idx.iter().enumerate() {
            let f0 = p.eval(&init.markers[i].x, &init.markers[i].v);
            assert!((f[k] - f0).abs() <= 1e-6 * f0.max(1e-3), "{} vs {}", f[k], f0);
        }
    }
}
