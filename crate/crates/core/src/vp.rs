//! Vlasov-Poisson: softened pairwise Coulomb field, coupled RK4 for the
//! characteristics, backward characteristics for pointwise `f0`, and the
//! variational equations of the flow.

use crate::ensemble::{Ensemble, InitialProfile, Kind};
use crate::history::{History, Level};
use crate::kernels::SofteningSpec;
use crate::sum::{chunked_sum, par_map};
use crate::{Mat3, Mat6, SolverError, Vec3, Vec6};

/// `sum_j w_j (x - X_j)/rho^3`, skipping index `skip`.
pub fn e0_sum(xs: &[Vec3], ws: &[f64], soft: &SofteningSpec, x: &Vec3, skip: Option<usize>) -> Vec3 {
    chunked_sum(xs.len(), Vec3::zeros(), |j| {
        if Some(j) == skip {
            return Vec3::zeros();
        }
        ws[j] * soft.coulomb(&(x - xs[j]))
    })
}

/// Gradient of [`e0_sum`] with respect to `x`.
pub fn grad_e0_sum(xs: &[Vec3], ws: &[f64], soft: &SofteningSpec, x: &Vec3, skip: Option<usize>) -> Mat3 {
    chunked_sum(xs.len(), Mat3::zeros(), |j| {
        if Some(j) == skip {
            return Mat3::zeros();
        }
        -ws[j] * soft.dipole(&(x - xs[j]))
    })
}

#[derive(Debug, Clone)]
pub struct VPState {
    pub ensemble: Ensemble,
    pub t: f64,
    /// Knots: position, velocity, `E0` at the marker.
    pub flow_log: History,
    /// `E0` at each marker for the current positions.
    pub acc: Vec<Vec3>,
}

impl VPState {
    pub fn new(mut ensemble: Ensemble, dt: f64) -> Self {
        ensemble.kind = Kind::VP;
        let n = ensemble.len();
        let (xs, ws) = split(&ensemble);
        let acc = marker_fields(&xs, &ws, &ensemble.softening);
        let mut flow_log = History::new(dt, n, 0);
        flow_log.push(Level {
            t: ensemble.t,
            x: xs,
            u: ensemble.markers.iter().map(|m| m.v).collect(),
            a: acc.clone(),
            aux: vec![],
            aux_rate: vec![],
        });
        VPState { t: ensemble.t, ensemble, flow_log, acc }
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.ensemble.markers.iter().map(|m| m.x).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.ensemble.markers.iter().map(|m| m.w).collect()
    }

    /// Kinetic plus pairwise softened potential energy.
    pub fn energy(&self) -> f64 {
        let xs = self.positions();
        let ws = self.weights();
        let soft = self.ensemble.softening;
        let kin = chunked_sum(xs.len(), 0.0, |i| {
            0.5 * ws[i] * self.ensemble.markers[i].v.norm_squared()
        });
        let pot: f64 = par_map(xs.len(), |i| {
            chunked_sum(xs.len(), 0.0, |j| if i == j { 0.0 } else { ws[i] * ws[j] * soft.inv(&(xs[i] - xs[j])) })
        })
        .iter()
        .fold(0.0, |a, b| a + b);
        kin + 0.5 * pot
    }

    pub fn momentum(&self) -> Vec3 {
        chunked_sum(self.ensemble.len(), Vec3::zeros(), |i| {
            let m = &self.ensemble.markers[i];
            m.w * m.v
        })
    }
}

pub(crate) fn split(e: &Ensemble) -> (Vec<Vec3>, Vec<f64>) {
    (e.markers.iter().map(|m| m.x).collect(), e.markers.iter().map(|m| m.w).collect())
}

/// `E0` at every marker, self excluded.
pub fn marker_fields(xs: &[Vec3], ws: &[f64], soft: &SofteningSpec) -> Vec<Vec3> {
    par_map(xs.len(), |i| e0_sum(xs, ws, soft, &xs[i], Some(i)))
}

pub fn field_e0(s: &VPState, x: &Vec3) -> Vec3 {
    let (xs, ws) = split(&s.ensemble);
    e0_sum(&xs, &ws, &s.ensemble.softening, x, None)
}

pub fn grad_field_e0(s: &VPState, x: &Vec3) -> Mat3 {
    let (xs, ws) = split(&s.ensemble);
    grad_e0_sum(&xs, &ws, &s.ensemble.softening, x, None)
}

/// Stage data handed to [`rk4_base`] hooks: stage index 0..4 and the
/// stage positions, velocities and marker fields.
pub(crate) struct Stage<'a> {
    pub k: usize,
    pub x: &'a [Vec3],
    pub v: &'a [Vec3],
    pub e: &'a [Vec3],
}

/// One coupled RK4 step of `x' = v, v' = E0(x)`; every stage re-evaluates
/// the pairwise field at the stage positions.
pub fn step_vp(s: &mut VPState, dt: f64) {
    rk4_base(s, dt, |_| {});
}

/// The RK4 driver behind [`step_vp`]. `hook` sees every stage before the
/// commit, which lets augmented systems ride on the identical base flow.
pub(crate) fn rk4_base<F: FnMut(Stage)>(s: &mut VPState, dt: f64, mut hook: F) {
    let soft = s.ensemble.softening;
    let ws = s.weights();
    let x0 = s.positions();
    let v0: Vec<Vec3> = s.ensemble.markers.iter().map(|m| m.v).collect();
    let n = x0.len();
    let k1v = s.acc.clone();
    hook(Stage { k: 0, x: &x0, v: &v0, e: &k1v });
    let x2: Vec<Vec3> = (0..n).map(|i| x0[i] + 0.5 * dt * v0[i]).collect();
    let v2: Vec<Vec3> = (0..n).map(|i| v0[i] + 0.5 * dt * k1v[i]).collect();
    let k2v = marker_fields(&x2, &ws, &soft);
    hook(Stage { k: 1, x: &x2, v: &v2, e: &k2v });
    let x3: Vec<Vec3> = (0..n).map(|i| x0[i] + 0.5 * dt * v2[i]).collect();
    let v3: Vec<Vec3> = (0..n).map(|i| v0[i] + 0.5 * dt * k2v[i]).collect();
    let k3v = marker_fields(&x3, &ws, &soft);
    hook(Stage { k: 2, x: &x3, v: &v3, e: &k3v });
    let x4: Vec<Vec3> = (0..n).map(|i| x0[i] + dt * v3[i]).collect();
    let v4: Vec<Vec3> = (0..n).map(|i| v0[i] + dt * k3v[i]).collect();
    let k4v = marker_fields(&x4, &ws, &soft);
    hook(Stage { k: 3, x: &x4, v: &v4, e: &k4v });
    for i in 0..n {
        let m = &mut s.ensemble.markers[i];
        m.x = x0[i] + dt / 6.0 * (v0[i] + 2.0 * v2[i] + 2.0 * v3[i] + v4[i]);
        m.v = v0[i] + dt / 6.0 * (k1v[i] + 2.0 * k2v[i] + 2.0 * k3v[i] + k4v[i]);
    }
    s.t += dt;
    s.ensemble.t = s.t;
    let xs = s.positions();
    s.acc = marker_fields(&xs, &ws, &soft);
    s.flow_log.push(Level {
        t: s.t,
        x: xs,
        u: s.ensemble.markers.iter().map(|m| m.v).collect(),
        a: s.acc.clone(),
        aux: vec![],
        aux_rate: vec![],
    });
}

/// Marker positions interpolated from the log at time `tt`.
pub fn positions_at(log: &History, tt: f64) -> crate::Result<Vec<Vec3>> {
    (0..log.n_markers).map(|j| log.sample(j, tt).map(|s| s.x)).collect()
}

/// Time nodes for integrating from `t` down to 0 with steps of at most `dt`.
pub(crate) fn backward_grid(t: f64, dt: f64) -> Vec<f64> {
    if t <= 0.0 {
        return vec![t.max(0.0)];
    }
    let nsteps = (t / dt - 1e-9).ceil().max(1.0) as usize;
    (0..=nsteps).map(|k| t * (1.0 - k as f64 / nsteps as f64)).collect()
}

pub(crate) fn f6(z: &Vec6) -> (Vec3, Vec3) {
    (z.fixed_rows::<3>(0).into(), z.fixed_rows::<3>(3).into())
}

pub(crate) fn join(x: &Vec3, v: &Vec3) -> Vec6 {
    let mut z = Vec6::zeros();
    z.fixed_rows_mut::<3>(0).copy_from(x);
    z.fixed_rows_mut::<3>(3).copy_from(v);
    z
}

/// Backward characteristic in the interpolated field together with the
/// Jacobian of the map `(x, v, t) -> (X(0), V(0))`.
#[derive(Debug, Clone, Copy)]
pub struct TangentFlow {
    pub z0: Vec6,
    pub j: Mat6,
}

/// Integrate characteristics of a batch of phase points from `t` back to 0.
/// Fields come from the logged marker positions, interpolated in time; the
/// variational equations give the tangent map of the backward flow.
pub fn backward_flow(s: &VPState, probes: &[Vec6], t: f64) -> crate::Result<Vec<TangentFlow>> {
    if t > s.flow_log.t_last() + 1e-12 {
        return Err(SolverError::Range { t, lo: s.flow_log.t_first(), hi: s.flow_log.t_last() });
    }
    let soft = s.ensemble.softening;
    let ws = s.weights();
    let grid = backward_grid(t, s.flow_log.dt);
    let mut z: Vec<Vec6> = probes.to_vec();
    let mut jac: Vec<Mat6> = vec![Mat6::identity(); probes.len()];
    let rhs = |xs: &[Vec3], zz: &Vec6, jj: &Mat6| -> (Vec6, Mat6) {
        let (x, v) = f6(zz);
        let e = e0_sum(xs, &ws, &soft, &x, None);
        let g = grad_e0_sum(xs, &ws, &soft, &x, None);
        let mut a = Mat6::zeros();
        a.fixed_view_mut::<3, 3>(0, 3).copy_from(&Mat3::identity());
        a.fixed_view_mut::<3, 3>(3, 0).copy_from(&g);
        (join(&v, &e), a * jj)
    };
    for w in grid.windows(2) {
        let (ta, tb) = (w[0], w[1]);
        let h = tb - ta;
        let xa = positions_at(&s.flow_log, ta)?;
        let xm = positions_at(&s.flow_log, 0.5 * (ta + tb))?;
        let xb = positions_at(&s.flow_log, tb)?;
        let out: Vec<(Vec6, Mat6)> = par_map(z.len(), |p| {
            let (z0, j0) = (z[p], jac[p]);
            let (k1, l1) = rhs(&xa, &z0, &j0);
            let (k2, l2) = rhs(&xm, &(z0 + 0.5 * h * k1), &(j0 + 0.5 * h * l1));
            let (k3, l3) = rhs(&xm, &(z0 + 0.5 * h * k2), &(j0 + 0.5 * h * l2));
            let (k4, l4) = rhs(&xb, &(z0 + h * k3), &(j0 + h * l3));
            (
                z0 + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4),
                j0 + h / 6.0 * (l1 + 2.0 * l2 + 2.0 * l3 + l4),
            )
        });
        for (p, (zz, jj)) in out.into_iter().enumerate() {
            z[p] = zz;
            jac[p] = jj;
        }
    }
    Ok(z.into_iter().zip(jac).map(|(z0, j)| TangentFlow { z0, j }).collect())
}

/// `f0(x, v, t) = f(X(0), V(0))` along the backward characteristic.
pub fn eval_f0(s: &VPState, x: &Vec3, v: &Vec3, profile: &InitialProfile) -> crate::Result<f64> {
    Ok(eval_f0_batch(s, &[join(x, v)], s.t, profile)?[0])
}

pub fn eval_f0_batch(s: &VPState, probes: &[Vec6], t: f64, profile: &InitialProfile) -> crate::Result<Vec<f64>> {
    Ok(backward_flow(s, probes, t)?.iter().map(|tf| profile.eval6(&tf.z0)).collect())
}

/// `max_probe |(rho(t1) - rho(t0))/dt + div j(t_mid)|` over the last two levels.
pub fn continuity_residual(s: &VPState, probe: &[Vec3]) -> crate::Result<f64> {
    let log = &s.flow_log;
    let nl = log.levels.len();
    if nl < 2 {
        return Err(SolverError::Range { t: s.t, lo: log.t_first(), hi: log.t_last() });
    }
    let l0 = &log.levels[nl - 2];
    let l1 = &log.levels[nl - 1];
    let dt = l1.t - l0.t;
    let tm = 0.5 * (l0.t + l1.t);
    let mid: Vec<_> = (0..log.n_markers).map(|j| log.sample(j, tm)).collect::<crate::Result<_>>()?;
    let soft = s.ensemble.softening;
    let ws = s.weights();
    let d2 = soft.delta * soft.delta;
    let res = par_map(probe.len(), |p| {
        let x = probe[p];
        let r0 = chunked_sum(ws.len(), 0.0, |j| ws[j] * soft.blob(&(x - l0.x[j])));
        let r1 = chunked_sum(ws.len(), 0.0, |j| ws[j] * soft.blob(&(x - l1.x[j])));
        let div = chunked_sum(ws.len(), 0.0, |j| {
            let z = x - mid[j].x;
            let r = soft.rho(&z);
            // grad_x S = -15 delta^2 z / (4 pi rho^7)
            -ws[j] * 15.0 * d2 / (4.0 * std::f64::consts::PI * r.powi(7)) * z.dot(&mid[j].u)
        });
        ((r1 - r0) / dt + div).abs()
    });
    Ok(res.into_iter().fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{sample_initial, Marker};
    use approx::assert_relative_eq;

    fn ens(markers: Vec<Marker>, delta: f64) -> Ensemble {
        Ensemble {
            markers,
            softening: SofteningSpec::new(delta).unwrap(),
            t: 0.0,
            c: None,
            kind: Kind::VP,
            cell_volume: 1.0,
        }
    }

    fn mk(x: Vec3, v: Vec3, w: f64) -> Marker {
        Marker { x, v, w, w2: 0.0 }
    }

    #[test]
    fn single_marker_field_points_away() {
        let s = VPState::new(ens(vec![mk(Vec3::zeros(), Vec3::zeros(), 1.0)], 1e-3), 0.1);
        let x = Vec3::new(2.0, 0.0, 0.0);
        let e = field_e0(&s, &x);
        assert_relative_eq!(e, x / 8.0, max_relative = 1e-6);
        let empty = VPState::new(ens(vec![], 0.1), 0.1);
        assert_eq!(field_e0(&empty, &x), Vec3::zeros());
        assert_eq!(grad_field_e0(&empty, &x), Mat3::zeros());
    }

    #[test]
    fn symmetric_pair_cancels_at_origin() {
        let a = Vec3::new(0.3, -0.2, 0.7);
        let s = VPState::new(ens(vec![mk(a, Vec3::zeros(), 1.0), mk(-a, Vec3::zeros(), 1.0)], 0.1), 0.1);
        assert!(field_e0(&s, &Vec3::zeros()).norm() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences_and_poisson() {
        let p = InitialProfile {
            center_x: Vec3::zeros(),
            center_v: Vec3::zeros(),
            radius_x: 1.0,
            radius_v: 0.5,
            amplitude: 1.0,
        };
        let e = sample_initial(&p, 3, SofteningSpec::new(0.3).unwrap()).unwrap();
        let s = VPState::new(e, 0.01);
        let x = Vec3::new(0.2, -0.1, 0.35);
        let g = grad_field_e0(&s, &x);
        let h = 1e-5;
        for k in 0..3 {
            let mut d = Vec3::zeros();
            d[k] = h;
            let fd = (field_e0(&s, &(x + d)) - field_e0(&s, &(x - d))) / (2.0 * h);
            let col: Vec3 = g.column(k).into();
            assert!((fd - col).norm() <= 1e-7 * col.norm().max(1e-3), "{fd} vs {col}");
        }
        let rho = s.ensemble.charge_density(&x);
        assert_relative_eq!(g.trace(), 4.0 * std::f64::consts::PI * rho, max_relative = 1e-10);
    }

    #[test]
    fn plummer_hessian_eigen_pattern() {
        let s = VPState::new(ens(vec![mk(Vec3::zeros(), Vec3::zeros(), 1.0)], 1e-4), 0.1);
        let r = 1.5;
        let g = grad_field_e0(&s, &Vec3::new(r, 0.0, 0.0)) * r.powi(3);
        assert_relative_eq!(g[(0, 0)], -2.0, max_relative = 1e-6);
        assert_relative_eq!(g[(1, 1)], 1.0, max_relative = 1e-6);
        assert_relative_eq!(g[(2, 2)], 1.0, max_relative = 1e-6);
    }

    #[test]
    fn free_streaming_is_exact() {
        let v = Vec3::new(0.3, -0.1, 0.2);
        let mut s = VPState::new(ens(vec![mk(Vec3::zeros(), v, 1.0)], 0.1), 0.1);
        for _ in 0..10 {
            step_vp(&mut s, 0.1);
        }
        assert_relative_eq!(s.ensemble.markers[0].x, v * 1.0, epsilon = 1e-14);
        assert_eq!(s.ensemble.markers[0].v, v);
    }

    #[test]
    fn symmetric_repulsion_stays_on_line() {
        let a = Vec3::new(0.5, 0.0, 0.0);
        let mut s = VPState::new(ens(vec![mk(a, Vec3::zeros(), 1.0), mk(-a, Vec3::zeros(), 1.0)], 0.1), 0.01);
        for _ in 0..50 {
            let p0 = s.momentum();
            step_vp(&mut s, 0.01);
            assert!((s.momentum() - p0).norm() < 1e-12);
        }
        for m in &s.ensemble.markers {
            assert!(m.x.y.abs() < 1e-15 && m.x.z.abs() < 1e-15);
        }
        assert!(s.ensemble.markers[0].x.x > 0.5);
    }

    fn bump_state(dt: f64, center_v: Vec3) -> (VPState, InitialProfile) {
        let p = InitialProfile { center_x: Vec3::zeros(), center_v, radius_x: 1.0, radius_v: 0.5, amplitude: 1.0 };
        let e = sample_initial(&p, 3, SofteningSpec::new(0.3).unwrap()).unwrap();
        (VPState::new(e, dt), p)
    }

    #[test]
    fn energy_drift_is_small_and_fourth_order() {
        let mut drifts = Vec::new();
        for &dt in &[0.04, 0.02] {
            let (mut s, _) = bump_state(dt, Vec3::new(0.2, 0.0, 0.0));
            let h0 = s.energy();
            let n = (1.0 / dt).round() as usize;
            for _ in 0..n {
                step_vp(&mut s, dt);
            }
            drifts.push(((s.energy() - h0) / h0).abs());
        }
        assert!(drifts[1] < 1e-6, "{drifts:?}");
        assert!(drifts[0] / drifts[1] > 8.0, "{drifts:?}");
    }

    #[test]
    fn volume_preservation_and_f0_invariance() {
        let dt = 0.05;
        let (mut s, p) = bump_state(dt, Vec3::new(0.1, 0.0, 0.0));
        for _ in 0..20 {
            step_vp(&mut s, dt);
        }
        // Markers carry f constant along their own trajectories.
        let idx = [0usize, 50, 180];
        let probes: Vec<Vec6> = idx
            .iter()
            .map(|&i| join(&s.ensemble.markers[i].x, &s.ensemble.markers[i].v))
            .collect();
        let flows = backward_flow(&s, &probes, s.t).unwrap();
        let e0 = sample_initial(&p, 3, SofteningSpec::new(0.3).unwrap()).unwrap();
        for (k, &i) in idx.iter().enumerate() {
            let f_now = p.eval6(&flows[k].z0);
            let f_init = p.eval(&e0.markers[i].x, &e0.markers[i].v);
            assert!((f_now - f_init).abs() <= 1e-8 * f_init.max(1e-3), "{f_now} vs {f_init}");
            assert!((flows[k].j.determinant() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn f0_at_time_zero_and_outside_support() {
        let (mut s, p) = bump_state(0.05, Vec3::zeros());
        let x = Vec3::new(0.1, 0.2, 0.0);
        let v = Vec3::new(0.1, 0.0, 0.1);
        assert_eq!(eval_f0(&s, &x, &v, &p).unwrap(), p.eval(&x, &v));
        for _ in 0..4 {
            step_vp(&mut s, 0.05);
        }
        let (rx, rv) = (1.0, 0.5);
        let far = Vec3::new(rx + 0.2 * rv + 0.5, 0.0, 0.0);
        assert_eq!(eval_f0(&s, &far, &Vec3::zeros(), &p).unwrap(), 0.0);
        let fmax = p.eval(&Vec3::zeros(), &Vec3::zeros());
        for k in 0..8 {
            let xx = Vec3::new(0.1 * k as f64, 0.0, 0.05);
            assert!(eval_f0(&s, &xx, &Vec3::new(0.0, 0.05, 0.0), &p).unwrap() <= fmax + 1e-6);
        }
    }

    #[test]
    fn backward_flow_rejects_future() {
        let (s, _) = bump_state(0.05, Vec3::zeros());
        assert!(backward_flow(&s, &[Vec6::zeros()], 0.5).is_err());
    }

    #[test]
    fn continuity_residual_behaviour() {
        // Static: all at rest and symmetric.
        let a = Vec3::new(0.5, 0.0, 0.0);
        let mut s = VPState::new(ens(vec![mk(a, Vec3::zeros(), 1.0), mk(-a, Vec3::zeros(), 1.0)], 0.3), 1e-3);
        step_vp(&mut s, 1e-3);
        let probe = vec![Vec3::zeros(), Vec3::new(0.2, 0.1, 0.0)];
        // Markers accelerate apart slightly; residual is O(dt^2).
        assert!(continuity_residual(&s, &probe).unwrap() < 1e-6);

        let mut res = Vec::new();
        for &dt in &[0.02, 0.01] {
            let (mut s, _) = bump_state(dt, Vec3::new(0.3, 0.0, 0.0));
            let n = (0.1 / dt).round() as usize;
            for _ in 0..n {
                step_vp(&mut s, dt);
            }
            let probe: Vec<Vec3> = (0..5).map(|k| Vec3::new(-0.4 + 0.2 * k as f64, 0.1, 0.0)).collect();
            res.push(continuity_residual(&s, &probe).unwrap());
            // Translation invariance.
            let shift = Vec3::new(1.0, -2.0, 0.5);
            let mut t = s.clone();
            for l in &mut t.flow_log.levels {
                for x in &mut l.x {
                    *x += shift;
                }
            }
            let shifted: Vec<Vec3> = probe.iter().map(|p| p + shift).collect();
            let r2 = continuity_residual(&t, &shifted).unwrap();
            assert!((r2 - res[res.len() - 1]).abs() <= 1e-9 * res[res.len() - 1].max(1e-12));
        }
        assert!(res[0] / res[1] > 3.0, "{res:?}");
    }
}
