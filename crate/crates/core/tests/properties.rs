use darwin_kinetics::config::RunConfig;
use darwin_kinetics::harness::{fit_slope, rescale_state, Scaling};
use darwin_kinetics::kernels::{
    l_dt, momentum_from_velocity, relativistic_velocity, sphere_mean_gradient, sphere_mean_inverse, sphere_mean_linear,
    SofteningSpec,
};
use darwin_kinetics::ensemble::{sample_initial, InitialProfile};
use darwin_kinetics::sum::chunked_sum;
use darwin_kinetics::vp::{step_vp, VPState};
use darwin_kinetics::{Mat3, Vec3};
use proptest::prelude::*;

fn vec3(r: f64) -> impl Strategy<Value = Vec3> {
    (-r..r, -r..r, -r..r).prop_map(|(a, b, c)| Vec3::new(a, b, c))
}

fn rotation() -> impl Strategy<Value = Mat3> {
    (0.0..std::f64::consts::TAU, 0.0..std::f64::consts::PI, 0.0..std::f64::consts::TAU).prop_map(|(a, b, g)| {
        *nalgebra::Rotation3::from_euler_angles(a, b, g).matrix()
    })
}

proptest! {
    #[test]
    fn velocity_map_round_trips(v in vec3(20.0), c in 1.0..100.0f64) {
        let vh = relativistic_velocity(&v, c);
        prop_assert!(vh.norm() < c);
        let back = momentum_from_velocity(&vh, c);
        prop_assert!((back - v).norm() <= 1e-12 * v.norm().max(1.0));
    }

    #[test]
    fn sphere_means_are_equivariant(z in vec3(3.0), r in 0.1..3.0f64, rot in rotation()) {
        prop_assume!((z.norm() - r).abs() > 1e-6);
        let rz = rot * z;
        prop_assert!((sphere_mean_inverse(&rz, r) - sphere_mean_inverse(&z, r)).abs() <= 1e-12 * sphere_mean_inverse(&z, r));
        let g = sphere_mean_gradient(&z, r);
        prop_assert!((sphere_mean_gradient(&rz, r) - rot * g).norm() <= 1e-12 * (1.0 + g.norm()));
        prop_assert!((sphere_mean_gradient(&-z, r) + g).norm() <= 1e-12 * (1.0 + g.norm()));
        let l = sphere_mean_linear(&z, r);
        prop_assert!((sphere_mean_linear(&rz, r) - rot * l).norm() <= 1e-12 * (1.0 + l.norm()));
    }

    #[test]
    fn magnetic_cone_kernel_bound(zdir in vec3(1.0), v in vec3(3.0), c in 4.0..64.0f64) {
        prop_assume!(zdir.norm() > 1e-3);
        let z = zdir.normalize();
        let vh = relativistic_velocity(&v, c);
        let b = vh.norm() / c;
        prop_assert!(l_dt(&z, &vh, c).norm() <= b / (1.0 - b) * (1.0 + 1e-12));
    }

    #[test]
    fn fitted_power_law_is_exact(k in 0.5..5.0f64, a in 1e-6..1e3f64) {
        let pts: Vec<(f64, f64)> = [4.0, 8.0, 16.0, 32.0].iter().map(|&c: &f64| (c, a * c.powf(-k))).collect();
        prop_assert!((fit_slope(&pts).unwrap().slope + k).abs() < 1e-10);
    }

    #[test]
    fn chunked_sum_is_order_fixed(xs in proptest::collection::vec(-1e6..1e6f64, 0..3000)) {
        let a = chunked_sum(xs.len(), 0.0, |i| xs[i]);
        let b = chunked_sum(xs.len(), 0.0, |i| xs[i]);
        prop_assert_eq!(a.to_bits(), b.to_bits());
        let naive: f64 = xs.iter().sum();
        prop_assert!((a - naive).abs() <= 1e-9 * xs.iter().map(|x| x.abs()).sum::<f64>().max(1.0));
    }

    #[test]
    fn scaling_composes(e1 in 0.01..1.0f64, e2 in 0.01..1.0f64) {
        let (a, b, ab) = (Scaling::new(e1), Scaling::new(e2), Scaling::new(e1 * e2));
        for (x, y) in [(a.len * b.len, ab.len), (a.vel * b.vel, ab.vel), (a.time * b.time, ab.time)] {
            prop_assert!((x - y).abs() <= 1e-14 * y);
        }
    }
}

fn profile(center_v: Vec3) -> InitialProfile {
    InitialProfile { center_x: Vec3::zeros(), center_v, radius_x: 1.0, radius_v: 0.5, amplitude: 1.0 }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn vp_conserves_charge_and_momentum(cv in vec3(0.5), dt in 0.01..0.05f64) {
        let e = sample_initial(&profile(cv), 2, SofteningSpec::new(0.3).unwrap()).unwrap();
        let q0 = e.total_charge();
        let mut s = VPState::new(e, dt);
        let p0 = s.momentum();
        for _ in 0..5 {
            step_vp(&mut s, dt);
        }
        prop_assert_eq!(s.ensemble.total_charge(), q0);
        prop_assert!((s.momentum() - p0).norm() <= 1e-12 * (1.0 + p0.norm()));
    }

    #[test]
    fn rescale_at_one_is_identity(cv in vec3(0.5)) {
        let e = sample_initial(&profile(cv), 2, SofteningSpec::new(0.3).unwrap()).unwrap();
        let s = VPState::new(e, 0.02);
        let r = rescale_state(&s, 1.0);
        prop_assert_eq!(r.ensemble.markers, s.ensemble.markers);
    }
}

#[test]
fn config_hash_ignores_formatting() {
    let a = RunConfig::parse("[discretization]\ndt = 0.01\n").unwrap();
    let b = RunConfig::parse("# comment\n[discretization]\n  dt=0.01\n[ladder]\nc = 4.0\n").unwrap();
    assert_eq!(a.hash(), b.hash());
    let c = RunConfig::parse("[discretization]\ndt = 0.02\n").unwrap();
    assert_ne!(a.hash(), c.hash());
    assert!(RunConfig::parse("[discretization]\nbogus = 1\n").is_err());
}
