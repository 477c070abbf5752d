//! Closed-form values checked through the public API.

use std::f64::consts::PI;

use approx::assert_relative_eq;
use darwin_kinetics::darwin::b1_pair;
use darwin_kinetics::kernels::{
    coulomb_direction_integral, coulomb_direction_quadrature, gs_kernel_e, relativistic_velocity, sphere_mean_gradient,
    sphere_mean_inverse, sphere_mean_linear, GSKernelInputs, Part, SofteningSpec,
};
use darwin_kinetics::vp::e0_sum;
use darwin_kinetics::{Mat3, Vec3};

#[test]
fn sphere_means() {
    let z2 = Vec3::new(0.0, 0.0, 2.0);
    let zh = Vec3::new(0.0, 0.0, 0.5);
    assert_relative_eq!(sphere_mean_inverse(&z2, 1.0), 2.0 * PI, max_relative = 1e-14);
    assert_relative_eq!(sphere_mean_inverse(&zh, 1.0), 4.0 * PI, max_relative = 1e-14);
    assert_relative_eq!(sphere_mean_inverse(&Vec3::new(0.0, 1.0, 0.0), 1.0), 4.0 * PI, max_relative = 1e-14);

    assert_relative_eq!(sphere_mean_gradient(&z2, 1.0), Vec3::new(0.0, 0.0, PI), epsilon = 1e-14);
    assert_relative_eq!(sphere_mean_gradient(&zh, 1.0), Vec3::zeros(), epsilon = 1e-14);

    assert_relative_eq!(sphere_mean_linear(&Vec3::new(0.0, 0.0, 1.0), 2.0), Vec3::new(0.0, 0.0, 4.0 * PI / 3.0), epsilon = 1e-13);
    assert_relative_eq!(sphere_mean_linear(&z2, 1.0), Vec3::new(0.0, 0.0, 4.0 * PI - PI / 3.0), epsilon = 1e-13);
    assert_eq!(sphere_mean_linear(&Vec3::zeros(), 3.0), Vec3::zeros());
}

#[test]
fn coulomb_direction() {
    assert_relative_eq!(coulomb_direction_integral(&Vec3::x()).unwrap(), Vec3::new(2.0 * PI, 0.0, 0.0), epsilon = 1e-13);
    let z = Vec3::new(0.0, 0.0, 3.0);
    let q = coulomb_direction_quadrature(&z, 1e-3, 1e3).total();
    assert!((q - Vec3::new(0.0, 0.0, 2.0 * PI)).norm() <= 1e-3 * 2.0 * PI, "{q}");
    assert!(coulomb_direction_integral(&Vec3::zeros()).is_err());
}

#[test]
fn relativistic_velocity_values() {
    let v = Vec3::new(0.0, 0.0, 5.0);
    assert_relative_eq!(relativistic_velocity(&v, 5.0), v / 2f64.sqrt(), max_relative = 1e-15);
    let v = Vec3::new(3.0, 0.0, 0.0);
    assert_relative_eq!(relativistic_velocity(&v, 10.0), v / 1.09f64.sqrt(), max_relative = 1e-15);
}

#[test]
fn kernels_at_rest() {
    let z = Vec3::new(0.6, 0.0, 0.8);
    let inp = GSKernelInputs::new(z, Vec3::zeros(), 4.0).unwrap();
    assert_eq!(gs_kernel_e(&inp, Part::DT).vector(), z);
    assert_eq!(gs_kernel_e(&inp, Part::T).vector(), z);
    assert_relative_eq!(gs_kernel_e(&inp, Part::S).matrix(), Mat3::identity() - z * z.transpose(), epsilon = 1e-15);
}

#[test]
fn point_charge_field() {
    let soft = SofteningSpec::new(1e-3).unwrap();
    let x = Vec3::new(2.0, 0.0, 0.0);
    let e = e0_sum(&[Vec3::zeros()], &[1.0], &soft, &x, None);
    assert_relative_eq!(e, x / 8.0, max_relative = 1e-5);
}

/// `v x (x - X)/|x - X|^3` for a unit current along z seen from (2, 0, 0).
#[test]
fn point_current_field() {
    let soft = SofteningSpec::new(1e-4).unwrap();
    let z = Vec3::new(-2.0, 0.0, 0.0);
    let b = b1_pair(&soft, &z, &Vec3::z());
    assert_relative_eq!(b, Vec3::new(0.0, 0.25, 0.0), max_relative = 1e-4);
}
