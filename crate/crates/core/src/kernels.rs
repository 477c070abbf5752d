//! Pure kernel functions: the relativistic velocity map, Plummer-softened
//! interaction kernels, the Glassey-Strauss cone kernels with their `1/c`
//! expansions, and four closed-form sphere/space integrals used as oracles.

use crate::quad::{composite, gauss_on};
use crate::{Mat3, SolverError, Vec3};
use std::f64::consts::PI;

/// Plummer softening. Every singular `|z|` becomes `rho(z) = sqrt(|z|^2 + delta^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SofteningSpec {
    pub delta: f64,
}

impl SofteningSpec {
    pub fn new(delta: f64) -> crate::Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(SolverError::Config(format!("softening delta must be > 0, got {delta}")));
        }
        Ok(SofteningSpec { delta })
    }

    #[inline]
    pub fn rho(&self, z: &Vec3) -> f64 {
        (z.norm_squared() + self.delta * self.delta).sqrt()
    }

    /// Softened `1/|z|`.
    #[inline]
    pub fn inv(&self, z: &Vec3) -> f64 {
        1.0 / self.rho(z)
    }

    /// Softened `z/|z|^3`.
    #[inline]
    pub fn coulomb(&self, z: &Vec3) -> Vec3 {
        let r = self.rho(z);
        z / (r * r * r)
    }

    /// Jacobian of `z -> -z/rho^3`, i.e. `-I/rho^3 + 3 z z^T/rho^5`. Even in `z`.
    #[inline]
    pub fn dipole(&self, z: &Vec3) -> Mat3 {
        let r = self.rho(z);
        let r3 = r * r * r;
        -Mat3::identity() / r3 + 3.0 * z * z.transpose() / (r3 * r * r)
    }

    /// Normalized Plummer blob whose Coulomb field is the softened kernel.
    #[inline]
    pub fn blob(&self, z: &Vec3) -> f64 {
        let r = self.rho(z);
        3.0 * self.delta * self.delta / (4.0 * PI * r.powi(5))
    }
}

/// `v_hat = (1 + v^2/c^2)^(-1/2) v`.
pub fn relativistic_velocity(v: &Vec3, c: f64) -> Vec3 {
    v / (1.0 + v.norm_squared() / (c * c)).sqrt()
}

/// Inverse of [`relativistic_velocity`]; requires `|v_hat| < c`.
pub fn momentum_from_velocity(vhat: &Vec3, c: f64) -> Vec3 {
    vhat / (1.0 - vhat.norm_squared() / (c * c)).sqrt()
}

/// Force `dv/ds` recovered from `d v_hat/ds`.
pub fn force_from_vhat_rate(vhat: &Vec3, rate: &Vec3, c: f64) -> Vec3 {
    let beta = vhat / c;
    let b2 = beta.norm_squared();
    let gamma = 1.0 / (1.0 - b2).sqrt();
    gamma * (rate + beta * (beta.dot(rate) / (1.0 - b2)))
}

/// `d v_hat/ds` for a given force `dv/ds`.
pub fn vhat_rate_from_force(vhat: &Vec3, force: &Vec3, c: f64) -> Vec3 {
    let beta = vhat / c;
    let gamma_inv = (1.0 - beta.norm_squared()).sqrt();
    gamma_inv * (force - beta * beta.dot(force))
}

/// `int_{|w|=1} |z - r w|^{-1} dw`.
pub fn sphere_mean_inverse(z: &Vec3, r: f64) -> f64 {
    4.0 * PI / r.max(z.norm())
}

/// `int_{|w|=1} |z - r w|^{-3} (z - r w) dw`. At the tie `r = |z|` the
/// exterior value is halved.
pub fn sphere_mean_gradient(z: &Vec3, r: f64) -> Vec3 {
    let n = z.norm();
    if r > n {
        Vec3::zeros()
    } else if r < n {
        4.0 * PI * z / (n * n * n)
    } else {
        2.0 * PI * z / (n * n * n)
    }
}

/// `int_{|w|=1} |z - r w|^{-1} (z - r w) dw`.
pub fn sphere_mean_linear(z: &Vec3, r: f64) -> Vec3 {
    let n = z.norm();
    if r > n {
        8.0 * PI / (3.0 * r) * z
    } else {
        let zb = z / n;
        4.0 * PI * zb - 4.0 * PI / 3.0 * r * r / (n * n) * zb
    }
}

/// `int |z - v|^{-1} |v|^{-3} v dv = 2 pi z/|z|`.
pub fn coulomb_direction_integral(z: &Vec3) -> crate::Result<Vec3> {
    let n = z.norm();
    if n == 0.0 {
        return Err(SolverError::Domain("coulomb_direction_integral at z = 0".into()));
    }
    Ok(2.0 * PI * z / n)
}

/// Pieces of the shell quadrature of `int |z - v|^{-1} |v|^{-3} v dv`.
#[derive(Debug, Clone, Copy)]
pub struct ShellQuadrature {
    /// Contribution of `lo <= |v| <= hi`.
    pub truncated: Vec3,
    /// Contribution of `|v| < lo`.
    pub inner_tail: Vec3,
    /// Contribution of `|v| > hi`, integrated in `tau = hi/|v|`.
    pub outer_tail: Vec3,
}

impl ShellQuadrature {
    pub fn total(&self) -> Vec3 {
        self.truncated + self.inner_tail + self.outer_tail
    }
}

// Angular part in a frame whose polar axis is z: returns the component of
// int w / |z - s w| dw along z-bar. The substitution mu = 1 - u^2 removes the
// square-root endpoint and panels are graded toward the near-singular point.
fn shell_angular(a: f64, s: f64) -> f64 {
    let d = (a - s).abs();
    let scale = (d / (2.0 * a * s).sqrt()).max(1e-14);
    let umax = 2f64.sqrt();
    let mut breaks = vec![0.0];
    let mut b = scale;
    while b < umax {
        breaks.push(b);
        b *= 2.0;
    }
    breaks.push(umax);
    let q = composite(&breaks, 8);
    let val: f64 = q
        .iter()
        .map(|&(u, w)| {
            let mu = 1.0 - u * u;
            w * mu * 2.0 * u / (d * d + 2.0 * a * s * u * u).sqrt()
        })
        .sum();
    2.0 * PI * val
}

fn shell_radial(a: f64, lo: f64, hi: f64) -> f64 {
    // Log-spaced panels plus geometric grading on both sides of s = a.
    let mut breaks: Vec<f64> = Vec::new();
    let decades = (hi / lo).log10();
    let per_decade = 6.0;
    let npan = (decades * per_decade).ceil() as usize;
    for k in 0..=npan {
        breaks.push(lo * 10f64.powf(decades * k as f64 / npan as f64));
    }
    if a > lo && a < hi {
        for k in 1..40 {
            let h = a * 0.5f64.powi(k);
            if a - h > lo {
                breaks.push(a - h);
            }
            if a + h < hi {
                breaks.push(a + h);
            }
        }
        breaks.push(a);
    }
    breaks.sort_by(|x, y| x.partial_cmp(y).unwrap());
    breaks.dedup_by(|x, y| (*x - *y).abs() <= 1e-15 * y.abs());
    composite(&breaks, 12)
        .iter()
        .map(|&(s, w)| w * shell_angular(a, s))
        .sum()
}

/// Shell quadrature of `int |z - v|^{-1} |v|^{-3} v dv` with radial cutoffs
/// `[lo, hi]`. The tails are integrated separately so that the total can be
/// compared with the closed form.
pub fn coulomb_direction_quadrature(z: &Vec3, lo: f64, hi: f64) -> ShellQuadrature {
    let a = z.norm();
    let zb = z / a;
    let truncated = shell_radial(a, lo, hi);
    let inner: f64 = gauss_on(16, 0.0, lo)
        .iter()
        .map(|&(s, w)| w * shell_angular(a, s))
        .sum();
    // s = hi / tau, ds = hi / tau^2 dtau.
    let outer: f64 = gauss_on(16, 0.0, 1.0)
        .iter()
        .map(|&(tau, w)| {
            let s = hi / tau;
            w * hi / (tau * tau) * shell_angular(a, s)
        })
        .sum();
    ShellQuadrature {
        truncated: truncated * zb,
        inner_tail: inner * zb,
        outer_tail: outer * zb,
    }
}

/// Cone-kernel arguments. `zbar` is a unit vector in the singular theory; the
/// softened solvers pass `zeta = z/rho(z)` with `|zeta| < 1` through the
/// unchecked entry points.
#[derive(Debug, Clone, Copy)]
pub struct GSKernelInputs {
    pub zbar: Vec3,
    pub vhat: Vec3,
    pub c: f64,
}

impl GSKernelInputs {
    pub fn new(zbar: Vec3, vhat: Vec3, c: f64) -> crate::Result<Self> {
        if (zbar.norm() - 1.0).abs() > 1e-12 {
            return Err(SolverError::Domain(format!("|zbar| = {} is not 1", zbar.norm())));
        }
        if !(c > 0.0) || vhat.norm() >= c {
            return Err(SolverError::Domain(format!("|vhat| = {} must be < c = {c}", vhat.norm())));
        }
        Ok(GSKernelInputs { zbar, vhat, c })
    }

    /// Same kernels evaluated from the momentum `v`.
    pub fn from_momentum(zbar: Vec3, v: &Vec3, c: f64) -> crate::Result<Self> {
        Self::new(zbar, relativistic_velocity(v, c), c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    DT,
    T,
    S,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelValue {
    Vector(Vec3),
    Matrix(Mat3),
}

impl KernelValue {
    pub fn vector(self) -> Vec3 {
        match self {
            KernelValue::Vector(v) => v,
            KernelValue::Matrix(_) => panic!("matrix kernel used as vector"),
        }
    }
    pub fn matrix(self) -> Mat3 {
        match self {
            KernelValue::Matrix(m) => m,
            KernelValue::Vector(_) => panic!("vector kernel used as matrix"),
        }
    }
}

/// Cross-product matrix: `cross_matrix(a) * b == a.cross(&b)`.
#[inline]
pub fn cross_matrix(a: &Vec3) -> Mat3 {
    Mat3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

#[inline]
pub fn k_dt(z: &Vec3, vh: &Vec3, c: f64) -> Vec3 {
    let d = 1.0 + z.dot(vh) / c;
    (z - vh * (z.dot(vh) / (c * c))) / d
}

#[inline]
pub fn k_t(z: &Vec3, vh: &Vec3, c: f64) -> Vec3 {
    let d = 1.0 + z.dot(vh) / c;
    (1.0 - vh.norm_squared() / (c * c)) / (d * d) * (z + vh / c)
}

#[inline]
pub fn k_s(z: &Vec3, vh: &Vec3, c: f64) -> Mat3 {
    let zv = z.dot(vh);
    let d = 1.0 + zv / c;
    // (1 + v^2/c^2)^(-1/2) expressed through v_hat.
    let ginv = (1.0 - vh.norm_squared() / (c * c)).sqrt();
    let bracket = Mat3::identity() * d + (z * zv - vh) * vh.transpose() / (c * c)
        - (z + vh / c) * z.transpose();
    bracket * (ginv / (d * d))
}

#[inline]
pub fn l_dt(z: &Vec3, vh: &Vec3, c: f64) -> Vec3 {
    let d = 1.0 + z.dot(vh) / c;
    z.cross(&(vh / c)) / d
}

#[inline]
pub fn l_t(z: &Vec3, vh: &Vec3, c: f64) -> Vec3 {
    let d = 1.0 + z.dot(vh) / c;
    (1.0 - vh.norm_squared() / (c * c)) / (d * d) * z.cross(vh)
}

/// `L_S F = zbar x (K_S F)`. Expanding the cross product reproduces the
/// displayed second bracket term `-(zbar x vhat) (c zbar + vhat)^T / c^2`
/// exactly, which fixes the first term as `zbar x F`.
#[inline]
pub fn l_s(z: &Vec3, vh: &Vec3, c: f64) -> Mat3 {
    cross_matrix(z) * k_s(z, vh, c)
}

/// Exact E-kernels `K_DT`, `K_T` (vectors) and `K_S` (matrix on the Lorentz force).
pub fn gs_kernel_e(inp: &GSKernelInputs, part: Part) -> KernelValue {
    gs_kernel_e_raw(&inp.zbar, &inp.vhat, inp.c, part)
}

pub fn gs_kernel_e_raw(z: &Vec3, vh: &Vec3, c: f64, part: Part) -> KernelValue {
    match part {
        Part::DT => KernelValue::Vector(k_dt(z, vh, c)),
        Part::T => KernelValue::Vector(k_t(z, vh, c)),
        Part::S => KernelValue::Matrix(k_s(z, vh, c)),
    }
}

/// How the S-part of the magnetic field is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BsMode {
    /// `L_S = [zbar]x K_S`.
    Reconstructed,
    /// Leading term only: `zbar x F`.
    Expanded,
}

/// B-kernels `L_DT`, `L_T` and the S-part matrix.
pub fn gs_kernel_b(inp: &GSKernelInputs, part: Part) -> KernelValue {
    gs_kernel_b_raw(&inp.zbar, &inp.vhat, inp.c, part, BsMode::Reconstructed)
}

pub fn gs_kernel_b_raw(z: &Vec3, vh: &Vec3, c: f64, part: Part, mode: BsMode) -> KernelValue {
    match part {
        Part::DT => KernelValue::Vector(l_dt(z, vh, c)),
        Part::T => KernelValue::Vector(l_t(z, vh, c)),
        Part::S => KernelValue::Matrix(match mode {
            BsMode::Reconstructed => l_s(z, vh, c),
            BsMode::Expanded => cross_matrix(z),
        }),
    }
}

/// Second-order expansions in `1/c` of the cone kernels, in terms of the
/// momentum `v`. Vector parts for DT and T, matrices for S (`1 - zz` for E,
/// `[z]x` for B).
pub mod expansion {
    use super::*;

    pub fn e(z: &Vec3, v: &Vec3, c: f64, part: Part) -> KernelValue {
        let zv = z.dot(v);
        let ic = 1.0 / c;
        match part {
            Part::DT => KernelValue::Vector(
                z - ic * zv * z + ic * ic * (zv * zv * z - zv * v),
            ),
            Part::T => KernelValue::Vector(
                z + ic * (v - 2.0 * zv * z)
                    + ic * ic * (3.0 * zv * zv * z - v.norm_squared() * z - 2.0 * zv * v),
            ),
            Part::S => KernelValue::Matrix(Mat3::identity() - z * z.transpose()),
        }
    }

    pub fn b(z: &Vec3, v: &Vec3, c: f64, part: Part) -> KernelValue {
        let zv = z.dot(v);
        let ic = 1.0 / c;
        let zxv = z.cross(v);
        match part {
            Part::DT => KernelValue::Vector(ic * zxv - ic * ic * zv * zxv),
            Part::T => KernelValue::Vector(zxv - 2.0 * ic * zv * zxv),
            Part::S => KernelValue::Matrix(cross_matrix(z)),
        }
    }
}

/// Integrand-level comparison of exact and expanded cone kernels, including
/// the `c` prefactors each term carries in the field representation. `e` and
/// `b` are the fields at the source point; the exact S-terms act on the
/// Lorentz force `e + vhat x b / c`, the expanded ones on `e` alone.
pub fn integrand_pair(
    field: char,
    part: Part,
    z: &Vec3,
    v: &Vec3,
    e: &Vec3,
    b: &Vec3,
    c: f64,
) -> (Vec3, Vec3) {
    let vh = relativistic_velocity(v, c);
    let force = e + vh.cross(b) / c;
    let ic = 1.0 / c;
    match (field, part) {
        ('E', Part::DT) => (k_dt(z, &vh, c), expansion::e(z, v, c, part).vector()),
        ('E', Part::T) => (k_t(z, &vh, c), expansion::e(z, v, c, part).vector()),
        ('E', Part::S) => (
            ic * ic * k_s(z, &vh, c) * force,
            ic * ic * expansion::e(z, v, c, part).matrix() * e,
        ),
        ('B', Part::DT) => (l_dt(z, &vh, c), expansion::b(z, v, c, part).vector()),
        ('B', Part::T) => (ic * l_t(z, &vh, c), ic * expansion::b(z, v, c, part).vector()),
        ('B', Part::S) => (
            ic * ic * l_s(z, &vh, c) * force,
            ic * ic * expansion::b(z, v, c, part).matrix() * e,
        ),
        _ => panic!("field must be 'E' or 'B'"),
    }
}
