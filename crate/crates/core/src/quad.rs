//! Quadrature rules: Gauss-Legendre on intervals and product rules on the
//! unit sphere.

use crate::Vec3;
use gauss_quad::GaussLegendre;
use std::f64::consts::PI;

/// Gauss-Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    GaussLegendre::new(n.max(2))
        .expect("degree >= 2")
        .as_node_weight_pairs()
        .to_vec()
}

/// Nodes and weights on [a, b].
pub fn gauss_on(n: usize, a: f64, b: f64) -> Vec<(f64, f64)> {
    let h = 0.5 * (b - a);
    let m = 0.5 * (b + a);
    gauss_legendre(n)
        .into_iter()
        .map(|(x, w)| (m + h * x, h * w))
        .collect()
}

/// Composite rule over the listed breakpoints, `n` nodes per panel.
pub fn composite(breaks: &[f64], n: usize) -> Vec<(f64, f64)> {
    let base = gauss_legendre(n);
    let mut out = Vec::with_capacity(n * breaks.len());
    for w in breaks.windows(2) {
        let h = 0.5 * (w[1] - w[0]);
        let m = 0.5 * (w[1] + w[0]);
        out.extend(base.iter().map(|&(x, wt)| (m + h * x, h * wt)));
    }
    out
}

/// Product rule on the unit sphere: Gauss-Legendre in cos(theta) and the
/// periodic trapezoid rule in phi. Weights sum to 4 pi.
#[derive(Debug, Clone)]
pub struct SphereRule {
    pub nodes: Vec<(Vec3, f64)>,
}

impl SphereRule {
    pub fn new(n_theta: usize, n_phi: usize) -> Self {
        let mu = gauss_legendre(n_theta);
        let dphi = 2.0 * PI / n_phi as f64;
        let mut nodes = Vec::with_capacity(n_theta * n_phi);
        for &(m, wm) in &mu {
            let s = (1.0 - m * m).max(0.0).sqrt();
            for k in 0..n_phi {
                let phi = (k as f64 + 0.5) * dphi;
                nodes.push((Vec3::new(s * phi.cos(), s * phi.sin(), m), wm * dphi));
            }
        }
        SphereRule { nodes }
    }

    pub fn integrate<F: FnMut(&Vec3) -> f64>(&self, mut f: F) -> f64 {
        crate::sum::chunked_sum(self.nodes.len(), 0.0, |i| {
            let (w, wt) = &self.nodes[i];
            wt * f(w)
        })
    }

    pub fn integrate_vec<F: FnMut(&Vec3) -> Vec3>(&self, mut f: F) -> Vec3 {
        crate::sum::chunked_sum(self.nodes.len(), Vec3::zeros(), |i| {
            let (w, wt) = &self.nodes[i];
            *wt * f(w)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_area() {
        let r = SphereRule::new(16, 32);
        assert!((r.integrate(|_| 1.0) - 4.0 * PI).abs() < 1e-12);
    }

    #[test]
    fn sphere_second_moment() {
        let r = SphereRule::new(16, 32);
        let m = r.integrate(|w| w.z * w.z);
        assert!((m - 4.0 * PI / 3.0).abs() < 1e-12);
    }

    #[test]
    fn interval_polynomial() {
        let q = gauss_on(4, 0.0, 2.0);
        let s: f64 = q.iter().map(|&(x, w)| w * x.powi(7)).sum();
        assert!((s - 2f64.powi(8) / 8.0).abs() < 1e-10);
    }
}
