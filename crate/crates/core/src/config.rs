//! Run configuration: `key = value` lines grouped in `[sections]` (a TOML
//! subset). Every key has a default, unknown keys are rejected, and the run
//! directory is named by the SHA-256 of the canonical form.

use crate::dvm::DvmOptions;
use crate::ensemble::InitialProfile;
use crate::darwin::Rho2Mode;
use crate::{SolverError, Vec3, Vec6};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileSection {
    pub center_x: [f64; 3],
    pub center_v: [f64; 3],
    pub radius_x: f64,
    pub radius_v: f64,
    pub amplitude: f64,
}

impl Default for ProfileSection {
    fn default() -> Self {
        ProfileSection { center_x: [0.0; 3], center_v: [0.3, 0.0, 0.0], radius_x: 1.0, radius_v: 0.5, amplitude: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Discretization {
    pub n_per_axis: usize,
    pub delta: f64,
    pub dt: f64,
    pub t_end: f64,
    /// `displacement` or `weights`.
    pub rho2_mode: String,
}

impl Default for Discretization {
    fn default() -> Self {
        Discretization { n_per_axis: 3, delta: 0.3, dt: 5e-3, t_end: 0.5, rho2_mode: "displacement".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ladder {
    pub c_list: Vec<f64>,
    /// Speed of light for the single-run subcommands.
    pub c: f64,
    /// Marker resolution of the refinement guard; 0 disables it.
    pub guard_n_per_axis: usize,
    /// Also compare DVM against RVM in `converge`.
    pub with_dvm: bool,
}

impl Default for Ladder {
    fn default() -> Self {
        Ladder { c_list: vec![4.0, 8.0, 16.0, 32.0], c: 4.0, guard_n_per_axis: 0, with_dvm: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSpec {
    pub box_half_width: f64,
    /// Probe points per axis of the box grid.
    pub box_points: usize,
    /// Phase probes sit at `center ± offset` on every axis (64 points).
    pub phase_x_offset: f64,
    pub phase_v_offset: f64,
    /// Comparison times; empty means `t_end/2` and `t_end`.
    pub check_times: Vec<f64>,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        ProbeSpec { box_half_width: 1.0, box_points: 3, phase_x_offset: 0.35, phase_v_offset: 0.15, check_times: vec![] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DvmSection {
    pub tol: f64,
    pub max_iter: usize,
    pub quartic_terms: bool,
}

impl Default for DvmSection {
    fn default() -> Self {
        let d = DvmOptions::default();
        DvmSection { tol: d.tol, max_iter: d.max_iter, quartic_terms: d.quartic_terms }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Relative energy drift accepted by `run-vp` and `run-dvm`.
    pub energy_drift: f64,
    /// Two-form equivalence of `E2`, relative to `sup |E2|`.
    pub two_form: f64,
    /// `|Σ w2| / Σ |w2|`.
    pub w2_sum: f64,
    /// `t = 0` field reproduction.
    pub initial_fields: f64,
    /// Smallest accepted remainder slope of the decompositions.
    pub decomposition_slope: f64,
    pub slope_lo: f64,
    pub slope_hi: f64,
    pub newtonian_lo: f64,
    pub newtonian_hi: f64,
    /// Rescaled residual over the measured discretization error.
    pub rescale_factor: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            energy_drift: 1e-3,
            two_form: 5e-3,
            w2_sum: 1e-10,
            initial_fields: 1e-8,
            decomposition_slope: 2.5,
            slope_lo: 2.5,
            slope_hi: 3.5,
            newtonian_lo: 0.8,
            newtonian_hi: 1.4,
            rescale_factor: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Rescale {
    pub eps_list: Vec<f64>,
}

impl Default for Rescale {
    fn default() -> Self {
        Rescale { eps_list: vec![1.0, 0.25, 0.0625] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
    /// Probe rows are written every this many steps.
    pub every: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: "runs".into(), every: 10 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub profile: ProfileSection,
    pub discretization: Discretization,
    pub ladder: Ladder,
    pub probes: ProbeSpec,
    pub dvm: DvmSection,
    pub tolerances: Tolerances,
    pub rescale: Rescale,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> crate::Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| SolverError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> crate::Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> crate::Result<()> {
        let d = &self.discretization;
        let bad = |m: String| Err(SolverError::Config(m));
        if d.n_per_axis < 2 {
            return bad(format!("n_per_axis must be >= 2, got {}", d.n_per_axis));
        }
        if !(d.delta > 0.0 && d.dt > 0.0 && d.t_end >= 0.0) {
            return bad("delta and dt must be > 0 and t_end >= 0".into());
        }
        let steps = d.t_end / d.dt;
        if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
            return bad(format!("t_end = {} is not a multiple of dt = {}", d.t_end, d.dt));
        }
        self.rho2_mode()?;
        let cl = &self.ladder.c_list;
        if cl.windows(2).any(|w| w[1] <= w[0]) {
            return bad("c_list must be strictly ascending".into());
        }
        if cl.iter().chain([&self.ladder.c]).any(|&c| c < crate::dvm::C_MIN) {
            return bad(format!("every c must be >= {}", crate::dvm::C_MIN));
        }
        if self.probes.box_points == 0 {
            return bad("box_points must be >= 1".into());
        }
        if self.probes.check_times.iter().any(|&t| t < 0.0 || t > d.t_end) {
            return bad("check_times must lie in [0, t_end]".into());
        }
        if self.rescale.eps_list.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
            return bad("eps must lie in (0, 1]".into());
        }
        if self.output.every == 0 {
            return bad("output.every must be >= 1".into());
        }
        Ok(())
    }

    /// Canonical text: every key, defaults filled in, fixed order.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical form, first 16 characters.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_dir(&self) -> PathBuf {
        Path::new(&self.output.dir).join(self.hash())
    }

    pub fn profile(&self) -> InitialProfile {
        let p = &self.profile;
        InitialProfile {
            center_x: Vec3::from(p.center_x),
            center_v: Vec3::from(p.center_v),
            radius_x: p.radius_x,
            radius_v: p.radius_v,
            amplitude: p.amplitude,
        }
    }

    pub fn rho2_mode(&self) -> crate::Result<Rho2Mode> {
        match self.discretization.rho2_mode.as_str() {
            "displacement" => Ok(Rho2Mode::Displacement),
            "weights" => Ok(Rho2Mode::Weights),
            m => Err(SolverError::Config(format!("unknown rho2_mode '{m}'"))),
        }
    }

    pub fn dvm_options(&self) -> DvmOptions {
        DvmOptions { tol: self.dvm.tol, max_iter: self.dvm.max_iter, quartic_terms: self.dvm.quartic_terms }
    }

    pub fn steps(&self) -> usize {
        (self.discretization.t_end / self.discretization.dt).round() as usize
    }

    pub fn check_times(&self) -> Vec<f64> {
        if self.probes.check_times.is_empty() {
            let t = self.discretization.t_end;
            if t == 0.0 {
                vec![0.0]
            } else {
                vec![0.5 * t, t]
            }
        } else {
            self.probes.check_times.clone()
        }
    }

    /// Regular grid over the probe box.
    pub fn box_probes(&self) -> Vec<Vec3> {
        let (h, n) = (self.probes.box_half_width, self.probes.box_points);
        let node = |k: usize| if n == 1 { 0.0 } else { -h + 2.0 * h * k as f64 / (n - 1) as f64 };
        let c = Vec3::from(self.profile.center_x);
        let mut out = Vec::with_capacity(n * n * n);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    out.push(c + Vec3::new(node(i), node(j), node(k)));
                }
            }
        }
        out
    }

    /// The 64 phase-space corners `center ± offset`.
    pub fn phase_probes(&self) -> Vec<Vec6> {
        let (cx, cv) = (self.profile.center_x, self.profile.center_v);
        let (ox, ov) = (self.probes.phase_x_offset, self.probes.phase_v_offset);
        (0..64u32)
            .map(|bits| {
                let sgn = |k: u32| if bits >> k & 1 == 1 { 1.0 } else { -1.0 };
                Vec6::new(
                    cx[0] + sgn(0) * ox,
                    cx[1] + sgn(1) * ox,
                    cx[2] + sgn(2) * ox,
                    cv[0] + sgn(3) * ov,
                    cv[1] + sgn(4) * ov,
                    cv[2] + sgn(5) * ov,
                )
            })
            .collect()
    }
}
