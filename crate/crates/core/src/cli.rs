//! Subcommands behind the `darwin-kinetics` binary. Each one writes its CSVs
//! and a `checks.csv` into `<output.dir>/<config hash>/<subcommand>/`;
//! wall-clock times and solver statistics go to `run.log` so that the CSVs
//! stay reproducible.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::config::RunConfig;
use crate::darwin::{ed_decomposition, matched_initial_fields, step_lvp};
use crate::dvm::{energy, step_dvm, DVMState};
use crate::harness::{
    convergence_study, initial_ensemble, initial_lvp, integrals_selftest, kernel_expansion_study, rescale_equivalence_check,
    ConvergenceReport,
};
use crate::output::{fmt17, Table};
use crate::rvm::{field_gs, step_rvm, RVMState};
use crate::sum::par_map;
use crate::vp::{field_e0, step_vp, VPState};
use crate::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    RunVp,
    RunDarwin,
    RunDvm,
    RunRvm,
    Converge,
    RescaleCheck,
    IntegralsSelftest,
}

impl Subcommand {
    pub const ALL: [Subcommand; 7] = [
        Subcommand::RunVp,
        Subcommand::RunDarwin,
        Subcommand::RunDvm,
        Subcommand::RunRvm,
        Subcommand::Converge,
        Subcommand::RescaleCheck,
        Subcommand::IntegralsSelftest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Subcommand::RunVp => "run-vp",
            Subcommand::RunDarwin => "run-darwin",
            Subcommand::RunDvm => "run-dvm",
            Subcommand::RunRvm => "run-rvm",
            Subcommand::Converge => "converge",
            Subcommand::RescaleCheck => "rescale-check",
            Subcommand::IntegralsSelftest => "integrals-selftest",
        }
    }
}

impl FromStr for Subcommand {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Subcommand::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| format!("unknown subcommand '{s}'"))
    }
}

/// One pass/fail line of `checks.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, hi: f64) -> Self {
        Check { name: name.into(), value, lo: f64::NEG_INFINITY, hi }
    }

    pub fn at_least(name: impl Into<String>, value: f64, lo: f64) -> Self {
        Check { name: name.into(), value, lo, hi: f64::INFINITY }
    }

    pub fn within(name: impl Into<String>, value: f64, lo: f64, hi: f64) -> Self {
        Check { name: name.into(), value, lo, hi }
    }

    /// NaN (a slope that could not be fitted) fails.
    pub fn pass(&self) -> bool {
        self.value >= self.lo && self.value <= self.hi
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub dir: PathBuf,
    pub checks: Vec<Check>,
}

impl Outcome {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(Check::pass)
    }

    /// 0 when every check passed, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.pass() {
            0
        } else {
            1
        }
    }
}

/// Exit code for a solver or configuration error.
pub const EXIT_SOLVER_ERROR: i32 = 2;

struct Run {
    dir: PathBuf,
    log: String,
    clock: Instant,
    checks: Vec<Check>,
}

impl Run {
    fn new(cfg: &RunConfig, cmd: Subcommand) -> crate::Result<Self> {
        let root = crate::output::run_dir(Path::new(&cfg.output.dir), &cfg.hash())?;
        std::fs::write(root.join("config.toml"), cfg.canonical())?;
        let dir = crate::output::run_dir(&root, cmd.name())?;
        let mut log = String::new();
        let _ = writeln!(log, "subcommand {}\nconfig_hash {}", cmd.name(), cfg.hash());
        Ok(Run { dir, log, clock: Instant::now(), checks: vec![] })
    }

    fn phase(&mut self, name: &str) {
        let _ = writeln!(self.log, "runtime_s {name} {:.3}", self.clock.elapsed().as_secs_f64());
        self.clock = Instant::now();
    }

    fn note(&mut self, line: String) {
        self.log.push_str(&line);
        self.log.push('\n');
    }

    fn write(&self, name: &str, t: &Table) -> crate::Result<()> {
        Ok(t.write(&self.dir.join(name))?)
    }

    fn finish(mut self) -> crate::Result<Outcome> {
        let mut t = Table::new(&["check", "value", "lo", "hi", "pass"]);
        for c in &self.checks {
            t.push(vec![c.name.clone(), fmt17(c.value), fmt17(c.lo), fmt17(c.hi), c.pass().to_string()]);
        }
        self.write("checks.csv", &t)?;
        self.phase("report");
        std::fs::write(self.dir.join("run.log"), &self.log)?;
        Ok(Outcome { dir: self.dir, checks: self.checks })
    }
}

fn probe_header(with_b: bool) -> Vec<&'static str> {
    let mut h = vec!["t", "x1", "x2", "x3", "E1", "E2", "E3"];
    if with_b {
        h.extend(["B1", "B2", "B3"]);
    }
    h
}

fn push_probe(t: &mut Table, time: f64, x: &Vec3, e: &Vec3, b: Option<&Vec3>) {
    let mut row = vec![time, x.x, x.y, x.z, e.x, e.y, e.z];
    if let Some(b) = b {
        row.extend([b.x, b.y, b.z]);
    }
    t.push_f64(&row);
}

fn write_ensemble(run: &Run, name: &str, e: &crate::ensemble::Ensemble) -> crate::Result<()> {
    e.write_csv(&run.dir.join(name))
}

/// Runs one subcommand to completion; errors are solver or I/O failures.
pub fn execute(cmd: Subcommand, cfg: &RunConfig) -> crate::Result<Outcome> {
    let mut run = Run::new(cfg, cmd)?;
    match cmd {
        Subcommand::RunVp => run_vp(cfg, &mut run)?,
        Subcommand::RunDarwin => run_darwin(cfg, &mut run)?,
        Subcommand::RunDvm => run_dvm(cfg, &mut run)?,
        Subcommand::RunRvm => run_rvm(cfg, &mut run)?,
        Subcommand::Converge => converge(cfg, &mut run)?,
        Subcommand::RescaleCheck => rescale_check(cfg, &mut run)?,
        Subcommand::IntegralsSelftest => selftest(cfg, &mut run)?,
    }
    run.finish()
}

fn run_vp(cfg: &RunConfig, run: &mut Run) -> crate::Result<()> {
    let dt = cfg.discretization.dt;
    let mut s = VPState::new(initial_ensemble(cfg, cfg.discretization.n_per_axis)?, dt);
    write_ensemble(run, "ensemble_initial.csv", &s.ensemble)?;
    let boxp = cfg.box_probes();
    let mut probes = Table::new(&probe_header(false));
    let h0 = s.energy();
    let mut drift = 0.0f64;
    for k in 0..=cfg.steps() {
        if k > 0 {
            step_vp(&mut s, dt);
            drift = drift.max((s.energy() - h0).abs() / h0.abs());
        }
        if k % cfg.output.every == 0 || k == cfg.steps() {
            let e: Vec<Vec3> = par_map(boxp.len(), |i| field_e0(&s, &boxp[i]));
            for (x, e) in boxp.iter().zip(&e) {
                push_probe(&mut probes, s.t, x, e, None);
            }
        }
    }
    run.phase("solve");
    write_ensemble(run, "ensemble_final.csv", &s.ensemble)?;
    run.write("probe.csv", &probes)?;
    run.checks.push(Check::at_most("energy_drift", drift, cfg.tolerances.energy_drift));
    Ok(())
}

fn run_darwin(cfg: &RunConfig, run: &mut Run) -> crate::Result<()> {
    let dt = cfg.discretization.dt;
    let c = cfg.ladder.c;
    let ic2 = 1.0 / (c * c);
    let mut s = initial_lvp(cfg, cfg.discretization.n_per_axis, dt)?;
    write_ensemble(run, "ensemble_initial.csv", &s.base.ensemble)?;
    let boxp = cfg.box_probes();
    let mut probes = Table::new(&probe_header(false));
    let (mut w2_sum, mut two_form, mut identity) = (0.0f64, 0.0f64, 0.0f64);
    for k in 0..=cfg.steps() {
        if k > 0 {
            step_lvp(&mut s, dt);
        }
        let w2 = s.w2();
        let abs: f64 = w2.iter().map(|w| w.abs()).sum();
        if abs > 0.0 {
            w2_sum = w2_sum.max(crate::sum::chunked_sum(w2.len(), 0.0, |i| w2[i]).abs() / abs);
        }
        identity = identity.max(s.identity_residual());
        if k % cfg.output.every == 0 || k == cfg.steps() {
            let snap = s.snapshot();
            let f: Vec<(Vec3, Vec3, Vec3)> =
                par_map(boxp.len(), |i| (snap.e0(&boxp[i], None), snap.e2(&boxp[i], None), snap.e2_alt(&boxp[i], None)));
            let scale = f.iter().map(|p| p.1.norm()).fold(0.0f64, f64::max);
            let gap = f.iter().map(|p| (p.1 - p.2).norm()).fold(0.0f64, f64::max);
            if scale > 0.0 {
                two_form = two_form.max(gap / scale);
            }
            for (x, p) in boxp.iter().zip(&f) {
                push_probe(&mut probes, s.t, x, &(p.0 + ic2 * p.1), None);
            }
        }
    }
    run.phase("solve");
    write_ensemble(run, "ensemble_final.csv", &s.base.ensemble)?;
    run.write("probe.csv", &probes)?;
    let mut dec = Table::new(&[
        "c", "t", "x1", "x2", "x3", "ext1", "ext2", "ext3", "int1", "int2", "int3", "bd1", "bd2", "bd3", "full1", "full2", "full3",
    ]);
    for &c in &cfg.ladder.c_list {
        for t in cfg.check_times() {
            let snap = s.snapshot_at(t)?;
            let rows: Vec<crate::Result<(crate::darwin::Decomposition, Vec3)>> = par_map(boxp.len(), |i| {
                let d = ed_decomposition(&s, &boxp[i], t, c)?;
                Ok((d, snap.e0(&boxp[i], None) + snap.e2(&boxp[i], None) / (c * c)))
            });
            for (x, r) in boxp.iter().zip(rows) {
                let (d, full) = r?;
                let mut row = vec![c, t, x.x, x.y, x.z];
                for v in [d.ext, d.int, d.bd, full] {
                    row.extend([v.x, v.y, v.z]);
                }
                dec.push_f64(&row);
            }
        }
    }
    run.write("decomposition.csv", &dec)?;
    run.phase("decomposition");
    let tol = &cfg.tolerances;
    run.checks.push(Check::at_most("e2_two_form", two_form, tol.two_form));
    run.checks.push(Check::at_most("w2_sum", w2_sum, tol.w2_sum));
    run.checks.push(Check::at_most("w2_identity", identity, tol.w2_sum));
    Ok(())
}

fn run_dvm(cfg: &RunConfig, run: &mut Run) -> crate::Result<()> {
    let dt = cfg.discretization.dt;
    let mut s = DVMState::new(initial_ensemble(cfg, cfg.discretization.n_per_axis)?, cfg.ladder.c, dt, cfg.dvm_options())?;
    write_ensemble(run, "ensemble_initial.csv", &s.ensemble)?;
    let boxp = cfg.box_probes();
    let mut probes = Table::new(&probe_header(true));
    let mut log = Table::new(&["t", "H_total", "H_kin", "H_es", "H_mag", "residual", "iters"]);
    let h0 = energy(&s).total;
    let (mut drift, mut iters) = (0.0f64, 0usize);
    for k in 0..=cfg.steps() {
        if k > 0 {
            step_dvm(&mut s, dt)?;
        }
        let h = energy(&s);
        drift = drift.max((h.total - h0).abs() / h0.abs());
        let st = s.stats();
        iters = iters.max(st.iterations);
        if k % cfg.output.every == 0 || k == cfg.steps() {
            log.push_f64(&[s.t, h.total, h.kinetic, h.electrostatic, h.magnetic, st.residual, st.iterations as f64]);
            let src = s.sources_at(s.t)?;
            let f: Vec<(Vec3, Vec3)> = par_map(boxp.len(), |i| (src.e(&boxp[i], None), src.b(&boxp[i], None)));
            for (x, (e, b)) in boxp.iter().zip(&f) {
                push_probe(&mut probes, s.t, x, e, Some(b));
            }
        }
    }
    run.phase("solve");
    run.note(format!("max_fixed_point_iterations {iters}"));
    write_ensemble(run, "ensemble_final.csv", &s.ensemble)?;
    run.write("energy.csv", &log)?;
    run.write("probe.csv", &probes)?;
    run.checks.push(Check::at_most("energy_drift", drift, cfg.tolerances.energy_drift));
    Ok(())
}

fn run_rvm(cfg: &RunConfig, run: &mut Run) -> crate::Result<()> {
    let dt = cfg.discretization.dt;
    let c = cfg.ladder.c;
    let ensemble = initial_ensemble(cfg, cfg.discretization.n_per_axis)?;
    let matched = matched_initial_fields(&initial_lvp(cfg, cfg.discretization.n_per_axis, dt)?, c)?;
    let mut s = RVMState::new(ensemble, c, dt)?;
    write_ensemble(run, "ensemble_initial.csv", &s.ensemble)?;
    let boxp = cfg.box_probes();
    let mut probes = Table::new(&probe_header(true));
    let mut initial = 0.0f64;
    for k in 0..=cfg.steps() {
        if k > 0 {
            step_rvm(&mut s, dt)?;
        }
        if k % cfg.output.every == 0 || k == cfg.steps() {
            let f: Vec<crate::Result<(Vec3, Vec3)>> =
                par_map(boxp.len(), |i| field_gs(&s, &boxp[i], s.t).map(|g| (g.e.total(), g.b.total())));
            let f: Vec<(Vec3, Vec3)> = f.into_iter().collect::<crate::Result<_>>()?;
            if k == 0 {
                let scale = f.iter().map(|p| p.0.norm().max(p.1.norm())).fold(0.0f64, f64::max);
                for (x, (e, b)) in boxp.iter().zip(&f) {
                    let gap = (e - matched.e(x)).norm().max((b - matched.b(x)).norm());
                    initial = initial.max(gap / scale);
                }
            }
            for (x, (e, b)) in boxp.iter().zip(&f) {
                push_probe(&mut probes, s.t, x, e, Some(b));
            }
        }
    }
    run.phase("solve");
    write_ensemble(run, "ensemble_final.csv", &s.ensemble)?;
    run.write("probe.csv", &probes)?;
    run.checks.push(Check::at_most("initial_fields", initial, cfg.tolerances.initial_fields));
    Ok(())
}

/// The slope checks applied to a convergence report.
pub fn convergence_checks(cfg: &RunConfig, r: &ConvergenceReport) -> Vec<Check> {
    let tol = &cfg.tolerances;
    let rate = |name: &str, guard: bool| r.fit(name, guard).map(|f| f.slope).unwrap_or(f64::NAN);
    let mut out = Vec::new();
    let mut names = vec!["darwin_f", "darwin_e", "darwin_b"];
    if cfg.ladder.with_dvm {
        names.extend(["dvm_f", "dvm_e", "dvm_b"]);
    }
    for n in &names {
        out.push(Check::within(format!("rate_{n}"), rate(n, false), tol.slope_lo, tol.slope_hi));
    }
    out.push(Check::within("rate_newtonian_e", rate("newtonian_e", false), tol.newtonian_lo, tol.newtonian_hi));
    for n in ["decomp_darwin", "decomp_rvm"] {
        out.push(Check::at_least(format!("rate_{n}"), rate(n, false), tol.decomposition_slope));
    }
    if !r.guard.is_empty() {
        for n in ["darwin_f", "darwin_e", "darwin_b"] {
            out.push(Check::at_most(format!("guard_shift_{n}"), (rate(n, true) - rate(n, false)).abs(), 0.2));
        }
    }
    out
}

fn converge(cfg: &RunConfig, run: &mut Run) -> crate::Result<()> {
    let r = convergence_study(cfg)?;
    run.phase("solve");
    for row in r.rows.iter().chain(&r.guard) {
        if let Some(it) = row.dvm_iterations {
            run.note(format!("dvm_iterations markers={} c={} {it}", row.markers, row.c));
        }
    }
    run.write("convergence.csv", &r.rows_table())?;
    run.write("fits.csv", &r.fits_table())?;
    run.checks = convergence_checks(cfg, &r);
    Ok(())
}

fn rescale_check(cfg: &RunConfig, run: &mut Run) -> crate::Result<()> {
    let mut t = Table::new(&["eps", "residual", "discretization_error", "group_residual", "pass"]);
    for &eps in &cfg.rescale.eps_list {
        let r = rescale_equivalence_check(cfg, eps)?;
        t.push(vec![fmt17(r.eps), fmt17(r.residual), fmt17(r.discretization_error), fmt17(r.group_residual), r.pass.to_string()]);
        let bound = if eps == 1.0 { 1e-12 } else { cfg.tolerances.rescale_factor * r.discretization_error };
        run.checks.push(Check::at_most(format!("residual_eps_{eps}"), r.residual, bound));
        run.checks.push(Check::at_most(format!("group_eps_{eps}"), r.group_residual, 1e-12));
    }
    run.phase("solve");
    run.write("rescale.csv", &t)
}

fn selftest(_cfg: &RunConfig, run: &mut Run) -> crate::Result<()> {
    let rows = integrals_selftest();
    let mut t = Table::new(&["name", "case", "value", "reference", "rel_err", "tol", "pass"]);
    let mut worst: Vec<(&str, f64, f64)> = Vec::new();
    for r in &rows {
        t.push(vec![r.name.into(), r.case.to_string(), fmt17(r.value), fmt17(r.reference), fmt17(r.rel_err), fmt17(r.tol), r.pass().to_string()]);
        match worst.iter_mut().find(|w| w.0 == r.name) {
            Some(w) => w.1 = w.1.max(r.rel_err),
            None => worst.push((r.name, r.rel_err, r.tol)),
        }
    }
    run.write("selftest.csv", &t)?;
    for (name, err, tol) in worst {
        run.checks.push(Check::at_most(name, err, tol));
    }
    let mut k = Table::new(&["field", "part", "sup_rate", "min_rate", "max_rate", "skipped", "pass"]);
    for s in kernel_expansion_study(100, 0x5eed, &[4.0, 8.0, 16.0, 32.0]) {
        let check = Check::at_least(format!("kernel_{}_{:?}", s.field, s.part), s.sup_slope, 2.7);
        k.push(vec![
            s.field.to_string(),
            format!("{:?}", s.part),
            fmt17(s.sup_slope),
            fmt17(s.min_slope),
            fmt17(s.max_slope),
            s.skipped.to_string(),
            check.pass().to_string(),
        ]);
        run.checks.push(check);
    }
    run.write("kernels.csv", &k)?;
    run.phase("solve");
    Ok(())
}

/// Reads the config and runs; maps every failure to an exit code.
pub fn main_with(cmd: Subcommand, config: &Path) -> i32 {
    let result = RunConfig::from_file(config).and_then(|cfg| execute(cmd, &cfg));
    match result {
        Ok(out) => {
            for c in &out.checks {
                println!("{} {} value={:e} range=[{:e}, {:e}]", if c.pass() { "PASS" } else { "FAIL" }, c.name, c.value, c.lo, c.hi);
            }
            println!("output {}", out.dir.display());
            out.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_SOLVER_ERROR
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subcommand_names_round_trip() {
        for c in Subcommand::ALL {
            assert_eq!(c.name().parse::<Subcommand>(), Ok(c));
        }
        assert!("run".parse::<Subcommand>().is_err());
    }

    #[test]
    fn checks() {
        assert!(Check::within("a", 3.0, 2.5, 3.5).pass());
        assert!(!Check::within("a", f64::NAN, 2.5, 3.5).pass());
        assert!(!Check::at_most("a", 2.0, 1.0).pass());
        assert!(Check::at_least("a", 2.0, 1.0).pass());
    }
}
