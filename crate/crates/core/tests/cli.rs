use std::path::{Path, PathBuf};
use std::process::Command;

fn workdir(name: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.toml");
    let text = format!(
        "[discretization]\nn_per_axis = 2\ndt = 0.02\nt_end = 0.1\n[ladder]\nc_list = [4.0, 8.0, 16.0]\n[output]\ndir = \"{}\"\nevery = 2\n",
        dir.join("runs").display()
    );
    std::fs::write(&p, text).unwrap();
    p
}

fn run(sub: &str, config: &Path) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_darwin-kinetics")).args([sub, "--config"]).arg(config).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stdout).into_owned())
}

fn run_dir(dir: &Path) -> PathBuf {
    let runs: Vec<_> = std::fs::read_dir(dir.join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 1);
    assert!(runs[0].join("config.toml").is_file());
    runs[0].clone()
}

#[test]
fn exit_codes() {
    let d = workdir("exit");
    let cfg = small_config(&d);
    assert_eq!(run("integrals-selftest", &cfg).0, 0);
    assert_eq!(run("run-rvm", &cfg).0, 0);
    // The w2 sum is a quadrature error far above its tolerance.
    let (code, out) = run("run-darwin", &cfg);
    assert_eq!(code, 1, "{out}");
    assert!(out.contains("FAIL w2_sum"));

    let bad = d.join("bad.toml");
    std::fs::write(&bad, "[discretization]\ndt = 0.03\nt_end = 0.1\n").unwrap();
    assert_eq!(run("run-vp", &bad).0, 2);
    assert_eq!(run("run-vp", &d.join("missing.toml")).0, 2);
    let st = Command::new(env!("CARGO_BIN_EXE_darwin-kinetics")).args(["nope", "--config"]).arg(&cfg).status().unwrap();
    assert_ne!(st.code(), Some(0));
}

#[test]
fn outputs_are_deterministic() {
    let subs = ["run-vp", "run-darwin", "run-dvm", "run-rvm", "converge", "rescale-check", "integrals-selftest"];
    let mut snapshots = Vec::new();
    for pass in 0..2 {
        let d = workdir(&format!("det{pass}"));
        let cfg = small_config(&d);
        for s in subs {
            run(s, &cfg);
        }
        let dir = run_dir(&d);
        let mut files: Vec<(String, Vec<u8>)> = Vec::new();
        for s in subs {
            for p in std::fs::read_dir(dir.join(s)).unwrap().map(|e| e.unwrap().path()) {
                if p.extension().is_some_and(|x| x == "csv") {
                    files.push((format!("{s}/{}", p.file_name().unwrap().to_string_lossy()), std::fs::read(&p).unwrap()));
                }
            }
        }
        files.sort();
        snapshots.push((dir.file_name().unwrap().to_owned(), files));
    }
    let names: Vec<&str> = snapshots[0].1.iter().map(|f| f.0.as_str()).collect();
    for want in [
        "run-vp/probe.csv",
        "run-darwin/decomposition.csv",
        "run-dvm/energy.csv",
        "run-rvm/probe.csv",
        "converge/convergence.csv",
        "converge/fits.csv",
        "rescale-check/rescale.csv",
        "integrals-selftest/selftest.csv",
        "integrals-selftest/kernels.csv",
        "run-dvm/ensemble_final.csv",
    ] {
        assert!(names.contains(&want), "{names:?}");
    }
    // Output dirs differ, so the hashes differ; the contents must not.
    assert_ne!(snapshots[0].0, snapshots[1].0);
    assert_eq!(snapshots[0].1, snapshots[1].1);
}

#[test]
fn csv_headers() {
    let d = workdir("headers");
    let cfg = small_config(&d);
    run("run-dvm", &cfg);
    let dir = run_dir(&d).join("run-dvm");
    let head = |f: &str| std::fs::read_to_string(dir.join(f)).unwrap().lines().next().unwrap().to_owned();
    assert_eq!(head("energy.csv"), "t,H_total,H_kin,H_es,H_mag,residual,iters");
    assert_eq!(head("probe.csv"), "t,x1,x2,x3,E1,E2,E3,B1,B2,B3");
    assert_eq!(head("ensemble_initial.csv"), "t,x1,x2,x3,v1,v2,v3,w,w2");
    run("run-darwin", &cfg);
    let darwin = run_dir(&d).join("run-darwin");
    let first = std::fs::read_to_string(darwin.join("decomposition.csv")).unwrap();
    assert!(first.starts_with("c,t,x1,x2,x3,ext1,"));
    let row = std::fs::read_to_string(dir.join("ensemble_initial.csv")).unwrap();
    // 17 significant digits in every nonzero field.
    for field in row.lines().nth(1).unwrap().split(',').filter(|f| *f != "0") {
        let mantissa = field.split('e').next().unwrap();
        assert_eq!(mantissa.chars().filter(char::is_ascii_digit).count(), 17, "{field}");
    }
}
