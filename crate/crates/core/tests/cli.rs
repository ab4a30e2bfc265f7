mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use common::{one_server, random_instance};
use proptest::prelude::*;
use stallbound::io::{read_point, read_topology, write_point, write_topology};
use stallbound::model::{family, closest_feasible, ControlPoint, SystemTopology, VideoCatalog};
use stallbound::workload::{generate_catalog, read_catalog_csv, write_catalog_csv, WorkloadSpec};

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn stallbound(dir: &Path, args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_stallbound")).current_dir(dir).args(args).output().unwrap();
    Run {
        code: out.status.code().unwrap(),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

fn save_instance(dir: &Path, topo: &SystemTopology, cat: &VideoCatalog, point: Option<&ControlPoint>) {
    let mut buf = Vec::new();
    write_topology(topo, &mut buf, "fixture").unwrap();
    fs::write(dir.join("topology.toml"), buf).unwrap();
    let mut buf = Vec::new();
    write_catalog_csv(cat, &mut buf, "fixture").unwrap();
    fs::write(dir.join("catalog.csv"), buf).unwrap();
    if let Some(p) = point {
        let mut buf = Vec::new();
        write_point(p, &mut buf, "fixture").unwrap();
        fs::write(dir.join("point.txt"), buf).unwrap();
    }
}

fn config(dir: &Path, name: &str, body: &str) {
    fs::write(dir.join(name), body).unwrap();
}

/// Data rows of a CSV with one leading provenance comment.
fn rows(path: &Path) -> (String, Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let prov = lines.next().unwrap().to_string();
    let header: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
    let body = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (prov, header, body)
}

fn col(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name} in {header:?}"))
}

fn tiny_cached(dir: &Path) {
    let inst = one_server((10.0, 20.0, 0.01), vec![3, 2], vec![0.05, 0.1], vec![3, 2], vec![1.0], vec![0.5], vec![0.5], 0.5);
    let mut cat = inst.catalog.clone();
    cat.d_s = 1.0;
    save_instance(dir, &inst.topology, &cat, Some(&inst.point));
}

#[test]
fn fully_cached_bound_falls_with_sigma() {
    let dir = tempfile::tempdir().unwrap();
    tiny_cached(dir.path());
    config(
        dir.path(),
        "run.toml",
        "command = \"eval-bound\"\ntopology = \"topology.toml\"\ncatalog = \"catalog.csv\"\npoint = \"point.txt\"\nsigma_grid = [0.0, 0.5, 1.0, 2.0, 5.0, 10.0]\n",
    );
    let run = stallbound(dir.path(), &["--config", "run.toml"]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    assert!(run.stdout.contains("bound.csv"));
    let (prov, header, body) = rows(&dir.path().join("out/bound.csv"));
    assert!(prov.starts_with("# stallbound ") && prov.contains("seed=") && prov.contains("config_sha256="), "{prov}");
    assert_eq!(
        header,
        ["file_id", "sigma", "raw_bound", "clipped_bound", "delta1", "delta2", "delta3", "delta4", "feasible"]
    );
    assert_eq!(body.len(), 2 * 6);
    let (c_file, c_raw) = (col(&header, "file_id"), col(&header, "raw_bound"));
    for file in ["0", "1"] {
        let raw: Vec<f64> = body.iter().filter(|r| r[c_file] == file).map(|r| r[c_raw].parse().unwrap()).collect();
        assert!(raw.windows(2).all(|w| w[1] <= w[0]), "{raw:?}");
    }
    assert!(body.iter().all(|r| r[col(&header, "feasible")] == "true"));
}

#[test]
fn simulated_tails_stay_under_the_evaluated_bound() {
    let dir = tempfile::tempdir().unwrap();
    let inst = random_instance(11, 2, 3, 4, 2, 0.6);
    save_instance(dir.path(), &inst.topology, &inst.catalog, Some(&inst.point));
    let common = "topology = \"topology.toml\"\ncatalog = \"catalog.csv\"\npoint = \"point.txt\"\nsigma_grid = [0.0, 0.5, 1.0, 2.0, 4.0]\n";
    config(dir.path(), "sim.toml", &format!("command = \"simulate\"\n{common}[simulate]\nhorizon = 20000.0\nsegments = true\n"));
    config(dir.path(), "bound.toml", &format!("command = \"eval-bound\"\n{common}"));
    for name in ["sim.toml", "bound.toml"] {
        let run = stallbound(dir.path(), &["--config", name]);
        assert_eq!(run.code, 0, "{}", run.stderr);
    }
    let out = dir.path().join("out");
    assert!(out.join("trace.csv").exists() && out.join("segments.csv").exists());
    let (_, eh, emp) = rows(&out.join("empirical.csv"));
    let (_, bh, bound) = rows(&out.join("bound.csv"));
    assert_eq!(eh, ["file_id", "sigma", "p_hat", "stderr", "n"]);
    for e in &emp {
        let b = bound.iter().find(|b| b[0] == e[0] && b[1] == e[1]).unwrap();
        let clipped: f64 = b[col(&bh, "clipped_bound")].parse().unwrap();
        let (p, se): (f64, f64) = (e[2].parse().unwrap(), e[3].parse().unwrap());
        assert!(p <= clipped + 3.0 * se, "file {} σ {}: {p} > {clipped}", e[0], e[1]);
    }
}

#[test]
fn compare_puts_the_full_optimizer_first() {
    let dir = tempfile::tempdir().unwrap();
    let topology = SystemTopology::homogeneous(2, 2, &[30.0, 12.0], 0.01).unwrap();
    let catalog = VideoCatalog {
        lengths: vec![4, 3, 5, 2],
        lambda: vec![0.3, 0.2, 0.1, 0.4],
        weight: vec![1.0; 4],
        tau: 1.0,
        d_s: 1.0,
        sigma: 2.0,
    };
    save_instance(dir.path(), &topology, &catalog, None);
    config(
        dir.path(),
        "run.toml",
        "command = \"compare\"\ntopology = \"topology.toml\"\ncatalog = \"catalog.csv\"\nsigma_grid = [1.0, 2.0]\n[optimizer]\nmax_outer = 40\n",
    );
    let run = stallbound(dir.path(), &["--config", "run.toml"]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let (_, header, body) = rows(&dir.path().join("out/compare.csv"));
    assert_eq!(header, ["factor", "strategy", "objective", "sdtp_sigma_1.0", "sdtp_sigma_2.0"]);
    let names: Vec<&str> = body.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(names, ["OPT", "PEA", "PEB", "PSP", "PEC", "CHF", "FIXED_T"]);
    let obj: Vec<f64> = body.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(obj[1..].iter().all(|&f| obj[0] <= f), "{obj:?}");
}

#[test]
fn workload_generation_round_trips_and_repeats() {
    let dir = tempfile::tempdir().unwrap();
    config(
        dir.path(),
        "gen.toml",
        "command = \"gen-workload\"\nseed = 5\n[workload]\nr = 30\npareto_shape = 2.0\npareto_scale = 300.0\nmax_length = 3600.0\ntau = 4.0\nlambda_rule = [{ share = 0.5, rate = 0.002 }, { share = 0.5, rate = 0.003 }]\n",
    );
    assert_eq!(stallbound(dir.path(), &["--config", "gen.toml", "--out", "a"]).code, 0);
    assert_eq!(stallbound(dir.path(), &["--config", "gen.toml", "--out", "b"]).code, 0);
    let a = fs::read(dir.path().join("a/catalog.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b/catalog.csv")).unwrap());
    let loaded = read_catalog_csv(&a[..], "catalog.csv").unwrap();
    assert_eq!(loaded, generate_catalog(&WorkloadSpec::reference(30, 5)).unwrap());
    // a different seed from the command line gives a different catalog and hash
    assert_eq!(stallbound(dir.path(), &["--config", "gen.toml", "--out", "c", "--seed", "6"]).code, 0);
    let c = fs::read_to_string(dir.path().join("c/catalog.csv")).unwrap();
    let a = String::from_utf8(a).unwrap();
    assert_ne!(a.lines().next(), c.lines().next());
    assert_ne!(a.lines().skip(3).collect::<Vec<_>>(), c.lines().skip(3).collect::<Vec<_>>());
}

#[test]
fn identical_runs_write_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let inst = random_instance(5, 2, 3, 4, 2, 0.6);
    save_instance(dir.path(), &inst.topology, &inst.catalog, Some(&inst.point));
    config(
        dir.path(),
        "run.toml",
        "command = \"simulate\"\ntopology = \"topology.toml\"\ncatalog = \"catalog.csv\"\npoint = \"point.txt\"\n[simulate]\nhorizon = 5000.0\n",
    );
    for out in ["x", "y"] {
        assert_eq!(stallbound(dir.path(), &["--config", "run.toml", "--out", out]).code, 0);
    }
    for f in ["trace.csv", "empirical.csv"] {
        assert_eq!(fs::read(dir.path().join("x").join(f)).unwrap(), fs::read(dir.path().join("y").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn optimize_writes_a_loadable_point_and_a_trace() {
    let dir = tempfile::tempdir().unwrap();
    let inst = random_instance(8, 2, 3, 4, 2, 0.6);
    save_instance(dir.path(), &inst.topology, &inst.catalog, None);
    config(
        dir.path(),
        "run.toml",
        "command = \"optimize\"\ntopology = \"topology.toml\"\ncatalog = \"catalog.csv\"\n[optimizer]\nmax_outer = 8\n",
    );
    let run = stallbound(dir.path(), &["--config", "run.toml"]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let text = fs::read(dir.path().join("out/point.txt")).unwrap();
    let point = read_point(&text[..], "point.txt").unwrap();
    assert!(stallbound::model::check_feasibility(&inst.topology, &inst.catalog, &point).unwrap().feasible);
    let (_, header, body) = rows(&dir.path().join("out/optimization_trace.csv"));
    assert_eq!(header, ["iteration", "block", "objective", "max_constraint_violation"]);
    assert_eq!(body.len(), 9);
}

#[test]
fn parse_errors_name_the_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    config(dir.path(), "bad.toml", "command = \"eval-bound\"\nseed = 3\nsigma_grid = [1.0,\n");
    let run = stallbound(dir.path(), &["--config", "bad.toml"]);
    assert_eq!(run.code, 1);
    let line = run.stderr.trim_end();
    assert_eq!(line.lines().count(), 1, "{line}");
    assert!(line.starts_with("error kind=parse message="), "{line}");
    assert!(line.contains("bad.toml") && line.contains("line "), "{line}");
}

#[test]
fn malformed_inputs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    tiny_cached(dir.path());
    fs::write(dir.path().join("broken.csv"), "# x\nfile_id,L_i,lambda_i,weight_i\n0,3,oops,1.0\n").unwrap();
    let cases = [
        ("command = \"eval-bound\"\ncolour = 1\n", "kind=parse"),
        ("command = \"eval-bound\"\nsigma_grid = [2.0, 1.0]\n", "kind=config"),
        ("command = \"eval-bound\"\ntopology = \"missing.toml\"\n", "missing.toml"),
        ("command = \"eval-bound\"\ntopology = \"topology.toml\"\ncatalog = \"broken.csv\"\n", "broken.csv"),
    ];
    for (body, want) in cases {
        config(dir.path(), "run.toml", body);
        let run = stallbound(dir.path(), &["--config", "run.toml"]);
        assert_eq!(run.code, 1, "{body}");
        assert!(run.stderr.starts_with("error kind=") && run.stderr.contains(want), "{body}: {}", run.stderr);
    }
}

#[test]
fn infeasible_points_name_the_violated_constraint() {
    let dir = tempfile::tempdir().unwrap();
    let inst = one_server((10.0, 20.0, 0.01), vec![3], vec![0.05], vec![3], vec![1.0], vec![0.5], vec![0.5], 12.0);
    save_instance(dir.path(), &inst.topology, &inst.catalog, Some(&inst.point));
    config(dir.path(), "run.toml", "command = \"eval-bound\"\ntopology = \"topology.toml\"\ncatalog = \"catalog.csv\"\npoint = \"point.txt\"\n");
    let run = stallbound(dir.path(), &["--config", "run.toml"]);
    assert_eq!(run.code, 1);
    assert!(run.stderr.contains("kind=infeasible_instance") && run.stderr.contains(family::T_EXCEEDS_RATE), "{}", run.stderr);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let run = stallbound(dir.path(), &["--frobnicate"]);
    assert_eq!(run.code, 2);
    assert!(run.stderr.starts_with("error kind=usage message="), "{}", run.stderr);
    let run = stallbound(dir.path(), &["--help"]);
    assert_eq!(run.code, 0);
    assert!(run.stdout.contains("--sigma-grid"));
}

#[test]
fn sigma_grid_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    tiny_cached(dir.path());
    config(dir.path(), "run.toml", "command = \"eval-bound\"\ntopology = \"topology.toml\"\ncatalog = \"catalog.csv\"\npoint = \"point.txt\"\n");
    let run = stallbound(dir.path(), &["--config", "run.toml", "--sigma-grid", "1,3"]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let (_, _, body) = rows(&dir.path().join("out/bound.csv"));
    let sigmas: Vec<&str> = body.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(sigmas, ["1.0", "3.0", "1.0", "3.0"]);
    assert_eq!(stallbound(dir.path(), &["--config", "run.toml", "--sigma-grid", "3,1"]).code, 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn point_and_topology_documents_round_trip(seed in any::<u64>()) {
        let inst = random_instance(seed, 3, 5, 6, 3, 0.8);
        let mut p = inst.point.clone();
        // awkward but valid values
        p.aux.t[0] = 1.0 / 3.0;
        let p = closest_feasible(&p, &inst.topology, &inst.catalog).unwrap();
        let mut buf = Vec::new();
        write_point(&p, &mut buf, "prop").unwrap();
        prop_assert_eq!(read_point(&buf[..], "point.txt").unwrap(), p);
        let mut buf = Vec::new();
        write_topology(&inst.topology, &mut buf, "prop").unwrap();
        prop_assert_eq!(read_topology(std::str::from_utf8(&buf).unwrap(), "topology.toml").unwrap(), inst.topology);
    }
}
