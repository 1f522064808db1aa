//! The `roamfl` binary: exit codes, artifacts and one process per role.

mod common;

use std::fs;
use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use common::Scenario;
use roamfl::metrics::{read_csv, MetricsRow, Summary};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_roamfl"))
}

fn roamfl(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_run(dir: &Path, name: &str, s: &Scenario) -> String {
    let cfg = write_config(dir, &format!("{name}.ini"), &s.text());
    let out = dir.join(name);
    let o = roamfl(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    out.to_str().unwrap().to_string()
}

#[test]
fn bundled_example_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let example = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/fedfly_50.ini");
    let o = roamfl(&["run", example, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows: Vec<MetricsRow> = read_csv(&out.join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 20 * 4);
    let summary: Vec<Summary> = read_csv(&out.join("summary.csv")).unwrap();
    assert!((summary[0].reduction_vs_restart - 1.0 / 3.0).abs() < 5e-4);
    assert!(out.join("final_params.bin").is_file());
}

#[test]
fn fractions_over_one_exit_2_with_a_line() {
    let tmp = tempfile::tempdir().unwrap();
    let mut s = Scenario::small(2);
    for d in &mut s.devices {
        d.2 = Some(0.3);
    }
    let cfg = write_config(tmp.path(), "bad.ini", &s.text());
    let out = tmp.path().join("out");
    let o = roamfl(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("bad.ini:") && err.contains("1.2"), "{err}");
    assert!(!out.exists(), "nothing may be written");
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "ok.ini", &Scenario::small(1).text());
    let out = tmp.path().join("o");
    let o = |args: &[&str]| roamfl(args).status.code();
    assert_eq!(o(&[]), Some(2));
    assert_eq!(
        o(&[
            "run",
            &cfg,
            "--mode",
            "teleport",
            "--out",
            out.to_str().unwrap()
        ]),
        Some(2)
    );
    assert_eq!(
        o(&[
            "run",
            &cfg,
            "--backend",
            "carrier-pigeon",
            "--out",
            out.to_str().unwrap()
        ]),
        Some(2)
    );
    assert_eq!(
        o(&["run", "/no/such/file.ini", "--out", out.to_str().unwrap()]),
        Some(2)
    );
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join("old.csv"), "x").unwrap();
    assert_eq!(o(&["run", &cfg, "--out", out.to_str().unwrap()]), Some(2));
    assert_eq!(fs::read_to_string(out.join("old.csv")).unwrap(), "x");
}

#[test]
fn compare_and_plot_export() {
    let tmp = tempfile::tempdir().unwrap();
    let s = Scenario::small(3).move_at("d2", 1, "e1", "e2");
    let a = small_run(tmp.path(), "a", &s);
    let b = small_run(tmp.path(), "b", &Scenario::small(3));

    let o = roamfl(&["compare", &a, &a]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(
        text.contains("final parameters: identical") && text.contains("+0.0000"),
        "{text}"
    );
    let o = roamfl(&["compare", &a, &b]);
    assert!(String::from_utf8(o.stdout)
        .unwrap()
        .contains("final parameters: identical"));
    assert_eq!(
        roamfl(&["compare", &a, tmp.path().join("nope").to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );

    let plots = tmp.path().join("plots");
    let csv = format!("{a}/metrics.csv");
    let o = roamfl(&["plot-export", &csv, "--out", plots.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let acc = fs::read_to_string(plots.join("accuracy.dat")).unwrap();
    assert_eq!(acc.lines().filter(|l| !l.starts_with('#')).count(), 3);
    let d2 = fs::read_to_string(plots.join("device_d2.dat")).unwrap();
    let last: Vec<&str> = d2.lines().last().unwrap().split(' ').collect();
    assert_eq!(last[3], "3", "cumulative device rounds in {d2}");

    let header_only = tmp.path().join("empty.csv");
    let header = fs::read_to_string(&csv)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    fs::write(&header_only, format!("{header}\n")).unwrap();
    let o = roamfl(&[
        "plot-export",
        header_only.to_str().unwrap(),
        "--out",
        tmp.path().join("p2").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "round,device_id\nnot-a-number,d1\n").unwrap();
    assert_eq!(
        roamfl(&["plot-export", bad.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port()
}

fn wait(mut child: Child, name: &str, deadline: Instant) -> Output {
    loop {
        if child.try_wait().unwrap().is_some() {
            return child.wait_with_output().unwrap();
        }
        if Instant::now() > deadline {
            let _ = child.kill();
            panic!("{name} did not finish");
        }
        std::thread::sleep(Duration::from_millis(20));
    }
}

#[test]
fn one_process_per_role_over_tcp() {
    let tmp = tempfile::tempdir().unwrap();
    let mut text = Scenario::small(3)
        .backend("tcp")
        .move_at("d1", 1, "e1", "e2")
        .text();
    for id in ["e1", "e2"] {
        text = text.replace(
            &format!("[edge.{id}]\n"),
            &format!("[edge.{id}]\naddress = 127.0.0.1:{}\n", free_port()),
        );
    }
    text.push_str(&format!(
        "\n[central]\naddress = 127.0.0.1:{}\n",
        free_port()
    ));
    let cfg = write_config(tmp.path(), "multi.ini", &text);
    let out = tmp.path().join("out");

    // Devices first: they must wait for edges that are not up yet.
    let ids = ["d1", "d2", "d3", "d4", "e1", "e2", "central"];
    let children: Vec<(&str, Child)> = ids
        .iter()
        .map(|id| {
            let mut cmd = bin();
            cmd.args(["role", &cfg, "--id", id]);
            if *id == "central" {
                cmd.args(["--out", out.to_str().unwrap()]);
            }
            (
                *id,
                cmd.stdout(Stdio::piped())
                    .stderr(Stdio::piped())
                    .spawn()
                    .unwrap(),
            )
        })
        .collect();
    let deadline = Instant::now() + Duration::from_secs(120);
    for (id, child) in children {
        let o = wait(child, id, deadline);
        assert_eq!(o.status.code(), Some(0), "{id}: {}", stderr(&o));
    }

    let local = small_run(
        tmp.path(),
        "local",
        &Scenario::small(3).move_at("d1", 1, "e1", "e2"),
    );
    let same = fs::read(out.join("final_params.bin")).unwrap()
        == fs::read(format!("{local}/final_params.bin")).unwrap();
    assert!(same, "separate processes must train the same model");
    let rows: Vec<MetricsRow> = read_csv(&out.join("metrics.csv")).unwrap();
    assert!(rows
        .iter()
        .any(|r| r.round == 2 && r.device_id == "d1" && r.migration_overhead_s.is_some()));
}
