use std::path::Path;
use std::process::{Command, Output, Stdio};

fn gpmap(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpmap"))
        .args(args)
        .current_dir(dir)
        .stdin(Stdio::null())
        .output()
        .unwrap()
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = gpmap(args, dir);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Failing commands print one JSON line with the error kind on stderr.
fn fails_with(args: &[&str], dir: &Path, kind: &str) {
    let out = gpmap(args, dir);
    assert!(!out.status.success(), "{args:?} should fail");
    let stderr = String::from_utf8(out.stderr).unwrap();
    let line = stderr.lines().last().unwrap();
    let v: serde_json::Value = serde_json::from_str(line).unwrap_or_else(|_| panic!("not JSON: {line}"));
    assert_eq!(v["kind"], kind, "{line}");
    assert!(v["error"].is_string());
}

#[test]
fn run_then_inspect_the_stored_map() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let summary = ok(
        &["run", "--preset", "sphere", "--count", "6", "--set", "property=rgb", "--snapshot", "map.snap", "--mesh", "run.ply", "--stats", "stats.csv"],
        dir,
    );
    let stats: serde_json::Value = serde_json::from_str(summary.trim()).unwrap();
    assert_eq!(stats["frames"], 6);
    assert!(stats["mesh_triangles"].as_u64().unwrap() > 0);

    let csv = std::fs::read_to_string(dir.join("stats.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "frame,stage,ms,points,voxels,leaves");
    assert_eq!(csv.lines().count(), 1 + 6 * 9);

    ok(&["mesh", "--snapshot", "map.snap", "--out", "again.ply"], dir);
    assert_eq!(std::fs::read(dir.join("run.ply")).unwrap(), std::fs::read(dir.join("again.ply")).unwrap());

    std::fs::write(dir.join("probes.txt"), "# probes\n0 0 1.2\n1.5 0 0\n").unwrap();
    let q = ok(&["query", "--snapshot", "map.snap", "--input", "probes.txt"], dir);
    let rows: Vec<Vec<&str>> = q.lines().map(|l| l.split(' ').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].len(), 9 + 3, "rgb property columns expected: {q}");
    let d: f64 = rows[0][3].parse().unwrap();
    assert!((d - 0.2).abs() < 0.05, "distance {d}");

    let slice = ok(
        &["slice", "--snapshot", "map.snap", "--bounds", "-1.5,1.5,-1.5,1.5", "--resolution", "0.1", "--truth-preset", "sphere"],
        dir,
    );
    assert_eq!(slice.lines().next().unwrap(), "x,y,distance,gradient_x,gradient_y,error");
    assert_eq!(slice.lines().count(), 1 + 31 * 31);

    let eval = ok(&["eval", "--snapshot", "map.snap", "--truth-preset", "sphere", "--samples", "2000"], dir);
    let v: serde_json::Value = serde_json::from_str(eval.trim()).unwrap();
    assert!(v["rmse"]["rmse"].as_f64().unwrap() < 0.1, "{v}");
    assert!(v["chamfer"]["chamfer"].as_f64().unwrap() < 0.05, "{v}");
}

#[test]
fn runs_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    for name in ["a", "b"] {
        ok(&["run", "--preset", "dynamic-box", "--count", "3", "--batch", "2", "--snapshot", &format!("{name}.snap")], dir);
    }
    assert_eq!(std::fs::read(dir.join("a.snap")).unwrap(), std::fs::read(dir.join("b.snap")).unwrap());
}

#[test]
fn frames_from_disk() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("wall.scene"),
        "plane normal=-1,0,0 offset=-2\nsensor kind=pinhole width=40 height=30 fov=60 max_range=6\ntrajectory kind=fixed position=0,0,0 target=2,0,0 frames=2\n",
    )
    .unwrap();
    ok(&["run", "--scene", "wall.scene", "--snapshot", "scene.snap"], dir);

    // The same two frames written out as a sequence on disk.
    std::fs::create_dir(dir.join("seq")).unwrap();
    std::fs::write(dir.join("seq/frame_0.xyz"), "2 0 0\n2 0.1 0\n2 0 0.1\n2 -0.1 -0.1\n").unwrap();
    std::fs::write(dir.join("seq/frame_1.xyz"), "2 0.05 0\n2 0.1 0.1\n").unwrap();
    std::fs::write(dir.join("traj.txt"), "0 0 0 0 0 0 0 1\n1 0 0 0 0 0 0 1\n").unwrap();
    let out = ok(&["run", "--frames", "seq", "--trajectory", "traj.txt", "--stats", "s.csv"], dir);
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(v["frames"], 2);

    std::fs::write(dir.join("short.txt"), "0 0 0 0 0 0 0 1\n").unwrap();
    fails_with(&["run", "--frames", "seq", "--trajectory", "short.txt"], dir, "config");
}

#[test]
fn bench_writes_stage_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = ok(&["bench", "--preset", "corridor", "--count", "3", "--points", "300"], tmp.path());
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 1 + 3 * 9);
    assert!(rows.iter().any(|r| r.starts_with("2,eager_train,")));
    assert!(rows[1..].iter().all(|r| r.split(',').nth(3) == Some("300")), "{csv}");
}

#[test]
fn errors_are_json_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fails_with(&["run", "--preset", "nope"], dir, "config");
    fails_with(&["run", "--preset", "sphere", "--count", "1", "--set", "voxel_size=0"], dir, "config");
    fails_with(&["run", "--preset", "sphere", "--set", "no_such_key=1"], dir, "config");
    fails_with(&["query", "--input", "missing.txt"], dir, "io_failure");
    std::fs::write(dir.join("empty.txt"), "").unwrap();
    fails_with(&["query", "--input", "empty.txt"], dir, "empty_field");
    std::fs::write(dir.join("junk.snap"), "junk").unwrap();
    fails_with(&["mesh", "--snapshot", "junk.snap", "--out", "x.ply"], dir, "format");
    fails_with(&["slice", "--bounds", "1,2,3"], dir, "usage");
    fails_with(&["eval"], dir, "usage");
    fails_with(&["stats", "--server", "http://127.0.0.1:1"], dir, "http");
}
