use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splat4d"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn synth(dir: &Path, extra: &[&str]) -> PathBuf {
    let scene = dir.join("scene");
    let mut args = vec!["synth", "--seed", "7", "--output", scene.to_str().unwrap()];
    args.extend_from_slice(extra);
    let out = run(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    scene
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_byte_reproducible_across_thread_counts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sa = synth(a.path(), &["--threads", "1"]);
    let sb = synth(b.path(), &["--threads", "4"]);
    let (fa, fb) = (files(&sa), files(&sb));
    assert!(fa.len() > 20);
    assert_eq!(fa, fb);
}

#[test]
fn evaluate_self_consistency() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = synth(tmp.path(), &["--frames", "10"]);
    let csv = tmp.path().join("metrics.csv");
    let out = run(&["evaluate", scene.to_str().unwrap(), "--output", csv.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "level,chunk,camera,target_frame,psnr,ssim,pose_frame,pose_rig,status");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let cams: Vec<_> = rows.iter().filter(|r| r[0] == "camera").collect();
    assert_eq!(cams.len(), 8);
    for r in &cams {
        assert!(r[4].parse::<f64>().unwrap() >= 45.0, "{r:?}");
    }
    let chunks: Vec<f64> = rows.iter().filter(|r| r[0] == "chunk").map(|r| r[4].parse().unwrap()).collect();
    let agg: f64 = rows.iter().find(|r| r[0] == "aggregate").unwrap()[4].parse().unwrap();
    assert_eq!(chunks.len(), 2);
    assert!((agg - chunks.iter().sum::<f64>() / 2.0).abs() < 1e-12);
}

#[test]
fn evaluate_with_too_few_frames_is_empty() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = synth(tmp.path(), &["--frames", "4"]);
    let out = run(&["evaluate", scene.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("camera")).count(), 0);
}

#[test]
fn missing_target_image_gives_error_row_and_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = synth(tmp.path(), &[]);
    fs::remove_file(scene.join("images/c01_f0002.png")).unwrap();
    let out = run(&["evaluate", scene.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with("chunk,0") && !l.ends_with(",ok")), "{text}");
}

#[test]
fn render_writes_png_and_rejects_bad_camera() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = synth(tmp.path(), &[]);
    let png = tmp.path().join("view.png");
    let ok = run(&["render", scene.to_str().unwrap(), "--camera", "2", "--time", "0.15", "--output", png.to_str().unwrap()]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));
    assert_eq!(&fs::read(&png).unwrap()[1..4], b"PNG");
    let bad = run(&["render", scene.to_str().unwrap(), "--camera", "99"]);
    assert_eq!(code(&bad), 1);

    let orbit = tmp.path().join("orbit");
    let ok = run(&["render", scene.to_str().unwrap(), "--orbit", "3", "--output", orbit.to_str().unwrap()]);
    assert_eq!(code(&ok), 0);
    assert_eq!(fs::read_dir(&orbit).unwrap().count(), 3);
}

#[test]
fn refine_writes_gaussians_and_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = synth(tmp.path(), &["--width", "32", "--height", "32"]);
    let out_path = tmp.path().join("refined.g4ds");
    let out = run(&["refine", scene.to_str().unwrap(), "--steps", "3", "--output", out_path.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(&fs::read(&out_path).unwrap()[..4], b"G4DS");
    let trace = fs::read_to_string(tmp.path().join("refined.csv")).unwrap();
    assert_eq!(trace.lines().count(), 5);
    let totals: Vec<f64> = trace.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(totals.windows(2).all(|w| w[1] <= w[0]), "{totals:?}");

    let again = run(&["evaluate", scene.to_str().unwrap(), "--gaussians", out_path.to_str().unwrap()]);
    assert_eq!(code(&again), 0);
}

#[test]
fn corrupted_gaussians_are_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = synth(tmp.path(), &[]);
    let bad = tmp.path().join("bad.g4ds");
    fs::write(&bad, b"NOPE\0\0\0\0\0\0\0\0").unwrap();
    let out = run(&["render", scene.to_str().unwrap(), "--gaussians", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad magic"));
}

#[test]
fn align_recovers_the_first_pass_frame() {
    let tmp = tempfile::tempdir().unwrap();
    let ident = |t: [f64; 3]| format!(r#"{{"rotation": [[1,0,0],[0,1,0],[0,0,1]], "translation": [{}, {}, {}]}}"#, t[0], t[1], t[2]);
    let ctx = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let pass1 = format!(r#"{{"poses": [{}]}}"#, ctx.iter().map(|&t| ident(t)).collect::<Vec<_>>().join(","));
    // Second pass: everything scaled by 2 and shifted by (1, 2, 3); one target.
    let warp = |t: [f64; 3]| [2.0 * t[0] + 1.0, 2.0 * t[1] + 2.0, 2.0 * t[2] + 3.0];
    let mut p2: Vec<String> = ctx.iter().map(|&t| ident(warp(t))).collect();
    p2.push(ident(warp([0.5, 0.5, 0.5])));
    let pass2 = format!(r#"{{"poses": [{}]}}"#, p2.join(","));
    let (f1, f2) = (tmp.path().join("p1.json"), tmp.path().join("p2.json"));
    fs::write(&f1, pass1).unwrap();
    fs::write(&f2, pass2).unwrap();
    let out = run(&["align", f1.to_str().unwrap(), f2.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["scale"].as_f64().unwrap() - 0.5).abs() < 1e-9);
    let t = &v["poses"][0]["translation"];
    for k in 0..3 {
        assert!((t[k].as_f64().unwrap() - 0.5).abs() < 1e-9, "{t}");
    }

    let short = run(&["align", f2.to_str().unwrap(), f1.to_str().unwrap()]);
    assert_eq!(code(&short), 1);
}

#[test]
fn flowcheck_reports_exact_synthetic_motion() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = synth(tmp.path(), &[]);
    let out = run(&["flowcheck", scene.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "camera,frame,valid,supervised,motion_loss,roundtrip_px,flow_vs_motion_px");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4 * 5);
    for r in rows {
        let f: Vec<&str> = r.split(',').collect();
        assert!(f[5].parse::<f64>().unwrap() < 1e-9, "{r}");
        assert!(f[6].parse::<f64>().unwrap() < 1e-9, "{r}");
    }
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&run(&["bogus"])), 1);
    assert_eq!(code(&run(&["synth"])), 1);
    assert_eq!(code(&run(&["synth", "--output", "/tmp/x", "--gaussians", "0"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}
