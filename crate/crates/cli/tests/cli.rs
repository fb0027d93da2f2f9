use std::path::Path;
use std::process::{Command, Output};

use eve_core::synthetic::Fixture;
use eve_core::video::{save_frames, Frame};
use serde_json::Value;

fn eve(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eve"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn eve")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn flat_frames(dir: &Path, levels: &[f64], size: usize) {
    let frames: Vec<Frame> = levels.iter().map(|&g| Frame::from_elem((3, size, size), g)).collect();
    save_frames(&frames, dir).unwrap();
}

fn assert_close(golden: &Value, actual: &Value, at: &str) {
    match (golden, actual) {
        (Value::Number(g), Value::Number(a)) => {
            let (g, a) = (g.as_f64().unwrap(), a.as_f64().unwrap());
            assert!((g - a).abs() <= 1e-9, "{at}: {a} vs golden {g}");
        }
        (Value::Array(g), Value::Array(a)) => {
            assert_eq!(g.len(), a.len(), "{at}: length");
            for (i, (g, a)) in g.iter().zip(a).enumerate() {
                assert_close(g, a, &format!("{at}[{i}]"));
            }
        }
        (Value::Object(g), Value::Object(a)) => {
            let mut keys: Vec<_> = g.keys().collect();
            keys.sort();
            let mut akeys: Vec<_> = a.keys().collect();
            akeys.sort();
            assert_eq!(keys, akeys, "{at}: keys");
            for k in keys {
                assert_close(&g[k], &a[k], &format!("{at}.{k}"));
            }
        }
        _ => assert_eq!(golden, actual, "{at}"),
    }
}

#[test]
fn edit_writes_eight_frames() {
    let tmp = tempfile::tempdir().unwrap();
    let video = tmp.path().join("v");
    let out = tmp.path().join("out");
    Fixture::PanningBands.write(&video, 12, 32).unwrap();
    let run = eve(&[
        "edit", "--video", arg(&video), "--prompt", "a watercolor painting", "--frames", "8",
        "--steps", "4", "--lr", "0.8", "--attn", "faa", "--dmg", "on", "--backend", "toy",
        "--seed", "7", "--resolution", "32", "--output", arg(&out),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    for i in 0..8 {
        assert!(out.join(format!("frames/{i:03}.png")).exists());
    }
    assert!(!out.join("frames/008.png").exists());
    let result = read_json(&out.join("result.json"));
    assert_eq!(result["schema_version"], 1);
    assert_eq!(result["counts"]["inversion"], 4);
    assert_eq!(result["counts"]["denoising"], 8);
    assert!(out.join("trace.csv").exists());
    // Artifacts only: nothing on stdout but the output path.
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), arg(&out));
}

#[test]
fn zero_steps_is_a_config_error() {
    let run = eve(&["edit", "--video", "v", "--prompt", "p", "--steps", "0"]);
    assert_eq!(run.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&run.stderr).contains("steps"));
}

#[test]
fn unknown_flags_and_keys_are_rejected() {
    assert_eq!(eve(&["edit", "--stepz", "3"]).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "video = \"v\"\nstepz = 3\n").unwrap();
    let run = eve(&["edit", "--config", arg(&cfg)]);
    assert_eq!(run.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&run.stderr).contains("stepz"));
}

#[test]
fn missing_input_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let run = eve(&["eval", "--input", arg(&tmp.path().join("absent"))]);
    assert_eq!(run.status.code(), Some(4));
}

#[test]
fn config_file_matches_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let video = tmp.path().join("v");
    Fixture::MovingSquare.write(&video, 4, 32).unwrap();
    let by_flags = tmp.path().join("flags");
    let by_file = tmp.path().join("file");
    let run = eve(&[
        "edit", "--video", arg(&video), "--prompt", "a red kite", "--frames", "3", "--steps", "3",
        "--attn", "sca", "--dmg", "off", "--resolution", "32", "--seed", "11", "--output", arg(&by_flags),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let cfg = tmp.path().join("edit.toml");
    std::fs::write(
        &cfg,
        format!(
            "video = {:?}\nprompt = \"a red kite\"\nframes = 3\nsteps = 3\nattn = \"sca\"\ndmg = false\n\
             resolution = 32\nseed = 11\noutput = {:?}\n",
            arg(&video),
            arg(&by_file)
        ),
    )
    .unwrap();
    let run = eve(&["edit", "--config", arg(&cfg)]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    for i in 0..3 {
        let name = format!("frames/{i:03}.png");
        assert_eq!(
            std::fs::read(by_flags.join(&name)).unwrap(),
            std::fs::read(by_file.join(&name)).unwrap()
        );
    }
    let (a, b) = (read_json(&by_flags.join("result.json")), read_json(&by_file.join("result.json")));
    assert_eq!(a["edited"], b["edited"]);
    assert_eq!(a["config"]["attn"], "sca");
    // A flag overrides the file.
    let over = tmp.path().join("over");
    let run = eve(&["edit", "--config", arg(&cfg), "--steps", "2", "--output", arg(&over)]);
    assert!(run.status.success());
    assert_eq!(read_json(&over.join("result.json"))["config"]["steps"], 2);
}

#[test]
fn invert_reports_reconstruction() {
    let tmp = tempfile::tempdir().unwrap();
    let video = tmp.path().join("v");
    let out = tmp.path().join("inv");
    Fixture::PulsingDisc.write(&video, 2, 32).unwrap();
    let run = eve(&[
        "invert", "--video", arg(&video), "--frames", "2", "--steps", "5", "--resolution", "32", "--output", arg(&out),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(out.join("latents.json").exists() && out.join("frames/001.png").exists());
    assert!(String::from_utf8_lossy(&run.stdout).contains("relative_error="));
}

#[test]
fn eval_identical_frames_scores_full_consistency() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("frames");
    let out = tmp.path().join("eval");
    let frame = Fixture::MovingSquare.frame(1, 4, 32);
    save_frames(&vec![frame; 5], &input).unwrap();
    let run = eve(&["eval", "--input", arg(&input), "--output", arg(&out)]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stdout).contains("TC\t100.00"));
    let report = read_json(&out.join("report.json"));
    assert!((report["temporal_consistency"].as_f64().unwrap() - 100.0).abs() < 1e-9);
}

#[test]
fn eval_pc_without_prompt_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    flat_frames(tmp.path(), &[0.5, 0.5], 32);
    let run = eve(&["eval", "--input", arg(tmp.path()), "--pc", "--output", arg(&tmp.path().join("o"))]);
    assert_eq!(run.status.code(), Some(2));
}

#[test]
fn eval_stub_fixture_matches_golden_report() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("greys");
    let out = tmp.path().join("eval");
    flat_frames(&input, &[0.2, 0.4, 0.6, 0.8], 32);
    let run = eve(&[
        "eval", "--input", arg(&input), "--prompt", "a grey card", "--pc", "--embedder", "stub", "--csv",
        "--output", arg(&out),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let golden: Value =
        serde_json::from_str(include_str!("golden/flat_greys_report.json")).unwrap();
    assert_close(&golden, &read_json(&out.join("report.json")), "report");
    let csv = std::fs::read_to_string(out.join("pairs.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("first,second,cosine\n"));
}

#[test]
fn ablate_table1_writes_six_result_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("ablation");
    let run = eve(&[
        "ablate", "--grid", "table1", "--backend", "toy", "--frames", "2", "--steps", "2", "--resolution", "32",
        "--prompt", "a cat", "--workers", "2", "--output", arg(&root),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let mut dirs: Vec<String> = std::fs::read_dir(&root)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    dirs.sort();
    assert_eq!(
        dirs,
        ["dmg-off_faa", "dmg-off_sa", "dmg-off_sca", "dmg-on_faa", "dmg-on_sa", "dmg-on_sca"]
    );
    for d in &dirs {
        let cfg = &read_json(&root.join(d).join("result.json"))["config"];
        assert_eq!(format!("dmg-{}_{}", if cfg["dmg"] == true { "on" } else { "off" }, cfg["attn"].as_str().unwrap()), *d);
        assert!(root.join(d).join("metrics.json").exists());
    }
    let summary = read_json(&root.join("summary.json"));
    let rows: Vec<String> = summary["rows"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|r| r["run"]["rows"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()))
        .collect();
    for label in ["B1", "B2", "B3", "B4", "B5", "A2"] {
        assert!(rows.iter().any(|r| r == label), "{label}");
    }
    assert_eq!(eve(&["ablate", "--grid", "table9", "--output", arg(&root)]).status.code(), Some(2));
}

#[test]
fn dataset_build_and_review() {
    let tmp = tempfile::tempdir().unwrap();
    let videos = tmp.path().join("videos");
    for f in Fixture::ALL {
        f.write(&videos.join(f.name()), 2, 32).unwrap();
    }
    let manifest = tmp.path().join("edits.jsonl");
    let run = eve(&[
        "dataset-build", "--videos", arg(&videos), "--manifest", arg(&manifest), "--stub", "--source", "local",
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let lines: Vec<Value> = std::fs::read_to_string(&manifest)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert!(lines.iter().all(|r| r["prompts"].as_object().unwrap().len() == 4 && r["verified"] == false));

    let id = lines[0]["video_id"].as_str().unwrap();
    let run = eve(&[
        "dataset-review", "--manifest", arg(&manifest), "--video-id", id, "--videos", arg(&videos),
        "--decision", "approve",
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stdout).contains(id));
    let first: Value =
        serde_json::from_str(std::fs::read_to_string(&manifest).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["verified"], true);

    let run = eve(&["dataset-review", "--manifest", arg(&manifest), "--video-id", "nope"]);
    assert_eq!(run.status.code(), Some(2));
}
