use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn usnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_usnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn anchors_default_has_7620_rows() {
    let out = usnet(&["anchors", "--config", "default"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("level,row,col,variant,cx,cy,w,h"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 7620);
    let per_level = |l: &str| rows.iter().filter(|r| r.split(',').next() == Some(l)).count();
    assert_eq!((per_level("0"), per_level("1"), per_level("2")), (5776, 1444, 400));
}

#[test]
fn gradcheck_reports_small_errors() {
    let out = usnet(&["gradcheck", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for k in ["seg", "conf", "loc"] {
        let e = v[k].as_f64().unwrap();
        assert!(e < 1e-5, "{k}: {e}");
    }
}

#[test]
fn synth_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("d"), tmp.path().join("d2"));
    for dir in [&a, &b] {
        let out = usnet(&["synth", "--count", "8", "--seed", "1", "--out", dir.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 17);
    assert!(ta == tb);
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(usnet(&["anchors", "--bogus"]).status.code(), Some(1));
    assert_eq!(usnet(&["nonsense"]).status.code(), Some(1));
    let out = usnet(&[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn help_exits_0() {
    let out = usnet(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("gradcheck"));
}

#[test]
fn validation_errors_exit_1() {
    assert_eq!(usnet(&["anchors", "--set", "loss.gama=1"]).status.code(), Some(1));
    assert_eq!(
        usnet(&["anchors", "--set", "anchors.base_sizes=[5.0,74.0,128.0]"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(usnet(&["train", "--mode", "both", "--out", "x"]).status.code(), Some(1));
    assert_eq!(usnet(&["synth", "--count", "1"]).status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.usnt");
    let out = usnet(&["eval", "--model", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_and_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "anchors.scales=[1.0]\nnetwork.anchors_per_location=2\n").unwrap();
    let out = usnet(&["anchors", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 3810 + 1);
}

/// A tiny network end to end: synth, prepare, train, eval and infer.
#[test]
fn tiny_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();
    let cfg = tmp.path().join("tiny.cfg");
    fs::write(
        &cfg,
        "network.input_size=64\nnetwork.depth=3\nnetwork.block_repeat=1\nnetwork.head_tap_stages=[2,3]\n\
         network.refine_size=16\nnetwork.refine_depth=2\n\
         anchors.input_size=64\nanchors.map_sizes=[16,8]\nanchors.base_sizes=[20.0,40.0]\n\
         synth.canvas=96\nsynth.min_count=2\nsynth.max_count=3\n\
         data.tile=64\ndata.step=32\ndata.synth_count=2\n\
         train.steps=3\ntrain.batch_size=2\ntrain.eval_every=3\nrefine.steps=2\nrefine.batch_size=2\n",
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    let ok = |args: &[&str]| {
        let out = usnet(args);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    };

    ok(&[
        "synth",
        "--config",
        cfg,
        "--count",
        "2",
        "--seed",
        "3",
        "--out",
        &p("raw"),
    ]);
    ok(&["prepare", "--config", cfg, "--dataset", &p("raw"), "--out", &p("tiles")]);
    assert_eq!(fs::read_dir(p("tiles/images")).unwrap().count(), 2 * 4);

    let out = ok(&[
        "train",
        "--config",
        cfg,
        "--dataset",
        &p("tiles"),
        "--out",
        &p("run"),
        "--json",
    ]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["steps"], 3);
    for f in ["run.cfg", "trace.jsonl", "refine_trace.jsonl", "model.usnt"] {
        assert!(tmp.path().join("run").join(f).is_file(), "{f}");
    }
    let trace = fs::read_to_string(p("run/trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 3);
    assert!(trace.lines().last().unwrap().contains("\"ap\""));

    // rerunning from the saved config reproduces the run
    ok(&["train", "--config", &p("run/run.cfg"), "--out", &p("rerun")]);
    assert_eq!(tree(&tmp.path().join("run")), tree(&tmp.path().join("rerun")));

    let out = ok(&["eval", "--model", &p("run"), "--out", &p("metrics"), "--json"]);
    let m: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for k in ["ap", "pa", "n_images", "n_gt", "n_det", "pr"] {
        assert!(m.get(k).is_some(), "{k}");
    }
    assert!(tmp.path().join("metrics/metrics.json").is_file());
    assert!(tmp.path().join("metrics/pr.csv").is_file());

    ok(&[
        "infer",
        "--model",
        &p("run/model.usnt"),
        "--dataset",
        &p("raw"),
        "--out",
        &p("pred"),
        "--conf-threshold",
        "0.3",
    ]);
    for f in ["synth_0000.json", "labels/synth_0000.png", "overlay/synth_0001.png"] {
        assert!(tmp.path().join("pred").join(f).is_file(), "{f}");
    }

    let out = ok(&["ablate", "--config", cfg, "--steps", "2", "--out", &p("abl")]);
    let table = String::from_utf8(out.stdout).unwrap();
    for mode in ["joint", "detection-only", "segmentation-only"] {
        assert!(table.contains(mode));
    }
    assert_eq!(fs::read_to_string(p("abl/ablation.csv")).unwrap().lines().count(), 4);
}
