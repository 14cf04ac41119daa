use pacnerf::cli::{run, EXIT_DATA, EXIT_OK, EXIT_USAGE};
use pacnerf::config::Config;
use std::path::{Path, PathBuf};

const TINY: &str = "\
frames = 12
width = 12
height = 12
focal = 17
gt_samples = 48
iterations = 20
batch_rays = 48
samples = 6
eval_samples = 6
anchor_samples = 6
edit_iterations = 4
edit_samples = 6
invert_steps = 3
deform_width = 12
slice_width = 12
template_width = 16
color_width = 8
pac_width = 8
";

fn pacnerf(args: &[&str]) -> i32 {
    let mut argv = vec!["pacnerf"];
    argv.extend_from_slice(args);
    run(argv)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// synth + train-scene + anchors into `root`, returning the anchored checkpoint.
fn pipeline(root: &Path, cfg: &Path) -> PathBuf {
    let d = root.join("d");
    let t = root.join("t");
    let a = root.join("a");
    assert_eq!(pacnerf(&["synth", "--config", s(cfg), "--out", s(&d)]), EXIT_OK);
    let data = d.join("dataset.dnfs");
    assert_eq!(pacnerf(&["train-scene", "--config", s(cfg), "--out", s(&t), "--data", s(&data)]), EXIT_OK);
    // a single cluster is enough for plumbing tests
    assert_eq!(
        pacnerf(&[
            "anchors",
            "--out",
            s(&a),
            "--checkpoint",
            s(&t.join("scene.ckpt")),
            "--data",
            s(&data),
            "--override",
            "dbscan_eps_scale=100",
        ]),
        EXIT_OK
    );
    a.join("anchors.ckpt")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.cfg");
    std::fs::write(&p, TINY).unwrap();
    p
}

fn same_file(a: &Path, b: &Path) {
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap(), "{} differs", a.display());
}

#[test]
fn pipeline_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (r1, r2) = (tmp.path().join("r1"), tmp.path().join("r2"));
    let c1 = pipeline(&r1, &cfg);
    let c2 = pipeline(&r2, &cfg);
    for f in ["d/dataset.dnfs", "d/states.csv", "t/scene.ckpt", "t/train_log.csv", "t/heldout.csv", "a/anchors.ckpt", "a/anchors.csv"] {
        same_file(&r1.join(f), &r2.join(f));
    }
    for (root, ck) in [(&r1, &c1), (&r2, &c2)] {
        let e = root.join("e");
        assert_eq!(pacnerf(&["edit", "--out", s(&e), "--checkpoint", s(ck), "--prompt-state", "1,0"]), EXIT_OK);
    }
    same_file(&r1.join("e/edit.ckpt"), &r2.join("e/edit.ckpt"));
    same_file(&r1.join("e/edit_log.csv"), &r2.join("e/edit_log.csv"));
}

#[test]
fn manifest_reruns_to_identical_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let first = tmp.path().join("first");
    assert_eq!(pacnerf(&["synth", "--config", s(&cfg), "--out", s(&first), "--seed", "9"]), EXIT_OK);
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(first.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "synth");
    assert_eq!(manifest["seed"], 9);
    let echoed = Config::parse(&std::fs::read_to_string(first.join("config.txt")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"], echoed.hash());

    let second = tmp.path().join("second");
    let argv: Vec<String> = manifest["argv"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .map(|a| if a == s(&first) { s(&second).to_string() } else { a })
        .collect();
    let argv: Vec<&str> = argv.iter().map(String::as_str).collect();
    assert_eq!(pacnerf(&argv), EXIT_OK);
    same_file(&first.join("dataset.dnfs"), &second.join("dataset.dnfs"));
    same_file(&first.join("config.txt"), &second.join("config.txt"));
}

#[test]
fn downstream_commands_write_their_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let root = tmp.path();
    let ck = pipeline(root, &cfg);
    let data = root.join("d/dataset.dnfs");
    let e = root.join("e");
    assert_eq!(pacnerf(&["edit", "--out", s(&e), "--checkpoint", s(&ck), "--prompt-state", "0,1"]), EXIT_OK);
    let edited = e.join("edit.ckpt");
    let runs: Vec<(Vec<&str>, &str)> = vec![
        (vec!["invert", "--checkpoint", s(&ck), "--prompt-state", "1,0"], "invert_eval.csv"),
        (vec!["render", "--checkpoint", s(&ck), "--frame", "3", "--camera", "2"], "render_f003_cam2.ppm"),
        (vec!["render", "--checkpoint", s(&edited), "--edited", "--camera", "1"], "render_edited_cam1.ppm"),
        (vec!["interp", "--checkpoint", s(&ck), "--from", "0", "--to", "1", "--steps", "3"], "interp.csv"),
        (vec!["acr-maps", "--checkpoint", s(&edited), "--camera", "3"], "acr.csv"),
        (vec!["eval", "--checkpoint", s(&ck), "--data", s(&data)], "pose.csv"),
    ];
    for (i, (args, expect)) in runs.into_iter().enumerate() {
        let out = root.join(format!("o{i}"));
        let mut full = args.clone();
        full.extend_from_slice(&["--out", s(&out)]);
        assert_eq!(pacnerf(&full), EXIT_OK, "{args:?}");
        assert!(out.join(expect).exists(), "{args:?} did not write {expect}");
        assert!(out.join("manifest.json").exists());
    }
    let (header, rows) = pacnerf::trainer::read_csv(&root.join("o3/interp.csv")).unwrap();
    assert_eq!(header, vec!["gamma", "step_l2"]);
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0], vec![0.0, 0.0]);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = s(&out);
    assert_eq!(pacnerf(&["--help"]), EXIT_OK);
    assert_eq!(pacnerf(&["synth", "--out", o, "--frobnicate"]), EXIT_USAGE);
    assert_eq!(pacnerf(&["teleport", "--out", o]), EXIT_USAGE);
    assert_eq!(pacnerf(&["synth", "--out", o, "--override", "no_such_key=1"]), EXIT_USAGE);
    assert_eq!(pacnerf(&["synth", "--out", o, "--script", "sideways"]), EXIT_USAGE);

    let missing = tmp.path().join("missing.ckpt");
    assert_eq!(pacnerf(&["render", "--out", o, "--checkpoint", s(&missing)]), EXIT_DATA);
    let junk = tmp.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint at all").unwrap();
    assert_eq!(pacnerf(&["render", "--out", o, "--checkpoint", s(&junk)]), EXIT_DATA);
}

#[test]
fn text_prompts_need_a_service() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let ck = pipeline(tmp.path(), &cfg);
    // nothing in this test binary sets GUIDANCE_URL
    assert!(std::env::var("GUIDANCE_URL").is_err());
    let out = tmp.path().join("x");
    let code = pacnerf(&["edit", "--out", s(&out), "--checkpoint", s(&ck), "--prompt-text", "a surprised face"]);
    assert_eq!(code, EXIT_USAGE);
    let both = pacnerf(&["edit", "--out", s(&out), "--checkpoint", s(&ck), "--prompt-state", "1,0", "--prompt-text", "x"]);
    assert_eq!(both, EXIT_USAGE);
}
