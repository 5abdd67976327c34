use hywu_cli::{run, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};
use hywu_core::config::RunConfig;

fn argv(parts: &[&str]) -> Vec<String> {
    std::iter::once("hywu").chain(parts.iter().copied()).map(String::from).collect()
}

#[test]
fn selfcheck_passes_on_a_clean_build() {
    assert_eq!(run(&argv(&["selfcheck"])), EXIT_OK);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(run(&argv(&["frobnicate"])), EXIT_USAGE);
    assert_eq!(run(&argv(&[])), EXIT_USAGE);
    assert_eq!(run(&argv(&["train", "--format", "xml"])), EXIT_USAGE);
}

#[test]
fn help_exits_zero() {
    assert_eq!(run(&argv(&["--help"])), EXIT_OK);
    assert_eq!(run(&argv(&["train", "--help"])), EXIT_OK);
}

#[test]
fn malformed_config_leaves_no_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    for (i, text) in ["[train\nsteps = 3", "[train]\nsteps = \"many\"", "[generator]\ncondition_width = 5"]
        .iter()
        .enumerate()
    {
        let cfg = tmp.path().join(format!("bad{i}.toml"));
        std::fs::write(&cfg, text).unwrap();
        let code = run(&argv(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]));
        assert_eq!(code, EXIT_USAGE, "{text}");
        assert!(!out.exists());
        assert_eq!(std::fs::read_to_string(&cfg).unwrap(), *text);
    }
    let missing = tmp.path().join("nope.toml");
    assert_eq!(run(&argv(&["train", "--config", missing.to_str().unwrap()])), EXIT_USAGE);
}

#[test]
fn defaults_dump_parses_back() {
    let text = RunConfig::default().to_toml().unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), RunConfig::default());
    assert_eq!(run(&argv(&["defaults"])), EXIT_OK);
}

fn small_config(dir: &std::path::Path) -> String {
    let p = dir.join("small.toml");
    std::fs::write(&p, "[train]\nsteps = 5\neval_per_task = 8\n").unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn format_filter_keeps_requested_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("o");
    let code = run(&argv(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--format", "csv"]));
    assert_eq!(code, EXIT_OK);
    let mut names: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["curves.csv", "generator.hywu", "manifest.json"]);
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 2);
}

#[test]
fn eval_round_trips_a_trained_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let train_out = tmp.path().join("t");
    assert_eq!(run(&argv(&["train", "--config", &cfg, "--out", train_out.to_str().unwrap()])), EXIT_OK);
    let ckpt = train_out.join("generator.hywu");
    let eval_out = tmp.path().join("e");
    let code = run(&argv(&[
        "eval",
        "--config",
        &cfg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
    ]));
    assert_eq!(code, EXIT_OK);
    let result: serde_json::Value =
        serde_json::from_slice(&std::fs::read(train_out.join("result.json")).unwrap()).unwrap();
    let eval: Vec<f64> = serde_json::from_slice(&std::fs::read(eval_out.join("eval.json")).unwrap()).unwrap();
    let trained: Vec<f64> = serde_json::from_value(result["eval_losses"].clone()).unwrap();
    assert_eq!(eval, trained);
}

#[test]
fn corrupt_or_mismatched_checkpoint_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.hywu");
    std::fs::write(&bad, b"HYWU\x01\x00").unwrap();
    let out = tmp.path().join("o");
    let code = run(&argv(&["eval", "--checkpoint", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    assert_eq!(code, EXIT_FAILURE);
    assert!(!out.exists());

    let cfg = small_config(tmp.path());
    let t = tmp.path().join("t");
    assert_eq!(run(&argv(&["train", "--config", &cfg, "--out", t.to_str().unwrap()])), EXIT_OK);
    let wide = tmp.path().join("wide.toml");
    std::fs::write(&wide, "[backbone]\nwidth = 6\n").unwrap();
    let ckpt = t.join("generator.hywu");
    let code = run(&argv(&["eval", "--config", wide.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]));
    assert_eq!(code, EXIT_FAILURE);
}

#[test]
fn zero_threads_rejected() {
    assert_eq!(run(&argv(&["train", "--threads", "0"])), EXIT_USAGE);
}
