use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_djscc-sat"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let toy = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/configs/toy.toml");
    let text = std::fs::read_to_string(toy)
        .unwrap()
        .replace("synthetic_count = 64", "synthetic_count = 16")
        .replace("batch_size = 16", "batch_size = 4")
        .replace("epochs = 200", "epochs = 2")
        .replace("trials_per_image = 13", "trials_per_image = 2")
        .replace("[data]\n", &format!("[data]\n{extra}"));
    let path = dir.join("tiny.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn train_and_eval(config: &Path, out: &Path) -> Vec<u8> {
    let (c, o) = (config.to_str().unwrap(), out.to_str().unwrap());
    let train = run(&["train", "--config", c, "--seed", "5", "--out", o]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let eval = run(&["eval", "--config", c, "--seed", "5", "--out", o]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let csv = std::fs::read(out.join("eval.csv")).unwrap();
    assert_eq!(eval.stdout, csv);
    csv
}

#[test]
fn repeated_runs_write_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let a = train_and_eval(&cfg, &dir.path().join("a"));
    let b = train_and_eval(&cfg, &dir.path().join("b"));
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with(
        "model,trained_env,trained_state,trained_elev,eval_env,eval_state,eval_elev,snr_db,ratio,mean_psnr_db,n_trials\n"
    ));
    // adaptable plus three per-condition models, three conditions each
    assert_eq!(text.lines().count(), 1 + 4 * 3);

    let o = dir.path().join("a");
    let (c, o) = (cfg.to_str().unwrap(), o.to_str().unwrap());
    for cmd in ["sweep-snr", "mismatch", "compare-storage"] {
        let r = run(&[cmd, "--config", c, "--out", o]);
        assert!(r.status.success(), "{cmd}: {}", String::from_utf8_lossy(&r.stderr));
    }
    for f in ["sweep_snr.csv", "mismatch.csv", "storage.csv", "train_log.csv"] {
        assert!(Path::new(o).join(f).exists(), "{f}");
    }
}

#[test]
fn link_budget_prints_one_line_per_elevation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let r = run(&["link-budget", "--config", cfg.to_str().unwrap(), "--elevations", "40,60,80"]);
    assert!(r.status.success());
    let text = String::from_utf8(r.stdout).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().nth(1).unwrap().starts_with("40,"));
}

#[test]
fn channel_sim_and_synth_data_write_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out = dir.path().join("sim");
    let r = run(&[
        "channel-sim", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--elevation", "40", "--count", "50",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let csv = std::fs::read_to_string(out.join("gain_series.csv")).unwrap();
    assert_eq!(csv.lines().count(), 51);

    let imgs = dir.path().join("imgs");
    let r = run(&["synth-data", "--out", imgs.to_str().unwrap(), "--count", "3", "--shape", "8,8,2"]);
    assert!(r.status.success());
    assert_eq!(std::fs::read_dir(&imgs).unwrap().count(), 3);
}

#[test]
fn configuration_problems_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = run(&["train", "--config", "/nonexistent.toml", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(1));
    let cfg = tiny_config(dir.path(), "bogus_key = 1\n");
    let bad = run(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("bogus_key"));
    let untrained = run(&["eval", "--config", tiny_config(dir.path(), "").to_str().unwrap(), "--out", dir.path().join("none").to_str().unwrap()]);
    assert_eq!(untrained.status.code(), Some(1));
}

#[test]
fn diverging_training_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let imgs = dir.path().join("imgs");
    let r = run(&["synth-data", "--out", imgs.to_str().unwrap(), "--count", "8", "--shape", "16,16,3"]);
    assert!(r.status.success());
    // one NaN pixel per image, so every training batch sees one
    for entry in std::fs::read_dir(&imgs).unwrap() {
        let path = entry.unwrap().path();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[19..23].copy_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
    }
    let cfg = tiny_config(dir.path(), &format!("directory = {:?}\n", imgs.to_str().unwrap()));
    let r = run(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2), "{}", String::from_utf8_lossy(&r.stderr));
}
