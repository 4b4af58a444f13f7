use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[data]
source_count = 24
target_count = 12

[data.synthetic]
image_size = 16

[model]
decoder_channels = [8, 8, 4, 4, 4]
seg_channels = [8, 8, 4, 4]

[model.encoder]
stage_channels = [4, 8, 8, 8]
latent_dim = 8
input_size = 16

[vae]
max_epochs = 2
batch_size = 8

[seg]
max_epochs = 2
batch_size = 8

[naive]
max_epochs = 2
batch_size = 8

[adapt]
iterations = 3
optimizer = "adam"
eta = 0.05

[eval]
panels = 2

[sweep]
fractions = [0.0, 0.1, 0.25, 0.5]
"#;

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, format!("{TINY}\n{extra}")).unwrap();
    path
}

fn endouda(args: &[&str], out: &Path, config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_endouda"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .env_remove("ENDOUDA_OUT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], out: &Path, config: &Path) -> String {
    let o = endouda(args, out, config);
    assert!(
        o.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn dir_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn csv_rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    ok(&["gen-data"], &a, &cfg);
    ok(&["gen-data"], &b, &cfg);
    ok(&["gen-data", "--seed", "4"], &c, &cfg);
    let da = dir_bytes(&a.join("data"));
    assert_eq!(da.len(), 2 * 1 + 24 * 2 + 12 * 2);
    assert_eq!(da, dir_bytes(&b.join("data")));
    assert_ne!(da, dir_bytes(&c.join("data")));
    assert!(a.join("config.toml").exists());
}

#[test]
fn invalid_config_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, fs::read_to_string(&cfg).unwrap().replace("0.25, 0.5]", "0.25, 1.5]")).unwrap();
    let o = endouda(&["sweep"], &tmp.path().join("out"), &bad);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("sweep.fractions"));

    fs::write(&bad, "[vae]\nlearnin_rate = 1.0\n").unwrap();
    let o = endouda(&["gen-data"], &tmp.path().join("out"), &bad);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("learnin_rate"));
}

#[test]
fn stages_report_missing_dependencies() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("out");
    let o = endouda(&["train", "--stage", "seg"], &out, &cfg);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("VAE checkpoint not found"), "{err}");
    let o = endouda(&["adapt-eval", "--method", "endouda"], &out, &cfg);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint not found"));
}

#[test]
fn resumed_training_matches_uninterrupted_log() {
    let tmp = tempfile::tempdir().unwrap();
    let four = write_config(tmp.path(), "");
    let text = fs::read_to_string(&four).unwrap().replacen("max_epochs = 2", "max_epochs = 4", 1);
    fs::write(&four, &text).unwrap();
    let two = tmp.path().join("two.toml");
    fs::write(&two, text.replacen("max_epochs = 4", "max_epochs = 2", 1)).unwrap();

    let (full, split) = (tmp.path().join("full"), tmp.path().join("split"));
    ok(&["train", "--stage", "vae"], &full, &four);
    ok(&["train", "--stage", "vae"], &split, &two);
    assert_eq!(csv_rows(&split.join("logs/vae_log.csv")), 2);
    ok(&["train", "--stage", "vae", "--resume"], &split, &four);
    let log = |d: &Path| fs::read_to_string(d.join("logs/vae_log.csv")).unwrap();
    assert_eq!(csv_rows(&full.join("logs/vae_log.csv")), 4);
    assert_eq!(log(&full), log(&split));
    assert_eq!(
        fs::read(full.join("checkpoints/vae.ckpt")).unwrap(),
        fs::read(split.join("checkpoints/vae.ckpt")).unwrap()
    );
}

#[test]
fn pipeline_and_sweep_write_consistent_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("out");
    ok(&["gen-data"], &out, &cfg);
    for stage in ["vae", "seg", "naive"] {
        ok(&["train", "--stage", stage], &out, &cfg);
        assert!(out.join(format!("checkpoints/{stage}.ckpt")).exists());
        assert!(out.join(format!("logs/{stage}_log.csv")).exists());
    }
    let text = ok(&["adapt-eval"], &out, &cfg);
    assert!(text.contains("paired t-test dice"), "{text}");

    let test_count = 6;
    for m in ["naive", "endouda"] {
        let dir = out.join("eval").join(m);
        assert_eq!(csv_rows(&dir.join("per_image.csv")), test_count);
        assert_eq!(csv_rows(&dir.join("aggregate.csv")), 4);
        assert_eq!(fs::read_dir(dir.join("masks")).unwrap().count(), test_count);
    }
    assert_eq!(fs::read_dir(out.join("eval/endouda/clones")).unwrap().count(), test_count);
    assert_eq!(csv_rows(&out.join("eval/endouda/traces.csv")), test_count * 4);
    assert_eq!(csv_rows(&out.join("eval/comparison.csv")), 4);
    assert_eq!(fs::read_dir(out.join("panels")).unwrap().count(), 2);

    ok(&["sweep"], &out, &cfg);
    let sweep = out.join("sweep");
    assert_eq!(csv_rows(&sweep.join("table.csv")), 8);
    let svg = fs::read_to_string(sweep.join("iou_vs_fraction.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("endouda") && svg.contains("naive"));
    for f in ["0.00", "0.10", "0.25", "0.50"] {
        assert!(sweep.join(format!("f_{f}/config.toml")).exists());
    }
    for m in ["naive", "endouda"] {
        let rel = format!("eval/{m}/aggregate.csv");
        assert_eq!(
            fs::read(out.join(&rel)).unwrap(),
            fs::read(sweep.join("f_0.00").join(&rel)).unwrap(),
            "{m} aggregate differs between adapt-eval and the zero-fraction sweep"
        );
    }
}
