use std::path::Path;
use std::process::{Command, Output};

fn creasenet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_creasenet"))
        .current_dir(dir)
        .env_remove("CREASENET_CONFIG")
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn help_lists_every_config_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = creasenet(dir.path(), &["--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for key in ["seed", "montage.preset", "triplet.margin", "arcface.scale", "backbone_training.optimizer.learning_rate", "evaluation.mode"] {
        assert!(text.contains(key), "missing {key}");
    }
    assert!(text.contains("Exit status"));
}

#[test]
fn separated_score_file_has_zero_eer() {
    let dir = tempfile::tempdir().unwrap();
    let scores = "pair_type,gallery_id,probe_id,score\n\
                  genuine,0,0,0.9\ngenuine,1,1,0.8\nimpostor,0,1,0.1\nimpostor,1,0,0.2\n";
    std::fs::write(dir.path().join("scores.csv"), scores).unwrap();
    let o = creasenet(dir.path(), &["--out", "run", "evaluate", "--scores", "scores.csv"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: toml::Table = stdout(&o).parse().unwrap();
    assert_eq!(report["eer"].as_float(), Some(0.0));
    assert_eq!(report["genuine_count"].as_integer(), Some(2));
    assert!(dir.path().join("run/eval/det.csv").exists());
}

#[test]
fn paper_stated_preset_builds_the_stated_cube() {
    let dir = tempfile::tempdir().unwrap();
    let img = image::RgbImage::from_fn(300, 250, |x, y| image::Rgb([(x % 256) as u8, (y % 256) as u8, 128]));
    img.save(dir.path().join("roi.png")).unwrap();
    let o = creasenet(dir.path(), &["--out", "run", "preprocess", "--preset", "paper-stated", "--input", "roi.png"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let path = dir.path().join(stdout(&o).trim());
    let cube = creasenet::montage::MontageCube::load(&path).unwrap();
    assert_eq!(cube.dims(), [60, 170, 170, 3]);
}

#[test]
fn config_precedence_and_printing() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "seed = 11\n[triplet]\nmargin = 0.6\n").unwrap();
    let o = creasenet(dir.path(), &["--config", "c.toml", "--set", "triplet.margin=0.8", "config"]);
    assert!(o.status.success());
    let cfg: toml::Table = stdout(&o).parse().unwrap();
    assert_eq!(cfg["seed"].as_integer(), Some(11));
    assert_eq!(cfg["triplet"]["margin"].as_float(), Some(0.8));

    let o = Command::new(env!("CARGO_BIN_EXE_creasenet"))
        .current_dir(dir.path())
        .env("CREASENET_CONFIG", "c.toml")
        .arg("config")
        .output()
        .unwrap();
    let cfg: toml::Table = stdout(&o).parse().unwrap();
    assert_eq!(cfg["triplet"]["margin"].as_float(), Some(0.6));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(creasenet(dir.path(), &["--version"]).status.code(), Some(0));
    assert_eq!(creasenet(dir.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(creasenet(dir.path(), &["--set", "triplet.nope=1", "config"]).status.code(), Some(1));
    assert_eq!(creasenet(dir.path(), &["--set", "triplet.margin=-1", "config"]).status.code(), Some(1));
    // A missing score file is a runtime failure, not a usage error.
    assert_eq!(creasenet(dir.path(), &["evaluate", "--scores", "missing.csv"]).status.code(), Some(2));
}
