use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::Arc;

use deiqt::data::{gen_base_images, ImageRef, Manifest, Sample};
use deiqt::metrics::evaluate;
use deiqt::training::{fit, OptimizerState, TrainConfig, TrainLog};
use deiqt::{DeiqtModel, ModelConfig, Rng};
use deiqt_cli::checkpoint::Checkpoint;
use deiqt_cli::config::model_text;

const TOY: &str = "\
# toy model
patch_size = 4
token_dim = 16
heads = 2
encoder_depth = 2
decoder_depth = 1
panel_size = 3
crop_size = 12
image_size = 12
n_base = 3
levels = 2
crops_per_image = 1
batch_size = 16
eval_crops = 1
";

fn deiqt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deiqt"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Asserts a failed run that printed exactly one `error kind=...` line.
fn assert_error(o: &Output, kind: &str) -> String {
    assert!(!o.status.success(), "expected failure, got {}", stdout(o));
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with(&format!("error kind={kind} message=\"")), "{err}");
    assert!(lines[0].ends_with('"'));
    lines[0].to_string()
}

fn toy_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("toy.cfg"), TOY).unwrap();
    dir
}

#[test]
fn gen_data_default_corpus_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = deiqt(d, &["gen-data", "--out", "a", "--seed", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("samples=2000 groups=100"));
    let m = Manifest::read_csv(&d.join("a/manifest.csv")).unwrap();
    assert_eq!(m.len(), 2000);
    assert!(d.join("a/config.txt").exists());

    let o = deiqt(d, &["gen-data", "--out", "b", "--seed", "4", "--set", "n_base=100"]);
    assert!(o.status.success());
    let o = deiqt(d, &["gen-data", "--out", "c", "--seed", "5"]);
    assert!(o.status.success());
    let read = |p: &str| fs::read(d.join(p)).unwrap();
    assert_eq!(read("a/manifest.csv"), read("b/manifest.csv"));
    let first = "images/b0000_gaussian_blur_l0.ppm";
    assert_eq!(read(&format!("a/{first}")), read(&format!("b/{first}")));
    // labels and names follow the corpus layout; the pixels follow the seed
    assert_ne!(read(&format!("a/{first}")), read(&format!("c/{first}")));
}

#[test]
fn config_file_flags_and_echo() {
    let dir = toy_dir();
    let d = dir.path();
    fs::write(d.join("seeded.cfg"), format!("{TOY}seed = 3\n")).unwrap();
    let o = deiqt(d, &["train", "--config", "seeded.cfg", "--seed", "5", "--set", "max_steps=1", "--out", "run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let echo = fs::read_to_string(d.join("run/config.txt")).unwrap();
    assert!(echo.contains("seed = 5\n"));
    assert!(echo.contains("token_dim = 16\n"));
    assert!(echo.contains("max_steps = 1\n"));

    // the echo is itself a valid config reproducing the run
    let o = deiqt(d, &["train", "--config", "run/config.txt", "--out", "again"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(d.join("run/checkpoint.bin")).unwrap(),
        fs::read(d.join("again/checkpoint.bin")).unwrap()
    );
}

#[test]
fn bad_config_fails_before_any_output() {
    let dir = toy_dir();
    let d = dir.path();
    fs::write(d.join("bad.cfg"), format!("{TOY}learning_rate = 0.1\n")).unwrap();
    let line = assert_error(&deiqt(d, &["train", "--config", "bad.cfg", "--out", "run"]), "parse");
    assert!(line.contains("bad.cfg:15"), "{line}");
    assert!(line.contains("unknown key `learning_rate`"));
    assert!(!d.join("run").exists());

    fs::write(d.join("bad.cfg"), "epochs = many\n").unwrap();
    assert_error(&deiqt(d, &["train", "--config", "bad.cfg"]), "parse");
    assert_error(&deiqt(d, &["train", "--set", "heads=3"]), "config");
    assert_error(&deiqt(d, &["train", "--precision", "16"]), "usage");
    assert_error(&deiqt(d, &["train", "--no-such-flag"]), "usage");
    assert_error(&deiqt(d, &["protocol", "sideways"]), "config");
    assert_error(&deiqt(d, &["eval", "--checkpoint", "missing.bin", "--manifest", "m.csv"]), "io");
    assert!(deiqt(d, &["--help"]).status.success());
}

#[test]
fn lr_schedule_appears_in_the_log() {
    let dir = toy_dir();
    let d = dir.path();
    let o = deiqt(d, &["train", "--config", "toy.cfg", "--epochs", "9", "--decay-every", "3", "--out", "run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = TrainLog::parse(&fs::read_to_string(d.join("run/train_log.txt")).unwrap()).unwrap();
    let lrs = log.lr_sequence();
    assert_eq!(lrs.len(), 3);
    for (got, want) in lrs.iter().zip([2e-4, 2e-5, 2e-6]) {
        assert!((got - want).abs() <= 1e-18, "{lrs:?}");
    }
    assert!(log.records.iter().all(|r| r.loss.is_finite()));
    let report = stdout(&o);
    assert!(report.contains("\ntrain n=") && report.contains("\ntest n="), "{report}");
    for f in ["checkpoint.bin", "cls_grad.txt", "report.txt", "test_predictions.txt", "test_scatter.svg"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = toy_dir();
    let d = dir.path();
    let base = ["--config", "toy.cfg", "--set", "decay_every=1"];
    let run = |extra: &[&str]| {
        let mut args = vec!["train"];
        args.extend(base);
        args.extend(extra);
        let o = deiqt(d, &args);
        assert!(o.status.success(), "{}", stderr(&o));
        o
    };
    run(&["--epochs", "4", "--out", "full"]);
    run(&["--epochs", "2", "--out", "half"]);
    let half = Checkpoint::<f64>::load(&d.join("half/checkpoint.bin")).unwrap();
    let o = run(&["--epochs", "4", "--resume", "half/checkpoint.bin", "--out", "rest"]);
    assert!(stdout(&o).starts_with(&format!("steps={}..", half.step)));

    let log = TrainLog::parse(&fs::read_to_string(d.join("rest/train_log.txt")).unwrap()).unwrap();
    assert_eq!(log.records[0].step, half.step + 1);
    assert_eq!(
        fs::read(d.join("full/checkpoint.bin")).unwrap(),
        fs::read(d.join("rest/checkpoint.bin")).unwrap()
    );
}

/// 32 distinct base images with evenly spaced labels, written to `dir`.
fn overfit_corpus(dir: &Path) -> Manifest {
    let samples = gen_base_images(32, 12, &Rng::new(0))
        .into_iter()
        .enumerate()
        .map(|(i, img)| Sample {
            image: ImageRef::memory(format!("b{i:02}"), Arc::new(img)),
            score: 1.0 - i as f64 / 31.0,
            group: format!("b{i}"),
            distortion: None,
        })
        .collect();
    Manifest::new(samples, "overfit").unwrap().materialize(dir).unwrap();
    Manifest::read_csv(&dir.join("manifest.csv")).unwrap()
}

#[test]
fn eval_reports_overfit_models_and_rejects_tiny_manifests() {
    let dir = toy_dir();
    let d = dir.path();
    let m = overfit_corpus(&d.join("data"));
    let mut model = DeiqtModel::<f64>::init(ModelConfig::toy(), &mut Rng::new(0)).unwrap();
    let tc = TrainConfig {
        base_lr: 5e-3,
        batch_size: 32,
        crops_per_image: 1,
        epochs: 300,
        decay_every_epochs: 300,
        ..TrainConfig::default()
    };
    let mut state = OptimizerState::new(model.params(), &tc);
    fit(&mut model, &m, &tc, &mut state).unwrap();
    assert!(evaluate(&model, &m, 1, 0).unwrap().srcc >= 0.99);
    Checkpoint::from_model(&model, Some(&state)).save(&d.join("fit.bin")).unwrap();

    let args = ["eval", "--config", "toy.cfg", "--checkpoint", "fit.bin", "--manifest", "data/manifest.csv"];
    let o = deiqt(d, &[&args[..], &["--out", "e1"]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let srcc: f64 = stdout(&o)
        .split_whitespace()
        .find_map(|f| f.strip_prefix("srcc="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(srcc >= 0.99, "{srcc}");
    assert!(deiqt(d, &[&args[..], &["--out", "e2"]].concat()).status.success());
    assert_eq!(
        fs::read(d.join("e1/report.txt")).unwrap(),
        fs::read(d.join("e2/report.txt")).unwrap()
    );

    let csv = fs::read_to_string(d.join("data/manifest.csv")).unwrap();
    let one: Vec<&str> = csv.lines().take(2).collect();
    fs::write(d.join("data/one.csv"), one.join("\n") + "\n").unwrap();
    let line = assert_error(
        &deiqt(d, &["eval", "--config", "toy.cfg", "--checkpoint", "fit.bin", "--manifest", "data/one.csv"]),
        "degenerate",
    );
    assert!(line.contains("need n >= 2"), "{line}");
}

#[test]
fn checkpoint_failures_are_single_distinct_lines() {
    let dir = toy_dir();
    let d = dir.path();
    let wide = ModelConfig {
        token_dim: 384,
        heads: 6,
        ..ModelConfig::toy()
    };
    let model = DeiqtModel::<f64>::init(wide, &mut Rng::new(1)).unwrap();
    let ck = Checkpoint::from_model(&model, None);
    ck.save(&d.join("wide.bin")).unwrap();
    let bytes = ck.to_bytes();
    fs::write(d.join("cut.bin"), &bytes[..bytes.len() - 9]).unwrap();
    fs::write(d.join("short.bin"), &bytes[..2]).unwrap();
    fs::write(d.join("magic.bin"), b"PNG\x00rest").unwrap();
    let mut v2 = bytes.clone();
    v2[4] = 2;
    fs::write(d.join("v2.bin"), v2).unwrap();

    // the manifest is read before the checkpoint, so it must be valid
    fs::create_dir_all(d.join("img")).unwrap();
    let img = deiqt::data::Image::filled(3, 12, 12, 0.5);
    img.write_ppm(&d.join("img/a.ppm")).unwrap();
    img.write_ppm(&d.join("img/b.ppm")).unwrap();
    fs::write(d.join("m.csv"), "path,score,group\nimg/a.ppm,1,a\nimg/b.ppm,2,b\n").unwrap();
    let eval = |ck: &str| deiqt(d, &["eval", "--config", "toy.cfg", "--checkpoint", ck, "--manifest", "m.csv"]);

    let line = assert_error(&eval("wide.bin"), "checkpoint_shape");
    assert!(line.contains("embed.patch_proj.weight"), "{line}");
    assert!(line.contains("[48, 384]") && line.contains("[48, 16]"), "{line}");
    assert_error(&eval("cut.bin"), "checkpoint_truncated");
    assert_error(&eval("short.bin"), "checkpoint_truncated");
    assert_error(&eval("magic.bin"), "checkpoint_magic");
    assert_error(&eval("v2.bin"), "checkpoint_version");
    assert!(!d.join("out").exists());
}

#[test]
fn diagnostics_commands_write_their_artifacts() {
    let dir = toy_dir();
    let d = dir.path();
    let o = deiqt(d, &["gradcheck", "--config", "toy.cfg", "--out", "gc"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("status=pass"));

    let o = deiqt(d, &["train", "--config", "toy.cfg", "--set", "max_steps=2", "--precision", "32", "--out", "run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = deiqt(d, &["panel-sim", "--config", "toy.cfg", "--checkpoint", "run/checkpoint.bin", "--out", "ps"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("panel=3 mean_off_diagonal="));
    let text = fs::read_to_string(d.join("ps/panel.txt")).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("row=")).count(), 3);

    let o = deiqt(d, &["attn-map", "--config", "toy.cfg", "--out", "am"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let map = fs::read_to_string(d.join("am/attn_map.txt")).unwrap();
    assert_eq!(map.lines().count(), 12);
    for f in ["attn_map.svg", "attn_map.pgm", "crop.ppm", "config.txt"] {
        assert!(d.join("am").join(f).exists(), "{f}");
    }

    let o = deiqt(d, &["attn-map", "--config", "toy.cfg", "--set", "variant=encoder-only", "--out", "am2"]);
    assert_error(&o, "contract");
}

#[test]
fn checkpoint_config_block_names_the_model() {
    let model = DeiqtModel::<f32>::init(ModelConfig::toy(), &mut Rng::new(2)).unwrap();
    let bytes = Checkpoint::from_model(&model, None).to_bytes();
    assert_eq!(&bytes[..4], b"DEIQ");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let block = std::str::from_utf8(&bytes[12..12 + len]).unwrap();
    assert!(block.starts_with(&model_text(model.config())));
    let tail = format!("step = 0\ntensors = {}\noptimizer = false\n", model.params().len());
    assert!(block.ends_with(&tail), "{block}");
}
