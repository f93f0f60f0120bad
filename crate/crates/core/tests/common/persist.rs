//! Reproducibility and checkpoint persistence checks.

use std::path::{Path, PathBuf};
use std::process::Command;

use vseg::data::Image;
use vseg::synth::{generate_dataset, Contrast};
use vseg::tensor::Tensor;
use vseg::train::{predict_masks, prepare_data, train, Checkpoint, RunConfig};

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

fn expected_fixture() -> Checkpoint {
    let weight: Vec<f32> = (0..18).map(|i| ((i % 7) as f32 - 3.0) / 4.0).collect();
    Checkpoint::new(
        vec![
            ("enc0.conv1.weight".into(), Tensor::new(vec![2, 1, 3, 3], weight).unwrap()),
            ("enc0.conv1.bias".into(), Tensor::new(vec![2], vec![0.5, -0.25]).unwrap()),
            ("head.weight".into(), Tensor::new(vec![3], vec![0.1, -1e-3, 3.4e38]).unwrap()),
            ("step".into(), Tensor::scalar(7.0)),
        ],
        "mode = supervised\nepochs = 3\nseed = 42\nsplit_train = 1\n".into(),
        vec![("best_epoch".into(), "2".into()), ("test_pa".into(), "0.5".into())],
    )
}

/// Parses the committed file produced by the independent writer script and,
/// when a Python interpreter is available, regenerates it and compares bytes.
pub fn fixture() -> Result<String, String> {
    let path = fixture_dir().join("checkpoint.bin");
    let bytes = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let parsed = Checkpoint::from_bytes(&bytes).map_err(|e| e.to_string())?;
    let expected = expected_fixture();
    if parsed != expected {
        return Err(format!("parsed fixture differs: {parsed:?}"));
    }
    if expected.to_bytes() != bytes {
        return Err("library writer disagrees with the fixture bytes".into());
    }
    let cfg = parsed.run_config().map_err(|e| e.to_string())?;
    if (cfg.epochs, cfg.seed) != (3, 42) || parsed.metric("test_pa") != Some("0.5") {
        return Err("fixture echo did not round-trip into a run config".into());
    }

    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let regenerated = tmp.path().join("checkpoint.bin");
    let script = fixture_dir().join("make_checkpoint.py");
    let ran = Command::new("python3").arg(&script).arg(&regenerated).status();
    Ok(match ran {
        Ok(s) if s.success() => {
            let fresh = std::fs::read(&regenerated).map_err(|e| e.to_string())?;
            if fresh != bytes {
                return Err("writer script output differs from the committed fixture".into());
            }
            format!("{} bytes parsed; writer script regenerated them identically", bytes.len())
        }
        _ => format!("{} bytes parsed; python3 unavailable, regeneration skipped", bytes.len()),
    })
}

pub const SMALL_CONFIG: &str = "\
height = 32
width = 32
filters = 4,8
epochs = 3
batch_size = 2
seed = 5
augment_copies = 1
data_dir = ../data
split_train = 4
split_valid = 2
split_test = 2
split_seed = 3
checkpoint = model.ckpt
report = report.txt
";

fn read(p: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn run_in(dir: &Path, text: &str) -> Result<RunConfig, String> {
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let path = dir.join("run.cfg");
    std::fs::write(&path, text).map_err(|e| e.to_string())?;
    let cfg = RunConfig::load(&path).map_err(|e| e.to_string())?;
    train(&cfg, |_| {}).map_err(|e| e.to_string())?;
    Ok(cfg)
}

/// Two runs of one config in separate directories; reports and checkpoints
/// must match byte for byte. Covers both training modes.
pub fn determinism() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    generate_dataset(8, 64, 64, Contrast::High, 17, &tmp.path().join("data")).map_err(|e| e.to_string())?;
    let mut bytes = 0;
    for (mode, extra) in [("supervised", "class_weights = true\n"), ("unsupervised", "sigmoid_correction = true\n")] {
        let text = format!("mode = {mode}\n{extra}{SMALL_CONFIG}");
        let a = run_in(&tmp.path().join(format!("{mode}_a")), &text)?;
        let b = run_in(&tmp.path().join(format!("{mode}_b")), &text)?;
        for (x, y) in [(a.report_path(), b.report_path()), (a.checkpoint_path(), b.checkpoint_path())] {
            let (bx, by) = (read(&x)?, read(&y)?);
            if bx != by {
                return Err(format!("{mode}: {} and {} differ", x.display(), y.display()));
            }
            bytes += bx.len();
        }
    }
    Ok(format!("supervised and unsupervised reruns identical ({bytes} bytes compared)"))
}

/// Saves, reloads and rebuilds a trained model; logits on the test images
/// must be bit-identical.
pub fn round_trip() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    generate_dataset(8, 64, 64, Contrast::High, 18, &tmp.path().join("data")).map_err(|e| e.to_string())?;
    let dir = tmp.path().join("run");
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let cfg = RunConfig::parse(SMALL_CONFIG, &dir).map_err(|e| e.to_string())?;
    let outcome = train(&cfg, |_| {}).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(cfg.checkpoint_path()).map_err(|e| e.to_string())?;
    if loaded != outcome.checkpoint {
        return Err("reloaded checkpoint differs from the in-memory one".into());
    }
    let (model, _) = loaded.to_model().map_err(|e| e.to_string())?;
    let data = prepare_data(&cfg).map_err(|e| e.to_string())?;
    let images: Vec<&Image> = data.test.iter().map(|s| &s.image).collect();
    let before = predict_masks(&outcome.model, &images, 2).map_err(|e| e.to_string())?;
    let after = predict_masks(&model, &images, 2).map_err(|e| e.to_string())?;
    if before != after {
        return Err("predicted masks changed after reload".into());
    }
    let batch = vseg::data::images_to_batch(&images).map_err(|e| e.to_string())?;
    let l1 = outcome.model.infer(batch.clone()).map_err(|e| e.to_string())?;
    let l2 = model.infer(batch).map_err(|e| e.to_string())?;
    if l1.data().iter().zip(l2.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err("logits changed after reload".into());
    }
    Ok(format!("{} test images, {} logits bit-identical", images.len(), l1.numel()))
}
