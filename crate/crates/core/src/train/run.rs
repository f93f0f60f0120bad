use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{self, Model};
use crate::data::{augment_samples, images_to_batch, load_dataset, split, LabelMask, Sample, CLASS_NAMES};
use crate::derive_seed;
use crate::loss::{class_weights_from_dataset, fcm_features, fcm_loss, weighted_cross_entropy, ClassWeights};
use crate::metrics::{format_optional, ConfusionMatrix, MetricReport};
use crate::nn::softmax_channels;
use crate::tensor::Graph;

use super::adam::{adam_step, AdamConfig, AdamState};
use super::checkpoint::Checkpoint;
use super::config::{Mode, RunConfig};
use super::predict::{evaluate, evaluate_clusters, Preprocess};
use super::{Result, TrainError};

/// Preprocessed splits. Only the training split carries augmented copies.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Loads the dataset, splits it by source image, augments the training split
/// and preprocesses everything to the network input.
pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let ds = load_dataset(cfg.data_path(), cfg.mode == Mode::Supervised)?;
    let parts = split(ds.len(), &cfg.split)?;
    let pick = |idx: &[usize]| -> Vec<Sample> { idx.iter().map(|&i| ds.samples[i].clone()).collect() };
    let train = augment_samples(
        &pick(&parts.train),
        cfg.augment_copies,
        &cfg.augment,
        derive_seed(cfg.seed, &[0xA5]),
    )?;
    let pre = Preprocess::from_config(cfg);
    let prep = |v: Vec<Sample>| -> Result<Vec<Sample>> { v.iter().map(|s| pre.sample(s)).collect() };
    Ok(PreparedData { train: prep(train)?, valid: prep(pick(&parts.valid))?, test: prep(pick(&parts.test))? })
}

/// One `key = value` group of the training report.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub entries: Vec<(String, String)>,
}

impl EpochRecord {
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The retained (best) model.
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Final metrics, also stored in the checkpoint.
    pub metrics: Vec<(String, String)>,
    /// Full report text, epoch groups then the final group.
    pub report: String,
}

enum Objective {
    CrossEntropy(ClassWeights),
    Fcm,
}

fn labels_in_range(samples: &[Sample], classes: usize) -> Result<()> {
    for s in samples {
        if let Some(m) = &s.mask {
            if m.max_label() as usize >= classes {
                return Err(TrainError::ClassMismatch { name: s.name.clone(), label: m.max_label(), classes });
            }
        }
    }
    Ok(())
}

fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    batch: &[&Sample],
    objective: &Objective,
    cfg: &RunConfig,
) -> Result<f32> {
    let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
    let x = images_to_batch(&images)?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let fwd = model.forward(&mut g, xv)?;
    let loss = match objective {
        Objective::CrossEntropy(w) => {
            let masks: Vec<&LabelMask> = batch.iter().map(|s| s.mask.as_ref().expect("supervised samples")).collect();
            weighted_cross_entropy(&mut g, fwd.logits, &masks, w)?
        }
        Objective::Fcm => {
            let u = softmax_channels(&mut g, fwd.logits)?;
            fcm_loss(&mut g, u, &fcm_features(&x, cfg.fcm.feature)?, &cfg.fcm)?
        }
    };
    let value = g.value(loss).item().expect("scalar loss");
    if !value.is_finite() {
        return Err(TrainError::NonFiniteLoss(value));
    }
    g.backward(loss)?;
    let grads: Vec<Option<&[f32]>> = fwd.params.iter().map(|&p| g.grad(p)).collect();
    adam_step(&mut model.parameters_mut(), &grads, adam)?;
    Ok(value)
}

/// Mean unsupervised objective over a sample set, batch-weighted.
fn fcm_value(model: &Model, samples: &[Sample], cfg: &RunConfig) -> Result<f64> {
    let mut total = 0.0f64;
    for chunk in samples.chunks(cfg.batch_size) {
        let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        let x = images_to_batch(&images)?;
        let mut g = Graph::new();
        let logits = g.constant(model.infer(x.clone())?);
        let u = softmax_channels(&mut g, logits)?;
        let l = fcm_loss(&mut g, u, &fcm_features(&x, cfg.fcm.feature)?, &cfg.fcm)?;
        total += g.value(l).item().expect("scalar loss") as f64 * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

fn report_entries(prefix: &str, cm: &ConfusionMatrix) -> Result<Vec<(String, String)>> {
    let names: Vec<&str> = (0..cm.num_classes()).map(|k| CLASS_NAMES.get(k).copied().unwrap_or("")).collect();
    let r = MetricReport::from_confusion(cm, &names)?;
    let mut v = vec![(format!("{prefix}pa"), r.pa.to_string()), (format!("{prefix}mean_iou"), r.mean_iou.to_string())];
    for (name, iou) in r.class_names.iter().zip(&r.iou) {
        v.push((format!("{prefix}iou.{name}"), format_optional(*iou)));
    }
    Ok(v)
}

fn evaluation_entries(model: &Model, samples: &[Sample], cfg: &RunConfig, prefix: &str) -> Result<Vec<(String, String)>> {
    if samples.is_empty() || samples.iter().any(|s| s.mask.is_none()) {
        return Ok(Vec::new());
    }
    let classes = cfg.spec.num_classes;
    match cfg.mode {
        Mode::Supervised => report_entries(prefix, &evaluate(model, samples, classes, cfg.batch_size)?),
        Mode::Unsupervised => {
            let (mapping, cm) = evaluate_clusters(model, samples, classes, cfg.batch_size)?;
            let mut v = report_entries(prefix, &cm)?;
            let map: Vec<String> = mapping.map.iter().map(|c| c.to_string()).collect();
            v.push((format!("{prefix}cluster_map"), map.join(",")));
            Ok(v)
        }
    }
}

/// Trains in memory on prepared data. `on_epoch` sees each report group as
/// soon as it is complete.
pub fn train_on(cfg: &RunConfig, data: &PreparedData, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::Invalid("training split is empty".into()));
    }
    let objective = match cfg.mode {
        Mode::Supervised => {
            for part in [&data.train, &data.valid, &data.test] {
                labels_in_range(part, cfg.spec.num_classes)?;
            }
            let weights = if cfg.class_weights {
                class_weights_from_dataset(data.train.iter().filter_map(|s| s.mask.as_ref()), cfg.spec.num_classes)?
            } else {
                ClassWeights::uniform(cfg.spec.num_classes)
            };
            Objective::CrossEntropy(weights)
        }
        Mode::Unsupervised => Objective::Fcm,
    };

    let mut model = arch::build(cfg.arch, &cfg.model_spec(), cfg.seed)?;
    let params: Vec<_> = model.parameters().into_iter().map(|(_, t)| t.detached()).collect();
    let mut adam = AdamState::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &params.iter().collect::<Vec<_>>());

    let mut best: Option<(f64, usize, Model)> = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64])));
        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let l = train_step(&mut model, &mut adam, &batch, &objective, cfg)?;
            loss_sum += l as f64 * batch.len() as f64;
        }
        let train_loss = loss_sum / data.train.len() as f64;

        let mut entries = vec![("epoch".to_string(), epoch.to_string()), ("train_loss".to_string(), train_loss.to_string())];
        let val_metrics = evaluation_entries(&model, &data.valid, cfg, "val_")?;
        // Higher is better for the selection score.
        let score = match cfg.mode {
            Mode::Supervised => {
                let m = val_metrics.iter().find(|(k, _)| k == "val_mean_iou").map(|(_, v)| v.parse::<f64>());
                m.transpose().map_err(|e| TrainError::Invalid(e.to_string()))?
            }
            Mode::Unsupervised if !data.valid.is_empty() => {
                let v = fcm_value(&model, &data.valid, cfg)?;
                entries.push(("val_fcm_loss".to_string(), v.to_string()));
                Some(-v)
            }
            Mode::Unsupervised => None,
        };
        if val_metrics.is_empty() {
            entries.push(("val_pa".to_string(), "undefined".to_string()));
            entries.push(("val_mean_iou".to_string(), "undefined".to_string()));
        }
        entries.extend(val_metrics);
        let record = EpochRecord { epoch, train_loss, entries };
        on_epoch(&record);
        epochs.push(record);

        match score {
            Some(s) if best.as_ref().is_none_or(|(b, _, _)| s > *b) => best = Some((s, epoch, model.clone())),
            None if epoch == cfg.epochs => best = Some((f64::NEG_INFINITY, epoch, model.clone())),
            _ => {}
        }
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch ran");

    let mut metrics = vec![("best_epoch".to_string(), best_epoch.to_string())];
    metrics.extend(evaluation_entries(&best_model, &data.test, cfg, "test_")?);
    let mut report: String = epochs.iter().map(|e| e.to_kv() + "\n").collect();
    for (k, v) in &metrics {
        let _ = writeln!(report, "{k} = {v}");
    }
    let checkpoint = Checkpoint::from_model(&best_model, cfg, metrics.clone());
    Ok(TrainOutcome { model: best_model, checkpoint, epochs, best_epoch, metrics, report })
}

fn open_report(cfg: &RunConfig) -> Result<File> {
    let path = cfg.report_path();
    File::create(&path).map_err(|source| TrainError::Io { path, source })
}

/// Full run from a config: data preparation, training, report and checkpoint
/// files. The report is appended group by group while training proceeds.
pub fn train(cfg: &RunConfig, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.check_paths()?;
    let data = prepare_data(cfg)?;
    let path = cfg.report_path();
    let mut file = open_report(cfg)?;
    let mut write_err = None;
    let outcome = train_on(cfg, &data, |rec| {
        if write_err.is_none() {
            if let Err(e) = file.write_all((rec.to_kv() + "\n").as_bytes()) {
                write_err = Some(e);
            }
        }
        on_epoch(rec);
    })?;
    if let Some(source) = write_err {
        return Err(TrainError::Io { path, source });
    }
    let mut file = OpenOptions::new().write(true).truncate(true).open(&path).map_err(|source| TrainError::Io { path: path.clone(), source })?;
    file.write_all(outcome.report.as_bytes()).map_err(|source| TrainError::Io { path: path.clone(), source })?;
    outcome.checkpoint.save(cfg.checkpoint_path())?;
    Ok(outcome)
}

pub fn train_supervised(cfg: &RunConfig) -> Result<TrainOutcome> {
    if cfg.mode != Mode::Supervised {
        return Err(TrainError::Invalid("config mode is not supervised".into()));
    }
    train(cfg, |_| {})
}

pub fn train_unsupervised(cfg: &RunConfig) -> Result<TrainOutcome> {
    if cfg.mode != Mode::Unsupervised {
        return Err(TrainError::Invalid("config mode is not unsupervised".into()));
    }
    train(cfg, |_| {})
}
