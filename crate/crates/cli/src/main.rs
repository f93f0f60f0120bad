//! `vseg`: synthetic data, training, evaluation and inference for leaf
//! blade and vein segmentation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use vseg::arch::UNetSpec;
use vseg::data::{
    augment_samples, load_dataset, load_image, resize_bilinear, resize_nearest, save_colorized, save_image, save_pair,
    save_trimap, AugmentParams, Image, LabelMask, CLASS_NAMES,
};
use vseg::kv;
use vseg::metrics::{ClusterMapping, MetricReport};
use vseg::synth::{generate_dataset, Contrast};
use vseg::train::{
    evaluate, evaluate_clusters, predict, train, Checkpoint, EpochRecord, Mode, Preprocess, RunConfig,
};

#[derive(Debug, Parser)]
#[command(name = "vseg", version, about = "Leaf blade and vein segmentation with U-Nets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic leaf dataset with exact trimaps.
    Synth(SynthArgs),
    /// Train a supervised model from a config file.
    Train(TrainArgs),
    /// Train with the unsupervised clustering objective from a config file.
    TrainUnsup(TrainArgs),
    /// Score a checkpoint against a labeled dataset.
    Eval(EvalArgs),
    /// Segment one image into a colorized mask and a raw trimap.
    Segment(SegmentArgs),
    /// Write rotated and zoomed copies of a dataset.
    Augment(AugmentArgs),
    /// Print the tensors, config and metrics stored in a checkpoint.
    InspectCkpt(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Size {
    height: usize,
    width: usize,
}

/// `HxW`, with both extents divisible by the default network's pooling factor.
fn parse_size(s: &str) -> std::result::Result<Size, String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("expected HxW, got {s:?}"));
    let size = Size { height: parse(h)?, width: parse(w)? };
    let factor = UNetSpec::default().size_factor();
    if size.height == 0 || size.width == 0 || !size.height.is_multiple_of(factor) || !size.width.is_multiple_of(factor) {
        return Err(format!(
            "extents {}x{} must be positive multiples of {factor} for the default architecture",
            size.height, size.width
        ));
    }
    Ok(size)
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Number of image/trimap pairs.
    #[arg(long)]
    count: usize,
    /// Image size as HxW.
    #[arg(long, value_parser = parse_size, default_value = "64x64")]
    size: Size,
    /// high or low.
    #[arg(long, default_value = "high")]
    contrast: Contrast,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Write into a non-empty output directory, replacing same-named files.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Run config (`key = value` lines); relative paths resolve against its directory.
    #[arg(long)]
    config: PathBuf,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint file.
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory with images/ and trimaps/.
    #[arg(long)]
    data: PathBuf,
    /// Where to write the `key = value` metric report.
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
}

#[derive(Debug, Args)]
struct SegmentArgs {
    /// Checkpoint file.
    #[arg(long)]
    model: PathBuf,
    /// Input PNG.
    #[arg(long)]
    image: PathBuf,
    /// Colorized mask PNG; the raw trimap is written alongside as `<stem>_trimap.png`.
    #[arg(long)]
    out: PathBuf,
    /// Directory for per-class probability PNGs.
    #[arg(long)]
    probs: Option<PathBuf>,
    /// Apply sigmoid contrast correction before inference.
    #[arg(long)]
    sigmoid_correct: bool,
}

#[derive(Debug, Args)]
struct AugmentArgs {
    /// Source dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output dataset directory; receives the originals and their copies.
    #[arg(long)]
    out: PathBuf,
    /// Augmented copies per image.
    #[arg(long, default_value_t = 1)]
    copies: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest rotation in degrees, either direction.
    #[arg(long, default_value_t = AugmentParams::default().max_rotation_deg)]
    max_rotation: f64,
    #[arg(long, default_value_t = AugmentParams::default().zoom_range.0)]
    zoom_min: f64,
    #[arg(long, default_value_t = AugmentParams::default().zoom_range.1)]
    zoom_max: f64,
    /// Write into a non-empty output directory, replacing same-named files.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct InspectArgs {
    /// Checkpoint file.
    #[arg(long)]
    model: PathBuf,
}

fn ensure_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            bail!("{} exists and is not a directory", dir.display());
        }
        let non_empty = fs::read_dir(dir).with_context(|| dir.display().to_string())?.next().is_some();
        if non_empty && !force {
            bail!("{} is not empty; pass --force to write into it", dir.display());
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn synth(a: SynthArgs) -> Result<()> {
    if a.count == 0 {
        bail!("--count must be at least 1");
    }
    ensure_output_dir(&a.out, a.force)?;
    generate_dataset(a.count, a.size.height, a.size.width, a.contrast, a.seed, &a.out)?;
    println!("wrote {} pairs to {}", a.count, a.out.display());
    Ok(())
}

fn progress(quiet: bool) -> impl FnMut(&EpochRecord) {
    move |r| {
        if !quiet {
            let fields: Vec<String> = r.entries.iter().skip(1).map(|(k, v)| format!("{k}={v}")).collect();
            eprintln!("epoch {}: {}", r.epoch, fields.join(" "));
        }
    }
}

fn train_cmd(a: TrainArgs, mode: Mode) -> Result<()> {
    let text = fs::read_to_string(&a.config).with_context(|| a.config.display().to_string())?;
    let entries = kv::parse(&text).map_err(|e| anyhow!("{}: line {}: {}", a.config.display(), e.line, e.message))?;
    let mut cfg = RunConfig::load(&a.config).with_context(|| a.config.display().to_string())?;
    match kv::get(&entries, "mode") {
        None => cfg.mode = mode,
        Some(_) if cfg.mode == mode => {}
        Some(v) => bail!("{}: mode = {v} conflicts with this command", a.config.display()),
    }
    let outcome = train(&cfg, progress(a.quiet))?;
    for (k, v) in &outcome.metrics {
        println!("{k} = {v}");
    }
    println!("checkpoint: {}", cfg.checkpoint_path().display());
    println!("report: {}", cfg.report_path().display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.model)?;
    let (model, cfg) = ck.to_model()?;
    let classes = cfg.spec.num_classes;
    let pre = Preprocess::from_config(&cfg);
    let dataset = load_dataset(&a.data, true)?;
    if dataset.is_empty() {
        bail!("{} contains no images", a.data.display());
    }
    let mut samples = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let label = s.mask.as_ref().map_or(0, LabelMask::max_label);
        if label as usize >= classes {
            bail!("{}: trimap label {label} does not fit the model's {classes} classes", s.name);
        }
        samples.push(pre.sample(s)?);
    }
    let names = &CLASS_NAMES[..classes.min(CLASS_NAMES.len())];
    let names: Vec<String> =
        (0..classes).map(|c| names.get(c).map_or_else(|| format!("class{c}"), |n| n.to_string())).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut text = String::new();
    let report = match cfg.mode {
        Mode::Supervised => MetricReport::from_confusion(&evaluate(&model, &samples, classes, a.batch_size)?, &refs)?,
        Mode::Unsupervised => {
            let (mapping, cm) = evaluate_clusters(&model, &samples, classes, a.batch_size)?;
            let map: Vec<String> = mapping.map.iter().map(u8::to_string).collect();
            text.push_str(&format!("cluster_map = {}\n", map.join(",")));
            MetricReport::from_confusion(&cm, &refs)?
        }
    };
    text.insert_str(0, &format!("images = {}\n", samples.len()));
    text.push_str(&report.to_kv(""));
    print!("{report}");
    fs::write(&a.report, &text).with_context(|| a.report.display().to_string())?;
    Ok(())
}

/// Cluster-to-class map stored with an unsupervised checkpoint.
fn stored_mapping(ck: &Checkpoint, clusters: usize) -> Result<Option<ClusterMapping>> {
    let Some(text) = ck.metric("test_cluster_map") else {
        return Ok(None);
    };
    let map = text.split(',').map(|v| v.trim().parse::<u8>()).collect::<std::result::Result<Vec<_>, _>>();
    match map {
        Ok(map) if map.len() == clusters => Ok(Some(ClusterMapping { map })),
        _ => bail!("checkpoint cluster map {text:?} does not cover {clusters} clusters"),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map_or_else(|| "mask".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}{suffix}.png"))
}

fn segment(a: SegmentArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.model)?;
    let (model, cfg) = ck.to_model()?;
    let mut pre = Preprocess::from_config(&cfg);
    if a.sigmoid_correct {
        pre.sigmoid = Some((cfg.sigmoid_gain, cfg.sigmoid_cutoff));
    }
    let mapping = match cfg.mode {
        Mode::Unsupervised => stored_mapping(&ck, model.num_classes())?,
        Mode::Supervised => None,
    };
    let image = load_image(&a.image)?;
    let prediction = predict(&model, &pre, &image, a.probs.is_some())?;
    let mask = match &mapping {
        Some(m) => m.apply(&prediction.mask),
        None => prediction.mask,
    };
    let mask = resize_nearest(&mask, image.height(), image.width())?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| parent.display().to_string())?;
    }
    let trimap = sibling(&a.out, "_trimap");
    save_colorized(&mask, &a.out)?;
    save_trimap(&mask, &trimap)?;
    println!("mask: {}", a.out.display());
    println!("trimap: {}", trimap.display());

    if let (Some(dir), Some(probs)) = (&a.probs, &prediction.probs) {
        fs::create_dir_all(dir).with_context(|| dir.display().to_string())?;
        let (k, h, w) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
        for c in 0..k {
            let plane = probs.data()[c * h * w..(c + 1) * h * w].to_vec();
            let img = resize_bilinear(&Image::new(h, w, 1, plane)?, image.height(), image.width())?;
            let name = match (&mapping, cfg.mode) {
                (_, Mode::Unsupervised) => format!("cluster{c}"),
                _ => CLASS_NAMES.get(c).map_or_else(|| format!("class{c}"), |n| n.to_string()),
            };
            save_image(&img, dir.join(format!("prob_{name}.png")))?;
        }
        println!("probabilities: {}", dir.display());
    }
    Ok(())
}

fn augment(a: AugmentArgs) -> Result<()> {
    let params = AugmentParams { max_rotation_deg: a.max_rotation, zoom_range: (a.zoom_min, a.zoom_max) };
    params.validate()?;
    let dataset = load_dataset(&a.data, false)?;
    if dataset.is_empty() {
        bail!("{} contains no images", a.data.display());
    }
    if a.out.exists() && fs::canonicalize(&a.out)? == fs::canonicalize(&a.data)? {
        bail!("--out must differ from --data");
    }
    ensure_output_dir(&a.out, a.force)?;
    let samples = augment_samples(&dataset.samples, a.copies, &params, a.seed)?;
    for s in &samples {
        save_pair(&a.out, &s.name, &s.image, s.mask.as_ref())?;
    }
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.model)?;
    println!("format_version = {}", ck.version);
    println!("tensors = {}", ck.tensors.len());
    let total: usize = ck.tensors.iter().map(|(_, t)| t.numel()).sum();
    println!("parameters = {total}");
    for (name, t) in &ck.tensors {
        println!("tensor.{name} = {:?}", t.shape());
    }
    print!("{}", ck.echo());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a, Mode::Supervised),
        Command::TrainUnsup(a) => train_cmd(a, Mode::Unsupervised),
        Command::Eval(a) => eval(a),
        Command::Segment(a) => segment(a),
        Command::Augment(a) => augment(a),
        Command::InspectCkpt(a) => inspect(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", error_chain(&e));
            ExitCode::FAILURE
        }
    }
}

/// Joins the cause chain, skipping causes already quoted by their parent.
fn error_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}
