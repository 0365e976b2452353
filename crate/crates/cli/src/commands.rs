use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use candle_core::Device;
use clap::Args;
use sht_core::checkpoint::Checkpoint;
use sht_core::data::{
    format_landmarks, generate_toy_dataset, generate_toy_video, list_images, load_image_dataset, load_video_dataset,
    parse_300w_pts, read_landmarks, resize_bicubic, write_image_dataset, write_landmarks, write_video, LoadOptions,
    ToyRanges, BBOX_INDEX,
};
use sht_core::dhln::Dhln;
use sht_core::fptn::Generator;
use sht_core::heatmap::{render_heatmaps, HeatmapStack};
use sht_core::image::{ImageRole, ImageTensor, LandmarkSet};
use sht_core::inference::{predict, predict_faces, report, EvalOptions};
use sht_core::metrics::NormalizationKind;
use sht_core::nn::derive_seed;
use sht_core::trainer::{Phase, RunOptions, TrainData, TrainManifest, Trainer};
use sht_core::{ShtConfig, ShtError};

use crate::{Global, UsageError};

const METRICS_LOG: &str = "metrics.jsonl";

fn device() -> Device {
    Device::Cpu
}

/// `--config` (or `fallback`, or the defaults) with `--set` overrides applied.
fn resolve_config(g: &Global, fallback: Option<&ShtConfig>) -> Result<ShtConfig> {
    let base = match (&g.config, fallback) {
        (Some(p), _) => ShtConfig::load(p)?,
        (None, Some(c)) => c.clone(),
        (None, None) => ShtConfig::default(),
    };
    Ok(base.with_overrides(&g.overrides)?)
}

/// Loads a checkpoint and the config to run it under. An explicit config must
/// agree with the checkpoint on landmark count and resolution.
fn load_model(g: &Global, path: &Path) -> Result<(ShtConfig, Checkpoint)> {
    let ck = Checkpoint::load(path, &device()).with_context(|| format!("loading {}", path.display()))?;
    let cfg = resolve_config(g, Some(&ck.config))?;
    let (a, b) = (&ck.config, &cfg);
    if (a.num_landmarks, a.input_size, a.sr_output_size) != (b.num_landmarks, b.input_size, b.sr_output_size) {
        return Err(ShtError::InvalidConfig(format!(
            "checkpoint is {} landmarks {}→{}, config asks for {} landmarks {}→{}",
            a.num_landmarks, a.input_size, a.sr_output_size, b.num_landmarks, b.input_size, b.sr_output_size
        ))
        .into());
    }
    Ok((cfg, ck))
}

fn load_dhln(cfg: &ShtConfig, ck: &Checkpoint) -> Result<Dhln> {
    let dhln = Dhln::new(cfg, 0, &device())?;
    ck.restore("dhln", dhln.params())?;
    Ok(dhln)
}

/// Creates `dir` and fails if any of `files` exists, unless `force` is set.
fn prepare_outputs(dir: &Path, files: &[PathBuf], force: bool) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    if !force {
        if let Some(f) = files.iter().find(|f| f.exists()) {
            return Err(UsageError(format!("{} exists; pass --force to overwrite", f.display())).into());
        }
    }
    Ok(())
}

/// A single image, or every image directly inside a directory.
fn input_images(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let found = list_images(path)?;
        if found.is_empty() {
            return Err(ShtError::MissingAnnotation(format!("no images in {}", path.display())).into());
        }
        Ok(found)
    } else if path.is_file() {
        Ok(vec![path.to_path_buf()])
    } else {
        Err(ShtError::Io(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{} not found", path.display())))
            .into())
    }
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Phases to run, in order (pretrain_dhln, pretrain_fptn, finetune_sht, weak_finetune).
    #[arg(long, value_delimiter = ',')]
    phase: Vec<Phase>,
    /// Training manifest (TOML) listing data roots and per-phase steps.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Labeled dataset root. Repeatable.
    #[arg(long)]
    data: Vec<PathBuf>,
    /// Unlabeled image root for weak_finetune. Repeatable.
    #[arg(long)]
    unlabeled: Vec<PathBuf>,
    /// Video root for weak_finetune. Repeatable.
    #[arg(long)]
    videos: Vec<PathBuf>,
    /// Steps per phase; overrides the manifest.
    #[arg(long)]
    steps: Option<usize>,
    /// Output directory for checkpoints and the metrics log.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoints to start from; later ones win on shared sections. Repeatable.
    #[arg(long)]
    init: Vec<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Intermediate checkpoint cadence in steps (0 disables).
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    force: bool,
}

pub fn train(g: &Global, a: TrainArgs) -> Result<()> {
    let manifest = a.manifest.as_deref().map(TrainManifest::load).transpose()?;
    let dev = device();
    let inits = a
        .init
        .iter()
        .map(|p| Checkpoint::load(p, &dev).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;

    let mut g = g.clone();
    if g.config.is_none() {
        g.config = manifest.as_ref().and_then(|m| m.config.clone());
    }
    let mut cfg = resolve_config(&g, inits.first().map(|c| &c.config))?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }

    let phases = if a.phase.is_empty() {
        manifest.as_ref().map(|m| m.steps.keys().copied().collect()).unwrap_or_default()
    } else {
        a.phase.clone()
    };
    if phases.is_empty() {
        return Err(UsageError("no phase given; use --phase or a manifest with steps".into()).into());
    }
    let steps = phases
        .iter()
        .map(|p| {
            a.steps
                .or_else(|| manifest.as_ref().and_then(|m| m.steps.get(p).copied()))
                .ok_or_else(|| ShtError::InvalidConfig(format!("no step count for {p}")))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let out = a
        .out
        .clone()
        .or_else(|| manifest.as_ref().map(|m| m.checkpoint_dir.clone()))
        .ok_or_else(|| UsageError("no output directory; use --out or a manifest".into()))?;
    let every = a.checkpoint_every.or(manifest.as_ref().map(|m| m.checkpoint_every)).unwrap_or(100);
    let log_path = manifest.as_ref().and_then(|m| m.metrics_log.clone()).unwrap_or_else(|| out.join(METRICS_LOG));

    let mut guarded: Vec<PathBuf> = phases.iter().map(|p| out.join(format!("{p}.safetensors"))).collect();
    if inits.is_empty() {
        guarded.push(log_path.clone());
    }
    prepare_outputs(&out, &guarded, a.force)?;

    let mut trainer = Trainer::new(cfg.clone(), &dev)?;
    for ck in &inits {
        trainer.load_checkpoint(ck)?;
    }
    let mut dry = trainer.state.clone();
    for p in &phases {
        dry.enter(*p)?;
        dry.complete(*p);
    }

    let mut data = match &manifest {
        Some(m) => m.load_data(&cfg)?,
        None => TrainData::default(),
    };
    let opts = LoadOptions { num_landmarks: cfg.num_landmarks, interocular: cfg.interocular, strict: false };
    for r in &a.data {
        data.labeled.extend(load_image_dataset(r, &opts)?.0);
    }
    for r in &a.unlabeled {
        data.unlabeled.extend(load_image_dataset(r, &opts)?.0);
    }
    for r in &a.videos {
        data.videos.extend(load_video_dataset(r)?);
    }
    log::info!(
        "{} labeled faces, {} unlabeled faces, {} videos",
        data.labeled.len(),
        data.unlabeled.len(),
        data.videos.len()
    );

    cfg.save(&out.join("config.toml"))?;

    let file = if inits.is_empty() {
        File::create(&log_path)?
    } else {
        OpenOptions::new().create(true).append(true).open(&log_path)?
    };
    let mut log = BufWriter::new(file);
    for (phase, n) in phases.iter().zip(steps) {
        log::info!("{phase}: {n} steps");
        let mut run = RunOptions {
            checkpoint_dir: Some(out.clone()),
            checkpoint_every: every,
            log: Some(&mut log),
            stop_after: None,
        };
        trainer.run_phase(*phase, &data, n, &mut run)?;
        log.flush()?;
        if let Some(last) = trainer.state.history().last() {
            println!("{phase}: {n} steps, final loss {:.6}", last.loss.total);
        }
    }
    Ok(())
}

fn parse_norm(s: &str) -> std::result::Result<NormalizationKind, String> {
    NormalizationKind::ALL
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| format!("unknown normalization `{s}` (io, box, diag, wid)"))
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled dataset root.
    #[arg(long)]
    data: PathBuf,
    /// NME normalization(s): io, box, diag, wid.
    #[arg(long, value_delimiter = ',', default_value = "io", value_parser = parse_norm)]
    nme: Vec<NormalizationKind>,
    #[arg(long, default_value_t = 0.10)]
    auc_threshold: f64,
    #[arg(long, default_value_t = 0.10)]
    fr_threshold: f64,
    /// Directory for report_<nme>.json and ced_<nme>.txt.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Skip PSNR/SSIM of the hallucinated faces.
    #[arg(long)]
    no_image_quality: bool,
    #[arg(long)]
    force: bool,
}

pub fn eval(g: &Global, a: EvalArgs) -> Result<()> {
    let (cfg, ck) = load_model(g, &a.checkpoint)?;
    let dhln = load_dhln(&cfg, &ck)?;
    let opts = LoadOptions { num_landmarks: cfg.num_landmarks, interocular: cfg.interocular, strict: true };
    let (faces, _) = load_image_dataset(&a.data, &opts)?;
    if let Some(out) = &a.out {
        let files: Vec<PathBuf> = a
            .nme
            .iter()
            .flat_map(|k| [out.join(format!("report_{}.json", k.name())), out.join(format!("ced_{}.txt", k.name()))])
            .collect();
        prepare_outputs(out, &files, a.force)?;
    }
    let results = predict_faces(&dhln, &cfg, &faces, !a.no_image_quality, &device())?;
    for &kind in &a.nme {
        let opts = EvalOptions {
            normalization: kind,
            auc_threshold: a.auc_threshold,
            fr_threshold: a.fr_threshold,
            image_quality: !a.no_image_quality,
        };
        let r = report(&results, &opts)?;
        let k = kind.name();
        print!("NME_{k} {:.6}  AUC {:.6}  FR {:.6}", r.nme, r.auc, r.fr);
        if let (Some(p), Some(s)) = (r.psnr, r.ssim) {
            print!("  PSNR_Y {p:.4}  SSIM_Y {s:.6}");
        }
        println!("  ({} faces)", r.images.len());
        if let Some(out) = &a.out {
            fs::write(out.join(format!("report_{k}.json")), r.to_json()?)?;
            fs::write(out.join(format!("ced_{k}.txt")), r.ced_text())?;
        }
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image file or directory of images.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

fn load_inputs(paths: &[PathBuf]) -> Result<Vec<ImageTensor>> {
    paths.iter().map(|p| Ok(ImageTensor::load(p, ImageRole::Lr)?)).collect()
}

/// Writes `<stem>.pts` next to a copy of each image, plus a bbox index
/// covering whole images, so the output loads as a dataset.
pub fn detect(g: &Global, a: InferArgs) -> Result<()> {
    let (cfg, ck) = load_model(g, &a.checkpoint)?;
    let dhln = load_dhln(&cfg, &ck)?;
    let paths = input_images(&a.input)?;
    let mut files: Vec<PathBuf> = paths.iter().flat_map(|p| [a.out.join(format!("{}.pts", stem(p))), a.out.join(file_name(p))]).collect();
    files.push(a.out.join(BBOX_INDEX));
    prepare_outputs(&a.out, &files, a.force)?;
    let images = load_inputs(&paths)?;
    let preds = predict(&dhln, &cfg, &images.iter().collect::<Vec<_>>(), &device())?;
    let mut index = String::new();
    for ((path, img), pred) in paths.iter().zip(&images).zip(&preds) {
        let name = file_name(path);
        write_landmarks(&a.out.join(format!("{}.pts", stem(path))), &pred.landmarks)?;
        let copy = a.out.join(&name);
        if fs::canonicalize(path).ok() != fs::canonicalize(&copy).ok() {
            fs::copy(path, &copy)?;
        }
        index.push_str(&format!("{name} 0 0 {} {}\n", img.width(), img.height()));
    }
    fs::write(a.out.join(BBOX_INDEX), index)?;
    println!("wrote landmarks for {} image(s) to {}", paths.len(), a.out.display());
    Ok(())
}

pub fn hallucinate(g: &Global, a: InferArgs) -> Result<()> {
    let (cfg, ck) = load_model(g, &a.checkpoint)?;
    let dhln = load_dhln(&cfg, &ck)?;
    let paths = input_images(&a.input)?;
    let files: Vec<PathBuf> = paths.iter().map(|p| a.out.join(format!("{}.png", stem(p)))).collect();
    prepare_outputs(&a.out, &files, a.force)?;
    let images = load_inputs(&paths)?;
    let preds = predict(&dhln, &cfg, &images.iter().collect::<Vec<_>>(), &device())?;
    for (file, pred) in files.iter().zip(&preds) {
        pred.sr.save(file)?;
    }
    println!("wrote {} image(s) to {}", files.len(), a.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct TransferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Face to re-render.
    #[arg(long)]
    condition: PathBuf,
    /// Target landmark file in the condition image's pixel frame.
    #[arg(long, conflicts_with = "target_image", required_unless_present = "target_image")]
    target_landmarks: Option<PathBuf>,
    /// Image whose detected landmarks give the target pose.
    #[arg(long)]
    target_image: Option<PathBuf>,
    /// Output image path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

/// Clamped last-stack heatmaps and hallucinated face for one image.
fn heatmaps_of(dhln: &Dhln, cfg: &ShtConfig, img: &ImageTensor) -> Result<(HeatmapStack, ImageTensor)> {
    let n = cfg.input_size;
    let lr = if (img.height(), img.width()) == (n, n) {
        img.clone().with_role(ImageRole::Lr)
    } else {
        resize_bicubic(img, n, n, ImageRole::Lr)?
    };
    let out = dhln.forward_image(&lr)?;
    let last = out.heatmaps_per_stack.last().expect("at least one stack");
    let clamped: Vec<f32> = last.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let (h, w) = last.resolution();
    Ok((HeatmapStack::new(clamped, last.len(), h, w)?, out.sr_image))
}

/// Re-renders the condition face in the target pose. Conditions smaller than
/// the SR size are hallucinated first; larger ones are resized down.
pub fn transfer(g: &Global, a: TransferArgs) -> Result<()> {
    let (cfg, ck) = load_model(g, &a.checkpoint)?;
    if ck.section("generator").is_none() {
        return Err(ShtError::Checkpoint(format!(
            "{} has no FPTN generator weights; transfer needs a checkpoint from pretrain_fptn or later",
            a.checkpoint.display()
        ))
        .into());
    }
    let dev = device();
    let dhln = load_dhln(&cfg, &ck)?;
    let generator = Generator::new(&cfg, 0, &dev)?;
    ck.restore("generator", generator.params())?;
    let out_dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    prepare_outputs(out_dir, std::slice::from_ref(&a.out), a.force)?;

    let condition = ImageTensor::load(&a.condition, ImageRole::Hr)?;
    let (h_con, sr) = heatmaps_of(&dhln, &cfg, &condition)?;
    let s = cfg.sr_output_size;
    let i_con = if condition.height() < s || condition.width() < s {
        sr
    } else if (condition.height(), condition.width()) == (s, s) {
        condition.clone()
    } else {
        resize_bicubic(&condition, s, s, ImageRole::Hr)?
    };
    let h_tar = match (&a.target_landmarks, &a.target_image) {
        (Some(p), _) => {
            let lm = LandmarkSet::new(read_landmarks(p, cfg.num_landmarks)?)?;
            let (hh, hw) = h_con.resolution();
            let lm = lm.rescaled((condition.width(), condition.height()), (hw, hh));
            render_heatmaps(&lm, (hh, hw), cfg.heatmap_sigma)?
        }
        (None, Some(p)) => heatmaps_of(&dhln, &cfg, &ImageTensor::load(p, ImageRole::Hr)?)?.0,
        (None, None) => unreachable!("clap requires a target"),
    };
    let input = sht_core::fptn::TransferInput::new(i_con, h_con, h_tar, s)?;
    generator.generate(&input)?.save(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct ToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 40)]
    test: usize,
    /// Unlabeled toy videos to generate.
    #[arg(long, default_value_t = 0)]
    videos: usize,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    force: bool,
}

/// Writes `train/`, `test/`, optional `videos/` and `toy.toml`.
pub fn make_toy_data(a: ToyArgs) -> Result<()> {
    let files = [a.out.join("toy.toml"), a.out.join("train").join(BBOX_INDEX), a.out.join("test").join(BBOX_INDEX)];
    prepare_outputs(&a.out, &files, a.force)?;
    let ranges = ToyRanges::default();
    for (split, n, stream) in [("train", a.train, 1), ("test", a.test, 2)] {
        if n > 0 {
            write_image_dataset(&a.out.join(split), &generate_toy_dataset(n, &ranges, derive_seed(a.seed, stream))?)?;
        }
    }
    for v in 0..a.videos {
        let frames = generate_toy_video(a.frames, &ranges, derive_seed(a.seed, 1000 + v as u64))?;
        write_video(&a.out.join("videos"), &format!("video_{v:03}"), &frames)?;
    }
    let cfg = ShtConfig { seed: a.seed, ..ShtConfig::toy() };
    cfg.save(&a.out.join("toy.toml"))?;
    println!("wrote {} train, {} test faces and {} video(s) to {}", a.train, a.test, a.videos, a.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    /// A 300W `.pts` file or a directory of them.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

pub fn convert_pts(a: ConvertArgs) -> Result<()> {
    let inputs: Vec<PathBuf> = if a.input.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(&a.input)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "pts"))
            .collect();
        v.sort();
        v
    } else {
        vec![a.input.clone()]
    };
    let outputs: Vec<PathBuf> = inputs.iter().map(|p| a.out.join(file_name(p))).collect();
    prepare_outputs(&a.out, &outputs, a.force)?;
    for (src, dst) in inputs.iter().zip(&outputs) {
        let text = fs::read_to_string(src).map_err(ShtError::from).with_context(|| format!("reading {}", src.display()))?;
        let lm = LandmarkSet::new(parse_300w_pts(&text, src)?)?;
        fs::write(dst, format_landmarks(&lm))?;
    }
    println!("converted {} file(s)", inputs.len());
    Ok(())
}
