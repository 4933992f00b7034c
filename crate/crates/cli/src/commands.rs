use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::Args;

use ssldetect::augment::ImageSample;
use ssldetect::boxes::{Detection, GroundTruthBox, Rect};
use ssldetect::detector::Detector;
use ssldetect::eval::{map_range, MapSummary};
use ssldetect::finetune::{self, load_backbone_into_detector, InitMode};
use ssldetect::io::checkpoint::{Checkpoint, CheckpointMeta};
use ssldetect::io::config::{parse_config, parse_config_str, parse_override, RunConfig};
use ssldetect::io::dataset::{load_labeled_dataset, load_unlabeled_dataset, DatasetManifest};
use ssldetect::io::metrics::{read_metrics_csv, write_contrastive_csv, write_metrics_csv, MetricsRecord};
use ssldetect::io::synth::synth_generate;
use ssldetect::io::write_file;
use ssldetect::pretrain;
use ssldetect::verify::{run_suite, SuiteOptions, TOLERANCE};
use ssldetect::Error;

use crate::GlobalArgs;

pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_ABORT: u8 = 2;
pub const EXIT_VERIFY: u8 = 3;

pub const PRETRAIN_METRICS: &str = "pretrain_metrics.csv";
pub const FINETUNE_METRICS: &str = "metrics.csv";
pub const DETECTOR_CHECKPOINT: &str = "detector.ckpt";
pub const CONFIG_ECHO: &str = "config.toml";
pub const PR_CURVE: &str = "pr_curve.csv";

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::TrainingAborted { .. } | Error::NonFinite { .. } => EXIT_ABORT,
            _ => EXIT_CONFIG,
        };
        Failure { code, error: e.into() }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { code: EXIT_CONFIG, error }
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(g: &GlobalArgs, section: &str) -> Result<RunConfig, Failure> {
    let overrides = g.overrides.iter().map(|o| parse_override(o)).collect::<ssldetect::Result<Vec<_>>>()?;
    let mut cfg = parse_config(g.config.as_deref(), &overrides, section)?;
    if let Some(seed) = g.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn out_dir(g: &GlobalArgs, default: &str) -> PathBuf {
    g.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

pub fn synth(g: &GlobalArgs) -> CmdResult {
    let cfg = load_config(g, "synth")?;
    let out = out_dir(g, "data");
    let s = synth_generate(&cfg.synth, &out)?;
    println!(
        "synth seed {}: {} unlabeled, {} train ({} boxes), {} val ({} boxes) -> {}",
        cfg.synth.seed,
        s.unlabeled,
        s.train,
        s.train_boxes,
        s.val,
        s.val_boxes,
        out.display()
    );
    Ok(())
}

fn load_unlabeled(dir: &Path) -> Result<Vec<ImageSample>, Failure> {
    let m = load_unlabeled_dataset(dir)?;
    if !m.skipped.is_empty() {
        log::warn!("{} unreadable images skipped under {}", m.skipped.len(), dir.display());
    }
    Ok(m.load_images()?)
}

pub fn pretrain(g: &GlobalArgs) -> CmdResult {
    let cfg = load_config(g, "pretrain")?;
    let out = out_dir(g, "runs/pretrain");
    let images = load_unlabeled(&cfg.pretrain.dataset)?;
    log::info!("pretraining on {} images from {}", images.len(), cfg.pretrain.dataset.display());
    write_file(&out.join(CONFIG_ECHO), cfg.to_toml().as_bytes())?;
    let res = pretrain::pretrain(&images, &cfg.model.backbone, &cfg.model.projection, &cfg.pretrain)?;
    let ckpt_path = out.join(&cfg.pretrain.checkpoint);
    let meta = CheckpointMeta {
        config: cfg.to_toml(),
        step: res.state.step as u64,
        epoch: res.state.epoch as u64,
        loss: res.state.running_loss,
    };
    Checkpoint::from_store(&res.encoder.store, &[], meta).save(&ckpt_path)?;
    write_contrastive_csv(&res.records, &out.join(PRETRAIN_METRICS))?;
    println!(
        "pretrain done: {} epochs, {} steps, final loss {:.6}, checkpoint {}",
        res.state.epoch,
        res.state.step,
        res.state.running_loss,
        ckpt_path.display()
    );
    Ok(())
}

fn load_labeled(dir: &Path) -> Result<(DatasetManifest, Vec<ImageSample>), Failure> {
    let m = load_labeled_dataset(dir)?;
    let images = m.load_images()?;
    Ok((m, images))
}

pub fn finetune(g: &GlobalArgs) -> CmdResult {
    let cfg = load_config(g, "finetune")?;
    let fc = &cfg.finetune;
    let out = out_dir(g, "runs/finetune");
    let (_, train) = load_labeled(&fc.train)?;
    let val = match load_labeled(&fc.val) {
        Ok((_, v)) => v,
        Err(f) => {
            log::warn!("no validation split: {:#}", f.error);
            Vec::new()
        }
    };
    let mut det = Detector::new(&cfg.model.backbone, &cfg.model.head, fc.seed)?;
    if fc.init == InitMode::Ssl {
        let ckpt = Checkpoint::load(&fc.checkpoint)?;
        let report = load_backbone_into_detector(&ckpt, &mut det).with_context(|| format!("loading {}", fc.checkpoint.display()))?;
        log::info!(
            "loaded {} backbone tensors, ignored {}, {} neck/head tensors freshly initialised",
            report.loaded.len(),
            report.ignored.len(),
            report.missing.len()
        );
    }
    write_file(&out.join(CONFIG_ECHO), cfg.to_toml().as_bytes())?;
    let log = finetune::finetune(&mut det, &train, &val, fc)?;
    write_metrics_csv(&log.records, &out.join(FINETUNE_METRICS))?;
    let last = log.records.last().expect("at least one epoch");
    let meta = CheckpointMeta {
        config: cfg.to_toml(),
        step: 0,
        epoch: last.epoch as u64,
        loss: last.train.total(),
    };
    Checkpoint::from_store(&det.store, &[], meta).save(&out.join(DETECTOR_CHECKPOINT))?;
    println!(
        "finetune ({:?}) epoch {}: precision {} recall {} mAP@0.5 {} mAP@0.5:0.95 {}",
        fc.init,
        last.epoch,
        opt(last.precision),
        opt(last.recall),
        opt(last.map50),
        opt(last.map50_95)
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Detector checkpoint written by `finetune`.
    #[arg(long, conflicts_with = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Directory of per-image prediction files `<stem>.txt` with lines
    /// `0 cx cy w h score` (normalized).
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Labeled split; defaults to `finetune.val`.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

fn parse_predictions(text: &str, path: &Path, w: usize, h: usize) -> Result<Vec<Detection>, Failure> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        let nums: Option<Vec<f32>> = f.iter().skip(1).map(|s| s.parse().ok()).collect();
        match (f.len(), nums) {
            (6, Some(v)) if (0.0..=1.0).contains(&v[4]) => {
                let r = GroundTruthBox::new(v[0], v[1], v[2], v[3]).to_rect(w, h);
                out.push(Detection { bbox: r, score: v[4] });
            }
            _ => return Err(anyhow!("{}:{}: expected `0 cx cy w h score`", path.display(), i + 1).into()),
        }
    }
    Ok(out)
}

fn pr_curve_csv(s: &MapSummary) -> String {
    let mut t = String::from("score,precision,recall\n");
    for i in 0..s.curve.len() {
        let _ = writeln!(t, "{:.6},{:.6},{:.6}", s.curve.scores[i], s.curve.precision[i], s.curve.recall[i]);
    }
    t
}

pub fn eval(g: &GlobalArgs, a: &EvalArgs) -> CmdResult {
    let cfg = load_config(g, "finetune")?;
    let out = out_dir(g, "runs/eval");
    let data = a.data.clone().unwrap_or_else(|| cfg.finetune.val.clone());
    let (manifest, summary) = if let Some(dir) = &a.predictions {
        let m = load_labeled_dataset(&data)?;
        let mut dets = Vec::with_capacity(m.len());
        let mut gts = Vec::with_capacity(m.len());
        for e in &m.entries {
            let (w, h) = e.size;
            let stem = e.image.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let p = dir.join(format!("{stem}.txt"));
            let d = if p.is_file() {
                let text = std::fs::read_to_string(&p).map_err(|err| Error::Io { path: p.clone(), source: err })?;
                parse_predictions(&text, &p, w, h)?
            } else {
                Vec::new()
            };
            dets.push(d);
            gts.push(e.boxes.iter().map(|b| b.to_rect(w, h)).collect::<Vec<Rect>>());
        }
        let s = map_range(&dets, &gts)?;
        (m, s)
    } else {
        let path = a.checkpoint.clone().unwrap_or_else(|| PathBuf::from("runs/finetune").join(DETECTOR_CHECKPOINT));
        let ckpt = Checkpoint::load(&path)?;
        let trained = parse_config_str(&ckpt.meta.config, &[], "").with_context(|| format!("config stored in {}", path.display()))?;
        let mut det = Detector::new(&trained.model.backbone, &trained.model.head, trained.finetune.seed)?;
        det.load_state(&ckpt)?;
        let (m, images) = load_labeled(&data)?;
        let mut fc = trained.finetune.clone();
        fc.conf_thresh = cfg.finetune.conf_thresh;
        fc.nms_iou = cfg.finetune.nms_iou;
        let v = finetune::validate(&mut det, &images, &fc)?;
        let size = fc.image_size;
        let gts: Vec<Vec<Rect>> = images.iter().map(|s| s.boxes.iter().map(|b| b.to_rect(size, size)).collect()).collect();
        (m, map_range(&v.detections, &gts)?)
    };
    write_file(&out.join(PR_CURVE), pr_curve_csv(&summary).as_bytes())?;
    println!(
        "{} images: precision {:.4} recall {:.4} mAP@0.5 {:.4} mAP@0.5:0.95 {:.4}",
        manifest.len(),
        summary.precision,
        summary.recall,
        summary.map50,
        summary.map50_95
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Baseline metrics CSV.
    pub a: PathBuf,
    /// Candidate metrics CSV.
    pub b: PathBuf,
}

/// `(model, init)` from the `config.toml` next to a metrics CSV.
fn describe(csv: &Path) -> (String, String) {
    let cfg = csv
        .parent()
        .map(|d| d.join(CONFIG_ECHO))
        .and_then(|p| std::fs::read_to_string(p).ok())
        .and_then(|t| parse_config_str(&t, &[], "").ok());
    match cfg {
        Some(c) => (
            format!("{:?}", c.model.backbone.style).to_lowercase(),
            format!("{:?}", c.finetune.init).to_lowercase(),
        ),
        None => (csv.display().to_string(), "-".into()),
    }
}

fn delta(a: Option<f64>, b: Option<f64>) -> String {
    match (a, b) {
        (Some(x), Some(y)) => format!("{:+.4}", y - x),
        _ => "-".into(),
    }
}

pub fn compare_table(a: (&Path, &[MetricsRecord]), b: (&Path, &[MetricsRecord])) -> String {
    let n = a.1.len().min(b.1.len());
    let mut t = String::new();
    let _ = writeln!(
        t,
        "{:<24} {:<8} {:>9} {:>9} {:>9} {:>13} {:>9}",
        "Model", "Init", "Precision", "Recall", "mAP@0.5", "mAP@0.5:0.95", "Time(s)"
    );
    for (path, recs) in [a, b] {
        let (model, init) = describe(path);
        if let Some(r) = recs.get(n.wrapping_sub(1)) {
            let _ = writeln!(
                t,
                "{:<24} {:<8} {:>9} {:>9} {:>9} {:>13} {:>9.1}",
                model,
                init,
                opt(r.precision),
                opt(r.recall),
                opt(r.map50),
                opt(r.map50_95),
                r.seconds
            );
        }
    }
    let _ = writeln!(t, "\n{:>5} {:>10} {:>10} {:>10} {:>10} {:>13}", "epoch", "Δval_loss", "ΔP", "ΔR", "ΔmAP@0.5", "ΔmAP@0.5:0.95");
    for (ra, rb) in a.1.iter().zip(b.1).take(n) {
        let _ = writeln!(
            t,
            "{:>5} {:>10} {:>10} {:>10} {:>10} {:>13}",
            ra.epoch,
            delta(ra.val.map(|v| v.total()), rb.val.map(|v| v.total())),
            delta(ra.precision, rb.precision),
            delta(ra.recall, rb.recall),
            delta(ra.map50, rb.map50),
            delta(ra.map50_95, rb.map50_95)
        );
    }
    t
}

pub fn compare(_g: &GlobalArgs, a: &CompareArgs) -> CmdResult {
    let ra = read_metrics_csv(&a.a)?;
    let rb = read_metrics_csv(&a.b)?;
    if ra.len() != rb.len() {
        log::warn!("epoch counts differ ({} vs {}); comparing the first {}", ra.len(), rb.len(), ra.len().min(rb.len()));
    }
    if ra.is_empty() || rb.is_empty() {
        return Err(anyhow!("no epochs to compare").into());
    }
    print!("{}", compare_table((&a.a, &ra), (&a.b, &rb)));
    Ok(())
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Random instances per op.
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    /// Skip the end-to-end detector check.
    #[arg(long)]
    pub skip_detector: bool,
    #[arg(long, hide = true)]
    pub inject_sign_error: Option<String>,
}

pub fn gradcheck(g: &GlobalArgs, a: &GradcheckArgs) -> CmdResult {
    let opts = SuiteOptions {
        trials: a.trials,
        seed: g.seed.unwrap_or(0),
        inject_sign_error: a.inject_sign_error.clone(),
        include_detector: !a.skip_detector,
    };
    let reports = run_suite(&opts)?;
    println!("{:<18} {:>6} {:>14}  status", "op", "trials", "max rel error");
    for r in &reports {
        println!(
            "{:<18} {:>6} {:>14.3e}  {}",
            r.op,
            r.trials,
            r.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.op.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks below {TOLERANCE:e}", reports.len());
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_VERIFY,
            error: anyhow!("gradient check failed for: {}", failed.join(", ")),
        })
    }
}
