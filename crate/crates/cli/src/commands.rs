//! The five pipeline commands. Each writes its artifacts under
//! `cfg.out_dir` and reports human-readable lines to `log_out`.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use fusedet::boxes::Detection;
use fusedet::detector::{
    detect, load_checkpoint, read_labels, save_checkpoint, train, write_labels, DetectorParams, ModelInput,
    Modality, TrainOutcome, TrainSample,
};
use fusedet::metrics::{evaluate, EvalImage, EvalReport};
use fusedet::registration::{register_pair, GrayImage, Homography, QualityReport};
use fusedet::synth::generate_pair;
use fusedet::Error;

use crate::{CliError, PipelineConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.fdet";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const REGISTRATION_REPORT_FILE: &str = "registration.csv";
pub const TRAIN_LOG_HEADER: &str = "epoch,lr,total,loc,conf,cls";

pub fn ir_name(stem: &str) -> String {
    format!("ir_{stem}.pgm")
}

pub fn vis_name(stem: &str) -> String {
    format!("vis_{stem}.pgm")
}

pub fn labels_name(stem: &str) -> String {
    format!("labels_{stem}.txt")
}

pub fn homography_name(stem: &str) -> String {
    format!("homography_{stem}.txt")
}

fn required<'a>(dir: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    dir.as_deref()
        .ok_or_else(|| CliError::Usage(format!("`{key}` is not set")))
}

/// Stems `s` of every `ir_<s>.pgm` in `dir`, sorted.
pub fn list_stems(dir: &Path) -> Result<Vec<String>, CliError> {
    let mut stems = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_prefix("ir_").and_then(|s| s.strip_suffix(".pgm")) {
            stems.push(stem.to_string());
        }
    }
    stems.sort();
    if stems.is_empty() {
        return Err(CliError::Data(format!("no ir_*.pgm images in {}", dir.display())));
    }
    Ok(stems)
}

/// Writes `synth_count` pairs: infrared and (unregistered) visible images,
/// labels, and the true visible-to-infrared homography.
pub fn cmd_synth(cfg: &PipelineConfig, log_out: &mut dyn Write) -> Result<(), CliError> {
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir)?;
    let mut targets = 0;
    for i in cfg.synth_first_index..cfg.synth_first_index + cfg.synth_count {
        let stem = format!("{i:04}");
        let pair = generate_pair(&cfg.synth, i)?;
        pair.ir.write_pgm(&dir.join(ir_name(&stem)))?;
        pair.vis.write_pgm(&dir.join(vis_name(&stem)))?;
        write_labels(&pair.labels, &dir.join(labels_name(&stem)))?;
        std::fs::write(dir.join(homography_name(&stem)), pair.homography.to_text())?;
        targets += pair.labels.len();
    }
    writeln!(
        log_out,
        "wrote {} pairs with {targets} targets to {}",
        cfg.synth_count,
        dir.display()
    )?;
    Ok(())
}

/// One row of the registration report.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationRow {
    pub stem: String,
    pub outcome: Result<QualityReport, String>,
    /// Mean corner-transfer error against a ground-truth homography, when
    /// one sits next to the visible image.
    pub corner_error_px: Option<f64>,
}

pub const REGISTRATION_HEADER: &str = "pair,status,failed_stage,matches,inliers,rms_px,refine_status,corner_error_px";

impl RegistrationRow {
    fn csv(&self) -> String {
        let err = self.corner_error_px.map(|e| e.to_string()).unwrap_or_default();
        match &self.outcome {
            Ok(q) => format!("{},ok,,{},{err}", self.stem, q.csv_row()),
            Err(stage) => format!("{},failed,{stage},,,,,", self.stem),
        }
    }
}

/// Registers every `vis_<s>.pgm` onto `ir_<s>.pgm`. Writes the warped
/// visible image and estimated homography per success; failures become
/// report rows and do not stop the run.
pub fn cmd_register(cfg: &PipelineConfig, log_out: &mut dyn Write) -> Result<Vec<RegistrationRow>, CliError> {
    let ir_dir = required(&cfg.ir_dir, "ir_dir")?;
    let vis_dir = required(&cfg.vis_dir, "vis_dir")?;
    let out = &cfg.out_dir;
    if out == vis_dir {
        return Err(CliError::Usage("out_dir must differ from vis_dir".into()));
    }
    std::fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for stem in list_stems(ir_dir)? {
        let ir = GrayImage::read_pgm(&ir_dir.join(ir_name(&stem)))?;
        let vis = GrayImage::read_pgm(&vis_dir.join(vis_name(&stem)))?;
        let row = match register_pair(&vis, &ir, &cfg.registration) {
            Ok(reg) => {
                reg.warped.write_pgm(&out.join(vis_name(&stem)))?;
                std::fs::write(out.join(homography_name(&stem)), reg.homography.to_text())?;
                let truth_path = vis_dir.join(homography_name(&stem));
                let corner_error_px = if truth_path.exists() {
                    let truth = Homography::from_text(&std::fs::read_to_string(&truth_path)?)?;
                    let (w, h) = (ir.width() as f64, ir.height() as f64);
                    Some(reg.homography.corner_transfer_error(&truth, w, h)?)
                } else {
                    None
                };
                RegistrationRow {
                    stem,
                    outcome: Ok(reg.report),
                    corner_error_px,
                }
            }
            Err(Error::Registration { stage, reason }) => {
                log::warn!("pair {stem}: registration failed at {stage}: {reason}");
                RegistrationRow {
                    stem,
                    outcome: Err(stage.to_string()),
                    corner_error_px: None,
                }
            }
            Err(e) => return Err(e.into()),
        };
        rows.push(row);
    }
    let mut csv = String::from(REGISTRATION_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    std::fs::write(out.join(REGISTRATION_REPORT_FILE), csv)?;
    let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
    writeln!(log_out, "registered {} of {} pairs", rows.len() - failed, rows.len())?;
    Ok(rows)
}

/// One labeled example read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSample {
    pub stem: String,
    pub sample: TrainSample,
}

/// Loads `ir_<s>.pgm` and `labels_<s>.txt` for every stem, plus the
/// registered `vis_<s>.pgm` when the modality needs it. A missing visible
/// image leaves `vis` empty.
pub fn load_dataset(cfg: &PipelineConfig, modality: Modality) -> Result<Vec<LoadedSample>, CliError> {
    let ir_dir = required(&cfg.ir_dir, "ir_dir")?;
    let labels_dir = cfg
        .labels_path()
        .ok_or_else(|| CliError::Usage("`labels_dir` is not set".into()))?;
    let vis_dir = if modality.uses_vis() {
        Some(required(&cfg.vis_dir, "vis_dir")?)
    } else {
        None
    };
    let mut out = Vec::new();
    for stem in list_stems(ir_dir)? {
        let ir = GrayImage::read_pgm(&ir_dir.join(ir_name(&stem)))?.to_feature_map();
        let labels_path = labels_dir.join(labels_name(&stem));
        if !labels_path.exists() {
            return Err(CliError::Data(format!("missing {}", labels_path.display())));
        }
        let boxes = read_labels(&labels_path)?;
        let vis = match vis_dir {
            Some(d) => {
                let p = d.join(vis_name(&stem));
                if p.exists() {
                    Some(GrayImage::read_pgm(&p)?.to_feature_map())
                } else {
                    log::warn!("pair {stem}: no registered visible image");
                    None
                }
            }
            None => None,
        };
        out.push(LoadedSample {
            stem,
            sample: TrainSample { ir, vis, boxes },
        });
    }
    Ok(out)
}

/// Trains the configured arm. Writes the checkpoint and a per-epoch loss log.
pub fn cmd_train(cfg: &PipelineConfig, log_out: &mut dyn Write) -> Result<TrainOutcome, CliError> {
    let modality = cfg.model.modality;
    let mut data: Vec<TrainSample> = load_dataset(cfg, modality)?
        .into_iter()
        .map(|s| s.sample)
        .collect();
    if modality == Modality::Visible {
        let before = data.len();
        data.retain(|s| s.vis.is_some());
        if data.len() < before {
            log::warn!("skipping {} pairs without a registered visible image", before - data.len());
        }
    }
    let outcome = train(&data, &cfg.model, &cfg.train)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    save_checkpoint(&outcome.params, &cfg.out_dir.join(CHECKPOINT_FILE))?;
    let mut csv = format!("{TRAIN_LOG_HEADER}\n");
    for e in &outcome.epochs {
        let l = &e.loss;
        writeln!(csv, "{},{},{},{},{},{}", e.epoch, e.lr, l.total, l.loc, l.conf, l.cls).unwrap();
    }
    std::fs::write(cfg.out_dir.join(TRAIN_LOG_FILE), csv)?;
    if let (Some(first), Some(last)) = (outcome.epochs.first(), outcome.epochs.last()) {
        writeln!(
            log_out,
            "trained {modality:?} (cbam {}) on {} samples: loss {:.5} -> {:.5}",
            cfg.model.use_cbam,
            data.len(),
            first.loss.total,
            last.loss.total
        )?;
    }
    Ok(outcome)
}

fn model_input<'a>(params: &DetectorParams, s: &'a TrainSample) -> Option<ModelInput<'a>> {
    match params.modality() {
        Modality::Visible if s.vis.is_none() => None,
        _ => Some(s.input()),
    }
}

/// Runs the checkpoint over the dataset and writes summary, PR and F1 CSVs.
pub fn cmd_eval(cfg: &PipelineConfig, log_out: &mut dyn Write) -> Result<EvalReport, CliError> {
    let ckpt = required(&cfg.checkpoint, "checkpoint")?;
    let params = load_checkpoint(ckpt)?;
    let data = load_dataset(cfg, params.modality())?;
    let mut images = Vec::with_capacity(data.len());
    for s in &data {
        let detections = match model_input(&params, &s.sample) {
            Some(input) => detect(&params, input, cfg.conf_thresh, cfg.nms_iou)?,
            None => {
                log::warn!("pair {}: no visible image, scored as no detections", s.stem);
                Vec::new()
            }
        };
        images.push(EvalImage {
            detections,
            ground_truth: s.sample.boxes.clone(),
        });
    }
    let report = evaluate(&images)?;
    report.write_csvs(&cfg.out_dir)?;
    writeln!(log_out, "{}", report.headline())?;
    Ok(report)
}

/// Draws one-pixel white box outlines onto a copy of `img`.
pub fn annotate(img: &GrayImage, dets: &[Detection]) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let mut px = img.pixels().to_vec();
    for d in dets {
        let to_px = |v: f64, n: usize| ((v * n as f64 - 0.5).round().max(0.0) as usize).min(n - 1);
        let (x0, x1) = (to_px(d.bbox.x1(), w), to_px(d.bbox.x2(), w));
        let (y0, y1) = (to_px(d.bbox.y1(), h), to_px(d.bbox.y2(), h));
        for x in x0..=x1 {
            px[y0 * w + x] = 1.0;
            px[y1 * w + x] = 1.0;
        }
        for y in y0..=y1 {
            px[y * w + x0] = 1.0;
            px[y * w + x1] = 1.0;
        }
    }
    GrayImage::new(w, h, px).expect("same shape as the source image")
}

/// Single-pair inference. With a visible image, registers it onto the
/// infrared frame first; if that fails, a fused model falls back to the
/// infrared stream alone.
pub fn cmd_detect(
    cfg: &PipelineConfig,
    ir_path: &Path,
    vis_path: Option<&Path>,
    annotate_path: Option<&Path>,
    log_out: &mut dyn Write,
) -> Result<Vec<Detection>, CliError> {
    let ckpt = required(&cfg.checkpoint, "checkpoint")?;
    let params = load_checkpoint(ckpt)?;
    let ir = GrayImage::read_pgm(ir_path)?;
    let modality = params.modality();
    let vis = match vis_path {
        Some(p) if modality.uses_vis() => {
            let raw = GrayImage::read_pgm(p)?;
            match register_pair(&raw, &ir, &cfg.registration) {
                Ok(reg) => Some(reg.warped),
                Err(Error::Registration { stage, reason }) => {
                    log::warn!("registration failed at {stage} ({reason}); continuing without the visible image");
                    None
                }
                Err(e) => return Err(e.into()),
            }
        }
        _ => None,
    };
    if modality == Modality::Visible && vis.is_none() {
        return Err(CliError::Data("visible-only model needs a registrable visible image".into()));
    }
    if modality == Modality::Fused && vis.is_none() {
        log::warn!("fused model running on the infrared stream only");
    }
    let ir_map = ir.to_feature_map();
    let vis_map = vis.as_ref().map(GrayImage::to_feature_map);
    let input = ModelInput {
        ir: Some(&ir_map),
        vis: vis_map.as_ref(),
    };
    let dets = detect(&params, input, cfg.detect_conf, cfg.nms_iou)?;
    for d in &dets {
        writeln!(
            log_out,
            "{} {:.6} {:.6} {:.6} {:.6} {:.6}",
            d.class_id, d.confidence, d.bbox.cx, d.bbox.cy, d.bbox.w, d.bbox.h
        )?;
    }
    if let Some(p) = annotate_path {
        annotate(&ir, &dets).write_pgm(p)?;
    }
    Ok(dets)
}
