//! Plain-text `key = value` pipeline configuration with flag overrides.

use std::path::{Path, PathBuf};

use fusedet::detector::{ModelConfig, Modality, TrainConfig, DEFAULT_NMS_IOU};
use fusedet::registration::RegistrationConfig;
use fusedet::synth::SyntheticSceneSpec;

use crate::CliError;

/// Everything a command needs. Built from defaults, then a config file,
/// then command-line overrides. The seed has no default.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub ir_dir: Option<PathBuf>,
    pub vis_dir: Option<PathBuf>,
    pub labels_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub enable_cbam: bool,
    pub enable_fusion: bool,
    /// Stream used when fusion is off.
    pub single_modality: Modality,
    /// Confidence floor for evaluation; low so the PR curve is complete.
    pub conf_thresh: f64,
    /// Confidence floor for single-image detection.
    pub detect_conf: f64,
    pub nms_iou: f64,
    pub synth: SyntheticSceneSpec,
    pub synth_count: usize,
    /// Index of the first generated pair; lets disjoint splits share a seed.
    pub synth_first_index: usize,
    pub registration: RegistrationConfig,
}

/// Command-line flags that override the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub no_cbam: bool,
    pub no_fusion: bool,
    pub ir_only: bool,
    pub vis_only: bool,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| usage(format!("{key}: cannot parse {v:?}")))
}

fn parse_real(key: &str, v: &str) -> Result<f64, CliError> {
    let x: f64 = parse_num(key, v)?;
    if !x.is_finite() {
        return Err(usage(format!("{key}: {v} is not finite")));
    }
    Ok(x)
}

fn parse_bool(key: &str, v: &str) -> Result<bool, CliError> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(usage(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_pair<T: std::str::FromStr>(key: &str, v: &str) -> Result<(T, T), CliError> {
    let (a, b) = v
        .split_once(',')
        .ok_or_else(|| usage(format!("{key}: expected \"low,high\", got {v:?}")))?;
    Ok((parse_num(key, a.trim())?, parse_num(key, b.trim())?))
}

fn parse_modality(key: &str, v: &str) -> Result<Modality, CliError> {
    match v {
        "ir" => Ok(Modality::Infrared),
        "vis" => Ok(Modality::Visible),
        _ => Err(usage(format!("{key}: expected ir or vis, got {v:?}"))),
    }
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
/// Duplicate keys are rejected.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("config line {}: expected key = value", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(usage(format!("config line {}: empty key", n + 1)));
        }
        if out.iter().any(|(e, _)| e == k) {
            return Err(usage(format!("config line {}: duplicate key {k}", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl PipelineConfig {
    /// Builds a configuration from config-file text (possibly empty) and
    /// overrides. Fails if neither supplies a seed.
    pub fn from_text(text: &str, ov: &Overrides) -> Result<Self, CliError> {
        let mut seed = None;
        let mut cfg = Self {
            seed: 0,
            ir_dir: None,
            vis_dir: None,
            labels_dir: None,
            out_dir: PathBuf::from("out"),
            checkpoint: None,
            train: TrainConfig::new(0),
            model: ModelConfig::default(),
            enable_cbam: true,
            enable_fusion: true,
            single_modality: Modality::Infrared,
            conf_thresh: 0.001,
            detect_conf: 0.5,
            nms_iou: DEFAULT_NMS_IOU,
            synth: SyntheticSceneSpec::new(0),
            synth_count: 250,
            synth_first_index: 0,
            registration: RegistrationConfig::default(),
        };
        let mut lw = cfg.train.loss_weights;
        for (k, v) in parse_key_values(text)? {
            let (k, v) = (k.as_str(), v.as_str());
            match k {
                "seed" => seed = Some(parse_num(k, v)?),
                "ir_dir" => cfg.ir_dir = Some(v.into()),
                "vis_dir" => cfg.vis_dir = Some(v.into()),
                "labels_dir" => cfg.labels_dir = Some(v.into()),
                "out_dir" => cfg.out_dir = v.into(),
                "checkpoint" => cfg.checkpoint = Some(v.into()),
                "epochs" => cfg.train.epochs = parse_num(k, v)?,
                "batch_size" => cfg.train.batch_size = parse_num(k, v)?,
                "image_size" => cfg.train.image_size = parse_num(k, v)?,
                "lr0" => cfg.train.lr0 = parse_real(k, v)?,
                "momentum" => cfg.train.momentum = parse_real(k, v)?,
                "lambda_loc" => lw.loc = parse_real(k, v)?,
                "lambda_conf" => lw.conf = parse_real(k, v)?,
                "lambda_cls" => lw.cls = parse_real(k, v)?,
                "num_classes" => cfg.model.num_classes = parse_num(k, v)?,
                "stem_channels" => cfg.model.stem_channels = parse_num(k, v)?,
                "reduction" => cfg.model.reduction = parse_num(k, v)?,
                "enable_cbam" => cfg.enable_cbam = parse_bool(k, v)?,
                "enable_fusion" => cfg.enable_fusion = parse_bool(k, v)?,
                "modality" => cfg.single_modality = parse_modality(k, v)?,
                "conf_thresh" => cfg.conf_thresh = parse_real(k, v)?,
                "detect_conf" => cfg.detect_conf = parse_real(k, v)?,
                "nms_iou" => cfg.nms_iou = parse_real(k, v)?,
                "synth_count" => cfg.synth_count = parse_num(k, v)?,
                "synth_first_index" => cfg.synth_first_index = parse_num(k, v)?,
                "synth_blob_count" => cfg.synth.blob_count = parse_pair(k, v)?,
                "synth_blob_radius" => cfg.synth.blob_radius = parse_pair(k, v)?,
                "synth_ir_clutter" => cfg.synth.ir_clutter = parse_pair(k, v)?,
                "synth_vis_clutter" => cfg.synth.vis_clutter = parse_pair(k, v)?,
                "synth_structures" => cfg.synth.structures = parse_pair(k, v)?,
                "synth_ir_peak" => cfg.synth.ir_peak = parse_pair(k, v)?,
                "synth_vis_contrast" => cfg.synth.vis_contrast = parse_pair(k, v)?,
                "synth_vis_texture" => cfg.synth.vis_texture = parse_real(k, v)?,
                "synth_ir_noise" => cfg.synth.ir_noise_sigma = parse_real(k, v)?,
                "synth_vis_noise" => cfg.synth.vis_noise_sigma = parse_real(k, v)?,
                "synth_max_corner_disp" => cfg.synth.max_corner_disp = parse_real(k, v)?,
                "max_keypoints" => cfg.registration.max_keypoints = parse_num(k, v)?,
                "match_ratio" => cfg.registration.ratio = parse_real(k, v)?,
                "ransac_thresh_px" => cfg.registration.ransac_thresh_px = parse_real(k, v)?,
                "ransac_iters" => cfg.registration.ransac_iters = parse_num(k, v)?,
                "min_inliers" => cfg.registration.min_inliers = parse_num(k, v)?,
                _ => return Err(usage(format!("unknown config key {k:?}"))),
            }
        }
        cfg.train.loss_weights = lw;

        if ov.ir_only && ov.vis_only {
            return Err(usage("--ir-only and --vis-only are mutually exclusive"));
        }
        seed = ov.seed.or(seed);
        if let Some(out) = &ov.out {
            cfg.out_dir = out.clone();
        }
        if ov.no_cbam {
            cfg.enable_cbam = false;
        }
        if ov.no_fusion {
            cfg.enable_fusion = false;
        }
        if ov.ir_only {
            cfg.enable_fusion = false;
            cfg.single_modality = Modality::Infrared;
        }
        if ov.vis_only {
            cfg.enable_fusion = false;
            cfg.single_modality = Modality::Visible;
        }
        cfg.seed = seed.ok_or_else(|| usage("a seed is required (config key `seed` or --seed)"))?;
        cfg.train.seed = cfg.seed;
        cfg.synth.seed = cfg.seed;
        cfg.registration.seed = cfg.seed;
        cfg.synth.image_size = cfg.train.image_size;
        cfg.model.use_cbam = cfg.enable_cbam;
        cfg.model.modality = if cfg.enable_fusion {
            Modality::Fused
        } else {
            cfg.single_modality
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads the config file if given, then applies overrides.
    pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_text(&text, ov)
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |e: fusedet::Error| usage(e.to_string());
        self.train.validate().map_err(bad)?;
        self.model.validate().map_err(bad)?;
        self.synth.validate().map_err(bad)?;
        if !(0.0..=1.0).contains(&self.conf_thresh) {
            return Err(usage(format!("conf_thresh {} outside [0, 1]", self.conf_thresh)));
        }
        if !(0.0..=1.0).contains(&self.detect_conf) {
            return Err(usage(format!("detect_conf {} outside [0, 1]", self.detect_conf)));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(usage(format!("nms_iou {} outside [0, 1]", self.nms_iou)));
        }
        if !(self.registration.ratio > 0.0 && self.registration.ratio < 1.0) {
            return Err(usage(format!("match_ratio {} outside (0, 1)", self.registration.ratio)));
        }
        if !(self.registration.ransac_thresh_px > 0.0) || self.registration.ransac_iters == 0 {
            return Err(usage("ransac_thresh_px and ransac_iters must be positive"));
        }
        if self.registration.min_inliers < 4 {
            return Err(usage("min_inliers must be at least 4"));
        }
        Ok(())
    }

    /// Directory holding label files: `labels_dir`, else `ir_dir`.
    pub fn labels_path(&self) -> Option<&Path> {
        self.labels_dir.as_deref().or(self.ir_dir.as_deref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded() -> Overrides {
        Overrides {
            seed: Some(3),
            ..Default::default()
        }
    }

    #[test]
    fn seed_is_mandatory() {
        let e = PipelineConfig::from_text("", &Overrides::default()).unwrap_err();
        assert!(matches!(e, CliError::Usage(_)));
        assert_eq!(PipelineConfig::from_text("seed = 9", &Overrides::default()).unwrap().seed, 9);
        // Flag wins over file.
        assert_eq!(PipelineConfig::from_text("seed = 9", &seeded()).unwrap().seed, 3);
    }

    #[test]
    fn parses_keys_and_comments() {
        let text = "# arm\nepochs = 7  # short\nlr0=0.5\n\nenable_cbam = false\nsynth_blob_count = 0, 2\n";
        let c = PipelineConfig::from_text(text, &seeded()).unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.train.lr0, 0.5);
        assert!(!c.model.use_cbam);
        assert_eq!(c.synth.blob_count, (0, 2));
        assert_eq!(c.train.seed, 3);
        assert_eq!(c.synth.seed, 3);
    }

    #[test]
    fn rejects_bad_input() {
        for text in ["epochs", "bogus = 1", "epochs = x", "epochs = 1\nepochs = 2", "lr0 = nan", "enable_cbam = maybe"] {
            assert!(PipelineConfig::from_text(text, &seeded()).is_err(), "{text}");
        }
        let both = Overrides {
            ir_only: true,
            vis_only: true,
            ..seeded()
        };
        assert!(PipelineConfig::from_text("", &both).is_err());
    }

    #[test]
    fn all_four_arms_expressible() {
        let arm = |text: &str, ov: Overrides| {
            let c = PipelineConfig::from_text(text, &ov).unwrap();
            (c.model.modality, c.model.use_cbam)
        };
        let ir_base = Overrides {
            no_cbam: true,
            ir_only: true,
            ..seeded()
        };
        assert_eq!(arm("", ir_base), (Modality::Infrared, false));
        assert_eq!(
            arm("enable_cbam = false\nenable_fusion = false\nmodality = vis", seeded()),
            (Modality::Visible, false)
        );
        assert_eq!(arm("enable_fusion = false", seeded()), (Modality::Infrared, true));
        assert_eq!(arm("", seeded()), (Modality::Fused, true));
    }
}
