use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use fusedet::detector::{load_checkpoint, read_labels, Modality};
use fusedet::registration::{GrayImage, Homography};
use fusedet::rng::SeededRng;
use fusedet::synth::image_seed;
use fusedet_cli::commands::{
    homography_name, ir_name, labels_name, vis_name, CHECKPOINT_FILE, REGISTRATION_REPORT_FILE, TRAIN_LOG_FILE,
};
use fusedet_cli::{cmd_detect, cmd_eval, cmd_register, cmd_synth, cmd_train, Overrides, PipelineConfig};
use tempfile::TempDir;

const BLANK: &str = "
synth_blob_count = 0,0
synth_ir_clutter = 0,0
synth_vis_clutter = 0,0
synth_structures = 0,0
synth_ir_noise = 0
synth_vis_noise = 0
synth_vis_texture = 0
";

fn cfg(text: &str, seed: u64, out: &Path) -> PipelineConfig {
    cfg_with(text, seed, out, Overrides::default())
}

fn cfg_with(text: &str, seed: u64, out: &Path, ov: Overrides) -> PipelineConfig {
    let ov = Overrides {
        seed: Some(seed),
        out: Some(out.to_path_buf()),
        ..ov
    };
    PipelineConfig::from_text(text, &ov).unwrap()
}

fn synth(text: &str, seed: u64, count: usize, out: &Path) {
    let mut c = cfg(text, seed, out);
    c.synth_count = count;
    cmd_synth(&c, &mut std::io::sink()).unwrap();
}

fn register(ir: &Path, vis: &Path, out: &Path) -> Vec<fusedet_cli::commands::RegistrationRow> {
    let mut c = cfg("", 1, out);
    c.ir_dir = Some(ir.to_path_buf());
    c.vis_dir = Some(vis.to_path_buf());
    cmd_register(&c, &mut std::io::sink()).unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fusedet"))
}

#[test]
fn blank_scene_has_empty_labels_and_flat_images() {
    let dir = TempDir::new().unwrap();
    synth(BLANK, 3, 2, dir.path());
    for stem in ["0000", "0001"] {
        let labels = std::fs::read_to_string(dir.path().join(labels_name(stem))).unwrap();
        assert!(labels.trim().is_empty(), "{labels:?}");
        let ir = GrayImage::read_pgm(&dir.path().join(ir_name(stem))).unwrap();
        let first = ir.pixels()[0];
        assert!(ir.pixels().iter().all(|&p| p == first));
    }
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let (a, b, c) = (TempDir::new().unwrap(), TempDir::new().unwrap(), TempDir::new().unwrap());
    synth("", 11, 4, a.path());
    synth("", 11, 4, b.path());
    synth("", 12, 4, c.path());
    assert_eq!(files(a.path()), files(b.path()));
    assert_ne!(files(a.path()), files(c.path()));
    assert_eq!(files(a.path()).len(), 16);
}

#[test]
fn synth_first_index_continues_the_sequence() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    synth("", 5, 3, a.path());
    synth("synth_first_index = 2", 5, 1, b.path());
    for name in [ir_name("0002"), labels_name("0002")] {
        assert_eq!(std::fs::read(a.path().join(&name)).unwrap(), std::fs::read(b.path().join(&name)).unwrap());
    }
}

#[test]
fn label_counts_follow_the_per_image_stream() {
    let dir = TempDir::new().unwrap();
    synth("synth_blob_count = 1,4", 21, 40, dir.path());
    let mut hist = [0usize; 5];
    for i in 0..40 {
        let n = read_labels(&dir.path().join(labels_name(&format!("{i:04}")))).unwrap().len();
        let expected = SeededRng::new(image_seed(21, i)).int_in(1, 4);
        assert_eq!(n, expected, "image {i}");
        hist[n] += 1;
    }
    assert_eq!(hist[0], 0);
    assert!(hist[1..].iter().all(|&h| h > 0), "{hist:?}");
}

#[test]
fn identical_images_register_to_identity() {
    let src = TempDir::new().unwrap();
    synth("", 4, 3, src.path());
    let same = TempDir::new().unwrap();
    for stem in ["0000", "0001", "0002"] {
        std::fs::copy(src.path().join(ir_name(stem)), same.path().join(ir_name(stem))).unwrap();
        std::fs::copy(src.path().join(ir_name(stem)), same.path().join(vis_name(stem))).unwrap();
    }
    let out = TempDir::new().unwrap();
    let rows = register(same.path(), same.path(), out.path());
    for r in rows {
        assert!(r.outcome.is_ok(), "{}", r.stem);
        let h = Homography::from_text(&std::fs::read_to_string(out.path().join(homography_name(&r.stem))).unwrap())
            .unwrap();
        let err = h.corner_transfer_error(&Homography::identity(), 64.0, 64.0).unwrap();
        assert!(err < 0.05, "{}: {err}", r.stem);
    }
}

#[test]
fn synthetic_pairs_register_to_their_true_homography() {
    let src = TempDir::new().unwrap();
    synth("", 8, 20, src.path());
    let out = TempDir::new().unwrap();
    let rows = register(src.path(), src.path(), out.path());
    let good = rows.iter().filter(|r| r.corner_error_px.is_some_and(|e| e < 1.0)).count();
    assert!(good >= 18, "{good}/20 under 1 px");
    let report = std::fs::read_to_string(out.path().join(REGISTRATION_REPORT_FILE)).unwrap();
    assert_eq!(report.lines().count(), 21);
}

#[test]
fn featureless_pair_is_reported_and_the_run_succeeds() {
    let src = TempDir::new().unwrap();
    synth(BLANK, 1, 1, src.path());
    synth("", 1, 2, &src.path().join("textured"));
    for stem in ["0001"] {
        for name in [ir_name(stem), vis_name(stem)] {
            std::fs::copy(src.path().join("textured").join(&name), src.path().join(&name)).unwrap();
        }
    }
    let out = TempDir::new().unwrap();
    let status = bin()
        .args(["register", "--seed", "1", "--ir-dir"])
        .arg(src.path())
        .arg("--vis-dir")
        .arg(src.path())
        .arg("--out")
        .arg(out.path())
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let report = std::fs::read_to_string(out.path().join(REGISTRATION_REPORT_FILE)).unwrap();
    let rows: Vec<&str> = report.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("0000,failed,"), "{}", rows[0]);
    assert!(rows[1].starts_with("0001,ok,"), "{}", rows[1]);
    assert!(!out.path().join(vis_name("0000")).exists());
    assert!(out.path().join(vis_name("0001")).exists());
}

/// A registered 12-pair dataset shared by the training tests.
fn dataset() -> &'static (PathBuf, PathBuf) {
    static DATA: OnceLock<(PathBuf, PathBuf)> = OnceLock::new();
    DATA.get_or_init(|| {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli_dataset");
        let _ = std::fs::remove_dir_all(&root);
        let (raw, reg) = (root.join("raw"), root.join("registered"));
        synth("", 31, 12, &raw);
        register(&raw, &raw, &reg);
        (raw, reg)
    })
}

fn train_arm(text: &str, ov: Overrides, out: &Path) -> fusedet::detector::TrainOutcome {
    let (raw, reg) = dataset();
    let mut c = cfg_with(&format!("epochs = 2\nbatch_size = 4\n{text}"), 2, out, ov);
    c.ir_dir = Some(raw.clone());
    c.vis_dir = Some(reg.clone());
    cmd_train(&c, &mut std::io::sink()).unwrap()
}

#[test]
fn toggles_reach_the_saved_model() {
    let cases = [
        (Overrides::default(), Modality::Fused, true),
        (
            Overrides {
                no_cbam: true,
                ..Default::default()
            },
            Modality::Fused,
            false,
        ),
        (
            Overrides {
                ir_only: true,
                ..Default::default()
            },
            Modality::Infrared,
            true,
        ),
        (
            Overrides {
                vis_only: true,
                no_cbam: true,
                ..Default::default()
            },
            Modality::Visible,
            false,
        ),
    ];
    for (ov, modality, cbam) in cases {
        let out = TempDir::new().unwrap();
        train_arm("", ov.clone(), out.path());
        let model = load_checkpoint(&out.path().join(CHECKPOINT_FILE)).unwrap().config();
        assert_eq!((model.modality, model.use_cbam), (modality, cbam), "{ov:?}");
    }
}

#[test]
fn same_seed_gives_identical_checkpoints_and_logs() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    train_arm("", Overrides::default(), a.path());
    train_arm("", Overrides::default(), b.path());
    assert_eq!(files(a.path()), files(b.path()));
    let log = std::fs::read_to_string(a.path().join(TRAIN_LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn eval_outputs_are_deterministic() {
    let (raw, reg) = dataset();
    let model = TempDir::new().unwrap();
    train_arm("", Overrides::default(), model.path());
    let run = |out: &Path| {
        let mut c = cfg("", 2, out);
        c.ir_dir = Some(raw.clone());
        c.vis_dir = Some(reg.clone());
        c.checkpoint = Some(model.path().join(CHECKPOINT_FILE));
        cmd_eval(&c, &mut std::io::sink()).unwrap()
    };
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let (ra, rb) = (run(a.path()), run(b.path()));
    assert_eq!(ra, rb);
    assert_eq!(files(a.path()), files(b.path()));
    assert!(files(a.path()).len() >= 3);
}

#[test]
fn visible_model_without_visible_images_scores_zero() {
    let (raw, _) = dataset();
    let model = TempDir::new().unwrap();
    train_arm(
        "",
        Overrides {
            vis_only: true,
            ..Default::default()
        },
        model.path(),
    );
    let empty = TempDir::new().unwrap();
    let out = TempDir::new().unwrap();
    let mut c = cfg("", 2, out.path());
    c.ir_dir = Some(raw.clone());
    c.vis_dir = Some(empty.path().to_path_buf());
    c.checkpoint = Some(model.path().join(CHECKPOINT_FILE));
    let report = cmd_eval(&c, &mut std::io::sink()).unwrap();
    assert_eq!(report.map.map, 0.0);
    assert_eq!(report.f1.peak_f1, 0.0);
}

/// An IR model overfit on a single image holding exactly one target. Plain
/// SGD: with momentum and a batch of one the features die before the
/// objectness logit separates the target cell.
fn memorized() -> &'static (PathBuf, PathBuf) {
    static MODEL: OnceLock<(PathBuf, PathBuf)> = OnceLock::new();
    MODEL.get_or_init(|| {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli_memorized");
        let _ = std::fs::remove_dir_all(&root);
        let data = root.join("data");
        synth(
            "synth_blob_count = 1,1\nsynth_ir_clutter = 0,0\nsynth_blob_radius = 4,5",
            9,
            1,
            &data,
        );
        let mut c = cfg_with(
            "epochs = 500\nbatch_size = 1\nlr0 = 0.1\nmomentum = 0",
            9,
            &root,
            Overrides {
                ir_only: true,
                ..Default::default()
            },
        );
        c.ir_dir = Some(data.clone());
        cmd_train(&c, &mut std::io::sink()).unwrap();
        (data, root.join(CHECKPOINT_FILE))
    })
}

#[test]
fn memorized_image_evaluates_to_full_map() {
    let (data, ckpt) = memorized();
    let out = TempDir::new().unwrap();
    let mut c = cfg("", 9, out.path());
    c.ir_dir = Some(data.clone());
    c.checkpoint = Some(ckpt.clone());
    let report = cmd_eval(&c, &mut std::io::sink()).unwrap();
    assert_eq!(report.map.map, 1.0);
}

#[test]
fn detect_finds_the_memorized_target_and_nothing_on_a_blank_image() {
    let (data, ckpt) = memorized();
    let mut c = cfg("", 9, Path::new("unused"));
    c.checkpoint = Some(ckpt.clone());
    let annotated = TempDir::new().unwrap();
    let ann = annotated.path().join("boxes.pgm");
    let mut printed = Vec::new();
    let dets = cmd_detect(&c, &data.join(ir_name("0000")), None, Some(&ann), &mut printed).unwrap();
    assert_eq!(dets.len(), 1, "{dets:?}");
    let truth = &read_labels(&data.join(labels_name("0000"))).unwrap()[0];
    assert!(fusedet::boxes::iou(&dets[0].bbox, &truth.bbox) >= 0.5);
    assert_eq!(String::from_utf8(printed).unwrap().lines().count(), 1);
    assert!(GrayImage::read_pgm(&ann).unwrap().pixels().contains(&1.0));

    let blank = TempDir::new().unwrap();
    synth(BLANK, 9, 1, blank.path());
    let dets = cmd_detect(&c, &blank.path().join(ir_name("0000")), None, None, &mut std::io::sink()).unwrap();
    assert!(dets.is_empty(), "{dets:?}");
}

#[test]
fn fused_detect_runs_ir_only_from_the_command_line() {
    let (raw, _) = dataset();
    let model = TempDir::new().unwrap();
    train_arm("", Overrides::default(), model.path());
    let out = bin()
        .args(["detect", "--seed", "1", "--ir-only", "--checkpoint"])
        .arg(model.path().join(CHECKPOINT_FILE))
        .arg("--ir")
        .arg(raw.join(ir_name("0000")))
        .arg("--vis")
        .arg(raw.join(vis_name("0000")))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for line in String::from_utf8(out.stdout).unwrap().lines() {
        assert_eq!(line.split_whitespace().count(), 6, "{line}");
    }
}

#[test]
fn exit_codes_distinguish_usage_data_and_divergence() {
    let missing_seed = bin().args(["synth", "--count", "1"]).output().unwrap();
    assert_eq!(missing_seed.status.code(), Some(1));

    let bad_flag = bin().args(["synth", "--seed", "1", "--bogus"]).output().unwrap();
    assert_eq!(bad_flag.status.code(), Some(1));

    let nowhere = TempDir::new().unwrap();
    let missing_data = bin()
        .args(["train", "--seed", "1", "--ir-only", "--ir-dir"])
        .arg(nowhere.path().join("absent"))
        .output()
        .unwrap();
    assert_eq!(missing_data.status.code(), Some(2));

    let (raw, _) = dataset();
    let conf = nowhere.path().join("huge_lr.conf");
    std::fs::write(&conf, "lr0 = 1e200\nepochs = 3\n").unwrap();
    let out = nowhere.path().join("out");
    let diverged = bin()
        .args(["train", "--seed", "1", "--ir-only", "--config"])
        .arg(&conf)
        .arg("--ir-dir")
        .arg(raw)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(
        diverged.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&diverged.stderr)
    );
}
