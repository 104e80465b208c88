//! Visible-to-infrared image registration: Harris corners, normalized patch
//! descriptors, ratio-test matching, RANSAC homography, least-squares
//! refinement and bilinear warping.

pub mod features;
pub mod homography;
pub mod image;
pub mod warp;

pub use features::{describe, describe_all, detect_keypoints, match_descriptors, Descriptor, Keypoint};
pub use homography::{
    estimate_homography_dlt, fit_homography, ransac_homography, refine_homography, reprojection_error, Homography,
    PointPair, RansacConfig, RansacResult, RefineReport, RefineStatus, RobustFit,
};
pub use image::{decode_pgm, GrayImage};
pub use warp::{warp, warp_with_mask};

use crate::error::{Error, RegistrationStage, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegistrationConfig {
    pub max_keypoints: usize,
    pub ratio: f64,
    pub ransac_thresh_px: f64,
    pub ransac_iters: usize,
    /// Smallest RANSAC consensus accepted. Four inliers always fit exactly,
    /// so a few more are needed before the fit says anything.
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            max_keypoints: 200,
            ratio: features::DEFAULT_RATIO,
            ransac_thresh_px: 3.0,
            ransac_iters: 2000,
            min_inliers: 6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityReport {
    pub matches: usize,
    pub inliers: usize,
    /// Root mean squared reprojection distance over the inliers, in pixels.
    pub rms_px: f64,
    pub refine_status: RefineStatus,
}

impl QualityReport {
    pub const CSV_HEADER: &'static str = "matches,inliers,rms_px,refine_status";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.matches,
            self.inliers,
            self.rms_px,
            match self.refine_status {
                RefineStatus::Converged => "converged",
                RefineStatus::MaxIterations => "max_iterations",
                RefineStatus::RankDeficient => "rank_deficient",
            }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Registration {
    /// Maps visible-image coordinates to infrared-image coordinates.
    pub homography: Homography,
    /// The visible image resampled onto the infrared pixel grid.
    pub warped: GrayImage,
    pub report: QualityReport,
}

fn stage_err(stage: RegistrationStage, reason: impl Into<String>) -> Error {
    Error::Registration {
        stage,
        reason: reason.into(),
    }
}

fn at_stage(stage: RegistrationStage) -> impl Fn(Error) -> Error {
    move |e| match e {
        e @ Error::Registration { .. } => e,
        other => stage_err(stage, other.to_string()),
    }
}

/// Aligns `vis` onto the pixel grid of `ir`.
pub fn register_pair(vis: &GrayImage, ir: &GrayImage, cfg: &RegistrationConfig) -> Result<Registration> {
    use RegistrationStage::*;
    let kp_vis = detect_keypoints(vis, cfg.max_keypoints).map_err(at_stage(Detection))?;
    let kp_ir = detect_keypoints(ir, cfg.max_keypoints).map_err(at_stage(Detection))?;
    if kp_vis.len() < 4 || kp_ir.len() < 4 {
        return Err(stage_err(
            Detection,
            format!("too few corners (visible {}, infrared {})", kp_vis.len(), kp_ir.len()),
        ));
    }
    let d_vis = describe_all(vis, &kp_vis);
    let d_ir = describe_all(ir, &kp_ir);
    if d_vis.len() < 4 || d_ir.len() < 4 {
        return Err(stage_err(
            Description,
            format!("too few describable corners (visible {}, infrared {})", d_vis.len(), d_ir.len()),
        ));
    }
    let da: Vec<Descriptor> = d_vis.iter().map(|(_, d)| d.clone()).collect();
    let db: Vec<Descriptor> = d_ir.iter().map(|(_, d)| d.clone()).collect();
    let matches = match_descriptors(&da, &db, cfg.ratio);
    if matches.len() < 4 {
        return Err(stage_err(Matching, format!("{} matches, need 4", matches.len())));
    }
    let pairs: Vec<PointPair> = matches
        .iter()
        .map(|&(i, j)| {
            let (a, b) = (&d_vis[i].0, &d_ir[j].0);
            PointPair::new((a.x, a.y), (b.x, b.y))
        })
        .collect();
    let fit = fit_homography(
        &pairs,
        &RansacConfig {
            thresh_px: cfg.ransac_thresh_px,
            iters: cfg.ransac_iters,
            seed: cfg.seed,
        },
    )
    .map_err(at_stage(Ransac))?;
    if fit.inliers.len() < cfg.min_inliers {
        return Err(stage_err(
            Ransac,
            format!("{} inliers, need {}", fit.inliers.len(), cfg.min_inliers),
        ));
    }
    let refine_status = fit.rounds.last().map_or(RefineStatus::RankDeficient, |r| r.status);
    if refine_status == RefineStatus::RankDeficient {
        log::warn!("refinement normal equations are rank deficient; keeping the previous estimate");
    }
    let inlier_pairs: Vec<PointPair> = fit.inliers.iter().map(|&i| pairs[i]).collect();
    let homography = fit.homography;
    let sse = reprojection_error(&homography, &inlier_pairs).map_err(at_stage(Refinement))?;
    let warped = warp(vis, &homography, ir.height(), ir.width()).map_err(at_stage(Warp))?;
    Ok(Registration {
        homography,
        warped,
        report: QualityReport {
            matches: matches.len(),
            inliers: inlier_pairs.len(),
            rms_px: (sse / inlier_pairs.len() as f64).sqrt(),
            refine_status,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(w: usize, h: usize) -> GrayImage {
        // Scattered rectangles of varying brightness give distinct corners.
        let mut rng = crate::rng::SeededRng::new(77);
        let rects: Vec<(f64, f64, f64, f64, f64)> = (0..14)
            .map(|_| {
                let x = rng.range(4.0, w as f64 - 16.0);
                let y = rng.range(4.0, h as f64 - 16.0);
                (x, y, x + rng.range(5.0, 12.0), y + rng.range(5.0, 12.0), rng.range(0.3, 0.9))
            })
            .collect();
        GrayImage::from_fn(w, h, |x, y| {
            let (xf, yf) = (x as f64, y as f64);
            let mut v: f64 = 0.1;
            for r in &rects {
                if xf >= r.0 && xf < r.2 && yf >= r.1 && yf < r.3 {
                    v = v.max(r.4);
                }
            }
            v
        })
    }

    #[test]
    fn identical_images_give_identity() {
        let img = textured(96, 96);
        let r = register_pair(&img, &img, &RegistrationConfig::default()).unwrap();
        assert!((r.homography.0 - Homography::identity().0).abs().max() < 1e-6);
        assert!(r.report.rms_px < 1e-6);
    }

    #[test]
    fn recovers_known_warp() {
        let ir = textured(96, 96);
        // vis is ir seen through the inverse of `truth`, so truth maps vis -> ir.
        let truth = Homography::from_rows([[1.01, 0.02, -2.0], [-0.015, 0.99, 1.5], [1e-4, 5e-5, 1.0]]);
        let vis = warp(&ir, &truth.inverse().unwrap(), 96, 96).unwrap();
        let r = register_pair(&vis, &ir, &RegistrationConfig::default()).unwrap();
        let err = r.homography.corner_transfer_error(&truth, 96.0, 96.0).unwrap();
        assert!(err < 1.0, "corner error {err}, report {:?}", r.report);
    }

    #[test]
    fn featureless_fails_at_detection() {
        let flat = GrayImage::filled(32, 32, 0.5);
        match register_pair(&flat, &flat, &RegistrationConfig::default()) {
            Err(Error::Registration { stage, .. }) => assert_eq!(stage, RegistrationStage::Detection),
            other => panic!("{other:?}"),
        }
    }
}
