//! Planar homography estimation: normalized DLT, seeded RANSAC and
//! Gauss-Newton / Levenberg-Marquardt refinement of the squared reprojection
//! error `sum |p' - pi(H p)|^2`, where `pi` is the perspective division.

use std::fmt::Write as _;

use nalgebra::{DMatrix, Matrix3, SMatrix, SVector, Vector3};

use crate::error::{Error, RegistrationStage, Result};
use crate::rng::SeededRng;

/// Homogeneous weights smaller than this put a point at infinity.
const W_EPS: f64 = 1e-12;

/// A correspondence: `p` in the visible image, `q` (p') in the infrared image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointPair {
    pub p: (f64, f64),
    pub q: (f64, f64),
}

impl PointPair {
    pub fn new(p: (f64, f64), q: (f64, f64)) -> Self {
        Self { p, q }
    }
}

/// 3x3 projective transform taking visible-image points to infrared-image points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(pub Matrix3<f64>);

impl Homography {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Self {
        Self(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::from_rows([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let m = &self.0;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }

    /// Scales so the bottom-right entry is one, when that entry is usable.
    pub fn normalized(&self) -> Self {
        let s = self.0[(2, 2)];
        if s.abs() > W_EPS {
            Self(self.0 / s)
        } else {
            Self(self.0 / self.0.norm())
        }
    }

    /// `pi(H (x, y, 1))`.
    pub fn apply(&self, x: f64, y: f64) -> Result<(f64, f64)> {
        let v = self.0 * Vector3::new(x, y, 1.0);
        if v.z.abs() < W_EPS || !v.iter().all(|c| c.is_finite()) {
            return Err(Error::Singular(format!("({x}, {y}) maps to infinity")));
        }
        Ok((v.x / v.z, v.y / v.z))
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.0.determinant();
        if !det.is_finite() || det.abs() < 1e-14 * self.0.norm().powi(3).max(1e-300) {
            return Err(Error::Singular(format!("homography determinant {det}")));
        }
        self.0
            .try_inverse()
            .map(|m| Self(m).normalized())
            .ok_or_else(|| Error::Singular("homography not invertible".into()))
    }

    pub fn compose(&self, other: &Homography) -> Self {
        Self(self.0 * other.0).normalized()
    }

    /// Mean distance between where `self` and `truth` send the four corners of
    /// a `width x height` image.
    pub fn corner_transfer_error(&self, truth: &Homography, width: f64, height: f64) -> Result<f64> {
        let mut acc = 0.0;
        for (x, y) in [(0.0, 0.0), (width, 0.0), (width, height), (0.0, height)] {
            let a = self.apply(x, y)?;
            let b = truth.apply(x, y)?;
            acc += ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
        }
        Ok(acc / 4.0)
    }

    /// Nine numbers, row-major, three per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for row in self.rows() {
            writeln!(s, "{} {} {}", row[0], row[1], row[2]).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let vals: Vec<f64> = text
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Format(format!("homography entry {t:?}")))
            })
            .collect::<Result<_>>()?;
        if vals.len() != 9 {
            return Err(Error::Format(format!(
                "homography file needs 9 numbers, found {}",
                vals.len()
            )));
        }
        Ok(Self(Matrix3::from_row_slice(&vals)))
    }
}

/// Sum of squared distances between each `q` and the image of its `p`.
pub fn reprojection_error(h: &Homography, pairs: &[PointPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Input("reprojection error of an empty set".into()));
    }
    let mut acc = 0.0;
    for pp in pairs {
        acc += squared_residual(h, pp)?;
    }
    Ok(acc)
}

fn squared_residual(h: &Homography, pp: &PointPair) -> Result<f64> {
    let (u, v) = h.apply(pp.p.0, pp.p.1)?;
    Ok((u - pp.q.0).powi(2) + (v - pp.q.1).powi(2))
}

/// Similarity moving the centroid to the origin with mean distance sqrt(2).
fn hartley(points: impl Iterator<Item = (f64, f64)> + Clone) -> Matrix3<f64> {
    let n = points.clone().count() as f64;
    let (sx, sy) = points.clone().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (mx, my) = (sx / n, sy / n);
    let mean_d = points
        .map(|p| ((p.0 - mx).powi(2) + (p.1 - my).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let s = if mean_d > 0.0 {
        std::f64::consts::SQRT_2 / mean_d
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0)
}

fn transform(t: &Matrix3<f64>, (x, y): (f64, f64)) -> (f64, f64) {
    // Similarities keep w = 1.
    (t[(0, 0)] * x + t[(0, 2)], t[(1, 1)] * y + t[(1, 2)])
}

/// Normalized direct linear transform.
pub fn estimate_homography_dlt(pairs: &[PointPair]) -> Result<Homography> {
    if pairs.len() < 4 {
        return Err(Error::Degenerate(format!(
            "DLT needs 4 correspondences, got {}",
            pairs.len()
        )));
    }
    let tp = hartley(pairs.iter().map(|pp| pp.p));
    let tq = hartley(pairs.iter().map(|pp| pp.q));
    let rows = (2 * pairs.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, pp) in pairs.iter().enumerate() {
        let (x, y) = transform(&tp, pp.p);
        let (u, v) = transform(&tq, pp.q);
        let r = 2 * i;
        let row0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let row1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            a[(r, c)] = row0[c];
            a[(r + 1, c)] = row1[c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Degenerate("SVD did not converge".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sv = |k: usize| svd.singular_values[order[k]];
    if !(sv(7) > 1e-10 * sv(0)) {
        return Err(Error::Degenerate(format!(
            "DLT system rank < 8 (sigma_8 / sigma_1 = {:e})",
            sv(7) / sv(0)
        )));
    }
    let null = v_t.row(order[8]);
    let hn = Matrix3::from_row_slice(&null.iter().copied().collect::<Vec<_>>());
    let tq_inv = tq
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("normalization not invertible".into()))?;
    let h = Homography(tq_inv * hn * tp).normalized();
    if !h.0.iter().all(|v| v.is_finite()) {
        return Err(Error::Degenerate("non-finite homography".into()));
    }
    Ok(h)
}

/// True when some three of the points are (nearly) collinear, measured by
/// triangle area relative to the bounding-box area.
pub fn has_collinear_triple(points: &[(f64, f64)]) -> bool {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for &(x, y) in points {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let bbox = (x1 - x0) * (y1 - y0);
    if !(bbox > 0.0) {
        return true;
    }
    let n = points.len();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                let (a, b, c) = (points[i], points[j], points[k]);
                let area = 0.5 * ((b.0 - a.0) * (c.1 - a.1) - (c.0 - a.0) * (b.1 - a.1)).abs();
                if area < 1e-6 * bbox {
                    return true;
                }
            }
        }
    }
    false
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub thresh_px: f64,
    pub iters: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            thresh_px: 3.0,
            iters: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub homography: Homography,
    /// Indices into the input, ascending.
    pub inliers: Vec<usize>,
}

fn consensus(h: &Homography, pairs: &[PointPair], thresh2: f64) -> (Vec<usize>, f64) {
    let mut inliers = Vec::new();
    let mut sse = 0.0;
    for (i, pp) in pairs.iter().enumerate() {
        if let Ok(e) = squared_residual(h, pp) {
            if e < thresh2 {
                inliers.push(i);
                sse += e;
            }
        }
    }
    (inliers, sse)
}

/// Robust fit: seeded 4-point hypotheses ranked by inlier count, then inlier
/// RMS, then sample index; the winner is refit by DLT on its inliers.
pub fn ransac_homography(pairs: &[PointPair], cfg: &RansacConfig) -> Result<RansacResult> {
    let fail = |reason: String| Error::Registration {
        stage: RegistrationStage::Ransac,
        reason,
    };
    if pairs.len() < 4 {
        return Err(fail(format!("{} correspondences, need 4", pairs.len())));
    }
    if !(cfg.thresh_px > 0.0) || cfg.iters == 0 {
        return Err(Error::Input("RANSAC needs thresh_px > 0 and iters >= 1".into()));
    }
    let thresh2 = cfg.thresh_px * cfg.thresh_px;
    let mut rng = SeededRng::new(cfg.seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..cfg.iters {
        let idx = rng.sample_distinct(pairs.len(), 4);
        let sample: Vec<PointPair> = idx.iter().map(|&i| pairs[i]).collect();
        let ps: Vec<_> = sample.iter().map(|s| s.p).collect();
        let qs: Vec<_> = sample.iter().map(|s| s.q).collect();
        if has_collinear_triple(&ps) || has_collinear_triple(&qs) {
            continue;
        }
        let Ok(h) = estimate_homography_dlt(&sample) else {
            continue;
        };
        let (inl, sse) = consensus(&h, pairs, thresh2);
        if inl.len() < 4 {
            continue;
        }
        let rms = (sse / inl.len() as f64).sqrt();
        let better = match &best {
            None => true,
            Some((b, brms)) => inl.len() > b.len() || (inl.len() == b.len() && rms < *brms),
        };
        if better {
            best = Some((inl, rms));
        }
    }
    let (inliers, _) = best.ok_or_else(|| fail("no hypothesis reached 4 inliers".into()))?;
    let subset: Vec<PointPair> = inliers.iter().map(|&i| pairs[i]).collect();
    let homography = estimate_homography_dlt(&subset).map_err(|e| fail(e.to_string()))?;
    Ok(RansacResult {
        homography,
        inliers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefineStatus {
    Converged,
    MaxIterations,
    /// Normal equations were singular; the initial estimate was returned.
    RankDeficient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineReport {
    pub homography: Homography,
    /// Objective (pixel units) at the start and after every accepted step.
    pub objective_history: Vec<f64>,
    pub status: RefineStatus,
}

pub const REFINE_MAX_ITERS: usize = 100;
pub const REFINE_REL_TOL: f64 = 1e-10;

type Vec8 = SVector<f64, 8>;
type Mat8 = SMatrix<f64, 8, 8>;

fn params_of(h: &Matrix3<f64>) -> Vec8 {
    let h = h / h[(2, 2)];
    Vec8::from_column_slice(&[
        h[(0, 0)],
        h[(0, 1)],
        h[(0, 2)],
        h[(1, 0)],
        h[(1, 1)],
        h[(1, 2)],
        h[(2, 0)],
        h[(2, 1)],
    ])
}

fn matrix_of(p: &Vec8) -> Matrix3<f64> {
    Matrix3::new(p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], 1.0)
}

/// Objective plus `J^T J` and `J^T r` in normalized coordinates.
fn normal_equations(p: &Vec8, pts: &[((f64, f64), (f64, f64))]) -> Option<(f64, Mat8, Vec8)> {
    let mut jtj = Mat8::zeros();
    let mut jtr = Vec8::zeros();
    let mut obj = 0.0;
    for &((x, y), (qx, qy)) in pts {
        let w = p[6] * x + p[7] * y + 1.0;
        if w.abs() < W_EPS {
            return None;
        }
        let u = (p[0] * x + p[1] * y + p[2]) / w;
        let v = (p[3] * x + p[4] * y + p[5]) / w;
        let (ru, rv) = (u - qx, v - qy);
        obj += ru * ru + rv * rv;
        let ju = Vec8::from_column_slice(&[x / w, y / w, 1.0 / w, 0.0, 0.0, 0.0, -u * x / w, -u * y / w]);
        let jv = Vec8::from_column_slice(&[0.0, 0.0, 0.0, x / w, y / w, 1.0 / w, -v * x / w, -v * y / w]);
        jtj += ju * ju.transpose() + jv * jv.transpose();
        jtr += ju * ru + jv * rv;
    }
    Some((obj, jtj, jtr))
}

fn objective(p: &Vec8, pts: &[((f64, f64), (f64, f64))]) -> Option<f64> {
    let mut obj = 0.0;
    for &((x, y), (qx, qy)) in pts {
        let w = p[6] * x + p[7] * y + 1.0;
        if w.abs() < W_EPS {
            return None;
        }
        let u = (p[0] * x + p[1] * y + p[2]) / w;
        let v = (p[3] * x + p[4] * y + p[5]) / w;
        obj += (u - qx).powi(2) + (v - qy).powi(2);
    }
    obj.is_finite().then_some(obj)
}

/// Minimizes the reprojection objective over the eight free entries of `H`
/// (bottom-right fixed at one). Gauss-Newton steps are tried first; a step
/// that fails to decrease the objective switches on Levenberg-Marquardt
/// damping. Only decreasing steps are accepted.
pub fn refine_homography(h0: &Homography, pairs: &[PointPair]) -> Result<RefineReport> {
    if pairs.len() < 4 {
        return Err(Error::Input(format!(
            "refinement needs 4 correspondences, got {}",
            pairs.len()
        )));
    }
    let tp = hartley(pairs.iter().map(|pp| pp.p));
    let tq = hartley(pairs.iter().map(|pp| pp.q));
    // |T'a - T'b| = s' |a - b| for the similarity T'.
    let to_pixels = 1.0 / (tq[(0, 0)] * tq[(0, 0)]);
    let pts: Vec<_> = pairs
        .iter()
        .map(|pp| (transform(&tp, pp.p), transform(&tq, pp.q)))
        .collect();
    let tp_inv = tp.try_inverse().expect("similarity is invertible");
    let tq_inv = tq.try_inverse().expect("similarity is invertible");

    let hn0 = tq * h0.0 * tp_inv;
    if hn0[(2, 2)].abs() < W_EPS {
        return Ok(RefineReport {
            homography: *h0,
            objective_history: vec![reprojection_error(h0, pairs)?],
            status: RefineStatus::RankDeficient,
        });
    }
    let mut p = params_of(&hn0);
    let Some(mut obj) = objective(&p, &pts) else {
        return Err(Error::Singular("initial homography sends a point to infinity".into()));
    };
    let mut history = vec![obj * to_pixels];
    let mut lambda = 0.0f64;
    let mut status = RefineStatus::MaxIterations;

    for _ in 0..REFINE_MAX_ITERS {
        if obj == 0.0 {
            status = RefineStatus::Converged;
            break;
        }
        let (_, jtj, jtr) = normal_equations(&p, &pts).expect("objective was finite");
        let sv = jtj.singular_values();
        let (smax, smin) = (sv.max(), sv.min());
        if !(smin > 1e-13 * smax) {
            return Ok(RefineReport {
                homography: *h0,
                objective_history: history,
                status: RefineStatus::RankDeficient,
            });
        }
        let diag_mean = jtj.diagonal().mean();
        let mut accepted = None;
        for _ in 0..30 {
            let mut a = jtj;
            for i in 0..8 {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-12 * diag_mean);
            }
            let Some(chol) = a.cholesky() else {
                lambda = (lambda * 10.0).max(1e-3);
                continue;
            };
            let step = chol.solve(&(-jtr));
            let cand = p + step;
            match objective(&cand, &pts) {
                Some(o) if o < obj => {
                    accepted = Some((cand, o));
                    break;
                }
                _ => lambda = (lambda * 10.0).max(1e-3),
            }
        }
        let Some((cand, new_obj)) = accepted else {
            status = RefineStatus::Converged;
            break;
        };
        let rel = (obj - new_obj) / obj;
        p = cand;
        obj = new_obj;
        history.push(obj * to_pixels);
        lambda = if lambda < 1e-9 { 0.0 } else { lambda / 10.0 };
        if rel < REFINE_REL_TOL {
            status = RefineStatus::Converged;
            break;
        }
    }
    let homography = Homography(tq_inv * matrix_of(&p) * tp).normalized();
    Ok(RefineReport {
        homography,
        objective_history: history,
        status,
    })
}

/// Upper bound on refine/re-select rounds in [`fit_homography`].
pub const RESELECT_MAX_ROUNDS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct RobustFit {
    pub homography: Homography,
    /// Indices into the input, ascending; the set the final round refined on.
    pub inliers: Vec<usize>,
    /// One report per refinement round, in order.
    pub rounds: Vec<RefineReport>,
}

/// RANSAC, then alternating least-squares refinement and inlier re-selection
/// under the refined model until the inlier set stops changing. The RANSAC
/// consensus comes from a noisy 4-point model; re-selecting under the refined
/// one recovers clean pairs it missed and drops strays it admitted.
pub fn fit_homography(pairs: &[PointPair], cfg: &RansacConfig) -> Result<RobustFit> {
    let ransac = ransac_homography(pairs, cfg)?;
    let thresh2 = cfg.thresh_px * cfg.thresh_px;
    let mut homography = ransac.homography;
    let mut inliers = ransac.inliers;
    let mut rounds = Vec::new();
    for _ in 0..RESELECT_MAX_ROUNDS {
        let subset: Vec<PointPair> = inliers.iter().map(|&i| pairs[i]).collect();
        let report = refine_homography(&homography, &subset).map_err(|e| Error::Registration {
            stage: RegistrationStage::Refinement,
            reason: e.to_string(),
        })?;
        homography = report.homography;
        let status = report.status;
        rounds.push(report);
        if status == RefineStatus::RankDeficient {
            break;
        }
        let (next, _) = consensus(&homography, pairs, thresh2);
        if next == inliers || next.len() < 4 {
            break;
        }
        inliers = next;
    }
    Ok(RobustFit {
        homography,
        inliers,
        rounds,
    })
}

/// Homography sending the four corners of a `width x height` frame to the
/// given displaced corners (order: top-left, top-right, bottom-right, bottom-left).
pub fn from_corner_displacements(width: f64, height: f64, disp: [(f64, f64); 4]) -> Result<Homography> {
    let corners = [(0.0, 0.0), (width, 0.0), (width, height), (0.0, height)];
    let pairs: Vec<PointPair> = corners
        .iter()
        .zip(disp.iter())
        .map(|(&c, d)| PointPair::new(c, (c.0 + d.0, c.1 + d.1)))
        .collect();
    estimate_homography_dlt(&pairs)
}

/// Random homography moving each image corner by at most `max_disp` pixels.
pub fn random_corner_homography(width: f64, height: f64, max_disp: f64, rng: &mut SeededRng) -> Homography {
    loop {
        let mut disp = [(0.0, 0.0); 4];
        for d in disp.iter_mut() {
            let r = max_disp * rng.uniform().sqrt();
            let a = std::f64::consts::TAU * rng.uniform();
            *d = (r * a.cos(), r * a.sin());
        }
        if let Ok(h) = from_corner_displacements(width, height, disp) {
            return h;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs_diff(a: &Homography, b: &Homography) -> f64 {
        (a.0 - b.0).abs().max()
    }

    fn pairs_under(h: &Homography, pts: &[(f64, f64)]) -> Vec<PointPair> {
        pts.iter().map(|&p| PointPair::new(p, h.apply(p.0, p.1).unwrap())).collect()
    }

    const SQUARE: [(f64, f64); 4] = [(10.0, 12.0), (200.0, 15.0), (190.0, 170.0), (20.0, 160.0)];

    fn known_projective() -> Homography {
        Homography::from_rows([[1.05, 0.02, 4.0], [-0.03, 0.98, -6.0], [1e-3, -2e-4, 1.0]])
    }

    #[test]
    fn dlt_identity() {
        let h = estimate_homography_dlt(&pairs_under(&Homography::identity(), &SQUARE)).unwrap();
        assert!(max_abs_diff(&h, &Homography::identity()) < 1e-10);
    }

    #[test]
    fn dlt_translation() {
        let t = Homography::translation(5.0, -3.0);
        let h = estimate_homography_dlt(&pairs_under(&t, &SQUARE)).unwrap();
        assert!(max_abs_diff(&h, &t) < 1e-8);
    }

    #[test]
    fn dlt_recovers_projective() {
        let truth = known_projective();
        let pts: Vec<(f64, f64)> = (0..8)
            .map(|i| {
                let a = i as f64 * 0.8;
                (120.0 + 90.0 * a.cos() + 3.0 * i as f64, 100.0 + 70.0 * a.sin())
            })
            .collect();
        let h = estimate_homography_dlt(&pairs_under(&truth, &pts)).unwrap();
        let rel = (h.0 - truth.0).norm() / truth.0.norm();
        assert!(rel < 1e-6, "{rel}");
    }

    #[test]
    fn dlt_rejects_degenerate() {
        let line: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 2.0 * i as f64)).collect();
        let pairs = pairs_under(&Homography::identity(), &line);
        assert!(matches!(estimate_homography_dlt(&pairs), Err(Error::Degenerate(_))));
        assert!(estimate_homography_dlt(&pairs[..3]).is_err());
    }

    #[test]
    fn dlt_similarity_invariance() {
        let truth = known_projective();
        let mut rng = SeededRng::new(3);
        let pairs: Vec<PointPair> = (0..12)
            .map(|_| {
                let p = (rng.range(0.0, 256.0), rng.range(0.0, 256.0));
                let q = truth.apply(p.0, p.1).unwrap();
                PointPair::new(p, (q.0 + 0.3 * rng.normal(), q.1 + 0.3 * rng.normal()))
            })
            .collect();
        let h = estimate_homography_dlt(&pairs).unwrap();
        let base = h.corner_transfer_error(&truth, 256.0, 256.0).unwrap();
        // Same points in a translated + scaled frame, mapped back afterwards.
        let (s, tx, ty) = (3.7, -55.0, 140.0);
        let moved: Vec<PointPair> = pairs
            .iter()
            .map(|pp| PointPair::new((s * pp.p.0 + tx, s * pp.p.1 + ty), (s * pp.q.0 + tx, s * pp.q.1 + ty)))
            .collect();
        let hm = estimate_homography_dlt(&moved).unwrap();
        let t = Homography::from_rows([[s, 0.0, tx], [0.0, s, ty], [0.0, 0.0, 1.0]]);
        let back = t.inverse().unwrap().compose(&hm).compose(&t);
        let again = back.corner_transfer_error(&truth, 256.0, 256.0).unwrap();
        assert!((base - again).abs() < 1e-8, "{base} vs {again}");
    }

    #[test]
    fn reprojection_examples() {
        let truth = known_projective();
        assert_eq!(reprojection_error(&truth, &pairs_under(&truth, &SQUARE)).unwrap(), 0.0);
        let pp = PointPair::new((1.0, 1.0), (4.0, 5.0));
        assert_eq!(reprojection_error(&Homography::identity(), &[pp]).unwrap(), 25.0);

        let mut rng = SeededRng::new(8);
        let pairs: Vec<PointPair> = SQUARE
            .iter()
            .map(|&p| {
                let q = truth.apply(p.0, p.1).unwrap();
                PointPair::new(p, (q.0 + rng.normal(), q.1 + rng.normal()))
            })
            .collect();
        let mut want = 0.0;
        let m = truth.rows();
        for pp in &pairs {
            let (x, y) = pp.p;
            let w = m[2][0] * x + m[2][1] * y + m[2][2];
            let u = (m[0][0] * x + m[0][1] * y + m[0][2]) / w;
            let v = (m[1][0] * x + m[1][1] * y + m[1][2]) / w;
            want += (u - pp.q.0).powi(2) + (v - pp.q.1).powi(2);
        }
        assert!((reprojection_error(&truth, &pairs).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn reprojection_singular() {
        let h = Homography::from_rows([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]);
        let pp = PointPair::new((0.0, 3.0), (0.0, 0.0));
        assert!(matches!(reprojection_error(&h, &[pp]), Err(Error::Singular(_))));
    }

    fn grid_points(n: usize, rng: &mut SeededRng) -> Vec<(f64, f64)> {
        (0..n).map(|_| (rng.range(0.0, 320.0), rng.range(0.0, 240.0))).collect()
    }

    #[test]
    fn ransac_all_inliers() {
        let truth = known_projective();
        let mut rng = SeededRng::new(4);
        let pairs = pairs_under(&truth, &grid_points(30, &mut rng));
        let r = ransac_homography(&pairs, &RansacConfig { seed: 1, ..Default::default() }).unwrap();
        assert_eq!(r.inliers, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn ransac_separates_outliers_and_is_deterministic() {
        let truth = known_projective();
        let mut rng = SeededRng::new(5);
        let mut pairs = pairs_under(&truth, &grid_points(70, &mut rng));
        for _ in 0..30 {
            pairs.push(PointPair::new(
                (rng.range(0.0, 320.0), rng.range(0.0, 240.0)),
                (rng.range(0.0, 320.0), rng.range(0.0, 240.0)),
            ));
        }
        let cfg = RansacConfig { seed: 9, ..Default::default() };
        let r = ransac_homography(&pairs, &cfg).unwrap();
        assert_eq!(r.inliers, (0..70).collect::<Vec<_>>());
        assert_eq!(ransac_homography(&pairs, &cfg).unwrap(), r);
    }

    #[test]
    fn fit_reaches_a_consistent_inlier_set() {
        let truth = known_projective();
        let mut rng = SeededRng::new(12);
        let mut pairs: Vec<PointPair> = pairs_under(&truth, &grid_points(40, &mut rng))
            .into_iter()
            .map(|pp| PointPair::new(pp.p, (pp.q.0 + 0.5 * rng.normal(), pp.q.1 + 0.5 * rng.normal())))
            .collect();
        for _ in 0..17 {
            pairs.push(PointPair::new(
                (rng.range(0.0, 320.0), rng.range(0.0, 240.0)),
                (rng.range(0.0, 320.0), rng.range(0.0, 240.0)),
            ));
        }
        let cfg = RansacConfig { seed: 3, ..Default::default() };
        let fit = fit_homography(&pairs, &cfg).unwrap();
        // The final set is exactly the consensus of the final model.
        let (again, _) = consensus(&fit.homography, &pairs, cfg.thresh_px * cfg.thresh_px);
        assert!(again == fit.inliers || fit.rounds.len() == RESELECT_MAX_ROUNDS);
        assert!((0..40).all(|i| fit.inliers.contains(&i)));
        for r in &fit.rounds {
            assert!(r.objective_history.windows(2).all(|w| w[1] <= w[0]));
        }
        // Never worse than refining the plain RANSAC consensus.
        let ransac = ransac_homography(&pairs, &cfg).unwrap();
        let subset: Vec<PointPair> = ransac.inliers.iter().map(|&i| pairs[i]).collect();
        let plain = refine_homography(&ransac.homography, &subset).unwrap().homography;
        let clean = &pairs[..40];
        assert!(reprojection_error(&fit.homography, clean).unwrap() <= reprojection_error(&plain, clean).unwrap() + 1e-9);
        assert_eq!(fit_homography(&pairs, &cfg).unwrap(), fit);
    }

    #[test]
    fn ransac_failure() {
        let mut rng = SeededRng::new(6);
        let pairs: Vec<PointPair> = (0..3)
            .map(|_| PointPair::new((rng.uniform(), rng.uniform()), (rng.uniform(), rng.uniform())))
            .collect();
        assert!(matches!(
            ransac_homography(&pairs, &RansacConfig::default()),
            Err(Error::Registration { stage: RegistrationStage::Ransac, .. })
        ));
    }

    #[test]
    fn refine_keeps_optimum() {
        let truth = known_projective();
        let mut rng = SeededRng::new(7);
        let pairs = pairs_under(&truth, &grid_points(20, &mut rng));
        let r = refine_homography(&truth, &pairs).unwrap();
        assert!(max_abs_diff(&r.homography, &truth) < 1e-10);
    }

    #[test]
    fn refine_recovers_perturbation() {
        let truth = known_projective();
        let mut rng = SeededRng::new(8);
        let pairs = pairs_under(&truth, &grid_points(20, &mut rng));
        let mut h0 = truth;
        h0.0[(0, 2)] += 1e-2;
        let r = refine_homography(&h0, &pairs).unwrap();
        assert!(max_abs_diff(&r.homography, &truth) < 1e-7, "{:?}", r.homography);
        assert!(r.objective_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn refine_beats_dlt_on_noisy_pairs() {
        let truth = known_projective();
        let mut rng = SeededRng::new(9);
        let pairs: Vec<PointPair> = grid_points(40, &mut rng)
            .into_iter()
            .map(|p| {
                let q = truth.apply(p.0, p.1).unwrap();
                PointPair::new(p, (q.0 + 0.5 * rng.normal(), q.1 + 0.5 * rng.normal()))
            })
            .collect();
        let dlt = estimate_homography_dlt(&pairs).unwrap();
        let r = refine_homography(&dlt, &pairs).unwrap();
        let e_dlt = reprojection_error(&dlt, &pairs).unwrap();
        let e_ref = reprojection_error(&r.homography, &pairs).unwrap();
        assert!(e_ref <= e_dlt);
        assert!(r.objective_history.windows(2).all(|w| w[1] <= w[0]));
        assert!((r.objective_history.last().unwrap() - e_ref).abs() < 1e-6 * e_ref);
    }

    #[test]
    fn refine_rank_deficient_returns_initial() {
        let line: Vec<(f64, f64)> = (0..6).map(|i| (i as f64 * 10.0, i as f64 * 5.0)).collect();
        let pairs: Vec<PointPair> = line.iter().map(|&p| PointPair::new(p, (p.0 + 1.0, p.1))).collect();
        let r = refine_homography(&Homography::identity(), &pairs).unwrap();
        assert_eq!(r.status, RefineStatus::RankDeficient);
        assert_eq!(r.homography, Homography::identity());
    }

    #[test]
    fn text_round_trip_and_errors() {
        let h = known_projective();
        assert_eq!(Homography::from_text(&h.to_text()).unwrap(), h);
        assert!(Homography::from_text("1 2 3").is_err());
        assert!(Homography::from_text("1 0 0 0 1 0 0 0 nan").is_err());
    }

    #[test]
    fn corner_homography_respects_bound() {
        let mut rng = SeededRng::new(10);
        for _ in 0..50 {
            let h = random_corner_homography(64.0, 64.0, 8.0, &mut rng);
            for (x, y) in [(0.0, 0.0), (64.0, 0.0), (64.0, 64.0), (0.0, 64.0)] {
                let (u, v) = h.apply(x, y).unwrap();
                assert!(((u - x).powi(2) + (v - y).powi(2)).sqrt() <= 8.0 + 1e-9);
            }
        }
    }

    #[test]
    fn collinear_detection() {
        assert!(has_collinear_triple(&[(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (5.0, 0.0)]));
        assert!(!has_collinear_triple(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]));
    }
}
