//! Harris corners, normalized-patch descriptors and ratio-test matching.

use crate::error::{Error, Result};

use super::image::GrayImage;

pub const HARRIS_K: f64 = 0.04;
pub const MIN_IMAGE_SIDE: usize = 16;
/// Responses below this fraction of the strongest one are discarded.
pub const RELATIVE_RESPONSE_FLOOR: f64 = 0.01;
const NMS_RADIUS: isize = 2;
/// Pixels this close to the border never become keypoints (Sobel + window reach).
const BORDER: usize = 2;

pub const PATCH_RADIUS: usize = 5;
pub const DESCRIPTOR_LEN: usize = (2 * PATCH_RADIUS + 1) * (2 * PATCH_RADIUS + 1);
pub const DEFAULT_RATIO: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub response: f64,
}

/// Mean-subtracted, unit-norm 11x11 patch (all zeros for a flat patch).
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor(pub Vec<f64>);

impl Descriptor {
    pub fn distance(&self, other: &Descriptor) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Harris response `det(M) - k tr(M)^2` with Sobel gradients and a 3x3
/// binomial window; image borders are clamped.
pub fn harris_response(img: &GrayImage) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let mut ixx = vec![0.0; w * h];
    let mut iyy = vec![0.0; w * h];
    let mut ixy = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = |dx: isize, dy: isize| img.get_clamped(x + dx, y + dy);
            let gx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            let gy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            let i = y as usize * w + x as usize;
            ixx[i] = gx * gx;
            iyy[i] = gy * gy;
            ixy[i] = gx * gy;
        }
    }
    const WIN: [[f64; 3]; 3] = [[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]];
    let smooth = |src: &[f64], x: usize, y: usize| {
        let mut acc = 0.0;
        for (dy, row) in WIN.iter().enumerate() {
            for (dx, wt) in row.iter().enumerate() {
                let sx = (x as isize + dx as isize - 1).clamp(0, w as isize - 1) as usize;
                let sy = (y as isize + dy as isize - 1).clamp(0, h as isize - 1) as usize;
                acc += wt * src[sy * w + sx];
            }
        }
        acc / 16.0
    };
    let mut r = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let a = smooth(&ixx, x, y);
            let b = smooth(&iyy, x, y);
            let c = smooth(&ixy, x, y);
            r[y * w + x] = a * b - c * c - HARRIS_K * (a + b) * (a + b);
        }
    }
    r
}

/// Strongest Harris corners after 5x5 non-maximum suppression, ordered by
/// response (descending) then `(y, x)`. Positions get a parabolic sub-pixel
/// adjustment of at most half a pixel per axis.
pub fn detect_keypoints(img: &GrayImage, max_n: usize) -> Result<Vec<Keypoint>> {
    let (w, h) = (img.width(), img.height());
    if w < MIN_IMAGE_SIDE || h < MIN_IMAGE_SIDE {
        return Err(Error::Dimension(format!(
            "keypoint detection needs at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {w}x{h}"
        )));
    }
    let r = harris_response(img);
    let peak = r.iter().copied().fold(0.0, f64::max);
    if peak <= 1e-12 {
        return Ok(Vec::new());
    }
    let floor = RELATIVE_RESPONSE_FLOOR * peak;
    let at = |x: usize, y: usize| r[y * w + x];

    let mut found = Vec::new();
    for y in BORDER..h - BORDER {
        for x in BORDER..w - BORDER {
            let v = at(x, y);
            if v <= floor {
                continue;
            }
            let mut is_max = true;
            'nbhd: for dy in -NMS_RADIUS..=NMS_RADIUS {
                for dx in -NMS_RADIUS..=NMS_RADIUS {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let nv = at(nx as usize, ny as usize);
                    // plateaus keep their first pixel in raster order
                    let earlier = dy < 0 || (dy == 0 && dx < 0);
                    if nv > v || (earlier && nv == v) {
                        is_max = false;
                        break 'nbhd;
                    }
                }
            }
            if is_max {
                let off = |a: f64, b: f64, c: f64| {
                    let den = a - 2.0 * b + c;
                    if den < 0.0 {
                        (0.5 * (a - c) / den).clamp(-0.5, 0.5)
                    } else {
                        0.0
                    }
                };
                let ox = off(at(x - 1, y), v, at(x + 1, y));
                let oy = off(at(x, y - 1), v, at(x, y + 1));
                found.push((x, y, Keypoint {
                    x: x as f64 + ox,
                    y: y as f64 + oy,
                    response: v,
                }));
            }
        }
    }
    found.sort_by(|a, b| {
        b.2.response
            .total_cmp(&a.2.response)
            .then(a.1.cmp(&b.1))
            .then(a.0.cmp(&b.0))
    });
    found.truncate(max_n);
    Ok(found.into_iter().map(|(_, _, k)| k).collect())
}

/// Descriptor of the patch centred on the rounded keypoint, or `None` when
/// the patch would leave the image.
pub fn describe(img: &GrayImage, kp: &Keypoint) -> Option<Descriptor> {
    let r = PATCH_RADIUS as isize;
    let cx = kp.x.round() as isize;
    let cy = kp.y.round() as isize;
    if cx - r < 0 || cy - r < 0 || cx + r >= img.width() as isize || cy + r >= img.height() as isize {
        return None;
    }
    let mut v = Vec::with_capacity(DESCRIPTOR_LEN);
    for y in cy - r..=cy + r {
        for x in cx - r..=cx + r {
            v.push(img.get(x as usize, y as usize));
        }
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|p| *p -= mean);
    let norm = v.iter().map(|p| p * p).sum::<f64>().sqrt();
    if norm < 1e-9 {
        v.iter_mut().for_each(|p| *p = 0.0);
    } else {
        v.iter_mut().for_each(|p| *p /= norm);
    }
    Some(Descriptor(v))
}

/// Keypoints that admit a descriptor, paired with it.
pub fn describe_all(img: &GrayImage, kps: &[Keypoint]) -> Vec<(Keypoint, Descriptor)> {
    kps.iter()
        .filter_map(|k| describe(img, k).map(|d| (*k, d)))
        .collect()
}

/// Nearest and second-nearest neighbour (index, distance) of `q` in `set`.
fn two_nearest(q: &Descriptor, set: &[Descriptor]) -> Option<((usize, f64), f64)> {
    if set.len() < 2 {
        return None;
    }
    let mut best = (usize::MAX, f64::INFINITY);
    let mut second = f64::INFINITY;
    for (j, d) in set.iter().enumerate() {
        let dist = q.distance(d);
        if dist < best.1 {
            second = best.1;
            best = (j, dist);
        } else if dist < second {
            second = dist;
        }
    }
    Some((best, second))
}

/// Ratio-test matches from `a` into `b` that are also mutual nearest neighbours.
pub fn match_descriptors(a: &[Descriptor], b: &[Descriptor], ratio: f64) -> Vec<(usize, usize)> {
    if b.len() < 2 {
        return Vec::new();
    }
    let nearest_in_a: Vec<usize> = b
        .iter()
        .map(|d| {
            let mut best = (usize::MAX, f64::INFINITY);
            for (i, q) in a.iter().enumerate() {
                let dist = d.distance(q);
                if dist < best.1 {
                    best = (i, dist);
                }
            }
            best.0
        })
        .collect();
    let mut out = Vec::new();
    for (i, q) in a.iter().enumerate() {
        if let Some(((j, d1), d2)) = two_nearest(q, b) {
            if d1 < ratio * d2 && nearest_in_a[j] == i {
                out.push((i, j));
            }
        }
    }
    out
}
