use super::homography::Homography;
use super::image::GrayImage;
use crate::error::{Error, Result};

/// Coordinates this close to an integer are snapped onto it, so lattice
/// shifts reproduce source pixels exactly.
const SNAP: f64 = 1e-9;

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

/// Bilinear sample at `(x, y)`; `None` outside `[0, w-1] x [0, h-1]`.
pub fn sample_bilinear(img: &GrayImage, x: f64, y: f64) -> Option<f64> {
    let (w, h) = (img.width(), img.height());
    let (x, y) = (snap(x), snap(y));
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let top = if fx == 0.0 {
        img.get(x0, y0)
    } else {
        img.get(x0, y0) * (1.0 - fx) + img.get(x1, y0) * fx
    };
    if fy == 0.0 {
        return Some(top);
    }
    let bottom = if fx == 0.0 {
        img.get(x0, y1)
    } else {
        img.get(x0, y1) * (1.0 - fx) + img.get(x1, y1) * fx
    };
    Some(top * (1.0 - fy) + bottom * fy)
}

/// Resamples `img` into the frame `h` maps it to: output pixel `q` takes the
/// source value at `h^-1 q`, or 0 when that falls outside the source.
pub fn warp(img: &GrayImage, h: &Homography, out_height: usize, out_width: usize) -> Result<GrayImage> {
    warp_with_mask(img, h, out_height, out_width).map(|(out, _)| out)
}

/// As [`warp`], also reporting which output pixels had a source sample.
pub fn warp_with_mask(
    img: &GrayImage,
    h: &Homography,
    out_height: usize,
    out_width: usize,
) -> Result<(GrayImage, Vec<bool>)> {
    if out_height == 0 || out_width == 0 {
        return Err(Error::Dimension("warp output must be non-empty".into()));
    }
    let inv = h.inverse()?;
    let m = inv.0;
    let mut pixels = vec![0.0; out_height * out_width];
    let mut mask = vec![false; out_height * out_width];
    for y in 0..out_height {
        for x in 0..out_width {
            let (xf, yf) = (x as f64, y as f64);
            let w = m[(2, 0)] * xf + m[(2, 1)] * yf + m[(2, 2)];
            if w.abs() < 1e-12 {
                continue;
            }
            let sx = (m[(0, 0)] * xf + m[(0, 1)] * yf + m[(0, 2)]) / w;
            let sy = (m[(1, 0)] * xf + m[(1, 1)] * yf + m[(1, 2)]) / w;
            if let Some(v) = sample_bilinear(img, sx, sy) {
                pixels[y * out_width + x] = v;
                mask[y * out_width + x] = true;
            }
        }
    }
    Ok((GrayImage::new(out_width, out_height, pixels)?, mask))
}
