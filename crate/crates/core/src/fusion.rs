//! Weighted fusion of infrared and visible feature maps,
//! `fused = alpha * ir + (1 - alpha) * vis`, with a single scalar `alpha`
//! per image pair derived from the relative feature energy of each stream.

use crate::error::{dim_err, Error, Result};
use crate::tensor::FeatureMap;

/// Energy sum below which both maps count as featureless.
const DEGENERATE_ENERGY: f64 = 1e-12;

/// Fusion weight, stored on the grid of multiples of 2^-53. On that grid
/// `1 - alpha` is exact, so swapping the inputs and complementing the
/// weight reproduces the fused map bit for bit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionWeight(f64);

const ALPHA_GRID: f64 = (1u64 << 53) as f64;

impl FusionWeight {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Input(format!("fusion weight {alpha} outside [0, 1]")));
        }
        Ok(Self((alpha * ALPHA_GRID).round() / ALPHA_GRID))
    }

    pub fn alpha(self) -> f64 {
        self.0
    }
}

/// Mean over channels of the per-channel spatial variance.
pub fn feature_energy(f: &FeatureMap) -> Result<f64> {
    let (c, h, w) = f.shape();
    let n = h * w;
    if c == 0 || n == 0 {
        return dim_err("feature energy of an empty map");
    }
    let mut total = 0.0;
    for ch in 0..c {
        let plane = f.plane(ch);
        let mean = plane.iter().sum::<f64>() / n as f64;
        total += plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    }
    Ok(total / c as f64)
}

/// `alpha = e_ir / (e_ir + e_vis)`, or 0.5 when both maps are flat.
pub fn compute_alpha(ir: &FeatureMap, vis: &FeatureMap) -> Result<FusionWeight> {
    if !ir.same_shape(vis) {
        return dim_err(format!(
            "fusion inputs differ in shape: {:?} vs {:?}",
            ir.shape(),
            vis.shape()
        ));
    }
    let e_ir = feature_energy(ir)?;
    let e_vis = feature_energy(vis)?;
    let sum = e_ir + e_vis;
    if sum < DEGENERATE_ENERGY {
        return FusionWeight::new(0.5);
    }
    FusionWeight::new((e_ir / sum).clamp(0.0, 1.0))
}

pub fn fuse(ir: &FeatureMap, vis: &FeatureMap, w: FusionWeight) -> Result<FeatureMap> {
    if !ir.same_shape(vis) {
        return dim_err("fusion inputs differ in shape");
    }
    let a = w.alpha();
    let (c, h, wd) = ir.shape();
    let data = ir
        .data()
        .iter()
        .zip(vis.data())
        // The clamp only absorbs rounding, keeping the result between its inputs.
        .map(|(&x, &y)| (a * x + (1.0 - a) * y).clamp(x.min(y), x.max(y)))
        .collect();
    FeatureMap::new(c, h, wd, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuseGrads {
    pub ir: FeatureMap,
    pub vis: FeatureMap,
    pub alpha: f64,
}

pub fn fuse_backward(
    ir: &FeatureMap,
    vis: &FeatureMap,
    w: FusionWeight,
    upstream: &FeatureMap,
) -> Result<FuseGrads> {
    if !ir.same_shape(vis) || !ir.same_shape(upstream) {
        return dim_err("fusion backward shape mismatch");
    }
    let a = w.alpha();
    let alpha = ir
        .data()
        .iter()
        .zip(vis.data())
        .zip(upstream.data())
        .map(|((x, y), g)| (x - y) * g)
        .sum();
    Ok(FuseGrads {
        ir: upstream.scaled(a),
        vis: upstream.scaled(1.0 - a),
        alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::tensor::{grad_check_scalar, GRAD_CHECK_EPS};

    fn rand_map(seed: u64) -> FeatureMap {
        FeatureMap::random(3, 5, 4, -1.0, 1.0, &mut SeededRng::new(seed))
    }

    #[test]
    fn alpha_examples() {
        let a = rand_map(1);
        assert_eq!(compute_alpha(&a, &a).unwrap().alpha(), 0.5);
        let flat = FeatureMap::filled(3, 5, 4, 0.3);
        assert_eq!(compute_alpha(&a, &flat).unwrap().alpha(), 1.0);
        assert_eq!(compute_alpha(&flat, &flat).unwrap().alpha(), 0.5);
    }

    #[test]
    fn alpha_matches_variance_oracle() {
        let (ir, vis) = (rand_map(2), rand_map(3));
        let energy = |f: &FeatureMap| {
            let mut tot = 0.0;
            for c in 0..3 {
                let mut s = 0.0;
                let mut s2 = 0.0;
                for h in 0..5 {
                    for w in 0..4 {
                        s += f.at(c, h, w);
                    }
                }
                let m = s / 20.0;
                for h in 0..5 {
                    for w in 0..4 {
                        s2 += (f.at(c, h, w) - m).powi(2);
                    }
                }
                tot += s2 / 20.0;
            }
            tot / 3.0
        };
        let want = energy(&ir) / (energy(&ir) + energy(&vis));
        assert!((compute_alpha(&ir, &vis).unwrap().alpha() - want).abs() < 1e-14);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = rand_map(1);
        let b = FeatureMap::zeros(3, 5, 5);
        assert!(compute_alpha(&a, &b).is_err());
        assert!(fuse(&a, &b, FusionWeight::new(0.5).unwrap()).is_err());
        assert!(FusionWeight::new(1.5).is_err());
    }

    #[test]
    fn fuse_examples() {
        let (ir, vis) = (rand_map(4), rand_map(5));
        assert_eq!(fuse(&ir, &vis, FusionWeight::new(1.0).unwrap()).unwrap(), ir);
        let neg = ir.scaled(-1.0);
        let z = fuse(&ir, &neg, FusionWeight::new(0.5).unwrap()).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let out = fuse(&ir, &vis, FusionWeight::new(0.3).unwrap()).unwrap();
        for c in 0..3 {
            for h in 0..5 {
                for w in 0..4 {
                    let want = 0.3 * ir.at(c, h, w) + 0.7 * vis.at(c, h, w);
                    assert!((out.at(c, h, w) - want).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn backward_examples() {
        let (ir, vis) = (rand_map(6), rand_map(7));
        let w = FusionWeight::new(0.4).unwrap();
        let g = fuse_backward(&ir, &vis, w, &FeatureMap::zeros(3, 5, 4)).unwrap();
        assert!(g.ir.data().iter().chain(g.vis.data()).all(|&v| v == 0.0));
        assert_eq!(g.alpha, 0.0);
        let up = rand_map(8);
        assert_eq!(fuse_backward(&ir, &ir, w, &up).unwrap().alpha, 0.0);
    }

    #[test]
    fn backward_passes_grad_check() {
        let (ir, vis, up) = (rand_map(9), rand_map(10), rand_map(11));
        let n = ir.data().len();
        let alpha = 0.35;
        let g = fuse_backward(&ir, &vis, FusionWeight::new(alpha).unwrap(), &up).unwrap();
        let mut x = ir.data().to_vec();
        x.extend_from_slice(vis.data());
        x.push(alpha);
        let mut analytic = g.ir.into_data();
        analytic.extend(g.vis.into_data());
        analytic.push(g.alpha);
        let e = grad_check_scalar(
            |p| {
                let a = p[2 * n];
                Ok((0..n)
                    .map(|i| (a * p[i] + (1.0 - a) * p[n + i]) * up.data()[i])
                    .sum())
            },
            &analytic,
            &x,
            GRAD_CHECK_EPS,
        )
        .unwrap();
        assert!(e < 1e-6, "{e}");
    }
}
