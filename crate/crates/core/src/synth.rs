//! Synthetic infrared/visible image pairs with small targets.
//!
//! A scene is laid out in infrared pixel coordinates. Targets appear in both
//! modalities: as bright Gaussian spots in infrared and as faint dark disks
//! on a textured visible background. Each modality also carries unlabeled
//! distractors the other one lacks (hot spots in infrared, dark disks in
//! visible), so only the combination identifies targets reliably. Warm
//! rectangular structures appear in both and give the registration stage
//! corners to lock onto. The visible camera sees the scene through a random
//! homography with bounded corner displacement.

use crate::boxes::GroundTruthBox;
use crate::error::{Error, Result};
use crate::registration::homography::{random_corner_homography, Homography};
use crate::registration::image::GrayImage;
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSceneSpec {
    pub image_size: usize,
    /// Inclusive range of labeled targets per image.
    pub blob_count: (usize, usize),
    /// Target radius range in pixels.
    pub blob_radius: (f64, f64),
    /// Inclusive range of infrared-only hot spots.
    pub ir_clutter: (usize, usize),
    /// Inclusive range of visible-only dark disks.
    pub vis_clutter: (usize, usize),
    /// Inclusive range of shared rectangular structures.
    pub structures: (usize, usize),
    /// Peak brightness range of infrared targets above the background.
    pub ir_peak: (f64, f64),
    /// Darkening range of visible targets against the texture.
    pub vis_contrast: (f64, f64),
    /// Amplitude of the visible background texture.
    pub vis_texture: f64,
    pub ir_noise_sigma: f64,
    pub vis_noise_sigma: f64,
    /// Largest displacement of an image corner under the visible-to-infrared map.
    pub max_corner_disp: f64,
    pub seed: u64,
}

impl SyntheticSceneSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            image_size: 64,
            blob_count: (1, 3),
            blob_radius: (2.0, 6.0),
            ir_clutter: (0, 2),
            vis_clutter: (0, 2),
            structures: (12, 16),
            ir_peak: (0.45, 0.8),
            vis_contrast: (0.2, 0.35),
            vis_texture: 0.15,
            ir_noise_sigma: 0.02,
            vis_noise_sigma: 0.02,
            max_corner_disp: 8.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [self.blob_count, self.ir_clutter, self.vis_clutter, self.structures];
        if ranges.iter().any(|(a, b)| a > b) {
            return Err(Error::Input("count range with min > max".into()));
        }
        let (r0, r1) = self.blob_radius;
        if !(r0 > 0.0 && r0 <= r1) {
            return Err(Error::Input(format!("blob radius range ({r0}, {r1})")));
        }
        if self.image_size < 32 || (self.image_size as f64) < 8.0 * r1 {
            return Err(Error::Input(format!(
                "image size {} too small for radius {r1}",
                self.image_size
            )));
        }
        let reals = [
            self.ir_peak.0,
            self.ir_peak.1,
            self.vis_contrast.0,
            self.vis_contrast.1,
            self.vis_texture,
            self.ir_noise_sigma,
            self.vis_noise_sigma,
            self.max_corner_disp,
        ];
        if reals.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Input("intensity, noise and displacement must be finite and >= 0".into()));
        }
        Ok(())
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 20_000;
const SUPERSAMPLE: usize = 4;

/// Seed of the generator that produces image `index` of a dataset.
pub fn image_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// A round object at `(x, y)` pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    /// Infrared peak or visible darkening, depending on where it is drawn.
    pub strength: f64,
}

/// An axis-aligned block split into a grid of cells, each of its own
/// material. Material `m` renders as `0.08 + 0.4 m` in infrared and
/// `0.5 + 0.45 m` in visible, so neighbouring cells keep the same contrast
/// sign and ratio in both modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct Structure {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub cols: usize,
    pub rows: usize,
    /// Row-major cell materials in [0, 1].
    pub materials: Vec<f64>,
}

impl Structure {
    fn material_at(&self, x: f64, y: f64) -> Option<f64> {
        if !(x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1) {
            return None;
        }
        let c = (((x - self.x0) / (self.x1 - self.x0)) * self.cols as f64) as usize;
        let r = (((y - self.y0) / (self.y1 - self.y0)) * self.rows as f64) as usize;
        Some(self.materials[r.min(self.rows - 1) * self.cols + c.min(self.cols - 1)])
    }

    fn distance(&self, x: f64, y: f64) -> f64 {
        let dx = (self.x0 - x).max(x - self.x1).max(0.0);
        let dy = (self.y0 - y).max(y - self.y1).max(0.0);
        (dx * dx + dy * dy).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub targets: Vec<Blob>,
    /// Visible-image strength of each target, parallel to `targets`.
    pub target_vis_contrast: Vec<f64>,
    pub ir_clutter: Vec<Blob>,
    pub vis_clutter: Vec<Blob>,
    pub structures: Vec<Structure>,
    /// Maps visible pixel coordinates to infrared pixel coordinates.
    pub homography: Homography,
    texture_seed: u64,
    noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub ir: GrayImage,
    pub vis: GrayImage,
    /// Target boxes in the infrared frame.
    pub labels: Vec<GroundTruthBox>,
    pub homography: Homography,
}

fn count(rng: &mut SeededRng, (lo, hi): (usize, usize)) -> usize {
    rng.int_in(lo, hi)
}

/// Lays out one scene. The target count is the first draw of the image's
/// generator, so it can be reproduced independently.
pub fn generate_scene(spec: &SyntheticSceneSpec, index: usize) -> Result<Scene> {
    spec.validate()?;
    let mut rng = SeededRng::new(image_seed(spec.seed, index));
    let n_targets = count(&mut rng, spec.blob_count);
    let n_ir = count(&mut rng, spec.ir_clutter);
    let n_vis = count(&mut rng, spec.vis_clutter);
    let n_struct = count(&mut rng, spec.structures);
    let size = spec.image_size as f64;

    let mut structures = Vec::with_capacity(n_struct);
    for _ in 0..n_struct {
        let cols = rng.int_in(1, 3);
        let rows = rng.int_in(1, 3);
        let w = (cols as f64 * rng.range(3.0, 6.0)).round();
        let h = (rows as f64 * rng.range(3.0, 6.0)).round();
        let x0 = rng.range(2.0, size - w - 2.0).round();
        let y0 = rng.range(2.0, size - h - 2.0).round();
        let materials = (0..cols * rows).map(|_| rng.range(0.2, 1.0)).collect();
        structures.push(Structure {
            x0,
            y0,
            x1: x0 + w,
            y1: y0 + h,
            cols,
            rows,
            materials,
        });
    }

    // Targets and distractors avoid structures and each other, and targets
    // keep to distinct detector cells.
    let cell = spec.image_size as f64 / 8.0;
    let mut placed: Vec<Blob> = Vec::new();
    let place = |rng: &mut SeededRng, placed: &mut Vec<Blob>, strength: (f64, f64), is_target: bool| -> Result<Blob> {
        for attempt in 1..=MAX_PLACEMENT_ATTEMPTS {
            let radius = rng.range(spec.blob_radius.0, spec.blob_radius.1);
            let margin = radius + 1.0;
            let x = rng.range(margin, size - 1.0 - margin);
            let y = rng.range(margin, size - 1.0 - margin);
            let strict = attempt < 2000;
            let clear_of_structures = !strict || structures.iter().all(|s| s.distance(x, y) > radius + 2.0);
            let clear_of_blobs = placed.iter().all(|b| {
                let d = ((b.x - x).powi(2) + (b.y - y).powi(2)).sqrt();
                d > b.radius + radius + if strict { 4.0 } else { 1.0 }
            });
            let own_cell = !is_target
                || placed.iter().all(|b| {
                    ((b.x + 0.5) / cell).floor() != ((x + 0.5) / cell).floor()
                        || ((b.y + 0.5) / cell).floor() != ((y + 0.5) / cell).floor()
                });
            if clear_of_structures && clear_of_blobs && own_cell {
                let b = Blob {
                    x,
                    y,
                    radius,
                    strength: rng.range(strength.0, strength.1),
                };
                placed.push(b);
                return Ok(b);
            }
        }
        Err(Error::Input(format!(
            "could not place {} objects in a {}px image",
            placed.len() + 1,
            spec.image_size
        )))
    };
    let mut targets = Vec::with_capacity(n_targets);
    let mut target_vis_contrast = Vec::with_capacity(n_targets);
    for _ in 0..n_targets {
        targets.push(place(&mut rng, &mut placed, spec.ir_peak, true)?);
        target_vis_contrast.push(rng.range(spec.vis_contrast.0, spec.vis_contrast.1));
    }
    let ir_clutter = (0..n_ir)
        .map(|_| place(&mut rng, &mut placed, spec.ir_peak, false))
        .collect::<Result<Vec<_>>>()?;
    let vis_clutter = (0..n_vis)
        .map(|_| place(&mut rng, &mut placed, spec.vis_contrast, false))
        .collect::<Result<Vec<_>>>()?;

    let homography = random_corner_homography(size, size, spec.max_corner_disp, &mut rng);
    Ok(Scene {
        targets,
        target_vis_contrast,
        ir_clutter,
        vis_clutter,
        structures,
        homography,
        texture_seed: rng.next_u64(),
        noise_seed: rng.next_u64(),
    })
}

fn hash2(seed: u64, x: i64, y: i64) -> f64 {
    let mut z = seed ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Smoothly interpolated lattice noise in [0, 1].
fn value_noise(seed: u64, x: f64, y: f64, spacing: f64) -> f64 {
    let (gx, gy) = (x / spacing, y / spacing);
    let (ix, iy) = (gx.floor(), gy.floor());
    let (fx, fy) = (gx - ix, gy - iy);
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sx, sy) = (smooth(fx), smooth(fy));
    let (ix, iy) = (ix as i64, iy as i64);
    let v00 = hash2(seed, ix, iy);
    let v10 = hash2(seed, ix + 1, iy);
    let v01 = hash2(seed, ix, iy + 1);
    let v11 = hash2(seed, ix + 1, iy + 1);
    let top = v00 + (v10 - v00) * sx;
    let bottom = v01 + (v11 - v01) * sx;
    top + (bottom - top) * sy
}

/// Two-octave texture centered on zero, roughly in [-0.5, 0.5].
fn texture(seed: u64, x: f64, y: f64) -> f64 {
    0.65 * value_noise(seed, x, y, 9.0) + 0.35 * value_noise(seed ^ 0x55, x, y, 4.0) - 0.5
}

/// Fraction of a pixel at distance `d` from a disk center covered by the disk.
fn disk_coverage(d: f64, radius: f64) -> f64 {
    (radius + 0.5 - d).clamp(0.0, 1.0)
}

fn gaussian_spot(b: &Blob, x: f64, y: f64) -> f64 {
    let sigma = b.radius / 2.0;
    let d2 = (x - b.x).powi(2) + (y - b.y).powi(2);
    b.strength * (-d2 / (2.0 * sigma * sigma)).exp()
}

fn ir_value(scene: &Scene, x: f64, y: f64) -> f64 {
    let mut v: f64 = 0.08;
    for s in &scene.structures {
        if let Some(m) = s.material_at(x, y) {
            v = 0.08 + 0.4 * m;
        }
    }
    for b in scene.targets.iter().chain(&scene.ir_clutter) {
        v += gaussian_spot(b, x, y);
    }
    v
}

fn vis_value(spec: &SyntheticSceneSpec, scene: &Scene, x: f64, y: f64) -> f64 {
    let mut v = 0.5 + spec.vis_texture * texture(scene.texture_seed, x, y);
    for s in &scene.structures {
        if let Some(m) = s.material_at(x, y) {
            v = 0.5 + 0.45 * m;
        }
    }
    let disks = scene
        .targets
        .iter()
        .zip(&scene.target_vis_contrast)
        .map(|(b, &c)| (b, c))
        .chain(scene.vis_clutter.iter().map(|b| (b, b.strength)));
    for (b, contrast) in disks {
        let d = ((x - b.x).powi(2) + (y - b.y).powi(2)).sqrt();
        v -= contrast * disk_coverage(d, b.radius);
    }
    v
}

/// Renders a scene. Infrared pixel `(x, y)` shows scene point `(x, y)`;
/// visible pixel `p` shows scene point `H p`.
pub fn render(spec: &SyntheticSceneSpec, scene: &Scene) -> Result<SyntheticPair> {
    let n = spec.image_size;
    let size = n as f64;
    let mut ir_px = Vec::with_capacity(n * n);
    let mut vis_px = Vec::with_capacity(n * n);
    let h = &scene.homography;
    // Each pixel averages a grid of samples over its footprint.
    let sub = SUPERSAMPLE as f64;
    let offsets: Vec<f64> = (0..SUPERSAMPLE).map(|i| (i as f64 + 0.5) / sub - 0.5).collect();
    for y in 0..n {
        for x in 0..n {
            let (mut ir_acc, mut vis_acc) = (0.0, 0.0);
            for &dy in &offsets {
                for &dx in &offsets {
                    let (px, py) = (x as f64 + dx, y as f64 + dy);
                    ir_acc += ir_value(scene, px, py);
                    let (sx, sy) = h.apply(px, py)?;
                    vis_acc += vis_value(spec, scene, sx, sy);
                }
            }
            ir_px.push(ir_acc / (sub * sub));
            vis_px.push(vis_acc / (sub * sub));
        }
    }
    let mut noise = SeededRng::new(scene.noise_seed);
    let mut finish = |px: Vec<f64>, sigma: f64| GrayImage::from_fn(n, n, |x, y| px[y * n + x] + sigma * noise.normal());
    let ir = finish(ir_px, spec.ir_noise_sigma);
    let vis = finish(vis_px, spec.vis_noise_sigma);
    let labels = scene
        .targets
        .iter()
        .map(|b| {
            // Pixel `x` covers [x - 0.5, x + 0.5]; normalized = (x + 0.5) / size.
            let x0 = ((b.x - b.radius + 0.5) / size).max(0.0);
            let x1 = ((b.x + b.radius + 0.5) / size).min(1.0);
            let y0 = ((b.y - b.radius + 0.5) / size).max(0.0);
            let y1 = ((b.y + b.radius + 0.5) / size).min(1.0);
            GroundTruthBox::new(0, 0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0)
        })
        .collect();
    Ok(SyntheticPair {
        ir,
        vis,
        labels,
        homography: *h,
    })
}

pub fn generate_pair(spec: &SyntheticSceneSpec, index: usize) -> Result<SyntheticPair> {
    render(spec, &generate_scene(spec, index)?)
}

pub fn generate_dataset(spec: &SyntheticSceneSpec, n: usize) -> Result<Vec<SyntheticPair>> {
    (0..n).map(|i| generate_pair(spec, i)).collect()
}
