//! Stochastic spatial light modulator: a container of opaque particles shaken
//! into random positions, photographed from above and thresholded into a
//! binary sampling mask.
//!
//! Gray levels follow the camera convention, 0 = black and 100 = white.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{parameter, shape, Error, Result};
use crate::grid::Grid;
use crate::pgm::{self, Graymap};
use crate::rng;

pub const WHITE: f64 = 100.0;
pub const BLACK: f64 = 0.0;

/// Default gray level of the true absorber rim; see
/// [`ParticleSpec::true_edge_gray`].
pub const DEFAULT_TRUE_EDGE_GRAY: f64 = 60.0;

/// Vertices on a granule outline.
pub const GRANULE_VERTICES: usize = 12;
/// Maximum relative radius excursion of a granule outline.
pub const GRANULE_JITTER: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParticleShape {
    /// Flat opaque disk.
    Disk,
    /// Torus-shaped bead seen from above: a dark ring.
    Annulus,
    /// Irregular sand or sugar grain.
    Granule,
}

impl ParticleShape {
    pub fn name(self) -> &'static str {
        match self {
            ParticleShape::Disk => "disk",
            ParticleShape::Annulus => "annulus",
            ParticleShape::Granule => "granule",
        }
    }
}

impl std::str::FromStr for ParticleShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disk" => Ok(ParticleShape::Disk),
            "annulus" => Ok(ParticleShape::Annulus),
            "granule" => Ok(ParticleShape::Granule),
            other => Err(parameter(format!("unknown particle shape {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleSpec {
    pub shape: ParticleShape,
    /// Outer diameter in pixels.
    pub diameter_px: f64,
    /// Hole diameter; only meaningful for [`ParticleShape::Annulus`].
    #[serde(default)]
    pub inner_diameter_px: f64,
    pub count: usize,
    /// 0 places particles uniformly, 1 draws every centre from the
    /// centre-biased Gaussian.
    pub clustering: f64,
    /// Width of the gray ramp inside each particle rim.
    pub edge_softness_px: f64,
    /// Camera gray level at which the particle really stops blocking light.
    /// The optical path sees the frame thresholded here; a recorded mask
    /// thresholded anywhere else disagrees with what the detector saw.
    #[serde(default = "default_true_edge_gray")]
    pub true_edge_gray: f64,
}

fn default_true_edge_gray() -> f64 {
    DEFAULT_TRUE_EDGE_GRAY
}

impl ParticleSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.diameter_px > 0.0) || !self.diameter_px.is_finite() {
            return Err(parameter(format!(
                "diameter must be positive, got {}",
                self.diameter_px
            )));
        }
        if self.count == 0 {
            return Err(parameter("particle count must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.clustering) {
            return Err(parameter(format!(
                "clustering must lie in [0,1], got {}",
                self.clustering
            )));
        }
        if !(self.edge_softness_px >= 0.0) || !self.edge_softness_px.is_finite() {
            return Err(parameter(format!(
                "edge softness must be nonnegative, got {}",
                self.edge_softness_px
            )));
        }
        if !(BLACK..=WHITE).contains(&self.true_edge_gray) {
            return Err(parameter(format!(
                "true edge gray {} outside [0,100]",
                self.true_edge_gray
            )));
        }
        if self.shape == ParticleShape::Annulus
            && !(self.inner_diameter_px >= 0.0 && self.inner_diameter_px < self.diameter_px)
        {
            return Err(parameter(format!(
                "annulus inner diameter {} must lie in [0, {})",
                self.inner_diameter_px, self.diameter_px
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParticlePose {
    pub x: f64,
    pub y: f64,
    pub angle: f64,
    /// Radius multipliers at [`GRANULE_VERTICES`] equally spaced angles;
    /// empty for round particles.
    pub outline: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParticlePlacement {
    pub width: usize,
    pub height: usize,
    pub poses: Vec<ParticlePose>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlmFrame {
    pub gray: Grid,
}

impl SlmFrame {
    pub fn new(gray: Grid) -> Result<Self> {
        if let Some(v) = gray
            .as_slice()
            .iter()
            .find(|v| !(BLACK..=WHITE).contains(*v))
        {
            return Err(parameter(format!("gray value {v} outside [0,100]")));
        }
        Ok(SlmFrame { gray })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.gray.dims()
    }

    /// 8-bit graymap with 100 mapped to 255.
    pub fn to_graymap(&self) -> Graymap {
        let (w, h) = self.dims();
        let pixels = self
            .gray
            .as_slice()
            .iter()
            .map(|g| (g * 2.55).round() as u8)
            .collect();
        Graymap::new(w, h, pixels)
    }
}

/// Binary transmission pattern: 1 = transparent, 0 = opaque.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMask {
    width: usize,
    height: usize,
    transmit: Vec<u8>,
    pub threshold_used: f64,
}

impl SamplingMask {
    pub fn new(
        width: usize,
        height: usize,
        transmit: Vec<u8>,
        threshold_used: f64,
    ) -> Result<Self> {
        if transmit.len() != width * height {
            return Err(shape(format!(
                "{} mask values for a {width}x{height} mask",
                transmit.len()
            )));
        }
        if transmit.iter().any(|&t| t > 1) {
            return Err(parameter("mask values must be 0 or 1"));
        }
        Ok(SamplingMask {
            width,
            height,
            transmit,
            threshold_used,
        })
    }

    pub fn filled(width: usize, height: usize, transparent: bool) -> Self {
        SamplingMask {
            width,
            height,
            transmit: vec![transparent as u8; width * height],
            threshold_used: 0.0,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn transmit(&self) -> &[u8] {
        &self.transmit
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.transmit[y * self.width + x]
    }

    pub fn to_grid(&self) -> Grid {
        Grid::from_vec(
            self.width,
            self.height,
            self.transmit.iter().map(|&t| t as f64).collect(),
        )
        .expect("mask dims are consistent")
    }

    pub fn to_graymap(&self) -> Graymap {
        Graymap::new(
            self.width,
            self.height,
            self.transmit.iter().map(|&t| t * 255).collect(),
        )
    }

    /// Reads a mask graymap; pixels at or above 128 are transparent.
    pub fn from_graymap(map: &Graymap, threshold_used: f64) -> Self {
        let transmit = map.pixels.iter().map(|&v| (v >= 128) as u8).collect();
        SamplingMask {
            width: map.width,
            height: map.height,
            transmit,
            threshold_used,
        }
    }
}

/// Keys written next to every saved mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSidecar {
    #[serde(with = "crate::rng::seed_string")]
    pub seed: u64,
    pub shape: ParticleShape,
    pub diameter_px: f64,
    pub inner_diameter_px: f64,
    pub count: usize,
    pub clustering: f64,
    pub edge_softness_px: f64,
    pub true_edge_gray: f64,
    pub threshold: f64,
}

impl MaskSidecar {
    pub fn new(spec: &ParticleSpec, seed: u64, threshold: f64) -> Self {
        MaskSidecar {
            seed,
            shape: spec.shape,
            diameter_px: spec.diameter_px,
            inner_diameter_px: spec.inner_diameter_px,
            count: spec.count,
            clustering: spec.clustering,
            edge_softness_px: spec.edge_softness_px,
            true_edge_gray: spec.true_edge_gray,
            threshold,
        }
    }
}

pub fn sidecar_path(mask_path: &Path) -> PathBuf {
    mask_path.with_extension("toml")
}

/// Writes `mask` as a P5 file plus a `.toml` sidecar with the same stem.
pub fn save_mask(path: &Path, mask: &SamplingMask, sidecar: &MaskSidecar) -> Result<()> {
    pgm::write(path, &mask.to_graymap())?;
    let text = toml::to_string(sidecar).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(sidecar_path(path), text)?;
    Ok(())
}

pub fn load_mask(path: &Path, threshold_used: f64) -> Result<SamplingMask> {
    Ok(SamplingMask::from_graymap(
        &pgm::read(path)?,
        threshold_used,
    ))
}

/// Draws particle centres from a mixture of a uniform distribution over the
/// frame and, with probability `clustering`, a centred isotropic Gaussian
/// (sigma = width / 6) truncated to the frame. Overlaps are allowed.
pub fn place_particles(
    spec: &ParticleSpec,
    frame_w: usize,
    frame_h: usize,
    seed: u64,
) -> Result<ParticlePlacement> {
    spec.validate()?;
    if frame_w == 0 || frame_h == 0 {
        return Err(parameter("frame dimensions must be positive"));
    }
    if spec.diameter_px >= frame_w.min(frame_h) as f64 {
        return Err(parameter(format!(
            "particle diameter {} px does not fit a {frame_w}x{frame_h} frame",
            spec.diameter_px
        )));
    }
    let (w, h) = (frame_w as f64, frame_h as f64);
    let mut rng = rng::rng(seed);
    let normal = Normal::new(0.0, w / 6.0).expect("finite sigma");
    let mut poses = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let (x, y) = if rng.gen::<f64>() < spec.clustering {
            loop {
                let x = w / 2.0 + normal.sample(&mut rng);
                let y = h / 2.0 + normal.sample(&mut rng);
                if (0.0..w).contains(&x) && (0.0..h).contains(&y) {
                    break (x, y);
                }
            }
        } else {
            (rng.gen_range(0.0..w), rng.gen_range(0.0..h))
        };
        let angle = rng.gen_range(0.0..TAU);
        let outline = match spec.shape {
            ParticleShape::Granule => granule_outline(&mut rng),
            _ => Vec::new(),
        };
        poses.push(ParticlePose {
            x,
            y,
            angle,
            outline,
        });
    }
    Ok(ParticlePlacement {
        width: frame_w,
        height: frame_h,
        poses,
    })
}

/// Radius multipliers `1 + 0.3 n(theta_k)` where `n` is a random sum of the
/// first three angular harmonics scaled to unit peak. Harmonics below the
/// vertex count average to zero over the vertices, so the mean radius is
/// preserved.
fn granule_outline(rng: &mut rng::Rng) -> Vec<f64> {
    let mut coeffs = [(0.0, 0.0); 3];
    for (h, c) in coeffs.iter_mut().enumerate() {
        *c = (
            rng.gen_range(0.2..1.0) / (h + 1) as f64,
            rng.gen_range(0.0..TAU),
        );
    }
    let noise: Vec<f64> = (0..GRANULE_VERTICES)
        .map(|k| {
            let theta = TAU * k as f64 / GRANULE_VERTICES as f64;
            coeffs
                .iter()
                .enumerate()
                .map(|(h, (a, phase))| a * ((h + 1) as f64 * theta + phase).cos())
                .sum()
        })
        .collect();
    let peak = noise
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    noise
        .iter()
        .map(|n| 1.0 + GRANULE_JITTER * n / peak)
        .collect()
}

/// Radius of the star-convex polygon with vertex radii `outline` along the
/// ray at angle `theta` (radians, any range).
fn polygon_radius(outline: &[f64], theta: f64) -> f64 {
    let n = outline.len();
    let step = TAU / n as f64;
    let t = theta.rem_euclid(TAU);
    let k = ((t / step) as usize).min(n - 1);
    let (r0, r1) = (outline[k], outline[(k + 1) % n]);
    let a = t - k as f64 * step;
    // ray through the origin meets the chord between the two polar vertices
    r0 * r1 * step.sin() / (r0 * a.sin() + r1 * (step - a).sin())
}

/// Distance from the point to the nearest rim, measured radially; positive
/// inside the dark region.
fn depth(spec: &ParticleSpec, pose: &ParticlePose, px: f64, py: f64) -> f64 {
    let (dx, dy) = (px - pose.x, py - pose.y);
    let d = (dx * dx + dy * dy).sqrt();
    let r = spec.diameter_px / 2.0;
    match spec.shape {
        ParticleShape::Disk => r - d,
        ParticleShape::Annulus => (d - spec.inner_diameter_px / 2.0).min(r - d),
        ParticleShape::Granule => {
            let theta = dy.atan2(dx) - pose.angle;
            r * polygon_radius(&pose.outline, theta) - d
        }
    }
}

fn gray_at_depth(depth: f64, softness: f64) -> f64 {
    if softness == 0.0 {
        if depth >= 0.0 {
            BLACK
        } else {
            WHITE
        }
    } else if depth <= 0.0 {
        WHITE
    } else if depth >= softness {
        BLACK
    } else {
        WHITE * (1.0 - depth / softness)
    }
}

/// Renders the camera's view of the container: white background, black
/// particle cores, and a linear ramp of width `edge_softness_px` inside each
/// rim. Overlapping particles combine by pointwise minimum.
pub fn render_frame(placement: &ParticlePlacement, spec: &ParticleSpec) -> SlmFrame {
    let (w, h) = (placement.width, placement.height);
    let mut gray = Grid::filled(w, h, WHITE);
    let reach = spec.diameter_px / 2.0 * (1.0 + GRANULE_JITTER) + 1.0;
    for pose in &placement.poses {
        let x0 = (pose.x - reach).floor().max(0.0) as usize;
        let y0 = (pose.y - reach).floor().max(0.0) as usize;
        let x1 = ((pose.x + reach).ceil().max(0.0) as usize).min(w);
        let y1 = ((pose.y + reach).ceil().max(0.0) as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                let g = gray_at_depth(
                    depth(spec, pose, x as f64 + 0.5, y as f64 + 0.5),
                    spec.edge_softness_px,
                );
                if g < gray.get(x, y) {
                    gray.set(x, y, g);
                }
            }
        }
    }
    SlmFrame { gray }
}

/// Pixels with gray >= `t` transmit; darker pixels are opaque.
pub fn threshold_frame(frame: &SlmFrame, t: f64) -> Result<SamplingMask> {
    if !(BLACK..=WHITE).contains(&t) {
        return Err(parameter(format!("threshold {t} outside [0,100]")));
    }
    let (w, h) = frame.dims();
    let transmit = frame
        .gray
        .as_slice()
        .iter()
        .map(|&g| (g >= t) as u8)
        .collect();
    Ok(SamplingMask {
        width: w,
        height: h,
        transmit,
        threshold_used: t,
    })
}

pub fn opaque_fraction(mask: &SamplingMask) -> f64 {
    let opaque = mask.transmit.iter().filter(|&&t| t == 0).count();
    opaque as f64 / mask.transmit.len() as f64
}
