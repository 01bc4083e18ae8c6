//! Single-detector acquisition: each mask gates the scene onto one
//! photodetector, and the power reading is stored with the mask that produced
//! it.

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{parameter, shape, Error, Result};
use crate::rng::{self, stream};
use crate::scene::Scene;
use crate::slm::{self, MaskSidecar, ParticleSpec, SamplingMask};

pub const MANIFEST: &str = "manifest.toml";
pub const POWERS: &str = "powers.f64";

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Standard deviation of additive Gaussian noise relative to the
    /// fully transparent reading of the scene.
    pub sigma_rel: f64,
}

impl NoiseModel {
    pub const NONE: NoiseModel = NoiseModel { sigma_rel: 0.0 };

    pub fn new(sigma_rel: f64) -> Result<Self> {
        if !(sigma_rel >= 0.0) || !sigma_rel.is_finite() {
            return Err(parameter(format!(
                "noise sigma must be nonnegative, got {sigma_rel}"
            )));
        }
        Ok(NoiseModel { sigma_rel })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeasurementRecord {
    pub mask_id: usize,
    pub power: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementSet {
    pub records: Vec<MeasurementRecord>,
    pub masks: Vec<SamplingMask>,
    pub width: usize,
    pub height: usize,
    pub threshold: f64,
    pub noise: NoiseModel,
    pub seed: u64,
    /// Particle parameters, absent for sets built from explicit masks.
    pub particles: Option<ParticleSpec>,
}

/// Seed of record `index` in a set acquired with `master`.
pub fn record_seed(master: u64, index: usize) -> u64 {
    rng::derive(master, index as u64)
}

/// Noiseless reading: sum of scene intensity over transparent pixels,
/// accumulated in row-major order.
pub fn detector_sum(scene: &Scene, mask: &SamplingMask) -> Result<f64> {
    if scene.dims() != mask.dims() {
        let (sw, sh) = scene.dims();
        let (mw, mh) = mask.dims();
        return Err(shape(format!("scene {sw}x{sh} vs mask {mw}x{mh}")));
    }
    Ok(scene
        .intensity
        .as_slice()
        .iter()
        .zip(mask.transmit())
        .filter(|(_, &t)| t == 1)
        .map(|(v, _)| v)
        .sum())
}

pub fn measure(scene: &Scene, mask: &SamplingMask, noise: NoiseModel, seed: u64) -> Result<f64> {
    let clean = detector_sum(scene, mask)?;
    if noise.sigma_rel == 0.0 {
        return Ok(clean);
    }
    let z: f64 = StandardNormal.sample(&mut rng::rng(rng::derive(seed, stream::NOISE)));
    Ok(clean + z * noise.sigma_rel * scene.intensity.sum())
}

/// Shakes the container `samples` times. The detector sees the frame cut at
/// the particles' true rim (`spec.true_edge_gray`); the stored mask is the
/// frame cut at `threshold`.
///
/// Record `i` is fully determined by `record_seed(seed, i)`, so records can
/// be regenerated independently and evaluated in parallel.
pub fn acquire_set(
    scene: &Scene,
    spec: &ParticleSpec,
    samples: usize,
    threshold: f64,
    noise: NoiseModel,
    seed: u64,
) -> Result<MeasurementSet> {
    if samples == 0 {
        return Err(parameter("at least one sample is required"));
    }
    spec.validate()?;
    if !(0.0..=100.0).contains(&threshold) {
        return Err(parameter(format!("threshold {threshold} outside [0,100]")));
    }
    let (w, h) = scene.dims();
    let pairs = (0..samples)
        .into_par_iter()
        .map(|i| {
            let s = record_seed(seed, i);
            let placement = slm::place_particles(spec, w, h, rng::derive(s, stream::PLACEMENT))?;
            let frame = slm::render_frame(&placement, spec);
            let optical = slm::threshold_frame(&frame, spec.true_edge_gray)?;
            let power = measure(scene, &optical, noise, s)?;
            let recorded = if threshold == spec.true_edge_gray {
                optical
            } else {
                slm::threshold_frame(&frame, threshold)?
            };
            Ok((recorded, power))
        })
        .collect::<Result<Vec<_>>>()?;
    let (masks, powers): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let mut set = MeasurementSet::from_masks(masks, &powers, threshold)?;
    set.noise = noise;
    set.seed = seed;
    set.particles = Some(spec.clone());
    Ok(set)
}

impl MeasurementSet {
    /// Pairs explicit masks with readings. Every mask is tagged with
    /// `threshold`.
    pub fn from_masks(
        mut masks: Vec<SamplingMask>,
        powers: &[f64],
        threshold: f64,
    ) -> Result<Self> {
        if masks.is_empty() {
            return Err(Error::EmptySet);
        }
        if masks.len() != powers.len() {
            return Err(shape(format!(
                "{} masks but {} readings",
                masks.len(),
                powers.len()
            )));
        }
        let (width, height) = masks[0].dims();
        if let Some(m) = masks.iter().find(|m| m.dims() != (width, height)) {
            return Err(shape(format!(
                "mask {:?} differs from {width}x{height}",
                m.dims()
            )));
        }
        for m in &mut masks {
            m.threshold_used = threshold;
        }
        let records = powers
            .iter()
            .enumerate()
            .map(|(mask_id, &power)| MeasurementRecord { mask_id, power })
            .collect();
        Ok(MeasurementSet {
            records,
            masks,
            width,
            height,
            threshold,
            noise: NoiseModel::NONE,
            seed: 0,
            particles: None,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn powers(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.power).collect()
    }

    /// Masks in record order.
    pub fn ordered_masks(&self) -> Vec<&SamplingMask> {
        self.records
            .iter()
            .map(|r| &self.masks[r.mask_id])
            .collect()
    }

    /// The first `m` records with their masks.
    pub fn prefix(&self, m: usize) -> Result<MeasurementSet> {
        if m == 0 || m > self.len() {
            return Err(parameter(format!(
                "prefix of {m} records from a set of {}",
                self.len()
            )));
        }
        let masks = self.ordered_masks()[..m]
            .iter()
            .map(|&mk| mk.clone())
            .collect();
        let mut out = MeasurementSet::from_masks(masks, &self.powers()[..m], self.threshold)?;
        out.noise = self.noise;
        out.seed = self.seed;
        out.particles = self.particles.clone();
        Ok(out)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SetManifest {
    samples: usize,
    width: usize,
    height: usize,
    threshold: f64,
    noise_sigma_rel: f64,
    #[serde(with = "crate::rng::seed_string")]
    seed: u64,
    seed_derivation: String,
    particles: Option<ParticleSpec>,
}

pub fn mask_file_name(i: usize) -> String {
    format!("mask_{i:06}.pgm")
}

/// Writes `manifest.toml`, `mask_%06d.pgm` (with sidecars when particle
/// parameters are known) and `powers.f64` (little-endian f64 column).
pub fn save_set(set: &MeasurementSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = SetManifest {
        samples: set.len(),
        width: set.width,
        height: set.height,
        threshold: set.threshold,
        noise_sigma_rel: set.noise.sigma_rel,
        seed: set.seed,
        seed_derivation: "record i uses splitmix64(seed + 0x9E3779B97F4A7C15 * (i + 1))".into(),
        particles: set.particles.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(dir.join(MANIFEST), text)?;
    let mut powers = Vec::with_capacity(8 * set.len());
    for (i, mask) in set.ordered_masks().into_iter().enumerate() {
        let path = dir.join(mask_file_name(i));
        match &set.particles {
            Some(spec) => {
                let side = MaskSidecar::new(spec, record_seed(set.seed, i), set.threshold);
                slm::save_mask(&path, mask, &side)?;
            }
            None => crate::pgm::write(&path, &mask.to_graymap())?,
        }
        powers.extend_from_slice(&set.records[i].power.to_le_bytes());
    }
    fs::write(dir.join(POWERS), powers)?;
    Ok(())
}

pub fn load_set(dir: &Path) -> Result<MeasurementSet> {
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.is_file() {
        return Err(Error::Corruption(format!(
            "no {MANIFEST} in {}",
            dir.display()
        )));
    }
    let manifest: SetManifest = toml::from_str(&fs::read_to_string(&manifest_path)?)
        .map_err(|e| Error::Corruption(format!("{}: {e}", manifest_path.display())))?;
    let mask_files = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| {
            let name = e.file_name();
            let name = name.to_string_lossy();
            name.starts_with("mask_") && name.ends_with(".pgm")
        })
        .count();
    if mask_files != manifest.samples || manifest.samples == 0 {
        return Err(Error::Corruption(format!(
            "manifest declares {} samples but {mask_files} mask files are present",
            manifest.samples
        )));
    }
    let raw = fs::read(dir.join(POWERS))?;
    if raw.len() != 8 * manifest.samples {
        return Err(Error::Corruption(format!(
            "{POWERS} holds {} bytes, expected {}",
            raw.len(),
            8 * manifest.samples
        )));
    }
    let powers: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let masks = (0..manifest.samples)
        .map(|i| {
            let path = dir.join(mask_file_name(i));
            if !path.is_file() {
                return Err(Error::Corruption(format!("missing {}", path.display())));
            }
            let mask = slm::load_mask(&path, manifest.threshold)?;
            if mask.dims() != (manifest.width, manifest.height) {
                return Err(Error::Corruption(format!(
                    "{} has dims {:?}",
                    path.display(),
                    mask.dims()
                )));
            }
            Ok(mask)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut set = MeasurementSet::from_masks(masks, &powers, manifest.threshold)?;
    set.noise = NoiseModel::new(manifest.noise_sigma_rel)?;
    set.seed = manifest.seed;
    set.particles = manifest.particles;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::slm::ParticleShape;
    use proptest::prelude::*;
    use rand::Rng;

    fn scene(w: usize, h: usize, data: Vec<f64>) -> Scene {
        Scene::new(Grid::from_vec(w, h, data).unwrap(), 10.0).unwrap()
    }

    fn beads() -> ParticleSpec {
        ParticleSpec {
            shape: ParticleShape::Annulus,
            diameter_px: 6.0,
            inner_diameter_px: 2.0,
            count: 10,
            clustering: 0.2,
            edge_softness_px: 2.0,
            true_edge_gray: 60.0,
        }
    }

    /// Brute-force double loop over (x, y).
    fn oracle(scene: &Scene, mask: &SamplingMask) -> f64 {
        let mut acc = 0.0;
        for y in 0..scene.height_px() {
            for x in 0..scene.width_px() {
                if mask.get(x, y) == 1 {
                    acc += scene.intensity.get(x, y);
                }
            }
        }
        acc
    }

    #[test]
    fn measure_examples() {
        let s = scene(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let diag = SamplingMask::new(2, 2, vec![1, 0, 0, 1], 50.0).unwrap();
        assert_eq!(measure(&s, &diag, NoiseModel::NONE, 0).unwrap(), 5.0);
        assert_eq!(
            measure(&s, &SamplingMask::filled(2, 2, true), NoiseModel::NONE, 0).unwrap(),
            10.0
        );
        assert_eq!(
            measure(&s, &SamplingMask::filled(2, 2, false), NoiseModel::NONE, 0).unwrap(),
            0.0
        );
        assert!(matches!(
            measure(&s, &SamplingMask::filled(3, 2, true), NoiseModel::NONE, 0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn noise_excursions_have_zero_mean() {
        let s = scene(2, 1, vec![3.0, 1.0]);
        let mask = SamplingMask::filled(2, 1, true);
        let noise = NoiseModel::new(0.1).unwrap();
        let n = 10_000;
        let mean = (0..n)
            .map(|seed| measure(&s, &mask, noise, seed).unwrap() - 4.0)
            .sum::<f64>()
            / n as f64;
        let sigma = 0.1 * 4.0;
        assert!(
            mean.abs() <= 3.0 * sigma / (n as f64).sqrt(),
            "mean excursion {mean}"
        );
        assert_eq!(
            measure(&s, &mask, noise, 5).unwrap(),
            measure(&s, &mask, noise, 5).unwrap()
        );
    }

    #[test]
    fn acquire_small_sets() {
        let zero = scene(16, 16, vec![0.0; 256]);
        let set = acquire_set(&zero, &beads(), 1, 60.0, NoiseModel::NONE, 3).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.records[0].power, 0.0);

        let lit = crate::scene::make_rectangle(1.0, 0.6, 16, 10.0).unwrap();
        let a = acquire_set(&lit, &beads(), 20, 60.0, NoiseModel::NONE, 7).unwrap();
        let b = acquire_set(&lit, &beads(), 20, 60.0, NoiseModel::NONE, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.masks.len(), 20);
        assert!(a.masks.iter().all(|m| m.threshold_used == 60.0));
        assert!(acquire_set(&lit, &beads(), 0, 60.0, NoiseModel::NONE, 7).is_err());
        assert!(acquire_set(&lit, &beads(), 3, 160.0, NoiseModel::NONE, 7).is_err());
    }

    #[test]
    fn records_regenerate_independently() {
        let lit = crate::scene::make_rectangle(1.0, 1.0, 16, 10.0).unwrap();
        let big = acquire_set(&lit, &beads(), 12, 60.0, NoiseModel::NONE, 21).unwrap();
        let small = acquire_set(&lit, &beads(), 5, 60.0, NoiseModel::NONE, 21).unwrap();
        assert_eq!(big.prefix(5).unwrap(), small);
        // thresholding at the true rim records exactly what the detector saw
        for (mask, rec) in big.masks.iter().zip(&big.records) {
            assert_eq!(detector_sum(&lit, mask).unwrap(), rec.power);
        }
        // a higher threshold records more opaque area but the same readings
        let dark = acquire_set(&lit, &beads(), 12, 90.0, NoiseModel::NONE, 21).unwrap();
        assert_eq!(dark.powers(), big.powers());
        for (d, b) in dark.masks.iter().zip(&big.masks) {
            assert!(slm::opaque_fraction(d) >= slm::opaque_fraction(b));
        }
    }

    #[test]
    fn set_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let lit = crate::scene::make_cross(1.2, 0.4, 16, 10.0).unwrap();
        let set = acquire_set(
            &lit,
            &beads(),
            6,
            60.0,
            NoiseModel::new(0.05).unwrap(),
            u64::MAX - 3,
        )
        .unwrap();
        save_set(&set, dir.path()).unwrap();
        let back = load_set(dir.path()).unwrap();
        assert_eq!(back, set);
        for (a, b) in back.powers().iter().zip(set.powers()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(dir.path().join("mask_000005.toml").is_file());
    }

    #[test]
    fn explicit_mask_set_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let masks = vec![
            SamplingMask::new(2, 1, vec![1, 0], 0.0).unwrap(),
            SamplingMask::filled(2, 1, true),
        ];
        let set = MeasurementSet::from_masks(masks, &[0.1, 1.0 / 3.0], 50.0).unwrap();
        save_set(&set, dir.path()).unwrap();
        assert_eq!(load_set(dir.path()).unwrap(), set);
    }

    #[test]
    fn corrupt_sets_rejected() {
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(load_set(empty.path()), Err(Error::Corruption(_))));

        let dir = tempfile::tempdir().unwrap();
        let lit = crate::scene::make_rectangle(0.8, 0.8, 16, 10.0).unwrap();
        let set = acquire_set(&lit, &beads(), 10, 60.0, NoiseModel::NONE, 1).unwrap();
        save_set(&set, dir.path()).unwrap();
        fs::remove_file(dir.path().join(mask_file_name(9))).unwrap();
        assert!(matches!(load_set(dir.path()), Err(Error::Corruption(_))));

        let dir = tempfile::tempdir().unwrap();
        save_set(&set, dir.path()).unwrap();
        fs::write(dir.path().join(POWERS), [0u8; 72]).unwrap();
        assert!(matches!(load_set(dir.path()), Err(Error::Corruption(_))));
    }

    proptest! {
        #[test]
        fn matches_brute_force(seed in any::<u64>(), w in 1usize..12, h in 1usize..12) {
            let mut r = crate::rng::rng(seed);
            let s = scene(w, h, (0..w * h).map(|_| r.gen_range(0.0..10.0)).collect());
            let m = SamplingMask::new(w, h, (0..w * h).map(|_| r.gen_range(0..2)).collect(), 50.0).unwrap();
            let got = measure(&s, &m, NoiseModel::NONE, 0).unwrap();
            let want = oracle(&s, &m);
            prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
        }

        #[test]
        fn noiseless_reading_is_linear(seed in any::<u64>(), a in 0.0f64..3.0, b in 0.0f64..3.0) {
            let mut r = crate::rng::rng(seed);
            let n = 64;
            let s1: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
            let s2: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
            let m = SamplingMask::new(8, 8, (0..n).map(|_| r.gen_range(0..2)).collect(), 50.0).unwrap();
            let combo: Vec<f64> = s1.iter().zip(&s2).map(|(x, y)| a * x + b * y).collect();
            let lhs = detector_sum(&scene(8, 8, combo), &m).unwrap();
            let rhs = a * detector_sum(&scene(8, 8, s1), &m).unwrap() + b * detector_sum(&scene(8, 8, s2), &m).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
        }

        #[test]
        fn opening_pixels_never_lowers_reading(seed in any::<u64>()) {
            let mut r = crate::rng::rng(seed);
            let s = scene(6, 6, (0..36).map(|_| r.gen_range(0.0..1.0)).collect());
            let t: Vec<u8> = (0..36).map(|_| r.gen_range(0..2)).collect();
            let opened: Vec<u8> = t.iter().map(|&v| if r.gen_bool(0.3) { 1 } else { v }).collect();
            let before = detector_sum(&s, &SamplingMask::new(6, 6, t, 50.0).unwrap()).unwrap();
            let after = detector_sum(&s, &SamplingMask::new(6, 6, opened, 50.0).unwrap()).unwrap();
            prop_assert!(after >= before);
        }
    }
}
