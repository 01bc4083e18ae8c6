//! Experiment orchestration: flat TOML configs, the threshold / sample-count /
//! particle-size / repeatability sweeps, composites, and the one-shot full
//! run. Every random choice flows from the configured seed; no wall-clock
//! time or ambient entropy is read.
//!
//! Sweep cells write into private subdirectories; a failing cell leaves a
//! `FAILED` marker and the sweep continues.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{parameter, shape, Error, Result};
use crate::grid::Grid;
use crate::measurement::{self, MeasurementSet, NoiseModel};
use crate::resolution::{self, CutoffEstimate, QualityMetrics, RadialSpectrum};
use crate::rng::{self, stream};
use crate::scene::{self, Scene};
use crate::slm::{ParticleShape, ParticleSpec};
use crate::tv::{self, ReconResult, TvConfig, TvVariant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneKind {
    Rectangle,
    Cross,
    Bitmap,
}

/// Flat key-value experiment description. Only `seed` is mandatory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(serialize_with = "ser_seed", deserialize_with = "de_seed")]
    pub seed: u64,
    #[serde(default = "defaults::out")]
    pub out: PathBuf,

    #[serde(default = "defaults::scene")]
    pub scene: SceneKind,
    #[serde(default = "defaults::rect_width_mm")]
    pub rect_width_mm: f64,
    #[serde(default = "defaults::rect_height_mm")]
    pub rect_height_mm: f64,
    #[serde(default = "defaults::cross_outer_mm")]
    pub cross_outer_mm: f64,
    #[serde(default = "defaults::cross_arm_mm")]
    pub cross_arm_mm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bitmap: Option<PathBuf>,
    #[serde(default = "defaults::canvas_px")]
    pub canvas_px: usize,
    #[serde(default = "defaults::px_per_mm")]
    pub px_per_mm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub illumination_fwhm_mm: Option<f64>,

    #[serde(default = "defaults::shape")]
    pub shape: ParticleShape,
    #[serde(default = "defaults::diameter_px")]
    pub diameter_px: f64,
    #[serde(default = "defaults::inner_diameter_px")]
    pub inner_diameter_px: f64,
    #[serde(default = "defaults::count")]
    pub count: usize,
    #[serde(default = "defaults::clustering")]
    pub clustering: f64,
    #[serde(default = "defaults::edge_softness_px")]
    pub edge_softness_px: f64,
    #[serde(default = "defaults::true_edge_gray")]
    pub true_edge_gray: f64,

    /// Threshold for every run except the threshold sweep.
    #[serde(default = "defaults::threshold")]
    pub threshold: f64,
    /// Sample count for every run except the sample sweep.
    #[serde(default = "defaults::fixed_samples")]
    pub fixed_samples: usize,
    #[serde(default = "defaults::noise_sigma_rel")]
    pub noise_sigma_rel: f64,

    #[serde(default = "defaults::samples")]
    pub samples: Vec<usize>,
    /// Size of the master set the sample sweep draws prefixes from;
    /// defaults to the largest entry of `samples`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub master_samples: Option<usize>,
    #[serde(default = "defaults::thresholds")]
    pub thresholds: Vec<f64>,
    #[serde(default = "defaults::shapes")]
    pub shapes: Vec<ParticleShape>,
    #[serde(default = "defaults::sizes")]
    pub sizes: Vec<f64>,
    #[serde(default = "defaults::n_runs")]
    pub n_runs: usize,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    #[serde(default = "defaults::variant")]
    pub variant: TvVariant,
    #[serde(default = "defaults::max_outer_iters")]
    pub max_outer_iters: usize,
    #[serde(default = "defaults::inner_cg_iters")]
    pub inner_cg_iters: usize,
    #[serde(default = "defaults::rel_tol")]
    pub rel_tol: f64,
    #[serde(default = "defaults::yes")]
    pub nonneg: bool,
    #[serde(default = "defaults::yes")]
    pub center_rows: bool,

    #[serde(default = "defaults::floor_margin")]
    pub floor_margin: f64,
}

mod defaults {
    use super::*;

    pub fn out() -> PathBuf {
        PathBuf::from("out")
    }
    pub fn scene() -> SceneKind {
        SceneKind::Rectangle
    }
    pub fn rect_width_mm() -> f64 {
        3.0
    }
    pub fn rect_height_mm() -> f64 {
        5.0
    }
    pub fn cross_outer_mm() -> f64 {
        6.0
    }
    pub fn cross_arm_mm() -> f64 {
        1.0
    }
    pub fn canvas_px() -> usize {
        64
    }
    pub fn px_per_mm() -> f64 {
        scene::DEFAULT_PX_PER_MM
    }
    pub fn shape() -> ParticleShape {
        ParticleShape::Annulus
    }
    pub fn diameter_px() -> f64 {
        10.0
    }
    pub fn inner_diameter_px() -> f64 {
        3.0
    }
    pub fn count() -> usize {
        60
    }
    pub fn clustering() -> f64 {
        0.2
    }
    pub fn edge_softness_px() -> f64 {
        2.0
    }
    pub fn true_edge_gray() -> f64 {
        crate::slm::DEFAULT_TRUE_EDGE_GRAY
    }
    pub fn threshold() -> f64 {
        60.0
    }
    pub fn fixed_samples() -> usize {
        600
    }
    pub fn noise_sigma_rel() -> f64 {
        0.0
    }
    pub fn samples() -> Vec<usize> {
        vec![1000, 750, 500, 250, 100, 50]
    }
    pub fn thresholds() -> Vec<f64> {
        vec![90.0, 60.0, 30.0]
    }
    pub fn shapes() -> Vec<ParticleShape> {
        vec![ParticleShape::Granule, ParticleShape::Annulus]
    }
    pub fn sizes() -> Vec<f64> {
        vec![8.0, 12.0, 16.0, 20.0]
    }
    pub fn n_runs() -> usize {
        4
    }
    pub fn beta() -> f64 {
        32.0
    }
    pub fn variant() -> TvVariant {
        TvVariant::Isotropic
    }
    pub fn max_outer_iters() -> usize {
        300
    }
    pub fn inner_cg_iters() -> usize {
        8
    }
    pub fn rel_tol() -> f64 {
        1e-4
    }
    pub fn yes() -> bool {
        true
    }
    pub fn floor_margin() -> f64 {
        resolution::DEFAULT_FLOOR_MARGIN
    }
}

// Seeds above i64::MAX do not fit a TOML integer; they round-trip as strings.
fn ser_seed<S: Serializer>(seed: &u64, s: S) -> std::result::Result<S::Ok, S::Error> {
    match i64::try_from(*seed) {
        Ok(v) => s.serialize_i64(v),
        Err(_) => s.serialize_str(&seed.to_string()),
    }
}

fn de_seed<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<u64, D::Error> {
    use serde::de::Error as _;
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Seed {
        Int(i64),
        Text(String),
    }
    match Seed::deserialize(d)? {
        Seed::Int(v) => u64::try_from(v).map_err(|_| D::Error::custom("seed must be nonnegative")),
        Seed::Text(t) => t
            .parse()
            .map_err(|_| D::Error::custom(format!("seed {t:?} is not a u64"))),
    }
}

impl ExperimentConfig {
    /// Defaults everywhere except the seed.
    pub fn with_seed(seed: u64) -> Self {
        toml::from_str(&format!("seed = \"{seed}\"")).expect("defaults parse")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let nonempty = |name: &str, len: usize| {
            if len == 0 {
                Err(Error::Config(format!("`{name}` must not be empty")))
            } else {
                Ok(())
            }
        };
        nonempty("samples", self.samples.len())?;
        nonempty("thresholds", self.thresholds.len())?;
        nonempty("shapes", self.shapes.len())?;
        nonempty("sizes", self.sizes.len())?;
        if self.samples.contains(&0) || self.fixed_samples == 0 {
            return Err(Error::Config("sample counts must be at least 1".into()));
        }
        if self.scene == SceneKind::Bitmap && self.bitmap.is_none() {
            return Err(Error::Config(
                "scene = \"bitmap\" needs a `bitmap` path".into(),
            ));
        }
        self.particle_spec().validate()?;
        self.solver().validate()?;
        NoiseModel::new(self.noise_sigma_rel)?;
        Ok(())
    }

    pub fn particle_spec(&self) -> ParticleSpec {
        ParticleSpec {
            shape: self.shape,
            diameter_px: self.diameter_px,
            inner_diameter_px: self.inner_diameter_px,
            count: self.count,
            clustering: self.clustering,
            edge_softness_px: self.edge_softness_px,
            true_edge_gray: self.true_edge_gray,
        }
    }

    /// Particle spec at another diameter. Count scales with the inverse
    /// area and the hole scales with the diameter, so nominal coverage stays
    /// fixed.
    pub fn particle_spec_sized(&self, diameter_px: f64) -> ParticleSpec {
        let ratio = diameter_px / self.diameter_px;
        ParticleSpec {
            diameter_px,
            inner_diameter_px: self.inner_diameter_px * ratio,
            count: ((self.count as f64 / (ratio * ratio)).round() as usize).max(1),
            ..self.particle_spec()
        }
    }

    pub fn solver(&self) -> TvConfig {
        TvConfig {
            mu: self.mu,
            beta: self.beta,
            variant: self.variant,
            max_outer_iters: self.max_outer_iters,
            inner_cg_iters: self.inner_cg_iters,
            rel_tol: self.rel_tol,
            nonneg: self.nonneg,
            center_rows: self.center_rows,
        }
    }

    pub fn noise(&self) -> NoiseModel {
        NoiseModel {
            sigma_rel: self.noise_sigma_rel,
        }
    }

    pub fn build_scene(&self) -> Result<Scene> {
        let base = match self.scene {
            SceneKind::Rectangle => scene::make_rectangle(
                self.rect_width_mm,
                self.rect_height_mm,
                self.canvas_px,
                self.px_per_mm,
            )?,
            SceneKind::Cross => scene::make_cross(
                self.cross_outer_mm,
                self.cross_arm_mm,
                self.canvas_px,
                self.px_per_mm,
            )?,
            SceneKind::Bitmap => {
                let path = self
                    .bitmap
                    .as_ref()
                    .ok_or_else(|| Error::Config("missing `bitmap`".into()))?;
                scene::load_mask_bitmap(path, self.px_per_mm)?
            }
        };
        match self.illumination_fwhm_mm {
            Some(fwhm) => scene::apply_gaussian_illumination(&base, fwhm),
            None => Ok(base),
        }
    }
}

/// Everything computed for one acquisition + reconstruction.
#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub recon: ReconResult,
    pub quality: QualityMetrics,
    pub spectrum: RadialSpectrum,
    /// `None` when the spectrum has no steep segment.
    pub cutoff: Option<CutoffEstimate>,
}

#[derive(Debug)]
pub struct Cell<K> {
    pub key: K,
    pub outcome: Result<CellOutcome>,
}

impl<K> Cell<K> {
    pub fn ok(&self) -> Option<&CellOutcome> {
        self.outcome.as_ref().ok()
    }
}

fn analyse(reference: &Scene, recon: ReconResult, margin: f64) -> Result<CellOutcome> {
    let quality = resolution::quality(&reference.intensity, &recon.image)?;
    let spectrum = resolution::radial_spectrum(&recon.image)?;
    let cutoff = resolution::cutoff_slope_with_margin(&spectrum, margin).ok();
    Ok(CellOutcome {
        recon,
        quality,
        spectrum,
        cutoff,
    })
}

fn reconstruct_and_analyse(
    cfg: &ExperimentConfig,
    reference: &Scene,
    set: &MeasurementSet,
) -> Result<CellOutcome> {
    let recon = tv::solve_tv(set, &cfg.solver()).map_err(|e| e.in_stage("reconstruct"))?;
    analyse(reference, recon, cfg.floor_margin).map_err(|e| e.in_stage("analyze"))
}

fn run_cell(
    cfg: &ExperimentConfig,
    reference: &Scene,
    spec: &ParticleSpec,
    samples: usize,
    threshold: f64,
    seed: u64,
) -> Result<CellOutcome> {
    let set = measurement::acquire_set(reference, spec, samples, threshold, cfg.noise(), seed)
        .map_err(|e| e.in_stage("acquire"))?;
    reconstruct_and_analyse(cfg, reference, &set)
}

fn write_cell(dir: &Path, outcome: &Result<CellOutcome>) -> Result<()> {
    fs::create_dir_all(dir)?;
    match outcome {
        Ok(cell) => {
            tv::save_recon(&cell.recon, &dir.join("recon.pgm"))?;
            resolution::write_spectrum_csv(
                &dir.join("spectrum.csv"),
                &cell.spectrum,
                None,
                cell.cutoff.as_ref(),
            )?;
            fs::write(dir.join("quality.toml"), quality_toml(&cell.quality))?;
            let stale = dir.join("FAILED");
            if stale.exists() {
                fs::remove_file(stale)?;
            }
        }
        Err(e) => fs::write(dir.join("FAILED"), format!("{e}\n"))?,
    }
    Ok(())
}

fn quality_toml(q: &QualityMetrics) -> String {
    format!(
        "rel_l2_error = {:?}\npsnr_db = {:?}\ngain = {:?}\noffset = {:?}\n",
        q.rel_l2_error, q.psnr_db, q.gain, q.offset
    )
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |v| format!("{v:?}"))
}

fn write_manifest(dir: &Path, cfg: &ExperimentConfig, kind: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let text = format!("# {kind}\n{}", cfg.to_toml());
    fs::write(dir.join("manifest.toml"), text)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdKey {
    pub shape: ParticleShape,
    pub threshold: f64,
}

/// Every shape in `cfg.shapes` at every level in `cfg.thresholds`. All cells
/// share the master seed, so for a given shape the particle frames are
/// identical and only the threshold differs.
pub fn run_threshold_sweep(
    cfg: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<Vec<Cell<ThresholdKey>>> {
    cfg.validate()?;
    if let Some(t) = cfg.thresholds.iter().find(|t| !(0.0..=100.0).contains(*t)) {
        return Err(parameter(format!("threshold {t} outside [0,100]")));
    }
    let reference = cfg.build_scene().map_err(|e| e.in_stage("scene"))?;
    let keys: Vec<ThresholdKey> = cfg
        .shapes
        .iter()
        .flat_map(|&shape| {
            cfg.thresholds
                .iter()
                .map(move |&threshold| ThresholdKey { shape, threshold })
        })
        .collect();
    let cells: Vec<Cell<ThresholdKey>> = keys
        .into_par_iter()
        .map(|key| {
            let spec = ParticleSpec {
                shape: key.shape,
                ..cfg.particle_spec()
            };
            let outcome = run_cell(
                cfg,
                &reference,
                &spec,
                cfg.fixed_samples,
                key.threshold,
                cfg.seed,
            );
            Cell { key, outcome }
        })
        .collect();
    if let Some(dir) = out {
        write_manifest(dir, cfg, "threshold sweep")?;
        let mut summary = String::from("shape,threshold,rel_l2_error,psnr_db,status\n");
        for c in &cells {
            write_cell(
                &dir.join(format!("{}_t{}", c.key.shape.name(), c.key.threshold)),
                &c.outcome,
            )?;
            let q = c.ok().map(|o| o.quality);
            summary.push_str(&format!(
                "{},{},{},{},{}\n",
                c.key.shape.name(),
                c.key.threshold,
                fmt_opt(q.map(|q| q.rel_l2_error)),
                fmt_opt(q.map(|q| q.psnr_db)),
                if q.is_some() { "ok" } else { "failed" }
            ));
        }
        fs::write(dir.join("summary.csv"), summary)?;
    }
    Ok(cells)
}

/// Reconstructs from nested prefixes of one master measurement set.
pub fn run_sample_sweep(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<Cell<usize>>> {
    cfg.validate()?;
    let largest = *cfg.samples.iter().max().expect("validated non-empty");
    let master_size = cfg.master_samples.unwrap_or(largest);
    if largest > master_size {
        return Err(parameter(format!(
            "{largest} samples requested from a master set of {master_size}"
        )));
    }
    let reference = cfg.build_scene().map_err(|e| e.in_stage("scene"))?;
    let master = measurement::acquire_set(
        &reference,
        &cfg.particle_spec(),
        master_size,
        cfg.threshold,
        cfg.noise(),
        cfg.seed,
    )
    .map_err(|e| e.in_stage("acquire"))?;
    let cells: Vec<Cell<usize>> = cfg
        .samples
        .par_iter()
        .map(|&m| {
            let outcome = master
                .prefix(m)
                .and_then(|set| reconstruct_and_analyse(cfg, &reference, &set));
            Cell { key: m, outcome }
        })
        .collect();
    if let Some(dir) = out {
        write_manifest(dir, cfg, "sample sweep")?;
        measurement::save_set(&master, &dir.join("master_set"))?;
        let mut summary = String::from("samples,rel_l2_error,psnr_db,cutoff_radius,slope,status\n");
        for c in &cells {
            write_cell(&dir.join(format!("m{:05}", c.key)), &c.outcome)?;
            let ok = c.ok();
            summary.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.key,
                fmt_opt(ok.map(|o| o.quality.rel_l2_error)),
                fmt_opt(ok.map(|o| o.quality.psnr_db)),
                fmt_opt(ok.and_then(|o| o.cutoff.as_ref()).map(|c| c.cutoff_radius)),
                fmt_opt(ok.and_then(|o| o.cutoff.as_ref()).map(|c| c.slope)),
                if ok.is_some() { "ok" } else { "failed" }
            ));
        }
        fs::write(dir.join("summary.csv"), summary)?;
    }
    Ok(cells)
}

/// One reconstruction per particle diameter at `cfg.fixed_samples`, with
/// coverage held fixed (see [`ExperimentConfig::particle_spec_sized`]).
pub fn run_particle_size_sweep(
    cfg: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<Vec<Cell<f64>>> {
    cfg.validate()?;
    if cfg.sizes.len() < 2 {
        return Err(parameter("a size sweep needs at least two diameters"));
    }
    let reference = cfg.build_scene().map_err(|e| e.in_stage("scene"))?;
    let cells: Vec<Cell<f64>> = cfg
        .sizes
        .par_iter()
        .map(|&d| {
            let spec = cfg.particle_spec_sized(d);
            let outcome = run_cell(
                cfg,
                &reference,
                &spec,
                cfg.fixed_samples,
                cfg.threshold,
                cfg.seed,
            );
            Cell { key: d, outcome }
        })
        .collect();
    if let Some(dir) = out {
        write_manifest(dir, cfg, "particle size sweep")?;
        let mut rows: Vec<(f64, Option<&CutoffEstimate>, Option<f64>)> = cells
            .iter()
            .map(|c| {
                (
                    c.key,
                    c.ok().and_then(|o| o.cutoff.as_ref()),
                    c.ok().map(|o| o.quality.rel_l2_error),
                )
            })
            .collect();
        for c in &cells {
            write_cell(&dir.join(format!("d{}", c.key)), &c.outcome)?;
        }
        // highest cutoff (best resolution) first
        rows.sort_by(|a, b| {
            let ca = a.1.map_or(f64::NEG_INFINITY, |c| c.cutoff_radius);
            let cb = b.1.map_or(f64::NEG_INFINITY, |c| c.cutoff_radius);
            cb.total_cmp(&ca)
        });
        let mut summary =
            String::from("diameter_px,cutoff_radius,slope,noise_floor,rel_l2_error\n");
        for (d, c, err) in rows {
            summary.push_str(&format!(
                "{d},{},{},{},{}\n",
                fmt_opt(c.map(|c| c.cutoff_radius)),
                fmt_opt(c.map(|c| c.slope)),
                fmt_opt(c.map(|c| c.noise_floor)),
                fmt_opt(err)
            ));
        }
        fs::write(dir.join("summary.csv"), summary)?;
    }
    Ok(cells)
}

#[derive(Debug)]
pub struct Repeatability {
    pub runs: Vec<Cell<u64>>,
    pub mean: RadialSpectrum,
    pub std: Vec<f64>,
    /// Share of (run, bin) pairs within two standard deviations of the mean.
    pub fraction_within_2std: f64,
}

/// Seed of repeat run `run` under master `seed`.
pub fn run_seed(seed: u64, run: usize) -> u64 {
    rng::derive(rng::derive(seed, stream::RUN), run as u64)
}

pub fn run_repeatability(
    cfg: &ExperimentConfig,
    n_runs: usize,
    out: Option<&Path>,
) -> Result<Repeatability> {
    if n_runs < 2 {
        return Err(parameter(format!(
            "repeatability needs at least 2 runs, got {n_runs}"
        )));
    }
    let seeds: Vec<u64> = (0..n_runs).map(|r| run_seed(cfg.seed, r)).collect();
    run_repeatability_with_seeds(cfg, &seeds, out)
}

/// Repeatability over explicit run seeds.
pub fn run_repeatability_with_seeds(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<Repeatability> {
    cfg.validate()?;
    if seeds.len() < 2 {
        return Err(parameter("repeatability needs at least 2 runs"));
    }
    let reference = cfg.build_scene().map_err(|e| e.in_stage("scene"))?;
    let spec = cfg.particle_spec();
    let runs: Vec<Cell<u64>> = seeds
        .par_iter()
        .map(|&seed| Cell {
            key: seed,
            outcome: run_cell(
                cfg,
                &reference,
                &spec,
                cfg.fixed_samples,
                cfg.threshold,
                seed,
            ),
        })
        .collect();
    let spectra: Vec<RadialSpectrum> = runs
        .iter()
        .filter_map(|c| c.ok().map(|o| o.spectrum.clone()))
        .collect();
    let (mean, std) = resolution::average_spectra(&spectra).map_err(|e| e.in_stage("average"))?;
    let fraction_within_2std = resolution::fraction_within(&spectra, &mean, &std, 2.0);
    if let Some(dir) = out {
        write_manifest(dir, cfg, "repeatability")?;
        for (i, c) in runs.iter().enumerate() {
            write_cell(&dir.join(format!("run{i:02}")), &c.outcome)?;
        }
        let mean_cut = resolution::cutoff_slope_with_margin(&mean, cfg.floor_margin).ok();
        resolution::write_spectrum_csv(
            &dir.join("mean_spectrum.csv"),
            &mean,
            Some(&std),
            mean_cut.as_ref(),
        )?;
        fs::write(
            dir.join("summary.toml"),
            format!(
                "runs = {}\nfraction_within_2std = {:?}\n",
                runs.len(),
                fraction_within_2std
            ),
        )?;
    }
    Ok(Repeatability {
        runs,
        mean,
        std,
        fraction_within_2std,
    })
}

/// Pointwise sum, for objects imaged in several parts.
pub fn composite_add(images: &[Grid]) -> Result<Grid> {
    let first = images
        .first()
        .ok_or_else(|| parameter("composite needs at least one image"))?;
    let mut out = first.clone();
    for img in &images[1..] {
        if img.dims() != out.dims() {
            return Err(shape(format!(
                "composite parts {:?} and {:?}",
                out.dims(),
                img.dims()
            )));
        }
        out.as_mut_slice()
            .iter_mut()
            .zip(img.as_slice())
            .for_each(|(o, v)| *o += v);
    }
    Ok(out)
}

#[derive(Debug)]
pub struct FullRun {
    pub set: MeasurementSet,
    pub outcome: CellOutcome,
}

/// Acquire, reconstruct and analyse one configuration. With `out`, writes
/// `manifest.toml`, `set/`, `recon.pgm` (+ `.toml`), `spectrum.csv` and
/// `quality.toml`.
pub fn run_full(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<FullRun> {
    cfg.validate()?;
    let reference = cfg.build_scene().map_err(|e| e.in_stage("scene"))?;
    let set = measurement::acquire_set(
        &reference,
        &cfg.particle_spec(),
        cfg.fixed_samples,
        cfg.threshold,
        cfg.noise(),
        cfg.seed,
    )
    .map_err(|e| e.in_stage("acquire"))?;
    let outcome = reconstruct_and_analyse(cfg, &reference, &set)?;
    if let Some(dir) = out {
        write_manifest(dir, cfg, "full run")?;
        measurement::save_set(&set, &dir.join("set")).map_err(|e| e.in_stage("write set"))?;
        write_cell(dir, &Ok(outcome.clone()))?;
    }
    Ok(FullRun { set, outcome })
}
