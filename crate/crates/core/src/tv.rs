//! Total-variation reconstruction.
//!
//! Minimises `TV(u) + mu/2 ||A u - b||^2` by splitting `w = D u` with an
//! augmented Lagrangian:
//!
//! ```text
//! w  <- shrink(D u - nu/beta, 1/beta)
//! u  <- CG on (mu A'A + beta D'D) u = mu A'b + D'(beta w + nu)
//! nu <- nu - beta (D u - w)
//! ```
//!
//! `D` is the forward-difference gradient with a zero difference past the
//! last row and column; [`divergence_adjoint`] is its exact transpose.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{parameter, Error, Result};
use crate::grid::Grid;
use crate::measurement::MeasurementSet;
use crate::operator::{dot, MaskOperator};
use crate::pgm::{self, Graymap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TvVariant {
    Isotropic,
    Anisotropic,
}

impl std::str::FromStr for TvVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "isotropic" => Ok(TvVariant::Isotropic),
            "anisotropic" => Ok(TvVariant::Anisotropic),
            other => Err(parameter(format!("unknown TV variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvConfig {
    /// Data-fidelity weight; `None` selects `256 / mean(b)`.
    pub mu: Option<f64>,
    pub beta: f64,
    pub variant: TvVariant,
    pub max_outer_iters: usize,
    pub inner_cg_iters: usize,
    pub rel_tol: f64,
    pub nonneg: bool,
    /// Subtract the mean mask from every row (and the mean reading from `b`)
    /// before solving, then restore the DC level by least squares.
    pub center_rows: bool,
}

impl Default for TvConfig {
    fn default() -> Self {
        TvConfig {
            mu: None,
            beta: 32.0,
            variant: TvVariant::Isotropic,
            max_outer_iters: 300,
            inner_cg_iters: 8,
            rel_tol: 1e-4,
            nonneg: true,
            center_rows: true,
        }
    }
}

impl TvConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(mu) = self.mu {
            if !(mu > 0.0) || !mu.is_finite() {
                return Err(parameter(format!("mu must be positive, got {mu}")));
            }
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(parameter(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if !(self.rel_tol > 0.0) {
            return Err(parameter(format!(
                "rel_tol must be positive, got {}",
                self.rel_tol
            )));
        }
        if self.max_outer_iters == 0 || self.inner_cg_iters == 0 {
            return Err(parameter("iteration limits must be at least 1"));
        }
        Ok(())
    }

    /// The data weight used for readings `b`.
    pub fn resolve_mu(&self, b: &[f64]) -> f64 {
        self.mu.unwrap_or_else(|| {
            let mean = b.iter().sum::<f64>() / b.len() as f64;
            if mean > 0.0 {
                256.0 / mean
            } else {
                256.0
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconResult {
    pub image: Grid,
    pub outer_iters_used: usize,
    pub final_rel_change: f64,
    pub objective_history: Vec<f64>,
    /// `||A u - b|| / ||b||` on the uncentered system.
    pub data_residual: f64,
    pub converged: bool,
    pub mu: f64,
}

/// Forward differences; the last column (row) has zero x (y) difference.
pub fn gradient(u: &Grid) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = u.dims();
    let s = u.as_slice();
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                gx[i] = s[i + 1] - s[i];
            }
            if y + 1 < h {
                gy[i] = s[i + w] - s[i];
            }
        }
    }
    (gx, gy)
}

/// `D^T (gx, gy)`, the negative divergence.
pub fn divergence_adjoint(gx: &[f64], gy: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut v = 0.0;
            if x + 1 < w {
                v -= gx[i];
            }
            if x > 0 {
                v += gx[i - 1];
            }
            if y + 1 < h {
                v -= gy[i];
            }
            if y > 0 {
                v += gy[i - w];
            }
            out[i] = v;
        }
    }
    out
}

fn tv_of(gx: &[f64], gy: &[f64], variant: TvVariant) -> f64 {
    match variant {
        TvVariant::Anisotropic => gx.iter().zip(gy).map(|(a, b)| a.abs() + b.abs()).sum(),
        TvVariant::Isotropic => gx.iter().zip(gy).map(|(a, b)| a.hypot(*b)).sum(),
    }
}

pub fn total_variation(u: &Grid, variant: TvVariant) -> f64 {
    let (gx, gy) = gradient(u);
    tv_of(&gx, &gy, variant)
}

fn shrink(vx: &mut [f64], vy: &mut [f64], amount: f64, variant: TvVariant) {
    let soft = |v: f64| {
        let m = v.abs() - amount;
        if m > 0.0 {
            m.copysign(v)
        } else {
            0.0
        }
    };
    match variant {
        TvVariant::Anisotropic => {
            vx.iter_mut()
                .chain(vy.iter_mut())
                .for_each(|v| *v = soft(*v));
        }
        TvVariant::Isotropic => {
            for (a, b) in vx.iter_mut().zip(vy.iter_mut()) {
                let norm = a.hypot(*b);
                let scale = if norm > amount {
                    (norm - amount) / norm
                } else {
                    0.0
                };
                *a *= scale;
                *b *= scale;
            }
        }
    }
}

/// Runs `iters` conjugate-gradient steps on `apply(x) = rhs` from `x`.
fn conjugate_gradient(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    rhs: &[f64],
    x: &mut [f64],
    iters: usize,
) {
    let ax = apply(x);
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let floor = 1e-30 * dot(rhs, rhs).max(f64::MIN_POSITIVE);
    for _ in 0..iters {
        if rr <= floor {
            break;
        }
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rr / pap;
        x.iter_mut().zip(&p).for_each(|(xi, pi)| *xi += alpha * pi);
        r.iter_mut()
            .zip(&ap)
            .for_each(|(ri, api)| *ri -= alpha * api);
        let rr_next = dot(&r, &r);
        let beta = rr_next / rr;
        p.iter_mut()
            .zip(&r)
            .for_each(|(pi, ri)| *pi = ri + beta * *pi);
        rr = rr_next;
    }
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn solve_tv(set: &MeasurementSet, config: &TvConfig) -> Result<ReconResult> {
    if set.is_empty() {
        return Err(Error::EmptySet);
    }
    let op = MaskOperator::new(set.ordered_masks())?;
    solve_with_operator(op, &set.powers(), config)
}

/// Solver entry point on a prebuilt (uncentered) operator.
pub fn solve_with_operator(op: MaskOperator, b: &[f64], config: &TvConfig) -> Result<ReconResult> {
    config.validate()?;
    if op.rows() == 0 || b.is_empty() {
        return Err(Error::EmptySet);
    }
    if b.len() != op.rows() {
        return Err(crate::error::shape(format!(
            "{} readings for {} masks",
            b.len(),
            op.rows()
        )));
    }
    if let Some(v) = b.iter().find(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite reading {v}")));
    }
    let (w, h) = op.dims();
    let n = w * h;
    let mu = config.resolve_mu(b);
    let beta = config.beta;

    let op = if config.center_rows {
        op.centered()
    } else {
        op
    };
    let b_mean = b.iter().sum::<f64>() / b.len() as f64;
    let b_fit: Vec<f64> = if op.is_centered() {
        b.iter().map(|v| v - b_mean).collect()
    } else {
        b.to_vec()
    };

    let atb: Vec<f64> = op.adjoint(&b_fit).into_iter().map(|v| mu * v).collect();
    let normal = |v: &[f64]| -> Vec<f64> {
        let mut out = op.gram(v);
        let g = Grid::from_vec(w, h, v.to_vec()).expect("solver vector has image size");
        let (gx, gy) = gradient(&g);
        let dtd = divergence_adjoint(&gx, &gy, w, h);
        out.iter_mut()
            .zip(&dtd)
            .for_each(|(o, d)| *o = mu * *o + beta * d);
        out
    };
    let objective = |u: &[f64], gx: &[f64], gy: &[f64]| {
        let r: Vec<f64> = op
            .forward(u)
            .iter()
            .zip(&b_fit)
            .map(|(a, b)| a - b)
            .collect();
        tv_of(gx, gy, config.variant) + 0.5 * mu * dot(&r, &r)
    };

    let mut u = vec![0.0; n];
    let mut nu_x = vec![0.0; n];
    let mut nu_y = vec![0.0; n];
    let mut history = Vec::with_capacity(config.max_outer_iters);
    let mut rel_change = f64::INFINITY;
    let mut iters = 0;

    let (mut gx, mut gy) = gradient(&Grid::from_vec(w, h, u.clone())?);
    while iters < config.max_outer_iters {
        iters += 1;
        let mut wx: Vec<f64> = gx.iter().zip(&nu_x).map(|(g, l)| g - l / beta).collect();
        let mut wy: Vec<f64> = gy.iter().zip(&nu_y).map(|(g, l)| g - l / beta).collect();
        shrink(&mut wx, &mut wy, 1.0 / beta, config.variant);

        let bx: Vec<f64> = wx.iter().zip(&nu_x).map(|(a, l)| beta * a + l).collect();
        let by: Vec<f64> = wy.iter().zip(&nu_y).map(|(a, l)| beta * a + l).collect();
        let mut rhs = divergence_adjoint(&bx, &by, w, h);
        rhs.iter_mut().zip(&atb).for_each(|(r, a)| *r += a);

        let previous = u.clone();
        conjugate_gradient(normal, &rhs, &mut u, config.inner_cg_iters);
        if config.nonneg {
            u.iter_mut().for_each(|v| *v = v.max(0.0));
        }

        let g = gradient(&Grid::from_vec(w, h, u.clone())?);
        gx = g.0;
        gy = g.1;
        for i in 0..n {
            nu_x[i] -= beta * (gx[i] - wx[i]);
            nu_y[i] -= beta * (gy[i] - wy[i]);
        }

        let obj = objective(&u, &gx, &gy);
        if !obj.is_finite() {
            return Err(Error::Data(format!(
                "objective became non-finite at iteration {iters}"
            )));
        }
        history.push(obj);

        let diff: f64 = u
            .iter()
            .zip(&previous)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let base = norm(&previous);
        rel_change = if base > 0.0 {
            diff / base
        } else if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        if rel_change < config.rel_tol {
            break;
        }
    }

    if let Some(mean_row) = op.mean_row() {
        // least-squares constant offset on the full system: A (u + c 1) ~ b
        let a_one: Vec<f64> = mean_row.iter().map(|_| 1.0).collect();
        let a1 = op.forward_raw(&a_one);
        let resid: Vec<f64> = op
            .forward_raw(&u)
            .iter()
            .zip(b)
            .map(|(a, b)| b - a)
            .collect();
        let denom = dot(&a1, &a1);
        if denom > 0.0 {
            let c = dot(&a1, &resid) / denom;
            u.iter_mut().for_each(|v| *v += c);
        }
        if config.nonneg {
            u.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }

    let fit = op.forward_raw(&u);
    let r: Vec<f64> = fit.iter().zip(b).map(|(a, b)| a - b).collect();
    let bn = norm(b);
    let data_residual = if bn > 0.0 { norm(&r) / bn } else { norm(&r) };

    Ok(ReconResult {
        image: Grid::from_vec(w, h, u)?,
        outer_iters_used: iters,
        final_rel_change: rel_change,
        objective_history: history,
        data_residual,
        converged: rel_change < config.rel_tol,
        mu,
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReconSidecar {
    pub width: usize,
    pub height: usize,
    /// Pixel value p in the graymap maps back to `offset + p * scale`.
    pub offset: f64,
    pub scale: f64,
    pub min: f64,
    pub max: f64,
    pub outer_iters_used: usize,
    pub final_rel_change: f64,
    pub converged: bool,
    pub data_residual: f64,
    pub mu: f64,
    pub final_objective: f64,
}

/// Affine map of `[min, max]` onto `[0, 255]`; a constant image maps to 0.
pub fn to_graymap(image: &Grid) -> (Graymap, f64, f64) {
    let (lo, hi) = (image.min(), image.max());
    let scale = if hi > lo { (hi - lo) / 255.0 } else { 0.0 };
    let pixels = image
        .as_slice()
        .iter()
        .map(|v| {
            if scale > 0.0 {
                ((v - lo) / scale).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();
    (
        Graymap::new(image.width(), image.height(), pixels),
        lo,
        scale,
    )
}

/// Writes `<path>` as a rescaled graymap and `<path>.toml` with the
/// diagnostics and exact rescaling constants.
pub fn save_recon(result: &ReconResult, path: &Path) -> Result<()> {
    let (map, offset, scale) = to_graymap(&result.image);
    pgm::write(path, &map)?;
    let side = ReconSidecar {
        width: result.image.width(),
        height: result.image.height(),
        offset,
        scale,
        min: result.image.min(),
        max: result.image.max(),
        outer_iters_used: result.outer_iters_used,
        final_rel_change: result.final_rel_change,
        converged: result.converged,
        data_residual: result.data_residual,
        mu: result.mu,
        final_objective: result.objective_history.last().copied().unwrap_or(f64::NAN),
    };
    let text = toml::to_string(&side).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(path.with_extension("toml"), text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slm::SamplingMask;
    use proptest::prelude::*;
    use rand::Rng;

    fn grid(w: usize, h: usize, v: &[f64]) -> Grid {
        Grid::from_vec(w, h, v.to_vec()).unwrap()
    }

    #[test]
    fn tv_examples() {
        let c = Grid::filled(5, 4, 3.0);
        assert_eq!(total_variation(&c, TvVariant::Isotropic), 0.0);
        assert_eq!(total_variation(&c, TvVariant::Anisotropic), 0.0);
        let step = grid(2, 2, &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(total_variation(&step, TvVariant::Anisotropic), 2.0);
        assert_eq!(total_variation(&step, TvVariant::Isotropic), 2.0);
        let corner = grid(2, 2, &[0.0, 1.0, 1.0, 1.0]);
        assert!((total_variation(&corner, TvVariant::Isotropic) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(total_variation(&corner, TvVariant::Anisotropic), 2.0);
    }

    #[test]
    fn shrink_zero_magnitude_is_zero() {
        let (mut x, mut y) = (vec![0.0, 0.3, -2.0], vec![0.0, 0.4, 0.0]);
        shrink(&mut x, &mut y, 0.5, TvVariant::Isotropic);
        assert_eq!((x[0], y[0]), (0.0, 0.0));
        assert_eq!((x[1], y[1]), (0.0, 0.0));
        assert_eq!((x[2], y[2]), (-1.5, 0.0));
        let (mut x, mut y) = (vec![0.0, 0.7], vec![-0.2, -0.9]);
        shrink(&mut x, &mut y, 0.5, TvVariant::Anisotropic);
        assert_eq!(x, vec![0.0, 0.7 - 0.5]);
        assert_eq!(y, vec![0.0, -0.9 + 0.5]);
    }

    #[test]
    fn config_validation() {
        assert!(TvConfig::default().validate().is_ok());
        let bad = [
            TvConfig {
                mu: Some(0.0),
                ..Default::default()
            },
            TvConfig {
                beta: -1.0,
                ..Default::default()
            },
            TvConfig {
                rel_tol: 0.0,
                ..Default::default()
            },
            TvConfig {
                max_outer_iters: 0,
                ..Default::default()
            },
            TvConfig {
                inner_cg_iters: 0,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Parameter(_))));
        }
    }

    #[test]
    fn default_mu_scales_with_readings() {
        let c = TvConfig::default();
        assert_eq!(c.resolve_mu(&[2.0, 6.0]), 64.0);
        assert_eq!(c.resolve_mu(&[0.0, 0.0]), 256.0);
        assert_eq!(TvConfig { mu: Some(3.0), ..c }.resolve_mu(&[1.0]), 3.0);
    }

    fn random_set(seed: u64, m: usize, w: usize, h: usize, scene: &[f64]) -> MeasurementSet {
        let mut r = crate::rng::rng(seed);
        let masks: Vec<SamplingMask> = (0..m)
            .map(|_| {
                SamplingMask::new(w, h, (0..w * h).map(|_| r.gen_range(0..2)).collect(), 50.0)
                    .unwrap()
            })
            .collect();
        let op = MaskOperator::new(&masks).unwrap();
        let b = op.forward_raw(scene);
        MeasurementSet::from_masks(masks, &b, 50.0).unwrap()
    }

    #[test]
    fn zero_readings_give_zero_image() {
        let set = random_set(1, 20, 6, 6, &[0.0; 36]);
        let res = solve_tv(&set, &TvConfig::default()).unwrap();
        assert!(res.image.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_non_finite_readings() {
        let mut set = random_set(1, 5, 3, 3, &[1.0; 9]);
        set.records[2].power = f64::NAN;
        assert!(matches!(
            solve_tv(&set, &TvConfig::default()),
            Err(Error::Data(_))
        ));
        set.records.clear();
        assert!(matches!(
            solve_tv(&set, &TvConfig::default()),
            Err(Error::EmptySet)
        ));
    }

    #[test]
    fn solve_is_deterministic() {
        let scene: Vec<f64> = (0..64)
            .map(|i| if (i % 8) > 3 { 1.0 } else { 0.0 })
            .collect();
        let set = random_set(9, 30, 8, 8, &scene);
        let cfg = TvConfig {
            max_outer_iters: 40,
            ..Default::default()
        };
        let a = solve_tv(&set, &cfg).unwrap();
        let b = solve_tv(&set, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.objective_history.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn divergence_is_exact_adjoint() {
        let mut r = crate::rng::rng(2);
        let (w, h) = (7, 5);
        let u = Grid::from_fn(w, h, |_, _| r.gen_range(-1.0..1.0));
        let px: Vec<f64> = (0..w * h).map(|_| r.gen_range(-1.0..1.0)).collect();
        let py: Vec<f64> = (0..w * h).map(|_| r.gen_range(-1.0..1.0)).collect();
        let (gx, gy) = gradient(&u);
        let lhs = dot(&gx, &px) + dot(&gy, &py);
        let rhs = dot(u.as_slice(), &divergence_adjoint(&px, &py, w, h));
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn graymap_rescaling_constants() {
        let img = grid(3, 1, &[-1.0, 0.0, 4.0]);
        let (map, offset, scale) = to_graymap(&img);
        assert_eq!(map.pixels, vec![0, 51, 255]);
        assert_eq!(offset, -1.0);
        assert!((offset + 255.0 * scale - 4.0).abs() < 1e-12);
        let (flat, _, s) = to_graymap(&Grid::filled(2, 2, 7.0));
        assert_eq!((flat.pixels, s), (vec![0; 4], 0.0));
    }

    proptest! {
        #[test]
        fn tv_homogeneous_and_shift_invariant(seed in any::<u64>(), alpha in -4.0f64..4.0, shift in -10.0f64..10.0) {
            let mut r = crate::rng::rng(seed);
            let u = Grid::from_fn(9, 6, |_, _| r.gen_range(-1.0..1.0));
            for variant in [TvVariant::Isotropic, TvVariant::Anisotropic] {
                let tv = total_variation(&u, variant);
                prop_assert!(tv >= 0.0);
                let scaled = total_variation(&u.map(|v| alpha * v), variant);
                prop_assert!((scaled - alpha.abs() * tv).abs() <= 1e-12 * (1.0 + tv * alpha.abs()));
                let shifted = total_variation(&u.map(|v| v + shift), variant);
                prop_assert!((shifted - tv).abs() <= 1e-11 * (1.0 + tv));
            }
        }
    }
}
