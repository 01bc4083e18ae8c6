//! Resolution metrology: super-pixel resolution, radially integrated Fourier
//! spectra and the slope of their initial descent, run-to-run averaging, and
//! reference-based error metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{parameter, shape, Error, Result};
use crate::grid::Grid;

/// Relative headroom above the noise floor that ends the steep segment.
pub const DEFAULT_FLOOR_MARGIN: f64 = 0.25;

/// Sum of 2-D DFT magnitudes over integer-radius annuli around zero
/// frequency. Frequencies beyond the inscribed circle (the corners of the
/// frequency plane) are folded into the last bin, so every coefficient lands
/// in exactly one bin.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialSpectrum {
    pub radii: Vec<usize>,
    pub magnitude: Vec<f64>,
}

impl RadialSpectrum {
    pub fn from_magnitudes(magnitude: Vec<f64>) -> Self {
        RadialSpectrum {
            radii: (0..magnitude.len()).collect(),
            magnitude,
        }
    }

    pub fn len(&self) -> usize {
        self.magnitude.len()
    }

    pub fn is_empty(&self) -> bool {
        self.magnitude.is_empty()
    }

    pub fn r_max(&self) -> usize {
        self.len().saturating_sub(1)
    }

    pub fn total(&self) -> f64 {
        self.magnitude.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CutoffEstimate {
    /// Least-squares slope over the steep segment, magnitude per bin.
    pub slope: f64,
    pub fit_range: (usize, usize),
    pub noise_floor: f64,
    /// Fractional radius where the spectrum first falls to the floor level,
    /// interpolated linearly between bins.
    pub cutoff_radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EffectiveResolution {
    pub total_width_px: f64,
    pub super_pixel_px: f64,
    pub r: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QualityMetrics {
    pub rel_l2_error: f64,
    pub psnr_db: f64,
    /// Affine calibration applied to the reconstruction.
    pub gain: f64,
    pub offset: f64,
}

/// Unshifted 2-D DFT magnitudes, `|F[kx, ky]|`.
pub fn fft_magnitudes(image: &Grid) -> Grid {
    let (w, h) = image.dims();
    let mut buf: Vec<Complex<f64>> = image
        .as_slice()
        .iter()
        .map(|&v| Complex::new(v, 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    Grid::from_vec(w, h, buf.iter().map(|c| c.norm()).collect()).expect("same size")
}

fn signed_frequency(k: usize, n: usize) -> f64 {
    if k > n / 2 {
        k as f64 - n as f64
    } else {
        k as f64
    }
}

pub fn radial_spectrum(image: &Grid) -> Result<RadialSpectrum> {
    if image.is_empty() {
        return Err(Error::Dimension(
            "cannot take the spectrum of an empty image".into(),
        ));
    }
    let (w, h) = image.dims();
    let mags = fft_magnitudes(image);
    let r_max = w.min(h) / 2;
    let mut bins = vec![0.0; r_max + 1];
    for ky in 0..h {
        let fy = signed_frequency(ky, h);
        for kx in 0..w {
            let fx = signed_frequency(kx, w);
            let r = ((fx * fx + fy * fy).sqrt().round() as usize).min(r_max);
            bins[r] += mags.get(kx, ky);
        }
    }
    Ok(RadialSpectrum::from_magnitudes(bins))
}

pub fn cutoff_slope(spec: &RadialSpectrum) -> Result<CutoffEstimate> {
    cutoff_slope_with_margin(spec, DEFAULT_FLOOR_MARGIN)
}

/// Noise floor = median of the upper half of the bins. The steep segment runs
/// from radius 1 to the first bin at or below `floor * (1 + margin)`, and a
/// least-squares line is fitted to it on raw magnitudes.
pub fn cutoff_slope_with_margin(spec: &RadialSpectrum, margin: f64) -> Result<CutoffEstimate> {
    let m = &spec.magnitude;
    if m.len() < 8 {
        return Err(Error::Estimation(format!(
            "need at least 8 bins, got {}",
            m.len()
        )));
    }
    let mut upper: Vec<f64> = m[m.len() / 2..].to_vec();
    upper.sort_by(f64::total_cmp);
    let k = upper.len();
    let noise_floor = if k % 2 == 1 {
        upper[k / 2]
    } else {
        0.5 * (upper[k / 2 - 1] + upper[k / 2])
    };
    let level = noise_floor * (1.0 + margin);

    let r_lo = 1;
    let r_hi = (r_lo..m.len())
        .find(|&r| m[r] <= level)
        .unwrap_or(m.len() - 1);
    if r_hi + 1 - r_lo < 3 {
        return Err(Error::Estimation(format!(
            "steep segment spans {} bin(s); spectrum too flat",
            r_hi + 1 - r_lo
        )));
    }

    let xs: Vec<f64> = (r_lo..=r_hi).map(|r| r as f64).collect();
    let ys = &m[r_lo..=r_hi];
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();

    let (above, below) = (m[r_hi - 1], m[r_hi]);
    let cutoff_radius = if above > below && above > level {
        (r_hi - 1) as f64 + (above - level) / (above - below)
    } else {
        r_hi as f64
    };

    Ok(CutoffEstimate {
        slope: sxy / sxx,
        fit_range: (r_lo, r_hi),
        noise_floor,
        cutoff_radius,
    })
}

/// `R = (total width / super-pixel size)^2`.
pub fn effective_resolution(
    total_width_px: f64,
    super_pixel_px: f64,
) -> Result<EffectiveResolution> {
    if !(total_width_px > 0.0) || !(super_pixel_px > 0.0) {
        return Err(parameter(format!(
            "widths must be positive, got {total_width_px} and {super_pixel_px}"
        )));
    }
    if super_pixel_px > total_width_px {
        return Err(parameter(format!(
            "super-pixel {super_pixel_px} px exceeds the image width {total_width_px} px"
        )));
    }
    let ratio = total_width_px / super_pixel_px;
    Ok(EffectiveResolution {
        total_width_px,
        super_pixel_px,
        r: ratio * ratio,
    })
}

/// Error of `recon` against `reference` after fitting the least-squares gain
/// and offset that best map `recon` onto `reference`.
pub fn quality(reference: &Grid, recon: &Grid) -> Result<QualityMetrics> {
    reference.ensure_same_dims(recon)?;
    let ref_norm = reference
        .as_slice()
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if ref_norm == 0.0 {
        return Err(parameter("reference image is identically zero"));
    }
    let n = reference.len() as f64;
    let (x, y) = (recon.as_slice(), reference.as_slice());
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let gain = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let offset = my - gain * mx;
    let sq_err: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (gain * a + offset - b).powi(2))
        .sum();
    let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mse = sq_err / n;
    let psnr_db = if mse > 0.0 {
        10.0 * (peak * peak / mse).log10()
    } else {
        f64::INFINITY
    };
    Ok(QualityMetrics {
        rel_l2_error: sq_err.sqrt() / ref_norm,
        psnr_db,
        gain,
        offset,
    })
}

/// Per-bin mean and sample standard deviation.
pub fn average_spectra(specs: &[RadialSpectrum]) -> Result<(RadialSpectrum, Vec<f64>)> {
    if specs.len() < 2 {
        return Err(parameter(format!(
            "averaging needs at least 2 spectra, got {}",
            specs.len()
        )));
    }
    let bins = specs[0].len();
    if let Some(s) = specs.iter().find(|s| s.len() != bins) {
        return Err(shape(format!("spectra with {} and {} bins", bins, s.len())));
    }
    let n = specs.len() as f64;
    let mean: Vec<f64> = (0..bins)
        .map(|b| specs.iter().map(|s| s.magnitude[b]).sum::<f64>() / n)
        .collect();
    let std = (0..bins)
        .map(|b| {
            let ss: f64 = specs
                .iter()
                .map(|s| (s.magnitude[b] - mean[b]).powi(2))
                .sum();
            (ss / (n - 1.0)).sqrt()
        })
        .collect();
    Ok((RadialSpectrum::from_magnitudes(mean), std))
}

/// Fraction of (spectrum, bin) pairs lying within `k` standard deviations of
/// the mean curve.
pub fn fraction_within(
    specs: &[RadialSpectrum],
    mean: &RadialSpectrum,
    std: &[f64],
    k: f64,
) -> f64 {
    let mut inside = 0usize;
    let mut total = 0usize;
    for s in specs {
        for ((v, m), sd) in s.magnitude.iter().zip(&mean.magnitude).zip(std) {
            total += 1;
            if (v - m).abs() <= k * sd {
                inside += 1;
            }
        }
    }
    inside as f64 / total.max(1) as f64
}

/// Comma-separated export: `radius,magnitude[,std]` rows, then the cutoff
/// estimate as `#` comment lines.
pub fn spectrum_csv(
    spec: &RadialSpectrum,
    std: Option<&[f64]>,
    cutoff: Option<&CutoffEstimate>,
) -> String {
    let mut out = String::from(if std.is_some() {
        "radius,magnitude,std\n"
    } else {
        "radius,magnitude\n"
    });
    for (i, (r, m)) in spec.radii.iter().zip(&spec.magnitude).enumerate() {
        match std {
            Some(sd) => writeln!(out, "{r},{m:e},{:e}", sd[i]),
            None => writeln!(out, "{r},{m:e}"),
        }
        .expect("writing to a String");
    }
    if let Some(c) = cutoff {
        writeln!(out, "# slope={:e}", c.slope).unwrap();
        writeln!(out, "# fit_range={},{}", c.fit_range.0, c.fit_range.1).unwrap();
        writeln!(out, "# noise_floor={:e}", c.noise_floor).unwrap();
        writeln!(out, "# cutoff_radius={}", c.cutoff_radius).unwrap();
    }
    out
}

pub fn write_spectrum_csv(
    path: &Path,
    spec: &RadialSpectrum,
    std: Option<&[f64]>,
    cutoff: Option<&CutoffEstimate>,
) -> Result<()> {
    fs::write(path, spectrum_csv(spec, std, cutoff))?;
    Ok(())
}
