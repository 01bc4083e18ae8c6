//! Ground-truth scenes: binary test objects and Gaussian illumination.
//!
//! Shapes are rasterized by testing each pixel centre `(i + 0.5, j + 0.5)`
//! against a half-open region centred on the canvas, so a `w x h` pixel
//! rectangle always lights exactly `w * h` pixels.

use std::path::Path;

use crate::error::{parameter, Error, Result};
use crate::grid::Grid;
use crate::pgm;

/// Default spatial calibration: a 250 px frame spanning a 25 mm container.
pub const DEFAULT_PX_PER_MM: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub intensity: Grid,
    pub px_per_mm: f64,
}

impl Scene {
    pub fn new(intensity: Grid, px_per_mm: f64) -> Result<Self> {
        if intensity.is_empty() {
            return Err(Error::Dimension(
                "scene must have at least one pixel".into(),
            ));
        }
        if !(px_per_mm > 0.0) {
            return Err(parameter(format!(
                "px_per_mm must be positive, got {px_per_mm}"
            )));
        }
        if let Some(v) = intensity.as_slice().iter().find(|v| !(**v >= 0.0)) {
            return Err(parameter(format!(
                "scene intensity must be nonnegative, found {v}"
            )));
        }
        Ok(Scene {
            intensity,
            px_per_mm,
        })
    }

    pub fn width_px(&self) -> usize {
        self.intensity.width()
    }

    pub fn height_px(&self) -> usize {
        self.intensity.height()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.intensity.dims()
    }
}

/// Half-open span `[c - len/2, c + len/2)` tested at pixel centres.
fn centered_span(canvas_px: usize, len_px: f64) -> impl Fn(usize) -> bool {
    let c = canvas_px as f64 / 2.0;
    let (lo, hi) = (c - len_px / 2.0, c + len_px / 2.0);
    move |i| {
        let p = i as f64 + 0.5;
        lo <= p && p < hi
    }
}

fn check_canvas(canvas_px: usize, px_per_mm: f64) -> Result<()> {
    if canvas_px == 0 {
        return Err(Error::Dimension("canvas must be at least one pixel".into()));
    }
    if !(px_per_mm > 0.0) {
        return Err(parameter(format!(
            "px_per_mm must be positive, got {px_per_mm}"
        )));
    }
    Ok(())
}

fn check_extent(name: &str, mm: f64, canvas_px: usize, px_per_mm: f64) -> Result<f64> {
    if !(mm >= 0.0) {
        return Err(Error::Dimension(format!(
            "{name} must be nonnegative, got {mm} mm"
        )));
    }
    let px = mm * px_per_mm;
    if px > canvas_px as f64 {
        return Err(Error::Dimension(format!(
            "{name} of {mm} mm ({px} px) exceeds the {canvas_px} px canvas"
        )));
    }
    Ok(px)
}

/// Centered bright rectangle on a square canvas.
pub fn make_rectangle(
    width_mm: f64,
    height_mm: f64,
    canvas_px: usize,
    px_per_mm: f64,
) -> Result<Scene> {
    check_canvas(canvas_px, px_per_mm)?;
    let w = check_extent("rectangle width", width_mm, canvas_px, px_per_mm)?;
    let h = check_extent("rectangle height", height_mm, canvas_px, px_per_mm)?;
    let in_x = centered_span(canvas_px, w);
    let in_y = centered_span(canvas_px, h);
    let grid = Grid::from_fn(canvas_px, canvas_px, |x, y| {
        if in_x(x) && in_y(y) {
            1.0
        } else {
            0.0
        }
    });
    Scene::new(grid, px_per_mm)
}

/// Plus sign: union of a horizontal and a vertical bar, each `outer_mm` long
/// and `arm_mm` wide.
pub fn make_cross(outer_mm: f64, arm_mm: f64, canvas_px: usize, px_per_mm: f64) -> Result<Scene> {
    check_canvas(canvas_px, px_per_mm)?;
    let outer = check_extent("cross extent", outer_mm, canvas_px, px_per_mm)?;
    let arm = check_extent("cross arm", arm_mm, canvas_px, px_per_mm)?;
    if arm_mm > outer_mm {
        return Err(Error::Dimension(format!(
            "cross arm {arm_mm} mm is wider than its extent {outer_mm} mm"
        )));
    }
    let long = centered_span(canvas_px, outer);
    let short = centered_span(canvas_px, arm);
    let grid = Grid::from_fn(canvas_px, canvas_px, |x, y| {
        let horizontal = long(x) && short(y);
        let vertical = short(x) && long(y);
        if horizontal || vertical {
            1.0
        } else {
            0.0
        }
    });
    Scene::new(grid, px_per_mm)
}

/// Loads a binary object mask from a P5 graymap; values at or above half
/// scale (128 of 255) become 1.
pub fn load_mask_bitmap(path: &Path, px_per_mm: f64) -> Result<Scene> {
    let map = pgm::read(path)?;
    let pixels = map
        .pixels
        .iter()
        .map(|&v| if v >= 128 { 1.0 } else { 0.0 })
        .collect();
    Scene::new(Grid::from_vec(map.width, map.height, pixels)?, px_per_mm)
}

/// Multiplies the scene by a unit-peak Gaussian centred on the canvas
/// (pixel-index coordinates `((W-1)/2, (H-1)/2)`). The beam is truncated at
/// the canvas edge without renormalisation.
pub fn apply_gaussian_illumination(scene: &Scene, fwhm_mm: f64) -> Result<Scene> {
    if !(fwhm_mm > 0.0) || !fwhm_mm.is_finite() {
        return Err(parameter(format!("FWHM must be positive, got {fwhm_mm}")));
    }
    let fwhm_px = fwhm_mm * scene.px_per_mm;
    let sigma = fwhm_px / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt());
    let (w, h) = scene.dims();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let grid = Grid::from_fn(w, h, |x, y| {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        let g = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        scene.intensity.get(x, y) * g
    });
    Scene::new(grid, scene.px_per_mm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bright(scene: &Scene) -> usize {
        scene
            .intensity
            .as_slice()
            .iter()
            .filter(|&&v| v == 1.0)
            .count()
    }

    /// Independent counter: bounding box of the lit pixels.
    fn lit_bbox(scene: &Scene) -> (usize, usize, usize, usize) {
        let (w, h) = scene.dims();
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
        for y in 0..h {
            for x in 0..w {
                if scene.intensity.get(x, y) > 0.0 {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0, y0, x1, y1)
    }

    #[test]
    fn rectangle_three_by_five_mm() {
        let s = make_rectangle(3.0, 5.0, 250, 10.0).unwrap();
        assert_eq!(bright(&s), 30 * 50);
        assert_eq!(lit_bbox(&s), (110, 100, 139, 149));
    }

    #[test]
    fn empty_rectangle_is_dark() {
        let s = make_rectangle(0.0, 0.0, 64, 10.0).unwrap();
        assert_eq!(s.intensity.sum(), 0.0);
    }

    #[test]
    fn rectangle_area_count() {
        assert_eq!(
            make_rectangle(2.0, 4.0, 100, 5.0).unwrap().intensity.sum(),
            200.0
        );
    }

    #[test]
    fn oversized_rectangle_rejected() {
        assert!(matches!(
            make_rectangle(7.0, 1.0, 64, 10.0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn cross_counts() {
        let s = make_cross(6.0, 1.0, 250, 10.0).unwrap();
        assert_eq!(bright(&s), 1100);
        // arms are 60 px long
        assert_eq!(lit_bbox(&s), (95, 95, 154, 154));
    }

    #[test]
    fn cross_with_full_arms_is_square() {
        let s = make_cross(4.0, 4.0, 64, 10.0).unwrap();
        assert_eq!(s, make_rectangle(4.0, 4.0, 64, 10.0).unwrap());
    }

    #[test]
    fn cross_arm_wider_than_extent_rejected() {
        assert!(matches!(
            make_cross(2.0, 3.0, 64, 10.0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn gaussian_peak_and_half_max() {
        let flat = Scene::new(Grid::filled(101, 101, 1.0), 10.0).unwrap();
        let lit = apply_gaussian_illumination(&flat, 5.0).unwrap();
        assert_eq!(lit.intensity.get(50, 50), 1.0);
        // 25 px = FWHM / 2 at 10 px/mm
        assert!((lit.intensity.get(75, 50) - 0.5).abs() < 1e-12);
        assert!((lit.intensity.get(50, 25) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gaussian_rejects_nonpositive_fwhm() {
        let flat = Scene::new(Grid::filled(5, 5, 1.0), 10.0).unwrap();
        assert!(matches!(
            apply_gaussian_illumination(&flat, 0.0),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            apply_gaussian_illumination(&flat, -1.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn bitmap_loading() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let write = |pixels: Vec<u8>| pgm::write(&path, &pgm::Graymap::new(8, 6, pixels)).unwrap();

        write(vec![255; 48]);
        assert_eq!(load_mask_bitmap(&path, 10.0).unwrap().intensity.sum(), 48.0);
        write(vec![0; 48]);
        assert_eq!(load_mask_bitmap(&path, 10.0).unwrap().intensity.sum(), 0.0);
        write(
            (0..48)
                .map(|i| if (i % 8 + i / 8) % 2 == 0 { 255 } else { 0 })
                .collect(),
        );
        assert_eq!(load_mask_bitmap(&path, 10.0).unwrap().intensity.sum(), 24.0);
        write((0..48).map(|i| if i < 24 { 127 } else { 128 }).collect());
        assert_eq!(load_mask_bitmap(&path, 10.0).unwrap().intensity.sum(), 24.0);
    }

    #[test]
    fn bitmap_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.pgm");
        assert!(matches!(
            load_mask_bitmap(&missing, 10.0),
            Err(Error::Io(_))
        ));
        let bad = dir.path().join("bad.pgm");
        std::fs::write(&bad, b"P6\n1 1\n255\n\0\0\0").unwrap();
        assert!(matches!(
            load_mask_bitmap(&bad, 10.0),
            Err(Error::Format { .. })
        ));
    }

    proptest! {
        #[test]
        fn shapes_are_binary_and_counts_are_exact(w in 0u32..20, h in 0u32..20, arm in 0u32..20, canvas in 20usize..48) {
            let s = make_rectangle(w as f64, h as f64, canvas, 1.0).unwrap();
            prop_assert!(s.intensity.as_slice().iter().all(|&v| v == 0.0 || v == 1.0));
            prop_assert_eq!(s.intensity.sum(), (w * h) as f64);

            let outer = w.max(arm);
            let c = make_cross(outer as f64, arm as f64, canvas, 1.0).unwrap();
            prop_assert!(c.intensity.as_slice().iter().all(|&v| v == 0.0 || v == 1.0));
            prop_assert_eq!(c.intensity.sum(), (2 * outer * arm - arm * arm) as f64);
        }

        #[test]
        fn illumination_never_brightens(fwhm in 0.1f64..10.0, seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = crate::rng::rng(seed);
            let grid = Grid::from_fn(17, 12, |_, _| rng.gen_range(0.0..5.0));
            let scene = Scene::new(grid, 3.0).unwrap();
            let lit = apply_gaussian_illumination(&scene, fwhm).unwrap();
            for (a, b) in lit.intensity.as_slice().iter().zip(scene.intensity.as_slice()) {
                prop_assert!(*a >= 0.0 && a <= b);
            }
        }
    }
}
