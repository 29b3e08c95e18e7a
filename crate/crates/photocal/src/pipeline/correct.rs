//! Photometric correction: invert the response, divide out vignette and
//! exposure, producing an irradiance image plus an 8-bit preview.

use crate::image::GrayImage;
use crate::io::CalibrationResult;
use crate::models::VignetteModel;
use crate::scalar::Scalar;
use crate::synth::lut_eval;

/// A corrected frame: real-valued irradiance, an 8-bit preview (clamped to
/// [0, 1] and scaled), and the mask of saturated input pixels.
#[derive(Debug, Clone)]
pub struct CorrectedFrame<S: Scalar> {
    pub width: usize,
    pub height: usize,
    /// Per pixel `f^-1(O) / V(x) / e`.
    pub irradiance: Vec<S>,
    pub preview: GrayImage,
    /// Input pixels at 0 or 255.
    pub saturated: Vec<bool>,
}

impl<S: Scalar> CorrectedFrame<S> {
    /// Irradiance scaled to the 16-bit range, clamped.
    pub fn irradiance_u16(&self) -> Vec<u16> {
        self.irradiance
            .iter()
            .map(|&v| {
                (v.clamp(S::zero(), S::one()).to_f64_lossy() * 65535.0 + 0.5).floor() as u16
            })
            .collect()
    }
}

/// Correct one frame given the 256-entry inverse response table, the vignette
/// and the frame exposure.
pub fn correct_frame<S: Scalar>(
    image: &GrayImage,
    inverse_lut: &[S],
    vignette: &VignetteModel<S>,
    exposure: S,
) -> CorrectedFrame<S> {
    let (w, h) = (image.width(), image.height());
    let (cx, cy): (S, S) = image.center();
    let mut irradiance = Vec::with_capacity(w * h);
    let mut preview = Vec::with_capacity(w * h);
    let mut saturated = Vec::with_capacity(w * h);
    for y in 0..h {
        let yf = S::cast(y as f64);
        for x in 0..w {
            let o = image.get(x, y);
            saturated.push(o == 0 || o == 255);
            let inv = lut_eval(inverse_lut, S::cast(o as f64 / 255.0));
            let v = vignette
                .eval_at(S::cast(x as f64), yf, cx, cy)
                .max(S::cast(1e-3));
            let i = inv / v / exposure;
            irradiance.push(i);
            preview
                .push((i.clamp(S::zero(), S::one()).to_f64_lossy() * 255.0 + 0.5).floor() as u8);
        }
    }
    CorrectedFrame {
        width: w,
        height: h,
        irradiance,
        preview: GrayImage::new(w, h, preview),
        saturated,
    }
}

/// Correction driven by a stored calibration result.
pub fn correct_with_result<S: Scalar>(
    image: &GrayImage,
    calib: &CalibrationResult<S>,
    exposure: S,
) -> CorrectedFrame<S> {
    let vignette = VignetteModel::for_frame(calib.vignette_coeffs(), image.width(), image.height());
    // The inverse table is indexed by output level; lut_eval over k/255
    // reproduces exactly table[k] at integer inputs.
    correct_frame(image, calib.inverse_lut(), &vignette, exposure)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_calib(w: usize, h: usize, n: usize) -> CalibrationResult<f64> {
        let lut: Vec<f64> = (0..256).map(|k| k as f64).collect();
        CalibrationResult::new(lut, [0.0; 3], vec![1.0; n], 1.0, w, h).unwrap()
    }

    #[test]
    fn identity_calibration_reproduces_input() {
        let mut img = GrayImage::filled(16, 12, 0);
        for y in 0..12 {
            for x in 0..16 {
                img.set(x, y, ((x * 16 + y) % 256) as u8);
            }
        }
        let calib = identity_calib(16, 12, 1);
        let out = correct_with_result(&img, &calib, 1.0);
        assert_eq!(out.preview.data(), img.data());
        for y in 0..12 {
            for x in 0..16 {
                let i = out.irradiance[y * 16 + x];
                assert!((i - img.get(x, y) as f64 / 255.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn saturated_pixels_masked() {
        let mut img = GrayImage::filled(8, 8, 100);
        img.set(0, 0, 255);
        img.set(1, 0, 0);
        let calib = identity_calib(8, 8, 1);
        let out = correct_with_result(&img, &calib, 1.0);
        assert!(out.saturated[0]);
        assert!(out.saturated[1]);
        assert!(!out.saturated[2]);
    }

    #[test]
    fn flat_vignetted_frame_corrects_flat() {
        // Constant radiance under a known vignette: correction flattens it.
        let w = 64;
        let h = 48;
        let coeffs = [-0.3, -0.1, -0.05];
        let vignette: VignetteModel<f64> = VignetteModel::for_frame(coeffs, w, h);
        let (cx, cy) = (31.5, 23.5);
        let l = 0.6;
        let mut img = GrayImage::filled(w, h, 0);
        for y in 0..h {
            for x in 0..w {
                let v = vignette.eval_at(x as f64, y as f64, cx, cy);
                img.set(x, y, (255.0 * v * l + 0.5).floor() as u8);
            }
        }
        let lut: Vec<f64> = (0..256).map(|k| k as f64).collect();
        let calib = CalibrationResult::new(lut, coeffs, vec![1.0], 1.0, w, h).unwrap();
        let out = correct_with_result(&img, &calib, 1.0);
        let expect = (255.0 * l).round();
        for &p in out.preview.data() {
            assert!(
                (p as f64 - expect).abs() <= 1.0,
                "pixel {p} vs expected {expect}"
            );
        }
    }
}
