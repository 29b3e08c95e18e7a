//! Calibration output: a plain-text, diff-able format with sections
//! `[meta]`, `[response]`, `[vignette]`, `[exposures]`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Final calibration: forward response lookup table sampled at `k/255`, the
/// derived inverse table, vignette polynomial coefficients, per-frame
/// exposures and the gauge exponent that anchored the response.
#[derive(Debug, Clone)]
pub struct CalibrationResult<S: Scalar> {
    response_lut: Vec<S>,
    inverse_lut: Vec<S>,
    vignette_coeffs: [S; 3],
    exposures: Vec<S>,
    gamma_applied: S,
    width: usize,
    height: usize,
}

impl<S: Scalar> CalibrationResult<S> {
    pub fn new(
        response_lut: Vec<S>,
        vignette_coeffs: [S; 3],
        exposures: Vec<S>,
        gamma_applied: S,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if response_lut.len() != 256 {
            return Err(Error::InvalidParameter(format!(
                "response LUT must have 256 samples, got {}",
                response_lut.len()
            )));
        }
        for (k, w) in response_lut.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                return Err(Error::InvalidParameter(format!(
                    "response LUT not strictly increasing at sample {}",
                    k + 1
                )));
            }
        }
        if exposures.iter().any(|e| !(*e > S::zero())) {
            return Err(Error::InvalidParameter(
                "exposures must be strictly positive".into(),
            ));
        }
        let inverse_lut = invert_lut(&response_lut);
        Ok(CalibrationResult {
            response_lut,
            inverse_lut,
            vignette_coeffs,
            exposures,
            gamma_applied,
            width,
            height,
        })
    }

    pub fn response_lut(&self) -> &[S] {
        &self.response_lut
    }

    /// Inverse table: entry `k` is the normalized irradiance mapping to
    /// output level `k` under the (piecewise-linear) forward LUT.
    pub fn inverse_lut(&self) -> &[S] {
        &self.inverse_lut
    }

    pub fn vignette_coeffs(&self) -> [S; 3] {
        self.vignette_coeffs
    }

    pub fn exposures(&self) -> &[S] {
        &self.exposures
    }

    pub fn gamma_applied(&self) -> S {
        self.gamma_applied
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("# photometric calibration\n");
        out.push_str("[meta]\n");
        writeln!(out, "width {}", self.width).unwrap();
        writeln!(out, "height {}", self.height).unwrap();
        writeln!(out, "frames {}", self.exposures.len()).unwrap();
        writeln!(out, "gamma_applied {}", fmt_scalar(self.gamma_applied)).unwrap();
        out.push_str("[response]\n");
        for v in &self.response_lut {
            writeln!(out, "{}", fmt_scalar(*v)).unwrap();
        }
        out.push_str("[vignette]\n");
        for v in &self.vignette_coeffs {
            writeln!(out, "{}", fmt_scalar(*v)).unwrap();
        }
        out.push_str("[exposures]\n");
        for e in &self.exposures {
            writeln!(out, "{}", fmt_scalar(*e)).unwrap();
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |reason: String| Error::CalibFile {
            path: path.to_path_buf(),
            reason,
        };

        let mut section = String::new();
        let mut response = Vec::new();
        let mut vignette = Vec::new();
        let mut exposures = Vec::new();
        let mut gamma = S::one();
        let (mut width, mut height) = (0usize, 0usize);

        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = line[1..line.len() - 1].to_string();
                continue;
            }
            match section.as_str() {
                "meta" => {
                    let mut parts = line.split_whitespace();
                    let key = parts.next().unwrap_or_default();
                    let value = parts.next().unwrap_or_default();
                    match key {
                        "width" => {
                            width = value
                                .parse()
                                .map_err(|_| bad(format!("bad width '{value}'")))?
                        }
                        "height" => {
                            height = value
                                .parse()
                                .map_err(|_| bad(format!("bad height '{value}'")))?
                        }
                        "frames" => {}
                        "gamma_applied" => {
                            gamma = parse_scalar(value)
                                .ok_or_else(|| bad(format!("bad gamma '{value}'")))?
                        }
                        other => return Err(bad(format!("unknown meta key '{other}'"))),
                    }
                }
                "response" => response
                    .push(parse_scalar(line).ok_or_else(|| bad(format!("bad value '{line}'")))?),
                "vignette" => vignette
                    .push(parse_scalar(line).ok_or_else(|| bad(format!("bad value '{line}'")))?),
                "exposures" => exposures
                    .push(parse_scalar(line).ok_or_else(|| bad(format!("bad value '{line}'")))?),
                other => return Err(bad(format!("value outside a known section ('{other}')"))),
            }
        }

        if vignette.len() != 3 {
            return Err(bad(format!(
                "expected 3 vignette coefficients, got {}",
                vignette.len()
            )));
        }

        Self::new(
            response,
            [vignette[0], vignette[1], vignette[2]],
            exposures,
            gamma,
            width,
            height,
        )
        .map_err(|e| bad(e.to_string()))
    }

    /// Companion CSV with one `frame_index,exposure` row per frame.
    pub fn write_exposures_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("frame_index,exposure\n");
        for (i, e) in self.exposures.iter().enumerate() {
            writeln!(out, "{},{}", i, fmt_scalar(*e)).unwrap();
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn fmt_scalar<S: Scalar>(v: S) -> String {
    // 17 significant digits: f64 round-trips exactly.
    format!("{:.16e}", v.to_f64_lossy())
}

fn parse_scalar<S: Scalar>(s: &str) -> Option<S> {
    s.parse::<f64>().ok().map(S::cast)
}

/// Exact numerical inverse of a strictly increasing 256-sample LUT under
/// linear interpolation.
fn invert_lut<S: Scalar>(lut: &[S]) -> Vec<S> {
    let n = lut.len();
    (0..256)
        .map(|k| {
            let target = S::cast(k as f64);
            if target <= lut[0] {
                return S::zero();
            }
            if target >= lut[n - 1] {
                return S::one();
            }
            let (mut lo, mut hi) = (0usize, n - 1);
            while hi - lo > 1 {
                let mid = (lo + hi) / 2;
                if lut[mid] <= target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let frac = (target - lut[lo]) / (lut[lo + 1] - lut[lo]);
            (S::cast(lo as f64) + frac) / S::cast((n - 1) as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_result() -> CalibrationResult<f64> {
        let lut: Vec<f64> = (0..256).map(|k| k as f64).collect();
        CalibrationResult::new(lut, [0.0, 0.0, 0.0], vec![1.0, 1.0, 1.0], 1.0, 320, 240).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calib.txt");

        let lut: Vec<f64> = (0..256)
            .map(|k| 255.0 * (k as f64 / 255.0).powf(0.4321))
            .map(|v| if v == 0.0 { 0.0 } else { v + 1e-13 })
            .collect();
        let r = CalibrationResult::new(
            lut,
            [-0.299999999999, -0.1000000001, -0.05],
            vec![0.5, 1.0, 1.9999999999999998],
            1.2345678901234567,
            320,
            240,
        )
        .unwrap();
        r.write(&path).unwrap();
        let back = CalibrationResult::<f64>::read(&path).unwrap();

        assert_eq!(r.response_lut(), back.response_lut());
        assert_eq!(r.inverse_lut(), back.inverse_lut());
        assert_eq!(r.vignette_coeffs(), back.vignette_coeffs());
        assert_eq!(r.exposures(), back.exposures());
        assert_eq!(r.gamma_applied(), back.gamma_applied());
        assert_eq!((r.width(), r.height()), (back.width(), back.height()));
    }

    #[test]
    fn identity_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calib.txt");
        let r = identity_result();
        r.write(&path).unwrap();
        let back = CalibrationResult::<f64>::read(&path).unwrap();
        assert_eq!(r.response_lut(), back.response_lut());
        assert_eq!(r.exposures(), back.exposures());
        // Identity LUT inverts to k/255.
        for (k, &x) in back.inverse_lut().iter().enumerate() {
            assert!((x - k as f64 / 255.0).abs() < 1e-15);
        }
    }

    #[test]
    fn decreasing_lut_rejected_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calib.txt");
        let r = identity_result();
        r.write(&path).unwrap();

        // Corrupt one LUT entry so the table decreases.
        let text = std::fs::read_to_string(&path).unwrap();
        let corrupted = text.replacen("1.0000000000000000e2", "-5.0000000000000000e0", 1);
        assert_ne!(text, corrupted);
        std::fs::write(&path, corrupted).unwrap();

        let err = CalibrationResult::<f64>::read(&path).unwrap_err();
        assert!(err.to_string().contains("increasing"), "{err}");
    }

    #[test]
    fn non_monotone_lut_rejected_on_build() {
        let mut lut: Vec<f64> = (0..256).map(|k| k as f64).collect();
        lut[100] = 98.0;
        assert!(CalibrationResult::new(lut, [0.0; 3], vec![1.0], 1.0, 8, 8).is_err());
    }

    #[test]
    fn inverse_matches_forward_within_half_level() {
        let lut: Vec<f64> = (0..256)
            .map(|k| 255.0 * (k as f64 / 255.0).powf(1.8))
            .collect();
        let r = CalibrationResult::new(lut.clone(), [0.0; 3], vec![1.0], 1.0, 8, 8).unwrap();
        for k in 0..256usize {
            let x = r.inverse_lut()[k];
            // Evaluate the piecewise-linear forward LUT at x.
            let t = x * 255.0;
            let i = (t.floor() as usize).min(254);
            let f = lut[i] + (t - i as f64) * (lut[i + 1] - lut[i]);
            assert!((f - k as f64).abs() <= 0.5, "level {k}: {f}");
        }
    }
}
