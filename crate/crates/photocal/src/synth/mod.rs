//! Synthetic ground-truth sequences: a procedural radiance texture swept by a
//! crop window, pushed through the forward photometric model. The generator
//! doubles as the recovery oracle for end-to-end validation.

mod align;

pub use align::{align_exposures, align_response, lut_eval, vignette_rmse};

use std::path::Path;
use std::sync::Arc;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{Frame, GrayImage};
use crate::io::CalibrationResult;
use crate::models::{ResponseBasis, ResponseModel, VignetteModel, BASIS_SAMPLES, RESPONSE_COEFFS};
use crate::scalar::Scalar;
use crate::tracker::{Observation, ScenePoint, TrackDatabase};

#[derive(Debug, Clone, PartialEq)]
pub enum ExposureProfile<S: Scalar> {
    Constant(S),
    /// Geometric ramp from `from` to `to` across the sequence.
    Ramp { from: S, to: S },
    /// `base` before frame `at`, `base * factor` from it onward.
    Step { at: usize, base: S, factor: S },
    /// Geometric oscillation between `min` and `max` with the given period.
    Sinusoid { min: S, max: S, period: S },
}

impl<S: Scalar> ExposureProfile<S> {
    pub fn eval(&self, frame: usize, frame_count: usize) -> S {
        match *self {
            ExposureProfile::Constant(e) => e,
            ExposureProfile::Ramp { from, to } => {
                let t = if frame_count > 1 {
                    S::cast(frame as f64 / (frame_count - 1) as f64)
                } else {
                    S::zero()
                };
                from * (to / from).powf(t)
            }
            ExposureProfile::Step { at, base, factor } => {
                if frame < at {
                    base
                } else {
                    base * factor
                }
            }
            ExposureProfile::Sinusoid { min, max, period } => {
                let mid = (min * max).sqrt();
                let amp = (max / min).sqrt();
                let phase = S::cast(2.0 * std::f64::consts::PI * frame as f64) / period;
                mid * amp.powf(phase.sin())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GtResponse<S: Scalar> {
    /// Display-gamma curve `f(x) = 255 x^(1/gamma)`.
    Gamma(S),
    /// Coefficients in the active response basis.
    Emor([S; RESPONSE_COEFFS]),
}

#[derive(Debug, Clone)]
pub struct SynthSpec<S: Scalar> {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub texture_seed: u64,
    pub noise_seed: u64,
    /// Radius of the circular crop-window sweep, in pixels (one revolution).
    pub motion_radius: f64,
    pub response: GtResponse<S>,
    pub vignette: [S; 3],
    pub exposures: ExposureProfile<S>,
    /// Gaussian noise in intensity levels, applied after quantization.
    pub noise_sigma: S,
}

impl<S: Scalar> Default for SynthSpec<S> {
    fn default() -> Self {
        SynthSpec {
            width: 320,
            height: 240,
            frames: 200,
            texture_seed: 7,
            noise_seed: 99,
            motion_radius: 60.0,
            response: GtResponse::Gamma(S::one()),
            vignette: [S::zero(); 3],
            exposures: ExposureProfile::Constant(S::one()),
            noise_sigma: S::zero(),
        }
    }
}

impl<S: Scalar> SynthSpec<S> {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.width < 32 || self.height < 32 {
            return bad("frame size must be at least 32x32".into());
        }
        if self.frames < 2 {
            return bad("need at least 2 frames".into());
        }
        if !(self.motion_radius >= 0.0) {
            return bad("motion radius must be nonnegative".into());
        }
        if let GtResponse::Gamma(g) = self.response {
            if !(g > S::zero()) {
                return bad("response gamma must be positive".into());
            }
        }
        for i in 0..self.frames {
            let e = self.exposures.eval(i, self.frames);
            if !(e > S::zero()) {
                return bad(format!("exposure at frame {i} is not positive"));
            }
        }
        if !(self.noise_sigma >= S::zero()) {
            return bad("noise sigma must be nonnegative".into());
        }
        Ok(())
    }

    pub fn gt_exposures(&self) -> Vec<S> {
        (0..self.frames)
            .map(|i| self.exposures.eval(i, self.frames))
            .collect()
    }

    /// Parse the plain-text key-value spec format.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |reason: String| Error::SynthSpec {
            path: path.to_path_buf(),
            reason,
        };
        let mut spec = SynthSpec::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let key = it.next().unwrap();
            let args: Vec<&str> = it.collect();
            let num = |i: usize| -> Result<f64> {
                args.get(i)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| bad(format!("'{line}': missing or bad number")))
            };
            match key {
                "size" => {
                    spec.width = num(0)? as usize;
                    spec.height = num(1)? as usize;
                }
                "frames" => spec.frames = num(0)? as usize,
                "texture_seed" => spec.texture_seed = num(0)? as u64,
                "noise_seed" => spec.noise_seed = num(0)? as u64,
                "motion" => match args.first() {
                    Some(&"circle") => spec.motion_radius = num(1)?,
                    other => return Err(bad(format!("unknown motion '{other:?}'"))),
                },
                "response_gamma" => spec.response = GtResponse::Gamma(S::cast(num(0)?)),
                "response_emor" => {
                    spec.response = GtResponse::Emor([
                        S::cast(num(0)?),
                        S::cast(num(1)?),
                        S::cast(num(2)?),
                        S::cast(num(3)?),
                    ])
                }
                "vignette" => {
                    spec.vignette = [S::cast(num(0)?), S::cast(num(1)?), S::cast(num(2)?)]
                }
                "exposure" => {
                    spec.exposures = match args.first() {
                        Some(&"constant") => ExposureProfile::Constant(S::cast(num(1)?)),
                        Some(&"ramp") => ExposureProfile::Ramp {
                            from: S::cast(num(1)?),
                            to: S::cast(num(2)?),
                        },
                        Some(&"step") => ExposureProfile::Step {
                            at: num(1)? as usize,
                            base: S::cast(num(2)?),
                            factor: S::cast(num(3)?),
                        },
                        Some(&"sinusoid") => ExposureProfile::Sinusoid {
                            min: S::cast(num(1)?),
                            max: S::cast(num(2)?),
                            period: S::cast(num(3)?),
                        },
                        other => return Err(bad(format!("unknown exposure profile '{other:?}'"))),
                    }
                }
                "noise_sigma" => spec.noise_sigma = S::cast(num(0)?),
                other => return Err(bad(format!("unknown key '{other}'"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Generated sequence plus everything needed to score a recovery against it.
pub struct SynthOutput<S: Scalar> {
    pub frames: Vec<Frame>,
    pub gt_response: ResponseModel<S>,
    pub gt_vignette: VignetteModel<S>,
    pub gt_exposures: Vec<S>,
    pub gt_result: CalibrationResult<S>,
    /// Radiance texture the crops were taken from, row-major, in [0, 1].
    pub texture: Vec<f64>,
    pub texture_width: usize,
    pub texture_height: usize,
    /// Integer crop offset of every frame into the texture.
    pub offsets: Vec<(i64, i64)>,
}

/// Render a synthetic sequence: crop the radiance texture along the sweep,
/// apply `O = f(e V(x) L)`, quantize to 8 bits, then add optional Gaussian
/// noise (clamped back into range).
pub fn generate<S: Scalar>(
    spec: &SynthSpec<S>,
    basis: Option<&Arc<ResponseBasis<S>>>,
) -> Result<SynthOutput<S>> {
    spec.validate()?;

    let gt_response = match &spec.response {
        GtResponse::Gamma(g) => {
            let inv = 1.0 / g.to_f64_lossy();
            let samples: Vec<f64> = (0..BASIS_SAMPLES)
                .map(|i| 255.0 * (i as f64 / (BASIS_SAMPLES - 1) as f64).powf(inv))
                .collect();
            ResponseModel::from_samples(&samples)?
        }
        GtResponse::Emor(coeffs) => {
            let basis = basis.ok_or_else(|| {
                Error::InvalidParameter("basis-coefficient ground truth needs a loaded basis".into())
            })?;
            let m = ResponseModel::new(Arc::clone(basis), *coeffs)?;
            m.ensure_monotone()?;
            m
        }
    };

    let gt_vignette = VignetteModel::for_frame(spec.vignette, spec.width, spec.height);
    let gt_exposures = spec.gt_exposures();

    let reach = spec.motion_radius.ceil() as usize + 8;
    let tw = spec.width + 2 * reach;
    let th = spec.height + 2 * reach;
    let texture = value_noise_texture(tw, th, spec.texture_seed);

    let offsets: Vec<(i64, i64)> = (0..spec.frames)
        .map(|i| {
            let theta = 2.0 * std::f64::consts::PI * i as f64 / spec.frames as f64;
            (
                reach as i64 + (spec.motion_radius * theta.cos()).round() as i64,
                reach as i64 + (spec.motion_radius * theta.sin()).round() as i64,
            )
        })
        .collect();

    // Vignette is static across frames; evaluate once per pixel.
    let (cx, cy): (S, S) = (
        S::cast((spec.width as f64 - 1.0) / 2.0),
        S::cast((spec.height as f64 - 1.0) / 2.0),
    );
    let vmap: Vec<S> = (0..spec.width * spec.height)
        .map(|idx| {
            let x = S::cast((idx % spec.width) as f64);
            let y = S::cast((idx / spec.width) as f64);
            gt_vignette.eval_at(x, y, cx, cy)
        })
        .collect();

    let mut noise = ChaCha8Rng::seed_from_u64(spec.noise_seed);
    let sigma = spec.noise_sigma.to_f64_lossy();

    let mut frames = Vec::with_capacity(spec.frames);
    for (i, &(ox, oy)) in offsets.iter().enumerate() {
        let e = gt_exposures[i];
        let mut data = Vec::with_capacity(spec.width * spec.height);
        for y in 0..spec.height {
            for x in 0..spec.width {
                let l = texture[(y + oy as usize) * tw + (x + ox as usize)];
                let acc = (e * vmap[y * spec.width + x] * S::cast(l))
                    .clamp(S::zero(), S::one());
                let o = gt_response.eval(acc).to_f64_lossy();
                let mut q = round_half_away(o);
                if sigma > 0.0 {
                    q = round_half_away(q + sigma * gaussian(&mut noise)).clamp(0.0, 255.0);
                }
                data.push(q as u8);
            }
        }
        frames.push(Frame::new(i, GrayImage::new(spec.width, spec.height, data)));
    }

    let gt_result = CalibrationResult::new(
        gt_response.sampled_lut(),
        spec.vignette,
        gt_exposures.clone(),
        S::one(),
        spec.width,
        spec.height,
    )?;

    Ok(SynthOutput {
        frames,
        gt_response,
        gt_vignette,
        gt_exposures,
        gt_result,
        texture,
        texture_width: tw,
        texture_height: th,
        offsets,
    })
}

/// Correspondence database with exact integer-grid tracks, bypassing the KLT
/// frontend; the paired radiances are read straight off the texture.
///
/// Used as the oracle side of recovery tests: residuals at the ground truth
/// state are pure quantization (plus injected noise).
pub fn exact_track_database<S: Scalar>(
    out: &SynthOutput<S>,
    spec: &SynthSpec<S>,
    grid_step: usize,
    patch_size: usize,
) -> (TrackDatabase<S>, Vec<Vec<S>>) {
    let half = (patch_size / 2) as i64;
    let margin = half + 2;
    let mut points = Vec::new();
    let mut radiances = Vec::new();

    // Anchor a grid of texture positions visible in frame 0.
    let (ox0, oy0) = out.offsets[0];
    let mut next_id = 0u64;
    let mut gy = margin;
    while gy < spec.height as i64 - margin {
        let mut gx = margin;
        while gx < spec.width as i64 - margin {
            let txp = gx + ox0;
            let typ = gy + oy0;
            let mut observations = Vec::new();
            for (fi, &(ox, oy)) in out.offsets.iter().enumerate() {
                let fx = txp - ox;
                let fy = typ - oy;
                if fx < margin
                    || fy < margin
                    || fx >= spec.width as i64 - margin
                    || fy >= spec.height as i64 - margin
                {
                    continue;
                }
                let img = &out.frames[fi].image;
                let mut intensities = Vec::with_capacity(patch_size * patch_size);
                let mut grad_sq = Vec::with_capacity(patch_size * patch_size);
                for dy in -half..=half {
                    for dx in -half..=half {
                        let (px, py) = ((fx + dx) as usize, (fy + dy) as usize);
                        intensities.push(S::cast(img.get(px, py) as f64));
                        let gxv = (img.get(px + 1, py) as f64 - img.get(px - 1, py) as f64) / 2.0;
                        let gyv = (img.get(px, py + 1) as f64 - img.get(px, py - 1) as f64) / 2.0;
                        grad_sq.push(S::cast(gxv * gxv + gyv * gyv));
                    }
                }
                observations.push(Observation {
                    frame_index: fi,
                    location: Vector2::new(S::cast(fx as f64), S::cast(fy as f64)),
                    patch_intensities: intensities,
                    patch_gradient_sq: grad_sq,
                });
            }
            if observations.len() >= 2 {
                let mut rad = Vec::with_capacity(patch_size * patch_size);
                for dy in -half..=half {
                    for dx in -half..=half {
                        let t = out.texture
                            [(typ + dy) as usize * out.texture_width + (txp + dx) as usize];
                        rad.push(S::cast(t));
                    }
                }
                points.push(ScenePoint {
                    id: next_id,
                    radiance: Vec::new(),
                    observations,
                });
                radiances.push(rad);
                next_id += 1;
            }
            gx += grid_step as i64;
        }
        gy += grid_step as i64;
    }

    (
        TrackDatabase {
            points,
            frame_count: spec.frames,
            width: spec.width,
            height: spec.height,
            patch_size,
        },
        radiances,
    )
}

/// Smoothed two-octave value noise spanning [0.02, 0.98].
fn value_noise_texture(w: usize, h: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let octave = |rng: &mut ChaCha8Rng, cell: usize| -> Vec<f64> {
        let gw = w / cell + 2;
        let gh = h / cell + 2;
        let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.random::<f64>()).collect();
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        (0..w * h)
            .map(|idx| {
                let fx = (idx % w) as f64 / cell as f64;
                let fy = (idx / w) as f64 / cell as f64;
                let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
                let (ax, ay) = (smooth(fx - ix as f64), smooth(fy - iy as f64));
                let v00 = lattice[iy * gw + ix];
                let v10 = lattice[iy * gw + ix + 1];
                let v01 = lattice[(iy + 1) * gw + ix];
                let v11 = lattice[(iy + 1) * gw + ix + 1];
                v00 * (1.0 - ax) * (1.0 - ay)
                    + v10 * ax * (1.0 - ay)
                    + v01 * (1.0 - ax) * ay
                    + v11 * ax * ay
            })
            .collect()
    };
    let base = octave(&mut rng, 24);
    let detail = octave(&mut rng, 9);
    let mixed: Vec<f64> = base
        .iter()
        .zip(&detail)
        .map(|(a, b)| a + 0.35 * b)
        .collect();
    let lo = mixed.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mixed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mixed
        .iter()
        .map(|v| 0.02 + 0.96 * (v - lo) / (hi - lo))
        .collect()
}

/// Round half away from zero; generator outputs are nonnegative.
#[inline]
fn round_half_away(v: f64) -> f64 {
    (v + 0.5).floor()
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn identity_spec_reproduces_quantized_crops() {
        let spec: SynthSpec<f64> = SynthSpec {
            frames: 4,
            width: 64,
            height: 48,
            motion_radius: 5.0,
            ..SynthSpec::default()
        };
        let out = generate(&spec, None).unwrap();
        for (fi, frame) in out.frames.iter().enumerate() {
            let (ox, oy) = out.offsets[fi];
            for y in (0..48).step_by(7) {
                for x in (0..64).step_by(7) {
                    let l = out.texture[(y + oy as usize) * out.texture_width + x + ox as usize];
                    let expect = (255.0 * l + 0.5).floor() as u8;
                    assert_eq!(frame.image.get(x, y), expect);
                }
            }
        }
    }

    #[test]
    fn gamma_response_hand_value() {
        // Display gamma 2.2 at mid radiance: 255 * 0.5^(1/2.2) = 186.08 -> 186.
        let g = 2.2f64;
        let expect = round_half_away(255.0 * 0.5f64.powf(1.0 / g));
        assert_eq!(expect, 186.0);

        let spec: SynthSpec<f64> = SynthSpec {
            response: GtResponse::Gamma(g),
            ..SynthSpec::default()
        };
        let out = generate(&spec, None).unwrap();
        assert_relative_eq!(out.gt_response.eval(0.5), 255.0 * 0.5f64.powf(1.0 / g), epsilon = 1e-3);
    }

    #[test]
    fn step_exposure_raises_mean_intensity() {
        let spec: SynthSpec<f64> = SynthSpec {
            frames: 20,
            width: 64,
            height: 48,
            motion_radius: 0.0,
            exposures: ExposureProfile::Step {
                at: 10,
                base: 0.3,
                factor: 2.0,
            },
            ..SynthSpec::default()
        };
        let out = generate(&spec, None).unwrap();
        let mean = |f: &Frame| -> f64 {
            f.image.data().iter().map(|&v| v as f64).sum::<f64>() / f.image.data().len() as f64
        };
        let before = mean(&out.frames[9]);
        let after = mean(&out.frames[10]);
        assert_relative_eq!(after / before, 2.0, epsilon = 0.02);
    }

    #[test]
    fn spec_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.txt");
        std::fs::write(
            &path,
            "# test spec\nsize 160 120\nframes 50\ntexture_seed 3\nmotion circle 30\n\
             response_gamma 0.7\nvignette -0.3 -0.1 -0.05\nexposure sinusoid 0.5 2.0 75\nnoise_sigma 1\n",
        )
        .unwrap();
        let spec: SynthSpec<f64> = SynthSpec::from_file(&path).unwrap();
        assert_eq!((spec.width, spec.height, spec.frames), (160, 120, 50));
        assert_eq!(spec.response, GtResponse::Gamma(0.7));
        assert_eq!(spec.vignette, [-0.3, -0.1, -0.05]);
        assert_eq!(spec.noise_sigma, 1.0);
        assert!(matches!(spec.exposures, ExposureProfile::Sinusoid { .. }));
    }

    #[test]
    fn bad_spec_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.txt");
        std::fs::write(&path, "exposure constant 0.0\n").unwrap();
        assert!(SynthSpec::<f64>::from_file(&path).is_err());
    }
}
