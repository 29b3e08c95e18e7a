//! Sampled response basis: a mean curve plus four correction curves, all on a
//! uniform 1024-point grid over [0, 1], combined linearly by the response model.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Native sample count of the basis grid.
pub const BASIS_SAMPLES: usize = 1024;
/// Number of correction curves / response coefficients.
pub const RESPONSE_COEFFS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisSource {
    /// Loaded from a basis text file.
    EmorFile,
    /// Built-in polynomial fallback.
    AnalyticFallback,
    /// Single fixed curve (no correction span), e.g. synthetic ground truth.
    Custom,
}

/// Sampled basis curves with cached derivative grids.
///
/// Invariants kept by every constructor: `f0[0] = 0`, `f0[last] = 255` and
/// `h_k[0] = h_k[last] = 0`, so any coefficient choice pins the endpoints.
#[derive(Debug, Clone)]
pub struct ResponseBasis<S: Scalar> {
    f0: Vec<S>,
    h: [Vec<S>; RESPONSE_COEFFS],
    df0: Vec<S>,
    dh: [Vec<S>; RESPONSE_COEFFS],
    source: BasisSource,
}

impl<S: Scalar> ResponseBasis<S> {
    /// Analytic fallback basis: `f0(x) = 255 x` plus the four leading
    /// principal components of a sampled gamma-curve family `255 x^t`,
    /// `t in [1, 2.6]`, relative to the identity ramp.
    ///
    /// Built the same way a measured response basis is (curve family, then
    /// PCA), so moving between gamma-like responses stays inside the span;
    /// correction curves vanish at both endpoints and any coefficient choice
    /// keeps the endpoint pins. Exponents below 1 are excluded: their
    /// infinite slope at the origin would put spikes into the components
    /// (negated coefficients cover concave shapes instead), and the gauge
    /// freedom reaches any gamma curve from this one-sided family anyway.
    pub fn analytic_fallback() -> Self {
        let n = BASIS_SAMPLES;
        let grid: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let f0: Vec<f64> = grid.iter().map(|&t| 255.0 * t).collect();

        let family = 40usize;
        let (t_lo, t_hi) = (1.0f64, 2.6f64);
        let mut deviations = nalgebra::DMatrix::<f64>::zeros(family, n);
        for (row, k) in (0..family).enumerate() {
            let t = t_lo + (t_hi - t_lo) * k as f64 / (family - 1) as f64;
            for (col, &x) in grid.iter().enumerate() {
                deviations[(row, col)] = 255.0 * (x.powf(t) - x);
            }
        }

        // PCA via the small Gram matrix of the family.
        let gram = &deviations * deviations.transpose();
        let eig = nalgebra::SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..family).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());

        let mut h: Vec<Vec<f64>> = Vec::with_capacity(RESPONSE_COEFFS);
        for &idx in order.iter().take(RESPONSE_COEFFS) {
            let u = eig.eigenvectors.column(idx);
            let mut curve = vec![0.0f64; n];
            for row in 0..family {
                let w = u[row];
                for (c, col) in curve.iter_mut().zip(0..n) {
                    *c += w * deviations[(row, col)];
                }
            }
            // Deterministic sign and an RMS of 25.5 so coefficients live
            // near unit magnitude.
            let mean: f64 = curve.iter().sum::<f64>() / n as f64;
            let flip = if mean < 0.0 { -1.0 } else { 1.0 };
            let rms = inner(&curve, &curve).sqrt();
            for c in &mut curve {
                *c *= flip * 25.5 / rms;
            }
            curve[0] = 0.0;
            curve[n - 1] = 0.0;
            h.push(curve);
        }

        Self::from_f64_curves(f0, h, BasisSource::AnalyticFallback)
    }

    /// Basis holding a single fixed curve: the four correction curves are zero.
    ///
    /// `samples` must run from 0 to 255 (small deviations are pinned exactly).
    pub fn from_curve(samples: &[f64]) -> Result<Self> {
        if samples.len() != BASIS_SAMPLES {
            return Err(Error::Response(format!(
                "expected {} samples, got {}",
                BASIS_SAMPLES,
                samples.len()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Response("non-finite sample".into()));
        }
        let n = BASIS_SAMPLES;
        if (samples[0]).abs() > 1e-6 || (samples[n - 1] - 255.0).abs() > 1e-6 {
            return Err(Error::Response(format!(
                "curve endpoints must be 0 and 255, got {} and {}",
                samples[0],
                samples[n - 1]
            )));
        }
        let mut f0 = samples.to_vec();
        f0[0] = 0.0;
        f0[n - 1] = 255.0;
        let h: Vec<Vec<f64>> = (0..RESPONSE_COEFFS).map(|_| vec![0.0; n]).collect();
        Ok(Self::from_f64_curves(f0, h, BasisSource::Custom))
    }

    /// Load a basis from its text form: a curve name line (`f0`, `h(1)` ..
    /// `h(4)`) followed by 1024 whitespace-separated samples each.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let err = |reason: String| Error::Response(format!("{}: {}", path.display(), reason));

        let mut curves: Vec<(String, Vec<f64>)> = Vec::new();
        for token in text.split_whitespace() {
            if token.starts_with('#') {
                continue;
            }
            if let Ok(v) = token.parse::<f64>() {
                match curves.last_mut() {
                    Some((_, samples)) => samples.push(v),
                    None => return Err(err(format!("sample {token} before any curve name"))),
                }
            } else {
                curves.push((token.to_string(), Vec::new()));
            }
        }

        let take = |name: &str| -> Result<Vec<f64>> {
            let (_, samples) = curves
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| err(format!("missing curve {name}")))?;
            if samples.len() != BASIS_SAMPLES {
                return Err(err(format!(
                    "curve {name} has {} samples, expected {}",
                    samples.len(),
                    BASIS_SAMPLES
                )));
            }
            Ok(samples.clone())
        };

        let n = BASIS_SAMPLES;
        // The mean curve is affinely normalized to [0, 255]; correction curves
        // get the same scale and an exact endpoint pin.
        let raw_f0 = take("f0")?;
        let (lo, hi) = (raw_f0[0], raw_f0[n - 1]);
        if hi <= lo {
            return Err(err("f0 must increase from first to last sample".into()));
        }
        let scale = 255.0 / (hi - lo);
        let f0: Vec<f64> = raw_f0.iter().map(|&v| (v - lo) * scale).collect();

        let mut h = Vec::with_capacity(RESPONSE_COEFFS);
        for k in 1..=RESPONSE_COEFFS {
            let raw = take(&format!("h({k})"))?;
            let (a, b) = (raw[0] * scale, raw[n - 1] * scale);
            let curve: Vec<f64> = raw
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let t = i as f64 / (n - 1) as f64;
                    v * scale - (a + t * (b - a))
                })
                .collect();
            h.push(curve);
        }

        Ok(Self::from_f64_curves(f0, h, BasisSource::EmorFile))
    }

    fn from_f64_curves(mut f0: Vec<f64>, h: Vec<Vec<f64>>, source: BasisSource) -> Self {
        let n = BASIS_SAMPLES;
        f0[0] = 0.0;
        f0[n - 1] = 255.0;
        let df0 = derivative_grid(&f0);
        let dh_f64: Vec<Vec<f64>> = h.iter().map(|c| derivative_grid(c)).collect();

        let cast = |v: &Vec<f64>| -> Vec<S> { v.iter().map(|&x| S::cast(x)).collect() };
        let cast4 = |v: Vec<Vec<f64>>| -> [Vec<S>; RESPONSE_COEFFS] {
            let mut it = v.into_iter().map(|c| c.iter().map(|&x| S::cast(x)).collect());
            std::array::from_fn(|_| it.next().expect("four curves"))
        };

        ResponseBasis {
            f0: cast(&f0),
            h: cast4(h),
            df0: cast(&df0),
            dh: cast4(dh_f64),
            source,
        }
    }

    pub fn source(&self) -> BasisSource {
        self.source
    }

    pub fn f0(&self) -> &[S] {
        &self.f0
    }

    pub fn h(&self, k: usize) -> &[S] {
        &self.h[k]
    }

    pub fn df0(&self) -> &[S] {
        &self.df0
    }

    pub fn dh(&self, k: usize) -> &[S] {
        &self.dh[k]
    }
}

fn inner(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / n
}

/// Per-cell slopes of the linear interpolant: the exact derivative of the
/// sampled curve, one entry per grid cell.
fn derivative_grid(samples: &[f64]) -> Vec<f64> {
    let step = 1.0 / (samples.len() - 1) as f64;
    samples.windows(2).map(|w| (w[1] - w[0]) / step).collect()
}

/// Linear interpolation of a sampled curve at `x` in [0, 1] (clamped).
#[inline]
pub(crate) fn sample_curve<S: Scalar>(samples: &[S], x: S) -> S {
    let n = samples.len();
    let t = x.clamp(S::zero(), S::one()) * S::cast((n - 1) as f64);
    let i = t.floor().to_usize().unwrap_or(0).min(n - 2);
    let frac = t - S::cast(i as f64);
    samples[i] + frac * (samples[i + 1] - samples[i])
}

/// Piecewise-constant lookup into per-cell values (e.g. derivative slopes)
/// for `x` in [0, 1] over the cells of an `n+1`-sample grid.
#[inline]
pub(crate) fn sample_cells<S: Scalar>(cells: &[S], x: S) -> S {
    let n = cells.len();
    let t = x.clamp(S::zero(), S::one()) * S::cast(n as f64);
    cells[t.floor().to_usize().unwrap_or(0).min(n - 1)]
}
