//! Gain-robust pyramidal KLT: joint estimation of per-feature displacements
//! and one multiplicative intensity gain per frame pair.

use nalgebra::Vector2;

use crate::scalar::Scalar;
use crate::tracker::pyramid::{Pyramid, PyramidLevel};
use crate::tracker::TrackerConfig;

/// Per-feature outcome of one frame-pair track.
#[derive(Debug, Clone)]
pub struct TrackOutcome<S: Scalar> {
    /// Position in the next frame (base-level pixels); meaningless when lost.
    pub pos: Vector2<S>,
    pub tracked: bool,
}

/// Joint result for one frame pair.
#[derive(Debug, Clone)]
pub struct FramePairGainResult<S: Scalar> {
    /// Multiplicative intensity ratio next/prev shared by all features.
    pub gain: S,
    pub tracks: Vec<TrackOutcome<S>>,
}

impl<S: Scalar> FramePairGainResult<S> {
    pub fn tracked_count(&self) -> usize {
        self.tracks.iter().filter(|t| t.tracked).count()
    }
}

struct FeatureWork<S: Scalar> {
    origin: Vector2<S>,
    disp: Vector2<S>,
    lost: bool,
    /// Template intensities at the current level, sampled once per level.
    template: Vec<S>,
    active_at_level: bool,
}

/// Accumulated per-feature blocks of the joint normal equations.
#[derive(Clone, Copy)]
struct FeatureBlocks<S: Scalar> {
    b: [S; 3],   // symmetric 2x2: [b00, b01, b11]
    c: [S; 2],   // gain/displacement coupling
    rhs: [S; 2], // displacement right-hand side
}

/// Minimize `sum_f sum_w (g I_prev(x_w) - I_next(x_w + d_f))^2` per level,
/// one shared gain and one displacement per feature. The normal equations are
/// arrow-shaped; the 2x2 feature blocks are eliminated onto the scalar gain
/// (Schur complement), then back-substituted.
pub fn track_pair_gain_klt<S: Scalar>(
    prev: &Pyramid<S>,
    next: &Pyramid<S>,
    features: &[Vector2<S>],
    cfg: &TrackerConfig<S>,
) -> FramePairGainResult<S> {
    let mut gain = S::one();
    let mut work: Vec<FeatureWork<S>> = features
        .iter()
        .map(|&origin| FeatureWork {
            origin,
            disp: Vector2::zeros(),
            lost: false,
            template: Vec::new(),
            active_at_level: false,
        })
        .collect();

    let levels = prev.num_levels().min(next.num_levels());
    let half = (cfg.klt_window / 2) as i32;
    let window = S::cast(cfg.klt_window as f64);

    for level in (0..levels).rev() {
        let pl = prev.level(level);
        let nl = next.level(level);
        let scale = S::cast(1.0 / (1 << level) as f64);

        // Sample templates for features whose window fits at this level.
        for f in work.iter_mut() {
            f.active_at_level = false;
            if f.lost {
                continue;
            }
            let base = f.origin * scale;
            if !window_in_bounds(pl, base, half) {
                continue;
            }
            f.template.clear();
            for wy in -half..=half {
                for wx in -half..=half {
                    f.template.push(
                        pl.image
                            .sample(base.x + S::cast(wx as f64), base.y + S::cast(wy as f64)),
                    );
                }
            }
            f.active_at_level = true;
        }

        for _iter in 0..cfg.max_klt_iters {
            let mut a_gain = S::zero();
            let mut rhs_gain = S::zero();
            let mut blocks: Vec<Option<FeatureBlocks<S>>> = vec![None; work.len()];

            for (fi, f) in work.iter_mut().enumerate() {
                if f.lost || !f.active_at_level {
                    continue;
                }
                let base = f.origin * scale;
                let target = base + f.disp;
                if !window_in_bounds(nl, target, half) {
                    if level == 0 {
                        f.lost = true;
                    } else {
                        f.active_at_level = false;
                    }
                    continue;
                }

                let mut blk = FeatureBlocks {
                    b: [S::zero(); 3],
                    c: [S::zero(); 2],
                    rhs: [S::zero(); 2],
                };
                let mut ti = 0usize;
                for wy in -half..=half {
                    for wx in -half..=half {
                        let sx = target.x + S::cast(wx as f64);
                        let sy = target.y + S::cast(wy as f64);
                        let p = f.template[ti];
                        ti += 1;
                        let n = nl.image.sample(sx, sy);
                        let gx = nl.gx.sample(sx, sy);
                        let gy = nl.gy.sample(sx, sy);
                        let r = gain * p - n;

                        a_gain += p * p;
                        rhs_gain -= p * r;
                        blk.b[0] += gx * gx;
                        blk.b[1] += gx * gy;
                        blk.b[2] += gy * gy;
                        blk.c[0] -= p * gx;
                        blk.c[1] -= p * gy;
                        blk.rhs[0] += gx * r;
                        blk.rhs[1] += gy * r;
                    }
                }

                let trace = blk.b[0] + blk.b[2];
                let det = blk.b[0] * blk.b[2] - blk.b[1] * blk.b[1];
                if !(det > S::cast(1e-10) * trace * trace) || !(trace > S::zero()) {
                    // Degenerate structure tensor: untrackable here.
                    if level == 0 {
                        f.lost = true;
                    } else {
                        f.active_at_level = false;
                    }
                    continue;
                }
                blocks[fi] = Some(blk);
            }

            // Schur complement onto the gain scalar.
            let mut s_gain = a_gain;
            let mut s_rhs = rhs_gain;
            for blk in blocks.iter().flatten() {
                let (inv, _) = invert_sym2(blk.b);
                let bc = apply_sym2(inv, blk.c);
                s_gain -= blk.c[0] * bc[0] + blk.c[1] * bc[1];
                let br = apply_sym2(inv, blk.rhs);
                s_rhs -= blk.c[0] * br[0] + blk.c[1] * br[1];
            }

            let delta_gain = if s_gain > S::cast(1e-12) {
                s_rhs / s_gain
            } else {
                S::zero()
            };

            let mut max_step = S::zero();
            for (fi, f) in work.iter_mut().enumerate() {
                let Some(blk) = &blocks[fi] else { continue };
                let (inv, _) = invert_sym2(blk.b);
                let rhs = [
                    blk.rhs[0] - blk.c[0] * delta_gain,
                    blk.rhs[1] - blk.c[1] * delta_gain,
                ];
                let dd = apply_sym2(inv, rhs);
                f.disp.x += dd[0];
                f.disp.y += dd[1];
                let step = (dd[0] * dd[0] + dd[1] * dd[1]).sqrt();
                max_step = max_step.max(step);
                if f.disp.norm() > window || !f.disp.x.is_finite() || !f.disp.y.is_finite() {
                    f.lost = true;
                }
            }

            gain += delta_gain;
            if !(gain > S::zero()) || !gain.is_finite() {
                gain = S::one();
            }
            if max_step < S::cast(5e-3) && delta_gain.abs() < S::cast(1e-5) {
                break;
            }
        }

        // Carry displacements down to the next finer level.
        if level > 0 {
            for f in work.iter_mut() {
                f.disp *= S::cast(2.0);
            }
        }
    }

    let tracks = work
        .into_iter()
        .map(|f| {
            let pos = f.origin + f.disp;
            let tracked = !f.lost
                && f.active_at_level
                && pos.x.is_finite()
                && pos.y.is_finite();
            TrackOutcome { pos, tracked }
        })
        .collect::<Vec<_>>();

    let any = tracks.iter().any(|t| t.tracked);
    FramePairGainResult {
        gain: if any { gain } else { S::one() },
        tracks,
    }
}

/// Re-track surviving features from `next` back to `prev` and drop those that
/// land more than `fb_threshold` away from their origin.
pub fn forward_backward_filter<S: Scalar>(
    prev: &Pyramid<S>,
    next: &Pyramid<S>,
    origins: &[Vector2<S>],
    result: &mut FramePairGainResult<S>,
    cfg: &TrackerConfig<S>,
) {
    if !cfg.fb_threshold.is_finite() {
        return;
    }
    let survivors: Vec<usize> = result
        .tracks
        .iter()
        .enumerate()
        .filter(|(_, t)| t.tracked)
        .map(|(i, _)| i)
        .collect();
    if survivors.is_empty() {
        return;
    }
    let forward_pos: Vec<Vector2<S>> = survivors.iter().map(|&i| result.tracks[i].pos).collect();
    let back = track_pair_gain_klt(next, prev, &forward_pos, cfg);
    for (k, &i) in survivors.iter().enumerate() {
        let ok = back.tracks[k].tracked
            && (back.tracks[k].pos - origins[i]).norm() <= cfg.fb_threshold;
        if !ok {
            result.tracks[i].tracked = false;
        }
    }
}

fn window_in_bounds<S: Scalar>(level: &PyramidLevel<S>, center: Vector2<S>, half: i32) -> bool {
    let m = S::cast((half + 1) as f64);
    center.x - m >= S::zero()
        && center.y - m >= S::zero()
        && center.x + m <= S::cast((level.image.width - 1) as f64)
        && center.y + m <= S::cast((level.image.height - 1) as f64)
}

#[inline]
fn invert_sym2<S: Scalar>(b: [S; 3]) -> ([S; 3], S) {
    let det = b[0] * b[2] - b[1] * b[1];
    ([b[2] / det, -b[1] / det, b[0] / det], det)
}

#[inline]
fn apply_sym2<S: Scalar>(m: [S; 3], v: [S; 2]) -> [S; 2] {
    [m[0] * v[0] + m[1] * v[1], m[1] * v[0] + m[2] * v[1]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::GrayImage;
    use rand::{Rng, SeedableRng};

    fn textured_image(w: usize, h: usize, seed: u64, lo: u8, hi: u8) -> GrayImage {
        // Smooth random texture: random lattice values, bilinear upsampled.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let cell = 8usize;
        let gw = w / cell + 2;
        let gh = h / cell + 2;
        let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.random::<f64>()).collect();
        let mut img = GrayImage::filled(w, h, 0);
        for y in 0..h {
            for x in 0..w {
                let fx = x as f64 / cell as f64;
                let fy = y as f64 / cell as f64;
                let ix = fx.floor() as usize;
                let iy = fy.floor() as usize;
                let ax = fx - ix as f64;
                let ay = fy - iy as f64;
                let v00 = lattice[iy * gw + ix];
                let v10 = lattice[iy * gw + ix + 1];
                let v01 = lattice[(iy + 1) * gw + ix];
                let v11 = lattice[(iy + 1) * gw + ix + 1];
                let v = v00 * (1.0 - ax) * (1.0 - ay)
                    + v10 * ax * (1.0 - ay)
                    + v01 * (1.0 - ax) * ay
                    + v11 * ax * ay;
                img.set(x, y, (lo as f64 + v * (hi - lo) as f64).round() as u8);
            }
        }
        img
    }

    fn grid_features(w: usize, h: usize, step: usize, margin: usize) -> Vec<Vector2<f64>> {
        let mut out = Vec::new();
        let mut y = margin;
        while y < h - margin {
            let mut x = margin;
            while x < w - margin {
                out.push(Vector2::new(x as f64, y as f64));
                x += step;
            }
            y += step;
        }
        out
    }

    #[test]
    fn identity_pair_gives_unit_gain_zero_motion() {
        let img = textured_image(128, 96, 3, 20, 230);
        let cfg = TrackerConfig::default();
        let pyr: Pyramid<f64> = Pyramid::build(&img, cfg.pyramid_levels, cfg.klt_window);
        let feats = grid_features(128, 96, 16, 16);
        let res = track_pair_gain_klt(&pyr, &pyr, &feats, &cfg);
        assert!((res.gain - 1.0).abs() < 1e-6);
        for (f, t) in feats.iter().zip(&res.tracks) {
            assert!(t.tracked);
            assert!((t.pos - f).norm() < 1e-6);
        }
    }

    #[test]
    fn gain_pair_recovers_ratio() {
        // next = 1.3 * prev with no motion; texture kept clear of saturation.
        let prev = textured_image(128, 96, 7, 20, 180);
        let mut next = prev.clone();
        for y in 0..96 {
            for x in 0..128 {
                let v = (prev.get(x, y) as f64 * 1.3).round().min(255.0) as u8;
                next.set(x, y, v);
            }
        }
        let cfg = TrackerConfig::default();
        let p0 = Pyramid::build(&prev, cfg.pyramid_levels, cfg.klt_window);
        let p1 = Pyramid::build(&next, cfg.pyramid_levels, cfg.klt_window);
        let feats = grid_features(128, 96, 16, 16);
        let res = track_pair_gain_klt(&p0, &p1, &feats, &cfg);
        assert!(
            (res.gain - 1.3).abs() < 0.013,
            "gain {} not within 1% of 1.3",
            res.gain
        );
        for (f, t) in feats.iter().zip(&res.tracks) {
            if t.tracked {
                assert!((t.pos - f).norm() < 0.2, "residual motion {}", (t.pos - f).norm());
            }
        }
    }

    #[test]
    fn translation_pair_recovers_shift() {
        let prev = textured_image(128, 96, 11, 20, 230);
        // next(x) = prev(x - 3): content moves 3 px to the right.
        let mut next = GrayImage::filled(128, 96, 0);
        for y in 0..96 {
            for x in 0..128usize {
                let sx = x.saturating_sub(3);
                next.set(x, y, prev.get(sx, y));
            }
        }
        let cfg = TrackerConfig::default();
        let p0 = Pyramid::build(&prev, cfg.pyramid_levels, cfg.klt_window);
        let p1 = Pyramid::build(&next, cfg.pyramid_levels, cfg.klt_window);
        let feats = grid_features(128, 96, 16, 20);
        let res = track_pair_gain_klt(&p0, &p1, &feats, &cfg);
        assert!((res.gain - 1.0).abs() < 0.02, "gain {}", res.gain);
        let mut checked = 0;
        for (f, t) in feats.iter().zip(&res.tracks) {
            if t.tracked {
                let d = t.pos - f;
                assert!(
                    (d.x - 3.0).abs() <= 0.1 && d.y.abs() <= 0.1,
                    "displacement {d:?}"
                );
                checked += 1;
            }
        }
        assert!(checked > feats.len() / 2);
    }

    #[test]
    fn all_lost_returns_unit_gain() {
        let flat = GrayImage::filled(64, 64, 50);
        let cfg = TrackerConfig::default();
        let pyr: Pyramid<f64> = Pyramid::build(&flat, cfg.pyramid_levels, cfg.klt_window);
        let feats = vec![Vector2::new(32.0, 32.0)];
        let res = track_pair_gain_klt(&pyr, &pyr, &feats, &cfg);
        assert_eq!(res.tracked_count(), 0);
        assert_eq!(res.gain, 1.0);
    }

    #[test]
    fn forward_backward_keeps_identity_and_infinite_threshold_disables() {
        let img = textured_image(128, 96, 5, 20, 230);
        let cfg = TrackerConfig::default();
        let pyr: Pyramid<f64> = Pyramid::build(&img, cfg.pyramid_levels, cfg.klt_window);
        let feats = grid_features(128, 96, 16, 16);
        let mut res = track_pair_gain_klt(&pyr, &pyr, &feats, &cfg);
        let before = res.tracked_count();
        forward_backward_filter(&pyr, &pyr, &feats, &mut res, &cfg);
        assert_eq!(res.tracked_count(), before);

        // Threshold disabled: a fabricated bad track survives.
        let mut res = track_pair_gain_klt(&pyr, &pyr, &feats, &cfg);
        res.tracks[0].pos += Vector2::new(5.0, 5.0);
        let loose = TrackerConfig {
            fb_threshold: f64::INFINITY,
            ..cfg.clone()
        };
        let before = res.tracked_count();
        forward_backward_filter(&pyr, &pyr, &feats, &mut res, &loose);
        assert_eq!(res.tracked_count(), before);
    }

    #[test]
    fn forward_backward_drops_inconsistent_track() {
        let img = textured_image(128, 96, 5, 20, 230);
        let cfg = TrackerConfig::default();
        let pyr: Pyramid<f64> = Pyramid::build(&img, cfg.pyramid_levels, cfg.klt_window);
        let feats = grid_features(128, 96, 16, 16);
        let mut res = track_pair_gain_klt(&pyr, &pyr, &feats, &cfg);
        // Inject a drifted landing position: tracking back from there lands
        // at the drifted spot, far from the origin.
        res.tracks[0].pos += Vector2::new(8.0, 0.0);
        forward_backward_filter(&pyr, &pyr, &feats, &mut res, &cfg);
        assert!(!res.tracks[0].tracked);
    }
}
