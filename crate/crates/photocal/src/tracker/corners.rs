//! Shi-Tomasi corner extraction with grid-uniform replenishment.

use nalgebra::Vector2;

use crate::scalar::Scalar;
use crate::tracker::pyramid::PyramidLevel;
use crate::tracker::TrackerConfig;

/// Minimum-eigenvalue score of the 3x3-summed structure tensor, zero inside a
/// `margin`-wide border.
pub fn min_eigenvalue_scores<S: Scalar>(level: &PyramidLevel<S>, margin: usize) -> Vec<S> {
    let (w, h) = (level.image.width, level.image.height);
    let mut scores = vec![S::zero(); w * h];
    let margin = margin.max(2);
    if w <= 2 * margin || h <= 2 * margin {
        return scores;
    }
    let half = S::cast(0.5);
    for y in margin..h - margin {
        for x in margin..w - margin {
            let mut sxx = S::zero();
            let mut syy = S::zero();
            let mut sxy = S::zero();
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let gx = level.gx.get((x as i32 + dx) as usize, (y as i32 + dy) as usize);
                    let gy = level.gy.get((x as i32 + dx) as usize, (y as i32 + dy) as usize);
                    sxx += gx * gx;
                    syy += gy * gy;
                    sxy += gx * gy;
                }
            }
            let mean = (sxx + syy) * half;
            let diff = (sxx - syy) * half;
            let det = (diff * diff + sxy * sxy).max(S::zero());
            scores[y * w + x] = mean - det.sqrt();
        }
    }
    scores
}

/// Corner candidates for the cells currently below quota.
///
/// Candidates are local score maxima above `min_eigen_quality` times the
/// global maximum; they are visited in descending score order and accepted
/// while their cell sits below `ceil(N / cells)` features, the total active
/// count stays below `N`, and no other feature lies within `patch_size`
/// pixels.
pub fn extract_corners<S: Scalar>(
    level: &PyramidLevel<S>,
    existing: &[Vector2<S>],
    cfg: &TrackerConfig<S>,
) -> Vec<Vector2<S>> {
    let (w, h) = (level.image.width, level.image.height);
    // Keep new features trackable: the KLT window must fit at the base level.
    let margin = (cfg.patch_size / 2 + 2).max(cfg.klt_window / 2 + 2);
    let scores = min_eigenvalue_scores(level, margin);

    let max_score = scores.iter().cloned().fold(S::zero(), |a, b| a.max(b));
    if !(max_score > S::zero()) {
        return Vec::new();
    }
    let threshold = cfg.min_eigen_quality * max_score;

    let cells_x = w.div_ceil(cfg.cell_size);
    let cells_y = h.div_ceil(cfg.cell_size);
    let quota = cfg.target_features.div_ceil(cells_x * cells_y);

    let cell_of = |x: f64, y: f64| -> usize {
        let cx = (x as usize / cfg.cell_size).min(cells_x - 1);
        let cy = (y as usize / cfg.cell_size).min(cells_y - 1);
        cy * cells_x + cx
    };

    let mut cell_counts = vec![0usize; cells_x * cells_y];
    for p in existing {
        cell_counts[cell_of(p.x.to_f64_lossy(), p.y.to_f64_lossy())] += 1;
    }

    // Local maxima above threshold, strongest first; ties resolved by (y, x).
    let mut candidates: Vec<(S, usize, usize)> = Vec::new();
    for y in margin..h - margin {
        for x in margin..w - margin {
            let s = scores[y * w + x];
            if s < threshold {
                continue;
            }
            let mut is_max = true;
            'nms: for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let n = scores[(y as i32 + dy) as usize * w + (x as i32 + dx) as usize];
                    if n > s || (n == s && (dy < 0 || (dy == 0 && dx < 0))) {
                        is_max = false;
                        break 'nms;
                    }
                }
            }
            if is_max {
                candidates.push((s, y, x));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let min_dist2 = S::cast((cfg.patch_size * cfg.patch_size) as f64);
    let mut total = existing.len();
    let mut accepted: Vec<Vector2<S>> = Vec::new();

    'cand: for (_, y, x) in candidates {
        if total >= cfg.target_features {
            break;
        }
        let cell = cell_of(x as f64, y as f64);
        if cell_counts[cell] >= quota {
            continue;
        }
        let p = Vector2::new(S::cast(x as f64), S::cast(y as f64));
        for q in existing.iter().chain(accepted.iter()) {
            let d = p - q;
            if d.dot(&d) < min_dist2 {
                continue 'cand;
            }
        }
        cell_counts[cell] += 1;
        total += 1;
        accepted.push(p);
    }
    accepted
}
