//! Tracking frontend: Shi-Tomasi extraction on a uniform grid, gain-robust
//! pyramidal KLT, forward-backward filtering and patch extraction, producing
//! the scene-point correspondence database the optimizer consumes.

pub mod corners;
pub mod klt;
pub mod pyramid;

pub use corners::extract_corners;
pub use klt::{forward_backward_filter, track_pair_gain_klt, FramePairGainResult, TrackOutcome};
pub use pyramid::{ImageF, Pyramid, PyramidLevel};

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::image::Frame;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct TrackerConfig<S: Scalar> {
    /// Number of active features maintained per frame.
    pub target_features: usize,
    /// Odd patch side length extracted around each tracked feature.
    pub patch_size: usize,
    /// Grid cell side for spatially uniform extraction.
    pub cell_size: usize,
    pub pyramid_levels: usize,
    /// Odd KLT window side, used at every pyramid level.
    pub klt_window: usize,
    /// Forward-backward consistency threshold in base-level pixels.
    pub fb_threshold: S,
    pub max_klt_iters: usize,
    /// Corner acceptance threshold relative to the strongest score.
    pub min_eigen_quality: S,
}

impl<S: Scalar> Default for TrackerConfig<S> {
    fn default() -> Self {
        TrackerConfig {
            target_features: 500,
            patch_size: 5,
            cell_size: 32,
            pyramid_levels: 4,
            klt_window: 21,
            fb_threshold: S::one(),
            max_klt_iters: 30,
            min_eigen_quality: S::cast(0.01),
        }
    }
}

impl<S: Scalar> TrackerConfig<S> {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParameter(msg.into()));
        if self.target_features == 0 {
            return bad("target_features must be positive");
        }
        if self.patch_size % 2 == 0 || self.patch_size == 0 {
            return bad("patch_size must be odd and positive");
        }
        if self.klt_window % 2 == 0 || self.klt_window < self.patch_size {
            return bad("klt_window must be odd and at least patch_size");
        }
        if self.cell_size == 0 || self.pyramid_levels == 0 || self.max_klt_iters == 0 {
            return bad("cell_size, pyramid_levels and max_klt_iters must be positive");
        }
        if !(self.fb_threshold > S::zero()) || !(self.min_eigen_quality > S::zero()) {
            return bad("fb_threshold and min_eigen_quality must be positive");
        }
        Ok(())
    }
}

/// One sighting of a scene point: sub-pixel location plus the interpolated
/// patch intensities and per-pixel squared gradient norms around it.
#[derive(Debug, Clone)]
pub struct Observation<S: Scalar> {
    pub frame_index: usize,
    pub location: Vector2<S>,
    pub patch_intensities: Vec<S>,
    pub patch_gradient_sq: Vec<S>,
}

/// A tracked scene point: one radiance value per patch pixel and one
/// observation per frame in which the point was visible.
#[derive(Debug, Clone)]
pub struct ScenePoint<S: Scalar> {
    pub id: u64,
    pub radiance: Vec<S>,
    pub observations: Vec<Observation<S>>,
}

/// Correspondence database for a frame range.
#[derive(Debug, Clone)]
pub struct TrackDatabase<S: Scalar> {
    pub points: Vec<ScenePoint<S>>,
    pub frame_count: usize,
    pub width: usize,
    pub height: usize,
    pub patch_size: usize,
}

impl<S: Scalar> TrackDatabase<S> {
    /// Restrict to frames `[start, end)`, rebasing frame indices to the block
    /// and keeping points observed at least twice inside it.
    pub fn slice(&self, start: usize, end: usize) -> TrackDatabase<S> {
        let points = self
            .points
            .iter()
            .filter_map(|p| {
                let obs: Vec<Observation<S>> = p
                    .observations
                    .iter()
                    .filter(|o| o.frame_index >= start && o.frame_index < end)
                    .map(|o| {
                        let mut o = o.clone();
                        o.frame_index -= start;
                        o
                    })
                    .collect();
                if obs.len() >= 2 {
                    Some(ScenePoint {
                        id: p.id,
                        radiance: Vec::new(),
                        observations: obs,
                    })
                } else {
                    None
                }
            })
            .collect();
        TrackDatabase {
            points,
            frame_count: end - start,
            width: self.width,
            height: self.height,
            patch_size: self.patch_size,
        }
    }

    pub fn total_observations(&self) -> usize {
        self.points.iter().map(|p| p.observations.len()).sum()
    }

    /// Per-frame CSV dump of the tracks, one row per observation.
    pub fn write_tracks_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("point_id,frame,x,y,status\n");
        for p in &self.points {
            for o in &p.observations {
                writeln!(
                    out,
                    "{},{},{:.3},{:.3},tracked",
                    p.id,
                    o.frame_index,
                    o.location.x.to_f64_lossy(),
                    o.location.y.to_f64_lossy()
                )
                .unwrap();
            }
            if let Some(last) = p.observations.last() {
                if last.frame_index + 1 < self.frame_count {
                    writeln!(
                        out,
                        "{},{},{:.3},{:.3},lost",
                        p.id,
                        last.frame_index + 1,
                        last.location.x.to_f64_lossy(),
                        last.location.y.to_f64_lossy()
                    )
                    .unwrap();
                }
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Bilinear patch sample around `loc`: intensities and squared gradient norm
/// per patch pixel. `None` when the patch (plus the gradient ring) would
/// leave the image.
pub fn extract_patch<S: Scalar>(
    level: &PyramidLevel<S>,
    loc: Vector2<S>,
    patch_size: usize,
) -> Option<(Vec<S>, Vec<S>)> {
    let half = (patch_size / 2) as i32;
    let margin = S::cast((half + 2) as f64);
    let (w, h) = (level.image.width, level.image.height);
    if !(loc.x >= margin
        && loc.y >= margin
        && loc.x <= S::cast((w - 1) as f64) - margin
        && loc.y <= S::cast((h - 1) as f64) - margin)
    {
        return None;
    }
    let n = patch_size * patch_size;
    let mut intensities = Vec::with_capacity(n);
    let mut grad_sq = Vec::with_capacity(n);
    for dy in -half..=half {
        for dx in -half..=half {
            let x = loc.x + S::cast(dx as f64);
            let y = loc.y + S::cast(dy as f64);
            intensities.push(level.image.sample(x, y));
            let gx = level.gx.sample(x, y);
            let gy = level.gy.sample(x, y);
            grad_sq.push(gx * gx + gy * gy);
        }
    }
    Some((intensities, grad_sq))
}

struct ActiveTrack<S: Scalar> {
    point_idx: usize,
    pos: Vector2<S>,
}

/// Incremental tracking over a frame stream; collects the database as frames
/// arrive. Used both by the batch entry point and the online pipeline.
pub struct SequenceTracker<S: Scalar> {
    cfg: TrackerConfig<S>,
    points: Vec<ScenePoint<S>>,
    active: Vec<ActiveTrack<S>>,
    prev: Option<Pyramid<S>>,
    frames_seen: usize,
    next_id: u64,
    width: usize,
    height: usize,
}

impl<S: Scalar> SequenceTracker<S> {
    pub fn new(cfg: TrackerConfig<S>) -> Result<Self> {
        cfg.validate()?;
        Ok(SequenceTracker {
            cfg,
            points: Vec::new(),
            active: Vec::new(),
            prev: None,
            frames_seen: 0,
            next_id: 0,
            width: 0,
            height: 0,
        })
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    pub fn active_count(&self) -> usize {
        self.active.len()
    }

    /// Track into the next frame: survivors keep their points, the
    /// forward-backward filter prunes inconsistent tracks, and new corners
    /// top the grid back up to the feature budget.
    pub fn process_frame(&mut self, frame: &Frame) -> Result<()> {
        let img = &frame.image;
        if self.frames_seen == 0 {
            self.width = img.width();
            self.height = img.height();
        } else if img.width() != self.width || img.height() != self.height {
            return Err(Error::InvalidParameter(format!(
                "frame {} is {}x{}, sequence started {}x{}",
                frame.index,
                img.width(),
                img.height(),
                self.width,
                self.height
            )));
        }
        let frame_index = self.frames_seen;
        let pyramid = Pyramid::build(img, self.cfg.pyramid_levels, self.cfg.klt_window);

        if let Some(prev) = &self.prev {
            if !self.active.is_empty() {
                let origins: Vec<Vector2<S>> = self.active.iter().map(|a| a.pos).collect();
                let mut result = track_pair_gain_klt(prev, &pyramid, &origins, &self.cfg);
                forward_backward_filter(prev, &pyramid, &origins, &mut result, &self.cfg);

                let mut survivors = Vec::with_capacity(self.active.len());
                for (track, outcome) in self.active.drain(..).zip(result.tracks) {
                    if !outcome.tracked {
                        continue;
                    }
                    let mut track = track;
                    track.pos = outcome.pos;
                    if let Some((intensities, grad_sq)) =
                        extract_patch(pyramid.base(), track.pos, self.cfg.patch_size)
                    {
                        self.points[track.point_idx].observations.push(Observation {
                            frame_index,
                            location: track.pos,
                            patch_intensities: intensities,
                            patch_gradient_sq: grad_sq,
                        });
                    }
                    survivors.push(track);
                }
                self.active = survivors;
            }
        }

        // Replenish cells that fell below quota.
        let existing: Vec<Vector2<S>> = self.active.iter().map(|a| a.pos).collect();
        for pos in extract_corners(pyramid.base(), &existing, &self.cfg) {
            let Some((intensities, grad_sq)) =
                extract_patch(pyramid.base(), pos, self.cfg.patch_size)
            else {
                continue;
            };
            let point_idx = self.points.len();
            self.points.push(ScenePoint {
                id: self.next_id,
                radiance: Vec::new(),
                observations: vec![Observation {
                    frame_index,
                    location: pos,
                    patch_intensities: intensities,
                    patch_gradient_sq: grad_sq,
                }],
            });
            self.next_id += 1;
            self.active.push(ActiveTrack { point_idx, pos });
        }

        self.prev = Some(pyramid);
        self.frames_seen += 1;
        Ok(())
    }

    /// Observations recorded for the most recent frame, with their point ids.
    pub fn latest_observations(&self) -> Vec<(u64, &Observation<S>)> {
        if self.frames_seen == 0 {
            return Vec::new();
        }
        let frame = self.frames_seen - 1;
        self.active
            .iter()
            .filter_map(|a| {
                let p = &self.points[a.point_idx];
                p.observations
                    .last()
                    .filter(|o| o.frame_index == frame)
                    .map(|o| (p.id, o))
            })
            .collect()
    }

    /// Database over every frame seen so far.
    pub fn database(&self) -> TrackDatabase<S> {
        TrackDatabase {
            points: self.points.clone(),
            frame_count: self.frames_seen,
            width: self.width,
            height: self.height,
            patch_size: self.cfg.patch_size,
        }
    }

    /// Database restricted to frames `[start, end)` (rebased indices).
    pub fn database_view(&self, start: usize, end: usize) -> TrackDatabase<S> {
        self.database().slice(start, end)
    }

    pub fn into_database(self) -> TrackDatabase<S> {
        TrackDatabase {
            points: self.points,
            frame_count: self.frames_seen,
            width: self.width,
            height: self.height,
            patch_size: self.cfg.patch_size,
        }
    }
}

/// Track a whole sequence and return the correspondence database.
pub fn build_track_database<S: Scalar>(
    frames: &[Frame],
    cfg: &TrackerConfig<S>,
) -> Result<TrackDatabase<S>> {
    if frames.len() < 2 {
        return Err(Error::InsufficientCorrespondences(
            "need at least 2 frames to track".into(),
        ));
    }
    let mut tracker = SequenceTracker::new(cfg.clone())?;
    for frame in frames {
        tracker.process_frame(frame)?;
    }
    Ok(tracker.into_database())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::GrayImage;
    use rand::{Rng, SeedableRng};

    fn textured(w: usize, h: usize, seed: u64) -> GrayImage {
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
                let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
                let (ax, ay) = (fx - ix as f64, fy - iy as f64);
                let v = lattice[iy * gw + ix] * (1.0 - ax) * (1.0 - ay)
                    + lattice[iy * gw + ix + 1] * ax * (1.0 - ay)
                    + lattice[(iy + 1) * gw + ix] * (1.0 - ax) * ay
                    + lattice[(iy + 1) * gw + ix + 1] * ax * ay;
                img.set(x, y, (20.0 + v * 210.0).round() as u8);
            }
        }
        img
    }

    #[test]
    fn patch_of_constant_image_is_flat() {
        let img = GrayImage::filled(32, 32, 77);
        let pyr: Pyramid<f64> = Pyramid::build(&img, 1, 8);
        let (ints, grads) =
            extract_patch(pyr.base(), Vector2::new(16.0, 16.0), 5).unwrap();
        assert_eq!(ints.len(), 25);
        assert!(ints.iter().all(|&v| (v - 77.0).abs() < 1e-12));
        assert!(grads.iter().all(|&g| g.abs() < 1e-12));
    }

    #[test]
    fn patch_of_ramp_has_constant_gradient() {
        let mut img = GrayImage::filled(32, 32, 0);
        for y in 0..32 {
            for x in 0..32 {
                img.set(x, y, (2 * x) as u8);
            }
        }
        let pyr: Pyramid<f64> = Pyramid::build(&img, 1, 8);
        let (_, grads) = extract_patch(pyr.base(), Vector2::new(16.0, 16.0), 5).unwrap();
        assert!(grads.iter().all(|&g| (g - 4.0).abs() < 1e-9), "{grads:?}");
    }

    #[test]
    fn patch_near_border_dropped() {
        let img = GrayImage::filled(32, 32, 10);
        let pyr: Pyramid<f64> = Pyramid::build(&img, 1, 8);
        assert!(extract_patch(pyr.base(), Vector2::new(1.0, 16.0), 5).is_none());
    }

    #[test]
    fn two_identical_frames_give_two_observations_each() {
        let img = textured(128, 96, 21);
        let frames = vec![
            Frame::new(0, img.clone()),
            Frame::new(1, img.clone()),
        ];
        let cfg = TrackerConfig {
            target_features: 60,
            ..TrackerConfig::default()
        };
        let db: TrackDatabase<f64> = build_track_database(&frames, &cfg).unwrap();
        assert!(!db.points.is_empty());
        let with_two = db
            .points
            .iter()
            .filter(|p| p.observations.len() == 2)
            .count();
        assert!(with_two * 10 >= db.points.len() * 9, "{with_two}/{}", db.points.len());
        for p in &db.points {
            if p.observations.len() == 2 {
                let d = p.observations[0].location - p.observations[1].location;
                assert!(d.norm() < 0.1);
            }
        }
    }

    #[test]
    fn panning_sequence_replenishes_features() {
        // Pan a window across a wide texture; features exiting on the left
        // are replaced by fresh extractions.
        let big = textured(400, 96, 33);
        let mut frames = Vec::new();
        for i in 0..8usize {
            let ox = i * 12;
            let mut img = GrayImage::filled(128, 96, 0);
            for y in 0..96 {
                for x in 0..128 {
                    img.set(x, y, big.get(x + ox, y));
                }
            }
            frames.push(Frame::new(i, img));
        }
        let cfg = TrackerConfig {
            target_features: 80,
            ..TrackerConfig::default()
        };
        let mut tracker: SequenceTracker<f64> = SequenceTracker::new(cfg).unwrap();
        for f in &frames {
            tracker.process_frame(f).unwrap();
            assert!(tracker.active_count() <= 80);
        }
        // Still near budget at the end despite constant feature loss.
        assert!(tracker.active_count() >= 40, "{}", tracker.active_count());
        let db = tracker.into_database();
        assert!(db.points.len() > 80, "replenishment never happened");
    }

    #[test]
    fn textureless_sequence_yields_empty_database() {
        let img = GrayImage::filled(96, 96, 128);
        let frames = vec![Frame::new(0, img.clone()), Frame::new(1, img)];
        let cfg = TrackerConfig::default();
        let db: TrackDatabase<f64> = build_track_database(&frames, &cfg).unwrap();
        assert!(db.points.is_empty());
    }

    #[test]
    fn slice_rebases_frames() {
        let img = textured(128, 96, 5);
        let frames: Vec<Frame> = (0..5).map(|i| Frame::new(i, img.clone())).collect();
        let cfg = TrackerConfig {
            target_features: 40,
            ..TrackerConfig::default()
        };
        let db: TrackDatabase<f64> = build_track_database(&frames, &cfg).unwrap();
        let block = db.slice(2, 5);
        assert_eq!(block.frame_count, 3);
        for p in &block.points {
            assert!(p.observations.len() >= 2);
            for o in &p.observations {
                assert!(o.frame_index < 3);
            }
        }
    }
}
