//! Online calibration: a realtime frontend (tracking, windowed linear
//! exposure estimation, correction with the current estimates) decoupled from
//! a background backend that refines response and vignette on fixed-size
//! blocks of tracked frames.
//!
//! Snapshot hand-off is pipelined on block boundaries: the job spawned at one
//! boundary is collected and published at the next, so the concurrent mode
//! and the synchronous test mode produce identical outputs frame for frame.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;
use std::thread::JoinHandle;

use crate::error::{Error, Result};
use crate::image::{corner_radius, Frame};
use crate::io::CalibrationResult;
use crate::models::{ResponseBasis, ResponseModel, VignetteModel};
use crate::optimizer::{
    check_observability, optimize_rounds, ExposureLayout, OptimizerConfig, ResidualTable,
};
use crate::pipeline::correct::{correct_frame, CorrectedFrame};
use crate::scalar::Scalar;
use crate::state::CalibrationState;
use crate::synth::lut_eval;
use crate::tracker::{SequenceTracker, TrackDatabase, TrackerConfig};

#[derive(Debug, Clone)]
pub struct OnlineConfig<S: Scalar> {
    /// Window length for the fast linear exposure solver.
    pub exposure_window: usize,
    /// Tracked frames per backend optimization block.
    pub backend_block: usize,
    /// Only every `exposure_stride`-th exposure is free in the backend;
    /// the rest are geometric interpolations.
    pub exposure_stride: usize,
    /// Optimization rounds per backend block.
    pub backend_rounds: usize,
    /// Run the backend inline at block boundaries instead of on a thread.
    pub sync: bool,
    pub tracker: TrackerConfig<S>,
    pub optimizer: OptimizerConfig<S>,
}

impl<S: Scalar> Default for OnlineConfig<S> {
    fn default() -> Self {
        OnlineConfig {
            exposure_window: 10,
            backend_block: 100,
            exposure_stride: 5,
            backend_rounds: 3,
            sync: false,
            tracker: TrackerConfig::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl<S: Scalar> OnlineConfig<S> {
    pub fn validate(&self) -> Result<()> {
        if self.exposure_window < 2 {
            return Err(Error::InvalidParameter(
                "exposure window must be at least 2".into(),
            ));
        }
        if self.backend_block < 2 || self.exposure_stride == 0 || self.backend_rounds == 0 {
            return Err(Error::InvalidParameter(
                "backend block, stride and rounds must be positive".into(),
            ));
        }
        self.tracker.validate()?;
        self.optimizer.validate()
    }
}

/// Immutable response/vignette estimate published to the frontend.
#[derive(Debug, Clone)]
pub struct Snapshot<S: Scalar> {
    pub response: ResponseModel<S>,
    pub vignette: VignetteModel<S>,
    /// 256-entry inverse of the response, for correction and the linear
    /// exposure solver.
    pub inverse: Vec<S>,
}

impl<S: Scalar> Snapshot<S> {
    fn new(response: ResponseModel<S>, vignette: VignetteModel<S>) -> Option<Self> {
        let inverse = response.invert().ok()?;
        Some(Snapshot {
            response,
            vignette,
            inverse,
        })
    }

    #[inline]
    fn inverse_at(&self, o: S) -> S {
        lut_eval(&self.inverse, o / S::cast(255.0))
    }
}

/// One observed patch pixel set for the exposure window.
struct WindowObs<S: Scalar> {
    point: u64,
    intensities: Vec<S>,
    weight_grad: Vec<S>,
    r2: Vec<S>,
}

struct WindowEntry<S: Scalar> {
    obs: Vec<WindowObs<S>>,
}

enum Pending<S: Scalar> {
    None,
    Ready(Box<Option<Snapshot<S>>>),
    Running(JoinHandle<Option<Snapshot<S>>>),
}

/// Per-frame output of the online frontend.
pub struct OnlineFrameOutput<S: Scalar> {
    pub frame_index: usize,
    /// Exposure estimate, gauge-chained to the previous frames.
    pub exposure: S,
    pub corrected: CorrectedFrame<S>,
}

struct BackendJob<S: Scalar> {
    db: TrackDatabase<S>,
    seeds: Vec<S>,
    response: ResponseModel<S>,
    vignette: VignetteModel<S>,
    inverse: Vec<S>,
    optimizer: OptimizerConfig<S>,
    stride: usize,
    rounds: usize,
}

/// Streaming calibrator. Feed frames in order; collect the final calibration
/// with [`finish`](Self::finish).
pub struct OnlineCalibrator<S: Scalar + 'static> {
    cfg: OnlineConfig<S>,
    tracker: SequenceTracker<S>,
    window: VecDeque<WindowEntry<S>>,
    snapshot: Arc<Snapshot<S>>,
    pending: Pending<S>,
    exposures: Vec<S>,
    width: usize,
    height: usize,
}

impl<S: Scalar + 'static> OnlineCalibrator<S> {
    pub fn new(cfg: OnlineConfig<S>, basis: &Arc<ResponseBasis<S>>) -> Result<Self> {
        cfg.validate()?;
        let response = ResponseModel::unit(Arc::clone(basis));
        // Placeholder normalizer until the first frame fixes the geometry.
        let vignette = VignetteModel::new([S::zero(); 3], S::one());
        let snapshot = Snapshot::new(response, vignette)
            .ok_or_else(|| Error::Response("initial response not invertible".into()))?;
        Ok(OnlineCalibrator {
            tracker: SequenceTracker::new(cfg.tracker.clone())?,
            cfg,
            window: VecDeque::new(),
            snapshot: Arc::new(snapshot),
            pending: Pending::None,
            exposures: Vec::new(),
            width: 0,
            height: 0,
        })
    }

    pub fn snapshot(&self) -> &Snapshot<S> {
        &self.snapshot
    }

    pub fn frames_seen(&self) -> usize {
        self.tracker.frames_seen()
    }

    /// Exposure estimates emitted so far, one per frame, in the frontend
    /// gauge.
    pub fn exposures(&self) -> &[S] {
        &self.exposures
    }

    pub fn process_frame(&mut self, frame: &Frame) -> Result<OnlineFrameOutput<S>> {
        if self.width == 0 {
            self.width = frame.image.width();
            self.height = frame.image.height();
            let vignette = VignetteModel::for_frame([S::zero(); 3], self.width, self.height);
            let snap = Snapshot {
                response: self.snapshot.response.clone(),
                vignette,
                inverse: self.snapshot.inverse.clone(),
            };
            self.snapshot = Arc::new(snap);
        }
        self.tracker.process_frame(frame)?;
        let frame_index = self.tracker.frames_seen() - 1;

        self.push_window_entry();
        let exposure = self.estimate_exposure();
        self.exposures.push(exposure);

        let corrected = correct_frame(
            &frame.image,
            &self.snapshot.inverse,
            &self.snapshot.vignette,
            exposure,
        );

        if self.tracker.frames_seen() % self.cfg.backend_block == 0 {
            self.block_boundary();
        }

        Ok(OnlineFrameOutput {
            frame_index,
            exposure,
            corrected,
        })
    }

    /// Collect the last pending backend job and produce the anchored
    /// calibration over all frames seen.
    pub fn finish(mut self) -> Result<CalibrationResult<S>> {
        self.publish_pending();
        let gamma = self.snapshot.response.anchor_gamma()?;
        let response = self.snapshot.response.gamma_transformed(gamma)?;
        let vignette = self.snapshot.vignette.gamma_transformed(gamma)?;
        let exposures: Vec<S> = self.exposures.iter().map(|e| e.powf(gamma)).collect();
        CalibrationResult::new(
            response.sampled_lut(),
            vignette.refit_coeffs(),
            exposures,
            gamma,
            self.width,
            self.height,
        )
    }

    fn push_window_entry(&mut self) {
        let cx = S::cast((self.width as f64 - 1.0) / 2.0);
        let cy = S::cast((self.height as f64 - 1.0) / 2.0);
        let r_norm: S = corner_radius(self.width, self.height);
        let patch = self.cfg.tracker.patch_size;
        let half = (patch / 2) as i32;
        let mu = self.cfg.optimizer.grad_mu;

        let obs = self
            .tracker
            .latest_observations()
            .into_iter()
            .map(|(point, o)| {
                let mut r2 = Vec::with_capacity(patch * patch);
                for j in 0..patch * patch {
                    let dx = S::cast((j % patch) as i32 as f64 - half as f64);
                    let dy = S::cast((j / patch) as i32 as f64 - half as f64);
                    let rx = (o.location.x + dx - cx) / r_norm;
                    let ry = (o.location.y + dy - cy) / r_norm;
                    r2.push(rx * rx + ry * ry);
                }
                WindowObs {
                    point,
                    intensities: o.patch_intensities.clone(),
                    weight_grad: o
                        .patch_gradient_sq
                        .iter()
                        .map(|&g| mu / (mu + g))
                        .collect(),
                    r2,
                }
            })
            .collect();
        self.window.push_back(WindowEntry { obs });
        while self.window.len() > self.cfg.exposure_window {
            self.window.pop_front();
        }
    }

    /// Windowed linear exposure solve: with radiances fixed to the window
    /// mean of `f^-1(O)/V`, each frame's exposure has the closed form
    /// `sum(w L y) / sum(w L^2)`. The window solution is scale-chained to the
    /// already-emitted exposures so the track stays continuous across
    /// snapshot publications.
    fn estimate_exposure(&self) -> S {
        let newest = self.exposures.len();
        if self.window.is_empty() || self.window.back().unwrap().obs.is_empty() {
            return self.exposures.last().copied().unwrap_or_else(S::one);
        }

        let snap = &self.snapshot;
        let margin = self.cfg.optimizer.saturation_margin;
        let saturated = move |o: S| !(o > margin && o < S::cast(255.0) - margin);

        // Window-mean radiance per (point, patch pixel); points sighted once
        // contribute no ratio information and are skipped.
        let mut sightings: BTreeMap<u64, u32> = BTreeMap::new();
        for entry in &self.window {
            for wo in &entry.obs {
                *sightings.entry(wo.point).or_insert(0) += 1;
            }
        }
        let mut radiance: BTreeMap<(u64, u16), (S, u32)> = BTreeMap::new();
        for entry in &self.window {
            for wo in &entry.obs {
                if sightings[&wo.point] < 2 {
                    continue;
                }
                for (j, &o) in wo.intensities.iter().enumerate() {
                    if saturated(o) {
                        continue;
                    }
                    let y = snap.inverse_at(o) / snap.vignette.eval_r2(wo.r2[j]).max(S::cast(1e-3));
                    let e = radiance.entry((wo.point, j as u16)).or_insert((S::zero(), 0));
                    e.0 += y;
                    e.1 += 1;
                }
            }
        }

        let solve_frame = |entry: &WindowEntry<S>| -> Option<S> {
            let mut num = S::zero();
            let mut den = S::zero();
            for wo in &entry.obs {
                for (j, &o) in wo.intensities.iter().enumerate() {
                    if saturated(o) {
                        continue;
                    }
                    let Some(&(sum, cnt)) = radiance.get(&(wo.point, j as u16)) else {
                        continue;
                    };
                    let l = sum / S::cast(cnt as f64);
                    let y = snap.inverse_at(o) / snap.vignette.eval_r2(wo.r2[j]).max(S::cast(1e-3));
                    let w = wo.weight_grad[j];
                    num += w * l * y;
                    den += w * l * l;
                }
            }
            (den > S::cast(1e-12)).then(|| num / den)
        };

        let Some(raw_newest) = solve_frame(self.window.back().unwrap()) else {
            return self.exposures.last().copied().unwrap_or_else(S::one);
        };

        // Gauge: least-squares scale onto the already-emitted estimates of the
        // older window frames.
        let mut num = S::zero();
        let mut den = S::zero();
        let window_first_frame = newest + 1 - self.window.len();
        for (k, entry) in self.window.iter().enumerate().take(self.window.len() - 1) {
            let frame = window_first_frame + k;
            let Some(raw) = solve_frame(entry) else {
                continue;
            };
            let hist = self.exposures[frame];
            num += hist * raw;
            den += raw * raw;
        }
        if den > S::cast(1e-12) {
            raw_newest * (num / den)
        } else if let Some(&last) = self.exposures.last() {
            // No overlap information: hold the track where it was.
            let _ = last;
            last
        } else {
            S::one()
        }
    }

    fn block_boundary(&mut self) {
        self.publish_pending();

        let end = self.tracker.frames_seen();
        let start = end - self.cfg.backend_block;
        let db = self.tracker.database_view(start, end);
        let first = self.exposures[start];
        let seeds: Vec<S> = self.exposures[start..end].iter().map(|e| *e / first).collect();

        let job = BackendJob {
            db,
            seeds,
            response: self.snapshot.response.clone(),
            vignette: self.snapshot.vignette.clone(),
            inverse: self.snapshot.inverse.clone(),
            optimizer: self.cfg.optimizer.clone(),
            stride: self.cfg.exposure_stride,
            rounds: self.cfg.backend_rounds,
        };

        self.pending = if self.cfg.sync {
            Pending::Ready(Box::new(run_backend_block(job)))
        } else {
            Pending::Running(std::thread::spawn(move || run_backend_block(job)))
        };
    }

    fn publish_pending(&mut self) {
        let result = match std::mem::replace(&mut self.pending, Pending::None) {
            Pending::None => None,
            Pending::Ready(r) => *r,
            Pending::Running(handle) => handle.join().expect("backend thread panicked"),
        };
        if let Some(snap) = result {
            self.snapshot = Arc::new(snap);
        }
    }
}

/// Background refinement of response and vignette on one tracked block.
/// Exposures are seeded from the fast frontend estimates with only every
/// `stride`-th one free; no outlier rejection, few rounds. Guard failures
/// return `None` and the previous published state stays live.
fn run_backend_block<S: Scalar>(job: BackendJob<S>) -> Option<Snapshot<S>> {
    check_observability(&job.db, &job.optimizer).ok()?;
    let table = ResidualTable::build(&job.db, &job.optimizer);
    if table.active_count() == 0 {
        return None;
    }
    let layout = ExposureLayout::strided(job.db.frame_count, job.stride);

    // Break the flat-vignette symmetry on the very first block.
    let vignette = if job.vignette.coeffs() == [S::zero(); 3] {
        job.vignette.with_coeffs([S::cast(-0.1), S::zero(), S::zero()])
    } else {
        job.vignette.clone()
    };

    let mut exposures = job.seeds.clone();
    let nodes: Vec<S> = layout.node_frames().iter().map(|&f| job.seeds[f]).collect();
    layout.interpolate(&nodes, &mut exposures);

    // Radiances consistent with the seeds: mean of f^-1(O) / (V e).
    let mut radiances: Vec<Vec<S>> = job
        .db
        .points
        .iter()
        .map(|_| vec![S::cast(0.5); table.patch_pixels])
        .collect();
    for grp in &table.groups {
        let mut sum = S::zero();
        let mut count = 0u32;
        for res in &table.residuals[grp.start..grp.end] {
            if !res.active {
                continue;
            }
            let y = lut_eval(&job.inverse, res.intensity / S::cast(255.0))
                / vignette.eval_r2(res.r2).max(S::cast(1e-3))
                / exposures[res.frame as usize];
            sum += y;
            count += 1;
        }
        if count > 0 {
            radiances[grp.point][grp.pixel] =
                (sum / S::cast(count as f64)).clamp(S::zero(), S::one());
        }
    }

    let state = CalibrationState {
        response: job.response,
        vignette,
        exposures,
        radiances,
    };
    let mut trace = Vec::new();
    let state = optimize_rounds(
        state,
        &table,
        &layout,
        &job.optimizer,
        job.rounds,
        0,
        &mut trace,
    );
    Snapshot::new(state.response, state.vignette)
}
