//! Offline block-wise calibration: track the whole sequence once, optimize
//! fixed-size overlapping blocks independently, align exposure scales on the
//! overlaps and average the per-block photometric maps.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::image::Frame;
use crate::io::CalibrationResult;
use crate::models::ResponseBasis;
use crate::optimizer::{optimize_block, OptimizerConfig, StepKind, TraceEntry};
use crate::scalar::Scalar;
use crate::tracker::{build_track_database, TrackerConfig};

#[derive(Debug, Clone)]
pub struct OfflineConfig<S: Scalar> {
    pub block_size: usize,
    pub overlap: usize,
    pub tracker: TrackerConfig<S>,
    pub optimizer: OptimizerConfig<S>,
}

impl<S: Scalar> Default for OfflineConfig<S> {
    fn default() -> Self {
        OfflineConfig {
            block_size: 200,
            overlap: 30,
            tracker: TrackerConfig::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl<S: Scalar> OfflineConfig<S> {
    pub fn validate(&self) -> Result<()> {
        if self.overlap >= self.block_size {
            return Err(Error::InvalidParameter(
                "overlap must be smaller than block_size".into(),
            ));
        }
        self.tracker.validate()?;
        self.optimizer.validate()
    }
}

/// Per-block bookkeeping of one offline run.
#[derive(Debug, Clone)]
pub struct BlockReport<S: Scalar> {
    pub start: usize,
    pub end: usize,
    /// `None` when accepted; otherwise why the block was discarded.
    pub discarded: Option<String>,
    pub anchor_gamma: Option<S>,
}

pub struct OfflineReport<S: Scalar> {
    pub blocks: Vec<BlockReport<S>>,
    /// `(block index, entry)` per optimizer step.
    pub trace: Vec<(usize, TraceEntry<S>)>,
}

impl<S: Scalar> OfflineReport<S> {
    /// Energy log CSV: `round,step,energy,lambda,accepted` per block.
    pub fn write_energy_log(&self, path: &Path) -> Result<()> {
        let mut out = String::from("block,round,step,energy,lambda,accepted\n");
        for (block, t) in &self.trace {
            writeln!(
                out,
                "{},{},{},{:.9e},{:.3e},{}",
                block,
                t.round,
                match t.step {
                    StepKind::Params => "params",
                    StepKind::Radiances => "radiances",
                },
                t.energy.to_f64_lossy(),
                t.lambda.to_f64_lossy(),
                t.accepted
            )
            .unwrap();
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Frame ranges `[start, end)` of the optimization blocks.
pub fn partition_blocks(frame_count: usize, block: usize, overlap: usize) -> Vec<(usize, usize)> {
    assert!(overlap < block);
    if frame_count <= block {
        return vec![(0, frame_count)];
    }
    let mut out = Vec::new();
    let mut start = 0usize;
    loop {
        let end = start + block;
        if end >= frame_count {
            out.push((frame_count - block, frame_count));
            break;
        }
        out.push((start, end));
        start += block - overlap;
    }
    out
}

/// Least-squares scale aligning the next block's exposures to the previous
/// block over the shared frames: `argmin_s sum (e_prev - s e_next)^2`.
pub fn align_block_exposures<S: Scalar>(prev: &[S], next: &[S]) -> S {
    assert_eq!(prev.len(), next.len());
    assert!(!prev.is_empty());
    let mut num = S::zero();
    let mut den = S::zero();
    for (p, n) in prev.iter().zip(next) {
        num += *p * *n;
        den += *n * *n;
    }
    num / den
}

/// Full offline calibration of a frame sequence.
pub fn calibrate_offline<S: Scalar>(
    frames: &[Frame],
    cfg: &OfflineConfig<S>,
    basis: &Arc<ResponseBasis<S>>,
) -> Result<(CalibrationResult<S>, OfflineReport<S>)> {
    cfg.validate()?;
    if frames.len() < 2 {
        return Err(Error::InsufficientCorrespondences(
            "need at least 2 frames".into(),
        ));
    }
    let width = frames[0].image.width();
    let height = frames[0].image.height();

    let db = build_track_database(frames, &cfg.tracker)?;
    let ranges = partition_blocks(frames.len(), cfg.block_size, cfg.overlap);

    let mut report = OfflineReport {
        blocks: Vec::new(),
        trace: Vec::new(),
    };
    let mut luts: Vec<Vec<S>> = Vec::new();
    let mut vcoeffs: Vec<[S; 3]> = Vec::new();
    let mut gammas: Vec<S> = Vec::new();
    let mut exposures_global: Vec<Option<S>> = vec![None; frames.len()];

    for (bi, &(start, end)) in ranges.iter().enumerate() {
        let block_db = db.slice(start, end);
        let outcome = match optimize_block(&block_db, basis, &cfg.optimizer) {
            Ok(o) => o,
            Err(Error::InsufficientCorrespondences(why)) => {
                report.blocks.push(BlockReport {
                    start,
                    end,
                    discarded: Some(why),
                    anchor_gamma: None,
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        for t in &outcome.trace {
            report.trace.push((bi, t.clone()));
        }

        // Anchor the gauge before anything is averaged or chained.
        let gamma = outcome.state.response.anchor_gamma()?;
        let anchored = outcome.state.gamma_transformed(gamma)?;

        luts.push(anchored.response.sampled_lut());
        vcoeffs.push(anchored.vignette.refit_coeffs());
        gammas.push(gamma);

        // Chain the block exposure scale through the already-assigned overlap.
        let mut pairs_prev = Vec::new();
        let mut pairs_next = Vec::new();
        for (i, frame) in (start..end).enumerate() {
            if let Some(g) = exposures_global[frame] {
                pairs_prev.push(g);
                pairs_next.push(anchored.exposures[i]);
            }
        }
        let scale = if pairs_prev.is_empty() {
            S::one()
        } else {
            align_block_exposures(&pairs_prev, &pairs_next)
        };
        for (i, frame) in (start..end).enumerate() {
            if exposures_global[frame].is_none() {
                exposures_global[frame] = Some(scale * anchored.exposures[i]);
            }
        }

        report.blocks.push(BlockReport {
            start,
            end,
            discarded: None,
            anchor_gamma: Some(gamma),
        });
    }

    if luts.is_empty() {
        return Err(Error::InsufficientCorrespondences(
            "every block was discarded: insufficient radial motion or correspondences".into(),
        ));
    }

    // Pointwise mean of the anchored per-block responses and vignettes.
    let nb = S::cast(luts.len() as f64);
    let mean_lut: Vec<S> = (0..256)
        .map(|k| luts.iter().fold(S::zero(), |a, l| a + l[k]) / nb)
        .collect();
    let mean_v: [S; 3] = std::array::from_fn(|j| {
        vcoeffs.iter().fold(S::zero(), |a, c| a + c[j]) / nb
    });
    let mean_gamma = gammas.iter().fold(S::zero(), |a, &g| a + g) / nb;

    // Frames covered only by discarded blocks inherit the nearest estimate.
    let mut exposures: Vec<S> = Vec::with_capacity(frames.len());
    let mut last = S::one();
    for e in &exposures_global {
        if let Some(v) = e {
            last = *v;
        }
        exposures.push(last);
    }
    if let Some(first_idx) = exposures_global.iter().position(|e| e.is_some()) {
        let first = exposures_global[first_idx].unwrap();
        for e in exposures.iter_mut().take(first_idx) {
            *e = first;
        }
    }

    let result = CalibrationResult::new(mean_lut, mean_v, exposures, mean_gamma, width, height)?;
    Ok((result, report))
}
