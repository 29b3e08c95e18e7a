//! Damped Gauss-Newton steps: joint response/vignette/exposure update via the
//! accumulated normal equations, decoupled per-point radiance updates, and
//! residual outlier rejection.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::models::{ResponseBasis, BASIS_SAMPLES, RESPONSE_COEFFS};
use crate::scalar::Scalar;
use crate::state::CalibrationState;
use crate::tracker::TrackDatabase;

use super::{
    check_observability, energy, huber_weight, init_state, jacobian_row, residual_value,
    OptimizerConfig, ResidualTable,
};

const PARAM_HEAD: usize = RESPONSE_COEFFS + 3; // response + vignette columns

/// Mapping from per-frame exposures to solver columns.
///
/// Exposures are parametrized by a set of node frames; in-between frames are
/// geometric interpolations of the bracketing nodes (exposure is
/// multiplicative, so interpolation happens in the log domain). The first
/// node is gauge-fixed and owns no column, removing the global exposure
/// scale from the normal equations.
#[derive(Debug, Clone)]
pub struct ExposureLayout<S: Scalar> {
    node_frames: Vec<usize>,
    /// Solver column per node; `None` for the gauge-fixed first node.
    node_cols: Vec<Option<usize>>,
    /// Per frame: bracketing node indices and log-interpolation weights.
    supports: Vec<(usize, usize, S, S)>,
    n_cols: usize,
}

impl<S: Scalar> ExposureLayout<S> {
    /// One node per frame: the offline layout.
    pub fn dense(frame_count: usize) -> Self {
        Self::from_nodes((0..frame_count).collect(), frame_count)
    }

    /// Nodes every `stride` frames plus the final frame: the online backend
    /// layout.
    pub fn strided(frame_count: usize, stride: usize) -> Self {
        assert!(stride >= 1);
        let mut nodes: Vec<usize> = (0..frame_count).step_by(stride).collect();
        if *nodes.last().unwrap() != frame_count - 1 {
            nodes.push(frame_count - 1);
        }
        Self::from_nodes(nodes, frame_count)
    }

    fn from_nodes(node_frames: Vec<usize>, frame_count: usize) -> Self {
        assert!(!node_frames.is_empty());
        let node_cols: Vec<Option<usize>> = node_frames
            .iter()
            .enumerate()
            .map(|(i, _)| if i == 0 { None } else { Some(PARAM_HEAD + i - 1) })
            .collect();
        let mut supports = Vec::with_capacity(frame_count);
        let mut seg = 0usize;
        for frame in 0..frame_count {
            while seg + 1 < node_frames.len() && node_frames[seg + 1] <= frame {
                seg += 1;
            }
            if node_frames[seg] == frame || seg + 1 >= node_frames.len() {
                supports.push((seg, seg, S::one(), S::zero()));
            } else {
                let a = node_frames[seg];
                let b = node_frames[seg + 1];
                let t = S::cast((frame - a) as f64 / (b - a) as f64);
                supports.push((seg, seg + 1, S::one() - t, t));
            }
        }
        let n_cols = node_frames.len() - 1;
        ExposureLayout {
            node_frames,
            node_cols,
            supports,
            n_cols,
        }
    }

    pub fn dim(&self) -> usize {
        PARAM_HEAD + self.n_cols
    }

    pub fn node_frames(&self) -> &[usize] {
        &self.node_frames
    }

    /// Recompute every frame exposure from the node values.
    pub fn interpolate(&self, nodes: &[S], exposures: &mut [S]) {
        for (frame, &(a, b, wa, wb)) in self.supports.iter().enumerate() {
            exposures[frame] = if a == b || wb == S::zero() {
                nodes[a]
            } else {
                (nodes[a].ln() * wa + nodes[b].ln() * wb).exp()
            };
        }
    }

    fn node_values(&self, exposures: &[S]) -> Vec<S> {
        self.node_frames.iter().map(|&f| exposures[f]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Params,
    Radiances,
}

#[derive(Debug, Clone)]
pub struct TraceEntry<S: Scalar> {
    pub round: usize,
    pub step: StepKind,
    pub energy: S,
    pub lambda: S,
    pub accepted: bool,
}

/// One damped Gauss-Newton update of the response, vignette and exposure
/// parameters.
///
/// Builds the joint normal equations
/// `(J^T W J + lambda diag(J^T W J)) dx = J^T W r` over the active residuals
/// and applies `x <- x - dx` (the residual is `O - f(...)`, so the raw
/// solution points uphill). The per-point radiances are independent scalars,
/// so their blocks are eliminated onto the parameter system (Schur
/// complement) and back-substituted after the solve; the whole move is one
/// exact step of the joint system. The step is accepted only when the energy
/// does not increase, the response stays monotone and the vignette stays in
/// `[floor, 1]`; the damping factor halves on acceptance and quadruples on
/// rejection. A short backtracking line search lets constrained steps through
/// at reduced length while the response rides the monotonicity boundary.
pub fn step_params<S: Scalar>(
    state: &CalibrationState<S>,
    table: &ResidualTable<S>,
    layout: &ExposureLayout<S>,
    cfg: &OptimizerConfig<S>,
    lambda: S,
) -> (CalibrationState<S>, bool, S) {
    let reject = |l: S| (l * S::cast(4.0)).min(S::cast(1e10));
    let accept = |l: S| (l * S::cast(0.5)).max(S::cast(1e-10));

    let dim = layout.dim();
    let mut a = DMatrix::<S>::zeros(dim, dim);
    let mut b = DVector::<S>::zeros(dim);

    // Per (point, pixel) radiance block: damped later, so keep raw sums.
    struct RadianceBlock<S> {
        d: S,                     // sum w J_L^2
        b_l: S,                   // sum w J_L r
        coupling: Vec<(u32, S)>,  // sum w J_L J_p, sparse over parameter cols
    }
    let mut blocks: Vec<RadianceBlock<S>> = Vec::with_capacity(table.groups.len());

    let mut cols = [0usize; PARAM_HEAD + 2];
    let mut vals = [S::zero(); PARAM_HEAD + 2];
    let mut scratch = vec![S::zero(); dim];

    for grp in &table.groups {
        let mut d = S::zero();
        let mut b_l = S::zero();
        let mut touched: Vec<u32> = Vec::new();

        for res in &table.residuals[grp.start..grp.end] {
            if !res.active {
                continue;
            }
            let (r, jac) = jacobian_row(state, res);
            let w = res.weight_grad * huber_weight(r, cfg.huber_h);

            let mut n = 0usize;
            for (k, &dv) in jac.d_coeffs.iter().enumerate() {
                if dv != S::zero() {
                    cols[n] = k;
                    vals[n] = dv;
                    n += 1;
                }
            }
            for (k, &dv) in jac.d_vignette.iter().enumerate() {
                if dv != S::zero() {
                    cols[n] = RESPONSE_COEFFS + k;
                    vals[n] = dv;
                    n += 1;
                }
            }
            if jac.d_exposure != S::zero() {
                let frame = res.frame as usize;
                let (na, nb, wa, wb) = layout.supports[frame];
                let e_frame = state.exposures[frame];
                for (node, weight) in [(na, wa), (nb, wb)] {
                    if weight == S::zero() {
                        continue;
                    }
                    if let Some(col) = layout.node_cols[node] {
                        // d e_frame / d e_node for geometric interpolation.
                        let chain = weight * e_frame / state.exposures[layout.node_frames[node]];
                        cols[n] = col;
                        vals[n] = jac.d_exposure * chain;
                        n += 1;
                    }
                    if na == nb {
                        break;
                    }
                }
            }

            for i in 0..n {
                let wv = w * vals[i];
                b[cols[i]] += wv * r;
                for j in 0..n {
                    a[(cols[i], cols[j])] += wv * vals[j];
                }
            }

            if jac.d_radiance != S::zero() {
                let wl = w * jac.d_radiance;
                d += wl * jac.d_radiance;
                b_l += wl * r;
                for i in 0..n {
                    if scratch[cols[i]] == S::zero() {
                        touched.push(cols[i] as u32);
                    }
                    scratch[cols[i]] += wl * vals[i];
                }
            }
        }

        let coupling: Vec<(u32, S)> = touched
            .iter()
            .map(|&c| {
                let v = scratch[c as usize];
                scratch[c as usize] = S::zero();
                (c, v)
            })
            .collect();
        blocks.push(RadianceBlock { d, b_l, coupling });
    }

    // Unobserved parameters get an identity row so the factorization stands.
    for i in 0..dim {
        if a[(i, i)] == S::zero() {
            a[(i, i)] = S::one();
            b[i] = S::zero();
        }
    }

    // Damp, eliminate the radiance blocks, solve; singular systems inflate
    // the damping and retry.
    let solve_damped = |a: &DMatrix<S>, b: &DVector<S>, l: S| -> Option<DVector<S>> {
        let mut reduced = a.clone();
        let mut rhs = b.clone();
        for i in 0..dim {
            reduced[(i, i)] = a[(i, i)] * (S::one() + l);
        }
        for blk in &blocks {
            let d = blk.d * (S::one() + l);
            if !(d > S::cast(1e-20)) {
                continue;
            }
            for &(ci, vi) in &blk.coupling {
                rhs[ci as usize] -= vi * blk.b_l / d;
                for &(cj, vj) in &blk.coupling {
                    reduced[(ci as usize, cj as usize)] -= vi * vj / d;
                }
            }
        }
        let delta = reduced.cholesky()?.solve(&rhs);
        delta.iter().all(|dv| dv.is_finite()).then_some(delta)
    };

    let mut lambda_try = lambda;
    let mut solved = None;
    for _ in 0..10 {
        if let Some(delta) = solve_damped(&a, &b, lambda_try) {
            solved = Some((delta, lambda_try));
            break;
        }
        lambda_try = reject(lambda_try);
    }
    let Some((mut delta, lambda_used)) = solved else {
        return (state.clone(), false, reject(lambda_try));
    };

    // Monotonicity anticipation: where this step would push a response grid
    // slope to zero or below, constrain the step to land on a small positive
    // slope floor instead (the slopes are linear in the coefficients, so a
    // quadratic penalty per violated cell does it) and re-solve. Without
    // this, descent toward curves that are flat somewhere would be rejected
    // wholesale by the monotonicity guard at every line-search scale.
    {
        let basis = state.response.basis();
        let coeffs = state.response.coeffs();
        let floor = S::cast(1e-3);
        let mut handled = vec![false; BASIS_SAMPLES - 1];
        'anticipate: for _pass in 0..3 {
            let mut worst: Vec<(S, usize)> = Vec::new();
            for i in 0..BASIS_SAMPLES - 1 {
                if handled[i] {
                    continue;
                }
                let mut slope = basis.df0()[i];
                let mut step = S::zero();
                for k in 0..RESPONSE_COEFFS {
                    slope += coeffs[k] * basis.dh(k)[i];
                    step += delta[k] * basis.dh(k)[i];
                }
                if slope - step < floor {
                    worst.push((slope - step, i));
                }
            }
            if worst.is_empty() {
                break 'anticipate;
            }
            worst.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));
            worst.truncate(8);
            let mu = S::cast(1e6)
                * (0..RESPONSE_COEFFS).fold(S::zero(), |m, k| m.max(a[(k, k)]));
            for &(_, cell) in &worst {
                handled[cell] = true;
                let normal: [S; RESPONSE_COEFFS] = std::array::from_fn(|k| basis.dh(k)[cell]);
                let n2 = normal.iter().fold(S::zero(), |acc, v| acc + *v * *v);
                if !(n2 > S::zero()) {
                    continue;
                }
                let mut slope = basis.df0()[cell];
                for k in 0..RESPONSE_COEFFS {
                    slope += coeffs[k] * basis.dh(k)[cell];
                }
                // Target: normal . delta = slope - floor.
                let target = slope - floor;
                for i in 0..RESPONSE_COEFFS {
                    b[i] += mu * target * normal[i] / n2;
                    for j in 0..RESPONSE_COEFFS {
                        a[(i, j)] += mu * normal[i] * normal[j] / n2;
                    }
                }
            }
            match solve_damped(&a, &b, lambda_used) {
                Some(d) => delta = d,
                None => break 'anticipate,
            }
        }
    }

    // Back-substituted radiance updates.
    let radiance_delta: Vec<S> = blocks
        .iter()
        .map(|blk| {
            let d = blk.d * (S::one() + lambda_used);
            if !(d > S::cast(1e-20)) {
                return S::zero();
            }
            let coupled = blk
                .coupling
                .iter()
                .fold(S::zero(), |acc, &(c, v)| acc + v * delta[c as usize]);
            (blk.b_l - coupled) / d
        })
        .collect();

    // Backtracking line search on the joint update: the monotone-response and
    // vignette-range constraints often bind only at the boundary-riding end
    // of the curve, where a shortened step passes.
    let dbg = std::env::var("PHOTOCAL_STEP_DEBUG").is_ok();
    let e0 = energy(state, table, cfg);
    let mut scale = S::one();
    for _ in 0..6 {
        match build_candidate(state, layout, &delta, scale, cfg) {
            Some(mut candidate) => {
                for (grp, dl) in table.groups.iter().zip(&radiance_delta) {
                    let l = candidate.radiances[grp.point][grp.pixel];
                    candidate.radiances[grp.point][grp.pixel] =
                        (l - scale * *dl).clamp(S::zero(), S::one());
                }
                let e1 = energy(&candidate, table, cfg);
                if e1.is_finite() && e1 <= e0 {
                    return (candidate, true, accept(lambda_used));
                }
                if dbg {
                    eprintln!(
                        "  trial scale {:.4} lambda {:.2e}: energy {:+.6e}",
                        scale.to_f64_lossy(),
                        lambda_used.to_f64_lossy(),
                        (e1 - e0).to_f64_lossy()
                    );
                }
            }
            None => {
                if dbg {
                    eprintln!(
                        "  trial scale {:.4} lambda {:.2e}: guard failed",
                        scale.to_f64_lossy(),
                        lambda_used.to_f64_lossy()
                    );
                }
            }
        }
        scale *= S::cast(0.5);
    }
    (state.clone(), false, reject(lambda_used))
}

/// Scaled application of a parameter update; `None` when a guard fails:
/// non-monotone response, vignette outside `[floor, 1]`, or non-positive
/// exposure.
fn build_candidate<S: Scalar>(
    state: &CalibrationState<S>,
    layout: &ExposureLayout<S>,
    delta: &DVector<S>,
    scale: S,
    cfg: &OptimizerConfig<S>,
) -> Option<CalibrationState<S>> {
    let mut coeffs = state.response.coeffs();
    for (k, c) in coeffs.iter_mut().enumerate() {
        *c -= scale * delta[k];
    }
    let response = state.response.with_coeffs(coeffs).ok()?;
    if !response.is_monotone() {
        if std::env::var("PHOTOCAL_STEP_DEBUG").is_ok() {
            eprintln!("    guard: non-monotone response");
        }
        return None;
    }

    let vc = state.vignette.coeffs();
    let vignette = state.vignette.with_coeffs([
        vc[0] - scale * delta[RESPONSE_COEFFS],
        vc[1] - scale * delta[RESPONSE_COEFFS + 1],
        vc[2] - scale * delta[RESPONSE_COEFFS + 2],
    ]);
    let (vmin, vmax) = vignette.extrema_on_grid(1024);
    if vmin < cfg.vignette_floor || vmax > S::one() + S::cast(1e-9) {
        if std::env::var("PHOTOCAL_STEP_DEBUG").is_ok() {
            eprintln!(
                "    guard: vignette range [{:.5}, {:.5}]",
                vmin.to_f64_lossy(),
                vmax.to_f64_lossy()
            );
        }
        return None;
    }

    let mut nodes = layout.node_values(&state.exposures);
    for (ni, col) in layout.node_cols.iter().enumerate() {
        if let Some(col) = *col {
            nodes[ni] -= scale * delta[col];
        }
    }
    if nodes.iter().any(|e| !(*e > S::zero()) || !e.is_finite()) {
        return None;
    }
    let mut exposures = state.exposures.clone();
    layout.interpolate(&nodes, &mut exposures);

    Some(CalibrationState {
        response,
        vignette,
        exposures,
        radiances: state.radiances.clone(),
    })
}

/// Decoupled radiance sweep: per (point, patch pixel), a damped scalar
/// Gauss-Newton update `L <- clamp(L - sum(w J r) / ((1+lambda) sum(w J^2)))`,
/// reverted whenever it fails to lower that pixel's own energy.
pub fn step_radiances<S: Scalar>(
    state: &mut CalibrationState<S>,
    table: &ResidualTable<S>,
    cfg: &OptimizerConfig<S>,
    lambda: S,
) {
    for grp in &table.groups {
        let mut num = S::zero();
        let mut den = S::zero();
        let mut before = S::zero();
        for res in &table.residuals[grp.start..grp.end] {
            if !res.active {
                continue;
            }
            let (r, jac) = jacobian_row(state, res);
            let w = res.weight_grad * huber_weight(r, cfg.huber_h);
            num += w * jac.d_radiance * r;
            den += w * jac.d_radiance * jac.d_radiance;
            before += res.weight_grad * super::huber_loss(r, cfg.huber_h);
        }
        if !(den > S::cast(1e-20)) {
            continue; // every observation saturated
        }
        let old = state.radiances[grp.point][grp.pixel];
        let delta = num / ((S::one() + lambda) * den);
        let new = (old - delta).clamp(S::zero(), S::one());
        if new == old {
            continue;
        }
        state.radiances[grp.point][grp.pixel] = new;
        let mut after = S::zero();
        for res in &table.residuals[grp.start..grp.end] {
            if res.active {
                after += res.weight_grad * super::huber_loss(residual_value(state, res), cfg.huber_h);
            }
        }
        if !(after <= before) {
            state.radiances[grp.point][grp.pixel] = old;
        }
    }
}

/// Re-anchor the gauge of a state through `f(0.5) = 127.5` when it has
/// drifted. The transform leaves every residual unchanged, but it slides the
/// state along the ambiguity orbit in one exact move, keeping the response
/// away from the flat-endpoint shapes where the monotonicity guard would
/// strangle the parameter steps.
fn renormalize_gauge<S: Scalar>(state: &mut CalibrationState<S>, cfg: &OptimizerConfig<S>) {
    let Ok(gamma) = state.response.anchor_gamma() else {
        return;
    };
    if (gamma.to_f64_lossy() - 1.0).abs() <= 1e-3 {
        return;
    }
    let Ok(renormed) = state.gamma_transformed(gamma) else {
        return;
    };
    let (vmin, vmax) = renormed.vignette.extrema_on_grid(1024);
    if vmin >= cfg.vignette_floor && vmax <= S::one() + S::cast(1e-9) {
        *state = renormed;
    }
}

/// Weighted linear least-squares refit of the response coefficients with
/// everything else frozen; the response is linear in its coefficients.
fn refit_coeffs<S: Scalar>(
    state: &CalibrationState<S>,
    table: &ResidualTable<S>,
    cfg: &OptimizerConfig<S>,
) -> Option<CalibrationState<S>> {
    let mut ata = nalgebra::Matrix4::<S>::zeros();
    let mut atb = nalgebra::Vector4::<S>::zeros();
    let base = state.response.with_coeffs([S::zero(); RESPONSE_COEFFS]).ok()?;
    for res in &table.residuals {
        if !res.active {
            continue;
        }
        let l = state.radiances[res.point as usize][res.pixel as usize];
        let v = state.vignette.eval_r2(res.r2);
        let acc = (state.exposures[res.frame as usize] * v * l).clamp(S::zero(), S::one());
        let h = state.response.coeff_gradient(acc);
        let target = res.intensity - base.eval(acc);
        let hv = nalgebra::Vector4::new(h[0], h[1], h[2], h[3]);
        let w = res.weight_grad;
        ata += hv * hv.transpose() * w;
        atb += hv * (w * target);
    }
    for i in 0..RESPONSE_COEFFS {
        if ata[(i, i)] == S::zero() {
            ata[(i, i)] = S::one();
        }
    }
    let c = ata.cholesky()?.solve(&atb);
    let response = state
        .response
        .with_coeffs([c[0], c[1], c[2], c[3]])
        .ok()?;
    if !response.is_monotone() {
        return None;
    }
    let mut out = state.clone();
    out.response = response;
    Some(out)
}

/// Search across the exponential-ambiguity orbit for a gauge in which the
/// response span fits the data better: each candidate applies an exact gauge
/// transform and a linear refit of the coefficients. Returns a strictly
/// better state when one exists.
///
/// Needed because the coefficient span is gauge dependent: descending from
/// one gauge to a better one passes through curves outside the span, which
/// plain damped steps cannot cross.
fn gauge_search<S: Scalar>(
    state: &CalibrationState<S>,
    table: &ResidualTable<S>,
    cfg: &OptimizerConfig<S>,
    current_energy: S,
) -> Option<CalibrationState<S>> {
    let mut best: Option<(S, CalibrationState<S>)> = None;
    for g in [0.5, 0.6, 0.7, 0.8, 0.9, 1.1, 1.2, 1.35, 1.5, 1.7, 2.0] {
        let Ok(t) = state.gamma_transformed(S::cast(g)) else {
            continue;
        };
        let (vmin, vmax) = t.vignette.extrema_on_grid(1024);
        if vmin < cfg.vignette_floor || vmax > S::one() + S::cast(1e-9) {
            continue;
        }
        let Some(refit) = refit_coeffs(&t, table, cfg) else {
            continue;
        };
        let e = energy(&refit, table, cfg);
        if e.is_finite() && e < current_energy && best.as_ref().is_none_or(|(b, _)| e < *b) {
            best = Some((e, refit));
        }
    }
    best.map(|(_, s)| s)
}

/// Alternate parameter and radiance steps until the relative energy decrease
/// of an accepted round falls below the configured threshold. Rejected
/// parameter steps are retried with inflated damping inside the same round.
pub fn optimize_rounds<S: Scalar>(
    mut state: CalibrationState<S>,
    table: &ResidualTable<S>,
    layout: &ExposureLayout<S>,
    cfg: &OptimizerConfig<S>,
    max_rounds: usize,
    round_offset: usize,
    trace: &mut Vec<TraceEntry<S>>,
) -> CalibrationState<S> {
    let mut lambda = cfg.lm_lambda_init;
    let mut last_energy = energy(&state, table, cfg);

    for round in 0..max_rounds {
        renormalize_gauge(&mut state, cfg);

        let mut accepted = false;
        for _try in 0..6 {
            let lambda_used = lambda;
            let (next, ok, new_lambda) = step_params(&state, table, layout, cfg, lambda);
            state = next;
            lambda = new_lambda;
            if ok {
                accepted = true;
                trace.push(TraceEntry {
                    round: round_offset + round,
                    step: StepKind::Params,
                    energy: energy(&state, table, cfg),
                    lambda: lambda_used,
                    accepted: true,
                });
                break;
            }
        }
        if !accepted {
            trace.push(TraceEntry {
                round: round_offset + round,
                step: StepKind::Params,
                energy: energy(&state, table, cfg),
                lambda,
                accepted: false,
            });
        }

        step_radiances(&mut state, table, cfg, lambda);
        let e_round = energy(&state, table, cfg);
        trace.push(TraceEntry {
            round: round_offset + round,
            step: StepKind::Radiances,
            energy: e_round,
            lambda,
            accepted: true,
        });

        if !accepted {
            break; // six inflations without progress: converged or stuck
        }
        let drop = last_energy - e_round;
        if drop <= cfg.convergence_rel_energy * last_energy.max(S::cast(1e-12)) {
            break;
        }
        last_energy = e_round;
    }
    state
}

/// Deactivate the largest-|r| fraction of the active residuals. Ties resolve
/// by (point, frame, pixel) so reruns reject the same set.
pub fn reject_outliers<S: Scalar>(
    state: &CalibrationState<S>,
    table: &mut ResidualTable<S>,
    fraction: S,
) -> usize {
    if !(fraction > S::zero()) {
        return 0;
    }
    let mut ranked: Vec<(S, usize)> = table
        .residuals
        .iter()
        .enumerate()
        .filter(|(_, r)| r.active)
        .map(|(i, r)| (residual_value(state, r).abs(), i))
        .collect();
    let count =
        ((ranked.len() as f64) * fraction.to_f64_lossy() + 1e-9).floor() as usize;
    ranked.sort_by(|a, b| {
        b.0.partial_cmp(&a.0).unwrap().then_with(|| {
            let ra = &table.residuals[a.1];
            let rb = &table.residuals[b.1];
            (ra.point, ra.frame, ra.pixel).cmp(&(rb.point, rb.frame, rb.pixel))
        })
    });
    for &(_, idx) in ranked.iter().take(count) {
        table.residuals[idx].active = false;
    }
    count
}

/// Result of one block optimization.
pub struct BlockOutcome<S: Scalar> {
    pub state: CalibrationState<S>,
    pub table: ResidualTable<S>,
    pub trace: Vec<TraceEntry<S>>,
}

/// Full offline treatment of one block: observability guards, optimization to
/// convergence, outlier rejection, and a second optimization of the inliers.
pub fn optimize_block<S: Scalar>(
    db: &TrackDatabase<S>,
    basis: &Arc<ResponseBasis<S>>,
    cfg: &OptimizerConfig<S>,
) -> Result<BlockOutcome<S>> {
    cfg.validate()?;
    check_observability(db, cfg)?;
    let mut table = ResidualTable::build(db, cfg);
    if table.active_count() == 0 {
        return Err(Error::InsufficientCorrespondences(
            "all residuals saturated".into(),
        ));
    }
    let layout = ExposureLayout::dense(db.frame_count);
    let mut trace = Vec::new();

    let init = init_state(db, basis, &table);
    let mut state = optimize_rounds(init, &table, &layout, cfg, cfg.max_rounds, 0, &mut trace);

    if cfg.rejection_fraction > S::zero() {
        reject_outliers(&state, &mut table, cfg.rejection_fraction);
        let offset = trace.last().map(|t| t.round + 1).unwrap_or(0);
        state = optimize_rounds(state, &table, &layout, cfg, cfg.max_rounds, offset, &mut trace);
    }

    Ok(BlockOutcome {
        state,
        table,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ResponseModel, VignetteModel};
    use crate::optimizer::{energy, OptimizerConfig, Residual, ResidualGroup};
    use approx::assert_relative_eq;

    fn linear_basis() -> Arc<ResponseBasis<f64>> {
        Arc::new(ResponseBasis::analytic_fallback())
    }

    /// Hand-built table: one point, one pixel, one frame.
    fn single_residual_table(intensity: f64, r2: f64) -> ResidualTable<f64> {
        ResidualTable {
            residuals: vec![Residual {
                point: 0,
                pixel: 0,
                frame: 0,
                intensity,
                r2,
                weight_grad: 1.0,
                active: true,
            }],
            groups: vec![ResidualGroup {
                point: 0,
                pixel: 0,
                start: 0,
                end: 1,
            }],
            frame_count: 1,
            patch_pixels: 1,
        }
    }

    fn simple_state(radiance: f64) -> CalibrationState<f64> {
        CalibrationState {
            response: ResponseModel::unit(linear_basis()),
            vignette: VignetteModel::new([0.0; 3], 1.0),
            exposures: vec![1.0],
            radiances: vec![vec![radiance]],
        }
    }

    #[test]
    fn radiance_update_hand_value() {
        // Linear response, V = 1, e = 1, O = 51, L = 0.1:
        // r = 51 - 25.5 = 25.5, J = -255, undamped update lands at L = 0.2.
        let table = single_residual_table(51.0, 0.0);
        let mut state = simple_state(0.1);
        step_radiances(&mut state, &table, &OptimizerConfig::default(), 0.0);
        assert_relative_eq!(state.radiances[0][0], 0.2, epsilon = 1e-12);
    }

    #[test]
    fn saturated_group_skipped() {
        let table = single_residual_table(255.0, 0.0);
        // Saturation filtering happens at build time normally; force it here.
        let mut table = table;
        table.residuals[0].active = false;
        let mut state = simple_state(0.3);
        step_radiances(&mut state, &table, &OptimizerConfig::default(), 0.0);
        assert_eq!(state.radiances[0][0], 0.3);
    }

    #[test]
    fn exposure_jacobian_hand_value() {
        // Linear response, V = 1: dr/de = -255 L.
        let state = simple_state(0.4);
        let table = single_residual_table(80.0, 0.0);
        let (_, jac) = jacobian_row(&state, &table.residuals[0]);
        assert_relative_eq!(jac.d_exposure, -255.0 * 0.4, max_relative = 1e-9);
        assert_relative_eq!(jac.d_radiance, -255.0, max_relative = 1e-9);
    }

    #[test]
    fn vignette_jacobian_hand_value() {
        // dr/dv1 with linear response: -255 e L R^2.
        let mut state = simple_state(0.4);
        state.exposures = vec![0.7];
        let table = single_residual_table(80.0, 0.25);
        let (_, jac) = jacobian_row(&state, &table.residuals[0]);
        assert_relative_eq!(
            jac.d_vignette[0],
            -255.0 * 0.7 * 0.4 * 0.25,
            max_relative = 1e-9
        );
        assert_relative_eq!(
            jac.d_vignette[1],
            -255.0 * 0.7 * 0.4 * 0.25 * 0.25,
            max_relative = 1e-9
        );
    }

    #[test]
    fn params_step_at_ground_truth_is_tiny_and_accepted() {
        // Consistent observations at the exact state: nothing should move.
        let state = CalibrationState {
            response: ResponseModel::unit(linear_basis()),
            vignette: VignetteModel::new([-0.2, 0.0, 0.0], 1.0),
            exposures: vec![1.0, 1.3],
            radiances: vec![vec![0.4], vec![0.6]],
        };
        let mut residuals = Vec::new();
        let mut groups = Vec::new();
        for (pi, l) in [0.4, 0.6].iter().enumerate() {
            let start = residuals.len();
            for (fi, e) in [1.0, 1.3].iter().enumerate() {
                let r2 = 0.1 + 0.3 * pi as f64;
                let v = 1.0 - 0.2 * r2;
                residuals.push(Residual {
                    point: pi as u32,
                    pixel: 0,
                    frame: fi as u32,
                    intensity: 255.0 * e * v * l,
                    r2,
                    weight_grad: 1.0,
                    active: true,
                });
            }
            groups.push(ResidualGroup {
                point: pi,
                pixel: 0,
                start,
                end: residuals.len(),
            });
        }
        let table = ResidualTable {
            residuals,
            groups,
            frame_count: 2,
            patch_pixels: 1,
        };
        let cfg = OptimizerConfig::default();
        let layout = ExposureLayout::dense(2);
        assert!(energy(&state, &table, &cfg) < 1e-18);
        let (next, accepted, _) = step_params(&state, &table, &layout, &cfg, 1.0);
        assert!(accepted);
        for (a, b) in next.response.coeffs().iter().zip(state.response.coeffs()) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!((next.exposures[1] - 1.3).abs() < 1e-8);
    }

    #[test]
    fn params_step_reduces_energy_on_perturbed_exposure() {
        let gt = CalibrationState {
            response: ResponseModel::unit(linear_basis()),
            vignette: VignetteModel::new([0.0; 3], 1.0),
            exposures: vec![1.0, 1.5],
            radiances: vec![vec![0.3], vec![0.5], vec![0.7]],
        };
        let mut residuals = Vec::new();
        let mut groups = Vec::new();
        for (pi, l) in [0.3, 0.5, 0.7].iter().enumerate() {
            let start = residuals.len();
            for (fi, e) in [1.0, 1.5].iter().enumerate() {
                residuals.push(Residual {
                    point: pi as u32,
                    pixel: 0,
                    frame: fi as u32,
                    intensity: (255.0f64 * e * l).min(255.0),
                    r2: 0.2,
                    weight_grad: 1.0,
                    active: true,
                });
            }
            groups.push(ResidualGroup {
                point: pi,
                pixel: 0,
                start,
                end: residuals.len(),
            });
        }
        let table = ResidualTable {
            residuals,
            groups,
            frame_count: 2,
            patch_pixels: 1,
        };
        let cfg = OptimizerConfig::default();
        let layout = ExposureLayout::dense(2);

        let mut state = gt.clone();
        state.exposures[1] = 1.8; // perturb
        let e0 = energy(&state, &table, &cfg);
        let (next, accepted, _) = step_params(&state, &table, &layout, &cfg, 0.01);
        assert!(accepted);
        assert!(energy(&next, &table, &cfg) < e0);
        assert!((next.exposures[1] - 1.5).abs() < 0.05, "{}", next.exposures[1]);
    }

    #[test]
    fn rejection_counts_and_order_statistics() {
        let mut residuals = Vec::new();
        for i in 0..100u32 {
            residuals.push(Residual {
                point: i,
                pixel: 0,
                frame: 0,
                intensity: i as f64, // residual magnitude grows with i
                r2: 0.0,
                weight_grad: 1.0,
                active: true,
            });
        }
        let groups = (0..100)
            .map(|i| ResidualGroup {
                point: i,
                pixel: 0,
                start: i,
                end: i + 1,
            })
            .collect();
        let mut table = ResidualTable {
            residuals,
            groups,
            frame_count: 1,
            patch_pixels: 1,
        };
        let state = CalibrationState {
            response: ResponseModel::unit(linear_basis()),
            vignette: VignetteModel::new([0.0; 3], 1.0),
            exposures: vec![1.0],
            radiances: (0..100).map(|_| vec![0.0]).collect(),
        };
        // All radiances 0 -> r = intensity, so the top 20 are points 80..99.
        assert_eq!(reject_outliers(&state, &mut table, 0.0), 0);
        let n = reject_outliers(&state, &mut table, 0.2);
        assert_eq!(n, 20);
        for r in &table.residuals {
            assert_eq!(r.active, r.point < 80, "point {}", r.point);
        }
    }

    #[test]
    fn strided_layout_interpolates_geometrically() {
        let layout: ExposureLayout<f64> = ExposureLayout::strided(11, 5);
        assert_eq!(layout.node_frames(), &[0, 5, 10]);
        let nodes = vec![1.0, 4.0, 2.0];
        let mut exposures = vec![0.0; 11];
        layout.interpolate(&nodes, &mut exposures);
        assert_relative_eq!(exposures[0], 1.0);
        assert_relative_eq!(exposures[5], 4.0);
        assert_relative_eq!(exposures[10], 2.0);
        // Geometric midpoints.
        assert_relative_eq!(exposures[1], 4.0f64.powf(0.2), epsilon = 1e-12);
        assert_relative_eq!(exposures[7], (4.0f64.ln() * 0.6 + 2.0f64.ln() * 0.4).exp(), epsilon = 1e-12);
    }
}
