//! Joint reconstruction and motion estimation.
//!
//! A stack of k-space acquisitions `x_1..x_T` is modeled as `x_i = A u_i`
//! where every frame shows the same underlying image deformed by its own
//! motion: `u_i = u ∘ φ_i⁻¹` with `φ_i = Id + z_i`. The solver recovers the
//! shared image `u` and the per-acquisition displacements `z_i` by
//! alternating descent on one decoupled energy with five terms (each
//! averaged over the `T` acquisitions):
//!
//! ```text
//! E = Σ_i [ Σ_p W(I + v_i)                                 hyperelastic
//!         + γ₁/2 ‖v_i − ∇z_i‖²                             coupling
//!         + γ₃/2 ‖A w_i − x_i‖²                            data
//!         + γ₂/2 ‖(w_i − u∘φ_i⁻¹) √det∇φ_i⁻¹‖²             matching
//!         + 1/(2θ) ‖f_i − w_i‖² + TV_g(f_i) ] / T          prox_tv
//! ```
//!
//! `v_i` is a relaxed surrogate for the deformation gradient `∇z_i`, `w_i`
//! is a per-acquisition image tied to the data, and `f_i` is its
//! edge-weighted TV denoisal. One outer iteration updates the blocks in
//! order:
//!
//! 1. `N` inner steps alternating [`update_v`](crate::hyperelastic::update_v)
//!    and [`update_phi`](crate::deformation::update_phi), with a regrid
//!    whenever a proposed displacement would drop `det(I+∇z)` below the
//!    floor (the last valid displacement is saved and composition restarts
//!    from identity);
//! 2. inversion of each total deformation ([`invert`](crate::deformation::invert)
//!    segment by segment);
//! 3. the closed-form pointwise minimizer for `w_i` ([`update_w`]);
//! 4. the weighted-TV proximal step for `f_i` ([`prox_wtv`](crate::wtv::prox_wtv));
//! 5. the closed-form average for `u` ([`update_u`]).
//!
//! Because the flow moves displacements by a fraction of a pixel per step,
//! [`solve`] runs coarse to fine on a factor-2 pyramid: displacements and
//! their gradient surrogates are prolonged between levels, while `u`, `w_i`
//! and `f_i` are re-derived from resolution-matched data at every level.
//! (With the matching weight `γ₂` large, `w_i` is pinned to `u∘φ_i⁻¹`
//! within an outer iteration or two, so image content upsampled from a
//! coarse grid would never be re-sharpened by the data term; the pyramid's
//! job here is to warm-start the registration, not the image.)
//!
//! Stability is enforced two ways: the flow time step is clamped so that
//! `dt·γ₂·max|∇w|² < 1` (the matching force is the stiffest term), and any
//! diverged step or failed inversion triggers a retry of the whole outer
//! iteration for that acquisition with halved time steps, up to three
//! halvings.
//!
//! All cross-acquisition reductions run in acquisition order, so results
//! are deterministic; the per-acquisition work inside an outer iteration is
//! independent and executes in parallel.

use rayon::prelude::*;

use crate::calculus::{
    gradient, gradient_centered, sample_bilinear, sample_bilinear_clamped, warp,
};
use crate::config::SolverConfig;
use crate::deformation::{
    compose, invert, jacobian_determinant, update_phi_with_gradient, DeformationState,
    InversionParams,
};
use crate::edge_weights::{weight_map_from_image, EdgeWeightParams};
use crate::error::{Error, Result};
use crate::field::{ComplexField, DisplacementField, ScalarField, TensorField};
use crate::fourier::{FourierOp, KSpaceStack};
use crate::hyperelastic::{update_v, w_op, Mat2, OgdenParams};
use crate::wtv::{prox_wtv, tv_g};

/// Coarsest pyramid level must keep at least this many pixels per side so
/// that gradients and the screened-Poisson interior remain meaningful.
const MIN_COARSE_DIM: usize = 8;

/// Maximum number of time-step halvings before a diverged acquisition
/// update is reported to the caller.
const MAX_DT_HALVINGS: usize = 3;

/// Largest displacement (in pixels) any single flow step may move a pixel
/// under the matching force; the time step is clamped to enforce this.
const MAX_FLOW_STEP: f64 = 0.15;

/// The adaptive time-step estimate is refreshed this often (inner steps).
const DT_REFRESH_INTERVAL: usize = 50;

/// Settings for inverting the total (chained) deformation of a frame.
/// Under-relaxed and given extra iterations compared to the per-segment
/// default: the flow routinely passes through strongly sheared (but
/// orientation-preserving) transients.
const TOTAL_INVERSION: InversionParams = InversionParams {
    tolerance: 1e-3,
    max_iterations: 600,
    damping: 0.5,
};

/// The five energy terms, each already averaged over acquisitions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyTerms {
    /// Stored hyperelastic energy `Σ W(I + v_i)`.
    pub hyperelastic: f64,
    /// Gradient coupling `γ₁/2 ‖v_i − ∇z_i‖²`.
    pub coupling: f64,
    /// k-space fidelity `γ₃/2 ‖A w_i − x_i‖²`.
    pub data: f64,
    /// Image matching `γ₂/2 ‖(w_i − u∘φ_i⁻¹)√det∇φ_i⁻¹‖²`.
    pub matching: f64,
    /// Proximal coupling plus weighted TV, `1/(2θ)‖f_i − w_i‖² + TV_g(f_i)`.
    pub prox_tv: f64,
}

impl EnergyTerms {
    /// Sum of all five terms.
    pub fn total(&self) -> f64 {
        self.hyperelastic + self.coupling + self.data + self.matching + self.prox_tv
    }
}

/// One row of the energy log, recorded after every outer iteration.
#[derive(Debug, Clone, Copy)]
pub struct EnergyRecord {
    /// Global outer-iteration counter, starting at 0 on the coarsest level.
    pub iter: usize,
    /// Pyramid level of this iteration; 0 is the finest (full resolution).
    pub level: usize,
    /// Energy terms at the end of the iteration.
    pub terms: EnergyTerms,
    /// Minimum over acquisitions of `det(I+∇z_i)` for the working
    /// (post-regrid) displacement.
    pub min_det: f64,
    /// Cumulative regrid count over all acquisitions.
    pub regrids: usize,
}

/// Per-acquisition solver state.
#[derive(Debug, Clone)]
pub struct FrameState {
    /// Deformation aligning this acquisition to the reference, including
    /// any regrid history.
    pub deformation: DeformationState,
    /// Relaxed surrogate for the displacement gradient.
    pub v: TensorField,
    /// Per-acquisition image variable tied to the k-space data.
    pub w: ScalarField,
    /// Edge-weighted TV denoisal of `w`.
    pub f: ScalarField,
    /// Edge-stopping weight map for this acquisition.
    pub g: ScalarField,
    /// Displacement of the inverse deformation `φ⁻¹ = Id + z_inv`.
    pub z_inv: DisplacementField,
    /// `‖φ ∘ φ⁻¹ − Id‖_∞` for the most recent inversion.
    pub inversion_residual: f64,
    /// Persistent per-acquisition time-step scale, halved on retries.
    dt_scale: f64,
}

/// Full solver state: the shared image plus one [`FrameState`] per
/// acquisition and the energy log accumulated across all levels.
#[derive(Debug, Clone)]
pub struct JointState {
    /// The motion-free reconstruction.
    pub u: ScalarField,
    /// Per-acquisition variables, in acquisition order.
    pub frames: Vec<FrameState>,
    /// One record per outer iteration, coarsest level first.
    pub energy_log: Vec<EnergyRecord>,
}

impl JointState {
    /// Total displacement `z_i` (regrid history composed in) per
    /// acquisition.
    pub fn total_displacements(&self) -> Result<Vec<DisplacementField>> {
        self.frames
            .iter()
            .map(|f| f.deformation.total_displacement())
            .collect()
    }

    /// Motion-compensated frames `w_i ∘ φ_i`, the per-acquisition images
    /// pulled back to the reference geometry.
    pub fn registered_frames(&self) -> Result<Vec<ScalarField>> {
        self.frames
            .iter()
            .map(|f| warp(&f.w, &f.deformation.total_displacement()?))
            .collect()
    }

    /// Evaluates the decoupled energy for this state against `acquisitions`.
    pub fn energy(&self, acquisitions: &KSpaceStack, cfg: &SolverConfig) -> Result<EnergyTerms> {
        let (w, h) = self.u.dims();
        let op = FourierOp::new(w, h)?;
        energy_terms(&self.u, &self.frames, acquisitions, &op, cfg)
    }
}

/// Summary of a [`solve`] run.
#[derive(Debug, Clone)]
pub struct SolveReport {
    /// Wall-clock duration of the whole run.
    pub wall_time: std::time::Duration,
    /// Number of pyramid levels actually used (requested levels are reduced
    /// when the grid is too small or not divisible).
    pub levels_used: usize,
    /// Regrid count per acquisition on the finest level.
    pub regrid_counts: Vec<usize>,
    /// Minimum of `det(I+∇z_i)` of the total displacement per acquisition.
    pub min_det: Vec<f64>,
    /// Final inversion residual `‖φ_i ∘ φ_i⁻¹ − Id‖_∞` per acquisition.
    pub inversion_residuals: Vec<f64>,
    /// Total number of time-step halvings consumed by retries.
    pub dt_halvings: usize,
}

/// Evaluates the five energy terms for explicit state pieces.
///
/// The coupling term pairs `v_i` with the gradient of the working
/// (post-regrid) displacement — the segment the flow currently evolves —
/// while the matching term uses the latest inverse of the total
/// deformation, which is the physically meaningful alignment.
pub fn energy(
    state: &JointState,
    acquisitions: &KSpaceStack,
    op: &FourierOp,
    cfg: &SolverConfig,
) -> Result<EnergyTerms> {
    energy_terms(&state.u, &state.frames, acquisitions, op, cfg)
}

fn energy_terms(
    u: &ScalarField,
    frames: &[FrameState],
    acquisitions: &KSpaceStack,
    op: &FourierOp,
    cfg: &SolverConfig,
) -> Result<EnergyTerms> {
    if frames.is_empty() {
        return Err(Error::DegenerateInput("energy of an empty state"));
    }
    if frames.len() != acquisitions.len() {
        return Err(Error::GridMismatch {
            context: "energy: frames vs acquisitions",
            expected: (frames.len(), 1),
            got: (acquisitions.len(), 1),
        });
    }
    let ogden = OgdenParams {
        a1: cfg.a1,
        a2: cfg.a2,
    };
    let inv_theta = 1.0 / cfg.theta;
    let mut terms = EnergyTerms {
        hyperelastic: 0.0,
        coupling: 0.0,
        data: 0.0,
        matching: 0.0,
        prox_tv: 0.0,
    };
    for (frame, x) in frames.iter().zip(acquisitions.frames()) {
        u.check_same_dims(&frame.w, "energy: u vs w")?;
        let n = frame.w.len();

        let v = &frame.v;
        let gz1 = gradient(&frame.deformation.current.x);
        let gz2 = gradient(&frame.deformation.current.y);
        for i in 0..n {
            let f_mat = Mat2 {
                xx: 1.0 + v.xx.as_slice()[i],
                xy: v.xy.as_slice()[i],
                yx: v.yx.as_slice()[i],
                yy: 1.0 + v.yy.as_slice()[i],
            };
            terms.hyperelastic += w_op(&f_mat, &ogden);
            let dxx = v.xx.as_slice()[i] - gz1.x.as_slice()[i];
            let dxy = v.xy.as_slice()[i] - gz1.y.as_slice()[i];
            let dyx = v.yx.as_slice()[i] - gz2.x.as_slice()[i];
            let dyy = v.yy.as_slice()[i] - gz2.y.as_slice()[i];
            terms.coupling += 0.5 * cfg.gamma1 * (dxx * dxx + dxy * dxy + dyx * dyx + dyy * dyy);
        }

        let aw = op.forward(&frame.w)?;
        let mut data = 0.0;
        for (lhs, rhs) in aw.as_slice().iter().zip(x.as_slice()) {
            data += (lhs - rhs).norm_sqr();
        }
        terms.data += 0.5 * cfg.gamma3 * data;

        let pulled = warp(u, &frame.z_inv)?;
        let det_inv = jacobian_determinant(&frame.z_inv);
        for i in 0..n {
            let d = frame.w.as_slice()[i] - pulled.as_slice()[i];
            // The determinant weights the matching residual as an area
            // element; where the inverse map folds (isolated pixels under
            // heavy motion) the change of variables is invalid and the
            // sample is dropped rather than given negative mass.
            terms.matching += 0.5 * cfg.gamma2 * det_inv.as_slice()[i].max(0.0) * d * d;
        }

        let mut prox = 0.0;
        for (fv, wv) in frame.f.as_slice().iter().zip(frame.w.as_slice()) {
            prox += 0.5 * inv_theta * (fv - wv) * (fv - wv);
        }
        terms.prox_tv += prox + tv_g(&frame.f, &frame.g)?;
    }
    let t = frames.len() as f64;
    terms.hyperelastic /= t;
    terms.coupling /= t;
    terms.data /= t;
    terms.matching /= t;
    terms.prox_tv /= t;
    Ok(terms)
}

/// Closed-form minimizer of the energy over one acquisition image `w`.
///
/// With the Fourier operator unitary (`A*A = Id`), the data, matching and
/// proximal terms decouple per pixel and the minimizer is
///
/// ```text
/// w = (γ₂ d q + f/θ + γ₃ A*x) / (γ₂ d + 1/θ + γ₃)
/// ```
///
/// where `q = u ∘ φ⁻¹` and `d = det ∇φ⁻¹`, clamped at zero: pixels where
/// the inverse map folds carry no valid area element and drop out of the
/// matching term instead of contributing negative mass. `γ₂ = 0` is
/// admitted (the matching term drops out); `θ = ∞` likewise zeroes the
/// proximal pull, so with both absent `w = A*x` exactly.
pub fn update_w(
    u: &ScalarField,
    z_inv: &DisplacementField,
    det_inv: &ScalarField,
    f: &ScalarField,
    x: &ComplexField,
    op: &FourierOp,
    cfg: &SolverConfig,
) -> Result<ScalarField> {
    u.check_same_dims(det_inv, "update_w: u vs det_inv")?;
    u.check_same_dims(f, "update_w: u vs f")?;
    u.check_same_dims(&z_inv.x, "update_w: u vs z_inv")?;
    let inv_theta = 1.0 / cfg.theta;
    if cfg.gamma2 > 0.0 && !(det_inv.max() > 0.0) {
        return Err(Error::param(
            "det_inv",
            "must be positive somewhere for the matching term to act",
            det_inv.max(),
        ));
    }
    if !(cfg.gamma2 + cfg.gamma3 + inv_theta > 0.0) {
        return Err(Error::param(
            "gamma3",
            "update_w needs at least one active term",
            cfg.gamma3,
        ));
    }
    let q = warp(u, z_inv)?;
    let a = op.adjoint(x)?;
    let n = u.len();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let d = cfg.gamma2 * det_inv.as_slice()[i].max(0.0);
        let numer = d * q.as_slice()[i] + inv_theta * f.as_slice()[i] + cfg.gamma3 * a.as_slice()[i];
        out[i] = numer / (d + inv_theta + cfg.gamma3);
    }
    let (w, h) = u.dims();
    ScalarField::from_vec(w, h, out)
}

/// Closed-form minimizer of the matching term over the shared image:
/// the average of the acquisitions pulled back to the reference geometry,
/// `u = (1/T) Σ_i w_i ∘ φ_i`.
pub fn update_u(ws: &[ScalarField], zs: &[DisplacementField]) -> Result<ScalarField> {
    if ws.is_empty() {
        return Err(Error::DegenerateInput("update_u with no acquisitions"));
    }
    if ws.len() != zs.len() {
        return Err(Error::GridMismatch {
            context: "update_u: images vs displacements",
            expected: (ws.len(), 1),
            got: (zs.len(), 1),
        });
    }
    let (w, h) = ws[0].dims();
    let mut acc = vec![0.0; w * h];
    for (img, z) in ws.iter().zip(zs) {
        ws[0].check_same_dims(img, "update_u: image dims")?;
        let warped = warp(img, z)?;
        for (a, v) in acc.iter_mut().zip(warped.as_slice()) {
            *a += v;
        }
    }
    let t = ws.len() as f64;
    for a in &mut acc {
        *a /= t;
    }
    ScalarField::from_vec(w, h, acc)
}

/// Renders the energy log as CSV, one row per outer iteration.
pub fn energy_log_csv(log: &[EnergyRecord]) -> String {
    let mut out = String::from(
        "iter,level,hyperelastic,coupling,data,matching,prox_tv,total,min_det,regrids\n",
    );
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.iter,
            r.level,
            r.terms.hyperelastic,
            r.terms.coupling,
            r.terms.data,
            r.terms.matching,
            r.terms.prox_tv,
            r.terms.total(),
            r.min_det,
            r.regrids
        ));
    }
    out
}

/// Jointly reconstructs the shared image and per-acquisition deformations.
///
/// Runs coarse to fine over a factor-2 pyramid (requested levels are
/// reduced so the coarsest grid keeps at least 8 pixels per side and all
/// levels divide evenly). At each level the k-space data is synthesized by
/// forward-transforming box-downsampled full-resolution images (the
/// original data is used unchanged on the finest level); displacements and
/// gradient surrogates carry across levels, images are re-derived from the
/// level's data.
///
/// `initial_u` overrides the default initialization (the adjoint of the
/// reference acquisition) — pass the Euclidean mean of the adjoints to
/// start from the motion-blurred average instead.
///
/// Returns the final state together with a [`SolveReport`]. Fails with
/// [`Error::StepDiverged`] or [`Error::InversionFailed`] only after three
/// time-step halvings for the affected acquisition.
pub fn solve(
    acquisitions: &KSpaceStack,
    cfg: &SolverConfig,
    initial_u: Option<&ScalarField>,
) -> Result<(JointState, SolveReport)> {
    cfg.validate()?;
    let t_frames = acquisitions.len();
    let (full_w, full_h) = acquisitions.dims();
    if cfg.reference_index >= t_frames {
        return Err(Error::param(
            "reference_index",
            "must index an acquisition",
            cfg.reference_index as f64,
        ));
    }
    if let Some(img) = initial_u {
        if img.dims() != (full_w, full_h) {
            return Err(Error::GridMismatch {
                context: "solve: initial_u vs acquisitions",
                expected: (full_w, full_h),
                got: img.dims(),
            });
        }
    }
    let start = std::time::Instant::now();
    let ogden = OgdenParams {
        a1: cfg.a1,
        a2: cfg.a2,
    };

    let op_full = FourierOp::new(full_w, full_h)?;
    let full_adjoints: Vec<ScalarField> = acquisitions
        .frames()
        .iter()
        .map(|x| op_full.adjoint(x))
        .collect::<Result<_>>()?;

    let levels = effective_levels(full_w, full_h, cfg.levels);
    let mut carried: Option<Vec<(DisplacementField, TensorField)>> = None;
    let mut energy_log: Vec<EnergyRecord> = Vec::new();
    let mut dt_halvings = 0usize;
    let mut global_iter = 0usize;
    let mut finest: Option<(ScalarField, Vec<FrameState>)> = None;

    for level in (0..levels).rev() {
        let (w_l, h_l) = (full_w >> level, full_h >> level);
        let op = FourierOp::new(w_l, h_l)?;
        let x_level: Vec<ComplexField> = if level == 0 {
            acquisitions.frames().to_vec()
        } else {
            full_adjoints
                .iter()
                .map(|a| op.forward(&box_downsample(a, level)?))
                .collect::<Result<_>>()?
        };
        let stack = KSpaceStack::new(x_level)?;
        let adjoints: Vec<ScalarField> = stack
            .frames()
            .iter()
            .map(|x| op.adjoint(x))
            .collect::<Result<_>>()?;
        let ew = EdgeWeightParams {
            sigma: cfg.sigma,
            lambda: None,
            floor: cfg.g_floor,
        };

        let mut u = match initial_u {
            Some(img) => box_downsample(img, level)?,
            None => adjoints[cfg.reference_index].clone(),
        };
        let mut frames: Vec<FrameState> = (0..t_frames)
            .map(|i| -> Result<FrameState> {
                let mut deformation = DeformationState::new(w_l, h_l)?;
                let mut v = TensorField::zeros(w_l, h_l)?;
                if let Some(prev) = &carried {
                    deformation.set_current(prolong_displacement(&prev[i].0)?)?;
                    v = prolong_tensor(&prev[i].1)?;
                }
                Ok(FrameState {
                    deformation,
                    v,
                    w: adjoints[i].clone(),
                    f: adjoints[i].clone(),
                    g: weight_map_from_image(&adjoints[i], &ew)?,
                    z_inv: DisplacementField::zeros(w_l, h_l)?,
                    inversion_residual: 0.0,
                    dt_scale: 1.0,
                })
            })
            .collect::<Result<_>>()?;

        for _ in 0..cfg.k_outer {
            let halvings: Vec<usize> = frames
                .par_iter_mut()
                .enumerate()
                .map(|(i, frame)| frame_outer_iteration(frame, &u, &stack.frames()[i], &op, cfg, &ogden))
                .collect::<Result<_>>()?;
            dt_halvings += halvings.iter().sum::<usize>();

            let totals: Vec<DisplacementField> = frames
                .iter()
                .map(|fr| total_displacement_exact(&fr.deformation))
                .collect();
            let ws: Vec<ScalarField> = frames.iter().map(|fr| fr.w.clone()).collect();
            u = update_u(&ws, &totals)?;

            let terms = energy_terms(&u, &frames, &stack, &op, cfg)?;
            let min_det = frames
                .iter()
                .map(|fr| fr.deformation.min_current_det())
                .fold(f64::INFINITY, f64::min);
            let regrids = frames.iter().map(|fr| fr.deformation.regrid_count()).sum();
            energy_log.push(EnergyRecord {
                iter: global_iter,
                level,
                terms,
                min_det,
                regrids,
            });
            global_iter += 1;
        }

        if level > 0 {
            carried = Some(
                frames
                    .iter()
                    .map(|fr| Ok((fr.deformation.total_displacement()?, fr.v.clone())))
                    .collect::<Result<_>>()?,
            );
        } else {
            finest = Some((u, frames));
        }
    }

    let (u, frames) = finest.expect("pyramid always runs a finest level");
    let min_det = frames
        .iter()
        .map(|fr| total_min_det(&fr.deformation))
        .collect();
    let report = SolveReport {
        wall_time: start.elapsed(),
        levels_used: levels,
        regrid_counts: frames.iter().map(|fr| fr.deformation.regrid_count()).collect(),
        min_det,
        inversion_residuals: frames.iter().map(|fr| fr.inversion_residual).collect(),
        dt_halvings,
    };
    let state = JointState {
        u,
        frames,
        energy_log,
    };
    Ok((state, report))
}

/// One outer iteration for a single acquisition: registration inner loop,
/// inversion, image update, TV proximal step. Retries with halved time
/// steps on divergence; returns the number of halvings consumed.
fn frame_outer_iteration(
    frame: &mut FrameState,
    u: &ScalarField,
    x: &ComplexField,
    op: &FourierOp,
    cfg: &SolverConfig,
    ogden: &OgdenParams,
) -> Result<usize> {
    if cfg.freeze_motion {
        let det_inv = jacobian_determinant(&frame.z_inv);
        frame.w = update_w(u, &frame.z_inv, &det_inv, &frame.f, x, op, cfg)?;
        frame.f = prox_wtv(&frame.w, &frame.g, cfg.theta, cfg.n_chambolle, cfg.delta_t)?;
        return Ok(0);
    }
    let mut halvings = 0usize;
    loop {
        match attempt_frame_outer(frame.clone(), u, x, op, cfg, ogden) {
            Ok(next) => {
                *frame = next;
                return Ok(halvings);
            }
            Err(e) if halvings < MAX_DT_HALVINGS && is_retryable(&e) => {
                frame.dt_scale *= 0.5;
                halvings += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

fn is_retryable(e: &Error) -> bool {
    matches!(
        e,
        Error::StepDiverged { .. } | Error::InversionFailed { .. }
    )
}

fn attempt_frame_outer(
    mut frame: FrameState,
    u: &ScalarField,
    x: &ComplexField,
    op: &FourierOp,
    cfg: &SolverConfig,
    ogden: &OgdenParams,
) -> Result<FrameState> {
    // The flow registers the acquisition image as seen through any earlier
    // regrids; `w` itself stays in the original acquisition geometry.
    let mut w_work = match saved_composition(&frame.deformation)? {
        Some(chain) => warp(&frame.w, &chain)?,
        None => frame.w.clone(),
    };
    let mut grad_w = gradient_centered(&w_work);
    let dt_v = cfg.dt_v * frame.dt_scale;
    let mut dt_phi = adaptive_dt_phi(
        cfg,
        frame.dt_scale,
        &grad_w,
        &w_work,
        &frame.deformation.current,
        u,
    )?;
    let thrash_cap = (cfg.n_inner / 10).max(4);
    let mut regrids_this = 0usize;

    for step in 0..cfg.n_inner {
        if step > 0 && step % DT_REFRESH_INTERVAL == 0 {
            dt_phi = adaptive_dt_phi(
                cfg,
                frame.dt_scale,
                &grad_w,
                &w_work,
                &frame.deformation.current,
                u,
            )?;
        }
        frame.v = update_v(&frame.v, &frame.deformation.current, ogden, cfg.gamma1, dt_v)?;
        let z_cand = update_phi_with_gradient(
            &frame.deformation.current,
            &frame.v,
            &w_work,
            &grad_w,
            u,
            cfg.gamma1,
            cfg.gamma2,
            dt_phi,
        )?;
        if jacobian_determinant(&z_cand).min() < cfg.det_floor {
            // Discard the violating step; save the last valid displacement
            // and restart from identity against the resampled image.
            frame.deformation.force_regrid(&mut frame.v, &mut w_work)?;
            grad_w = gradient_centered(&w_work);
            dt_phi = adaptive_dt_phi(
                cfg,
                frame.dt_scale,
                &grad_w,
                &w_work,
                &frame.deformation.current,
                u,
            )?;
            regrids_this += 1;
            if regrids_this > thrash_cap {
                return Err(Error::StepDiverged { pixel: 0, dt: dt_phi });
            }
        } else {
            frame.deformation.set_current(z_cand)?;
        }
    }

    let (z_inv, residual, residual_mean) = invert_total(&frame.deformation)?;
    let det_inv = jacobian_determinant(&z_inv);
    // Where the total map folds, its pointwise inverse kinks and the
    // discrete determinant dips below zero; those pixels are dropped from
    // the matching weights, so a handful is tolerable. Reject the step
    // when folding stops being isolated or the round trip drifts: then the
    // inverse is unusable for the image-matching update.
    let folded = det_inv.as_slice().iter().filter(|&&d| d <= 0.0).count();
    if folded * 100 > det_inv.len() || residual_mean > 0.1 || residual > 1.5 {
        return Err(Error::InversionFailed {
            iterations: TOTAL_INVERSION.max_iterations,
            residual,
        });
    }
    frame.z_inv = z_inv;
    frame.inversion_residual = residual;
    frame.w = update_w(u, &frame.z_inv, &det_inv, &frame.f, x, op, cfg)?;
    frame.f = prox_wtv(&frame.w, &frame.g, cfg.theta, cfg.n_chambolle, cfg.delta_t)?;
    Ok(frame)
}

/// Composition of the saved regrid maps only (no working displacement);
/// `None` when no regrid has happened.
fn saved_composition(d: &DeformationState) -> Result<Option<DisplacementField>> {
    let mut acc: Option<DisplacementField> = None;
    for s in d.saved() {
        acc = Some(match acc {
            None => s.clone(),
            Some(a) => compose(&a, s)?,
        });
    }
    Ok(acc)
}

/// Displacement of the total deformation at the continuous point `q`,
/// evaluated by pushing the point through the original segments one after
/// another (innermost working displacement first, then the saved regrid
/// maps from newest to oldest). Keeping the segments separate avoids the
/// resampling error that folding them onto a single grid accumulates.
fn chain_displacement(d: &DeformationState, qx: f64, qy: f64) -> (f64, f64) {
    let (mut px, mut py) = (qx, qy);
    let step = |z: &DisplacementField, px: &mut f64, py: &mut f64| {
        let dx = sample_bilinear_clamped(&z.x, *px, *py);
        let dy = sample_bilinear_clamped(&z.y, *px, *py);
        *px += dx;
        *py += dy;
    };
    step(&d.current, &mut px, &mut py);
    for s in d.saved().iter().rev() {
        step(s, &mut px, &mut py);
    }
    (px - qx, py - qy)
}

/// Total forward displacement of the deformation chain evaluated exactly
/// at every pixel, each segment sampled on its own grid. Folding the
/// history onto a single grid instead compounds one bilinear resampling
/// error per regrid.
fn total_displacement_exact(d: &DeformationState) -> DisplacementField {
    if d.saved().is_empty() {
        return d.current.clone();
    }
    let (w, h) = (d.current.x.width(), d.current.x.height());
    let mut zx = vec![0.0; w * h];
    let mut zy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = chain_displacement(d, x as f64, y as f64);
            zx[y * w + x] = dx;
            zy[y * w + x] = dy;
        }
    }
    DisplacementField {
        x: ScalarField::raw(w, h, zx),
        y: ScalarField::raw(w, h, zy),
    }
}

/// Gradients of both displacement planes for every segment of the chain,
/// in walk order (working displacement first, then saved maps newest to
/// oldest) — the layout [`chain_jacobian`] consumes.
fn chain_gradients(
    d: &DeformationState,
) -> Vec<(crate::field::VectorField, crate::field::VectorField)> {
    let mut g = vec![(
        gradient_centered(&d.current.x),
        gradient_centered(&d.current.y),
    )];
    for s in d.saved().iter().rev() {
        g.push((gradient_centered(&s.x), gradient_centered(&s.y)));
    }
    g
}

/// Smallest pointwise determinant of the total deformation gradient,
/// accumulated by the chain rule along the original segments. The
/// determinant of the single-grid composition underestimates it: bilinear
/// resampling of steep segments can report folds where the actual chain
/// still preserves orientation.
fn total_min_det(d: &DeformationState) -> f64 {
    let grads = chain_gradients(d);
    let (w, h) = (d.current.x.width(), d.current.x.height());
    let mut min = f64::INFINITY;
    for y in 0..h {
        for x in 0..w {
            let j = chain_jacobian(d, &grads, x as f64, y as f64);
            min = min.min(j[0] * j[3] - j[1] * j[2]);
        }
    }
    min
}

/// Jacobian `∇φ` of the total deformation at the continuous point `q` by
/// the chain rule, using per-segment displacement gradients sampled along
/// the same walk as [`chain_displacement`]. `grads` holds, per segment in
/// chain order (working displacement first), the gradients of the x and y
/// displacement planes.
fn chain_jacobian(
    d: &DeformationState,
    grads: &[(crate::field::VectorField, crate::field::VectorField)],
    qx: f64,
    qy: f64,
) -> [f64; 4] {
    let (mut px, mut py) = (qx, qy);
    // Row-major 2x2 accumulator, starts as the identity.
    let mut m = [1.0, 0.0, 0.0, 1.0];
    let segment = |z: &DisplacementField,
                       g: &(crate::field::VectorField, crate::field::VectorField),
                       px: &mut f64,
                       py: &mut f64,
                       m: &mut [f64; 4]| {
        let j = [
            1.0 + sample_bilinear_clamped(&g.0.x, *px, *py),
            sample_bilinear_clamped(&g.0.y, *px, *py),
            sample_bilinear_clamped(&g.1.x, *px, *py),
            1.0 + sample_bilinear_clamped(&g.1.y, *px, *py),
        ];
        *m = [
            j[0] * m[0] + j[1] * m[2],
            j[0] * m[1] + j[1] * m[3],
            j[2] * m[0] + j[3] * m[2],
            j[2] * m[1] + j[3] * m[3],
        ];
        let dx = sample_bilinear_clamped(&z.x, *px, *py);
        let dy = sample_bilinear_clamped(&z.y, *px, *py);
        *px += dx;
        *py += dy;
    };
    segment(&d.current, &grads[0], &mut px, &mut py, &mut m);
    for (k, s) in d.saved().iter().rev().enumerate() {
        segment(s, &grads[k + 1], &mut px, &mut py, &mut m);
    }
    m
}

/// Inverts the total deformation by an under-relaxed fixed-point iteration
/// `z⁻¹ ← (1−α) z⁻¹ − α z(p + z⁻¹(p))` that evaluates the total through
/// [`chain_displacement`], warm-started from the composition of per-segment
/// inverses; pixels the fixed point cannot settle (the iteration requires
/// every eigenvalue of `∇z` above −1, which a composition of individually
/// mild segments can violate at isolated points) are polished by a per-pixel
/// Newton solve of `φ(q) = p` with the chain-rule Jacobian. Returns the
/// inverse displacement and the worst-pixel and mean round-trip residuals
/// `φ ∘ φ⁻¹ − Id`.
fn invert_total(d: &DeformationState) -> Result<(DisplacementField, f64, f64)> {
    let params = TOTAL_INVERSION;
    let mut acc = invert(&d.current, &params)?.displacement;
    for s in d.saved().iter().rev() {
        let inv_s = invert(s, &params)?.displacement;
        acc = compose(&acc, &inv_s)?;
    }
    let (w, h) = (acc.x.width(), acc.x.height());
    if !d.saved().is_empty() {
        // Refine the folded warm start against the exact segment chain.
        let alpha = params.damping;
        let mut ix = acc.x.as_slice().to_vec();
        let mut iy = acc.y.as_slice().to_vec();
        for _ in 0..params.max_iterations {
            let mut biggest = 0.0f64;
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let (dx, dy) =
                        chain_displacement(d, x as f64 + ix[i], y as f64 + iy[i]);
                    let nx = (1.0 - alpha) * ix[i] - alpha * dx;
                    let ny = (1.0 - alpha) * iy[i] - alpha * dy;
                    biggest = biggest.max((nx - ix[i]).hypot(ny - iy[i]));
                    ix[i] = nx;
                    iy[i] = ny;
                }
            }
            if biggest < params.tolerance {
                break;
            }
        }
        acc = DisplacementField {
            x: ScalarField::raw(w, h, ix),
            y: ScalarField::raw(w, h, iy),
        };
    }
    let round_trip = |acc: &DisplacementField, i: usize, x: usize, y: usize| {
        let (dx, dy) = chain_displacement(
            d,
            x as f64 + acc.x.as_slice()[i],
            y as f64 + acc.y.as_slice()[i],
        );
        (acc.x.as_slice()[i] + dx).hypot(acc.y.as_slice()[i] + dy)
    };
    // Newton polish where the fixed point stalled.
    let mut grads: Option<Vec<_>> = None;
    let mut ix = None;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if round_trip(&acc, i, x, y) <= 10.0 * params.tolerance {
                continue;
            }
            let grads = grads.get_or_insert_with(|| chain_gradients(d));
            let (ix, iy) = ix.get_or_insert_with(|| {
                (acc.x.as_slice().to_vec(), acc.y.as_slice().to_vec())
            });
            let (px, py) = (x as f64, y as f64);
            let (wx, wy) = (px + ix[i], py + iy[i]);
            let residual_at = |qx: f64, qy: f64| {
                let (dx, dy) = chain_displacement(d, qx, qy);
                (qx + dx - px, qy + dy - py)
            };
            // Damped Newton on φ(q) = p: full steps when they help,
            // backtracking halves near folds where the Jacobian flips.
            let newton = |start: (f64, f64),
                          grads: &[(
                crate::field::VectorField,
                crate::field::VectorField,
            )]| {
                let (mut qx, mut qy) = start;
                let (mut rx, mut ry) = residual_at(qx, qy);
                let mut err = rx.hypot(ry);
                for _ in 0..40 {
                    if err < params.tolerance {
                        break;
                    }
                    let j = chain_jacobian(d, grads, qx, qy);
                    let det = j[0] * j[3] - j[1] * j[2];
                    if det.abs() < 1e-9 {
                        break;
                    }
                    let sx = (j[3] * rx - j[1] * ry) / det;
                    let sy = (-j[2] * rx + j[0] * ry) / det;
                    let mut t = 1.0;
                    let mut accepted = false;
                    for _ in 0..6 {
                        let (cx, cy) = (qx - t * sx, qy - t * sy);
                        let (nrx, nry) = residual_at(cx, cy);
                        let nerr = nrx.hypot(nry);
                        if nerr < err {
                            qx = cx;
                            qy = cy;
                            rx = nrx;
                            ry = nry;
                            err = nerr;
                            accepted = true;
                            break;
                        }
                        t *= 0.5;
                    }
                    if !accepted {
                        break;
                    }
                }
                (qx, qy, err)
            };
            // The warm start may sit in the wrong basin: near a fold the
            // composed map is several-to-one and the sheet that actually
            // covers p can be a thin sliver. Try a ring of offset starts
            // in order of distance (first success wins, so the result is
            // deterministic), then fall back to a quarter-pixel residual
            // scan over ±4 px to localize the basin directly.
            let mut best = (wx, wy, round_trip(&acc, i, x, y));
            'starts: for r in 0..=2i64 {
                for oy in -r..=r {
                    for ox in -r..=r {
                        if ox.abs().max(oy.abs()) != r {
                            continue;
                        }
                        let cand =
                            newton((wx + ox as f64, wy + oy as f64), grads);
                        if cand.2 < best.2 {
                            best = cand;
                        }
                        if best.2 < params.tolerance {
                            break 'starts;
                        }
                    }
                }
            }
            if best.2 >= 10.0 * params.tolerance {
                let mut scan = best;
                for gy in -16..=16i64 {
                    for gx in -16..=16i64 {
                        let qx = wx + gx as f64 * 0.25;
                        let qy = wy + gy as f64 * 0.25;
                        let (rx, ry) = residual_at(qx, qy);
                        let e = rx.hypot(ry);
                        if e < scan.2 {
                            scan = (qx, qy, e);
                        }
                    }
                }
                let cand = newton((scan.0, scan.1), grads);
                best = if cand.2 < scan.2 { cand } else { scan };
            }
            ix[i] = best.0 - px;
            iy[i] = best.1 - py;
        }
    }
    if let Some((nix, niy)) = ix {
        acc = DisplacementField {
            x: ScalarField::raw(w, h, nix),
            y: ScalarField::raw(w, h, niy),
        };
    }
    let (mut max, mut sum) = (0.0f64, 0.0f64);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let err = round_trip(&acc, i, x, y);
            max = max.max(err);
            sum += err;
        }
    }
    let mean = sum / (w * h) as f64;
    Ok((acc, max, mean))
}

/// Flow time step clamped by two constraints: the stiffness bound
/// `dt·γ₂·max|∇w|² < 1` (linear stability of the matching force), and a
/// displacement cap limiting the largest single-step motion under the
/// current residual `w∘φ − u` to [`MAX_FLOW_STEP`] pixels. The cap relaxes
/// as registration converges, so it is re-estimated periodically.
fn adaptive_dt_phi(
    cfg: &SolverConfig,
    dt_scale: f64,
    grad_w: &crate::field::VectorField,
    w_work: &ScalarField,
    z: &DisplacementField,
    u: &ScalarField,
) -> Result<f64> {
    let mut dt = cfg.dt_phi * dt_scale;
    let stiffness = cfg.gamma2 * grad_w.max_norm().powi(2);
    if stiffness > 0.0 {
        dt = dt.min(0.25 / stiffness);
    }
    let warped = warp(w_work, z)?;
    let gw = crate::calculus::warp_vector(grad_w, z)?;
    let mut force = 0.0f64;
    for i in 0..u.len() {
        let res = (warped.as_slice()[i] - u.as_slice()[i]).abs();
        let mag = gw.x.as_slice()[i].hypot(gw.y.as_slice()[i]);
        force = force.max(res * mag);
    }
    force *= cfg.gamma2;
    if force > 0.0 {
        dt = dt.min(MAX_FLOW_STEP / force);
    }
    Ok(dt)
}

/// Largest usable pyramid depth: every level must divide the grid evenly
/// and the coarsest level must keep at least [`MIN_COARSE_DIM`] pixels per
/// side.
fn effective_levels(width: usize, height: usize, requested: usize) -> usize {
    let mut l = requested.max(1);
    while l > 1 {
        let scale = 1usize << (l - 1);
        if width % scale == 0
            && height % scale == 0
            && width / scale >= MIN_COARSE_DIM
            && height / scale >= MIN_COARSE_DIM
        {
            return l;
        }
        l -= 1;
    }
    1
}

/// Averages 2×2 blocks `halvings` times; grid dimensions must divide
/// evenly (guaranteed by [`effective_levels`]).
fn box_downsample(f: &ScalarField, halvings: usize) -> Result<ScalarField> {
    let mut out = f.clone();
    for _ in 0..halvings {
        let (w, h) = out.dims();
        assert!(
            w % 2 == 0 && h % 2 == 0,
            "box_downsample requires even dimensions, got {w}x{h}"
        );
        let prev = out;
        out = ScalarField::from_fn(w / 2, h / 2, |x, y| {
            0.25 * (prev.get(2 * x, 2 * y)
                + prev.get(2 * x + 1, 2 * y)
                + prev.get(2 * x, 2 * y + 1)
                + prev.get(2 * x + 1, 2 * y + 1))
        })?;
    }
    Ok(out)
}

/// Bilinear upsampling by 2 with cell-centered alignment: fine pixel `x`
/// samples the coarse field at `x/2 − 1/4`.
fn upsample2(f: &ScalarField) -> Result<ScalarField> {
    let (w, h) = f.dims();
    ScalarField::from_fn(2 * w, 2 * h, |x, y| {
        sample_bilinear(f, x as f64 / 2.0 - 0.25, y as f64 / 2.0 - 0.25)
    })
}

/// Prolongs a displacement to the next finer level: bilinear upsampling
/// with values doubled, because one coarse pixel spans two fine pixels.
fn prolong_displacement(z: &DisplacementField) -> Result<DisplacementField> {
    DisplacementField::new(
        upsample2(&z.x)?.map(|v| 2.0 * v),
        upsample2(&z.y)?.map(|v| 2.0 * v),
    )
}

/// Prolongs a displacement-gradient surrogate: values are dimensionless
/// (length per length), so only the grid is refined.
fn prolong_tensor(v: &TensorField) -> Result<TensorField> {
    Ok(TensorField {
        xx: upsample2(&v.xx)?,
        xy: upsample2(&v.xy)?,
        yx: upsample2(&v.yx)?,
        yy: upsample2(&v.yy)?,
    })
}
