//! Multi-stage estimator: delays, BS-HRIS angles, path separation, BS-UE
//! and BS-HRIS-UE angles, triangulation with clock recovery, and rotation
//! recovery by orthogonal Procrustes.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{Matrix3, Matrix3x2, SMatrix, SVector, Vector3};
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::geometry::{direction, kappa, wrap_angle, AnglePair, Position, Rotation};
use crate::scenario::RadioConfig;
use crate::signal::{ArrayGeometry, CMatrix, CVector, ChannelParams, CodebookSchedule, ObservationSet, C64};

/// Denominator below which the BS-HRIS-UE triangle is treated as collinear.
pub const TRIANGLE_EPS: f64 = 1e-9;
/// Cross-product norm below which two unit directions count as parallel.
pub const PARALLEL_EPS: f64 = 1e-9;

/// Damped Newton settings shared by every refinement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub gradient_step: f64,
    pub hessian_step: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 50,
            gradient_step: 1e-6,
            hessian_step: 1e-4,
        }
    }
}

/// Azimuth interval `(lo, hi)` searched by a dictionary.
///
/// A planar array only observes `sin(el)·cos(az)` and `cos(el)`, so `az` and
/// `−az` are indistinguishable; each array is assumed to face a known half
/// space.
pub type AzimuthRange = (f64, f64);

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorOptions {
    /// Points per angle dimension of the joint BS-HRIS search.
    pub joint_grid: usize,
    /// Refinement levels after the first joint search.
    pub joint_levels: usize,
    /// Points per angle dimension at each refinement level.
    pub refine_grid: usize,
    /// Span reduction per refinement level.
    pub joint_shrink: f64,
    /// Points per angle dimension of the UE-side searches.
    pub ue_grid: usize,
    pub newton: NewtonOptions,
    /// A dictionary peak below this multiple of the robust spread of all
    /// correlations is a weak signal.
    pub weak_signal_factor: f64,
    /// Azimuth half space in front of the BS array.
    pub bs_azimuth: AzimuthRange,
    /// Azimuth half space in front of the HRIS, in its local frame.
    pub ris_azimuth: AzimuthRange,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            joint_grid: 32,
            joint_levels: 2,
            refine_grid: 16,
            joint_shrink: 8.0,
            ue_grid: 64,
            newton: NewtonOptions::default(),
            weak_signal_factor: 3.0,
            bs_azimuth: (0.0, PI),
            ris_azimuth: (-PI, 0.0),
        }
    }
}

// ---------------------------------------------------------------------------
// Small numerical helpers

/// `A·B` for complex matrices through four real products.
fn cgemm(a: &CMatrix, b: &CMatrix) -> CMatrix {
    let (ar, ai) = (a.map(|z| z.re), a.map(|z| z.im));
    let (br, bi) = (b.map(|z| z.re), b.map(|z| z.im));
    let re = &ar * &br - &ai * &bi;
    let im = &ar * &bi + &ai * &br;
    CMatrix::from_fn(a.nrows(), b.ncols(), |i, j| C64::new(re[(i, j)], im[(i, j)]))
}

/// Scale factor turning a median absolute deviation into a Gaussian `σ`.
const MAD_TO_SIGMA: f64 = 1.4826;

/// `1.4826 · median(|v − median(v)|)`.
pub fn robust_sigma(values: &mut [f64]) -> f64 {
    let m = median(values);
    values.iter_mut().for_each(|v| *v = (*v - m).abs());
    MAD_TO_SIGMA * median(values)
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mid = values.len() / 2;
    let (_, m, _) = values.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    *m
}

/// Maps `(az, el)` onto `el ∈ [0, π]` and the requested azimuth half space
/// without changing the array response.
pub fn canonicalize(psi: AnglePair, range: AzimuthRange) -> AnglePair {
    let mut az = psi.az;
    let mut el = wrap_angle(psi.el);
    if el < 0.0 {
        el = -el;
        az += PI;
    }
    az = wrap_angle(az);
    let mid = 0.5 * (range.0 + range.1);
    // Reflect az → −az when that lands closer to the half space.
    if wrap_angle(-az - mid).abs() < wrap_angle(az - mid).abs() {
        az = wrap_angle(-az);
    }
    AnglePair::new(az, el)
}

/// Uniform cell-centred grid over an angle box.
#[derive(Debug, Clone, Copy)]
struct AngleBox {
    az_lo: f64,
    az_span: f64,
    el_lo: f64,
    el_span: f64,
    n: usize,
}

impl AngleBox {
    fn full(range: AzimuthRange, n: usize) -> Self {
        Self { az_lo: range.0, az_span: range.1 - range.0, el_lo: 0.0, el_span: PI, n }
    }

    fn around(center: AnglePair, az_span: f64, el_span: f64, n: usize) -> Self {
        Self {
            az_lo: center.az - 0.5 * az_span,
            az_span,
            el_lo: center.el - 0.5 * el_span,
            el_span,
            n,
        }
    }

    fn points(&self) -> Vec<AnglePair> {
        let n = self.n;
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            let az = self.az_lo + (i as f64 + 0.5) * self.az_span / n as f64;
            for j in 0..n {
                let el = self.el_lo + (j as f64 + 0.5) * self.el_span / n as f64;
                out.push(AnglePair::new(az, el));
            }
        }
        out
    }
}

fn steering_matrix(array: &ArrayGeometry, points: &[AnglePair]) -> CMatrix {
    let mut m = CMatrix::zeros(array.len(), points.len());
    for (j, p) in points.iter().enumerate() {
        m.set_column(j, &array.steering(p));
    }
    m
}

/// Result of a damped Newton minimization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonReport {
    pub iterations: usize,
    pub initial: f64,
    pub final_value: f64,
}

/// Minimizes `f` from `x0` with central finite-difference gradient and
/// Hessian, Levenberg damping when the Hessian is not positive definite and
/// step halving when a step does not decrease `f`.
pub fn newton_minimize<const N: usize>(
    f: impl Fn(&SVector<f64, N>) -> f64,
    x0: SVector<f64, N>,
    opts: &NewtonOptions,
) -> (SVector<f64, N>, NewtonReport) {
    let mut x = x0;
    let mut fx = f(&x);
    let initial = fx;
    let mut iterations = 0;
    let hg = opts.gradient_step;
    let hh = opts.hessian_step;
    while iterations < opts.max_iterations {
        iterations += 1;
        let unit = |i: usize| {
            let mut e = SVector::<f64, N>::zeros();
            e[i] = 1.0;
            e
        };
        let mut g = SVector::<f64, N>::zeros();
        for i in 0..N {
            // Fourth-order stencil: steering phases have large third
            // derivatives, which bias the two-point formula near the optimum.
            let e = unit(i) * hg;
            g[i] = (f(&(x - e * 2.0)) - 8.0 * f(&(x - e)) + 8.0 * f(&(x + e)) - f(&(x + e * 2.0))) / (12.0 * hg);
        }
        let mut h = SMatrix::<f64, N, N>::zeros();
        for i in 0..N {
            let ei = unit(i) * hh;
            h[(i, i)] = (f(&(x + ei)) - 2.0 * fx + f(&(x - ei))) / (hh * hh);
            for j in 0..i {
                let ej = unit(j) * hh;
                let v = (f(&(x + ei + ej)) - f(&(x + ei - ej)) - f(&(x - ei + ej)) + f(&(x - ei - ej)))
                    / (4.0 * hh * hh);
                h[(i, j)] = v;
                h[(j, i)] = v;
            }
        }
        if !g.iter().all(|v| v.is_finite()) || !h.iter().all(|v| v.is_finite()) {
            break;
        }
        let scale = h.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let mut lambda = 0.0;
        let step = loop {
            let damped = h + SMatrix::<f64, N, N>::identity() * lambda;
            if let Some(ch) = damped.cholesky() {
                break Some(-ch.solve(&g));
            }
            lambda = if lambda == 0.0 { 1e-6 * scale } else { lambda * 10.0 };
            if lambda > 1e12 * scale {
                break None;
            }
        };
        let Some(mut step) = step else { break };
        let mut accepted = false;
        for _ in 0..40 {
            let cand = x + step;
            let fc = f(&cand);
            if fc < fx {
                x = cand;
                fx = fc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted || step.norm() < opts.tolerance {
            break;
        }
    }
    (x, NewtonReport { iterations, initial, final_value: fx })
}

// ---------------------------------------------------------------------------
// Delay estimation

/// `f(τ) = Σ_t |Σ_k y_kt e^{jωkτ}|²` and its first two derivatives.
fn toa_objective(y: &CMatrix, omega: f64, tau: f64) -> (f64, f64, f64) {
    let (k, t) = y.shape();
    let phasors: Vec<C64> = (0..k).map(|i| C64::from_polar(1.0, omega * i as f64 * tau)).collect();
    let (mut f, mut f1, mut f2) = (0.0, 0.0, 0.0);
    for col in 0..t {
        let mut s = C64::new(0.0, 0.0);
        let mut s1 = C64::new(0.0, 0.0);
        let mut s2 = C64::new(0.0, 0.0);
        for (i, ph) in phasors.iter().enumerate() {
            let v = y[(i, col)] * ph;
            let w = omega * i as f64;
            s += v;
            s1 += v * C64::new(0.0, w);
            s2 -= v * (w * w);
        }
        f += s.norm_sqr();
        f1 += 2.0 * (s.conj() * s1).re;
        f2 += 2.0 * (s1.norm_sqr() + (s.conj() * s2).re);
    }
    (f, f1, f2)
}

struct ToaEstimator {
    fft: Arc<dyn Fft<f64>>,
    n_fft: usize,
}

impl ToaEstimator {
    fn new(n_fft: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self { fft: planner.plan_fft_inverse(n_fft), n_fft }
    }

    fn grid(&self, y: &CMatrix) -> Vec<f64> {
        let (k, t) = y.shape();
        let mut power = vec![0.0; self.n_fft];
        let mut buf = vec![C64::new(0.0, 0.0); self.n_fft];
        for col in 0..t {
            buf.iter_mut().for_each(|z| *z = C64::new(0.0, 0.0));
            for i in 0..k.min(self.n_fft) {
                buf[i] = y[(i, col)];
            }
            self.fft.process(&mut buf);
            for (p, z) in power.iter_mut().zip(&buf) {
                *p += z.norm_sqr();
            }
        }
        power
    }

    fn estimate(&self, y: &CMatrix, delta_f: f64, newton: &NewtonOptions) -> Result<(f64, StageDiagnostics)> {
        let (k, _) = y.shape();
        if k < 2 {
            return Err(Error::InvalidConfig("delay estimation needs at least two subcarriers".into()));
        }
        let period = 1.0 / delta_f;
        let omega = 2.0 * PI * delta_f;
        let power = self.grid(y);
        let n = self.n_fft;
        let (best, &peak) = power
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty FFT grid");
        // Parabolic interpolation through the peak and its circular neighbours.
        let left = power[(best + n - 1) % n];
        let right = power[(best + 1) % n];
        let denom = left - 2.0 * peak + right;
        let offset = if denom < 0.0 { (0.5 * (left - right) / denom).clamp(-0.5, 0.5) } else { 0.0 };
        let mut tau = (best as f64 + offset) * period / n as f64;
        let (mut f, _, _) = toa_objective(y, omega, tau);
        if f < peak {
            tau = best as f64 * period / n as f64;
            f = peak;
        }
        let initial = f;
        // Newton ascent in the normalized variable x = τΔf.
        let mut iterations = 0;
        while iterations < newton.max_iterations {
            iterations += 1;
            let (_, g, h) = toa_objective(y, omega, tau);
            let mut step = if h < 0.0 { -g / h } else { g.signum() * 0.25 * period / n as f64 };
            if !step.is_finite() {
                break;
            }
            let mut accepted = false;
            for _ in 0..40 {
                let (fc, _, _) = toa_objective(y, omega, tau + step);
                if fc > f {
                    tau += step;
                    f = fc;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted || (step * delta_f).abs() < newton.tolerance * 1e-3 {
                break;
            }
        }
        let tau = tau.rem_euclid(period);
        let mut mags: Vec<f64> = power.iter().map(|p| p.sqrt()).collect();
        let floor = robust_sigma(&mut mags);
        Ok((
            if tau >= period { 0.0 } else { tau },
            StageDiagnostics {
                stage: Stage::BsHrisToa,
                grid_peak: peak.sqrt(),
                noise_floor: floor,
                objective_initial: -initial,
                objective_final: -f,
                iterations,
            },
        ))
    }
}

/// Delay maximizing `‖d(τ)ᴴ Y‖²`: zero-padded FFT grid, parabolic
/// interpolation, then Newton ascent. The result lies in `[0, 1/Δf)`.
pub fn estimate_toa(y: &CMatrix, cfg: &RadioConfig) -> Result<f64> {
    ToaEstimator::new(cfg.fft_size)
        .estimate(y, cfg.subcarrier_spacing, &NewtonOptions::default())
        .map(|(t, _)| t)
}

/// `z_t = Σ_k y_kt e^{jωkτ}` (delay compensation and subcarrier sum).
pub fn compensate_delay(y: &CMatrix, tau: f64, delta_f: f64) -> CVector {
    let (k, _) = y.shape();
    let d = crate::signal::delay_steering(tau, k, delta_f);
    (d.adjoint() * y).transpose()
}

// ---------------------------------------------------------------------------
// Diagnostics

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    BsHrisToa,
    BsHrisAngles,
    Separation,
    BsUe,
    BsHrisUe,
    Positions,
    Rotation,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::BsHrisToa => "bs-hris delay",
            Stage::BsHrisAngles => "bs-hris angles",
            Stage::Separation => "path separation",
            Stage::BsUe => "bs-ue channel",
            Stage::BsHrisUe => "bs-hris-ue channel",
            Stage::Positions => "positions and clocks",
            Stage::Rotation => "rotation",
        };
        f.write_str(s)
    }
}

/// Per-stage search and refinement record. Objectives are minimized, so
/// `objective_final ≤ objective_initial`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageDiagnostics {
    pub stage: Stage,
    pub grid_peak: f64,
    pub noise_floor: f64,
    pub objective_initial: f64,
    pub objective_final: f64,
    pub iterations: usize,
}

fn weak_check(peak: f64, floor: f64, factor: f64) -> Result<()> {
    let threshold = factor * floor;
    if !(peak >= threshold) || !(peak > 0.0) {
        return Err(Error::WeakSignal { peak, threshold });
    }
    Ok(())
}

/// `1 − |mᴴz|² / (‖m‖² ‖z‖²)` evaluated as a projection residual, which
/// stays accurate near zero.
fn projection_residual(m: &CVector, z: &CVector, z_norm_sq: f64) -> f64 {
    let mm = m.norm_squared();
    if !(mm > 0.0) || !(z_norm_sq > 0.0) {
        return 1.0;
    }
    let alpha = m.dotc(z) / mm;
    (z - m * alpha).norm_squared() / z_norm_sq
}

// ---------------------------------------------------------------------------
// Stage outputs

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BsHrisEstimate {
    pub tau_br: f64,
    pub theta_br: AnglePair,
    pub phi_rb: AnglePair,
    pub g_br: C64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuEstimate {
    pub tau_bu: f64,
    pub theta_bu: AnglePair,
    pub g_bu: C64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BruEstimate {
    pub tau_bru: f64,
    pub theta_ru: AnglePair,
    pub g_bru: C64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionSolution {
    pub p_r: Position,
    pub p_u: Position,
    pub b_r: f64,
    pub b_u: f64,
    pub d_br: f64,
    pub d_bu: f64,
    /// Interior angles at the HRIS, the BS and the UE.
    pub betas: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateResult {
    pub channel: ChannelParams,
    pub p_r: Position,
    pub p_u: Position,
    pub b_r: f64,
    pub b_u: f64,
    pub rotation: Rotation,
    pub diagnostics: Vec<StageDiagnostics>,
}

/// Whatever the pipeline produced before a stage failed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PartialEstimate {
    pub bs_hris: Option<BsHrisEstimate>,
    pub bu: Option<BuEstimate>,
    pub bru: Option<BruEstimate>,
    pub positions: Option<PositionSolution>,
    pub diagnostics: Vec<StageDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{stage} stage failed: {error}")]
pub struct StageFailure {
    pub stage: Stage,
    pub error: Error,
    pub partial: Box<PartialEstimate>,
}

// ---------------------------------------------------------------------------
// Estimator

/// Estimator bound to one radio configuration and codebook schedule.
/// Dictionaries that depend only on the schedule are built once.
pub struct Estimator {
    cfg: RadioConfig,
    sched: CodebookSchedule,
    opts: EstimatorOptions,
    bs: ArrayGeometry,
    ris: ArrayGeometry,
    toa: ToaEstimator,
    /// Level-0 joint search: HRIS and BS grids and their per-transmission
    /// responses `c_tᵀ a_R` and `f_tᵀ a_B`.
    joint_ris_points: Vec<AnglePair>,
    joint_bs_points: Vec<AnglePair>,
    joint_ris_resp: CMatrix,
    joint_bs_resp: CMatrix,
    /// UE-side grids and the BS responses `f_2tᵀ a_B` over the BS grid.
    ue_bs_points: Vec<AnglePair>,
    ue_bs_resp: CMatrix,
    ue_ris_points: Vec<AnglePair>,
    ue_ris_steering: CMatrix,
}

impl Estimator {
    pub fn new(cfg: &RadioConfig, sched: &CodebookSchedule, opts: EstimatorOptions) -> Result<Self> {
        cfg.validate()?;
        if sched.transmissions() != cfg.transmissions
            || sched.precoders.nrows() != cfg.bs_elements()
            || sched.combiners.nrows() != cfg.ris_elements()
        {
            return Err(Error::DimensionMismatch("schedule does not match configuration".into()));
        }
        let bs = ArrayGeometry::bs(cfg);
        let ris = ArrayGeometry::ris(cfg);
        let joint_ris_points = AngleBox::full(opts.ris_azimuth, opts.joint_grid).points();
        let joint_bs_points = AngleBox::full(opts.bs_azimuth, opts.joint_grid).points();
        let joint_ris_resp = cgemm(&sched.combiners.transpose(), &steering_matrix(&ris, &joint_ris_points));
        let joint_bs_resp = cgemm(&sched.precoders.transpose(), &steering_matrix(&bs, &joint_bs_points));
        let ue_bs_points = AngleBox::full(opts.bs_azimuth, opts.ue_grid).points();
        let even_prec = even_columns(&sched.precoders);
        let ue_bs_resp = cgemm(&even_prec.transpose(), &steering_matrix(&bs, &ue_bs_points));
        let ue_ris_points = AngleBox::full(opts.ris_azimuth, opts.ue_grid).points();
        let ue_ris_steering = steering_matrix(&ris, &ue_ris_points);
        Ok(Self {
            cfg: cfg.clone(),
            sched: sched.clone(),
            toa: ToaEstimator::new(cfg.fft_size),
            opts,
            bs,
            ris,
            joint_ris_points,
            joint_bs_points,
            joint_ris_resp,
            joint_bs_resp,
            ue_bs_points,
            ue_bs_resp,
            ue_ris_points,
            ue_ris_steering,
        })
    }

    pub fn options(&self) -> &EstimatorOptions {
        &self.opts
    }

    pub fn estimate_toa(&self, y: &CMatrix) -> Result<(f64, StageDiagnostics)> {
        self.toa.estimate(y, self.cfg.subcarrier_spacing, &self.opts.newton)
    }

    /// Joint search over `(θ_BR, φ_RB)`: scores every pair of a BS and an
    /// HRIS candidate by the normalized correlation with `z`. Returns the
    /// best pair, its score and, if requested, the robust spread of all
    /// scores.
    fn joint_search(
        &self,
        z: &CVector,
        ris_resp: &CMatrix,
        bs_resp: &CMatrix,
        with_floor: bool,
    ) -> (usize, usize, f64, f64) {
        // corr_ij = Σ_t conj(U_R[t,i]) conj(U_B[t,j]) z_t
        let t = z.len();
        let lhs = CMatrix::from_fn(ris_resp.ncols(), t, |i, tt| ris_resp[(tt, i)].conj() * z[tt]);
        let rhs = bs_resp.map(|v| v.conj());
        let corr = cgemm(&lhs, &rhs);
        let pr = ris_resp.map(|v| v.norm_sqr());
        let pb = bs_resp.map(|v| v.norm_sqr());
        let norm = pr.transpose() * pb;
        let score_sq = |i: usize, j: usize| {
            let n = norm[(i, j)];
            if n > 0.0 {
                corr[(i, j)].norm_sqr() / n
            } else {
                0.0
            }
        };
        let mut best = (0, 0, -1.0);
        for j in 0..corr.ncols() {
            for i in 0..corr.nrows() {
                let sc = score_sq(i, j);
                if sc > best.2 {
                    best = (i, j, sc);
                }
            }
        }
        let floor = if with_floor {
            let mut mags: Vec<f64> = (0..corr.ncols())
                .flat_map(|j| (0..corr.nrows()).map(move |i| (i, j)))
                .map(|(i, j)| score_sq(i, j).sqrt())
                .collect();
            robust_sigma(&mut mags)
        } else {
            f64::NAN
        };
        (best.0, best.1, best.2.max(0.0).sqrt(), floor)
    }

    /// BS-HRIS departure/arrival angles and gain from the HRIS observation.
    pub fn estimate_bs_hris_angles(
        &self,
        y_r: &CMatrix,
        tau_hat: f64,
    ) -> Result<(BsHrisEstimate, StageDiagnostics)> {
        let cfg = &self.cfg;
        let z = compensate_delay(y_r, tau_hat, cfg.subcarrier_spacing);
        let z_norm_sq = z.norm_squared();

        let (i0, j0, peak, floor) = self.joint_search(&z, &self.joint_ris_resp, &self.joint_bs_resp, true);
        weak_check(peak, floor, self.opts.weak_signal_factor)?;
        let mut phi = self.joint_ris_points[i0];
        let mut theta = self.joint_bs_points[j0];
        let n = self.opts.refine_grid;
        let mut az_span_r = self.opts.ris_azimuth.1 - self.opts.ris_azimuth.0;
        let mut az_span_b = self.opts.bs_azimuth.1 - self.opts.bs_azimuth.0;
        let mut el_span = PI;
        for _ in 0..self.opts.joint_levels {
            az_span_r /= self.opts.joint_shrink;
            az_span_b /= self.opts.joint_shrink;
            el_span /= self.opts.joint_shrink;
            let ris_pts = AngleBox::around(phi, az_span_r, el_span, n).points();
            let bs_pts = AngleBox::around(theta, az_span_b, el_span, n).points();
            let ris_resp = cgemm(&self.sched.combiners.transpose(), &steering_matrix(&self.ris, &ris_pts));
            let bs_resp = cgemm(&self.sched.precoders.transpose(), &steering_matrix(&self.bs, &bs_pts));
            let (i, j, _, _) = self.joint_search(&z, &ris_resp, &bs_resp, false);
            phi = ris_pts[i];
            theta = bs_pts[j];
        }

        let ct = self.sched.combiners.transpose();
        let ft = self.sched.precoders.transpose();
        let model = |x: &SVector<f64, 4>| -> CVector {
            let a_b = self.bs.steering(&AnglePair::new(x[0], x[1]));
            let a_r = self.ris.steering(&AnglePair::new(x[2], x[3]));
            (&ct * a_r).component_mul(&(&ft * a_b))
        };
        let objective = |x: &SVector<f64, 4>| projection_residual(&model(x), &z, z_norm_sq);
        let x0 = SVector::<f64, 4>::new(theta.az, theta.el, phi.az, phi.el);
        let (x, report) = newton_minimize(objective, x0, &self.opts.newton);
        let m = model(&x);
        let g = m.dotc(&z) / (m.norm_squared() * cfg.subcarriers as f64 * (cfg.rho * cfg.tx_power).sqrt());
        Ok((
            BsHrisEstimate {
                tau_br: tau_hat,
                theta_br: canonicalize(AnglePair::new(x[0], x[1]), self.opts.bs_azimuth),
                phi_rb: canonicalize(AnglePair::new(x[2], x[3]), self.opts.ris_azimuth),
                g_br: g,
            },
            StageDiagnostics {
                stage: Stage::BsHrisAngles,
                grid_peak: peak,
                noise_floor: floor,
                objective_initial: report.initial,
                objective_final: report.final_value,
                iterations: report.iterations,
            },
        ))
    }

    /// BS-UE delay, departure angle and gain from the pair-summed UE matrix.
    pub fn estimate_bu(&self, z_bu: &CMatrix) -> Result<(BuEstimate, Vec<StageDiagnostics>)> {
        let cfg = &self.cfg;
        let (tau, mut toa_diag) = self.estimate_toa(z_bu)?;
        toa_diag.stage = Stage::BsUe;
        let z = compensate_delay(z_bu, tau, cfg.subcarrier_spacing);
        let z_norm_sq = z.norm_squared();
        let (best, peak, floor) = best_column(&self.ue_bs_resp, &z);
        weak_check(peak, floor, self.opts.weak_signal_factor)?;
        let ft = even_columns(&self.sched.precoders).transpose();
        let model = |x: &SVector<f64, 2>| -> CVector { &ft * self.bs.steering(&AnglePair::new(x[0], x[1])) };
        let objective = |x: &SVector<f64, 2>| projection_residual(&model(x), &z, z_norm_sq);
        let start = self.ue_bs_points[best];
        let (x, report) = newton_minimize(objective, SVector::<f64, 2>::new(start.az, start.el), &self.opts.newton);
        let m = model(&x);
        let g = m.dotc(&z) / (m.norm_squared() * 2.0 * cfg.subcarriers as f64 * cfg.tx_power.sqrt());
        Ok((
            BuEstimate {
                tau_bu: tau,
                theta_bu: canonicalize(AnglePair::new(x[0], x[1]), self.opts.bs_azimuth),
                g_bu: g,
            },
            vec![
                toa_diag,
                StageDiagnostics {
                    stage: Stage::BsUe,
                    grid_peak: peak,
                    noise_floor: floor,
                    objective_initial: report.initial,
                    objective_final: report.final_value,
                    iterations: report.iterations,
                },
            ],
        ))
    }

    /// `B₀ = 2K√((1−ρ)P_B) Bᵀ` with `b_2t = diag(γ_2t) a_R(φ̂_RB) a_Bᵀ(θ̂_BR) f_2t`.
    fn bru_dictionary(&self, theta_br: &AnglePair, phi_rb: &AnglePair) -> CMatrix {
        let cfg = &self.cfg;
        let a_rb = self.ris.steering(phi_rb);
        let a_br = self.bs.steering(theta_br);
        let pairs = cfg.transmissions / 2;
        let scale = 2.0 * cfg.subcarriers as f64 * ((1.0 - cfg.rho) * cfg.tx_power).sqrt();
        let mut b0 = CMatrix::zeros(pairs, cfg.ris_elements());
        for t in 0..pairs {
            let col = 2 * t;
            let beam = self.sched.precoders.column(col).dot(&a_br) * scale;
            for i in 0..cfg.ris_elements() {
                b0[(t, i)] = self.sched.reflections[(i, col)] * a_rb[i] * beam;
            }
        }
        b0
    }

    /// BS-HRIS-UE delay, HRIS departure angle and gain from the
    /// pair-differenced UE matrix, using the estimated BS-HRIS angles.
    pub fn estimate_bru(
        &self,
        z_bru: &CMatrix,
        theta_br: &AnglePair,
        phi_rb: &AnglePair,
    ) -> Result<(BruEstimate, Vec<StageDiagnostics>)> {
        let cfg = &self.cfg;
        let (tau, mut toa_diag) = self.estimate_toa(z_bru)?;
        toa_diag.stage = Stage::BsHrisUe;
        let z = compensate_delay(z_bru, tau, cfg.subcarrier_spacing);
        let z_norm_sq = z.norm_squared();
        let b0 = self.bru_dictionary(theta_br, phi_rb);
        let resp = cgemm(&b0, &self.ue_ris_steering);
        let (best, peak, floor) = best_column(&resp, &z);
        weak_check(peak, floor, self.opts.weak_signal_factor)?;
        let model = |x: &SVector<f64, 2>| -> CVector { &b0 * self.ris.steering(&AnglePair::new(x[0], x[1])) };
        let objective = |x: &SVector<f64, 2>| projection_residual(&model(x), &z, z_norm_sq);
        let start = self.ue_ris_points[best];
        let (x, report) = newton_minimize(objective, SVector::<f64, 2>::new(start.az, start.el), &self.opts.newton);
        let m = model(&x);
        let g = m.dotc(&z) / m.norm_squared();
        Ok((
            BruEstimate {
                tau_bru: tau,
                theta_ru: canonicalize(AnglePair::new(x[0], x[1]), self.opts.ris_azimuth),
                g_bru: g,
            },
            vec![
                toa_diag,
                StageDiagnostics {
                    stage: Stage::BsHrisUe,
                    grid_peak: peak,
                    noise_floor: floor,
                    objective_initial: report.initial,
                    objective_final: report.final_value,
                    iterations: report.iterations,
                },
            ],
        ))
    }

    /// Runs every stage in order.
    pub fn run(&self, obs: &ObservationSet, p_b: &Position) -> std::result::Result<EstimateResult, StageFailure> {
        let mut partial = PartialEstimate::default();
        macro_rules! stage {
            ($stage:expr, $e:expr) => {
                match $e {
                    Ok(v) => v,
                    Err(error) => {
                        return Err(StageFailure { stage: $stage, error, partial: Box::new(partial) })
                    }
                }
            };
        }
        let k = self.cfg.subcarriers;
        let t = self.cfg.transmissions;
        if obs.y_r.shape() != (k, t) || obs.y_u.shape() != (k, t) {
            let error = Error::DimensionMismatch(format!(
                "observations {:?}/{:?}, expected ({k}, {t})",
                obs.y_r.shape(),
                obs.y_u.shape()
            ));
            return Err(StageFailure { stage: Stage::BsHrisToa, error, partial: Box::new(partial) });
        }

        let (tau_br, d) = stage!(Stage::BsHrisToa, self.estimate_toa(&obs.y_r));
        partial.diagnostics.push(d);
        let (br, d) = stage!(Stage::BsHrisAngles, self.estimate_bs_hris_angles(&obs.y_r, tau_br));
        partial.diagnostics.push(d);
        partial.bs_hris = Some(br);

        let (z_bu, z_bru) = stage!(Stage::Separation, separate_paths(&obs.y_u));

        let (bu, d) = stage!(Stage::BsUe, self.estimate_bu(&z_bu));
        partial.diagnostics.extend(d);
        partial.bu = Some(bu);

        let (bru, d) = stage!(Stage::BsHrisUe, self.estimate_bru(&z_bru, &br.theta_br, &br.phi_rb));
        partial.diagnostics.extend(d);
        partial.bru = Some(bru);

        let channel = ChannelParams {
            tau_br: br.tau_br,
            tau_bu: bu.tau_bu,
            tau_bru: bru.tau_bru,
            theta_br: br.theta_br,
            theta_bu: bu.theta_bu,
            theta_ru: bru.theta_ru,
            phi_rb: br.phi_rb,
            g_br: br.g_br,
            g_bu: bu.g_bu,
            g_bru: bru.g_bru,
        };
        let pos = stage!(
            Stage::Positions,
            solve_positions_and_clocks(&channel, p_b, self.cfg.speed_of_light)
        );
        partial.positions = Some(pos);
        let rotation = stage!(
            Stage::Rotation,
            estimate_rotation(&channel.phi_rb, &channel.theta_ru, &pos.p_r, &pos.p_u, p_b)
        );
        Ok(EstimateResult {
            channel,
            p_r: pos.p_r,
            p_u: pos.p_u,
            b_r: pos.b_r,
            b_u: pos.b_u,
            rotation,
            diagnostics: partial.diagnostics,
        })
    }
}

fn even_columns(m: &CMatrix) -> CMatrix {
    let cols: Vec<usize> = (0..m.ncols()).step_by(2).collect();
    m.select_columns(&cols)
}

/// Best dictionary column by normalized correlation `|mᴴz| / ‖m‖`, the
/// peak value and the robust spread over all columns.
fn best_column(resp: &CMatrix, z: &CVector) -> (usize, f64, f64) {
    let corr = resp.adjoint() * z;
    let mut mags = Vec::with_capacity(resp.ncols());
    let mut best = (0, -1.0);
    for j in 0..resp.ncols() {
        let n = resp.column(j).norm();
        let score = if n > 0.0 { corr[j].norm() / n } else { 0.0 };
        mags.push(score);
        if score > best.1 {
            best = (j, score);
        }
    }
    let floor = robust_sigma(&mut mags);
    (best.0, best.1, floor)
}

/// Pair sums (direct path) and pair differences (reflected path) of
/// adjacent UE columns.
pub fn separate_paths(y_u: &CMatrix) -> Result<(CMatrix, CMatrix)> {
    let (k, t) = y_u.shape();
    if t % 2 != 0 {
        return Err(Error::OddT(t));
    }
    let half = t / 2;
    let z_bu = CMatrix::from_fn(k, half, |i, j| y_u[(i, 2 * j)] + y_u[(i, 2 * j + 1)]);
    let z_bru = CMatrix::from_fn(k, half, |i, j| y_u[(i, 2 * j)] - y_u[(i, 2 * j + 1)]);
    Ok((z_bu, z_bru))
}

/// Triangulation from the delay difference and the interior angles of the
/// BS-HRIS-UE triangle, followed by clock recovery.
pub fn solve_positions_and_clocks(ch: &ChannelParams, p_b: &Position, c: f64) -> Result<PositionSolution> {
    let d_hat = c * (ch.tau_bru - ch.tau_bu);
    let dot = |a: &AnglePair, b: &AnglePair| kappa(a).dot(&kappa(b)).clamp(-1.0, 1.0);
    let beta0 = dot(&ch.theta_ru, &ch.phi_rb).acos();
    let beta1 = dot(&ch.theta_bu, &ch.theta_br).acos();
    let beta2 = PI - beta0 - beta1;
    let denom = beta2.sin() + beta1.sin() - beta0.sin();
    if !(denom > TRIANGLE_EPS) {
        return Err(Error::DegenerateTriangle { denominator: denom });
    }
    let d_bu = d_hat * beta0.sin() / denom;
    let d_br = d_hat * beta2.sin() / denom;
    let p_r = p_b + kappa(&ch.theta_br) * d_br;
    let p_u = p_b + kappa(&ch.theta_bu) * d_bu;
    Ok(PositionSolution {
        p_r,
        p_u,
        b_r: ch.tau_br - d_br / c,
        b_u: ch.tau_bu - d_bu / c,
        d_br,
        d_bu,
        betas: [beta0, beta1, beta2],
    })
}

/// `min ‖Q − RΘ‖_F` over SO(3) for `Q = [q_1, q_2]` and `Θ = [θ_1, θ_2]`.
pub fn procrustes(q: &Matrix3x2<f64>, theta: &Matrix3x2<f64>) -> Result<Rotation> {
    let parallel = |m: &Matrix3x2<f64>| {
        let a: Vector3<f64> = m.column(0).into_owned();
        let b: Vector3<f64> = m.column(1).into_owned();
        a.cross(&b).norm() < PARALLEL_EPS * a.norm() * b.norm()
    };
    if parallel(q) || parallel(theta) {
        return Err(Error::DegenerateDirections);
    }
    let m: Matrix3<f64> = q * theta.transpose();
    let svd = m.svd(true, true);
    let u0 = svd.u.ok_or(Error::DegenerateDirections)?;
    let u1t = svd.v_t.ok_or(Error::DegenerateDirections)?;
    let det = (u0 * u1t).determinant();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det.signum()));
    Ok(Rotation::from_matrix_unchecked(u0 * fix * u1t))
}

/// HRIS rotation aligning the local arrival/departure directions with the
/// global directions implied by the estimated positions.
pub fn estimate_rotation(
    phi_rb: &AnglePair,
    theta_ru: &AnglePair,
    p_r: &Position,
    p_u: &Position,
    p_b: &Position,
) -> Result<Rotation> {
    let q = Matrix3x2::from_columns(&[direction(p_r, p_b)?, direction(p_r, p_u)?]);
    let theta = Matrix3x2::from_columns(&[kappa(phi_rb), kappa(theta_ru)]);
    procrustes(&q, &theta)
}

/// `‖Q − RΘ‖_F²`.
pub fn procrustes_objective(r: &Rotation, q: &Matrix3x2<f64>, theta: &Matrix3x2<f64>) -> f64 {
    (q - r.matrix() * theta).norm_squared()
}

/// Convenience wrapper building an [`Estimator`] for a single run.
pub fn run_pipeline(
    obs: &ObservationSet,
    sched: &CodebookSchedule,
    cfg: &RadioConfig,
    p_b: &Position,
) -> std::result::Result<EstimateResult, StageFailure> {
    let est = Estimator::new(cfg, sched, EstimatorOptions::default()).map_err(|error| StageFailure {
        stage: Stage::BsHrisToa,
        error,
        partial: Box::default(),
    })?;
    est.run(obs, p_b)
}
