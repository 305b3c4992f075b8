//! Array responses, codebooks, path gains and synthesis of the HRIS and UE
//! observations.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{angles_from_direction, direction, direction_local, AnglePair, Rotation};
use crate::scenario::{noise_variance, RadioConfig, Scenario};

pub type C64 = Complex64;
pub type CVector = DVector<C64>;
pub type CMatrix = DMatrix<C64>;

/// Number of real channel parameters: 3 delays, 8 angles, 3 complex gains.
pub const CHANNEL_DIM: usize = 17;
/// Number of geometric channel parameters (delays and angles).
pub const GEOMETRIC_DIM: usize = 11;

/// Uniform planar array with `rows × cols` elements and isotropic spacing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArrayGeometry {
    pub rows: usize,
    pub cols: usize,
    pub spacing: f64,
    pub wavelength: f64,
}

/// A steering vector together with its azimuth and elevation derivatives.
#[derive(Debug, Clone)]
pub struct SteeringDerivatives {
    pub a: CVector,
    pub d_az: CVector,
    pub d_el: CVector,
}

impl ArrayGeometry {
    pub fn bs(cfg: &RadioConfig) -> Self {
        Self {
            rows: cfg.bs_rows,
            cols: cfg.bs_cols,
            spacing: cfg.element_spacing,
            wavelength: cfg.wavelength,
        }
    }

    pub fn ris(cfg: &RadioConfig) -> Self {
        Self {
            rows: cfg.ris_rows,
            cols: cfg.ris_cols,
            spacing: cfg.element_spacing,
            wavelength: cfg.wavelength,
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn wavenumber_spacing(&self) -> f64 {
        2.0 * PI * self.spacing / self.wavelength
    }

    /// Row factor `a_r` with `[a_r]ₙ = exp(−j 2π n d/λ · sin(el) cos(az))`.
    pub fn row_factor(&self, psi: &AnglePair) -> CVector {
        let u = psi.el.sin() * psi.az.cos();
        let k = self.wavenumber_spacing();
        CVector::from_fn(self.rows, |n, _| C64::from_polar(1.0, -k * n as f64 * u))
    }

    /// Column factor `a_c` with `[a_c]ₙ = exp(−j 2π n d/λ · cos(el))`.
    pub fn col_factor(&self, psi: &AnglePair) -> CVector {
        let v = psi.el.cos();
        let k = self.wavenumber_spacing();
        CVector::from_fn(self.cols, |n, _| C64::from_polar(1.0, -k * n as f64 * v))
    }

    /// `a(ψ) = a_r(ψ) ⊗ a_c(ψ)`; element `(n_r, n_c)` sits at `n_r·cols + n_c`.
    pub fn steering(&self, psi: &AnglePair) -> CVector {
        self.row_factor(psi).kronecker(&self.col_factor(psi))
    }

    pub fn steering_derivatives(&self, psi: &AnglePair) -> SteeringDerivatives {
        let a = self.steering(psi);
        let k = self.wavenumber_spacing();
        let (s_az, c_az) = psi.az.sin_cos();
        let (s_el, c_el) = psi.el.sin_cos();
        // Phase of element (nr, nc) is −k (nr·sin el·cos az + nc·cos el).
        let du_daz = -s_el * s_az;
        let du_del = c_el * c_az;
        let dv_del = -s_el;
        let mut d_az = a.clone();
        let mut d_el = a.clone();
        for nr in 0..self.rows {
            for nc in 0..self.cols {
                let m = nr * self.cols + nc;
                let (nr, nc) = (nr as f64, nc as f64);
                d_az[m] *= C64::new(0.0, -k * nr * du_daz);
                d_el[m] *= C64::new(0.0, -k * (nr * du_del + nc * dv_del));
            }
        }
        SteeringDerivatives { a, d_az, d_el }
    }
}

/// `[d(τ)]ₖ = exp(−j 2π k Δf τ)`, `k = 0..K−1`.
pub fn delay_steering(tau: f64, k: usize, delta_f: f64) -> CVector {
    let w = -2.0 * PI * delta_f * tau;
    CVector::from_fn(k, |i, _| C64::from_polar(1.0, w * i as f64))
}

/// Derivative of [`delay_steering`] with respect to `τ`.
pub fn delay_steering_derivative(tau: f64, k: usize, delta_f: f64) -> CVector {
    let w = -2.0 * PI * delta_f;
    CVector::from_fn(k, |i, _| {
        C64::new(0.0, w * i as f64) * C64::from_polar(1.0, w * tau * i as f64)
    })
}

/// How path-gain magnitudes are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GainModel {
    /// Friis amplitude `λ / (4π d)` per segment; the reflected path is the
    /// product of its two segments.
    #[default]
    FreeSpace,
    /// Fixed magnitudes, mainly for tests.
    Fixed { br: f64, bu: f64, bru: f64 },
}

impl GainModel {
    pub fn validate(&self) -> Result<()> {
        if let GainModel::Fixed { br, bu, bru } = self {
            if ![br, bu, bru].iter().all(|g| g.is_finite() && **g >= 0.0) {
                return Err(Error::InvalidConfig(
                    "fixed gain magnitudes must be finite and non-negative".into(),
                ));
            }
        }
        Ok(())
    }

    /// Magnitudes `(|g_BR|, |g_BU|, |g_BRU|)`.
    pub fn magnitudes(&self, s: &Scenario, cfg: &RadioConfig) -> (f64, f64, f64) {
        match *self {
            GainModel::FreeSpace => {
                let friis = |d: f64| cfg.wavelength / (4.0 * PI * d);
                let br = friis(s.d_br());
                (br, friis(s.d_bu()), br * friis(s.d_ru()))
            }
            GainModel::Fixed { br, bu, bru } => (br, bu, bru),
        }
    }
}

/// Radar-equation amplitude of a bistatic scattering leg pair.
pub fn radar_amplitude(wavelength: f64, rcs: f64, d_in: f64, d_out: f64) -> f64 {
    wavelength * rcs.sqrt() / ((4.0 * PI).powf(1.5) * d_in * d_out)
}

/// The 17 channel parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelParams {
    pub tau_br: f64,
    pub tau_bu: f64,
    pub tau_bru: f64,
    pub theta_br: AnglePair,
    pub theta_bu: AnglePair,
    pub theta_ru: AnglePair,
    pub phi_rb: AnglePair,
    pub g_br: C64,
    pub g_bu: C64,
    pub g_bru: C64,
}

impl ChannelParams {
    /// `[τ_BR, τ_BU, τ_BRU, θ_BR, θ_BU, θ_RU, φ_RB, g_BR, g_BU, g_BRU]`, each
    /// angle as `(az, el)` and each gain as `(Re, Im)`.
    pub fn to_vector(&self) -> [f64; CHANNEL_DIM] {
        [
            self.tau_br,
            self.tau_bu,
            self.tau_bru,
            self.theta_br.az,
            self.theta_br.el,
            self.theta_bu.az,
            self.theta_bu.el,
            self.theta_ru.az,
            self.theta_ru.el,
            self.phi_rb.az,
            self.phi_rb.el,
            self.g_br.re,
            self.g_br.im,
            self.g_bu.re,
            self.g_bu.im,
            self.g_bru.re,
            self.g_bru.im,
        ]
    }

    pub fn from_vector(v: &[f64; CHANNEL_DIM]) -> Self {
        Self {
            tau_br: v[0],
            tau_bu: v[1],
            tau_bru: v[2],
            theta_br: AnglePair::new(v[3], v[4]),
            theta_bu: AnglePair::new(v[5], v[6]),
            theta_ru: AnglePair::new(v[7], v[8]),
            phi_rb: AnglePair::new(v[9], v[10]),
            g_br: C64::new(v[11], v[12]),
            g_bu: C64::new(v[13], v[14]),
            g_bru: C64::new(v[15], v[16]),
        }
    }

    /// The geometric part `η` (delays and angles).
    pub fn eta(&self) -> [f64; GEOMETRIC_DIM] {
        let v = self.to_vector();
        let mut out = [0.0; GEOMETRIC_DIM];
        out.copy_from_slice(&v[..GEOMETRIC_DIM]);
        out
    }
}

/// Delays and angles implied by a scenario (gains left at zero).
pub fn geometric_params(s: &Scenario, cfg: &RadioConfig) -> Result<ChannelParams> {
    let c = cfg.speed_of_light;
    let rot = Rotation::from_angles(s.rot);
    let degenerate = |e: Error| match e {
        Error::CoincidentPoints { separation } => Error::DegenerateGeometry(format!(
            "nodes coincide (separation {separation:.3e} m)"
        )),
        other => other,
    };
    let theta_br = angles_from_direction(&direction(&s.p_b, &s.p_r).map_err(degenerate)?)?;
    let theta_bu = angles_from_direction(&direction(&s.p_b, &s.p_u).map_err(degenerate)?)?;
    let theta_ru =
        angles_from_direction(&direction_local(&rot, &s.p_r, &s.p_u).map_err(degenerate)?)?;
    let phi_rb =
        angles_from_direction(&direction_local(&rot, &s.p_r, &s.p_b).map_err(degenerate)?)?;
    let zero = C64::new(0.0, 0.0);
    Ok(ChannelParams {
        tau_br: s.d_br() / c + s.b_r,
        tau_bu: s.d_bu() / c + s.b_u,
        tau_bru: (s.d_br() + s.d_ru()) / c + s.b_u,
        theta_br,
        theta_bu,
        theta_ru,
        phi_rb,
        g_br: zero,
        g_bu: zero,
        g_bru: zero,
    })
}

/// Channel parameters with gain magnitudes from `gain_model` and phases drawn
/// uniformly from `phase_seed`: `g = |g| · exp(−jφ)`.
pub fn channel_params_from_scenario(
    s: &Scenario,
    cfg: &RadioConfig,
    gain_model: &GainModel,
    phase_seed: u64,
) -> Result<ChannelParams> {
    s.validate()?;
    let mut p = geometric_params(s, cfg)?;
    let (br, bu, bru) = gain_model.magnitudes(s, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(phase_seed);
    let mut draw = |m: f64| C64::from_polar(m, -rng.random_range(0.0..2.0 * PI));
    p.g_br = draw(br);
    p.g_bu = draw(bu);
    p.g_bru = draw(bru);
    Ok(p)
}

/// Precoders, combiners and reflection profiles, one column per transmission.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookSchedule {
    /// `M_B × T`, unit-norm columns.
    pub precoders: CMatrix,
    /// `M_R × T`, unit-modulus entries.
    pub combiners: CMatrix,
    /// `M_R × T`, unit-modulus entries, `γ_{2t+1} = −γ_{2t}`.
    pub reflections: CMatrix,
}

impl CodebookSchedule {
    pub fn transmissions(&self) -> usize {
        self.precoders.ncols()
    }
}

/// Column `index` of the 2D DFT matrix of a `rows × cols` array, in the same
/// element ordering as [`ArrayGeometry::steering`]. Entries are unit modulus.
pub fn dft_column_2d(rows: usize, cols: usize, index: usize) -> CVector {
    let index = index % (rows * cols);
    let (mr, mc) = (index / cols, index % cols);
    CVector::from_fn(rows * cols, |m, _| {
        let (nr, nc) = (m / cols, m % cols);
        let phase = 2.0 * PI * ((nr * mr) as f64 / rows as f64 + (nc * mc) as f64 / cols as f64);
        C64::from_polar(1.0, phase)
    })
}

/// DFT precoders (one beam per transmission pair, cycling over the BS
/// codebook), DFT combiners cycling over the HRIS codebook, and random
/// reflection phases with the sign-flip pairing.
pub fn build_schedule(cfg: &RadioConfig, seed: u64) -> Result<CodebookSchedule> {
    let t = cfg.transmissions;
    if t % 2 != 0 {
        return Err(Error::OddT(t));
    }
    let mb = cfg.bs_elements();
    let mr = cfg.ris_elements();
    let norm = 1.0 / (mb as f64).sqrt();
    let mut precoders = CMatrix::zeros(mb, t);
    let mut combiners = CMatrix::zeros(mr, t);
    let mut reflections = CMatrix::zeros(mr, t);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for col in 0..t {
        let f = dft_column_2d(cfg.bs_rows, cfg.bs_cols, col / 2) * C64::new(norm, 0.0);
        precoders.set_column(col, &f);
        combiners.set_column(col, &dft_column_2d(cfg.ris_rows, cfg.ris_cols, col));
    }
    for pair in 0..t / 2 {
        for i in 0..mr {
            let g = C64::from_polar(1.0, rng.random_range(0.0..2.0 * PI));
            reflections[(i, 2 * pair)] = g;
            reflections[(i, 2 * pair + 1)] = -g;
        }
    }
    Ok(CodebookSchedule {
        precoders,
        combiners,
        reflections,
    })
}

/// Observations at the HRIS sensing chain and at the UE, each `K × T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub y_r: CMatrix,
    pub y_u: CMatrix,
}

impl ObservationSet {
    pub fn is_finite(&self) -> bool {
        self.y_r.iter().chain(self.y_u.iter()).all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

/// `d sᵀ` as a `K × T` matrix.
pub fn outer(d: &CVector, s: &CVector) -> CMatrix {
    d * s.transpose()
}

/// Per-transmission beam factors of every modeled path.
#[derive(Debug, Clone)]
pub struct PathPatterns {
    /// `c_tᵀ a_R(φ_RB)`.
    pub combiner_gain: CVector,
    /// `a_Bᵀ(θ_BR) f_t`.
    pub bs_to_ris: CVector,
    /// `a_Bᵀ(θ_BU) f_t`.
    pub bs_to_ue: CVector,
    /// `a_Rᵀ(θ_RU) diag(γ_t) a_R(φ_RB)`.
    pub reflection: CVector,
}

fn check_schedule(cfg: &RadioConfig, sched: &CodebookSchedule) -> Result<()> {
    let t = cfg.transmissions;
    let ok = sched.precoders.shape() == (cfg.bs_elements(), t)
        && sched.combiners.shape() == (cfg.ris_elements(), t)
        && sched.reflections.shape() == (cfg.ris_elements(), t);
    if ok {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!(
            "schedule shapes {:?}/{:?}/{:?} do not match M_B={}, M_R={}, T={}",
            sched.precoders.shape(),
            sched.combiners.shape(),
            sched.reflections.shape(),
            cfg.bs_elements(),
            cfg.ris_elements(),
            t
        )))
    }
}

pub fn path_patterns(
    cfg: &RadioConfig,
    sched: &CodebookSchedule,
    params: &ChannelParams,
) -> Result<PathPatterns> {
    check_schedule(cfg, sched)?;
    let bs = ArrayGeometry::bs(cfg);
    let ris = ArrayGeometry::ris(cfg);
    let a_rb = ris.steering(&params.phi_rb);
    let a_ru = ris.steering(&params.theta_ru);
    Ok(PathPatterns {
        combiner_gain: sched.combiners.transpose() * &a_rb,
        bs_to_ris: sched.precoders.transpose() * bs.steering(&params.theta_br),
        bs_to_ue: sched.precoders.transpose() * bs.steering(&params.theta_bu),
        reflection: sched.reflections.transpose() * a_ru.component_mul(&a_rb),
    })
}

/// Noise-free, scatterer-free observation means.
pub fn mean_observation(
    cfg: &RadioConfig,
    sched: &CodebookSchedule,
    params: &ChannelParams,
) -> Result<ObservationSet> {
    let pat = path_patterns(cfg, sched, params)?;
    let k = cfg.subcarriers;
    let df = cfg.subcarrier_spacing;
    let p = cfg.tx_power;
    let amp_r = params.g_br * (cfg.rho * p).sqrt();
    let amp_bu = params.g_bu * p.sqrt();
    let amp_bru = params.g_bru * ((1.0 - cfg.rho) * p).sqrt();

    let s_r = pat.combiner_gain.component_mul(&pat.bs_to_ris) * amp_r;
    let y_r = outer(&delay_steering(params.tau_br, k, df), &s_r);

    let s_bu = &pat.bs_to_ue * amp_bu;
    let s_bru = pat.reflection.component_mul(&pat.bs_to_ris) * amp_bru;
    let y_u = outer(&delay_steering(params.tau_bu, k, df), &s_bu)
        + outer(&delay_steering(params.tau_bru, k, df), &s_bru);
    Ok(ObservationSet { y_r, y_u })
}

/// One interference path through a scattering point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScattererPath {
    /// BS → scatterer → UE, leaving the BS along `theta_bs`.
    Direct { tau: f64, gain: C64, theta_bs: AnglePair },
    /// BS → HRIS → scatterer → UE, leaving the HRIS along `theta_rs`
    /// (HRIS frame).
    Reflected { tau: f64, gain: C64, theta_rs: AnglePair },
}

/// Interference paths of the scatterers listed in `s`. Magnitudes follow the
/// radar equation; the reflected family additionally carries `|g_BR|`.
pub fn scatterer_paths(
    s: &Scenario,
    cfg: &RadioConfig,
    params: &ChannelParams,
    phase_seed: u64,
) -> Result<Vec<ScattererPath>> {
    let c = cfg.speed_of_light;
    let rot = Rotation::from_angles(s.rot);
    let mut rng = ChaCha8Rng::seed_from_u64(phase_seed);
    let mut out = Vec::with_capacity(s.scatterers_bu.len() + s.scatterers_bru.len());
    for ps in &s.scatterers_bu {
        let d_in = (ps - s.p_b).norm();
        let d_out = (s.p_u - ps).norm();
        let theta_bs = angles_from_direction(&direction(&s.p_b, ps)?)?;
        direction(ps, &s.p_u)?;
        let mag = radar_amplitude(cfg.wavelength, s.rcs, d_in, d_out);
        out.push(ScattererPath::Direct {
            tau: (d_in + d_out) / c + s.b_u,
            gain: C64::from_polar(mag, -rng.random_range(0.0..2.0 * PI)),
            theta_bs,
        });
    }
    for ps in &s.scatterers_bru {
        let d_in = (ps - s.p_r).norm();
        let d_out = (s.p_u - ps).norm();
        let theta_rs = angles_from_direction(&direction_local(&rot, &s.p_r, ps)?)?;
        direction(ps, &s.p_u)?;
        let mag = params.g_br.norm() * radar_amplitude(cfg.wavelength, s.rcs, d_in, d_out);
        out.push(ScattererPath::Reflected {
            tau: (s.d_br() + d_in + d_out) / c + s.b_u,
            gain: C64::from_polar(mag, -rng.random_range(0.0..2.0 * PI)),
            theta_rs,
        });
    }
    Ok(out)
}

/// UE-side contribution of the scatterer paths, `K × T`.
pub fn scatterer_contribution(
    cfg: &RadioConfig,
    sched: &CodebookSchedule,
    params: &ChannelParams,
    paths: &[ScattererPath],
) -> Result<CMatrix> {
    check_schedule(cfg, sched)?;
    let bs = ArrayGeometry::bs(cfg);
    let ris = ArrayGeometry::ris(cfg);
    let k = cfg.subcarriers;
    let df = cfg.subcarrier_spacing;
    let p = cfg.tx_power;
    let mut y = CMatrix::zeros(k, cfg.transmissions);
    if paths.is_empty() {
        return Ok(y);
    }
    let a_rb = ris.steering(&params.phi_rb);
    let bs_to_ris = sched.precoders.transpose() * bs.steering(&params.theta_br);
    for path in paths {
        match *path {
            ScattererPath::Direct { tau, gain, theta_bs } => {
                let s = sched.precoders.transpose() * bs.steering(&theta_bs) * (gain * p.sqrt());
                y += outer(&delay_steering(tau, k, df), &s);
            }
            ScattererPath::Reflected { tau, gain, theta_rs } => {
                let refl = sched.reflections.transpose() * ris.steering(&theta_rs).component_mul(&a_rb);
                let s = refl.component_mul(&bs_to_ris) * (gain * ((1.0 - cfg.rho) * p).sqrt());
                y += outer(&delay_steering(tau, k, df), &s);
            }
        }
    }
    Ok(y)
}

/// Circular complex Gaussian matrix with variance `variance` per entry.
pub fn complex_noise(rows: usize, cols: usize, variance: f64, rng: &mut impl Rng) -> CMatrix {
    let sd = (variance / 2.0).sqrt();
    CMatrix::from_fn(rows, cols, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        C64::new(sd * re, sd * im)
    })
}

/// Noisy observations: modeled paths, scatterer interference at the UE and
/// independent noise of variance `σ²` at both receivers. Scatterer phases
/// and noise are both derived from `noise_seed`.
pub fn synthesize(
    s: &Scenario,
    cfg: &RadioConfig,
    sched: &CodebookSchedule,
    params: &ChannelParams,
    noise_seed: u64,
) -> Result<ObservationSet> {
    let mut obs = mean_observation(cfg, sched, params)?;
    if !s.scatterers_bu.is_empty() || !s.scatterers_bru.is_empty() {
        let mut seed_rng = ChaCha8Rng::seed_from_u64(noise_seed);
        seed_rng.set_stream(1);
        let paths = scatterer_paths(s, cfg, params, seed_rng.random())?;
        obs.y_u += scatterer_contribution(cfg, sched, params, &paths)?;
    }
    let var = noise_variance(cfg);
    if var > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let (k, t) = obs.y_r.shape();
        obs.y_r += complex_noise(k, t, var, &mut rng);
        obs.y_u += complex_noise(k, t, var, &mut rng);
    }
    Ok(obs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{default_scenario, place_scatterers};
    use approx::assert_relative_eq;

    fn ula4() -> ArrayGeometry {
        ArrayGeometry { rows: 4, cols: 4, spacing: 0.0025, wavelength: 0.01 }
    }

    fn setup() -> (Scenario, RadioConfig, CodebookSchedule, ChannelParams) {
        let (s, mut cfg) = default_scenario();
        cfg.noise_psd = 0.0;
        let sched = build_schedule(&cfg, 1).unwrap();
        let p = channel_params_from_scenario(&s, &cfg, &GainModel::FreeSpace, 2).unwrap();
        (s, cfg, sched, p)
    }

    #[test]
    fn steering_broadside_is_all_ones() {
        let a = ula4().steering(&AnglePair::new(PI / 2.0, PI / 2.0));
        for z in a.iter() {
            assert_relative_eq!(z.re, 1.0, epsilon = 1e-15);
            assert!(z.im.abs() < 1e-15);
        }
    }

    #[test]
    fn steering_first_element_and_quarter_wave_phase() {
        let g = ula4();
        let a = g.steering(&AnglePair::new(0.3, 1.1));
        assert_eq!(a[0], C64::new(1.0, 0.0));
        assert_eq!(a.len(), 16);
        for z in a.iter() {
            assert_relative_eq!(z.norm(), 1.0, epsilon = 1e-14);
        }
        let ar = g.row_factor(&AnglePair::new(0.0, PI / 2.0));
        let expected = C64::from_polar(1.0, -PI / 2.0);
        assert_relative_eq!(ar[1].re, expected.re, epsilon = 1e-15);
        assert_relative_eq!(ar[1].im, expected.im, epsilon = 1e-15);
    }

    #[test]
    fn steering_derivatives_match_finite_differences() {
        let g = ArrayGeometry { rows: 3, cols: 5, spacing: 0.0025, wavelength: 0.01 };
        let psi = AnglePair::new(-0.7, 1.2);
        let d = g.steering_derivatives(&psi);
        let h = 1e-6;
        let fd_az = (g.steering(&AnglePair::new(psi.az + h, psi.el))
            - g.steering(&AnglePair::new(psi.az - h, psi.el)))
            / C64::new(2.0 * h, 0.0);
        let fd_el = (g.steering(&AnglePair::new(psi.az, psi.el + h))
            - g.steering(&AnglePair::new(psi.az, psi.el - h)))
            / C64::new(2.0 * h, 0.0);
        assert!((fd_az - &d.d_az).norm() < 1e-8 * d.d_az.norm());
        assert!((fd_el - &d.d_el).norm() < 1e-8 * d.d_el.norm());
    }

    #[test]
    fn delay_steering_properties() {
        let d0 = delay_steering(0.0, 8, 120e3);
        assert!(d0.iter().all(|z| *z == C64::new(1.0, 0.0)));
        let k = 8;
        let d = delay_steering(1.0 / (k as f64 * 120e3), k, 120e3);
        for (i, z) in d.iter().enumerate() {
            let root = C64::from_polar(1.0, 2.0 * PI * i as f64 / k as f64).conj();
            assert!((z - root).norm() < 1e-14);
        }
        let d = delay_steering(37e-9, 16, 120e3);
        for z in d.iter() {
            assert_relative_eq!((z.conj() * z).re, 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn delay_steering_derivative_matches_fd() {
        let h = 1e-12;
        let fd = (delay_steering(40e-9 + h, 32, 120e3) - delay_steering(40e-9 - h, 32, 120e3))
            / C64::new(2.0 * h, 0.0);
        let an = delay_steering_derivative(40e-9, 32, 120e3);
        assert!((fd - &an).norm() < 1e-6 * an.norm());
    }

    #[test]
    fn delays_follow_geometry() {
        let (mut s, cfg) = default_scenario();
        s.b_r = 0.0;
        s.b_u = 0.0;
        let p = geometric_params(&s, &cfg).unwrap();
        let oracle = (157f64.sqrt() + 113f64.sqrt() - 30f64.sqrt()) / 3e8;
        assert_relative_eq!(p.tau_bru - p.tau_bu, oracle, max_relative = 1e-12);
        assert_relative_eq!(p.tau_bru - p.tau_bu, 58.943e-9, max_relative = 1e-4);

        let mut shifted = s.clone();
        shifted.b_u = 20e-9;
        let q = geometric_params(&shifted, &cfg).unwrap();
        assert_eq!(q.tau_br, p.tau_br);
        assert_relative_eq!(q.tau_bu - p.tau_bu, 20e-9, max_relative = 1e-9);
        assert_relative_eq!(q.tau_bru - p.tau_bru, 20e-9, max_relative = 1e-9);
    }

    #[test]
    fn identity_rotation_gives_global_angles() {
        let (mut s, cfg) = default_scenario();
        s.rot = crate::geometry::RotationAngles::new(0.0, 0.0, 0.0);
        let p = geometric_params(&s, &cfg).unwrap();
        let global = angles_from_direction(&direction(&s.p_r, &s.p_b).unwrap()).unwrap();
        assert_relative_eq!(p.phi_rb.az, global.az, epsilon = 1e-15);
        assert_relative_eq!(p.phi_rb.el, global.el, epsilon = 1e-15);
    }

    #[test]
    fn coincident_nodes_are_degenerate() {
        let (mut s, cfg) = default_scenario();
        s.p_u = s.p_b;
        let err = channel_params_from_scenario(&s, &cfg, &GainModel::FreeSpace, 0).unwrap_err();
        assert!(matches!(err, Error::DegenerateGeometry(_)));
    }

    #[test]
    fn parameter_vector_round_trip() {
        let (_, _, _, p) = setup();
        assert_eq!(ChannelParams::from_vector(&p.to_vector()), p);
        assert_eq!(p.eta()[..], p.to_vector()[..11]);
    }

    #[test]
    fn free_space_gains() {
        let (s, cfg, _, p) = setup();
        let friis = |d: f64| 0.01 / (4.0 * PI * d);
        assert_relative_eq!(p.g_br.norm(), friis(157f64.sqrt()), max_relative = 1e-12);
        assert_relative_eq!(p.g_bu.norm(), friis(30f64.sqrt()), max_relative = 1e-12);
        assert_relative_eq!(
            p.g_bru.norm(),
            friis(157f64.sqrt()) * friis(113f64.sqrt()),
            max_relative = 1e-12
        );
        let fixed = GainModel::Fixed { br: 1.0, bu: 2.0, bru: 3.0 };
        let q = channel_params_from_scenario(&s, &cfg, &fixed, 2).unwrap();
        assert_relative_eq!(q.g_bu.norm(), 2.0, epsilon = 1e-15);
        assert_relative_eq!(q.g_bu.arg(), p.g_bu.arg(), epsilon = 1e-15);
    }

    #[test]
    fn schedule_structure() {
        let (_, cfg) = default_scenario();
        let a = build_schedule(&cfg, 5).unwrap();
        assert_eq!(a, build_schedule(&cfg, 5).unwrap());
        assert_ne!(a.reflections, build_schedule(&cfg, 6).unwrap().reflections);
        for z in a.combiners.iter().chain(a.reflections.iter()) {
            assert_relative_eq!(z.norm(), 1.0, epsilon = 1e-14);
        }
        for t in 0..cfg.transmissions / 2 {
            let sum = a.reflections.column(2 * t) + a.reflections.column(2 * t + 1);
            assert_eq!(sum.norm(), 0.0);
            assert_eq!(a.precoders.column(2 * t), a.precoders.column(2 * t + 1));
            assert_relative_eq!(a.precoders.column(2 * t).norm(), 1.0, epsilon = 1e-14);
        }
        let mut odd = cfg.clone();
        odd.transmissions = 5;
        assert_eq!(build_schedule(&odd, 1).unwrap_err(), Error::OddT(5));
    }

    #[test]
    fn hris_observation_matches_elementwise_oracle() {
        let (s, mut cfg) = default_scenario();
        cfg.subcarriers = 1;
        cfg.transmissions = 2;
        cfg.noise_psd = 0.0;
        let sched = build_schedule(&cfg, 3).unwrap();
        let p = channel_params_from_scenario(&s, &cfg, &GainModel::FreeSpace, 4).unwrap();
        let obs = synthesize(&s, &cfg, &sched, &p, 0).unwrap();
        let kw = 2.0 * PI * cfg.element_spacing / cfg.wavelength;
        let elem = |psi: &AnglePair, nr: usize, nc: usize| {
            C64::from_polar(
                1.0,
                -kw * (nr as f64 * psi.el.sin() * psi.az.cos() + nc as f64 * psi.el.cos()),
            )
        };
        for t in 0..2 {
            let mut comb = C64::new(0.0, 0.0);
            for nr in 0..16 {
                for nc in 0..16 {
                    comb += sched.combiners[(nr * 16 + nc, t)] * elem(&p.phi_rb, nr, nc);
                }
            }
            let mut prec = C64::new(0.0, 0.0);
            for nr in 0..4 {
                for nc in 0..4 {
                    prec += sched.precoders[(nr * 4 + nc, t)] * elem(&p.theta_br, nr, nc);
                }
            }
            let expected = p.g_br * (cfg.rho * cfg.tx_power).sqrt() * comb * prec;
            assert!((obs.y_r[(0, t)] - expected).norm() <= 1e-12 * expected.norm());
        }
    }

    #[test]
    fn pairing_cancels_reflected_path_in_sums() {
        let (_, cfg, sched, mut p) = setup();
        p.g_bu = C64::new(0.0, 0.0);
        let obs = mean_observation(&cfg, &sched, &p).unwrap();
        let scale = obs.y_u.norm();
        assert!(scale > 0.0);
        for t in 0..cfg.transmissions / 2 {
            let sum = obs.y_u.column(2 * t) + obs.y_u.column(2 * t + 1);
            assert!(sum.norm() <= 1e-12 * scale);
        }
    }

    #[test]
    fn reflected_path_vanishes_without_reflected_power() {
        let (_, mut cfg, sched, mut p) = setup();
        cfg.rho = 1.0;
        p.g_bu = C64::new(0.0, 0.0);
        let obs = mean_observation(&cfg, &sched, &p).unwrap();
        assert_eq!(obs.y_u.norm(), 0.0);
    }

    #[test]
    fn hris_observation_is_rank_one() {
        let (_, cfg, sched, p) = setup();
        let y = mean_observation(&cfg, &sched, &p).unwrap().y_r;
        let d = delay_steering(p.tau_br, cfg.subcarriers, cfg.subcarrier_spacing);
        // Least-squares row: (dᴴ Y) / (dᴴ d).
        let row = d.adjoint() * &y / C64::new(d.norm_squared(), 0.0);
        let resid = &y - &d * row;
        assert!(resid.norm() <= 1e-10 * y.norm());
    }

    #[test]
    fn sensed_energy_scales_with_rho() {
        let (_, mut cfg, sched, p) = setup();
        cfg.rho = 0.25;
        let e1 = mean_observation(&cfg, &sched, &p).unwrap().y_r.norm_squared();
        cfg.rho = 0.5;
        let e2 = mean_observation(&cfg, &sched, &p).unwrap().y_r.norm_squared();
        assert_relative_eq!(e2 / e1, 2.0, max_relative = 1e-12);
    }

    #[test]
    fn scatterers_only_touch_the_ue() {
        let (mut s, cfg, sched, p) = setup();
        let clean = synthesize(&s, &cfg, &sched, &p, 9).unwrap();
        let (bu, bru) = place_scatterers(4, 4, 1);
        s.scatterers_bu = bu;
        s.scatterers_bru = bru;
        let dirty = synthesize(&s, &cfg, &sched, &p, 9).unwrap();
        assert_eq!(clean.y_r, dirty.y_r);
        assert!((clean.y_u - dirty.y_u).norm() > 0.0);
    }

    #[test]
    fn noise_has_configured_variance_and_is_seeded() {
        let (s, cfg0, sched, mut p) = setup();
        let mut cfg = cfg0.clone();
        cfg.noise_psd = 1.0 / (cfg.subcarrier_spacing * cfg.noise_figure);
        p.g_br = C64::new(0.0, 0.0);
        p.g_bu = C64::new(0.0, 0.0);
        p.g_bru = C64::new(0.0, 0.0);
        let a = synthesize(&s, &cfg, &sched, &p, 17).unwrap();
        let b = synthesize(&s, &cfg, &sched, &p, 17).unwrap();
        assert_eq!(a, b);
        let n = (cfg.subcarriers * cfg.transmissions) as f64;
        assert_relative_eq!(a.y_r.norm_squared() / n, 1.0, max_relative = 0.03);
        assert_relative_eq!(a.y_u.norm_squared() / n, 1.0, max_relative = 0.03);
        let cross: C64 = a.y_r.iter().zip(a.y_u.iter()).map(|(x, y)| x * y.conj()).sum();
        assert!(cross.norm() / n < 0.03);
    }

    #[test]
    fn mismatched_schedule_rejected() {
        let (_, mut cfg, sched, p) = setup();
        cfg.transmissions = 4;
        assert!(matches!(
            mean_observation(&cfg, &sched, &p),
            Err(Error::DimensionMismatch(_))
        ));
    }
}
