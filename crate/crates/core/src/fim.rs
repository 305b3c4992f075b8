//! Fisher information of the channel parameters, its mapping to the state
//! parameters, the orthogonality-constrained bound and the derived error
//! bounds.

use nalgebra::{DMatrix, Matrix3, RowVector3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{Position, Rotation};
use crate::scenario::{noise_variance, RadioConfig, Scenario};
use crate::signal::{
    delay_steering, delay_steering_derivative, outer, path_patterns, ArrayGeometry, CMatrix,
    ChannelParams, CodebookSchedule, C64, CHANNEL_DIM, GEOMETRIC_DIM,
};

/// Number of state parameters: two positions, two clock biases, nine
/// rotation entries.
pub const STATE_DIM: usize = 17;
/// Relative eigenvalue threshold below which an information matrix is
/// reported as singular.
pub const SINGULAR_THRESHOLD: f64 = 1e-12;

/// `[p_R, p_U, b_R, b_U, r]` with `r` the stacked rotation columns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateParams {
    pub p_r: Position,
    pub p_u: Position,
    pub b_r: f64,
    pub b_u: f64,
    pub r: [f64; 9],
}

impl StateParams {
    pub fn from_scenario(s: &Scenario) -> Self {
        Self {
            p_r: s.p_r,
            p_u: s.p_u,
            b_r: s.b_r,
            b_u: s.b_u,
            r: Rotation::from_angles(s.rot).stacked(),
        }
    }

    pub fn rotation(&self) -> Rotation {
        Rotation::from_stacked(&self.r)
    }

    pub fn to_vector(&self) -> [f64; STATE_DIM] {
        let mut v = [0.0; STATE_DIM];
        v[0..3].copy_from_slice(self.p_r.as_slice());
        v[3..6].copy_from_slice(self.p_u.as_slice());
        v[6] = self.b_r;
        v[7] = self.b_u;
        v[8..17].copy_from_slice(&self.r);
        v
    }

    pub fn from_vector(v: &[f64; STATE_DIM]) -> Self {
        let mut r = [0.0; 9];
        r.copy_from_slice(&v[8..17]);
        Self {
            p_r: Position::new(v[0], v[1], v[2]),
            p_u: Position::new(v[3], v[4], v[5]),
            b_r: v[6],
            b_u: v[7],
            r,
        }
    }
}

fn raw_angles(q: &Vector3<f64>) -> (f64, f64) {
    (q.y.atan2(q.x), q.z.clamp(-1.0, 1.0).acos())
}

/// Delays and angles as a function of the state, with `R` taken verbatim
/// from the 9-vector (no re-orthogonalization). This is the map whose
/// Jacobian is [`jacobian_t`].
pub fn eta_from_state(state: &StateParams, p_b: &Position, c: f64) -> [f64; GEOMETRIC_DIM] {
    let r = Matrix3::from_column_slice(&state.r);
    let d_br = (state.p_r - p_b).norm();
    let d_bu = (state.p_u - p_b).norm();
    let d_ru = (state.p_u - state.p_r).norm();
    let br = raw_angles(&((state.p_r - p_b) / d_br));
    let bu = raw_angles(&((state.p_u - p_b) / d_bu));
    let ru = raw_angles(&(r.transpose() * (state.p_u - state.p_r) / d_ru));
    let rb = raw_angles(&(r.transpose() * (p_b - state.p_r) / d_br));
    [
        d_br / c + state.b_r,
        d_bu / c + state.b_u,
        (d_br + d_ru) / c + state.b_u,
        br.0,
        br.1,
        bu.0,
        bu.1,
        ru.0,
        ru.1,
        rb.0,
        rb.1,
    ]
}

/// Inverse of a symmetric positive definite matrix after diagonal
/// equilibration. Returns the eigenvalue condition number of the
/// equilibrated matrix when it is singular at [`SINGULAR_THRESHOLD`].
pub fn equilibrated_inverse(m: &DMatrix<f64>) -> std::result::Result<DMatrix<f64>, f64> {
    let n = m.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let diag = m.diagonal();
    if diag.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
        return Err(f64::INFINITY);
    }
    let scale = diag.map(|d| 1.0 / d.sqrt());
    let scaled = DMatrix::from_fn(n, n, |i, j| {
        0.5 * (m[(i, j)] + m[(j, i)]) * scale[i] * scale[j]
    });
    let eig = SymmetricEigen::new(scaled);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(max > 0.0) || min <= SINGULAR_THRESHOLD * max {
        return Err(if min > 0.0 { max / min } else { f64::INFINITY });
    }
    let inv_vals = eig.eigenvalues.map(|l| 1.0 / l);
    let v = &eig.eigenvectors;
    let inner = v * DMatrix::from_diagonal(&inv_vals) * v.transpose();
    Ok(DMatrix::from_fn(n, n, |i, j| inner[(i, j)] * scale[i] * scale[j]))
}

fn invert_fim(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    equilibrated_inverse(m).map_err(|condition| Error::SingularFim { condition })
}

/// Derivatives of the noise-free HRIS and UE observations with respect to
/// each of the 17 channel parameters, as `(∂μ_R, ∂μ_U)` pairs of `K × T`
/// matrices.
pub fn mean_derivatives(
    cfg: &RadioConfig,
    sched: &CodebookSchedule,
    params: &ChannelParams,
) -> Result<Vec<(CMatrix, CMatrix)>> {
    let pat = path_patterns(cfg, sched, params)?;
    let (k, t) = (cfg.subcarriers, cfg.transmissions);
    let df = cfg.subcarrier_spacing;
    let bs = ArrayGeometry::bs(cfg);
    let ris = ArrayGeometry::ris(cfg);
    let p = cfg.tx_power;
    let root_r = (cfg.rho * p).sqrt();
    let root_bu = p.sqrt();
    let root_bru = ((1.0 - cfg.rho) * p).sqrt();
    let amp_r = params.g_br * root_r;
    let amp_bu = params.g_bu * root_bu;
    let amp_bru = params.g_bru * root_bru;

    let d_r = delay_steering(params.tau_br, k, df);
    let d_bu = delay_steering(params.tau_bu, k, df);
    let d_bru = delay_steering(params.tau_bru, k, df);

    let s_r = pat.combiner_gain.component_mul(&pat.bs_to_ris);
    let s_bu = pat.bs_to_ue.clone();
    let s_bru = pat.reflection.component_mul(&pat.bs_to_ris);

    let a_br = bs.steering_derivatives(&params.theta_br);
    let a_bu = bs.steering_derivatives(&params.theta_bu);
    let a_ru = ris.steering_derivatives(&params.theta_ru);
    let a_rb = ris.steering_derivatives(&params.phi_rb);

    let ft = sched.precoders.transpose();
    let ct = sched.combiners.transpose();
    let gt = sched.reflections.transpose();
    let zero = || CMatrix::zeros(k, t);
    let j = C64::new(0.0, 1.0);

    let mut out = Vec::with_capacity(CHANNEL_DIM);
    // Delays.
    out.push((
        outer(&delay_steering_derivative(params.tau_br, k, df), &(&s_r * amp_r)),
        zero(),
    ));
    out.push((
        zero(),
        outer(&delay_steering_derivative(params.tau_bu, k, df), &(&s_bu * amp_bu)),
    ));
    out.push((
        zero(),
        outer(&delay_steering_derivative(params.tau_bru, k, df), &(&s_bru * amp_bru)),
    ));
    // BS → HRIS departure.
    for da in [&a_br.d_az, &a_br.d_el] {
        let dprec = &ft * da;
        out.push((
            outer(&d_r, &(pat.combiner_gain.component_mul(&dprec) * amp_r)),
            outer(&d_bru, &(pat.reflection.component_mul(&dprec) * amp_bru)),
        ));
    }
    // BS → UE departure.
    for da in [&a_bu.d_az, &a_bu.d_el] {
        out.push((zero(), outer(&d_bu, &(&ft * da * amp_bu))));
    }
    // HRIS → UE departure.
    for da in [&a_ru.d_az, &a_ru.d_el] {
        let refl = &gt * da.component_mul(&a_rb.a);
        out.push((zero(), outer(&d_bru, &(refl.component_mul(&pat.bs_to_ris) * amp_bru))));
    }
    // HRIS arrival from the BS.
    for da in [&a_rb.d_az, &a_rb.d_el] {
        let comb = &ct * da;
        let refl = &gt * a_ru.a.component_mul(da);
        out.push((
            outer(&d_r, &(comb.component_mul(&pat.bs_to_ris) * amp_r)),
            outer(&d_bru, &(refl.component_mul(&pat.bs_to_ris) * amp_bru)),
        ));
    }
    // Gains: real then imaginary part.
    let g_r = outer(&d_r, &(&s_r * C64::new(root_r, 0.0)));
    let g_bu = outer(&d_bu, &(&s_bu * C64::new(root_bu, 0.0)));
    let g_bru = outer(&d_bru, &(&s_bru * C64::new(root_bru, 0.0)));
    out.push((g_r.clone(), zero()));
    out.push((g_r * j, zero()));
    out.push((zero(), g_bu.clone()));
    out.push((zero(), g_bu * j));
    out.push((zero(), g_bru.clone()));
    out.push((zero(), g_bru * j));
    Ok(out)
}

/// `J = (2/σ²) Σ_{t,k} Re{∂μ ∂μᴴ}` over both receivers (17 × 17).
pub fn channel_fim(
    cfg: &RadioConfig,
    sched: &CodebookSchedule,
    params: &ChannelParams,
) -> Result<DMatrix<f64>> {
    let var = noise_variance(cfg);
    if !(var > 0.0) {
        return Err(Error::InvalidConfig("noise variance must be positive".into()));
    }
    let derivs = mean_derivatives(cfg, sched, params)?;
    let n = cfg.subcarriers * cfg.transmissions;
    // Re{a b*} = a_re b_re + a_im b_im, so stack real and imaginary parts.
    let mut d = DMatrix::<f64>::zeros(CHANNEL_DIM, 4 * n);
    for (i, (dr, du)) in derivs.iter().enumerate() {
        for (block, m) in [dr, du].into_iter().enumerate() {
            let off = block * 2 * n;
            for (idx, z) in m.iter().enumerate() {
                d[(i, off + idx)] = z.re;
                d[(i, off + n + idx)] = z.im;
            }
        }
    }
    let mut jm = &d * d.transpose() * (2.0 / var);
    jm = (&jm + jm.transpose()) * 0.5;
    Ok(jm)
}

/// Equivalent information of the 11 delays and angles with the gains
/// marginalized: `[[J⁻¹]_{1:11,1:11}]⁻¹`.
pub fn efim_channel(j: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if j.shape() != (CHANNEL_DIM, CHANNEL_DIM) {
        return Err(Error::DimensionMismatch(format!(
            "expected a 17x17 FIM, got {:?}",
            j.shape()
        )));
    }
    let inv = invert_fim(j)?;
    let block = inv.view((0, 0), (GEOMETRIC_DIM, GEOMETRIC_DIM)).into_owned();
    invert_fim(&block)
}

/// Gradient of `(atan2(q₂, q₁), acos(q₃))` with respect to `q`.
fn angle_gradient(q: &Vector3<f64>) -> (RowVector3<f64>, RowVector3<f64>) {
    let rho2 = q.x * q.x + q.y * q.y;
    let az = RowVector3::new(-q.y / rho2, q.x / rho2, 0.0);
    let el = RowVector3::new(0.0, 0.0, -1.0 / (1.0 - q.z * q.z).sqrt());
    (az, el)
}

/// `∂η/∂ζ_s` (11 × 17) at the scenario's true state.
pub fn jacobian_t(s: &Scenario, c: f64) -> Result<DMatrix<f64>> {
    s.validate()?;
    let state = StateParams::from_scenario(s);
    jacobian_t_at(&state, &s.p_b, c)
}

/// `∂η/∂ζ_s` at an arbitrary state (the rotation block uses the 9-vector
/// as given).
pub fn jacobian_t_at(state: &StateParams, p_b: &Position, c: f64) -> Result<DMatrix<f64>> {
    let r = Matrix3::from_column_slice(&state.r);
    let v_br = state.p_r - p_b;
    let v_bu = state.p_u - p_b;
    let v_ru = state.p_u - state.p_r;
    let (d_br, d_bu, d_ru) = (v_br.norm(), v_bu.norm(), v_ru.norm());
    if d_br.min(d_bu).min(d_ru) < crate::geometry::MIN_SEPARATION {
        return Err(Error::DegenerateGeometry("coincident nodes".into()));
    }
    let u_br = v_br / d_br;
    let u_bu = v_bu / d_bu;
    let u_ru = v_ru / d_ru;
    let u_rb = -u_br;
    let q_ru = r.transpose() * u_ru;
    let q_rb = r.transpose() * u_rb;
    for q in [&u_br, &u_bu, &q_ru, &q_rb] {
        if q.x * q.x + q.y * q.y < 1e-24 {
            return Err(Error::DegenerateGeometry(
                "direction on the array axis; azimuth undefined".into(),
            ));
        }
    }
    let proj = |u: &Vector3<f64>, d: f64| (Matrix3::identity() - u * u.transpose()) / d;

    let mut t = DMatrix::<f64>::zeros(GEOMETRIC_DIM, STATE_DIM);
    let set_row3 = |t: &mut DMatrix<f64>, row: usize, col: usize, v: &RowVector3<f64>| {
        for i in 0..3 {
            t[(row, col + i)] += v[i];
        }
    };

    // Delays.
    set_row3(&mut t, 0, 0, &(u_br.transpose() / c));
    t[(0, 6)] = 1.0;
    set_row3(&mut t, 1, 3, &(u_bu.transpose() / c));
    t[(1, 7)] = 1.0;
    set_row3(&mut t, 2, 0, &((u_br - u_ru).transpose() / c));
    set_row3(&mut t, 2, 3, &(u_ru.transpose() / c));
    t[(2, 7)] = 1.0;

    // BS departure towards the HRIS and towards the UE.
    let (g_az, g_el) = angle_gradient(&u_br);
    let p = proj(&u_br, d_br);
    set_row3(&mut t, 3, 0, &(g_az * p));
    set_row3(&mut t, 4, 0, &(g_el * p));
    let (g_az, g_el) = angle_gradient(&u_bu);
    let p = proj(&u_bu, d_bu);
    set_row3(&mut t, 5, 3, &(g_az * p));
    set_row3(&mut t, 6, 3, &(g_el * p));

    // HRIS-frame angles: q = Rᵀ w, so ∂q/∂w = Rᵀ and ∂q_i/∂r_i = wᵀ.
    let rt = r.transpose();
    let angle_rows = |t: &mut DMatrix<f64>,
                      row: usize,
                      q: &Vector3<f64>,
                      w: &Vector3<f64>,
                      dw_dp: &Matrix3<f64>,
                      p_cols: &[(usize, f64)]| {
        let (g_az, g_el) = angle_gradient(q);
        for (k, g) in [g_az, g_el].iter().enumerate() {
            let dp = g * rt * dw_dp;
            for &(col, sign) in p_cols {
                for i in 0..3 {
                    t[(row + k, col + i)] += sign * dp[i];
                }
            }
            for ci in 0..3 {
                for i in 0..3 {
                    t[(row + k, 8 + 3 * ci + i)] += g[ci] * w[i];
                }
            }
        }
    };
    angle_rows(&mut t, 7, &q_ru, &u_ru, &proj(&u_ru, d_ru), &[(3, 1.0), (0, -1.0)]);
    angle_rows(&mut t, 9, &q_rb, &u_rb, &proj(&u_rb, d_br), &[(0, -1.0)]);
    Ok(t)
}

/// `J_s = Tᵀ J_η T`.
pub fn state_fim(j_eta: &DMatrix<f64>, t: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if j_eta.shape() != (GEOMETRIC_DIM, GEOMETRIC_DIM) || t.shape() != (GEOMETRIC_DIM, STATE_DIM) {
        return Err(Error::DimensionMismatch(format!(
            "J_eta {:?}, T {:?}",
            j_eta.shape(),
            t.shape()
        )));
    }
    let js = t.transpose() * j_eta * t;
    Ok((&js + js.transpose()) * 0.5)
}

/// `Φ = blkdiag(I₈, Φ₀/√2)` (17 × 11), a basis of the tangent space of the
/// orthogonality constraint.
pub fn constraint_basis(r: &Rotation) -> DMatrix<f64> {
    let (r1, r2, r3) = (r.column(0), r.column(1), r.column(2));
    let mut phi = DMatrix::<f64>::zeros(STATE_DIM, 11);
    for i in 0..8 {
        phi[(i, i)] = 1.0;
    }
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let blocks: [[Option<(Vector3<f64>, f64)>; 3]; 3] = [
        [Some((r3, -1.0)), None, Some((r2, 1.0))],
        [None, Some((r3, -1.0)), Some((r1, -1.0))],
        [Some((r1, 1.0)), Some((r2, 1.0)), None],
    ];
    for (bi, row) in blocks.iter().enumerate() {
        for (bj, entry) in row.iter().enumerate() {
            if let Some((v, sign)) = entry {
                for i in 0..3 {
                    phi[(8 + 3 * bi + i, 8 + bj)] = sign * s * v[i];
                }
            }
        }
    }
    phi
}

/// Jacobian of the six orthogonality constraints with respect to the state.
pub fn constraint_jacobian(r: &Rotation) -> DMatrix<f64> {
    let cols = [r.column(0), r.column(1), r.column(2)];
    // ‖r1‖²−1, r2ᵀr1, r3ᵀr1, ‖r2‖²−1, r2ᵀr3, ‖r3‖²−1
    let pairs = [(0, 0), (1, 0), (2, 0), (1, 1), (1, 2), (2, 2)];
    let mut g = DMatrix::<f64>::zeros(6, STATE_DIM);
    for (row, &(a, b)) in pairs.iter().enumerate() {
        for i in 0..3 {
            g[(row, 8 + 3 * a + i)] += cols[b][i];
            g[(row, 8 + 3 * b + i)] += cols[a][i];
        }
    }
    g
}

/// Which state blocks are treated as known.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct KnownStates {
    pub p_r: bool,
    pub p_u: bool,
    pub rotation: bool,
}

/// The six knowledge configurations of the comparative study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KnowledgeCase {
    C1,
    C2,
    C3,
    C4,
    C5,
    C6,
}

impl KnowledgeCase {
    pub const ALL: [KnowledgeCase; 6] = [
        KnowledgeCase::C1,
        KnowledgeCase::C2,
        KnowledgeCase::C3,
        KnowledgeCase::C4,
        KnowledgeCase::C5,
        KnowledgeCase::C6,
    ];

    pub fn known(self) -> KnownStates {
        let k = |p_r, p_u, rotation| KnownStates { p_r, p_u, rotation };
        match self {
            KnowledgeCase::C1 => k(false, false, false),
            KnowledgeCase::C2 => k(false, true, true),
            KnowledgeCase::C3 => k(false, false, true),
            KnowledgeCase::C4 => k(false, true, false),
            KnowledgeCase::C5 => k(true, false, true),
            KnowledgeCase::C6 => k(true, false, false),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            KnowledgeCase::C1 => "C1",
            KnowledgeCase::C2 => "C2",
            KnowledgeCase::C3 => "C3",
            KnowledgeCase::C4 => "C4",
            KnowledgeCase::C5 => "C5",
            KnowledgeCase::C6 => "C6",
        }
    }
}

/// `C = Φ (Φᵀ J_s Φ)⁻¹ Φᵀ` with all states unknown.
pub fn constrained_crb(j_s: &DMatrix<f64>, r: &Rotation) -> Result<DMatrix<f64>> {
    constrained_crb_with(j_s, r, KnownStates::default())
}

/// Constrained bound with some state blocks known. Known rows of `Φ` are
/// removed together with the columns they span; the corresponding rows and
/// columns of the result are zero.
pub fn constrained_crb_with(
    j_s: &DMatrix<f64>,
    r: &Rotation,
    known: KnownStates,
) -> Result<DMatrix<f64>> {
    if j_s.shape() != (STATE_DIM, STATE_DIM) {
        return Err(Error::DimensionMismatch(format!(
            "expected a 17x17 state FIM, got {:?}",
            j_s.shape()
        )));
    }
    let phi = reduced_basis(r, known);
    let reduced = phi.transpose() * j_s * &phi;
    let inv = equilibrated_inverse(&reduced)
        .map_err(|condition| Error::SingularReducedFim { condition })?;
    let c = &phi * inv * phi.transpose();
    Ok((&c + c.transpose()) * 0.5)
}

/// `Φ` with the rows of known states zeroed and the columns they span
/// removed.
pub fn reduced_basis(r: &Rotation, known: KnownStates) -> DMatrix<f64> {
    let mut phi = constraint_basis(r);
    let mut keep_cols: Vec<usize> = vec![6, 7];
    if known.p_r {
        phi.view_mut((0, 0), (3, 3)).fill(0.0);
    } else {
        keep_cols.extend(0..3);
    }
    if known.p_u {
        phi.view_mut((3, 3), (3, 3)).fill(0.0);
    } else {
        keep_cols.extend(3..6);
    }
    if known.rotation {
        phi.view_mut((8, 8), (9, 3)).fill(0.0);
    } else {
        keep_cols.extend(8..11);
    }
    keep_cols.sort_unstable();
    phi.select_columns(&keep_cols)
}

/// Same bound as [`constrained_crb_with`] applied to `Tᵀ J_η T`, evaluated
/// without forming the state FIM.
///
/// The delay/clock coupling makes `Φᵀ Tᵀ J_η T Φ` ill-conditioned, and the
/// delay rows of `J_η` outweigh the angle rows by many orders of magnitude.
/// Whitening with a Cholesky factor `J_η = L Lᵀ` and factoring
/// `B = Lᵀ T Φ D = Q R` (with a column scaling `D`) gives the bound as
/// `D R⁻¹ R⁻ᵀ D`, which only loses accuracy with `cond(R)` rather than its
/// square.
pub fn constrained_crb_factored(
    j_eta: &DMatrix<f64>,
    t: &DMatrix<f64>,
    r: &Rotation,
    known: KnownStates,
) -> Result<DMatrix<f64>> {
    if j_eta.shape() != (GEOMETRIC_DIM, GEOMETRIC_DIM) || t.shape() != (GEOMETRIC_DIM, STATE_DIM) {
        return Err(Error::DimensionMismatch(format!(
            "J_eta {:?}, T {:?}",
            j_eta.shape(),
            t.shape()
        )));
    }
    let n = GEOMETRIC_DIM;
    let diag = j_eta.diagonal();
    if diag.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
        return Err(Error::SingularFim { condition: f64::INFINITY });
    }
    let row_scale = diag.map(|d| d.sqrt());
    let equilibrated = DMatrix::from_fn(n, n, |i, j| {
        0.5 * (j_eta[(i, j)] + j_eta[(j, i)]) / (row_scale[i] * row_scale[j])
    });
    let chol = equilibrated
        .cholesky()
        .ok_or(Error::SingularFim { condition: f64::INFINITY })?;
    // J_η = S L̃ L̃ᵀ S, so Lᵀ = L̃ᵀ S.
    let mut lt = chol.l().transpose();
    for j in 0..n {
        lt.column_mut(j).scale_mut(row_scale[j]);
    }

    let phi = reduced_basis(r, known);
    let mut b = lt * t * &phi;
    let m = b.ncols();
    let mut col_scale = Vec::with_capacity(m);
    for j in 0..m {
        let norm = b.column(j).norm();
        if !(norm > 0.0) {
            return Err(Error::SingularReducedFim { condition: f64::INFINITY });
        }
        col_scale.push(1.0 / norm);
        b.column_mut(j).scale_mut(1.0 / norm);
    }
    let rr = b.qr().r();
    let rmax = rr.diagonal().amax();
    let rmin = rr.diagonal().amin();
    if !(rmin > SINGULAR_THRESHOLD * rmax) {
        let condition = if rmin > 0.0 { (rmax / rmin).powi(2) } else { f64::INFINITY };
        return Err(Error::SingularReducedFim { condition });
    }
    let r_inv = rr
        .solve_upper_triangular(&DMatrix::identity(m, m))
        .ok_or(Error::SingularReducedFim { condition: f64::INFINITY })?;
    let mut cov = &r_inv * r_inv.transpose();
    for i in 0..m {
        for j in 0..m {
            cov[(i, j)] *= col_scale[i] * col_scale[j];
        }
    }
    let c = &phi * cov * phi.transpose();
    Ok((&c + c.transpose()) * 0.5)
}

/// All error bounds for one configuration. Delay bounds are in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    pub teb_br: f64,
    pub teb_bu: f64,
    pub teb_bru: f64,
    pub adeb_br: f64,
    pub adeb_bu: f64,
    pub adeb_ru: f64,
    pub aaeb_rb: f64,
    pub peb_r: f64,
    pub peb_u: f64,
    pub ceb_r: f64,
    pub ceb_u: f64,
    pub oeb: f64,
}

/// Column names of the bound CSV, in order.
pub const BOUND_CSV_HEADER: [&str; 15] = [
    "scenario_id",
    "P_B_dBm",
    "rho",
    "teb_br_m",
    "teb_bu_m",
    "teb_bru_m",
    "adeb_br_rad",
    "adeb_bu_rad",
    "adeb_ru_rad",
    "aaeb_rb_rad",
    "peb_r_m",
    "peb_u_m",
    "ceb_r_s",
    "ceb_u_s",
    "oeb",
];

impl BoundReport {
    pub fn values(&self) -> [f64; 12] {
        [
            self.teb_br,
            self.teb_bu,
            self.teb_bru,
            self.adeb_br,
            self.adeb_bu,
            self.adeb_ru,
            self.aaeb_rb,
            self.peb_r,
            self.peb_u,
            self.ceb_r,
            self.ceb_u,
            self.oeb,
        ]
    }

    pub fn from_values(v: &[f64; 12]) -> Self {
        Self {
            teb_br: v[0],
            teb_bu: v[1],
            teb_bru: v[2],
            adeb_br: v[3],
            adeb_bu: v[4],
            adeb_ru: v[5],
            aaeb_rb: v[6],
            peb_r: v[7],
            peb_u: v[8],
            ceb_r: v[9],
            ceb_u: v[10],
            oeb: v[11],
        }
    }

    pub fn csv_header() -> String {
        BOUND_CSV_HEADER.join(",")
    }

    pub fn csv_row(&self, scenario_id: &str, p_b_dbm: f64, rho: f64) -> String {
        let mut fields = vec![
            scenario_id.to_string(),
            crate::io::format_float(p_b_dbm),
            crate::io::format_float(rho),
        ];
        fields.extend(self.values().iter().map(|v| crate::io::format_float(*v)));
        fields.join(",")
    }
}

fn sqrt_trace(m: &DMatrix<f64>, start: usize, len: usize) -> f64 {
    m.view((start, start), (len, len)).trace().max(0.0).sqrt()
}

/// Square roots of the indexed diagonal blocks of `C` and `J_η⁻¹`.
pub fn extract_bounds(c: &DMatrix<f64>, j_eta: &DMatrix<f64>, speed_of_light: f64) -> Result<BoundReport> {
    if c.shape() != (STATE_DIM, STATE_DIM) || j_eta.shape() != (GEOMETRIC_DIM, GEOMETRIC_DIM) {
        return Err(Error::DimensionMismatch(format!(
            "C {:?}, J_eta {:?}",
            c.shape(),
            j_eta.shape()
        )));
    }
    let ci = invert_fim(j_eta)?;
    let diag_sqrt = |m: &DMatrix<f64>, i: usize| m[(i, i)].max(0.0).sqrt();
    Ok(BoundReport {
        teb_br: speed_of_light * diag_sqrt(&ci, 0),
        teb_bu: speed_of_light * diag_sqrt(&ci, 1),
        teb_bru: speed_of_light * diag_sqrt(&ci, 2),
        adeb_br: sqrt_trace(&ci, 3, 2),
        adeb_bu: sqrt_trace(&ci, 5, 2),
        adeb_ru: sqrt_trace(&ci, 7, 2),
        aaeb_rb: sqrt_trace(&ci, 9, 2),
        peb_r: sqrt_trace(c, 0, 3),
        peb_u: sqrt_trace(c, 3, 3),
        ceb_r: diag_sqrt(c, 6),
        ceb_u: diag_sqrt(c, 7),
        oeb: sqrt_trace(c, 8, 9),
    })
}

/// Intermediate matrices of a bound computation.
#[derive(Debug, Clone)]
pub struct BoundPipeline {
    pub j_channel: DMatrix<f64>,
    pub j_eta: DMatrix<f64>,
    pub t: DMatrix<f64>,
    pub j_state: DMatrix<f64>,
}

impl BoundPipeline {
    pub fn new(
        s: &Scenario,
        cfg: &RadioConfig,
        sched: &CodebookSchedule,
        params: &ChannelParams,
    ) -> Result<Self> {
        let j_channel = channel_fim(cfg, sched, params)?;
        let j_eta = efim_channel(&j_channel)?;
        let t = jacobian_t(s, cfg.speed_of_light)?;
        let j_state = state_fim(&j_eta, &t)?;
        Ok(Self { j_channel, j_eta, t, j_state })
    }

    pub fn report(&self, s: &Scenario, cfg: &RadioConfig, known: KnownStates) -> Result<BoundReport> {
        let rot = Rotation::from_angles(s.rot);
        let c = constrained_crb_factored(&self.j_eta, &self.t, &rot, known)?;
        extract_bounds(&c, &self.j_eta, cfg.speed_of_light)
    }
}

/// Bounds with every state unknown.
pub fn compute_bounds(
    s: &Scenario,
    cfg: &RadioConfig,
    sched: &CodebookSchedule,
    params: &ChannelParams,
) -> Result<BoundReport> {
    BoundPipeline::new(s, cfg, sched, params)?.report(s, cfg, KnownStates::default())
}
