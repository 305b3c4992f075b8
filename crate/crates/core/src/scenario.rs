//! Ground-truth world description, radio configuration and the JSON
//! scenario file.
//!
//! Everything inside [`Scenario`] and [`RadioConfig`] is SI (meters,
//! seconds, radians, watts). The file format keeps human units (degrees,
//! dBm, dB) and is converted at load time.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Position, RotationAngles, MIN_SEPARATION};
use crate::signal::GainModel;

/// Speed of light used by the default configuration, in m/s.
pub const SPEED_OF_LIGHT: f64 = 3.0e8;

/// Placement box for scatterers near the BS-UE link: x, y, z ranges in meters.
pub const SCATTERER_BOX_BU: [(f64, f64); 3] = [(-8.0, 8.0), (0.0, 3.0), (-5.0, 1.0)];
/// Placement box for scatterers near the HRIS-UE link.
pub const SCATTERER_BOX_BRU: [(f64, f64); 3] = [(2.5, 4.5), (4.0, 11.0), (-5.0, 1.0)];

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(w: f64) -> f64 {
    10.0 * w.log10() + 30.0
}

pub fn db_to_ratio(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn ratio_to_db(r: f64) -> f64 {
    10.0 * r.log10()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub p_b: Position,
    pub p_u: Position,
    pub p_r: Position,
    pub rot: RotationAngles,
    /// HRIS clock bias, seconds.
    pub b_r: f64,
    /// UE clock bias, seconds.
    pub b_u: f64,
    pub scatterers_bu: Vec<Position>,
    pub scatterers_bru: Vec<Position>,
    /// Radar cross section of every scatterer, m².
    pub rcs: f64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let pts = [("p_b", self.p_b), ("p_u", self.p_u), ("p_r", self.p_r)];
        for (name, p) in &pts {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} is not finite")));
            }
        }
        for i in 0..3 {
            for j in (i + 1)..3 {
                let sep = (pts[i].1 - pts[j].1).norm();
                if sep < MIN_SEPARATION {
                    return Err(Error::DegenerateGeometry(format!(
                        "{} and {} coincide",
                        pts[i].0, pts[j].0
                    )));
                }
            }
        }
        if !self.rot.is_finite() || !self.b_r.is_finite() || !self.b_u.is_finite() {
            return Err(Error::InvalidConfig("orientation or clock bias not finite".into()));
        }
        if !(self.rcs >= 0.0) {
            return Err(Error::InvalidConfig("rcs must be non-negative".into()));
        }
        Ok(())
    }

    pub fn d_br(&self) -> f64 {
        (self.p_r - self.p_b).norm()
    }

    pub fn d_bu(&self) -> f64 {
        (self.p_u - self.p_b).norm()
    }

    pub fn d_ru(&self) -> f64 {
        (self.p_u - self.p_r).norm()
    }
}

/// Waveform, array and power parameters (SI units).
#[derive(Debug, Clone, PartialEq)]
pub struct RadioConfig {
    pub wavelength: f64,
    pub element_spacing: f64,
    /// Number of subcarriers `K`.
    pub subcarriers: usize,
    /// Number of OFDM transmissions `T` (even).
    pub transmissions: usize,
    pub subcarrier_spacing: f64,
    /// BS transmit power, W.
    pub tx_power: f64,
    /// Fraction of the impinging power routed to the HRIS sensing chain.
    pub rho: f64,
    /// Noise power spectral density, W/Hz.
    pub noise_psd: f64,
    /// Receiver noise figure as a power ratio.
    pub noise_figure: f64,
    /// Zero-padded FFT length used for delay initialization.
    pub fft_size: usize,
    pub bs_rows: usize,
    pub bs_cols: usize,
    pub ris_rows: usize,
    pub ris_cols: usize,
    pub speed_of_light: f64,
}

impl RadioConfig {
    pub fn bs_elements(&self) -> usize {
        self.bs_rows * self.bs_cols
    }

    pub fn ris_elements(&self) -> usize {
        self.ris_rows * self.ris_cols
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.transmissions % 2 != 0 {
            return Err(Error::OddT(self.transmissions));
        }
        if [
            self.subcarriers,
            self.transmissions,
            self.fft_size,
            self.bs_rows,
            self.bs_cols,
            self.ris_rows,
            self.ris_cols,
        ]
        .contains(&0)
        {
            return bad("all counts must be at least 1");
        }
        if !(self.wavelength > 0.0) || !(self.element_spacing > 0.0) {
            return bad("wavelength and element spacing must be positive");
        }
        if self.element_spacing > self.wavelength / 2.0 * (1.0 + 1e-12) {
            return bad("element spacing must not exceed half a wavelength");
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad("rho must lie strictly between 0 and 1");
        }
        if !(self.subcarrier_spacing > 0.0) || !(self.speed_of_light > 0.0) {
            return bad("subcarrier spacing and speed of light must be positive");
        }
        if !(self.tx_power > 0.0) || !(self.noise_psd >= 0.0) || !(self.noise_figure >= 0.0) {
            return bad("powers must be positive");
        }
        Ok(())
    }
}

/// How three listed orientation numbers map onto `(α, β, γ)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AngleListing {
    /// Numbers are listed as `[α, γ, β]`, the order printed in the
    /// simulation parameter table.
    #[default]
    AlphaGammaBeta,
    /// Numbers are listed in product order `[α, β, γ]`.
    AlphaBetaGamma,
}

impl AngleListing {
    pub fn angles_from_degrees(self, listed: [f64; 3]) -> RotationAngles {
        match self {
            AngleListing::AlphaGammaBeta => {
                RotationAngles::from_degrees(listed[0], listed[2], listed[1])
            }
            AngleListing::AlphaBetaGamma => {
                RotationAngles::from_degrees(listed[0], listed[1], listed[2])
            }
        }
    }
}

/// Reference scenario: BS at the origin, UE at `[5, 2, 1]`, HRIS at
/// `[2, 12, 3]`, orientation `[20°, 10°, 15°]` read as `[α, γ, β]`.
pub fn default_scenario() -> (Scenario, RadioConfig) {
    default_scenario_with(AngleListing::default())
}

pub fn default_scenario_with(listing: AngleListing) -> (Scenario, RadioConfig) {
    let scenario = Scenario {
        p_b: Position::new(0.0, 0.0, 0.0),
        p_u: Position::new(5.0, 2.0, 1.0),
        p_r: Position::new(2.0, 12.0, 3.0),
        rot: listing.angles_from_degrees([20.0, 10.0, 15.0]),
        b_r: 10e-9,
        b_u: 20e-9,
        scatterers_bu: Vec::new(),
        scatterers_bru: Vec::new(),
        rcs: 1.0,
    };
    let cfg = RadioConfig {
        wavelength: 0.01,
        element_spacing: 0.0025,
        subcarriers: 128,
        transmissions: 100,
        subcarrier_spacing: 120e3,
        tx_power: dbm_to_watts(30.0),
        rho: 0.5,
        noise_psd: dbm_to_watts(-174.0),
        noise_figure: db_to_ratio(5.0),
        fft_size: 4048,
        bs_rows: 4,
        bs_cols: 4,
        ris_rows: 16,
        ris_cols: 16,
        speed_of_light: SPEED_OF_LIGHT,
    };
    (scenario, cfg)
}

/// Draws `n_bu` scatterers in the BS-UE box and `n_bru` in the HRIS-UE box.
pub fn place_scatterers(n_bu: usize, n_bru: usize, seed: u64) -> (Vec<Position>, Vec<Position>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |bounds: &[(f64, f64); 3], n: usize| -> Vec<Position> {
        (0..n)
            .map(|_| {
                Position::new(
                    rng.random_range(bounds[0].0..=bounds[0].1),
                    rng.random_range(bounds[1].0..=bounds[1].1),
                    rng.random_range(bounds[2].0..=bounds[2].1),
                )
            })
            .collect()
    };
    let bu = draw(&SCATTERER_BOX_BU, n_bu);
    let bru = draw(&SCATTERER_BOX_BRU, n_bru);
    (bu, bru)
}

/// Per-subcarrier, per-snapshot complex noise power `N₀ · Δf · n_f`, W.
pub fn noise_variance(cfg: &RadioConfig) -> f64 {
    cfg.noise_psd * cfg.subcarrier_spacing * cfg.noise_figure
}

// ---------------------------------------------------------------------------
// File format

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrientationDeg {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub p_b: [f64; 3],
    pub p_u: [f64; 3],
    pub p_r: [f64; 3],
    pub orientation_deg: OrientationDeg,
    pub b_r: f64,
    pub b_u: f64,
    #[serde(default)]
    pub scatterers_bu: Vec<[f64; 3]>,
    #[serde(default)]
    pub scatterers_bru: Vec<[f64; 3]>,
    pub rcs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadioSection {
    pub wavelength: f64,
    pub element_spacing: f64,
    pub subcarriers: usize,
    pub transmissions: usize,
    pub subcarrier_spacing: f64,
    pub tx_power_dbm: f64,
    pub rho: f64,
    pub noise_psd_dbm_hz: f64,
    pub noise_figure_db: f64,
    pub fft_size: usize,
    pub bs_rows: usize,
    pub bs_cols: usize,
    pub ris_rows: usize,
    pub ris_cols: usize,
    pub speed_of_light: f64,
}

/// On-disk scenario description (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub scenario: ScenarioSection,
    pub radio: RadioSection,
    #[serde(default)]
    pub gain_model: GainModel,
}

fn arr(p: &Position) -> [f64; 3] {
    [p.x, p.y, p.z]
}

impl ScenarioFile {
    pub fn from_parts(s: &Scenario, cfg: &RadioConfig, gain_model: &GainModel) -> Self {
        ScenarioFile {
            scenario: ScenarioSection {
                p_b: arr(&s.p_b),
                p_u: arr(&s.p_u),
                p_r: arr(&s.p_r),
                orientation_deg: OrientationDeg {
                    alpha: s.rot.alpha.to_degrees(),
                    beta: s.rot.beta.to_degrees(),
                    gamma: s.rot.gamma.to_degrees(),
                },
                b_r: s.b_r,
                b_u: s.b_u,
                scatterers_bu: s.scatterers_bu.iter().map(arr).collect(),
                scatterers_bru: s.scatterers_bru.iter().map(arr).collect(),
                rcs: s.rcs,
            },
            radio: RadioSection {
                wavelength: cfg.wavelength,
                element_spacing: cfg.element_spacing,
                subcarriers: cfg.subcarriers,
                transmissions: cfg.transmissions,
                subcarrier_spacing: cfg.subcarrier_spacing,
                tx_power_dbm: watts_to_dbm(cfg.tx_power),
                rho: cfg.rho,
                noise_psd_dbm_hz: watts_to_dbm(cfg.noise_psd),
                noise_figure_db: ratio_to_db(cfg.noise_figure),
                fft_size: cfg.fft_size,
                bs_rows: cfg.bs_rows,
                bs_cols: cfg.bs_cols,
                ris_rows: cfg.ris_rows,
                ris_cols: cfg.ris_cols,
                speed_of_light: cfg.speed_of_light,
            },
            gain_model: gain_model.clone(),
        }
    }

    /// The reference scenario with round human-unit values.
    pub fn default_file() -> Self {
        ScenarioFile {
            scenario: ScenarioSection {
                p_b: [0.0, 0.0, 0.0],
                p_u: [5.0, 2.0, 1.0],
                p_r: [2.0, 12.0, 3.0],
                orientation_deg: OrientationDeg { alpha: 20.0, beta: 15.0, gamma: 10.0 },
                b_r: 10e-9,
                b_u: 20e-9,
                scatterers_bu: Vec::new(),
                scatterers_bru: Vec::new(),
                rcs: 1.0,
            },
            radio: RadioSection {
                wavelength: 0.01,
                element_spacing: 0.0025,
                subcarriers: 128,
                transmissions: 100,
                subcarrier_spacing: 120e3,
                tx_power_dbm: 30.0,
                rho: 0.5,
                noise_psd_dbm_hz: -174.0,
                noise_figure_db: 5.0,
                fft_size: 4048,
                bs_rows: 4,
                bs_cols: 4,
                ris_rows: 16,
                ris_cols: 16,
                speed_of_light: SPEED_OF_LIGHT,
            },
            gain_model: GainModel::default(),
        }
    }

    /// Converts to SI and validates.
    pub fn to_parts(&self) -> Result<(Scenario, RadioConfig, GainModel)> {
        let s = &self.scenario;
        let p = |a: &[f64; 3]| Position::new(a[0], a[1], a[2]);
        let scenario = Scenario {
            p_b: p(&s.p_b),
            p_u: p(&s.p_u),
            p_r: p(&s.p_r),
            rot: RotationAngles::from_degrees(
                s.orientation_deg.alpha,
                s.orientation_deg.beta,
                s.orientation_deg.gamma,
            ),
            b_r: s.b_r,
            b_u: s.b_u,
            scatterers_bu: s.scatterers_bu.iter().map(p).collect(),
            scatterers_bru: s.scatterers_bru.iter().map(p).collect(),
            rcs: s.rcs,
        };
        let r = &self.radio;
        let cfg = RadioConfig {
            wavelength: r.wavelength,
            element_spacing: r.element_spacing,
            subcarriers: r.subcarriers,
            transmissions: r.transmissions,
            subcarrier_spacing: r.subcarrier_spacing,
            tx_power: dbm_to_watts(r.tx_power_dbm),
            rho: r.rho,
            noise_psd: dbm_to_watts(r.noise_psd_dbm_hz),
            noise_figure: db_to_ratio(r.noise_figure_db),
            fft_size: r.fft_size,
            bs_rows: r.bs_rows,
            bs_cols: r.bs_cols,
            ris_rows: r.ris_rows,
            ris_cols: r.ris_cols,
            speed_of_light: r.speed_of_light,
        };
        scenario.validate()?;
        cfg.validate()?;
        self.gain_model.validate()?;
        Ok((scenario, cfg, self.gain_model.clone()))
    }

    /// Keys accepted by [`ScenarioFile::apply_override`]. Positions take
    /// `x,y,z`; angles are in degrees and powers in dBm or dB, as in the file.
    pub const OVERRIDE_KEYS: [&'static str; 24] = [
        "p_b",
        "p_u",
        "p_r",
        "alpha_deg",
        "beta_deg",
        "gamma_deg",
        "b_r",
        "b_u",
        "rcs",
        "wavelength",
        "element_spacing",
        "subcarriers",
        "transmissions",
        "subcarrier_spacing",
        "tx_power_dbm",
        "rho",
        "noise_psd_dbm_hz",
        "noise_figure_db",
        "fft_size",
        "bs_rows",
        "bs_cols",
        "ris_rows",
        "ris_cols",
        "speed_of_light",
    ];

    /// Sets one field from a `key=value` pair given on the command line.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::InvalidConfig(format!("override {key}={value}: {what}"));
        let float = || value.trim().parse::<f64>().map_err(|_| bad("expected a number"));
        let count = || value.trim().parse::<usize>().map_err(|_| bad("expected a non-negative integer"));
        let point = || -> Result<[f64; 3]> {
            let parts: Vec<&str> = value.split(',').collect();
            if parts.len() != 3 {
                return Err(bad("expected x,y,z"));
            }
            let mut out = [0.0; 3];
            for (o, p) in out.iter_mut().zip(parts) {
                *o = p.trim().parse().map_err(|_| bad("expected x,y,z"))?;
            }
            Ok(out)
        };
        let (sc, r) = (&mut self.scenario, &mut self.radio);
        match key {
            "p_b" => sc.p_b = point()?,
            "p_u" => sc.p_u = point()?,
            "p_r" => sc.p_r = point()?,
            "alpha_deg" => sc.orientation_deg.alpha = float()?,
            "beta_deg" => sc.orientation_deg.beta = float()?,
            "gamma_deg" => sc.orientation_deg.gamma = float()?,
            "b_r" => sc.b_r = float()?,
            "b_u" => sc.b_u = float()?,
            "rcs" => sc.rcs = float()?,
            "wavelength" => r.wavelength = float()?,
            "element_spacing" => r.element_spacing = float()?,
            "subcarriers" => r.subcarriers = count()?,
            "transmissions" => r.transmissions = count()?,
            "subcarrier_spacing" => r.subcarrier_spacing = float()?,
            "tx_power_dbm" => r.tx_power_dbm = float()?,
            "rho" => r.rho = float()?,
            "noise_psd_dbm_hz" => r.noise_psd_dbm_hz = float()?,
            "noise_figure_db" => r.noise_figure_db = float()?,
            "fft_size" => r.fft_size = count()?,
            "bs_rows" => r.bs_rows = count()?,
            "bs_cols" => r.bs_cols = count()?,
            "ris_rows" => r.ris_rows = count()?,
            "ris_cols" => r.ris_cols = count()?,
            "speed_of_light" => r.speed_of_light = float()?,
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "unknown override key '{key}'; valid keys: {}",
                    Self::OVERRIDE_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scenario file serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}
