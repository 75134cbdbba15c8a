//! Context-extension transforms of rotary frequencies and phase analysis.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::PositionalScheme;
use crate::error::{invalid, Result};

/// Frequency-scaling rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScalingKind {
    Pi,
    Ntk,
    /// Ramp thresholds over `r(m) = C_train·ω_m / 2π`.
    Yarn { p: f64, q: f64 },
}

impl ScalingKind {
    pub fn yarn() -> Self {
        ScalingKind::Yarn { p: 1.0, q: 32.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingMethod {
    #[serde(flatten)]
    pub kind: ScalingKind,
    /// Recompute `s` from the evaluation length instead of using a fixed factor.
    #[serde(default)]
    pub dynamic: bool,
}

impl ScalingMethod {
    pub fn pi() -> Self {
        Self { kind: ScalingKind::Pi, dynamic: false }
    }

    pub fn ntk() -> Self {
        Self { kind: ScalingKind::Ntk, dynamic: false }
    }

    pub fn yarn() -> Self {
        Self { kind: ScalingKind::yarn(), dynamic: false }
    }

    pub fn dynamic(mut self) -> Self {
        self.dynamic = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let ScalingKind::Yarn { p, q } = self.kind {
            if !(p > 0.0 && p < q) {
                return Err(invalid(format!("YaRN needs 0 < p < q, got p={p}, q={q}")));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            ScalingKind::Pi => "pi",
            ScalingKind::Ntk => "ntk",
            ScalingKind::Yarn { .. } => "yarn",
        }
    }

    /// Extension factor to use at `length`.
    pub fn factor_at(&self, length: usize, c_train: usize, fixed: f64) -> Result<f64> {
        if self.dynamic {
            dynamic_factor(length, c_train)
        } else {
            Ok(fixed)
        }
    }
}

impl fmt::Display for ScalingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.dynamic {
            write!(f, "dynamic-")?;
        }
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ScalingMethod {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        let (dynamic, base) = match s.strip_prefix("dynamic-") {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        let kind = match base {
            "pi" => ScalingKind::Pi,
            "ntk" => ScalingKind::Ntk,
            "yarn" => ScalingKind::yarn(),
            other => return Err(invalid(format!("unknown scaling method {other:?}"))),
        };
        Ok(Self { kind, dynamic })
    }
}

fn check_factor(s: f64) -> Result<()> {
    if !(s >= 1.0 && s.is_finite()) {
        return Err(invalid(format!("extension factor must be at least 1, got {s}")));
    }
    Ok(())
}

/// YaRN interpolation weight `κ` for ramp variable `r`.
fn yarn_ramp(r: f64, p: f64, q: f64) -> f64 {
    if r < p {
        0.0
    } else if r > q {
        1.0
    } else {
        (r - p) / (q - p)
    }
}

/// Scaling factor `γ_m` for frequency index `m` (1-based) with frequency `omega`.
pub fn gamma(
    method: &ScalingMethod,
    m: usize,
    head_dim: usize,
    omega: f64,
    s: f64,
    c_train: usize,
) -> Result<f64> {
    check_factor(s)?;
    method.validate()?;
    if m == 0 || 2 * m > head_dim {
        return Err(invalid(format!("frequency index {m} outside 1..={}", head_dim / 2)));
    }
    Ok(match method.kind {
        ScalingKind::Pi => 1.0 / s,
        ScalingKind::Ntk => {
            if head_dim <= 2 {
                return Err(invalid("NTK scaling needs head_dim > 2"));
            }
            (1.0 / s).powf(2.0 * m as f64 / (head_dim - 2) as f64)
        }
        ScalingKind::Yarn { p, q } => {
            let r = c_train as f64 * omega / (2.0 * PI);
            let kappa = yarn_ramp(r, p, q);
            (1.0 - kappa) / s + kappa
        }
    })
}

/// All factors for a frequency vector (`head_dim = 2·freqs.len()`).
pub fn gammas(method: &ScalingMethod, freqs: &[f64], s: f64, c_train: usize) -> Result<Vec<f64>> {
    let head_dim = 2 * freqs.len();
    freqs
        .iter()
        .enumerate()
        .map(|(i, &w)| gamma(method, i + 1, head_dim, w, s, c_train))
        .collect()
}

/// `γ_m·ω_m` for every frequency.
pub fn apply_scaling(freqs: &[f64], method: &ScalingMethod, s: f64, c_train: usize) -> Result<Vec<f64>> {
    Ok(gammas(method, freqs, s, c_train)?
        .into_iter()
        .zip(freqs)
        .map(|(g, w)| g * w)
        .collect())
}

/// A new rotary scheme with `method` applied at factor `s`; `scheme` is left untouched.
pub fn scaled_scheme(
    scheme: &PositionalScheme,
    method: &ScalingMethod,
    s: f64,
    c_train: usize,
) -> Result<PositionalScheme> {
    let params = scheme
        .rope_params()
        .ok_or_else(|| invalid("frequency scaling applies only to rotary schemes"))?;
    let g = gammas(method, &params.freqs, s, c_train)?;
    let label = match method.kind {
        ScalingKind::Yarn { p, q } => format!("{method}(s={s},p={p},q={q},ramp=ctrain*omega/2pi)"),
        _ => format!("{method}(s={s})"),
    };
    scheme.clone().with_gamma(g, label)
}

/// `max(1, length / C_train)`.
pub fn dynamic_factor(length: usize, c_train: usize) -> Result<f64> {
    if length == 0 || c_train == 0 {
        return Err(invalid("lengths must be positive"));
    }
    Ok((length as f64 / c_train as f64).max(1.0))
}

/// Logit temperature `β = 1 + a·ln s`.
pub fn temperature(s: f64, coefficient: f64) -> Result<f64> {
    check_factor(s)?;
    Ok(1.0 + coefficient * s.ln())
}

/// One frequency of a [`PhaseReport`].
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseRow {
    /// 1-based frequency index.
    pub m: usize,
    pub omega: f64,
    pub phi_train: f64,
    pub phi_test: f64,
    /// The phase never completes a cycle within the training context.
    pub subcycle: bool,
    /// `(method, γ_m)` pairs.
    pub gammas: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseReport {
    pub c_train: usize,
    pub c_test: usize,
    pub rows: Vec<PhaseRow>,
}

impl PhaseReport {
    pub fn subcycle_count(&self) -> usize {
        self.rows.iter().filter(|r| r.subcycle).count()
    }

    /// Sub-cycle frequencies whose scaled test phase stays inside the training range
    /// but whose factor exceeds `C_train / C_test`. Always empty by construction of the
    /// inequality; kept as an executable check.
    pub fn inevitability_violations(&self) -> Vec<(usize, String)> {
        let bound = self.c_train as f64 / self.c_test as f64;
        let mut out = Vec::new();
        for row in self.rows.iter().filter(|r| r.subcycle) {
            for (name, g) in &row.gammas {
                let in_range = g * row.phi_test <= row.phi_train * (1.0 + 1e-12);
                if in_range && *g > bound * (1.0 + 1e-9) {
                    out.push((row.m, name.clone()));
                }
            }
        }
        out
    }

    /// Per-method factor of the lowest frequency.
    pub fn lowest_frequency_gammas(&self) -> Vec<(String, f64)> {
        self.rows.last().map(|r| r.gammas.clone()).unwrap_or_default()
    }
}

/// Phases of every frequency at the training and test lengths, with per-method factors.
pub fn phase_report(
    freqs: &[f64],
    c_train: usize,
    c_test: usize,
    methods: &[ScalingMethod],
) -> Result<PhaseReport> {
    if c_train == 0 || c_test < c_train {
        return Err(invalid(format!("need 0 < C_train ≤ C_test, got {c_train}, {c_test}")));
    }
    let s = c_test as f64 / c_train as f64;
    let per_method = methods
        .iter()
        .map(|m| Ok((m.to_string(), gammas(m, freqs, s, c_train)?)))
        .collect::<Result<Vec<_>>>()?;
    let rows = freqs
        .iter()
        .enumerate()
        .map(|(i, &omega)| {
            let phi_train = omega * c_train as f64;
            PhaseRow {
                m: i + 1,
                omega,
                phi_train,
                phi_test: omega * c_test as f64,
                subcycle: phi_train < 2.0 * PI,
                gammas: per_method.iter().map(|(n, g)| (n.clone(), g[i])).collect(),
            }
        })
        .collect();
    Ok(PhaseReport { c_train, c_test, rows })
}

#[derive(Serialize)]
struct GammaRecord<'a> {
    method: &'a str,
    s: f64,
    m: usize,
    omega: f64,
    gamma: f64,
}

/// Write `(method, s, m, omega, gamma)` rows for every method and factor.
pub fn write_gamma_csv(
    path: &Path,
    freqs: &[f64],
    methods: &[ScalingMethod],
    factors: &[f64],
    c_train: usize,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for method in methods {
        let name = method.to_string();
        for &s in factors {
            for (i, g) in gammas(method, freqs, s, c_train)?.into_iter().enumerate() {
                w.serialize(GammaRecord { method: &name, s, m: i + 1, omega: freqs[i], gamma: g })?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct PhaseRecord {
    m: usize,
    omega: f64,
    phi_train: f64,
    phi_test: f64,
    subcycle: bool,
}

/// Write `(m, omega, phi_train, phi_test, subcycle)` rows.
pub fn write_phase_csv(path: &Path, report: &PhaseReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in &report.rows {
        w.serialize(PhaseRecord {
            m: r.m,
            omega: r.omega,
            phi_train: r.phi_train,
            phi_test: r.phi_test,
            subcycle: r.subcycle,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Coefficients reported for the from-scratch and adapted-pretrained settings.
pub const REFERENCE_TEMPERATURE_COEFFICIENTS: [f64; 2] = [0.412, 0.103];
