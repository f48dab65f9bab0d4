//! Land-mobile-satellite fading under a three-state shadowing model.
//!
//! Within a state the received envelope follows the Loo distribution: a
//! log-normally distributed direct ray plus Rayleigh multipath. States switch
//! according to a first-order Markov chain, one transition per channel symbol.

use std::f64::consts::{LN_10, PI};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Error, Result};
use crate::quad;

/// Statistical description of the envelope within one shadowing state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LooParameters {
    alpha_db: f64,
    psi_db: f64,
    mp_db: f64,
}

impl LooParameters {
    /// `alpha_db`, `psi_db`: mean and standard deviation (dB) of the direct
    /// ray amplitude; `mp_db`: average multipath power (dB).
    pub fn new(alpha_db: f64, psi_db: f64, mp_db: f64) -> Result<Self> {
        if !(alpha_db.is_finite() && psi_db.is_finite() && mp_db.is_finite()) {
            return Err(domain(format!(
                "Loo parameters must be finite, got alpha={alpha_db} psi={psi_db} mp={mp_db}"
            )));
        }
        Self::degenerate(alpha_db, psi_db, mp_db)
    }

    /// Like [`LooParameters::new`] but also accepts `f64::NEG_INFINITY` for
    /// `alpha_db` (no direct ray) or `mp_db` (no multipath). For test fixtures
    /// and degenerate-case experiments only; config files never produce these.
    pub fn degenerate(alpha_db: f64, psi_db: f64, mp_db: f64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() || v == f64::NEG_INFINITY;
        if !(ok(alpha_db) && ok(mp_db) && psi_db.is_finite() && psi_db >= 0.0) {
            return Err(domain(format!(
                "invalid Loo parameters alpha={alpha_db} psi={psi_db} mp={mp_db}"
            )));
        }
        Ok(Self { alpha_db, psi_db, mp_db })
    }

    pub fn alpha_db(&self) -> f64 {
        self.alpha_db
    }

    pub fn psi_db(&self) -> f64 {
        self.psi_db
    }

    pub fn mp_db(&self) -> f64 {
        self.mp_db
    }

    /// Per-component variance of the multipath term.
    fn multipath_variance(&self) -> f64 {
        0.5 * 10f64.powf(self.mp_db / 10.0)
    }

    fn validate(&self) -> Result<()> {
        Self::degenerate(self.alpha_db, self.psi_db, self.mp_db).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShadowState {
    Los,
    Shadow,
    DeepShadow,
}

impl ShadowState {
    pub const ALL: [ShadowState; 3] = [ShadowState::Los, ShadowState::Shadow, ShadowState::DeepShadow];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ShadowState::Los => "los",
            ShadowState::Shadow => "shadow",
            ShadowState::DeepShadow => "deep_shadow",
        }
    }
}

impl std::fmt::Display for ShadowState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ShadowState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| config(format!("unknown shadowing state `{s}`")))
    }
}

/// Row-stochastic 3×3 transition matrix indexed by [`ShadowState`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarkovChain {
    transition: [[f64; 3]; 3],
}

impl MarkovChain {
    pub fn new(transition: [[f64; 3]; 3]) -> Result<Self> {
        for (i, row) in transition.iter().enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(domain(format!("transition row {i} has entries outside [0, 1]: {row:?}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(domain(format!("transition row {i} sums to {sum}, not 1")));
            }
        }
        Ok(Self { transition })
    }

    pub fn identity() -> Self {
        Self { transition: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] }
    }

    pub fn transition(&self) -> &[[f64; 3]; 3] {
        &self.transition
    }

    fn is_irreducible(&self) -> bool {
        (0..3).all(|start| {
            let mut seen = [false; 3];
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                for j in 0..3 {
                    if self.transition[i][j] > 0.0 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
            seen.iter().all(|&s| s)
        })
    }
}

/// Draw the next state from the row of `current`.
pub fn step_markov<R: Rng + ?Sized>(chain: &MarkovChain, current: ShadowState, rng: &mut R) -> ShadowState {
    let row = &chain.transition[current.index()];
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return ShadowState::ALL[j];
        }
    }
    // rounding left `acc` just below 1: fall back to the last reachable state
    let last = row.iter().rposition(|&p| p > 0.0).unwrap_or(current.index());
    ShadowState::ALL[last]
}

/// Stationary vector π with πP = π and Σπ = 1, by direct solve.
pub fn stationary_distribution(chain: &MarkovChain) -> Result<[f64; 3]> {
    if !chain.is_irreducible() {
        return Err(domain("chain is reducible; no unique stationary distribution"));
    }
    // (Pᵀ - I) π = 0 with the last equation replaced by Σπ = 1
    let p = &chain.transition;
    let mut m = [[0.0; 4]; 3];
    for i in 0..2 {
        for j in 0..3 {
            m[i][j] = p[j][i] - if i == j { 1.0 } else { 0.0 };
        }
    }
    m[2] = [1.0, 1.0, 1.0, 1.0];
    for col in 0..3 {
        let pivot = (col..3).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs())).unwrap();
        if m[pivot][col].abs() < 1e-14 {
            return Err(Error::Numeric("singular stationary system".into()));
        }
        m.swap(col, pivot);
        for row in 0..3 {
            if row != col {
                let f = m[row][col] / m[col][col];
                for k in col..4 {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
    }
    Ok([m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2]])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Environment {
    Open,
    Suburban,
    IntermediateTreeShadow,
    HeavyTreeShadow,
    Urban,
}

impl Environment {
    pub const ALL: [Environment; 5] = [
        Environment::Open,
        Environment::Suburban,
        Environment::IntermediateTreeShadow,
        Environment::HeavyTreeShadow,
        Environment::Urban,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Environment::Open => "open",
            Environment::Suburban => "suburban",
            Environment::IntermediateTreeShadow => "intermediate_tree_shadow",
            Environment::HeavyTreeShadow => "heavy_tree_shadow",
            Environment::Urban => "urban",
        }
    }
}

impl std::fmt::Display for Environment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Environment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| config(format!("unknown environment `{s}`")))
    }
}

/// Elevations the tables may be keyed at, in degrees.
pub const ELEVATION_RANGE: (f64, f64) = (40.0, 80.0);

/// Loo parameters per (state, elevation) for one environment, plus its chain.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentTable {
    environment: Environment,
    entries: Vec<(ShadowState, f64, LooParameters)>,
    chain: MarkovChain,
}

/// On-disk form of an [`EnvironmentTable`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentConfig {
    pub environment: Environment,
    pub chain: [[f64; 3]; 3],
    pub entries: Vec<EntryConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntryConfig {
    pub state: ShadowState,
    pub elevation_deg: f64,
    pub alpha_db: f64,
    pub psi_db: f64,
    pub mp_db: f64,
}

impl EnvironmentTable {
    /// Build a table; entries may contain sentinel parameters.
    pub fn new(
        environment: Environment,
        chain: MarkovChain,
        entries: Vec<(ShadowState, f64, LooParameters)>,
    ) -> Result<Self> {
        if entries.is_empty() {
            return Err(config(format!("environment `{environment}` has no entries")));
        }
        for (i, (state, elev, _)) in entries.iter().enumerate() {
            if !(ELEVATION_RANGE.0..=ELEVATION_RANGE.1).contains(elev) {
                return Err(config(format!(
                    "environment `{environment}`: elevation {elev} outside [{}, {}]",
                    ELEVATION_RANGE.0, ELEVATION_RANGE.1
                )));
            }
            if entries[..i].iter().any(|(s, e, _)| s == state && e == elev) {
                return Err(config(format!("environment `{environment}`: duplicate entry ({state}, {elev})")));
            }
        }
        Ok(Self { environment, entries, chain })
    }

    pub fn from_config(cfg: &EnvironmentConfig) -> Result<Self> {
        let chain = MarkovChain::new(cfg.chain).map_err(|e| config(format!("environment `{}`: {e}", cfg.environment)))?;
        let entries = cfg
            .entries
            .iter()
            .map(|e| {
                LooParameters::new(e.alpha_db, e.psi_db, e.mp_db)
                    .map(|p| (e.state, e.elevation_deg, p))
                    .map_err(|err| config(format!("environment `{}`: {err}", cfg.environment)))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(cfg.environment, chain, entries)
    }

    pub fn to_config(&self) -> EnvironmentConfig {
        EnvironmentConfig {
            environment: self.environment,
            chain: self.chain.transition,
            entries: self
                .entries
                .iter()
                .map(|&(state, elevation_deg, p)| EntryConfig {
                    state,
                    elevation_deg,
                    alpha_db: p.alpha_db,
                    psi_db: p.psi_db,
                    mp_db: p.mp_db,
                })
                .collect(),
        }
    }

    pub fn environment(&self) -> Environment {
        self.environment
    }

    pub fn chain(&self) -> &MarkovChain {
        &self.chain
    }

    /// Configured elevation keys for `state`, ascending.
    pub fn elevations(&self, state: ShadowState) -> Vec<f64> {
        let mut v: Vec<f64> = self.entries.iter().filter(|e| e.0 == state).map(|e| e.1).collect();
        v.sort_by(f64::total_cmp);
        v
    }

    /// Parameters at the configured elevation nearest to `elevation_deg`
    /// (ties resolve to the lower key). The query must lie within the span of
    /// configured keys for that state.
    pub fn lookup(&self, state: ShadowState, elevation_deg: f64) -> Result<LooParameters> {
        let keys = self.elevations(state);
        let (Some(&lo), Some(&hi)) = (keys.first(), keys.last()) else {
            return Err(config(format!("environment `{}` has no entries for state {state}", self.environment)));
        };
        if !(elevation_deg >= lo - 1e-9 && elevation_deg <= hi + 1e-9) {
            return Err(config(format!(
                "environment `{}`, state {state}: elevation {elevation_deg} outside configured span [{lo}, {hi}]",
                self.environment
            )));
        }
        self.entries
            .iter()
            .filter(|e| e.0 == state)
            .min_by(|a, b| (a.1 - elevation_deg).abs().total_cmp(&(b.1 - elevation_deg).abs()).then(a.1.total_cmp(&b.1)))
            .map(|e| e.2)
            .ok_or_else(|| config("unreachable: empty state entries"))
    }
}

/// Complex channel gains with the state active for each sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSeries {
    pub samples: Vec<Complex64>,
    pub states: Vec<ShadowState>,
}

impl GainSeries {
    pub fn constant(gain: Complex64, state: ShadowState, count: usize) -> Self {
        Self { samples: vec![gain; count], states: vec![state; count] }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[inline]
fn draw_loo<R: Rng + ?Sized>(p: &LooParameters, mp_sigma: f64, rng: &mut R) -> Complex64 {
    let g: f64 = rng.sample(StandardNormal);
    let amplitude_db = p.alpha_db + p.psi_db * g;
    let amplitude = if amplitude_db == f64::NEG_INFINITY { 0.0 } else { 10f64.powf(amplitude_db / 20.0) };
    let theta = rng.random::<f64>() * 2.0 * PI;
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::from_polar(amplitude, theta) + Complex64::new(mp_sigma * re, mp_sigma * im)
}

/// Draw `count` Loo-distributed complex gains.
pub fn sample_loo<R: Rng + ?Sized>(params: &LooParameters, count: usize, rng: &mut R) -> Result<Vec<Complex64>> {
    params.validate()?;
    if count == 0 {
        return Err(domain("sample count must be at least 1"));
    }
    let sigma = params.multipath_variance().sqrt();
    Ok((0..count).map(|_| draw_loo(params, sigma, rng)).collect())
}

/// How states evolve over a generated series.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GainMode {
    Fixed(ShadowState),
    /// One Markov step before each sample, starting from the given state.
    Markov(ShadowState),
}

pub fn generate_gain_series<R: Rng + ?Sized>(
    table: &EnvironmentTable,
    elevation_deg: f64,
    mode: GainMode,
    count: usize,
    rng: &mut R,
) -> Result<GainSeries> {
    if count == 0 {
        return Err(domain("sample count must be at least 1"));
    }
    match mode {
        GainMode::Fixed(state) => {
            let params = table.lookup(state, elevation_deg)?;
            Ok(GainSeries { samples: sample_loo(&params, count, rng)?, states: vec![state; count] })
        }
        GainMode::Markov(initial) => {
            let mut per_state = [None; 3];
            for state in ShadowState::ALL {
                if let Ok(p) = table.lookup(state, elevation_deg) {
                    per_state[state.index()] = Some((p, p.multipath_variance().sqrt()));
                }
            }
            let mut state = initial;
            let mut samples = Vec::with_capacity(count);
            let mut states = Vec::with_capacity(count);
            for _ in 0..count {
                state = step_markov(&table.chain, state, rng);
                let (p, sigma) = per_state[state.index()].ok_or_else(|| {
                    config(format!("environment `{}` has no parameters for {state} at {elevation_deg}°", table.environment))
                })?;
                samples.push(draw_loo(&p, sigma, rng));
                states.push(state);
            }
            Ok(GainSeries { samples, states })
        }
    }
}

/// Exponentially scaled modified Bessel function `I0(x)·e^{-x}` for `x ≥ 0`.
pub(crate) fn bessel_i0e(x: f64) -> f64 {
    if x < 15.0 {
        let q = 0.25 * x * x;
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..200 {
            term *= q / (k * k) as f64;
            sum += term;
            if term < 1e-17 * sum {
                break;
            }
        }
        sum * (-x).exp()
    } else {
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..30 {
            let next = term * ((2 * k - 1) * (2 * k - 1)) as f64 / (k as f64 * 8.0 * x);
            if next > term {
                break;
            }
            term = next;
            sum += term;
            if term < 1e-17 * sum {
                break;
            }
        }
        sum / (2.0 * PI * x).sqrt()
    }
}

/// Rician envelope density with direct amplitude `a` and per-component
/// multipath variance `var`.
fn rice_pdf(r: f64, a: f64, var: f64) -> f64 {
    let z = r * a / var;
    (r / var) * (-(r - a) * (r - a) / (2.0 * var)).exp() * bessel_i0e(z)
}

/// Loo envelope density at `r`, by quadrature over the log-normal direct-ray
/// amplitude of the conditional Rician density.
pub fn loo_pdf(params: &LooParameters, r: f64) -> Result<f64> {
    params.validate()?;
    if r.is_nan() || r < 0.0 {
        return Err(domain(format!("envelope must be non-negative, got {r}")));
    }
    if r == 0.0 {
        return Ok(0.0);
    }
    let var = params.multipath_variance();
    let alpha = params.alpha_db;
    let psi = params.psi_db;

    if params.mp_db == f64::NEG_INFINITY {
        if alpha == f64::NEG_INFINITY {
            return Err(domain("no direct ray and no multipath: envelope is identically zero"));
        }
        if psi == 0.0 {
            return Err(domain("deterministic envelope has no density"));
        }
        let mu = alpha * LN_10 / 20.0;
        let s = psi * LN_10 / 20.0;
        let z = (r.ln() - mu) / s;
        return Ok((-0.5 * z * z).exp() / (r * s * (2.0 * PI).sqrt()));
    }
    if alpha == f64::NEG_INFINITY {
        return Ok(rice_pdf(r, 0.0, var));
    }
    if psi == 0.0 {
        return Ok(rice_pdf(r, 10f64.powf(alpha / 20.0), var));
    }
    let integrand = |u: f64| {
        let a = 10f64.powf((alpha + psi * u) / 20.0);
        (-0.5 * u * u).exp() / (2.0 * PI).sqrt() * rice_pdf(r, a, var)
    };
    Ok(quad::integrate(integrand, -10.0, 10.0, 1e-12, 1e-10)?.value)
}
