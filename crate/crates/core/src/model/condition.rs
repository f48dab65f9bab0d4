use serde::{Deserialize, Serialize};

use crate::channel::{Environment, EnvironmentTable, LooParameters, ShadowState};
use crate::error::{config, Result};
use crate::link::{self, LinkParameters};

/// One channel condition with its resolved Loo parameters and SNR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionSpec {
    pub environment: Environment,
    pub state: ShadowState,
    pub elevation_deg: f64,
    pub alpha_db: f64,
    pub psi_db: f64,
    pub mp_db: f64,
    pub snr_db: f64,
}

impl ConditionSpec {
    /// Look up the fading parameters in `table` and the SNR from `link`
    /// (honouring its override).
    pub fn resolve(
        table: &EnvironmentTable,
        link: &LinkParameters,
        state: ShadowState,
        elevation_deg: f64,
    ) -> Result<Self> {
        let p = table.lookup(state, elevation_deg)?;
        let snr_db = link::operating_snr_db(link, elevation_deg)?;
        Ok(Self {
            environment: table.environment(),
            state,
            elevation_deg,
            alpha_db: p.alpha_db(),
            psi_db: p.psi_db(),
            mp_db: p.mp_db(),
            snr_db,
        })
    }

    pub fn loo(&self) -> Result<LooParameters> {
        LooParameters::new(self.alpha_db, self.psi_db, self.mp_db)
    }

    pub fn with_snr(mut self, snr_db: f64) -> Self {
        self.snr_db = snr_db;
        self
    }

    /// Raw (alpha, psi, mp, snr) in dB.
    pub fn vector(&self) -> [f64; 4] {
        [self.alpha_db, self.psi_db, self.mp_db, self.snr_db]
    }
}

/// Fixed affine maps taking each attention input onto [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionRanges {
    pub alpha_db: [f64; 2],
    pub psi_db: [f64; 2],
    pub mp_db: [f64; 2],
    pub snr_db: [f64; 2],
}

impl Default for ConditionRanges {
    fn default() -> Self {
        Self { alpha_db: [-20.0, 0.0], psi_db: [0.0, 6.0], mp_db: [-30.0, -5.0], snr_db: [0.0, 40.0] }
    }
}

impl ConditionRanges {
    fn all(&self) -> [(&'static str, [f64; 2]); 4] {
        [("alpha_db", self.alpha_db), ("psi_db", self.psi_db), ("mp_db", self.mp_db), ("snr_db", self.snr_db)]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in self.all() {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(config(format!("condition range {name} must satisfy min < max, got [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn normalize(&self, cond: &ConditionSpec) -> [f64; 4] {
        let v = cond.vector();
        let mut out = [0.0; 4];
        for (o, (x, (_, [lo, hi]))) in out.iter_mut().zip(v.iter().zip(self.all())) {
            *o = 2.0 * (x - lo) / (hi - lo) - 1.0;
        }
        out
    }

    pub fn denormalize(&self, u: [f64; 4]) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (o, (x, (_, [lo, hi]))) in out.iter_mut().zip(u.iter().zip(self.all())) {
            *o = lo + (x + 1.0) * 0.5 * (hi - lo);
        }
        out
    }
}
