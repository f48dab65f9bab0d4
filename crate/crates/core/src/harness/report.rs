use std::fmt::Write as _;
use std::path::Path;

use crate::error::{domain, Result};
use crate::model::{ConditionSpec, Network};

pub const CSV_HEADER: &str =
    "model,trained_env,trained_state,trained_elev,eval_env,eval_state,eval_elev,snr_db,ratio,mean_psnr_db,n_trials";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialRecord {
    pub image: usize,
    pub trial: usize,
    pub psnr_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub trained: ConditionSpec,
    pub eval: ConditionSpec,
    pub ratio: f64,
    pub mean_psnr_db: f64,
    pub n_trials: usize,
}

/// Report rows plus the per-trial PSNR values each row averages.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    /// `(row index, trial)` in row order.
    pub trials: Vec<(usize, TrialRecord)>,
}

impl EvalReport {
    pub fn push(&mut self, row: ReportRow, trials: Vec<TrialRecord>) {
        let idx = self.rows.len();
        self.rows.push(row);
        self.trials.extend(trials.into_iter().map(|t| (idx, t)));
    }

    pub fn append(&mut self, other: EvalReport) {
        let offset = self.rows.len();
        self.rows.extend(other.rows);
        self.trials.extend(other.trials.into_iter().map(|(i, t)| (i + offset, t)));
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.model,
                r.trained.environment,
                r.trained.state,
                r.trained.elevation_deg,
                r.eval.environment,
                r.eval.state,
                r.eval.elevation_deg,
                r.eval.snr_db,
                r.ratio,
                r.mean_psnr_db,
                r.n_trials
            );
        }
        out
    }

    /// Per-trial audit log: `row,model,image,trial,psnr_db`.
    pub fn trials_csv(&self) -> String {
        let mut out = String::from("row,model,image,trial,psnr_db\n");
        for (i, t) in &self.trials {
            let _ = writeln!(out, "{i},{},{},{},{}", self.rows[*i].model, t.image, t.trial, t.psnr_db);
        }
        out
    }

    /// Recompute every row mean from the trial log and compare bit-for-bit.
    pub fn audit(&self) -> Result<()> {
        for (idx, row) in self.rows.iter().enumerate() {
            let values: Vec<f64> = self.trials.iter().filter(|(i, _)| *i == idx).map(|(_, t)| t.psnr_db).collect();
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            if values.len() != row.n_trials || mean.to_bits() != row.mean_psnr_db.to_bits() {
                return Err(domain(format!(
                    "row {idx} ({}) reports {} over {} trials but the log gives {mean} over {}",
                    row.model,
                    row.mean_psnr_db,
                    row.n_trials,
                    values.len()
                )));
            }
        }
        Ok(())
    }

    pub fn write(&self, csv_path: impl AsRef<Path>, trials_path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(csv_path, self.to_csv())?;
        std::fs::write(trials_path, self.trials_csv())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StorageReport {
    pub adaptable_params: usize,
    pub attention_params: usize,
    pub attention_share: f64,
    pub adaptable_bytes: usize,
    pub per_condition_params: Vec<usize>,
    pub per_condition_bytes: Vec<usize>,
}

impl StorageReport {
    pub fn per_condition_total_params(&self) -> usize {
        self.per_condition_params.iter().sum()
    }

    pub fn per_condition_total_bytes(&self) -> usize {
        self.per_condition_bytes.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,params,attention_params,checkpoint_bytes\n");
        let _ = writeln!(out, "adaptable,{},{},{}", self.adaptable_params, self.attention_params, self.adaptable_bytes);
        for (i, (p, b)) in self.per_condition_params.iter().zip(&self.per_condition_bytes).enumerate() {
            let _ = writeln!(out, "per_condition_{i},{p},0,{b}");
        }
        let _ = writeln!(out, "per_condition_total,{},0,{}", self.per_condition_total_params(), self.per_condition_total_bytes());
        out
    }
}

pub fn compare_storage(adaptable: &Network, per_condition: &[Network]) -> StorageReport {
    let adaptable_params = adaptable.num_params();
    let attention_params = adaptable.attention_params();
    StorageReport {
        adaptable_params,
        attention_params,
        attention_share: attention_params as f64 / adaptable_params as f64,
        adaptable_bytes: adaptable.checkpoint_bytes(),
        per_condition_params: per_condition.iter().map(Network::num_params).collect(),
        per_condition_bytes: per_condition.iter().map(Network::checkpoint_bytes).collect(),
    }
}
