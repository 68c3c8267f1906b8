//! Report bundles: JSON and CSV emission and the exit-code policy.

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::conditions::{ConditionReport, RankReport, Verdict};
use crate::evaluate::{Evaluation, SlopeTable, TrajectorySummary};

pub const REPORT_SCHEMA: u32 = 1;
/// Every float in a report is rounded to this many decimals when its
/// magnitude is below [`ROUND_LIMIT`].
pub const DECIMALS: i32 = 12;
pub const ROUND_LIMIT: f64 = 1e6;

/// Condition ids located at a single time; every other id is an integral
/// or a global quantity and has no `t` column in CSV.
const POINTWISE_IDS: [&str; 3] = ["max_principle", "pointwise_second_order", "stationarity"];

#[derive(Clone, Debug, Serialize)]
pub struct Provenance {
    /// SHA-256 of the canonical JSON of the effective configuration.
    pub config_hash: String,
    pub crate_version: String,
    pub seed: u64,
    /// Set when a quantity in the report is the toolkit's own oracle.
    pub oracle: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ReportBundle {
    pub schema: u32,
    pub scenario: String,
    pub command: String,
    pub provenance: Provenance,
    pub geometry: Vec<ConditionReport>,
    pub trajectory: Option<TrajectorySummary>,
    pub conditions: Vec<ConditionReport>,
    pub slopes: Vec<SlopeTable>,
    pub rank: Option<RankReport>,
    pub notes: Vec<String>,
}

pub fn config_hash<T: Serialize>(config: &T) -> String {
    let text = serde_json::to_string(config).expect("configurations serialize");
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl ReportBundle {
    pub fn new<T: Serialize>(scenario: &str, command: &str, config: &T, seed: u64) -> Self {
        ReportBundle {
            schema: REPORT_SCHEMA,
            scenario: scenario.into(),
            command: command.into(),
            provenance: Provenance {
                config_hash: config_hash(config),
                crate_version: env!("CARGO_PKG_VERSION").into(),
                seed,
                oracle: None,
            },
            geometry: Vec::new(),
            trajectory: None,
            conditions: Vec::new(),
            slopes: Vec::new(),
            rank: None,
            notes: Vec::new(),
        }
    }

    pub fn with_evaluation(mut self, ev: Evaluation) -> Self {
        self.trajectory = Some(ev.trajectory);
        self.conditions = ev.conditions;
        self.slopes = ev.slopes;
        self.rank = ev.rank;
        self.notes = ev.notes;
        self
    }

    pub fn all_conditions(&self) -> impl Iterator<Item = &ConditionReport> {
        self.geometry.iter().chain(&self.conditions)
    }

    /// 1 if anything is violated, else 2 if anything is inconclusive, else 0.
    pub fn exit_code(&self) -> i32 {
        let mut code = 0;
        for c in self.all_conditions() {
            match c.verdict {
                Verdict::Violated => return 1,
                Verdict::Inconclusive => code = 2,
                Verdict::Holds => {}
            }
        }
        code
    }

    pub fn to_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("reports serialize");
        round_floats(&mut v);
        let mut s = serde_json::to_string_pretty(&v).expect("reports serialize");
        s.push('\n');
        s
    }

    /// Columns `condition_id,t,value,tolerance,verdict`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("condition_id,t,value,tolerance,verdict\n");
        for c in self.all_conditions() {
            let t = if POINTWISE_IDS.contains(&c.id.as_str()) {
                c.witnesses.iter().find_map(|w| w.t).map(fmt_num).unwrap_or_default()
            } else {
                String::new()
            };
            let verdict = match c.verdict {
                Verdict::Holds => "holds",
                Verdict::Violated => "violated",
                Verdict::Inconclusive => "inconclusive",
            };
            out.push_str(&format!("{},{},{},{},{}\n", c.id, t, fmt_num(c.value), fmt_num(c.tol), verdict));
        }
        out
    }

    /// One line per condition for the terminal.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for c in self.all_conditions() {
            let op = match c.bound {
                crate::conditions::Bound::Max => "<=",
                crate::conditions::Bound::Min => ">=",
            };
            let verdict = match c.verdict {
                Verdict::Holds => "HOLDS",
                Verdict::Violated => "VIOLATED",
                Verdict::Inconclusive => "INCONCLUSIVE",
            };
            out.push_str(&format!("{verdict:<12} {:<32} {:>13} {op} {}\n", c.id, fmt_num(c.value), fmt_num(c.tol)));
        }
        for n in &self.notes {
            out.push_str(&format!("note: {n}\n"));
        }
        out
    }
}

pub fn round(x: f64) -> f64 {
    if x.is_finite() && x.abs() < ROUND_LIMIT {
        let s = 10f64.powi(DECIMALS);
        let r = (x * s).round() / s;
        if r == 0.0 {
            0.0
        } else {
            r
        }
    } else {
        x
    }
}

fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    let r = round(x);
    let v = serde_json::Number::from_f64(r).map(|n| n.to_string());
    v.unwrap_or_else(|| if r > 0.0 { "inf".into() } else { "-inf".into() })
}

fn round_floats(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(r) = n.as_f64().map(round).and_then(serde_json::Number::from_f64) {
                *n = r;
            }
        }
        Value::Array(a) => a.iter_mut().for_each(round_floats),
        Value::Object(o) => o.values_mut().for_each(round_floats),
        _ => {}
    }
}
