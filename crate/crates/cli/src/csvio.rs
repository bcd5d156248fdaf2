//! Results CSV emission with the fixed schema
//! `method,dataset,condition,shots,seed,miou,per_class_ious,step_time_ms,mem_bytes`.

use std::fmt::Write as _;

pub const RESULTS_HEADER: &str =
    "method,dataset,condition,shots,seed,miou,per_class_ious,step_time_ms,mem_bytes";

#[derive(Debug, Clone)]
pub struct ResultRow {
    pub method: String,
    pub dataset: String,
    pub condition: String,
    pub shots: usize,
    pub seed: u64,
    pub miou: f64,
    pub per_class_ious: Vec<Option<f64>>,
    pub step_time_ms: f64,
    pub mem_bytes: u64,
}

impl ResultRow {
    fn line(&self) -> String {
        let per_class = self
            .per_class_ious
            .iter()
            .map(|c| match c {
                Some(v) => format!("{v}"),
                None => "-".to_string(),
            })
            .collect::<Vec<_>>()
            .join(";");
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.method,
            self.dataset,
            self.condition,
            self.shots,
            self.seed,
            self.miou,
            per_class,
            self.step_time_ms,
            self.mem_bytes
        )
    }
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.line());
    }
    out
}

/// Two-column summary table, one row per label.
pub fn summary_csv(header: &str, rows: &[(String, f64)]) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for (label, value) in rows {
        let _ = writeln!(out, "{label},{value}");
    }
    out
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    if v.len() % 2 == 1 {
        v[v.len() / 2]
    } else {
        0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
    }
}
