//! Per-step training log as CSV.

use std::fmt::Write as _;

/// One logged step. `levels[i]` is the unweighted loss of stage `i + 1`,
/// absent for stages without a head.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub tau: f64,
    pub total: f64,
    pub levels: Vec<Option<f64>>,
}

pub fn csv_header(stages: usize) -> String {
    let mut h = String::from("step,lr,tau,total_loss");
    for i in 1..=stages {
        write!(h, ",loss_stage{i}").unwrap();
    }
    h
}

/// Shortest round-trip formatting; stages without a head leave an empty field.
pub fn csv_row(row: &MetricsRow) -> String {
    let mut s = format!("{},{},{},{}", row.step, row.lr, row.tau, row.total);
    for l in &row.levels {
        s.push(',');
        if let Some(v) = l {
            write!(s, "{v}").unwrap();
        }
    }
    s
}

pub fn to_csv(rows: &[MetricsRow], stages: usize) -> String {
    let mut out = csv_header(stages);
    out.push('\n');
    for r in rows {
        out.push_str(&csv_row(r));
        out.push('\n');
    }
    out
}
