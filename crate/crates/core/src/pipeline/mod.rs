//! Runnable surface: configuration, training, checkpoints, evaluation and
//! the parameter-count table.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod optim;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{Ablation, OptimizerConfig, RunConfig};
pub use eval::{detect, evaluate, evaluate_detections, predict, DetectionRecord, EvalReport};
pub use optim::Adam;
pub use train::{train, train_observed, train_on, train_step, MetricRecord, StepLosses, TrainOutcome};

use crate::capsule::{param_count, reference_scenarios, CountConfig, CountMode};
use crate::error::Result;

/// `1234567` as `"1,234,567"`.
pub fn group_thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn human_bytes(b: f64) -> String {
    const UNITS: [&str; 5] = ["B", "KB", "MB", "GB", "TB"];
    let mut v = b;
    let mut unit = 0;
    while v >= 1000.0 && unit + 1 < UNITS.len() {
        v /= 1000.0;
        unit += 1;
    }
    format!("{v:.1} {}", UNITS[unit])
}

const HEADER: &str = "scenario\tmode\tparameters\tintermediate_bytes";

fn row(label: &str, mode: CountMode, cfg: &CountConfig) -> Result<String> {
    let c = param_count(mode, cfg)?;
    Ok(format!(
        "{label}\t{mode:?}\t{}\t{} ({})",
        group_thousands(c.parameters),
        group_thousands(c.intermediate_bytes),
        human_bytes(c.intermediate_bytes as f64)
    ))
}

/// Tab-separated table for one configuration.
pub fn count_table(mode: CountMode, cfg: &CountConfig) -> Result<String> {
    Ok(format!("{HEADER}\n{}\n", row("custom", mode, cfg)?))
}

/// Tab-separated table of the five reference layer configurations, with the
/// published figures alongside.
pub fn reference_table() -> Result<String> {
    let mut out = format!("{HEADER}\tpublished_parameters\tpublished_bytes\n");
    for s in reference_scenarios() {
        out.push_str(&row(s.label, s.mode, &s.config)?);
        out.push('\t');
        out.push_str(&group_thousands(s.published_parameters));
        out.push('\t');
        out.push_str(&s.published_bytes.map(human_bytes).unwrap_or_else(|| "-".into()));
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thousands() {
        assert_eq!(group_thousands(0), "0");
        assert_eq!(group_thousands(999), "999");
        assert_eq!(group_thousands(64_000), "64,000");
        assert_eq!(group_thousands(671_088_640), "671,088,640");
    }

    #[test]
    fn table_rows() {
        let t = reference_table().unwrap();
        assert_eq!(t.lines().count(), 6);
        for needle in ["671,088,640", "512,000", "6,400,000", "64,000", "32,000"] {
            assert!(t.contains(needle), "{needle} missing from\n{t}");
        }
    }
}
