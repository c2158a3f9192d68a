//! Success-rate summaries over evaluation checkpoints.

use geodp_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const TOP_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    /// Selected rates, highest first.
    pub values: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

/// Mean and population std of the five highest success rates (percent).
pub fn top5(history: &[f64]) -> Result<TopK> {
    if history.len() < TOP_K {
        return Err(Error::Usage(format!(
            "top-{TOP_K} needs at least {TOP_K} checkpoints, history has {}",
            history.len()
        )));
    }
    if let Some(bad) = history.iter().find(|r| !(0.0..=100.0).contains(*r)) {
        return Err(Error::InvalidArgument(format!("success rate {bad} outside [0, 100]")));
    }
    let mut sorted = history.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted.truncate(TOP_K);
    let n = TOP_K as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let var = sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(TopK {
        values: sorted,
        mean,
        std: var.sqrt(),
    })
}

/// Reads a history of success rates: either a JSON array of numbers or a
/// training `metrics.csv` (its `eval` rows).
pub fn read_history(path: &std::path::Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    if let Ok(v) = serde_json::from_str::<Vec<f64>>(&text) {
        return Ok(v);
    }
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in rdr.deserialize::<crate::train::MetricsRow>() {
        let row = row.map_err(|e| Error::InvalidArgument(format!("history {}: {e}", path.display())))?;
        if row.kind == "eval" {
            let rate = row
                .success_rate
                .ok_or_else(|| Error::InvalidArgument(format!("eval row at epoch {} without a rate", row.epoch)))?;
            out.push(rate);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_failures_give_zero() {
        let t = top5(&[0.0; 6]).unwrap();
        assert_eq!((t.mean, t.std), (0.0, 0.0));
    }

    #[test]
    fn too_short_history_is_rejected() {
        assert!(matches!(top5(&[40.0]), Err(Error::Usage(_))));
        assert!(top5(&[1.0, 2.0, 3.0, 4.0]).is_err());
    }

    #[test]
    fn ties_and_order() {
        let t = top5(&[10.0, 50.0, 50.0, 20.0, 30.0, 40.0]).unwrap();
        assert_eq!(t.values, vec![50.0, 50.0, 40.0, 30.0, 20.0]);
        assert!((t.mean - 38.0).abs() < 1e-12);
    }
}
