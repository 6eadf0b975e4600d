//! Summary statistics over batches of runs.

use serde::Serialize;

use super::batch::{curve_grid, RunOutcome, RunRecord};

/// One line of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackSummary {
    pub attack: String,
    pub runs: usize,
    pub successes: usize,
    /// Runs that finished without reaching the threshold.
    pub failures: usize,
    /// Runs that stopped on an error.
    pub errors: usize,
    pub success_rate: f64,
    /// Median queries-to-success over successful runs.
    pub median_queries: f64,
    pub mean_queries: f64,
    /// Median with unsuccessful and errored runs counted as infinitely
    /// expensive.
    pub median_queries_all: f64,
    pub mean_final_mse: f64,
    pub total_queries: u64,
}

/// Median of a non-empty slice; NaN when empty.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

pub fn summarize(attack: &str, records: &[&RunRecord]) -> AttackSummary {
    let successes: Vec<f64> = records
        .iter()
        .filter_map(|r| r.queries_to_success)
        .map(|q| q as f64)
        .collect();
    let all: Vec<f64> = records
        .iter()
        .map(|r| r.queries_to_success.map_or(f64::INFINITY, |q| q as f64))
        .collect();
    let errors = records.iter().filter(|r| r.error.is_some()).count();
    let final_mse: Vec<f64> = records.iter().filter(|r| r.error.is_none()).map(|r| r.final_mse).collect();
    AttackSummary {
        attack: attack.to_string(),
        runs: records.len(),
        successes: successes.len(),
        failures: records.len() - successes.len() - errors,
        errors,
        success_rate: if records.is_empty() { f64::NAN } else { successes.len() as f64 / records.len() as f64 },
        median_queries: median(&successes),
        mean_queries: mean(&successes),
        median_queries_all: median(&all),
        mean_final_mse: mean(&final_mse),
        total_queries: records.iter().map(|r| r.total_queries).sum(),
    }
}

/// One line of `histogram.csv`: successes with queries in `[low, high)`
/// (the last bin also includes `high`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramBin {
    pub attack: String,
    pub low: u64,
    pub high: u64,
    pub count: usize,
}

/// Bins partitioning `[0, max_queries]` into `bins` near-equal intervals.
pub fn histogram(attack: &str, records: &[&RunRecord], max_queries: u64, bins: usize) -> Vec<HistogramBin> {
    let edges: Vec<u64> = (0..=bins as u64).map(|i| i * max_queries / bins as u64).collect();
    let mut out: Vec<HistogramBin> = edges
        .windows(2)
        .map(|w| HistogramBin { attack: attack.to_string(), low: w[0], high: w[1], count: 0 })
        .collect();
    for q in records.iter().filter_map(|r| r.queries_to_success) {
        let q = q.min(max_queries);
        let idx = out.iter().position(|b| q < b.high).unwrap_or(bins - 1);
        out[idx].count += 1;
    }
    out
}

/// One line of `curve.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub attack: String,
    pub queries: u64,
    /// Runs with an iterate at this query count.
    pub runs: usize,
    pub mean_mse: f64,
    pub mean_log10_mse: f64,
}

/// Mean MSE and mean log-MSE across runs at every point of the curve grid.
pub fn mean_curve(attack: &str, outcomes: &[&RunOutcome], max_queries: u64) -> Vec<CurvePoint> {
    curve_grid(max_queries)
        .into_iter()
        .enumerate()
        .map(|(j, queries)| {
            let values: Vec<f64> = outcomes.iter().filter_map(|o| o.curve.get(j).copied().flatten()).collect();
            let logs: Vec<f64> = values.iter().map(|v| v.max(1e-300).log10()).collect();
            CurvePoint {
                attack: attack.to_string(),
                queries,
                runs: values.len(),
                mean_mse: mean(&values),
                mean_log10_mse: mean(&logs),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(q: Option<u64>, error: bool) -> RunRecord {
        RunRecord {
            attack: "a".into(),
            image: 0,
            repetition: 0,
            label: 0,
            target: None,
            seed: 0,
            success: q.is_some(),
            queries_to_success: q,
            total_queries: q.unwrap_or(100),
            oracle_queries: q.unwrap_or(100),
            iterations: 1,
            final_mse: 0.5,
            final_l2: 1.0,
            final_linf: 0.1,
            error: error.then(|| "boom".to_string()),
        }
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
        assert_eq!(median(&[1.0, f64::INFINITY, f64::INFINITY]), f64::INFINITY);
    }

    #[test]
    fn summary_counts() {
        let rs = [record(Some(10), false), record(Some(30), false), record(None, false), record(None, true)];
        let refs: Vec<&RunRecord> = rs.iter().collect();
        let s = summarize("a", &refs);
        assert_eq!((s.runs, s.successes, s.failures, s.errors), (4, 2, 1, 1));
        assert_eq!(s.median_queries, 20.0);
        assert_eq!(s.mean_queries, 20.0);
        assert_eq!(s.median_queries_all, f64::INFINITY);
        assert_eq!(s.total_queries, 240);
    }

    #[test]
    fn histogram_partitions_budget() {
        let rs: Vec<RunRecord> = [0, 99, 100, 999, 1000].iter().map(|&q| record(Some(q), false)).collect();
        let refs: Vec<&RunRecord> = rs.iter().collect();
        let h = histogram("a", &refs, 1000, 10);
        assert_eq!(h.len(), 10);
        assert_eq!(h[0].low, 0);
        assert_eq!(h[9].high, 1000);
        assert!(h.windows(2).all(|w| w[0].high == w[1].low));
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), 5);
        assert_eq!((h[0].count, h[1].count, h[9].count), (2, 1, 2));
    }
}
