use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::metrics::EvalReport;
use crate::error::{CslsError, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChiSquareMethod {
    /// Pearson statistic on the full 2x2 table, no continuity correction.
    #[default]
    Pearson,
    /// McNemar statistic on the discordant cells.
    Mcnemar,
}

/// Per-snippet correctness of model A (rows) against model B (columns).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contingency {
    pub both_correct: usize,
    pub a_correct_b_wrong: usize,
    pub a_wrong_b_correct: usize,
    pub both_wrong: usize,
}

impl Contingency {
    pub fn table(&self) -> [[f64; 2]; 2] {
        [
            [self.both_correct as f64, self.a_correct_b_wrong as f64],
            [self.a_wrong_b_correct as f64, self.both_wrong as f64],
        ]
    }
}

/// Pearson chi-square for a 2x2 table. Returns 0 when a margin is empty.
pub fn pearson_chi2(t: [[f64; 2]; 2]) -> f64 {
    let rows = [t[0][0] + t[0][1], t[1][0] + t[1][1]];
    let cols = [t[0][0] + t[1][0], t[0][1] + t[1][1]];
    let n = rows[0] + rows[1];
    if rows.contains(&0.0) || cols.contains(&0.0) {
        return 0.0;
    }
    let mut stat = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let e = rows[i] * cols[j] / n;
            stat += (t[i][j] - e).powi(2) / e;
        }
    }
    stat
}

pub fn mcnemar_chi2(b: f64, c: f64) -> f64 {
    if b + c == 0.0 {
        0.0
    } else {
        (b - c).powi(2) / (b + c)
    }
}

/// Upper tail of the chi-square distribution with one degree of freedom.
pub fn chi2_sf_df1(stat: f64) -> f64 {
    let dist = ChiSquared::new(1.0).expect("df 1 is valid");
    dist.sf(stat).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VennCounts {
    pub only_a: usize,
    pub only_b: usize,
    pub both: usize,
}

impl VennCounts {
    pub fn from_sets(a: &BTreeSet<u64>, b: &BTreeSet<u64>) -> Self {
        let both = a.intersection(b).count();
        Self {
            only_a: a.len() - both,
            only_b: b.len() - both,
            both,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub method: ChiSquareMethod,
    pub n: usize,
    pub contingency: Contingency,
    pub statistic: f64,
    pub p_value: f64,
    pub true_positives: VennCounts,
    pub false_negatives: VennCounts,
}

/// Compare two evaluations over the same snippet ids.
pub fn compare_models(
    a: &EvalReport,
    b: &EvalReport,
    method: ChiSquareMethod,
) -> Result<ComparisonReport> {
    if a.records.is_empty() {
        return Err(CslsError::Empty("comparison set"));
    }
    let by_id: HashMap<u64, _> = b.records.iter().map(|r| (r.id, r)).collect();
    if by_id.len() != a.records.len() || b.records.len() != a.records.len() {
        return Err(CslsError::IdMismatch(format!(
            "{} records vs {} records",
            a.records.len(),
            b.records.len()
        )));
    }
    let mut c = Contingency::default();
    let (mut tp_a, mut tp_b, mut fn_a, mut fn_b) = Default::default();
    for ra in &a.records {
        let rb = by_id.get(&ra.id).ok_or_else(|| {
            CslsError::IdMismatch(format!("id {} missing from second report", ra.id))
        })?;
        if ra.label != rb.label {
            return Err(CslsError::IdMismatch(format!(
                "id {} has different labels",
                ra.id
            )));
        }
        let ok_a = ra.prediction == ra.label;
        let ok_b = rb.prediction == rb.label;
        match (ok_a, ok_b) {
            (true, true) => c.both_correct += 1,
            (true, false) => c.a_correct_b_wrong += 1,
            (false, true) => c.a_wrong_b_correct += 1,
            (false, false) => c.both_wrong += 1,
        }
        if ra.label == 1 {
            let set = |ok: bool, tp: &mut BTreeSet<u64>, fns: &mut BTreeSet<u64>| {
                if ok {
                    tp.insert(ra.id)
                } else {
                    fns.insert(ra.id)
                };
            };
            set(ok_a, &mut tp_a, &mut fn_a);
            set(ok_b, &mut tp_b, &mut fn_b);
        }
    }
    let statistic = match method {
        ChiSquareMethod::Pearson => pearson_chi2(c.table()),
        ChiSquareMethod::Mcnemar => {
            mcnemar_chi2(c.a_correct_b_wrong as f64, c.a_wrong_b_correct as f64)
        }
    };
    Ok(ComparisonReport {
        method,
        n: a.records.len(),
        contingency: c,
        statistic,
        p_value: chi2_sf_df1(statistic),
        true_positives: VennCounts::from_sets(&tp_a, &tp_b),
        false_negatives: VennCounts::from_sets(&fn_a, &fn_b),
    })
}
