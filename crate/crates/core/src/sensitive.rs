//! Sensitive-line selection: the line whose hidden-dimension mean is smallest.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{CslsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    /// Smallest mean.
    #[default]
    Min,
    /// Mean closest to zero.
    MinAbs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitiveSelection {
    /// `[b, k]`.
    pub line_means: Vec<f64>,
    /// Selected line per snippet.
    pub min_index: Vec<usize>,
    /// `[b, h]`.
    pub l_repr: Vec<f64>,
}

/// Mean over the hidden axis of `[b, k, h]` values, giving `[b, k]`.
pub fn line_means(le: &[f64], h: usize) -> Vec<f64> {
    assert!(h >= 1);
    le.chunks_exact(h)
        .map(|row| row.iter().sum::<f64>() / h as f64)
        .collect()
}

/// Per-snippet argmin of `means` over real lines; padded lines never win and
/// ties go to the smallest index.
pub fn argmin_lines(
    means: &[f64],
    line_mask: &[u8],
    k: usize,
    mode: SelectionMode,
) -> Result<Vec<usize>> {
    if means.len() != line_mask.len() || k == 0 || !means.len().is_multiple_of(k) {
        return Err(CslsError::Shape(format!(
            "means ({}) and line mask ({}) must be [b, {k}]",
            means.len(),
            line_mask.len()
        )));
    }
    means
        .chunks_exact(k)
        .zip(line_mask.chunks_exact(k))
        .enumerate()
        .map(|(i, (m, mask))| {
            let mut best: Option<(usize, f64)> = None;
            for j in 0..k {
                let score = match mode {
                    SelectionMode::Min => m[j],
                    SelectionMode::MinAbs => m[j].abs(),
                };
                let score = if mask[j] == 1 { score } else { f64::INFINITY };
                if mask[j] == 1 && best.is_none_or(|(_, s)| score < s) {
                    best = Some((j, score));
                }
            }
            best.map(|(j, _)| j).ok_or(CslsError::NoRealLines(i))
        })
        .collect()
}

/// Select the sensitive line from raw `[b, k, h]` values.
pub fn select_sensitive(
    le: &[f64],
    line_mask: &[u8],
    k: usize,
    h: usize,
    mode: SelectionMode,
) -> Result<SensitiveSelection> {
    if le.len() != line_mask.len() * h {
        return Err(CslsError::Shape(format!(
            "LE has {} values, expected {}",
            le.len(),
            line_mask.len() * h
        )));
    }
    let means = line_means(le, h);
    let min_index = argmin_lines(&means, line_mask, k, mode)?;
    let l_repr = min_index
        .iter()
        .enumerate()
        .flat_map(|(b, &j)| le[(b * k + j) * h..(b * k + j + 1) * h].iter().copied())
        .collect();
    Ok(SensitiveSelection {
        line_means: means,
        min_index,
        l_repr,
    })
}

/// Graph version: selects from the (non-detached) line embeddings so the
/// gradient reaches the line encoder through the chosen row.
pub fn select_sensitive_var(
    g: &mut Graph,
    le: Var,
    line_mask: &[u8],
    mode: SelectionMode,
) -> Result<(SensitiveSelection, Var)> {
    let shape = g.shape(le).to_vec();
    let [_, k, h] = shape[..] else {
        return Err(CslsError::Shape(format!(
            "LE must be [b, k, h], got {shape:?}"
        )));
    };
    let sel = select_sensitive(g.value(le), line_mask, k, h, mode)?;
    let l_repr = g.select_rows(le, &sel.min_index);
    Ok((sel, l_repr))
}

/// One audit line per snippet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitiveAudit {
    pub id: u64,
    pub min_index: usize,
    pub line: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn means_examples() {
        assert_eq!(line_means(&[2.5, 2.5, 2.5], 3), vec![2.5]);
        assert_eq!(line_means(&[1.0, -1.0, 1.0, -1.0], 4), vec![0.0]);
    }

    fn le_from_means(means: &[f64], h: usize) -> Vec<f64> {
        means
            .iter()
            .flat_map(|&m| std::iter::repeat_n(m, h))
            .collect()
    }

    #[test]
    fn picks_smallest_mean() {
        let le = le_from_means(&[1.0, 0.2, 0.5], 4);
        let sel = select_sensitive(&le, &[1, 1, 1], 3, 4, SelectionMode::Min).unwrap();
        assert_eq!(sel.min_index, vec![1]);
        assert_eq!(sel.l_repr, vec![0.2; 4]);
    }

    #[test]
    fn single_line_and_ties() {
        let sel = select_sensitive(&[3.0, 4.0], &[1], 1, 2, SelectionMode::Min).unwrap();
        assert_eq!(sel.min_index, vec![0]);
        let le = le_from_means(&[0.3, 0.3], 2);
        assert_eq!(
            select_sensitive(&le, &[1, 1], 2, 2, SelectionMode::Min)
                .unwrap()
                .min_index,
            vec![0]
        );
    }

    #[test]
    fn masked_lines_never_win() {
        let le = le_from_means(&[0.5, -9.0, 0.7], 2);
        let sel = select_sensitive(&le, &[1, 0, 1], 3, 2, SelectionMode::Min).unwrap();
        assert_eq!(sel.min_index, vec![0]);
        assert!(matches!(
            select_sensitive(&le, &[0, 0, 0], 3, 2, SelectionMode::Min),
            Err(CslsError::NoRealLines(0))
        ));
    }

    #[test]
    fn abs_mode_prefers_values_near_zero() {
        let le = le_from_means(&[-1.0, 0.1, 0.5], 2);
        assert_eq!(
            select_sensitive(&le, &[1, 1, 1], 3, 2, SelectionMode::Min)
                .unwrap()
                .min_index,
            vec![0]
        );
        assert_eq!(
            select_sensitive(&le, &[1, 1, 1], 3, 2, SelectionMode::MinAbs)
                .unwrap()
                .min_index,
            vec![1]
        );
    }
}
