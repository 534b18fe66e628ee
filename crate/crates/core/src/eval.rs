//! Accuracy and support-set-quality metrics plus report emission.

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::LogitsMatrix;
use crate::store::FeatureMatrix;

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("labels cover {labels} samples but logits have {rows} rows")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("support and test sets share no classes")]
    NoCommonClasses,
    #[error("features must be row-normalized")]
    NotNormalized,
    #[error("cannot emit an empty report")]
    EmptyReport,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Index of the largest entry; ties break to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Fraction of rows whose argmax column equals the label.
pub fn top1_accuracy(logits: &LogitsMatrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != logits.rows {
        return Err(EvalError::LengthMismatch {
            rows: logits.rows,
            labels: labels.len(),
        });
    }
    if logits.rows == 0 {
        return Ok(0.0);
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &label)| argmax(logits.row(i)) == label)
        .count();
    Ok(correct as f64 / logits.rows as f64)
}

/// Accuracy restricted to each class. Classes with no test samples report
/// `None`.
pub fn per_class_accuracy(
    logits: &LogitsMatrix,
    labels: &[usize],
    n_classes: usize,
) -> Result<Vec<Option<f64>>> {
    if labels.len() != logits.rows {
        return Err(EvalError::LengthMismatch {
            rows: logits.rows,
            labels: labels.len(),
        });
    }
    let mut total = vec![0usize; n_classes];
    let mut correct = vec![0usize; n_classes];
    for (i, &label) in labels.iter().enumerate() {
        total[label] += 1;
        if argmax(logits.row(i)) == label {
            correct[label] += 1;
        }
    }
    Ok(total
        .iter()
        .zip(&correct)
        .map(|(&t, &c)| (t > 0).then(|| c as f64 / t as f64))
        .collect())
}

/// How the support-to-test similarity aggregates over classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityScope {
    /// Mean over same-class (support, test) pairs, macro-averaged over the
    /// classes present in both sets. The default.
    PerClass,
    /// Class-agnostic mean over all (support, test) pairs.
    Global,
}

/// Average cosine similarity between support and test features, in percent.
///
/// The pairwise mean over a class factors into a dot product of per-class
/// feature sums, so the computation is linear in the number of rows.
pub fn support_similarity(
    f_support: &FeatureMatrix,
    support_classes: &[usize],
    f_test: &FeatureMatrix,
    test_classes: &[usize],
    scope: SimilarityScope,
) -> Result<f64> {
    if !f_support.is_normalized() || !f_test.is_normalized() {
        return Err(EvalError::NotNormalized);
    }
    if support_classes.len() != f_support.rows() {
        return Err(EvalError::LengthMismatch {
            rows: f_support.rows(),
            labels: support_classes.len(),
        });
    }
    if test_classes.len() != f_test.rows() {
        return Err(EvalError::LengthMismatch {
            rows: f_test.rows(),
            labels: test_classes.len(),
        });
    }
    match scope {
        SimilarityScope::Global => {
            let s_sum = column_sum(f_support, None, usize::MAX);
            let t_sum = column_sum(f_test, None, usize::MAX);
            let pairs = (f_support.rows() * f_test.rows()) as f64;
            if pairs == 0.0 {
                return Err(EvalError::NoCommonClasses);
            }
            Ok(dot64(&s_sum, &t_sum) / pairs * 100.0)
        }
        SimilarityScope::PerClass => {
            let n_classes = support_classes
                .iter()
                .chain(test_classes)
                .copied()
                .max()
                .map_or(0, |m| m + 1);
            let mut acc = 0.0;
            let mut common = 0usize;
            for class in 0..n_classes {
                let ns = support_classes.iter().filter(|&&c| c == class).count();
                let nt = test_classes.iter().filter(|&&c| c == class).count();
                if ns == 0 || nt == 0 {
                    continue;
                }
                let s_sum = column_sum(f_support, Some(support_classes), class);
                let t_sum = column_sum(f_test, Some(test_classes), class);
                acc += dot64(&s_sum, &t_sum) / (ns * nt) as f64;
                common += 1;
            }
            if common == 0 {
                return Err(EvalError::NoCommonClasses);
            }
            Ok(acc / common as f64 * 100.0)
        }
    }
}

fn column_sum(m: &FeatureMatrix, classes: Option<&[usize]>, class: usize) -> Vec<f64> {
    let mut sum = vec![0.0f64; m.dim()];
    for (i, row) in m.iter_rows().enumerate() {
        if let Some(cs) = classes {
            if cs[i] != class {
                continue;
            }
        }
        for (acc, &v) in sum.iter_mut().zip(row) {
            *acc += f64::from(v);
        }
    }
    sum
}

fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One evaluated run: method, provenance tags, and its scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub backbone: String,
    pub dataset: String,
    /// Support samples per class.
    pub support_size: usize,
    /// Top-1 accuracy in [0, 1].
    pub top1: f64,
    /// Per-class accuracy; `None` for classes without test samples.
    pub per_class: Vec<Option<f64>>,
    /// Support-to-test similarity in percent, when measured.
    pub similarity: Option<f64>,
    /// Wall time of the logits computation, seconds.
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

/// Render reports as CSV. Accuracies appear as percent with two decimals.
pub fn render_report_csv(reports: &[EvalReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(EvalError::EmptyReport);
    }
    let mut out =
        String::from("method,backbone,dataset,support_size,top1,similarity,wall_time_s\n");
    for r in reports {
        let similarity = r.similarity.map_or_else(String::new, |s| format!("{s:.2}"));
        out.push_str(&format!(
            "{},{},{},{},{:.2},{},{:.3}\n",
            csv_field(&r.method),
            csv_field(&r.backbone),
            csv_field(&r.dataset),
            r.support_size,
            r.top1 * 100.0,
            similarity,
            r.wall_time_s,
        ));
    }
    Ok(out)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Write reports to `path` in the requested format.
pub fn emit_report(reports: &[EvalReport], path: &Path, format: ReportFormat) -> Result<()> {
    if reports.is_empty() {
        return Err(EvalError::EmptyReport);
    }
    let bytes = match format {
        ReportFormat::Csv => render_report_csv(reports)?.into_bytes(),
        ReportFormat::Json => {
            let mut b = serde_json::to_vec_pretty(reports)?;
            b.push(b'\n');
            b
        }
    };
    std::fs::write(path, bytes)?;
    Ok(())
}
