//! Deterministic grid construction and exhaustive hyperparameter search.
//!
//! The sweep exploits which intermediates each hyperparameter touches: the
//! pairwise dot matrices, the zero-shot dots, the signatures, and the KL
//! matrix are all hyperparameter-free, and the affinity term depends only on
//! (beta, delta). Those pieces are computed once and reused, so a grid point
//! costs one affinity map plus an O(t x N) mix. The reused primitives are
//! the same functions the direct kernels call, so a swept evaluation equals
//! a direct one bit for bit.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{self, EvalError};
use crate::kernels::{
    self, affinity_from_dots, class_sums, kl_core, mix_three, mix_two,
    multimodal_affinity_from_dots, negate, pair_dots, phi_onto, row_softmax, HyperParams,
    KernelError, Method,
};
use crate::store::{FeatureMatrix, OneHotLabels};

pub type Result<T> = std::result::Result<T, SearchError>;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid grid range: {0}")]
    InvalidRange(String),
    #[error("empty grid")]
    EmptyGrid,
    #[error("validation labels cover {labels} samples but features have {rows} rows")]
    LabelMismatch { rows: usize, labels: usize },
    #[error("validation label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("method {0:?} needs a caption cache")]
    MissingCaptionCache(Method),
    #[error("the zero-shot method has no hyperparameters to search")]
    UnsupportedMethod,
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Axis spacing for the alpha, beta, and gamma grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AxisSpacing {
    Linear,
    Log,
}

/// One grid axis: an inclusive range sampled at `points` values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisSpec {
    pub low: f64,
    pub high: f64,
    pub points: usize,
    pub spacing: AxisSpacing,
}

impl AxisSpec {
    pub fn linear(low: f64, high: f64, points: usize) -> Self {
        Self {
            low,
            high,
            points,
            spacing: AxisSpacing::Linear,
        }
    }

    pub fn log(low: f64, high: f64, points: usize) -> Self {
        Self {
            low,
            high,
            points,
            spacing: AxisSpacing::Log,
        }
    }
}

/// Grid specification over (alpha, beta, gamma, delta). The delta axis is
/// always linear on [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub alpha: AxisSpec,
    pub beta: AxisSpec,
    pub gamma: AxisSpec,
    pub delta_points: usize,
}

impl GridSpec {
    /// Default sweep resolution: alpha 7 log points in [0.1, 50], beta 7
    /// linear points in [1, 50], gamma 7 log points in [0.1, 30], delta 11
    /// linear points.
    pub fn default_grid() -> Self {
        Self {
            alpha: AxisSpec::log(0.1, 50.0, 7),
            beta: AxisSpec::linear(1.0, 50.0, 7),
            gamma: AxisSpec::log(0.1, 30.0, 7),
            delta_points: 11,
        }
    }

    /// Delta sweep with the other weights pinned at alpha 0.1, beta 1,
    /// gamma 0.1.
    pub fn delta_sweep() -> Self {
        Self {
            alpha: AxisSpec::linear(0.1, 0.1, 1),
            beta: AxisSpec::linear(1.0, 1.0, 1),
            gamma: AxisSpec::linear(0.1, 0.1, 1),
            delta_points: 11,
        }
    }
}

fn axis_values(axis: &AxisSpec, name: &str) -> Result<Vec<f64>> {
    if axis.points == 0 {
        return Err(SearchError::InvalidRange(format!(
            "{name}: points must be >= 1"
        )));
    }
    if !axis.low.is_finite() || !axis.high.is_finite() || axis.low > axis.high {
        return Err(SearchError::InvalidRange(format!(
            "{name}: bad range [{}, {}]",
            axis.low, axis.high
        )));
    }
    if axis.spacing == AxisSpacing::Log && axis.low <= 0.0 {
        return Err(SearchError::InvalidRange(format!(
            "{name}: log spacing needs a positive lower bound, got {}",
            axis.low
        )));
    }
    if axis.points == 1 {
        return Ok(vec![axis.low]);
    }
    let n = axis.points;
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        let v = if i == 0 {
            axis.low
        } else if i == n - 1 {
            axis.high
        } else {
            let frac = i as f64 / (n - 1) as f64;
            match axis.spacing {
                AxisSpacing::Linear => axis.low + (axis.high - axis.low) * frac,
                AxisSpacing::Log => (axis.low.ln() + (axis.high.ln() - axis.low.ln()) * frac).exp(),
            }
        };
        values.push(v);
    }
    Ok(values)
}

/// Materialize the Cartesian grid in canonical order: alpha-major, then
/// beta, gamma, delta. All points carry the default tau.
pub fn make_grid(spec: &GridSpec) -> Result<Vec<HyperParams>> {
    let alphas = axis_values(&spec.alpha, "alpha")?;
    let betas = axis_values(&spec.beta, "beta")?;
    let gammas = axis_values(&spec.gamma, "gamma")?;
    let delta_axis = AxisSpec::linear(0.0, 1.0, spec.delta_points);
    let deltas = axis_values(&delta_axis, "delta")?;
    let mut grid = Vec::with_capacity(alphas.len() * betas.len() * gammas.len() * deltas.len());
    for &alpha in &alphas {
        for &beta in &betas {
            for &gamma in &gammas {
                for &delta in &deltas {
                    grid.push(HyperParams::new(alpha, beta, gamma, delta)?);
                }
            }
        }
    }
    Ok(grid)
}

/// One evaluated grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchPoint {
    pub params: HyperParams,
    pub accuracy: f64,
}

/// Outcome of an exhaustive sweep. `best` is the first point in grid order
/// attaining the maximum accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: HyperParams,
    pub best_accuracy: f64,
    pub evaluations: usize,
    pub log: Vec<SearchPoint>,
}

/// The support-side inputs of a sweep: classifier, caches, and labels.
#[derive(Debug, Clone, Copy)]
pub struct SupportCache<'a> {
    pub w: &'a FeatureMatrix,
    pub f_img: &'a FeatureMatrix,
    pub f_cap: Option<&'a FeatureMatrix>,
    pub labels: &'a OneHotLabels,
}

/// Exhaustively evaluate `grid` for `method` on a validation split and
/// return the best point with the full per-point log.
///
/// Grid points may be evaluated concurrently; the reduction runs in grid
/// order, so the result does not depend on scheduling. Ties break to the
/// earliest grid point.
pub fn search(
    val: &FeatureMatrix,
    val_labels: &[usize],
    cache: &SupportCache<'_>,
    grid: &[HyperParams],
    method: Method,
) -> Result<SearchResult> {
    if grid.is_empty() {
        return Err(SearchError::EmptyGrid);
    }
    if val_labels.len() != val.rows() {
        return Err(SearchError::LabelMismatch {
            rows: val.rows(),
            labels: val_labels.len(),
        });
    }
    for &label in val_labels {
        if label >= cache.labels.classes() {
            return Err(SearchError::LabelOutOfRange {
                label,
                classes: cache.labels.classes(),
            });
        }
    }
    let needs_captions = matches!(method, Method::MAdapter | Method::FVariant);
    let f_cap = match (needs_captions, cache.f_cap) {
        (true, None) => return Err(SearchError::MissingCaptionCache(method)),
        (true, Some(c)) => Some(c),
        (false, _) => None,
    };
    if method == Method::Zeroshot {
        return Err(SearchError::UnsupportedMethod);
    }
    for hp in grid {
        hp.validate()?;
    }
    // Validate feature inputs once through a direct kernel call; the swept
    // path below reuses primitives that skip per-call checks.
    let probe = grid[0];
    match method {
        Method::Tipx => {
            kernels::tipx_logits(val, cache.w, cache.f_img, cache.labels, &probe)?;
        }
        Method::MAdapter => {
            kernels::m_adapter_logits(
                val,
                cache.w,
                cache.f_img,
                f_cap.expect("checked"),
                cache.labels,
                &probe,
            )?;
        }
        Method::FVariant => {
            kernels::f_variant_logits(
                val,
                cache.w,
                cache.f_img,
                f_cap.expect("checked"),
                cache.labels,
                &probe,
            )?;
        }
        Method::Zeroshot => unreachable!(),
    }

    // Hyperparameter-free intermediates.
    let dw = pair_dots(val, cache.w);
    let d_img = pair_dots(val, cache.f_img);
    let d_cap = f_cap.map(|c| pair_dots(val, c));
    let kl_pieces = if method == Method::FVariant {
        None
    } else {
        let s_test = row_softmax(&dw);
        let s_sup = row_softmax(&pair_dots(cache.f_img, cache.w));
        let m = kl_core(&s_test, &s_sup);
        Some(negate(&class_sums(&m, cache.labels)))
    };

    // Group grid indices by the (beta, delta) pair the affinity term needs;
    // TIP-X ignores delta.
    let mut groups: Vec<((u64, u64), Vec<usize>)> = Vec::new();
    let mut group_index: HashMap<(u64, u64), usize> = HashMap::new();
    for (idx, hp) in grid.iter().enumerate() {
        let key = match method {
            Method::Tipx => (hp.beta.to_bits(), 0u64),
            _ => (hp.beta.to_bits(), hp.delta.to_bits()),
        };
        match group_index.get(&key) {
            Some(&g) => groups[g].1.push(idx),
            None => {
                group_index.insert(key, groups.len());
                groups.push((key, vec![idx]));
            }
        }
    }

    let mut accuracies = vec![0.0f64; grid.len()];
    let evaluated: Vec<Vec<(usize, f64)>> = groups
        .par_iter()
        .map(|((beta_bits, delta_bits), indices)| {
            let beta = f64::from_bits(*beta_bits);
            let delta = f64::from_bits(*delta_bits);
            let cache_term = match method {
                Method::Tipx => class_sums(&affinity_from_dots(&d_img, beta), cache.labels),
                _ => {
                    let am = multimodal_affinity_from_dots(
                        &d_img,
                        d_cap.as_ref().expect("checked"),
                        beta,
                        delta,
                    );
                    class_sums(&am, cache.labels)
                }
            };
            let phi = kl_pieces.as_ref().map(|neg_ml| {
                let (tmin, tmax) = cache_term.min_max().expect("nonempty");
                phi_onto(neg_ml, tmin, tmax)
            });
            indices
                .iter()
                .map(|&idx| {
                    let hp = &grid[idx];
                    let logits = match &phi {
                        Some(p) => mix_three(&dw, &cache_term, p, hp.tau, hp.alpha, hp.gamma),
                        None => mix_two(&dw, &cache_term, hp.tau, hp.alpha),
                    };
                    let acc = eval::top1_accuracy(&logits, val_labels).expect("lengths validated");
                    (idx, acc)
                })
                .collect()
        })
        .collect();
    for group in evaluated {
        for (idx, acc) in group {
            accuracies[idx] = acc;
        }
    }

    let mut best_idx = 0;
    for (idx, &acc) in accuracies.iter().enumerate() {
        if acc > accuracies[best_idx] {
            best_idx = idx;
        }
    }
    let log: Vec<SearchPoint> = grid
        .iter()
        .zip(&accuracies)
        .map(|(hp, &accuracy)| SearchPoint {
            params: *hp,
            accuracy,
        })
        .collect();
    Ok(SearchResult {
        best: grid[best_idx],
        best_accuracy: accuracies[best_idx],
        evaluations: grid.len(),
        log,
    })
}

/// Render the per-point log as CSV with 6-decimal accuracies.
pub fn render_search_log_csv(result: &SearchResult) -> String {
    let mut out = String::from("alpha,beta,gamma,delta,accuracy\n");
    for point in &result.log {
        let p = &point.params;
        out.push_str(&format!(
            "{},{},{},{},{:.6}\n",
            p.alpha, p.beta, p.gamma, p.delta, point.accuracy
        ));
    }
    out
}

/// Write the search log CSV to `path`.
pub fn write_search_log(result: &SearchResult, path: &Path) -> Result<()> {
    std::fs::write(path, render_search_log_csv(result))?;
    Ok(())
}
