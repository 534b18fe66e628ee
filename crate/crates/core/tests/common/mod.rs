//! Independent naive-loop oracle for the inference formulas, plus shared
//! test-instance generators.
//!
//! Everything here is written straight from the formula definitions with
//! plain nested loops and dense one-hot label matrices. It deliberately
//! shares no code with the kernel implementations: softmax has no max
//! subtraction, label products are dense triple loops, and min/max scans are
//! naive.

use caps_core::rng::SplitMix64;
use caps_core::store::{build_onehot, FeatureMatrix, OneHotLabels};
use caps_core::HyperParams;

pub type Rows = Vec<Vec<f64>>;

pub fn to_rows(m: &FeatureMatrix) -> Rows {
    (0..m.rows())
        .map(|i| m.row(i).iter().map(|&v| f64::from(v)).collect())
        .collect()
}

pub fn dense_labels(labels: &OneHotLabels) -> Rows {
    labels
        .indicator()
        .chunks(labels.classes())
        .map(|row| row.iter().map(|&v| f64::from(v)).collect())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for k in 0..a.len() {
        acc += a[k] * b[k];
    }
    acc
}

pub fn oracle_zeroshot(f: &Rows, w: &Rows, tau: f64) -> Rows {
    f.iter()
        .map(|fi| w.iter().map(|wk| tau * dot(fi, wk)).collect())
        .collect()
}

pub fn oracle_affinity(f: &Rows, img: &Rows, beta: f64) -> Rows {
    f.iter()
        .map(|fi| {
            img.iter()
                .map(|gj| (-beta * (1.0 - dot(fi, gj))).exp())
                .collect()
        })
        .collect()
}

pub fn oracle_multimodal_affinity(f: &Rows, img: &Rows, cap: &Rows, beta: f64, delta: f64) -> Rows {
    f.iter()
        .map(|fi| {
            img.iter()
                .zip(cap)
                .map(|(gj, cj)| {
                    (-beta * (1.0 - delta * dot(fi, cj) - (1.0 - delta) * dot(fi, gj))).exp()
                })
                .collect()
        })
        .collect()
}

/// Softmax without max subtraction; safe because signature dots lie in
/// [-1, 1].
pub fn oracle_signatures(features: &Rows, w: &Rows) -> Rows {
    features
        .iter()
        .map(|fi| {
            let exps: Vec<f64> = w.iter().map(|wk| dot(fi, wk).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / sum).collect()
        })
        .collect()
}

pub fn oracle_kl(s: &Rows, sup: &Rows) -> Rows {
    let eps = 1e-12;
    s.iter()
        .map(|si| {
            sup.iter()
                .map(|sj| {
                    let mut acc = 0.0;
                    for k in 0..si.len() {
                        acc += si[k] * ((si[k] + eps) / (sj[k] + eps)).ln();
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Dense matrix product with the one-hot label matrix: `m . L`.
pub fn oracle_label_product(m: &Rows, l: &Rows) -> Rows {
    let n = l[0].len();
    m.iter()
        .map(|row| {
            (0..n)
                .map(|k| {
                    let mut acc = 0.0;
                    for (j, lj) in l.iter().enumerate() {
                        acc += row[j] * lj[k];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn flat_min_max(m: &Rows) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for row in m {
        for &v in row {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
    }
    (lo, hi)
}

pub fn oracle_phi(x: &Rows, target: &Rows) -> Rows {
    let (tmin, tmax) = flat_min_max(target);
    let (xmin, xmax) = flat_min_max(x);
    if xmax == xmin {
        return x.iter().map(|row| vec![tmin; row.len()]).collect();
    }
    x.iter()
        .map(|row| {
            row.iter()
                .map(|&v| tmin + (v - xmin) * (tmax - tmin) / (xmax - xmin))
                .collect()
        })
        .collect()
}

fn neg(m: &Rows) -> Rows {
    m.iter().map(|r| r.iter().map(|&v| -v).collect()).collect()
}

fn add3(a: &Rows, b: &Rows, c: &Rows, wa: f64, wb: f64, wc: f64) -> Rows {
    a.iter()
        .zip(b)
        .zip(c)
        .map(|((ra, rb), rc)| {
            ra.iter()
                .zip(rb)
                .zip(rc)
                .map(|((&x, &y), &z)| wa * x + wb * y + wc * z)
                .collect()
        })
        .collect()
}

pub fn oracle_tipx(f: &Rows, w: &Rows, img: &Rows, l: &Rows, hp: &HyperParams) -> Rows {
    let zs = oracle_zeroshot(f, w, 1.0);
    let a = oracle_affinity(f, img, hp.beta);
    let al = oracle_label_product(&a, l);
    let s = oracle_signatures(f, w);
    let s_sup = oracle_signatures(img, w);
    let m = oracle_kl(&s, &s_sup);
    let ml = oracle_label_product(&m, l);
    let phi = oracle_phi(&neg(&ml), &al);
    add3(&zs, &al, &phi, hp.tau, hp.alpha, hp.gamma)
}

pub fn oracle_m_adapter(
    f: &Rows,
    w: &Rows,
    img: &Rows,
    cap: &Rows,
    l: &Rows,
    hp: &HyperParams,
) -> Rows {
    let zs = oracle_zeroshot(f, w, 1.0);
    let am = oracle_multimodal_affinity(f, img, cap, hp.beta, hp.delta);
    let al = oracle_label_product(&am, l);
    let s = oracle_signatures(f, w);
    let s_sup = oracle_signatures(img, w);
    let m = oracle_kl(&s, &s_sup);
    let ml = oracle_label_product(&m, l);
    let phi = oracle_phi(&neg(&ml), &al);
    add3(&zs, &al, &phi, hp.tau, hp.alpha, hp.gamma)
}

pub fn oracle_f_variant(
    f: &Rows,
    w: &Rows,
    img: &Rows,
    cap: &Rows,
    l: &Rows,
    hp: &HyperParams,
) -> Rows {
    let zs = oracle_zeroshot(f, w, 1.0);
    let am = oracle_multimodal_affinity(f, img, cap, hp.beta, hp.delta);
    let al = oracle_label_product(&am, l);
    zs.iter()
        .zip(&al)
        .map(|(rz, ra)| {
            rz.iter()
                .zip(ra)
                .map(|(&z, &a)| hp.tau * z + hp.alpha * a)
                .collect()
        })
        .collect()
}

pub fn oracle_top1(logits: &Rows, labels: &[usize]) -> f64 {
    let mut correct = 0usize;
    for (row, &label) in logits.iter().zip(labels) {
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if v > best_v {
                best = j;
                best_v = v;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct as f64 / logits.len() as f64
}

// ---------------------------------------------------------------------------
// Instance generation
// ---------------------------------------------------------------------------

pub struct Instance {
    pub f_test: FeatureMatrix,
    pub w: FeatureMatrix,
    pub f_img: FeatureMatrix,
    pub f_cap: FeatureMatrix,
    pub labels: OneHotLabels,
    pub hp: HyperParams,
}

pub fn random_unit(rows: usize, dim: usize, rng: &mut SplitMix64) -> FeatureMatrix {
    let data: Vec<f32> = (0..rows * dim).map(|_| rng.next_normal() as f32).collect();
    FeatureMatrix::new(rows, dim, data, false)
        .unwrap()
        .normalize_rows()
        .unwrap()
}

/// Random instance with N <= 5 classes, <= 6 support samples per class,
/// t <= 8 test rows, and C = 16.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = SplitMix64::new(seed);
    let n = 1 + rng.next_index(5);
    let per_class = 1 + rng.next_index(6);
    let t = 1 + rng.next_index(8);
    let dim = 16;
    let f_test = random_unit(t, dim, &mut rng);
    let w = random_unit(n, dim, &mut rng);
    let f_img = random_unit(n * per_class, dim, &mut rng);
    let f_cap = random_unit(n * per_class, dim, &mut rng);
    let classes: Vec<usize> = (0..n)
        .flat_map(|c| std::iter::repeat_n(c, per_class))
        .collect();
    let labels = build_onehot(&classes, n).unwrap();
    let hp = HyperParams::new(
        rng.next_f64() * 5.0,
        0.5 + rng.next_f64() * 9.5,
        rng.next_f64() * 5.0,
        rng.next_f64(),
    )
    .unwrap();
    Instance {
        f_test,
        w,
        f_img,
        f_cap,
        labels,
        hp,
    }
}

/// |a - b| <= tol * max(1, |b|), elementwise over two row sets.
pub fn assert_rows_close(got: &Rows, want: &Rows, tol: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: row count");
    for (i, (rg, rw)) in got.iter().zip(want).enumerate() {
        assert_eq!(rg.len(), rw.len(), "{what}: row {i} length");
        for (j, (&g, &w)) in rg.iter().zip(rw).enumerate() {
            let scale = w.abs().max(1.0);
            assert!(
                (g - w).abs() <= tol * scale,
                "{what}: entry ({i},{j}): got {g}, want {w}"
            );
        }
    }
}

pub fn logits_to_rows(l: &caps_core::LogitsMatrix) -> Rows {
    (0..l.rows).map(|i| l.row(i).to_vec()).collect()
}
