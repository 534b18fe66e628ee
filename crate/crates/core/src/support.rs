//! Support-set construction: sampling source images, captioning them,
//! assembling caption-based prompts, planning image generation with the
//! duplicate-prompt seed rule, encoding the paired caches, and the few-shot
//! cache built from real training features.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{
    CaptionRequest, ClientError, Clients, EncodeKind, EncodeRequest, Encoder, GenerateRequest,
    DEFAULT_CAPTION_INSTRUCTION,
};
use crate::rng::derive_stream;
use crate::store::{
    build_onehot, save_cache, save_meta, CacheMeta, FeatureMatrix, LabelsFile, OneHotLabels,
    StoreError,
};

pub type Result<T> = std::result::Result<T, SupportError>;

#[derive(Debug, Error)]
pub enum SupportError {
    #[error("class {class} has no samples")]
    EmptyClass { class: usize },
    #[error("empty class name")]
    EmptyClassname,
    #[error("no prompts to sample from")]
    NoPrompts,
    #[error("invalid count: {0}")]
    InvalidCount(String),
    #[error("{what} failed for {job}: {source}")]
    ClientFailure {
        what: &'static str,
        job: String,
        #[source]
        source: ClientError,
    },
    #[error("labels cover {labels} samples but features have {rows} rows")]
    LabelMismatch { rows: usize, labels: usize },
    #[error("encoder returned {got} rows for {expected} items")]
    RowCountMismatch { expected: usize, got: usize },
    #[error("manifest invariant violated: {0}")]
    InvalidManifest(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One support sample: its provenance and the generated image backing it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportRecord {
    pub class_index: usize,
    pub source_image_ref: String,
    pub caption: String,
    pub prompt: String,
    pub seed: u64,
    pub image_ref: String,
}

/// Parameters the support set was created with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreationParams {
    pub k: usize,
    pub m: usize,
    pub base_seed: u64,
    pub max_prompt_tokens: u32,
}

/// Full description of a built support set: every record in row order plus
/// the creation parameters. Record `j` corresponds to row `j` of the image
/// cache, the caption cache, and the label matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportSetManifest {
    pub dataset: String,
    pub classes: Vec<String>,
    pub records: Vec<SupportRecord>,
    pub params: CreationParams,
}

impl SupportSetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        crate::store::write_atomic(path, &bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Check the structural invariants: M records per class in contiguous
    /// ascending blocks, every prompt prefixed by its class prompt, and
    /// unique (prompt, seed) pairs within each class.
    pub fn validate(&self, dataset_tag: &str) -> Result<()> {
        let n = self.classes.len();
        let m = self.params.m;
        if self.records.len() != n * m {
            return Err(SupportError::InvalidManifest(format!(
                "{} records for {} classes x {} generations",
                self.records.len(),
                n,
                m
            )));
        }
        for (j, rec) in self.records.iter().enumerate() {
            let expected_class = j / m;
            if rec.class_index != expected_class {
                return Err(SupportError::InvalidManifest(format!(
                    "record {j} has class {} but belongs to block {expected_class}",
                    rec.class_index
                )));
            }
            let class_prompt = build_class_prompt(&self.classes[expected_class], dataset_tag)?;
            if !rec.prompt.starts_with(&class_prompt) {
                return Err(SupportError::InvalidManifest(format!(
                    "record {j} prompt does not start with its class prompt"
                )));
            }
        }
        for class in 0..n {
            let block = &self.records[class * m..(class + 1) * m];
            for (a, rec_a) in block.iter().enumerate() {
                for rec_b in &block[a + 1..] {
                    if rec_a.prompt == rec_b.prompt && rec_a.seed == rec_b.seed {
                        return Err(SupportError::InvalidManifest(format!(
                            "duplicate (prompt, seed) pair in class {class}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One planned text-to-image generation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationJob {
    pub class_index: usize,
    pub prompt_index: usize,
    pub prompt: String,
    pub seed: u64,
    pub replica: u32,
}

/// Sample `k` source image references per class, reproducibly.
///
/// A class with exactly `k` references keeps all of them in order; larger
/// classes are subsampled without replacement (original order preserved);
/// smaller classes are sampled with replacement.
pub fn sample_training_images(
    per_class_refs: &[Vec<String>],
    k: usize,
    seed: u64,
) -> Result<Vec<Vec<String>>> {
    if k == 0 {
        return Err(SupportError::InvalidCount("k must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(per_class_refs.len());
    for (class, refs) in per_class_refs.iter().enumerate() {
        if refs.is_empty() {
            return Err(SupportError::EmptyClass { class });
        }
        let mut rng = derive_stream(seed, class as u64);
        let sampled = if refs.len() == k {
            refs.clone()
        } else if refs.len() > k {
            let mut indices: Vec<usize> = (0..refs.len()).collect();
            for i in 0..k {
                let j = i + rng.next_index(indices.len() - i);
                indices.swap(i, j);
            }
            let mut picked = indices[..k].to_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| refs[i].clone()).collect()
        } else {
            (0..k)
                .map(|_| refs[rng.next_index(refs.len())].clone())
                .collect()
        };
        out.push(sampled);
    }
    Ok(out)
}

/// Class text prompt: `"A photo of <classname>."`, or `"In <classname>."`
/// for the country211 dataset. Underscores in class names become spaces.
pub fn build_class_prompt(classname: &str, dataset_tag: &str) -> Result<String> {
    if classname.is_empty() {
        return Err(SupportError::EmptyClassname);
    }
    let name = classname.replace('_', " ");
    if dataset_tag.eq_ignore_ascii_case("country211") {
        Ok(format!("In {name}."))
    } else {
        Ok(format!("A photo of {name}."))
    }
}

/// Caption-based prompt: the class prompt, a space, and the trimmed caption.
/// An empty caption yields the class prompt alone.
pub fn build_caption_prompt(class_prompt: &str, caption: &str) -> String {
    let caption = caption.trim();
    if caption.is_empty() {
        class_prompt.to_string()
    } else {
        format!("{class_prompt} {caption}")
    }
}

/// Plan `m` generations over `class_prompts` for one class.
///
/// Draws are uniform without replacement from a pool holding
/// `ceil(m / prompts)` copies of each prompt, so no duplication occurs while
/// `m <= prompts` and per-prompt use never exceeds `ceil(m / prompts)`. A
/// prompt used for the r-th time carries replica index `r - 1` and seed
/// `base_seed + (r - 1)`, which keeps every (prompt, seed) pair unique.
pub fn plan_generation(
    class_index: usize,
    class_prompts: &[String],
    m: usize,
    base_seed: u64,
) -> Result<Vec<GenerationJob>> {
    if class_prompts.is_empty() {
        return Err(SupportError::NoPrompts);
    }
    if m == 0 {
        return Err(SupportError::InvalidCount("m must be >= 1".into()));
    }
    let k = class_prompts.len();
    let copies = m.div_ceil(k);
    let mut pool: Vec<usize> = (0..k)
        .flat_map(|p| std::iter::repeat_n(p, copies))
        .collect();
    let mut rng = derive_stream(base_seed, class_index as u64);
    for i in 0..m {
        let j = i + rng.next_index(pool.len() - i);
        pool.swap(i, j);
    }
    let mut uses = vec![0u32; k];
    let jobs = pool[..m]
        .iter()
        .map(|&p| {
            let replica = uses[p];
            uses[p] += 1;
            GenerationJob {
                class_index,
                prompt_index: p,
                prompt: class_prompts[p].clone(),
                seed: base_seed + u64::from(replica),
                replica,
            }
        })
        .collect();
    Ok(jobs)
}

/// Parameters of a support-set build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportBuildConfig {
    pub dataset: String,
    pub k: usize,
    pub m: usize,
    pub base_seed: u64,
    pub max_prompt_tokens: u32,
    pub concurrency: usize,
    pub caption_instruction: String,
}

impl SupportBuildConfig {
    pub fn new(dataset: impl Into<String>, k: usize, m: usize, base_seed: u64) -> Self {
        Self {
            dataset: dataset.into(),
            k,
            m,
            base_seed,
            max_prompt_tokens: 77,
            concurrency: 4,
            caption_instruction: DEFAULT_CAPTION_INSTRUCTION.to_string(),
        }
    }
}

/// Class names with their training image references, as fed to the builder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassImageRefs {
    pub name: String,
    pub image_refs: Vec<String>,
}

/// Everything a support-set build produces, row-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportSetBundle {
    pub manifest: SupportSetManifest,
    pub f_img: FeatureMatrix,
    pub f_cap: FeatureMatrix,
    pub labels: OneHotLabels,
}

/// Run the full construction: sample K images per class, caption them,
/// build caption-based prompts, execute the generation plan, and encode the
/// paired image/caption caches with row alignment.
pub fn build_support_set(
    classes: &[ClassImageRefs],
    clients: &Clients,
    cfg: &SupportBuildConfig,
) -> Result<SupportSetBundle> {
    if classes.is_empty() {
        return Err(SupportError::InvalidCount("no classes".into()));
    }
    let per_class_refs: Vec<Vec<String>> = classes.iter().map(|c| c.image_refs.clone()).collect();
    let sampled = sample_training_images(&per_class_refs, cfg.k, cfg.base_seed)?;

    // Caption all sampled images with bounded in-flight requests; results
    // commit in (class, sample) order.
    let caption_jobs: Vec<(usize, usize, &String)> = sampled
        .iter()
        .enumerate()
        .flat_map(|(ci, refs)| refs.iter().enumerate().map(move |(ki, r)| (ci, ki, r)))
        .collect();
    let captions: Vec<String> =
        bounded_map(&caption_jobs, cfg.concurrency, |&(_, _, image_ref)| {
            let req = CaptionRequest {
                image_ref: image_ref.clone(),
                instruction: cfg.caption_instruction.clone(),
            };
            clients
                .captioner
                .caption(&req)
                .map(|resp| resp.caption)
                .map_err(|source| SupportError::ClientFailure {
                    what: "caption",
                    job: image_ref.clone(),
                    source,
                })
        })?;

    // Assemble per-class caption-based prompts and plan the generations.
    let mut jobs: Vec<GenerationJob> = Vec::with_capacity(classes.len() * cfg.m);
    let mut prompts_by_class: Vec<Vec<String>> = Vec::with_capacity(classes.len());
    let mut captions_by_class: Vec<Vec<String>> = vec![Vec::new(); classes.len()];
    let mut sources_by_class: Vec<Vec<String>> = vec![Vec::new(); classes.len()];
    for ((ci, _, image_ref), caption) in caption_jobs.iter().zip(&captions) {
        captions_by_class[*ci].push(caption.clone());
        sources_by_class[*ci].push((*image_ref).clone());
    }
    for (ci, class) in classes.iter().enumerate() {
        let class_prompt = build_class_prompt(&class.name, &cfg.dataset)?;
        let cbps: Vec<String> = captions_by_class[ci]
            .iter()
            .map(|c| build_caption_prompt(&class_prompt, c))
            .collect();
        jobs.extend(plan_generation(ci, &cbps, cfg.m, cfg.base_seed)?);
        prompts_by_class.push(cbps);
    }

    // Generate the support images, bounded concurrency, canonical order.
    let generated: Vec<String> = bounded_map(&jobs, cfg.concurrency, |job| {
        clients
            .generator
            .generate(&GenerateRequest {
                prompt: job.prompt.clone(),
                seed: job.seed,
            })
            .map(|resp| resp.image_ref)
            .map_err(|source| SupportError::ClientFailure {
                what: "generate",
                job: format!("{} (seed {})", job.prompt, job.seed),
                source,
            })
    })?;

    let records: Vec<SupportRecord> = jobs
        .iter()
        .zip(&generated)
        .map(|(job, image_ref)| SupportRecord {
            class_index: job.class_index,
            source_image_ref: sources_by_class[job.class_index][job.prompt_index].clone(),
            caption: captions_by_class[job.class_index][job.prompt_index].clone(),
            prompt: job.prompt.clone(),
            seed: job.seed,
            image_ref: image_ref.clone(),
        })
        .collect();

    // Encode both modalities; row j of each cache describes record j.
    let image_items: Vec<String> = records.iter().map(|r| r.image_ref.clone()).collect();
    let prompt_items: Vec<String> = records.iter().map(|r| r.prompt.clone()).collect();
    let f_img = encode_to_matrix(
        &*clients.encoder,
        EncodeKind::Image,
        &image_items,
        cfg.max_prompt_tokens,
    )?;
    let f_cap = encode_to_matrix(
        &*clients.encoder,
        EncodeKind::Text,
        &prompt_items,
        cfg.max_prompt_tokens,
    )?;

    let class_of_sample: Vec<usize> = records.iter().map(|r| r.class_index).collect();
    let labels = build_onehot(&class_of_sample, classes.len())?;

    let manifest = SupportSetManifest {
        dataset: cfg.dataset.clone(),
        classes: classes.iter().map(|c| c.name.clone()).collect(),
        records,
        params: CreationParams {
            k: cfg.k,
            m: cfg.m,
            base_seed: cfg.base_seed,
            max_prompt_tokens: cfg.max_prompt_tokens,
        },
    };
    manifest.validate(&cfg.dataset)?;
    Ok(SupportSetBundle {
        manifest,
        f_img,
        f_cap,
        labels,
    })
}

/// Encode `items` through the client and return a row-normalized matrix.
pub fn encode_to_matrix(
    encoder: &dyn Encoder,
    kind: EncodeKind,
    items: &[String],
    max_tokens: u32,
) -> Result<FeatureMatrix> {
    let first = items.first().cloned().unwrap_or_default();
    let resp = encoder
        .encode(&EncodeRequest {
            kind,
            items: items.to_vec(),
            max_tokens,
        })
        .map_err(|source| SupportError::ClientFailure {
            what: "encode",
            job: first,
            source,
        })?;
    if resp.rows.len() != items.len() {
        return Err(SupportError::RowCountMismatch {
            expected: items.len(),
            got: resp.rows.len(),
        });
    }
    let mut data = Vec::with_capacity(items.len() * resp.dim);
    for row in &resp.rows {
        data.extend(row.iter().map(|&v| v as f32));
    }
    let m = FeatureMatrix::new(items.len(), resp.dim, data, false)?;
    Ok(m.normalize_rows()?)
}

/// Paths written by [`persist_bundle`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportPaths {
    pub manifest: PathBuf,
    pub image_cache: PathBuf,
    pub caption_cache: PathBuf,
    pub labels: PathBuf,
}

/// Persist a bundle into `out_dir` as `manifest.json`, `img.caps`,
/// `cap.caps` (each with a `.meta.json` sidecar), and `labels.json`.
pub fn persist_bundle(
    bundle: &SupportSetBundle,
    out_dir: &Path,
    backbone: &str,
) -> Result<SupportPaths> {
    std::fs::create_dir_all(out_dir)?;
    let paths = SupportPaths {
        manifest: out_dir.join("manifest.json"),
        image_cache: out_dir.join("img.caps"),
        caption_cache: out_dir.join("cap.caps"),
        labels: out_dir.join("labels.json"),
    };
    bundle.manifest.save(&paths.manifest)?;
    save_cache(&bundle.f_img, &paths.image_cache)?;
    save_cache(&bundle.f_cap, &paths.caption_cache)?;
    let meta = CacheMeta {
        dataset: bundle.manifest.dataset.clone(),
        backbone: backbone.to_string(),
        classes: bundle.manifest.classes.clone(),
        sample_classes: bundle.labels.sample_classes().to_vec(),
        support_size: Some(bundle.manifest.params.m),
    };
    save_meta(&meta, &paths.image_cache)?;
    save_meta(&meta, &paths.caption_cache)?;
    LabelsFile {
        classes: bundle.manifest.classes.clone(),
        sample_classes: bundle.labels.sample_classes().to_vec(),
    }
    .save(&paths.labels)?;
    Ok(paths)
}

/// Few-shot cache: a seeded sample of `k` rows per class from real training
/// features, with contiguous class blocks. No captions exist in this
/// regime; see [`fewshot_caption_cache`].
pub fn build_fewshot_cache(
    train: &FeatureMatrix,
    train_classes: &[usize],
    k: usize,
    seed: u64,
) -> Result<(FeatureMatrix, OneHotLabels)> {
    if k == 0 {
        return Err(SupportError::InvalidCount("k must be >= 1".into()));
    }
    if train_classes.len() != train.rows() {
        return Err(SupportError::LabelMismatch {
            rows: train.rows(),
            labels: train_classes.len(),
        });
    }
    let n_classes = train_classes.iter().copied().max().map_or(0, |m| m + 1);
    if n_classes == 0 {
        return Err(SupportError::InvalidCount("no training samples".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (row, &class) in train_classes.iter().enumerate() {
        by_class[class].push(row);
    }
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(n_classes * k);
    let mut class_of_sample = Vec::with_capacity(n_classes * k);
    for (class, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            return Err(SupportError::EmptyClass { class });
        }
        let mut rng = derive_stream(seed, class as u64);
        let picked: Vec<usize> = if members.len() == k {
            members.clone()
        } else if members.len() > k {
            let mut indices = members.clone();
            for i in 0..k {
                let j = i + rng.next_index(indices.len() - i);
                indices.swap(i, j);
            }
            let mut p = indices[..k].to_vec();
            p.sort_unstable();
            p
        } else {
            (0..k)
                .map(|_| members[rng.next_index(members.len())])
                .collect()
        };
        for row in picked {
            rows.push(train.row(row).to_vec());
            class_of_sample.push(class);
        }
    }
    let dim = train.dim();
    let data: Vec<f32> = rows.into_iter().flatten().collect();
    let features = FeatureMatrix::new(n_classes * k, dim, data, train.is_normalized())?;
    let labels = build_onehot(&class_of_sample, n_classes)?;
    Ok((features, labels))
}

/// Caption-side stand-in for the few-shot regime: row `j` is the class text
/// prompt embedding of sample `j`'s class, so delta interpolates toward the
/// zero-shot classifier direction and delta = 0 recovers TIP-X exactly.
pub fn fewshot_caption_cache(
    class_prompt_embeddings: &FeatureMatrix,
    labels: &OneHotLabels,
) -> Result<FeatureMatrix> {
    if class_prompt_embeddings.rows() != labels.classes() {
        return Err(SupportError::LabelMismatch {
            rows: class_prompt_embeddings.rows(),
            labels: labels.classes(),
        });
    }
    let dim = class_prompt_embeddings.dim();
    let mut data = Vec::with_capacity(labels.rows() * dim);
    for j in 0..labels.rows() {
        data.extend_from_slice(class_prompt_embeddings.row(labels.class_of_row(j)));
    }
    Ok(FeatureMatrix::new(
        labels.rows(),
        dim,
        data,
        class_prompt_embeddings.is_normalized(),
    )?)
}

/// Apply `f` to every item with at most `workers` concurrent calls,
/// committing results by index. On failure the error with the lowest item
/// index is reported.
fn bounded_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let workers = workers.max(1).min(items.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    let failure: Mutex<Option<(usize, SupportError)>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= items.len() {
                    break;
                }
                if failure.lock().unwrap().is_some() {
                    break;
                }
                match f(&items[idx]) {
                    Ok(r) => results.lock().unwrap()[idx] = Some(r),
                    Err(e) => {
                        let mut slot = failure.lock().unwrap();
                        match &*slot {
                            Some((prev, _)) if *prev <= idx => {}
                            _ => *slot = Some((idx, e)),
                        }
                    }
                }
            });
        }
    });
    if let Some((_, e)) = failure.into_inner().unwrap() {
        return Err(e);
    }
    Ok(results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("all indices visited"))
        .collect())
}
