//! The `caps` command line: build support caches, run inference, sweep
//! hyperparameters, and score results.
//!
//! Every run writes a JSON run-record next to its outputs holding the full
//! argv, the crate version, and the resolved configuration, so a run can be
//! replayed from the record alone. Outputs contain no timestamps; identical
//! argv over identical inputs produce byte-identical files. Logits wall
//! time is only written when `--emit-timing` asks for it, into a separate
//! `.timing.json` sidecar.

use std::error::Error;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::clients::{ClientConfig, Clients, EncodeKind, Encoder, HttpClient, StubClients};
use crate::eval::{self, EvalReport, ReportFormat, SimilarityScope};
use crate::kernels::{self, HyperParams, LogitsMatrix, Method};
use crate::search::{self, GridSpec, SupportCache};
use crate::store::{self, CacheMeta, FeatureMatrix, LabelsFile};
use crate::support::{self, ClassImageRefs, SupportBuildConfig};

type CliResult<T> = Result<T, Box<dyn Error>>;

/// Entry point. Returns the process exit code: 0 on success, 1 on usage
/// errors, 2 on runtime errors.
pub fn run<I: IntoIterator<Item = String>>(argv: I) -> i32 {
    let argv: Vec<String> = argv.into_iter().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        // Later calls in the same process keep the first pool; that only
        // matters for in-process test harnesses.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    match dispatch(&cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = e.source();
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            2
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "caps",
    version,
    about = "Training-free vision-language adaptation over multimodal support caches"
)]
struct Cli {
    /// Cap worker parallelism (defaults to the machine's core count).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a caption-based multimodal support set through the services.
    BuildSupport(BuildSupportArgs),
    /// Build a few-shot support cache from real training features.
    BuildFewshot(BuildFewshotArgs),
    /// Compute logits for a test cache with one inference method.
    Infer(InferArgs),
    /// Exhaustively sweep hyperparameters on a validation split.
    Search(SearchArgs),
    /// Score a directory of logits caches and emit a combined report.
    Eval(EvalArgs),
    /// Average support-to-test feature similarity.
    Similarity(SimilarityArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum ModeArg {
    Zeroshot,
    Tipx,
    #[value(name = "m_adapter")]
    MAdapter,
    #[value(name = "f_variant")]
    FVariant,
}

impl From<ModeArg> for Method {
    fn from(m: ModeArg) -> Method {
        match m {
            ModeArg::Zeroshot => Method::Zeroshot,
            ModeArg::Tipx => Method::Tipx,
            ModeArg::MAdapter => Method::MAdapter,
            ModeArg::FVariant => Method::FVariant,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Args, Debug, Serialize)]
struct BuildSupportArgs {
    /// Dataset tag; controls the class prompt template.
    #[arg(long)]
    dataset: String,
    /// JSON file: {"classes": [{"name": ..., "image_refs": [...]}, ...]}.
    #[arg(long)]
    classes: PathBuf,
    /// Source training images sampled per class.
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Support images generated per class.
    #[arg(long, default_value_t = 5)]
    m: usize,
    /// Base seed; all run randomness derives from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Token budget handed to the text encoder.
    #[arg(long, default_value_t = 77)]
    max_tokens: u32,
    /// Backbone tag recorded in cache metadata.
    #[arg(long, default_value = "stub")]
    backbone: String,
    #[arg(long)]
    out_dir: PathBuf,
    /// Replace all HTTP clients with the deterministic in-process stubs.
    #[arg(long)]
    stub_clients: bool,
    #[arg(long, default_value_t = 0)]
    stub_seed: u64,
    /// Max in-flight caption/generation requests.
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    #[arg(long)]
    captioner_url: Option<String>,
    #[arg(long)]
    generator_url: Option<String>,
    #[arg(long)]
    encoder_url: Option<String>,
}

#[derive(Args, Debug, Serialize)]
struct BuildFewshotArgs {
    /// Training feature cache.
    #[arg(long)]
    train: PathBuf,
    /// Labels file for the training cache.
    #[arg(long)]
    train_labels: PathBuf,
    /// Dataset tag; controls the class prompt template.
    #[arg(long)]
    dataset: String,
    /// Shots sampled per class.
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 77)]
    max_tokens: u32,
    #[arg(long, default_value = "stub")]
    backbone: String,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    stub_clients: bool,
    #[arg(long, default_value_t = 0)]
    stub_seed: u64,
    #[arg(long)]
    encoder_url: Option<String>,
    /// Normalize the training features when their flag is unset.
    #[arg(long)]
    normalize: bool,
}

#[derive(Args, Debug, Serialize)]
struct InferArgs {
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Test feature cache.
    #[arg(long)]
    test: PathBuf,
    /// Text classifier cache (one row per class).
    #[arg(long)]
    classifier: PathBuf,
    /// Support image cache; required for tipx, m_adapter, and f_variant.
    #[arg(long)]
    img: Option<PathBuf>,
    /// Support caption cache; required for m_adapter and f_variant.
    #[arg(long)]
    cap: Option<PathBuf>,
    /// Support labels file; required for every mode but zeroshot.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    #[arg(long, default_value_t = 100.0)]
    tau: f64,
    /// Output logits cache (rows = test samples, dim = classes).
    #[arg(long)]
    out: PathBuf,
    /// Normalize input features when their flag is unset.
    #[arg(long)]
    normalize: bool,
    /// Write a `.timing.json` sidecar with the logits wall time.
    #[arg(long)]
    emit_timing: bool,
}

#[derive(Args, Debug, Serialize)]
struct SearchArgs {
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Validation feature cache.
    #[arg(long)]
    val: PathBuf,
    /// Labels file for the validation split.
    #[arg(long)]
    val_labels: PathBuf,
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long)]
    img: PathBuf,
    #[arg(long)]
    cap: Option<PathBuf>,
    /// Support labels file.
    #[arg(long)]
    labels: PathBuf,
    /// Grid preset: default, delta-sweep, or fixed.
    #[arg(long, default_value = "default")]
    grid: String,
    /// JSON GridSpec file; takes precedence over --grid.
    #[arg(long)]
    grid_file: Option<PathBuf>,
    #[arg(long, default_value_t = 100.0)]
    tau: f64,
    /// Output CSV log; a `.result.json` sidecar records the best point.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    normalize: bool,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    /// Directory of logits caches; each `.caps` file becomes a report row.
    #[arg(long)]
    logits_dir: PathBuf,
    /// Test labels file.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,
}

#[derive(Args, Debug, Serialize)]
struct SimilarityArgs {
    /// Support feature cache.
    #[arg(long)]
    support: PathBuf,
    #[arg(long)]
    support_labels: PathBuf,
    /// Test feature cache.
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    test_labels: PathBuf,
    /// Class-agnostic pairwise mean instead of the per-class macro-average.
    #[arg(long)]
    global: bool,
    /// Optional JSON output path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    normalize: bool,
}

fn dispatch(cli: &Cli, argv: &[String]) -> CliResult<()> {
    match &cli.command {
        Command::BuildSupport(args) => build_support(args, argv),
        Command::BuildFewshot(args) => build_fewshot(args, argv),
        Command::Infer(args) => infer(args, argv),
        Command::Search(args) => run_search(args, argv),
        Command::Eval(args) => run_eval(args, argv),
        Command::Similarity(args) => similarity(args, argv),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct RunRecord<'a, C: Serialize> {
    argv: &'a [String],
    version: &'static str,
    config: &'a C,
}

fn write_run_record<C: Serialize>(path: &Path, argv: &[String], config: &C) -> CliResult<()> {
    let record = RunRecord {
        argv,
        version: env!("CARGO_PKG_VERSION"),
        config,
    };
    let mut bytes = serde_json::to_vec_pretty(&record)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TimingFile {
    wall_time_s: f64,
}

fn load_features(path: &Path, normalize: bool) -> CliResult<FeatureMatrix> {
    let m = store::load_cache(path)?;
    if m.is_normalized() {
        Ok(m)
    } else if normalize {
        Ok(m.normalize_rows()?)
    } else {
        Err(format!(
            "{} is not row-normalized; pass --normalize to normalize on load",
            path.display()
        )
        .into())
    }
}

fn matrix_to_logits(m: &FeatureMatrix) -> LogitsMatrix {
    LogitsMatrix {
        rows: m.rows(),
        classes: m.dim(),
        data: m.data().iter().map(|&v| f64::from(v)).collect(),
    }
}

fn logits_to_matrix(l: &LogitsMatrix) -> CliResult<FeatureMatrix> {
    Ok(FeatureMatrix::new(
        l.rows,
        l.classes,
        l.data.iter().map(|&v| v as f32).collect(),
        false,
    )?)
}

fn endpoint(flag: &Option<String>, env_key: &str, service: &str) -> CliResult<ClientConfig> {
    let url = std::env::var(env_key)
        .ok()
        .filter(|v| !v.is_empty())
        .or_else(|| flag.clone())
        .ok_or_else(|| {
            format!("no {service} endpoint: set {env_key} or pass the corresponding flag")
        })?;
    Ok(ClientConfig::new(url))
}

fn make_clients(
    stub: bool,
    stub_seed: u64,
    captioner_url: &Option<String>,
    generator_url: &Option<String>,
    encoder_url: &Option<String>,
) -> CliResult<Clients> {
    if stub {
        return Ok(Clients::stub(stub_seed));
    }
    Ok(Clients::http(
        endpoint(captioner_url, "CAPS_CAPTIONER_URL", "captioner")?,
        endpoint(generator_url, "CAPS_GENERATOR_URL", "generator")?,
        endpoint(encoder_url, "CAPS_ENCODER_URL", "encoder")?,
    ))
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct TrainingSetFile {
    classes: Vec<ClassImageRefs>,
}

fn build_support(args: &BuildSupportArgs, argv: &[String]) -> CliResult<()> {
    let training: TrainingSetFile = serde_json::from_slice(&std::fs::read(&args.classes)?)?;
    let clients = make_clients(
        args.stub_clients,
        args.stub_seed,
        &args.captioner_url,
        &args.generator_url,
        &args.encoder_url,
    )?;
    let mut cfg = SupportBuildConfig::new(&args.dataset, args.k, args.m, args.seed);
    cfg.max_prompt_tokens = args.max_tokens;
    cfg.concurrency = args.concurrency;
    let bundle = support::build_support_set(&training.classes, &clients, &cfg)?;
    let paths = support::persist_bundle(&bundle, &args.out_dir, &args.backbone)?;
    write_run_record(&args.out_dir.join("run-record.json"), argv, args)?;
    eprintln!(
        "built support set: {} records -> {}",
        bundle.manifest.records.len(),
        paths.manifest.display()
    );
    Ok(())
}

fn build_fewshot(args: &BuildFewshotArgs, argv: &[String]) -> CliResult<()> {
    let train = load_features(&args.train, args.normalize)?;
    let labels_file = LabelsFile::load(&args.train_labels)?;
    if labels_file.sample_classes.len() != train.rows() {
        return Err(format!(
            "labels cover {} samples but the training cache has {} rows",
            labels_file.sample_classes.len(),
            train.rows()
        )
        .into());
    }
    let (f_img, labels) =
        support::build_fewshot_cache(&train, &labels_file.sample_classes, args.k, args.seed)?;

    // Caption side: the class text prompt embedding, repeated per sample.
    let encoder: Box<dyn Encoder> = if args.stub_clients {
        Box::new(StubClients::new(args.stub_seed))
    } else {
        Box::new(HttpClient::new(endpoint(
            &args.encoder_url,
            "CAPS_ENCODER_URL",
            "encoder",
        )?))
    };
    let prompts: Vec<String> = labels_file
        .classes
        .iter()
        .map(|name| support::build_class_prompt(name, &args.dataset))
        .collect::<Result<_, _>>()?;
    let prompt_embeddings =
        support::encode_to_matrix(&*encoder, EncodeKind::Text, &prompts, args.max_tokens)?;
    if prompt_embeddings.dim() != train.dim() {
        return Err(format!(
            "encoder dim {} does not match training feature dim {}",
            prompt_embeddings.dim(),
            train.dim()
        )
        .into());
    }
    let f_cap = support::fewshot_caption_cache(&prompt_embeddings, &labels)?;

    std::fs::create_dir_all(&args.out_dir)?;
    let img_path = args.out_dir.join("img.caps");
    let cap_path = args.out_dir.join("cap.caps");
    store::save_cache(&f_img, &img_path)?;
    store::save_cache(&f_cap, &cap_path)?;
    let meta = CacheMeta {
        dataset: args.dataset.clone(),
        backbone: args.backbone.clone(),
        classes: labels_file.classes.clone(),
        sample_classes: labels.sample_classes().to_vec(),
        support_size: Some(args.k),
    };
    store::save_meta(&meta, &img_path)?;
    store::save_meta(&meta, &cap_path)?;
    LabelsFile {
        classes: labels_file.classes.clone(),
        sample_classes: labels.sample_classes().to_vec(),
    }
    .save(&args.out_dir.join("labels.json"))?;
    write_run_record(&args.out_dir.join("run-record.json"), argv, args)?;
    eprintln!(
        "built few-shot cache: {} rows -> {}",
        f_img.rows(),
        img_path.display()
    );
    Ok(())
}

fn infer(args: &InferArgs, argv: &[String]) -> CliResult<()> {
    let f_test = load_features(&args.test, args.normalize)?;
    let w = load_features(&args.classifier, args.normalize)?;
    let hp = HyperParams::new(args.alpha, args.beta, args.gamma, args.delta)?.with_tau(args.tau)?;
    let method = Method::from(args.mode);

    let need = |opt: &Option<PathBuf>, what: &str| -> CliResult<PathBuf> {
        opt.clone()
            .ok_or_else(|| format!("--{what} is required for mode {}", method.name()).into())
    };

    let mut support_labels: Option<LabelsFile> = None;
    let start;
    let logits = match method {
        Method::Zeroshot => {
            start = Instant::now();
            kernels::zeroshot_logits(&f_test, &w, args.tau)?
        }
        Method::Tipx => {
            let f_img = load_features(&need(&args.img, "img")?, args.normalize)?;
            let labels_file = LabelsFile::load(&need(&args.labels, "labels")?)?;
            let labels = labels_file.onehot()?;
            support_labels = Some(labels_file);
            start = Instant::now();
            kernels::tipx_logits(&f_test, &w, &f_img, &labels, &hp)?
        }
        Method::MAdapter | Method::FVariant => {
            let f_img = load_features(&need(&args.img, "img")?, args.normalize)?;
            let f_cap = load_features(&need(&args.cap, "cap")?, args.normalize)?;
            let labels_file = LabelsFile::load(&need(&args.labels, "labels")?)?;
            let labels = labels_file.onehot()?;
            support_labels = Some(labels_file);
            start = Instant::now();
            if method == Method::MAdapter {
                kernels::m_adapter_logits(&f_test, &w, &f_img, &f_cap, &labels, &hp)?
            } else {
                kernels::f_variant_logits(&f_test, &w, &f_img, &f_cap, &labels, &hp)?
            }
        }
    };
    let wall_time_s = start.elapsed().as_secs_f64();

    store::save_cache(&logits_to_matrix(&logits)?, &args.out)?;
    // Dataset and backbone tags come from the test cache's sidecar when it
    // has one, else from the support image cache.
    let mut test_meta = store::load_meta(&args.test)?;
    if test_meta.is_none() {
        if let Some(img) = &args.img {
            test_meta = store::load_meta(img)?;
        }
    }
    let classes = support_labels
        .as_ref()
        .map(|l| l.classes.clone())
        .or_else(|| test_meta.as_ref().map(|m| m.classes.clone()))
        .unwrap_or_default();
    let support_size = support_labels.as_ref().map(|l| {
        if l.classes.is_empty() {
            0
        } else {
            l.sample_classes.len() / l.classes.len()
        }
    });
    store::save_meta(
        &CacheMeta {
            dataset: test_meta
                .as_ref()
                .map_or(String::new(), |m| m.dataset.clone()),
            backbone: test_meta
                .as_ref()
                .map_or(String::new(), |m| m.backbone.clone()),
            classes,
            sample_classes: Vec::new(),
            support_size,
        },
        &args.out,
    )?;
    if args.emit_timing {
        let timing = serde_json::to_vec_pretty(&TimingFile { wall_time_s })?;
        std::fs::write(args.out.with_extension("timing.json"), timing)?;
    }
    write_run_record(&args.out.with_extension("run.json"), argv, args)?;
    eprintln!(
        "{}: {} test rows x {} classes in {:.3}s -> {}",
        method.name(),
        logits.rows,
        logits.classes,
        wall_time_s,
        args.out.display()
    );
    Ok(())
}

fn parse_grid(args: &SearchArgs) -> CliResult<Vec<HyperParams>> {
    let grid = if let Some(path) = &args.grid_file {
        let spec: GridSpec = serde_json::from_slice(&std::fs::read(path)?)?;
        search::make_grid(&spec)?
    } else {
        match args.grid.as_str() {
            "default" => search::make_grid(&GridSpec::default_grid())?,
            "delta-sweep" => search::make_grid(&GridSpec::delta_sweep())?,
            "fixed" => vec![HyperParams::new(0.1, 1.0, 0.1, 0.1)?],
            other => {
                return Err(format!(
                    "unknown grid preset {other:?} (expected default, delta-sweep, or fixed)"
                )
                .into())
            }
        }
    };
    grid.into_iter()
        .map(|hp| hp.with_tau(args.tau).map_err(Into::into))
        .collect()
}

fn run_search(args: &SearchArgs, argv: &[String]) -> CliResult<()> {
    let val = load_features(&args.val, args.normalize)?;
    let val_labels = LabelsFile::load(&args.val_labels)?;
    let w = load_features(&args.classifier, args.normalize)?;
    let f_img = load_features(&args.img, args.normalize)?;
    let f_cap = match &args.cap {
        Some(path) => Some(load_features(path, args.normalize)?),
        None => None,
    };
    let labels = LabelsFile::load(&args.labels)?.onehot()?;
    let grid = parse_grid(args)?;
    let cache = SupportCache {
        w: &w,
        f_img: &f_img,
        f_cap: f_cap.as_ref(),
        labels: &labels,
    };
    let result = search::search(
        &val,
        &val_labels.sample_classes,
        &cache,
        &grid,
        Method::from(args.mode),
    )?;
    search::write_search_log(&result, &args.out)?;

    #[derive(Serialize)]
    struct BestFile<'a> {
        best: &'a HyperParams,
        best_accuracy: f64,
        evaluations: usize,
    }
    let mut bytes = serde_json::to_vec_pretty(&BestFile {
        best: &result.best,
        best_accuracy: result.best_accuracy,
        evaluations: result.evaluations,
    })?;
    bytes.push(b'\n');
    std::fs::write(args.out.with_extension("result.json"), bytes)?;
    write_run_record(&args.out.with_extension("run.json"), argv, args)?;
    eprintln!(
        "searched {} points; best accuracy {:.4} at alpha={} beta={} gamma={} delta={}",
        result.evaluations,
        result.best_accuracy,
        result.best.alpha,
        result.best.beta,
        result.best.gamma,
        result.best.delta
    );
    Ok(())
}

fn run_eval(args: &EvalArgs, argv: &[String]) -> CliResult<()> {
    let labels_file = LabelsFile::load(&args.labels)?;
    let mut cache_paths: Vec<PathBuf> = std::fs::read_dir(&args.logits_dir)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "caps"))
        .collect();
    cache_paths.sort();
    if cache_paths.is_empty() {
        return Err(format!("no .caps files in {}", args.logits_dir.display()).into());
    }
    let n_classes = labels_file.classes.len();
    let mut reports = Vec::with_capacity(cache_paths.len());
    for path in &cache_paths {
        let logits = matrix_to_logits(&store::load_cache(path)?);
        if n_classes != 0 && logits.classes != n_classes {
            return Err(format!(
                "{} has {} classes but the labels file has {}",
                path.display(),
                logits.classes,
                n_classes
            )
            .into());
        }
        let top1 = eval::top1_accuracy(&logits, &labels_file.sample_classes)?;
        let per_class =
            eval::per_class_accuracy(&logits, &labels_file.sample_classes, logits.classes)?;
        let meta = store::load_meta(path)?;
        let timing_path = path.with_extension("timing.json");
        let wall_time_s = if timing_path.exists() {
            serde_json::from_slice::<TimingFile>(&std::fs::read(&timing_path)?)?.wall_time_s
        } else {
            0.0
        };
        reports.push(EvalReport {
            method: path
                .file_stem()
                .map_or_else(String::new, |s| s.to_string_lossy().into_owned()),
            backbone: meta.as_ref().map_or(String::new(), |m| m.backbone.clone()),
            dataset: meta.as_ref().map_or(String::new(), |m| m.dataset.clone()),
            support_size: meta.as_ref().and_then(|m| m.support_size).unwrap_or(0),
            top1,
            per_class,
            similarity: None,
            wall_time_s,
        });
    }
    let format = match args.format {
        FormatArg::Csv => ReportFormat::Csv,
        FormatArg::Json => ReportFormat::Json,
    };
    eval::emit_report(&reports, &args.out, format)?;
    write_run_record(&args.out.with_extension("run.json"), argv, args)?;
    eprintln!(
        "evaluated {} logits cache(s) -> {}",
        reports.len(),
        args.out.display()
    );
    Ok(())
}

fn similarity(args: &SimilarityArgs, argv: &[String]) -> CliResult<()> {
    let f_support = load_features(&args.support, args.normalize)?;
    let support_labels = LabelsFile::load(&args.support_labels)?;
    let f_test = load_features(&args.test, args.normalize)?;
    let test_labels = LabelsFile::load(&args.test_labels)?;
    let scope = if args.global {
        SimilarityScope::Global
    } else {
        SimilarityScope::PerClass
    };
    let value = eval::support_similarity(
        &f_support,
        &support_labels.sample_classes,
        &f_test,
        &test_labels.sample_classes,
        scope,
    )?;
    println!("{value:.2}");
    if let Some(out) = &args.out {
        #[derive(Serialize)]
        struct SimilarityFile {
            similarity_percent: f64,
            scope: &'static str,
        }
        let mut bytes = serde_json::to_vec_pretty(&SimilarityFile {
            similarity_percent: value,
            scope: if args.global { "global" } else { "per_class" },
        })?;
        bytes.push(b'\n');
        std::fs::write(out, bytes)?;
        write_run_record(&out.with_extension("run.json"), argv, args)?;
    }
    Ok(())
}
