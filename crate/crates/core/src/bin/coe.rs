use std::collections::HashMap;
use std::fmt::Display;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use coe::cemb::{load_index, read_cemb, save_index};
use coe::corpus::{load_corpus_with_profile, resolve_profile, BUILTIN_PROFILES};
use coe::eval::{self, MetricsReport, SweepPoint};
use coe::index::{build_index, EmbeddingVector, FusedIndex, DEFAULT_K};
use coe::lmm::{EndpointConfig, GenerationParams, HttpTransport, LmmClient, StubScript, StubTransport, Transport};
use coe::pipeline::{fuse_queries, read_checkpoint, write_results, Pipeline, PipelineResult, RunError};
use coe::{AblationConfig, FusionConfig, LabeledCorpus};

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;
const DEFAULT_PARALLELISM: usize = 4;
const DEFAULT_RATIO: &str = "4:1";
const LOCK_FILE: &str = ".coe.lock";

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

fn usage(message: impl Display) -> CliError {
    CliError {
        code: EXIT_USAGE,
        message: message.to_string(),
    }
}

fn runtime(message: impl Display) -> CliError {
    CliError {
        code: EXIT_RUNTIME,
        message: message.to_string(),
    }
}

impl From<eval::EvalError> for CliError {
    fn from(e: eval::EvalError) -> Self {
        runtime(e)
    }
}

type CliResult<T> = Result<T, CliError>;

/// Chain-of-evolution hateful meme classification with a multimodal LLM.
#[derive(Parser, Debug)]
#[command(name = "coe", version)]
struct Cli {
    /// More log output (-v info, -vv debug)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fuse pool embeddings and write a CIDX index
    BuildIndex(BuildIndexArgs),
    /// Classify the test split with one component configuration
    Run(RunArgs),
    /// Run the six ablation configurations and emit the delta table
    Ablate(AblateArgs),
    /// Run once per neighbor count and emit a per-k CSV
    SweepK(SweepArgs),
    /// Re-render reports from stored checkpoints without querying any model
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct BuildIndexArgs {
    /// Corpus JSONL file (id, img, text, label, split)
    #[arg(long, value_name = "PATH")]
    corpus: PathBuf,
    /// Built-in profile (FHM, MAMI, HarM) or a profile JSON file
    #[arg(long, value_name = "NAME|PATH", default_value = "FHM")]
    profile: String,
    /// CEMB file with text embeddings
    #[arg(long, value_name = "PATH")]
    text_emb: PathBuf,
    /// CEMB file with image embeddings
    #[arg(long, value_name = "PATH")]
    image_emb: PathBuf,
    /// text:image fusion weight ratio
    #[arg(long, value_name = "T:I", default_value = DEFAULT_RATIO)]
    ratio: String,
    /// Output CIDX file
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Default)]
struct InputArgs {
    /// JSON run manifest; flags override its fields
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
    /// Corpus JSONL file (id, img, text, label, split)
    #[arg(long, value_name = "PATH")]
    corpus: Option<PathBuf>,
    /// Built-in profile (FHM, MAMI, HarM) or a profile JSON file
    #[arg(long, value_name = "NAME|PATH")]
    profile: Option<String>,
    /// CEMB file with text embeddings of pool and test memes
    #[arg(long, value_name = "PATH")]
    text_emb: Option<PathBuf>,
    /// CEMB file with image embeddings of pool and test memes
    #[arg(long, value_name = "PATH")]
    image_emb: Option<PathBuf>,
    /// Prebuilt CIDX index; built from the embeddings when omitted
    #[arg(long, value_name = "PATH")]
    index: Option<PathBuf>,
    /// text:image fusion weight ratio [default: 4:1]
    #[arg(long, value_name = "T:I")]
    ratio: Option<String>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Model backend [default: http]
    #[arg(long, value_enum)]
    backend: Option<Backend>,
    /// Response script for the stub backend
    #[arg(long, value_name = "PATH")]
    script: Option<PathBuf>,
    /// Chat-completion base URL, e.g. http://localhost:8000/v1
    #[arg(long, value_name = "URL")]
    base_url: Option<String>,
    /// Model name sent to the endpoint
    #[arg(long)]
    model: Option<String>,
    /// Environment variable holding the bearer token [default: COE_API_KEY]
    #[arg(long, value_name = "VAR")]
    auth_env: Option<String>,
    /// Generation preset for the extraction call [default: mmicl-eie]
    #[arg(long, value_name = "NAME")]
    eie_preset: Option<String>,
    /// Generation preset for the final call [default: mmicl-final]
    #[arg(long, value_name = "NAME")]
    final_preset: Option<String>,
    /// Memes classified concurrently [default: 4]
    #[arg(long, value_name = "N")]
    parallelism: Option<usize>,
    /// Seed for neighbor sampling when retrieval is off [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Directory relative image paths resolve against [default: corpus directory]
    #[arg(long, value_name = "DIR")]
    image_root: Option<PathBuf>,
    /// Send neighbor captions without their images in the extraction call
    #[arg(long)]
    text_only_neighbors: bool,
    /// Continue from the checkpoint in the output directory
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug, Clone, Default)]
struct ToggleArgs {
    /// Disable evolutionary pair mining (similarity retrieval)
    #[arg(long)]
    no_epm: bool,
    /// Disable evolution information extraction
    #[arg(long)]
    no_eie: bool,
    /// Disable the contextual relevance amplifier
    #[arg(long)]
    no_cra: bool,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    toggles: ToggleArgs,
    /// Number of evolutionary neighbors [default: 5]
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Number of evolutionary neighbors [default: 5]
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    toggles: ToggleArgs,
    /// Neighbor counts to evaluate
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,7,9")]
    ks: Vec<usize>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Output directory of an earlier run, ablate or sweep-k
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Corpus to score against [default: the one recorded for the run]
    #[arg(long, value_name = "PATH")]
    corpus: Option<PathBuf>,
    /// Profile to load the corpus with [default: the one recorded for the run]
    #[arg(long, value_name = "NAME|PATH")]
    profile: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Backend {
    Http,
    Stub,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestAblation {
    use_epm: Option<bool>,
    use_eie: Option<bool>,
    use_cra: Option<bool>,
    k: Option<usize>,
    random_seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEndpoint {
    base_url: Option<String>,
    model: Option<String>,
    auth_env: Option<String>,
    eie_preset: Option<String>,
    final_preset: Option<String>,
}

/// Run settings read from `--manifest`. Relative paths are taken relative
/// to the manifest's directory.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunManifest {
    corpus: Option<PathBuf>,
    profile: Option<String>,
    text_embeddings: Option<PathBuf>,
    image_embeddings: Option<PathBuf>,
    index: Option<PathBuf>,
    ratio: Option<String>,
    backend: Option<Backend>,
    script: Option<PathBuf>,
    #[serde(default)]
    endpoint: ManifestEndpoint,
    #[serde(default)]
    ablation: ManifestAblation,
    parallelism: Option<usize>,
    output_dir: Option<PathBuf>,
    image_root: Option<PathBuf>,
    text_only_neighbors: Option<bool>,
}

impl RunManifest {
    fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("manifest {}: {e}", path.display())))?;
        let mut m: RunManifest =
            serde_json::from_str(&text).map_err(|e| usage(format!("manifest {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut m.corpus,
            &mut m.text_embeddings,
            &mut m.image_embeddings,
            &mut m.index,
            &mut m.script,
            &mut m.output_dir,
            &mut m.image_root,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(profile) = &mut m.profile {
            if profile.ends_with(".json") && Path::new(profile).is_relative() {
                *profile = base.join(&*profile).display().to_string();
            }
        }
        Ok(m)
    }
}

/// Fully resolved configuration of one run, echoed at startup and stored as
/// `run.json` next to its checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunConfig {
    corpus: PathBuf,
    profile: String,
    text_embeddings: Option<PathBuf>,
    image_embeddings: Option<PathBuf>,
    index: Option<PathBuf>,
    ratio: String,
    backend: Backend,
    script: Option<PathBuf>,
    endpoint: Option<EndpointConfig>,
    eie_preset: String,
    final_preset: String,
    parallelism: usize,
    output_dir: PathBuf,
    image_root: PathBuf,
    text_only_neighbors: bool,
    ablation: AblationConfig,
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} not found: {}", path.display())))
    }
}

fn resolve(input: &InputArgs, toggles: &ToggleArgs, k: Option<usize>, needs_embeddings: bool) -> CliResult<RunConfig> {
    let m = match &input.manifest {
        Some(path) => RunManifest::load(path)?,
        None => RunManifest::default(),
    };
    let a = &m.ablation;
    let ablation = AblationConfig {
        use_epm: !toggles.no_epm && a.use_epm.unwrap_or(true),
        use_eie: !toggles.no_eie && a.use_eie.unwrap_or(true),
        use_cra: !toggles.no_cra && a.use_cra.unwrap_or(true),
        k: k.or(a.k).unwrap_or(DEFAULT_K),
        random_seed: input.seed.or(a.random_seed).unwrap_or(0),
    };
    if ablation.k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    let corpus = input
        .corpus
        .clone()
        .or(m.corpus)
        .ok_or_else(|| usage("no corpus given (--corpus or manifest \"corpus\")"))?;
    require_file(&corpus, "corpus")?;
    let profile = input
        .profile
        .clone()
        .or(m.profile)
        .ok_or_else(|| usage(format!("no profile given; use one of {} or a JSON file", BUILTIN_PROFILES.join(", "))))?;
    let output_dir = input
        .out
        .clone()
        .or(m.output_dir)
        .ok_or_else(|| usage("no output directory given (--out or manifest \"output_dir\")"))?;
    let ratio = input.ratio.clone().or(m.ratio).unwrap_or_else(|| DEFAULT_RATIO.into());
    parse_fusion(&ratio)?;

    let text_embeddings = input.text_emb.clone().or(m.text_embeddings);
    let image_embeddings = input.image_emb.clone().or(m.image_embeddings);
    let index = input.index.clone().or(m.index);
    if needs_embeddings || ablation.use_epm {
        let text = text_embeddings
            .as_ref()
            .ok_or_else(|| usage("retrieval needs --text-emb (or manifest \"text_embeddings\")"))?;
        let image = image_embeddings
            .as_ref()
            .ok_or_else(|| usage("retrieval needs --image-emb (or manifest \"image_embeddings\")"))?;
        require_file(text, "text embedding file")?;
        require_file(image, "image embedding file")?;
        if let Some(index) = &index {
            require_file(index, "index file")?;
        }
    }

    let backend = input.backend.or(m.backend).unwrap_or(Backend::Http);
    let script = input.script.clone().or(m.script);
    let ep = m.endpoint;
    let eie_preset = input.eie_preset.clone().or(ep.eie_preset).unwrap_or_else(|| "mmicl-eie".into());
    let final_preset = input
        .final_preset
        .clone()
        .or(ep.final_preset)
        .unwrap_or_else(|| "mmicl-final".into());
    for name in [&eie_preset, &final_preset] {
        if GenerationParams::preset(name).is_none() {
            return Err(usage(format!(
                "unknown generation preset {name:?}; available: {}",
                GenerationParams::PRESETS.join(", ")
            )));
        }
    }
    let endpoint = match backend {
        Backend::Stub => {
            let script = script
                .as_ref()
                .ok_or_else(|| usage("--backend stub needs --script"))?;
            require_file(script, "stub script")?;
            None
        }
        Backend::Http => {
            let base_url = input
                .base_url
                .clone()
                .or(ep.base_url)
                .ok_or_else(|| usage("--backend http needs --base-url"))?;
            let model = input
                .model
                .clone()
                .or(ep.model)
                .ok_or_else(|| usage("--backend http needs --model"))?;
            let mut cfg = EndpointConfig::new(base_url, model);
            if let Some(var) = input.auth_env.clone().or(ep.auth_env) {
                cfg.auth_env = var;
            }
            cfg.eie_preset = eie_preset.clone();
            cfg.final_preset = final_preset.clone();
            Some(cfg)
        }
    };
    let parallelism = input.parallelism.or(m.parallelism).unwrap_or(DEFAULT_PARALLELISM);
    if parallelism == 0 {
        return Err(usage("--parallelism must be at least 1"));
    }
    let image_root = input
        .image_root
        .clone()
        .or(m.image_root)
        .unwrap_or_else(|| corpus.parent().map(Path::to_path_buf).unwrap_or_default());
    Ok(RunConfig {
        corpus,
        profile,
        text_embeddings,
        image_embeddings,
        index,
        ratio,
        backend,
        script,
        endpoint,
        eie_preset,
        final_preset,
        parallelism,
        output_dir,
        image_root,
        text_only_neighbors: input.text_only_neighbors || m.text_only_neighbors.unwrap_or(false),
        ablation,
    })
}

fn parse_fusion(ratio: &str) -> CliResult<FusionConfig> {
    let (text_weight, image_weight) = FusionConfig::parse_ratio(ratio)
        .ok_or_else(|| usage(format!("bad --ratio {ratio:?}; expected text:image, e.g. 4:1")))?;
    let fusion = FusionConfig {
        text_weight,
        image_weight,
        normalize: true,
    };
    fusion.validate().map_err(|e| usage(format!("bad --ratio {ratio:?}: {e}")))?;
    Ok(fusion)
}

fn load_corpus(path: &Path, profile: &str) -> CliResult<LabeledCorpus> {
    let profile = resolve_profile(profile).map_err(|e| usage(format!("profile {profile}: {e}")))?;
    for w in coe::prompt::check_instruction_budget(&profile) {
        log::warn!("profile {} is {} words, over the {}-word budget", w.field, w.words, coe::prompt::WORD_BUDGET);
    }
    load_corpus_with_profile(path, profile).map_err(|e| usage(format!("corpus {}: {e}", path.display())))
}

fn load_embeddings(path: &Path) -> CliResult<HashMap<String, EmbeddingVector>> {
    read_cemb(path)
        .map(|t| t.to_map())
        .map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Exclusive claim on an output directory, released on drop.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(runtime(format!(
                "{} is in use by another run (delete {} if that run is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(runtime(format!("cannot write {}: {e}", path.display()))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Inputs shared by every run of one command invocation.
struct Loaded {
    corpus: LabeledCorpus,
    retrieval: Option<(FusedIndex, HashMap<String, EmbeddingVector>)>,
    client: LmmClient,
    stub: Option<Arc<StubTransport>>,
    eie_params: GenerationParams,
    final_params: GenerationParams,
}

fn load_inputs(cfg: &RunConfig, needs_retrieval: bool) -> CliResult<Loaded> {
    let corpus = load_corpus(&cfg.corpus, &cfg.profile)?;
    let retrieval = if needs_retrieval {
        let fusion = parse_fusion(&cfg.ratio)?;
        let text = load_embeddings(cfg.text_embeddings.as_ref().unwrap())?;
        let image = load_embeddings(cfg.image_embeddings.as_ref().unwrap())?;
        let index = match &cfg.index {
            Some(path) => {
                let index = load_index(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
                if index.fusion() != fusion {
                    return Err(usage(format!(
                        "{} was fused with {}:{}, not --ratio {}",
                        path.display(),
                        index.fusion().text_weight,
                        index.fusion().image_weight,
                        cfg.ratio
                    )));
                }
                index
            }
            None => build_index(&corpus, &text, &image, &fusion).map_err(usage)?,
        };
        let queries = fuse_queries(&corpus, &text, &image, &fusion).map_err(usage)?;
        if let Some(missing) = corpus.test().find(|r| !queries.contains_key(&r.id)) {
            return Err(usage(format!(
                "test meme {:?} has no text or image embedding",
                missing.id
            )));
        }
        Some((index, queries))
    } else {
        None
    };
    let (transport, stub): (Arc<dyn Transport>, _) = match cfg.backend {
        Backend::Stub => {
            let script = StubScript::from_json_file(cfg.script.as_ref().unwrap()).map_err(usage)?;
            let stub = Arc::new(StubTransport::new(script));
            (stub.clone(), Some(stub))
        }
        Backend::Http => (Arc::new(HttpTransport::new(cfg.endpoint.clone().unwrap())), None),
    };
    Ok(Loaded {
        corpus,
        retrieval,
        client: LmmClient::new(transport),
        stub,
        eie_params: GenerationParams::preset(&cfg.eie_preset).unwrap(),
        final_params: GenerationParams::preset(&cfg.final_preset).unwrap(),
    })
}

fn echo_config(cfg: &RunConfig) {
    eprintln!("config: {}", serde_json::to_string(cfg).unwrap());
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).unwrap();
    text.push('\n');
    fs::write(path, text).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn single_report(metrics: &MetricsReport) -> String {
    eval::ablation_markdown(&eval::ablation_report(std::slice::from_ref(metrics)))
}

fn summary_line(m: &MetricsReport) -> String {
    let auc = m.auc.map(|a| format!("{:.1}", a * 100.0)).unwrap_or_else(|| "n/a".into());
    format!(
        "{}: ACC {:.1} AUC {auc} (n={}, unparseable={})",
        m.config_echo.label(),
        m.accuracy * 100.0,
        m.n,
        m.unparseable_count
    )
}

/// Scores results when every one has a label; logs why not otherwise.
fn score(results: &[PipelineResult], corpus: &LabeledCorpus, ablation: &AblationConfig) -> Option<MetricsReport> {
    match eval::metrics(results, corpus, ablation) {
        Ok(m) => Some(m),
        Err(e) => {
            log::warn!("metrics skipped: {e}");
            None
        }
    }
}

/// Runs one configuration into `dir` and returns its results in corpus order.
fn execute(cfg: &RunConfig, loaded: &Loaded, dir: &Path, resume: bool) -> CliResult<Vec<PipelineResult>> {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
    let checkpoint = dir.join("checkpoint.jsonl");
    let run_json = dir.join("run.json");
    if checkpoint.exists() {
        if !resume {
            return Err(usage(format!(
                "{} exists; pass --resume to continue it or choose another --out",
                checkpoint.display()
            )));
        }
        if let Ok(text) = fs::read_to_string(&run_json) {
            let previous: RunConfig = serde_json::from_str(&text)
                .map_err(|e| usage(format!("{}: {e}", run_json.display())))?;
            if previous.ablation != cfg.ablation {
                return Err(usage(format!(
                    "checkpoint in {} was made with {}, not {}",
                    dir.display(),
                    serde_json::to_string(&previous.ablation).unwrap(),
                    serde_json::to_string(&cfg.ablation).unwrap()
                )));
            }
        }
    }
    let cfg = RunConfig {
        output_dir: dir.to_path_buf(),
        ..cfg.clone()
    };
    write_json(&run_json, &cfg)?;

    let mut pipeline = Pipeline::new(&loaded.corpus, &loaded.client)
        .with_params(loaded.eie_params.clone(), loaded.final_params.clone())
        .with_image_root(&cfg.image_root)
        .text_only_neighbors(cfg.text_only_neighbors);
    if let Some((index, queries)) = &loaded.retrieval {
        pipeline = pipeline.with_index(index, queries);
    }
    let outcome = pipeline
        .run_dataset(&cfg.ablation, cfg.parallelism, Some(&checkpoint))
        .map_err(|e| match e {
            RunError::Config(_) | RunError::NoTestRecords => usage(e),
            _ => runtime(format!("{e} (completed results kept in {})", checkpoint.display())),
        })?;
    if outcome.resumed > 0 {
        eprintln!("resumed {} results from {}", outcome.resumed, checkpoint.display());
    }
    write_results(&dir.join("results.jsonl"), &outcome.results)
        .map_err(|e| runtime(format!("cannot write results: {e}")))?;
    let failures = dir.join("failures.jsonl");
    if outcome.failures.is_empty() {
        let _ = fs::remove_file(&failures);
    } else {
        let lines: String = outcome
            .failures
            .iter()
            .map(|f| serde_json::to_string(f).unwrap() + "\n")
            .collect();
        write_text(&failures, &lines)?;
        eprintln!(
            "{} memes failed (see {}); rerun with --resume to retry them",
            outcome.failures.len(),
            failures.display()
        );
    }
    if let Some(m) = score(&outcome.results, &loaded.corpus, &cfg.ablation) {
        write_json(&dir.join("metrics.json"), &m)?;
        write_text(&dir.join("report.md"), &single_report(&m))?;
    }
    Ok(outcome.results)
}

fn cmd_build_index(args: BuildIndexArgs) -> CliResult<()> {
    let fusion = parse_fusion(&args.ratio)?;
    require_file(&args.corpus, "corpus")?;
    require_file(&args.text_emb, "text embedding file")?;
    require_file(&args.image_emb, "image embedding file")?;
    let corpus = load_corpus(&args.corpus, &args.profile)?;
    let text = load_embeddings(&args.text_emb)?;
    let image = load_embeddings(&args.image_emb)?;
    let index = build_index(&corpus, &text, &image, &fusion).map_err(usage)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| runtime(format!("cannot create {}: {e}", parent.display())))?;
    }
    save_index(&index, &args.out).map_err(|e| runtime(format!("{}: {e}", args.out.display())))?;
    println!(
        "indexed {} rows, dim {}, ratio {} -> {}",
        index.len(),
        index.dim(),
        args.ratio,
        args.out.display()
    );
    Ok(())
}

fn cmd_run(args: RunArgs) -> CliResult<()> {
    let cfg = resolve(&args.input, &args.toggles, args.k, false)?;
    echo_config(&cfg);
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    let loaded = load_inputs(&cfg, cfg.ablation.use_epm)?;
    let results = execute(&cfg, &loaded, &cfg.output_dir, args.input.resume)?;
    match score(&results, &loaded.corpus, &cfg.ablation) {
        Some(m) => {
            print!("{}", single_report(&m));
            println!("{}", summary_line(&m));
        }
        None => println!("{} results written to {}", results.len(), cfg.output_dir.display()),
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> CliResult<()> {
    let cfg = resolve(&args.input, &ToggleArgs::default(), args.k, true)?;
    echo_config(&cfg);
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    let loaded = load_inputs(&cfg, true)?;
    let mut reports = Vec::new();
    for ablation in AblationConfig::study_rows(cfg.ablation.k, cfg.ablation.random_seed) {
        let run = RunConfig { ablation, ..cfg.clone() };
        let dir = cfg.output_dir.join(ablation.label());
        let results = execute(&run, &loaded, &dir, args.input.resume)?;
        let m = eval::metrics(&results, &loaded.corpus, &ablation)?;
        eprintln!("{}", summary_line(&m));
        reports.push(m);
    }
    let rows = eval::ablation_report(&reports);
    let md = eval::ablation_markdown(&rows);
    write_text(&cfg.output_dir.join("ablation.md"), &md)?;
    let mut csv = Vec::new();
    eval::ablation_csv(&rows, &mut csv)?;
    fs::write(cfg.output_dir.join("ablation.csv"), csv).map_err(runtime)?;
    print!("{md}");
    if let Some(stub) = &loaded.stub {
        log::info!("stub served {} requests", stub.recorded().len());
    }
    Ok(())
}

fn sweep_csv(points: &[SweepPoint]) -> CliResult<Vec<u8>> {
    let mut out = Vec::new();
    eval::write_sweep_csv(points, &mut out)?;
    Ok(out)
}

fn cmd_sweep_k(args: SweepArgs) -> CliResult<()> {
    if args.ks.is_empty() || args.ks.contains(&0) {
        return Err(usage("--ks needs one or more values, each at least 1"));
    }
    let cfg = resolve(&args.input, &args.toggles, None, false)?;
    echo_config(&cfg);
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    let loaded = load_inputs(&cfg, cfg.ablation.use_epm)?;
    let points = eval::k_sweep(&args.ks, &loaded.corpus, &cfg.ablation, |ablation| {
        let run = RunConfig {
            ablation: *ablation,
            ..cfg.clone()
        };
        execute(&run, &loaded, &cfg.output_dir.join(format!("k{}", ablation.k)), args.input.resume)
    })?;
    let csv = sweep_csv(&points)?;
    fs::write(cfg.output_dir.join("sweep.csv"), &csv).map_err(runtime)?;
    print!("{}", String::from_utf8_lossy(&csv));
    Ok(())
}

fn find_runs(dir: &Path) -> CliResult<Vec<PathBuf>> {
    if dir.join("run.json").is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let entries = fs::read_dir(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
    let mut runs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("run.json").is_file())
        .collect();
    runs.sort();
    if runs.is_empty() {
        return Err(usage(format!("no run.json found in {} or its subdirectories", dir.display())));
    }
    Ok(runs)
}

fn cmd_report(args: ReportArgs) -> CliResult<()> {
    let _lock = DirLock::acquire(&args.out)?;
    let mut corpora: HashMap<(PathBuf, String), LabeledCorpus> = HashMap::new();
    let mut reports = Vec::new();
    for dir in find_runs(&args.out)? {
        let run_json = dir.join("run.json");
        let text = fs::read_to_string(&run_json).map_err(|e| usage(format!("{}: {e}", run_json.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", run_json.display())))?;
        let key = (
            args.corpus.clone().unwrap_or(cfg.corpus.clone()),
            args.profile.clone().unwrap_or(cfg.profile.clone()),
        );
        if !corpora.contains_key(&key) {
            let corpus = load_corpus(&key.0, &key.1)?;
            corpora.insert(key.clone(), corpus);
        }
        let corpus = &corpora[&key];
        let checkpoint = dir.join("checkpoint.jsonl");
        let mut by_id: HashMap<String, PipelineResult> = read_checkpoint(&checkpoint)
            .map_err(|e| usage(format!("{}: {e}", checkpoint.display())))?
            .into_iter()
            .map(|r| (r.meme_id.clone(), r))
            .collect();
        let results: Vec<PipelineResult> = corpus.test().filter_map(|t| by_id.remove(&t.id)).collect();
        let missing = corpus.test().count() - results.len();
        if missing > 0 {
            eprintln!("{}: {missing} test memes have no result yet", dir.display());
        }
        write_results(&dir.join("results.jsonl"), &results).map_err(runtime)?;
        let m = eval::metrics(&results, corpus, &cfg.ablation)?;
        write_json(&dir.join("metrics.json"), &m)?;
        write_text(&dir.join("report.md"), &single_report(&m))?;
        eprintln!("{}", summary_line(&m));
        reports.push(m);
    }

    let rows = eval::ablation_report(&reports);
    let md = eval::ablation_markdown(&rows);
    if reports.len() > 1 {
        let mut csv = Vec::new();
        eval::ablation_csv(&rows, &mut csv)?;
        let components: Vec<_> = reports
            .iter()
            .map(|r| (r.config_echo.use_epm, r.config_echo.use_eie, r.config_echo.use_cra))
            .collect();
        if components.windows(2).all(|w| w[0] == w[1]) {
            let mut points: Vec<SweepPoint> = reports
                .iter()
                .map(|m| SweepPoint {
                    k: m.config_echo.k,
                    acc: m.accuracy,
                    auc: m.auc,
                    n: m.n,
                    unparseable: m.unparseable_count,
                })
                .collect();
            points.sort_by_key(|p| p.k);
            let csv = sweep_csv(&points)?;
            fs::write(args.out.join("sweep.csv"), &csv).map_err(runtime)?;
            print!("{}", String::from_utf8_lossy(&csv));
            return Ok(());
        }
        write_text(&args.out.join("ablation.md"), &md)?;
        fs::write(args.out.join("ablation.csv"), csv).map_err(runtime)?;
    }
    print!("{md}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::BuildIndex(a) => cmd_build_index(a),
        Command::Run(a) => cmd_run(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::SweepK(a) => cmd_sweep_k(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
