//! The chain-of-evolution flow for one meme and for a whole test split.
//!
//! Per meme: select neighbors (retrieval, seeded sampling or none), optionally
//! summarize them with one extraction call, then issue one final prediction
//! call and parse its label. Batch runs fan memes out over worker threads,
//! append each finished result to a checkpoint file and resume from it.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{DatasetProfile, LabeledCorpus, MemeRecord};
use crate::index::{fuse, EmbeddingVector, FusedIndex, FusionConfig, IndexError, Neighbor, DEFAULT_K};
use crate::lmm::{GenerationParams, ImagePayload, LmmClient, LmmError, LmmRequest, TokenScore};
use crate::prompt::{build_eie_prompt, build_final_prompt, EieOptions, EvolutionInfo, PromptError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("retrieval failed: {0}")]
    Retrieval(#[from] IndexError),
    #[error("retrieval requested but no index was provided")]
    NoIndex,
    #[error("no query embedding for target {0:?}")]
    MissingQuery(String),
    #[error("meme pool is empty")]
    EmptyPool,
    #[error("neighbor {0:?} is not in the corpus")]
    UnknownNeighbor(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("prompt: {0}")]
    Prompt(#[from] PromptError),
    #[error("{stage} stage: {source}")]
    Lmm { stage: &'static str, source: LmmError },
}

impl PipelineError {
    fn stage(&self) -> &'static str {
        match self {
            PipelineError::Lmm { stage, .. } => stage,
            PipelineError::Prompt(_) => "prompt",
            _ => "retrieval",
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("corpus has no test records")]
    NoTestRecords,
    #[error("endpoint unreachable on first request: {0}")]
    Unreachable(LmmError),
    #[error("checkpoint {path}: {source}")]
    Checkpoint {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Config(String),
}

/// Which chain-of-evolution components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Evolutionary pair mining: retrieve neighbors by similarity.
    pub use_epm: bool,
    /// Evolution information extraction: summarize neighbors with the LMM.
    pub use_eie: bool,
    /// Contextual relevance amplifier: put the definition in the prompts.
    pub use_cra: bool,
    pub k: usize,
    pub random_seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig::full()
    }
}

impl AblationConfig {
    pub fn full() -> Self {
        AblationConfig {
            use_epm: true,
            use_eie: true,
            use_cra: true,
            k: DEFAULT_K,
            random_seed: 0,
        }
    }

    pub fn baseline() -> Self {
        AblationConfig {
            use_epm: false,
            use_eie: false,
            use_cra: false,
            ..Self::full()
        }
    }

    pub fn with_components(use_epm: bool, use_eie: bool, use_cra: bool) -> Self {
        AblationConfig {
            use_epm,
            use_eie,
            use_cra,
            ..Self::full()
        }
    }

    /// The six studied configurations, in report order: baseline, EPM, EIE,
    /// EIE+CRA, EPM+EIE, full.
    pub fn study_rows(k: usize, random_seed: u64) -> [AblationConfig; 6] {
        [
            (false, false, false),
            (true, false, false),
            (false, true, false),
            (false, true, true),
            (true, true, false),
            (true, true, true),
        ]
        .map(|(e, i, c)| AblationConfig {
            k,
            random_seed,
            ..Self::with_components(e, i, c)
        })
    }

    /// Short name: `baseline`, `full`, or the active components joined by `+`.
    pub fn label(&self) -> String {
        match (self.use_epm, self.use_eie, self.use_cra) {
            (false, false, false) => "baseline".into(),
            (true, true, true) => "full".into(),
            (e, i, c) => [(e, "epm"), (i, "eie"), (c, "cra")]
                .iter()
                .filter(|(on, _)| *on)
                .map(|(_, n)| *n)
                .collect::<Vec<_>>()
                .join("+"),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTimings {
    pub retrieve_us: u64,
    pub eie_us: u64,
    pub final_us: u64,
}

/// Full trace of one classified meme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub meme_id: String,
    /// Retrieved neighbors with similarity; empty unless retrieval is on.
    pub retrieved: Vec<Neighbor>,
    /// Seed-sampled neighbors used when extraction runs without retrieval.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sampled: Vec<String>,
    pub info_text: Option<String>,
    pub eie_prompt: Option<String>,
    pub final_prompt: String,
    pub raw_response: String,
    pub prediction: u8,
    pub score: f64,
    #[serde(default)]
    pub unparseable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<StageTimings>,
}

/// A meme whose chain failed; the batch carries on without it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemeFailure {
    pub meme_id: String,
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParsedLabel {
    pub prediction: u8,
    pub score: f64,
    pub unparseable: bool,
}

fn normalize_words(text: &str) -> String {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Maps a free-text answer to a binary label.
///
/// The negative word is checked before the positive word, since it usually
/// contains it ("not hateful"). Answers naming neither fall back to a
/// leading "yes"/"no", and otherwise to 0 with `unparseable` set. The score
/// is P(positive) from the first decisive token's log-probability when token
/// scores are given, else the hard label.
pub fn parse_label(
    response_text: &str,
    profile: &DatasetProfile,
    token_scores: Option<&[TokenScore]>,
) -> ParsedLabel {
    let text = normalize_words(response_text);
    let padded = format!(" {text} ");
    let neg = normalize_words(&profile.negative_word);
    let pos = normalize_words(&profile.positive_word);
    let contains = |needle: &str| !needle.is_empty() && padded.contains(needle);
    let (prediction, unparseable) = if contains(&neg) {
        (0, false)
    } else if contains(&pos) {
        (1, false)
    } else {
        match text.split(' ').next() {
            Some("no") => (0, false),
            Some("yes") => (1, false),
            _ => (0, true),
        }
    };
    let score = token_scores
        .and_then(|ts| token_probability(ts, &pos, &neg))
        .unwrap_or(prediction as f64);
    ParsedLabel {
        prediction,
        score,
        unparseable,
    }
}

fn token_probability(tokens: &[TokenScore], pos: &str, neg: &str) -> Option<f64> {
    let first = tokens
        .iter()
        .map(|t| (normalize_words(&t.token), t.logprob))
        .find(|(w, _)| !w.is_empty())?;
    let (word, logprob) = first;
    let p = logprob.exp().clamp(0.0, 1.0);
    let pos_like = pos.starts_with(&word) || word == "yes";
    let neg_like = neg.starts_with(&word) || word == "no";
    match (pos_like, neg_like) {
        (true, false) => Some(p),
        (false, true) => Some(1.0 - p),
        _ => None,
    }
}

/// Fuses per-record text and image embeddings into retrieval queries.
/// Records missing either embedding are skipped.
pub fn fuse_queries(
    corpus: &LabeledCorpus,
    text_embs: &HashMap<String, EmbeddingVector>,
    image_embs: &HashMap<String, EmbeddingVector>,
    fusion: &FusionConfig,
) -> Result<HashMap<String, EmbeddingVector>, IndexError> {
    let mut out = HashMap::new();
    for rec in &corpus.records {
        if let (Some(t), Some(i)) = (text_embs.get(&rec.id), image_embs.get(&rec.id)) {
            out.insert(rec.id.clone(), fuse(t, i, fusion)?);
        }
    }
    Ok(out)
}

/// Neighbors chosen for one target.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Selection {
    pub retrieved: Vec<Neighbor>,
    pub sampled: Vec<String>,
}

impl Selection {
    pub fn ids(&self) -> Vec<&str> {
        if self.retrieved.is_empty() {
            self.sampled.iter().map(String::as_str).collect()
        } else {
            self.retrieved.iter().map(|n| n.id.as_str()).collect()
        }
    }
}

fn meme_seed(seed: u64, id: &str) -> u64 {
    let digest = Sha256::digest(id.as_bytes());
    seed ^ u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Chooses neighbors for `target_id`.
///
/// With retrieval on: the top-k pool memes by cosine to `query`, excluding
/// the target itself. With only extraction on: k pool ids sampled uniformly
/// without replacement, seeded by `random_seed` and the target id. Otherwise
/// nothing. A pool smaller than k yields the whole pool.
pub fn select_neighbors(
    index: Option<&FusedIndex>,
    target_id: &str,
    query: Option<&EmbeddingVector>,
    config: &AblationConfig,
    pool_ids: &[String],
) -> Result<Selection, PipelineError> {
    if config.k == 0 {
        return Err(PipelineError::ZeroK);
    }
    if config.use_epm {
        let index = index.ok_or(PipelineError::NoIndex)?;
        let query = query.ok_or_else(|| PipelineError::MissingQuery(target_id.to_string()))?;
        let retrieved = index.top_k(query, config.k, Some(target_id))?;
        if retrieved.len() < config.k {
            log::warn!(
                "pool has {} candidates for {target_id:?}, fewer than k={}",
                retrieved.len(),
                config.k
            );
        }
        return Ok(Selection {
            retrieved,
            sampled: Vec::new(),
        });
    }
    if !config.use_eie {
        return Ok(Selection::default());
    }
    let candidates: Vec<&String> = pool_ids.iter().filter(|id| id.as_str() != target_id).collect();
    if candidates.is_empty() {
        return Err(PipelineError::EmptyPool);
    }
    let sampled = if candidates.len() <= config.k {
        if candidates.len() < config.k {
            log::warn!(
                "pool has {} candidates for {target_id:?}, fewer than k={}",
                candidates.len(),
                config.k
            );
        }
        candidates.into_iter().cloned().collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(meme_seed(config.random_seed, target_id));
        rand::seq::index::sample(&mut rng, candidates.len(), config.k)
            .into_iter()
            .map(|i| candidates[i].clone())
            .collect()
    };
    Ok(Selection {
        retrieved: Vec::new(),
        sampled,
    })
}

fn resolve_images(request: &mut LmmRequest, image_root: Option<&Path>) {
    let Some(root) = image_root else { return };
    for image in &mut request.images {
        if let ImagePayload::Reference(r) = image {
            let is_url = r.contains("://") || r.starts_with("data:");
            if !is_url && Path::new(r).is_relative() {
                *r = root.join(&*r).display().to_string();
            }
        }
    }
}

/// Runs the extraction call over `neighbors` and returns the trimmed
/// evolution information together with the rendered prompt text.
pub fn extract_evolution_info(
    neighbors: &[&MemeRecord],
    profile: &DatasetProfile,
    client: &LmmClient,
    params: &GenerationParams,
    use_cra: bool,
    include_images: bool,
    image_root: Option<&Path>,
) -> Result<(String, String), PipelineError> {
    let prompt = build_eie_prompt(
        profile,
        neighbors,
        EieOptions {
            include_rules: use_cra,
            include_images,
        },
    )?;
    let text = prompt.text.clone();
    let mut request = LmmRequest::from_prompt(prompt, params.clone());
    resolve_images(&mut request, image_root);
    let response = client
        .generate(&request)
        .map_err(|source| PipelineError::Lmm { stage: "eie", source })?;
    Ok((response.text.trim().to_string(), text))
}

/// Outcome of a batch run.
#[derive(Debug, Clone, Default)]
pub struct RunOutcome {
    /// Results for every test meme that succeeded, in corpus order.
    pub results: Vec<PipelineResult>,
    pub failures: Vec<MemeFailure>,
    /// How many results were taken from the checkpoint instead of recomputed.
    pub resumed: usize,
}

/// Shared, read-only state for classifying memes.
#[derive(Debug, Clone)]
pub struct Pipeline<'a> {
    corpus: &'a LabeledCorpus,
    client: &'a LmmClient,
    index: Option<&'a FusedIndex>,
    queries: Option<&'a HashMap<String, EmbeddingVector>>,
    eie_params: GenerationParams,
    final_params: GenerationParams,
    image_root: Option<PathBuf>,
    text_only_neighbors: bool,
    pool_ids: Vec<String>,
}

impl<'a> Pipeline<'a> {
    pub fn new(corpus: &'a LabeledCorpus, client: &'a LmmClient) -> Self {
        Pipeline {
            corpus,
            client,
            index: None,
            queries: None,
            eie_params: GenerationParams::mmicl_eie(),
            final_params: GenerationParams::mmicl_final(),
            image_root: None,
            text_only_neighbors: false,
            pool_ids: corpus.pool().map(|r| r.id.clone()).collect(),
        }
    }

    /// Enables retrieval with `queries` holding each target's fused vector.
    pub fn with_index(mut self, index: &'a FusedIndex, queries: &'a HashMap<String, EmbeddingVector>) -> Self {
        self.index = Some(index);
        self.queries = Some(queries);
        self
    }

    pub fn with_params(mut self, eie: GenerationParams, final_: GenerationParams) -> Self {
        self.eie_params = eie;
        self.final_params = final_;
        self
    }

    /// Directory that relative image references are resolved against.
    pub fn with_image_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.image_root = Some(root.into());
        self
    }

    /// Send neighbor captions without their images in the extraction call.
    pub fn text_only_neighbors(mut self, on: bool) -> Self {
        self.text_only_neighbors = on;
        self
    }

    pub fn corpus(&self) -> &LabeledCorpus {
        self.corpus
    }

    fn neighbor_records(&self, ids: &[&str]) -> Result<Vec<&'a MemeRecord>, PipelineError> {
        ids.iter()
            .map(|id| {
                self.corpus
                    .get(id)
                    .ok_or_else(|| PipelineError::UnknownNeighbor(id.to_string()))
            })
            .collect()
    }

    /// Classifies one meme and returns its full trace.
    pub fn classify_meme(
        &self,
        target: &MemeRecord,
        ablation: &AblationConfig,
    ) -> Result<PipelineResult, PipelineError> {
        let profile = &self.corpus.profile;
        let mut timings = StageTimings::default();

        let t0 = Instant::now();
        let query = self.queries.and_then(|q| q.get(&target.id));
        let selection = select_neighbors(self.index, &target.id, query, ablation, &self.pool_ids)?;
        let ids = selection.ids();
        let neighbors = self.neighbor_records(&ids)?;
        timings.retrieve_us = t0.elapsed().as_micros() as u64;

        let mut info_text = None;
        let mut eie_prompt = None;
        if ablation.use_eie {
            let t1 = Instant::now();
            let (info, prompt) = extract_evolution_info(
                &neighbors,
                profile,
                self.client,
                &self.eie_params,
                ablation.use_cra,
                !self.text_only_neighbors,
                self.image_root.as_deref(),
            )?;
            timings.eie_us = t1.elapsed().as_micros() as u64;
            info_text = Some(info);
            eie_prompt = Some(prompt);
        }

        let info = info_text.as_deref().map(|text| EvolutionInfo {
            text,
            source_count: neighbors.len(),
        });
        let raw = (ablation.use_epm && !ablation.use_eie && !neighbors.is_empty()).then_some(&neighbors[..]);
        let prompt = build_final_prompt(profile, target, info, raw, ablation.use_cra)?;
        let final_prompt = prompt.text.clone();
        let mut request = LmmRequest::from_prompt(prompt, self.final_params.clone());
        resolve_images(&mut request, self.image_root.as_deref());
        let t2 = Instant::now();
        let response = self
            .client
            .generate(&request)
            .map_err(|source| PipelineError::Lmm { stage: "final", source })?;
        timings.final_us = t2.elapsed().as_micros() as u64;

        let parsed = parse_label(&response.text, profile, response.token_scores.as_deref());
        Ok(PipelineResult {
            meme_id: target.id.clone(),
            retrieved: selection.retrieved,
            sampled: selection.sampled,
            info_text,
            eie_prompt,
            final_prompt,
            raw_response: response.text,
            prediction: parsed.prediction,
            score: parsed.score,
            unparseable: parsed.unparseable,
            timings: Some(timings),
        })
    }

    /// Classifies every test record with up to `parallelism` memes in flight.
    ///
    /// When `checkpoint` is given, results already in it are reused and each
    /// new result is appended as one JSON line as soon as it completes.
    pub fn run_dataset(
        &self,
        ablation: &AblationConfig,
        parallelism: usize,
        checkpoint: Option<&Path>,
    ) -> Result<RunOutcome, RunError> {
        let targets: Vec<&MemeRecord> = self.corpus.test().collect();
        if targets.is_empty() {
            return Err(RunError::NoTestRecords);
        }
        if ablation.k == 0 {
            return Err(RunError::Config("k must be at least 1".into()));
        }
        let mut done: HashMap<String, PipelineResult> = HashMap::new();
        let writer = match checkpoint {
            Some(path) => {
                for r in read_checkpoint(path).map_err(|source| RunError::Checkpoint {
                    path: path.to_path_buf(),
                    source,
                })? {
                    done.insert(r.meme_id.clone(), r);
                }
                done.retain(|id, _| self.corpus.get(id).is_some_and(|r| r.split == crate::Split::Test));
                Some(Mutex::new(open_checkpoint(path).map_err(|source| RunError::Checkpoint {
                    path: path.to_path_buf(),
                    source,
                })?))
            }
            None => None,
        };
        let resumed = done.len();
        let pending: Vec<(usize, &MemeRecord)> = targets
            .iter()
            .enumerate()
            .filter(|(_, t)| !done.contains_key(&t.id))
            .map(|(i, t)| (i, *t))
            .collect();

        let slots: Mutex<Vec<Option<PipelineResult>>> = Mutex::new(vec![None; targets.len()]);
        let failures: Mutex<Vec<(usize, MemeFailure)>> = Mutex::new(Vec::new());
        let fatal: Mutex<Option<RunError>> = Mutex::new(None);
        let next = AtomicUsize::new(0);
        let abort = AtomicBool::new(false);
        let any_success = AtomicBool::new(resumed > 0);

        let worker = || {
            while !abort.load(Ordering::SeqCst) {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(pos, target)) = pending.get(i) else { break };
                match self.classify_meme(target, ablation) {
                    Ok(result) => {
                        any_success.store(true, Ordering::SeqCst);
                        if let Some(w) = &writer {
                            if let Err(source) = append_result(&mut w.lock().unwrap(), &result) {
                                *fatal.lock().unwrap() = Some(RunError::Checkpoint {
                                    path: checkpoint.unwrap().to_path_buf(),
                                    source,
                                });
                                abort.store(true, Ordering::SeqCst);
                            }
                        }
                        slots.lock().unwrap()[pos] = Some(result);
                    }
                    Err(PipelineError::Lmm {
                        source: e @ LmmError::Unreachable(_),
                        ..
                    }) if !any_success.load(Ordering::SeqCst) => {
                        fatal.lock().unwrap().get_or_insert(RunError::Unreachable(e));
                        abort.store(true, Ordering::SeqCst);
                    }
                    Err(e) => {
                        log::warn!("meme {:?} failed: {e}", target.id);
                        failures.lock().unwrap().push((
                            pos,
                            MemeFailure {
                                meme_id: target.id.clone(),
                                stage: e.stage().to_string(),
                                message: e.to_string(),
                            },
                        ));
                    }
                }
            }
        };
        let workers = parallelism.max(1).min(pending.len().max(1));
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(worker);
            }
        });

        if let Some(err) = fatal.into_inner().unwrap() {
            return Err(err);
        }
        let mut slots = slots.into_inner().unwrap();
        for (pos, t) in targets.iter().enumerate() {
            if let Some(r) = done.remove(&t.id) {
                slots[pos] = Some(r);
            }
        }
        let mut failures = failures.into_inner().unwrap();
        failures.sort_by_key(|(pos, _)| *pos);
        Ok(RunOutcome {
            results: slots.into_iter().flatten().collect(),
            failures: failures.into_iter().map(|(_, f)| f).collect(),
            resumed,
        })
    }
}

/// Reads a checkpoint file, skipping a torn final line. A missing file reads
/// as empty.
pub fn read_checkpoint(path: &Path) -> std::io::Result<Vec<PipelineResult>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<PipelineResult>(&line) {
            Ok(r) => out.push(r),
            Err(e) => log::warn!("{}: skipping unreadable line {}: {e}", path.display(), i + 1),
        }
    }
    Ok(out)
}

fn open_checkpoint(path: &Path) -> std::io::Result<File> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut file = OpenOptions::new().create(true).read(true).append(true).open(path)?;
    // a killed run may leave a partial last line; start the next record fresh
    let len = file.metadata()?.len();
    if len > 0 {
        let mut last = [0u8; 1];
        file.seek(SeekFrom::Start(len - 1))?;
        file.read_exact(&mut last)?;
        if last[0] != b'\n' {
            file.write_all(b"\n")?;
        }
    }
    Ok(file)
}

fn append_result(file: &mut File, result: &PipelineResult) -> std::io::Result<()> {
    let mut line = serde_json::to_vec(result)?;
    line.push(b'\n');
    file.write_all(&line)?;
    file.flush()
}

/// Writes results in the given order without timings, one JSON per line.
pub fn write_results(path: &Path, results: &[PipelineResult]) -> std::io::Result<()> {
    let mut out = Vec::new();
    for r in results {
        let r = PipelineResult {
            timings: None,
            ..r.clone()
        };
        serde_json::to_writer(&mut out, &r)?;
        out.push(b'\n');
    }
    fs::write(path, out)
}
