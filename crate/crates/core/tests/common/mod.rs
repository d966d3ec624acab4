#![allow(dead_code)]

use std::collections::HashMap;
use std::path::PathBuf;

use coe::cemb::{write_cemb, EmbeddingTable};
use coe::corpus::builtin_profile;
use coe::index::{build_index, FusedIndex};
use coe::lmm::{LmmRequest, StubScript};
use coe::pipeline::fuse_queries;
use coe::prompt::Stage;
use coe::{EmbeddingVector, FusionConfig, LabeledCorpus, MemeRecord, Split};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        if v.iter().any(|x| x.abs() > 1e-3) {
            return v;
        }
    }
}

/// Synthetic corpus written to disk together with its CEMB files.
pub struct Synth {
    pub dir: TempDir,
    pub corpus: LabeledCorpus,
    pub corpus_path: PathBuf,
    pub text_path: PathBuf,
    pub image_path: PathBuf,
    pub text: HashMap<String, EmbeddingVector>,
    pub image: HashMap<String, EmbeddingVector>,
}

impl Synth {
    pub fn new(profile: &str, n_pool: usize, n_test: usize, dim: usize, seed: u64) -> Synth {
        let mut rng = rng(seed);
        let mut records = Vec::new();
        for i in 0..n_pool {
            records.push(
                MemeRecord::new(format!("pool{i:04}"), format!("img/pool{i:04}.png"), format!("pool caption {i}"))
                    .with_label((i % 3 == 0) as u8)
                    .with_split(Split::Pool),
            );
        }
        for i in 0..n_test {
            records.push(
                MemeRecord::new(format!("test{i:04}"), format!("img/test{i:04}.png"), format!("target caption {i}"))
                    .with_label((i % 2) as u8)
                    .with_split(Split::Test),
            );
        }
        let corpus = LabeledCorpus::new(records, builtin_profile(profile).unwrap()).unwrap();
        let mut text_table = EmbeddingTable::new(dim);
        let mut image_table = EmbeddingTable::new(dim);
        for rec in &corpus.records {
            text_table
                .push(rec.id.clone(), EmbeddingVector::new(random_vec(&mut rng, dim)).unwrap())
                .unwrap();
            image_table
                .push(rec.id.clone(), EmbeddingVector::new(random_vec(&mut rng, dim)).unwrap())
                .unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let corpus_path = dir.path().join("corpus.jsonl");
        let text_path = dir.path().join("text.cemb");
        let image_path = dir.path().join("image.cemb");
        corpus.write_jsonl(&corpus_path).unwrap();
        write_cemb(&text_path, &text_table).unwrap();
        write_cemb(&image_path, &image_table).unwrap();
        Synth {
            dir,
            corpus,
            corpus_path,
            text_path,
            image_path,
            text: text_table.to_map(),
            image: image_table.to_map(),
        }
    }

    pub fn retrieval(&self) -> (FusedIndex, HashMap<String, EmbeddingVector>) {
        let fusion = FusionConfig::default();
        let index = build_index(&self.corpus, &self.text, &self.image, &fusion).unwrap();
        let queries = fuse_queries(&self.corpus, &self.text, &self.image, &fusion).unwrap();
        (index, queries)
    }
}

/// Scripts the final-stage answer for each test meme from its label, using
/// prompts recorded by an earlier probe run. Everything else, including the
/// extraction calls, gets `default`.
pub fn label_script(corpus: &LabeledCorpus, recorded: &[LmmRequest], default: &str) -> StubScript {
    let mut script = StubScript::with_default(default);
    let profile = &corpus.profile;
    for req in recorded.iter().filter(|r| r.stage == Stage::Final) {
        let target = corpus
            .test()
            .find(|t| req.prompt.text.contains(&format!("caption: {} is ", t.ocr_text)))
            .expect("final prompt names a test meme");
        let answer = if target.label == Some(1) {
            &profile.positive_word
        } else {
            &profile.negative_word
        };
        script.insert(req.fingerprint(), answer.clone());
    }
    script
}

/// Full-sort reference ranking: cosine in f64, descending, ties by position.
pub fn oracle_top_k(rows: &[Vec<f32>], query: &[f32], k: usize, exclude: Option<usize>) -> Vec<usize> {
    let norm = |v: &[f32]| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let qn = norm(query);
    let mut scored: Vec<(f64, usize)> = rows
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, r)| {
            let dot: f64 = r.iter().zip(query).map(|(&a, &b)| a as f64 * b as f64).sum();
            (dot / (qn * norm(r)), i)
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, i)| i).collect()
}

/// AUC by enumerating every (positive, negative) pair.
pub fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut credit = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li == 1 && lj == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    credit += 1.0;
                } else if scores[i] == scores[j] {
                    credit += 0.5;
                }
            }
        }
    }
    credit / pairs
}

pub fn golden(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Five neighbors whose captions and images are the golden placeholders.
pub fn golden_neighbors() -> Vec<MemeRecord> {
    (0..5)
        .map(|i| MemeRecord::new(format!("n{i}"), format!("n{i}.png"), format!("{{texts[{i}]}}")))
        .collect()
}

pub fn golden_target() -> MemeRecord {
    MemeRecord::new("target", "target.png", "{ocr_text}")
}

/// One HTTP request as seen by [`MockServer`].
#[derive(Debug, Clone)]
pub struct SeenRequest {
    pub request_line: String,
    pub headers: Vec<(String, String)>,
    pub body: serde_json::Value,
}

impl SeenRequest {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

/// Minimal chat-completion server on localhost. Replies are taken from
/// `replies` in order; the last one repeats. One request per connection.
pub struct MockServer {
    pub base_url: String,
    seen: std::sync::Arc<std::sync::Mutex<Vec<SeenRequest>>>,
}

pub type Reply = (u16, String);

pub fn chat_reply(text: &str) -> Reply {
    (
        200,
        serde_json::json!({
            "choices": [{
                "message": {"role": "assistant", "content": text},
                "logprobs": {"content": [{"token": text.split(' ').next().unwrap_or(""), "logprob": -0.25}]}
            }]
        })
        .to_string(),
    )
}

impl MockServer {
    pub fn start(replies: Vec<Reply>) -> MockServer {
        use std::io::{BufRead, BufReader, Read, Write};
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let base_url = format!("http://{}/v1", listener.local_addr().unwrap());
        let seen = std::sync::Arc::new(std::sync::Mutex::new(Vec::new()));
        let log = seen.clone();
        std::thread::spawn(move || {
            for (n, stream) in listener.incoming().enumerate() {
                let Ok(mut stream) = stream else { break };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
                    continue;
                }
                let mut headers = Vec::new();
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    let (k, v) = line.split_once(':').unwrap();
                    headers.push((k.trim().to_string(), v.trim().to_string()));
                }
                let len: usize = headers
                    .iter()
                    .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
                    .map(|(_, v)| v.parse().unwrap())
                    .unwrap_or(0);
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                log.lock().unwrap().push(SeenRequest {
                    request_line: request_line.trim_end().to_string(),
                    headers,
                    body: serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null),
                });
                let (status, payload) = replies[n.min(replies.len() - 1)].clone();
                if status == 0 {
                    // hold the connection open without answering
                    std::thread::spawn(move || {
                        std::thread::sleep(std::time::Duration::from_secs(5));
                        drop(stream);
                    });
                    continue;
                }
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                    payload.len()
                );
            }
        });
        MockServer { base_url, seen }
    }

    pub fn seen(&self) -> Vec<SeenRequest> {
        self.seen.lock().unwrap().clone()
    }
}
