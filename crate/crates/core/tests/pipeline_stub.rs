mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use coe::corpus::{builtin_profile, BUILTIN_PROFILES};
use coe::lmm::{GenerationParams, LmmClient, LmmError, LmmRequest, StubScript, StubTransport, Transport, TransportReply};
use coe::pipeline::{extract_evolution_info, parse_label, read_checkpoint, write_results, Pipeline, RunError};
use coe::prompt::Stage;
use coe::{AblationConfig, MemeRecord};
use common::Synth;
use proptest::prelude::*;

fn stub(default: &str) -> Arc<StubTransport> {
    Arc::new(StubTransport::new(StubScript::with_default(default)))
}

#[test]
fn extraction_returns_trimmed_answer() {
    let profile = builtin_profile("FHM").unwrap();
    let transport = stub("  targets disabled individuals\n");
    let client = LmmClient::new(transport.clone());
    let neighbors = common::golden_neighbors();
    let refs: Vec<&MemeRecord> = neighbors.iter().collect();
    let params = GenerationParams::mmicl_eie();
    let (info, prompt) = extract_evolution_info(&refs, &profile, &client, &params, false, true, None).unwrap();
    assert_eq!(info, "targets disabled individuals");
    let sent = &transport.recorded()[0];
    assert_eq!(sent.prompt.text, prompt);
    assert!(!sent.prompt.text.contains("hatefulness rules"));
    assert_eq!(sent.images.len(), 5);

    transport.clear();
    extract_evolution_info(&refs, &profile, &client, &params, true, true, None).unwrap();
    assert_eq!(transport.recorded()[0].prompt.text, common::golden("fhm_eie.txt"));
}

#[test]
fn call_budget_per_configuration() {
    let synth = Synth::new("FHM", 30, 6, 8, 1);
    let (index, queries) = synth.retrieval();
    for ablation in AblationConfig::study_rows(5, 7) {
        let transport = stub("hateful");
        let client = LmmClient::new(transport.clone());
        let out = Pipeline::new(&synth.corpus, &client)
            .with_index(&index, &queries)
            .run_dataset(&ablation, 2, None)
            .unwrap();
        assert_eq!(out.results.len(), 6);
        assert!(out.results.iter().all(|r| r.prediction == 1));
        let eie = if ablation.use_eie { 6 } else { 0 };
        assert_eq!(transport.call_count(Stage::Eie), eie, "{}", ablation.label());
        assert_eq!(transport.call_count(Stage::Final), 6, "{}", ablation.label());
    }
}

#[test]
fn toggles_show_up_in_prompts() {
    let synth = Synth::new("MAMI", 30, 3, 8, 2);
    let (index, queries) = synth.retrieval();
    let target = synth.corpus.test().next().unwrap();
    let final_of = |ablation: AblationConfig| {
        let transport = stub("misogynous");
        let client = LmmClient::new(transport.clone());
        let result = Pipeline::new(&synth.corpus, &client)
            .with_index(&index, &queries)
            .classify_meme(target, &ablation)
            .unwrap();
        (result, transport.recorded())
    };
    let amp = &synth.corpus.profile.amplifier_text;

    let (with_cra, _) = final_of(AblationConfig::with_components(false, false, true));
    let (without, calls) = final_of(AblationConfig::baseline());
    assert_eq!(calls.len(), 1);
    assert!(with_cra.final_prompt.contains(amp.as_str()));
    assert!(!without.final_prompt.contains(amp.as_str()));
    assert_eq!(without.final_prompt, with_cra.final_prompt.replace(&format!("\n2. {amp}"), ""));

    let (epm, _) = final_of(AblationConfig::with_components(true, false, false));
    assert_eq!(epm.retrieved.len(), 5);
    assert!(epm.final_prompt.contains("Evolution: [caption 0 : pool caption"));
    assert!(epm.info_text.is_none());

    let (full, calls) = final_of(AblationConfig::full());
    assert_eq!(calls.len(), 2);
    assert_eq!(full.info_text.as_deref(), Some("misogynous"));
    assert!(full.final_prompt.contains("Evolution: misogynous"));
    assert!(full.final_prompt.contains(amp.as_str()));
    let eie = full.eie_prompt.unwrap();
    for n in &full.retrieved {
        let caption = &synth.corpus.get(&n.id).unwrap().ocr_text;
        assert!(eie.contains(caption.as_str()));
    }

    let (sampled, _) = final_of(AblationConfig::with_components(false, true, false));
    assert!(sampled.retrieved.is_empty());
    assert_eq!(sampled.sampled.len(), 5);
}

#[test]
fn results_do_not_depend_on_parallelism() {
    let synth = Synth::new("FHM", 40, 10, 8, 3);
    let (index, queries) = synth.retrieval();
    let run = |parallelism| {
        let client = LmmClient::new(stub("not hateful"));
        let out = Pipeline::new(&synth.corpus, &client)
            .with_index(&index, &queries)
            .run_dataset(&AblationConfig::full(), parallelism, None)
            .unwrap();
        let path = synth.dir.path().join(format!("results_{parallelism}.jsonl"));
        write_results(&path, &out.results).unwrap();
        std::fs::read(path).unwrap()
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, run(16));
}

#[test]
fn resume_skips_completed_memes() {
    let synth = Synth::new("FHM", 30, 10, 8, 4);
    let (index, queries) = synth.retrieval();
    let ck = synth.dir.path().join("ck.jsonl");

    let first = stub("hateful");
    let client = LmmClient::new(first.clone());
    let pipeline = Pipeline::new(&synth.corpus, &client).with_index(&index, &queries);
    let full = pipeline.run_dataset(&AblationConfig::full(), 3, Some(&ck)).unwrap();

    // keep five completed lines and a torn sixth, as after a kill
    let text = std::fs::read_to_string(&ck).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let mut kept = lines[..5].join("\n");
    kept.push('\n');
    kept.push_str(&lines[5][..lines[5].len() / 2]);
    std::fs::write(&ck, kept).unwrap();

    let second = stub("hateful");
    let client = LmmClient::new(second.clone());
    let pipeline = Pipeline::new(&synth.corpus, &client).with_index(&index, &queries);
    let resumed = pipeline.run_dataset(&AblationConfig::full(), 3, Some(&ck)).unwrap();
    assert_eq!(resumed.resumed, 5);
    assert_eq!(second.call_count(Stage::Final), 5);
    assert_eq!(second.call_count(Stage::Eie), 5);
    let strip = |rs: &[coe::PipelineResult]| -> Vec<_> {
        rs.iter().map(|r| coe::PipelineResult { timings: None, ..r.clone() }).collect()
    };
    assert_eq!(strip(&resumed.results), strip(&full.results));
    assert_eq!(read_checkpoint(&ck).unwrap().len(), 10);

    let third = stub("hateful");
    let client = LmmClient::new(third.clone());
    Pipeline::new(&synth.corpus, &client)
        .with_index(&index, &queries)
        .run_dataset(&AblationConfig::full(), 3, Some(&ck))
        .unwrap();
    assert!(third.recorded().is_empty());
}

#[test]
fn harm_sized_run() {
    let synth = Synth::new("HarM", 300, 354, 16, 5);
    let (index, queries) = synth.retrieval();
    let client = LmmClient::new(stub("not harmful"));
    let out = Pipeline::new(&synth.corpus, &client)
        .with_index(&index, &queries)
        .run_dataset(&AblationConfig::full(), 8, None)
        .unwrap();
    assert_eq!(out.results.len(), 354);
    assert!(out.failures.is_empty());
    let ids: Vec<&str> = out.results.iter().map(|r| r.meme_id.as_str()).collect();
    let expected: Vec<&str> = synth.corpus.test().map(|r| r.id.as_str()).collect();
    assert_eq!(ids, expected);
}

/// Fails every request from call number `from` on with `error`.
struct FailAfter {
    inner: StubTransport,
    from: usize,
    calls: AtomicUsize,
    error: LmmError,
}

impl Transport for FailAfter {
    fn send(&self, request: &LmmRequest) -> Result<TransportReply, LmmError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) >= self.from {
            return Err(self.error.clone());
        }
        self.inner.send(request)
    }

    fn backend_id(&self) -> String {
        "fail-after".into()
    }
}

fn failing(from: usize, error: LmmError) -> LmmClient {
    LmmClient::new(Arc::new(FailAfter {
        inner: StubTransport::new(StubScript::with_default("hateful")),
        from,
        calls: AtomicUsize::new(0),
        error,
    }))
}

#[test]
fn unreachable_endpoint_is_fatal_only_at_start() {
    let synth = Synth::new("FHM", 10, 4, 4, 6);
    let down = LmmError::Unreachable("connection refused".into());
    let mut params = GenerationParams::mmicl_final();
    params.max_retries = 0;
    let client = failing(0, down.clone());
    let err = Pipeline::new(&synth.corpus, &client)
        .with_params(params.clone(), params.clone())
        .run_dataset(&AblationConfig::baseline(), 1, None)
        .unwrap_err();
    assert!(matches!(err, RunError::Unreachable(_)));

    let client = failing(2, down);
    let out = Pipeline::new(&synth.corpus, &client)
        .with_params(params.clone(), params)
        .run_dataset(&AblationConfig::baseline(), 1, None)
        .unwrap();
    assert_eq!(out.results.len(), 2);
    assert_eq!(out.failures.len(), 2);
    assert_eq!(out.failures[0].stage, "final");
}

#[test]
fn per_meme_errors_carry_stage() {
    let synth = Synth::new("FHM", 10, 3, 4, 7);
    let client = failing(1, LmmError::Status { status: 400, body: "bad".into() });
    let out = Pipeline::new(&synth.corpus, &client)
        .run_dataset(&AblationConfig::with_components(false, true, true), 1, None)
        .unwrap();
    assert!(out.results.is_empty());
    assert_eq!(out.failures.len(), 3);
    assert_eq!(out.failures[0].stage, "final");
    assert_eq!(out.failures[1].stage, "eie");
}

proptest! {
    #[test]
    fn negative_word_always_wins(prefix in "[a-zA-Z ,.!]{0,30}", suffix in "[a-zA-Z ,.!]{0,30}", upper in any::<bool>()) {
        for name in BUILTIN_PROFILES {
            let profile = builtin_profile(name).unwrap();
            prop_assert_eq!(&profile.negative_word, &format!("not {}", profile.positive_word));
            let mut text = format!("{prefix} {} {suffix}", profile.negative_word);
            if upper {
                text = text.to_uppercase();
            }
            prop_assert_eq!(parse_label(&text, &profile, None).prediction, 0);
        }
    }
}
