//! Library construction, frozen evaluation and the three-way ablation.
//!
//! A build walks the build set strictly in order: every rule inserted for
//! flow `t` is visible to retrieval at flow `t + 1`. Evaluation classifies
//! flows in parallel against a library it can only read.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{
    build_classification_prompt, build_induction_prompt, classify, induce_rule, AgentError, Observation,
    ParseStatus, ReasoningAgent, Transcript, TranscriptRecord,
};
use crate::config::{AblationMode, ConfigError, RunConfig};
use crate::embedding::{CachedEmbedder, Embedder, EmbeddingError, FlowEmbedding};
use crate::flow::{
    load_labeled_flows, open_dataset, stratified_split, to_canonical_json, ClassLabel, FlowError, IngestionReport,
    LabeledFlow, SplitManifest,
};
use crate::library::{ExperienceLibrary, LibraryError, NewEntry, RetrievalResult};
use crate::metrics::{
    render_comparison, windowed_curve, ConfusionMatrix, CurvePoint, MetricsError, MetricsReport, ScoredStep,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Library(#[from] LibraryError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("agent setup: {0}")]
    Agent(#[from] AgentError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("library changed during evaluation (checksum {before} -> {after})")]
    LibraryMutated { before: String, after: String },
    #[error("mode {0} needs an experience library")]
    MissingLibrary(&'static str),
    #[error("no dataset configured")]
    MissingDataset,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// The embedder and the two agents for one run.
pub struct Runtime {
    pub embedder: Arc<dyn Embedder>,
    pub classifier: Box<dyn ReasoningAgent>,
    pub inducer: Box<dyn ReasoningAgent>,
}

impl Runtime {
    pub fn new(embedder: Arc<dyn Embedder>, classifier: Box<dyn ReasoningAgent>, inducer: Box<dyn ReasoningAgent>) -> Self {
        Runtime {
            embedder,
            classifier,
            inducer,
        }
    }

    /// Fresh agents over a per-run embedding cache.
    pub fn from_config(cfg: &RunConfig) -> Result<Self, PipelineError> {
        let embedder: Arc<dyn Embedder> = Arc::new(CachedEmbedder::new(cfg.embedder.build()?));
        let classifier = cfg.classifier.build(embedder.clone(), &cfg.classes)?;
        let inducer = cfg.inducer.build(embedder.clone(), &cfg.classes)?;
        Ok(Runtime::new(embedder, classifier, inducer))
    }

    fn observe(&mut self, flow: &LabeledFlow, embedding: &FlowEmbedding) {
        let obs = Observation {
            record: &flow.record,
            embedding,
            label: &flow.label,
        };
        self.classifier.observe(&obs);
        self.inducer.observe(&obs);
    }
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Build,
    Evaluate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalInfo {
    pub entry_id: u64,
    pub similarity: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLatency {
    pub embed_ms: f64,
    pub retrieve_ms: f64,
    pub classify_ms: f64,
    pub induce_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowOutcome {
    pub seq: u64,
    pub flow_id: u64,
    pub true_label: ClassLabel,
    /// Absent when the flow errored before a label was produced.
    pub predicted: Option<ClassLabel>,
    pub retrieval: Option<RetrievalInfo>,
    pub parse_status: Option<ParseStatus>,
    pub induced_rule_id: Option<u64>,
    pub error: Option<String>,
    pub induction_error: Option<String>,
    pub library_size: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub latency: Option<StageLatency>,
}

impl FlowOutcome {
    pub fn is_correct(&self) -> bool {
        self.predicted.as_ref() == Some(&self.true_label)
    }

    /// Errored flows score as Unknown predictions.
    fn scored_prediction(&self) -> ClassLabel {
        self.predicted.clone().unwrap_or_else(ClassLabel::unknown)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub phase: Phase,
    pub mode: AblationMode,
    pub config: RunConfig,
    pub config_hash: String,
    pub flow_ids_hash: String,
    pub total: u64,
    pub classified: u64,
    pub errored: u64,
    pub parse_failures: u64,
    pub fuzzy_parses: u64,
    pub inductions: u64,
    pub induction_failures: u64,
    pub library_before: u64,
    pub library_after: u64,
    pub library_checksum: String,
    pub metrics: Option<MetricsReport>,
    pub curve: Vec<CurvePoint>,
    pub outcomes: Vec<FlowOutcome>,
}

impl RunReport {
    fn assemble(
        phase: Phase,
        cfg: &RunConfig,
        flows: &[LabeledFlow],
        outcomes: Vec<FlowOutcome>,
        library_before: u64,
        library: Option<&ExperienceLibrary>,
    ) -> Result<Self, PipelineError> {
        let mut cm = ConfusionMatrix::new(&cfg.classes);
        for o in &outcomes {
            cm.accumulate(&o.true_label, &o.scored_prediction())?;
        }
        let metrics = if outcomes.is_empty() { None } else { Some(cm.macro_metrics()?) };
        let curve = if phase == Phase::Build {
            let steps: Vec<ScoredStep> = outcomes
                .iter()
                .map(|o| ScoredStep {
                    truth: o.true_label.clone(),
                    predicted: o.scored_prediction(),
                    library_size: o.library_size,
                })
                .collect();
            windowed_curve(&cfg.classes, &steps, cfg.curve_window)?
        } else {
            Vec::new()
        };
        let count = |f: &dyn Fn(&FlowOutcome) -> bool| outcomes.iter().filter(|o| f(o)).count() as u64;
        Ok(RunReport {
            phase,
            mode: cfg.mode,
            config: cfg.clone(),
            config_hash: cfg.hash(),
            flow_ids_hash: flow_ids_hash(flows),
            total: outcomes.len() as u64,
            classified: count(&|o| o.predicted.is_some()),
            errored: count(&|o| o.error.is_some()),
            parse_failures: count(&|o| o.parse_status == Some(ParseStatus::Unparsed)),
            fuzzy_parses: count(&|o| o.parse_status == Some(ParseStatus::Fuzzy)),
            inductions: count(&|o| o.induced_rule_id.is_some()),
            induction_failures: count(&|o| o.induction_error.is_some()),
            library_before,
            library_after: library.map_or(0, |l| l.len() as u64),
            library_checksum: library.map(ExperienceLibrary::checksum).unwrap_or_default(),
            metrics,
            curve,
            outcomes,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Hex SHA-256 over the flow ids in run order.
pub fn flow_ids_hash(flows: &[LabeledFlow]) -> String {
    let mut h = Sha256::new();
    for f in flows {
        h.update(f.flow_id.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn split_hash(build: &[LabeledFlow], eval: &[LabeledFlow]) -> String {
    let mut h = Sha256::new();
    h.update(b"build");
    for f in build {
        h.update(f.flow_id.to_le_bytes());
    }
    h.update(b"eval");
    for f in eval {
        h.update(f.flow_id.to_le_bytes());
    }
    hex::encode(h.finalize())
}

// ---------------------------------------------------------------------------
// Per-flow classification

struct Classified {
    outcome: FlowOutcome,
    embedding: Option<FlowEmbedding>,
    retrieval: RetrievalResult,
    flow_json: String,
    transcript: Option<TranscriptRecord>,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1000.0
}

/// Embed, retrieve and classify one flow. Agent and embedding failures are
/// recorded on the outcome; library failures abort the run.
fn classify_flow(
    seq: u64,
    flow: &LabeledFlow,
    cfg: &RunConfig,
    library: Option<&ExperienceLibrary>,
    rt: &Runtime,
) -> Result<Classified, PipelineError> {
    let mut latency = StageLatency::default();
    let flow_json = to_canonical_json(&flow.record);
    let mut outcome = FlowOutcome {
        seq,
        flow_id: flow.flow_id,
        true_label: flow.label.clone(),
        predicted: None,
        retrieval: None,
        parse_status: None,
        induced_rule_id: None,
        error: None,
        induction_error: None,
        library_size: library.map_or(0, |l| l.len() as u64),
        latency: None,
    };

    let needs_embedding = cfg.mode.retrieves();
    let mut embedding = None;
    if needs_embedding {
        let t = Instant::now();
        match rt.embedder.embed(&flow_json) {
            Ok(e) => embedding = Some(e),
            Err(e) => outcome.error = Some(format!("embedding: {e}")),
        }
        latency.embed_ms = ms_since(t);
    }

    let mut retrieval = RetrievalResult::NoContext;
    if let (Some(lib), Some(q)) = (library.filter(|_| cfg.mode.retrieves()), &embedding) {
        let t = Instant::now();
        retrieval = lib.retrieve(q, cfg.tau)?;
        latency.retrieve_ms = ms_since(t);
        if let RetrievalResult::Hit { entry, similarity } = &retrieval {
            outcome.retrieval = Some(RetrievalInfo {
                entry_id: entry.entry_id,
                similarity: *similarity,
            });
        }
    }

    let mut transcript = None;
    if outcome.error.is_none() {
        let prompt = build_classification_prompt(&flow_json, &retrieval, &cfg.classes);
        let t = Instant::now();
        match classify(rt.classifier.as_ref(), &prompt, &cfg.classes) {
            Ok(v) => {
                transcript = Some(TranscriptRecord {
                    flow_id: flow.flow_id,
                    kind: "classify".into(),
                    prompt_hash: prompt.hash(),
                    raw_text: v.raw_text,
                    parse_status: serde_json::to_value(v.parse_status)?.as_str().unwrap_or_default().to_string(),
                });
                outcome.predicted = Some(v.label);
                outcome.parse_status = Some(v.parse_status);
            }
            Err(e) => outcome.error = Some(format!("classifier: {e}")),
        }
        latency.classify_ms = ms_since(t);
    }
    if cfg.record_timings {
        outcome.latency = Some(latency);
    }
    Ok(Classified {
        outcome,
        embedding,
        retrieval,
        flow_json,
        transcript,
    })
}

// ---------------------------------------------------------------------------
// Phase 1

/// Where a build persists its state.
#[derive(Clone, Debug, Default)]
pub struct BuildIo {
    /// Library file, written at every checkpoint and at the end.
    pub library_path: Option<PathBuf>,
    pub transcript_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    /// Continue from `checkpoint_path` if it exists.
    pub resume: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Checkpoint {
    config_hash: String,
    flow_ids_hash: String,
    next_seq: u64,
    library_before: u64,
    library_checksum: String,
    transcript_len: u64,
    outcomes: Vec<FlowOutcome>,
    classifier_state: Option<serde_json::Value>,
    inducer_state: Option<serde_json::Value>,
}

fn write_checkpoint(path: &Path, cp: &Checkpoint) -> Result<(), PipelineError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, serde_json::to_vec(cp)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Phase 1 over `flows`, in order, mutating `library`.
pub fn run_build(
    cfg: &RunConfig,
    flows: &[LabeledFlow],
    library: &mut ExperienceLibrary,
    rt: &mut Runtime,
    io: &BuildIo,
) -> Result<RunReport, PipelineError> {
    library.check_compatible(rt.embedder.as_ref())?;
    let config_hash = cfg.hash();
    let ids_hash = flow_ids_hash(flows);

    let mut start = 0usize;
    let mut outcomes = Vec::with_capacity(flows.len());
    let mut library_before = library.len() as u64;
    let mut transcript = None;

    if let (true, Some(cp_path)) = (io.resume, &io.checkpoint_path) {
        if cp_path.exists() {
            let cp: Checkpoint = serde_json::from_slice(&std::fs::read(cp_path)?)?;
            if cp.config_hash != config_hash || cp.flow_ids_hash != ids_hash {
                return Err(PipelineError::Checkpoint("checkpoint belongs to a different run".into()));
            }
            let lib_path = io
                .library_path
                .as_ref()
                .ok_or_else(|| PipelineError::Checkpoint("resume needs the library path".into()))?;
            let restored = ExperienceLibrary::load(lib_path)?;
            if restored.checksum() != cp.library_checksum {
                return Err(PipelineError::Checkpoint("library does not match checkpoint".into()));
            }
            *library = restored;
            if let Some(s) = cp.classifier_state {
                rt.classifier.import_state(s)?;
            }
            if let Some(s) = cp.inducer_state {
                rt.inducer.import_state(s)?;
            }
            if let Some(p) = &io.transcript_path {
                transcript = Some(Transcript::resume(p, cp.transcript_len)?);
            }
            start = cp.next_seq as usize;
            library_before = cp.library_before;
            outcomes = cp.outcomes;
            tracing::info!(next_seq = start, "resumed build from checkpoint");
        }
    }

    let mut transcript = match (transcript, &io.transcript_path) {
        (Some(t), _) => t,
        (None, Some(p)) => Transcript::create(p)?,
        (None, None) => Transcript::disabled(),
    };

    for (seq, flow) in flows.iter().enumerate().skip(start) {
        let Classified {
            mut outcome,
            embedding,
            retrieval,
            flow_json,
            transcript: rec,
        } = classify_flow(seq as u64, flow, cfg, Some(library), rt)?;
        if let Some(rec) = &rec {
            transcript.record(rec)?;
        }

        if cfg.mode == AblationMode::Full {
            if let (Some(predicted), Some(key)) = (outcome.predicted.clone(), &embedding) {
                if predicted != flow.label {
                    let t = Instant::now();
                    let induced = build_induction_prompt(&flow_json, &predicted, &flow.label, &retrieval)
                        .and_then(|p| induce_rule(rt.inducer.as_ref(), &p).map(|r| (p.hash(), r)));
                    match induced {
                        Ok((prompt_hash, induced)) => {
                            transcript.record(&TranscriptRecord {
                                flow_id: flow.flow_id,
                                kind: "induce".into(),
                                prompt_hash,
                                raw_text: induced.raw_text.clone(),
                                parse_status: if induced.well_formed { "well_formed" } else { "wrapped" }.into(),
                            })?;
                            let id = library.insert(NewEntry {
                                key: key.clone(),
                                rule: induced.rule,
                                predicted,
                                actual: flow.label.clone(),
                                source_flow_id: flow.flow_id,
                                created_seq: seq as u64,
                            })?;
                            outcome.induced_rule_id = Some(id);
                        }
                        Err(e) => outcome.induction_error = Some(e.to_string()),
                    }
                    if let Some(l) = &mut outcome.latency {
                        l.induce_ms = ms_since(t);
                    }
                }
            }
            if let Some(e) = &embedding {
                rt.observe(flow, e);
            }
        }
        outcome.library_size = library.len() as u64;
        outcomes.push(outcome);

        let done = seq + 1;
        if let Some(cp_path) = &io.checkpoint_path {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < flows.len() {
                if let Some(lib_path) = &io.library_path {
                    library.save(lib_path)?;
                }
                transcript.flush()?;
                write_checkpoint(
                    cp_path,
                    &Checkpoint {
                        config_hash: config_hash.clone(),
                        flow_ids_hash: ids_hash.clone(),
                        next_seq: done as u64,
                        library_before,
                        library_checksum: library.checksum(),
                        transcript_len: transcript.position(),
                        outcomes: outcomes.clone(),
                        classifier_state: rt.classifier.export_state(),
                        inducer_state: rt.inducer.export_state(),
                    },
                )?;
            }
        }
    }

    transcript.flush()?;
    if let Some(lib_path) = &io.library_path {
        library.save(lib_path)?;
    }
    if let Some(cp_path) = &io.checkpoint_path {
        if cp_path.exists() {
            std::fs::remove_file(cp_path)?;
        }
    }
    RunReport::assemble(Phase::Build, cfg, flows, outcomes, library_before, Some(library))
}

// ---------------------------------------------------------------------------
// Phase 2

/// Classification only, in parallel, against a library that must come out
/// byte-identical. `library` is ignored in zero-shot mode.
pub fn run_evaluate(
    cfg: &RunConfig,
    flows: &[LabeledFlow],
    library: Option<&ExperienceLibrary>,
    rt: &Runtime,
    transcript_path: Option<&Path>,
) -> Result<RunReport, PipelineError> {
    let library = if cfg.mode.retrieves() {
        let lib = library.ok_or(PipelineError::MissingLibrary(cfg.mode.label()))?;
        lib.check_compatible(rt.embedder.as_ref())?;
        Some(lib)
    } else {
        None
    };
    let before = library.map(ExperienceLibrary::checksum);
    let size_before = library.map_or(0, |l| l.len() as u64);

    let classified: Vec<Classified> = flows
        .par_iter()
        .enumerate()
        .map(|(seq, flow)| classify_flow(seq as u64, flow, cfg, library, rt))
        .collect::<Result<_, _>>()?;

    let after = library.map(ExperienceLibrary::checksum);
    if before != after {
        return Err(PipelineError::LibraryMutated {
            before: before.unwrap_or_default(),
            after: after.unwrap_or_default(),
        });
    }

    let mut transcript = match transcript_path {
        Some(p) => Transcript::create(p)?,
        None => Transcript::disabled(),
    };
    let mut outcomes = Vec::with_capacity(classified.len());
    for c in classified {
        if let Some(rec) = &c.transcript {
            transcript.record(rec)?;
        }
        outcomes.push(c.outcome);
    }
    transcript.flush()?;
    RunReport::assemble(Phase::Evaluate, cfg, flows, outcomes, size_before, library)
}

// ---------------------------------------------------------------------------
// Ablation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub split_hash: String,
    /// Phase 1 in full mode; its metrics are construction-phase scores.
    pub full_build: RunReport,
    pub library_only: RunReport,
    pub zero_shot: RunReport,
    /// The no-library baseline curve over the build set.
    pub zero_shot_build_curve: Vec<CurvePoint>,
    pub table: String,
}

pub fn comparison_rows(zero_shot: &RunReport, full_build: &RunReport, library_only: &RunReport) -> Vec<(String, MetricsReport)> {
    [
        ("Zero-Shot", zero_shot),
        ("Full (construction)", full_build),
        ("Library Only", library_only),
    ]
    .into_iter()
    .filter_map(|(name, r)| r.metrics.clone().map(|m| (name.to_string(), m)))
    .collect()
}

/// Full build on the build set, then library-only and zero-shot evaluation on
/// the eval set, plus a zero-shot pass over the build set for its curve.
/// Every sub-run starts from fresh agents built by `runtime`.
pub fn run_ablation(
    cfg: &RunConfig,
    build_flows: &[LabeledFlow],
    eval_flows: &[LabeledFlow],
    runtime: &dyn Fn() -> Result<Runtime, PipelineError>,
    io: &BuildIo,
) -> Result<(AblationReport, ExperienceLibrary), PipelineError> {
    let with_mode = |mode| RunConfig { mode, ..cfg.clone() };

    let mut rt = runtime()?;
    let mut library = ExperienceLibrary::for_embedder(rt.embedder.as_ref());
    let full_build = run_build(&with_mode(AblationMode::Full), build_flows, &mut library, &mut rt, io)?;
    library.freeze();

    let library_only = run_evaluate(&with_mode(AblationMode::LibraryOnly), eval_flows, Some(&library), &runtime()?, None)?;
    let zero_shot = run_evaluate(&with_mode(AblationMode::ZeroShot), eval_flows, None, &runtime()?, None)?;

    let mut rt = runtime()?;
    let mut scratch = ExperienceLibrary::for_embedder(rt.embedder.as_ref());
    let baseline = run_build(&with_mode(AblationMode::ZeroShot), build_flows, &mut scratch, &mut rt, &BuildIo::default())?;

    let rows = comparison_rows(&zero_shot, &full_build, &library_only);
    let baseline_row = rows.iter().position(|(n, _)| n == "Zero-Shot");
    let table = render_comparison(&rows, baseline_row);
    Ok((
        AblationReport {
            split_hash: split_hash(build_flows, eval_flows),
            full_build,
            library_only,
            zero_shot,
            zero_shot_build_curve: baseline.curve,
            table,
        },
        library,
    ))
}

// ---------------------------------------------------------------------------
// Data

/// Build and eval sets for `cfg`: the manifest's ids when one is configured,
/// otherwise a fresh stratified split.
pub fn load_split(cfg: &RunConfig) -> Result<(Vec<LabeledFlow>, Vec<LabeledFlow>, IngestionReport), PipelineError> {
    let dataset = cfg.dataset.as_ref().ok_or(PipelineError::MissingDataset)?;
    let (flows, report) = load_labeled_flows(open_dataset(dataset)?, &cfg.schema_map, &cfg.classes)?;
    let (build, eval) = match &cfg.manifest {
        Some(path) => {
            let manifest: SplitManifest = serde_json::from_slice(&std::fs::read(path)?)?;
            manifest.select(&flows)?
        }
        None => {
            let split = stratified_split(&flows, &cfg.classes, cfg.quota_build, cfg.quota_eval, cfg.seed)?;
            (split.build_set, split.eval_set)
        }
    };
    Ok((build, eval, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{PromptKind, Prompt};
    use crate::embedding::HashEmbedder;
    use crate::flow::{ClassSet, FlowRecord};
    use crate::synthetic::synthetic_flows;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn offline_cfg() -> RunConfig {
        RunConfig {
            embedder: crate::embedding::EmbedderSpec {
                dim: 256,
                ..Default::default()
            },
            curve_window: 50,
            ..RunConfig::default()
        }
    }

    fn rt(cfg: &RunConfig) -> Runtime {
        Runtime::from_config(cfg).unwrap()
    }

    #[test]
    fn empty_build_is_empty() {
        let cfg = offline_cfg();
        let mut r = rt(&cfg);
        let mut lib = ExperienceLibrary::for_embedder(r.embedder.as_ref());
        let rep = run_build(&cfg, &[], &mut lib, &mut r, &BuildIo::default()).unwrap();
        assert_eq!(rep.total, 0);
        assert!(rep.metrics.is_none());
        assert!(rep.curve.is_empty());
        assert_eq!(lib.len(), 0);
    }

    #[test]
    fn build_accounting_and_replay() {
        let cfg = offline_cfg();
        let flows = synthetic_flows(&cfg.classes, 125, 10, 3);
        let mut r = rt(&cfg);
        let mut lib = ExperienceLibrary::for_embedder(r.embedder.as_ref());
        let rep = run_build(&cfg, &flows, &mut lib, &mut r, &BuildIo::default()).unwrap();
        assert_eq!(rep.total, 500);
        assert_eq!(rep.classified + rep.errored, rep.total);
        assert_eq!(rep.library_after - rep.library_before, rep.inductions);
        let wrong = rep.outcomes.iter().filter(|o| !o.is_correct()).count() as u64;
        assert_eq!(rep.inductions, wrong);
        for o in &rep.outcomes {
            if o.induced_rule_id.is_some() {
                assert!(!o.is_correct());
            }
        }
        let first = rep.curve.first().unwrap().window_macro_f1;
        let last = rep.curve.last().unwrap().window_macro_f1;
        assert!(last > first, "curve {first} -> {last}");

        let mut r2 = rt(&cfg);
        let mut lib2 = ExperienceLibrary::for_embedder(r2.embedder.as_ref());
        let rep2 = run_build(&cfg, &flows, &mut lib2, &mut r2, &BuildIo::default()).unwrap();
        assert_eq!(rep.to_json(), rep2.to_json());
        assert_eq!(lib.to_bytes(), lib2.to_bytes());
    }

    #[test]
    fn evaluate_leaves_library_untouched() {
        let cfg = offline_cfg();
        let flows = synthetic_flows(&cfg.classes, 60, 5, 4);
        let (build, eval) = flows.split_at(160);
        let mut r = rt(&cfg);
        let mut lib = ExperienceLibrary::for_embedder(r.embedder.as_ref());
        run_build(&cfg, build, &mut lib, &mut r, &BuildIo::default()).unwrap();
        let before = lib.to_bytes();
        let lib_cfg = RunConfig {
            mode: AblationMode::LibraryOnly,
            ..cfg.clone()
        };
        let a = run_evaluate(&lib_cfg, eval, Some(&lib), &rt(&cfg), None).unwrap();
        let b = run_evaluate(&lib_cfg, eval, Some(&lib), &rt(&cfg), None).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(lib.to_bytes(), before);
        assert_eq!(a.library_before, a.library_after);
        assert_eq!(a.total, eval.len() as u64);
        assert!(matches!(
            run_evaluate(&lib_cfg, eval, None, &rt(&cfg), None),
            Err(PipelineError::MissingLibrary(_))
        ));
    }

    #[test]
    fn zero_shot_never_grows_library() {
        let cfg = RunConfig {
            mode: AblationMode::ZeroShot,
            ..offline_cfg()
        };
        let flows = synthetic_flows(&cfg.classes, 25, 5, 5);
        let mut r = rt(&cfg);
        let mut lib = ExperienceLibrary::for_embedder(r.embedder.as_ref());
        let rep = run_build(&cfg, &flows, &mut lib, &mut r, &BuildIo::default()).unwrap();
        assert_eq!(rep.inductions, 0);
        assert_eq!(lib.len(), 0);
        assert!(rep.outcomes.iter().all(|o| o.retrieval.is_none()));
    }

    /// Classifier that always fails.
    struct Down;

    impl ReasoningAgent for Down {
        fn respond(&self, _: &Prompt) -> Result<String, AgentError> {
            Err(AgentError::AgentUnavailable("down".into()))
        }
    }

    #[test]
    fn agent_failures_are_counted_not_fatal() {
        let cfg = offline_cfg();
        let emb: Arc<dyn Embedder> = Arc::new(HashEmbedder::new(256, 0).unwrap());
        let mut r = Runtime::new(emb.clone(), Box::new(Down), Box::new(Down));
        let mut lib = ExperienceLibrary::for_embedder(emb.as_ref());
        let flows = synthetic_flows(&cfg.classes, 5, 2, 1);
        let rep = run_build(&cfg, &flows, &mut lib, &mut r, &BuildIo::default()).unwrap();
        assert_eq!(rep.errored, 20);
        assert_eq!(rep.classified, 0);
        assert_eq!(rep.metrics.unwrap().accuracy, 0.0);
    }

    #[test]
    fn induction_failure_keeps_flow() {
        struct Sure;
        impl ReasoningAgent for Sure {
            fn respond(&self, p: &Prompt) -> Result<String, AgentError> {
                assert_eq!(p.kind, PromptKind::Classify);
                Ok("LABEL: Benign".into())
            }
        }
        let cfg = offline_cfg();
        let emb: Arc<dyn Embedder> = Arc::new(HashEmbedder::new(256, 0).unwrap());
        let mut r = Runtime::new(emb.clone(), Box::new(Sure), Box::new(Down));
        let mut lib = ExperienceLibrary::for_embedder(emb.as_ref());
        let mut rec = FlowRecord::zeroed("TCP");
        rec.src_ip = "10.0.0.1".into();
        rec.dst_ip = "10.0.0.2".into();
        let flows = vec![LabeledFlow {
            flow_id: 0,
            record: rec,
            label: ClassLabel::Known("DoS".into()),
        }];
        let rep = run_build(&cfg, &flows, &mut lib, &mut r, &BuildIo::default()).unwrap();
        assert_eq!(rep.classified, 1);
        assert_eq!(rep.induction_failures, 1);
        assert_eq!(rep.inductions, 0);
        assert_eq!(lib.len(), 0);
        let _ = ClassSet::nf_bot_iot();
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            checkpoint_every: 40,
            ..offline_cfg()
        };
        let flows = synthetic_flows(&cfg.classes, 25, 5, 9);
        let io = |name: &str| BuildIo {
            library_path: Some(dir.path().join(format!("{name}.lib"))),
            transcript_path: Some(dir.path().join(format!("{name}.jsonl"))),
            checkpoint_path: Some(dir.path().join(format!("{name}.ckpt"))),
            resume: true,
        };

        let mut r = rt(&cfg);
        let mut lib = ExperienceLibrary::for_embedder(r.embedder.as_ref());
        let whole = run_build(&cfg, &flows, &mut lib, &mut r, &io("a")).unwrap();

        // Interrupted run: the classifier panics on flow 50, after the checkpoint at 40.
        let b = io("b");
        let mut r = rt(&cfg);
        r.classifier = Box::new(CrashAfter {
            inner: std::mem::replace(&mut r.classifier, Box::new(Down)),
            left: AtomicUsize::new(50),
        });
        let mut lib = ExperienceLibrary::for_embedder(r.embedder.as_ref());
        let crashed = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            run_build(&cfg, &flows, &mut lib, &mut r, &b)
        }));
        assert!(crashed.is_err());
        assert!(b.checkpoint_path.as_ref().unwrap().exists());

        let mut r = rt(&cfg);
        let mut lib = ExperienceLibrary::for_embedder(r.embedder.as_ref());
        let resumed = run_build(&cfg, &flows, &mut lib, &mut r, &b).unwrap();
        assert_eq!(whole.outcomes, resumed.outcomes);
        assert_eq!(
            std::fs::read(io("a").library_path.unwrap()).unwrap(),
            std::fs::read(b.library_path.as_ref().unwrap()).unwrap()
        );
        assert_eq!(
            std::fs::read(io("a").transcript_path.unwrap()).unwrap(),
            std::fs::read(b.transcript_path.as_ref().unwrap()).unwrap()
        );
        assert!(!b.checkpoint_path.unwrap().exists());
    }

    struct CrashAfter {
        inner: Box<dyn ReasoningAgent>,
        left: AtomicUsize,
    }

    impl ReasoningAgent for CrashAfter {
        fn respond(&self, p: &Prompt) -> Result<String, AgentError> {
            if p.kind == PromptKind::Classify
                && self.left.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1)).is_err()
            {
                panic!("simulated crash");
            }
            self.inner.respond(p)
        }

        fn observe(&mut self, obs: &Observation<'_>) {
            self.inner.observe(obs)
        }

        fn export_state(&self) -> Option<serde_json::Value> {
            self.inner.export_state()
        }

        fn import_state(&mut self, state: serde_json::Value) -> Result<(), AgentError> {
            self.inner.import_state(state)
        }
    }
}
