//! Backend-agnostic extraction and grading of privacy-sensitive information
//! from Chinese online medical consultation text.
//!
//! The crate turns free-text consultation records into `(entity, category,
//! level)` triples: a closed category vocabulary with default sensitivity
//! levels, a few-shot prompt builder with an optional structured-output
//! schema, pluggable chat-completion backends (HTTP and an offline replay
//! stub), a strict output validator, deterministic override rules for
//! high-risk findings, a chunking pipeline, and grading metrics.

pub mod backend;
pub mod corpus;
pub mod metrics;
pub mod normalize;
pub mod pipeline;
pub mod prompt;
pub mod report;
pub mod rules;
pub mod synth;
pub mod taxonomy;
pub mod validator;

pub use backend::{
    Backend, BackendConfig, BackendError, ChatRequest, CompletionResult, FaultPlan, HttpTransport,
    Providers, RetryPolicy, StubTransport, Transport,
};
pub use corpus::{
    fill_names, read_corpus, read_rejections, read_triple_rows, rows_to_record_triples,
    write_corpus, write_rejections, write_triple_rows, ColumnMap, CorpusError, CorpusFile,
    CorpusFormat, NamePool, TripleRow,
};
pub use metrics::{
    evaluate, match_triples, MetricsError, MetricsReport, RecordDiagnostics, RecordTriples,
};
pub use pipeline::{
    chunk_text, process_corpus, process_record, ChunkConfig, ConsultationRecord, ExtractedTriple,
    PipelineConfig, RecordOutcome, RecordRejections, RecordResult, RejectionCounts,
};
pub use prompt::{AblationFlags, Exemplar, ExemplarTriple, Message, PromptBundle, Role};
pub use report::{emit_plot_data, stratify, DistributionEntry, LevelDistribution, ReportError};
pub use rules::{OverrideRule, RuleAction, RuleDecision, RuleError, RulePack, RuleScope};
pub use synth::{SynthConfig, SynthCorpus, SynthError};
pub use taxonomy::{Category, Group, SensitivityLevel, Taxonomy, TaxonomyEntry, TaxonomyError};
pub use validator::{parse_and_validate, RejectReason, RejectedItem, Triple, ValidationOutcome};
