//! Corpus ingestion and construction of training and task examples.

mod builders;
mod corpus;
mod packed;

pub use builders::{
    build_prefix_lm, build_span_corruption, corpus_stats, example_seed, format_downstream, format_input, prefix_lm_from_ids,
    prefix_lm_split_at, span_corruption_from_ids, CorpusStats, PipelineConfig, SpanConfig, SplitPolicy, Task,
    TruncationCounters, TruncationSide,
};
pub use corpus::{load_corpus, read_corpus, CorpusFormat, CorpusReader, RawExample, MALFORMED_LIMIT, SEP_MARKER};
pub use packed::{read_packed, PackedReader, PackedWriter, NARB_MAGIC, NARB_VERSION};
