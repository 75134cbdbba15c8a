//! Synthetic corpora, needle-in-a-haystack retrieval, perplexity and length sweeps.

mod corpus;
mod eval;
mod niah;

pub use corpus::{unigram_entropy, SynthCorpus, SynthCorpusConfig};
pub use eval::{
    adapt_for_length, eval_perplexity, length_sweep, read_results_csv, write_results_csv, Crop,
    EvalResult, Perplexity, SweepConfig, SweepMethod, Task,
};
pub use niah::{
    gen_niah, gen_niah_at, greedy_outputs, read_samples_jsonl, run_niah, score_niah,
    write_samples_jsonl, Needle, NiahSample, NiahScore, NiahVariant,
};
