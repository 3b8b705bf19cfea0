//! Activation statistics and the two neuron-specialization metrics.

mod entropy;
mod stats;
mod trace;

pub use entropy::{
    entropy_of_mass, layer_threshold, mean_std, percentile, select_vocab_subset,
    semantic_entropy, similarity_bin, subset_with_threshold, summary_csv, token_entropy,
    CosineTable, EntropyReport, LayerSummary, NeuronEntropy, ReportOptions, SemanticEntropy,
    VocabSubset, DEFAULT_BINS, SUBSET_FRACTION, SUBSET_PERCENTILE,
};
pub use stats::{collect_token_stats, corpus_hash, NeuronTokenStats};
pub use trace::{
    checkpoint_entropy_curve, curve_csv, default_curve_layers, trace_dimension, trace_from_stats, CurveRow, TraceMap,
};

/// Token frequencies as `f64` weights.
pub fn frequency_weights(tokens: &[usize], vocab: usize) -> Vec<f64> {
    crate::training::token_frequencies(tokens, vocab)
        .into_iter()
        .map(|c| c as f64)
        .collect()
}
