//! Task heads over the fused representation `H_e`.

pub mod decoder;
pub mod qa;
pub mod rnn;
pub mod selection;

pub use decoder::{greedy_decode, summarize_loss, DecoderParams};
pub use qa::{best_span, qa_spans, QaParams};
pub use rnn::{bi_rnn_baseline, BiRnnParams, RnnKind, RnnParams};
pub use selection::{dialogue_vector, select_response, Readout, SelectionParams};
