//! Bootstrapped speech recognition for languages with little or no
//! utterance-level data.
//!
//! The crate covers the whole recipe: a grapheme-based monophone GMM-HMM is
//! trained from short word/phrase clips, used to segment long recordings with
//! imperfect transcripts into an utterance-level corpus, refined into a
//! triphone model, and decoded with an external n-gram language model.
//!
//! Module map:
//! - [`corpus`]: manifests, audio canonicalization, duration subsets
//! - [`textnorm`]: transcript normalization
//! - [`lexicon`]: wordlists and graphemic lexicons
//! - [`features`]: MFCC front-end, CMVN, silence detection
//! - [`lm`]: backoff n-gram models and ARPA I/O
//! - [`am`]: GMM-HMM training and forced alignment
//! - [`decode`]: token-passing beam search over a lexicon tree
//! - [`segment`]: long-form segmentation (chunked decoding + Smith-Waterman)
//! - [`eval`]: WER/CER scoring
//! - [`synth`]: synthetic-language fixture generator
//! - [`pipeline`]: staged, content-addressed pipeline runs and budget sweeps

pub mod am;
pub mod corpus;
pub mod decode;
pub mod eval;
pub mod features;
pub mod lexicon;
pub mod lm;
pub mod pipeline;
pub mod segment;
pub mod synth;
pub mod textnorm;

pub(crate) mod util;
