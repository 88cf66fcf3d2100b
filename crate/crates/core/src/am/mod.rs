//! GMM-HMM acoustic models over graphemic units: flat start, Viterbi-EM
//! training, forced alignment, and occupancy-tied triphones.

mod align;
pub mod gmm;
mod io;
mod train;
mod triphone;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

pub use align::{
    align_corpus, equal_alignment, force_align, score_path, AlignFailure, AlignFailureReason, AlignInput,
    AlignOptions, AlignmentPath, CorpusAlignment, PhoneSpan, WordSpan,
};
pub use gmm::{Gmm, VAR_FLOOR};
pub use io::{ctm_lines, MODEL_VERSION};
pub use train::{flat_start, train, train_observed, IterStats, TrainSchedule};
pub use triphone::{train_triphone, triphone_occupancy, TriphoneKey};

use crate::lexicon::{Lexicon, SIL, SPN};

/// Lower and upper clamp for self-loop probabilities.
pub const MIN_TRANSITION: f64 = 0.01;
pub const MAX_TRANSITION: f64 = 0.99;

/// Word-boundary context marker in triphone names.
pub const BOUNDARY: &str = "#";

#[derive(Debug, thiserror::Error)]
pub enum AmError {
    #[error("no training data")]
    EmptyData,
    #[error("word `{0}` cannot be pronounced with this lexicon and model")]
    NotCoverable(String),
    #[error("every utterance failed to align in iteration {0}")]
    AllFailed(usize),
    #[error("feature dimension {got} does not match model dimension {want}")]
    DimMismatch { got: usize, want: usize },
    #[error("model file: {0}")]
    Format(String),
    #[error("cannot access {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub states_per_phone: usize,
    pub silence_states: usize,
}

impl Default for Topology {
    fn default() -> Self {
        Self { states_per_phone: 3, silence_states: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Monophone,
    Triphone,
}

/// One emitting HMM state: a mixture plus its self-loop probability. The
/// forward (or exit) probability is the complement.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmState {
    pub gmm: Gmm,
    pub self_loop: f64,
}

impl HmmState {
    pub fn log_self(&self) -> f64 {
        self.self_loop.ln()
    }

    pub fn log_exit(&self) -> f64 {
        (1.0 - self.self_loop).ln()
    }
}

/// Phone context; `None` is a word boundary.
pub type Ctx = Option<usize>;

#[derive(Debug, Clone, PartialEq)]
pub struct AcousticModel {
    pub kind: ModelKind,
    phones: Vec<String>,
    phone_index: HashMap<String, usize>,
    pub topology: Topology,
    pub states: Vec<HmmState>,
    mono: Vec<Vec<usize>>,
    tri: BTreeMap<(Ctx, usize, Ctx), Vec<usize>>,
}

impl AcousticModel {
    /// Build a monophone model for `phones` with every state initialised
    /// from `init`. `SIL` and `SPN` must be in the inventory.
    pub fn monophone(phones: Vec<String>, topology: Topology, init: &HmmState) -> Self {
        let mut states = Vec::new();
        let mut mono = Vec::with_capacity(phones.len());
        for p in &phones {
            let n = if p == SIL { topology.silence_states } else { topology.states_per_phone };
            mono.push((states.len()..states.len() + n).collect());
            states.extend(std::iter::repeat_n(init.clone(), n));
        }
        let phone_index = phones.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        Self { kind: ModelKind::Monophone, phones, phone_index, topology, states, mono, tri: BTreeMap::new() }
    }

    pub(crate) fn from_parts(
        kind: ModelKind,
        phones: Vec<String>,
        topology: Topology,
        states: Vec<HmmState>,
        mono: Vec<Vec<usize>>,
        tri: BTreeMap<(Ctx, usize, Ctx), Vec<usize>>,
    ) -> Self {
        let phone_index = phones.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        Self { kind, phones, phone_index, topology, states, mono, tri }
    }

    /// Phone inventory for a lexicon: `SIL`, `SPN`, then graphemes in order.
    pub fn inventory_for(lex: &Lexicon) -> Vec<String> {
        let mut v = vec![SIL.to_string(), SPN.to_string()];
        v.extend(lex.graphemes().iter().cloned());
        v
    }

    pub fn phones(&self) -> &[String] {
        &self.phones
    }

    pub fn phone_id(&self, p: &str) -> Option<usize> {
        self.phone_index.get(p).copied()
    }

    pub fn sil(&self) -> usize {
        self.phone_index[SIL]
    }

    pub fn dim(&self) -> usize {
        self.states[0].gmm.dim()
    }

    pub fn mono_states(&self, phone: usize) -> &[usize] {
        &self.mono[phone]
    }

    pub(crate) fn mono_map(&self) -> &[Vec<usize>] {
        &self.mono
    }

    pub(crate) fn tri_map(&self) -> &BTreeMap<(Ctx, usize, Ctx), Vec<usize>> {
        &self.tri
    }

    pub(crate) fn tri_map_mut(&mut self) -> &mut BTreeMap<(Ctx, usize, Ctx), Vec<usize>> {
        &mut self.tri
    }

    /// States for a phone in context. Unseen contexts, silence, and the
    /// garbage phone fall back to the monophone states.
    pub fn states_for(&self, phone: usize, left: Ctx, right: Ctx) -> &[usize] {
        self.tri.get(&(left, phone, right)).unwrap_or(&self.mono[phone])
    }

    pub fn n_contexts(&self) -> usize {
        self.tri.len()
    }

    pub fn n_gaussians(&self) -> usize {
        self.states.iter().map(|s| s.gmm.n_components()).sum()
    }

    /// Phone ids for a word's pronunciation.
    pub fn word_phones(&self, lex: &Lexicon, word: &str) -> Option<Vec<usize>> {
        lex.pronunciation(word)?.iter().map(|g| self.phone_id(g)).collect()
    }

    pub fn state_loglike(&self, state: usize, x: &[f64]) -> f64 {
        self.states[state].gmm.log_likelihood(x)
    }

    /// Mixture weights sum to one, variances respect the floor, transition
    /// rows sum to one, and every phone maps to states.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (i, s) in self.states.iter().enumerate() {
            s.gmm.check(VAR_FLOOR).map_err(|e| format!("state {i}: {e}"))?;
            let row = s.self_loop + (1.0 - s.self_loop);
            if (row - 1.0).abs() > 1e-8 || !(0.0..1.0).contains(&s.self_loop) {
                return Err(format!("state {i}: transition row invalid ({})", s.self_loop));
            }
        }
        if self.mono.len() != self.phones.len() || self.mono.iter().any(Vec::is_empty) {
            return Err("phone without states".into());
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// A small model whose states have well separated unit-variance means.
    pub fn separated_model(graphemes: &[&str], states_per_phone: usize, dim: usize) -> (AcousticModel, Lexicon) {
        let mut lex = Lexicon::new();
        for g in graphemes {
            lex.add_word(g).unwrap();
        }
        let phones = AcousticModel::inventory_for(&lex);
        let topo = Topology { states_per_phone, silence_states: states_per_phone };
        let init = HmmState { gmm: Gmm::single(vec![0.0; dim], vec![1.0; dim]), self_loop: 0.6 };
        let mut m = AcousticModel::monophone(phones, topo, &init);
        for (i, s) in m.states.iter_mut().enumerate() {
            let mean: Vec<f64> = (0..dim).map(|j| if j == i % dim { 8.0 * (1 + i / dim) as f64 } else { 0.0 }).collect();
            s.gmm = Gmm::single(mean, vec![1.0; dim]);
        }
        (m, lex)
    }
}
