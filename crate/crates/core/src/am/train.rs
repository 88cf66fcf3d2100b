//! Flat start and Viterbi-EM re-estimation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::align::{build_graph, equal_alignment_graph, force_align_graph, path_score, Graph};
use super::{AcousticModel, AlignFailure, AlignInput, AlignOptions, AlignmentPath, AmError, Gmm, HmmState, Topology};
use super::{MAX_TRANSITION, MIN_TRANSITION, VAR_FLOOR};
use crate::lexicon::Lexicon;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub n_iters: usize,
    /// Iterations (1-based) at whose start every mixture is doubled.
    pub split_iters: Vec<usize>,
    pub max_gauss: usize,
    /// Frames a component needs before it may be split.
    pub min_split_occ: f64,
    /// Use a uniform segmentation instead of Viterbi in the first iteration.
    pub equal_align_first: bool,
    pub align: AlignOptions,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            n_iters: 30,
            split_iters: vec![4, 8, 12, 16],
            max_gauss: 8,
            min_split_occ: 20.0,
            equal_align_first: true,
            align: AlignOptions::default(),
        }
    }
}

/// One training iteration. `updated_ll` re-scores the iteration's
/// alignments under the re-estimated parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterStats {
    pub iter: usize,
    pub n_aligned: usize,
    pub n_failed: usize,
    pub align_ll: f64,
    pub updated_ll: f64,
    pub n_gauss: usize,
}

/// Monophone model with one Gaussian per state at the global mean and
/// variance and uniform transitions.
pub fn flat_start(
    utts: &[AlignInput],
    lex: &Lexicon,
    topology: Topology,
    map_oov: bool,
) -> Result<AcousticModel, AmError> {
    let n_frames: usize = utts.iter().map(|u| u.feats.n_frames()).sum();
    if utts.is_empty() || n_frames == 0 {
        return Err(AmError::EmptyData);
    }
    let dim = utts[0].feats.dim();
    for u in utts {
        if u.feats.dim() != dim {
            return Err(AmError::DimMismatch { got: u.feats.dim(), want: dim });
        }
        for w in &u.words {
            if !map_oov && !lex.contains(w) {
                return Err(AmError::NotCoverable(w.clone()));
            }
        }
    }
    let mut mean = vec![0.0; dim];
    for u in utts {
        for r in u.feats.rows() {
            mean.iter_mut().zip(r).for_each(|(m, x)| *m += x);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n_frames as f64);
    let mut var = vec![0.0; dim];
    for u in utts {
        for r in u.feats.rows() {
            for j in 0..dim {
                var[j] += (r[j] - mean[j]).powi(2);
            }
        }
    }
    var.iter_mut().for_each(|v| *v = (*v / n_frames as f64).max(VAR_FLOOR));
    let init = HmmState { gmm: Gmm::single(mean, var), self_loop: 0.5 };
    Ok(AcousticModel::monophone(AcousticModel::inventory_for(lex), topology, &init))
}

/// Per-state occupancy and closed-form re-estimation from hard alignments.
fn reestimate(model: &AcousticModel, utts: &[AlignInput], paths: &[Option<&AlignmentPath>]) -> (AcousticModel, Vec<f64>) {
    let n_states = model.states.len();
    let mut frames: Vec<Vec<&[f64]>> = vec![Vec::new(); n_states];
    let mut self_count = vec![0u64; n_states];
    let mut exit_count = vec![0u64; n_states];
    for (u, p) in utts.iter().zip(paths) {
        let Some(p) = p else { continue };
        let t_max = p.states.len();
        for t in 0..t_max {
            let s = p.states[t];
            frames[s].push(u.feats.row(t));
            if t + 1 < t_max && !p.entered[t + 1] {
                self_count[s] += 1;
            } else {
                exit_count[s] += 1;
            }
        }
    }
    let states: Vec<HmmState> = (0..n_states)
        .into_par_iter()
        .map(|s| {
            let old = &model.states[s];
            if frames[s].is_empty() {
                return old.clone();
            }
            let total = (self_count[s] + exit_count[s]) as f64;
            HmmState {
                gmm: old.gmm.em_step(&frames[s], VAR_FLOOR),
                self_loop: (self_count[s] as f64 / total).clamp(MIN_TRANSITION, MAX_TRANSITION),
            }
        })
        .collect();
    let occ = frames.iter().map(|f| f.len() as f64).collect();
    let mut next = model.clone();
    next.states = states;
    (next, occ)
}

fn split_all(model: &mut AcousticModel, occ: &[f64], sched: &TrainSchedule) {
    let splits: Vec<Gmm> = model
        .states
        .par_iter()
        .zip(occ)
        .map(|(s, &o)| {
            let target = (s.gmm.n_components() * 2).min(sched.max_gauss);
            s.gmm.split(target, o, sched.min_split_occ)
        })
        .collect();
    for (s, g) in model.states.iter_mut().zip(splits) {
        s.gmm = g;
    }
}

/// Viterbi-EM: alternate best-path alignment with re-estimation of
/// mixtures and transitions. Returns the final model and a per-iteration
/// trace.
pub fn train(
    model: AcousticModel,
    lex: &Lexicon,
    utts: &[AlignInput],
    sched: &TrainSchedule,
) -> Result<(AcousticModel, Vec<IterStats>), AmError> {
    train_observed(model, lex, utts, sched, |_, _| {})
}

/// [`train`], calling `observe` with the model after every iteration.
pub fn train_observed(
    model: AcousticModel,
    lex: &Lexicon,
    utts: &[AlignInput],
    sched: &TrainSchedule,
    mut observe: impl FnMut(&IterStats, &AcousticModel),
) -> Result<(AcousticModel, Vec<IterStats>), AmError> {
    if utts.is_empty() {
        return Err(AmError::EmptyData);
    }
    for u in utts {
        if u.feats.dim() != model.dim() {
            return Err(AmError::DimMismatch { got: u.feats.dim(), want: model.dim() });
        }
    }
    let graphs: Vec<Result<Graph, AlignFailure>> =
        utts.par_iter().map(|u| build_graph(&model, lex, &u.words, sched.align.map_oov)).collect();
    let mut model = model;
    let mut occ: Vec<f64> = vec![0.0; model.states.len()];
    let mut trace = Vec::with_capacity(sched.n_iters);
    for iter in 1..=sched.n_iters {
        if sched.split_iters.contains(&iter) {
            split_all(&mut model, &occ, sched);
        }
        let equal = iter == 1 && sched.equal_align_first;
        let paths: Vec<Option<AlignmentPath>> = utts
            .par_iter()
            .zip(&graphs)
            .map(|(u, g)| {
                let g = g.as_ref().ok()?;
                let r = if equal {
                    equal_alignment_graph(&model, g, &u.feats)
                } else {
                    force_align_graph(&model, g, &u.feats, sched.align.beam)
                };
                r.ok()
            })
            .collect();
        let n_aligned = paths.iter().filter(|p| p.is_some()).count();
        if n_aligned == 0 {
            return Err(AmError::AllFailed(iter));
        }
        let align_ll: f64 = paths.iter().flatten().map(|p| p.log_likelihood).sum();
        let refs: Vec<Option<&AlignmentPath>> = paths.iter().map(Option::as_ref).collect();
        let (next, new_occ) = reestimate(&model, utts, &refs);
        let rescored: Vec<f64> = utts
            .par_iter()
            .zip(&graphs)
            .zip(&paths)
            .map(|((u, g), p)| match (g, p) {
                (Ok(g), Some(p)) => path_score(&next, g, &u.feats, &p.nodes),
                _ => 0.0,
            })
            .collect();
        let updated_ll: f64 = rescored.iter().sum();
        model = next;
        occ = new_occ;
        let stats = IterStats {
            iter,
            n_aligned,
            n_failed: utts.len() - n_aligned,
            align_ll,
            updated_ll,
            n_gauss: model.n_gaussians(),
        };
        log::debug!("am iter {iter}: aligned {n_aligned}/{} ll {align_ll:.1} -> {updated_ll:.1}", utts.len());
        observe(&stats, &model);
        trace.push(stats);
    }
    Ok((model, trace))
}
