//! Phase grammar and constrained decoding.
//!
//! Decoding per task walks a fixed phase order: object names, then the mask
//! tokens in index order, then (for generation-style tasks) all semantic
//! visual tokens before any pixel visual tokens, then EOS. Within each
//! phase only that phase's vocabulary class keeps probability mass; logits
//! outside the allowed set are masked to -inf before sampling, so every
//! decoded sequence is accepted by the grammar by construction.

use ndarray::{Array1, Array2};

use super::prompt::{Role, SequenceLayout, TaskKind};
use super::vocab::{Special, Vocabulary};
use super::{DecodeCache, LanguageCore, LvlmError};
use crate::params::ParamStore;
use crate::rng::SplitMix64;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct GrammarSpec {
    pub task: TaskKind,
    pub n_seg: usize,
    pub sem_len: usize,
    pub pix_len: usize,
    /// Cap on the names phase; when reached the first mask token is forced.
    pub max_names: usize,
}

impl GrammarSpec {
    pub fn for_task(task: TaskKind, n_seg: usize, sem_len: usize, pix_len: usize, max_names: usize) -> Self {
        Self {
            task,
            n_seg,
            sem_len,
            pix_len,
            max_names,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Names { emitted: usize },
    Seg { next: usize },
    AwaitSemBegin,
    Sem { emitted: usize },
    AwaitPixBegin,
    Pix { emitted: usize },
    AwaitEos,
    Done,
}

#[derive(Debug, Clone)]
pub enum Allowed {
    /// Any id in one of the ranges.
    Ranges(Vec<std::ops::Range<usize>>),
    Single(usize),
}

impl Allowed {
    pub fn contains(&self, id: usize) -> bool {
        match self {
            Allowed::Single(s) => *s == id,
            Allowed::Ranges(rs) => rs.iter().any(|r| r.contains(&id)),
        }
    }
}

impl GrammarSpec {
    pub fn initial(&self) -> Phase {
        if self.task.emits_masks() {
            Phase::Names { emitted: 0 }
        } else {
            Phase::AwaitSemBegin
        }
    }

    pub fn is_final(&self, p: Phase) -> bool {
        p == Phase::Done
    }

    pub fn allowed(&self, p: Phase, vocab: &Vocabulary) -> Allowed {
        match p {
            Phase::Names { emitted } => {
                if emitted >= self.max_names {
                    Allowed::Single(vocab.seg(0))
                } else {
                    let pad = vocab.special(Special::Pad);
                    Allowed::Ranges(vec![
                        vocab.text_range(),
                        pad..pad + 1,
                        vocab.seg(0)..vocab.seg(0) + 1,
                    ])
                }
            }
            Phase::Seg { next } => Allowed::Single(vocab.seg(next)),
            Phase::AwaitSemBegin => Allowed::Single(vocab.special(Special::SemBegin)),
            Phase::Sem { .. } => Allowed::Ranges(vec![vocab.sem_range()]),
            Phase::AwaitPixBegin => Allowed::Single(vocab.special(Special::PixBegin)),
            Phase::Pix { .. } => Allowed::Ranges(vec![vocab.pix_range()]),
            Phase::AwaitEos => Allowed::Single(vocab.special(Special::Eos)),
            Phase::Done => Allowed::Ranges(vec![]),
        }
    }

    pub fn advance(&self, p: Phase, id: usize, vocab: &Vocabulary) -> Result<Phase, LvlmError> {
        if !self.allowed(p, vocab).contains(id) {
            return Err(LvlmError::Contract(format!(
                "token {id} not allowed in phase {p:?}"
            )));
        }
        Ok(match p {
            Phase::Names { emitted } => {
                if id == vocab.seg(0) {
                    self.after_seg(1)
                } else {
                    Phase::Names {
                        emitted: emitted + 1,
                    }
                }
            }
            Phase::Seg { next } => self.after_seg(next + 1),
            Phase::AwaitSemBegin => Phase::Sem { emitted: 0 },
            Phase::Sem { emitted } => {
                if emitted + 1 == self.sem_len {
                    Phase::AwaitPixBegin
                } else {
                    Phase::Sem {
                        emitted: emitted + 1,
                    }
                }
            }
            Phase::AwaitPixBegin => Phase::Pix { emitted: 0 },
            Phase::Pix { emitted } => {
                if emitted + 1 == self.pix_len {
                    Phase::AwaitEos
                } else {
                    Phase::Pix {
                        emitted: emitted + 1,
                    }
                }
            }
            Phase::AwaitEos => Phase::Done,
            Phase::Done => Phase::Done,
        })
    }

    fn after_seg(&self, consumed: usize) -> Phase {
        if consumed < self.n_seg {
            Phase::Seg { next: consumed }
        } else if self.task.emits_visual_tokens() {
            Phase::AwaitSemBegin
        } else {
            Phase::AwaitEos
        }
    }

    fn role_for(&self, id: usize, vocab: &Vocabulary) -> Role {
        match vocab.class_of(id) {
            super::vocab::TokenClass::Seg(_) => Role::MaskToken,
            super::vocab::TokenClass::Sem(_) => Role::SemVis,
            super::vocab::TokenClass::Pix(_) => Role::PixVis,
            super::vocab::TokenClass::Text => Role::Name,
            super::vocab::TokenClass::Special => {
                if id == vocab.special(Special::Pad) {
                    Role::Name
                } else {
                    Role::Prompt
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    /// 0 means greedy.
    pub temperature: f64,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            top_k: 0,
            seed: 0,
        }
    }
}

fn sample_id<T: Scalar>(
    logits: &Array1<T>,
    allowed: &Allowed,
    sampler: &SamplerConfig,
    rng: &mut SplitMix64,
) -> usize {
    let candidates: Vec<usize> = match allowed {
        Allowed::Single(s) => return *s,
        Allowed::Ranges(rs) => rs.iter().flat_map(|r| r.clone()).collect(),
    };
    assert!(!candidates.is_empty(), "empty allowed set");
    if sampler.temperature <= 0.0 {
        return candidates
            .iter()
            .copied()
            .max_by(|&a, &b| {
                logits[a]
                    .partial_cmp(&logits[b])
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap();
    }
    let mut scored: Vec<(usize, f64)> = candidates
        .iter()
        .map(|&i| (i, logits[i].to_f()))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    if sampler.top_k > 0 && scored.len() > sampler.top_k {
        scored.truncate(sampler.top_k);
    }
    let mx = scored[0].1;
    let mut probs: Vec<f64> = scored
        .iter()
        .map(|(_, l)| ((l - mx) / sampler.temperature).exp())
        .collect();
    let z: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= z;
    }
    let draw = rng.next_f64();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if draw < acc {
            return scored[k].0;
        }
    }
    scored.last().unwrap().0
}

pub struct DecodeResult {
    pub layout: SequenceLayout,
    /// Ids emitted after the prefix (grammar-accepted).
    pub emitted: Vec<usize>,
    /// Hidden rows at the emitted mask-token positions, [n_seg, D].
    pub mask_hidden: Option<Array2<f64>>,
}

/// Run grammar-constrained incremental decoding from a prompt prefix.
#[allow(clippy::too_many_arguments)]
pub fn decode_constrained<T: Scalar>(
    core: &LanguageCore,
    ps: &ParamStore<T>,
    prefix: &SequenceLayout,
    e_img: Option<&Array2<T>>,
    x_t: Option<&Array2<T>>,
    adapter: Option<&Array2<T>>,
    grammar: &GrammarSpec,
    sampler: &SamplerConfig,
) -> Result<DecodeResult, LvlmError> {
    let vocab = &core.vocab;
    let mut cache: DecodeCache<T> = core.new_cache();
    let (_, mut logits) =
        core.prefill_hidden(ps, &mut cache, prefix, e_img, x_t, adapter)?;
    let mut layout = prefix.clone();
    let mut phase = grammar.initial();
    let mut rng = SplitMix64::stream(sampler.seed, "lvlm.sampler");
    let mut emitted = Vec::new();
    let mut mask_rows: Vec<Array1<f64>> = Vec::new();
    while !grammar.is_final(phase) {
        if layout.len() >= core.cfg.max_len {
            return Err(LvlmError::Truncation(core.cfg.max_len));
        }
        let allowed = grammar.allowed(phase, vocab);
        let id = sample_id(&logits, &allowed, sampler, &mut rng);
        phase = grammar.advance(phase, id, vocab)?;
        let role = grammar.role_for(id, vocab);
        let pos = layout.len();
        layout.ids.push(id);
        layout.roles.push(role);
        emitted.push(id);
        if grammar.is_final(phase) {
            break;
        }
        let row = core.token_row(ps, id, pos);
        let (h, l) = core.step_row_hidden(ps, &mut cache, &row);
        if role == Role::MaskToken {
            mask_rows.push(h.mapv(|v| v.to_f()));
        }
        logits = l;
    }
    let mask_hidden = if mask_rows.is_empty() {
        None
    } else {
        let d = mask_rows[0].len();
        let mut m = Array2::<f64>::zeros((mask_rows.len(), d));
        for (i, r) in mask_rows.iter().enumerate() {
            m.row_mut(i).assign(r);
        }
        Some(m)
    };
    Ok(DecodeResult {
        layout,
        emitted,
        mask_hidden,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(task: TaskKind) -> (GrammarSpec, Vocabulary) {
        let v = Vocabulary::build(4, 8, 8);
        (GrammarSpec::for_task(task, 4, 3, 5, 6), v)
    }

    #[test]
    fn seg_grammar_path() {
        let (g, v) = spec(TaskKind::ReferringSeg);
        let mut p = g.initial();
        // names then forced seg order then eos
        p = g.advance(p, v.word_id("circle").unwrap(), &v).unwrap();
        p = g.advance(p, v.seg(0), &v).unwrap();
        for j in 1..4 {
            p = g.advance(p, v.seg(j), &v).unwrap();
        }
        assert_eq!(p, Phase::AwaitEos);
        p = g.advance(p, v.special(Special::Eos), &v).unwrap();
        assert!(g.is_final(p));
    }

    #[test]
    fn seg_tasks_never_allow_visual_ids() {
        let (g, v) = spec(TaskKind::ClassSeg);
        let mut p = g.initial();
        let seq = [v.seg(0), v.seg(1), v.seg(2), v.seg(3)];
        for id in seq {
            let allowed = g.allowed(p, &v);
            for sem in v.sem_range() {
                assert!(!allowed.contains(sem));
            }
            for pix in v.pix_range() {
                assert!(!allowed.contains(pix));
            }
            p = g.advance(p, id, &v).unwrap();
        }
    }

    #[test]
    fn masked_sampling_stays_in_phase() {
        let (g, v) = spec(TaskKind::Generation);
        // logits maximally favoring a pixel id while in the semantic phase
        let mut p = g.initial();
        p = g.advance(p, v.special(Special::SemBegin), &v).unwrap();
        let mut logits = Array1::<f64>::from_elem(v.size(), -5.0);
        logits[v.pix_id(3)] = 100.0;
        let allowed = g.allowed(p, &v);
        let id = sample_id(&logits, &allowed, &SamplerConfig::default(), &mut SplitMix64::new(0));
        assert!(v.sem_range().contains(&id), "escaped phase: {id}");
    }

    #[test]
    fn names_cap_forces_first_seg() {
        let (g, v) = spec(TaskKind::ReferringSeg);
        let mut p = g.initial();
        for _ in 0..g.max_names {
            p = g.advance(p, v.word_id("the").unwrap(), &v).unwrap();
        }
        match g.allowed(p, &v) {
            Allowed::Single(id) => assert_eq!(id, v.seg(0)),
            other => panic!("expected forced seg, got {other:?}"),
        }
    }
}
