//! Token slot layout and deterministic toy text embeddings.
//!
//! Stands in for the CLIP conditioning pipeline: a fixed-length slot
//! sequence (BOS, words, EOS, padding), a seeded embedding table where the
//! same word always maps to the same vector, additive slot masking, and the
//! pooled+timestep aug vector.

use crate::error::{Error, Result};
use crate::rng::{self, CounterRng};
use crate::tensor::{matmul, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Bos,
    Word,
    Eos,
    Pad,
}

/// Slot roles and word strings for one prompt of length `L`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenLayout {
    pub roles: Vec<Role>,
    pub words: Vec<String>,
    /// Slot ranges converted from PAD to WORD by padding insertion.
    pub inserted: Vec<(usize, usize)>,
}

impl TokenLayout {
    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn eos_index(&self) -> usize {
        self.roles.iter().position(|r| *r == Role::Eos).expect("layout has EOS")
    }

    /// Structural check: BOS first, one EOS, contiguous WORDs between them,
    /// PAD after EOS except slots claimed by padding insertion.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Error::Validation {
            field: "layout".into(),
            msg,
        };
        if self.roles.first() != Some(&Role::Bos) {
            return Err(fail("slot 0 is not BOS".into()));
        }
        let eos_count = self.roles.iter().filter(|r| **r == Role::Eos).count();
        if eos_count != 1 {
            return Err(fail(format!("expected exactly one EOS, found {eos_count}")));
        }
        let eos = self.eos_index();
        if self.words.len() != eos - 1 {
            return Err(fail(format!(
                "word count {} != EOS index {} - 1",
                self.words.len(),
                eos
            )));
        }
        for (i, r) in self.roles.iter().enumerate() {
            let ok = if i == 0 {
                *r == Role::Bos
            } else if i < eos {
                *r == Role::Word
            } else if i == eos {
                true
            } else if self.inserted.iter().any(|&(a, b)| i >= a && i < b) {
                *r == Role::Word
            } else {
                *r == Role::Pad
            };
            if !ok {
                return Err(fail(format!("unexpected role {r:?} at slot {i}")));
            }
        }
        Ok(())
    }
}

/// A prompt's slot embeddings plus the additive attention mask.
/// `mask[i] = true` removes slot i from softmax support via a -inf logit.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence {
    pub layout: TokenLayout,
    pub embeddings: Tensor,
    pub mask: Vec<bool>,
    pub seed: u64,
}

impl EmbeddingSequence {
    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }
}

/// Pooled-text + timestep conditioning vector, injected outside attention.
#[derive(Clone, Debug)]
pub struct AugEmbedding {
    pub vector: Tensor,
    pub source_timestep: usize,
}

fn role_vector(seed: u64, role: Role, d: usize) -> Vec<f32> {
    let tag = match role {
        Role::Bos => 1u64,
        Role::Eos => 2,
        Role::Pad => 3,
        Role::Word => unreachable!("word rows are keyed by word text"),
    };
    CounterRng::new(seed ^ tag.wrapping_mul(0xA5A5_A5A5_A5A5_A5A5), rng::stream::EMBED_ROLE)
        .normals(d)
}

fn word_vector(seed: u64, word: &str, d: usize) -> Vec<f32> {
    let mut v =
        CounterRng::new(seed ^ rng::hash_str(word), rng::stream::EMBED_WORD).normals(d);
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v
}

/// Build the slot sequence for `words`: BOS, unit-norm word rows, EOS, PAD
/// filler up to `L`. The same (seed, word) pair always yields the same row,
/// which is what makes cross-prompt span matching meaningful.
pub fn embed_prompt(words: &[String], l: usize, d: usize, seed: u64) -> Result<EmbeddingSequence> {
    if words.len() + 2 > l {
        return Err(Error::PromptExceedsLayout {
            words: words.len(),
            capacity: l.saturating_sub(2),
        });
    }
    let mut roles = Vec::with_capacity(l);
    let mut data = Vec::with_capacity(l * d);
    roles.push(Role::Bos);
    data.extend_from_slice(&role_vector(seed, Role::Bos, d));
    for w in words {
        roles.push(Role::Word);
        data.extend_from_slice(&word_vector(seed, w, d));
    }
    roles.push(Role::Eos);
    data.extend_from_slice(&role_vector(seed, Role::Eos, d));
    let pad = role_vector(seed, Role::Pad, d);
    while roles.len() < l {
        roles.push(Role::Pad);
        data.extend_from_slice(&pad);
    }
    Ok(EmbeddingSequence {
        layout: TokenLayout {
            roles,
            words: words.to_vec(),
            inserted: vec![],
        },
        embeddings: Tensor::new(vec![l, d], data)?,
        mask: vec![false; l],
        seed,
    })
}

/// Mark the union of half-open slot ranges as masked. Layout is untouched.
pub fn mask_slots(seq: &EmbeddingSequence, spans: &[(usize, usize)]) -> Result<EmbeddingSequence> {
    let l = seq.len();
    let mut out = seq.clone();
    for &(i, j) in spans {
        if i > j || j > l {
            return Err(Error::IndexOutOfRange {
                msg: format!("mask span [{i}, {j}) outside layout of length {l}"),
            });
        }
        for m in &mut out.mask[i..j] {
            *m = true;
        }
    }
    Ok(out)
}

fn sinusoidal(t: usize, d: usize) -> Vec<f32> {
    (0..d)
        .map(|i| {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = t as f64 / 10_000f64.powf(exponent);
            if i % 2 == 0 {
                angle.sin() as f32
            } else {
                angle.cos() as f32
            }
        })
        .collect()
}

/// Pooled conditioning: project the EOS row to `d_aug` through a fixed
/// seeded linear map, then add a sinusoidal timestep code.
pub fn build_aug(seq: &EmbeddingSequence, t: usize, d_aug: usize) -> Result<AugEmbedding> {
    let eos = seq.layout.eos_index();
    if seq.mask[eos] {
        return Err(Error::PooledSlotUnavailable);
    }
    let d = seq.dim();
    let proj = Tensor::new(
        vec![d, d_aug],
        CounterRng::new(seq.seed, rng::stream::AUG_PROJ).normals(d * d_aug),
    )?;
    let eos_row = Tensor::new(vec![1, d], seq.embeddings.row(eos).to_vec())?;
    let mut v = matmul(&eos_row, &proj)?;
    for (x, s) in v.data_mut().iter_mut().zip(sinusoidal(t, d_aug)) {
        *x += s;
    }
    Ok(AugEmbedding {
        vector: Tensor::new(vec![d_aug], v.data().to_vec())?,
        source_timestep: t,
    })
}

/// Copy `k` rows into the first `k` PAD slots after EOS, flipping their
/// roles to WORD. Returns the new sequence and the claimed slot range.
pub fn insert_into_padding(
    source: &EmbeddingSequence,
    target_rows: &Tensor,
) -> Result<(EmbeddingSequence, (usize, usize))> {
    let k = if target_rows.shape().is_empty() {
        0
    } else {
        target_rows.shape()[0]
    };
    if k == 0 {
        return Ok((source.clone(), (0, 0)));
    }
    if target_rows.cols() != source.dim() {
        return Err(Error::ShapeMismatch {
            op: "insert_into_padding",
            lhs: target_rows.shape().to_vec(),
            rhs: source.embeddings.shape().to_vec(),
        });
    }
    let l = source.len();
    let start = source
        .layout
        .roles
        .iter()
        .position(|r| *r == Role::Pad)
        .unwrap_or(l);
    let have = source.layout.roles[start..]
        .iter()
        .take_while(|r| **r == Role::Pad)
        .count();
    if k > have {
        return Err(Error::PaddingOverflow { need: k, have });
    }
    let mut out = source.clone();
    for r in 0..k {
        let slot = start + r;
        out.layout.roles[slot] = Role::Word;
        out.embeddings.row_mut(slot).copy_from_slice(target_rows.row(r));
    }
    out.layout.inserted.push((start, start + k));
    Ok((out, (start, start + k)))
}

/// Replace rows `src_span` of `source` by rows `tgt_span` of `target`.
/// Roles and mask stay those of `source`.
pub fn swap_span(
    source: &EmbeddingSequence,
    src_span: (usize, usize),
    target: &EmbeddingSequence,
    tgt_span: (usize, usize),
) -> Result<EmbeddingSequence> {
    let (i, j) = src_span;
    let (p, q) = tgt_span;
    if j.saturating_sub(i) != q.saturating_sub(p) {
        return Err(Error::SpanLengthMismatch {
            src: j.saturating_sub(i),
            tgt: q.saturating_sub(p),
        });
    }
    if i > j || j > source.len() || p > q || q > target.len() {
        return Err(Error::IndexOutOfRange {
            msg: format!(
                "swap spans [{i}, {j}) / [{p}, {q}) outside layouts of lengths {} / {}",
                source.len(),
                target.len()
            ),
        });
    }
    if source.dim() != target.dim() {
        return Err(Error::ShapeMismatch {
            op: "swap_span",
            lhs: source.embeddings.shape().to_vec(),
            rhs: target.embeddings.shape().to_vec(),
        });
    }
    let mut out = source.clone();
    for (dst, src) in (i..j).zip(p..q) {
        out.embeddings
            .row_mut(dst)
            .copy_from_slice(target.embeddings.row(src));
    }
    Ok(out)
}
