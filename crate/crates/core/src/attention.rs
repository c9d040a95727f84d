//! Cross-attention core and the three edit-mode attention computations:
//! span replacement with masked blending, padding-insertion addition with
//! box blending, and key/value style swapping.
//!
//! Queries come from latent pixels, keys and values from text embedding
//! slots. Masked slots enter the logits as negative infinity and therefore
//! carry exactly zero weight.

use crate::error::{Error, Result};
use crate::prompt::{insert_into_padding, swap_span, EmbeddingSequence, Role};
use crate::rng::{self, CounterRng};
use crate::tensor::{matmul, row_softmax, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpanKind {
    Object,
    Style,
}

/// Matching slot ranges in the source and target prompts.
#[derive(Clone, Copy, Debug)]
pub struct SpanSpec {
    pub src_span: (usize, usize),
    pub tgt_span: (usize, usize),
    pub kind: SpanKind,
}

impl SpanSpec {
    pub fn validate(&self, source: &EmbeddingSequence, target: &EmbeddingSequence) -> Result<()> {
        let (i, j) = self.src_span;
        let (p, q) = self.tgt_span;
        if j.saturating_sub(i) != q.saturating_sub(p) {
            return Err(Error::SpanLengthMismatch {
                src: j.saturating_sub(i),
                tgt: q.saturating_sub(p),
            });
        }
        if i > j || j > source.len() || p > q || q > target.len() {
            return Err(Error::IndexOutOfRange {
                msg: format!("span [{i}, {j}) / [{p}, {q}) out of bounds"),
            });
        }
        if self.kind == SpanKind::Object {
            for s in i..j {
                let r = source.layout.roles[s];
                if r == Role::Bos || r == Role::Eos {
                    return Err(Error::Validation {
                        field: "spans".into(),
                        msg: format!("object span includes {r:?} at slot {s}"),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Per-head projection matrices for one cross-attention layer.
#[derive(Clone, Debug)]
pub struct HeadWeights {
    pub w_q: Tensor, // c x d_k
    pub w_k: Tensor, // d x d_k
    pub w_v: Tensor, // d x d_v
}

/// One attention block: heads plus output and aug projections.
#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub heads: Vec<HeadWeights>,
    pub w_out: Tensor, // d_v x c
    pub w_aug: Tensor, // d_aug x c
}

impl LayerWeights {
    /// Fixed pseudo-random weights keyed by (seed, layer index). Scaled by
    /// 1/sqrt(fan_in) to keep activations in a sane range over many steps.
    pub fn seeded(
        seed: u64,
        layer: usize,
        n_heads: usize,
        c: usize,
        d: usize,
        d_k: usize,
        d_v: usize,
        d_aug: usize,
    ) -> Self {
        let mat = |tag: u64, rows: usize, cols: usize| {
            let mut rng = CounterRng::new(
                seed ^ (layer as u64).wrapping_mul(0x9E37_79B9) ^ tag,
                rng::stream::WEIGHTS,
            );
            let scale = 1.0 / (rows as f32).sqrt();
            let data = rng.normals(rows * cols).iter().map(|v| v * scale).collect();
            Tensor::new(vec![rows, cols], data).expect("seeded weight shape")
        };
        let heads = (0..n_heads)
            .map(|h| {
                let ht = (h as u64 + 1) << 32;
                HeadWeights {
                    w_q: mat(ht | 1, c, d_k),
                    w_k: mat(ht | 2, d, d_k),
                    w_v: mat(ht | 3, d, d_v),
                }
            })
            .collect();
        LayerWeights {
            heads,
            w_out: mat(4, d_v, c),
            w_aug: mat(5, d_aug, c),
        }
    }
}

/// Everything one attention evaluation produced.
#[derive(Clone, Debug)]
pub struct AttentionBundle {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub weights: Tensor,
    pub out: Tensor,
}

pub fn project_q(latent_rows: &Tensor, head: &HeadWeights) -> Result<Tensor> {
    matmul(latent_rows, &head.w_q)
}

pub fn project_k(seq: &EmbeddingSequence, head: &HeadWeights) -> Result<Tensor> {
    matmul(&seq.embeddings, &head.w_k)
}

pub fn project_v(seq: &EmbeddingSequence, head: &HeadWeights) -> Result<Tensor> {
    matmul(&seq.embeddings, &head.w_v)
}

/// QK^T with -inf written into masked slot columns.
fn masked_logits(q: &Tensor, k: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let kt = transpose(k);
    let mut logits = matmul(q, &kt)?;
    let l = k.rows();
    for i in 0..logits.rows() {
        let row = logits.row_mut(i);
        for (j, m) in mask.iter().enumerate().take(l) {
            if *m {
                row[j] = f32::NEG_INFINITY;
            }
        }
    }
    Ok(logits)
}

fn transpose(t: &Tensor) -> Tensor {
    let (m, n) = (t.rows(), t.cols());
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = t.at2(i, j);
        }
    }
    Tensor::new(vec![n, m], out).expect("transpose shape")
}

fn attend(q: &Tensor, k: &Tensor, v: &Tensor, mask: &[bool]) -> Result<AttentionBundle> {
    let scale = (k.cols() as f32).sqrt();
    let logits = masked_logits(q, k, mask)?;
    let weights = row_softmax(&logits, scale)?;
    let out = matmul(&weights, v)?;
    Ok(AttentionBundle {
        q: q.clone(),
        k: k.clone(),
        v: v.clone(),
        weights,
        out,
    })
}

/// Plain cross-attention of a query block against one prompt.
pub fn base_attention(
    q: &Tensor,
    seq: &EmbeddingSequence,
    head: &HeadWeights,
) -> Result<AttentionBundle> {
    let k = project_k(seq, head)?;
    let v = project_v(seq, head)?;
    attend(q, &k, &v, &seq.mask)
}

/// out = a * (1 - m) + b * m, with m broadcast over the columns of a row.
pub fn blend_rows(a: &Tensor, b: &Tensor, m: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() || m.len() != a.rows() {
        return Err(Error::ShapeMismatch {
            op: "blend_rows",
            lhs: a.shape().to_vec(),
            rhs: if m.len() != a.rows() {
                m.shape().to_vec()
            } else {
                b.shape().to_vec()
            },
        });
    }
    let cols = a.cols();
    let mut out = vec![0.0f32; a.len()];
    for i in 0..a.rows() {
        let mi = m.data()[i];
        let (ra, rb) = (a.row(i), b.row(i));
        let ro = &mut out[i * cols..(i + 1) * cols];
        for j in 0..cols {
            ro[j] = ra[j] * (1.0 - mi) + rb[j] * mi;
        }
    }
    Tensor::new(a.shape().to_vec(), out)
}

/// Object replacement: source keys against value rows swapped from the
/// target span, blended with full target attention under the object mask.
pub fn replace_attention(
    q: &Tensor,
    source: &EmbeddingSequence,
    target: &EmbeddingSequence,
    span: &SpanSpec,
    mask: &Tensor,
    head: &HeadWeights,
    outside_uses_plain_source: bool,
) -> Result<Tensor> {
    span.validate(source, target)?;
    if mask.len() != q.rows() {
        return Err(Error::ShapeMismatch {
            op: "replace_attention",
            lhs: mask.shape().to_vec(),
            rhs: vec![q.rows()],
        });
    }
    let v_source = if outside_uses_plain_source {
        source.clone()
    } else {
        swap_span(source, span.src_span, target, span.tgt_span)?
    };
    let k_s = project_k(source, head)?;
    let v_swapped = project_v(&v_source, head)?;
    let a_swap = attend(q, &k_s, &v_swapped, &source.mask)?;
    let a_tgt = base_attention(q, target, head)?;
    blend_rows(&a_swap.out, &a_tgt.out, mask)
}

/// Min-max normalize to [0, 1]. A constant map has no contrast to
/// normalize; it comes back all-zero with the degenerate flag set.
pub fn normalize_map(raw: &[f32]) -> (Tensor, bool) {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in raw {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        return (Tensor::zeros(vec![raw.len()]), true);
    }
    let span = hi - lo;
    let data = raw.iter().map(|v| (v - lo) / span).collect();
    (
        Tensor::new(vec![raw.len()], data).expect("map shape"),
        false,
    )
}

/// Raw per-pixel weight column for one slot: full softmax over all slots,
/// then the slot's column extracted.
pub fn object_attention_column(
    q: &Tensor,
    seq: &EmbeddingSequence,
    head: &HeadWeights,
    object_slot: usize,
) -> Result<Vec<f32>> {
    if object_slot >= seq.len() || seq.layout.roles[object_slot] != Role::Word {
        return Err(Error::InvalidObjectSlot {
            slot: object_slot,
            reason: "not a WORD slot".into(),
        });
    }
    if seq.mask[object_slot] {
        return Err(Error::InvalidObjectSlot {
            slot: object_slot,
            reason: "slot is masked".into(),
        });
    }
    let bundle = base_attention(q, seq, head)?;
    Ok((0..q.rows())
        .map(|i| bundle.weights.at2(i, object_slot))
        .collect())
}

/// Per-object relevance map: the slot's softmax column, min-max normalized.
pub fn object_attention_map(
    q: &Tensor,
    seq: &EmbeddingSequence,
    head: &HeadWeights,
    object_slot: usize,
) -> Result<(Tensor, bool)> {
    let col = object_attention_column(q, seq, head, object_slot)?;
    Ok(normalize_map(&col))
}

/// Object addition: target span rows are inserted into the source padding
/// (inside the same projected key/value space), then the combined attention
/// is blended with full target attention under the box.
pub fn add_attention(
    q: &Tensor,
    source: &EmbeddingSequence,
    target_rows: &Tensor,
    box_mask: &Tensor,
    target: &EmbeddingSequence,
    head: &HeadWeights,
) -> Result<Tensor> {
    if box_mask.len() != q.rows() {
        return Err(Error::ShapeMismatch {
            op: "add_attention",
            lhs: box_mask.shape().to_vec(),
            rhs: vec![q.rows()],
        });
    }
    let (combined, _range) = insert_into_padding(source, target_rows)?;
    let a_st = base_attention(q, &combined, head)?;
    let a_tgt = base_attention(q, target, head)?;
    blend_rows(&a_st.out, &a_tgt.out, box_mask)
}

/// Style transfer: the style span (and, by the caller's choice, EOS) is
/// swapped from the target into both the key and value sides before one
/// plain attention evaluation.
pub fn style_attention(
    q: &Tensor,
    source: &EmbeddingSequence,
    target: &EmbeddingSequence,
    span: &SpanSpec,
    head: &HeadWeights,
) -> Result<Tensor> {
    span.validate(source, target)?;
    if target.layout.words.is_empty() && span.tgt_span.0 == span.tgt_span.1 {
        return Err(Error::Validation {
            field: "prompt_target".into(),
            msg: "style transfer requires a non-empty target sequence".into(),
        });
    }
    let swapped = swap_span(source, span.src_span, target, span.tgt_span)?;
    Ok(base_attention(q, &swapped, head)?.out)
}

/// True when the style span covers the source EOS slot. Callers warn and
/// proceed when it does not.
pub fn style_span_covers_eos(source: &EmbeddingSequence, span: &SpanSpec) -> bool {
    let eos = source.layout.eos_index();
    span.src_span.0 <= eos && eos < span.src_span.1
}
