//! Time-step-gated generation loop over a toy denoiser.
//!
//! Each step either runs plain cross-attention against the source prompt or,
//! strictly inside the (lambda1, lambda2) window, the edit-mode attention of
//! the plan. The denoiser is a fixed-weight residual stack:
//! eps = sum over layers of W_out(Attn(Q(feat))) plus a broadcast aug term,
//! z_{t-1} = z_t - (t/T) * eps.

use serde::Serialize;

use crate::attention::{
    add_attention, base_attention, normalize_map, object_attention_column, project_q,
    replace_attention, style_attention, style_span_covers_eos, AttentionBundle, LayerWeights,
    SpanSpec,
};
use crate::error::{Error, Result};
use crate::maskgen::{object_mask, rasterize, Softbox};
use crate::prompt::{build_aug, embed_prompt, mask_slots, EmbeddingSequence, Role};
use crate::rng::{self, CounterRng};
use crate::tensor::{matmul, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Replace,
    Add,
    Style,
    None,
}

/// What to do, where, and when.
#[derive(Clone, Debug)]
pub struct EditPlan {
    pub task: Task,
    pub source_words: Vec<String>,
    pub target_words: Vec<String>,
    pub spans: Vec<SpanSpec>,
    pub softbox: Option<Softbox>,
    pub swap_aug: bool,
    pub outside_uses_plain_source: bool,
    /// Slot ranges of the source prompt removed from attention support.
    pub mask_spans: Vec<(usize, usize)>,
    /// When false the aug term is omitted entirely.
    pub use_aug: bool,
}

impl EditPlan {
    pub fn baseline(source_words: Vec<String>) -> Self {
        EditPlan {
            task: Task::None,
            source_words,
            target_words: vec![],
            spans: vec![],
            softbox: None,
            swap_aug: false,
            outside_uses_plain_source: false,
            mask_spans: vec![],
            use_aug: true,
        }
    }
}

/// (step, layer) pairs to dump, optionally pinning the map to one slot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CaptureSpec {
    pub step: usize,
    pub layer: usize,
    pub slot: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct SchedulerConfig {
    pub total_steps: usize,
    pub lambda1: usize,
    pub lambda2: usize,
    pub grid: usize,
    pub channels: usize,
    pub slots: usize,
    pub d_embed: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_aug: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub seed: u64,
    pub capture: Vec<CaptureSpec>,
    pub freeze_mask_at_step: Option<usize>,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            total_steps: 30,
            lambda1: 0,
            lambda2: 0,
            grid: 16,
            channels: 4,
            slots: 77,
            d_embed: 16,
            d_k: 8,
            d_v: 8,
            d_aug: 8,
            n_layers: 2,
            n_heads: 1,
            seed: 0,
            capture: vec![],
            freeze_mask_at_step: None,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Error::Validation {
            field: field.into(),
            msg,
        };
        if !(self.lambda1 <= self.lambda2 && self.lambda2 <= self.total_steps) {
            return Err(fail(
                "window",
                format!(
                    "require lambda1 <= lambda2 <= T, got [{}, {}] with T = {}",
                    self.lambda1, self.lambda2, self.total_steps
                ),
            ));
        }
        for (name, v) in [
            ("scheduler.T", self.total_steps),
            ("scheduler.g", self.grid),
            ("scheduler.c", self.channels),
            ("scheduler.L", self.slots),
            ("scheduler.d_embed", self.d_embed),
            ("scheduler.d_k", self.d_k),
            ("scheduler.d_v", self.d_v),
            ("scheduler.d_aug", self.d_aug),
            ("scheduler.n_layers", self.n_layers),
            ("scheduler.n_heads", self.n_heads),
        ] {
            if v < 1 {
                return Err(fail(name, format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    pub fn n_pix(&self) -> usize {
        self.grid * self.grid
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Psp,
    Baseline,
}

/// One line of the machine-checkable run log.
#[derive(Clone, Debug, Serialize)]
pub struct StepEvent {
    pub step: usize,
    pub branch: Branch,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_area: Option<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub warnings: Vec<String>,
}

/// Attention map, mask, and box dumped for one requested (step, layer).
#[derive(Clone, Debug)]
pub struct CaptureArtifact {
    pub step: usize,
    pub layer: usize,
    pub slot: usize,
    pub map: Tensor,
    pub mask: Tensor,
    pub box_raster: Tensor,
    pub degenerate: bool,
}

/// Per-(step, layer) maximum weight over masked slots; exactly zero when
/// masking works.
#[derive(Clone, Debug, Serialize)]
pub struct MaskedWeightStat {
    pub step: usize,
    pub layer: usize,
    pub max_masked_weight: f32,
}

#[derive(Clone, Debug, Default)]
pub struct Artifacts {
    pub events: Vec<StepEvent>,
    pub captures: Vec<CaptureArtifact>,
    pub masked_weights: Vec<MaskedWeightStat>,
}

/// Seeded standard-normal initial latent, shape [g, g, c].
pub fn init_latent(cfg: &SchedulerConfig) -> Tensor {
    let mut rng = CounterRng::new(cfg.seed, rng::stream::LATENT);
    let n = cfg.grid * cfg.grid * cfg.channels;
    Tensor::new(vec![cfg.grid, cfg.grid, cfg.channels], rng.normals(n))
        .expect("latent shape")
}

/// A prepared run: embedded prompts, fixed layer weights, box raster.
pub struct Session {
    pub cfg: SchedulerConfig,
    pub plan: EditPlan,
    source: EmbeddingSequence,
    target: Option<EmbeddingSequence>,
    layers: Vec<LayerWeights>,
    box_raster: Option<Tensor>,
    frozen_masks: Option<Vec<Tensor>>,
}

impl Session {
    pub fn new(plan: EditPlan, cfg: SchedulerConfig) -> Result<Self> {
        cfg.validate()?;
        let source = embed_prompt(&plan.source_words, cfg.slots, cfg.d_embed, cfg.seed)?;
        let source = mask_slots(&source, &plan.mask_spans)?;
        source.layout.validate()?;
        let target = if plan.task == Task::None {
            None
        } else {
            let t = embed_prompt(&plan.target_words, cfg.slots, cfg.d_embed, cfg.seed)?;
            t.layout.validate()?;
            Some(t)
        };
        match plan.task {
            Task::Replace | Task::Add => {
                if plan.softbox.is_none() {
                    return Err(Error::Validation {
                        field: "softbox".into(),
                        msg: format!("{:?} task requires a softbox", plan.task),
                    });
                }
                if plan.spans.is_empty() {
                    return Err(Error::Validation {
                        field: "spans".into(),
                        msg: "edit task requires at least one span".into(),
                    });
                }
            }
            Task::Style => {
                if plan.spans.is_empty() {
                    return Err(Error::Validation {
                        field: "spans".into(),
                        msg: "style task requires a style span".into(),
                    });
                }
            }
            Task::None => {}
        }
        if let (Some(t), false) = (&target, plan.spans.is_empty()) {
            for span in &plan.spans {
                if plan.task == Task::Add {
                    // Insertion has no matching source span; only the
                    // target range matters.
                    let (p, q) = span.tgt_span;
                    if p > q || q > t.len() {
                        return Err(Error::IndexOutOfRange {
                            msg: format!("add span [{p}, {q}) outside target layout"),
                        });
                    }
                } else {
                    span.validate(&source, t)?;
                }
            }
        }
        let box_raster = match &plan.softbox {
            Some(b) => Some(rasterize(b, cfg.grid)?),
            None => None,
        };
        let layers = (0..cfg.n_layers)
            .map(|l| {
                LayerWeights::seeded(
                    cfg.seed,
                    l,
                    cfg.n_heads,
                    cfg.channels,
                    cfg.d_embed,
                    cfg.d_k,
                    cfg.d_v,
                    cfg.d_aug,
                )
            })
            .collect();
        Ok(Session {
            cfg,
            plan,
            source,
            target,
            layers,
            box_raster,
            frozen_masks: None,
        })
    }

    pub fn source(&self) -> &EmbeddingSequence {
        &self.source
    }

    fn in_window(&self, t: usize) -> bool {
        self.cfg.lambda1 < t && t < self.cfg.lambda2
    }

    /// Default slot whose attention map is captured: the first source slot
    /// of the plan's first span, else the first WORD slot.
    fn default_map_slot(&self) -> Option<usize> {
        if let Some(span) = self.plan.spans.first() {
            if self.plan.task != Task::Add {
                return Some(span.src_span.0);
            }
        }
        self.source
            .layout
            .roles
            .iter()
            .position(|r| *r == Role::Word)
    }

    /// Averaged raw attention column over heads and the span's slots,
    /// min-max normalized.
    fn span_map(
        &self,
        qs: &[Tensor],
        seq: &EmbeddingSequence,
        layer: &LayerWeights,
        slots: std::ops::Range<usize>,
    ) -> Result<(Tensor, bool)> {
        let n_pix = qs[0].rows();
        let mut acc = vec![0.0f32; n_pix];
        let mut terms = 0usize;
        for (h, q) in qs.iter().enumerate() {
            for slot in slots.clone() {
                let col = object_attention_column(q, seq, &layer.heads[h], slot)?;
                for (a, c) in acc.iter_mut().zip(&col) {
                    *a += c;
                }
                terms += 1;
            }
        }
        for a in &mut acc {
            *a /= terms as f32;
        }
        Ok(normalize_map(&acc))
    }

    /// The per-step object mask of the replace path, honoring the optional
    /// freeze step.
    fn replace_mask(
        &mut self,
        qs: &[Tensor],
        layer_idx: usize,
        t: usize,
    ) -> Result<(Tensor, bool)> {
        if let (Some(freeze_at), Some(frozen)) = (self.cfg.freeze_mask_at_step, &self.frozen_masks)
        {
            if t < freeze_at {
                return Ok((frozen[layer_idx].clone(), false));
            }
        }
        let span = self.plan.spans[0];
        let layer = &self.layers[layer_idx];
        let (map, _deg) = self.span_map(qs, &self.source, layer, span.src_span.0..span.src_span.1)?;
        let softbox = self.plan.softbox.clone().expect("replace has softbox");
        let m = object_mask(&map, &softbox, self.cfg.grid)?;
        if let Some(freeze_at) = self.cfg.freeze_mask_at_step {
            if t == freeze_at {
                let masks = self
                    .frozen_masks
                    .get_or_insert_with(|| vec![Tensor::zeros(vec![self.cfg.n_pix()]); self.cfg.n_layers]);
                masks[layer_idx] = m.values.clone();
            }
        }
        Ok((m.values, m.degenerate))
    }

    fn capture_requested(&self, t: usize, layer: usize) -> Option<CaptureSpec> {
        self.cfg
            .capture
            .iter()
            .copied()
            .find(|c| c.step == t && c.layer == layer)
    }

    /// One denoise update: z_{t-1} = z_t - (t/T) * eps.
    pub fn denoise_step(
        &mut self,
        z: &Tensor,
        t: usize,
        artifacts: &mut Artifacts,
    ) -> Result<Tensor> {
        assert!(t >= 1 && t <= self.cfg.total_steps, "step out of range");
        let cfg = self.cfg.clone();
        let n_pix = cfg.n_pix();
        let psp = self.in_window(t) && self.plan.task != Task::None;
        let mut warnings = Vec::new();
        let mut mask_area: Option<usize> = None;

        let feat0 = Tensor::new(vec![n_pix, cfg.channels], z.data().to_vec())?;
        let mut feat = feat0.clone();
        let mut eps = Tensor::zeros(vec![n_pix, cfg.channels]);

        for layer_idx in 0..cfg.n_layers {
            let layer = self.layers[layer_idx].clone();
            let qs: Vec<Tensor> = layer
                .heads
                .iter()
                .map(|h| project_q(&feat, h))
                .collect::<Result<_>>()?;

            // Head outputs, averaged.
            let mut head_outs: Vec<Tensor> = Vec::with_capacity(cfg.n_heads);
            for (h, q) in qs.iter().enumerate() {
                let head = &layer.heads[h];
                let out = if !psp {
                    let bundle = base_attention(q, &self.source, head)?;
                    self.record_masked_weights(&bundle, t, layer_idx, &mut artifacts.masked_weights);
                    bundle.out
                } else {
                    match self.plan.task {
                        Task::None => unreachable!("psp branch excludes NONE"),
                        Task::Replace => {
                            let (m, degenerate) = self.replace_mask(&qs, layer_idx, t)?;
                            if degenerate {
                                warnings.push(format!(
                                    "step {t} layer {layer_idx}: degenerate attention map, mask empty"
                                ));
                            }
                            mask_area =
                                Some(m.data().iter().filter(|v| **v == 1.0).count());
                            let target = self.target.as_ref().expect("replace has target");
                            replace_attention(
                                q,
                                &self.source,
                                target,
                                &self.plan.spans[0],
                                &m,
                                head,
                                self.plan.outside_uses_plain_source,
                            )?
                        }
                        Task::Add => {
                            let target = self.target.as_ref().expect("add has target");
                            let span = self.plan.spans[0];
                            let (p, qq) = span.tgt_span;
                            let mut rows = Vec::with_capacity((qq - p) * cfg.d_embed);
                            for r in p..qq {
                                rows.extend_from_slice(target.embeddings.row(r));
                            }
                            let rows = Tensor::new(vec![qq - p, cfg.d_embed], rows)?;
                            let b = self.box_raster.clone().expect("add has softbox");
                            mask_area =
                                Some(b.data().iter().filter(|v| **v == 1.0).count());
                            add_attention(q, &self.source, &rows, &b, target, head)?
                        }
                        Task::Style => {
                            let target = self.target.as_ref().expect("style has target");
                            let span = self.plan.spans[0];
                            if !style_span_covers_eos(&self.source, &span) {
                                warnings.push(format!(
                                    "step {t} layer {layer_idx}: style span does not cover EOS"
                                ));
                            }
                            style_attention(q, &self.source, target, &span, head)?
                        }
                    }
                };
                head_outs.push(out);
            }
            let mut avg = head_outs[0].clone();
            for other in &head_outs[1..] {
                for (a, b) in avg.data_mut().iter_mut().zip(other.data()) {
                    *a += b;
                }
            }
            if cfg.n_heads > 1 {
                let inv = 1.0 / cfg.n_heads as f32;
                for a in avg.data_mut() {
                    *a *= inv;
                }
            }

            if let Some(spec) = self.capture_requested(t, layer_idx) {
                let slot = spec.slot.or_else(|| self.default_map_slot());
                if let Some(slot) = slot {
                    let (map, _deg) = self.span_map(&qs, &self.source, &layer, slot..slot + 1)?;
                    let softbox = self.plan.softbox.clone().unwrap_or_else(Softbox::full);
                    let m = object_mask(&map, &softbox, cfg.grid)?;
                    artifacts.captures.push(CaptureArtifact {
                        step: t,
                        layer: layer_idx,
                        slot,
                        map,
                        box_raster: rasterize(&softbox, cfg.grid)?,
                        degenerate: m.degenerate,
                        mask: m.values,
                    });
                }
            }

            let delta = matmul(&avg, &layer.w_out)?;
            for (f, d) in feat.data_mut().iter_mut().zip(delta.data()) {
                *f += d;
            }
            for (e, d) in eps.data_mut().iter_mut().zip(delta.data()) {
                *e += d;
            }
        }

        if self.plan.use_aug {
            let aug_seq = if psp && self.plan.task == Task::Style && self.plan.swap_aug {
                self.target.as_ref().expect("style has target")
            } else {
                &self.source
            };
            let aug = build_aug(aug_seq, t, cfg.d_aug)?;
            let aug_row = Tensor::new(vec![1, cfg.d_aug], aug.vector.data().to_vec())?;
            let aug_c = matmul(&aug_row, &self.layers[0].w_aug)?;
            for i in 0..n_pix {
                let row = &mut eps.data_mut()[i * cfg.channels..(i + 1) * cfg.channels];
                for (e, a) in row.iter_mut().zip(aug_c.data()) {
                    *e += a;
                }
            }
        }

        artifacts.events.push(StepEvent {
            step: t,
            branch: if psp { Branch::Psp } else { Branch::Baseline },
            mask_area: if psp { mask_area } else { None },
            warnings,
        });

        let sigma = t as f32 / cfg.total_steps as f32;
        let mut out = z.data().to_vec();
        for (o, e) in out.iter_mut().zip(eps.data()) {
            *o -= sigma * e;
        }
        Tensor::new(z.shape().to_vec(), out)
    }

    fn record_masked_weights(
        &self,
        bundle: &AttentionBundle,
        step: usize,
        layer: usize,
        stats: &mut Vec<MaskedWeightStat>,
    ) {
        if !self.source.mask.iter().any(|m| *m) {
            return;
        }
        let mut max = 0.0f32;
        for i in 0..bundle.weights.rows() {
            for (j, masked) in self.source.mask.iter().enumerate() {
                if *masked {
                    max = max.max(bundle.weights.at2(i, j).abs());
                }
            }
        }
        match stats.iter_mut().find(|s| s.step == step && s.layer == layer) {
            Some(s) => s.max_masked_weight = s.max_masked_weight.max(max),
            None => stats.push(MaskedWeightStat {
                step,
                layer,
                max_masked_weight: max,
            }),
        }
    }
}

/// Full loop: t = T, T-1, ..., 1, one denoise per step.
pub fn generate(plan: EditPlan, cfg: SchedulerConfig) -> Result<(Tensor, Artifacts)> {
    let mut session = Session::new(plan, cfg)?;
    let mut artifacts = Artifacts::default();
    let mut z = init_latent(&session.cfg);
    for t in (1..=session.cfg.total_steps).rev() {
        z = session.denoise_step(&z, t, &mut artifacts)?;
    }
    Ok((z, artifacts))
}
