//! Edit-plan JSON schema and its translation into engine types.
//!
//! Unknown keys are rejected, all defaults are resolved here, and the
//! resolved form is what lands in the run manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};

use psp_core::attention::{SpanKind, SpanSpec};
use psp_core::maskgen::Softbox;
use psp_core::pgm::read_bitmap;
use psp_core::scheduler::{CaptureSpec, EditPlan, SchedulerConfig, Task};

#[derive(Debug)]
pub enum PlanError {
    /// Schema violation; the string is a JSON-pointer-style path.
    Schema { path: String, msg: String },
    Io(String),
}

impl std::fmt::Display for PlanError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PlanError::Schema { path, msg } => write!(f, "invalid plan at {path}: {msg}"),
            PlanError::Io(msg) => write!(f, "{msg}"),
        }
    }
}

#[derive(Debug, Deserialize, Serialize, Clone)]
#[serde(deny_unknown_fields)]
pub struct PromptSection {
    pub words: Vec<String>,
    #[serde(rename = "L", default = "default_l")]
    pub length: usize,
}

fn default_l() -> usize {
    77
}

#[derive(Debug, Deserialize, Serialize, Clone)]
#[serde(deny_unknown_fields)]
pub struct SpanSection {
    pub src: [usize; 2],
    pub tgt: [usize; 2],
    #[serde(default = "default_kind")]
    pub kind: String,
}

fn default_kind() -> String {
    "object".into()
}

#[derive(Debug, Deserialize, Serialize, Clone)]
#[serde(untagged)]
pub enum SoftboxSection {
    Rect([f64; 4]),
    Pgm { pgm: String },
}

#[derive(Debug, Deserialize, Serialize, Clone)]
#[serde(deny_unknown_fields)]
pub struct SchedulerSection {
    #[serde(rename = "T", default = "d_steps")]
    pub total_steps: usize,
    #[serde(default = "d_grid")]
    pub g: usize,
    #[serde(default = "d_channels")]
    pub c: usize,
    #[serde(default = "d_embed")]
    pub d_embed: usize,
    #[serde(default = "d_k")]
    pub d_k: usize,
    #[serde(default = "d_v")]
    pub d_v: usize,
    #[serde(default = "d_aug")]
    pub d_aug: usize,
    #[serde(default = "d_layers")]
    pub n_layers: usize,
    #[serde(default = "d_heads")]
    pub n_heads: usize,
    #[serde(default)]
    pub seed: u64,
}

fn d_steps() -> usize {
    30
}
fn d_grid() -> usize {
    16
}
fn d_channels() -> usize {
    4
}
fn d_embed() -> usize {
    16
}
fn d_k() -> usize {
    8
}
fn d_v() -> usize {
    8
}
fn d_aug() -> usize {
    8
}
fn d_layers() -> usize {
    2
}
fn d_heads() -> usize {
    1
}

impl Default for SchedulerSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

#[derive(Debug, Deserialize, Serialize, Clone)]
#[serde(deny_unknown_fields)]
pub struct FlagsSection {
    #[serde(default)]
    pub swap_aug: bool,
    #[serde(default)]
    pub outside_uses_plain_source: bool,
    #[serde(default = "default_true")]
    pub use_aug: bool,
    #[serde(default)]
    pub freeze_mask_at_step: Option<usize>,
}

fn default_true() -> bool {
    true
}

impl Default for FlagsSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

/// The on-disk plan document.
#[derive(Debug, Deserialize, Serialize, Clone)]
#[serde(deny_unknown_fields)]
pub struct EditPlanFile {
    pub prompt_source: PromptSection,
    #[serde(default)]
    pub prompt_target: Option<PromptSection>,
    #[serde(default = "default_task")]
    pub task: String,
    #[serde(default)]
    pub spans: Vec<SpanSection>,
    #[serde(default)]
    pub softbox: Option<SoftboxSection>,
    #[serde(default)]
    pub window: Option<[usize; 2]>,
    #[serde(default)]
    pub scheduler: SchedulerSection,
    #[serde(default)]
    pub capture: Vec<Vec<usize>>,
    #[serde(default)]
    pub flags: FlagsSection,
}

fn default_task() -> String {
    "none".into()
}

impl EditPlanFile {
    pub fn load(path: &Path) -> Result<Self, PlanError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PlanError::Io(format!("cannot read {}: {e}", path.display())))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let plan: EditPlanFile = serde_path_to_error::deserialize(de).map_err(|e| {
            PlanError::Schema {
                path: format!("/{}", e.path().to_string().replace('.', "/")),
                msg: e.inner().to_string(),
            }
        })?;
        Ok(plan)
    }

    /// Resolve into engine types. `plan_dir` anchors relative PGM paths.
    pub fn resolve(
        &self,
        plan_dir: &Path,
        seed_override: Option<u64>,
    ) -> Result<(EditPlan, SchedulerConfig), PlanError> {
        let schema = |path: &str, msg: String| PlanError::Schema {
            path: path.to_string(),
            msg,
        };

        let task = match self.task.as_str() {
            "replace" => Task::Replace,
            "add" => Task::Add,
            "style" => Task::Style,
            "none" => Task::None,
            other => return Err(schema("/task", format!("unknown task `{other}`"))),
        };

        let spans: Vec<SpanSpec> = self
            .spans
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let kind = match s.kind.as_str() {
                    "object" => Ok(SpanKind::Object),
                    "style" => Ok(SpanKind::Style),
                    other => Err(schema(
                        &format!("/spans/{i}/kind"),
                        format!("unknown span kind `{other}`"),
                    )),
                }?;
                Ok(SpanSpec {
                    src_span: (s.src[0], s.src[1]),
                    tgt_span: (s.tgt[0], s.tgt[1]),
                    kind,
                })
            })
            .collect::<Result<_, PlanError>>()?;

        let softbox = match &self.softbox {
            None => None,
            Some(SoftboxSection::Rect(r)) => Some(
                Softbox::rect(r[0], r[1], r[2], r[3])
                    .map_err(|e| schema("/softbox", e.to_string()))?,
            ),
            Some(SoftboxSection::Pgm { pgm }) => {
                let p = plan_dir.join(pgm);
                let bm = read_bitmap(&p)
                    .map_err(|e| schema("/softbox/pgm", e.to_string()))?;
                Some(Softbox::Bitmap(bm))
            }
        };

        let (lambda1, lambda2) = match self.window {
            Some([a, b]) => (a, b),
            None => (0, 0),
        };

        let capture: Vec<CaptureSpec> = self
            .capture
            .iter()
            .enumerate()
            .map(|(i, entry)| match entry.len() {
                2 => Ok(CaptureSpec {
                    step: entry[0],
                    layer: entry[1],
                    slot: None,
                }),
                3 => Ok(CaptureSpec {
                    step: entry[0],
                    layer: entry[1],
                    slot: Some(entry[2]),
                }),
                n => Err(schema(
                    &format!("/capture/{i}"),
                    format!("expected [step, layer] or [step, layer, slot], got {n} entries"),
                )),
            })
            .collect::<Result<_, PlanError>>()?;

        let s = &self.scheduler;
        let cfg = SchedulerConfig {
            total_steps: s.total_steps,
            lambda1,
            lambda2,
            grid: s.g,
            channels: s.c,
            slots: self.prompt_source.length,
            d_embed: s.d_embed,
            d_k: s.d_k,
            d_v: s.d_v,
            d_aug: s.d_aug,
            n_layers: s.n_layers,
            n_heads: s.n_heads,
            seed: seed_override.unwrap_or(s.seed),
            capture,
            freeze_mask_at_step: self.flags.freeze_mask_at_step,
        };

        let plan = EditPlan {
            task,
            source_words: self.prompt_source.words.clone(),
            target_words: self
                .prompt_target
                .as_ref()
                .map(|p| p.words.clone())
                .unwrap_or_default(),
            spans,
            softbox,
            swap_aug: self.flags.swap_aug,
            outside_uses_plain_source: self.flags.outside_uses_plain_source,
            mask_spans: vec![],
            use_aug: self.flags.use_aug,
        };
        Ok((plan, cfg))
    }
}

/// Parse the analyze mask syntax "i-j[,k-l...]"; a bare index means a
/// single slot.
pub fn parse_mask_spec(spec: &str) -> Result<Vec<(usize, usize)>, PlanError> {
    let bad = |msg: String| PlanError::Schema {
        path: "/mask".into(),
        msg,
    };
    spec.split(',')
        .map(|part| {
            let part = part.trim();
            match part.split_once('-') {
                Some((a, b)) => {
                    let i: usize = a.parse().map_err(|_| bad(format!("bad index `{a}`")))?;
                    let j: usize = b.parse().map_err(|_| bad(format!("bad index `{b}`")))?;
                    if i >= j {
                        return Err(bad(format!("empty mask range `{part}`")));
                    }
                    Ok((i, j))
                }
                None => {
                    let i: usize = part
                        .parse()
                        .map_err(|_| bad(format!("bad mask span `{part}`")))?;
                    Ok((i, i + 1))
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_plan_parses_with_defaults() {
        let json = r#"{"prompt_source": {"words": ["a", "dog"]}}"#;
        let plan: EditPlanFile = serde_json::from_str(json).unwrap();
        assert_eq!(plan.prompt_source.length, 77);
        assert_eq!(plan.scheduler.total_steps, 30);
        assert_eq!(plan.scheduler.g, 16);
        assert!(plan.flags.use_aug);
        let (p, cfg) = plan.resolve(Path::new("."), None).unwrap();
        assert_eq!(p.task, Task::None);
        assert_eq!(cfg.lambda1, 0);
    }

    #[test]
    fn unknown_keys_rejected() {
        let json = r#"{"prompt_source": {"words": []}, "bogus": 1}"#;
        assert!(serde_json::from_str::<EditPlanFile>(json).is_err());
    }

    #[test]
    fn mask_spec_parsing() {
        assert_eq!(parse_mask_spec("0-1").unwrap(), vec![(0, 1)]);
        assert_eq!(parse_mask_spec("6-9,16-17").unwrap(), vec![(6, 9), (16, 17)]);
        assert_eq!(parse_mask_spec("3").unwrap(), vec![(3, 4)]);
        assert!(parse_mask_spec("9-6").is_err());
        assert!(parse_mask_spec("x-y").is_err());
    }

    #[test]
    fn rect_softbox_resolves() {
        let json = r#"{
            "prompt_source": {"words": ["a", "dog"]},
            "prompt_target": {"words": ["a", "cat"]},
            "task": "replace",
            "spans": [{"src": [2, 3], "tgt": [2, 3]}],
            "softbox": [0.1, 0.4, 0.2, 0.4],
            "window": [5, 10]
        }"#;
        let plan: EditPlanFile = serde_json::from_str(json).unwrap();
        let (p, cfg) = plan.resolve(Path::new("."), None).unwrap();
        assert_eq!(p.task, Task::Replace);
        assert!(matches!(p.softbox, Some(Softbox::Rect { .. })));
        assert_eq!((cfg.lambda1, cfg.lambda2), (5, 10));
    }

    #[test]
    fn seed_override_wins() {
        let json = r#"{"prompt_source": {"words": []}, "scheduler": {"seed": 7}}"#;
        let plan: EditPlanFile = serde_json::from_str(json).unwrap();
        let (_, cfg) = plan.resolve(Path::new("."), Some(99)).unwrap();
        assert_eq!(cfg.seed, 99);
    }
}
