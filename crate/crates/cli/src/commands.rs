//! Subcommand implementations. Exit codes: 0 success, 1 engine error,
//! 2 input or validation error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use psp_core::error::Error as CoreError;
use psp_core::maskgen::otsu_threshold;
use psp_core::pgm::{write_map_pgm, write_pgm};
use psp_core::scheduler::{generate, Artifacts, CaptureSpec, SchedulerConfig, Task};
use psp_core::tensor::{read_tensor, write_tensor, Tensor};

use crate::plan::{parse_mask_spec, EditPlanFile, PlanError};

pub enum CmdError {
    /// Bad input: schema violation, malformed arguments. Exit 2.
    Input(String),
    /// The engine failed on valid-looking input. Exit 1.
    Engine(String),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Input(_) => 2,
            CmdError::Engine(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CmdError::Input(m) | CmdError::Engine(m) => m,
        }
    }
}

impl From<PlanError> for CmdError {
    fn from(e: PlanError) -> Self {
        CmdError::Input(e.to_string())
    }
}

impl From<CoreError> for CmdError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Validation { .. }
            | CoreError::IndexOutOfRange { .. }
            | CoreError::PromptExceedsLayout { .. }
            | CoreError::InvalidObjectSlot { .. } => CmdError::Input(e.to_string()),
            other => CmdError::Engine(other.to_string()),
        }
    }
}

type CmdResult = Result<(), CmdError>;

fn sha256_file(path: &Path) -> Result<String, CmdError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CmdError::Engine(format!("cannot hash {}: {e}", path.display())))?;
    Ok(format!("{:x}", Sha256::digest(bytes)))
}

fn ensure_dir(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir)
        .map_err(|e| CmdError::Engine(format!("cannot create {}: {e}", dir.display())))
}

#[derive(Serialize)]
struct Manifest<'a> {
    plan: &'a EditPlanFile,
    seed: u64,
    outputs: BTreeMap<String, String>,
}

fn write_manifest(
    out_dir: &Path,
    plan: &EditPlanFile,
    seed: u64,
    files: &[PathBuf],
) -> CmdResult {
    let mut outputs = BTreeMap::new();
    for f in files {
        let name = f
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        outputs.insert(name, sha256_file(f)?);
    }
    let manifest = Manifest {
        plan,
        seed,
        outputs,
    };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CmdError::Engine(e.to_string()))?;
    std::fs::write(&path, text)
        .map_err(|e| CmdError::Engine(format!("cannot write {}: {e}", path.display())))
}

fn print_events(artifacts: &Artifacts, quiet: bool) {
    if quiet {
        return;
    }
    for ev in &artifacts.events {
        println!("{}", serde_json::to_string(ev).expect("event json"));
    }
}

fn write_captures(
    out_dir: &Path,
    artifacts: &Artifacts,
    grid: usize,
) -> Result<Vec<PathBuf>, CmdError> {
    let mut written = Vec::new();
    for cap in &artifacts.captures {
        let stem = format!("cap_s{}_l{}_slot{}", cap.step, cap.layer, cap.slot);
        let items: [(&str, &Tensor); 3] = [
            ("map", &cap.map),
            ("mask", &cap.mask),
            ("box", &cap.box_raster),
        ];
        for (what, tensor) in items {
            let pspt = out_dir.join(format!("{stem}_{what}.pspt"));
            write_tensor(tensor, &pspt)?;
            written.push(pspt);
            let pgm = out_dir.join(format!("{stem}_{what}.pgm"));
            write_map_pgm(&pgm, tensor, grid, grid)?;
            written.push(pgm);
        }
    }
    Ok(written)
}

fn run_plan(
    plan_file: &EditPlanFile,
    plan_dir: &Path,
    seed_override: Option<u64>,
    mutate: impl FnOnce(&mut psp_core::scheduler::EditPlan, &mut SchedulerConfig),
) -> Result<(Tensor, Artifacts, u64), CmdError> {
    let (mut plan, mut cfg) = plan_file.resolve(plan_dir, seed_override)?;
    mutate(&mut plan, &mut cfg);
    let seed = cfg.seed;
    let (z0, artifacts) = generate(plan, cfg)?;
    Ok((z0, artifacts, seed))
}

pub fn cmd_edit(
    plan_path: &Path,
    out_dir: &Path,
    seed_override: Option<u64>,
    quiet: bool,
) -> CmdResult {
    let plan_file = EditPlanFile::load(plan_path)?;
    let plan_dir = plan_path.parent().unwrap_or(Path::new("."));
    let (z0, artifacts, seed) = run_plan(&plan_file, plan_dir, seed_override, |_, _| {})?;
    ensure_dir(out_dir)?;
    let z0_path = out_dir.join("z0.pspt");
    write_tensor(&z0, &z0_path)?;
    let mut files = vec![z0_path];
    files.extend(write_captures(out_dir, &artifacts, plan_file.scheduler.g)?);
    print_events(&artifacts, quiet);
    write_manifest(out_dir, &plan_file, seed, &files)
}

#[derive(Serialize)]
struct AnalyzeSummary<'a> {
    mask: &'a str,
    no_aug: bool,
    masked_weights: &'a [psp_core::scheduler::MaskedWeightStat],
    max_masked_weight_overall: f32,
}

pub fn cmd_analyze(
    plan_path: &Path,
    mask_spec: &str,
    no_aug: bool,
    out_dir: &Path,
    seed_override: Option<u64>,
    quiet: bool,
) -> CmdResult {
    let plan_file = EditPlanFile::load(plan_path)?;
    let plan_dir = plan_path.parent().unwrap_or(Path::new("."));
    let spans = parse_mask_spec(mask_spec)?;
    let (z0, artifacts, seed) = run_plan(&plan_file, plan_dir, seed_override, |plan, _| {
        plan.task = Task::None;
        plan.mask_spans = spans;
        if no_aug {
            plan.use_aug = false;
        }
    })?;
    ensure_dir(out_dir)?;
    let z0_path = out_dir.join("z0.pspt");
    write_tensor(&z0, &z0_path)?;

    let overall = artifacts
        .masked_weights
        .iter()
        .map(|s| s.max_masked_weight)
        .fold(0.0f32, f32::max);
    let summary = AnalyzeSummary {
        mask: mask_spec,
        no_aug,
        masked_weights: &artifacts.masked_weights,
        max_masked_weight_overall: overall,
    };
    let summary_path = out_dir.join("masked_weights.json");
    std::fs::write(
        &summary_path,
        serde_json::to_string_pretty(&summary).map_err(|e| CmdError::Engine(e.to_string()))?,
    )
    .map_err(|e| CmdError::Engine(e.to_string()))?;

    print_events(&artifacts, quiet);
    if !quiet {
        println!(
            "{}",
            serde_json::to_string(&serde_json::json!({
                "max_masked_weight_overall": overall
            }))
            .expect("summary json")
        );
    }
    write_manifest(out_dir, &plan_file, seed, &[z0_path, summary_path])
}

pub fn cmd_attnmap(
    plan_path: &Path,
    step: usize,
    layer: usize,
    slot: usize,
    out_pgm: &Path,
    seed_override: Option<u64>,
    quiet: bool,
) -> CmdResult {
    let plan_file = EditPlanFile::load(plan_path)?;
    let plan_dir = plan_path.parent().unwrap_or(Path::new("."));
    let s = &plan_file.scheduler;
    if step < 1 || step > s.total_steps {
        return Err(CmdError::Input(format!(
            "step {step} outside [1, {}]",
            s.total_steps
        )));
    }
    if layer >= s.n_layers {
        return Err(CmdError::Input(format!(
            "layer {layer} outside [0, {})",
            s.n_layers
        )));
    }
    if slot >= plan_file.prompt_source.length {
        return Err(CmdError::Input(format!(
            "slot {slot} outside [0, {})",
            plan_file.prompt_source.length
        )));
    }
    let grid = s.g;
    let (_, artifacts, _) = run_plan(&plan_file, plan_dir, seed_override, |_, cfg| {
        cfg.capture = vec![CaptureSpec {
            step,
            layer,
            slot: Some(slot),
        }];
    })?;
    let cap = artifacts
        .captures
        .first()
        .ok_or_else(|| CmdError::Engine("capture produced no artifact".into()))?;
    if let Some(dir) = out_pgm.parent() {
        if !dir.as_os_str().is_empty() {
            ensure_dir(dir)?;
        }
    }
    write_map_pgm(out_pgm, &cap.map, grid, grid)?;
    let raw = out_pgm.with_extension("pspt");
    write_tensor(&cap.map, &raw)?;
    print_events(&artifacts, quiet);
    Ok(())
}

pub fn cmd_otsu(map_path: &Path, out_mask_pgm: &Path) -> CmdResult {
    let map = read_tensor(map_path)?;
    let (w, h) = match map.shape() {
        [n] => (*n, 1),
        [h, w] => (*w, *h),
        other => {
            return Err(CmdError::Input(format!(
                "expected a 1-D or 2-D map, got shape {other:?}"
            )))
        }
    };
    if map.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(CmdError::Input(
            "map values outside [0, 1]; normalize first".into(),
        ));
    }
    let flat = Tensor::new(vec![map.len()], map.data().to_vec())?;
    let r = otsu_threshold(&flat, 256)?;
    println!(
        "{}",
        serde_json::to_string(&serde_json::json!({
            "threshold": r.threshold,
            "threshold_index": r.threshold_index,
            "degenerate": r.degenerate,
            "class_counts": [r.class_counts.0, r.class_counts.1],
            "class_means": [r.class_means.0, r.class_means.1],
        }))
        .expect("otsu json")
    );
    let pixels: Vec<u8> = r
        .binary
        .data()
        .iter()
        .map(|v| if *v == 1.0 { 255 } else { 0 })
        .collect();
    if let Some(dir) = out_mask_pgm.parent() {
        if !dir.as_os_str().is_empty() {
            ensure_dir(dir)?;
        }
    }
    write_pgm(out_mask_pgm, w, h, &pixels)?;
    Ok(())
}
