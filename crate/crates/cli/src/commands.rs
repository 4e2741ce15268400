use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use voxcascade::cascade::{
    compute_dataset_stats, downsample_slices, extract_rois, normalize, restore_to_original, run_cascade, run_stage1,
    run_stage2, stage1_cases, stage2_cases, train_stage, CascadeConfig, DatasetStats, StatsScope,
};
use voxcascade::lossmetrics::{CaseDice, EvalReport};
use voxcascade::nets::Network;
use voxcascade::volcore::{read_mvol, synth_phantom, write_mvol, Dims, LabelMask, PhantomSpec, Spacing, Volume, VoxelBox};

use crate::config::RunConfig;

pub const IMAGE_FILE: &str = "image.mvol";
pub const MASK_FILE: &str = "mask.mvol";
pub const PRED_FILE: &str = "pred.mvol";
pub const STAGE1_FILE: &str = "stage1.mvol";
pub const STAGE2_FILE: &str = "stage2.mvol";

/// Bookkeeping for the manifest written at the end of every subcommand.
pub struct Run<'a> {
    pub cfg: &'a RunConfig,
    pub label: String,
    pub args: Vec<String>,
    pub seed: u64,
    outputs: Vec<PathBuf>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    subcommand: &'a str,
    args: &'a [String],
    seed: u64,
    versions: Versions,
    config: &'a RunConfig,
    outputs: Vec<String>,
}

#[derive(Serialize)]
struct Versions {
    voxcascade: &'static str,
}

impl<'a> Run<'a> {
    pub fn new(cfg: &'a RunConfig, label: impl Into<String>, args: Vec<String>, seed: u64) -> Self {
        Self {
            cfg,
            label: label.into(),
            args,
            seed,
            outputs: Vec::new(),
        }
    }

    fn wrote(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    pub fn write_manifest(&self) -> Result<PathBuf> {
        let path = self.cfg.out_dir.join(format!("manifest_{}.json", self.label));
        let m = Manifest {
            subcommand: &self.label,
            args: &self.args,
            seed: self.seed,
            versions: Versions {
                voxcascade: env!("CARGO_PKG_VERSION"),
            },
            config: self.cfg,
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
        };
        write_json(&path, &m)?;
        Ok(path)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn case_dir_name(index: usize) -> String {
    format!("case_{index:03}")
}

/// Sorted case ids under `dir`: every subdirectory holding `file`.
pub fn list_cases(dir: &Path, file: &str) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let entry = entry?;
        if entry.path().join(file).is_file() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    if ids.is_empty() {
        bail!("no cases with {file} under {}", dir.display());
    }
    Ok(ids)
}

fn select_cases(cfg: &RunConfig, subset: &Option<Vec<String>>) -> Result<Vec<String>> {
    match subset {
        Some(ids) => Ok(ids.clone()),
        None => list_cases(&cfg.data_dir, IMAGE_FILE),
    }
}

fn load_mask(path: &Path) -> Result<LabelMask> {
    Ok(LabelMask::try_from(read_mvol(path)?)?)
}

fn load_case(cfg: &RunConfig, id: &str) -> Result<(Volume, LabelMask)> {
    let dir = cfg.data_dir.join(id);
    let vol = read_mvol(dir.join(IMAGE_FILE))?;
    let mask = load_mask(&dir.join(MASK_FILE))?;
    Ok((vol, mask))
}

fn load_training_cases(cfg: &RunConfig) -> Result<Vec<(Volume, LabelMask)>> {
    select_cases(cfg, &cfg.train_cases)?
        .iter()
        .map(|id| load_case(cfg, id).with_context(|| format!("case {id}")))
        .collect()
}

pub fn stats_path(cfg: &RunConfig, stage: u8) -> PathBuf {
    cfg.out_dir.join(format!("stats_stage{stage}.json"))
}

pub fn load_stats(cfg: &RunConfig, stage: u8) -> Result<DatasetStats> {
    if let Some(s) = &cfg.stage(stage).stats {
        return Ok(s.clone());
    }
    let path = stats_path(cfg, stage);
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading {} (run `stats --stage {stage}` first)", path.display()))?;
    let stats: DatasetStats = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    stats.validate()?;
    Ok(stats)
}

pub fn synth(run: &mut Run, count: usize, dims: Dims, spacing: Spacing) -> Result<()> {
    for i in 0..count {
        let id = case_dir_name(i);
        let dir = run.cfg.data_dir.join(&id);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let spec = PhantomSpec::for_case(dims, spacing, run.seed, i as u64);
        let (vol, mask) = synth_phantom(&spec).with_context(|| format!("case {id}"))?;
        write_mvol(&vol, dir.join(IMAGE_FILE))?;
        write_mvol(&mask.to_volume(), dir.join(MASK_FILE))?;
        run.wrote(dir.join(IMAGE_FILE));
        run.wrote(dir.join(MASK_FILE));
    }
    eprintln!("wrote {count} cases to {}", run.cfg.data_dir.display());
    Ok(())
}

pub fn stats(run: &mut Run, stage: u8) -> Result<()> {
    let cfg = run.cfg;
    let cases = load_training_cases(cfg)?;
    let (lo, hi) = (cfg.clip_lo_percentile, cfg.clip_hi_percentile);
    let mut stats = if stage == 1 {
        let coarse = cases.iter().map(|(v, _)| downsample_slices(v)).collect::<Result<Vec<_>, _>>()?;
        compute_dataset_stats(&coarse, &[], StatsScope::Whole, lo, hi)?
    } else {
        let (vols, masks): (Vec<Volume>, Vec<LabelMask>) = cases.into_iter().unzip();
        let scope = StatsScope::Roi {
            margin_mm: cfg.margin_mm,
        };
        compute_dataset_stats(&vols, &masks, scope, lo, hi)?
    };
    stats.per_case = cfg.per_case;
    let path = stats_path(cfg, stage);
    write_json(&path, &stats)?;
    run.wrote(path.clone());
    eprintln!(
        "stage {stage} stats: mean {:.4} std {:.4} -> {}",
        stats.global_mean,
        stats.global_std,
        path.display()
    );
    Ok(())
}

pub fn model_path(cfg: &RunConfig, stage: u8) -> PathBuf {
    cfg.out_dir.join(format!("stage{stage}")).join("model.ckpt")
}

pub fn train(run: &mut Run, stage: u8) -> Result<()> {
    let cfg = run.cfg;
    let stats = load_stats(cfg, stage)?;
    let cases = load_training_cases(cfg)?;
    let data = if stage == 1 {
        stage1_cases(&cases, &stats)?
    } else {
        stage2_cases(&cases, &stats, cfg.margin_mm)?
    };
    let tcfg = cfg.train_config(stage);
    let mut net = Network::<f32>::build(&cfg.network(stage), cfg.seed.wrapping_add(u64::from(stage)))?;
    let dir = cfg.out_dir.join(format!("stage{stage}"));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let every = (tcfg.max_steps / 20).max(1);
    let report = train_stage(&tcfg, &mut net, &data, Some(&dir), |step, loss| {
        if (step + 1) % every == 0 {
            eprintln!("stage {stage} step {}/{} loss {loss:.4}", step + 1, tcfg.max_steps);
        }
    })?;
    let model = model_path(cfg, stage);
    net.save_checkpoint(&model)?;
    let trace = dir.join("loss.json");
    write_json(&trace, &report.loss_trace)?;
    run.wrote(model);
    run.wrote(trace);
    Ok(())
}

fn load_models(cfg: &RunConfig, stage: u8, flag: &[PathBuf]) -> Result<Vec<Network<f32>>> {
    let paths = if flag.is_empty() { &cfg.stage(stage).checkpoints } else { flag };
    if paths.is_empty() {
        bail!("stage {stage} needs at least one checkpoint (--ckpt or stage{stage}.checkpoints)");
    }
    paths
        .iter()
        .map(|p| {
            let mut net = Network::<f32>::build(&cfg.network(stage), 0)?;
            net.load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?;
            Ok(net)
        })
        .collect()
}

fn cascade_config(cfg: &RunConfig, s1: DatasetStats, s2: DatasetStats) -> CascadeConfig {
    CascadeConfig {
        stage1_stats: s1,
        stage2_stats: s2,
        overlap_frac: cfg.overlap_frac,
        weighting: cfg.weighting,
        margin_mm: cfg.margin_mm,
        keep_k_stage1: cfg.keep_k(1),
        keep_k_stage2: cfg.keep_k(2),
    }
}

#[derive(Serialize)]
struct RoiRecord {
    bbox: VoxelBox,
    source_component_id: u32,
}

/// Stage 1 writes `stage1.mvol` (coarse grid); stage 2 reads it, crops ROIs and writes
/// `stage2.mvol` on the original grid.
pub fn infer(run: &mut Run, stage: u8, ckpts: &[PathBuf]) -> Result<()> {
    let cfg = run.cfg;
    let nets = load_models(cfg, stage, ckpts)?;
    let stats = load_stats(cfg, stage)?;
    let ccfg = cascade_config(cfg, stats.clone(), stats);
    for id in select_cases(cfg, &cfg.infer_cases)? {
        let out_dir = cfg.out_dir.join(&id);
        let result = (|| -> Result<PathBuf> {
            let vol = read_mvol(cfg.data_dir.join(&id).join(IMAGE_FILE))?;
            std::fs::create_dir_all(&out_dir)?;
            if stage == 1 {
                let mask = run_stage1(&nets, &vol, &ccfg)?;
                let path = out_dir.join(STAGE1_FILE);
                write_mvol(&mask.to_volume(), &path)?;
                Ok(path)
            } else {
                let coarse = load_mask(&out_dir.join(STAGE1_FILE)).context("reading stage-1 output (run `infer --stage 1` first)")?;
                let image = normalize(&vol, &ccfg.stage2_stats)?;
                let rois = extract_rois(&coarse, &image, ccfg.margin_mm)?;
                let preds = run_stage2(&nets, &rois, &ccfg)?;
                let mask = restore_to_original(&preds, vol.dims(), vol.spacing())?;
                let path = out_dir.join(STAGE2_FILE);
                write_mvol(&mask.to_volume(), &path)?;
                Ok(path)
            }
        })()
        .with_context(|| format!("case {id}"))?;
        eprintln!("{id}: {}", result.display());
        run.wrote(result);
    }
    Ok(())
}

pub fn cascade(run: &mut Run, ckpt1: &[PathBuf], ckpt2: &[PathBuf], keep_intermediates: bool) -> Result<()> {
    let cfg = run.cfg;
    let n1 = load_models(cfg, 1, ckpt1)?;
    let n2 = load_models(cfg, 2, ckpt2)?;
    let ccfg = cascade_config(cfg, load_stats(cfg, 1)?, load_stats(cfg, 2)?);
    for id in select_cases(cfg, &cfg.infer_cases)? {
        let out_dir = cfg.out_dir.join(&id);
        let written = (|| -> Result<Vec<PathBuf>> {
            let vol = read_mvol(cfg.data_dir.join(&id).join(IMAGE_FILE))?;
            let out = run_cascade(&n1, &n2, &vol, &ccfg)?;
            std::fs::create_dir_all(&out_dir)?;
            let mut paths = vec![out_dir.join(PRED_FILE)];
            write_mvol(&out.final_mask.to_volume(), &paths[0])?;
            if keep_intermediates {
                let s1 = out_dir.join(STAGE1_FILE);
                write_mvol(&out.stage1_mask_lowres.to_volume(), &s1)?;
                let rois: Vec<RoiRecord> = out
                    .roi_list
                    .iter()
                    .map(|r| RoiRecord {
                        bbox: r.bbox,
                        source_component_id: r.source_component_id,
                    })
                    .collect();
                let rj = out_dir.join("rois.json");
                write_json(&rj, &rois)?;
                paths.extend([s1, rj]);
            }
            eprintln!("{id}: {} ROIs", out.roi_list.len());
            Ok(paths)
        })()
        .with_context(|| format!("case {id}"))?;
        written.into_iter().for_each(|p| run.wrote(p));
    }
    Ok(())
}

pub fn format_report(rep: &EvalReport) -> String {
    let mut s = String::new();
    for c in &rep.cases {
        let _ = writeln!(s, "{}\tkidney {:.4}\ttumor {:.4}", c.case_id, c.kidney_dice, c.tumor_dice);
    }
    let _ = writeln!(
        s,
        "mean\tkidney {:.4}\ttumor {:.4}\tcomposite {:.4}",
        rep.mean_kidney_dice, rep.mean_tumor_dice, rep.composite_dice
    );
    s
}

/// Scores `infer_cases`, or every case under `gt`. Predictions are read from
/// `<pred>/<case>/pred.mvol`, falling back to `mask.mvol`.
pub fn eval(run: &mut Run, pred: &Path, gt: &Path) -> Result<()> {
    let ids = match &run.cfg.infer_cases {
        Some(ids) => ids.clone(),
        None => list_cases(gt, MASK_FILE)?,
    };
    let mut scores = Vec::new();
    for id in ids {
        let score = (|| -> Result<CaseDice> {
            let truth = load_mask(&gt.join(&id).join(MASK_FILE))?;
            let dir = pred.join(&id);
            let file = if dir.join(PRED_FILE).is_file() { PRED_FILE } else { MASK_FILE };
            let p = load_mask(&dir.join(file))?;
            Ok(CaseDice::score(id.clone(), &p, &truth)?)
        })()
        .with_context(|| format!("case {id}"))?;
        scores.push(score);
    }
    let rep = EvalReport::from_cases(scores)?;
    let text = format_report(&rep);
    print!("{text}");
    let (json, txt) = (run.cfg.out_dir.join("eval.json"), run.cfg.out_dir.join("eval.txt"));
    write_json(&json, &rep)?;
    std::fs::write(&txt, &text).with_context(|| format!("writing {}", txt.display()))?;
    run.wrote(json);
    run.wrote(txt);
    Ok(())
}
