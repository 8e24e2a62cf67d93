use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::{json, Value};
use skelreid::data::{
    generate_dataset, load_dataset, parse_obj, regress_joints, save_dataset, skeleton_frame_json, Dataset, JointRegressor,
    Tracklet, MANIFEST_FILE,
};
use skelreid::eval::{evaluate_sets, l2_normalize, EvalReport, FeatureSet, Identity};
use skelreid::gradcheck_suite::{run_suite, REL_TOL};
use skelreid::pipeline::{run_ablation, FeatureKind, PipelineConfig, Session, TrainLog, Variant};
use skelreid::skeleton::SkeletonGraph;
use skelreid::Error;

use crate::{Cli, Command, Common, ExportKind, Preset};

/// Prints a line to stdout; a closed pipe ends output quietly.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        match writeln!(std::io::stdout().lock(), $($arg)*) {
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
            other => other?,
        }
    }};
}

/// 1 for bad input, 2 for failures while running.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(err) if err.is_validation() => 1,
        _ => 2,
    }
}

fn invalid(msg: String) -> anyhow::Error {
    Error::Config(msg).into()
}

/// Recursively replaces the keys of `base` present in `overlay`.
fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn build_config(c: &Common) -> Result<PipelineConfig> {
    let base = match c.preset {
        Preset::Desk => PipelineConfig::desk(),
        Preset::Reference => PipelineConfig::default(),
    };
    let mut cfg = match &c.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            let overlay: Value = serde_json::from_str(&text).map_err(|e| Error::json(path, &e))?;
            let mut root = serde_json::to_value(&base)?;
            merge(&mut root, overlay);
            serde_json::from_value(root).map_err(|e| invalid(format!("{}: {e}", path.display())))?
        }
        None => base,
    };
    for kv in &c.overrides {
        cfg.set(kv)?;
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
        cfg.data.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Output directory, created if needed.
fn out_dir(c: &Common, default: &str) -> Result<PathBuf> {
    let dir = c.out.clone().unwrap_or_else(|| PathBuf::from(default));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Refuses to replace an existing output without `--force`; with it the
/// old file is removed so append-only logs start fresh.
fn claim(path: &Path, force: bool) -> Result<()> {
    if path.exists() {
        if !force {
            return Err(invalid(format!("{} exists; pass --force to overwrite", path.display())));
        }
        std::fs::remove_file(path).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(invalid(format!("{} does not exist", path.display())))
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn dataset(cfg: &PipelineConfig, data: Option<&Path>) -> Result<Dataset> {
    match data {
        Some(root) => {
            require(&root.join(MANIFEST_FILE))?;
            Ok(load_dataset(root)?)
        }
        None => Ok(generate_dataset(&cfg.data)?),
    }
}

fn train_log(path: &Path, c: &Common) -> TrainLog {
    let mut log = TrainLog::to_file(path);
    log.timings = !c.deterministic;
    log
}

fn session(cfg: &PipelineConfig, ds: &Dataset, checkpoint: &Path) -> Result<Session> {
    require(checkpoint)?;
    let mut s = Session::new(cfg, ds)?;
    s.load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    Ok(s)
}

fn summary(report: &EvalReport) -> Value {
    json!({"mAP": report.map, "rank1": report.rank1, "rank5": report.rank5, "queries": report.num_queries})
}

pub fn run(cli: &Cli) -> Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::GenData => {
            let cfg = build_config(c)?;
            let dir = out_dir(c, "data")?;
            let ds = generate_dataset(&cfg.data)?;
            save_dataset(&ds, &dir, c.force)?;
            say!(
                "{}",
                json!({"out": dir, "train": ds.train.len(), "query": ds.query.len(), "gallery": ds.gallery.len()})
            );
        }
        Command::Pretrain { data } => {
            let cfg = build_config(c)?;
            let ds = dataset(&cfg, data.as_deref())?;
            let dir = out_dir(c, "runs/pretrain")?;
            let (ckpt, log_path, metrics) = (dir.join("stage1.ckpt"), dir.join("pretrain.log.jsonl"), dir.join("cross_modal.json"));
            for p in [&ckpt, &log_path, &metrics] {
                claim(p, c.force)?;
            }
            write(&dir.join("config.json"), &cfg.to_json())?;
            let mut s = Session::new(&cfg, &ds)?;
            let mut log = train_log(&log_path, c);
            s.sgt_pretrain(&ds, &mut log)?;
            s.stage1(&ds, &mut log)?;
            s.save(&ckpt)?;
            let report = s.eval_cross_modal(&ds)?;
            write(&metrics, &report.to_json())?;
            say!("{}", json!({"checkpoint": ckpt, "cross_modal": summary(&report)}));
        }
        Command::Finetune { data, init } => {
            let cfg = build_config(c)?;
            let ds = dataset(&cfg, data.as_deref())?;
            let mut s = session(&cfg, &ds, init)?;
            let dir = out_dir(c, "runs/finetune")?;
            let (ckpt, log_path, metrics) = (dir.join("stage2.ckpt"), dir.join("finetune.log.jsonl"), dir.join("metrics.json"));
            for p in [&ckpt, &log_path, &metrics] {
                claim(p, c.force)?;
            }
            write(&dir.join("config.json"), &cfg.to_json())?;
            s.stage2(&ds, &mut train_log(&log_path, c))?;
            s.save(&ckpt)?;
            let report = s.eval_retrieval(&ds)?;
            write(&metrics, &report.to_json())?;
            say!("{}", json!({"checkpoint": ckpt, "retrieval": summary(&report)}));
        }
        Command::Eval { data, checkpoint, cross_modal, query, gallery } => {
            let cfg = build_config(c)?;
            let report = match (checkpoint, query, gallery) {
                (Some(ckpt), _, _) => {
                    let ds = dataset(&cfg, data.as_deref())?;
                    let s = session(&cfg, &ds, ckpt)?;
                    if *cross_modal {
                        s.eval_cross_modal(&ds)?
                    } else {
                        s.eval_retrieval(&ds)?
                    }
                }
                (None, Some(q), Some(g)) => {
                    require(q)?;
                    require(g)?;
                    let (mut q, mut g) = (FeatureSet::load(q)?, FeatureSet::load(g)?);
                    if cfg.eval.normalize {
                        q.features = l2_normalize(&q.features);
                        g.features = l2_normalize(&g.features);
                    }
                    evaluate_sets(&q, &g, cfg.eval.exclude_same_camera)?
                }
                _ => return Err(invalid("eval needs --checkpoint, or --query with --gallery".into())),
            };
            if c.out.is_some() {
                let path = out_dir(c, "")?.join("metrics.json");
                claim(&path, c.force)?;
                write(&path, &report.to_json())?;
            }
            say!("{}", report.to_json());
        }
        Command::Gradcheck { seeds, filter } => {
            let rows = run_suite(*seeds, filter.as_deref())?;
            if rows.is_empty() {
                return Err(invalid(format!("no check matches `{}`", filter.as_deref().unwrap_or(""))));
            }
            say!("{:<28} {:<9} {:>5} {:>11} {:>5}  result", "check", "kind", "seeds", "max error", "seed");
            for r in &rows {
                let kind = serde_json::to_value(r.kind)?;
                say!(
                    "{:<28} {:<9} {:>5} {:>11.3e} {:>5}  {}",
                    r.name,
                    kind.as_str().unwrap_or_default(),
                    r.seeds,
                    r.max_error,
                    r.worst_seed,
                    if r.passed { "PASS" } else { "FAIL" }
                );
            }
            if c.out.is_some() {
                let path = out_dir(c, "")?.join("gradcheck.json");
                claim(&path, c.force)?;
                write(&path, &serde_json::to_string_pretty(&json!({"tolerance": REL_TOL, "rows": rows}))?)?;
            }
            let failed = rows.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                anyhow::bail!("{failed} of {} checks above tolerance {REL_TOL:e}", rows.len());
            }
        }
        Command::RegressJoints { obj, regressor } => {
            require(regressor)?;
            let reg = JointRegressor::load(regressor)?;
            let h36m = SkeletonGraph::h36m();
            let graph = if reg.names == h36m.names { h36m } else { SkeletonGraph::new(reg.names.clone(), vec![])? };
            let dir = c.out.as_ref().map(|_| out_dir(c, "")).transpose()?;
            for (frame, path) in obj.iter().enumerate() {
                require(path)?;
                let joints = regress_joints(&parse_obj(path)?, &reg)?;
                let text = skeleton_frame_json(frame, joints.data(), &graph);
                match &dir {
                    Some(d) => {
                        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| format!("frame_{frame:03}"));
                        let target = d.join(format!("{stem}.json"));
                        claim(&target, c.force)?;
                        write(&target, &text)?;
                    }
                    None => say!("{text}"),
                }
            }
        }
        Command::ExportFeatures { data, checkpoint, kind } => {
            let cfg = build_config(c)?;
            let ds = dataset(&cfg, data.as_deref())?;
            let s = session(&cfg, &ds, checkpoint)?;
            let dir = out_dir(c, "runs/features")?;
            let (qk, gk) = match kind {
                ExportKind::Retrieval => (FeatureKind::Retrieval, FeatureKind::Retrieval),
                ExportKind::Aligned => (FeatureKind::AlignedSkeleton, FeatureKind::AlignedVisual),
                ExportKind::Visual => (FeatureKind::VisualSequence, FeatureKind::VisualSequence),
                ExportKind::Skeleton => (FeatureKind::SkeletonSequence, FeatureKind::SkeletonSequence),
            };
            let ids = |t: &[Tracklet]| t.iter().map(|x| Identity { pid: x.pid, cam: x.cam }).collect::<Vec<_>>();
            for (name, split, k) in [("query", &ds.query, qk), ("gallery", &ds.gallery, gk)] {
                let path = dir.join(format!("{name}.bin"));
                claim(&path, c.force)?;
                let feats = s.model.extract(&s.store, split, k, &cfg.stage2)?;
                FeatureSet::new(feats, ids(split))?.save(&path)?;
            }
            say!("{}", json!({"out": dir, "query": ds.query.len(), "gallery": ds.gallery.len()}));
        }
        Command::Ablate { seeds, variants } => {
            let cfg = build_config(c)?;
            let variants: Vec<Variant> = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variants.iter().map(|v| Variant::parse(v)).collect::<skelreid::Result<_>>()?
            };
            let dir = out_dir(c, "runs/ablate")?;
            let (report_path, log_path) = (dir.join("ablation.json"), dir.join("ablate.log.jsonl"));
            claim(&report_path, c.force)?;
            claim(&log_path, c.force)?;
            let report = run_ablation(&cfg, seeds, &variants, &mut train_log(&log_path, c))?;
            write(&report_path, &report.to_json())?;
            say!("{:<18} {:>8} {:>8}", "variant", "mAP", "rank1");
            for v in &variants {
                let m = &report.mean[v.name()];
                say!("{:<18} {:>8.4} {:>8.4}", v.name(), m.map, m.rank1);
            }
            match report.trend_holds {
                Some(ok) => say!("trend full >= fusion >= baseline (band {}): {}", report.tolerance, if ok { "holds" } else { "violated" }),
                None => say!("trend not evaluated: baseline, fusion and full are all needed"),
            }
        }
    }
    Ok(())
}
