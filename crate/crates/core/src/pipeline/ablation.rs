use std::collections::BTreeMap;

use serde::Serialize;

use crate::data::generate_dataset;
use crate::error::{Error, Result};

use super::config::{PipelineConfig, Stage2Config};
use super::train::{Session, TrainLog};

/// Finetuning variants, from the plain baseline to the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Classification and triplet losses only.
    Baseline,
    /// Prototype loss with visual prototypes alone.
    VisualPrototypes,
    /// Fused visual and skeleton prototypes.
    Fusion,
    FusionUpdate,
    FusionTemporal,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::VisualPrototypes,
        Variant::Fusion,
        Variant::FusionUpdate,
        Variant::FusionTemporal,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::VisualPrototypes => "visual_prototypes",
            Variant::Fusion => "fusion",
            Variant::FusionUpdate => "fusion_update",
            Variant::FusionTemporal => "fusion_temporal",
            Variant::Full => "full",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant `{name}`")))
    }

    /// `(prototypes, fusion, update, temporal)`.
    pub fn toggles(self) -> (bool, bool, bool, bool) {
        match self {
            Variant::Baseline => (false, false, false, false),
            Variant::VisualPrototypes => (true, false, false, false),
            Variant::Fusion => (true, true, false, false),
            Variant::FusionUpdate => (true, true, true, false),
            Variant::FusionTemporal => (true, true, false, true),
            Variant::Full => (true, true, true, true),
        }
    }

    pub fn apply(self, s2: &mut Stage2Config) {
        let (p, f, u, t) = self.toggles();
        s2.use_pfu = p;
        s2.use_fusion = f;
        s2.use_pfu_update = u;
        s2.use_sgtm = t;
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub rank1: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationSummary {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub rank1: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub runs: Vec<AblationRun>,
    /// Mean over seeds, keyed by variant name.
    pub mean: BTreeMap<String, AblationSummary>,
    /// Allowed shortfall between consecutive variants of the trend.
    pub tolerance: f64,
    /// Full ≥ fusion ≥ baseline on mean mAP, each within the tolerance;
    /// absent when a variant of the chain was not run.
    pub trend_holds: Option<bool>,
}

impl AblationReport {
    pub fn mean_map(&self, v: Variant) -> Option<f64> {
        self.mean.get(v.name()).map(|s| s.map)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub const TREND_TOLERANCE: f64 = 0.02;

/// Trains every variant for each seed. The dataset and the contrastive
/// stage are shared by all variants of one seed; both follow the seed.
pub fn run_ablation(base: &PipelineConfig, seeds: &[u64], variants: &[Variant], log: &mut TrainLog) -> Result<AblationReport> {
    if seeds.is_empty() || variants.is_empty() {
        return Err(Error::Config("ablation needs at least one seed and one variant".into()));
    }
    let mut runs = Vec::new();
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.data.seed = seed;
        let ds = generate_dataset(&cfg.data)?;
        let mut pre = Session::new(&cfg, &ds)?;
        pre.sgt_pretrain(&ds, log)?;
        pre.stage1(&ds, log)?;
        pre.compute_banks(&ds)?;
        for &variant in variants {
            let mut s = pre.clone();
            variant.apply(&mut s.cfg.stage2);
            s.cfg.validate()?;
            s.stage2(&ds, log)?;
            let r = s.eval_retrieval(&ds)?;
            log::info!("ablation seed {seed} {}: mAP {:.4} rank1 {:.4}", variant.name(), r.map, r.rank1);
            runs.push(AblationRun { variant, seed, map: r.map, rank1: r.rank1 });
        }
    }
    let mut mean = BTreeMap::new();
    for &v in variants {
        let mine: Vec<&AblationRun> = runs.iter().filter(|r| r.variant == v).collect();
        let n = mine.len() as f64;
        mean.insert(
            v.name().to_string(),
            AblationSummary {
                map: mine.iter().map(|r| r.map).sum::<f64>() / n,
                rank1: mine.iter().map(|r| r.rank1).sum::<f64>() / n,
            },
        );
    }
    let mut report = AblationReport { seeds: seeds.to_vec(), runs, mean, tolerance: TREND_TOLERANCE, trend_holds: None };
    if let (Some(full), Some(fusion), Some(base)) =
        (report.mean_map(Variant::Full), report.mean_map(Variant::Fusion), report.mean_map(Variant::Baseline))
    {
        report.trend_holds = Some(full >= fusion - TREND_TOLERANCE && fusion >= base - TREND_TOLERANCE);
    }
    Ok(report)
}
