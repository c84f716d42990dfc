//! Ablation harness: trains and evaluates configuration variants with a
//! shared seed and tabulates their metrics.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError};
use crate::eval::{evaluate, EvalError, EvalResult, TaskMetrics};
use crate::model::{DetectionFusion, MaskFusion};
use crate::train::{prepare_dataset, train_with, TrainConfig, TrainError, TrainState};

#[derive(Debug, Error)]
pub enum AblationError {
    #[error("unknown ablation axis {0:?}; expected none, components, fusion, all, det-motion, mask-motion, pair-flow, det-fusion or mask-fusion")]
    UnknownAxis(String),
    #[error("variant {variant}: {source}")]
    Train { variant: String, source: TrainError },
    #[error("variant {variant}: {source}")]
    Eval { variant: String, source: EvalError },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Axis {
    DetectionMotion,
    MaskMotion,
    PairwiseFlow,
    DetectionFusion,
    MaskFusion,
}

impl Axis {
    pub const COMPONENTS: [Axis; 3] = [Axis::DetectionMotion, Axis::MaskMotion, Axis::PairwiseFlow];
    pub const FUSION: [Axis; 2] = [Axis::DetectionFusion, Axis::MaskFusion];
}

/// Parses a comma-separated axis list; `none` (or an empty string) is the
/// empty set.
pub fn parse_axes(text: &str) -> Result<Vec<Axis>, AblationError> {
    let mut axes = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "none" => {}
            "components" => axes.extend(Axis::COMPONENTS),
            "fusion" => axes.extend(Axis::FUSION),
            "all" => axes.extend(Axis::COMPONENTS.into_iter().chain(Axis::FUSION)),
            other => axes.push(Axis::from_str(other)?),
        }
    }
    axes.sort_unstable();
    axes.dedup();
    Ok(axes)
}

impl FromStr for Axis {
    type Err = AblationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "det-motion" => Axis::DetectionMotion,
            "mask-motion" => Axis::MaskMotion,
            "pair-flow" => Axis::PairwiseFlow,
            "det-fusion" => Axis::DetectionFusion,
            "mask-fusion" => Axis::MaskFusion,
            _ => return Err(AblationError::UnknownAxis(s.to_string())),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub group: &'static str,
    pub name: String,
    pub config: TrainConfig,
}

fn slug(name: &str) -> String {
    let s: String = name.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect();
    s.split('_').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("_")
}

/// Rows of the ablation table, in display order.
pub fn variants(base: &TrainConfig, axes: &[Axis]) -> Vec<Variant> {
    let mut rows = Vec::new();
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let components: Vec<Axis> = axes.iter().copied().filter(|a| Axis::COMPONENTS.contains(a)).collect();
    for a in &components {
        let (name, config) = match a {
            Axis::DetectionMotion => ("w/o motion feat. for detection", with(&|c| c.model.detection_motion = false)),
            Axis::MaskMotion => ("w/o motion feat. for segmentation", with(&|c| c.model.mask_motion = false)),
            Axis::PairwiseFlow => ("w/o optical flow for pairwise loss", with(&|c| c.supervision.tau_flow = 0.0)),
            _ => unreachable!("filtered to component axes"),
        };
        rows.push(Variant {
            group: "components",
            name: name.to_string(),
            config,
        });
    }
    if !components.is_empty() || axes.is_empty() {
        rows.push(Variant {
            group: "components",
            name: "full model".into(),
            config: base.clone(),
        });
    }
    if axes.contains(&Axis::DetectionFusion) {
        for (label, mode) in [("maximum", DetectionFusion::Max), ("summation", DetectionFusion::Sum)] {
            rows.push(Variant {
                group: "detection fusion",
                name: format!("detection fusion: {label}"),
                config: with(&|c| c.model.fusion.detection = mode),
            });
        }
    }
    if axes.contains(&Axis::MaskFusion) {
        for (label, mode) in [("maximum", MaskFusion::Max), ("summation", MaskFusion::Sum), ("concatenation", MaskFusion::Concat)] {
            rows.push(Variant {
                group: "mask fusion",
                name: format!("mask fusion: {label}"),
                config: with(&|c| c.model.fusion.mask = mode),
            });
        }
    }
    rows
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub group: String,
    pub variant: String,
    pub result: EvalResult,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.1}", 100.0 * v))
}

fn metric_cells(m: &TaskMetrics) -> [String; 6] {
    [Some(m.ap), Some(m.ap50), Some(m.ap75), m.ap_small, m.ap_medium, m.ap_large].map(cell)
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,variant,mask_ap,mask_ap50,mask_ap75,mask_ap_s,mask_ap_m,mask_ap_l,box_ap,box_ap50,box_ap75,box_ap_s,box_ap_m,box_ap_l\n");
        let raw = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.6}"));
        for r in &self.rows {
            let mut fields = vec![r.group.clone(), r.variant.clone()];
            for m in [&r.result.mask, &r.result.bbox] {
                fields.extend([Some(m.ap), Some(m.ap50), Some(m.ap75), m.ap_small, m.ap_medium, m.ap_large].map(raw));
            }
            s.push_str(&fields.join(","));
            s.push('\n');
        }
        s
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.variant.len()).max().unwrap_or(7).max(7);
        let heads = ["AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L"];
        write!(f, "{:<width$} |", "variant")?;
        for h in heads {
            write!(f, " {:>6}", format!("m.{h}"))?;
        }
        write!(f, " |")?;
        for h in heads {
            write!(f, " {:>6}", format!("b.{h}"))?;
        }
        writeln!(f)?;
        let mut group = "";
        for r in &self.rows {
            if r.group != group {
                writeln!(f, "{}", "-".repeat(width + 2 + 7 * 6 + 2 + 7 * 6))?;
                group = &r.group;
            }
            write!(f, "{:<width$} |", r.variant)?;
            for c in metric_cells(&r.result.mask) {
                write!(f, " {c:>6}")?;
            }
            write!(f, " |")?;
            for c in metric_cells(&r.result.bbox) {
                write!(f, " {c:>6}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Trains and evaluates every variant. Variants whose configuration is
/// identical to an earlier one reuse its result.
pub fn ablate(base: &TrainConfig, axes: &[Axis], eval_data: &Path, out: &Path, mut progress: impl FnMut(&str)) -> Result<AblationTable, AblationError> {
    let train_set = Dataset::open(&base.train_data)?;
    let eval_set = Dataset::open(eval_data)?;
    let mut done: Vec<(TrainConfig, EvalResult)> = Vec::new();
    let mut rows = Vec::new();
    for v in variants(base, axes) {
        let result = match done.iter().find(|(c, _)| *c == v.config) {
            Some((_, r)) => r.clone(),
            None => {
                progress(&v.name);
                let dir = out.join("variants").join(slug(&v.name));
                let train_err = |source| AblationError::Train {
                    variant: v.name.clone(),
                    source,
                };
                let samples = prepare_dataset(&train_set, &v.config.model, &v.config.supervision).map_err(train_err)?;
                let state = TrainState::new(&v.config).map_err(train_err)?;
                let (state, _) = train_with(&v.config, &samples, state, &dir, |_| {}).map_err(train_err)?;
                let r = evaluate(&state.model, &eval_set).map_err(|source| AblationError::Eval {
                    variant: v.name.clone(),
                    source,
                })?;
                let p = dir.join("eval.json");
                fs::write(&p, r.to_json()).map_err(|source| AblationError::Io { path: p.clone(), source })?;
                done.push((v.config.clone(), r.clone()));
                r
            }
        };
        rows.push(AblationRow {
            group: v.group.to_string(),
            variant: v.name,
            result,
        });
    }
    let table = AblationTable { rows };
    for (name, text) in [("ablation.csv", table.to_csv()), ("ablation.txt", table.to_string())] {
        let p = out.join(name);
        fs::write(&p, text).map_err(|source| AblationError::Io { path: p.clone(), source })?;
    }
    Ok(table)
}
