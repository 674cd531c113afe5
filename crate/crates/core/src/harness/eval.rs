use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{majority_label, predict_baseline, BaselineKind};
use crate::corpus::{Process, TaskKind, Vocabulary};
use crate::crf::SurfaceTag;
use crate::error::{Error, Result};
use crate::metrics::{
    score_propara, score_recipes, slice_challenges, ProParaReport, RecipesGold, RecipesReport,
    SliceReport,
};
use crate::model::{Model, Prediction};
use crate::templating::Templater;

/// Scores of one system on one corpus; models and baselines share it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum EvalReport {
    Recipes {
        system: String,
        metrics: RecipesReport,
        /// Present when every entity carries combined flags.
        slices: Option<SliceReport>,
    },
    #[serde(rename = "propara")]
    ProPara {
        system: String,
        metrics: ProParaReport,
        /// Decoded sequences that break the lifecycle; always 0 for CRF output.
        lifecycle_violations: usize,
    },
}

impl EvalReport {
    /// F1 for Recipes, Mi-Avg for ProPara.
    pub fn dev_metric(&self) -> Option<f64> {
        match self {
            EvalReport::Recipes { metrics, .. } => metrics.f1,
            EvalReport::ProPara { metrics, .. } => metrics.micro_avg,
        }
    }

    /// Cell accuracy for Recipes.
    pub fn accuracy(&self) -> Option<f64> {
        match self {
            EvalReport::Recipes { metrics, .. } => metrics.accuracy,
            EvalReport::ProPara { .. } => None,
        }
    }

    pub fn table(&self) -> String {
        match self {
            EvalReport::Recipes {
                system,
                metrics,
                slices,
            } => {
                let mut s = format!(
                    "{}\n{}\n",
                    RecipesReport::table_header(),
                    metrics.table_row(system)
                );
                if let Some(sl) = slices {
                    s.push('\n');
                    s.push_str(&sl.table());
                }
                s
            }
            EvalReport::ProPara {
                system,
                metrics,
                lifecycle_violations,
            } => format!(
                "{}lifecycle violations: {lifecycle_violations}\n",
                metrics.table(system)
            ),
        }
    }
}

fn recipes_report(
    system: String,
    corpus: &[Process],
    pred: &[Vec<Vec<bool>>],
) -> Result<EvalReport> {
    let gold: Vec<RecipesGold> = corpus
        .iter()
        .map(RecipesGold::from_process)
        .collect::<Result<_>>()?;
    let metrics = score_recipes(&gold, pred)?;
    let flagged = corpus
        .iter()
        .all(|p| p.entities.iter().all(|e| e.combined.is_some()));
    let slices = if flagged {
        Some(slice_challenges(&gold, pred, corpus)?)
    } else {
        None
    };
    Ok(EvalReport::Recipes {
        system,
        metrics,
        slices,
    })
}

fn propara_report(
    system: String,
    corpus: &[Process],
    pred: &[Vec<Vec<SurfaceTag>>],
) -> Result<EvalReport> {
    let mut gold = Vec::new();
    for p in corpus {
        for e in &p.entities {
            gold.push(
                e.labels
                    .tags()
                    .ok_or_else(|| {
                        Error::Validation(format!("process `{}` has no tag labels", p.id))
                    })?
                    .to_vec(),
            );
        }
    }
    let flat: Vec<Vec<SurfaceTag>> = pred.iter().flatten().cloned().collect();
    let violations = flat
        .iter()
        .filter(|s| crate::crf::expand_gold(s).is_err())
        .count();
    Ok(EvalReport::ProPara {
        system,
        metrics: score_propara(&gold, &flat)?,
        lifecycle_violations: violations,
    })
}

/// Runs the model's template, head and decoder over a corpus.
pub fn evaluate(
    model: &Model,
    vocab: &Vocabulary,
    corpus: &[Process],
    templater: &Templater,
) -> Result<(EvalReport, Vec<Prediction>)> {
    model.check_vocab(vocab)?;
    if let Some(p) = corpus.iter().find(|p| p.task != model.spec.task) {
        return Err(Error::Incompatible(format!(
            "process `{}` is a {} process but the model was trained for {}",
            p.id, p.task, model.spec.task
        )));
    }
    let preds: Vec<Prediction> = corpus
        .par_iter()
        .map(|p| model.predict(p, vocab, templater))
        .collect::<Result<_>>()?;
    let system = format!("{}/{:?}", model.spec.variant, model.spec.head).to_lowercase();
    let report = match model.spec.task {
        TaskKind::Recipes => {
            let grids: Vec<Vec<Vec<bool>>> = preds
                .iter()
                .map(|p| match p {
                    Prediction::Presence(g) => g.clone(),
                    Prediction::Tags(_) => unreachable!("recipes models predict presence"),
                })
                .collect();
            recipes_report(system, corpus, &grids)?
        }
        TaskKind::ProPara => {
            let tags: Vec<Vec<Vec<SurfaceTag>>> = preds
                .iter()
                .map(|p| match p {
                    Prediction::Tags(t) => t.clone(),
                    Prediction::Presence(_) => unreachable!("propara models predict tags"),
                })
                .collect();
            propara_report(system, corpus, &tags)?
        }
    };
    Ok((report, preds))
}

/// Scores a rule-based baseline; `train` supplies the majority label.
pub fn evaluate_baseline(
    kind: BaselineKind,
    train: &[Process],
    corpus: &[Process],
) -> Result<EvalReport> {
    let majority = if kind == BaselineKind::Majority {
        majority_label(train)?
    } else {
        false
    };
    let grids: Vec<Vec<Vec<bool>>> = corpus
        .iter()
        .map(|p| predict_baseline(kind, p, majority))
        .collect::<Result<_>>()?;
    let name = serde_json::to_value(kind)?
        .as_str()
        .unwrap_or_default()
        .to_string();
    recipes_report(name, corpus, &grids)
}
