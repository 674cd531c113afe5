//! Evaluation measures for both tasks and the challenging-case slices.
//!
//! Ratios with an empty denominator are reported as `None`, never as 0 or 1.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::baselines::matches;
use crate::corpus::{Process, TaskKind};
use crate::crf::SurfaceTag;
use crate::error::{Error, Result};

/// Entity x step presence grid.
pub type Grid = Vec<Vec<bool>>;

/// Gold presence labels of one process with optional combined flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecipesGold {
    pub labels: Grid,
    /// `None` when the corpus carries no combined flags for an entity.
    pub combined: Vec<Option<Vec<bool>>>,
}

impl RecipesGold {
    pub fn from_process(p: &Process) -> Result<Self> {
        if p.task != TaskKind::Recipes {
            return Err(Error::Validation(format!(
                "process `{}` is not a recipe",
                p.id
            )));
        }
        Ok(Self {
            labels: p
                .entities
                .iter()
                .map(|e| {
                    e.labels
                        .presence()
                        .map(<[bool]>::to_vec)
                        .unwrap_or_default()
                })
                .collect(),
            combined: p.entities.iter().map(|e| e.combined.clone()).collect(),
        })
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecipesCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub uncombined_positive: usize,
    pub uncombined_tp: usize,
    pub combined_positive: usize,
    pub combined_tp: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipesReport {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
    pub uncombined_recall: Option<f64>,
    pub combined_recall: Option<f64>,
    pub counts: RecipesCounts,
}

impl RecipesReport {
    pub fn from_counts(c: RecipesCounts) -> Self {
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            _ => None,
        };
        Self {
            precision,
            recall,
            f1,
            accuracy: ratio(c.tp + c.tn, c.tp + c.tn + c.fp + c.fn_),
            uncombined_recall: ratio(c.uncombined_tp, c.uncombined_positive),
            combined_recall: ratio(c.combined_tp, c.combined_positive),
            counts: c,
        }
    }

    pub fn table_header() -> String {
        format!(
            "{:<24}|{:>8}{:>8}{:>8}{:>8} |{:>8}{:>8}",
            "Model", "P", "R", "F1", "Acc", "UR", "CR"
        )
    }

    pub fn table_row(&self, name: &str) -> String {
        format!(
            "{:<24}|{}{}{}{} |{}{}",
            name,
            pct(self.precision),
            pct(self.recall),
            pct(self.f1),
            pct(self.accuracy),
            pct(self.uncombined_recall),
            pct(self.combined_recall)
        )
    }
}

fn pct(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:>8.2}", 100.0 * x),
        None => format!("{:>8}", "-"),
    }
}

fn check_grid(gold: &Grid, pred: &Grid, what: &str) -> Result<()> {
    if gold.len() != pred.len() || gold.iter().zip(pred).any(|(g, p)| g.len() != p.len()) {
        return Err(Error::Shape(format!(
            "{what}: prediction grid does not match gold"
        )));
    }
    Ok(())
}

/// Presence metrics over every `(entity, step)` cell of every process.
pub fn score_recipes(gold: &[RecipesGold], pred: &[Grid]) -> Result<RecipesReport> {
    if gold.len() != pred.len() {
        return Err(Error::Shape(format!(
            "{} gold processes, {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let mut c = RecipesCounts::default();
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        check_grid(&g.labels, p, &format!("process {i}"))?;
        for (e, (gl, pl)) in g.labels.iter().zip(p).enumerate() {
            let flags = g.combined.get(e).and_then(Option::as_ref);
            if flags.is_some_and(|f| f.len() != gl.len()) {
                return Err(Error::Shape(format!(
                    "process {i} entity {e}: combined flag length"
                )));
            }
            for (t, (&gold_bit, &pred_bit)) in gl.iter().zip(pl).enumerate() {
                match (gold_bit, pred_bit) {
                    (true, true) => c.tp += 1,
                    (false, true) => c.fp += 1,
                    (true, false) => c.fn_ += 1,
                    (false, false) => c.tn += 1,
                }
                if gold_bit {
                    match flags.map(|f| f[t]) {
                        Some(true) => {
                            c.combined_positive += 1;
                            c.combined_tp += usize::from(pred_bit);
                        }
                        Some(false) => {
                            c.uncombined_positive += 1;
                            c.uncombined_tp += usize::from(pred_bit);
                        }
                        None => {}
                    }
                }
            }
        }
    }
    Ok(RecipesReport::from_counts(c))
}

/// A state-change event asked about by Cat-1 and Cat-2 queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Event {
    Create,
    Move,
    Destroy,
}

impl Event {
    pub const ALL: [Event; 3] = [Event::Create, Event::Move, Event::Destroy];

    pub fn tag(self) -> SurfaceTag {
        match self {
            Event::Create => SurfaceTag::C,
            Event::Move => SurfaceTag::M,
            Event::Destroy => SurfaceTag::D,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryCounts {
    pub correct: usize,
    pub total: usize,
}

impl QueryCounts {
    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.correct, self.total)
    }

    fn add(&mut self, correct: bool) {
        self.total += 1;
        self.correct += usize::from(correct);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerEvent {
    pub create: QueryCounts,
    #[serde(rename = "move")]
    pub move_: QueryCounts,
    pub destroy: QueryCounts,
}

impl PerEvent {
    fn get_mut(&mut self, e: Event) -> &mut QueryCounts {
        match e {
            Event::Create => &mut self.create,
            Event::Move => &mut self.move_,
            Event::Destroy => &mut self.destroy,
        }
    }

    pub fn get(&self, e: Event) -> QueryCounts {
        match e {
            Event::Create => self.create,
            Event::Move => self.move_,
            Event::Destroy => self.destroy,
        }
    }

    pub fn total(&self) -> QueryCounts {
        Event::ALL.iter().fold(QueryCounts::default(), |acc, &e| {
            let c = self.get(e);
            QueryCounts {
                correct: acc.correct + c.correct,
                total: acc.total + c.total,
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProParaReport {
    pub cat1: Option<f64>,
    pub cat2: Option<f64>,
    /// Mean of Cat-1 and Cat-2 accuracy.
    pub macro_avg: Option<f64>,
    /// Accuracy over the pooled Cat-1 and Cat-2 queries.
    pub micro_avg: Option<f64>,
    pub cat1_by_event: PerEvent,
    pub cat2_by_event: PerEvent,
}

impl ProParaReport {
    pub fn table(&self, name: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<24}|{:>8}{:>8} |{:>8}{:>8}",
            "Model", "Cat-1", "Cat-2", "Ma-Avg", "Mi-Avg"
        );
        let _ = writeln!(
            s,
            "{:<24}|{}{} |{}{}",
            name,
            pct(self.cat1),
            pct(self.cat2),
            pct(self.macro_avg),
            pct(self.micro_avg)
        );
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<24}|{:>8}{:>8}{:>8} |{:>8}{:>8}{:>8}",
            "", "C1:C", "C1:M", "C1:D", "C2:C", "C2:M", "C2:D"
        );
        let row = |p: &PerEvent| {
            Event::ALL
                .iter()
                .map(|&e| pct(p.get(e).accuracy()))
                .collect::<String>()
        };
        let _ = writeln!(
            s,
            "{:<24}|{} |{}",
            name,
            row(&self.cat1_by_event),
            row(&self.cat2_by_event)
        );
        s
    }
}

/// Cat-1/Cat-2 scoring of per-entity tag sequences.
///
/// Cat-1 asks, per entity and event, whether the event happens at all.
/// Cat-2 is asked only when the gold sequence contains the event and is
/// correct iff the predicted step set equals the gold step set exactly.
pub fn score_propara(gold: &[Vec<SurfaceTag>], pred: &[Vec<SurfaceTag>]) -> Result<ProParaReport> {
    if gold.len() != pred.len() {
        return Err(Error::Shape(format!(
            "{} gold sequences, {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let mut cat1 = PerEvent::default();
    let mut cat2 = PerEvent::default();
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(Error::Shape(format!(
                "sequence {i}: gold length {} vs predicted {}",
                g.len(),
                p.len()
            )));
        }
        for e in Event::ALL {
            let steps = |seq: &[SurfaceTag]| -> Vec<usize> {
                seq.iter()
                    .enumerate()
                    .filter(|(_, &t)| t == e.tag())
                    .map(|(i, _)| i)
                    .collect()
            };
            let gs = steps(g);
            let ps = steps(p);
            cat1.get_mut(e).add(gs.is_empty() == ps.is_empty());
            if !gs.is_empty() {
                cat2.get_mut(e).add(gs == ps);
            }
        }
    }
    let c1 = cat1.total();
    let c2 = cat2.total();
    let cat1_acc = c1.accuracy();
    let cat2_acc = c2.accuracy();
    Ok(ProParaReport {
        cat1: cat1_acc,
        cat2: cat2_acc,
        macro_avg: match (cat1_acc, cat2_acc) {
            (Some(a), Some(b)) => Some((a + b) / 2.0),
            _ => None,
        },
        micro_avg: ratio(c1.correct + c2.correct, c1.total + c2.total),
        cat1_by_event: cat1,
        cat2_by_event: cat2,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BigramHistogram {
    #[serde(rename = "0->0")]
    pub zero_zero: usize,
    #[serde(rename = "0->1")]
    pub zero_one: usize,
    #[serde(rename = "1->0")]
    pub one_zero: usize,
    #[serde(rename = "1->1")]
    pub one_one: usize,
}

impl BigramHistogram {
    fn add(&mut self, prev: bool, cur: bool) {
        match (prev, cur) {
            (false, false) => self.zero_zero += 1,
            (false, true) => self.zero_one += 1,
            (true, false) => self.one_zero += 1,
            (true, true) => self.one_one += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.zero_zero + self.zero_one + self.one_zero + self.one_one
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceReport {
    /// Predicted bigrams over gold `0 -> 1` transitions into a combined step.
    pub composition_histogram: BigramHistogram,
    pub composition_accuracy: Option<f64>,
    /// Gold-present, uncombined cells where the entity is not matched in the step.
    pub hypernymy_cases: usize,
    pub hypernymy_correct: usize,
    pub hypernymy_recall: Option<f64>,
}

impl SliceReport {
    pub fn table(&self) -> String {
        let h = &self.composition_histogram;
        format!(
            "{:<24}|{:>8}{:>8}{:>8}{:>8} |{:>8}\n{:<24}|{:>8}{:>8}{:>8}{:>8} |{}\nhypernymy: {} / {} recall{}\n",
            "",
            "0->0",
            "0->1",
            "1->0",
            "1->1",
            "Acc",
            "#preds",
            h.zero_zero,
            h.zero_one,
            h.one_zero,
            h.one_one,
            pct(self.composition_accuracy),
            self.hypernymy_correct,
            self.hypernymy_cases,
            pct(self.hypernymy_recall)
        )
    }
}

/// Intermediate-composition and hypernymy slices of a Recipes evaluation.
pub fn slice_challenges(
    gold: &[RecipesGold],
    pred: &[Grid],
    corpus: &[Process],
) -> Result<SliceReport> {
    if gold.len() != pred.len() || gold.len() != corpus.len() {
        return Err(Error::Shape(
            "gold, predictions and corpus differ in length".into(),
        ));
    }
    let mut hist = BigramHistogram::default();
    let (mut hyp_cases, mut hyp_correct) = (0usize, 0usize);
    for ((g, p), proc_) in gold.iter().zip(pred).zip(corpus) {
        if proc_.task != TaskKind::Recipes {
            return Err(Error::Validation(format!(
                "process `{}` is not a recipe",
                proc_.id
            )));
        }
        check_grid(&g.labels, p, &proc_.id)?;
        for (e, (gl, pl)) in g.labels.iter().zip(p).enumerate() {
            let flags = g.combined.get(e).and_then(Option::as_ref).ok_or_else(|| {
                Error::Validation(format!(
                    "process `{}` entity {e} has no combined flags",
                    proc_.id
                ))
            })?;
            for t in 0..gl.len() {
                if t > 0 && !gl[t - 1] && gl[t] && flags[t] {
                    hist.add(pl[t - 1], pl[t]);
                }
                if gl[t] && !flags[t] && !matches(&proc_.entities[e], &proc_.steps[t]) {
                    hyp_cases += 1;
                    hyp_correct += usize::from(pl[t]);
                }
            }
        }
    }
    Ok(SliceReport {
        composition_accuracy: ratio(hist.zero_one, hist.total()),
        composition_histogram: hist,
        hypernymy_cases: hyp_cases,
        hypernymy_correct: hyp_correct,
        hypernymy_recall: ratio(hyp_correct, hyp_cases),
    })
}
