//! Constrained linear-chain CRF over entity state-change tags.
//!
//! Surface tags `O C E M D` are expanded to six lattice states by splitting
//! `O` into "not yet existing" (`O_B`) and "destroyed" (`O_A`). With that
//! split the existence cycle becomes a first-order constraint:
//!
//! ```text
//! O_B -> {O_B, C}     C -> {E, M, D}     E, M -> {E, M, D}
//! D   -> {O_A}        O_A -> {O_A}
//! start: {O_B, C, E, M, D}               end: any
//! ```
//!
//! Invalid transitions score `-inf` in training and decoding alike.

use std::fmt;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};

/// Number of expanded lattice states.
pub const NUM_TAGS: usize = 6;
/// Number of surface tags.
pub const NUM_SURFACE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SurfaceTag {
    O,
    C,
    E,
    M,
    D,
}

impl SurfaceTag {
    pub const ALL: [SurfaceTag; NUM_SURFACE] = [
        SurfaceTag::O,
        SurfaceTag::C,
        SurfaceTag::E,
        SurfaceTag::M,
        SurfaceTag::D,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "O" => Some(SurfaceTag::O),
            "C" => Some(SurfaceTag::C),
            "E" => Some(SurfaceTag::E),
            "M" => Some(SurfaceTag::M),
            "D" => Some(SurfaceTag::D),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SurfaceTag::O => "O",
            SurfaceTag::C => "C",
            SurfaceTag::E => "E",
            SurfaceTag::M => "M",
            SurfaceTag::D => "D",
        }
    }
}

impl fmt::Display for SurfaceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExpandedTag {
    OBefore,
    Create,
    Exist,
    Move,
    Destroy,
    OAfter,
}

impl ExpandedTag {
    pub const ALL: [ExpandedTag; NUM_TAGS] = [
        ExpandedTag::OBefore,
        ExpandedTag::Create,
        ExpandedTag::Exist,
        ExpandedTag::Move,
        ExpandedTag::Destroy,
        ExpandedTag::OAfter,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    pub fn collapse(self) -> SurfaceTag {
        match self {
            ExpandedTag::OBefore | ExpandedTag::OAfter => SurfaceTag::O,
            ExpandedTag::Create => SurfaceTag::C,
            ExpandedTag::Exist => SurfaceTag::E,
            ExpandedTag::Move => SurfaceTag::M,
            ExpandedTag::Destroy => SurfaceTag::D,
        }
    }
}

/// Transition validity plus start/end validity over the expanded tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TagSet {
    pub allowed: [[bool; NUM_TAGS]; NUM_TAGS],
    pub start: [bool; NUM_TAGS],
    pub end: [bool; NUM_TAGS],
}

impl TagSet {
    /// The existence-cycle mask.
    pub fn lifecycle() -> Self {
        use ExpandedTag::*;
        let successors: [(ExpandedTag, &[ExpandedTag]); NUM_TAGS] = [
            (OBefore, &[OBefore, Create]),
            (Create, &[Exist, Move, Destroy]),
            (Exist, &[Exist, Move, Destroy]),
            (Move, &[Exist, Move, Destroy]),
            (Destroy, &[OAfter]),
            (OAfter, &[OAfter]),
        ];
        let mut allowed = [[false; NUM_TAGS]; NUM_TAGS];
        for (from, tos) in successors {
            for to in tos {
                allowed[from.index()][to.index()] = true;
            }
        }
        let mut start = [true; NUM_TAGS];
        start[OAfter.index()] = false;
        Self {
            allowed,
            start,
            end: [true; NUM_TAGS],
        }
    }

    pub fn allows(&self, from: ExpandedTag, to: ExpandedTag) -> bool {
        self.allowed[from.index()][to.index()]
    }

    /// Whether an expanded path is feasible under this mask.
    pub fn is_valid_path(&self, path: &[ExpandedTag]) -> bool {
        match (path.first(), path.last()) {
            (Some(first), Some(last)) => {
                self.start[first.index()]
                    && self.end[last.index()]
                    && path.windows(2).all(|w| self.allows(w[0], w[1]))
            }
            _ => false,
        }
    }
}

impl Default for TagSet {
    fn default() -> Self {
        Self::lifecycle()
    }
}

/// Why a gold surface sequence cannot be mapped onto the lifecycle.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LifecycleViolation {
    #[error("empty tag sequence")]
    Empty,
    #[error("step {step}: created after destruction")]
    CreatedAfterDestruction { step: usize },
    #[error("step {step}: created while already existing")]
    CreatedWhileExisting { step: usize },
    #[error("step {step}: {tag} after destruction")]
    ActiveAfterDestruction { step: usize, tag: SurfaceTag },
    #[error("step {step}: {tag} before creation")]
    ActiveBeforeCreation { step: usize, tag: SurfaceTag },
    #[error("step {step}: vanished without being destroyed")]
    VanishedWithoutDestruction { step: usize },
}

/// Maps gold surface tags onto expanded tags, rejecting lifecycle
/// violations. Surface `O` becomes `O_B` before the first `C/E/M/D` and
/// `O_A` after a `D`.
pub fn expand_gold(
    tags: &[SurfaceTag],
) -> std::result::Result<Vec<ExpandedTag>, LifecycleViolation> {
    #[derive(PartialEq)]
    enum Phase {
        Before,
        Alive,
        Gone,
    }
    if tags.is_empty() {
        return Err(LifecycleViolation::Empty);
    }
    let mut phase = Phase::Before;
    let mut out = Vec::with_capacity(tags.len());
    for (i, &tag) in tags.iter().enumerate() {
        let step = i + 1;
        let expanded = match (tag, &phase) {
            (SurfaceTag::O, Phase::Before) => ExpandedTag::OBefore,
            (SurfaceTag::O, Phase::Gone) => ExpandedTag::OAfter,
            (SurfaceTag::O, Phase::Alive) => {
                return Err(LifecycleViolation::VanishedWithoutDestruction { step })
            }
            (SurfaceTag::C, Phase::Before) => ExpandedTag::Create,
            (SurfaceTag::C, Phase::Alive) => {
                return Err(LifecycleViolation::CreatedWhileExisting { step })
            }
            (SurfaceTag::C, Phase::Gone) => {
                return Err(LifecycleViolation::CreatedAfterDestruction { step })
            }
            (_, Phase::Gone) => {
                return Err(LifecycleViolation::ActiveAfterDestruction { step, tag })
            }
            // An entity may exist before the process starts, but not appear
            // later without a creation event.
            (_, Phase::Before) if i > 0 => {
                return Err(LifecycleViolation::ActiveBeforeCreation { step, tag })
            }
            (SurfaceTag::E, _) => ExpandedTag::Exist,
            (SurfaceTag::M, _) => ExpandedTag::Move,
            (SurfaceTag::D, _) => ExpandedTag::Destroy,
        };
        phase = match expanded {
            ExpandedTag::OBefore => Phase::Before,
            ExpandedTag::Destroy | ExpandedTag::OAfter => Phase::Gone,
            _ => Phase::Alive,
        };
        out.push(expanded);
    }
    Ok(out)
}

/// Emission potentials and transition scores for one entity's sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TagLattice {
    /// `T x 6` potentials over expanded tags.
    pub potentials: Array2<f64>,
    /// `6 x 6` learned transition scores; masked entries are ignored.
    pub transitions: Array2<f64>,
    pub mask: TagSet,
}

impl TagLattice {
    pub fn new(potentials: Array2<f64>, transitions: Array2<f64>) -> Result<Self> {
        if potentials.ncols() != NUM_TAGS || potentials.nrows() == 0 {
            return Err(Error::Shape(format!(
                "lattice potentials must be T x {NUM_TAGS} with T >= 1, got {:?}",
                potentials.dim()
            )));
        }
        if transitions.dim() != (NUM_TAGS, NUM_TAGS) {
            return Err(Error::Shape(format!(
                "transition scores must be {NUM_TAGS} x {NUM_TAGS}, got {:?}",
                transitions.dim()
            )));
        }
        Ok(Self {
            potentials,
            transitions,
            mask: TagSet::lifecycle(),
        })
    }

    /// Builds a lattice from `T x 5` surface potentials; `O_B` and `O_A`
    /// share the surface `O` score.
    pub fn from_surface(surface: ArrayView2<f64>, transitions: Array2<f64>) -> Result<Self> {
        if surface.ncols() != NUM_SURFACE {
            return Err(Error::Shape(format!(
                "surface potentials must have {NUM_SURFACE} columns, got {}",
                surface.ncols()
            )));
        }
        let potentials = Array2::from_shape_fn((surface.nrows(), NUM_TAGS), |(t, k)| {
            surface[[t, ExpandedTag::from_index(k).collapse().index()]]
        });
        Self::new(potentials, transitions)
    }

    pub fn len(&self) -> usize {
        self.potentials.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Effective transition score, `-inf` when masked.
    pub fn transition(&self, from: usize, to: usize) -> f64 {
        if self.mask.allowed[from][to] {
            self.transitions[[from, to]]
        } else {
            f64::NEG_INFINITY
        }
    }

    fn start_score(&self, k: usize) -> f64 {
        if self.mask.start[k] {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }

    fn end_score(&self, k: usize) -> f64 {
        if self.mask.end[k] {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }

    /// Total potential plus transition score of an expanded path, `-inf`
    /// for infeasible paths.
    pub fn path_score(&self, path: &[ExpandedTag]) -> f64 {
        if path.len() != self.len() || !self.mask.is_valid_path(path) {
            return f64::NEG_INFINITY;
        }
        let emissions: f64 = path
            .iter()
            .enumerate()
            .map(|(t, k)| self.potentials[[t, k.index()]])
            .sum();
        let transitions: f64 = path
            .windows(2)
            .map(|w| self.transitions[[w[0].index(), w[1].index()]])
            .sum();
        emissions + transitions
    }

    fn forward(&self) -> Array2<f64> {
        let t_len = self.len();
        let mut alpha = Array2::from_elem((t_len, NUM_TAGS), f64::NEG_INFINITY);
        for k in 0..NUM_TAGS {
            alpha[[0, k]] = self.start_score(k) + self.potentials[[0, k]];
        }
        let mut terms = [0.0; NUM_TAGS];
        for t in 1..t_len {
            for j in 0..NUM_TAGS {
                for (i, term) in terms.iter_mut().enumerate() {
                    *term = alpha[[t - 1, i]] + self.transition(i, j);
                }
                alpha[[t, j]] = log_sum_exp(&terms) + self.potentials[[t, j]];
            }
        }
        alpha
    }

    fn backward(&self) -> Array2<f64> {
        let t_len = self.len();
        let mut beta = Array2::from_elem((t_len, NUM_TAGS), f64::NEG_INFINITY);
        for k in 0..NUM_TAGS {
            beta[[t_len - 1, k]] = self.end_score(k);
        }
        let mut terms = [0.0; NUM_TAGS];
        for t in (0..t_len - 1).rev() {
            for i in 0..NUM_TAGS {
                for (j, term) in terms.iter_mut().enumerate() {
                    *term = self.transition(i, j) + self.potentials[[t + 1, j]] + beta[[t + 1, j]];
                }
                beta[[t, i]] = log_sum_exp(&terms);
            }
        }
        beta
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Result of Viterbi decoding.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Decoded {
    pub tags: Vec<SurfaceTag>,
    pub path: Vec<ExpandedTag>,
    pub score: f64,
}

/// Highest-scoring feasible path; ties go to the lowest expanded index.
pub fn viterbi(lattice: &TagLattice) -> Decoded {
    let t_len = lattice.len();
    let mut delta = Array2::from_elem((t_len, NUM_TAGS), f64::NEG_INFINITY);
    let mut backptr = Array2::<usize>::zeros((t_len, NUM_TAGS));
    for k in 0..NUM_TAGS {
        delta[[0, k]] = lattice.start_score(k) + lattice.potentials[[0, k]];
    }
    for t in 1..t_len {
        for j in 0..NUM_TAGS {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for i in 0..NUM_TAGS {
                let s = delta[[t - 1, i]] + lattice.transition(i, j);
                if s > best {
                    best = s;
                    arg = i;
                }
            }
            delta[[t, j]] = best + lattice.potentials[[t, j]];
            backptr[[t, j]] = arg;
        }
    }
    let mut best = f64::NEG_INFINITY;
    let mut last = 0;
    for k in 0..NUM_TAGS {
        let s = delta[[t_len - 1, k]] + lattice.end_score(k);
        if s > best {
            best = s;
            last = k;
        }
    }
    let mut idx = vec![0usize; t_len];
    idx[t_len - 1] = last;
    for t in (1..t_len).rev() {
        idx[t - 1] = backptr[[t, idx[t]]];
    }
    let path: Vec<ExpandedTag> = idx.into_iter().map(ExpandedTag::from_index).collect();
    Decoded {
        tags: path.iter().map(|k| k.collapse()).collect(),
        path,
        score: best,
    }
}

/// Log of the sum over feasible paths of `exp(score)`.
pub fn log_partition(lattice: &TagLattice) -> f64 {
    let alpha = lattice.forward();
    let t = lattice.len() - 1;
    let terms: Vec<f64> = (0..NUM_TAGS)
        .map(|k| alpha[[t, k]] + lattice.end_score(k))
        .collect();
    log_sum_exp(&terms)
}

/// Posterior marginals from forward-backward.
#[derive(Debug, Clone)]
pub struct Marginals {
    /// `T x 6` per-step tag marginals.
    pub unary: Array2<f64>,
    /// `6 x 6` expected transition counts summed over steps.
    pub pairwise: Array2<f64>,
    pub log_z: f64,
}

pub fn marginals(lattice: &TagLattice) -> Marginals {
    let alpha = lattice.forward();
    let beta = lattice.backward();
    let t_len = lattice.len();
    let log_z = log_partition(lattice);
    let unary = Array2::from_shape_fn((t_len, NUM_TAGS), |(t, k)| {
        (alpha[[t, k]] + beta[[t, k]] - log_z).exp()
    });
    let mut pairwise = Array2::zeros((NUM_TAGS, NUM_TAGS));
    for t in 1..t_len {
        for i in 0..NUM_TAGS {
            for j in 0..NUM_TAGS {
                let lp = alpha[[t - 1, i]]
                    + lattice.transition(i, j)
                    + lattice.potentials[[t, j]]
                    + beta[[t, j]]
                    - log_z;
                pairwise[[i, j]] += lp.exp();
            }
        }
    }
    Marginals {
        unary,
        pairwise,
        log_z,
    }
}

/// Negative log-likelihood of a gold sequence and its exact gradients.
#[derive(Debug, Clone)]
pub struct NllOutput {
    pub loss: f64,
    /// `T x 6` gradient with respect to the lattice potentials.
    pub d_potentials: Array2<f64>,
    /// `6 x 6` gradient with respect to the transition scores.
    pub d_transitions: Array2<f64>,
}

pub fn nll_loss(lattice: &TagLattice, gold: &[SurfaceTag]) -> Result<NllOutput> {
    if gold.len() != lattice.len() {
        return Err(Error::Shape(format!(
            "gold has {} tags, lattice has {} steps",
            gold.len(),
            lattice.len()
        )));
    }
    let path = expand_gold(gold).map_err(|e| Error::InfeasibleGold(e.to_string()))?;
    if !lattice.mask.is_valid_path(&path) {
        return Err(Error::InfeasibleGold(format!("{gold:?}")));
    }
    let m = marginals(lattice);
    let loss = m.log_z - lattice.path_score(&path);
    let mut d_potentials = m.unary;
    for (t, k) in path.iter().enumerate() {
        d_potentials[[t, k.index()]] -= 1.0;
    }
    let mut d_transitions = m.pairwise;
    for w in path.windows(2) {
        d_transitions[[w[0].index(), w[1].index()]] -= 1.0;
    }
    Ok(NllOutput {
        loss,
        d_potentials,
        d_transitions,
    })
}

/// Folds a `T x 6` expanded-tag gradient back onto `T x 5` surface
/// potentials; the surface `O` column receives both `O_B` and `O_A`.
pub fn fold_to_surface(d_expanded: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((d_expanded.nrows(), NUM_SURFACE));
    for ((t, k), &g) in d_expanded.indexed_iter() {
        out[[t, ExpandedTag::from_index(k).collapse().index()]] += g;
    }
    out
}

/// JSON-friendly dump of a lattice and its decode.
#[derive(Debug, Clone, Serialize)]
pub struct LatticeDump {
    pub potentials: Vec<Vec<f64>>,
    pub decoded: Vec<SurfaceTag>,
    pub path: Vec<ExpandedTag>,
    pub score: f64,
}

impl LatticeDump {
    pub fn new(lattice: &TagLattice) -> Self {
        let decoded = viterbi(lattice);
        Self {
            potentials: lattice
                .potentials
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect(),
            decoded: decoded.tags,
            path: decoded.path,
            score: decoded.score,
        }
    }
}
