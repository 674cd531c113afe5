//! Deterministic synthetic corpora with known label rules.
//!
//! Recipes: every process has four steps `"<verb> the <object> [adverb]"`
//! and two entities, one from each group. A step verb belongs to group A or
//! B, and an entity is present at a step iff its group matches the verb's
//! group, so the label is the XOR-like agreement of entity and verb. Each
//! process has exactly two verbs of each group, which balances the four
//! (entity group, verb group) cells. Objects are drawn independently of the
//! labels, so mentions carry no signal.
//!
//! ProPara: two entities per five-step process, each with a random valid
//! lifecycle; a step mentions every entity whose state changes there, with
//! an event-specific verb.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{EntityTrack, Labels, Process, Step, TaskKind};
use crate::crf::SurfaceTag;

pub const GROUP_A_ENTITIES: [&str; 4] = ["butter", "sugar", "flour", "salt"];
pub const GROUP_B_ENTITIES: [&str; 4] = ["carrot", "onion", "potato", "garlic"];
pub const GROUP_A_VERBS: [&str; 4] = ["whisk", "sift", "cream", "melt"];
pub const GROUP_B_VERBS: [&str; 4] = ["chop", "dice", "peel", "mince"];
pub const FILLER_NOUNS: [&str; 4] = ["bowl", "pan", "oven", "spoon"];
pub const ADVERBS: [&str; 3] = ["gently", "quickly", "well"];

pub const RECIPE_STEPS: usize = 4;

/// True for the verbs that determine synthetic recipe labels.
pub fn is_label_verb(token: &str) -> bool {
    GROUP_A_VERBS.contains(&token) || GROUP_B_VERBS.contains(&token)
}

/// Synthetic Recipes corpus. With `entity_blind`, presence ignores the
/// entity: both entities are present exactly at the group-A verb steps.
pub fn synthetic_recipes(num_processes: usize, seed: u64, entity_blind: bool) -> Vec<Process> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num_processes)
        .map(|i| {
            let ea = *GROUP_A_ENTITIES.choose(&mut rng).expect("non-empty");
            let eb = *GROUP_B_ENTITIES.choose(&mut rng).expect("non-empty");
            let mut entities = [(ea, true), (eb, false)];
            entities.shuffle(&mut rng);

            let mut verbs: Vec<(&str, bool)> = GROUP_A_VERBS
                .choose_multiple(&mut rng, 2)
                .map(|&v| (v, true))
                .chain(
                    GROUP_B_VERBS
                        .choose_multiple(&mut rng, 2)
                        .map(|&v| (v, false)),
                )
                .collect();
            verbs.shuffle(&mut rng);

            let objects: Vec<&str> = [ea, eb].into_iter().chain(FILLER_NOUNS).collect();
            let mut steps = Vec::with_capacity(RECIPE_STEPS);
            let mut mentions = Vec::with_capacity(RECIPE_STEPS);
            for &(verb, _) in &verbs {
                let object = *objects.choose(&mut rng).expect("non-empty");
                let mut words = vec![(verb, "V"), ("the", "DT"), (object, "N")];
                if rng.random_bool(0.5) {
                    words.push((*ADVERBS.choose(&mut rng).expect("non-empty"), "RB"));
                }
                mentions.push(object);
                steps.push(
                    Step::from_tokens(words.iter().map(|w| w.0.to_string()).collect())
                        .with_pos(words.iter().map(|w| w.1.to_string()).collect()),
                );
            }

            let tracks = entities
                .iter()
                .map(|&(name, group_a)| {
                    let labels: Vec<bool> = verbs
                        .iter()
                        .map(|&(_, verb_a)| {
                            if entity_blind {
                                verb_a
                            } else {
                                verb_a == group_a
                            }
                        })
                        .collect();
                    let combined = labels
                        .iter()
                        .zip(&mentions)
                        .map(|(&l, &m)| l && m != name)
                        .collect();
                    EntityTrack::new(name, Labels::Presence(labels), Some(combined))
                })
                .collect();
            Process {
                id: format!("syn-r{i:04}"),
                task: TaskKind::Recipes,
                steps,
                entities: tracks,
            }
        })
        .collect()
}

pub const PROPARA_ENTITIES: [&str; 8] = [
    "water", "ice", "vapor", "seed", "plant", "rock", "soil", "cloud",
];
pub const CREATE_VERBS: [&str; 2] = ["forms", "appears"];
pub const MOVE_VERBS: [&str; 2] = ["flows", "drifts"];
pub const DESTROY_VERBS: [&str; 2] = ["melts", "vanishes"];
const NEUTRAL_STEPS: [&[(&str, &str)]; 2] = [
    &[("the", "DT"), ("sun", "N"), ("shines", "V")],
    &[("time", "N"), ("passes", "V")],
];

pub const PROPARA_STEPS: usize = 5;

fn lifecycle(rng: &mut ChaCha8Rng, t_len: usize) -> Vec<SurfaceTag> {
    loop {
        let create = rng.random_bool(0.5).then(|| rng.random_range(0..t_len));
        let destroy = rng.random_bool(0.5).then(|| rng.random_range(0..t_len));
        let moved = rng.random_bool(0.5).then(|| rng.random_range(0..t_len));
        let c = create.map_or(-1, |c| c as i64);
        let d = destroy.map_or(t_len as i64, |d| d as i64);
        if c >= d || moved.is_some_and(|m| (m as i64) <= c || (m as i64) >= d) {
            continue;
        }
        if create.is_none() && destroy.is_none() && moved.is_none() {
            continue;
        }
        return (0..t_len as i64)
            .map(|t| match t {
                t if t < c || t > d => SurfaceTag::O,
                t if t == c => SurfaceTag::C,
                t if t == d => SurfaceTag::D,
                t if Some(t) == moved.map(|m| m as i64) => SurfaceTag::M,
                _ => SurfaceTag::E,
            })
            .collect();
    }
}

fn is_event(t: SurfaceTag) -> bool {
    matches!(t, SurfaceTag::C | SurfaceTag::M | SurfaceTag::D)
}

/// Synthetic ProPara corpus of valid lifecycles.
pub fn synthetic_propara(num_processes: usize, seed: u64) -> Vec<Process> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num_processes)
        .map(|i| {
            let names: Vec<&str> = PROPARA_ENTITIES
                .choose_multiple(&mut rng, 2)
                .copied()
                .collect();
            let (a, b) = loop {
                let a = lifecycle(&mut rng, PROPARA_STEPS);
                let b = lifecycle(&mut rng, PROPARA_STEPS);
                if a.iter()
                    .zip(&b)
                    .all(|(&x, &y)| !(is_event(x) && is_event(y)))
                {
                    break (a, b);
                }
            };
            let steps = (0..PROPARA_STEPS)
                .map(|t| {
                    let event = [(names[0], a[t]), (names[1], b[t])]
                        .into_iter()
                        .find(|(_, tag)| is_event(*tag));
                    let words: Vec<(&str, &str)> = match event {
                        Some((name, tag)) => {
                            let pool = match tag {
                                SurfaceTag::C => CREATE_VERBS,
                                SurfaceTag::M => MOVE_VERBS,
                                _ => DESTROY_VERBS,
                            };
                            vec![
                                ("the", "DT"),
                                (name, "N"),
                                (*pool.choose(&mut rng).expect("non-empty"), "V"),
                            ]
                        }
                        None => NEUTRAL_STEPS.choose(&mut rng).expect("non-empty").to_vec(),
                    };
                    Step::from_tokens(words.iter().map(|w| w.0.to_string()).collect())
                        .with_pos(words.iter().map(|w| w.1.to_string()).collect())
                })
                .collect();
            Process {
                id: format!("syn-p{i:04}"),
                task: TaskKind::ProPara,
                steps,
                entities: vec![
                    EntityTrack::new(names[0], Labels::Tags(a), None),
                    EntityTrack::new(names[1], Labels::Tags(b), None),
                ],
            }
        })
        .collect()
}
