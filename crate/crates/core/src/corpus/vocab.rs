use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Process;
use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const START: &str = "[START]";
pub const SEP: &str = "[SEP]";
pub const CLS: &str = "[CLS]";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const START_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const CLS_ID: usize = 4;

pub const SPECIALS: [&str; 5] = [PAD, UNK, START, SEP, CLS];

/// Token inventory with the five special tokens at fixed ids 0..=4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl Vocabulary {
    /// A vocabulary holding only the special tokens.
    pub fn specials_only() -> Self {
        Self::from_tokens(Vec::<String>::new())
    }

    /// Builds a vocabulary from non-special tokens, in id order starting at 5.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut id_to_token: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut token_to_id: HashMap<String, usize> = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        for token in tokens {
            let token = token.into();
            if token_to_id.contains_key(&token) {
                continue;
            }
            token_to_id.insert(token.clone(), id_to_token.len());
            id_to_token.push(token);
        }
        Self {
            token_to_id,
            id_to_token,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    /// Id of `token` after case normalization, falling back to UNK.
    pub fn id(&self, token: &str) -> usize {
        if let Some(&id) = self.token_to_id.get(token) {
            return id;
        }
        self.token_to_id
            .get(&token.to_lowercase())
            .copied()
            .unwrap_or(UNK_ID)
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Renders ids as a space-separated token string.
    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = VocabFile {
            tokens: self.id_to_token[SPECIALS.len()..].to_vec(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: VocabFile = serde_json::from_slice(&std::fs::read(path)?)?;
        if let Some(t) = file.tokens.iter().find(|t| SPECIALS.contains(&t.as_str())) {
            return Err(Error::Validation(format!(
                "vocabulary file lists special token {t} outside the reserved range"
            )));
        }
        Ok(Self::from_tokens(file.tokens))
    }
}

/// Builds a vocabulary from every step token and entity-name token.
///
/// Tokens are lowercased, kept when their frequency is at least
/// `min_count`, and numbered by descending frequency then lexicographically.
pub fn build_vocab(corpora: &[Process], min_count: usize) -> Vocabulary {
    let step_tokens = corpora
        .iter()
        .flat_map(|p| p.steps.iter().flat_map(|s| s.tokens.iter()));
    let entity_tokens = corpora
        .iter()
        .flat_map(|p| p.entities.iter().flat_map(|e| e.name_tokens.iter()));
    vocab_from_tokens(step_tokens.chain(entity_tokens), min_count)
}

/// [`build_vocab`] over a bare token stream.
pub fn vocab_from_tokens<I, S>(tokens: I, min_count: usize) -> Vocabulary
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let min_count = min_count.max(1);
    let mut counts: HashMap<String, usize> = HashMap::new();
    for token in tokens {
        *counts.entry(token.as_ref().to_lowercase()).or_default() += 1;
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_count && !SPECIALS.contains(&t.as_str()))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{EntityTrack, Labels, Step, TaskKind};

    fn process(tokens: &[&str]) -> Process {
        Process {
            id: "p".into(),
            task: TaskKind::Recipes,
            steps: vec![Step::from_tokens(
                tokens.iter().map(|s| s.to_string()).collect(),
            )],
            entities: vec![],
        }
    }

    #[test]
    fn specials_are_reserved() {
        let v = Vocabulary::specials_only();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id(PAD), PAD_ID);
        assert_eq!(v.id(UNK), UNK_ID);
        assert_eq!(v.id(START), START_ID);
        assert_eq!(v.id(SEP), SEP_ID);
        assert_eq!(v.id(CLS), CLS_ID);
        assert_eq!(v.id("anything"), UNK_ID);
    }

    #[test]
    fn min_count_filters() {
        let v = build_vocab(&[process(&["a", "b", "a", "a"])], 2);
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("b"), UNK_ID);
    }

    #[test]
    fn empty_corpus_gives_specials() {
        assert_eq!(build_vocab(&[], 1), Vocabulary::specials_only());
    }

    #[test]
    fn ordering_is_frequency_then_lexicographic() {
        let v = build_vocab(&[process(&["z", "y", "x", "y", "z"])], 1);
        assert_eq!(&v.tokens()[5..], ["y", "z", "x"]);
    }

    #[test]
    fn entity_tokens_are_counted_and_lowercased() {
        let mut p = process(&["Melt", "butter"]);
        p.entities.push(EntityTrack::new(
            "Butter",
            Labels::Presence(vec![true]),
            None,
        ));
        let v = build_vocab(&[p], 2);
        assert_eq!(&v.tokens()[5..], ["butter"]);
        assert_eq!(v.id("BUTTER"), 5);
    }

    #[test]
    fn repeated_build_is_identical() {
        let corpus = vec![process(&["c", "a", "b", "a", "c", "d"])];
        assert_eq!(build_vocab(&corpus, 1), build_vocab(&corpus, 1));
    }

    #[test]
    fn save_load_round_trip() {
        let v = build_vocab(&[process(&["mix", "the", "the"])], 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(v, loaded);
        assert_eq!(loaded.id(CLS), CLS_ID);
    }
}
