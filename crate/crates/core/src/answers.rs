//! Collected 2AFC answers and their per-comparison vote tallies.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Choice {
    A,
    B,
}

impl Choice {
    pub fn flipped(self) -> Self {
        match self {
            Choice::A => Choice::B,
            Choice::B => Choice::A,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialKind {
    Trial,
    Control,
    Training,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletAnswer {
    pub reference: String,
    pub option_a: String,
    pub option_b: String,
    pub chosen: Choice,
    pub worker: String,
    pub kind: TrialKind,
    pub timestamp: String,
}

impl TripletAnswer {
    pub fn chosen_material(&self) -> &str {
        match self.chosen {
            Choice::A => &self.option_a,
            Choice::B => &self.option_b,
        }
    }

    pub fn other_material(&self) -> &str {
        match self.chosen {
            Choice::A => &self.option_b,
            Choice::B => &self.option_a,
        }
    }

    pub fn key(&self) -> ComparisonKey {
        ComparisonKey::new(&self.reference, &self.option_a, &self.option_b)
    }

    fn validate(&self) -> Result<()> {
        if self.reference == self.option_a || self.reference == self.option_b || self.option_a == self.option_b {
            return Err(Error::invalid(
                "answer",
                format!(
                    "materials must be pairwise distinct, got ({}, {}, {})",
                    self.reference, self.option_a, self.option_b
                ),
            ));
        }
        Ok(())
    }
}

/// Order-free identity of a comparison: `(r, a, b)` and `(r, b, a)` map to
/// the same key, with the two options stored in sorted order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ComparisonKey {
    pub reference: String,
    pub first: String,
    pub second: String,
}

impl ComparisonKey {
    pub fn new(reference: &str, a: &str, b: &str) -> Self {
        let (first, second) = if a <= b { (a, b) } else { (b, a) };
        Self {
            reference: reference.to_string(),
            first: first.to_string(),
            second: second.to_string(),
        }
    }
}

/// Votes for each option of a comparison key.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tally {
    pub first: u32,
    pub second: u32,
}

impl Tally {
    pub fn total(&self) -> u32 {
        self.first + self.second
    }

    pub fn is_tie(&self) -> bool {
        self.first == self.second
    }
}

/// A comparison together with its tally, as exposed to evaluators.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison<'a> {
    pub key: &'a ComparisonKey,
    pub tally: Tally,
}

impl Comparison<'_> {
    /// The majority-chosen material, or `None` on a tie.
    pub fn majority(&self) -> Option<&str> {
        use std::cmp::Ordering::*;
        match self.tally.first.cmp(&self.tally.second) {
            Greater => Some(&self.key.first),
            Less => Some(&self.key.second),
            Equal => None,
        }
    }

    pub fn votes_for(&self, material: &str) -> u32 {
        if material == self.key.first {
            self.tally.first
        } else if material == self.key.second {
            self.tally.second
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnswerStore {
    answers: Vec<TripletAnswer>,
    index: BTreeMap<ComparisonKey, Tally>,
}

impl AnswerStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_answers(answers: impl IntoIterator<Item = TripletAnswer>) -> Result<Self> {
        let mut store = Self::new();
        for a in answers {
            store.push(a)?;
        }
        Ok(store)
    }

    pub fn push(&mut self, answer: TripletAnswer) -> Result<()> {
        answer.validate()?;
        let key = answer.key();
        let chosen_first = answer.chosen_material() == key.first;
        let tally = self.index.entry(key).or_default();
        if chosen_first {
            tally.first += 1;
        } else {
            tally.second += 1;
        }
        self.answers.push(answer);
        Ok(())
    }

    pub fn extend(&mut self, answers: impl IntoIterator<Item = TripletAnswer>) -> Result<()> {
        for a in answers {
            self.push(a)?;
        }
        Ok(())
    }

    pub fn answers(&self) -> &[TripletAnswer] {
        &self.answers
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn tally(&self, key: &ComparisonKey) -> Option<Tally> {
        self.index.get(key).copied()
    }

    /// Comparisons in key order.
    pub fn comparisons(&self) -> impl Iterator<Item = Comparison<'_>> {
        self.index.iter().map(|(key, &tally)| Comparison { key, tally })
    }

    pub fn n_comparisons(&self) -> usize {
        self.index.len()
    }

    /// Material-level triples `(reference, majority choice, other)`; tied
    /// comparisons have no majority and are skipped.
    pub fn majority_triples(&self) -> Vec<(String, String, String)> {
        self.comparisons()
            .filter_map(|c| {
                let a = c.majority()?;
                let b = if a == c.key.first { &c.key.second } else { &c.key.first };
                Some((c.key.reference.clone(), a.to_string(), b.clone()))
            })
            .collect()
    }

    /// Every material id that appears in any answer, sorted.
    pub fn material_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .index
            .keys()
            .flat_map(|k| [k.reference.clone(), k.first.clone(), k.second.clone()])
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Recomputes the tallies from scratch and compares with the index.
    pub fn tallies_consistent(&self) -> bool {
        let mut fresh = Self::new();
        for a in &self.answers {
            if fresh.push(a.clone()).is_err() {
                return false;
            }
        }
        fresh.index == self.index
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut store = Self::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let answer: TripletAnswer = serde_json::from_str(&line).map_err(|e| Error::Parse {
                location: format!("{}:{}", path.display(), i + 1),
                message: e.to_string(),
            })?;
            store.push(answer).map_err(|e| match e {
                Error::Invalid { message, .. } => Error::Invalid {
                    location: format!("{}:{}", path.display(), i + 1),
                    message,
                },
                other => other,
            })?;
        }
        Ok(store)
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for a in &self.answers {
            let line = serde_json::to_string(a).expect("answer serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ans(r: &str, a: &str, b: &str, chosen: Choice) -> TripletAnswer {
        TripletAnswer {
            reference: r.into(),
            option_a: a.into(),
            option_b: b.into(),
            chosen,
            worker: "w".into(),
            kind: TrialKind::Trial,
            timestamp: "2024-01-01T00:00:00Z".into(),
        }
    }

    #[test]
    fn side_order_does_not_fragment_tallies() {
        let mut store = AnswerStore::new();
        store.push(ans("r", "x", "y", Choice::A)).unwrap();
        store.push(ans("r", "y", "x", Choice::B)).unwrap();
        store.push(ans("r", "y", "x", Choice::A)).unwrap();
        assert_eq!(store.n_comparisons(), 1);
        let t = store.tally(&ComparisonKey::new("r", "x", "y")).unwrap();
        assert_eq!(t, Tally { first: 2, second: 1 });
        assert!(store.tallies_consistent());
        assert_eq!(store.majority_triples(), vec![("r".into(), "x".into(), "y".into())]);
    }

    #[test]
    fn ties_have_no_majority() {
        let store = AnswerStore::from_answers([ans("r", "x", "y", Choice::A), ans("r", "x", "y", Choice::B)]).unwrap();
        assert!(store.majority_triples().is_empty());
    }

    #[test]
    fn rejects_repeated_materials() {
        let mut store = AnswerStore::new();
        assert!(store.push(ans("r", "r", "y", Choice::A)).is_err());
        assert!(store.push(ans("r", "y", "y", Choice::A)).is_err());
        assert!(store.is_empty());
    }

    #[test]
    fn jsonl_field_names() {
        let line = serde_json::to_string(&ans("r", "x", "y", Choice::B)).unwrap();
        assert_eq!(
            line,
            r#"{"reference":"r","option_a":"x","option_b":"y","chosen":"B","worker":"w","kind":"trial","timestamp":"2024-01-01T00:00:00Z"}"#
        );
    }

    #[test]
    fn jsonl_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("answers.jsonl");
        let mut store = AnswerStore::new();
        store.push(ans("r", "x", "y", Choice::B)).unwrap();
        store.push(ans("x", "r", "y", Choice::A)).unwrap();
        store.save_jsonl(&path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let loaded = AnswerStore::load_jsonl(&path).unwrap();
        assert_eq!(loaded, store);
        loaded.save_jsonl(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }
}
