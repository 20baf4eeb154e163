//! Answer vocabularies and frequency categories (base / common / rare / unseen).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::Phrase;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Base,
    Common,
    Rare,
    Unseen,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Base,
        Category::Common,
        Category::Rare,
        Category::Unseen,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Base => "base",
            Category::Common => "common",
            Category::Rare => "rare",
            Category::Unseen => "unseen",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Training-frequency thresholds: 0 unseen, 1..=10 rare, 11..=100 common, 101+ base.
pub fn categorize_frequency(freq: u64) -> Category {
    match freq {
        0 => Category::Unseen,
        1..=10 => Category::Rare,
        11..=100 => Category::Common,
        _ => Category::Base,
    }
}

/// One labeled example; `feature` stands in for an encoded video-question pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaSample {
    pub sample_id: String,
    pub feature: Vec<f64>,
    pub answer: Phrase,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnswerVocabulary {
    pub train_answers: BTreeSet<Phrase>,
    pub test_answers: BTreeSet<Phrase>,
    pub train_frequency: BTreeMap<Phrase, u64>,
    pub category: BTreeMap<Phrase, Category>,
}

impl AnswerVocabulary {
    pub fn category_of(&self, answer: &Phrase) -> Option<Category> {
        self.category.get(answer).copied()
    }

    pub fn frequency_of(&self, answer: &Phrase) -> u64 {
        self.train_frequency.get(answer).copied().unwrap_or(0)
    }

    pub fn all_answers(&self) -> impl Iterator<Item = &Phrase> {
        self.category.keys()
    }

    /// Train answers ordered by descending frequency, ties lexicographic.
    pub fn by_frequency(&self) -> Vec<Phrase> {
        let mut v: Vec<_> = self.train_answers.iter().cloned().collect();
        v.sort_by(|a, b| {
            self.frequency_of(b)
                .cmp(&self.frequency_of(a))
                .then_with(|| a.cmp(b))
        });
        v
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Dump<'a> {
            train_frequency: &'a BTreeMap<Phrase, u64>,
            category: &'a BTreeMap<Phrase, Category>,
            test_answers: &'a BTreeSet<Phrase>,
        }
        let dump = Dump {
            train_frequency: &self.train_frequency,
            category: &self.category,
            test_answers: &self.test_answers,
        };
        let text = serde_json::to_string_pretty(&dump).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Dump {
            train_frequency: BTreeMap<Phrase, u64>,
            category: BTreeMap<Phrase, Category>,
            test_answers: BTreeSet<Phrase>,
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dump: Dump = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let train_answers = dump
            .train_frequency
            .iter()
            .filter(|(_, &f)| f > 0)
            .map(|(a, _)| a.clone())
            .collect();
        let vocab = Self {
            train_answers,
            test_answers: dump.test_answers,
            train_frequency: dump.train_frequency,
            category: dump.category,
        };
        for (answer, &cat) in &vocab.category {
            if categorize_frequency(vocab.frequency_of(answer)) != cat {
                return Err(Error::Data(format!(
                    "{}: category of {answer} disagrees with its frequency",
                    path.display()
                )));
            }
        }
        Ok(vocab)
    }
}

pub fn build_vocabularies(train: &[QaSample], test: &[QaSample]) -> AnswerVocabulary {
    let mut train_frequency: BTreeMap<Phrase, u64> = BTreeMap::new();
    for s in train {
        *train_frequency.entry(s.answer.clone()).or_default() += 1;
    }
    let train_answers: BTreeSet<Phrase> = train_frequency.keys().cloned().collect();
    let test_answers: BTreeSet<Phrase> = test.iter().map(|s| s.answer.clone()).collect();
    for a in &test_answers {
        train_frequency.entry(a.clone()).or_insert(0);
    }
    let category = train_frequency
        .iter()
        .map(|(a, &f)| (a.clone(), categorize_frequency(f)))
        .collect();
    AnswerVocabulary {
        train_answers,
        test_answers,
        train_frequency,
        category,
    }
}

/// Number of unique answers in each category over train ∪ test.
pub fn category_counts(vocab: &AnswerVocabulary) -> BTreeMap<Category, usize> {
    let mut counts: BTreeMap<Category, usize> = Category::ALL.iter().map(|&c| (c, 0)).collect();
    for &c in vocab.category.values() {
        *counts.entry(c).or_default() += 1;
    }
    counts
}

pub fn load_samples(path: &Path) -> Result<Vec<QaSample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let s: QaSample = serde_json::from_str(l)
                .map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), i + 1)))?;
            if s.feature.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "{} line {}: non-finite feature",
                    path.display(),
                    i + 1
                )));
            }
            Ok(s)
        })
        .collect()
}

pub fn save_samples(path: &Path, samples: &[QaSample]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut out, s).map_err(|e| Error::json(path, e))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(id: usize, answer: &str) -> QaSample {
        QaSample {
            sample_id: format!("s{id}"),
            feature: vec![0.0],
            answer: Phrase::new(answer).unwrap(),
        }
    }

    fn samples(answers: &[&str]) -> Vec<QaSample> {
        answers
            .iter()
            .enumerate()
            .map(|(i, a)| sample(i, a))
            .collect()
    }

    fn p(s: &str) -> Phrase {
        Phrase::new(s).unwrap()
    }

    #[test]
    fn threshold_table() {
        assert_eq!(categorize_frequency(0), Category::Unseen);
        assert_eq!(categorize_frequency(1), Category::Rare);
        assert_eq!(categorize_frequency(10), Category::Rare);
        assert_eq!(categorize_frequency(11), Category::Common);
        assert_eq!(categorize_frequency(100), Category::Common);
        assert_eq!(categorize_frequency(101), Category::Base);
    }

    #[test]
    fn counts_small_example() {
        let v = build_vocabularies(&samples(&["a", "a", "b"]), &samples(&["a", "c"]));
        assert_eq!(v.frequency_of(&p("a")), 2);
        assert_eq!(v.frequency_of(&p("b")), 1);
        assert_eq!(v.frequency_of(&p("c")), 0);
        assert_eq!(v.category_of(&p("a")), Some(Category::Rare));
        assert_eq!(v.category_of(&p("b")), Some(Category::Rare));
        assert_eq!(v.category_of(&p("c")), Some(Category::Unseen));
        assert_eq!(v.test_answers, [p("a"), p("c")].into());
        assert_eq!(v.train_answers, [p("a"), p("b")].into());

        let counts = category_counts(&v);
        assert_eq!(counts[&Category::Rare], 2);
        assert_eq!(counts[&Category::Unseen], 1);
        assert_eq!(counts[&Category::Common], 0);
        assert_eq!(counts[&Category::Base], 0);
    }

    #[test]
    fn degenerate_inputs() {
        let v = build_vocabularies(&[], &samples(&["x"]));
        assert!(v.train_answers.is_empty());
        assert_eq!(v.category_of(&p("x")), Some(Category::Unseen));

        let empty = build_vocabularies(&[], &[]);
        assert!(category_counts(&empty).values().all(|&c| c == 0));
    }

    #[test]
    fn two_hundred_copies_is_base() {
        let train: Vec<_> = (0..200).map(|i| sample(i, "p")).collect();
        let v = build_vocabularies(&train, &[]);
        assert_eq!(v.category_of(&p("p")), Some(Category::Base));
    }

    #[test]
    fn answers_are_case_and_space_normalized() {
        let v = build_vocabularies(&samples(&["Red Car", "red  car"]), &[]);
        assert_eq!(v.frequency_of(&p("red car")), 2);
    }

    #[test]
    fn randomized_counts_match_recount() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let names: Vec<String> = (0..50).map(|i| format!("ans{i}")).collect();
        let mut train = Vec::new();
        for (i, name) in names.iter().enumerate().take(40) {
            let n = rng.random_range(1..150);
            train.extend((0..n).map(|j| sample(i * 1000 + j, name)));
        }
        let test: Vec<_> = (0..300)
            .map(|j| sample(j, &names[rng.random_range(0..50)]))
            .collect();
        let v = build_vocabularies(&train, &test);

        // Independent recount from the raw samples.
        let mut want: BTreeMap<Category, usize> = Category::ALL.iter().map(|&c| (c, 0)).collect();
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        for s in train.iter().chain(&test) {
            let name = s.answer.as_str();
            if !seen.insert(name) {
                continue;
            }
            let f = train.iter().filter(|t| t.answer.as_str() == name).count();
            let c = if f == 0 {
                Category::Unseen
            } else if f <= 10 {
                Category::Rare
            } else if f <= 100 {
                Category::Common
            } else {
                Category::Base
            };
            *want.get_mut(&c).unwrap() += 1;
        }
        assert_eq!(category_counts(&v), want);
        assert_eq!(category_counts(&v).values().sum::<usize>(), seen.len());
    }

    #[test]
    fn dump_round_trips() {
        let v = build_vocabularies(&samples(&["a", "a", "b"]), &samples(&["a", "c"]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        v.save(&path).unwrap();
        assert_eq!(AnswerVocabulary::load(&path).unwrap(), v);
    }

    proptest! {
        #[test]
        fn categorization_is_monotone(a in 0u64..1000, b in 0u64..1000) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            // Category order is Base < Common < Rare < Unseen.
            prop_assert!(categorize_frequency(lo) >= categorize_frequency(hi));
        }

        #[test]
        fn unseen_iff_test_only(
            train in prop::collection::vec(0usize..8, 0..40),
            test in prop::collection::vec(0usize..8, 0..20),
        ) {
            let tr: Vec<_> = train.iter().enumerate().map(|(i, a)| sample(i, &format!("a{a}"))).collect();
            let te: Vec<_> = test.iter().enumerate().map(|(i, a)| sample(i, &format!("a{a}"))).collect();
            let v = build_vocabularies(&tr, &te);
            for a in v.all_answers() {
                let unseen = v.category_of(a) == Some(Category::Unseen);
                prop_assert_eq!(unseen, v.test_answers.contains(a) && !v.train_answers.contains(a));
            }
            let mut rev = tr.clone();
            rev.reverse();
            prop_assert_eq!(build_vocabularies(&rev, &te), v);
        }
    }
}
