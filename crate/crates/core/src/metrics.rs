//! Evaluation: per-category accuracy, total accuracy, mean per-answer
//! accuracy (mAcc) and the base/non-base gap (BNG). All values are
//! percentages.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::embedding::Phrase;
use crate::error::{Error, Result};
use crate::vocab::{AnswerVocabulary, Category};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub n: usize,
    pub correct: usize,
}

impl Tally {
    fn add(&mut self, hit: bool) {
        self.n += 1;
        self.correct += hit as usize;
    }

    fn merge(&mut self, other: Tally) {
        self.n += other.n;
        self.correct += other.correct;
    }

    pub fn percent(self) -> Option<f64> {
        (self.n > 0).then(|| self.correct as f64 / self.n as f64 * 100.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc_base: Option<f64>,
    pub acc_common: Option<f64>,
    pub acc_rare: Option<f64>,
    pub acc_unseen: Option<f64>,
    pub acc_total: Option<f64>,
    pub macc: Option<f64>,
    /// `acc_base − acc_nonbase`; absent unless both sides have samples.
    pub bng: Option<f64>,
    pub per_answer: BTreeMap<Phrase, Tally>,
    pub category_sample_counts: BTreeMap<Category, usize>,
}

impl EvalReport {
    pub fn accuracy(&self, category: Category) -> Option<f64> {
        match category {
            Category::Base => self.acc_base,
            Category::Common => self.acc_common,
            Category::Rare => self.acc_rare,
            Category::Unseen => self.acc_unseen,
        }
    }

    /// Copy with every percentage rounded to one decimal.
    pub fn rounded(&self) -> Self {
        let r = |v: Option<f64>| v.map(|x| (x * 10.0).round() / 10.0);
        Self {
            acc_base: r(self.acc_base),
            acc_common: r(self.acc_common),
            acc_rare: r(self.acc_rare),
            acc_unseen: r(self.acc_unseen),
            acc_total: r(self.acc_total),
            macc: r(self.macc),
            bng: r(self.bng),
            per_answer: self.per_answer.clone(),
            category_sample_counts: self.category_sample_counts.clone(),
        }
    }

    pub const CSV_HEADER: &'static str = "B,C,R,U,T,M,BNG";

    /// `B,C,R,U,T,M,BNG` at one decimal; absent values print as `-`.
    pub fn csv_row(&self) -> String {
        [
            self.acc_base,
            self.acc_common,
            self.acc_rare,
            self.acc_unseen,
            self.acc_total,
            self.macc,
            self.bng,
        ]
        .iter()
        .map(|v| v.map_or_else(|| "-".to_string(), |x| format!("{x:.1}")))
        .collect::<Vec<_>>()
        .join(",")
    }
}

/// Groups exact-match counts by gold answer.
pub fn per_answer_accuracy(preds: &[(Phrase, Phrase)]) -> BTreeMap<Phrase, Tally> {
    let mut out: BTreeMap<Phrase, Tally> = BTreeMap::new();
    for (gold, predicted) in preds {
        out.entry(gold.clone()).or_default().add(gold == predicted);
    }
    out
}

pub fn evaluate_report(preds: &[(Phrase, Phrase)], vocab: &AnswerVocabulary) -> Result<EvalReport> {
    let per_answer = per_answer_accuracy(preds);
    let mut by_cat: BTreeMap<Category, Tally> = Category::ALL
        .iter()
        .map(|&c| (c, Tally::default()))
        .collect();
    for (answer, tally) in &per_answer {
        let cat = vocab
            .category_of(answer)
            .ok_or_else(|| Error::UncategorizedAnswer(answer.to_string()))?;
        by_cat
            .get_mut(&cat)
            .expect("all categories present")
            .merge(*tally);
    }

    let mut total = Tally::default();
    let mut nonbase = Tally::default();
    for (&cat, &t) in &by_cat {
        total.merge(t);
        if cat != Category::Base {
            nonbase.merge(t);
        }
    }
    let macc = (!per_answer.is_empty()).then(|| {
        per_answer
            .values()
            .map(|t| t.percent().expect("every grouped answer has a sample"))
            .sum::<f64>()
            / per_answer.len() as f64
    });
    let acc_base = by_cat[&Category::Base].percent();
    let bng = match (acc_base, nonbase.percent()) {
        (Some(b), Some(nb)) => Some(b - nb),
        _ => None,
    };

    Ok(EvalReport {
        acc_base,
        acc_common: by_cat[&Category::Common].percent(),
        acc_rare: by_cat[&Category::Rare].percent(),
        acc_unseen: by_cat[&Category::Unseen].percent(),
        acc_total: total.percent(),
        macc,
        bng,
        per_answer,
        category_sample_counts: by_cat.iter().map(|(&c, t)| (c, t.n)).collect(),
    })
}
