//! Seeded synthetic long-tail QA data.
//!
//! Answers are ranked by a seeded shuffle and drawn with Zipf weights
//! `r^-s` by inverse-CDF sampling. A seeded fraction of answers is withheld
//! from training entirely and only appears at test time. Each sample's raw
//! feature is `A · embed(answer) + N(0, σ²)`, so the answer is recoverable
//! from the feature and nearby words in the embedding space are informative.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingTable, Phrase};
use crate::error::{Error, Result};
use crate::linalg::{norm, Matrix};
use crate::seeding::rng_for;
use crate::vocab::QaSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_answers: usize,
    pub zipf_exponent: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub unseen_fraction: f64,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Use `A = I` (requires `feature_dim` equal to the embedding width).
    pub identity_mixing: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_answers: 200,
            zipf_exponent: 1.2,
            n_train: 5000,
            n_test: 1000,
            unseen_fraction: 0.2,
            feature_dim: 50,
            noise_sigma: 0.1,
            seed: 0,
            identity_mixing: false,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_answers == 0 || self.n_train == 0 || self.n_test == 0 || self.feature_dim == 0 {
            return bad("n_answers, n_train, n_test and feature_dim must be positive");
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent > 0.0) {
            return bad("zipf_exponent must be positive");
        }
        if !(0.0..1.0).contains(&self.unseen_fraction) {
            return bad("unseen_fraction must lie in [0, 1)");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative");
        }
        Ok(())
    }
}

/// Clustered toy word vectors standing in for a pretrained table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyEmbeddingConfig {
    pub n_words: usize,
    pub dim: usize,
    pub n_clusters: usize,
    /// Within-cluster spread relative to the unit-norm center.
    pub spread: f64,
    pub seed: u64,
}

impl Default for ToyEmbeddingConfig {
    fn default() -> Self {
        Self {
            n_words: 600,
            dim: 50,
            n_clusters: 40,
            spread: 0.6,
            seed: 0,
        }
    }
}

/// Unit-norm vectors `normalize(c_k + spread · g)`, with words assigned to
/// clusters round-robin so any prefix of the table covers every cluster.
pub fn toy_embedding_table(config: &ToyEmbeddingConfig) -> Result<EmbeddingTable> {
    if config.n_words == 0 || config.dim == 0 || config.n_clusters == 0 {
        return Err(Error::Config(
            "toy embeddings need words, width and clusters".into(),
        ));
    }
    let mut rng = rng_for(config.seed, "toy-embeddings");
    let unit = |v: Vec<f64>| {
        let n = norm(&v);
        v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let gaussian = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        (0..config.dim)
            .map(|_| StandardNormal.sample(rng))
            .collect()
    };
    let centers: Vec<Vec<f64>> = (0..config.n_clusters)
        .map(|_| unit(gaussian(&mut rng)))
        .collect();
    let width = config.n_words.to_string().len();
    let entries: Vec<(String, Vec<f64>)> = (0..config.n_words)
        .map(|i| {
            let c = &centers[i % config.n_clusters];
            let g = gaussian(&mut rng);
            let scale = config.spread / (config.dim as f64).sqrt();
            let v = c.iter().zip(&g).map(|(a, b)| a + scale * b).collect();
            (format!("w{i:0width$}"), unit(v))
        })
        .collect();
    EmbeddingTable::from_entries(config.dim, entries)
}

/// Withholds `⌈fraction · n⌉` answers, chosen uniformly by `seed`. Both pools
/// keep the input order.
pub fn split_unseen(
    answers: &[Phrase],
    unseen_fraction: f64,
    seed: u64,
) -> Result<(Vec<Phrase>, Vec<Phrase>)> {
    if answers.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    if !(0.0..1.0).contains(&unseen_fraction) {
        return Err(Error::Config(format!(
            "unseen_fraction {unseen_fraction} must lie in [0, 1)"
        )));
    }
    let n_unseen = (unseen_fraction * answers.len() as f64).ceil() as usize;
    if n_unseen >= answers.len() {
        return Err(Error::Config("no answers left for training".into()));
    }
    let mut idx: Vec<usize> = (0..answers.len()).collect();
    idx.shuffle(&mut rng_for(seed, "split-unseen"));
    let mut withheld = vec![false; answers.len()];
    for &i in &idx[..n_unseen] {
        withheld[i] = true;
    }
    let (mut train, mut unseen) = (Vec::new(), Vec::new());
    for (a, &w) in answers.iter().zip(&withheld) {
        if w {
            unseen.push(a.clone());
        } else {
            train.push(a.clone());
        }
    }
    Ok((train, unseen))
}

/// Inverse-CDF sampler over a finite set of positive weights.
#[derive(Debug, Clone)]
pub struct DiscreteSampler {
    cumulative: Vec<f64>,
}

impl DiscreteSampler {
    pub fn new(weights: &[f64]) -> Result<Self> {
        let mut acc = 0.0;
        let cumulative: Vec<f64> = weights
            .iter()
            .map(|&w| {
                acc += w;
                acc
            })
            .collect();
        if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || acc <= 0.0
        {
            return Err(Error::Config(
                "sampler needs finite non-negative weights with positive sum".into(),
            ));
        }
        Ok(Self { cumulative })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = *self.cumulative.last().expect("non-empty");
        let u = rng.random::<f64>() * total;
        self.cumulative
            .partition_point(|&c| c <= u)
            .min(self.cumulative.len() - 1)
    }
}

pub fn zipf_weight(rank: usize, exponent: f64) -> f64 {
    (rank as f64).powf(-exponent)
}

/// The answer list of a generated dataset in rank order, with the unseen pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRanking {
    pub ranked: Vec<Phrase>,
    pub unseen: Vec<Phrase>,
}

/// First `n_answers` embeddable table words, ranked by a seeded shuffle.
pub fn rank_answers(config: &GenConfig, table: &EmbeddingTable) -> Result<AnswerRanking> {
    let mut answers: Vec<Phrase> = table
        .words()
        .iter()
        .filter_map(|w| Phrase::new(w))
        .filter(|p| table.embed_phrase(p).is_some_and(|v| norm(&v) > 0.0))
        .take(config.n_answers)
        .collect();
    if answers.len() < config.n_answers {
        return Err(Error::Data(format!(
            "embedding table has {} usable answers, {} requested",
            answers.len(),
            config.n_answers
        )));
    }
    answers.shuffle(&mut rng_for(config.seed, "answer-ranks"));
    let (_, unseen) = split_unseen(&answers, config.unseen_fraction, config.seed)?;
    Ok(AnswerRanking {
        ranked: answers,
        unseen,
    })
}

pub fn mixing_matrix(config: &GenConfig, dim: usize) -> Result<Matrix> {
    if config.identity_mixing {
        if config.feature_dim != dim {
            return Err(Error::Config(format!(
                "identity mixing needs feature_dim {} to equal embedding width {dim}",
                config.feature_dim
            )));
        }
        return Ok(Matrix::identity(dim));
    }
    let mut rng = rng_for(config.seed, "mixing");
    let scale = 1.0 / (dim as f64).sqrt();
    let data = (0..config.feature_dim * dim)
        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect();
    Matrix::from_vec(config.feature_dim, dim, data)
}

pub fn sample_dataset(
    config: &GenConfig,
    table: &EmbeddingTable,
) -> Result<(Vec<QaSample>, Vec<QaSample>)> {
    config.validate()?;
    let ranking = rank_answers(config, table)?;
    let mixing = mixing_matrix(config, table.dim())?;
    let noise = Normal::new(0.0, config.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;

    let weights: Vec<f64> = (1..=ranking.ranked.len())
        .map(|r| zipf_weight(r, config.zipf_exponent))
        .collect();
    let train_weights: Vec<f64> = ranking
        .ranked
        .iter()
        .zip(&weights)
        .map(|(a, &w)| if ranking.unseen.contains(a) { 0.0 } else { w })
        .collect();

    let embeddings: Vec<Vec<f64>> = ranking
        .ranked
        .iter()
        .map(|a| table.embed_phrase(a).expect("filtered to embeddable"))
        .collect();

    let draw = |n: usize, w: &[f64], tag: &str| -> Result<Vec<QaSample>> {
        let sampler = DiscreteSampler::new(w)?;
        let mut rng = rng_for(config.seed, tag);
        (0..n)
            .map(|i| {
                let k = sampler.sample(&mut rng);
                let mut feature = mixing.matvec(&embeddings[k])?;
                if config.noise_sigma > 0.0 {
                    for f in &mut feature {
                        *f += noise.sample(&mut rng);
                    }
                }
                Ok(QaSample {
                    sample_id: format!("{tag}-{i:06}"),
                    feature,
                    answer: ranking.ranked[k].clone(),
                })
            })
            .collect()
    };
    Ok((
        draw(config.n_train, &train_weights, "train")?,
        draw(config.n_test, &weights, "test")?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{build_vocabularies, Category};

    fn answers(n: usize) -> Vec<Phrase> {
        (0..n)
            .map(|i| Phrase::new(&format!("a{i}")).unwrap())
            .collect()
    }

    fn small_table() -> EmbeddingTable {
        toy_embedding_table(&ToyEmbeddingConfig {
            n_words: 120,
            dim: 8,
            n_clusters: 6,
            spread: 0.5,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn split_sizes() {
        let (t, u) = split_unseen(&answers(4), 0.0, 1).unwrap();
        assert_eq!((t.len(), u.len()), (4, 0));
        let (t, u) = split_unseen(&answers(4), 0.5, 1).unwrap();
        assert_eq!((t.len(), u.len()), (2, 2));
        let (t2, u2) = split_unseen(&answers(4), 0.5, 1).unwrap();
        assert_eq!((t, u), (t2, u2));
        let (_, u) = split_unseen(&answers(10), 0.21, 1).unwrap();
        assert_eq!(u.len(), 3);
    }

    #[test]
    fn split_rejects_degenerate_fractions() {
        assert!(split_unseen(&answers(4), 1.0, 1).is_err());
        assert!(split_unseen(&answers(1), 0.5, 1).is_err());
        assert!(split_unseen(&[], 0.0, 1).is_err());
    }

    #[test]
    fn noiseless_identity_features_are_embeddings() {
        let table = small_table();
        let cfg = GenConfig {
            n_answers: 30,
            n_train: 50,
            n_test: 20,
            feature_dim: 8,
            noise_sigma: 0.0,
            identity_mixing: true,
            ..GenConfig::default()
        };
        let (train, test) = sample_dataset(&cfg, &table).unwrap();
        for s in train.iter().chain(&test) {
            assert_eq!(s.feature, table.embed_phrase(&s.answer).unwrap());
        }
    }

    #[test]
    fn no_unseen_fraction_means_no_unseen_answers() {
        let cfg = GenConfig {
            n_answers: 40,
            n_train: 2000,
            n_test: 300,
            feature_dim: 8,
            unseen_fraction: 0.0,
            ..GenConfig::default()
        };
        let (train, test) = sample_dataset(&cfg, &small_table()).unwrap();
        let v = build_vocabularies(&train, &test);
        assert!(v.test_answers.is_subset(&v.train_answers));
        assert!(v.category.values().all(|&c| c != Category::Unseen));
    }

    #[test]
    fn unseen_pool_never_trains() {
        let cfg = GenConfig {
            n_answers: 40,
            n_train: 2000,
            n_test: 2000,
            feature_dim: 8,
            unseen_fraction: 0.25,
            ..GenConfig::default()
        };
        let table = small_table();
        let ranking = rank_answers(&cfg, &table).unwrap();
        assert_eq!(ranking.unseen.len(), 10);
        let (train, test) = sample_dataset(&cfg, &table).unwrap();
        let v = build_vocabularies(&train, &test);
        for u in &ranking.unseen {
            assert_eq!(v.frequency_of(u), 0);
            if v.test_answers.contains(u) {
                assert_eq!(v.category_of(u), Some(Category::Unseen));
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GenConfig {
            n_answers: 30,
            n_train: 200,
            n_test: 50,
            feature_dim: 5,
            ..GenConfig::default()
        };
        let table = small_table();
        let a = sample_dataset(&cfg, &table).unwrap();
        let b = sample_dataset(&cfg, &table).unwrap();
        assert_eq!(a, b);
        let c = sample_dataset(&GenConfig { seed: 1, ..cfg }, &table).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn too_few_answers_is_a_data_error() {
        let cfg = GenConfig {
            n_answers: 500,
            feature_dim: 8,
            ..GenConfig::default()
        };
        assert!(matches!(
            sample_dataset(&cfg, &small_table()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn noiseless_nearest_embedding_is_perfect() {
        let table = small_table();
        let cfg = GenConfig {
            n_answers: 60,
            n_train: 100,
            n_test: 200,
            feature_dim: 8,
            noise_sigma: 0.0,
            identity_mixing: true,
            ..GenConfig::default()
        };
        let (_, test) = sample_dataset(&cfg, &table).unwrap();
        let ranking = rank_answers(&cfg, &table).unwrap();
        for s in &test {
            let best = ranking
                .ranked
                .iter()
                .max_by(|a, b| {
                    let da = crate::linalg::dot(&table.embed_phrase(a).unwrap(), &s.feature);
                    let db = crate::linalg::dot(&table.embed_phrase(b).unwrap(), &s.feature);
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(best, &s.answer);
        }
    }

    #[test]
    fn sampler_respects_zero_weights() {
        let s = DiscreteSampler::new(&[0.0, 1.0, 0.0, 2.0]).unwrap();
        let mut rng = rng_for(0, "t");
        for _ in 0..1000 {
            let k = s.sample(&mut rng);
            assert!(k == 1 || k == 3);
        }
        assert!(DiscreteSampler::new(&[0.0]).is_err());
    }
}
