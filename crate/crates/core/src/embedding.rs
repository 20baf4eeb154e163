//! Word-embedding tables in the GloVe text format, phrase embedding and
//! cosine nearest-neighbor queries.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm};

/// A possibly multi-word answer. Identity, ordering and hashing use the
/// normalized form: lowercase tokens joined by single spaces.
#[derive(Clone)]
pub struct Phrase {
    raw: String,
    normalized: String,
}

impl Phrase {
    /// Returns `None` when the text has no tokens.
    pub fn new(raw: &str) -> Option<Self> {
        let normalized = raw
            .split_whitespace()
            .map(str::to_lowercase)
            .collect::<Vec<_>>()
            .join(" ");
        if normalized.is_empty() {
            return None;
        }
        Some(Self {
            raw: raw.trim().to_string(),
            normalized,
        })
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn as_str(&self) -> &str {
        &self.normalized
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.normalized.split(' ')
    }
}

impl PartialEq for Phrase {
    fn eq(&self, other: &Self) -> bool {
        self.normalized == other.normalized
    }
}

impl Eq for Phrase {}

impl PartialOrd for Phrase {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Phrase {
    fn cmp(&self, other: &Self) -> Ordering {
        self.normalized.cmp(&other.normalized)
    }
}

impl std::hash::Hash for Phrase {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.normalized.hash(state);
    }
}

impl fmt::Debug for Phrase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.normalized)
    }
}

impl fmt::Display for Phrase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.normalized)
    }
}

impl Serialize for Phrase {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.normalized)
    }
}

impl<'de> Deserialize<'de> for Phrase {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Phrase::new(&s).ok_or_else(|| serde::de::Error::custom("empty answer phrase"))
    }
}

/// Immutable word → vector store. Iteration order is insertion (file line) order.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    words: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f64>,
    norms: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            words: Vec::new(),
            index: HashMap::new(),
            data: Vec::new(),
            norms: Vec::new(),
        }
    }

    /// Builds a table from `(word, vector)` pairs, enforcing the same rules as
    /// the file loader (line numbers in errors are 1-based pair positions).
    pub fn from_entries<I, S>(dim: usize, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: Into<String>,
    {
        let mut table = Self::new(dim);
        for (i, (word, vector)) in entries.into_iter().enumerate() {
            table.insert(i + 1, word.into(), vector)?;
        }
        Ok(table)
    }

    fn insert(&mut self, line: usize, word: String, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                line,
                expected: self.dim,
                found: vector.len(),
            });
        }
        if word.is_empty() {
            return Err(Error::Data(format!("line {line}: empty word")));
        }
        if let Some(bad) = vector.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonNumeric {
                line,
                token: bad.to_string(),
            });
        }
        if self.index.contains_key(&word) {
            return Err(Error::DuplicateWord { line, word });
        }
        self.index.insert(word.clone(), self.words.len());
        self.words.push(word);
        self.norms.push(norm(&vector));
        self.data.extend(vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.index.get(word).map(|&i| self.vector(i))
    }

    fn vector(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.as_str(), self.vector(i)))
    }

    /// Mean of the in-table token vectors, or `None` if no token is in the table.
    pub fn embed_phrase(&self, phrase: &Phrase) -> Option<Vec<f64>> {
        let mut sum = vec![0.0; self.dim];
        let mut count = 0usize;
        for token in phrase.tokens() {
            if let Some(v) = self.get(token) {
                axpy(&mut sum, 1.0, v);
                count += 1;
            }
        }
        match count {
            0 => None,
            1 => Some(sum),
            n => {
                let inv = n as f64;
                sum.iter_mut().for_each(|x| *x /= inv);
                Some(sum)
            }
        }
    }

    /// Top-`k` words by cosine similarity to `query`, skipping `exclude`.
    /// Ties go to the lexicographically smaller word. Entries with zero norm
    /// score 0.
    pub fn nearest_neighbors(
        &self,
        query: &[f64],
        k: usize,
        exclude: &BTreeSet<String>,
    ) -> Result<Vec<(String, f64)>> {
        if k == 0 {
            return Err(Error::ZeroNeighbors);
        }
        if query.len() != self.dim {
            return Err(Error::Shape {
                context: "nearest-neighbor query",
                expected: self.dim,
                found: query.len(),
            });
        }
        if query.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("nearest-neighbor query"));
        }
        let qn = norm(query);
        if qn == 0.0 {
            return Err(Error::ZeroNormQuery);
        }

        let mut scored: Vec<(usize, f64)> = (0..self.len())
            .filter(|&i| !exclude.contains(&self.words[i]))
            .map(|i| {
                let n = self.norms[i];
                let sim = if n == 0.0 {
                    0.0
                } else {
                    dot(query, self.vector(i)) / (qn * n)
                };
                (i, sim)
            })
            .collect();

        let order = |a: &(usize, f64), b: &(usize, f64)| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.words[a.0].cmp(&self.words[b.0]))
        };
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_by(order);
        Ok(scored
            .into_iter()
            .map(|(i, s)| (self.words[i].clone(), s))
            .collect())
    }

    /// Parses the GloVe text format. `expected_dim` overrides inference from
    /// the first line.
    pub fn parse(text: &str, expected_dim: Option<usize>) -> Result<Self> {
        let mut table: Option<Self> = expected_dim.map(Self::new);
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let mut parts = line.split(' ').filter(|p| !p.is_empty());
            let word = parts
                .next()
                .ok_or(Error::MissingComponents { line: line_no })?;
            let vector = parts
                .map(|tok| match tok.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    _ => Err(Error::NonNumeric {
                        line: line_no,
                        token: tok.to_string(),
                    }),
                })
                .collect::<Result<Vec<f64>>>()?;
            if vector.is_empty() {
                return Err(Error::MissingComponents { line: line_no });
            }
            let t = table.get_or_insert_with(|| Self::new(vector.len()));
            t.insert(line_no, word.to_string(), vector)?;
        }
        match table {
            Some(t) if !t.is_empty() => Ok(t),
            _ => Err(Error::EmptyFile),
        }
    }

    pub fn load(path: &Path, expected_dim: Option<usize>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, expected_dim)
    }

    /// Writes the table with shortest round-trip float formatting.
    pub fn write_to<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut out = BufWriter::new(out);
        for (word, vector) in self.iter() {
            out.write_all(word.as_bytes())?;
            for v in vector {
                write!(out, " {v}")?;
            }
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(file).map_err(|e| Error::io(path, e))
    }
}

/// Convenience: the set of tokens of a phrase, used as the k-NN exclusion set.
pub fn token_set(phrase: &Phrase) -> BTreeSet<String> {
    phrase.tokens().map(str::to_string).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ab() -> EmbeddingTable {
        EmbeddingTable::parse("a 1.0 0.0\nb 0.0 1.0", None).unwrap()
    }

    fn phrase(s: &str) -> Phrase {
        Phrase::new(s).unwrap()
    }

    #[test]
    fn loads_two_line_file() {
        let t = ab();
        assert_eq!(t.dim(), 2);
        assert_eq!(t.get("a").unwrap(), &[1.0, 0.0]);
        assert_eq!(t.get("b").unwrap(), &[0.0, 1.0]);
        assert_eq!(t.words(), &["a", "b"]);
    }

    #[test]
    fn rejects_short_line() {
        let err = EmbeddingTable::parse("a 1.0 0.0\nb 0.5", None).unwrap_err();
        assert!(matches!(
            err,
            Error::DimensionMismatch {
                line: 2,
                expected: 2,
                found: 1
            }
        ));
    }

    #[test]
    fn rejects_duplicate_word() {
        let err = EmbeddingTable::parse("a 1 2\na 3 4", None).unwrap_err();
        assert!(matches!(err, Error::DuplicateWord { line: 2, ref word } if word == "a"));
    }

    #[test]
    fn rejects_non_numeric_and_empty() {
        let err = EmbeddingTable::parse("a 1 x", None).unwrap_err();
        assert!(matches!(err, Error::NonNumeric { line: 1, .. }));
        assert!(matches!(
            EmbeddingTable::parse("", None).unwrap_err(),
            Error::EmptyFile
        ));
        assert!(matches!(
            EmbeddingTable::parse("a 1 nan", None).unwrap_err(),
            Error::NonNumeric { line: 1, .. }
        ));
    }

    #[test]
    fn expected_dim_is_enforced_on_first_line() {
        let err = EmbeddingTable::parse("a 1 2 3", Some(2)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { line: 1, .. }));
    }

    #[test]
    fn parses_exponents() {
        let t = EmbeddingTable::parse("x 1e-3 -2.5E2", None).unwrap();
        assert_eq!(t.get("x").unwrap(), &[1e-3, -250.0]);
    }

    #[test]
    fn phrase_embedding_means_in_table_tokens() {
        let t = ab();
        assert_eq!(t.embed_phrase(&phrase("a")).unwrap(), vec![1.0, 0.0]);
        assert_eq!(t.embed_phrase(&phrase("a b")).unwrap(), vec![0.5, 0.5]);
        assert_eq!(t.embed_phrase(&phrase("A zzz")).unwrap(), vec![1.0, 0.0]);
        assert!(t.embed_phrase(&phrase("zzz qqq")).is_none());
    }

    #[test]
    fn phrase_normalization() {
        let p = phrase("  Double   Fold eyelids ");
        assert_eq!(p.as_str(), "double fold eyelids");
        assert_eq!(p.tokens().count(), 3);
        assert_eq!(p, phrase("double fold EYELIDS"));
        assert!(Phrase::new("   ").is_none());
    }

    #[test]
    fn nearest_neighbor_identity_and_truncation() {
        let t = ab();
        let none = BTreeSet::new();
        assert_eq!(
            t.nearest_neighbors(&[1.0, 0.0], 1, &none).unwrap(),
            vec![("a".to_string(), 1.0)]
        );
        assert_eq!(
            t.nearest_neighbors(&[1.0, 0.0], 5, &none).unwrap(),
            vec![("a".to_string(), 1.0), ("b".to_string(), 0.0)]
        );
        let excl: BTreeSet<String> = ["a".to_string()].into();
        assert_eq!(
            t.nearest_neighbors(&[1.0, 0.0], 5, &excl).unwrap(),
            vec![("b".to_string(), 0.0)]
        );
    }

    #[test]
    fn nearest_neighbor_errors() {
        let t = ab();
        let none = BTreeSet::new();
        assert!(matches!(
            t.nearest_neighbors(&[0.0, 0.0], 1, &none),
            Err(Error::ZeroNormQuery)
        ));
        assert!(matches!(
            t.nearest_neighbors(&[1.0, 0.0], 0, &none),
            Err(Error::ZeroNeighbors)
        ));
    }

    #[test]
    fn ties_break_lexicographically() {
        let t = EmbeddingTable::parse("d 1 0\nc 1 0\nb 0 1\na 2 0", None).unwrap();
        let got = t
            .nearest_neighbors(&[1.0, 0.0], 3, &BTreeSet::new())
            .unwrap();
        let words: Vec<_> = got.iter().map(|(w, _)| w.as_str()).collect();
        assert_eq!(words, ["a", "c", "d"]);
    }

    /// Exhaustive scan with the same tie rule, written independently.
    fn brute_force(t: &EmbeddingTable, q: &[f64], k: usize) -> Vec<(String, f64)> {
        let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut all: Vec<(String, f64)> = t
            .iter()
            .map(|(w, v)| {
                let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                let d: f64 = q.iter().zip(v).map(|(a, b)| a * b).sum();
                (w.to_string(), d / (qn * vn))
            })
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn six_random_unit_vectors_match_exhaustive_scan() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let entries: Vec<(String, Vec<f64>)> = (0..6)
                .map(|i| {
                    let v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let n = norm(&v);
                    (format!("w{i}"), v.iter().map(|x| x / n).collect())
                })
                .collect();
            let t = EmbeddingTable::from_entries(4, entries).unwrap();
            let q: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = t.nearest_neighbors(&q, 3, &BTreeSet::new()).unwrap();
            let want = brute_force(&t, &q, 3);
            assert_eq!(got.len(), 3);
            for (g, w) in got.iter().zip(&want) {
                assert_eq!(g.0, w.0);
                assert!((g.1 - w.1).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn save_load_round_trips_bitwise(
            rows in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 3), 1..12)
        ) {
            let entries: Vec<_> = rows.iter().enumerate().map(|(i, r)| (format!("w{i}"), r.clone())).collect();
            let t = EmbeddingTable::from_entries(3, entries).unwrap();
            let mut buf = Vec::new();
            t.write_to(&mut buf).unwrap();
            let back = EmbeddingTable::parse(std::str::from_utf8(&buf).unwrap(), None).unwrap();
            prop_assert_eq!(back.words(), t.words());
            for ((_, a), (_, b)) in t.iter().zip(back.iter()) {
                let a: Vec<u64> = a.iter().map(|x| x.to_bits()).collect();
                let b: Vec<u64> = b.iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn neighbors_sorted_nonincreasing(
            rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..15),
            q in prop::collection::vec(0.1f64..1.0, 3),
            k in 1usize..10,
        ) {
            let entries: Vec<_> = rows.iter().enumerate().map(|(i, r)| (format!("w{i:02}"), r.clone())).collect();
            let t = EmbeddingTable::from_entries(3, entries).unwrap();
            let got = t.nearest_neighbors(&q, k, &BTreeSet::new()).unwrap();
            prop_assert_eq!(got.len(), k.min(t.len()));
            for w in got.windows(2) {
                prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
            }
        }

        #[test]
        fn single_word_phrase_embeds_exactly(v in prop::collection::vec(-10.0f64..10.0, 4)) {
            let t = EmbeddingTable::from_entries(4, [("word", v.clone())]).unwrap();
            prop_assert_eq!(t.embed_phrase(&Phrase::new("word").unwrap()).unwrap(), v);
        }
    }
}
