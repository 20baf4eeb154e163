//! K-hop answer graphs augmented with nearest-neighbor words.
//!
//! Level `k` adds every neighbor `j ∈ n(i)` of every node `i` already in level
//! `k − 1`, together with the directed edge `j → i`. After `K` levels, edges
//! whose two endpoints are both original answers are removed. Nodes are
//! ordered by `(hop, label)`, so original answers occupy the leading indices
//! in lexicographic order.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{token_set, EmbeddingTable, Phrase};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NodeRecord {
    pub label: Phrase,
    /// Smallest level at which the node entered the graph; 0 for original answers.
    pub hop: usize,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnswerGraph {
    dim: usize,
    nodes: Vec<NodeRecord>,
    /// Directed `(src, dst)` pairs: messages flow from `src` into `dst`.
    edges: BTreeSet<(usize, usize)>,
    original: Vec<usize>,
}

/// Result of one expansion level.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HopExpansion {
    pub new_nodes: BTreeSet<Phrase>,
    /// `(neighbor, source)` pairs.
    pub edges: BTreeSet<(Phrase, Phrase)>,
}

/// `n(a)`: the `k` nearest table words to the phrase embedding, excluding the
/// phrase's own tokens. Empty for unembeddable or zero-norm phrases.
pub fn answer_neighbors(phrase: &Phrase, table: &EmbeddingTable, k: usize) -> Result<Vec<Phrase>> {
    if k == 0 {
        return Err(Error::ZeroNeighbors);
    }
    let Some(query) = table.embed_phrase(phrase) else {
        return Ok(Vec::new());
    };
    match table.nearest_neighbors(&query, k, &token_set(phrase)) {
        Ok(hits) => Ok(hits
            .into_iter()
            .filter_map(|(w, _)| Phrase::new(&w))
            .collect()),
        Err(Error::ZeroNormQuery) => Ok(Vec::new()),
        Err(e) => Err(e),
    }
}

fn expand_with<F>(current: &BTreeSet<Phrase>, mut neighbors: F) -> Result<HopExpansion>
where
    F: FnMut(&Phrase) -> Result<Vec<Phrase>>,
{
    let mut out = HopExpansion::default();
    for i in current {
        for j in neighbors(i)? {
            if !current.contains(&j) {
                out.new_nodes.insert(j.clone());
            }
            out.edges.insert((j, i.clone()));
        }
    }
    Ok(out)
}

/// One application of the level recurrence to `current`.
pub fn expand_hop(
    current: &BTreeSet<Phrase>,
    table: &EmbeddingTable,
    k_neighbors: usize,
) -> Result<HopExpansion> {
    expand_with(current, |p| answer_neighbors(p, table, k_neighbors))
}

/// Original answers that have no in-table token.
pub fn unembeddable_answers<'a>(
    vocab: impl IntoIterator<Item = &'a Phrase>,
    table: &EmbeddingTable,
) -> Vec<Phrase> {
    vocab
        .into_iter()
        .filter(|p| table.embed_phrase(p).is_none())
        .cloned()
        .collect()
}

pub fn build_answer_graph(
    vocab: &BTreeSet<Phrase>,
    table: &EmbeddingTable,
    k_neighbors: usize,
    hops: usize,
) -> Result<AnswerGraph> {
    if vocab.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    if k_neighbors == 0 {
        return Err(Error::ZeroNeighbors);
    }

    let mut hop_of: BTreeMap<Phrase, usize> = vocab.iter().map(|p| (p.clone(), 0)).collect();
    let mut current: BTreeSet<Phrase> = vocab.clone();
    let mut edges: BTreeSet<(Phrase, Phrase)> = BTreeSet::new();
    let mut memo: HashMap<Phrase, Vec<Phrase>> = HashMap::new();

    for level in 1..=hops {
        let step = expand_with(&current, |p| {
            if let Some(hit) = memo.get(p) {
                return Ok(hit.clone());
            }
            let hit = answer_neighbors(p, table, k_neighbors)?;
            memo.insert(p.clone(), hit.clone());
            Ok(hit)
        })?;
        if step.new_nodes.is_empty() && step.edges.is_subset(&edges) {
            break;
        }
        for n in &step.new_nodes {
            hop_of.entry(n.clone()).or_insert(level);
        }
        current.extend(step.new_nodes);
        edges.extend(step.edges);
    }

    let missing = unembeddable_answers(vocab, table);
    if !missing.is_empty() {
        log::warn!(
            "{} original answer(s) have no embedding and get a zero feature: {:?}",
            missing.len(),
            missing
        );
    }

    let mut order: Vec<(usize, Phrase)> = hop_of.into_iter().map(|(p, h)| (h, p)).collect();
    order.sort();
    let index: HashMap<&Phrase, usize> =
        order.iter().enumerate().map(|(i, (_, p))| (p, i)).collect();

    let edges = edges
        .iter()
        .map(|(j, i)| (index[j], index[i]))
        .filter(|&(s, d)| !(order[s].0 == 0 && order[d].0 == 0))
        .collect();
    let nodes: Vec<NodeRecord> = order
        .iter()
        .map(|(hop, label)| NodeRecord {
            label: label.clone(),
            hop: *hop,
            feature: table
                .embed_phrase(label)
                .unwrap_or_else(|| vec![0.0; table.dim()]),
        })
        .collect();
    let original = (0..vocab.len()).collect();

    Ok(AnswerGraph {
        dim: table.dim(),
        nodes,
        edges,
        original,
    })
}

impl AnswerGraph {
    /// Assembles a graph from parts, checking every structural invariant.
    pub fn from_parts(
        dim: usize,
        nodes: Vec<NodeRecord>,
        edges: BTreeSet<(usize, usize)>,
    ) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for n in &nodes {
            if !seen.insert(&n.label) {
                return Err(Error::Data(format!("duplicate node {}", n.label)));
            }
            if n.feature.len() != dim {
                return Err(Error::Shape {
                    context: "node feature",
                    expected: dim,
                    found: n.feature.len(),
                });
            }
            if n.feature.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("node feature"));
            }
        }
        for &(s, d) in &edges {
            for idx in [s, d] {
                if idx >= nodes.len() {
                    return Err(Error::InvalidIndex {
                        index: idx,
                        len: nodes.len(),
                    });
                }
            }
            if nodes[s].hop == 0 && nodes[d].hop == 0 {
                return Err(Error::Data(format!(
                    "edge between original answers {} and {}",
                    nodes[s].label, nodes[d].label
                )));
            }
        }
        let original = nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.hop == 0)
            .map(|(i, _)| i)
            .collect();
        Ok(Self {
            dim,
            nodes,
            edges,
            original,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[NodeRecord] {
        &self.nodes
    }

    pub fn edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    pub fn original(&self) -> &[usize] {
        &self.original
    }

    pub fn original_labels(&self) -> Vec<Phrase> {
        self.original
            .iter()
            .map(|&i| self.nodes[i].label.clone())
            .collect()
    }

    pub fn index_of(&self, label: &Phrase) -> Option<usize> {
        self.nodes.iter().position(|n| &n.label == label)
    }

    /// `{i} ∪ {sources of edges into i}`.
    pub fn neighborhood(&self, i: usize) -> Result<BTreeSet<usize>> {
        if i >= self.nodes.len() {
            return Err(Error::InvalidIndex {
                index: i,
                len: self.nodes.len(),
            });
        }
        let mut set: BTreeSet<usize> = self
            .edges
            .iter()
            .filter(|&&(_, d)| d == i)
            .map(|&(s, _)| s)
            .collect();
        set.insert(i);
        Ok(set)
    }

    /// Every node's neighborhood in ascending index order (self included).
    pub fn neighborhoods(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = (0..self.nodes.len()).map(|i| vec![i]).collect();
        for &(s, d) in &self.edges {
            out[d].push(s);
        }
        for n in &mut out {
            n.sort_unstable();
            n.dedup();
        }
        out
    }

    pub fn features(&self) -> Vec<Vec<f64>> {
        self.nodes.iter().map(|n| n.feature.clone()).collect()
    }

    /// Writes the structure to `graph_path` and the aligned feature block to
    /// `features_path`.
    pub fn save(&self, graph_path: &Path, features_path: &Path) -> Result<()> {
        let file = GraphFile {
            dim: self.dim,
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeEntry {
                    label: n.label.clone(),
                    hop: n.hop,
                })
                .collect(),
            edges: self.edges.iter().map(|&(s, d)| [s, d]).collect(),
            original: self.original.clone(),
        };
        let feats = FeatureFile {
            dim: self.dim,
            rows: self.features(),
        };
        write_json(graph_path, &file)?;
        write_json(features_path, &feats)
    }

    pub fn load(graph_path: &Path, features_path: &Path) -> Result<Self> {
        let file: GraphFile = read_json(graph_path)?;
        let feats: FeatureFile = read_json(features_path)?;
        if feats.dim != file.dim || feats.rows.len() != file.nodes.len() {
            return Err(Error::Data(format!(
                "{} does not align with {}",
                features_path.display(),
                graph_path.display()
            )));
        }
        let nodes = file
            .nodes
            .into_iter()
            .zip(feats.rows)
            .map(|(n, feature)| NodeRecord {
                label: n.label,
                hop: n.hop,
                feature,
            })
            .collect();
        let edges = file.edges.into_iter().map(|[s, d]| (s, d)).collect();
        let graph = Self::from_parts(file.dim, nodes, edges)?;
        if graph.original != file.original {
            return Err(Error::Data(format!(
                "{}: original set disagrees with hop-0 nodes",
                graph_path.display()
            )));
        }
        Ok(graph)
    }
}

#[derive(Serialize, Deserialize)]
struct NodeEntry {
    label: Phrase,
    hop: usize,
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    dim: usize,
    nodes: Vec<NodeEntry>,
    edges: Vec<[usize; 2]>,
    original: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct FeatureFile {
    dim: usize,
    rows: Vec<Vec<f64>>,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> Phrase {
        Phrase::new(s).unwrap()
    }

    fn set(items: &[&str]) -> BTreeSet<Phrase> {
        items.iter().map(|s| p(s)).collect()
    }

    /// Unit vectors at 0°, 40°, 70° and 105°: a's nearest other word is b,
    /// b's is c, c's is b, d's is c.
    fn chain() -> EmbeddingTable {
        let text = "a 1 0\nb 0.766044 0.642788\nc 0.342020 0.939693\nd -0.258819 0.965926";
        EmbeddingTable::parse(text, None).unwrap()
    }

    #[test]
    fn one_hop_adds_neighbor_and_edge() {
        let e = expand_hop(&set(&["a"]), &chain(), 1).unwrap();
        assert_eq!(e.new_nodes, set(&["b"]));
        assert_eq!(e.edges, [(p("b"), p("a"))].into());
    }

    #[test]
    fn unembeddable_phrase_has_no_neighbors() {
        let e = expand_hop(&set(&["zzz"]), &chain(), 2).unwrap();
        assert!(e.new_nodes.is_empty());
        assert!(e.edges.is_empty());
    }

    #[test]
    fn zero_hops_is_just_the_vocabulary() {
        let g = build_answer_graph(&set(&["a", "d"]), &chain(), 2, 0).unwrap();
        assert_eq!(g.len(), 2);
        assert!(g.edges().is_empty());
        assert_eq!(g.original(), &[0, 1]);
    }

    #[test]
    fn edges_between_originals_are_dropped() {
        let g = build_answer_graph(&set(&["a", "b"]), &chain(), 1, 1).unwrap();
        let labels: Vec<_> = g.nodes().iter().map(|n| n.label.as_str()).collect();
        assert_eq!(labels, ["a", "b", "c"]);
        // b→a dropped; c→b kept.
        assert_eq!(g.edges(), &[(2, 1)].into());
    }

    #[test]
    fn hops_are_recorded() {
        let g = build_answer_graph(&set(&["a"]), &chain(), 1, 3).unwrap();
        let hops: Vec<_> = g
            .nodes()
            .iter()
            .map(|n| (n.label.as_str(), n.hop))
            .collect();
        assert_eq!(hops, [("a", 0), ("b", 1), ("c", 2)]);
        assert_eq!(g.edges(), &[(1, 0), (2, 1), (1, 2)].into());
    }

    #[test]
    fn unembeddable_original_gets_zero_feature() {
        let g = build_answer_graph(&set(&["a", "zzz"]), &chain(), 1, 1).unwrap();
        let z = g.index_of(&p("zzz")).unwrap();
        assert_eq!(g.nodes()[z].feature, vec![0.0, 0.0]);
        assert_eq!(g.neighborhood(z).unwrap(), [z].into());
        assert_eq!(
            unembeddable_answers(&set(&["a", "zzz"]), &chain()),
            vec![p("zzz")]
        );
    }

    #[test]
    fn neighborhood_includes_self_and_sources() {
        let g = build_answer_graph(&set(&["a"]), &chain(), 2, 1).unwrap();
        assert_eq!(g.neighborhood(0).unwrap(), [0, 1, 2].into());
        assert_eq!(g.neighborhood(1).unwrap(), [1].into());
        assert!(matches!(g.neighborhood(9), Err(Error::InvalidIndex { .. })));
    }

    #[test]
    fn empty_vocab_is_rejected() {
        assert!(matches!(
            build_answer_graph(&BTreeSet::new(), &chain(), 1, 1),
            Err(Error::EmptyVocabulary)
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let g = build_answer_graph(&set(&["a", "d"]), &chain(), 2, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (gp, fp) = (dir.path().join("g.json"), dir.path().join("f.json"));
        g.save(&gp, &fp).unwrap();
        assert_eq!(AnswerGraph::load(&gp, &fp).unwrap(), g);
    }

    #[test]
    fn from_parts_rejects_original_original_edge() {
        let nodes = vec![
            NodeRecord {
                label: p("a"),
                hop: 0,
                feature: vec![1.0],
            },
            NodeRecord {
                label: p("b"),
                hop: 0,
                feature: vec![1.0],
            },
        ];
        assert!(AnswerGraph::from_parts(1, nodes, [(0, 1)].into()).is_err());
    }
}
