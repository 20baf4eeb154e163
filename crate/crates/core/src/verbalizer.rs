//! Graph-attention soft verbalizer.
//!
//! Each layer scores neighbor `j` of destination `i` with
//! `LeakyReLU((W_dst h_i)ᵀ (W_src h_j))`, normalizes the scores over the
//! neighborhood `N_i` (self included) with a softmax, and replaces `h_i` by
//! the attention-weighted sum of `h_j`. The aggregation weight matrix is fixed
//! to the identity and the activation is the identity, so every layer output
//! is a convex combination of its inputs. After `L` layers the rows of the
//! original answers are blended with their input features:
//! `Ĥ = ε·V + (1 − ε)·H`.
//!
//! Input features are constants: gradients flow only into `W_src` and `W_dst`.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::Phrase;
use crate::error::{Error, Result};
use crate::graph::AnswerGraph;
use crate::linalg::{axpy, dot, Matrix};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;
pub const DEFAULT_EPSILON: f64 = 0.7;
pub const DEFAULT_LAYERS: usize = 2;
/// Grid searched when sweeping ε.
pub const EPSILON_GRID: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

const INIT_NOISE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub w_src: Matrix,
    pub w_dst: Matrix,
}

impl LayerWeights {
    fn zeros(dim: usize) -> Self {
        Self {
            w_src: Matrix::zeros(dim, dim),
            w_dst: Matrix::zeros(dim, dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerbalizerModel {
    dim: usize,
    layers: Vec<LayerWeights>,
    epsilon: f64,
    leaky_slope: f64,
}

impl VerbalizerModel {
    /// Identity projections plus uniform noise in `[-0.01, 0.01]`.
    pub fn init<R: Rng + ?Sized>(
        dim: usize,
        num_layers: usize,
        epsilon: f64,
        leaky_slope: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut noisy_identity = || {
            let mut m = Matrix::identity(dim);
            for w in m.as_mut_slice() {
                *w += rng.random_range(-INIT_NOISE..=INIT_NOISE);
            }
            m
        };
        let layers = (0..num_layers)
            .map(|_| {
                let w_src = noisy_identity();
                let w_dst = noisy_identity();
                LayerWeights { w_src, w_dst }
            })
            .collect();
        Self::from_layers(dim, layers, epsilon, leaky_slope)
    }

    pub fn from_layers(
        dim: usize,
        layers: Vec<LayerWeights>,
        epsilon: f64,
        leaky_slope: f64,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("verbalizer needs at least one layer".into()));
        }
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::Config(format!("epsilon {epsilon} outside [0, 1]")));
        }
        if !(leaky_slope.is_finite() && leaky_slope > 0.0) {
            return Err(Error::Config(format!(
                "leaky slope {leaky_slope} must be positive"
            )));
        }
        for l in &layers {
            for m in [&l.w_src, &l.w_dst] {
                if m.rows() != dim || m.cols() != dim {
                    return Err(Error::Shape {
                        context: "verbalizer weight",
                        expected: dim * dim,
                        found: m.rows() * m.cols(),
                    });
                }
                if !m.is_finite() {
                    return Err(Error::NonFinite("verbalizer weight"));
                }
            }
        }
        Ok(Self {
            dim,
            layers,
            epsilon,
            leaky_slope,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn leaky_slope(&self) -> f64 {
        self.leaky_slope
    }

    pub fn apply_gradients(&mut self, lr: f64, grads: &VerbalizerGrads) {
        for (w, g) in self.layers.iter_mut().zip(&grads.layers) {
            w.w_src.descend(lr, &g.w_src);
            w.w_dst.descend(lr, &g.w_dst);
        }
    }
}

/// Per-destination attention weights, each row in ascending source order.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix {
    rows: Vec<Vec<(usize, f64)>>,
}

impl AttentionMatrix {
    pub fn row(&self, dst: usize) -> &[(usize, f64)] {
        &self.rows[dst]
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn weight(&self, dst: usize, src: usize) -> Option<f64> {
        self.rows[dst]
            .iter()
            .find(|(s, _)| *s == src)
            .map(|&(_, a)| a)
    }
}

/// `Ĥ`: one row per original answer, in graph order.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedEmbeddings {
    pub labels: Vec<Phrase>,
    pub rows: Matrix,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Matrix,
    dst_proj: Matrix,
    src_proj: Matrix,
    scores: Vec<Vec<f64>>,
    attention: AttentionMatrix,
}

/// Intermediate values of a forward pass, consumed by [`verbalizer_gradients`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    n_nodes: usize,
    n_edges: usize,
    epsilon: f64,
    neighborhoods: Vec<Vec<usize>>,
    layers: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn attention(&self, layer: usize) -> Option<&AttentionMatrix> {
        self.layers.get(layer).map(|c| &c.attention)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerbalizerGrads {
    pub layers: Vec<LayerWeights>,
}

impl VerbalizerGrads {
    pub fn zeros(model: &VerbalizerModel) -> Self {
        Self {
            layers: (0..model.num_layers())
                .map(|_| LayerWeights::zeros(model.dim()))
                .collect(),
        }
    }
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

/// Max-subtracted softmax.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

fn input_matrix(graph: &AnswerGraph) -> Matrix {
    let mut m = Matrix::zeros(graph.len(), graph.dim());
    for (i, n) in graph.nodes().iter().enumerate() {
        m.row_mut(i).copy_from_slice(&n.feature);
    }
    m
}

fn project_rows(w: &Matrix, h: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(h.rows(), w.rows());
    for i in 0..h.rows() {
        let hi = h.row(i);
        let row = out.row_mut(i);
        for (r, o) in row.iter_mut().enumerate() {
            *o = dot(w.row(r), hi);
        }
    }
    out
}

fn check_layer(
    model: &VerbalizerModel,
    layer: usize,
    h_prev: &Matrix,
    graph: &AnswerGraph,
) -> Result<()> {
    if layer >= model.num_layers() {
        return Err(Error::InvalidIndex {
            index: layer,
            len: model.num_layers(),
        });
    }
    if graph.dim() != model.dim() || h_prev.cols() != model.dim() {
        return Err(Error::Shape {
            context: "verbalizer feature width",
            expected: model.dim(),
            found: h_prev.cols(),
        });
    }
    if h_prev.rows() != graph.len() {
        return Err(Error::Shape {
            context: "verbalizer node count",
            expected: graph.len(),
            found: h_prev.rows(),
        });
    }
    Ok(())
}

fn layer_forward(
    model: &VerbalizerModel,
    layer: usize,
    h_prev: &Matrix,
    neighborhoods: &[Vec<usize>],
) -> Result<(Matrix, LayerCache)> {
    let w = &model.layers[layer];
    let dst_proj = project_rows(&w.w_dst, h_prev);
    let src_proj = project_rows(&w.w_src, h_prev);

    let mut scores = Vec::with_capacity(neighborhoods.len());
    let mut rows = Vec::with_capacity(neighborhoods.len());
    let mut out = Matrix::zeros(h_prev.rows(), h_prev.cols());
    for (i, nbrs) in neighborhoods.iter().enumerate() {
        let a = dst_proj.row(i);
        let s: Vec<f64> = nbrs.iter().map(|&j| dot(a, src_proj.row(j))).collect();
        let mut alpha: Vec<f64> = s
            .iter()
            .map(|&x| leaky_relu(x, model.leaky_slope))
            .collect();
        softmax_in_place(&mut alpha);
        if alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("attention scores"));
        }
        let oi = out.row_mut(i);
        for (&j, &aij) in nbrs.iter().zip(&alpha) {
            axpy(oi, aij, h_prev.row(j));
        }
        rows.push(nbrs.iter().copied().zip(alpha).collect());
        scores.push(s);
    }
    if !out.is_finite() {
        return Err(Error::NonFinite("propagated features"));
    }
    let cache = LayerCache {
        input: h_prev.clone(),
        dst_proj,
        src_proj,
        scores,
        attention: AttentionMatrix { rows },
    };
    Ok((out, cache))
}

pub fn attention_scores(
    model: &VerbalizerModel,
    layer: usize,
    h_prev: &Matrix,
    graph: &AnswerGraph,
) -> Result<AttentionMatrix> {
    check_layer(model, layer, h_prev, graph)?;
    let (_, cache) = layer_forward(model, layer, h_prev, &graph.neighborhoods())?;
    Ok(cache.attention)
}

pub fn propagate_layer(
    model: &VerbalizerModel,
    layer: usize,
    h_prev: &Matrix,
    graph: &AnswerGraph,
) -> Result<Matrix> {
    check_layer(model, layer, h_prev, graph)?;
    let (out, _) = layer_forward(model, layer, h_prev, &graph.neighborhoods())?;
    Ok(out)
}

/// Runs all layers over the whole graph. With `ε = 1` the layers are skipped
/// and `Ĥ` is exactly `V`.
pub fn forward(
    model: &VerbalizerModel,
    graph: &AnswerGraph,
) -> Result<(SmoothedEmbeddings, ForwardCache)> {
    let input = input_matrix(graph);
    let neighborhoods = graph.neighborhoods();
    let labels = graph.original_labels();
    let orig = graph.original();
    let eps = model.epsilon;

    let mut smoothed = Matrix::zeros(orig.len(), graph.dim());
    for (r, &i) in orig.iter().enumerate() {
        smoothed.row_mut(r).copy_from_slice(input.row(i));
    }
    let mut cache = ForwardCache {
        n_nodes: graph.len(),
        n_edges: graph.edges().len(),
        epsilon: eps,
        neighborhoods,
        layers: Vec::with_capacity(model.num_layers()),
    };
    if eps == 1.0 {
        return Ok((
            SmoothedEmbeddings {
                labels,
                rows: smoothed,
            },
            cache,
        ));
    }

    check_layer(model, 0, &input, graph)?;
    let mut h = input;
    for l in 0..model.num_layers() {
        let (next, lc) = layer_forward(model, l, &h, &cache.neighborhoods)?;
        cache.layers.push(lc);
        h = next;
    }
    for (r, &i) in orig.iter().enumerate() {
        for (o, &hv) in smoothed.row_mut(r).iter_mut().zip(h.row(i)) {
            *o = eps * *o + (1.0 - eps) * hv;
        }
    }
    Ok((
        SmoothedEmbeddings {
            labels,
            rows: smoothed,
        },
        cache,
    ))
}

pub fn smooth_embeddings(
    model: &VerbalizerModel,
    graph: &AnswerGraph,
) -> Result<SmoothedEmbeddings> {
    forward(model, graph).map(|(s, _)| s)
}

/// Reverse-mode derivatives of a scalar loss with respect to every `W_src`
/// and `W_dst`, given `upstream = ∂loss/∂Ĥ`.
pub fn verbalizer_gradients(
    model: &VerbalizerModel,
    graph: &AnswerGraph,
    cache: &ForwardCache,
    upstream: &Matrix,
) -> Result<VerbalizerGrads> {
    if cache.n_nodes != graph.len()
        || cache.n_edges != graph.edges().len()
        || cache.epsilon != model.epsilon
        || (model.epsilon != 1.0 && cache.layers.len() != model.num_layers())
    {
        return Err(Error::CacheMismatch);
    }
    let orig = graph.original();
    if upstream.rows() != orig.len() || upstream.cols() != model.dim() {
        return Err(Error::Shape {
            context: "upstream gradient",
            expected: orig.len() * model.dim(),
            found: upstream.rows() * upstream.cols(),
        });
    }

    let mut grads = VerbalizerGrads::zeros(model);
    if model.epsilon == 1.0 {
        return Ok(grads);
    }

    // ∂loss/∂h^(L): only original rows receive signal, scaled by (1 − ε).
    let mut g = Matrix::zeros(graph.len(), model.dim());
    for (r, &i) in orig.iter().enumerate() {
        axpy(g.row_mut(i), 1.0 - model.epsilon, upstream.row(r));
    }

    for l in (0..model.num_layers()).rev() {
        let lc = &cache.layers[l];
        let w = &model.layers[l];
        let n = graph.len();
        let d = model.dim();
        let mut g_in = Matrix::zeros(n, d);
        let mut g_dst = Matrix::zeros(n, d);
        let mut g_src = Matrix::zeros(n, d);

        for (i, nbrs) in cache.neighborhoods.iter().enumerate() {
            let gi = g.row(i);
            if gi.iter().all(|&x| x == 0.0) {
                continue;
            }
            let row = lc.attention.row(i);
            let d_alpha: Vec<f64> = nbrs.iter().map(|&j| dot(gi, lc.input.row(j))).collect();
            let mean: f64 = row.iter().zip(&d_alpha).map(|((_, a), da)| a * da).sum();
            for (k, &j) in nbrs.iter().enumerate() {
                let alpha = row[k].1;
                axpy(g_in.row_mut(j), alpha, gi);
                let d_lrelu = if lc.scores[i][k] >= 0.0 {
                    1.0
                } else {
                    model.leaky_slope
                };
                let ds = alpha * (d_alpha[k] - mean) * d_lrelu;
                if ds != 0.0 {
                    axpy(g_dst.row_mut(i), ds, lc.src_proj.row(j));
                    axpy(g_src.row_mut(j), ds, lc.dst_proj.row(i));
                }
            }
        }

        let gw = &mut grads.layers[l];
        for i in 0..n {
            gw.w_dst.add_outer(1.0, g_dst.row(i), lc.input.row(i));
            gw.w_src.add_outer(1.0, g_src.row(i), lc.input.row(i));
        }
        if l > 0 {
            for i in 0..n {
                let back_dst = w.w_dst.matvec_t(g_dst.row(i))?;
                let back_src = w.w_src.matvec_t(g_src.row(i))?;
                let gi = g_in.row_mut(i);
                axpy(gi, 1.0, &back_dst);
                axpy(gi, 1.0, &back_src);
            }
            g = g_in;
        }
    }
    Ok(grads)
}

/// All-layer attention weights over the full graph, regardless of ε.
pub fn layer_attentions(
    model: &VerbalizerModel,
    graph: &AnswerGraph,
) -> Result<Vec<AttentionMatrix>> {
    let mut h = input_matrix(graph);
    check_layer(model, 0, &h, graph)?;
    let neighborhoods = graph.neighborhoods();
    let mut out = Vec::with_capacity(model.num_layers());
    for l in 0..model.num_layers() {
        let (next, lc) = layer_forward(model, l, &h, &neighborhoods)?;
        out.push(lc.attention);
        h = next;
    }
    Ok(out)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// CSV `layer,dst_label,src_label,alpha`, layers numbered from 1.
pub fn write_attention_csv<W: Write>(
    model: &VerbalizerModel,
    graph: &AnswerGraph,
    mut out: W,
) -> Result<()> {
    let io = |e| Error::io("attention csv", e);
    writeln!(out, "layer,dst_label,src_label,alpha").map_err(io)?;
    let nodes = graph.nodes();
    for (l, att) in layer_attentions(model, graph)?.iter().enumerate() {
        for (i, row) in att.rows().iter().enumerate() {
            for &(j, a) in row {
                writeln!(
                    out,
                    "{},{},{},{}",
                    l + 1,
                    csv_field(nodes[i].label.as_str()),
                    csv_field(nodes[j].label.as_str()),
                    a
                )
                .map_err(io)?;
            }
        }
    }
    Ok(())
}
