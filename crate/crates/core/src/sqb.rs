//! Semantic query booster: enriches learnable object queries by
//! cross-attending to a text-image similarity map and a semantic
//! aggregation map built from per-class text embeddings.

use crate::autodiff::{no_grad, Tensor};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Mlp2, MultiHeadAttention};
use crate::prompts::TextEmbedTable;
use ndarray::{Array2, Array3, Ix2};
use rand_chacha::ChaCha8Rng;

/// Attention-pooled, unit-normalized visual features (`H' x W' x D_emb`).
#[derive(Debug, Clone)]
pub struct DenseVisualFeatures {
    pub values: Array3<f64>,
}

/// Cosine similarities between visual features and class embeddings
/// (`H' x W' x C`).
#[derive(Debug, Clone)]
pub struct SimilarityMap {
    pub values: Array3<f64>,
}

/// Per-pixel winning class index plus the gathered class embedding.
#[derive(Debug, Clone)]
pub struct SemanticAggregationMap {
    /// `H' x W'`, each in `[0, C)`.
    pub indices: Array2<usize>,
    /// `H' x W' x D_emb`; row `[h, w]` is exactly the selected table row.
    pub values: Array3<f64>,
}

/// Boosted queries (`N x D_q`).
#[derive(Debug, Clone)]
pub struct SemanticQueries {
    pub values: Array2<f64>,
}

/// Spatial self-attention over the coarsest feature scale, followed by a
/// learned projection to the text-embedding width and L2 normalization.
/// Keeps the `H' x W'` grid.
#[derive(Debug, Clone)]
pub struct AttentionPool {
    pub attn: MultiHeadAttention,
    pub proj: Linear,
}

impl AttentionPool {
    pub fn new(d_in: usize, d_emb: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            attn: MultiHeadAttention::new(d_in, d_in, d_emb, heads, rng),
            proj: Linear::new(d_emb, d_emb, rng),
        }
    }

    /// Graph path. `f5` is `[D, H', W']`; output rows are
    /// `[(H'*W'), D_emb]`, unit-norm.
    pub fn forward_tensor(&self, f5: &Tensor) -> Tensor {
        let shape = f5.shape();
        let (d, h, w) = (shape[0], shape[1], shape[2]);
        let tokens = f5.reshape(&[d, h * w]).transpose2();
        let pooled = self.attn.forward(&tokens, &tokens);
        self.proj.forward(&pooled).normalize_rows(1e-12)
    }

    /// Contract surface over a plain feature map.
    pub fn forward(&self, f5: &Array3<f64>) -> Result<DenseVisualFeatures> {
        if f5.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("attention_pool input must be finite"));
        }
        let (_, h, w) = f5.dim();
        let out = no_grad(|| self.forward_tensor(&Tensor::constant(f5.clone().into_dyn())));
        let flat = out.to_array().into_dimensionality::<Ix2>().expect("2-d");
        let d_emb = flat.ncols();
        let mut values = Array3::<f64>::zeros((h, w, d_emb));
        for y in 0..h {
            for x in 0..w {
                for c in 0..d_emb {
                    values[[y, x, c]] = flat[[y * w + x, c]];
                }
            }
        }
        Ok(DenseVisualFeatures { values })
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.attn.params(&format!("{prefix}.attn"), out);
        self.proj.params(&format!("{prefix}.proj"), out);
    }
}

/// Graph path: similarity logits `[(H'*W'), C]` from pooled tokens.
pub fn similarity_tokens(f_v: &Tensor, table: &TextEmbedTable) -> Result<Tensor> {
    let d = f_v.shape()[1];
    if d != table.dim() {
        return Err(Error::shape(
            &[table.dim()],
            &[d],
            "similarity_map embedding width",
        ));
    }
    let e_t = Tensor::constant(table.embeddings.t().to_owned().into_dyn());
    Ok(f_v.matmul(&e_t))
}

/// Dot products between dense visual features and every class embedding.
pub fn similarity_map(f_v: &DenseVisualFeatures, table: &TextEmbedTable) -> Result<SimilarityMap> {
    let (h, w, d) = f_v.values.dim();
    if d != table.dim() {
        return Err(Error::shape(
            &[table.dim()],
            &[d],
            "similarity_map embedding width",
        ));
    }
    let c = table.num_classes();
    let mut values = Array3::<f64>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                let mut dot = 0.0;
                for j in 0..d {
                    dot += f_v.values[[y, x, j]] * table.embeddings[[k, j]];
                }
                values[[y, x, k]] = dot;
            }
        }
    }
    Ok(SimilarityMap { values })
}

/// Per-pixel argmax over classes (ties break to the lowest index) and the
/// bit-exact gather of the winning class embeddings.
pub fn aggregate_semantics(
    similarity: &SimilarityMap,
    table: &TextEmbedTable,
) -> Result<SemanticAggregationMap> {
    let (h, w, c) = similarity.values.dim();
    if c != table.num_classes() {
        return Err(Error::shape(
            &[table.num_classes()],
            &[c],
            "aggregate_semantics class count",
        ));
    }
    let d = table.dim();
    let mut indices = Array2::<usize>::zeros((h, w));
    let mut values = Array3::<f64>::zeros((h, w, d));
    for y in 0..h {
        for x in 0..w {
            let mut best = 0usize;
            let mut best_val = similarity.values[[y, x, 0]];
            for k in 1..c {
                let v = similarity.values[[y, x, k]];
                if v > best_val {
                    best_val = v;
                    best = k;
                }
            }
            indices[[y, x]] = best;
            for j in 0..d {
                values[[y, x, j]] = table.embeddings[[best, j]];
            }
        }
    }
    Ok(SemanticAggregationMap { indices, values })
}

/// Boosts object queries through two sequential cross-attention blocks:
/// first against the projected similarity map, then against the projected
/// aggregation map, each with a residual and layer norm.
#[derive(Debug, Clone)]
pub struct QueryBooster {
    pub s_proj: Mlp2,
    pub sa_proj: Mlp2,
    pub attn_s: MultiHeadAttention,
    pub norm_s: LayerNorm,
    pub attn_sa: MultiHeadAttention,
    pub norm_sa: LayerNorm,
}

impl QueryBooster {
    pub fn new(
        num_classes: usize,
        d_emb: usize,
        d_q: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            s_proj: Mlp2::new(num_classes, d_q, d_q, rng),
            sa_proj: Mlp2::new(d_emb, d_q, d_q, rng),
            attn_s: MultiHeadAttention::new(d_q, d_q, d_q, heads, rng),
            norm_s: LayerNorm::new(d_q),
            attn_sa: MultiHeadAttention::new(d_q, d_q, d_q, heads, rng),
            norm_sa: LayerNorm::new(d_q),
        }
    }

    /// `queries: [N, D_q]`, `similarity: [(H'*W'), C]` (graph),
    /// `aggregation: [(H'*W'), D_emb]` (constant: the argmax gather carries
    /// no gradient).
    pub fn forward(&self, queries: &Tensor, similarity: &Tensor, aggregation: &Tensor) -> Tensor {
        let s_tokens = self.s_proj.forward(similarity);
        let x = self
            .norm_s
            .forward(&queries.add(&self.attn_s.forward(queries, &s_tokens)));
        let sa_tokens = self.sa_proj.forward(aggregation);
        self.norm_sa
            .forward(&x.add(&self.attn_sa.forward(&x, &sa_tokens)))
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.s_proj.params(&format!("{prefix}.s_proj"), out);
        self.sa_proj.params(&format!("{prefix}.sa_proj"), out);
        self.attn_s.params(&format!("{prefix}.attn_s"), out);
        self.norm_s.params(&format!("{prefix}.norm_s"), out);
        self.attn_sa.params(&format!("{prefix}.attn_sa"), out);
        self.norm_sa.params(&format!("{prefix}.norm_sa"), out);
    }
}

/// Full booster unit: pool, compare, aggregate, boost.
#[derive(Debug, Clone)]
pub struct SqbModule {
    pub pool: AttentionPool,
    pub booster: QueryBooster,
}

impl SqbModule {
    pub fn new(
        d_f5: usize,
        d_emb: usize,
        d_q: usize,
        num_classes: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            pool: AttentionPool::new(d_f5, d_emb, heads, rng),
            booster: QueryBooster::new(num_classes, d_emb, d_q, heads, rng),
        }
    }

    /// Boost `queries` using the coarsest feature scale (graph tensor,
    /// `[D, H', W']`) and the class embedding table.
    pub fn boost(&self, queries: &Tensor, f5: &Tensor, table: &TextEmbedTable) -> Result<Tensor> {
        let f_v = self.pool.forward_tensor(f5);
        let similarity = similarity_tokens(&f_v, table)?;

        // Argmax gather on detached similarities; piecewise constant, so it
        // deliberately contributes no gradient path.
        let sim_values = similarity.to_array().into_dimensionality::<Ix2>().expect("2-d");
        let (tokens, c) = sim_values.dim();
        let mut gathered = Array2::<f64>::zeros((tokens, table.dim()));
        for t in 0..tokens {
            let mut best = 0usize;
            for k in 1..c {
                if sim_values[[t, k]] > sim_values[[t, best]] {
                    best = k;
                }
            }
            gathered.row_mut(t).assign(&table.embeddings.row(best));
        }
        let aggregation = Tensor::constant(gathered.into_dyn());
        Ok(self.booster.forward(queries, &similarity, &aggregation))
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.pool.params(&format!("{prefix}.pool"), out);
        self.booster.params(&format!("{prefix}.booster"), out);
    }
}
