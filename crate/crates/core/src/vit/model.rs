use super::image::{patchify, ImageTensor, PatchGrid};
use super::tensor::{argmax, gelu, layer_norm, softmax, Matrix};
use super::weights::ModelWeights;
use super::VitError;

/// Encoder activations: row 0 is the class token, row `j > 0` comes from
/// patch `source_indices[j - 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    tokens: Matrix,
    source_indices: Vec<usize>,
}

impl TokenSequence {
    /// Source indices must be distinct. `embed` always produces them in
    /// increasing order; other orders are accepted so that row-permutation
    /// behaviour can be exercised directly.
    pub fn new(tokens: Matrix, source_indices: Vec<usize>) -> Result<Self, VitError> {
        if tokens.rows() != source_indices.len() + 1 {
            return Err(VitError::Dimension {
                what: "token rows",
                expected: source_indices.len() + 1,
                found: tokens.rows(),
            });
        }
        let mut sorted = source_indices.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(VitError::UnsortedIndices);
        }
        Ok(Self { tokens, source_indices })
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    pub fn source_indices(&self) -> &[usize] {
        &self.source_indices
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    /// Reorders the patch rows: new patch row `j` is old patch row `perm[j]`.
    pub fn permute_patches(&self, perm: &[usize]) -> Result<Self, VitError> {
        let k = self.source_indices.len();
        if perm.len() != k {
            return Err(VitError::Dimension { what: "permutation", expected: k, found: perm.len() });
        }
        let rows: Vec<usize> = std::iter::once(0).chain(perm.iter().map(|&p| p + 1)).collect();
        let src = perm.iter().map(|&p| self.source_indices[p]).collect();
        Self::new(self.tokens.select_rows(&rows), src)
    }
}

/// One encoder layer's attention as computed.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttention {
    heads: usize,
    tokens: usize,
    /// `heads × tokens × tokens`, softmax-normalised rows.
    weights: Vec<f64>,
    /// `heads × tokens`: pre-softmax scaled logits of the class-token query.
    class_logits: Vec<f64>,
    /// The layer's input `z_{l-1}` (before LN).
    input: Matrix,
}

impl LayerAttention {
    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// Attention row for `query` in head `head`.
    pub fn row(&self, head: usize, query: usize) -> &[f64] {
        let t = self.tokens;
        let start = (head * t + query) * t;
        &self.weights[start..start + t]
    }

    /// Head-`head` matrix as a dense `tokens × tokens` matrix.
    pub fn matrix(&self, head: usize) -> Matrix {
        let t = self.tokens;
        Matrix::from_vec(t, t, self.weights[head * t * t..(head + 1) * t * t].to_vec())
    }

    /// Scaled `q_cls · kᵀ / √D_h` over all keys (class key first).
    pub fn class_logits(&self, head: usize) -> &[f64] {
        &self.class_logits[head * self.tokens..(head + 1) * self.tokens]
    }

    pub fn input(&self) -> &Matrix {
        &self.input
    }

    /// Builds a layer record from per-head matrices and class logits.
    pub fn from_parts(heads: Vec<Matrix>, class_logits: Vec<Vec<f64>>, input: Matrix) -> Self {
        let tokens = heads.first().map_or(0, Matrix::rows);
        let weights = heads.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
        Self { heads: heads.len(), tokens, weights, class_logits: class_logits.concat(), input }
    }
}

/// Everything a forward pass produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub layers: Vec<LayerAttention>,
    /// Patch ids of token rows `1..`.
    pub source_indices: Vec<usize>,
}

impl ForwardTrace {
    pub fn label(&self) -> usize {
        argmax(&self.logits)
    }

    /// Largest class probability.
    pub fn confidence(&self) -> f64 {
        self.probs.iter().copied().fold(0.0, f64::max)
    }
}

/// Linear patch embedding plus each patch's own position row. Absent patches
/// contribute no rows.
pub fn embed(grid: &PatchGrid, w: &ModelWeights) -> Result<TokenSequence, VitError> {
    let dims = &w.dims;
    if grid.patch_size() != dims.patch_size || grid.channels() != dims.channels {
        return Err(VitError::Dimension { what: "patch length", expected: dims.patch_len(), found: grid.patch_len() });
    }
    let d = dims.embed_dim;
    let k = grid.len();
    let mut tokens = Matrix::zeros(k + 1, d);
    for (t, (&c, &p)) in tokens.row_mut(0).iter_mut().zip(w.cls_token.iter().zip(w.pos_embed.row(0))) {
        *t = c + p;
    }
    let c = dims.channels;
    let mut normed = vec![0.0; grid.patch_len()];
    for (j, &src) in grid.patch_indices().iter().enumerate() {
        if src >= dims.max_patches {
            return Err(VitError::PatchIndex { index: src, limit: dims.max_patches });
        }
        for (i, (n, &v)) in normed.iter_mut().zip(grid.patch(j)).enumerate() {
            *n = w.preprocess.normalize(v, i % c);
        }
        let projected = Matrix::vecmul(&normed, &w.patch_embed);
        let pos = w.pos_embed.row(src + 1);
        for (((t, p), b), e) in tokens.row_mut(j + 1).iter_mut().zip(projected).zip(&w.patch_embed_bias).zip(pos) {
            *t = p + b + e;
        }
    }
    TokenSequence::new(tokens, grid.patch_indices().to_vec())
}

fn add_bias(m: &mut Matrix, bias: &[f64]) {
    for r in 0..m.rows() {
        for (v, b) in m.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn norm_rows(z: &Matrix, gamma: &[f64], beta: &[f64], eps: f64) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..z.rows()).map(|r| layer_norm(z.row(r), gamma, beta, eps)).collect();
    Matrix::from_rows(&rows)
}

/// Runs the encoder; returns `LN(z_L^0)` and the per-layer attention.
fn encode(seq: &TokenSequence, w: &ModelWeights) -> Result<(Vec<f64>, Vec<LayerAttention>), VitError> {
    let dims = &w.dims;
    let d = dims.embed_dim;
    if seq.tokens.cols() != d {
        return Err(VitError::Dimension { what: "embed width", expected: d, found: seq.tokens.cols() });
    }
    let (heads, dh) = (dims.heads, dims.head_dim);
    let inner = heads * dh;
    let t = seq.len();
    let scale = 1.0 / (dh as f64).sqrt();
    let eps = dims.ln_eps;

    let mut z = seq.tokens.clone();
    let mut layers = Vec::with_capacity(w.layers.len());
    for lw in &w.layers {
        let input = z.clone();
        let mut qkv = norm_rows(&z, &lw.ln1_gamma, &lw.ln1_beta, eps).matmul(&lw.qkv);
        add_bias(&mut qkv, &lw.qkv_bias);

        let mut weights = Vec::with_capacity(heads * t * t);
        let mut class_logits = Vec::with_capacity(heads * t);
        let mut concat = Matrix::zeros(t, inner);
        for h in 0..heads {
            let (qo, ko, vo) = (h * dh, inner + h * dh, 2 * inner + h * dh);
            for i in 0..t {
                let q = &qkv.row(i)[qo..qo + dh];
                let logits: Vec<f64> = (0..t)
                    .map(|j| {
                        let k = &qkv.row(j)[ko..ko + dh];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale
                    })
                    .collect();
                let row = softmax(&logits);
                if i == 0 {
                    class_logits.extend_from_slice(&logits);
                }
                let out = &mut concat.row_mut(i)[qo..qo + dh];
                for (j, &a) in row.iter().enumerate() {
                    let v = &qkv.row(j)[vo..vo + dh];
                    for (o, &vv) in out.iter_mut().zip(v) {
                        *o += a * vv;
                    }
                }
                weights.extend(row);
            }
        }
        let mut attn_out = concat.matmul(&lw.proj);
        add_bias(&mut attn_out, &lw.proj_bias);
        for r in 0..t {
            for (zv, a) in z.row_mut(r).iter_mut().zip(attn_out.row(r)) {
                *zv += a;
            }
        }

        let mut hidden = norm_rows(&z, &lw.ln2_gamma, &lw.ln2_beta, eps).matmul(&lw.fc1);
        add_bias(&mut hidden, &lw.fc1_bias);
        for r in 0..t {
            for v in hidden.row_mut(r) {
                *v = gelu(*v);
            }
        }
        let mut mlp_out = hidden.matmul(&lw.fc2);
        add_bias(&mut mlp_out, &lw.fc2_bias);
        for r in 0..t {
            for (zv, m) in z.row_mut(r).iter_mut().zip(mlp_out.row(r)) {
                *zv += m;
            }
        }

        layers.push(LayerAttention { heads, tokens: t, weights, class_logits, input });
    }

    Ok((layer_norm(z.row(0), &w.norm_gamma, &w.norm_beta, eps), layers))
}

/// The image representation fed to the head.
pub fn class_representation(seq: &TokenSequence, w: &ModelWeights) -> Result<Vec<f64>, VitError> {
    Ok(encode(seq, w)?.0)
}

/// Pre-norm encoder stack followed by the class-token head.
pub fn forward(seq: &TokenSequence, w: &ModelWeights) -> Result<ForwardTrace, VitError> {
    let (y, layers) = encode(seq, w)?;
    let mut logits = Matrix::vecmul(&y, &w.head);
    for (l, b) in logits.iter_mut().zip(&w.head_bias) {
        *l += b;
    }
    let probs = softmax(&logits);
    Ok(ForwardTrace { logits, probs, layers, source_indices: seq.source_indices.clone() })
}

/// Runs the model on a (possibly partial) patch grid.
pub fn classify_grid(grid: &PatchGrid, w: &ModelWeights) -> Result<(usize, ForwardTrace), VitError> {
    let trace = forward(&embed(grid, w)?, w)?;
    Ok((trace.label(), trace))
}

/// Full-image classification; label ties go to the smallest class id.
pub fn classify(img: &ImageTensor, w: &ModelWeights) -> Result<(usize, ForwardTrace), VitError> {
    if img.channels() != w.dims.channels {
        return Err(VitError::Dimension { what: "channels", expected: w.dims.channels, found: img.channels() });
    }
    classify_grid(&patchify(img, w.dims.patch_size)?, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::weights::Dims;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn dims() -> Dims {
        Dims {
            embed_dim: 8,
            head_dim: 4,
            heads: 2,
            layers: 2,
            classes: 4,
            patch_size: 4,
            channels: 3,
            max_patches: 16,
            mlp_hidden: 16,
            ln_eps: 1e-6,
        }
    }

    fn random_weights(seed: u64) -> ModelWeights {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        ModelWeights::from_fn(dims(), |name, _| {
            if name.ends_with("gamma") {
                1.0 + rng.random_range(-0.1..0.1)
            } else {
                rng.random_range(-0.5..0.5)
            }
        })
    }

    fn random_image(seed: u64, h: usize, w: usize) -> ImageTensor {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        ImageTensor::new(h, w, 3, (0..h * w * 3).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let w = ModelWeights::zeros(dims());
        let (label, trace) = classify(&random_image(1, 8, 8), &w).unwrap();
        assert_eq!(trace.probs, vec![0.25; 4]);
        assert_eq!(label, 0);
    }

    #[test]
    fn full_grid_shape() {
        let w = random_weights(3);
        let grid = patchify(&random_image(2, 16, 16), 4).unwrap();
        let seq = embed(&grid, &w).unwrap();
        assert_eq!((seq.len(), seq.tokens().cols()), (17, 8));
    }

    #[test]
    fn subset_embed_uses_own_position() {
        let w = random_weights(4);
        let grid = patchify(&random_image(5, 8, 8), 4).unwrap();
        let sub = embed(&grid.subset(&[0]).unwrap(), &w).unwrap();
        assert_eq!(sub.len(), 2);
        let full = embed(&grid, &w).unwrap();
        assert_eq!(sub.tokens().row(1), full.tokens().row(1));

        // Zeroing everything except E_pos[1] makes row 1 equal that row exactly.
        let w2 =
            ModelWeights::from_fn(
                dims(),
                |name, i| {
                    if name == "pos_embed" && (8..16).contains(&i) {
                        i as f64
                    } else {
                        0.0
                    }
                },
            );
        let seq = embed(&grid.subset(&[0]).unwrap(), &w2).unwrap();
        assert_eq!(seq.tokens().row(1), w2.pos_embed.row(1));
        assert!(seq.tokens().row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_range_position_rejected() {
        let mut d = dims();
        d.max_patches = 2;
        let w = ModelWeights::zeros(d);
        let grid = patchify(&random_image(6, 8, 8), 4).unwrap();
        assert!(matches!(embed(&grid, &w), Err(VitError::PatchIndex { index: 2, limit: 2 })));
    }

    #[test]
    fn class_token_only() {
        let w = random_weights(7);
        let grid = patchify(&random_image(8, 8, 8), 4).unwrap();
        let empty = grid.subset(&[]).unwrap();
        let trace = forward(&embed(&empty, &w).unwrap(), &w).unwrap();
        for layer in &trace.layers {
            assert_eq!(layer.tokens(), 1);
            for h in 0..layer.heads() {
                assert_eq!(layer.row(h, 0), &[1.0]);
            }
        }
    }

    #[test]
    fn rows_normalised_and_deterministic() {
        let w = random_weights(9);
        let img = random_image(10, 16, 16);
        let (_, a) = classify(&img, &w).unwrap();
        let (_, b) = classify(&img, &w).unwrap();
        assert_eq!(a, b);
        assert!((a.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for layer in &a.layers {
            for h in 0..layer.heads() {
                for q in 0..layer.tokens() {
                    assert!((layer.row(h, q).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dominant_head_column_wins() {
        // Column 2 of the head gets a large bias: label 2 for any input.
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
        let w = ModelWeights::from_fn(dims(), |name, i| match name {
            "head.bias" if i == 2 => 100.0,
            n if n.ends_with("gamma") => 1.0,
            _ => rng.random_range(-0.3..0.3),
        });
        for s in 0..20 {
            assert_eq!(classify(&random_image(100 + s, 8, 8), &w).unwrap().0, 2);
        }
    }

    #[test]
    fn tied_logits_pick_lowest_class() {
        let d = Dims { classes: 6, ..dims() };
        let w = ModelWeights::from_fn(d, |name, i| match name {
            "head.bias" => [0.0, 1.0, 5.0, 2.0, 0.0, 5.0][i],
            _ => 0.0,
        });
        let (label, trace) = classify(&random_image(12, 8, 8), &w).unwrap();
        assert_eq!(trace.logits[2], trace.logits[5]);
        assert_eq!(label, 2);
    }

    #[test]
    fn classify_is_the_composition() {
        let w = random_weights(13);
        let img = random_image(14, 8, 16);
        let (label, trace) = classify(&img, &w).unwrap();
        let manual = forward(&embed(&patchify(&img, 4).unwrap(), &w).unwrap(), &w).unwrap();
        assert_eq!(trace, manual);
        assert_eq!(label, argmax(&manual.logits));
    }

    #[test]
    fn wrong_width_rejected() {
        let w = random_weights(15);
        let seq = TokenSequence::new(Matrix::zeros(3, 5), vec![0, 1]).unwrap();
        assert!(matches!(forward(&seq, &w), Err(VitError::Dimension { .. })));
    }
}
