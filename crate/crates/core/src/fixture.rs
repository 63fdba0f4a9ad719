//! Deterministic desk-scale fixture: a labelled 32×32×3 image set with four
//! colour-coded classes and a client/server weight pair.
//!
//! Encoder weights are random apart from the attention heads, which are set
//! by hand to attend to colourful patches (see [`salient_weights`]). Only the
//! linear head is fitted, by ridge regression on the class-token
//! representation followed by a scalar temperature search. No gradient
//! training is involved.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::dataset::{Dataset, LabeledImage};
use crate::vit::tensor::softmax;
use crate::vit::{class_representation, embed, patchify, Dims, ImageTensor, Matrix, ModelWeights, PatchGrid};

pub const IMAGE_SIZE: usize = 32;
pub const PATCH_SIZE: usize = 8;
pub const CLASSES: usize = 4;
/// Images in the shipped evaluation set.
pub const EVAL_IMAGES: usize = 256;
const TRAIN_IMAGES: usize = 2048;

const EVAL_SEED: u64 = 0x5eed_0001;
const TRAIN_SEED: u64 = 0x5eed_0002;
const CLIENT_SEED: u64 = 0x5eed_0003;
const SERVER_SEED: u64 = 0x5eed_0004;

const PALETTE: [[f64; 3]; CLASSES] =
    [[220.0, 40.0, 40.0], [40.0, 200.0, 60.0], [50.0, 70.0, 230.0], [230.0, 210.0, 40.0]];

pub fn client_dims() -> Dims {
    Dims {
        embed_dim: 32,
        head_dim: 16,
        heads: 2,
        layers: 2,
        classes: CLASSES,
        patch_size: PATCH_SIZE,
        channels: 3,
        max_patches: (IMAGE_SIZE / PATCH_SIZE).pow(2),
        mlp_hidden: 64,
        ln_eps: 1e-6,
    }
}

pub fn server_dims() -> Dims {
    Dims { embed_dim: 64, head_dim: 16, heads: 4, layers: 4, mlp_hidden: 128, ..client_dims() }
}

fn paint(pixels: &mut [f64], x0: usize, y0: usize, size: usize, color: &[f64; 3], alpha: f64) {
    for y in y0..(y0 + size).min(IMAGE_SIZE) {
        for x in x0..(x0 + size).min(IMAGE_SIZE) {
            for c in 0..3 {
                let p = &mut pixels[(y * IMAGE_SIZE + x) * 3 + c];
                *p = (1.0 - alpha) * *p + alpha * color[c];
            }
        }
    }
}

/// One image of class `label`: a noisy grey background, a class-coloured
/// square of random size, position and opacity, and sometimes a fainter
/// square of another class's colour.
pub fn generate_image(rng: &mut impl Rng, label: usize) -> ImageTensor {
    let mut px = vec![0.0; IMAGE_SIZE * IMAGE_SIZE * 3];
    for chunk in px.chunks_mut(3) {
        let g: f64 = rng.random_range(70.0..180.0);
        for v in chunk {
            *v = g + rng.random_range(-20.0..20.0);
        }
    }
    let size = rng.random_range(6..=16);
    let (x0, y0) = (rng.random_range(0..=IMAGE_SIZE - size), rng.random_range(0..=IMAGE_SIZE - size));
    paint(&mut px, x0, y0, size, &PALETTE[label], rng.random_range(0.3..0.95));
    if rng.random_bool(0.5) {
        let other = (label + rng.random_range(1..CLASSES)) % CLASSES;
        let s = rng.random_range(4..=10);
        let (x, y) = (rng.random_range(0..=IMAGE_SIZE - s), rng.random_range(0..=IMAGE_SIZE - s));
        paint(&mut px, x, y, s, &PALETTE[other], rng.random_range(0.2..0.7));
    }
    let pixels = px.iter().map(|v| (v + rng.random_range(-12.0..12.0)).round().clamp(0.0, 255.0) as u8).collect();
    ImageTensor::new(IMAGE_SIZE, IMAGE_SIZE, 3, pixels).expect("fixed shape")
}

pub fn generate_dataset(count: usize, seed: u64) -> Dataset {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let images = (0..count)
        .map(|i| {
            let label = rng.random_range(0..CLASSES);
            LabeledImage {
                name: format!("img{i:04}.pcim"),
                image: generate_image(&mut rng, label),
                label: Some(label as u32),
            }
        })
        .collect();
    Dataset { images }
}

/// Uniform Xavier-style weights with unit LN gains. The head is random too, so
/// an unfitted model still has input-dependent logits.
pub fn random_weights(dims: Dims, seed: u64) -> ModelWeights {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let d = dims.embed_dim as f64;
    let bound = |fan_in: usize| (3.0 / fan_in as f64).sqrt();
    ModelWeights::from_fn(dims, |name, _| {
        let tail = name.rsplit('.').next().unwrap_or(name);
        match (name, tail) {
            (_, "gamma") => 1.0,
            (_, "beta") => 0.0,
            ("head.weight", _) => rng.random_range(-1.0..1.0) * 4.0 * (3.0 / d).sqrt(),
            (_, "bias") => rng.random_range(-0.02..0.02),
            ("patch_embed.weight", _) => rng.random_range(-1.0..1.0) * bound(dims.patch_len()),
            ("cls_token", _) | ("pos_embed", _) => rng.random_range(-0.1..0.1),
            (n, _) if n.ends_with("fc2.weight") => rng.random_range(-1.0..1.0) * bound(dims.mlp_hidden),
            (n, _) if n.ends_with("proj.weight") => rng.random_range(-1.0..1.0) * bound(dims.heads * dims.head_dim),
            _ => rng.random_range(-1.0..1.0) * (3.0 / d).sqrt(),
        }
    })
}

/// Dimensions 0 and 1 of the residual stream carry the patch's mean R−G and
/// G−B contrast; no layer writes to them.
const CONTRAST_DIMS: usize = 2;
/// Query bias of the saliency heads, large enough to concentrate attention.
const SALIENCY_GAIN: f64 = 8.0;

/// [`random_weights`] with every attention head steered toward colourful
/// patches. Grey background has zero contrast, so the class query attends to
/// coloured squares: even heads follow R−G minus G−B (red, blue), odd heads
/// the opposite sign (green, yellow).
pub fn salient_weights(dims: Dims, seed: u64) -> ModelWeights {
    let mut w = random_weights(dims, seed);
    let d = dims.embed_dim;
    let (dh, inner) = (dims.head_dim, dims.heads * dims.head_dim);
    let pixels = (dims.patch_size * dims.patch_size) as f64;

    for i in 0..dims.patch_len() {
        let c = i % dims.channels;
        let r_minus_g = [1.0, -1.0, 0.0][c.min(2)] * 2.0 / pixels;
        let g_minus_b = [0.0, 1.0, -1.0][c.min(2)] * 2.0 / pixels;
        w.patch_embed.set(i, 0, r_minus_g);
        w.patch_embed.set(i, 1, g_minus_b);
    }
    for k in 0..CONTRAST_DIMS {
        w.patch_embed_bias[k] = 0.0;
        w.cls_token[k] = 0.0;
        for r in 0..w.pos_embed.rows() {
            w.pos_embed.set(r, k, 0.0);
        }
    }

    for layer in &mut w.layers {
        for k in 0..CONTRAST_DIMS {
            for r in 0..layer.proj.rows() {
                layer.proj.set(r, k, 0.0);
            }
            for r in 0..layer.fc2.rows() {
                layer.fc2.set(r, k, 0.0);
            }
            layer.proj_bias[k] = 0.0;
            layer.fc2_bias[k] = 0.0;
        }
        for h in 0..dims.heads {
            let sign = if h % 2 == 0 { 1.0 } else { -1.0 };
            for j in 0..dh {
                let (q, k) = (h * dh + j, inner + h * dh + j);
                for r in 0..d {
                    layer.qkv.set(r, q, 0.0);
                    layer.qkv.set(r, k, 0.0);
                }
                layer.qkv_bias[q] = if j == 0 { SALIENCY_GAIN } else { 0.0 };
                layer.qkv_bias[k] = 0.0;
            }
            let key = inner + h * dh;
            layer.qkv.set(0, key, sign);
            layer.qkv.set(1, key, -sign);
        }
    }
    // Round-trip so the in-memory model is exactly what the file stores.
    ModelWeights::from_bytes(&w.to_bytes()).expect("valid weights")
}

fn representation(grid: &PatchGrid, w: &ModelWeights) -> Vec<f64> {
    class_representation(&embed(grid, w).expect("fixture grid"), w).expect("fixture dims")
}

/// Fits `head` on `(grid, label)` pairs: ridge regression onto one-hot
/// targets, then the logit scale minimising mean cross-entropy on a grid.
pub fn fit_head(mut w: ModelWeights, samples: &[(PatchGrid, usize)]) -> ModelWeights {
    let d = w.dims.embed_dim;
    let l = w.dims.classes;
    let n = samples.len();
    let feats: Vec<Vec<f64>> = samples.iter().map(|(g, _)| representation(g, &w)).collect();
    let x = DMatrix::from_fn(n, d + 1, |i, j| if j == d { 1.0 } else { feats[i][j] });
    let t = DMatrix::from_fn(n, l, |i, c| if samples[i].1 == c { 1.0 } else { 0.0 });
    let gram = x.transpose() * &x + DMatrix::identity(d + 1, d + 1) * 1.0;
    let coef = gram.cholesky().expect("ridge system is positive definite").solve(&(x.transpose() * t));

    let raw_logits = |i: usize| -> Vec<f64> {
        let row = DVector::from_row_slice(x.row(i).transpose().as_slice());
        (0..l).map(|c| row.dot(&coef.column(c))).collect()
    };
    let logits: Vec<Vec<f64>> = (0..n).map(raw_logits).collect();
    let loss = |s: f64| -> f64 {
        logits
            .iter()
            .zip(samples)
            .map(|(z, (_, y))| -softmax(&z.iter().map(|v| v * s).collect::<Vec<_>>())[*y].max(1e-300).ln())
            .sum::<f64>()
            / n as f64
    };
    let scale = (0..60).map(|k| 10f64.powf(k as f64 / 20.0)).min_by(|a, b| loss(*a).total_cmp(&loss(*b))).unwrap();

    let head: Vec<f64> = (0..d).flat_map(|j| (0..l).map(move |c| (j, c))).map(|(j, c)| coef[(j, c)] * scale).collect();
    // Round-trip through f32 so the in-memory head matches the file.
    w.head = Matrix::from_vec(d, l, head.iter().map(|&v| f64::from(v as f32)).collect());
    w.head_bias = (0..l).map(|c| f64::from((coef[(d, c)] * scale) as f32)).collect();
    w
}

/// A random subset of `grid` keeping between a quarter and all patches.
fn random_subset(grid: &PatchGrid, rng: &mut impl Rng) -> PatchGrid {
    let n = grid.n_patches();
    let keep = rng.random_range(n / 4..=n).max(1);
    let mut idx = rand::seq::index::sample(rng, n, keep).into_vec();
    idx.sort_unstable();
    grid.subset(&idx).expect("indices from the grid")
}

pub struct ToyFixture {
    pub client: ModelWeights,
    pub server: ModelWeights,
    pub dataset: Dataset,
}

/// Builds the complete fixture. The server head is fitted on full images
/// plus random patch subsets so that it tolerates partial inputs.
pub fn toy_fixture() -> ToyFixture {
    let train = generate_dataset(TRAIN_IMAGES, TRAIN_SEED);
    let grids: Vec<(PatchGrid, usize)> = train
        .images
        .iter()
        .map(|im| (patchify(&im.image, PATCH_SIZE).expect("divisible"), im.label.unwrap() as usize))
        .collect();

    let client = fit_head(salient_weights(client_dims(), CLIENT_SEED), &grids);

    let mut rng = Xoshiro256PlusPlus::seed_from_u64(SERVER_SEED ^ 0xa5a5);
    let mut server_samples = grids.clone();
    server_samples.extend(grids.iter().map(|(g, y)| (random_subset(g, &mut rng), *y)));
    let server = fit_head(salient_weights(server_dims(), SERVER_SEED), &server_samples);

    ToyFixture { client, server, dataset: generate_dataset(EVAL_IMAGES, EVAL_SEED) }
}
