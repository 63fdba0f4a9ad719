use std::path::PathBuf;

use patchcast::attention::{mean_attention, AttentionMethod};
use patchcast::dataset::{encode_image, Dataset};
use patchcast::fixture::toy_fixture;
use patchcast::gate::{EntropyMeasure, GateSpec};
use patchcast::pipeline::{run_pipeline, DirectOffloader, PipelineConfig, Server};
use patchcast::selection::SelectionRule;
use patchcast::vit::{classify, patchify, ModelWeights};

fn dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/toy")
}

#[test]
fn shipped_fixture_is_reproducible() {
    let fx = toy_fixture();
    assert_eq!(fx.client.to_bytes(), std::fs::read(dir().join("client.swit")).unwrap());
    assert_eq!(fx.server.to_bytes(), std::fs::read(dir().join("server.swit")).unwrap());
    let shipped = Dataset::load(dir().join("dataset")).unwrap();
    assert_eq!(shipped.len(), fx.dataset.len());
    for (a, b) in shipped.images.iter().zip(&fx.dataset.images) {
        assert_eq!(a.name, b.name);
        assert_eq!(encode_image(&a.image, a.label), encode_image(&b.image, b.label));
    }
}

/// Mean-colour contrast `|R−G| + |G−B|` of a patch; background is near 0.
fn contrast(patch: &[u8]) -> f64 {
    let mut m = [0.0; 3];
    for px in patch.chunks(3) {
        for (acc, &v) in m.iter_mut().zip(px) {
            *acc += f64::from(v);
        }
    }
    let n = (patch.len() / 3) as f64;
    ((m[0] - m[1]).abs() + (m[1] - m[2]).abs()) / n
}

#[test]
fn client_attends_to_coloured_patches() {
    let client = ModelWeights::load(dir().join("client.swit")).unwrap();
    let ds = Dataset::load(dir().join("dataset")).unwrap();
    let (mut coloured, mut grey) = (Vec::new(), Vec::new());
    let mut top_is_vivid = 0;
    for im in &ds.images {
        let grid = patchify(&im.image, client.dims.patch_size).unwrap();
        let (_, trace) = classify(&im.image, &client).unwrap();
        let scores = mean_attention(&trace).unwrap().scores;
        let c: Vec<f64> = (0..grid.len()).map(|j| contrast(grid.patch(j))).collect();
        for (s, &cj) in scores.iter().zip(&c) {
            if cj > 30.0 {
                coloured.push(*s);
            } else if cj < 10.0 {
                grey.push(*s);
            }
        }
        let best = (0..scores.len()).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
        let mut by_contrast: Vec<f64> = c.clone();
        by_contrast.sort_by(|a, b| b.total_cmp(a));
        if c[best] >= by_contrast[2] {
            top_is_vivid += 1;
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mc, mg) = (mean(&coloured), mean(&grey));
    assert!(mc > 3.0 * mg, "coloured {mc:.4} vs grey {mg:.4}");
    // The most attended patch is among the three most colourful.
    assert!(top_is_vivid as f64 > 0.8 * ds.len() as f64, "{top_is_vivid} of {}", ds.len());
}

#[test]
fn attention_selection_beats_random_at_equal_cost() {
    let client = ModelWeights::load(dir().join("client.swit")).unwrap();
    let server = Server::new(ModelWeights::load(dir().join("server.swit")).unwrap());
    let ds = Dataset::load(dir().join("dataset")).unwrap();
    let accuracy = |rule| {
        let cfg = PipelineConfig {
            rule,
            gate: GateSpec { measure: EntropyMeasure::Min, eta: 0.0 },
            attention: AttentionMethod::MeanLastLayer,
            fail_fast: true,
        };
        run_pipeline(&cfg, &client, &ds, &mut DirectOffloader::new(&server)).unwrap().accuracy()
    };
    let top = accuracy(SelectionRule::TopK(4));
    let random = accuracy(SelectionRule::Random { count: 4, seed: 1 });
    assert!(top > random + 0.05, "top-4 {top} vs random-4 {random}");
}
