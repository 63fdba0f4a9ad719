use super::*;
use crate::dataset::LabeledImage;
use crate::fixture::{client_dims, fit_head, generate_dataset, random_weights, server_dims, PATCH_SIZE};
use crate::gate::EntropyMeasure;
use crate::vit::{classify, ImageTensor};

fn small_models() -> (ModelWeights, ModelWeights, Dataset) {
    let train = generate_dataset(60, 101);
    let samples: Vec<_> =
        train.images.iter().map(|im| (patchify(&im.image, PATCH_SIZE).unwrap(), im.label.unwrap() as usize)).collect();
    let client = fit_head(random_weights(client_dims(), 102), &samples);
    let server = fit_head(random_weights(server_dims(), 103), &samples);
    (client, server, generate_dataset(5, 104))
}

fn config(rule: SelectionRule, eta: f64) -> PipelineConfig {
    PipelineConfig {
        rule,
        gate: GateSpec { measure: EntropyMeasure::Min, eta },
        attention: AttentionMethod::MeanLastLayer,
        fail_fast: false,
    }
}

#[test]
fn matches_hand_stepped_loop() {
    let (client, server_w, ds) = small_models();
    let server = Server::new(server_w.clone());
    // Pick eta as the median client min-entropy so both branches occur.
    let mut ents: Vec<f64> = ds
        .images
        .iter()
        .map(|im| {
            let (_, t) = classify(&im.image, &client).unwrap();
            -t.probs.iter().copied().fold(0.0, f64::max).log2()
        })
        .collect();
    ents.sort_by(f64::total_cmp);
    let eta = ents[2];
    let cfg = config(SelectionRule::TopK(6), eta);
    let out = run_pipeline(&cfg, &client, &ds, &mut DirectOffloader::new(&server)).unwrap();

    let mut offloaded = 0;
    for (i, im) in ds.images.iter().enumerate() {
        let (client_label, trace) = classify(&im.image, &client).unwrap();
        let max_p = trace.probs.iter().copied().fold(0.0, f64::max);
        let entropy = -max_p.log2();
        let rec = &out.records[i];
        assert_eq!(rec.client_label, Some(client_label as u32));
        assert!((rec.entropy_bits - entropy).abs() < 1e-12);
        if entropy >= eta {
            offloaded += 1;
            // Six best patches by restricted class-query softmax of head average.
            let last = trace.layers.last().unwrap();
            let mut scores = [0.0; 16];
            for h in 0..last.heads() {
                let logits = &last.class_logits(h)[1..];
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for (s, l) in scores.iter_mut().zip(logits) {
                    *s += (l - m).exp() / z / last.heads() as f64;
                }
            }
            let mut order: Vec<usize> = (0..16).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            let mut chosen = order[..6].to_vec();
            chosen.sort_unstable();
            let grid = patchify(&im.image, PATCH_SIZE).unwrap().subset(&chosen).unwrap();
            let (server_label, _) = classify_grid(&grid, &server_w).unwrap();
            assert!(rec.offloaded);
            assert_eq!(rec.patches_sent, 6);
            assert_eq!(rec.final_label, Some(server_label as u32));
        } else {
            assert!(!rec.offloaded);
            assert_eq!(rec.final_label, Some(client_label as u32));
        }
    }
    assert!(offloaded >= 3);
    let s = out.ledger.summary();
    assert_eq!(s.offloaded, offloaded);
    assert_eq!(s.patches_sent, offloaded * 6);
    assert_eq!(out.result_frames.len(), offloaded);
}

#[test]
fn endpoints() {
    let (client, server_w, ds) = small_models();
    let server = Server::new(server_w.clone());

    let never =
        run_pipeline(&config(SelectionRule::SumThreshold(0.9), 2.5), &client, &ds, &mut DirectOffloader::new(&server))
            .unwrap();
    assert!(never.records.iter().all(|r| !r.offloaded));
    assert_eq!(never.accuracy(), model_accuracy(&client, &ds).unwrap());
    assert_eq!(never.ledger.summary().cost_ratio, 0.0);

    let always =
        run_pipeline(&config(SelectionRule::SumThreshold(1.0), 0.0), &client, &ds, &mut DirectOffloader::new(&server))
            .unwrap();
    assert!(always.records.iter().all(|r| r.offloaded && r.patches_sent == 16));
    assert_eq!(always.accuracy(), model_accuracy(&server_w, &ds).unwrap());
    assert_eq!(always.ledger.summary().cost_ratio, 1.0);
}

#[test]
fn failures_are_recorded_or_fatal() {
    let (client, server_w, mut ds) = small_models();
    ds.images.insert(
        1,
        LabeledImage { name: "bad".into(), image: ImageTensor::new(12, 12, 3, vec![0; 432]).unwrap(), label: Some(0) },
    );
    let server = Server::new(server_w);
    let cfg = config(SelectionRule::TopK(2), 0.0);
    let out = run_pipeline(&cfg, &client, &ds, &mut DirectOffloader::new(&server)).unwrap();
    assert_eq!(out.records.len(), 6);
    assert!(out.records[1].error.is_some());
    assert_eq!(out.records[1].final_label, None);
    assert_eq!(out.ledger.records().len(), 5);

    let strict = PipelineConfig { fail_fast: true, ..cfg };
    assert!(run_pipeline(&strict, &client, &ds, &mut DirectOffloader::new(&server)).is_err());
}

#[test]
fn in_process_transport_matches_direct() {
    let (client, server_w, ds) = small_models();
    let server = Server::new(server_w);
    let cfg = config(SelectionRule::SumThreshold(0.8), 0.0);
    let direct = run_pipeline(&cfg, &client, &ds, &mut DirectOffloader::new(&server)).unwrap();
    let (t, handle) = server.spawn_in_process();
    let mut remote = RemoteOffloader::new(t);
    let via_channel = run_pipeline(&cfg, &client, &ds, &mut remote).unwrap();
    drop(remote);
    assert_eq!(handle.join().unwrap().unwrap(), 5);
    assert_eq!(direct.result_frames, via_channel.result_frames);
    assert_eq!(direct.records, via_channel.records);
}

#[test]
fn records_csv_columns() {
    let (client, server_w, ds) = small_models();
    let server = Server::new(server_w);
    let out =
        run_pipeline(&config(SelectionRule::TopK(3), 0.0), &client, &ds, &mut DirectOffloader::new(&server)).unwrap();
    let mut buf = Vec::new();
    out.write_records_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "image_id,true_label,client_label,offloaded,final_label,entropy_bits,patches_sent,error"
    );
    assert_eq!(lines.count(), 5);
}

#[test]
fn incompatible_models_rejected() {
    let client = random_weights(client_dims(), 1);
    let other = random_weights(crate::vit::Dims { classes: 5, ..server_dims() }, 2);
    assert!(matches!(check_compatible(&client, &other), Err(PipelineError::Incompatible("label count"))));
    assert!(check_compatible(&client, &random_weights(server_dims(), 3)).is_ok());
}
