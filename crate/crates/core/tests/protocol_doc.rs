//! The worked examples in docs/protocol.md must match the encoder.

use patchcast::protocol::{encode_patch_message, FrameWriter, ResultMessage};
use patchcast::selection::{SelectionMask, SelectionRule};
use patchcast::vit::{patchify, ImageTensor};

fn doc_hex_blocks() -> Vec<Vec<u8>> {
    let doc = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/protocol.md")).unwrap();
    doc.split("```hex")
        .skip(1)
        .map(|rest| {
            let block = rest.split("```").next().unwrap();
            block.split_whitespace().map(|h| u8::from_str_radix(h, 16).unwrap()).collect()
        })
        .collect()
}

#[test]
fn examples_match_encoder() {
    let blocks = doc_hex_blocks();
    assert_eq!(blocks.len(), 3);

    let img = ImageTensor::new(4, 6, 1, (0..24).map(|i| (i * 10) as u8).collect()).unwrap();
    let grid = patchify(&img, 2).unwrap();
    let mask = SelectionMask { n_total: 6, selected: vec![0, 5], rule: SelectionRule::TopK(2) };
    assert_eq!(encode_patch_message(&grid, &mask, 0x0102030405060708).unwrap(), blocks[0]);

    let result = ResultMessage { image_id: 0x0102030405060708, label: 3, confidence: 0.75 };
    assert_eq!(result.encode().to_vec(), blocks[1]);
    assert_eq!(ResultMessage::decode(&blocks[1]).unwrap(), result);

    let mut w = FrameWriter::new(Vec::new());
    w.write_frame(&result.encode()).unwrap();
    assert_eq!(w.into_inner(), blocks[2]);
}
