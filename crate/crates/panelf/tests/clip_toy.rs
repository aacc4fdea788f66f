use panelf::data::{generate_shape_panels, image_to_tensor, ShapeKind};
use panelf::text::{evaluate_retrieval, train_toy_clip, ClipConfig, Vocab};
use panelf_core::Tensor;

fn labelled(n: usize, seed: u64) -> Vec<(Tensor, String)> {
    generate_shape_panels(n, seed)
        .unwrap()
        .into_iter()
        .map(|(img, kind)| (image_to_tensor(&img).unwrap(), kind.caption()))
        .collect()
}

#[test]
fn toy_clip_retrieves_held_out_shapes() {
    let train = labelled(200, 1);
    let held_out = labelled(100, 2);
    let vocab = Vocab::default();
    let model = train_toy_clip(&train, &vocab, &ClipConfig::default()).unwrap();
    let captions: Vec<String> = ShapeKind::ALL.iter().map(|k| k.caption()).collect();
    let report = evaluate_retrieval(&model, &held_out, &captions).unwrap();
    eprintln!("{report:?} init {} final {}", model.initial_loss, model.final_loss);
    assert!(report.recall_at_1 >= 0.8, "{report:?}");
    assert!(report.matched_cosine > report.mismatched_cosine);
    assert!(model.final_loss < model.initial_loss);
}
