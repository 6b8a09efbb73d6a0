use dynsparse_core::costmodel::{layer_breakdown, prediction_macs, sparse_softmax_saving, LayerShape, Preset};

#[test]
fn text_preset_overhead_and_reduction() {
    let shape = Preset::Text.shape();
    assert_eq!((shape.l, shape.d, shape.h, shape.k, shape.pred_bits), (2000, 256, 4, 16, 4));
    let r = layer_breakdown(&shape, 0.95).unwrap();
    assert!((0.010..=0.015).contains(&r.overhead_ratio), "{}", r.overhead_ratio);

    // Hand count for l=2000, d=256, h=4, d_k=64, ffn=1024, keep=100, k=16:
    let (l, d, h, dk, ffn, keep, k) = (2000u64, 256u64, 4u64, 64u64, 1024u64, 100u64, 16u64);
    let linear = l * d * 3 * dk * h + l * dk * h * d;
    let attention = h * l * l * 2 * dk;
    let other = 2 * l * d * ffn;
    let prediction = h * (l * d * k + 2 * l * k * k + l * l * k);
    let dsa = (linear + h * l * keep * 2 * dk + other) as f64 + prediction as f64 * 4.0 / 32.0;
    let expected = (linear + attention + other) as f64 / dsa;
    assert!((r.reduction_ratio - expected).abs() < 1e-12);
    assert!((r.reduction_ratio - 2.115).abs() < 1e-3);
}

#[test]
fn longer_text_reduces_more() {
    let short = layer_breakdown(&Preset::Text.shape(), 0.95).unwrap();
    let long = layer_breakdown(&Preset::Text4k.shape(), 0.95).unwrap();
    assert!(long.reduction_ratio > short.reduction_ratio);
}

#[test]
fn prediction_macs_by_hand() {
    // l=10, d=8, h=2, k=4: per-head projection 10·8·4 = 320,
    // transforms 2·10·4·4 = 320, scores 10·10·4 = 400.
    let s = LayerShape {
        k: 4,
        ..LayerShape::with_sigma(10, 8, 2, 16, 1.0, 4)
    };
    assert_eq!(prediction_macs(&s).raw, 2 * (320 + 320 + 400));
    let shared = LayerShape { share_projection: true, ..s };
    assert_eq!(prediction_macs(&shared).raw, 320 + 2 * (320 + 400));
}

#[test]
fn attention_share_grows_with_length() {
    let retrieval = layer_breakdown(&Preset::Retrieval.shape(), 0.9).unwrap();
    let image = layer_breakdown(&Preset::Image.shape(), 0.9).unwrap();
    assert!(retrieval.attention_share > image.attention_share);
}

#[test]
fn zero_sparsity_has_no_prediction_cost() {
    let r = layer_breakdown(&Preset::Desk.shape(), 0.0).unwrap();
    assert_eq!(r.macs_prediction_raw, 0);
    assert_eq!(r.total_dsa, r.total_dense as f64);
}

#[test]
fn softmax_saving_is_inverse_density() {
    assert!((sparse_softmax_saving(2000, 0.95).unwrap() - 20.0).abs() < 1e-9);
}
