use scaleformer::model::ModelConfig;
use scaleformer::profile::*;

fn cfg() -> ModelConfig {
    ModelConfig::default()
}

#[test]
fn doubling_extent_quadruples_tokens() {
    let a = flop_count(&cfg(), 64, 64, 2.0, 16).unwrap();
    let b = flop_count(&cfg(), 128, 128, 2.0, 16).unwrap();
    assert_eq!(b.tokens, 4 * a.tokens);
    // Non-divisible extents round up to whole windows.
    assert_eq!(flop_count(&cfg(), 65, 64, 2.0, 16).unwrap().tokens, 20);
}

#[test]
fn spatial_term_is_linear_and_sequence_core_quadratic_in_tokens() {
    let c = cfg();
    let one = flop_count(&c, 64, 64, 2.0, 16).unwrap();
    let two = flop_count(&c, 128, 64, 2.0, 16).unwrap();
    assert_eq!(two.tokens, 2 * one.tokens);
    assert_eq!(two.spatial_attention, 2 * one.spatial_attention);
    for (n, v) in one.stages() {
        if n != "sequence_attention" && n != "cross" {
            assert_eq!(two.stages().iter().find(|s| s.0 == n).unwrap().1, 2 * v, "{n}");
        }
    }
    // S(T) = a·T² + b·T  ⇒  S(2T) − 2·S(T) = 2·a·T².
    let t = one.tokens as u64;
    let p2 = 256u64;
    let (ch, heads) = (c.channels as u64, c.heads as u64);
    let a = (2 * c.n_single as u64) * (2 * p2 * ch + 5 * p2 * heads);
    assert_eq!(two.sequence_attention - 2 * one.sequence_attention, 2 * a * t * t);
}

#[test]
fn total_is_sum_of_stages() {
    for c in [cfg(), ModelConfig { use_seq_transformer: false, ..cfg() }] {
        let r = flop_count(&c, 96, 80, 2.0, 16).unwrap();
        assert_eq!(r.total, r.stages().iter().map(|s| s.1).sum::<u64>());
        if !c.use_seq_transformer {
            assert_eq!(r.sequence_attention, 0);
        }
    }
}

#[test]
fn global_attention_ratio_matches_hand_derivation() {
    let c = cfg(); // C = 32, 4 heads, 2 single + 2 cross blocks, FFN ratio 2, 4 bands
    let r = flop_count(&c, 256, 256, 2.0, 16).unwrap();
    // Hand derivation, N = 65536 pixels, T = 256 windows of p² = 256 pixels.
    let n: u64 = 65536;
    let per_pixel_common: u64 = 9 * 32 * 33 + 9 * 32 * 36 // encoders
        + 12 * (2 * 32 * 64 + 5 * 32)                       // 12 FFN stages with pre-norm
        + 9 * 4 * 32;                                       // head
    let proj_norm = |norms: u64| 4 * 32 * 32 + norms * 5 * 32;
    // 8 single stages (1 norm) + 4 cross stages (2 norms), per pixel.
    let per_pixel_attn_linear = 8 * proj_norm(1) + 4 * proj_norm(2);
    // Windowed: a spatial stage over T groups of 256; a sequence stage over 256 groups of T = 256.
    let core = |groups: u64, len: u64| 2 * groups * len * len * 32 + 5 * groups * 4 * len * len;
    let ours = n * (per_pixel_common + per_pixel_attn_linear) + 12 * core(256, 256);
    let global = n * (per_pixel_common + per_pixel_attn_linear) + 12 * core(1, n);
    assert_eq!(r.total, ours);
    assert_eq!(r.global_attention_total, global);
    let ratio = r.total as f64 / r.global_attention_total as f64;
    assert!((ratio - ours as f64 / global as f64).abs() < 1e-15);
    assert!(ratio < 0.01, "{ratio}");
}

#[test]
fn scaleformer_beats_global_attention_at_all_scales() {
    for s in [64, 128, 256] {
        let r = flop_count(&cfg(), s, s, 2.0, 16).unwrap();
        assert!(r.total < r.global_attention_total, "scale {s}");
    }
}

#[test]
fn memory_estimate_is_linear_in_batch_and_monotone() {
    let c = cfg();
    let one = memory_estimate(&c, 64, 64, 2.0, 16, 1).unwrap();
    let two = memory_estimate(&c, 64, 64, 2.0, 16, 2).unwrap();
    assert_eq!(two.elements, 2 * one.elements);
    assert_eq!(one.bytes, 4 * one.elements);
    let mut last = 0;
    for s in [32, 64, 96, 128, 256] {
        let e = memory_estimate(&c, s, s, 2.0, 16, 1).unwrap().elements;
        assert!(e > last);
        last = e;
    }
}

#[test]
fn invalid_window_is_rejected() {
    assert!(flop_count(&cfg(), 8, 64, 2.0, 16).is_err());
    assert!(flop_count(&cfg(), 64, 64, 2.0, 0).is_err());
    assert!(memory_estimate(&cfg(), 8, 8, 2.0, 16, 1).is_err());
}
