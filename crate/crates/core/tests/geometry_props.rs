//! Property tests for the box parametrization and IOU.

use proptest::prelude::*;
use stormdet::geometry::{decode_box, encode_box, iou, BBox};

fn arb_box() -> impl Strategy<Value = BBox> {
    (
        0.0..1152.0_f64,
        0.0..768.0_f64,
        1.0..300.0_f64,
        1.0..300.0_f64,
    )
        .prop_map(|(x, y, w, h)| BBox::new(x, y, w, h, 0, 0))
}

fn arb_anchor() -> impl Strategy<Value = BBox> {
    (0.0..1152.0_f64, 0.0..768.0_f64, 8.0..128.0_f64)
        .prop_map(|(x, y, s)| BBox::new(x, y, s, s, 0, 0))
}

proptest! {
    #[test]
    fn encode_decode_roundtrip(b in arb_box(), a in arb_anchor()) {
        let p = encode_box(&b, &a).unwrap();
        let r = decode_box(&p, &a);
        prop_assert!((r.x - b.x).abs() <= 1e-9 * b.x.abs().max(1.0));
        prop_assert!((r.y - b.y).abs() <= 1e-9 * b.y.abs().max(1.0));
        prop_assert!((r.w - b.w).abs() <= 1e-9 * b.w);
        prop_assert!((r.h - b.h).abs() <= 1e-9 * b.h);
    }

    #[test]
    fn decode_always_positive_sizes(tx in -5.0..5.0_f64, ty in -5.0..5.0_f64,
                                    tw in -8.0..8.0_f64, th in -8.0..8.0_f64,
                                    a in arb_anchor()) {
        let r = decode_box(&stormdet::geometry::BoxParam { tx, ty, tw, th }, &a);
        prop_assert!(r.w > 0.0 && r.h > 0.0);
    }

    #[test]
    fn iou_bounds_and_symmetry(a in arb_box(), b in arb_box()) {
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v.to_bits(), iou(&b, &a).to_bits());
    }

    #[test]
    fn iou_identity(a in arb_box()) {
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }
}
