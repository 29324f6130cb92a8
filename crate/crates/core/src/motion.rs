//! Hand-motion descriptor relative to an object box, and its sinusoidal
//! positional encoding.

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const MOTION_DIM: usize = 12;
pub const PE_FREQUENCIES: usize = 12;
pub const PE_DIM: usize = MOTION_DIM * PE_FREQUENCIES * 2;

/// Three consecutive `[Δx/W, Δy/H, w ratio, h ratio]` blocks for frames
/// `k-1, k, k+1`, where `Δ` is object center minus hand center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HandMotionDescriptor(pub [f32; MOTION_DIM]);

#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEncoding(pub Vec<f32>);

impl PositionalEncoding {
    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

pub fn hand_motion(obj: &BBox, hands: &[BBox; 3]) -> Result<HandMotionDescriptor> {
    let ow = obj.width() as f64;
    let oh = obj.height() as f64;
    if !(ow > 0.0 && oh > 0.0) {
        return Err(Error::Degenerate(format!("object box {obj:?} has no area")));
    }
    let ocx = (obj.x1 as f64 + obj.x2 as f64) / 2.0;
    let ocy = (obj.y1 as f64 + obj.y2 as f64) / 2.0;
    let mut out = [0f32; MOTION_DIM];
    for (p, h) in hands.iter().enumerate() {
        let hcx = (h.x1 as f64 + h.x2 as f64) / 2.0;
        let hcy = (h.y1 as f64 + h.y2 as f64) / 2.0;
        out[4 * p] = ((ocx - hcx) / ow) as f32;
        out[4 * p + 1] = ((ocy - hcy) / oh) as f32;
        out[4 * p + 2] = (h.width() as f64 / ow) as f32;
        out[4 * p + 3] = (h.height() as f64 / oh) as f32;
    }
    Ok(HandMotionDescriptor(out))
}

/// `[sin(2^f π v), cos(2^f π v)]` for every element `v` (outer) and
/// frequency `f` (inner).
pub fn positional_encode(d: &HandMotionDescriptor) -> PositionalEncoding {
    let mut out = Vec::with_capacity(PE_DIM);
    for &v in &d.0 {
        let v = v as f64;
        for f in 0..PE_FREQUENCIES {
            let arg = (1u32 << f) as f64 * std::f64::consts::PI * v;
            out.push(arg.sin() as f32);
            out.push(arg.cos() as f32);
        }
    }
    PositionalEncoding(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(x1: f32, y1: f32, x2: f32, y2: f32) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn descriptor_closed_forms() {
        let obj = b(0.0, 0.0, 100.0, 100.0);
        let half = b(25.0, 25.0, 75.0, 75.0);
        let d = hand_motion(&obj, &[half; 3]).unwrap();
        assert_eq!(d.0, [0.0, 0.0, 0.5, 0.5].repeat(3).as_slice());
        let d = hand_motion(&obj, &[obj; 3]).unwrap();
        assert_eq!(d.0, [0.0, 0.0, 1.0, 1.0].repeat(3).as_slice());
        let hand = b(60.0, 30.0, 80.0, 70.0);
        let d = hand_motion(&obj, &[hand; 3]).unwrap();
        let expected = [-0.2f32, 0.0, 0.2, 0.4];
        for (a, e) in d.0.iter().zip(expected.iter().cycle()) {
            assert!((a - e).abs() < 1e-7);
        }
    }

    #[test]
    fn degenerate_object_rejected() {
        let flat = BBox { x1: 0.0, y1: 0.0, x2: 10.0, y2: 0.0 };
        assert!(hand_motion(&flat, &[b(0.0, 0.0, 1.0, 1.0); 3]).is_err());
    }

    #[test]
    fn encoding_special_values() {
        let zero = positional_encode(&HandMotionDescriptor([0.0; 12]));
        assert_eq!(zero.0.len(), PE_DIM);
        for pair in zero.0.chunks(2) {
            assert_eq!(pair, [0.0, 1.0]);
        }
        let mut one = [0f32; 12];
        one[0] = 1.0;
        let pe = positional_encode(&HandMotionDescriptor(one));
        assert!(pe.0[0].abs() < 1e-6);
        assert_eq!(pe.0[1], -1.0);
    }

    #[test]
    fn encoding_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut v = [0f32; 12];
        v.iter_mut().for_each(|x| *x = rng.random_range(-2.0..2.0));
        let pe = positional_encode(&HandMotionDescriptor(v));
        let mut i = 0;
        for e in 0..12 {
            for f in 0..12 {
                let arg = 2f64.powi(f) * std::f64::consts::PI * v[e] as f64;
                assert_eq!(pe.0[i], arg.sin() as f32);
                assert_eq!(pe.0[i + 1], arg.cos() as f32);
                i += 2;
            }
        }
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0f32..200.0, 0f32..200.0, 4f32..80.0, 4f32..80.0)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #[test]
        fn translation_and_scale_invariance(
            obj in arb_box(), h0 in arb_box(), h1 in arb_box(), h2 in arb_box(),
            dx in -50f32..50.0, dy in -50f32..50.0, s in 0.25f32..4.0,
        ) {
            let base = hand_motion(&obj, &[h0, h1, h2]).unwrap();
            let shift = |b: &BBox| b.translate(dx, dy);
            let moved = hand_motion(&shift(&obj), &[shift(&h0), shift(&h1), shift(&h2)]).unwrap();
            let scale = |b: &BBox| BBox { x1: b.x1 * s, y1: b.y1 * s, x2: b.x2 * s, y2: b.y2 * s };
            let scaled = hand_motion(&scale(&obj), &[scale(&h0), scale(&h1), scale(&h2)]).unwrap();
            for i in 0..12 {
                prop_assert!((base.0[i] - moved.0[i]).abs() < 1e-3);
                prop_assert!((base.0[i] - scaled.0[i]).abs() < 1e-3);
            }
            let pe = positional_encode(&base);
            prop_assert_eq!(pe.0.len(), 288);
            prop_assert!(pe.0.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
