//! Frame preprocessing, frame stacking, and thermometer transduction.
//!
//! The teacher consumes stacked float observations; the student and the
//! deployed network consume the transduced single-bit features. Both views
//! derive from the same [`FrameStack`] contents, so the float and integer
//! inference paths see the same world.

use std::collections::VecDeque;

use super::Frame;
use crate::Tensor;

/// History length of stacked observations.
pub const STACK: usize = 4;

/// Converts a frame to a `[H, W]` tensor in [0, 1], optionally resized.
pub fn preprocess(frame: &Frame, resize: Option<(usize, usize)>) -> Tensor {
    let t = Tensor::new(
        &[frame.height, frame.width],
        frame.pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )
    .expect("frame pixel count matches its dimensions");
    match resize {
        Some((h, w)) if (h, w) != (frame.height, frame.width) => bilinear_resize(&t, h, w),
        _ => t,
    }
}

/// Bilinear resampling with half-pixel centers: destination pixel centers
/// map to `(i + 0.5) * src/dst - 0.5` in source coordinates, clamped at the
/// borders.
pub fn bilinear_resize(src: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (h, w) = (src.shape()[0], src.shape()[1]);
    assert!(out_h > 0 && out_w > 0, "resize target must be nonempty");
    let mut out = Tensor::zeros(&[out_h, out_w]);
    let sd = src.data();
    let od = out.data_mut();
    let coord = |i: usize, out_n: usize, src_n: usize| -> (usize, usize, f64) {
        let c = (i as f64 + 0.5) * src_n as f64 / out_n as f64 - 0.5;
        let c = c.clamp(0.0, (src_n - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(src_n - 1);
        (lo, hi, c - lo as f64)
    };
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, out_h, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, out_w, w);
            let top = sd[y0 * w + x0] * (1.0 - fx) + sd[y0 * w + x1] * fx;
            let bot = sd[y1 * w + x0] * (1.0 - fx) + sd[y1 * w + x1] * fx;
            od[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// FIFO of the four most recent preprocessed frames.
pub struct FrameStack {
    frames: VecDeque<Tensor>,
}

impl Default for FrameStack {
    fn default() -> Self {
        Self::new()
    }
}

impl FrameStack {
    pub fn new() -> Self {
        FrameStack { frames: VecDeque::with_capacity(STACK) }
    }

    /// Begins an episode: the history holds four copies of the first frame.
    pub fn reset(&mut self, first: Tensor) {
        self.frames.clear();
        for _ in 0..STACK {
            self.frames.push_back(first.clone());
        }
    }

    pub fn push(&mut self, frame: Tensor) {
        assert_eq!(self.frames.len(), STACK, "push before reset");
        self.frames.pop_front();
        self.frames.push_back(frame);
    }

    /// Channel-stacked `[4, H, W]` observation, oldest frame first.
    pub fn observation(&self) -> Tensor {
        assert_eq!(self.frames.len(), STACK, "observation before reset");
        let (h, w) = (self.frames[0].shape()[0], self.frames[0].shape()[1]);
        let mut data = Vec::with_capacity(STACK * h * w);
        for f in &self.frames {
            assert_eq!(f.shape(), [h, w], "mixed frame sizes in one stack");
            data.extend_from_slice(f.data());
        }
        Tensor::new(&[STACK, h, w], data).unwrap()
    }
}

/// Thermometer code, one bit per level per pixel: with `levels` = L, bit k
/// (k = 1..=L) of a pixel fires iff the pixel's intensity reaches k/L. An
/// intensity of exactly 1.0 therefore sets all L bits and 0.0 sets none,
/// and codes are bitwise monotone in intensity.
pub fn transduce_bits(obs: &Tensor, levels: usize) -> Vec<u8> {
    assert!(levels >= 1, "transduce needs at least one level");
    let shape = obs.shape();
    assert_eq!(shape.len(), 3, "transduce expects [C, H, W]");
    let (c, hw) = (shape[0], shape[1] * shape[2]);
    let mut bits = vec![0u8; c * levels * hw];
    for ch in 0..c {
        let plane = &obs.data()[ch * hw..(ch + 1) * hw];
        for k in 1..=levels {
            let threshold = k as f64 / levels as f64;
            let out = &mut bits[(ch * levels + k - 1) * hw..(ch * levels + k) * hw];
            for (b, &v) in out.iter_mut().zip(plane) {
                *b = (v >= threshold) as u8;
            }
        }
    }
    bits
}

/// Float view of [`transduce_bits`] with shape `[C*levels, H, W]`, for the
/// training path. Bit-identical to the deployed input by construction.
pub fn transduce(obs: &Tensor, levels: usize) -> Tensor {
    let shape = obs.shape();
    let bits = transduce_bits(obs, levels);
    Tensor::new(&[shape[0] * levels, shape[1], shape[2]], bits.iter().map(|&b| b as f64).collect())
        .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn constant_frame_preprocesses_to_its_scaled_value() {
        let frame = Frame::filled(6, 6, 51);
        let t = preprocess(&frame, None);
        assert_eq!(t.shape(), [6, 6]);
        assert!(t.data().iter().all(|&v| v == 51.0 / 255.0));
    }

    #[test]
    fn same_size_resize_is_identity() {
        let frame = Frame {
            height: 4,
            width: 5,
            pixels: (0..20).map(|i| (i * 12) as u8).collect(),
        };
        let plain = preprocess(&frame, None);
        let resized = preprocess(&frame, Some((4, 5)));
        assert_eq!(plain, resized);
    }

    #[test]
    fn bilinear_matches_scalar_reference_on_checkerboard() {
        let (h, w) = (8, 8);
        let data: Vec<f64> = (0..h * w).map(|i| ((i / w + i % w) % 2) as f64).collect();
        let src = Tensor::new(&[h, w], data).unwrap();
        let (oh, ow) = (84, 84);
        let fast = bilinear_resize(&src, oh, ow);
        // independent per-pixel formulation with explicit corner handling
        for oy in 0..oh {
            for ox in 0..ow {
                let cy = ((oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, h as f64 - 1.0);
                let cx = ((ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, w as f64 - 1.0);
                let (y0, x0) = (cy.floor() as usize, cx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (fy, fx) = (cy - y0 as f64, cx - x0 as f64);
                let v = src.data()[y0 * w + x0] * (1.0 - fy) * (1.0 - fx)
                    + src.data()[y0 * w + x1] * (1.0 - fy) * fx
                    + src.data()[y1 * w + x0] * fy * (1.0 - fx)
                    + src.data()[y1 * w + x1] * fy * fx;
                let got = fast.data()[oy * ow + ox];
                assert!((got - v).abs() < 1e-9, "({oy},{ox}): {got} vs {v}");
            }
        }
    }

    #[test]
    fn stack_keeps_the_last_four_in_order() {
        let mut stack = FrameStack::new();
        let f = |v: f64| Tensor::filled(&[2, 2], v);
        stack.reset(f(1.0));
        let obs = stack.observation();
        assert_eq!(obs.shape(), [4, 2, 2]);
        assert!(obs.data().iter().all(|&v| v == 1.0));
        for v in [2.0, 3.0, 4.0, 5.0] {
            stack.push(f(v));
        }
        let obs = stack.observation();
        for (ch, want) in [2.0, 3.0, 4.0, 5.0].iter().enumerate() {
            assert!(obs.data()[ch * 4..(ch + 1) * 4].iter().all(|v| v == want));
        }
    }

    #[test]
    fn thermometer_endpoints_and_pinned_midpoint() {
        let obs = Tensor::new(&[1, 1, 3], vec![0.0, 1.0, 0.6]).unwrap();
        let bits = transduce_bits(&obs, 4);
        // layout: [4 level-channels, 1, 3]
        let bit = |k: usize, px: usize| bits[k * 3 + px];
        for k in 0..4 {
            assert_eq!(bit(k, 0), 0, "zero pixel level {k}");
            assert_eq!(bit(k, 1), 1, "full pixel level {k}");
        }
        // thresholds 0.25, 0.5, 0.75, 1.0 against 0.6
        assert_eq!([bit(0, 2), bit(1, 2), bit(2, 2), bit(3, 2)], [1, 1, 0, 0]);
    }

    #[test]
    fn transduced_stack_has_four_l_channels_and_matches_bits() {
        let mut rng = crate::rng::stream(3, 0);
        let obs = Tensor::new(&[4, 6, 6], (0..4 * 36).map(|_| rng.gen_range(0.0..=1.0)).collect())
            .unwrap();
        let t = transduce(&obs, 4);
        assert_eq!(t.shape(), [16, 6, 6]);
        let bits = transduce_bits(&obs, 4);
        for (f, b) in t.data().iter().zip(&bits) {
            assert_eq!(*f, *b as f64);
        }
    }

    proptest! {
        #[test]
        fn thermometer_codes_are_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0, levels in 1usize..8) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let obs = Tensor::new(&[1, 1, 2], vec![lo, hi]).unwrap();
            let bits = transduce_bits(&obs, levels);
            for k in 0..levels {
                prop_assert!(bits[k * 2] <= bits[k * 2 + 1]);
            }
            // thermometer property: within a pixel, higher levels imply lower bits
            for k in 1..levels {
                prop_assert!(bits[k * 2] <= bits[(k - 1) * 2]);
            }
        }
    }
}
