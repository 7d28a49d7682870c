//! Per-channel symmetric weight quantisation to integer grids.
//!
//! Three integer modes share one construction: a per-row (output-channel)
//! scale, round-half-away-from-zero to an integer lattice, then a coarser
//! rounding to the mode's code step with a clamp to the printed code range.
//! `Fp16` is the identity. The whole chain runs in `f64` regardless of the
//! tensor element type.
//!
//! The dequantisation scale is aligned per mode so that the largest row
//! element lands exactly on the outermost code (127, 124, or 112/−128).
//! This makes every grid a fixed point of its own quantiser — re-quantising
//! a quantised tensor reproduces it — which the elementwise chain with a
//! single shared `max/127` scale would not: coarser grids would re-derive a
//! smaller scale and drift. The INT8-space per-channel scale `max|row|/127`
//! is still exposed as [`channel_scales`].

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

/// Weight grid selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    Fp16,
    Int8,
    Int6,
    Int4,
}

/// Integer lattice of one mode: codes are `{min, min+step, …, max}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub step: i64,
    pub min: i64,
    pub max: i64,
}

impl Grid {
    pub fn level_count(&self) -> usize {
        ((self.max - self.min) / self.step + 1) as usize
    }

    pub fn contains(&self, code: i64) -> bool {
        code >= self.min && code <= self.max && (code - self.min) % self.step == 0
    }
}

impl QuantMode {
    pub const ALL: [QuantMode; 4] =
        [QuantMode::Fp16, QuantMode::Int8, QuantMode::Int6, QuantMode::Int4];

    /// The integer lattice, or `None` for the identity mode.
    pub fn grid(self) -> Option<Grid> {
        match self {
            QuantMode::Fp16 => None,
            QuantMode::Int8 => Some(Grid {
                step: 1,
                min: -127,
                max: 127,
            }),
            QuantMode::Int6 => Some(Grid {
                step: 4,
                min: -124,
                max: 124,
            }),
            QuantMode::Int4 => Some(Grid {
                step: 16,
                min: -128,
                max: 112,
            }),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            QuantMode::Fp16 => "fp16",
            QuantMode::Int8 => "int8",
            QuantMode::Int6 => "int6",
            QuantMode::Int4 => "int4",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fp16" => Ok(QuantMode::Fp16),
            "int8" => Ok(QuantMode::Int8),
            "int6" => Ok(QuantMode::Int6),
            "int4" => Ok(QuantMode::Int4),
            other => Err(Error::config(format!(
                "unknown quantisation mode '{other}' (expected fp16|int8|int6|int4)"
            ))),
        }
    }
}

impl std::fmt::Display for QuantMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-output-channel INT8-space scales, `s = max|row| / 127`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelScales(Vec<f64>);

impl ChannelScales {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn channel_scales<T: Scalar>(w: &Tensor<T>) -> Result<ChannelScales> {
    w.require_2d()?;
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let mut scales = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &w.data()[r * cols..(r + 1) * cols];
        let max_abs = row.iter().fold(0.0f64, |m, v| m.max(v.to_f64().abs()));
        scales.push(max_abs / 127.0);
    }
    Ok(ChannelScales(scales))
}

/// Dequantisation scale for one row: chosen so the row extreme sits exactly
/// on the outermost code. INT4's range is asymmetric, so positive and
/// negative extremes are aligned separately and the binding side wins.
fn row_dequant_scale(row_f64: impl Iterator<Item = f64>, mode: QuantMode) -> f64 {
    let (mut max_pos, mut max_neg) = (0.0f64, 0.0f64);
    for v in row_f64 {
        if v > max_pos {
            max_pos = v;
        }
        if -v > max_neg {
            max_neg = -v;
        }
    }
    match mode {
        QuantMode::Fp16 => 0.0,
        QuantMode::Int8 => max_pos.max(max_neg) / 127.0,
        QuantMode::Int6 => max_pos.max(max_neg) / 124.0,
        QuantMode::Int4 => (max_pos / 112.0).max(max_neg / 128.0),
    }
}

fn quantize_row(row: &[f64], grid: &Grid, scale: f64, codes: &mut [i16]) {
    if scale == 0.0 {
        codes.fill(0);
        return;
    }
    let step = grid.step as f64;
    for (c, &v) in codes.iter_mut().zip(row) {
        // Round to the unit lattice first, then to the coarse step; both
        // rounds are half-away-from-zero, matching the symmetric level sets.
        let r = (v / scale).round();
        let code = ((r / step).round() * step).clamp(grid.min as f64, grid.max as f64);
        *c = code as i16;
    }
}

/// Integer codes plus the per-row dequantisation scales that turn them back
/// into values (`value = code * scale`).
pub fn quantize_codes<T: Scalar>(w: &Tensor<T>, mode: QuantMode) -> Result<(Vec<i16>, Vec<f64>)> {
    let grid = mode
        .grid()
        .ok_or_else(|| Error::config("quantize_codes: fp16 has no integer grid"))?;
    w.require_2d()?;
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let mut codes = vec![0i16; rows * cols];
    let mut scales = Vec::with_capacity(rows);
    let mut buf = vec![0.0f64; cols];
    for r in 0..rows {
        let row = &w.data()[r * cols..(r + 1) * cols];
        for (b, v) in buf.iter_mut().zip(row) {
            *b = v.to_f64();
        }
        let s = row_dequant_scale(buf.iter().copied(), mode);
        quantize_row(&buf, &grid, s, &mut codes[r * cols..(r + 1) * cols]);
        scales.push(s);
    }
    Ok((codes, scales))
}

/// Quantise-dequantise. The forward value moves to the grid; callers that
/// need gradients route this through a straight-through tape node so the
/// backward pass sees the identity.
pub fn fake_quant<T: Scalar>(w: &Tensor<T>, mode: QuantMode) -> Result<Tensor<T>> {
    if mode == QuantMode::Fp16 {
        return Ok(w.clone());
    }
    let (codes, scales) = quantize_codes(w, mode)?;
    let cols = w.shape()[1];
    let mut out = Tensor::zeros(w.shape().to_vec());
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        *o = T::from_f64(codes[i] as f64 * scales[i / cols]);
    }
    Ok(out)
}

/// RMS distance from the INT6 grid: `sqrt(mean((w - q6(w))²))` over all
/// elements, accumulated in `f64`.
pub fn grid_distance_int6<T: Scalar>(w: &Tensor<T>) -> Result<f64> {
    let q = fake_quant(w, QuantMode::Int6)?;
    if w.numel() == 0 {
        return Ok(0.0);
    }
    let mut acc = 0.0f64;
    for (a, b) in w.data().iter().zip(q.data()) {
        let d = a.to_f64() - b.to_f64();
        acc += d * d;
    }
    Ok((acc / w.numel() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn t64(shape: Vec<usize>, vals: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape, vals).unwrap()
    }

    #[test]
    fn grids_match_printed_level_sets() {
        assert_eq!(QuantMode::Fp16.grid(), None);
        let g8 = QuantMode::Int8.grid().unwrap();
        let g6 = QuantMode::Int6.grid().unwrap();
        let g4 = QuantMode::Int4.grid().unwrap();
        assert_eq!((g8.min, g8.max, g8.step, g8.level_count()), (-127, 127, 1, 255));
        assert_eq!((g6.min, g6.max, g6.step, g6.level_count()), (-124, 124, 4, 63));
        assert_eq!((g4.min, g4.max, g4.step, g4.level_count()), (-128, 112, 16, 16));
    }

    #[test]
    fn channel_scale_examples() {
        let w = t64(vec![3, 2], &[0.0, 0.0, -127.0, 63.5, 0.3, -0.9]);
        let s = channel_scales(&w).unwrap();
        assert_eq!(s.as_slice()[0], 0.0);
        assert_eq!(s.as_slice()[1], 1.0);
        assert_relative_eq!(s.as_slice()[2], 0.9 / 127.0, epsilon = 1e-12);
        assert!(channel_scales(&Tensor::<f64>::zeros(vec![4])).is_err());
    }

    #[test]
    fn max_element_hits_outermost_code_in_every_mode() {
        let w = t64(vec![1, 1], &[0.25 * 127.0]);
        for (mode, want) in [
            (QuantMode::Int8, 127),
            (QuantMode::Int6, 124),
            (QuantMode::Int4, 112),
        ] {
            let (codes, _) = quantize_codes(&w, mode).unwrap();
            assert_eq!(codes, vec![want], "{mode}");
        }
    }

    #[test]
    fn zero_rows_quantise_to_zero() {
        let w = Tensor::<f64>::zeros(vec![2, 5]);
        for mode in [QuantMode::Int8, QuantMode::Int6, QuantMode::Int4] {
            let (codes, scales) = quantize_codes(&w, mode).unwrap();
            assert!(codes.iter().all(|&c| c == 0));
            assert!(scales.iter().all(|&s| s == 0.0));
            assert!(fake_quant(&w, mode).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn clamp_round_chain_hand_case() {
        let w = t64(vec![1, 2], &[0.5, -1.0]);
        let (c8, _) = quantize_codes(&w, QuantMode::Int8).unwrap();
        assert_eq!(c8, vec![64, -127]);
        let (c6, _) = quantize_codes(&w, QuantMode::Int6).unwrap();
        assert_eq!(c6, vec![64, -124]);
        let (c4, _) = quantize_codes(&w, QuantMode::Int4).unwrap();
        assert_eq!(c4, vec![64, -128]);
    }

    #[test]
    fn fp16_mode_is_identity_and_has_no_codes() {
        let w = t64(vec![2, 2], &[0.1, -0.2, 0.3, -0.4]);
        assert_eq!(fake_quant(&w, QuantMode::Fp16).unwrap(), w);
        assert!(quantize_codes(&w, QuantMode::Fp16).is_err());
    }

    #[test]
    fn fake_quant_equals_codes_times_scales() {
        let vals: Vec<f64> = (0..24).map(|i| ((i * 37 % 17) as f64 - 8.0) * 0.11).collect();
        let w = t64(vec![4, 6], &vals);
        for mode in [QuantMode::Int8, QuantMode::Int6, QuantMode::Int4] {
            let q = fake_quant(&w, mode).unwrap();
            let (codes, scales) = quantize_codes(&w, mode).unwrap();
            for i in 0..24 {
                assert_eq!(q.data()[i], codes[i] as f64 * scales[i / 6]);
            }
        }
    }

    #[test]
    fn grid_distance_of_quantised_tensor_is_zero() {
        let vals: Vec<f64> = (0..64).map(|i| ((i * 31 % 23) as f64 - 11.0) * 0.3).collect();
        let w = t64(vec![8, 8], &vals);
        let q = fake_quant(&w, QuantMode::Int6).unwrap();
        assert!(grid_distance_int6(&q).unwrap() < 1e-12);
        assert_eq!(grid_distance_int6(&Tensor::<f64>::zeros(vec![3, 3])).unwrap(), 0.0);
    }

    #[test]
    fn grid_distance_matches_uniform_rounding_noise() {
        // Uniform elements quantise with error ~U[-step/2, step/2]; the RMS
        // distance should sit near step/sqrt(12) with step = 4 code units.
        use rand_core::{RngCore, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let n = 64 * 64;
        let vals: Vec<f64> = (0..n)
            .map(|_| ((rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0)
            .collect();
        let max_abs = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let w = t64(vec![64, 64], &vals);
        let d = grid_distance_int6(&w).unwrap();
        // Independent path: rebuild the quantised values from codes and
        // scales and sum the squared residuals directly.
        let (codes, scales) = quantize_codes(&w, QuantMode::Int6).unwrap();
        let mut acc = 0.0f64;
        for (i, v) in vals.iter().enumerate() {
            let q = codes[i] as f64 * scales[i / 64];
            acc += (v - q) * (v - q);
        }
        let brute = (acc / n as f64).sqrt();
        assert_relative_eq!(d, brute, max_relative = 1e-12);
        // The classic uniform-noise figure step/sqrt(12) is only a loose
        // guide here: rounding twice (unit lattice, then step 4) stretches
        // the worst-case cell error to 2.5 units, inflating the RMS a bit.
        let heuristic = 4.0 * (max_abs / 124.0) / 12.0f64.sqrt();
        assert!(
            (d - heuristic).abs() / heuristic < 0.15,
            "distance {d} vs heuristic {heuristic}"
        );
    }

    /// Random small 2-D tensors with a spread of magnitudes.
    fn arb_tensor() -> impl Strategy<Value = Tensor<f64>> {
        (1usize..5, 1usize..10).prop_flat_map(|(rows, cols)| {
            proptest::collection::vec(-10.0f64..10.0, rows * cols)
                .prop_map(move |v| Tensor::new(vec![rows, cols], v).unwrap())
        })
    }

    fn int_modes() -> impl Strategy<Value = QuantMode> {
        prop_oneof![
            Just(QuantMode::Int8),
            Just(QuantMode::Int6),
            Just(QuantMode::Int4)
        ]
    }

    proptest! {
        #[test]
        fn every_element_lands_on_the_grid(w in arb_tensor(), mode in int_modes()) {
            let grid = mode.grid().unwrap();
            let (codes, scales) = quantize_codes(&w, mode).unwrap();
            let q = fake_quant(&w, mode).unwrap();
            let cols = w.shape()[1];
            for (i, &c) in codes.iter().enumerate() {
                prop_assert!(grid.contains(c as i64), "code {c} off-grid for {mode}");
                let s = scales[i / cols];
                if s > 0.0 {
                    let ratio = q.data()[i] / s;
                    prop_assert!((ratio - c as f64).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn distinct_values_bounded_by_level_count(w in arb_tensor(), mode in int_modes()) {
            let (codes, _) = quantize_codes(&w, mode).unwrap();
            let cols = w.shape()[1];
            for r in 0..w.shape()[0] {
                let mut row: Vec<i16> = codes[r * cols..(r + 1) * cols].to_vec();
                row.sort_unstable();
                row.dedup();
                prop_assert!(row.len() <= mode.grid().unwrap().level_count());
            }
        }

        #[test]
        fn quantisation_is_idempotent(w in arb_tensor(), mode in int_modes()) {
            let q1 = fake_quant(&w, mode).unwrap();
            let q2 = fake_quant(&q1, mode).unwrap();
            let (c1, _) = quantize_codes(&q1, mode).unwrap();
            let (c2, _) = quantize_codes(&q2, mode).unwrap();
            prop_assert_eq!(c1, c2);
            let scale = w.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (a, b) in q1.data().iter().zip(q2.data()) {
                prop_assert!((a - b).abs() <= 1e-12 * scale.max(1.0));
            }
        }

        #[test]
        fn symmetric_modes_are_odd_under_negation(w in arb_tensor(),
                                                  mode in prop_oneof![Just(QuantMode::Int8),
                                                                      Just(QuantMode::Int6)]) {
            let mut neg = w.clone();
            for v in neg.data_mut() {
                *v = -*v;
            }
            let qp = fake_quant(&w, mode).unwrap();
            let qn = fake_quant(&neg, mode).unwrap();
            for (a, b) in qp.data().iter().zip(qn.data()) {
                prop_assert_eq!(*a, -*b);
            }
        }

        #[test]
        fn f32_path_matches_f64_codes(w in arb_tensor(), mode in int_modes()) {
            let w32 = Tensor::<f32>::from_f64_slice(
                w.shape().to_vec(),
                w.data(),
            ).unwrap();
            let q32 = fake_quant(&w32, mode).unwrap();
            // Same grid membership survives the narrower element type.
            let (codes, scales) = quantize_codes(&w32, mode).unwrap();
            let cols = w.shape()[1];
            for (i, &c) in codes.iter().enumerate() {
                prop_assert!(mode.grid().unwrap().contains(c as i64));
                let s = scales[i / cols];
                if s > 0.0 {
                    let ratio = q32.data()[i] as f64 / s;
                    prop_assert!((ratio - c as f64).abs() < 1e-4);
                }
            }
        }
    }
}
