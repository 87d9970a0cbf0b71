//! Folding a trained student into an integer-only deployed network, running
//! it, and proving it equivalent to the float inference path.
//!
//! A hidden unit fires iff `gamma*(s - mean)/sqrt(var + eps) + beta >= 0`,
//! where `s` is the integer accumulation of ternary weights against binary
//! inputs. Solving for `s` turns the whole batch-norm-plus-step stack into a
//! single integer threshold compare per feature: for `gamma > 0` the unit
//! fires iff `s >= ceil(mean - beta*sqrt(var + eps)/gamma)`; for `gamma < 0`
//! the inequality flips and the floor appears; `gamma == 0` makes the unit
//! constant. Because the closed form and the float path round differently
//! in the last ulp, each threshold candidate is nudged against the float
//! decision evaluated exactly as inference evaluates it, which is what makes
//! the equivalence bit-exact rather than approximately right.
//!
//! The readout stays linear but is scaled to fixed point; only the argmax
//! has to survive, so the scale is chosen on a calibration set and recorded
//! in the model file.

use crate::bin_io;
use crate::error::{Error, Result};
use crate::lowprec::StudentNetwork;
use crate::netspec::NetworkSpec;
use crate::rng;
use crate::tensor::argmax_tiebreak;
use crate::Tensor;
use rand::Rng;

/// Which way a folded unit's comparison points.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Fires iff the integer accumulation is >= the threshold.
    Ge,
    /// Fires iff the integer accumulation is < the threshold (negative gamma).
    Lt,
}

/// Always-fire and never-fire units (gamma == 0, or a crossing point far
/// outside any reachable accumulation) use extreme thresholds with `Ge`.
pub const ALWAYS: i32 = i32::MIN;
pub const NEVER: i32 = i32::MAX;

/// Folds one feature's batch-norm parameters into an integer threshold.
///
/// The float reference decision reproduces `batchnorm_apply` term for term
/// (same `sqrt().recip()`, same multiply-add order); the candidate threshold
/// from the closed form is then walked to the exact float crossing, so the
/// returned compare agrees with the float path on every integer input.
pub fn fold_feature(gamma: f64, beta: f64, mean: f64, var: f64, eps: f64) -> Result<(i32, Direction)> {
    if ![gamma, beta, mean, var, eps].iter().all(|v| v.is_finite()) || var + eps <= 0.0 {
        return Err(Error::corrupt(format!(
            "fold: bad batch-norm statistics (gamma={gamma}, beta={beta}, mean={mean}, var={var}, eps={eps})"
        )));
    }
    let inv = (var + eps).sqrt().recip();
    let g = gamma * inv;
    let b = beta - gamma * mean * inv;
    let fires = |s: i64| g * (s as f64) + b >= 0.0;
    if g == 0.0 {
        return Ok(if b >= 0.0 { (ALWAYS, Direction::Ge) } else { (NEVER, Direction::Ge) });
    }
    let t = -b / g;
    if !t.is_finite() || t.abs() >= (1 << 30) as f64 {
        // crossing far outside any reachable accumulation: constant unit
        let far = fires(if t > 0.0 { -(1 << 20) } else { 1 << 20 });
        return Ok(if far { (ALWAYS, Direction::Ge) } else { (NEVER, Direction::Ge) });
    }
    if g > 0.0 {
        // smallest s that fires
        let mut th = t.ceil() as i64;
        let mut guard = 0;
        while fires(th - 1) {
            th -= 1;
            guard += 1;
            assert!(guard < 1024, "fold threshold walk diverged");
        }
        while !fires(th) {
            th += 1;
            guard += 1;
            assert!(guard < 1024, "fold threshold walk diverged");
        }
        Ok((th as i32, Direction::Ge))
    } else {
        // fires below the crossing; threshold is the smallest non-firing s
        let mut th = t.floor() as i64 + 1;
        let mut guard = 0;
        while !fires(th - 1) {
            th -= 1;
            guard += 1;
            assert!(guard < 1024, "fold threshold walk diverged");
        }
        while fires(th) {
            th += 1;
            guard += 1;
            assert!(guard < 1024, "fold threshold walk diverged");
        }
        Ok((th as i32, Direction::Lt))
    }
}

/// Folds a whole layer's batch norm; one `(threshold, direction)` per feature.
pub fn fold_layer(layer: &crate::lowprec::QuantLayer) -> Result<(Vec<i32>, Vec<Direction>)> {
    let bn = &layer.bn;
    let mut thresholds = Vec::with_capacity(bn.gamma.len());
    let mut directions = Vec::with_capacity(bn.gamma.len());
    for f in 0..bn.gamma.len() {
        let (th, dir) = fold_feature(
            bn.gamma[f],
            bn.beta[f],
            bn.running_mean[f],
            bn.running_var[f],
            bn.eps,
        )
        .map_err(|e| Error::corrupt(format!("{e} (feature {f})")))?;
        thresholds.push(th);
        directions.push(dir);
    }
    Ok((thresholds, directions))
}

/// Packs ternary weights two bits each, little-endian within the byte:
/// 00 = 0, 01 = +1, 10 = -1, 11 reserved. Unused bits of the final byte
/// are zero.
pub fn pack_ternary(weights: &[f64]) -> Vec<u8> {
    let mut out = vec![0u8; weights.len().div_ceil(4)];
    for (i, &w) in weights.iter().enumerate() {
        let code: u8 = match w {
            w if w == 0.0 => 0b00,
            w if w == 1.0 => 0b01,
            w if w == -1.0 => 0b10,
            _ => panic!("pack_ternary got non-ternary weight {w}"),
        };
        out[i / 4] |= code << (2 * (i % 4));
    }
    out
}

pub fn unpack_ternary(packed: &[u8], count: usize) -> Result<Vec<i8>> {
    if packed.len() != count.div_ceil(4) {
        return Err(Error::corrupt(format!(
            "packed weight blob is {} bytes, expected {} for {count} weights",
            packed.len(),
            count.div_ceil(4)
        )));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        match (packed[i / 4] >> (2 * (i % 4))) & 0b11 {
            0b00 => out.push(0),
            0b01 => out.push(1),
            0b10 => out.push(-1),
            _ => return Err(Error::corrupt(format!("reserved weight code at index {i}"))),
        }
    }
    // stray bits past the last weight would break byte-identical round trips
    for i in count..packed.len() * 4 {
        if (packed[i / 4] >> (2 * (i % 4))) & 0b11 != 0 {
            return Err(Error::corrupt("nonzero padding bits in weight blob".to_string()));
        }
    }
    Ok(out)
}

struct FoldedLayer {
    packed: Vec<u8>,
    /// Working copy of `packed`, one signed weight per tap.
    weights: Vec<i8>,
    thresholds: Vec<i32>,
    directions: Vec<Direction>,
    in_shape: [usize; 3],
    out_shape: [usize; 3],
    kernel: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

/// Spike tally from one inference.
#[derive(Clone, Debug)]
pub struct SpikeCounts {
    pub per_layer: Vec<u64>,
}

/// Running aggregate over many inferences.
#[derive(Clone, Debug, Default)]
pub struct SpikeStats {
    spikes: Vec<u64>,
    inferences: u64,
}

impl SpikeStats {
    pub fn record(&mut self, counts: &SpikeCounts) {
        if self.spikes.is_empty() {
            self.spikes = vec![0; counts.per_layer.len()];
        }
        for (s, c) in self.spikes.iter_mut().zip(&counts.per_layer) {
            *s += c;
        }
        self.inferences += 1;
    }

    pub fn report(&self, dn: &DeployedNetwork, inferences_per_sec: Option<f64>) -> SpikeReport {
        let n = self.inferences.max(1) as f64;
        let layer_rates = self
            .spikes
            .iter()
            .zip(&dn.layers)
            .map(|(&s, l)| s as f64 / (n * l.out_shape.iter().product::<usize>() as f64))
            .collect();
        SpikeReport {
            layer_rates,
            spikes_per_inference: self.spikes.iter().sum::<u64>() as f64 / n,
            inferences_per_sec,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SpikeReport {
    /// Mean firing rate per layer, in [0, 1].
    pub layer_rates: Vec<f64>,
    pub spikes_per_inference: f64,
    pub inferences_per_sec: Option<f64>,
}

/// The integer-only network: ternary weights, threshold compares, and a
/// fixed-point readout. Immutable once built; `integer_forward` is pure.
pub struct DeployedNetwork {
    pub spec: NetworkSpec,
    layers: Vec<FoldedLayer>,
    /// Readout weights scaled by `readout_scale` and rounded, `[actions, D]`.
    readout_w: Vec<i64>,
    readout_b: Vec<i64>,
    pub readout_scale: u64,
}

const TNF_MAGIC: &[u8; 4] = b"TNF1";
const TNF_VERSION: u16 = 1;
const SCALE_START: u64 = 1 << 12;
const SCALE_CAP: u64 = 1 << 24;
const CALIBRATION_SAMPLES: usize = 2000;
const CALIBRATION_SEED: u64 = 0x7e51_0bb5;

fn quantize_readout(w: &Tensor, b: &[f64], scale: u64) -> Result<(Vec<i64>, Vec<i64>)> {
    let q = |v: f64| -> Result<i64> {
        let s = v * scale as f64;
        if !s.is_finite() || s.abs() >= (1i64 << 62) as f64 {
            return Err(Error::corrupt(format!("readout weight {v} does not quantize")));
        }
        Ok(s.round() as i64)
    };
    let wq = w.data().iter().map(|&v| q(v)).collect::<Result<Vec<_>>>()?;
    let bq = b.iter().map(|&v| q(v)).collect::<Result<Vec<_>>>()?;
    Ok((wq, bq))
}

impl DeployedNetwork {
    /// Worst-case readout error in unscaled units: with D inputs each weight
    /// rounds by at most 1/2, plus the bias, so a deployed score differs
    /// from scale times the float score by at most (D+1)/2. Argmax therefore
    /// can only flip where the float top-2 gap is below this step.
    pub fn readout_step(&self) -> f64 {
        let d = self.readout_w.len() / self.spec.actions;
        (d as f64 + 1.0) / self.readout_scale as f64
    }

    pub fn input_len(&self) -> usize {
        self.spec.input_shape.iter().product()
    }

    /// Runs the hidden layers only; returns every layer's binary activation
    /// map (unit per byte) plus spike counts.
    fn hidden_forward(&self, input: &[u8]) -> Result<(Vec<Vec<u8>>, SpikeCounts)> {
        if input.len() != self.input_len() {
            return Err(Error::shape(format!(
                "deployed input has {} bits, network wants {}",
                input.len(),
                self.input_len()
            )));
        }
        debug_assert!(input.iter().all(|&b| b <= 1), "input bits must be 0/1");
        let mut acts: Vec<Vec<u8>> = Vec::with_capacity(self.layers.len());
        let mut spikes = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let x = if li == 0 { input } else { &acts[li - 1] };
            let [ci, h, w] = layer.in_shape;
            let [co, ho, wo] = layer.out_shape;
            let (k, stride, pad) = (layer.kernel, layer.stride, layer.pad);
            let cg = ci / layer.groups;
            let fg = co / layer.groups;
            let mut y = vec![0u8; co * ho * wo];
            let mut layer_spikes = 0u64;
            for f in 0..co {
                let cbase = (f / fg) * cg;
                let th = layer.thresholds[f];
                let dir = layer.directions[f];
                let wbase = f * cg * k * k;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc: i32 = 0;
                        for c in 0..cg {
                            let xplane = (cbase + c) * h * w;
                            let wplane = wbase + c * k * k;
                            for ky in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = xplane + iy as usize * w;
                                let wrow = wplane + ky * k;
                                for kx in 0..k {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += layer.weights[wrow + kx] as i32
                                        * x[xrow + ix as usize] as i32;
                                }
                            }
                        }
                        let fire = match dir {
                            Direction::Ge => acc >= th,
                            Direction::Lt => acc < th,
                        };
                        if fire {
                            y[(f * ho + oy) * wo + ox] = 1;
                            layer_spikes += 1;
                        }
                    }
                }
            }
            spikes.push(layer_spikes);
            acts.push(y);
        }
        Ok((acts, SpikeCounts { per_layer: spikes }))
    }

    /// Full integer inference: binary input bits to integer action scores.
    pub fn integer_forward(&self, input: &[u8]) -> Result<(Vec<i64>, SpikeCounts)> {
        let (acts, spikes) = self.hidden_forward(input)?;
        let flat = acts.last().unwrap();
        let d = flat.len();
        let mut scores = Vec::with_capacity(self.spec.actions);
        for a in 0..self.spec.actions {
            let mut acc = self.readout_b[a];
            let row = &self.readout_w[a * d..(a + 1) * d];
            for (wv, &y) in row.iter().zip(flat) {
                acc += wv * y as i64;
            }
            scores.push(acc);
        }
        Ok((scores, spikes))
    }

    pub fn act(&self, input: &[u8]) -> Result<usize> {
        let (scores, _) = self.integer_forward(input)?;
        Ok(argmax_tiebreak(&scores))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(TNF_MAGIC);
        bin_io::put_u16(&mut out, TNF_VERSION);
        bin_io::put_str(&mut out, &self.spec.to_text());
        for layer in &self.layers {
            bin_io::put_bytes(&mut out, &layer.packed);
            for &t in &layer.thresholds {
                bin_io::put_i32(&mut out, t);
            }
            let mut dir_bits = vec![0u8; layer.directions.len().div_ceil(8)];
            for (i, &d) in layer.directions.iter().enumerate() {
                if d == Direction::Lt {
                    dir_bits[i / 8] |= 1 << (i % 8);
                }
            }
            bin_io::put_bytes(&mut out, &dir_bits);
        }
        bin_io::put_u64(&mut out, self.readout_scale);
        for &w in &self.readout_w {
            bin_io::put_i64(&mut out, w);
        }
        for &b in &self.readout_b {
            bin_io::put_i64(&mut out, b);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bin_io::Reader::new(bytes, "deployed model");
        r.magic(TNF_MAGIC)?;
        let version = r.u16()?;
        if version != TNF_VERSION {
            return Err(Error::corrupt(format!("deployed model version {version}")));
        }
        let spec = NetworkSpec::from_text(&r.str()?)
            .map_err(|e| Error::corrupt(format!("deployed model spec: {e}")))?;
        spec.validate().map_err(|e| Error::corrupt(format!("deployed model spec: {e}")))?;
        let shapes = spec.feature_map_shapes().map_err(|e| Error::corrupt(e.to_string()))?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (idx, geom) in spec.layers.iter().enumerate() {
            let in_shape = if idx == 0 { spec.input_shape } else { shapes[idx - 1] };
            let count = geom.features * (in_shape[0] / geom.groups) * geom.kernel * geom.kernel;
            let packed = r.bytes()?;
            let weights = unpack_ternary(&packed, count)
                .map_err(|e| Error::corrupt(format!("{e} (layer {idx})")))?;
            let mut thresholds = Vec::with_capacity(geom.features);
            for _ in 0..geom.features {
                thresholds.push(r.i32()?);
            }
            let dir_bits = r.bytes()?;
            if dir_bits.len() != geom.features.div_ceil(8) {
                return Err(Error::corrupt(format!("direction bits malformed (layer {idx})")));
            }
            let directions = (0..geom.features)
                .map(|i| {
                    if dir_bits[i / 8] >> (i % 8) & 1 == 1 { Direction::Lt } else { Direction::Ge }
                })
                .collect();
            for i in geom.features..dir_bits.len() * 8 {
                if dir_bits[i / 8] >> (i % 8) & 1 != 0 {
                    return Err(Error::corrupt(format!(
                        "nonzero padding in direction bits (layer {idx})"
                    )));
                }
            }
            layers.push(FoldedLayer {
                packed,
                weights,
                thresholds,
                directions,
                in_shape,
                out_shape: shapes[idx],
                kernel: geom.kernel,
                stride: geom.stride,
                pad: geom.pad,
                groups: geom.groups,
            });
        }
        let readout_scale = r.u64()?;
        if readout_scale == 0 {
            return Err(Error::corrupt("deployed model has zero readout scale".to_string()));
        }
        let d: usize = shapes.last().unwrap().iter().product();
        let mut readout_w = Vec::with_capacity(spec.actions * d);
        for _ in 0..spec.actions * d {
            readout_w.push(r.i64()?);
        }
        let mut readout_b = Vec::with_capacity(spec.actions);
        for _ in 0..spec.actions {
            readout_b.push(r.i64()?);
        }
        r.expect_end()?;
        Ok(DeployedNetwork { spec, layers, readout_w, readout_b, readout_scale })
    }
}

fn random_bits(rng: &mut rand_chacha::ChaCha12Rng, n: usize) -> Vec<u8> {
    (0..n).map(|_| rng.gen_range(0..=1u8)).collect()
}

/// Folds every layer and quantizes the readout at the smallest power-of-two
/// scale (from 2^12, capped at 2^24) whose argmax agreement with the float
/// readout reaches 99.95% on an internal random calibration set.
pub fn deploy(net: &StudentNetwork) -> Result<DeployedNetwork> {
    net.spec.validate()?;
    let shapes = net.spec.feature_map_shapes()?;
    let mut layers = Vec::with_capacity(net.layers.len());
    for (idx, layer) in net.layers.iter().enumerate() {
        let (thresholds, directions) =
            fold_layer(layer).map_err(|e| Error::corrupt(format!("{e} (layer {idx})")))?;
        let packed = pack_ternary(layer.ternary.data());
        let weights = unpack_ternary(&packed, layer.ternary.len()).expect("own packing is valid");
        layers.push(FoldedLayer {
            packed,
            weights,
            thresholds,
            directions,
            in_shape: if idx == 0 { net.spec.input_shape } else { shapes[idx - 1] },
            out_shape: shapes[idx],
            kernel: layer.geom.kernel,
            stride: layer.geom.stride,
            pad: layer.geom.pad,
            groups: layer.geom.groups,
        });
    }
    let mut dn = DeployedNetwork {
        spec: net.spec.clone(),
        layers,
        readout_w: Vec::new(),
        readout_b: Vec::new(),
        readout_scale: SCALE_START,
    };

    // Hidden activations do not depend on the readout scale, so run the
    // calibration set once and reuse the final-layer bits per scale.
    let mut cal_rng = rng::stream(CALIBRATION_SEED, rng::streams::CALIBRATION);
    let input_len = dn.input_len();
    let d = net.readout_w.shape()[1];
    let mut flats: Vec<Vec<u8>> = Vec::with_capacity(CALIBRATION_SAMPLES);
    let mut float_argmax: Vec<usize> = Vec::with_capacity(CALIBRATION_SAMPLES);
    for _ in 0..CALIBRATION_SAMPLES {
        let bits = random_bits(&mut cal_rng, input_len);
        let (acts, _) = dn.hidden_forward(&bits)?;
        let flat = acts.last().unwrap().clone();
        let mut q = vec![0.0; net.spec.actions];
        for (a, qa) in q.iter_mut().enumerate() {
            let row = net.readout_w.row(a);
            let mut acc = net.readout_b[a];
            for (wv, &y) in row.iter().zip(&flat) {
                if y != 0 {
                    acc += wv;
                }
            }
            *qa = acc;
        }
        float_argmax.push(argmax_tiebreak(&q));
        flats.push(flat);
    }

    let mut scale = SCALE_START;
    loop {
        let (wq, bq) = quantize_readout(&net.readout_w, &net.readout_b, scale)?;
        let mut agree = 0usize;
        for (flat, &fa) in flats.iter().zip(&float_argmax) {
            let mut scores = vec![0i64; net.spec.actions];
            for (a, sc) in scores.iter_mut().enumerate() {
                let mut acc = bq[a];
                for (wv, &y) in wq[a * d..(a + 1) * d].iter().zip(flat) {
                    if y != 0 {
                        acc += wv;
                    }
                }
                *sc = acc;
            }
            if argmax_tiebreak(&scores) == fa {
                agree += 1;
            }
        }
        if agree as f64 >= 0.9995 * CALIBRATION_SAMPLES as f64 {
            dn.readout_w = wq;
            dn.readout_b = bq;
            dn.readout_scale = scale;
            return Ok(dn);
        }
        if scale >= SCALE_CAP {
            return Err(Error::Verification(format!(
                "readout calibration: argmax agreement {:.4} below 0.9995 at maximum scale {SCALE_CAP}",
                agree as f64 / CALIBRATION_SAMPLES as f64
            )));
        }
        scale *= 2;
    }
}

#[derive(Clone, Debug)]
pub struct EquivalenceReport {
    pub hidden_bitexact: bool,
    pub argmax_agreement: f64,
    pub samples: usize,
    /// Human-readable description of the first hidden mismatch, if any.
    pub first_mismatch: Option<String>,
}

/// Drives `n_samples` random binary inputs through both the float inference
/// path and the integer path, comparing hidden activations bit for bit and
/// counting argmax agreement of the outputs.
pub fn equivalence_check(
    net: &StudentNetwork,
    dn: &DeployedNetwork,
    n_samples: usize,
) -> Result<EquivalenceReport> {
    let mut rng = rng::stream(CALIBRATION_SEED ^ 1, rng::streams::CALIBRATION);
    let [c, h, w] = net.spec.input_shape;
    let input_len = c * h * w;
    let mut hidden_bitexact = true;
    let mut first_mismatch = None;
    let mut agree = 0usize;
    let chunk = 128;
    let mut done = 0;
    while done < n_samples {
        let n = chunk.min(n_samples - done);
        let mut bit_samples = Vec::with_capacity(n);
        let mut batch = Tensor::zeros(&[n, c, h, w]);
        for i in 0..n {
            let bits = random_bits(&mut rng, input_len);
            let row = &mut batch.data_mut()[i * input_len..(i + 1) * input_len];
            for (dst, &b) in row.iter_mut().zip(&bits) {
                *dst = b as f64;
            }
            bit_samples.push(bits);
        }
        let (q, acts) = net.eval_with_activations(&batch)?;
        for (i, bits) in bit_samples.iter().enumerate() {
            let (scores, _) = dn.integer_forward(bits)?;
            if argmax_tiebreak(&scores) == argmax_tiebreak(q.row(i)) {
                agree += 1;
            }
            if hidden_bitexact {
                let (int_acts, _) = dn.hidden_forward(bits)?;
                'layers: for (li, ia) in int_acts.iter().enumerate() {
                    let layer_len = ia.len();
                    let fa = &acts[li].data()[i * layer_len..(i + 1) * layer_len];
                    for (u, (&fv, &iv)) in fa.iter().zip(ia).enumerate() {
                        if (fv == 1.0) != (iv == 1) {
                            hidden_bitexact = false;
                            first_mismatch = Some(format!(
                                "sample {}: layer {li} unit {u} float={fv} integer={iv}",
                                done + i
                            ));
                            break 'layers;
                        }
                    }
                }
            }
        }
        done += n;
    }
    Ok(EquivalenceReport {
        hidden_bitexact,
        argmax_agreement: agree as f64 / n_samples.max(1) as f64,
        samples: n_samples,
        first_mismatch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batchnorm::{batchnorm_apply, BatchNorm};
    use crate::lowprec::{binary_step, Activation, StudentNetwork};
    use crate::netspec::{LayerSpec, NetworkSpec};
    use rand::Rng;

    fn small_spec() -> NetworkSpec {
        NetworkSpec {
            tier: "test-deploy".into(),
            input_shape: [4, 6, 6],
            actions: 3,
            layers: vec![
                LayerSpec { features: 8, kernel: 3, stride: 1, pad: 1, groups: 1 },
                LayerSpec { features: 8, kernel: 3, stride: 1, pad: 1, groups: 2 },
            ],
        }
    }

    fn trained_ish_net(seed: u64) -> StudentNetwork {
        let mut rng = crate::rng::stream(seed, 0);
        let mut net = StudentNetwork::new(small_spec(), 1e-4, &mut rng).unwrap();
        // a few steps so the running statistics move off their init
        for _ in 0..5 {
            let x = Tensor::new(
                &[4, 4, 6, 6],
                (0..4 * 4 * 36).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect(),
            )
            .unwrap();
            let cache = net.forward_train(&x, Activation::Binary).unwrap();
            let dq_vals: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let dq = Tensor::new(&[4, 3], dq_vals).unwrap();
            let grads = net.backward_train(&cache, &dq).unwrap();
            net.sgd_momentum_step(&grads, 0.05, 0.9);
        }
        net
    }

    #[test]
    fn identity_batchnorm_folds_to_zero_threshold() {
        let (th, dir) = fold_feature(1.0, 0.0, 0.0, 1.0, 0.0).unwrap();
        assert_eq!((th, dir), (0, Direction::Ge));
    }

    #[test]
    fn negative_gamma_flips_direction() {
        let (th, dir) = fold_feature(-1.0, 0.0, 0.0, 1.0, 0.0).unwrap();
        assert_eq!(dir, Direction::Lt);
        // fires iff -s >= 0 iff s <= 0 iff s < 1
        assert_eq!(th, 1);
    }

    #[test]
    fn zero_gamma_makes_constant_units() {
        assert_eq!(fold_feature(0.0, 0.25, 3.0, 1.0, 1e-5).unwrap(), (ALWAYS, Direction::Ge));
        assert_eq!(fold_feature(0.0, -0.25, 3.0, 1.0, 1e-5).unwrap(), (NEVER, Direction::Ge));
    }

    #[test]
    fn non_finite_stats_are_a_fold_error() {
        assert!(matches!(fold_feature(1.0, 0.0, f64::NAN, 1.0, 1e-5), Err(Error::Corrupt(_))));
        assert!(matches!(fold_feature(f64::INFINITY, 0.0, 0.0, 1.0, 1e-5), Err(Error::Corrupt(_))));
        assert!(matches!(fold_feature(1.0, 0.0, 0.0, -1.0, 0.5), Err(Error::Corrupt(_))));
    }

    /// The fold's reason for existing: for any parameters, the integer
    /// compare equals the float batch-norm-plus-step decision on every
    /// integer accumulation, including crossings placed exactly on integers.
    #[test]
    fn fold_decision_matches_float_decision_on_all_integers() {
        let mut rng = crate::rng::stream(21, 0);
        for case in 0..400 {
            let gamma = if case % 7 == 0 { 0.0 } else { rng.gen_range(-3.0..3.0) };
            let mean = if case % 5 == 0 {
                rng.gen_range(-20i32..20) as f64 // integer crossing candidates
            } else {
                rng.gen_range(-20.0..20.0)
            };
            let beta = if case % 5 == 0 { 0.0 } else { rng.gen_range(-3.0..3.0) };
            let var = rng.gen_range(1e-6..4.0);
            let eps = 1e-5;
            let (th, dir) = fold_feature(gamma, beta, mean, var, eps).unwrap();
            let inv = (var + eps).sqrt().recip();
            let g = gamma * inv;
            let b = beta - gamma * mean * inv;
            for s in -300i64..=300 {
                let float_fires = g * (s as f64) + b >= 0.0;
                let int_fires = match dir {
                    Direction::Ge => s >= th as i64,
                    Direction::Lt => s < th as i64,
                };
                assert_eq!(
                    float_fires, int_fires,
                    "case {case}: gamma={gamma} beta={beta} mean={mean} var={var} s={s} th={th} dir={dir:?}"
                );
            }
        }
    }

    /// An 8-input neuron, exhaustively: every one of the 2^8 binary input
    /// vectors drives the folded compare and the float path to the same bit.
    #[test]
    fn eight_input_neuron_exhaustive_equivalence() {
        let mut rng = crate::rng::stream(22, 0);
        for _ in 0..50 {
            let weights: Vec<f64> = (0..8).map(|_| rng.gen_range(-1i32..=1) as f64).collect();
            let mut bn = BatchNorm::<f64>::new(1, 0.9, 1e-5);
            bn.gamma[0] = rng.gen_range(-2.0..2.0);
            bn.beta[0] = rng.gen_range(-2.0..2.0);
            bn.running_mean[0] = rng.gen_range(-4.0..4.0);
            bn.running_var[0] = rng.gen_range(0.01..4.0);
            let (th, dir) =
                fold_feature(bn.gamma[0], bn.beta[0], bn.running_mean[0], bn.running_var[0], bn.eps)
                    .unwrap();
            for mask in 0u32..256 {
                let bits: Vec<f64> = (0..8).map(|i| ((mask >> i) & 1) as f64).collect();
                let s: f64 = bits.iter().zip(&weights).map(|(x, w)| x * w).sum();
                let x = Tensor::new(&[1, 1], vec![s]).unwrap();
                let r = bn.forward_infer(&x).unwrap();
                let float_fires = binary_step(r.data()[0], 0.0) == 1.0;
                let si = s as i64;
                let int_fires = match dir {
                    Direction::Ge => si >= th as i64,
                    Direction::Lt => si < th as i64,
                };
                assert_eq!(float_fires, int_fires, "mask {mask:08b}, s={s}");
            }
        }
    }

    #[test]
    fn pack_unpack_round_trip_many_random_tensors() {
        let mut rng = crate::rng::stream(23, 0);
        let mut total = 0usize;
        while total < 100_000 {
            let n = rng.gen_range(0..24usize);
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1i32..=1) as f64).collect();
            let packed = pack_ternary(&w);
            let back = unpack_ternary(&packed, n).unwrap();
            assert_eq!(w, back.iter().map(|&v| v as f64).collect::<Vec<_>>());
            assert_eq!(pack_ternary(&back.iter().map(|&v| v as f64).collect::<Vec<_>>()), packed);
            total += n.max(1);
        }
    }

    #[test]
    fn unpack_rejects_reserved_code_and_bad_length() {
        assert!(matches!(unpack_ternary(&[0b0000_0011], 4), Err(Error::Corrupt(_))));
        assert!(matches!(unpack_ternary(&[0, 0], 4), Err(Error::Corrupt(_))));
        // nonzero padding past the last weight
        assert!(matches!(unpack_ternary(&[0b0100_0001], 2), Err(Error::Corrupt(_))));
    }

    #[test]
    fn deployed_network_is_bit_exact_against_float_inference() {
        let net = trained_ish_net(31);
        let dn = deploy(&net).unwrap();
        let report = equivalence_check(&net, &dn, 1000).unwrap();
        assert!(report.hidden_bitexact, "{:?}", report.first_mismatch);
        assert!(report.argmax_agreement >= 0.99, "agreement {}", report.argmax_agreement);
    }

    #[test]
    fn argmax_mismatches_only_inside_the_quantization_step() {
        let net = trained_ish_net(32);
        let dn = deploy(&net).unwrap();
        let mut rng = crate::rng::stream(33, 0);
        let input_len = dn.input_len();
        let mut mismatches = 0;
        for _ in 0..2000 {
            let bits = random_bits(&mut rng, input_len);
            let (scores, _) = dn.integer_forward(&bits).unwrap();
            let x = Tensor::new(
                &[1, 4, 6, 6],
                bits.iter().map(|&b| b as f64).collect(),
            )
            .unwrap();
            let q = net.forward_eval(&x).unwrap();
            if argmax_tiebreak(&scores) != argmax_tiebreak(q.row(0)) {
                mismatches += 1;
                let mut sorted = q.row(0).to_vec();
                sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                let gap = sorted[0] - sorted[1];
                assert!(
                    gap < dn.readout_step(),
                    "argmax flipped with top-2 gap {gap} >= step {}",
                    dn.readout_step()
                );
            }
        }
        assert!(mismatches as f64 / 2000.0 <= 0.001 + 1e-9, "{mismatches} mismatches");
    }

    #[test]
    fn tampered_threshold_is_detected() {
        let net = trained_ish_net(34);
        let mut dn = deploy(&net).unwrap();
        dn.layers[1].thresholds[3] += 1;
        let report = equivalence_check(&net, &dn, 500).unwrap();
        assert!(!report.hidden_bitexact);
        assert!(report.first_mismatch.is_some());
    }

    #[test]
    fn all_zero_input_with_positive_thresholds_is_silent() {
        let net = trained_ish_net(35);
        let mut dn = deploy(&net).unwrap();
        for layer in &mut dn.layers {
            for t in &mut layer.thresholds {
                *t = 1;
            }
            for d in &mut layer.directions {
                *d = Direction::Ge;
            }
        }
        let bits = vec![0u8; dn.input_len()];
        let (scores, spikes) = dn.integer_forward(&bits).unwrap();
        assert!(spikes.per_layer.iter().all(|&s| s == 0));
        assert_eq!(scores, dn.readout_b);
    }

    #[test]
    fn inference_is_deterministic_and_rates_are_bounded() {
        let net = trained_ish_net(36);
        let dn = deploy(&net).unwrap();
        let mut rng = crate::rng::stream(37, 0);
        let bits = random_bits(&mut rng, dn.input_len());
        let (s1, c1) = dn.integer_forward(&bits).unwrap();
        let (s2, c2) = dn.integer_forward(&bits).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(c1.per_layer, c2.per_layer);
        let mut stats = SpikeStats::default();
        stats.record(&c1);
        stats.record(&c2);
        let report = stats.report(&dn, Some(100.0));
        for rate in &report.layer_rates {
            assert!((0.0..=1.0).contains(rate), "rate {rate}");
        }
        assert!(report.spikes_per_inference >= 0.0);
        assert_eq!(report.inferences_per_sec, Some(100.0));
    }

    #[test]
    fn wrong_input_length_is_rejected() {
        let net = trained_ish_net(38);
        let dn = deploy(&net).unwrap();
        assert!(matches!(dn.integer_forward(&[0u8; 3]), Err(Error::Shape(_))));
    }

    #[test]
    fn model_file_round_trip_is_byte_identical() {
        let net = trained_ish_net(39);
        let dn = deploy(&net).unwrap();
        let bytes = dn.to_bytes();
        let back = DeployedNetwork::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        // and behaves identically
        let mut rng = crate::rng::stream(40, 0);
        let bits = random_bits(&mut rng, dn.input_len());
        assert_eq!(dn.integer_forward(&bits).unwrap().0, back.integer_forward(&bits).unwrap().0);
    }

    #[test]
    fn model_file_rejects_corruption() {
        let net = trained_ish_net(41);
        let dn = deploy(&net).unwrap();
        let bytes = dn.to_bytes();
        assert!(matches!(
            DeployedNetwork::from_bytes(&bytes[..bytes.len() - 2]),
            Err(Error::Corrupt(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(DeployedNetwork::from_bytes(&bad), Err(Error::Corrupt(_))));
        let mut with_junk = bytes;
        with_junk.push(0);
        assert!(matches!(DeployedNetwork::from_bytes(&with_junk), Err(Error::Corrupt(_))));
    }

    #[test]
    fn folded_hidden_path_matches_batchnorm_apply_expression() {
        // pin the fold's float reference to the batchnorm_apply formula; if
        // one changes without the other this dies immediately
        let (gamma, beta, mean, var, eps) = (0.8, -0.3, 2.5, 1.7, 1e-5);
        let (th, dir) = fold_feature(gamma, beta, mean, var, eps).unwrap();
        for s in -50i64..=50 {
            let x = Tensor::new(&[1, 1], vec![s as f64]).unwrap();
            let y = batchnorm_apply(&x, &[mean], &[var], &[gamma], &[beta], eps).unwrap();
            let float_fires = y.data()[0] >= 0.0;
            let int_fires = match dir {
                Direction::Ge => s >= th as i64,
                Direction::Lt => s < th as i64,
            };
            assert_eq!(float_fires, int_fires, "s={s}");
        }
    }
}
