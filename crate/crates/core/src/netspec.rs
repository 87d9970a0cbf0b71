//! Declarative network architecture: layer table, geometry chaining, and the
//! fan-in constraint validator.
//!
//! A `NetworkSpec` is an ordered list of convolution layers plus the input
//! shape and action count. The hardware-motivated constraint it enforces:
//! each neuron may read at most 128 inputs, where a layer with kernel k and
//! G groups over S source features has fan-in k*k*S/G. The input layer gets
//! a 256 bound instead, because the hardware halves fan-in only to afford
//! ternary weights on hidden synapses.
//!
//! Four reference architectures (the 1/2/4/8-chip tables) are encoded for
//! validation, and four desk-scale tiers are what actually get trained here.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const FAN_IN_BOUND: usize = 128;
pub const INPUT_FAN_IN_BOUND: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub features: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub tier: String,
    /// `[channels, height, width]` of the (binary) input tensor.
    pub input_shape: [usize; 3],
    pub actions: usize,
    pub layers: Vec<LayerSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FanInViolation {
    /// 0-based layer index.
    pub layer: usize,
    pub fan_in: usize,
    pub bound: usize,
}

impl NetworkSpec {
    /// Source feature count feeding layer `idx`.
    pub fn layer_input_features(&self, idx: usize) -> usize {
        if idx == 0 {
            self.input_shape[0]
        } else {
            self.layers[idx - 1].features
        }
    }

    /// Fan-in of one neuron in layer `idx`: kernel^2 * source/groups.
    pub fn layer_fan_in(&self, idx: usize) -> usize {
        let l = &self.layers[idx];
        l.kernel * l.kernel * (self.layer_input_features(idx) / l.groups)
    }

    /// Checks the per-neuron input bound on every layer. Never errors;
    /// returns the (possibly empty) violation list.
    pub fn validate_fanin(&self) -> Vec<FanInViolation> {
        let mut v = Vec::new();
        for idx in 0..self.layers.len() {
            let bound = if idx == 0 { INPUT_FAN_IN_BOUND } else { FAN_IN_BOUND };
            let fan_in = self.layer_fan_in(idx);
            if fan_in > bound {
                v.push(FanInViolation { layer: idx, fan_in, bound });
            }
        }
        v
    }

    /// Structural validation: divisibility, geometry chaining (every feature
    /// map at least 1x1), plus the fan-in bounds.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config("network spec has no layers".to_string()));
        }
        if self.actions == 0 {
            return Err(Error::config("network spec needs at least one action"));
        }
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!(
                "network input shape {:?} has a zero dimension",
                self.input_shape
            )));
        }
        for (idx, l) in self.layers.iter().enumerate() {
            let src = self.layer_input_features(idx);
            if l.kernel == 0 || l.stride == 0 || l.groups == 0 || l.features == 0 {
                return Err(Error::config(format!(
                    "layer {idx}: features/kernel/stride/groups must be positive, got {l:?}"
                )));
            }
            if src % l.groups != 0 {
                return Err(Error::config(format!(
                    "layer {idx}: {src} source features not divisible by {} groups",
                    l.groups
                )));
            }
            if l.features % l.groups != 0 {
                return Err(Error::config(format!(
                    "layer {idx}: {} features not divisible by {} groups",
                    l.features, l.groups
                )));
            }
        }
        for (idx, [_, h, w]) in self.feature_map_shapes()?.into_iter().enumerate() {
            if h == 0 || w == 0 {
                return Err(Error::shape(format!(
                    "layer {idx} produces an empty {h}x{w} feature map"
                )));
            }
        }
        let violations = self.validate_fanin();
        if let Some(v) = violations.first() {
            return Err(Error::config(format!(
                "layer {} fan-in {} exceeds bound {} ({} violations total)",
                v.layer,
                v.fan_in,
                v.bound,
                violations.len()
            )));
        }
        Ok(())
    }

    /// `[features, h, w]` after each layer, in order.
    pub fn feature_map_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        for (idx, l) in self.layers.iter().enumerate() {
            if l.kernel > h + 2 * l.pad || l.kernel > w + 2 * l.pad {
                return Err(Error::shape(format!(
                    "layer {idx}: kernel {} does not fit {h}x{w} input with pad {}",
                    l.kernel, l.pad
                )));
            }
            h = (h + 2 * l.pad - l.kernel) / l.stride + 1;
            w = (w + 2 * l.pad - l.kernel) / l.stride + 1;
            shapes.push([l.features, h, w]);
        }
        Ok(shapes)
    }

    /// Flattened feature count feeding the readout layer.
    pub fn readout_inputs(&self) -> Result<usize> {
        let last = *self
            .feature_map_shapes()?
            .last()
            .ok_or_else(|| Error::config("network spec has no layers"))?;
        Ok(last[0] * last[1] * last[2])
    }

    /// Plain-text serialization, one record per layer. Round-trips exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "tier {}", self.tier).unwrap();
        writeln!(
            s,
            "input {} {} {}",
            self.input_shape[0], self.input_shape[1], self.input_shape[2]
        )
        .unwrap();
        writeln!(s, "actions {}", self.actions).unwrap();
        for l in &self.layers {
            writeln!(
                s,
                "layer features={} kernel={} stride={} pad={} groups={}",
                l.features, l.kernel, l.stride, l.pad, l.groups
            )
            .unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tier = None;
        let mut input_shape = None;
        let mut actions = None;
        let mut layers = Vec::new();
        let parse_usize = |v: &str, what: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::config(format!("network spec: bad {what} value {v:?}")))
        };
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (head, rest) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| Error::config(format!("network spec line {}: {line:?}", ln + 1)))?;
            match head {
                "tier" => tier = Some(rest.trim().to_string()),
                "input" => {
                    let dims: Vec<usize> = rest
                        .split_whitespace()
                        .map(|v| parse_usize(v, "input dim"))
                        .collect::<Result<_>>()?;
                    if dims.len() != 3 {
                        return Err(Error::config(format!(
                            "network spec: input wants 3 dims, got {}",
                            dims.len()
                        )));
                    }
                    input_shape = Some([dims[0], dims[1], dims[2]]);
                }
                "actions" => actions = Some(parse_usize(rest.trim(), "actions")?),
                "layer" => {
                    let mut l = LayerSpec { features: 0, kernel: 0, stride: 0, pad: usize::MAX, groups: 0 };
                    for field in rest.split_whitespace() {
                        let (k, v) = field.split_once('=').ok_or_else(|| {
                            Error::config(format!("network spec: bad layer field {field:?}"))
                        })?;
                        let v = parse_usize(v, k)?;
                        match k {
                            "features" => l.features = v,
                            "kernel" => l.kernel = v,
                            "stride" => l.stride = v,
                            "pad" => l.pad = v,
                            "groups" => l.groups = v,
                            _ => {
                                return Err(Error::config(format!(
                                    "network spec: unknown layer field {k:?}"
                                )))
                            }
                        }
                    }
                    if l.features == 0 || l.kernel == 0 || l.stride == 0 || l.groups == 0 || l.pad == usize::MAX {
                        return Err(Error::config(format!(
                            "network spec: layer record incomplete: {rest:?}"
                        )));
                    }
                    layers.push(l);
                }
                _ => return Err(Error::config(format!("network spec: unknown record {head:?}"))),
            }
        }
        Ok(NetworkSpec {
            tier: tier.ok_or_else(|| Error::config("network spec: missing tier"))?,
            input_shape: input_shape.ok_or_else(|| Error::config("network spec: missing input"))?,
            actions: actions.ok_or_else(|| Error::config("network spec: missing actions"))?,
            layers,
        })
    }

    /// Desk-scale capacity tiers 1..=4 over transduced 24x24 input (4 frames
    /// times 4 thermometer levels = 16 binary channels). Base width doubles
    /// per tier; groups grow with width to hold fan-in at the bound:
    /// layer 1 fan-in 4*4*16 = 256 (input bound), layer 2 fan-in 72,
    /// layer 3 fan-in 2B/G3 <= 128.
    pub fn desk(tier: u8) -> Result<Self> {
        if !(1..=4).contains(&tier) {
            return Err(Error::config(format!("desk tier must be 1..=4, got {tier}")));
        }
        let base = 8usize << (tier - 1);
        let spec = NetworkSpec {
            tier: format!("desk-{tier}"),
            input_shape: [16, 24, 24],
            actions: 3,
            layers: vec![
                LayerSpec { features: base, kernel: 4, stride: 4, pad: 0, groups: 1 },
                LayerSpec {
                    features: 2 * base,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                    groups: (base / 8).max(1),
                },
                LayerSpec { features: 2 * base, kernel: 1, stride: 1, pad: 0, groups: 1 },
            ],
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn desk_tier_labels() -> [&'static str; 4] {
        ["desk-1", "desk-2", "desk-3", "desk-4"]
    }

    /// The four reference architectures (10/14/15/15 layers), encoded for
    /// constraint validation. They take a 4-channel 84x84 frame stack and
    /// are far above desk training budgets.
    pub fn reference(chips: usize) -> Result<Self> {
        // (features, kernel, stride, pad, groups)
        let rows: &[(usize, usize, usize, usize, usize)] = match chips {
            1 => &[
                (32, 8, 4, 2, 1),
                (256, 4, 2, 2, 4),
                (256, 1, 1, 0, 2),
                (512, 3, 1, 1, 32),
                (512, 1, 1, 0, 4),
                (1024, 4, 4, 0, 64),
                (1024, 1, 1, 0, 8),
                (2048, 2, 1, 0, 32),
                (2048, 1, 1, 0, 16),
                (4096, 1, 1, 0, 16),
            ],
            2 => &[
                (32, 8, 4, 2, 1),
                (256, 4, 2, 2, 4),
                (256, 1, 1, 0, 2),
                (256, 1, 1, 0, 2),
                (512, 3, 1, 1, 32),
                (512, 1, 1, 0, 4),
                (512, 1, 1, 0, 4),
                (1024, 4, 3, 0, 64),
                (1024, 1, 1, 0, 8),
                (1024, 1, 1, 0, 8),
                (2048, 2, 1, 0, 32),
                (4096, 1, 1, 0, 16),
                (4096, 1, 1, 0, 32),
                (8192, 1, 1, 0, 32),
            ],
            4 => &[
                (128, 8, 2, 1, 1),
                (512, 3, 2, 1, 16),
                (512, 1, 1, 0, 4),
                (512, 2, 2, 0, 16),
                (1024, 3, 1, 1, 64),
                (1024, 1, 1, 0, 8),
                (1024, 2, 2, 0, 32),
                (2048, 3, 1, 1, 128),
                (2048, 1, 1, 0, 16),
                (2048, 2, 2, 0, 64),
                (4096, 2, 1, 0, 128),
                (4096, 1, 1, 0, 32),
                (4096, 1, 1, 0, 32),
                (4096, 1, 1, 0, 32),
                (8192, 1, 1, 0, 32),
            ],
            8 => &[
                (256, 8, 2, 1, 1),
                (1024, 3, 2, 1, 32),
                (1024, 1, 1, 0, 8),
                (1024, 2, 2, 0, 32),
                (2048, 3, 1, 1, 128),
                (2048, 1, 1, 0, 16),
                (2048, 2, 2, 0, 64),
                (4096, 3, 1, 1, 256),
                (4096, 1, 1, 0, 32),
                (4096, 2, 2, 0, 128),
                (8192, 2, 1, 0, 256),
                (8192, 1, 1, 0, 64),
                (8192, 1, 1, 0, 64),
                (8192, 1, 1, 0, 64),
                (16384, 1, 1, 0, 64),
            ],
            _ => {
                return Err(Error::config(format!(
                    "reference architectures exist for 1/2/4/8 chips, got {chips}"
                )))
            }
        };
        Ok(NetworkSpec {
            tier: format!("{chips}-chip"),
            input_shape: [4, 84, 84],
            actions: 18,
            layers: rows
                .iter()
                .map(|&(features, kernel, stride, pad, groups)| LayerSpec {
                    features,
                    kernel,
                    stride,
                    pad,
                    groups,
                })
                .collect(),
        })
    }

    /// Resolves a tier label (`desk-1`..`desk-4`, `1-chip`/`2-chip`/`4-chip`/
    /// `8-chip`) to its spec.
    pub fn by_tier(label: &str) -> Result<Self> {
        match label {
            "desk-1" => Self::desk(1),
            "desk-2" => Self::desk(2),
            "desk-3" => Self::desk(3),
            "desk-4" => Self::desk(4),
            "1-chip" => Self::reference(1),
            "2-chip" => Self::reference(2),
            "4-chip" => Self::reference(4),
            "8-chip" => Self::reference(8),
            _ => Err(Error::config(format!("unknown tier label {label:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_example_fan_in_at_the_bound() {
        // 1x1 kernel over 256 source features in 2 groups = 128 inputs
        let spec = NetworkSpec {
            tier: "t".into(),
            input_shape: [256, 8, 8],
            actions: 3,
            layers: vec![
                LayerSpec { features: 256, kernel: 1, stride: 1, pad: 0, groups: 2 },
                LayerSpec { features: 256, kernel: 1, stride: 1, pad: 0, groups: 2 },
            ],
        };
        assert_eq!(spec.layer_fan_in(1), 128);
        assert!(spec.validate_fanin().is_empty());
    }

    #[test]
    fn second_layer_of_smallest_reference_arch_hits_128() {
        // kernel 4, 32 source features, 4 groups: 4*4*32/4 = 128
        let spec = NetworkSpec::reference(1).unwrap();
        assert_eq!(spec.layer_fan_in(1), 128);
    }

    #[test]
    fn oversubscribed_layer_is_reported() {
        let spec = NetworkSpec {
            tier: "t".into(),
            input_shape: [4, 32, 32],
            actions: 3,
            layers: vec![
                LayerSpec { features: 512, kernel: 3, stride: 1, pad: 1, groups: 1 },
                LayerSpec { features: 128, kernel: 3, stride: 1, pad: 1, groups: 4 },
            ],
        };
        let v = spec.validate_fanin();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0], FanInViolation { layer: 1, fan_in: 9 * 512 / 4, bound: 128 });
    }

    #[test]
    fn all_reference_architectures_validate() {
        for chips in [1, 2, 4, 8] {
            let spec = NetworkSpec::reference(chips).unwrap();
            assert!(spec.validate_fanin().is_empty(), "{chips}-chip fan-in");
            spec.validate().unwrap_or_else(|e| panic!("{chips}-chip: {e}"));
        }
        // layer counts as published
        assert_eq!(NetworkSpec::reference(1).unwrap().layers.len(), 10);
        assert_eq!(NetworkSpec::reference(2).unwrap().layers.len(), 14);
        assert_eq!(NetworkSpec::reference(4).unwrap().layers.len(), 15);
        assert_eq!(NetworkSpec::reference(8).unwrap().layers.len(), 15);
    }

    #[test]
    fn every_reference_layer_mutation_past_the_bound_is_rejected() {
        for chips in [1, 2, 4, 8] {
            let spec = NetworkSpec::reference(chips).unwrap();
            for idx in 0..spec.layers.len() {
                let mut bad = spec.clone();
                // halving groups (when even) or doubling kernel pushes most
                // layers over; only count the ones that actually exceed
                if bad.layers[idx].groups % 2 == 0 {
                    bad.layers[idx].groups /= 2;
                } else {
                    bad.layers[idx].kernel *= 2;
                }
                let bound = if idx == 0 { INPUT_FAN_IN_BOUND } else { FAN_IN_BOUND };
                if bad.layer_fan_in(idx) > bound {
                    let v = bad.validate_fanin();
                    assert!(
                        v.iter().any(|x| x.layer == idx),
                        "{chips}-chip layer {idx} mutation not caught"
                    );
                }
            }
        }
    }

    #[test]
    fn desk_tiers_validate_and_scale() {
        let mut last_params = 0usize;
        for t in 1..=4 {
            let spec = NetworkSpec::desk(t).unwrap();
            spec.validate().unwrap();
            assert_eq!(spec.input_shape, [16, 24, 24]);
            assert_eq!(spec.actions, 3);
            let params: usize = (0..spec.layers.len())
                .map(|i| {
                    let l = &spec.layers[i];
                    l.features * (spec.layer_input_features(i) / l.groups) * l.kernel * l.kernel
                })
                .sum();
            assert!(params > last_params, "tier {t} should be strictly larger");
            last_params = params;
        }
    }

    #[test]
    fn geometry_chain_shapes() {
        let spec = NetworkSpec::desk(2).unwrap();
        let shapes = spec.feature_map_shapes().unwrap();
        assert_eq!(shapes, vec![[16, 6, 6], [32, 6, 6], [32, 6, 6]]);
        assert_eq!(spec.readout_inputs().unwrap(), 32 * 36);
    }

    #[test]
    fn text_round_trip_is_exact() {
        for label in ["desk-1", "desk-3", "1-chip", "8-chip"] {
            let spec = NetworkSpec::by_tier(label).unwrap();
            let text = spec.to_text();
            let back = NetworkSpec::from_text(&text).unwrap();
            assert_eq!(spec, back);
            assert_eq!(text, back.to_text());
        }
    }

    #[test]
    fn from_text_rejects_malformed_records() {
        assert!(NetworkSpec::from_text("tier x\ninput 1 2\nactions 3").is_err());
        assert!(NetworkSpec::from_text("tier x\ninput 1 2 3\nactions 3\nlayer features=4").is_err());
        assert!(NetworkSpec::from_text("bogus 1").is_err());
    }

    #[test]
    fn empty_feature_map_is_rejected() {
        let spec = NetworkSpec {
            tier: "t".into(),
            input_shape: [4, 8, 8],
            actions: 3,
            layers: vec![
                LayerSpec { features: 4, kernel: 8, stride: 8, pad: 0, groups: 1 },
                LayerSpec { features: 4, kernel: 2, stride: 1, pad: 0, groups: 1 },
            ],
        };
        assert!(spec.validate().is_err());
    }
}
