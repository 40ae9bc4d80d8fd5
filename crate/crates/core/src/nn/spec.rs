use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::NnError;
use crate::rng::rng_for;

pub const KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlock {
    pub out_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    pub pool: bool,
}

fn default_kernel() -> usize {
    KERNEL
}

impl ConvBlock {
    pub fn new(out_channels: usize, pool: bool) -> Self {
        ConvBlock {
            out_channels,
            kernel: KERNEL,
            pool,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub head_id: usize,
    pub n_outputs: usize,
}

/// Architecture: 3×3 conv blocks, global average pooling, linear heads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_side: usize,
    pub conv_blocks: Vec<ConvBlock>,
    pub feature_dim: usize,
    pub heads: Vec<HeadSpec>,
    pub init_seed: u64,
}

impl ModelSpec {
    /// The default desk-scale trunk: 16/32/64 channels, pooling after the
    /// first two blocks.
    pub fn desk(input_side: usize, heads: Vec<HeadSpec>, init_seed: u64) -> Self {
        ModelSpec::with_blocks(
            input_side,
            vec![
                ConvBlock::new(16, true),
                ConvBlock::new(32, true),
                ConvBlock::new(64, false),
            ],
            heads,
            init_seed,
        )
    }

    pub fn with_blocks(
        input_side: usize,
        conv_blocks: Vec<ConvBlock>,
        heads: Vec<HeadSpec>,
        init_seed: u64,
    ) -> Self {
        let feature_dim = conv_blocks.last().map_or(3, |b| b.out_channels);
        ModelSpec {
            input_side,
            conv_blocks,
            feature_dim,
            heads,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: String| Err(NnError::InvalidSpec(m));
        if self.input_side == 0 {
            return bad("input_side must be positive".into());
        }
        if self.conv_blocks.is_empty() {
            return bad("at least one conv block is required".into());
        }
        let mut side = self.input_side;
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.kernel != KERNEL {
                return bad(format!("block {i}: only 3x3 kernels are supported"));
            }
            if b.out_channels == 0 {
                return bad(format!("block {i}: out_channels must be positive"));
            }
            if b.pool {
                side /= 2;
                if side == 0 {
                    return bad(format!("block {i}: pooling reduces the map to nothing"));
                }
            }
        }
        let last = self.conv_blocks.last().map(|b| b.out_channels).unwrap_or(0);
        if self.feature_dim != last {
            return bad(format!(
                "feature_dim {} must equal last block channels {last}",
                self.feature_dim
            ));
        }
        if self.heads.is_empty() {
            return bad("at least one head is required".into());
        }
        for (i, h) in self.heads.iter().enumerate() {
            if h.n_outputs == 0 {
                return bad(format!("head {} has no outputs", h.head_id));
            }
            if self.heads[..i].iter().any(|o| o.head_id == h.head_id) {
                return bad(format!("duplicate head id {}", h.head_id));
            }
        }
        Ok(())
    }

    pub fn head_index(&self, head_id: usize) -> Option<usize> {
        self.heads.iter().position(|h| h.head_id == head_id)
    }

    /// Spatial sides of each block's input.
    pub fn block_sides(&self) -> Vec<usize> {
        let mut side = self.input_side;
        let mut out = Vec::with_capacity(self.conv_blocks.len());
        for b in &self.conv_blocks {
            out.push(side);
            if b.pool {
                side /= 2;
            }
        }
        out
    }

    pub fn layout(&self) -> Layout {
        let mut entries = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let len: usize = shape.iter().product();
            entries.push(LayerDesc {
                name,
                offset,
                shape,
            });
            offset += len;
        };
        let mut in_ch = 3;
        for (i, b) in self.conv_blocks.iter().enumerate() {
            push(format!("conv{i}.weight"), vec![b.out_channels, in_ch, KERNEL, KERNEL]);
            push(format!("conv{i}.bias"), vec![b.out_channels]);
            in_ch = b.out_channels;
        }
        for h in &self.heads {
            push(format!("head{}.weight", h.head_id), vec![h.n_outputs, self.feature_dim]);
            push(format!("head{}.bias", h.head_id), vec![h.n_outputs]);
        }
        Layout { entries }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDesc {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl LayerDesc {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn is_bias(&self) -> bool {
        self.name.ends_with(".bias")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub entries: Vec<LayerDesc>,
}

impl Layout {
    pub fn total_len(&self) -> usize {
        self.entries.last().map_or(0, |e| e.offset + e.len())
    }

    pub fn get(&self, name: &str) -> Option<&LayerDesc> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Offsets start at zero and each entry starts where the previous ends.
    pub fn is_contiguous(&self) -> bool {
        let mut next = 0;
        self.entries.iter().all(|e| {
            let ok = e.offset == next;
            next = e.offset + e.len();
            ok
        })
    }
}

/// Flat trainable parameters with their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f32>,
    pub layout: Layout,
}

impl ParamVector {
    pub fn zeros(spec: &ModelSpec) -> Self {
        let layout = spec.layout();
        ParamVector {
            values: vec![0.0; layout.total_len()],
            layout,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slice(&self, name: &str) -> Option<&[f32]> {
        self.layout.get(name).map(|e| &self.values[e.range()])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// He-normal weights (std = sqrt(2 / fan_in)), zero biases. Each layer draws
/// from its own seeded stream.
pub fn init_model(spec: &ModelSpec) -> Result<ParamVector, NnError> {
    spec.validate()?;
    let mut params = ParamVector::zeros(spec);
    for (i, entry) in params.layout.entries.clone().iter().enumerate() {
        if entry.is_bias() {
            continue;
        }
        let fan_in: usize = entry.shape[1..].iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let mut rng = rng_for(spec.init_seed, &entry.name, i as u64);
        for v in &mut params.values[entry.range()] {
            *v = normal.sample(&mut rng) as f32;
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ModelSpec {
        ModelSpec::desk(
            32,
            vec![HeadSpec {
                head_id: 0,
                n_outputs: 6,
            }],
            7,
        )
    }

    #[test]
    fn layout_contiguous() {
        let s = spec();
        let l = s.layout();
        assert!(l.is_contiguous());
        let expected = 16 * 27 + 16 + 32 * 144 + 32 + 64 * 288 + 64 + 6 * 64 + 6;
        assert_eq!(l.total_len(), expected);
    }

    #[test]
    fn init_deterministic_zero_bias() {
        let a = init_model(&spec()).unwrap();
        let b = init_model(&spec()).unwrap();
        assert_eq!(a, b);
        for e in &a.layout.entries {
            if e.is_bias() {
                assert!(a.values[e.range()].iter().all(|&v| v == 0.0));
            }
        }
        let mut other = spec();
        other.init_seed = 8;
        assert_ne!(init_model(&other).unwrap().values, a.values);
    }

    #[test]
    fn he_std_within_ten_percent() {
        let p = init_model(&spec()).unwrap();
        // conv1: 32 out × 16 in × 3×3, fan_in 144
        let w = p.slice("conv1.weight").unwrap();
        assert!(w.len() >= 1000);
        let n = w.len() as f64;
        let mean = w.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let var = w.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let target = (2.0f64 / 144.0).sqrt();
        assert!((var.sqrt() - target).abs() / target < 0.1, "{} vs {target}", var.sqrt());
    }

    #[test]
    fn invalid_specs() {
        let mut s = spec();
        s.feature_dim = 10;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.heads.clear();
        assert!(s.validate().is_err());
        let mut s = spec();
        s.heads.push(HeadSpec {
            head_id: 0,
            n_outputs: 2,
        });
        assert!(s.validate().is_err());
        let mut s = spec();
        s.conv_blocks[0].kernel = 5;
        assert!(s.validate().is_err());
    }
}
