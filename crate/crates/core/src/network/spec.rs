use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};

/// The linear (or shape-only) part of a layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerOp {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// Transposed convolution; the upsampling layer of generators and
    /// inversion modules.
    ConvTranspose {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Dense {
        in_features: usize,
        out_features: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Flatten,
    Reshape {
        shape: Vec<usize>,
    },
}

impl LayerOp {
    pub fn name(&self) -> &'static str {
        match self {
            LayerOp::Conv { .. } => "conv",
            LayerOp::ConvTranspose { .. } => "conv_transpose",
            LayerOp::Dense { .. } => "dense",
            LayerOp::MaxPool { .. } => "maxpool",
            LayerOp::GlobalAvgPool => "global_avg_pool",
            LayerOp::Flatten => "flatten",
            LayerOp::Reshape { .. } => "reshape",
        }
    }

    /// Whether the layer owns a weight tensor.
    pub fn has_weight(&self) -> bool {
        matches!(
            self,
            LayerOp::Conv { .. } | LayerOp::ConvTranspose { .. } | LayerOp::Dense { .. }
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Activation {
    #[default]
    None,
    Relu,
    LeakyRelu {
        slope: f64,
    },
    Sigmoid,
}

/// One layer: linear op, then optional batch norm, then activation.
/// Layers with batch norm carry no bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub op: LayerOp,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub batch_norm: bool,
}

impl LayerSpec {
    pub fn new(op: LayerOp) -> Self {
        LayerSpec {
            op,
            activation: Activation::None,
            batch_norm: false,
        }
    }

    pub fn with_bn(mut self) -> Self {
        self.batch_norm = true;
        self
    }

    pub fn with_activation(mut self, act: Activation) -> Self {
        self.activation = act;
        self
    }

    pub fn conv(cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self::new(LayerOp::Conv {
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            pad,
        })
    }

    pub fn conv_transpose(cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self::new(LayerOp::ConvTranspose {
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            pad,
        })
    }

    pub fn dense(inp: usize, out: usize) -> Self {
        Self::new(LayerOp::Dense {
            in_features: inp,
            out_features: out,
        })
    }

    pub fn has_bias(&self) -> bool {
        self.op.has_weight() && !self.batch_norm
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let out = match (&self.op, input) {
            (
                &LayerOp::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    pad,
                },
                &[c, h, w],
            ) => {
                if c != in_channels {
                    return Err(shape_err!("conv expects {in_channels} channels, got {c}"));
                }
                let (oh, ow) = (
                    conv_extent(h, kernel, stride, pad)?,
                    conv_extent(w, kernel, stride, pad)?,
                );
                vec![out_channels, oh, ow]
            }
            (
                &LayerOp::ConvTranspose {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    pad,
                },
                &[c, h, w],
            ) => {
                if c != in_channels {
                    return Err(shape_err!(
                        "conv_transpose expects {in_channels} channels, got {c}"
                    ));
                }
                vec![
                    out_channels,
                    transpose_extent(h, kernel, stride, pad)?,
                    transpose_extent(w, kernel, stride, pad)?,
                ]
            }
            (
                &LayerOp::Dense {
                    in_features,
                    out_features,
                },
                &[f],
            ) => {
                if f != in_features {
                    return Err(shape_err!("dense expects {in_features} features, got {f}"));
                }
                vec![out_features]
            }
            (&LayerOp::MaxPool { kernel, stride }, &[c, h, w]) => {
                if kernel == 0 || stride == 0 || kernel > h || kernel > w {
                    return Err(config_err!("maxpool window {kernel} does not fit {h}×{w}"));
                }
                vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1]
            }
            (LayerOp::GlobalAvgPool, &[c, _, _]) => vec![c],
            (LayerOp::Flatten, s) => vec![s.iter().product()],
            (LayerOp::Reshape { shape }, s) => {
                if shape.iter().product::<usize>() != s.iter().product::<usize>() {
                    return Err(shape_err!("cannot reshape {s:?} into {shape:?}"));
                }
                shape.clone()
            }
            (op, s) => {
                return Err(shape_err!("{} cannot take input of shape {s:?}", op.name()));
            }
        };
        Ok(out)
    }

    fn validate(&self) -> Result<()> {
        match self.op {
            LayerOp::Conv { kernel, stride, .. } | LayerOp::ConvTranspose { kernel, stride, .. } => {
                if kernel == 0 || stride == 0 {
                    return Err(config_err!("kernel and stride must be ≥ 1"));
                }
            }
            LayerOp::MaxPool { kernel, stride } => {
                if kernel == 0 || stride == 0 {
                    return Err(config_err!("maxpool kernel and stride must be ≥ 1"));
                }
            }
            _ => {}
        }
        if let Activation::LeakyRelu { slope } = self.activation {
            if !(slope > 0.0 && slope < 1.0) {
                return Err(config_err!("leaky_relu slope {slope} outside (0, 1)"));
            }
        }
        if self.batch_norm && !self.op.has_weight() {
            return Err(config_err!("batch norm attached to a {} layer", self.op.name()));
        }
        Ok(())
    }
}

fn conv_extent(n: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    let padded = n + 2 * p;
    if padded < k || (padded - k) % s != 0 {
        return Err(config_err!(
            "non-integral conv output extent ({n}+2·{p}−{k})/{s}"
        ));
    }
    Ok((padded - k) / s + 1)
}

fn transpose_extent(n: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    let full = (n - 1) * s + k;
    if full <= 2 * p {
        return Err(config_err!("conv_transpose pad {p} too large"));
    }
    Ok(full - 2 * p)
}

/// Ordered layers partitioned into invertible blocks. Layers after the last
/// block end form the head (e.g. pooling and a classifier), which is
/// executed by [`forward_logits`](super::forward_logits) but never inverted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Per-sample input shape: `[C, H, W]` or `[D]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    /// Exclusive end index of each block, strictly increasing.
    pub block_ends: Vec<usize>,
}

impl NetworkSpec {
    /// Checks block partitioning and the shape chain, returning the output
    /// shape of every layer.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        if self.block_ends.is_empty() {
            return Err(config_err!("a network needs at least one block"));
        }
        let mut prev = 0;
        for &end in &self.block_ends {
            if end <= prev {
                return Err(config_err!("block ends {:?} not strictly increasing", self.block_ends));
            }
            prev = end;
        }
        if prev > self.layers.len() {
            return Err(config_err!(
                "block end {prev} beyond {} layers",
                self.layers.len()
            ));
        }
        for b in 0..self.num_blocks() {
            let range = self.block_range(b);
            let layers = &self.layers[range.clone()];
            if layers.iter().any(|l| matches!(l.op, LayerOp::MaxPool { .. }))
                && !layers.iter().any(|l| l.op.has_weight())
            {
                return Err(config_err!(
                    "block {} consists of pooling only; merge it into a parameterized block",
                    b + 1
                ));
            }
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input_shape.clone();
        for (i, l) in self.layers.iter().enumerate() {
            l.validate().map_err(|e| config_err!("layer {i}: {e}"))?;
            cur = l.output_shape(&cur).map_err(|e| shape_err!("layer {i}: {e}"))?;
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    /// Number of invertible blocks `L`.
    pub fn num_blocks(&self) -> usize {
        self.block_ends.len()
    }

    /// Layer indices of block `b` (0-based).
    pub fn block_range(&self, b: usize) -> Range<usize> {
        let start = if b == 0 { 0 } else { self.block_ends[b - 1] };
        start..self.block_ends[b]
    }

    /// Number of layers in the invertible trunk.
    pub fn trunk_len(&self) -> usize {
        *self.block_ends.last().expect("validated spec has blocks")
    }

    pub fn has_head(&self) -> bool {
        self.trunk_len() < self.layers.len()
    }

    /// Per-sample input shape of block `b` (0-based).
    pub fn block_input_shape(&self, b: usize) -> Result<Vec<usize>> {
        if b == 0 {
            return Ok(self.input_shape.clone());
        }
        let shapes = self.validate()?;
        Ok(shapes[self.block_range(b).start - 1].clone())
    }

    /// Per-sample output shape of block `b` (0-based).
    pub fn block_output_shape(&self, b: usize) -> Result<Vec<usize>> {
        let shapes = self.validate()?;
        Ok(shapes[self.block_range(b).end - 1].clone())
    }

    /// Output shape of the trunk (last block).
    pub fn trunk_output_shape(&self) -> Result<Vec<usize>> {
        self.block_output_shape(self.num_blocks() - 1)
    }

    /// Indices of layers with batch norm, within the trunk and head.
    pub fn bn_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].batch_norm)
            .collect()
    }

    /// Names and shapes of every trainable tensor.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let shapes = self.validate()?;
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let (wshape, channels) = match l.op {
                LayerOp::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => (vec![out_channels, in_channels, kernel, kernel], out_channels),
                LayerOp::ConvTranspose {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => (vec![in_channels, out_channels, kernel, kernel], out_channels),
                LayerOp::Dense {
                    in_features,
                    out_features,
                } => (vec![in_features, out_features], out_features),
                _ => continue,
            };
            debug_assert_eq!(shapes[i][0], channels);
            out.push((param_name(i, "weight"), wshape));
            if l.has_bias() {
                out.push((param_name(i, "bias"), vec![channels]));
            }
            if l.batch_norm {
                out.push((param_name(i, "gamma"), vec![channels]));
                out.push((param_name(i, "beta"), vec![channels]));
            }
        }
        Ok(out)
    }

    /// Layer-level output/input dimensionality ratios.
    pub fn expansion_report(&self) -> Result<Vec<ExpansionRow>> {
        let shapes = self.validate()?;
        let mut input: Vec<usize> = self.input_shape.clone();
        let mut rows = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let in_dim: usize = input.iter().product();
            let out_dim: usize = shapes[i].iter().product();
            let ratio = out_dim as f64 / in_dim as f64;
            rows.push(ExpansionRow {
                layer: i,
                kind: l.op.name(),
                in_dim,
                out_dim,
                ratio,
                flagged: ratio < 1.0,
            });
            input = shapes[i].clone();
        }
        Ok(rows)
    }
}

/// Name of a per-layer tensor, e.g. `"3.weight"`.
pub fn param_name(layer: usize, what: &str) -> String {
    format!("{layer}.{what}")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExpansionRow {
    pub layer: usize,
    pub kind: &'static str,
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim / in_dim`; below 1 no exact left inverse exists.
    pub ratio: f64,
    pub flagged: bool,
}
