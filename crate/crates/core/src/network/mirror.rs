use super::spec::{Activation, LayerOp, LayerSpec, NetworkSpec};
use crate::error::{config_err, Result};

/// Negative slope of the activations inside inversion modules.
pub const INVERSION_SLOPE: f64 = 0.2;

fn spatial(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Some((c, h, w)),
        _ => None,
    }
}

/// Builds the inversion architecture for `spec`.
///
/// The mirrored network takes the trunk output and runs one inversion block
/// per target block in reverse order, so mirrored block `j` (0-based)
/// inverts target block `L − j`. Convolutions become transposed
/// convolutions of the same geometry and vice versa, dense layers swap
/// their extents, and a block containing max pooling becomes a single
/// transposed convolution striding by the block's total downsampling.
/// Blocks that downsample get an extra 3×3 refinement convolution. Every
/// weighted layer uses batch norm and leaky ReLU, except the last weighted
/// layer of the final block, which is linear.
pub fn mirror_spec(spec: &NetworkSpec) -> Result<NetworkSpec> {
    let shapes = spec.validate()?;
    let num_blocks = spec.num_blocks();
    let mut layers: Vec<LayerSpec> = Vec::new();
    let mut block_ends = Vec::with_capacity(num_blocks);

    for b in (0..num_blocks).rev() {
        let range = spec.block_range(b);
        let in_shape = spec.block_input_shape(b)?;
        let out_shape = shapes[range.end - 1].clone();
        let block = &spec.layers[range.clone()];
        let mut mirrored = Vec::new();

        if block.iter().any(|l| matches!(l.op, LayerOp::MaxPool { .. })) {
            let ((ci, hi, wi), (co, ho, wo)) = match (spatial(&in_shape), spatial(&out_shape)) {
                (Some(i), Some(o)) => (i, o),
                _ => return Err(config_err!("pooled block {} is not spatial", b + 1)),
            };
            if hi % ho != 0 || wi % wo != 0 || hi / ho != wi / wo {
                return Err(config_err!(
                    "pooled block {} downsamples {hi}×{wi} → {ho}×{wo} by a non-uniform factor",
                    b + 1
                ));
            }
            let f = hi / ho;
            let (k, p) = match f {
                1 => (3, 1),
                f if f % 2 == 0 => (2 * f, f / 2),
                f => (f, 0),
            };
            mirrored.push(LayerSpec::conv_transpose(co, ci, k, f, p));
        } else {
            for (i, layer) in block.iter().enumerate().rev() {
                let layer_in = if range.start + i == 0 {
                    spec.input_shape.clone()
                } else {
                    shapes[range.start + i - 1].clone()
                };
                let op = match layer.op {
                    LayerOp::Conv {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        pad,
                    } => LayerOp::ConvTranspose {
                        in_channels: out_channels,
                        out_channels: in_channels,
                        kernel,
                        stride,
                        pad,
                    },
                    LayerOp::ConvTranspose {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        pad,
                    } => LayerOp::Conv {
                        in_channels: out_channels,
                        out_channels: in_channels,
                        kernel,
                        stride,
                        pad,
                    },
                    LayerOp::Dense {
                        in_features,
                        out_features,
                    } => LayerOp::Dense {
                        in_features: out_features,
                        out_features: in_features,
                    },
                    LayerOp::Flatten | LayerOp::Reshape { .. } => {
                        if layer_in.len() == 1 {
                            LayerOp::Flatten
                        } else {
                            LayerOp::Reshape { shape: layer_in }
                        }
                    }
                    LayerOp::GlobalAvgPool | LayerOp::MaxPool { .. } => {
                        return Err(config_err!(
                            "cannot mirror a {} layer in block {}",
                            layer.op.name(),
                            b + 1
                        ));
                    }
                };
                mirrored.push(LayerSpec::new(op));
            }
        }

        if let (Some((ci, hi, _)), Some((_, ho, _))) = (spatial(&in_shape), spatial(&out_shape)) {
            if hi > ho {
                mirrored.push(LayerSpec::conv(ci, ci, 3, 1, 1));
            }
        }

        let last_weighted = mirrored.iter().rposition(|l| l.op.has_weight());
        for (i, l) in mirrored.iter_mut().enumerate() {
            if !l.op.has_weight() {
                continue;
            }
            if b == 0 && Some(i) == last_weighted {
                continue;
            }
            l.batch_norm = true;
            l.activation = Activation::LeakyRelu {
                slope: INVERSION_SLOPE,
            };
        }
        layers.extend(mirrored);
        block_ends.push(layers.len());
    }

    let mirrored = NetworkSpec {
        input_shape: spec.trunk_output_shape()?,
        layers,
        block_ends,
    };
    mirrored.validate()?;
    Ok(mirrored)
}

/// Index (0-based) of the mirrored block that inverts target block `k`
/// (1-based) in a network of `num_blocks` blocks.
pub fn mirrored_block(num_blocks: usize, k: usize) -> usize {
    num_blocks - k
}
