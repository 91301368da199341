use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::network::{Activation, LayerOp, LayerSpec, NetworkSpec};

/// Shape of the small VGG-style classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MicroVggConfig {
    pub in_channels: usize,
    pub size: usize,
    /// Output channels of the six conv blocks.
    pub widths: [usize; 6],
    /// Kernel of the stride-2 blocks (padding `(k − 2) / 2`).
    pub down_kernel: usize,
    pub n_classes: usize,
}

impl Default for MicroVggConfig {
    fn default() -> Self {
        MicroVggConfig {
            in_channels: 1,
            size: 32,
            widths: [16, 16, 32, 32, 64, 128],
            down_kernel: 2,
            n_classes: 3,
        }
    }
}

/// Six conv+BN+ReLU blocks with strides 1,2,1,2,1,2, then global average
/// pooling and a dense classifier head.
pub fn micro_vgg(cfg: &MicroVggConfig) -> Result<NetworkSpec> {
    if cfg.down_kernel < 2 || cfg.down_kernel % 2 != 0 {
        return Err(config_err!("down_kernel must be even and ≥ 2, got {}", cfg.down_kernel));
    }
    let mut layers = Vec::new();
    let mut c = cfg.in_channels;
    for (i, &w) in cfg.widths.iter().enumerate() {
        let l = if i % 2 == 0 {
            LayerSpec::conv(c, w, 3, 1, 1)
        } else {
            LayerSpec::conv(c, w, cfg.down_kernel, 2, (cfg.down_kernel - 2) / 2)
        };
        layers.push(l.with_bn().with_activation(Activation::Relu));
        c = w;
    }
    let block_ends = (1..=layers.len()).collect();
    layers.push(LayerSpec::new(LayerOp::GlobalAvgPool));
    layers.push(LayerSpec::dense(c, cfg.n_classes));
    let spec = NetworkSpec {
        input_shape: vec![cfg.in_channels, cfg.size, cfg.size],
        layers,
        block_ends,
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MicroGenConfig {
    pub latent_dim: usize,
    /// Channels of the 4×4 seed map; each upsampling block halves them.
    pub base_channels: usize,
    pub out_channels: usize,
}

impl Default for MicroGenConfig {
    fn default() -> Self {
        MicroGenConfig {
            latent_dim: 32,
            base_channels: 128,
            out_channels: 1,
        }
    }
}

/// Dense projection to a 4×4 map, three stride-2 transposed conv blocks to
/// 32×32 and a final conv squashed to `[0, 1]`.
pub fn micro_gen(cfg: &MicroGenConfig) -> Result<NetworkSpec> {
    let b = cfg.base_channels;
    if b < 8 || b % 8 != 0 {
        return Err(config_err!("base_channels must be a positive multiple of 8, got {b}"));
    }
    let relu = Activation::Relu;
    let layers = vec![
        LayerSpec::dense(cfg.latent_dim, b * 16).with_bn().with_activation(relu),
        LayerSpec::new(LayerOp::Reshape { shape: vec![b, 4, 4] }),
        LayerSpec::conv_transpose(b, b / 2, 4, 2, 1).with_bn().with_activation(relu),
        LayerSpec::conv_transpose(b / 2, b / 4, 4, 2, 1).with_bn().with_activation(relu),
        LayerSpec::conv_transpose(b / 4, b / 8, 4, 2, 1).with_bn().with_activation(relu),
        LayerSpec::conv(b / 8, cfg.out_channels, 3, 1, 1).with_activation(Activation::Sigmoid),
    ];
    let spec = NetworkSpec {
        input_shape: vec![cfg.latent_dim],
        layers,
        block_ends: vec![2, 3, 4, 5, 6],
    };
    spec.validate()?;
    Ok(spec)
}

/// Critic for adversarial generator training: three stride-2 convs with
/// leaky ReLU and a dense logit.
pub fn discriminator(in_channels: usize, size: usize) -> Result<NetworkSpec> {
    if size % 8 != 0 {
        return Err(config_err!("discriminator needs a size divisible by 8, got {size}"));
    }
    let leaky = Activation::LeakyRelu { slope: 0.2 };
    let layers = vec![
        LayerSpec::conv(in_channels, 16, 4, 2, 1).with_activation(leaky),
        LayerSpec::conv(16, 32, 4, 2, 1).with_activation(leaky),
        LayerSpec::conv(32, 64, 4, 2, 1).with_activation(leaky),
        LayerSpec::new(LayerOp::Flatten),
        LayerSpec::dense(64 * (size / 8) * (size / 8), 1),
    ];
    let spec = NetworkSpec {
        input_shape: vec![in_channels, size, size],
        layers,
        block_ends: vec![1, 2, 3],
    };
    spec.validate()?;
    Ok(spec)
}
