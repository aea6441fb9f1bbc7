//! The model zoo: slot-structured networks, replaceable parts, activation
//! taps and checkpoints.

mod checkpoint;
mod model;
mod parts;

pub use checkpoint::{
    load_checkpoint, manifest_path, read_tensors, restore, save_checkpoint, state_tensors, write_tensors, Manifest,
    SlotManifest,
};
pub use model::{
    group_boundaries, Adapter, ForwardOutput, HeadSpec, Input, LayerSlot, Mode, ModelSpec, ModuleGraph, Origin,
    SlotSpec, StemSpec, BN_MOMENTUM,
};
pub use parts::{build_part, Activation, BnBuffers, BnMode, Ctx, Interface, Part, PartSpec, BN_EPS};

/// Conv guide: `slots` same-padding 3×3 conv + BN + ReLU layers with
/// `channels` channels, then global pooling and a linear classifier.
pub fn toy_cnn_spec(in_channels: usize, size: usize, channels: usize, slots: usize, classes: usize) -> ModelSpec {
    ModelSpec {
        input: vec![in_channels, size, size],
        stem: StemSpec::Identity,
        slots: (0..slots)
            .map(|_| SlotSpec {
                part: PartSpec::Conv2d {
                    out_channels: channels,
                    kernel: 3,
                    batch_norm: true,
                    activation: Activation::Relu,
                },
                output: None,
            })
            .collect(),
        head: HeadSpec::PoolLinear { classes },
    }
}

/// Residual MLP guide of `depth` single-block slots on `width` features.
pub fn deep_mlp_spec(input_dim: usize, width: usize, hidden: usize, depth: usize, classes: usize) -> ModelSpec {
    ModelSpec {
        input: vec![input_dim],
        stem: StemSpec::Linear {
            dim: width,
            activation: Activation::Relu,
        },
        slots: (0..depth)
            .map(|_| SlotSpec {
                part: PartSpec::BlockGroup { hidden, depth: 1 },
                output: None,
            })
            .collect(),
        head: HeadSpec::Linear { classes },
    }
}

/// Causal transformer: `blocks` pairs of attention and tokenwise-MLP slots.
pub fn toy_transformer_spec(vocab: usize, seq: usize, dim: usize, hidden: usize, blocks: usize) -> ModelSpec {
    let mut slots = Vec::new();
    for _ in 0..blocks {
        slots.push(SlotSpec {
            part: PartSpec::Attention,
            output: None,
        });
        slots.push(SlotSpec {
            part: PartSpec::TokenwiseMlp {
                hidden,
                activation: Activation::Gelu,
            },
            output: None,
        });
    }
    ModelSpec {
        input: vec![seq],
        stem: StemSpec::Embedding { vocab, dim },
        slots,
        head: HeadSpec::TokenLinear { vocab },
    }
}
