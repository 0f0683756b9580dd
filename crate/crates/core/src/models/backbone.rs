use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::checkpoint::{self, CheckpointEntry};
use super::config::{BackboneConfig, BlockKind};
use super::layers::{BatchNorm2d, Conv2d, Linear};
use crate::error::{Error, Result};
use crate::optim::Parameter;
use crate::rng::{stream_rng, Stream};
use crate::tensor::{global_avg_pool, relu, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
enum Block<S: Scalar> {
    Basic {
        conv1: Conv2d<S>,
        bn1: BatchNorm2d<S>,
        conv2: Conv2d<S>,
        bn2: BatchNorm2d<S>,
        shortcut: Option<(Conv2d<S>, BatchNorm2d<S>)>,
    },
    Plain {
        conv: Conv2d<S>,
        bn: BatchNorm2d<S>,
    },
}

impl<S: Scalar> Block<S> {
    fn forward(&self, x: &Tensor<S>, training: bool) -> Result<Tensor<S>> {
        match self {
            Block::Plain { conv, bn } => Ok(relu(&bn.forward(&conv.forward(x)?, training)?)),
            Block::Basic {
                conv1,
                bn1,
                conv2,
                bn2,
                shortcut,
            } => {
                let h = relu(&bn1.forward(&conv1.forward(x)?, training)?);
                let h = bn2.forward(&conv2.forward(&h)?, training)?;
                let skip = match shortcut {
                    Some((conv, bn)) => bn.forward(&conv.forward(x)?, training)?,
                    None => x.clone(),
                };
                Ok(relu(&h.add(&skip)?))
            }
        }
    }

    fn convs(&self) -> Vec<&Conv2d<S>> {
        match self {
            Block::Plain { conv, .. } => vec![conv],
            Block::Basic {
                conv1, conv2, shortcut, ..
            } => {
                let mut v = vec![conv1, conv2];
                v.extend(shortcut.as_ref().map(|(c, _)| c));
                v
            }
        }
    }

    fn bns(&self) -> Vec<&BatchNorm2d<S>> {
        match self {
            Block::Plain { bn, .. } => vec![bn],
            Block::Basic { bn1, bn2, shortcut, .. } => {
                let mut v = vec![bn1, bn2];
                v.extend(shortcut.as_ref().map(|(_, b)| b));
                v
            }
        }
    }

    fn layers_mut(&mut self) -> (Vec<&mut Conv2d<S>>, Vec<&mut BatchNorm2d<S>>) {
        match self {
            Block::Plain { conv, bn } => (vec![conv], vec![bn]),
            Block::Basic {
                conv1,
                bn1,
                conv2,
                bn2,
                shortcut,
            } => {
                let (mut convs, mut bns) = (vec![conv1, conv2], vec![bn1, bn2]);
                if let Some((c, b)) = shortcut {
                    convs.push(c);
                    bns.push(b);
                }
                (convs, bns)
            }
        }
    }
}

/// Stage activations in network order, addressable by name.
#[derive(Debug, Clone, Default)]
pub struct StageFeatures<S: Scalar = f32> {
    entries: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> StageFeatures<S> {
    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn last(&self) -> Option<&Tensor<S>> {
        self.entries.last().map(|(_, t)| t)
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<S: Scalar = f32> {
    pub logits: Tensor<S>,
    pub features: StageFeatures<S>,
}

/// An instantiated backbone: stem, stages of blocks, pooled linear head.
#[derive(Debug, Clone)]
pub struct ModelInstance<S: Scalar = f32> {
    config: BackboneConfig,
    mode: Mode,
    stem_conv: Conv2d<S>,
    stem_bn: BatchNorm2d<S>,
    stages: Vec<Vec<Block<S>>>,
    head: Linear<S>,
}

impl<S: Scalar> ModelInstance<S> {
    /// Deterministic construction: identical `(config, seed)` gives
    /// bitwise-identical parameters.
    pub fn build(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, Stream::ModelInit, &[]);
        let stem_conv = Conv2d::new("stem.conv", config.in_channels, config.stem_channels, 3, 1, 1, false, &mut rng);
        let stem_bn = BatchNorm2d::new("stem.bn", config.stem_channels);
        let mut c_in = config.stem_channels;
        let mut stages = Vec::with_capacity(config.stages.len());
        for (si, spec) in config.stages.iter().enumerate() {
            let mut blocks = Vec::with_capacity(spec.blocks);
            for bi in 0..spec.blocks {
                let p = format!("stage{}.block{bi}", si + 1);
                let stride = if bi == 0 && spec.downsample { 2 } else { 1 };
                let c_out = spec.channels;
                let block = match config.block_kind {
                    BlockKind::Plain => Block::Plain {
                        conv: Conv2d::new(&format!("{p}.conv"), c_in, c_out, 3, stride, 1, false, &mut rng),
                        bn: BatchNorm2d::new(&format!("{p}.bn"), c_out),
                    },
                    BlockKind::BasicResidual => Block::Basic {
                        conv1: Conv2d::new(&format!("{p}.conv1"), c_in, c_out, 3, stride, 1, false, &mut rng),
                        bn1: BatchNorm2d::new(&format!("{p}.bn1"), c_out),
                        conv2: Conv2d::new(&format!("{p}.conv2"), c_out, c_out, 3, 1, 1, false, &mut rng),
                        bn2: BatchNorm2d::new(&format!("{p}.bn2"), c_out),
                        shortcut: (stride != 1 || c_in != c_out).then(|| {
                            (
                                Conv2d::new(&format!("{p}.shortcut.conv"), c_in, c_out, 1, stride, 0, false, &mut rng),
                                BatchNorm2d::new(&format!("{p}.shortcut.bn"), c_out),
                            )
                        }),
                    },
                };
                blocks.push(block);
                c_in = c_out;
            }
            stages.push(blocks);
        }
        let head = Linear::new("head.fc", c_in, config.num_classes, &mut rng);
        Ok(Self {
            config: config.clone(),
            mode: Mode::Train,
            stem_conv,
            stem_bn,
            stages,
            head,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Stops all gradient tracking and switches to eval mode. Idempotent.
    pub fn freeze(&mut self) {
        for p in self.parameters() {
            p.tensor.set_requires_grad(false);
        }
        self.mode = Mode::Eval;
    }

    pub fn is_frozen(&self) -> bool {
        self.mode == Mode::Eval && self.parameters().iter().all(|p| !p.tensor.requires_grad())
    }

    /// Logits plus one feature per stage (`stage1`..`stageL`).
    pub fn forward_with_features(&self, batch: &Tensor<S>) -> Result<ForwardOutput<S>> {
        let c = &self.config;
        match *batch.shape() {
            [_, ch, h, w] if ch == c.in_channels && h == c.input_size && w == c.input_size => {}
            ref s => {
                return Err(Error::shape(
                    "forward_with_features",
                    format!(
                        "batch shape {s:?} incompatible with model input (N, {}, {}, {})",
                        c.in_channels, c.input_size, c.input_size
                    ),
                ))
            }
        }
        let training = self.mode == Mode::Train;
        let mut x = relu(&self.stem_bn.forward(&self.stem_conv.forward(batch)?, training)?);
        let mut entries = Vec::with_capacity(self.stages.len());
        for (si, blocks) in self.stages.iter().enumerate() {
            for block in blocks {
                x = block.forward(&x, training)?;
            }
            entries.push((format!("stage{}", si + 1), x.clone()));
        }
        let logits = self.head.forward(&global_avg_pool(&x)?)?;
        Ok(ForwardOutput {
            logits,
            features: StageFeatures { entries },
        })
    }

    pub fn forward(&self, batch: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.forward_with_features(batch)?.logits)
    }

    fn conv_layers(&self) -> Vec<&Conv2d<S>> {
        let mut v = vec![&self.stem_conv];
        v.extend(self.stages.iter().flatten().flat_map(Block::convs));
        v
    }

    fn bn_layers(&self) -> Vec<&BatchNorm2d<S>> {
        let mut v = vec![&self.stem_bn];
        v.extend(self.stages.iter().flatten().flat_map(Block::bns));
        v
    }

    /// Trainable parameters in a fixed order.
    pub fn parameters(&self) -> Vec<&Parameter<S>> {
        let mut v: Vec<&Parameter<S>> = self.conv_layers().into_iter().flat_map(|c| c.params()).collect();
        v.extend(self.bn_layers().into_iter().flat_map(|b| b.params()));
        v.extend(self.head.params());
        v
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let Self {
            stem_conv,
            stem_bn,
            stages,
            head,
            ..
        } = self;
        let mut convs: Vec<&mut Conv2d<S>> = vec![stem_conv];
        let mut bns: Vec<&mut BatchNorm2d<S>> = vec![stem_bn];
        for block in stages.iter_mut().flatten() {
            let (c, b) = block.layers_mut();
            convs.extend(c);
            bns.extend(b);
        }
        let mut v: Vec<&mut Parameter<S>> = convs.into_iter().flat_map(|c| c.params_mut()).collect();
        v.extend(bns.into_iter().flat_map(|b| b.params_mut()));
        v.extend(head.params_mut());
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    /// Every persistent tensor (parameters, then BN running statistics).
    pub fn state(&self) -> Vec<(String, Tensor<S>)> {
        let mut v: Vec<(String, Tensor<S>)> =
            self.parameters().into_iter().map(|p| (p.name.clone(), p.tensor.clone())).collect();
        for bn in self.bn_layers() {
            v.extend(bn.buffers().into_iter().map(|(n, t)| (n, t.clone())));
        }
        v
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        checkpoint::encode(&self.state())
    }

    /// SHA-256 of the serialized state, as lowercase hex.
    pub fn state_hash(&self) -> String {
        Sha256::digest(self.checkpoint_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.state())
    }

    /// Overwrites the model state from decoded checkpoint entries. Names and
    /// shapes must match the model exactly.
    pub fn load_state(&self, entries: &[CheckpointEntry], source: &Path) -> Result<()> {
        let bad = |reason: String| Error::Checkpoint {
            path: source.to_path_buf(),
            reason,
        };
        let state = self.state();
        let mut by_name: HashMap<&str, &CheckpointEntry> = HashMap::new();
        for e in entries {
            if by_name.insert(e.name.as_str(), e).is_some() {
                return Err(bad(format!("duplicate tensor `{}`", e.name)));
            }
        }
        if entries.len() != state.len() {
            return Err(bad(format!("{} tensors in file, model has {}", entries.len(), state.len())));
        }
        for (name, tensor) in &state {
            let e = by_name.get(name.as_str()).ok_or_else(|| bad(format!("missing tensor `{name}`")))?;
            if e.dims != tensor.shape() {
                return Err(bad(format!(
                    "tensor `{name}` has shape {:?} in file, model expects {:?}",
                    e.dims,
                    tensor.shape()
                )));
            }
        }
        for (name, tensor) in &state {
            let e = by_name[name.as_str()];
            *tensor.data_mut() = e.data.iter().map(|&v| S::from_f64_lossy(v as f64)).collect();
        }
        Ok(())
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        let entries = checkpoint::load(path)?;
        self.load_state(&entries, path)
    }
}
