use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::conv_output_size;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Two 3×3 conv+BN layers with an identity or 1×1 projection shortcut.
    BasicResidual,
    /// A single 3×3 conv+BN+ReLU.
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub blocks: usize,
    pub channels: usize,
    /// Halve the spatial size in the first block (stride 2).
    pub downsample: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub input_size: usize,
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
    pub block_kind: BlockKind,
    pub num_classes: usize,
}

impl BackboneConfig {
    /// Desk-scale teacher: 4 basic-residual stages, 32/64/128/256 channels,
    /// 2 blocks each, downsampling at stages 2-4.
    pub fn desk_teacher(in_channels: usize, input_size: usize, num_classes: usize) -> Self {
        Self::residual(in_channels, input_size, num_classes, 32, &[32, 64, 128, 256], 2)
    }

    /// Desk-scale student: the teacher with channels halved and one block
    /// per stage.
    pub fn desk_student(in_channels: usize, input_size: usize, num_classes: usize) -> Self {
        Self::residual(in_channels, input_size, num_classes, 16, &[16, 32, 64, 128], 1)
    }

    fn residual(
        in_channels: usize,
        input_size: usize,
        num_classes: usize,
        stem: usize,
        widths: &[usize],
        blocks: usize,
    ) -> Self {
        Self {
            in_channels,
            input_size,
            stem_channels: stem,
            stages: widths
                .iter()
                .enumerate()
                .map(|(i, &channels)| StageSpec {
                    blocks,
                    channels,
                    downsample: i > 0,
                })
                .collect(),
            block_kind: BlockKind::BasicResidual,
            num_classes,
        }
    }

    /// Parses an architecture description against the data geometry.
    ///
    /// Accepts the presets `teacher` and `student`, or
    /// `<basic|plain>:<stem>:<stage>,<stage>,...` where a stage is
    /// `<blocks>x<channels>` with a trailing `d` to downsample, e.g.
    /// `basic:16:1x16,1x32d,1x64d,1x128d`.
    pub fn parse(spec: &str, in_channels: usize, input_size: usize, num_classes: usize) -> Result<Self> {
        let spec = spec.trim();
        let cfg = match spec {
            "teacher" => Self::desk_teacher(in_channels, input_size, num_classes),
            "student" => Self::desk_student(in_channels, input_size, num_classes),
            _ => {
                let bad = |why: &str| Error::config("architecture", format!("`{spec}`: {why}"));
                let mut parts = spec.split(':');
                let block_kind = match parts.next() {
                    Some("basic") => BlockKind::BasicResidual,
                    Some("plain") => BlockKind::Plain,
                    _ => return Err(bad("expected `teacher`, `student`, or `basic:...` / `plain:...`")),
                };
                let stem_channels = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad("missing or non-numeric stem width"))?;
                let stage_list = parts.next().ok_or_else(|| bad("missing stage list"))?;
                if parts.next().is_some() {
                    return Err(bad("too many `:`-separated parts"));
                }
                let stages = stage_list
                    .split(',')
                    .map(|s| {
                        let s = s.trim();
                        let (body, downsample) = match s.strip_suffix('d') {
                            Some(b) => (b, true),
                            None => (s, false),
                        };
                        let (b, c) = body.split_once('x').ok_or_else(|| bad("stage must look like `2x64` or `2x64d`"))?;
                        Ok(StageSpec {
                            blocks: b.parse().map_err(|_| bad("non-numeric block count"))?,
                            channels: c.parse().map_err(|_| bad("non-numeric channel count"))?,
                            downsample,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Self {
                    in_channels,
                    input_size,
                    stem_channels,
                    stages,
                    block_kind,
                    num_classes,
                }
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::config("stages", "at least one stage is required"));
        }
        for (field, v) in [
            ("in_channels", self.in_channels),
            ("input_size", self.input_size),
            ("stem_channels", self.stem_channels),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels == 0 {
                return Err(Error::config(format!("stages[{i}].channels"), "must be at least 1"));
            }
            if s.blocks == 0 {
                return Err(Error::config(format!("stages[{i}].blocks"), "must be at least 1"));
            }
        }
        if self.stage_shapes().last().is_none_or(|&(_, _, h)| h == 0) {
            return Err(Error::config("input_size", "spatial size vanishes after downsampling"));
        }
        Ok(())
    }

    pub fn stage_names(&self) -> Vec<String> {
        (1..=self.stages.len()).map(|i| format!("stage{i}")).collect()
    }

    /// `(channels, height, width)` of every stage output.
    pub fn stage_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut size = self.input_size;
        self.stages
            .iter()
            .map(|s| {
                if s.downsample {
                    size = conv_output_size(size, 3, 2, 1).unwrap_or(0);
                }
                (s.channels, size, size)
            })
            .collect()
    }

    pub fn stage_shape(&self, name: &str) -> Option<(usize, usize, usize)> {
        let idx = self.stage_names().iter().position(|n| n == name)?;
        Some(self.stage_shapes()[idx])
    }

    /// Trainable parameter count derived from the configuration alone.
    pub fn parameter_count(&self) -> usize {
        let conv = |i: usize, o: usize, k: usize| i * o * k * k;
        let bn = |c: usize| 2 * c;
        let mut total = conv(self.in_channels, self.stem_channels, 3) + bn(self.stem_channels);
        let mut c_in = self.stem_channels;
        for s in &self.stages {
            for b in 0..s.blocks {
                let strided = b == 0 && s.downsample;
                let c_out = s.channels;
                total += match self.block_kind {
                    BlockKind::Plain => conv(c_in, c_out, 3) + bn(c_out),
                    BlockKind::BasicResidual => {
                        let projection = if strided || c_in != c_out { conv(c_in, c_out, 1) + bn(c_out) } else { 0 };
                        conv(c_in, c_out, 3) + bn(c_out) + conv(c_out, c_out, 3) + bn(c_out) + projection
                    }
                };
                c_in = c_out;
            }
        }
        total + c_in * self.num_classes + self.num_classes
    }
}

impl fmt::Display for BackboneConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.block_kind {
            BlockKind::BasicResidual => "basic",
            BlockKind::Plain => "plain",
        };
        let stages: Vec<String> = self
            .stages
            .iter()
            .map(|s| format!("{}x{}{}", s.blocks, s.channels, if s.downsample { "d" } else { "" }))
            .collect();
        write!(f, "{kind}:{}:{}", self.stem_channels, stages.join(","))
    }
}
