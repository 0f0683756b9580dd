use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{dims4, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// One bit per `(n, i, j)`, shared by all channels.
    Spatial,
    /// One bit per `(n, k)`, shared by all positions.
    Channel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskConfig {
    pub mode: MaskMode,
    /// Probability that a position (or channel) is dropped, in `[0, 1)`.
    pub ratio: f64,
    /// Base seed of the per-stage, per-iteration mask streams.
    pub seed: u64,
}

impl MaskConfig {
    pub fn spatial(ratio: f64) -> Self {
        Self {
            mode: MaskMode::Spatial,
            ratio,
            seed: 0,
        }
    }

    pub fn channel(ratio: f64) -> Self {
        Self {
            mode: MaskMode::Channel,
            ratio,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ratio) {
            return Err(Error::config("mask ratio", format!("{} is outside [0, 1)", self.ratio)));
        }
        Ok(())
    }
}

/// Binary keep-mask; `bits` is `(N, H, W)` for spatial and `(N, C)` for
/// channel mode, 1 = keep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub mode: MaskMode,
    pub dims: [usize; 4],
    pub bits: Vec<u8>,
}

impl Mask {
    /// Fraction of dropped entries.
    pub fn masked_fraction(&self) -> f64 {
        let dropped = self.bits.iter().filter(|&&b| b == 0).count();
        dropped as f64 / self.bits.len().max(1) as f64
    }

    /// The mask broadcast to a full NCHW factor.
    pub fn expand<S: Scalar>(&self) -> Vec<S> {
        let [n, c, h, w] = self.dims;
        let hw = h * w;
        let mut out = Vec::with_capacity(n * c * hw);
        for i in 0..n {
            for k in 0..c {
                match self.mode {
                    MaskMode::Spatial => out.extend(
                        self.bits[i * hw..(i + 1) * hw].iter().map(|&b| if b == 1 { S::one() } else { S::zero() }),
                    ),
                    MaskMode::Channel => {
                        let v = if self.bits[i * c + k] == 1 { S::one() } else { S::zero() };
                        out.extend(std::iter::repeat_n(v, hw));
                    }
                }
            }
        }
        out
    }
}

/// Draws a fresh mask: every independent entry takes `R ~ U[0, 1)` and is
/// dropped when `R < ratio`. Spatial draws run over `(n, i, j)` in row-major
/// order, channel draws over `(n, k)`.
pub fn sample_mask<R: Rng + ?Sized>(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    cfg: &MaskConfig,
    rng: &mut R,
) -> Result<Mask> {
    cfg.validate()?;
    if n == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("sample_mask", format!("dims must be ≥ 1, got {:?}", [n, c, h, w])));
    }
    let count = match cfg.mode {
        MaskMode::Spatial => n * h * w,
        MaskMode::Channel => n * c,
    };
    let bits = (0..count).map(|_| u8::from(rng.random::<f64>() >= cfg.ratio)).collect();
    Ok(Mask {
        mode: cfg.mode,
        dims: [n, c, h, w],
        bits,
    })
}

/// Multiplies `feature` by the broadcast mask; differentiable in `feature`.
pub fn apply_mask<S: Scalar>(feature: &Tensor<S>, mask: &Mask) -> Result<Tensor<S>> {
    let (n, c, h, w) = dims4(feature, "apply_mask")?;
    if [n, c, h, w] != mask.dims {
        return Err(Error::shape(
            "apply_mask",
            format!("feature {:?} vs mask dims {:?}", feature.shape(), mask.dims),
        ));
    }
    feature.mul_const(&mask.expand())
}
