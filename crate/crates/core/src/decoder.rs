//! Convolutional decoder merging the two fused levels into full-resolution
//! logits.

use hiformer_tensor::{Graph, Init, Result, Scalar, Var};

use crate::config::ModelConfig;
use crate::dlf::DlfOutput;
use crate::layers::{Conv2d, GroupNorm};

/// Switches used by analysis tests; both are on in the real network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderOptions {
    pub relu: bool,
    pub norm: bool,
}

impl Default for DecoderOptions {
    fn default() -> Self {
        DecoderOptions { relu: true, norm: true }
    }
}

/// 3x3 conv, optional 2x bilinear upsample, GroupNorm, ReLU.
#[derive(Debug, Clone)]
pub struct ConvStage {
    pub conv: Conv2d,
    pub norm: GroupNorm,
    pub upsample: bool,
}

impl ConvStage {
    fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize, upsample: bool) -> Result<Self> {
        let mut s = init.sub(name);
        Ok(ConvStage {
            conv: Conv2d::new(&mut s, "conv", cin, cout, 3, 1, 1, true)?,
            norm: GroupNorm::new(&mut s, "norm", cout)?,
            upsample,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: &Var<T>, opts: DecoderOptions) -> Result<Var<T>> {
        let mut h = self.conv.forward(g, x)?;
        if self.upsample {
            h = g.upsample_bilinear2x(&h)?;
        }
        if opts.norm {
            h = self.norm.forward(g, &h)?;
        }
        if opts.relu {
            h = g.relu(&h)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct ConvUp {
    pub stages: Vec<ConvStage>,
}

impl ConvUp {
    fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize, upsample: bool, n: usize) -> Result<Self> {
        let mut s = init.sub(name);
        let stages = (0..n)
            .map(|i| ConvStage::new(&mut s, &i.to_string(), if i == 0 { cin } else { cout }, cout, upsample))
            .collect::<Result<Vec<_>>>()?;
        Ok(ConvUp { stages })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: &Var<T>, opts: DecoderOptions) -> Result<Var<T>> {
        let mut h = x.clone();
        for s in &self.stages {
            h = s.forward(g, &h, opts)?;
        }
        Ok(h)
    }
}

/// Intermediate maps of a decoder pass.
#[derive(Debug, Clone)]
pub struct DecoderTrace<T: Scalar> {
    /// Upsampled small branch at H/4.
    pub small_up: Var<T>,
    /// Processed large branch at H/4.
    pub large: Var<T>,
    /// Their sum.
    pub merged: Var<T>,
    /// Full-resolution features before the head.
    pub full: Var<T>,
    /// `(N, K, H, W)`.
    pub logits: Var<T>,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub up_small: ConvUp,
    pub block_large: ConvUp,
    pub up_final: ConvUp,
    pub head: Conv2d,
    pub options: DecoderOptions,
}

impl Decoder {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.decoder_dim;
        let mut s = init.sub("decoder");
        Ok(Decoder {
            up_small: ConvUp::new(&mut s, "up_small", 4 * cfg.embed_dim, d, true, 2)?,
            block_large: ConvUp::new(&mut s, "block_large", cfg.embed_dim, d, false, 1)?,
            up_final: ConvUp::new(&mut s, "up_final", d, d, true, 2)?,
            head: Conv2d::new(&mut s, "head", d, cfg.num_classes, 3, 1, 1, true)?,
            options: DecoderOptions::default(),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: &DlfOutput<T>) -> Result<DecoderTrace<T>> {
        let small_up = self.up_small.forward(g, &x.small, self.options)?;
        let large = self.block_large.forward(g, &x.large, self.options)?;
        let merged = g.add(&small_up, &large)?;
        let full = self.up_final.forward(g, &merged, self.options)?;
        let logits = self.head.forward(g, &full)?;
        Ok(DecoderTrace {
            small_up,
            large,
            merged,
            full,
            logits,
        })
    }
}
