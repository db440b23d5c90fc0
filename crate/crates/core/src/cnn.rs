//! Convolutional backbones truncated after the stride-16 stage, plus the
//! 1x1 projections that feed each transformer stage.

use hiformer_tensor::{Graph, Init, Result, Scalar, Var};

use crate::config::CnnBackboneKind;
use crate::error::Error;
use crate::layers::{BatchNorm2d, Conv2d};

/// Feature maps at strides 4, 8 and 16.
#[derive(Debug, Clone)]
pub struct CnnPyramid<T: Scalar> {
    pub levels: [Var<T>; 3],
}

/// Stage-dimension maps `C1..C3` from the pyramid.
#[derive(Debug, Clone)]
pub struct SkipProjections<T: Scalar> {
    pub levels: [Var<T>; 3],
}

#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        conv_name: &str,
        bn_name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        frozen: bool,
        zero_gamma: bool,
    ) -> Result<Self> {
        Ok(ConvBn {
            conv: Conv2d::new(init, conv_name, cin, cout, k, stride, k / 2, false)?,
            bn: BatchNorm2d::new(init, bn_name, cout, frozen, zero_gamma)?,
        })
    }

    fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        self.bn.forward(g, &self.conv.forward(g, x)?)
    }
}

#[derive(Debug, Clone)]
enum Block {
    Basic {
        a: ConvBn,
        b: ConvBn,
        down: Option<ConvBn>,
    },
    Bottleneck {
        a: ConvBn,
        b: ConvBn,
        c: ConvBn,
        down: Option<ConvBn>,
    },
}

struct BlockSpec {
    cin: usize,
    width: usize,
    stride: usize,
    frozen: bool,
    zero_init_residual: bool,
}

impl Block {
    fn basic<T: Scalar>(init: &mut Init<'_, T>, s: BlockSpec) -> Result<Self> {
        let down = if s.stride != 1 || s.cin != s.width {
            let mut d = init.sub("downsample");
            Some(ConvBn::new(&mut d, "0", "1", s.cin, s.width, 1, s.stride, s.frozen, false)?)
        } else {
            None
        };
        Ok(Block::Basic {
            a: ConvBn::new(init, "conv1", "bn1", s.cin, s.width, 3, s.stride, s.frozen, false)?,
            b: ConvBn::new(init, "conv2", "bn2", s.width, s.width, 3, 1, s.frozen, s.zero_init_residual)?,
            down,
        })
    }

    fn bottleneck<T: Scalar>(init: &mut Init<'_, T>, s: BlockSpec) -> Result<Self> {
        let out = 4 * s.width;
        let down = if s.stride != 1 || s.cin != out {
            let mut d = init.sub("downsample");
            Some(ConvBn::new(&mut d, "0", "1", s.cin, out, 1, s.stride, s.frozen, false)?)
        } else {
            None
        };
        // stride sits on the 3x3 conv
        Ok(Block::Bottleneck {
            a: ConvBn::new(init, "conv1", "bn1", s.cin, s.width, 1, 1, s.frozen, false)?,
            b: ConvBn::new(init, "conv2", "bn2", s.width, s.width, 3, s.stride, s.frozen, false)?,
            c: ConvBn::new(init, "conv3", "bn3", s.width, out, 1, 1, s.frozen, s.zero_init_residual)?,
            down,
        })
    }

    fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let (y, down) = match self {
            Block::Basic { a, b, down } => {
                let h = g.relu(&a.forward(g, x)?)?;
                (b.forward(g, &h)?, down)
            }
            Block::Bottleneck { a, b, c, down } => {
                let h = g.relu(&a.forward(g, x)?)?;
                let h = g.relu(&b.forward(g, &h)?)?;
                (c.forward(g, &h)?, down)
            }
        };
        let identity = match down {
            Some(d) => d.forward(g, x)?,
            None => x.clone(),
        };
        g.relu(&g.add(&y, &identity)?)
    }
}

#[derive(Debug, Clone)]
struct DenseLayer {
    bn1: BatchNorm2d,
    conv1: Conv2d,
    bn2: BatchNorm2d,
    conv2: Conv2d,
}

impl DenseLayer {
    fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let h = g.relu(&self.bn1.forward(g, x)?)?;
        let h = self.conv1.forward(g, &h)?;
        let h = g.relu(&self.bn2.forward(g, &h)?)?;
        let h = self.conv2.forward(g, &h)?;
        g.concat(&[x, &h], 1)
    }
}

#[derive(Debug, Clone)]
struct Transition {
    bn: BatchNorm2d,
    conv: Conv2d,
}

impl Transition {
    fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let h = g.relu(&self.bn.forward(g, x)?)?;
        g.avg_pool2d(&self.conv.forward(g, &h)?, 2, 2)
    }
}

#[derive(Debug, Clone)]
enum Stage {
    Residual(Vec<Block>),
    /// Optional transition (entering the stage) then dense layers.
    Dense(Option<Transition>, Vec<DenseLayer>),
}

impl Stage {
    fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let mut h = x.clone();
        match self {
            Stage::Residual(blocks) => {
                for b in blocks {
                    h = b.forward(g, &h)?;
                }
            }
            Stage::Dense(transition, layers) => {
                if let Some(t) = transition {
                    h = t.forward(g, &h)?;
                }
                for l in layers {
                    h = l.forward(g, &h)?;
                }
            }
        }
        Ok(h)
    }
}

const GROWTH: usize = 32;
const BN_SIZE: usize = 4;

/// Residual layout per backbone: (bottleneck?, blocks per stage, stem width).
fn residual_layout(kind: CnnBackboneKind) -> Option<(bool, [usize; 3], usize, [usize; 3])> {
    match kind {
        CnnBackboneKind::Resnet18 => Some((false, [2, 2, 2], 64, [64, 128, 256])),
        CnnBackboneKind::Resnet34 => Some((false, [3, 4, 6], 64, [64, 128, 256])),
        CnnBackboneKind::Resnet50 => Some((true, [3, 4, 6], 64, [64, 128, 256])),
        CnnBackboneKind::Resnet101 => Some((true, [3, 4, 23], 64, [64, 128, 256])),
        CnnBackboneKind::Tiny => Some((false, [1, 1, 1], 16, [16, 32, 64])),
        _ => None,
    }
}

fn dense_layout(kind: CnnBackboneKind) -> Option<[usize; 3]> {
    match kind {
        CnnBackboneKind::Densenet121 => Some([6, 12, 24]),
        CnnBackboneKind::Densenet169 => Some([6, 12, 32]),
        CnnBackboneKind::Densenet201 => Some([6, 12, 48]),
        _ => None,
    }
}

/// Backbone plus skip projections; parameters live under `cnn.`.
#[derive(Debug, Clone)]
pub struct CnnEncoder {
    pub kind: CnnBackboneKind,
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Stage>,
    projections: [Conv2d; 3],
}

impl CnnEncoder {
    /// Registers the backbone (truncated at stride 16) and projections to
    /// `embed_dim * [1, 2, 4]` channels.
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        kind: CnnBackboneKind,
        embed_dim: usize,
        frozen_bn: bool,
        zero_init_residual: bool,
    ) -> Result<Self> {
        let mut init = init.sub("cnn");
        let stem_width = if kind == CnnBackboneKind::Tiny { 16 } else { 64 };
        let stem_conv = Conv2d::new(&mut init, "conv1", 3, stem_width, 7, 2, 3, false)?;
        let stem_bn = BatchNorm2d::new(&mut init, "bn1", stem_width, frozen_bn, false)?;
        let mut stages = Vec::with_capacity(3);
        if let Some((bottleneck, blocks, mut cin, widths)) = residual_layout(kind) {
            for (si, (&n, &width)) in blocks.iter().zip(&widths).enumerate() {
                let mut layer = init.sub(&format!("layer{}", si + 1));
                let mut list = Vec::with_capacity(n);
                for bi in 0..n {
                    let mut bs = layer.sub(&bi.to_string());
                    let spec = BlockSpec {
                        cin,
                        width,
                        stride: if bi == 0 && si > 0 { 2 } else { 1 },
                        frozen: frozen_bn,
                        zero_init_residual,
                    };
                    if bottleneck {
                        list.push(Block::bottleneck(&mut bs, spec)?);
                        cin = 4 * width;
                    } else {
                        list.push(Block::basic(&mut bs, spec)?);
                        cin = width;
                    }
                }
                stages.push(Stage::Residual(list));
            }
        } else if let Some(layers) = dense_layout(kind) {
            let mut c = 64;
            for (si, &n) in layers.iter().enumerate() {
                let transition = if si > 0 {
                    let mut t = init.sub(&format!("transition{si}"));
                    let tr = Transition {
                        bn: BatchNorm2d::new(&mut t, "norm", c, frozen_bn, false)?,
                        conv: Conv2d::new(&mut t, "conv", c, c / 2, 1, 1, 0, false)?,
                    };
                    c /= 2;
                    Some(tr)
                } else {
                    None
                };
                let mut block = init.sub(&format!("denseblock{}", si + 1));
                let mut list = Vec::with_capacity(n);
                for li in 0..n {
                    let mut l = block.sub(&format!("denselayer{}", li + 1));
                    list.push(DenseLayer {
                        bn1: BatchNorm2d::new(&mut l, "norm1", c, frozen_bn, false)?,
                        conv1: Conv2d::new(&mut l, "conv1", c, BN_SIZE * GROWTH, 1, 1, 0, false)?,
                        bn2: BatchNorm2d::new(&mut l, "norm2", BN_SIZE * GROWTH, frozen_bn, false)?,
                        conv2: Conv2d::new(&mut l, "conv2", BN_SIZE * GROWTH, GROWTH, 3, 1, 1, false)?,
                    });
                    c += GROWTH;
                }
                stages.push(Stage::Dense(transition, list));
            }
        } else {
            unreachable!("every backbone kind has a layout");
        }
        let ch = kind.channels();
        let projections = [
            Conv2d::new(&mut init, "proj0", ch[0], embed_dim, 1, 1, 0, true)?,
            Conv2d::new(&mut init, "proj1", ch[1], 2 * embed_dim, 1, 1, 0, true)?,
            Conv2d::new(&mut init, "proj2", ch[2], 4 * embed_dim, 1, 1, 0, true)?,
        ];
        Ok(CnnEncoder {
            kind,
            stem_conv,
            stem_bn,
            stages,
            projections,
        })
    }

    /// Stem and three stages. Single-channel input is replicated to three
    /// channels.
    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<CnnPyramid<T>, Error> {
        let [_, c, h, w] = *x.shape() else {
            return Err(hiformer_tensor::TensorError::ShapeMismatch {
                op: "cnn_forward",
                detail: format!("expected NCHW, got {:?}", x.shape()),
            }
            .into());
        };
        if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(Error::IndivisibleInput { h, w, by: 16 });
        }
        let x = if c == 1 { g.concat(&[x, x, x], 1)? } else { x.clone() };
        let h0 = g.relu(&self.stem_bn.forward(g, &self.stem_conv.forward(g, &x)?)?)?;
        let h0 = g.max_pool2d(&h0, 3, 2, 1)?;
        let f1 = self.stages[0].forward(g, &h0)?;
        let f2 = self.stages[1].forward(g, &f1)?;
        let f3 = self.stages[2].forward(g, &f2)?;
        Ok(CnnPyramid { levels: [f1, f2, f3] })
    }

    pub fn project<T: Scalar>(&self, g: &Graph<'_, T>, p: &CnnPyramid<T>) -> Result<SkipProjections<T>> {
        Ok(SkipProjections {
            levels: [
                self.projections[0].forward(g, &p.levels[0])?,
                self.projections[1].forward(g, &p.levels[1])?,
                self.projections[2].forward(g, &p.levels[2])?,
            ],
        })
    }
}
