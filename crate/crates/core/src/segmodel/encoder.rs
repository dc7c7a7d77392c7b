//! Encoder backbones. Every encoder exposes `depth + 1` feature maps, the
//! `s`-th at stride `2^s`, and tags them `encoder.stem`, `encoder.stage1`, ...

use crate::nn::{BnReluConv, Builder, ConvBnRelu, Graph, NodeId, BatchNorm};

use super::{EncoderKind, Scale};

/// A feature map and its channel count.
#[derive(Clone, Copy, Debug)]
pub struct Feature {
    pub node: NodeId,
    pub channels: usize,
}

pub(crate) fn scaled(w: usize, scale: Scale) -> usize {
    match scale {
        Scale::Paper => w,
        Scale::Desk => (w / 8).max(4),
    }
}

#[derive(Clone, Debug)]
struct DenseUnit {
    reduce: BnReluConv,
    grow: BnReluConv,
}

#[derive(Clone, Debug)]
struct DenseStage {
    transition: Option<BnReluConv>,
    units: Vec<DenseUnit>,
    out: usize,
}

#[derive(Clone, Debug)]
struct Bottleneck {
    a: ConvBnRelu,
    b: ConvBnRelu,
    c: crate::nn::Conv,
    c_bn: BatchNorm,
    shortcut: Option<(crate::nn::Conv, BatchNorm)>,
}

#[derive(Clone, Debug)]
struct InceptionModule {
    b1: ConvBnRelu,
    b2: [ConvBnRelu; 2],
    b3: [ConvBnRelu; 3],
    out: usize,
}

#[derive(Clone, Debug)]
enum Stages {
    Dense { stages: Vec<DenseStage>, norm: BatchNorm },
    Res(Vec<(Vec<Bottleneck>, usize)>),
    Inception(Vec<(Vec<InceptionModule>, usize)>),
}

#[derive(Clone, Debug)]
pub struct Encoder {
    stem: ConvBnRelu,
    stage1: ConvBnRelu,
    stages: Stages,
}

const DENSE_UNITS: [usize; 4] = [6, 12, 24, 16];
const RES_UNITS: [usize; 4] = [3, 4, 6, 3];
const RES_MID: [usize; 4] = [64, 128, 256, 512];
const INCEPTION_MODULES: [usize; 4] = [3, 5, 3, 2];
const INCEPTION_BRANCH: [usize; 4] = [64, 96, 160, 192];

impl Encoder {
    /// Builds an encoder with `depth` downsampling steps; stage 1 is a
    /// pooled 3x3 conv and stages 2.. are family-specific blocks.
    pub fn build(b: &mut Builder, kind: EncoderKind, scale: Scale, depth: usize) -> Self {
        let w0 = scaled(64, scale);
        let stem = b.scoped("stem", |b| b.conv_bn_relu(1, w0, 3));
        let stage1 = b.scoped("stage1", |b| b.conv_bn_relu(w0, w0, 3));
        let blocks = depth.saturating_sub(1);
        let stages = match kind {
            EncoderKind::Densenet121 | EncoderKind::Chexnet => {
                let g = scaled(32, scale);
                let mut c = w0;
                let mut stages = Vec::new();
                for (s, &units) in DENSE_UNITS.iter().take(blocks).enumerate() {
                    let st = b.scoped(format!("stage{}", s + 2), |b| {
                        let transition = (s > 0).then(|| {
                            let t = b.scoped("transition", |b| b.bn_relu_conv(c, c / 2, 1));
                            c /= 2;
                            t
                        });
                        let units = (0..units)
                            .map(|u| {
                                b.scoped(format!("unit{u}"), |b| {
                                    let unit = DenseUnit {
                                        reduce: b.scoped("reduce", |b| b.bn_relu_conv(c, 4 * g, 1)),
                                        grow: b.scoped("grow", |b| b.bn_relu_conv(4 * g, g, 3)),
                                    };
                                    c += g;
                                    unit
                                })
                            })
                            .collect();
                        DenseStage { transition, units, out: c }
                    });
                    stages.push(st);
                }
                let norm = b.scoped("norm", |b| b.batch_norm(c));
                Stages::Dense { stages, norm }
            }
            EncoderKind::Resnet50 => {
                let mut c = w0;
                let stages = (0..blocks)
                    .map(|s| {
                        let mid = scaled(RES_MID[s], scale);
                        let out = 4 * mid;
                        let units = (0..RES_UNITS[s])
                            .map(|u| {
                                b.scoped(format!("stage{}.unit{u}", s + 2), |b| {
                                    let cin = if u == 0 { c } else { out };
                                    Bottleneck {
                                        a: b.scoped("a", |b| b.conv_bn_relu(cin, mid, 1)),
                                        b: b.scoped("b", |b| b.conv_bn_relu(mid, mid, 3)),
                                        c: b.scoped("c", |b| b.conv(mid, out, 1, false)),
                                        c_bn: b.scoped("c", |b| b.batch_norm(out)),
                                        shortcut: (u == 0).then(|| {
                                            b.scoped("shortcut", |b| (b.conv(cin, out, 1, false), b.batch_norm(out)))
                                        }),
                                    }
                                })
                            })
                            .collect();
                        c = out;
                        (units, out)
                    })
                    .collect();
                Stages::Res(stages)
            }
            EncoderKind::Inceptionv3 => {
                let mut c = w0;
                let stages = (0..blocks)
                    .map(|s| {
                        let bw = scaled(INCEPTION_BRANCH[s], scale);
                        let modules = (0..INCEPTION_MODULES[s])
                            .map(|m| {
                                b.scoped(format!("stage{}.mixed{m}", s + 2), |b| {
                                    let cin = c;
                                    c = 3 * bw;
                                    InceptionModule {
                                        b1: b.scoped("b1", |b| b.conv_bn_relu(cin, bw, 1)),
                                        b2: [
                                            b.scoped("b2a", |b| b.conv_bn_relu(cin, bw, 1)),
                                            b.scoped("b2b", |b| b.conv_bn_relu(bw, bw, 3)),
                                        ],
                                        b3: [
                                            b.scoped("b3a", |b| b.conv_bn_relu(cin, bw, 1)),
                                            b.scoped("b3b", |b| b.conv_bn_relu(bw, bw, 3)),
                                            b.scoped("b3c", |b| b.conv_bn_relu(bw, bw, 3)),
                                        ],
                                        out: 3 * bw,
                                    }
                                })
                            })
                            .collect();
                        (modules, c)
                    })
                    .collect();
                Stages::Inception(stages)
            }
        };
        Self { stem, stage1, stages }
    }

    /// Channel count of each feature map, shallowest first.
    pub fn channels(&self) -> Vec<usize> {
        let mut c = vec![self.stem.cout(), self.stage1.cout()];
        match &self.stages {
            Stages::Dense { stages, .. } => c.extend(stages.iter().map(|s| s.out)),
            Stages::Res(stages) => c.extend(stages.iter().map(|s| s.1)),
            Stages::Inception(stages) => c.extend(stages.iter().map(|s| s.1)),
        }
        c
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Vec<Feature> {
        let mut feats = Vec::new();
        let x = self.stem.apply(g, x);
        let x = g.tag("encoder.stem", x);
        feats.push(Feature { node: x, channels: self.stem.cout() });
        let x = g.max_pool2(x);
        let x = self.stage1.apply(g, x);
        let mut x = g.tag("encoder.stage1", x);
        feats.push(Feature { node: x, channels: self.stage1.cout() });
        match &self.stages {
            Stages::Dense { stages, norm } => {
                for (s, st) in stages.iter().enumerate() {
                    if let Some(t) = &st.transition {
                        x = t.apply(g, x);
                        x = g.avg_pool2(x);
                    } else {
                        x = g.max_pool2(x);
                    }
                    for u in &st.units {
                        let y = u.reduce.apply(g, x);
                        let y = u.grow.apply(g, y);
                        x = g.concat(&[x, y]);
                    }
                    if s + 1 == stages.len() {
                        x = norm.apply(g, x);
                        x = g.relu(x);
                    }
                    x = g.tag(&format!("encoder.stage{}", s + 2), x);
                    feats.push(Feature { node: x, channels: st.out });
                }
            }
            Stages::Res(stages) => {
                for (s, (units, out)) in stages.iter().enumerate() {
                    x = g.max_pool2(x);
                    for u in units {
                        let y = u.a.apply(g, x);
                        let y = u.b.apply(g, y);
                        let y = u.c.apply(g, y);
                        let y = u.c_bn.apply(g, y);
                        let sc = match &u.shortcut {
                            Some((conv, bn)) => {
                                let s = conv.apply(g, x);
                                bn.apply(g, s)
                            }
                            None => x,
                        };
                        let y = g.add(y, sc);
                        x = g.relu(y);
                    }
                    x = g.tag(&format!("encoder.stage{}", s + 2), x);
                    feats.push(Feature { node: x, channels: *out });
                }
            }
            Stages::Inception(stages) => {
                for (s, (modules, out)) in stages.iter().enumerate() {
                    x = g.max_pool2(x);
                    for m in modules {
                        let y1 = m.b1.apply(g, x);
                        let y2 = m.b2.iter().fold(x, |y, l| l.apply(g, y));
                        let y3 = m.b3.iter().fold(x, |y, l| l.apply(g, y));
                        x = g.concat(&[y1, y2, y3]);
                        debug_assert_eq!(g.value(x).c(), m.out);
                    }
                    x = g.tag(&format!("encoder.stage{}", s + 2), x);
                    feats.push(Feature { node: x, channels: *out });
                }
            }
        }
        feats
    }
}
