//! Decoder families: plain U-Net skips, UNet++ nested dense skips and
//! iterative deep aggregation (DLA).

use crate::nn::{Builder, ConvBnRelu, Graph, NodeId};

use super::encoder::{scaled, Feature};
use super::{DecoderKind, Scale};

const WIDTHS: [usize; 5] = [16, 32, 64, 128, 256];

/// Output width of decoder level `s` (stride `2^s`).
pub(crate) fn level_width(s: usize, scale: Scale) -> usize {
    let w = WIDTHS[s.min(WIDTHS.len() - 1)];
    match scale {
        Scale::Paper => w,
        Scale::Desk => scaled(w, scale).max(8),
    }
}

#[derive(Clone, Debug)]
struct Block(ConvBnRelu, ConvBnRelu);

impl Block {
    fn build(b: &mut Builder, cin: usize, cout: usize) -> Self {
        Block(b.scoped("a", |b| b.conv_bn_relu(cin, cout, 3)), b.scoped("b", |b| b.conv_bn_relu(cout, cout, 3)))
    }

    fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let y = self.0.apply(g, x);
        self.1.apply(g, y)
    }
}

#[derive(Clone, Debug)]
enum Layout {
    /// `blocks[s]` produces level `s` from level `s + 1` and skip `s`.
    Unet(Vec<Block>),
    /// `nodes[(i, j)]` for `j >= 1`, `i + j <= depth`.
    Unetpp(Vec<((usize, usize), Block)>),
    /// `rounds[r][j]` merges node `j` with the upsampled node `j + 1`.
    Dla(Vec<Vec<ConvBnRelu>>),
}

#[derive(Clone, Debug)]
pub struct Decoder {
    layout: Layout,
    pub out_channels: usize,
}

impl Decoder {
    pub fn build(b: &mut Builder, kind: DecoderKind, scale: Scale, enc: &[usize]) -> Self {
        let depth = enc.len() - 1;
        let layout = match kind {
            DecoderKind::Unet => {
                let mut blocks: Vec<Option<Block>> = vec![None; depth];
                let mut below = enc[depth];
                for s in (0..depth).rev() {
                    let w = level_width(s, scale);
                    blocks[s] = Some(b.scoped(format!("level{s}"), |b| Block::build(b, below + enc[s], w)));
                    below = w;
                }
                Layout::Unet(blocks.into_iter().map(Option::unwrap).collect())
            }
            DecoderKind::Unetpp => {
                let width = |i: usize, j: usize| if j == 0 { enc[i] } else { level_width(i, scale) };
                let mut nodes = Vec::new();
                for j in 1..=depth {
                    for i in 0..=depth - j {
                        let cin: usize = (0..j).map(|jj| width(i, jj)).sum::<usize>() + width(i + 1, j - 1);
                        let block = b.scoped(format!("x{i}_{j}"), |b| Block::build(b, cin, width(i, j)));
                        nodes.push(((i, j), block));
                    }
                }
                Layout::Unetpp(nodes)
            }
            DecoderKind::Dla => {
                let mut widths = enc.to_vec();
                let rounds = (1..=depth)
                    .map(|r| {
                        (0..=depth - r)
                            .map(|j| {
                                let w = level_width(j, scale);
                                let m = b.scoped(format!("ida{r}.node{j}"), |b| b.conv_bn_relu(widths[j] + widths[j + 1], w, 3));
                                widths[j] = w;
                                m
                            })
                            .collect()
                    })
                    .collect();
                Layout::Dla(rounds)
            }
        };
        Self {
            layout,
            out_channels: level_width(0, scale),
        }
    }

    pub fn forward(&self, g: &mut Graph, feats: &[Feature]) -> NodeId {
        let depth = feats.len() - 1;
        match &self.layout {
            Layout::Unet(blocks) => {
                let mut x = feats[depth].node;
                for s in (0..depth).rev() {
                    let up = g.upsample2(x);
                    let cat = g.concat(&[up, feats[s].node]);
                    x = blocks[s].apply(g, cat);
                }
                x
            }
            Layout::Unetpp(nodes) => {
                let mut grid: Vec<Vec<NodeId>> = feats.iter().map(|f| vec![f.node]).collect();
                for ((i, j), block) in nodes {
                    let up = g.upsample2(grid[i + 1][j - 1]);
                    let mut parts = grid[*i][..*j].to_vec();
                    parts.push(up);
                    let cat = g.concat(&parts);
                    let y = block.apply(g, cat);
                    grid[*i].push(y);
                }
                grid[0][depth]
            }
            Layout::Dla(rounds) => {
                let mut nodes: Vec<NodeId> = feats.iter().map(|f| f.node).collect();
                for round in rounds {
                    for (j, merge) in round.iter().enumerate() {
                        let up = g.upsample2(nodes[j + 1]);
                        let cat = g.concat(&[nodes[j], up]);
                        nodes[j] = merge.apply(g, cat);
                    }
                }
                nodes[0]
            }
        }
    }
}
