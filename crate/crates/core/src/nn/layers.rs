//! Parameter bundles for the common layer shapes, plus the builder that
//! registers them in a [`ParamStore`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::params::{ParamGroup, ParamId, ParamKind, ParamStore};

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
}

impl Conv {
    pub fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        g.conv(x, self.w, self.b)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

impl BatchNorm {
    pub fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        g.batch_norm(x, self.gamma, self.beta, self.mean, self.var)
    }
}

/// conv -> batch norm -> relu.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let y = self.conv.apply(g, x);
        let y = self.bn.apply(g, y);
        g.relu(y)
    }

    pub fn cout(&self) -> usize {
        self.conv.cout
    }
}

/// batch norm -> relu -> conv (pre-activation ordering used by dense blocks).
#[derive(Clone, Debug)]
pub struct BnReluConv {
    pub bn: BatchNorm,
    pub conv: Conv,
}

impl BnReluConv {
    pub fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let y = self.bn.apply(g, x);
        let y = g.relu(y);
        self.conv.apply(g, y)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        g.linear(x, self.w, self.b)
    }
}

/// Registers parameters under a dotted name prefix and a group.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    group: ParamGroup,
    prefix: Vec<String>,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            group: ParamGroup::Encoder,
            prefix: Vec::new(),
        }
    }

    pub fn set_group(&mut self, group: ParamGroup) {
        self.group = group;
    }

    pub fn push(&mut self, scope: impl Into<String>) {
        self.prefix.push(scope.into());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    /// Runs `f` inside a named scope.
    pub fn scoped<T>(&mut self, scope: impl Into<String>, f: impl FnOnce(&mut Self) -> T) -> T {
        self.push(scope);
        let out = f(self);
        self.pop();
        out
    }

    fn name(&self, leaf: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(leaf);
        s
    }

    pub fn conv(&mut self, cin: usize, cout: usize, k: usize, bias: bool) -> Conv {
        let w = self.store.glorot(
            self.name("conv.weight"),
            vec![cout, cin, k, k],
            cin * k * k,
            cout * k * k,
            self.group,
            &mut self.rng,
        );
        let b = bias.then(|| {
            self.store
                .constant(self.name("conv.bias"), cout, 0.0, self.group, ParamKind::Weight)
        });
        Conv { w, b, cin, cout }
    }

    pub fn batch_norm(&mut self, c: usize) -> BatchNorm {
        let group = self.group;
        BatchNorm {
            gamma: self.store.constant(self.name("bn.gamma"), c, 1.0, group, ParamKind::Weight),
            beta: self.store.constant(self.name("bn.beta"), c, 0.0, group, ParamKind::Weight),
            mean: self
                .store
                .constant(self.name("bn.moving_mean"), c, 0.0, group, ParamKind::RunningStat),
            var: self
                .store
                .constant(self.name("bn.moving_var"), c, 1.0, group, ParamKind::RunningStat),
        }
    }

    pub fn conv_bn_relu(&mut self, cin: usize, cout: usize, k: usize) -> ConvBnRelu {
        ConvBnRelu {
            conv: self.conv(cin, cout, k, false),
            bn: self.batch_norm(cout),
        }
    }

    pub fn bn_relu_conv(&mut self, cin: usize, cout: usize, k: usize) -> BnReluConv {
        BnReluConv {
            bn: self.batch_norm(cin),
            conv: self.conv(cin, cout, k, false),
        }
    }

    pub fn linear(&mut self, fan_in: usize, fan_out: usize) -> Linear {
        let w = self.store.glorot(
            self.name("dense.weight"),
            vec![fan_out, fan_in],
            fan_in,
            fan_out,
            self.group,
            &mut self.rng,
        );
        let b = self
            .store
            .constant(self.name("dense.bias"), fan_out, 0.0, self.group, ParamKind::Weight);
        Linear { w, b: Some(b) }
    }
}
