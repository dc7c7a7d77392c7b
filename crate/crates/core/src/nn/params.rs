use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which part of a network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Updated by the optimizer unless its group is frozen.
    Weight,
    /// Batch-norm moving mean/variance; never trainable.
    RunningStat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub group: ParamGroup,
    pub kind: ParamKind,
}

impl Param {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub trainable: usize,
    pub non_trainable: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.trainable + self.non_trainable
    }
}

/// Flat registry of every parameter tensor of a network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    encoder_frozen: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, param: Param) -> ParamId {
        self.params.push(param);
        ParamId(self.params.len() - 1)
    }

    /// Registers a weight with Glorot-uniform initialization.
    pub fn glorot(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        fan_out: usize,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.random_range(-limit..limit)).collect();
        self.push(Param {
            name: name.into(),
            shape,
            data,
            group,
            kind: ParamKind::Weight,
        })
    }

    pub fn constant(
        &mut self,
        name: impl Into<String>,
        len: usize,
        value: f64,
        group: ParamGroup,
        kind: ParamKind,
    ) -> ParamId {
        self.push(Param {
            name: name.into(),
            shape: vec![len],
            data: vec![value; len],
            group,
            kind,
        })
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].data
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn encoder_frozen(&self) -> bool {
        self.encoder_frozen
    }

    pub fn set_encoder_frozen(&mut self, frozen: bool) {
        self.encoder_frozen = frozen;
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        let p = &self.params[id.0];
        p.kind == ParamKind::Weight && !(self.encoder_frozen && p.group == ParamGroup::Encoder)
    }

    pub fn counts(&self) -> ParamCounts {
        let mut counts = ParamCounts::default();
        for (id, p) in self.iter() {
            if self.is_trainable(id) {
                counts.trainable += p.len();
            } else {
                counts.non_trainable += p.len();
            }
        }
        counts
    }

    /// Counts restricted to one group.
    pub fn group_counts(&self, group: ParamGroup) -> ParamCounts {
        let mut counts = ParamCounts::default();
        for (id, p) in self.iter().filter(|(_, p)| p.group == group) {
            if self.is_trainable(id) {
                counts.trainable += p.len();
            } else {
                counts.non_trainable += p.len();
            }
        }
        counts
    }
}
