//! Parameterized building blocks shared by the two stages.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{BnMode, Graph, NodeId, ParamId, ParamStore, StatRecord, Tensor};

pub(crate) const BN_EPSILON: f64 = 1e-5;

fn uniform<R: Rng + ?Sized>(rng: &mut R, dims: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(dims, |_| rng.random_range(-bound..=bound))
}

/// Same-padded square convolution with bias.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub size: usize,
}

impl ConvLayer {
    pub(crate) fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        size: usize,
    ) -> Self {
        let bound = 1.0 / ((in_channels * size * size) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform(rng, &[out_channels, in_channels, size, size], bound),
        );
        let bias = store.add(format!("{name}.bias"), uniform(rng, &[out_channels], bound));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            size,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        g.conv2d(x, w, Some(b))
    }

    /// `s^2 * n_in * n_out`, the per-pixel multiply count.
    pub fn cost(&self) -> u64 {
        (self.size * self.size * self.in_channels * self.out_channels) as u64
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }

    /// Zeroes weight and bias, turning the layer into the zero map.
    pub fn zero(&self, store: &mut ParamStore) {
        for id in self.ids() {
            store.value_mut(id).data_mut().fill(0.0);
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub(crate) fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::filled(&[channels], 1.0)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId, mode: BnMode) -> Result<NodeId> {
        let gamma = g.param(store, self.gamma)?;
        let beta = g.param(store, self.beta)?;
        match mode {
            BnMode::Train => {
                let y = g.batchnorm(x, gamma, beta, mode, None, BN_EPSILON)?;
                g.record_stats(StatRecord {
                    node: y,
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                });
                Ok(y)
            }
            BnMode::Eval => {
                let running = (
                    store.value(self.running_mean).data(),
                    store.value(self.running_var).data(),
                );
                g.batchnorm(x, gamma, beta, mode, Some(running), BN_EPSILON)
            }
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta, self.running_mean, self.running_var]
    }
}

/// PReLU with one shared slope.
#[derive(Clone, Debug)]
pub struct Prelu {
    pub slope: ParamId,
}

impl Prelu {
    pub(crate) fn new(store: &mut ParamStore, name: &str) -> Self {
        Self {
            slope: store.add(format!("{name}.slope"), Tensor::filled(&[1], 0.25)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let a = g.param(store, self.slope)?;
        g.prelu(x, a)
    }
}

/// Two 1x1 convolutions with a ReLU between them.
#[derive(Clone, Debug)]
pub struct MultiConv {
    pub first: ConvLayer,
    pub second: ConvLayer,
}

impl MultiConv {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, c_in: usize, d: usize) -> Self {
        Self {
            first: ConvLayer::new(store, rng, &format!("{name}.0"), c_in, d, 1),
            second: ConvLayer::new(store, rng, &format!("{name}.1"), d, d, 1),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let h = self.first.forward(g, store, x)?;
        let h = g.relu(h)?;
        self.second.forward(g, store, h)
    }

    pub fn cost(&self) -> u64 {
        self.first.cost() + self.second.cost()
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [self.first.ids(), self.second.ids()].concat()
    }
}

/// `x + Conv(Attention(x))` with axial attention along the last axis.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub query: MultiConv,
    pub key: MultiConv,
    pub value: MultiConv,
    pub out: ConvLayer,
    pub width: usize,
    pub attn_width: usize,
}

impl AttentionBlock {
    pub(crate) fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        width: usize,
        attn_width: usize,
        kernel: usize,
    ) -> Self {
        Self {
            query: MultiConv::new(store, rng, &format!("{name}.query"), width, attn_width),
            key: MultiConv::new(store, rng, &format!("{name}.key"), width, attn_width),
            value: MultiConv::new(store, rng, &format!("{name}.value"), width, attn_width),
            out: ConvLayer::new(store, rng, &format!("{name}.out"), attn_width, width, kernel),
            width,
            attn_width,
        }
    }

    /// `softmax(Q K^T / sqrt(d)) V` per BS-antenna row; rows never mix.
    pub fn attention(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let q = self.query.forward(g, store, x)?;
        let k = self.key.forward(g, store, x)?;
        let v = self.value.forward(g, store, x)?;
        let scores = g.axial_scores(q, k, 1.0 / (self.attn_width as f64).sqrt())?;
        let weights = g.softmax(scores, 3)?;
        g.axial_apply(weights, v)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let a = self.attention(g, store, x)?;
        let c = self.out.forward(g, store, a)?;
        g.add(x, c)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [self.query.ids(), self.key.ids(), self.value.ids(), self.out.ids()].concat()
    }
}

/// `BN(Conv(PReLU(BN(Conv(x))))) + x`.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv1: ConvLayer,
    pub bn1: BatchNorm2d,
    pub act: Prelu,
    pub conv2: ConvLayer,
    pub bn2: BatchNorm2d,
}

impl ConvBlock {
    pub(crate) fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        width: usize,
        kernel: usize,
    ) -> Self {
        Self {
            conv1: ConvLayer::new(store, rng, &format!("{name}.conv1"), width, width, kernel),
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), width),
            act: Prelu::new(store, &format!("{name}.act")),
            conv2: ConvLayer::new(store, rng, &format!("{name}.conv2"), width, width, kernel),
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), width),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId, mode: BnMode) -> Result<NodeId> {
        let h = self.conv1.forward(g, store, x)?;
        let h = self.bn1.forward(g, store, h, mode)?;
        let h = self.act.forward(g, store, h)?;
        let h = self.conv2.forward(g, store, h)?;
        let h = self.bn2.forward(g, store, h, mode)?;
        g.add(h, x)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [
            self.conv1.ids(),
            self.bn1.ids(),
            vec![self.act.slope],
            self.conv2.ids(),
            self.bn2.ids(),
        ]
        .concat()
    }
}
