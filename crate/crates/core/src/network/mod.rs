//! The two-stage estimator: a feature-recovery network (CAN) with axial
//! attention followed by a residual denoiser (CMN).
//!
//! Both stages consume and produce `[batch, 2, N_t, M]` tensors whose two
//! channels hold the real and imaginary parts of a cascaded channel.

mod layers;
mod train;

use std::path::Path;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use layers::{AttentionBlock, BatchNorm2d, ConvBlock, ConvLayer, MultiConv, Prelu};
pub use train::{sample_norms, scale_samples, train_stage, Dataset, LossRecord, TrainConfig};

use crate::error::{dim_err, Error, Result};
use crate::linalg::ComplexMatrix;
use crate::tensor::{checkpoint, BnMode, Graph, NodeId, ParamId, ParamStore, Tensor};

/// Samples per forward pass during inference.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Can,
    Cmn,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Can => "can",
            Stage::Cmn => "cmn",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetConfig {
    /// Trunk feature channels.
    pub width: usize,
    /// Query/key/value width of the attention blocks.
    pub attn_width: usize,
    /// Spatial kernel size of every non-projection convolution.
    pub kernel: usize,
    pub bn_momentum: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            width: 32,
            attn_width: 16,
            kernel: 3,
            bn_momentum: 0.1,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.attn_width == 0 {
            return Err(Error::Config(format!(
                "network widths must be positive (width {}, attention width {})",
                self.width, self.attn_width
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size must be odd, got {}", self.kernel)));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config(format!(
                "bn momentum must be in (0, 1], got {}",
                self.bn_momentum
            )));
        }
        Ok(())
    }
}

/// Feature-recovery stage:
/// `P1 = ReLU(Conv(x))`, `A1 = AB1(P1) + P1`, `P2 = ReLU(Conv(A1))`,
/// `A2 = AB2(P2) + P2`, `out = x - ReLU(Conv(A2))`.
#[derive(Clone, Debug)]
pub struct Can {
    pub head: ConvLayer,
    pub block1: AttentionBlock,
    pub mid: ConvLayer,
    pub block2: AttentionBlock,
    pub tail: ConvLayer,
}

impl Can {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let p1 = self.head.forward(g, store, x)?;
        let p1 = g.relu(p1)?;
        let a1 = self.block1.forward(g, store, p1)?;
        let a1 = g.add(a1, p1)?;
        let p2 = self.mid.forward(g, store, a1)?;
        let p2 = g.relu(p2)?;
        let a2 = self.block2.forward(g, store, p2)?;
        let a2 = g.add(a2, p2)?;
        let r = self.tail.forward(g, store, a2)?;
        let r = g.relu(r)?;
        g.sub(x, r)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [
            self.head.ids(),
            self.block1.ids(),
            self.mid.ids(),
            self.block2.ids(),
            self.tail.ids(),
        ]
        .concat()
    }

    fn blocks(&self) -> [&AttentionBlock; 2] {
        [&self.block1, &self.block2]
    }
}

/// Denoising stage:
/// `Conv(BN(Conv(CB2(CB1(PReLU(Conv(x))))))) + Conv1x1(x)`.
#[derive(Clone, Debug)]
pub struct Cmn {
    pub head: ConvLayer,
    pub act: Prelu,
    pub block1: ConvBlock,
    pub block2: ConvBlock,
    pub conv: ConvLayer,
    pub bn: BatchNorm2d,
    pub tail: ConvLayer,
    pub skip: ConvLayer,
}

impl Cmn {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId, mode: BnMode) -> Result<NodeId> {
        let h = self.head.forward(g, store, x)?;
        let h = self.act.forward(g, store, h)?;
        let h = self.block1.forward(g, store, h, mode)?;
        let h = self.block2.forward(g, store, h, mode)?;
        let h = self.conv.forward(g, store, h)?;
        let h = self.bn.forward(g, store, h, mode)?;
        let trunk = self.tail.forward(g, store, h)?;
        let skip = self.skip.forward(g, store, x)?;
        g.add(trunk, skip)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [
            self.head.ids(),
            vec![self.act.slope],
            self.block1.ids(),
            self.block2.ids(),
            self.conv.ids(),
            self.bn.ids(),
            self.tail.ids(),
            self.skip.ids(),
        ]
        .concat()
    }

    fn convs(&self) -> Vec<&ConvLayer> {
        vec![
            &self.head,
            &self.block1.conv1,
            &self.block1.conv2,
            &self.block2.conv1,
            &self.block2.conv2,
            &self.conv,
            &self.tail,
            &self.skip,
        ]
    }
}

/// Both stages, their parameters and training state.
#[derive(Clone, Debug)]
pub struct MbaModel {
    pub config: NetConfig,
    pub store: ParamStore,
    pub can: Can,
    pub cmn: Cmn,
    can_trained: bool,
    cmn_trained: bool,
}

impl MbaModel {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (w, d, s) = (config.width, config.attn_width, config.kernel);
        let s_ = &mut store;
        let r = &mut rng;
        let can = Can {
            head: ConvLayer::new(s_, r, "can.head", 2, w, s),
            block1: AttentionBlock::new(s_, r, "can.ab1", w, d, s),
            mid: ConvLayer::new(s_, r, "can.mid", w, w, s),
            block2: AttentionBlock::new(s_, r, "can.ab2", w, d, s),
            tail: ConvLayer::new(s_, r, "can.tail", w, 2, s),
        };
        let cmn = Cmn {
            head: ConvLayer::new(s_, r, "cmn.head", 2, w, s),
            act: Prelu::new(s_, "cmn.act"),
            block1: ConvBlock::new(s_, r, "cmn.cb1", w, s),
            block2: ConvBlock::new(s_, r, "cmn.cb2", w, s),
            conv: ConvLayer::new(s_, r, "cmn.conv", w, w, s),
            bn: BatchNorm2d::new(s_, "cmn.bn", w),
            tail: ConvLayer::new(s_, r, "cmn.tail", w, 2, s),
            skip: ConvLayer::new(s_, r, "cmn.skip", 2, 2, 1),
        };
        Ok(Self {
            config,
            store,
            can,
            cmn,
            can_trained: false,
            cmn_trained: false,
        })
    }

    pub fn can_trained(&self) -> bool {
        self.can_trained
    }

    pub fn cmn_trained(&self) -> bool {
        self.cmn_trained
    }

    pub(crate) fn mark_trained(&mut self, stage: Stage) {
        match stage {
            Stage::Can => self.can_trained = true,
            Stage::Cmn => self.cmn_trained = true,
        }
    }

    pub fn stage_ids(&self, stage: Stage) -> Vec<ParamId> {
        match stage {
            Stage::Can => self.can.ids(),
            Stage::Cmn => self.cmn.ids(),
        }
    }

    pub fn set_frozen(&mut self, stage: Stage, frozen: bool) {
        let ids = self.stage_ids(stage);
        self.store.set_frozen(&ids, frozen);
    }

    pub fn can_forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        self.can.forward(g, &self.store, x)
    }

    pub fn cmn_forward(&self, g: &mut Graph, x: NodeId, mode: BnMode) -> Result<NodeId> {
        self.cmn.forward(g, &self.store, x, mode)
    }

    /// `CMN(CAN(x))`.
    pub fn mba_forward(&self, g: &mut Graph, x: NodeId, mode: BnMode) -> Result<NodeId> {
        let c = self.can_forward(g, x)?;
        self.cmn_forward(g, c, mode)
    }

    fn predict_with(&self, inputs: &Tensor, f: impl Fn(&Self, &mut Graph, NodeId) -> Result<NodeId>) -> Result<Tensor> {
        check_batch(inputs)?;
        let n = inputs.dims()[0];
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            let mut g = Graph::new();
            let x = g.constant(inputs.slice_leading_range(start, end)?)?;
            let y = f(self, &mut g, x)?;
            parts.push(g.value(y).clone());
            start = end;
        }
        if parts.is_empty() {
            return Ok(Tensor::zeros(inputs.dims()));
        }
        Tensor::concat_leading(&parts)
    }

    /// CAN output for every sample (no gradients).
    pub fn predict_can(&self, inputs: &Tensor) -> Result<Tensor> {
        self.predict_with(inputs, |m, g, x| m.can_forward(g, x))
    }

    /// CMN applied directly to `inputs`, batch norm in eval mode.
    pub fn predict_cmn(&self, inputs: &Tensor) -> Result<Tensor> {
        self.predict_with(inputs, |m, g, x| m.cmn_forward(g, x, BnMode::Eval))
    }

    /// Full two-stage estimate, batch norm in eval mode.
    pub fn predict_mba(&self, inputs: &Tensor) -> Result<Tensor> {
        self.predict_with(inputs, |m, g, x| m.mba_forward(g, x, BnMode::Eval))
    }

    pub fn predict(&self, stage: Stage, inputs: &Tensor) -> Result<Tensor> {
        match stage {
            Stage::Can => self.predict_can(inputs),
            Stage::Cmn => self.predict_mba(inputs),
        }
    }

    /// Complexity count for `k` subcarriers of an `n_t x m` channel:
    /// `K [N_t M sum_CAN s^2 n n' + sum_AB M N_t N_I + N_t M sum_CMN s^2 n n'
    ///    + 6 N_t M sum_MB s^2 n n']`.
    ///
    /// Exactly linear in each of `n_t`, `m`, `k`.
    pub fn flop_estimate(&self, n_t: usize, m: usize, k: usize) -> f64 {
        self.stage_flop_estimate(Stage::Can, n_t, m, k) + self.stage_flop_estimate(Stage::Cmn, n_t, m, k)
    }

    /// The part of [`MbaModel::flop_estimate`] spent in one stage; the six
    /// MB terms belong to the CAN attention blocks.
    pub fn stage_flop_estimate(&self, stage: Stage, n_t: usize, m: usize, k: usize) -> f64 {
        let per_pixel: u64 = match stage {
            Stage::Can => {
                let convs: u64 = [&self.can.head, &self.can.mid, &self.can.tail]
                    .iter()
                    .map(|c| c.cost())
                    .chain(self.can.blocks().iter().map(|b| b.out.cost()))
                    .sum();
                let attention: u64 = self.can.blocks().iter().map(|b| b.width as u64).sum();
                convs + attention + 6 * self.can.block1.query.cost()
            }
            Stage::Cmn => self.cmn.convs().iter().map(|c| c.cost()).sum(),
        };
        (k as f64) * (n_t as f64) * (m as f64) * per_pixel as f64
    }

    /// Writes all parameters, running statistics and stage flags.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut blobs = self.store.named_tensors();
        blobs.push((
            "meta.trained".into(),
            Tensor::new(&[2], vec![self.can_trained as u8 as f64, self.cmn_trained as u8 as f64])?,
        ));
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        checkpoint::write_blobs(&mut w, &blobs)?;
        std::io::Write::flush(&mut w)?;
        Ok(())
    }

    /// Loads a checkpoint written by [`MbaModel::save`] into a model built
    /// with the same [`NetConfig`].
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let file = std::fs::File::open(path)?;
        let mut blobs = checkpoint::read_blobs(std::io::BufReader::new(file))?;
        let meta = blobs
            .iter()
            .position(|(n, _)| n == "meta.trained")
            .ok_or_else(|| Error::Format("checkpoint has no stage flags".into()))?;
        let (_, flags) = blobs.remove(meta);
        if flags.numel() != 2 {
            return Err(Error::Format("malformed stage flags".into()));
        }
        self.store.load_named(&blobs)?;
        self.can_trained = flags.data()[0] != 0.0;
        self.cmn_trained = flags.data()[1] != 0.0;
        Ok(())
    }
}

fn check_batch(t: &Tensor) -> Result<()> {
    let d = t.dims();
    if d.len() != 4 || d[1] != 2 {
        return dim_err(format!("expected [batch, 2, N_t, M] input, got {d:?}"));
    }
    if !t.is_finite() {
        return Err(Error::NonFinite {
            op: "network input".into(),
        });
    }
    Ok(())
}

/// Packs complex `N_t x M` matrices into a `[n, 2, N_t, M]` tensor.
pub fn pack(mats: &[ComplexMatrix]) -> Result<Tensor> {
    let Some(first) = mats.first() else {
        return dim_err("cannot pack an empty list");
    };
    let (r, c) = first.shape();
    let mut data = Vec::with_capacity(mats.len() * 2 * r * c);
    for m in mats {
        if m.shape() != (r, c) {
            return dim_err(format!("pack: shape {:?} differs from {:?}", m.shape(), (r, c)));
        }
        data.extend(m.entries().iter().map(|z| z.re));
        data.extend(m.entries().iter().map(|z| z.im));
    }
    Tensor::new(&[mats.len(), 2, r, c], data)
}

/// Inverse of [`pack`].
pub fn unpack(t: &Tensor) -> Result<Vec<ComplexMatrix>> {
    let d = t.dims();
    if d.len() != 4 || d[1] != 2 {
        return dim_err(format!("unpack expects [n, 2, N_t, M], got {d:?}"));
    }
    let plane = d[2] * d[3];
    t.data()
        .chunks(2 * plane)
        .map(|s| {
            let entries = (0..plane).map(|i| Complex64::new(s[i], s[plane + i])).collect();
            ComplexMatrix::new(d[2], d[3], entries)
        })
        .collect()
}

/// Mean over samples of `||truth_i - est_i||^2 / ||truth_i||^2`.
pub fn batch_nmse(truth: &Tensor, est: &Tensor) -> Result<f64> {
    if truth.dims() != est.dims() || truth.ndim() < 2 {
        return dim_err(format!("nmse of {:?} against {:?}", est.dims(), truth.dims()));
    }
    let n = truth.dims()[0];
    if n == 0 {
        return Err(Error::Precondition("nmse over an empty batch".into()));
    }
    let per = truth.numel() / n;
    let mut total = 0.0;
    for (t, e) in truth.data().chunks(per).zip(est.data().chunks(per)) {
        let denom: f64 = t.iter().map(|v| v * v).sum();
        if denom == 0.0 {
            return Err(Error::Precondition("nmse against an all-zero channel".into()));
        }
        let err: f64 = t.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
        total += err / denom;
    }
    Ok(total / n as f64)
}

/// Per-stage relative NMSE reductions and the two error-propagation forms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GainReport {
    pub nmse_ls: f64,
    pub nmse_can: f64,
    pub nmse_cmn: f64,
    pub lambda_can: f64,
    pub lambda_cmn: f64,
    /// `(1 - lambda_can)(1 - lambda_cmn) NMSE_LS`; equals `nmse_cmn` up to rounding.
    pub first_power: f64,
    /// `(1 - lambda_can)^2 (1 - lambda_cmn)^2 NMSE_LS`, the amplitude-model form.
    pub squared_form: f64,
}

pub fn gain_report(nmse_ls: f64, nmse_can: f64, nmse_cmn: f64) -> Result<GainReport> {
    for (name, v) in [("NMSE_LS", nmse_ls), ("NMSE_CAN", nmse_can), ("NMSE_CMN", nmse_cmn)] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Precondition(format!("{name} must be finite and >= 0, got {v}")));
        }
    }
    if nmse_ls == 0.0 || nmse_can == 0.0 {
        return Err(Error::Precondition(
            "gain ratios need nonzero NMSE_LS and NMSE_CAN".into(),
        ));
    }
    let lambda_can = (nmse_ls - nmse_can) / nmse_ls;
    let lambda_cmn = (nmse_can - nmse_cmn) / nmse_can;
    let a = 1.0 - lambda_can;
    let b = 1.0 - lambda_cmn;
    Ok(GainReport {
        nmse_ls,
        nmse_can,
        nmse_cmn,
        lambda_can,
        lambda_cmn,
        first_power: a * b * nmse_ls,
        squared_form: a * a * b * b * nmse_ls,
    })
}
