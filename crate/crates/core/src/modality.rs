//! Per-frame feature encoders and the modality collaboration block:
//! differential modality, cross-modality synchronization (attention queried
//! by the difference), and cross-modality fusion (weighting plus channel and
//! spatial attention).

use cmtc_tensor::{ParamStore, Scalar, Tape, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{CmtcError, Result};
use crate::nn::{kaiming_bound, Conv, ConvSpec, Linear};

/// Three stride-2 conv + leaky stages with widths C/4, C/2, C.
#[derive(Debug, Clone)]
pub struct Encoder {
    stages: Vec<Conv>,
}

impl Encoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if channels < 4 || channels % 4 != 0 {
            return Err(CmtcError::Config(format!("encoder width {channels} must be a positive multiple of 4")));
        }
        let widths = [channels / 4, channels / 2, channels];
        let mut stages = Vec::new();
        let mut c = cin;
        for (i, &w) in widths.iter().enumerate() {
            stages.push(Conv::new(store, &format!("{name}.s{i}"), ConvSpec::leaky(c, w, 3, 2), rng)?);
            c = w;
        }
        Ok(Self { stages })
    }

    pub const STRIDE: usize = 8;

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut x = x;
        for s in &self.stages {
            x = s.forward_leaky(tape, store, x)?;
        }
        Ok(x)
    }
}

/// Event and auxiliary features for a batch of frames.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    event_encoder: &Encoder,
    aux_encoder: &Encoder,
    frames: Var,
    aux: Var,
) -> Result<(Var, Var)> {
    let (fs, as_) = (tape.shape(frames).to_vec(), tape.shape(aux).to_vec());
    if fs.len() != 4 || as_.len() != 4 || fs[0] != as_[0] || fs[2..] != as_[2..] {
        return Err(CmtcError::Shape(format!(
            "event frames {fs:?} and auxiliaries {as_:?} must share batch and spatial dims"
        )));
    }
    let e = event_encoder.forward(tape, store, frames)?;
    let a = aux_encoder.forward(tape, store, aux)?;
    if tape.shape(e) != tape.shape(a) {
        return Err(CmtcError::Shape(format!(
            "encoder branches disagree: {:?} vs {:?}",
            tape.shape(e),
            tape.shape(a)
        )));
    }
    Ok((e, a))
}

pub fn diff_modality<T: Scalar>(tape: &mut Tape<T>, e: Var, a: Var) -> Result<Var> {
    if tape.shape(e) != tape.shape(a) {
        return Err(CmtcError::Shape(format!(
            "differential modality needs equal shapes, got {:?} and {:?}",
            tape.shape(e),
            tape.shape(a)
        )));
    }
    Ok(tape.sub(e, a)?)
}

/// `[N, C, H, W]` to `[N, H*W, C]`.
pub fn to_tokens<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let flat = tape.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    Ok(tape.transpose(flat, 1, 2)?)
}

/// `[N, H*W, C]` back to `[N, C, H, W]`.
pub fn from_tokens<T: Scalar>(tape: &mut Tape<T>, t: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(t).to_vec();
    let chw = tape.transpose(t, 1, 2)?;
    Ok(tape.reshape(chw, &[s[0], s[2], h, w])?)
}

/// Row softmax of `q k^T` over `[N, L, C]` token sets, optionally scaled by
/// `1/sqrt(C)`.
pub fn attention_map<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, scaled: bool) -> Result<Var> {
    let kt = tape.transpose(k, 1, 2)?;
    let mut logits = tape.matmul(q, kt)?;
    if scaled {
        let c = tape.shape(q)[2] as f64;
        logits = tape.scale(logits, 1.0 / c.sqrt());
    }
    Ok(tape.softmax(logits, 2)?)
}

#[derive(Debug, Clone)]
pub struct CmsBlock {
    pub q: Conv,
    pub k_e: Conv,
    pub v_e: Conv,
    pub k_a: Conv,
    pub v_a: Conv,
    pub scaled: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct CmsOutput {
    pub e_hat: Var,
    pub a_hat: Var,
    /// `[N, L, L]` row-stochastic maps.
    pub attn_e: Var,
    pub attn_a: Var,
}

impl CmsBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut p = |n: &str| Conv::new(store, &format!("{name}.{n}"), ConvSpec::linear(c, c, 1), rng);
        Ok(Self {
            q: p("q")?,
            k_e: p("k_e")?,
            v_e: p("v_e")?,
            k_a: p("k_a")?,
            v_a: p("v_a")?,
            scaled: false,
        })
    }
}

pub fn cms<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    block: &CmsBlock,
    e: Var,
    a: Var,
    d: Var,
) -> Result<CmsOutput> {
    let s = tape.shape(e).to_vec();
    if tape.shape(a) != s.as_slice() || tape.shape(d) != s.as_slice() {
        return Err(CmtcError::Shape(format!(
            "synchronization inputs differ: {:?}, {:?}, {:?}",
            s,
            tape.shape(a),
            tape.shape(d)
        )));
    }
    let (h, w) = (s[2], s[3]);
    let tok = |tape: &mut Tape<T>, conv: &Conv, x: Var| -> Result<Var> {
        let y = conv.forward(tape, store, x)?;
        to_tokens(tape, y)
    };
    let q = tok(tape, &block.q, d)?;
    let (ke, ve) = (tok(tape, &block.k_e, e)?, tok(tape, &block.v_e, e)?);
    let (ka, va) = (tok(tape, &block.k_a, a)?, tok(tape, &block.v_a, a)?);
    let attn_e = attention_map(tape, q, ke, block.scaled)?;
    let attn_a = attention_map(tape, q, ka, block.scaled)?;
    let ye = tape.matmul(attn_e, ve)?;
    let ya = tape.matmul(attn_a, va)?;
    Ok(CmsOutput {
        e_hat: from_tokens(tape, ye, h, w)?,
        a_hat: from_tokens(tape, ya, h, w)?,
        attn_e,
        attn_a,
    })
}

/// Pooled bottleneck MLP shared between the average and max descriptors.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ChannelAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let hidden = (c / 8).max(1);
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), c, hidden, true, kaiming_bound(c), rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, c, true, kaiming_bound(hidden), rng)?,
        })
    }

    /// `[N, C, 1, 1]` map in (0, 1).
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let branch = |tape: &mut Tape<T>, pooled: Var| -> Result<Var> {
            let v = tape.reshape(pooled, &[s[0], s[1]])?;
            let h = self.fc1.forward(tape, store, v)?;
            let h = tape.relu(h);
            self.fc2.forward(tape, store, h)
        };
        let avg = tape.global_avg_pool(x)?;
        let max = tape.global_max_pool(x)?;
        let ya = branch(tape, avg)?;
        let ym = branch(tape, max)?;
        let sum = tape.add(ya, ym)?;
        let gate = tape.sigmoid(sum);
        Ok(tape.reshape(gate, &[s[0], s[1], 1, 1])?)
    }
}

/// 7x7 convolution over the channel-mean and channel-max maps.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub conv: Conv,
}

impl SpatialAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(store, &format!("{name}.conv"), ConvSpec::linear(2, 1, 7), rng)?,
        })
    }

    /// `[N, 1, H, W]` map in (0, 1).
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let avg = tape.mean_axis(x, 1, true)?;
        let max = tape.max_axis(x, 1, true)?;
        let both = tape.concat(&[avg, max], 1)?;
        let y = self.conv.forward(tape, store, both)?;
        Ok(tape.sigmoid(y))
    }
}

/// Replaces every learned gate with 1; used to probe the identity limits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateMode {
    #[default]
    Learned,
    Unit,
}

/// One fusion direction: the weight head and attention heads applied to
/// the weighted synchronized feature of one modality.
#[derive(Debug, Clone)]
pub struct CmfDirection {
    pub weight: Conv,
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
}

impl CmfDirection {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        per_channel: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let out = if per_channel { c } else { 1 };
        Ok(Self {
            weight: Conv::new(store, &format!("{name}.weight_head"), ConvSpec::linear(2 * c, out, 1), rng)?,
            channel: ChannelAttention::new(store, &format!("{name}.channel"), c, rng)?,
            spatial: SpatialAttention::new(store, &format!("{name}.spatial"), rng)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct CmfBlock {
    /// Produces the event weight and refines the weighted event feature.
    pub alpha: CmfDirection,
    /// Mirror for the auxiliary side.
    pub beta: CmfDirection,
    pub gates: GateMode,
}

impl CmfBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        per_channel: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            alpha: CmfDirection::new(store, &format!("{name}.alpha"), c, per_channel, rng)?,
            beta: CmfDirection::new(store, &format!("{name}.beta"), c, per_channel, rng)?,
            gates: GateMode::Learned,
        })
    }
}

/// `GlobalAvg(Sigmoid(Conv([synced, other])))`: `[N, 1, 1, 1]`, or
/// `[N, C, 1, 1]` with a per-channel head.
pub fn cmf_weight<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    head: &Conv,
    synced: Var,
    other: Var,
) -> Result<Var> {
    if tape.shape(synced)[2..] != tape.shape(other)[2..] {
        return Err(CmtcError::Shape(format!(
            "fusion weight inputs differ spatially: {:?} vs {:?}",
            tape.shape(synced),
            tape.shape(other)
        )));
    }
    let pair = tape.concat(&[synced, other], 1)?;
    let logits = head.forward(tape, store, pair)?;
    let gated = tape.sigmoid(logits);
    Ok(tape.global_avg_pool(gated)?)
}

/// Every intermediate of the modality collaboration block.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePair {
    pub event: Var,
    pub auxiliary: Var,
    pub diff: Var,
    pub e_hat: Var,
    pub a_hat: Var,
    pub attn_e: Var,
    pub attn_a: Var,
    pub w_e: Var,
    pub w_a: Var,
    pub e_bar: Var,
    pub a_bar: Var,
    pub e_prime: Var,
    pub a_prime: Var,
    pub e_dprime: Var,
    pub a_dprime: Var,
    pub f_alpha: Var,
    pub f_beta: Var,
    /// `[N, 2C, H, W]`.
    pub fused: Var,
}

fn refine<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    dir: &CmfDirection,
    gates: GateMode,
    x: Var,
) -> Result<(Var, Var)> {
    if gates == GateMode::Unit {
        return Ok((x, x));
    }
    let ca = dir.channel.forward(tape, store, x)?;
    let prime = tape.mul(x, ca)?;
    let sa = dir.spatial.forward(tape, store, prime)?;
    let dprime = tape.mul(prime, sa)?;
    Ok((prime, dprime))
}

/// Weighting, attention refinement, and cross-branch sums of the fusion
/// stage, given synchronized features.
pub fn cmf_fuse<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    block: &CmfBlock,
    event: Var,
    auxiliary: Var,
    sync: CmsOutput,
    diff: Var,
) -> Result<FeaturePair> {
    let (w_e, w_a) = match block.gates {
        GateMode::Learned => (
            cmf_weight(tape, store, &block.alpha.weight, sync.e_hat, auxiliary)?,
            cmf_weight(tape, store, &block.beta.weight, sync.a_hat, event)?,
        ),
        GateMode::Unit => {
            let n = tape.shape(event)[0];
            let one = tape.constant(cmtc_tensor::Tensor::ones(&[n, 1, 1, 1])?);
            (one, one)
        }
    };
    let e_bar = tape.mul(sync.e_hat, w_e)?;
    let a_bar = tape.mul(sync.a_hat, w_a)?;
    let (e_prime, e_dprime) = refine(tape, store, &block.alpha, block.gates, e_bar)?;
    let (a_prime, a_dprime) = refine(tape, store, &block.beta, block.gates, a_bar)?;
    let f_alpha = tape.add(a_bar, e_dprime)?;
    let f_beta = tape.add(e_bar, a_dprime)?;
    let fused = tape.concat(&[f_alpha, f_beta], 1)?;
    Ok(FeaturePair {
        event,
        auxiliary,
        diff,
        e_hat: sync.e_hat,
        a_hat: sync.a_hat,
        attn_e: sync.attn_e,
        attn_a: sync.attn_a,
        w_e,
        w_a,
        e_bar,
        a_bar,
        e_prime,
        a_prime,
        e_dprime,
        a_dprime,
        f_alpha,
        f_beta,
        fused,
    })
}

#[derive(Debug, Clone)]
pub struct McBlock {
    pub cms: CmsBlock,
    pub cmf: CmfBlock,
}

impl McBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        per_channel: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            cms: CmsBlock::new(store, &format!("{name}.cms"), c, rng)?,
            cmf: CmfBlock::new(store, &format!("{name}.cmf"), c, per_channel, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, e: Var, a: Var) -> Result<FeaturePair> {
        let d = diff_modality(tape, e, a)?;
        let sync = cms(tape, store, &self.cms, e, a, d)?;
        cmf_fuse(tape, store, &self.cmf, e, a, sync, d)
    }
}
