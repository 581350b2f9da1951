//! Temporal collaboration: attention from frame `i` onto frame `i + 1`,
//! combined across modalities, then gated integration with the fused
//! modality feature of frame `i`.

use cmtc_tensor::{ParamStore, Scalar, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{config, CmtcError, Result};
use crate::modality::{attention_map, from_tokens, to_tokens};
use crate::nn::{Conv, ConvSpec};

pub fn pair_schedule(clip_len: usize) -> Result<Vec<(usize, usize)>> {
    if clip_len < 2 {
        return Err(config(format!("temporal pairs need clip_len >= 2, got {clip_len}")));
    }
    Ok((0..clip_len - 1).map(|i| (i, i + 1)).collect())
}

#[derive(Debug, Clone)]
pub struct CtaBlock {
    pub q_e: Conv,
    pub k_e: Conv,
    pub v_e: Conv,
    pub q_a: Conv,
    pub k_a: Conv,
    pub v_a: Conv,
    pub scaled: bool,
    /// Rescale rows of the combined map to sum to one.
    pub renormalize: bool,
}

impl CtaBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut p = |n: &str| Conv::new(store, &format!("{name}.{n}"), ConvSpec::linear(c, c, 1), rng);
        Ok(Self {
            q_e: p("q_e")?,
            k_e: p("k_e")?,
            v_e: p("v_e")?,
            q_a: p("q_a")?,
            k_a: p("k_a")?,
            v_a: p("v_a")?,
            scaled: false,
            renormalize: false,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CtaOutput {
    pub t1: Var,
    pub t2: Var,
    pub t: Var,
    /// Attended next-frame features, `[N, C, H, W]`.
    pub y_e: Var,
    pub y_a: Var,
}

#[allow(clippy::too_many_arguments)]
pub fn cta<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    block: &CtaBlock,
    e_i: Var,
    e_next: Var,
    a_i: Var,
    a_next: Var,
) -> Result<CtaOutput> {
    let s = tape.shape(e_i).to_vec();
    for v in [e_next, a_i, a_next] {
        if tape.shape(v) != s.as_slice() {
            return Err(CmtcError::Shape(format!(
                "temporal attention inputs differ: {:?} vs {:?}",
                s,
                tape.shape(v)
            )));
        }
    }
    let (h, w) = (s[2], s[3]);
    let tok = |tape: &mut Tape<T>, conv: &Conv, x: Var| -> Result<Var> {
        let y = conv.forward(tape, store, x)?;
        to_tokens(tape, y)
    };
    let (qe, ke) = (tok(tape, &block.q_e, e_i)?, tok(tape, &block.k_e, e_next)?);
    let (qa, ka) = (tok(tape, &block.q_a, a_i)?, tok(tape, &block.k_a, a_next)?);
    let t1 = attention_map(tape, qe, ke, block.scaled)?;
    let t2 = attention_map(tape, qa, ka, block.scaled)?;
    let mut t = tape.mul(t1, t2)?;
    if block.renormalize {
        let rows = tape.sum_axis(t, 2, true)?;
        let inv = tape.powf(rows, -1.0);
        t = tape.mul(t, inv)?;
    }
    let ve = tok(tape, &block.v_e, e_next)?;
    let va = tok(tape, &block.v_a, a_next)?;
    let ye = tape.matmul(t, ve)?;
    let ya = tape.matmul(t, va)?;
    Ok(CtaOutput {
        t1,
        t2,
        t,
        y_e: from_tokens(tape, ye, h, w)?,
        y_a: from_tokens(tape, ya, h, w)?,
    })
}

/// Replaces the learned integration gate with ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IntegrationGate {
    #[default]
    Learned,
    Unit,
}

#[derive(Debug, Clone)]
pub struct CtiBlock {
    /// 1x1 conv from C to the fused width 2C.
    pub lift: Conv,
    /// 1x1 conv on the concatenated pooled descriptors (4C to 2C).
    pub gate: Conv,
    pub mode: IntegrationGate,
}

impl CtiBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        fused: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let lift = Conv::new(store, &format!("{name}.lift"), ConvSpec::linear(c, fused, 1), rng)?;
        let gate = Conv::new(store, &format!("{name}.gate"), ConvSpec::linear(2 * fused, fused, 1), rng)?;
        // Start as a pass-through: P = 1 plus a small learned term.
        if let Some(b) = gate.b {
            *store.value_mut(b) = Tensor::ones(&[fused])?;
        }
        Ok(Self {
            lift,
            gate,
            mode: IntegrationGate::Learned,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CtiOutput {
    pub lifted: Var,
    /// `[N, 2C, 1, 1]`.
    pub p: Var,
    pub f: Var,
}

/// `P = Conv([avg(psi), avg(lift(y))])`, `F = psi * P + lift(y) * P`.
pub fn cti<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, block: &CtiBlock, psi: Var, y: Var) -> Result<CtiOutput> {
    let (ps, ys) = (tape.shape(psi).to_vec(), tape.shape(y).to_vec());
    if ps.len() != 4 || ys.len() != 4 || ps[0] != ys[0] || ps[2..] != ys[2..] {
        return Err(CmtcError::Shape(format!(
            "integration inputs must share batch and spatial dims: {ps:?} vs {ys:?}"
        )));
    }
    let lifted = block.lift.forward(tape, store, y)?;
    let p = match block.mode {
        IntegrationGate::Learned => {
            let gp = tape.global_avg_pool(psi)?;
            let gy = tape.global_avg_pool(lifted)?;
            let both = tape.concat(&[gp, gy], 1)?;
            block.gate.forward(tape, store, both)?
        }
        IntegrationGate::Unit => tape.constant(Tensor::ones(&[ps[0], ps[1], 1, 1])?),
    };
    let a = tape.mul(psi, p)?;
    let b = tape.mul(lifted, p)?;
    let f = tape.add(a, b)?;
    Ok(CtiOutput { lifted, p, f })
}

#[derive(Debug, Clone)]
pub struct TcBlock {
    pub cta: CtaBlock,
    pub phi: CtiBlock,
    pub eta: CtiBlock,
}

impl TcBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        fused: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            cta: CtaBlock::new(store, &format!("{name}.cta"), c, rng)?,
            phi: CtiBlock::new(store, &format!("{name}.cti_phi"), c, fused, rng)?,
            eta: CtiBlock::new(store, &format!("{name}.cti_eta"), c, fused, rng)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TcOutput {
    pub cta: CtaOutput,
    pub phi: CtiOutput,
    pub eta: CtiOutput,
    /// `[N, 2 * fused, H, W]`.
    pub out: Var,
}

/// `Phi = [cti_phi(psi, y_e), cti_eta(psi, y_a)]`.
pub fn tc_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    block: &TcBlock,
    psi: Var,
    y_e: Var,
    y_a: Var,
) -> Result<(CtiOutput, CtiOutput, Var)> {
    let phi = cti(tape, store, &block.phi, psi, y_e)?;
    let eta = cti(tape, store, &block.eta, psi, y_a)?;
    let out = tape.concat(&[phi.f, eta.f], 1)?;
    Ok((phi, eta, out))
}

#[allow(clippy::too_many_arguments)]
impl TcBlock {
    /// Full temporal step for frame pair `(i, i + 1)`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        psi_i: Var,
        e_i: Var,
        e_next: Var,
        a_i: Var,
        a_next: Var,
    ) -> Result<TcOutput> {
        let c = cta(tape, store, &self.cta, e_i, e_next, a_i, a_next)?;
        let (phi, eta, out) = tc_forward(tape, store, self, psi_i, c.y_e, c.y_a)?;
        Ok(TcOutput { cta: c, phi, eta, out })
    }
}
