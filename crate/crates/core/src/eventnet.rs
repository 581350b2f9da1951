//! Encoder-decoder that turns two-channel event frames into one-channel
//! contour-like auxiliary frames.

use std::fs;
use std::path::Path;

use cmtc_tensor::{Adam, AdamConfig, Checkpoint, ParamStore, Scalar, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, io_err, CmtcError, Result};
use crate::nn::{Conv, ConvSpec};

pub const EVENTNET_PREFIX: &str = "eventnet";

#[derive(Debug, Clone)]
pub struct EventNet {
    encoder: Vec<Conv>,
    decoder: Vec<Conv>,
    head: Conv,
}

/// Encoder widths; each stage halves the resolution.
pub const EVENTNET_WIDTHS: [usize; 3] = [16, 32, 64];
/// Decoder widths; each stage doubles the resolution.
pub const EVENTNET_DECODER: [usize; 3] = [32, 16, 16];

impl EventNet {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut encoder = Vec::new();
        let mut cin = 2;
        for (i, &c) in EVENTNET_WIDTHS.iter().enumerate() {
            encoder.push(Conv::new(store, &format!("{EVENTNET_PREFIX}.enc{i}"), ConvSpec::leaky(cin, c, 3, 1), rng)?);
            cin = c;
        }
        let mut decoder = Vec::new();
        for (i, &c) in EVENTNET_DECODER.iter().enumerate() {
            decoder.push(Conv::new(store, &format!("{EVENTNET_PREFIX}.dec{i}"), ConvSpec::leaky(cin, c, 3, 1), rng)?);
            cin = c;
        }
        let head = Conv::new(store, &format!("{EVENTNET_PREFIX}.head"), ConvSpec::linear(cin, 1, 1), rng)?;
        Ok(Self { encoder, decoder, head })
    }

    pub fn downsampling(&self) -> usize {
        1 << self.encoder.len()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let f = self.downsampling();
        if shape.len() != 4 || shape[1] != 2 {
            return Err(CmtcError::Shape(format!("EventNet expects N x 2 x H x W frames, got {shape:?}")));
        }
        if shape[2] % f != 0 || shape[3] % f != 0 {
            return Err(CmtcError::Shape(format!(
                "EventNet input {}x{} must have height and width divisible by {f}",
                shape[2], shape[3]
            )));
        }
        Ok(())
    }

    /// `[N, 2, H, W]` frames to `[N, 1, H, W]` auxiliaries in (0, 1).
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, frames: Var) -> Result<Var> {
        self.check_input(tape.shape(frames))?;
        let mut x = frames;
        for conv in &self.encoder {
            x = conv.forward_leaky(tape, store, x)?;
            x = tape.avg_pool2d(x, 2, 2)?;
        }
        for conv in &self.decoder {
            let s = tape.shape(x).to_vec();
            x = tape.upsample_bilinear(x, s[2] * 2, s[3] * 2)?;
            x = conv.forward_leaky(tape, store, x)?;
        }
        let logits = self.head.forward(tape, store, x)?;
        Ok(tape.sigmoid(logits))
    }

    /// Forward without gradient bookkeeping.
    pub fn infer<T: Scalar>(&self, store: &ParamStore<T>, frames: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(frames.clone());
        let y = self.forward(&mut tape, store, x)?;
        Ok(tape.value(y).clone())
    }
}

/// Frozen random convolution stack used as a perceptual feature space.
#[derive(Debug, Clone)]
pub struct PerceptualExtractor {
    pub store: ParamStore<f64>,
    stages: Vec<Conv>,
}

pub const PERCEPTUAL_WIDTHS: [usize; 3] = [8, 16, 32];

impl PerceptualExtractor {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5045_5243);
        let mut store = ParamStore::new();
        let mut stages = Vec::new();
        let mut cin = 1;
        for (i, &c) in PERCEPTUAL_WIDTHS.iter().enumerate() {
            stages.push(Conv::new(&mut store, &format!("perceptual.s{i}"), ConvSpec::leaky(cin, c, 3, 2), &mut rng)?);
            cin = c;
        }
        for id in store.ids().collect::<Vec<_>>() {
            store.set_trainable(id, false);
        }
        Ok(Self { store, stages })
    }

    pub fn checksum(&self) -> u64 {
        self.store.checksum()
    }

    /// Final-stage features of `[N, 1, H, W]` images.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        // The stack is stored once in f64 and cast per call so the same
        // frozen weights serve both precisions.
        let mut x = x;
        for s in &self.stages {
            let w = tape.constant(self.store.value(s.w).cast());
            let b = s.b.map(|b| tape.constant(self.store.value(b).cast()));
            x = tape.conv2d(x, w, b, s.stride, s.pad)?;
            x = tape.leaky_relu(x, crate::nn::LEAKY_SLOPE)?;
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EventNetLoss {
    pub total: Var,
    pub mse: Var,
    pub perceptual: Var,
}

/// `MSE(aux, target) + lambda_p * MSE(phi(aux), phi(target))`.
pub fn eventnet_loss<T: Scalar>(
    tape: &mut Tape<T>,
    aux: Var,
    target: Var,
    extractor: &PerceptualExtractor,
    lambda_p: f64,
) -> Result<EventNetLoss> {
    if tape.shape(aux) != tape.shape(target) {
        return Err(CmtcError::Shape(format!(
            "auxiliary {:?} and target {:?} differ in shape",
            tape.shape(aux),
            tape.shape(target)
        )));
    }
    let mse = tape.mse(aux, target)?;
    let fa = extractor.forward(tape, aux)?;
    let ft = extractor.forward(tape, target)?;
    let perceptual = tape.mse(fa, ft)?;
    let weighted = tape.scale(perceptual, lambda_p);
    let total = tape.add(mse, weighted)?;
    Ok(EventNetLoss { total, mse, perceptual })
}

/// Silhouette boundary: pixels whose value differs from any 4-neighbour
/// (outside the frame counts as background), dilated by one pixel in the
/// 8-neighbourhood. Returns `[1, H, W]`.
pub fn contour_target<T: Scalar>(mask: &Tensor<T>) -> Result<Tensor<T>> {
    if mask.rank() != 2 {
        return Err(CmtcError::Shape(format!("mask must be H x W, got {:?}", mask.shape())));
    }
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let m = mask.data();
    let mut on = vec![false; h * w];
    for (i, &v) in m.iter().enumerate() {
        if v == T::one() {
            on[i] = true;
        } else if v != T::zero() {
            return Err(CmtcError::NonBinaryMask {
                value: v.as_f64(),
                index: i,
            });
        }
    }
    let at = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && on[y as usize * w + x as usize];
    let mut edge = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let c = at(y, x);
            edge[y as usize * w + x as usize] =
                [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|&(dy, dx)| at(y + dy, x + dx) != c);
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let hit = (-1..=1).any(|dy| {
                (-1..=1).any(|dx| {
                    let (yy, xx) = (y + dy, x + dx);
                    yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w && edge[yy as usize * w + xx as usize]
                })
            });
            if hit {
                out[y as usize * w + x as usize] = T::one();
            }
        }
    }
    Ok(Tensor::new(vec![1, h, w], out)?)
}

/// Contour targets for a `[T, H, W]` mask stack, as `[T, 1, H, W]`.
pub fn contour_targets<T: Scalar>(masks: &Tensor<T>) -> Result<Tensor<T>> {
    if masks.rank() != 3 {
        return Err(CmtcError::Shape(format!("mask stack must be T x H x W, got {:?}", masks.shape())));
    }
    let (t, h, w) = (masks.shape()[0], masks.shape()[1], masks.shape()[2]);
    let mut data = Vec::with_capacity(t * h * w);
    for k in 0..t {
        let m = masks.narrow(0, k, 1)?.reshape(&[h, w])?;
        data.extend_from_slice(contour_target(&m)?.data());
    }
    Ok(Tensor::new(vec![t, 1, h, w], data)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Clips per step; every frame of each clip is used.
    pub batch_clips: usize,
    pub lr: f64,
    pub lambda_p: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_clips: 4,
            lr: 2e-3,
            lambda_p: 0.1,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_clips == 0 {
            return Err(config("pretrain batch_clips must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config("pretrain lr must be positive"));
        }
        if !(self.lambda_p >= 0.0 && self.lambda_p.is_finite()) {
            return Err(config("lambda_p must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    pub mse: f64,
    pub perceptual: f64,
    pub total: f64,
}

pub fn loss_history_csv(rows: &[LossRow]) -> String {
    let mut s = String::from("epoch,mse,perceptual,total\n");
    for r in rows {
        s.push_str(&format!("{},{:e},{:e},{:e}\n", r.epoch, r.mse, r.perceptual, r.total));
    }
    s
}

/// One training example: `[T, 2, H, W]` frames and `[T, 1, H, W]` targets.
#[derive(Debug, Clone)]
pub struct PretrainSample<T> {
    pub frames: Tensor<T>,
    pub targets: Tensor<T>,
}

pub fn stack_batch<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| CmtcError::Shape("cannot stack an empty batch".into()))?;
    let mut shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.len() * parts.len());
    for p in parts {
        if p.shape()[1..] != shape[1..] {
            return Err(CmtcError::Shape(format!("cannot stack {:?} with {:?}", p.shape(), shape)));
        }
        data.extend_from_slice(p.data());
    }
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    Ok(Tensor::new(shape, data)?)
}

/// One optimization step on the given samples. Returns the loss parts.
pub fn pretrain_step<T: Scalar>(
    model: &EventNet,
    store: &mut ParamStore<T>,
    opt: &mut Adam<T>,
    extractor: &PerceptualExtractor,
    batch: &[&PretrainSample<T>],
    lambda_p: f64,
    step: usize,
) -> Result<(f64, f64, f64)> {
    let frames = stack_batch(&batch.iter().map(|s| &s.frames).collect::<Vec<_>>())?;
    let targets = stack_batch(&batch.iter().map(|s| &s.targets).collect::<Vec<_>>())?;
    let mut tape = Tape::new();
    let x = tape.constant(frames);
    let t = tape.constant(targets);
    let aux = model.forward(&mut tape, store, x)?;
    let loss = eventnet_loss(&mut tape, aux, t, extractor, lambda_p)?;
    let parts = (
        tape.value(loss.mse).item().as_f64(),
        tape.value(loss.perceptual).item().as_f64(),
        tape.value(loss.total).item().as_f64(),
    );
    if !parts.2.is_finite() {
        return Err(CmtcError::Divergence { step });
    }
    tape.backward(loss.total)?;
    store.zero_grad();
    store.pull_grads(&tape);
    opt.step(store).map_err(|_| CmtcError::Divergence { step })?;
    Ok(parts)
}

/// Trains only the EventNet parameters of `store`. When `checkpoint_dir` is
/// given, writes `eventnet_epoch{NNN}.cmtc` after every epoch and
/// `eventnet_loss.csv` at the end.
pub fn pretrain_eventnet<T: Scalar>(
    model: &EventNet,
    store: &mut ParamStore<T>,
    samples: &[PretrainSample<T>],
    cfg: &PretrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<LossRow>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(config("EventNet pretraining needs at least one sample"));
    }
    let extractor = PerceptualExtractor::new(cfg.seed)?;
    // Freeze everything outside EventNet for the duration.
    let saved: Vec<bool> = store.ids().map(|id| store.is_trainable(id)).collect();
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        let inside = store.name(id).starts_with(EVENTNET_PREFIX);
        store.set_trainable(id, inside && saved[id.index()]);
    }
    let result = (|| {
        let mut opt = Adam::new(
            AdamConfig {
                lr: cfg.lr,
                decay_every: usize::MAX,
                ..AdamConfig::default()
            },
            store,
        );
        let mut rows = Vec::with_capacity(cfg.epochs);
        let mut step = 0;
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..samples.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003) ^ epoch as u64));
            let mut acc = (0.0, 0.0, 0.0);
            let mut n = 0;
            for chunk in order.chunks(cfg.batch_clips) {
                let batch: Vec<_> = chunk.iter().map(|&i| &samples[i]).collect();
                let (m, p, t) = pretrain_step(model, store, &mut opt, &extractor, &batch, cfg.lambda_p, step)?;
                acc = (acc.0 + m, acc.1 + p, acc.2 + t);
                n += 1;
                step += 1;
            }
            let k = n as f64;
            rows.push(LossRow {
                epoch,
                mse: acc.0 / k,
                perceptual: acc.1 / k,
                total: acc.2 / k,
            });
            log::info!("eventnet epoch {epoch}: loss {:.5}", acc.2 / k);
            if let Some(dir) = checkpoint_dir {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
                Checkpoint::from_store(store).save(dir.join(format!("eventnet_epoch{epoch:03}.cmtc")))?;
            }
        }
        if let Some(dir) = checkpoint_dir {
            let p = dir.join("eventnet_loss.csv");
            fs::write(&p, loss_history_csv(&rows)).map_err(io_err(&p))?;
        }
        Ok(rows)
    })();
    for &id in &ids {
        store.set_trainable(id, saved[id.index()]);
    }
    result
}
