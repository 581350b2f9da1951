//! Re-identification model assembly, losses, distances, and CMC/mAP scoring.

use cmtc_tensor::{ParamStore, Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, CmtcError, Result};
use crate::eventnet::EventNet;
use crate::modality::{Encoder, McBlock};
use crate::nn::{xavier_bound, BatchNorm, Linear};
use crate::split::ClipMeta;
use crate::temporal::TcBlock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationConfig {
    pub use_eventnet: bool,
    pub use_mc: bool,
    pub use_tc: bool,
}

impl AblationConfig {
    pub const BASELINE: Self = Self::new(false, false, false);
    pub const EVENTNET: Self = Self::new(true, false, false);
    pub const MC: Self = Self::new(true, true, false);
    pub const TC: Self = Self::new(true, false, true);
    pub const FULL: Self = Self::new(true, true, true);

    /// Ablation rows in table order.
    pub const ROWS: [(&'static str, Self); 5] = [
        ("baseline", Self::BASELINE),
        ("eventnet", Self::EVENTNET),
        ("eventnet+mc", Self::MC),
        ("eventnet+tc", Self::TC),
        ("full", Self::FULL),
    ];

    pub const fn new(use_eventnet: bool, use_mc: bool, use_tc: bool) -> Self {
        Self {
            use_eventnet,
            use_mc,
            use_tc,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (self.use_mc || self.use_tc) && !self.use_eventnet {
            return Err(config("the MC and TC blocks consume auxiliaries and require use_eventnet"));
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        Self::ROWS
            .iter()
            .find(|(_, a)| a == self)
            .map(|(n, _)| *n)
            .unwrap_or("invalid")
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ROWS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, a)| *a)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ROWS.iter().map(|(n, _)| *n).collect();
                config(format!("unknown ablation '{name}', expected one of {}", names.join(", ")))
            })
    }
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Encoder feature width C.
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub clip_len: usize,
    pub scaled_attention: bool,
    pub renormalize_temporal: bool,
    pub per_channel_weight: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            height: 64,
            width: 32,
            clip_len: 8,
            scaled_attention: false,
            renormalize_temporal: false,
            per_channel_weight: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 8 || self.channels % 8 != 0 {
            return Err(config(format!("channels must be a positive multiple of 8, got {}", self.channels)));
        }
        if self.height % 8 != 0 || self.width % 8 != 0 || self.height == 0 || self.width == 0 {
            return Err(config(format!(
                "input {}x{} must have height and width divisible by 8",
                self.height, self.width
            )));
        }
        if self.clip_len < 2 {
            return Err(config(format!("clip_len must be at least 2, got {}", self.clip_len)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct CmtcModel {
    pub config: ModelConfig,
    pub ablation: AblationConfig,
    pub eventnet: Option<EventNet>,
    pub event_encoder: Encoder,
    pub aux_encoder: Option<Encoder>,
    pub mc: Option<McBlock>,
    pub tc: Option<TcBlock>,
    pub neck: BatchNorm,
    pub classifier: Linear,
    pub num_classes: usize,
}

#[derive(Debug, Clone)]
pub struct ForwardOut<T> {
    /// Pre-neck clip descriptors `[B, d]` (triplet input).
    pub features: Var,
    /// Post-neck embeddings `[B, d]`.
    pub embedding: Var,
    pub logits: Var,
    /// Batch statistics when run in training mode.
    pub neck_stats: Option<(Tensor<T>, Tensor<T>)>,
}

impl CmtcModel {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        config: ModelConfig,
        ablation: AblationConfig,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        ablation.validate()?;
        if num_classes < 2 {
            return Err(config_err(format!("need at least 2 training identities, got {num_classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let eventnet = if ablation.use_eventnet {
            Some(EventNet::new(store, &mut rng)?)
        } else {
            None
        };
        let event_encoder = Encoder::new(store, "encoder.event", 2, c, &mut rng)?;
        let aux_encoder = if ablation.use_eventnet {
            Some(Encoder::new(store, "encoder.aux", 1, c, &mut rng)?)
        } else {
            None
        };
        let mut mc = if ablation.use_mc {
            Some(McBlock::new(store, "mc", c, config.per_channel_weight, &mut rng)?)
        } else {
            None
        };
        if let Some(m) = mc.as_mut() {
            m.cms.scaled = config.scaled_attention;
        }
        let mut tc = if ablation.use_tc {
            Some(TcBlock::new(store, "tc", c, 2 * c, &mut rng)?)
        } else {
            None
        };
        if let Some(t) = tc.as_mut() {
            t.cta.scaled = config.scaled_attention;
            t.cta.renormalize = config.renormalize_temporal;
        }
        let d = Self::dim_for(&config, &ablation);
        let neck = BatchNorm::new(store, "neck", d)?;
        let classifier = Linear::new(store, "classifier", d, num_classes, false, xavier_bound(d, num_classes), &mut rng)?;
        Ok(Self {
            config,
            ablation,
            eventnet,
            event_encoder,
            aux_encoder,
            mc,
            tc,
            neck,
            classifier,
            num_classes,
        })
    }

    fn dim_for(config: &ModelConfig, ablation: &AblationConfig) -> usize {
        let c = config.channels;
        match (ablation.use_eventnet, ablation.use_tc) {
            (false, _) => c,
            (true, false) => 2 * c,
            (true, true) => 4 * c,
        }
    }

    pub fn embed_dim(&self) -> usize {
        Self::dim_for(&self.config, &self.ablation)
    }

    /// Auxiliary frames for `[N, 2, H, W]` event frames, on the tape.
    pub fn auxiliaries<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, frames: Var) -> Result<Option<Var>> {
        match &self.eventnet {
            Some(net) => Ok(Some(net.forward(tape, store, frames)?)),
            None => Ok(None),
        }
    }

    /// Clip descriptors for `batch` clips whose frames are stacked as
    /// `[batch * T, 2, H, W]`. `aux` overrides the EventNet output (used
    /// when EventNet is frozen and its outputs are cached).
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        frames: Var,
        aux: Option<Var>,
        batch: usize,
        mode: Mode,
    ) -> Result<ForwardOut<T>> {
        let s = tape.shape(frames).to_vec();
        let t = self.config.clip_len;
        if s.len() != 4 || s[0] != batch * t || s[1] != 2 || s[2] != self.config.height || s[3] != self.config.width {
            return Err(CmtcError::Shape(format!(
                "expected [{} x {t}, 2, {}, {}] frames, got {s:?}",
                batch, self.config.height, self.config.width
            )));
        }
        let ye = self.event_encoder.forward(tape, store, frames)?;
        let (psi, ya) = match &self.aux_encoder {
            None => (ye, None),
            Some(enc) => {
                let a = match aux {
                    Some(a) => a,
                    None => self.auxiliaries(tape, store, frames)?.expect("eventnet present"),
                };
                let ya = enc.forward(tape, store, a)?;
                let psi = match &self.mc {
                    Some(mc) => mc.forward(tape, store, ye, ya)?.fused,
                    None => tape.concat(&[ye, ya], 1)?,
                };
                (psi, Some(ya))
            }
        };
        let features = match (&self.tc, ya) {
            (Some(tc), Some(ya)) => {
                let pick = |tape: &mut Tape<T>, x: Var, start: usize| -> Result<Var> {
                    let xs = tape.shape(x).to_vec();
                    let grouped = tape.reshape(x, &[batch, t, xs[1], xs[2], xs[3]])?;
                    let part = tape.narrow(grouped, 1, start, t - 1)?;
                    Ok(tape.reshape(part, &[batch * (t - 1), xs[1], xs[2], xs[3]])?)
                };
                let psi_i = pick(tape, psi, 0)?;
                let (e_i, e_n) = (pick(tape, ye, 0)?, pick(tape, ye, 1)?);
                let (a_i, a_n) = (pick(tape, ya, 0)?, pick(tape, ya, 1)?);
                let out = tc.forward(tape, store, psi_i, e_i, e_n, a_i, a_n)?;
                pool_and_average(tape, out.out, batch, t - 1)?
            }
            _ => pool_and_average(tape, psi, batch, t)?,
        };
        let (embedding, neck_stats) = match mode {
            Mode::Train => {
                let (y, m, v) = self.neck.forward_train(tape, store, features)?;
                (y, Some((m, v)))
            }
            Mode::Eval => (self.neck.forward_eval(tape, store, features)?, None),
        };
        let logits = self.classifier.forward(tape, store, embedding)?;
        Ok(ForwardOut {
            features,
            embedding,
            logits,
            neck_stats,
        })
    }
}

fn config_err(msg: String) -> CmtcError {
    CmtcError::Config(msg)
}

/// `[B * n, d, h, w]` to `[B, d]`: spatial mean, then mean over the `n` items.
fn pool_and_average<T: Scalar>(tape: &mut Tape<T>, x: Var, batch: usize, n: usize) -> Result<Var> {
    let d = tape.shape(x)[1];
    let pooled = tape.global_avg_pool(x)?;
    let grouped = tape.reshape(pooled, &[batch, n, d])?;
    let mean = tape.mean_axis(grouped, 1, false)?;
    Ok(tape.reshape(mean, &[batch, d])?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEmbedding {
    pub vector: Vec<f64>,
    pub person_id: u32,
    pub camera_id: u32,
}

/// Pools each `[1, d, h, w]` pair feature over space, averages over pairs,
/// and applies the neck with its running statistics.
pub fn aggregate_clip<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    neck: &BatchNorm,
    pair_features: &[Var],
    meta: ClipMeta,
) -> Result<ClipEmbedding> {
    if pair_features.is_empty() {
        return Err(config("aggregate_clip needs at least one pair feature"));
    }
    let stacked = tape.concat(pair_features, 0)?;
    if tape.shape(stacked)[0] != pair_features.len() {
        return Err(CmtcError::Shape("pair features must each hold one clip".into()));
    }
    let pooled = pool_and_average(tape, stacked, 1, pair_features.len())?;
    let e = neck.forward_eval(tape, store, pooled)?;
    let vector = tape.value(e).to_f64_vec();
    if vector.iter().any(|v| !v.is_finite()) {
        return Err(CmtcError::Shape("embedding has non-finite entries".into()));
    }
    Ok(ClipEmbedding {
        vector,
        person_id: meta.person_id,
        camera_id: meta.camera_id,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct ReidLoss {
    pub total: Var,
    pub ce: Var,
    pub triplet: Option<Var>,
}

const MASK_PENALTY: f64 = 1e4;

/// Mean over anchors of `relu(hardest positive - hardest negative + margin)`
/// on Euclidean distances. `None` when no anchor has both a positive and a
/// negative in the batch.
pub fn batch_hard_triplet<T: Scalar>(tape: &mut Tape<T>, x: Var, labels: &[usize], margin: f64) -> Result<Option<Var>> {
    let s = tape.shape(x).to_vec();
    let b = s[0];
    if labels.len() != b {
        return Err(CmtcError::Shape(format!("{} labels for a batch of {b}", labels.len())));
    }
    let mut pos_pen = vec![0.0; b * b];
    let mut neg_pen = vec![0.0; b * b];
    let mut valid = vec![0.0; b];
    for i in 0..b {
        let (mut has_p, mut has_n) = (false, false);
        for j in 0..b {
            let same = labels[i] == labels[j];
            pos_pen[i * b + j] = if same && i != j {
                has_p = true;
                0.0
            } else {
                -MASK_PENALTY
            };
            neg_pen[i * b + j] = if same {
                -MASK_PENALTY
            } else {
                has_n = true;
                0.0
            };
        }
        if has_p && has_n {
            valid[i] = 1.0;
        }
    }
    let n_valid: f64 = valid.iter().sum();
    if n_valid == 0.0 {
        return Ok(None);
    }
    let sq = tape.mul(x, x)?;
    let norms = tape.sum_axis(sq, 1, true)?;
    let norms_t = tape.transpose(norms, 0, 1)?;
    let xt = tape.transpose(x, 0, 1)?;
    let gram = tape.matmul(x, xt)?;
    let m2 = tape.scale(gram, -2.0);
    let d2 = tape.add(m2, norms)?;
    let d2 = tape.add(d2, norms_t)?;
    let d2 = tape.relu(d2);
    let d2 = tape.add_scalar(d2, 1e-12);
    let dist = tape.sqrt(d2);

    let pp = tape.constant(Tensor::from_f64(&[b, b], &pos_pen)?);
    let np = tape.constant(Tensor::from_f64(&[b, b], &neg_pen)?);
    let masked_p = tape.add(dist, pp)?;
    let hardest_p = tape.max_axis(masked_p, 1, false)?;
    let neg_d = tape.scale(dist, -1.0);
    let masked_n = tape.add(neg_d, np)?;
    let neg_hardest_n = tape.max_axis(masked_n, 1, false)?;
    // hardest_p - hardest_n + margin = hardest_p + (-hardest_n) + margin
    let gap = tape.add(hardest_p, neg_hardest_n)?;
    let gap = tape.add_scalar(gap, margin);
    let hinge = tape.relu(gap);
    let mask = tape.constant(Tensor::from_f64(&[b], &valid)?);
    let kept = tape.mul(hinge, mask)?;
    let total = tape.sum(kept);
    Ok(Some(tape.scale(total, 1.0 / n_valid)))
}

/// Identity cross-entropy plus batch-hard triplet on `features`.
pub fn reid_loss<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    logits: Var,
    labels: &[usize],
    margin: f64,
) -> Result<ReidLoss> {
    let ce = tape.cross_entropy(logits, labels)?;
    let distinct = {
        let mut l = labels.to_vec();
        l.sort_unstable();
        l.dedup();
        l.len()
    };
    let triplet = if distinct < 2 {
        log::warn!("batch holds {distinct} identity; triplet term skipped");
        None
    } else {
        batch_hard_triplet(tape, features, labels, margin)?
    };
    let total = match triplet {
        Some(t) => tape.add(ce, t)?,
        None => ce,
    };
    Ok(ReidLoss { total, ce, triplet })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn at(&self, q: usize, g: usize) -> f64 {
        self.data[q * self.cols + g]
    }
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// Euclidean distances between L2-normalized vectors.
pub fn distance_matrix(queries: &[Vec<f64>], gallery: &[Vec<f64>]) -> Result<DistanceMatrix> {
    if queries.is_empty() || gallery.is_empty() {
        return Err(config("distance matrix needs non-empty query and gallery sets"));
    }
    let d = queries[0].len();
    if let Some(bad) = queries.iter().chain(gallery).find(|v| v.len() != d) {
        return Err(CmtcError::Shape(format!("embedding dims differ: {d} vs {}", bad.len())));
    }
    let q: Vec<_> = queries.iter().map(|v| normalized(v)).collect();
    let g: Vec<_> = gallery.iter().map(|v| normalized(v)).collect();
    let mut data = Vec::with_capacity(q.len() * g.len());
    for a in &q {
        for b in &g {
            let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            data.push(s.sqrt());
        }
    }
    Ok(DistanceMatrix {
        rows: q.len(),
        cols: g.len(),
        data,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRanking {
    pub query: usize,
    /// Gallery indices in rank order, excluded entries removed.
    pub gallery: Vec<usize>,
    pub distances: Vec<f64>,
    pub correct: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub ks: Vec<usize>,
    /// CMC value at each of `ks`.
    pub cmc: Vec<f64>,
    pub valid_queries: usize,
    pub skipped_queries: usize,
    #[serde(skip)]
    pub rankings: Vec<QueryRanking>,
}

/// Cross-camera CMC and mAP. Gallery entries sharing both person and camera
/// with the query are ignored; ties rank by gallery index.
pub fn cmc_map(dist: &DistanceMatrix, query: &[ClipMeta], gallery: &[ClipMeta], ks: &[usize]) -> Result<EvalReport> {
    if dist.rows != query.len() || dist.cols != gallery.len() {
        return Err(CmtcError::Shape(format!(
            "distance matrix {}x{} does not match {} queries and {} gallery entries",
            dist.rows,
            dist.cols,
            query.len(),
            gallery.len()
        )));
    }
    let mut ks: Vec<usize> = ks.to_vec();
    for k in [1, 5, 10] {
        if !ks.contains(&k) {
            ks.push(k);
        }
    }
    ks.sort_unstable();
    let mut hits = vec![0usize; ks.len()];
    let (mut ap_sum, mut valid, mut skipped) = (0.0, 0, 0);
    let mut rankings = Vec::with_capacity(query.len());
    for (qi, q) in query.iter().enumerate() {
        let mut order: Vec<usize> = (0..gallery.len())
            .filter(|&g| !(gallery[g].person_id == q.person_id && gallery[g].camera_id == q.camera_id))
            .collect();
        order.sort_by(|&a, &b| dist.at(qi, a).total_cmp(&dist.at(qi, b)).then(a.cmp(&b)));
        let correct: Vec<bool> = order.iter().map(|&g| gallery[g].person_id == q.person_id).collect();
        let first = correct.iter().position(|&c| c);
        match first {
            None => skipped += 1,
            Some(first) => {
                valid += 1;
                for (h, &k) in hits.iter_mut().zip(&ks) {
                    if first < k {
                        *h += 1;
                    }
                }
                let (mut found, mut prec) = (0usize, 0.0);
                for (r, &c) in correct.iter().enumerate() {
                    if c {
                        found += 1;
                        prec += found as f64 / (r + 1) as f64;
                    }
                }
                ap_sum += prec / found as f64;
            }
        }
        rankings.push(QueryRanking {
            query: qi,
            distances: order.iter().map(|&g| dist.at(qi, g)).collect(),
            gallery: order,
            correct,
        });
    }
    if skipped > 0 {
        log::warn!("{skipped} queries have no cross-camera positive and were excluded");
    }
    let denom = valid.max(1) as f64;
    let cmc: Vec<f64> = hits.iter().map(|&h| h as f64 / denom).collect();
    let at = |k: usize| cmc[ks.iter().position(|&x| x == k).expect("k present")];
    Ok(EvalReport {
        rank1: at(1),
        rank5: at(5),
        rank10: at(10),
        map: ap_sum / denom,
        cmc: cmc.clone(),
        ks,
        valid_queries: valid,
        skipped_queries: skipped,
        rankings,
    })
}
