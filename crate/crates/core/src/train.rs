//! Experiment configuration, P x K training, evaluation, and run artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use cmtc_tensor::{Adam, AdamConfig, Checkpoint, ParamStore, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{config, io_err, CmtcError, Result};
use crate::eventnet::{contour_targets, loss_history_csv, pretrain_eventnet, stack_batch, PretrainConfig, PretrainSample};
use crate::reid::{cmc_map, distance_matrix, reid_loss, AblationConfig, CmtcModel, EvalReport, Mode, ModelConfig};
use crate::split::{protocol_split, ClipMeta, ProtocolSplit};
use crate::synth::SynthConfig;
use crate::voxel::{resize_frames, voxelize, FrameStack, VoxelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventNetMode {
    /// EventNet stays on the tape and is fine-tuned by the ReID loss.
    #[default]
    Joint,
    /// EventNet is fixed after pretraining; its outputs are computed once.
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    /// Identities per batch.
    pub p: usize,
    /// Clips per identity per batch.
    pub k: usize,
    pub margin: f64,
    pub eventnet_mode: EventNetMode,
    pub pretrain: PretrainConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            lr: 3e-4,
            decay_factor: 0.1,
            decay_every: 20,
            p: 4,
            k: 4,
            margin: 0.3,
            eventnet_mode: EventNetMode::Joint,
            pretrain: PretrainConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(config("epochs must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config("lr must be positive"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(config("decay_factor must lie in (0, 1]"));
        }
        if self.decay_every == 0 {
            return Err(config("decay_every must be positive"));
        }
        if self.p < 2 || self.k == 0 {
            return Err(config(format!("P x K batches need P >= 2 and K >= 1, got {} x {}", self.p, self.k)));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(config("margin must be non-negative"));
        }
        self.pretrain.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Smoke,
    Desk,
    Paper,
}

impl Preset {
    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "smoke" => Ok(Self::Smoke),
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            other => Err(config(format!("unknown preset '{other}', expected smoke, desk or paper"))),
        }
    }
}

/// Everything a run needs; serialized as the run's config snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub voxel: VoxelConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        let base = Self {
            seed: 0,
            synth: SynthConfig::default(),
            voxel: VoxelConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ablation: AblationConfig::FULL,
        };
        match p {
            Preset::Desk => base,
            Preset::Smoke => Self {
                synth: SynthConfig {
                    identities: 4,
                    clips_per_id_cam: 1,
                    ..base.synth
                },
                model: ModelConfig {
                    channels: 16,
                    ..base.model
                },
                train: TrainConfig {
                    epochs: 1,
                    p: 2,
                    k: 2,
                    pretrain: PretrainConfig {
                        epochs: 1,
                        ..base.train.pretrain
                    },
                    ..base.train
                },
                ..base
            },
            Preset::Paper => Self {
                synth: SynthConfig {
                    identities: 32,
                    width: 128,
                    height: 256,
                    ..base.synth
                },
                model: ModelConfig {
                    height: 256,
                    width: 128,
                    ..base.model
                },
                train: TrainConfig {
                    epochs: 400,
                    decay_every: 50,
                    p: 8,
                    k: 4,
                    ..base.train
                },
                ..base
            },
        }
    }

    /// Applies the run seed to every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self.train.pretrain.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.voxel.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.ablation.validate()?;
        if self.voxel.clip_len != self.model.clip_len {
            return Err(config(format!(
                "voxel clip_len {} differs from model clip_len {}",
                self.voxel.clip_len, self.model.clip_len
            )));
        }
        if self.synth.clip_len != self.voxel.clip_len || self.synth.t_window != self.voxel.t_window {
            return Err(config("synth clip_len/t_window must match the voxel settings"));
        }
        Ok(())
    }
}

/// Renders the synthetic corpus for `cfg` and prepares it for the network.
pub fn synth_clips(cfg: &ExperimentConfig) -> Result<Vec<PreparedClip>> {
    let data = crate::synth::synth_dataset(&cfg.synth)?;
    prepare_clips(&crate::dataset::from_synth(&data), &cfg.voxel, &cfg.model)
}

/// Network-ready clip.
#[derive(Debug, Clone)]
pub struct PreparedClip {
    pub source_id: String,
    pub meta: ClipMeta,
    /// `[T, 2, H, W]`.
    pub frames: Tensor<f32>,
    /// `[T, 1, H, W]` contour targets, when masks exist.
    pub targets: Option<Tensor<f32>>,
}

pub fn prepare_clips(data: &Dataset, voxel: &VoxelConfig, model: &ModelConfig) -> Result<Vec<PreparedClip>> {
    data.clips
        .iter()
        .map(|c| {
            let mut stack: FrameStack<f32> = voxelize(&c.stream, voxel)?;
            stack.source_id = c.source_id.clone();
            stack.person_id = c.meta.person_id;
            stack.camera_id = c.meta.camera_id;
            let stack = resize_frames(&stack, model.height, model.width)?;
            let targets = match &c.masks {
                None => None,
                Some(m) => {
                    if m.shape()[0] < voxel.clip_len {
                        return Err(CmtcError::Manifest(format!(
                            "{}: {} masks for {} frames",
                            c.source_id,
                            m.shape()[0],
                            voxel.clip_len
                        )));
                    }
                    let m = m.narrow(0, 0, voxel.clip_len)?;
                    let t = contour_targets(&m)?;
                    let t = if t.shape()[2..] == [model.height, model.width] {
                        t
                    } else {
                        let fs = FrameStack {
                            frames: t,
                            t_window: voxel.t_window,
                            source_id: String::new(),
                            person_id: 0,
                            camera_id: 0,
                        };
                        resize_frames(&fs, model.height, model.width)?.frames
                    };
                    Some(t)
                }
            };
            Ok(PreparedClip {
                source_id: c.source_id.clone(),
                meta: c.meta,
                frames: stack.frames,
                targets,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub triplet: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
}

impl EpochRow {
    const FIELDS: usize = 9;

    fn to_vec(self) -> [f64; Self::FIELDS] {
        [
            self.epoch as f64,
            self.lr,
            self.loss,
            self.ce,
            self.triplet,
            self.rank1,
            self.rank5,
            self.rank10,
            self.map,
        ]
    }

    fn from_slice(v: &[f64]) -> Self {
        Self {
            epoch: v[0] as usize,
            lr: v[1],
            loss: v[2],
            ce: v[3],
            triplet: v[4],
            rank1: v[5],
            rank5: v[6],
            rank10: v[7],
            map: v[8],
        }
    }
}

pub fn history_csv(rows: &[EpochRow]) -> String {
    let mut s = String::from("epoch,lr,loss,ce,triplet,rank1,rank5,rank10,map\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{},{},{},{}\n",
            r.epoch, r.lr, r.loss, r.ce, r.triplet, r.rank1, r.rank5, r.rank10, r.map
        ));
    }
    s
}

/// Identity-balanced batches for one epoch, a pure function of
/// `(seed, epoch)`. Identities with fewer than `k` clips repeat clips.
pub fn epoch_batches(train: &[usize], clips: &[PreparedClip], p: usize, k: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(epoch as u64 + 1));
    let mut ids: Vec<u32> = train.iter().map(|&i| clips[i].meta.person_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let p = p.min(ids.len());
    let n_batches = (train.len() / (p * k)).max(1);
    let mut id_queue: Vec<u32> = Vec::new();
    let mut batches = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let mut chosen = Vec::with_capacity(p);
        while chosen.len() < p {
            if id_queue.is_empty() {
                id_queue = ids.clone();
                id_queue.shuffle(&mut rng);
            }
            let id = id_queue.pop().expect("refilled");
            if !chosen.contains(&id) {
                chosen.push(id);
            }
        }
        let mut batch = Vec::with_capacity(p * k);
        for id in chosen {
            let mut own: Vec<usize> = train.iter().copied().filter(|&i| clips[i].meta.person_id == id).collect();
            own.shuffle(&mut rng);
            batch.extend((0..k).map(|j| own[j % own.len()]));
        }
        batches.push(batch);
    }
    batches
}

/// Trained model plus its parameters.
pub struct Trained {
    pub model: CmtcModel,
    pub store: ParamStore<f32>,
}

pub struct TrainOutcome {
    pub trained: Trained,
    pub history: Vec<EpochRow>,
    pub eventnet_history: Vec<crate::eventnet::LossRow>,
    pub report: EvalReport,
}

const CHECKPOINT: &str = "checkpoint.cmtc";
const EVAL_CHUNK: usize = 8;

fn frozen_aux(model: &CmtcModel, store: &ParamStore<f32>, clips: &[PreparedClip]) -> Result<Option<Vec<Tensor<f32>>>> {
    match &model.eventnet {
        None => Ok(None),
        Some(net) => clips
            .iter()
            .map(|c| net.infer(store, &c.frames))
            .collect::<Result<Vec<_>>>()
            .map(Some),
    }
}

/// Post-neck embeddings (eval mode) for the given clips.
pub fn embed(
    model: &CmtcModel,
    store: &ParamStore<f32>,
    clips: &[PreparedClip],
    indices: &[usize],
    aux_cache: Option<&[Tensor<f32>]>,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let frames = stack_batch(&chunk.iter().map(|&i| &clips[i].frames).collect::<Vec<_>>())?;
        let fv = tape.constant(frames);
        let aux = match aux_cache {
            Some(cache) => Some(tape.constant(stack_batch(&chunk.iter().map(|&i| &cache[i]).collect::<Vec<_>>())?)),
            None => None,
        };
        let f = model.forward(&mut tape, store, fv, aux, chunk.len(), Mode::Eval)?;
        let e = tape.value(f.embedding);
        let d = e.shape()[1];
        out.extend(e.to_f64_vec().chunks(d).map(<[f64]>::to_vec));
    }
    Ok(out)
}

pub struct Evaluation {
    pub report: EvalReport,
    pub query_embeddings: Vec<Vec<f64>>,
    pub gallery_embeddings: Vec<Vec<f64>>,
}

pub fn evaluate(
    trained: &Trained,
    clips: &[PreparedClip],
    split: &ProtocolSplit,
    aux_cache: Option<&[Tensor<f32>]>,
) -> Result<Evaluation> {
    if split.query.is_empty() || split.gallery.is_empty() {
        return Err(config("evaluation needs non-empty query and gallery sets"));
    }
    let q = embed(&trained.model, &trained.store, clips, &split.query, aux_cache)?;
    let g = embed(&trained.model, &trained.store, clips, &split.gallery, aux_cache)?;
    let dist = distance_matrix(&q, &g)?;
    let qm: Vec<_> = split.query.iter().map(|&i| clips[i].meta).collect();
    let gm: Vec<_> = split.gallery.iter().map(|&i| clips[i].meta).collect();
    let report = cmc_map(&dist, &qm, &gm, &[1, 5, 10])?;
    Ok(Evaluation {
        report,
        query_embeddings: q,
        gallery_embeddings: g,
    })
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

/// Report JSON/CSV, top-10 rankings, and raw embeddings.
pub fn write_eval_artifacts(dir: &Path, ev: &Evaluation, clips: &[PreparedClip], split: &ProtocolSplit) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let r = &ev.report;
    let mut json = serde_json::to_string_pretty(r).map_err(|e| CmtcError::Manifest(e.to_string()))?;
    json.push('\n');
    write(&dir.join("report.json"), json)?;
    write(
        &dir.join("report.csv"),
        format!(
            "rank1,rank5,rank10,map,valid_queries,skipped_queries\n{},{},{},{},{},{}\n",
            r.rank1, r.rank5, r.rank10, r.map, r.valid_queries, r.skipped_queries
        ),
    )?;
    let mut rk = String::from("query_id,rank,gallery_id,distance,correct\n");
    for q in &r.rankings {
        let qid = &clips[split.query[q.query]].source_id;
        for (rank, ((&g, &d), &c)) in q.gallery.iter().zip(&q.distances).zip(&q.correct).take(10).enumerate() {
            rk.push_str(&format!("{qid},{},{},{d:.9},{c}\n", rank + 1, clips[split.gallery[g]].source_id));
        }
    }
    write(&dir.join("rankings.csv"), rk)?;
    let mut ck = Checkpoint::new();
    for (name, embs, idx) in [
        ("query", &ev.query_embeddings, &split.query),
        ("gallery", &ev.gallery_embeddings, &split.gallery),
    ] {
        let d = embs.first().map_or(0, Vec::len);
        let flat: Vec<f64> = embs.iter().flatten().copied().collect();
        ck.insert(format!("{name}.embeddings"), &Tensor::new(vec![embs.len(), d], flat)?);
        let pid: Vec<f64> = idx.iter().map(|&i| clips[i].meta.person_id as f64).collect();
        let cid: Vec<f64> = idx.iter().map(|&i| clips[i].meta.camera_id as f64).collect();
        ck.insert(format!("{name}.person_id"), &Tensor::new(vec![idx.len()], pid)?);
        ck.insert(format!("{name}.camera_id"), &Tensor::new(vec![idx.len()], cid)?);
    }
    ck.save(dir.join("embeddings.cmtc"))?;
    Ok(())
}

/// Builds an untrained model for `cfg` with the label count of `split`.
pub fn build_model(cfg: &ExperimentConfig, split: &ProtocolSplit) -> Result<Trained> {
    let mut store = ParamStore::new();
    let model = CmtcModel::new(&mut store, cfg.model, cfg.ablation, split.train_ids.len(), cfg.seed)?;
    if cfg.ablation.use_eventnet && cfg.train.eventnet_mode == EventNetMode::Frozen {
        store.set_trainable_prefix(crate::eventnet::EVENTNET_PREFIX, false);
    }
    Ok(Trained { model, store })
}

pub fn split_for(cfg: &ExperimentConfig, clips: &[PreparedClip]) -> Result<ProtocolSplit> {
    let metas: Vec<ClipMeta> = clips.iter().map(|c| c.meta).collect();
    protocol_split(&metas, cfg.seed)
}

fn adam_config(t: &TrainConfig) -> AdamConfig {
    AdamConfig {
        lr: t.lr,
        decay_factor: t.decay_factor,
        decay_every: t.decay_every,
        ..AdamConfig::default()
    }
}

fn save_checkpoint(
    path: &Path,
    trained: &Trained,
    opt: &Adam<f32>,
    history: &[EpochRow],
    pretrain: &[crate::eventnet::LossRow],
) -> Result<()> {
    let mut ck = Checkpoint::from_store(&trained.store);
    for (name, t) in opt.export(&trained.store) {
        ck.insert(name, &t);
    }
    let flat: Vec<f64> = history.iter().flat_map(|r| r.to_vec()).collect();
    ck.insert("run.epochs_done", &Tensor::scalar(history.len() as f64));
    if !history.is_empty() {
        ck.insert("run.history", &Tensor::new(vec![history.len(), EpochRow::FIELDS], flat)?);
    }
    if !pretrain.is_empty() {
        let p: Vec<f64> = pretrain
            .iter()
            .flat_map(|r| [r.epoch as f64, r.mse, r.perceptual, r.total])
            .collect();
        ck.insert("run.pretrain", &Tensor::new(vec![pretrain.len(), 4], p)?);
    }
    let tmp = path.with_extension("tmp");
    ck.save(&tmp)?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

type Restored = (Vec<EpochRow>, Vec<crate::eventnet::LossRow>);

fn load_checkpoint(path: &Path, trained: &mut Trained, opt: &mut Adam<f32>) -> Result<Restored> {
    let ck = Checkpoint::load(path)?;
    ck.load_into(&mut trained.store)?;
    opt.import(&trained.store, |n| ck.tensor::<f32>(n).ok())?;
    let done = ck.tensor::<f64>("run.epochs_done")?.item() as usize;
    let history = if done > 0 {
        let h = ck.tensor::<f64>("run.history")?;
        h.data().chunks(EpochRow::FIELDS).map(EpochRow::from_slice).collect()
    } else {
        Vec::new()
    };
    let pretrain = match ck.tensor::<f64>("run.pretrain") {
        Ok(p) => p
            .data()
            .chunks(4)
            .map(|r| crate::eventnet::LossRow {
                epoch: r[0] as usize,
                mse: r[1],
                perceptual: r[2],
                total: r[3],
            })
            .collect(),
        Err(_) => Vec::new(),
    };
    Ok((history, pretrain))
}

pub struct TrainOptions<'a> {
    /// Run directory for checkpoints and metrics; `None` keeps everything in memory.
    pub out: Option<&'a Path>,
    /// Stop after this many epochs in total (for interrupted-run tests).
    pub stop_after: Option<usize>,
}

/// Trains per `cfg`, evaluating on the test split after every epoch.
/// Resumes from `out/checkpoint.cmtc` when present.
pub fn train(cfg: &ExperimentConfig, clips: &[PreparedClip], split: &ProtocolSplit, opts: TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(config("training split is empty"));
    }
    let mut trained = build_model(cfg, split)?;
    let mut opt = Adam::new(adam_config(&cfg.train), &trained.store);
    let labels: Vec<u32> = split.train_ids.clone();
    let label_of = |pid: u32| labels.binary_search(&pid).expect("train identity");

    let ck_path: Option<PathBuf> = opts.out.map(|d| d.join(CHECKPOINT));
    if let Some(d) = opts.out {
        fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let (mut history, mut pretrain_rows) = match &ck_path {
        Some(p) if p.exists() => {
            log::info!("resuming from {}", p.display());
            load_checkpoint(p, &mut trained, &mut opt)?
        }
        _ => (Vec::new(), Vec::new()),
    };

    if history.is_empty() && pretrain_rows.is_empty() && cfg.ablation.use_eventnet && cfg.train.pretrain.epochs > 0 {
        let samples: Vec<PretrainSample<f32>> = split
            .train
            .iter()
            .filter_map(|&i| {
                clips[i].targets.as_ref().map(|t| PretrainSample {
                    frames: clips[i].frames.clone(),
                    targets: t.clone(),
                })
            })
            .collect();
        if samples.is_empty() {
            return Err(config("EventNet pretraining needs silhouette masks in the dataset"));
        }
        let net = trained.model.eventnet.clone().expect("eventnet present");
        // Pretraining ignores the frozen flag: EventNet must be trained before it is fixed.
        trained.store.set_trainable_prefix(crate::eventnet::EVENTNET_PREFIX, true);
        pretrain_rows = pretrain_eventnet(&net, &mut trained.store, &samples, &cfg.train.pretrain, None)?;
        if cfg.train.eventnet_mode == EventNetMode::Frozen {
            trained.store.set_trainable_prefix(crate::eventnet::EVENTNET_PREFIX, false);
        }
        if let Some(d) = opts.out {
            write(&d.join("eventnet_loss.csv"), loss_history_csv(&pretrain_rows))?;
        }
    }

    let frozen = cfg.train.eventnet_mode == EventNetMode::Frozen;
    let aux_cache = if frozen {
        frozen_aux(&trained.model, &trained.store, clips)?
    } else {
        None
    };

    let target_epochs = opts.stop_after.map_or(cfg.train.epochs, |s| s.min(cfg.train.epochs));
    let mut step = history.len() * epoch_batches(&split.train, clips, cfg.train.p, cfg.train.k, cfg.seed, 0).len();
    for epoch in history.len()..target_epochs {
        opt.set_epoch(epoch);
        let batches = epoch_batches(&split.train, clips, cfg.train.p, cfg.train.k, cfg.seed, epoch);
        let (mut sum, mut sum_ce, mut sum_tri) = (0.0, 0.0, 0.0);
        for batch in &batches {
            let mut tape = Tape::new();
            let frames = stack_batch(&batch.iter().map(|&i| &clips[i].frames).collect::<Vec<_>>())?;
            let fv = tape.constant(frames);
            let aux = match &aux_cache {
                Some(cache) => Some(tape.constant(stack_batch(&batch.iter().map(|&i| &cache[i]).collect::<Vec<_>>())?)),
                None => None,
            };
            let out = trained.model.forward(&mut tape, &trained.store, fv, aux, batch.len(), Mode::Train)?;
            let y: Vec<usize> = batch.iter().map(|&i| label_of(clips[i].meta.person_id)).collect();
            let loss = reid_loss(&mut tape, out.features, out.logits, &y, cfg.train.margin)?;
            let lv = tape.value(loss.total).item() as f64;
            if !lv.is_finite() {
                return Err(CmtcError::Divergence { step });
            }
            sum += lv;
            sum_ce += tape.value(loss.ce).item() as f64;
            sum_tri += loss.triplet.map_or(0.0, |t| tape.value(t).item() as f64);
            tape.backward(loss.total)?;
            trained.store.zero_grad();
            trained.store.pull_grads(&tape);
            opt.step(&mut trained.store).map_err(|_| CmtcError::Divergence { step })?;
            if let Some((m, v)) = &out.neck_stats {
                trained.model.neck.update_running(&mut trained.store, m, v, batch.len());
            }
            step += 1;
        }
        let n = batches.len() as f64;
        let ev = evaluate(&trained, clips, split, aux_cache.as_deref())?;
        let row = EpochRow {
            epoch,
            lr: opt.lr(),
            loss: sum / n,
            ce: sum_ce / n,
            triplet: sum_tri / n,
            rank1: ev.report.rank1,
            rank5: ev.report.rank5,
            rank10: ev.report.rank10,
            map: ev.report.map,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} rank1 {:.3} mAP {:.3}",
            row.loss,
            row.rank1,
            row.map
        );
        history.push(row);
        if let (Some(d), Some(p)) = (opts.out, &ck_path) {
            save_checkpoint(p, &trained, &opt, &history, &pretrain_rows)?;
            write(&d.join("history.csv"), history_csv(&history))?;
        }
    }

    let ev = evaluate(&trained, clips, split, aux_cache.as_deref())?;
    if let Some(d) = opts.out {
        Checkpoint::from_store(&trained.store).save(d.join("model.cmtc"))?;
        write(&d.join("history.csv"), history_csv(&history))?;
        if !pretrain_rows.is_empty() {
            write(&d.join("eventnet_loss.csv"), loss_history_csv(&pretrain_rows))?;
        }
        write_eval_artifacts(&d.join("eval"), &ev, clips, split)?;
    }
    Ok(TrainOutcome {
        trained,
        history,
        eventnet_history: pretrain_rows,
        report: ev.report,
    })
}

/// Restores a model saved by [`train`] (either `model.cmtc` or a checkpoint).
pub fn load_trained(cfg: &ExperimentConfig, split: &ProtocolSplit, path: &Path) -> Result<Trained> {
    if !path.exists() {
        return Err(CmtcError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
        });
    }
    let mut t = build_model(cfg, split)?;
    Checkpoint::load(path)?.load_into(&mut t.store)?;
    Ok(t)
}

/// Evaluates a restored model and writes its artifacts into `dir`.
pub fn evaluate_to_dir(trained: &Trained, cfg: &ExperimentConfig, clips: &[PreparedClip], split: &ProtocolSplit, dir: &Path) -> Result<EvalReport> {
    let cache = if cfg.train.eventnet_mode == EventNetMode::Frozen {
        frozen_aux(&trained.model, &trained.store, clips)?
    } else {
        None
    };
    let ev = evaluate(trained, clips, split, cache.as_deref())?;
    write_eval_artifacts(dir, &ev, clips, split)?;
    Ok(ev.report)
}
