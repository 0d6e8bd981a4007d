//! Training stages: single-frame pretraining, moment-token initialisation,
//! and fine-tuning of every variant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action_expert::{self, chunk_loss, predict_chunk};
use crate::backbone::{self, tokenize, Frame, TokenSequence};
use crate::bundle::{BundleMeta, Mode, PolicyBundle, Stage};
use crate::env::{chunk_at, Action, ProprioState, Trajectory};
use crate::error::{Error, Result};
use crate::memory::{self, augment_observation, AugmentConfig, MemoryConfig};
use crate::nn;
use crate::policy::history_input;
use crate::tensor::{AdamConfig, Graph, ParamRegistry, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
}

impl StageConfig {
    pub fn new(steps: usize) -> Self {
        Self {
            steps,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch == 0 || !(self.lr > 0.0) {
            return Err(Error::config("batch and lr must be positive"));
        }
        Ok(())
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            lr: 1e-3,
            batch: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct TclConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub tau: f64,
    pub d_proj: usize,
    pub augment: AugmentConfig,
}

impl Default for TclConfig {
    fn default() -> Self {
        Self {
            steps: 5_000,
            lr: 1e-3,
            batch: 32,
            tau: 0.1,
            d_proj: 32,
            augment: AugmentConfig::default(),
        }
    }
}

/// One fine-tuning recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct VariantSpec {
    pub mode: Mode,
    pub n_moment: usize,
    pub history: usize,
    pub chunk: usize,
    pub memory_layers: usize,
    pub freeze_backbone: bool,
    pub freeze_moments: bool,
    pub use_tcl_init: bool,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for VariantSpec {
    fn default() -> Self {
        Self {
            mode: Mode::Hamlet,
            n_moment: 4,
            history: 4,
            chunk: 4,
            memory_layers: 2,
            freeze_backbone: true,
            freeze_moments: true,
            use_tcl_init: true,
            steps: 10_000,
            lr: 1e-3,
            batch: 32,
            seed: 0,
        }
    }
}

impl VariantSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_moment == 0 || self.history == 0 || self.chunk == 0 || self.memory_layers == 0 {
            return Err(Error::config("n_moment, history, chunk and memory_layers must be positive"));
        }
        if self.batch == 0 || !(self.lr > 0.0) {
            return Err(Error::config("batch and lr must be positive"));
        }
        Ok(())
    }

    pub fn stage(&self) -> StageConfig {
        StageConfig {
            steps: self.steps,
            lr: self.lr,
            batch: self.batch,
        }
    }

    pub fn memory_config(&self, d_model: usize) -> MemoryConfig {
        MemoryConfig {
            d_model,
            layers: self.memory_layers,
            n_moment: self.n_moment,
            history: self.history,
            ..MemoryConfig::default()
        }
    }

    /// Short label used in reports.
    pub fn label(&self) -> String {
        let mut s = self.mode.name().to_string();
        if self.mode.uses_moments() && !self.use_tcl_init {
            s.push_str("_no_tcl");
        }
        if !self.freeze_backbone || !self.freeze_moments {
            s.push_str("_unfrozen");
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: Stage,
    pub mode: Mode,
    pub losses: Vec<f64>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Chunk-aligned `(trajectory, timestep)` pairs.
pub fn aligned_samples(trajs: &[Trajectory], k: usize) -> Vec<(usize, usize)> {
    trajs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).step_by(k.max(1)).map(move |s| (i, s)))
        .collect()
}

fn require_demos(trajs: &[Trajectory]) -> Result<()> {
    if trajs.is_empty() || trajs.iter().any(Trajectory::is_empty) {
        return Err(Error::config("demonstrations must be non-empty"));
    }
    Ok(())
}

fn targets(trajs: &[Trajectory], batch: &[(usize, usize)], k: usize) -> Vec<Action> {
    batch.iter().flat_map(|&(i, t)| chunk_at(&trajs[i], t, k)).collect()
}

fn proprios(trajs: &[Trajectory], batch: &[(usize, usize)]) -> Vec<ProprioState> {
    batch.iter().map(|&(i, t)| trajs[i].steps[t].proprio).collect()
}

fn sequence(meta_backbone: &backbone::BackboneConfig, traj: &Trajectory, t: usize, n_moment: usize, history: &[Frame]) -> Result<TokenSequence> {
    let s = &traj.steps[t];
    tokenize(meta_backbone, &s.obs, &s.proprio, &traj.instruction, n_moment, history)
}

/// Loss check plus one Adam step on the trainable parameters.
fn update(g: &mut Graph, reg: &mut ParamRegistry, loss: Var, adam: &AdamConfig, step: usize) -> Result<f64> {
    let value = g.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::Diverged {
            step,
            detail: format!("loss is {value}"),
        });
    }
    let grads = g.backward(loss)?;
    reg.adam_step(&grads, adam, step as u64)?;
    Ok(value)
}

fn check_frozen(reg: &ParamRegistry, snaps: &[(String, Tensor)]) -> Result<()> {
    let drifted = reg.drifted(snaps);
    if drifted.is_empty() {
        Ok(())
    } else {
        Err(Error::Contract(format!("frozen parameters changed: {}", drifted.join(", "))))
    }
}

fn sample_batch(rng: &mut ChaCha8Rng, samples: &[(usize, usize)], batch: usize) -> Vec<(usize, usize)> {
    (0..batch).map(|_| samples[rng.random_range(0..samples.len())]).collect()
}

/// Behavioural cloning of expert chunks from single frames. Returns the
/// first-stage policy and its per-step loss.
pub fn pretrain_single_frame(
    trajs: &[Trajectory],
    backbone_cfg: &backbone::BackboneConfig,
    mem: &MemoryConfig,
    chunk: usize,
    cfg: &StageConfig,
    seed: u64,
) -> Result<(PolicyBundle, TrainLog)> {
    require_demos(trajs)?;
    cfg.validate()?;
    let mut tasks: Vec<_> = trajs.iter().map(|t| t.task).collect();
    tasks.sort();
    tasks.dedup();
    let mut bundle = PolicyBundle::init_stage1(backbone_cfg, mem, chunk, &tasks, seed)?;
    let samples = aligned_samples(trajs, chunk);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5151);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch = sample_batch(&mut rng, &samples, cfg.batch);
        let seqs = batch
            .iter()
            .map(|&(i, t)| sequence(backbone_cfg, &trajs[i], t, 0, &[]))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new();
        let enc = backbone::encode(&mut g, &bundle.params, backbone_cfg, &seqs, None)?;
        let logits = predict_chunk(&mut g, &bundle.params, &bundle.meta.expert, enc.h, None, &proprios(trajs, &batch))?;
        let loss = chunk_loss(&mut g, logits, &targets(trajs, &batch, chunk))?;
        losses.push(update(&mut g, &mut bundle.params, loss, &adam, step)?);
    }
    Ok((
        bundle,
        TrainLog {
            stage: Stage::Stage1,
            mode: Mode::SingleFrame,
            losses,
        },
    ))
}

/// Anchor, positive and negative sequences of one contrastive batch.
fn tcl_batch(
    rng: &mut ChaCha8Rng,
    trajs: &[Trajectory],
    meta: &BundleMeta,
    batch: usize,
    augment: &AugmentConfig,
) -> Result<Vec<TokenSequence>> {
    let k = meta.chunk();
    let n_m = meta.memory.n_moment;
    let eligible: Vec<usize> = (0..trajs.len()).filter(|&i| trajs[i].len() > k).collect();
    if eligible.is_empty() {
        return Err(Error::config("no trajectory is long enough for a negative at distance k"));
    }
    let (mut anchors, mut positives, mut negatives) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..batch {
        let i = eligible[rng.random_range(0..eligible.len())];
        let traj = &trajs[i];
        let len = traj.len();
        let t = rng.random_range(0..len);
        let far: Vec<usize> = (0..len).filter(|&u| u.abs_diff(t) >= k).collect();
        let (t, far) = if far.is_empty() {
            (0, (k..len).collect::<Vec<_>>())
        } else {
            (t, far)
        };
        let t_neg = far[rng.random_range(0..far.len())];
        let anchor = sequence(&meta.backbone, traj, t, n_m, &[])?;
        let view = augment_observation(&traj.steps[t].obs, rng, augment);
        let mut pos = tokenize(&meta.backbone, &view.obs, &traj.steps[t].proprio, &traj.instruction, n_m, &[])?;
        pos.jitter = view.jitter;
        negatives.push(sequence(&meta.backbone, traj, t_neg, n_m, &[])?);
        anchors.push(anchor);
        positives.push(pos);
    }
    anchors.extend(positives);
    anchors.extend(negatives);
    Ok(anchors)
}

fn tcl_projections(g: &mut Graph, bundle: &PolicyBundle, seqs: &[TokenSequence]) -> Result<(Var, Var, Var)> {
    let meta = &bundle.meta;
    let prefix = backbone::encode_prefix(&bundle.params, &meta.backbone, seqs)?;
    let m = nn::param(g, &bundle.params, memory::MOMENT_TOKENS)?;
    let (moments, _) = backbone::encode_moments(g, &bundle.params, &meta.backbone, &prefix, m)?;
    let z = memory::project(g, &bundle.params, moments, meta.memory.n_moment)?;
    let b = seqs.len() / 3;
    Ok((g.slice_rows(z, 0, b)?, g.slice_rows(z, b, 2 * b)?, g.slice_rows(z, 2 * b, 3 * b)?))
}

/// Time-contrastive training of fresh moment tokens and projection head on
/// a frozen first-stage policy.
pub fn train_moment_tokens(stage1: &PolicyBundle, trajs: &[Trajectory], cfg: &TclConfig, seed: u64) -> Result<(PolicyBundle, TrainLog)> {
    require_demos(trajs)?;
    if cfg.batch == 0 || !(cfg.lr > 0.0) || cfg.d_proj == 0 {
        return Err(Error::config("TCL batch, lr and d_proj must be positive"));
    }
    let mut bundle = stage1.clone();
    bundle.meta.stage = Stage::Stage2;
    let d = bundle.meta.backbone.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7c1);
    for name in [memory::MOMENT_TOKENS] {
        if bundle.params.contains(name) {
            return Err(Error::config("first-stage bundle already carries moment tokens"));
        }
    }
    memory::init_moment_tokens(&mut bundle.params, &mut rng, bundle.meta.memory.n_moment, d)?;
    memory::init_projection(&mut bundle.params, &mut rng, d, cfg.d_proj)?;
    bundle.params.set_frozen_prefix(backbone::PREFIX, true);
    bundle.params.set_frozen_prefix(action_expert::PREFIX, true);
    let frozen = bundle.params.snapshot(backbone::PREFIX);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let seqs = tcl_batch(&mut rng, trajs, &bundle.meta, cfg.batch, &cfg.augment)?;
        let mut g = Graph::new();
        let (z, zp, zn) = tcl_projections(&mut g, &bundle, &seqs)?;
        let loss = memory::tcl_loss(&mut g, z, zp, zn, cfg.tau)?;
        losses.push(update(&mut g, &mut bundle.params, loss, &adam, step)?);
    }
    check_frozen(&bundle.params, &frozen)?;
    Ok((
        bundle,
        TrainLog {
            stage: Stage::Stage2,
            mode: Mode::SingleFrame,
            losses,
        },
    ))
}

/// Mean `sim(z, z⁺) − sim(z, z⁻)` over seeded anchors drawn like training
/// batches.
pub fn tcl_margin(stage2: &PolicyBundle, trajs: &[Trajectory], anchors: usize, augment: &AugmentConfig, seed: u64) -> Result<f64> {
    require_demos(trajs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3a3a);
    let mut total = 0.0;
    let mut count = 0;
    let chunk = 64;
    while count < anchors {
        let b = chunk.min(anchors - count);
        let seqs = tcl_batch(&mut rng, trajs, &stage2.meta, b, augment)?;
        let mut g = Graph::new();
        let (z, zp, zn) = tcl_projections(&mut g, stage2, &seqs)?;
        let sp = g.cosine_similarity(z, zp)?;
        let sn = g.cosine_similarity(z, zn)?;
        let (sp, sn) = (g.value(sp), g.value(sn));
        total += sp.data().iter().zip(sn.data()).map(|(p, n)| (p - n) as f64).sum::<f64>();
        count += b;
    }
    Ok(total / anchors as f64)
}

/// Readout states and moment outputs of frozen frames, keyed by
/// chunk-aligned `(trajectory, timestep)`.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    k: usize,
    d: usize,
    n_moment: usize,
    offsets: Vec<usize>,
    h: Vec<f32>,
    moments: Vec<f32>,
}

impl FeatureCache {
    /// Encodes every chunk-aligned frame once with the bundle's backbone (and
    /// moment tokens when `n_moment > 0`).
    pub fn build(bundle: &PolicyBundle, trajs: &[Trajectory], n_moment: usize) -> Result<Self> {
        let meta = &bundle.meta;
        let k = meta.chunk();
        let d = meta.backbone.d_model;
        let samples = aligned_samples(trajs, k);
        let mut offsets = Vec::with_capacity(trajs.len());
        let mut acc = 0;
        for t in trajs {
            offsets.push(acc);
            acc += t.len().div_ceil(k);
        }
        let mut h = Vec::with_capacity(samples.len() * d);
        let mut moments = Vec::with_capacity(samples.len() * n_moment * d);
        for part in samples.chunks(64) {
            let seqs = part
                .iter()
                .map(|&(i, t)| sequence(&meta.backbone, &trajs[i], t, n_moment, &[]))
                .collect::<Result<Vec<_>>>()?;
            let mut g = Graph::new();
            let m = if n_moment > 0 {
                Some(nn::param(&mut g, &bundle.params, memory::MOMENT_TOKENS)?)
            } else {
                None
            };
            let enc = backbone::encode(&mut g, &bundle.params, &meta.backbone, &seqs, m)?;
            h.extend_from_slice(g.value(enc.h).data());
            if let Some(mv) = enc.moments {
                moments.extend_from_slice(g.value(mv).data());
            }
        }
        Ok(Self {
            k,
            d,
            n_moment,
            offsets,
            h,
            moments,
        })
    }

    fn index(&self, traj: usize, t: usize) -> usize {
        self.offsets[traj] + t / self.k
    }

    pub fn h(&self, traj: usize, t: usize) -> &[f32] {
        let i = self.index(traj, t);
        &self.h[i * self.d..(i + 1) * self.d]
    }

    pub fn moments(&self, traj: usize, t: usize) -> &[f32] {
        let i = self.index(traj, t);
        let w = self.n_moment * self.d;
        &self.moments[i * w..(i + 1) * w]
    }
}

/// Timesteps of the history window ending at `t`, oldest first.
pub fn window_steps(mode: Mode, history: usize, k: usize, t: usize) -> Vec<usize> {
    let j = t / k;
    let first = if mode.cell().is_some() { 0 } else { (j + 1).saturating_sub(history) };
    (first..=j).map(|i| i * k).collect()
}

/// Frames one training batch needs, with each sample's window as indices
/// into that list.
struct BatchFrames {
    frames: Vec<(usize, usize)>,
    windows: Vec<Vec<usize>>,
    current: Vec<usize>,
}

fn batch_frames(mode: Mode, history: usize, k: usize, batch: &[(usize, usize)]) -> BatchFrames {
    let mut frames = Vec::new();
    let mut windows = Vec::with_capacity(batch.len());
    let mut current = Vec::with_capacity(batch.len());
    for &(i, t) in batch {
        let steps = if mode.uses_moments() {
            window_steps(mode, history, k, t)
        } else {
            vec![t]
        };
        let start = frames.len();
        frames.extend(steps.iter().map(|&s| (i, s)));
        windows.push((start..frames.len()).collect());
        current.push(frames.len() - 1);
    }
    BatchFrames { frames, windows, current }
}

/// Readout and history input for a batch, from cached features or, when the
/// backbone or moment tokens train, from a fresh differentiable encoding.
fn batch_inputs(
    g: &mut Graph,
    bundle: &PolicyBundle,
    trajs: &[Trajectory],
    cache: Option<&FeatureCache>,
    bf: &BatchFrames,
) -> Result<(Var, Option<Var>)> {
    let meta = &bundle.meta;
    let d = meta.backbone.d_model;
    let n_m = meta.memory.n_moment;
    let moments = meta.mode.uses_moments();
    let (hall, pool) = match cache {
        Some(c) => {
            let h: Vec<f32> = bf.current.iter().flat_map(|&f| {
                let (i, t) = bf.frames[f];
                c.h(i, t).iter().copied()
            }).collect();
            let h = g.constant(Tensor::new(vec![bf.current.len(), d], h)?);
            let pool = if moments {
                let m: Vec<f32> = bf.frames.iter().flat_map(|&(i, t)| c.moments(i, t).iter().copied()).collect();
                Some(g.constant(Tensor::new(vec![bf.frames.len() * n_m, d], m)?))
            } else {
                None
            };
            (h, pool)
        }
        None => {
            let seqs = bf
                .frames
                .iter()
                .map(|&(i, t)| sequence(&meta.backbone, &trajs[i], t, if moments { n_m } else { 0 }, &[]))
                .collect::<Result<Vec<_>>>()?;
            let m = if moments {
                Some(nn::param(g, &bundle.params, memory::MOMENT_TOKENS)?)
            } else {
                None
            };
            let enc = backbone::encode(g, &bundle.params, &meta.backbone, &seqs, m)?;
            (g.embedding_gather(enc.h, &bf.current)?, enc.moments)
        }
    };
    let hist = match pool {
        Some(pool) => Some(history_input(g, &bundle.params, meta, pool, &bf.windows)?.hist),
        None => None,
    };
    Ok((hall, hist))
}

/// Fine-tunes `bundle` in place on chunk prediction. Parameters under the
/// frozen prefixes must come out bit-identical.
fn finetune_loop(bundle: &mut PolicyBundle, trajs: &[Trajectory], cfg: &StageConfig, seed: u64, frozen: &[&str]) -> Result<Vec<f64>> {
    require_demos(trajs)?;
    cfg.validate()?;
    for p in frozen {
        bundle.params.set_frozen_prefix(p, true);
    }
    let snaps: Vec<(String, Tensor)> = frozen.iter().flat_map(|p| bundle.params.snapshot(p)).collect();
    let meta = bundle.meta.clone();
    let k = meta.chunk();
    let backbone_frozen = frozen.contains(&backbone::PREFIX);
    let moments_frozen = !meta.mode.uses_moments() || frozen.contains(&memory::MOMENT_TOKENS);
    let cache = if backbone_frozen && moments_frozen {
        let n_m = if meta.mode.uses_moments() { meta.memory.n_moment } else { 0 };
        Some(FeatureCache::build(bundle, trajs, n_m)?)
    } else {
        None
    };
    let samples = aligned_samples(trajs, k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf17e);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch = sample_batch(&mut rng, &samples, cfg.batch);
        let bf = batch_frames(meta.mode, meta.memory.history, k, &batch);
        let mut g = Graph::new();
        let (h, hist) = batch_inputs(&mut g, bundle, trajs, cache.as_ref(), &bf)?;
        let logits = predict_chunk(&mut g, &bundle.params, &meta.expert, h, hist, &proprios(trajs, &batch))?;
        let loss = chunk_loss(&mut g, logits, &targets(trajs, &batch, k))?;
        losses.push(update(&mut g, &mut bundle.params, loss, &adam, step)?);
    }
    check_frozen(&bundle.params, &snaps)?;
    Ok(losses)
}

fn frozen_prefixes(spec: &VariantSpec) -> Vec<&'static str> {
    let mut v = Vec::new();
    if spec.freeze_backbone {
        v.push(backbone::PREFIX);
    }
    if spec.freeze_moments {
        v.push(memory::MOMENT_TOKENS);
    }
    v
}

/// Single-frame baseline: the first-stage policy with its expert trained
/// further on frozen readout features for the same budget as the
/// history-aware variants.
pub fn finetune_single_frame(stage1: &PolicyBundle, trajs: &[Trajectory], spec: &VariantSpec) -> Result<(PolicyBundle, TrainLog)> {
    let mut bundle = stage1.clone();
    bundle.meta.stage = Stage::Stage3;
    let losses = finetune_loop(&mut bundle, trajs, &spec.stage(), spec.seed, &[backbone::PREFIX])?;
    Ok((
        bundle,
        TrainLog {
            stage: Stage::Stage3,
            mode: Mode::SingleFrame,
            losses,
        },
    ))
}

/// Fine-tunes a memory-equipped variant (`hamlet`, `moment_concat`, `rnn`,
/// `lstm`, `gru`) on top of a moment-token bundle. With `use_tcl_init` off
/// the moment tokens start from a fresh random draw instead.
pub fn finetune_memory_variant(stage2: &PolicyBundle, trajs: &[Trajectory], spec: &VariantSpec) -> Result<(PolicyBundle, TrainLog)> {
    spec.validate()?;
    if !spec.mode.uses_moments() {
        return Err(Error::config(format!("{} is not a moment-token variant", spec.mode)));
    }
    let mem = spec.memory_config(stage2.meta.backbone.d_model);
    if spec.chunk != stage2.meta.chunk() {
        return Err(Error::config("chunk length differs from the pretrained expert's"));
    }
    let mut base = stage2.clone();
    let has_tokens = base.params.get(memory::MOMENT_TOKENS).map(|t| t.rows()).ok() == Some(spec.n_moment);
    if spec.use_tcl_init && !has_tokens {
        return Err(Error::config(format!(
            "bundle has no TCL-initialised moment tokens for n_moment = {}",
            spec.n_moment
        )));
    }
    if !spec.use_tcl_init {
        let mut reg = ParamRegistry::new();
        for p in base.params.iter().filter(|p| !p.name.starts_with(memory::MOMENT_TOKENS)) {
            reg.add(p.name.clone(), p.value.clone(), p.frozen)?;
        }
        base.params = reg;
    }
    let mut bundle = PolicyBundle::attach_memory(&base, spec.mode, &mem, spec.seed)?;
    let losses = finetune_loop(&mut bundle, trajs, &spec.stage(), spec.seed, &frozen_prefixes(spec))?;
    Ok((
        bundle,
        TrainLog {
            stage: Stage::Stage3,
            mode: spec.mode,
            losses,
        },
    ))
}

/// Multi-frame baseline: the backbone sees the last `T` chunk-aligned frames
/// (first frame repeated during warm-up) with fresh frame-index embeddings,
/// and is fine-tuned together with the expert.
pub fn finetune_multi_frame(stage1: &PolicyBundle, trajs: &[Trajectory], spec: &VariantSpec) -> Result<(PolicyBundle, TrainLog)> {
    require_demos(trajs)?;
    spec.validate()?;
    let cfg = spec.stage();
    let backbone_cfg = backbone::BackboneConfig {
        frames: spec.history,
        ..stage1.meta.backbone.clone()
    };
    backbone_cfg.check_len(0)?;
    let mut bundle = stage1.clone();
    bundle.meta.stage = Stage::Stage3;
    bundle.meta.mode = Mode::MultiFrame;
    bundle.meta.backbone = backbone_cfg.clone();
    bundle.meta.memory.history = spec.history;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xfa);
    if spec.history > 1 {
        backbone::add_frame_embeddings(&mut bundle.params, &mut rng, &backbone_cfg)?;
    }
    bundle.params.set_frozen_prefix(backbone::PREFIX, false);
    let k = bundle.meta.chunk();
    let samples = aligned_samples(trajs, k);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch = sample_batch(&mut rng, &samples, cfg.batch);
        let seqs = batch
            .iter()
            .map(|&(i, t)| {
                let traj = &trajs[i];
                let history: Vec<Frame> = (1..spec.history)
                    .rev()
                    .map(|j| {
                        let s = &traj.steps[t.saturating_sub(j * k)];
                        Frame::new(&s.obs, &s.proprio)
                    })
                    .collect();
                sequence(&backbone_cfg, traj, t, 0, &history)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new();
        let enc = backbone::encode(&mut g, &bundle.params, &backbone_cfg, &seqs, None)?;
        let logits = predict_chunk(&mut g, &bundle.params, &bundle.meta.expert, enc.h, None, &proprios(trajs, &batch))?;
        let loss = chunk_loss(&mut g, logits, &targets(trajs, &batch, k))?;
        losses.push(update(&mut g, &mut bundle.params, loss, &adam, step)?);
    }
    Ok((
        bundle,
        TrainLog {
            stage: Stage::Stage3,
            mode: Mode::MultiFrame,
            losses,
        },
    ))
}

/// Carries a trained memory module to another task: fresh moment tokens by
/// TCL on the target demos, memory copied and frozen, expert fine-tuned.
pub fn transfer_memory(
    source: &PolicyBundle,
    stage1: &PolicyBundle,
    target_trajs: &[Trajectory],
    tcl: &TclConfig,
    spec: &VariantSpec,
) -> Result<(PolicyBundle, TrainLog)> {
    if source.meta.mode != Mode::Hamlet || !source.has_memory_module() {
        return Err(Error::config("transfer needs a source with a memory module"));
    }
    let mem = source.meta.memory.clone();
    let wanted = spec.memory_config(mem.d_model);
    if wanted.n_moment != mem.n_moment || wanted.history != mem.history || wanted.layers != mem.layers {
        return Err(Error::config("source memory shapes do not match the target configuration"));
    }
    let (stage2, _) = train_moment_tokens(stage1, target_trajs, tcl, spec.seed)?;
    let mut bundle = PolicyBundle::attach_memory(&stage2, Mode::Hamlet, &mem, spec.seed)?;
    for p in source.params.iter().filter(|p| p.name.starts_with(memory::MEMORY_PREFIX)) {
        let dst = bundle.params.get(&p.name)?;
        if dst.shape() != p.value.shape() {
            return Err(Error::config(format!("memory tensor {} has a different shape", p.name)));
        }
    }
    bundle.params.copy_prefix_from(&source.params, memory::MEMORY_PREFIX)?;
    let mut frozen = frozen_prefixes(spec);
    frozen.push(memory::MEMORY_PREFIX);
    let losses = finetune_loop(&mut bundle, target_trajs, &spec.stage(), spec.seed, &frozen)?;
    let mut tasks: Vec<_> = target_trajs.iter().map(|t| t.task).collect();
    tasks.dedup();
    bundle.meta.tasks = tasks;
    Ok((
        bundle,
        TrainLog {
            stage: Stage::Stage3,
            mode: Mode::Hamlet,
            losses,
        },
    ))
}

/// Whole-chunk accuracy of `bundle` replaying the demonstrations' own
/// observations at chunk-aligned timesteps.
pub fn chunk_accuracy(bundle: &PolicyBundle, trajs: &[Trajectory]) -> Result<f64> {
    let k = bundle.meta.chunk();
    let (mut hits, mut total) = (0usize, 0usize);
    for traj in trajs {
        let mut ep = bundle.new_episode();
        for t in (0..traj.len()).step_by(k) {
            let s = &traj.steps[t];
            let d = bundle.act(&mut ep, &s.obs, &s.proprio, &traj.instruction, false)?;
            hits += (d.actions == chunk_at(traj, t, k)) as usize;
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::env::{demo_set, TaskId};

    fn tiny() -> (BackboneConfig, MemoryConfig) {
        let bb = BackboneConfig {
            d_model: 16,
            heads: 2,
            layers: 1,
            ff: 32,
            ..BackboneConfig::default()
        };
        let mem = MemoryConfig {
            d_model: 16,
            heads: 2,
            layers: 1,
            ff: 32,
            n_moment: 2,
            history: 3,
        };
        (bb, mem)
    }

    fn demos(task: TaskId, n: usize) -> Vec<Trajectory> {
        demo_set(task, n, 3).unwrap().trajectories
    }

    fn spec(mode: Mode, steps: usize) -> VariantSpec {
        VariantSpec {
            mode,
            n_moment: 2,
            history: 3,
            memory_layers: 1,
            steps,
            batch: 4,
            seed: 9,
            ..VariantSpec::default()
        }
    }

    fn tcl(steps: usize) -> TclConfig {
        TclConfig {
            steps,
            batch: 4,
            d_proj: 8,
            ..TclConfig::default()
        }
    }

    fn stage1(trajs: &[Trajectory], steps: usize) -> PolicyBundle {
        let (bb, mem) = tiny();
        pretrain_single_frame(trajs, &bb, &mem, 4, &StageConfig { steps, lr: 1e-3, batch: 4 }, 1).unwrap().0
    }

    #[test]
    fn pretraining_is_deterministic_and_finite() {
        let trajs = demos(TaskId::SwapCubes, 2);
        let (bb, mem) = tiny();
        let cfg = StageConfig { steps: 3, lr: 1e-3, batch: 4 };
        let (a, log) = pretrain_single_frame(&trajs, &bb, &mem, 4, &cfg, 1).unwrap();
        let (b, _) = pretrain_single_frame(&trajs, &bb, &mem, 4, &cfg, 1).unwrap();
        assert_eq!(log.losses.len(), 3);
        assert!(log.losses.iter().all(|l| l.is_finite()));
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(a.meta.stage, Stage::Stage1);
    }

    #[test]
    fn tcl_leaves_backbone_untouched() {
        let trajs = demos(TaskId::SwapCubes, 2);
        let s1 = stage1(&trajs, 1);
        let (s2, log) = train_moment_tokens(&s1, &trajs, &tcl(3), 2).unwrap();
        assert_eq!(s2.meta.stage, Stage::Stage2);
        assert!(log.losses.iter().all(|l| l.is_finite()));
        for p in s1.params.iter() {
            assert_eq!(s2.params.get(&p.name).unwrap(), &p.value, "{}", p.name);
        }
        let m = tcl_margin(&s2, &trajs, 8, &AugmentConfig::default(), 4).unwrap();
        assert!(m.is_finite() && m.abs() <= 2.0);
        assert!(train_moment_tokens(&s2, &trajs, &tcl(1), 2).is_err());
    }

    #[test]
    fn window_steps_follow_mode() {
        assert_eq!(window_steps(Mode::Hamlet, 3, 4, 20), vec![12, 16, 20]);
        assert_eq!(window_steps(Mode::Hamlet, 3, 4, 4), vec![0, 4]);
        assert_eq!(window_steps(Mode::Gru, 3, 4, 12), vec![0, 4, 8, 12]);
    }

    #[test]
    fn every_variant_finetunes_with_frozen_parts_intact() {
        let trajs = demos(TaskId::PickPlaceTwice, 2);
        let s1 = stage1(&trajs, 1);
        let (s2, _) = train_moment_tokens(&s1, &trajs, &tcl(1), 2).unwrap();
        for mode in [Mode::Hamlet, Mode::MomentConcat, Mode::Rnn, Mode::Lstm, Mode::Gru] {
            let (b, log) = finetune_memory_variant(&s2, &trajs, &spec(mode, 2)).unwrap();
            assert_eq!(b.meta.mode, mode);
            assert!(log.losses.iter().all(|l| l.is_finite()), "{mode}");
            for name in [memory::MOMENT_TOKENS, "backbone.cell_embed"] {
                assert_eq!(b.params.get(name).unwrap(), s2.params.get(name).unwrap(), "{mode} {name}");
            }
            let acc = chunk_accuracy(&b, &trajs[..1]).unwrap();
            assert!((0.0..=1.0).contains(&acc));
        }
        let (sf, _) = finetune_single_frame(&s1, &trajs, &spec(Mode::SingleFrame, 2)).unwrap();
        assert_eq!(sf.params.get("backbone.cell_embed").unwrap(), s1.params.get("backbone.cell_embed").unwrap());
        let (mf, log) = finetune_multi_frame(&s1, &trajs, &spec(Mode::MultiFrame, 2)).unwrap();
        assert_eq!(mf.meta.backbone.frames, 3);
        assert!(log.losses.iter().all(|l| l.is_finite()));
        chunk_accuracy(&mf, &trajs[..1]).unwrap();
    }

    #[test]
    fn unfrozen_recipe_and_random_moments() {
        let trajs = demos(TaskId::CoverAndStack, 1);
        let s1 = stage1(&trajs, 1);
        let (s2, _) = train_moment_tokens(&s1, &trajs, &tcl(1), 2).unwrap();
        let open = VariantSpec {
            freeze_backbone: false,
            freeze_moments: false,
            ..spec(Mode::Hamlet, 1)
        };
        let (b, _) = finetune_memory_variant(&s2, &trajs, &open).unwrap();
        assert_ne!(b.params.get("backbone.cell_embed").unwrap(), s2.params.get("backbone.cell_embed").unwrap());
        assert_eq!(open.label(), "hamlet_unfrozen");
        let no_tcl = VariantSpec {
            use_tcl_init: false,
            ..spec(Mode::Hamlet, 1)
        };
        let (c, _) = finetune_memory_variant(&s2, &trajs, &no_tcl).unwrap();
        assert_ne!(c.params.get(memory::MOMENT_TOKENS).unwrap(), s2.params.get(memory::MOMENT_TOKENS).unwrap());
        assert!(finetune_memory_variant(&s1, &trajs, &spec(Mode::Hamlet, 1)).is_err());
    }

    #[test]
    fn transfer_keeps_memory_bit_identical() {
        let swap = demos(TaskId::SwapCubes, 1);
        let cover = demos(TaskId::CoverAndStack, 1);
        let mut both = swap.clone();
        both.extend(cover.iter().cloned());
        let s1 = stage1(&both, 1);
        let (s2, _) = train_moment_tokens(&s1, &swap, &tcl(1), 2).unwrap();
        let (src, _) = finetune_memory_variant(&s2, &swap, &spec(Mode::Hamlet, 2)).unwrap();
        let (dst, _) = transfer_memory(&src, &s1, &cover, &tcl(1), &spec(Mode::Hamlet, 2)).unwrap();
        for p in src.params.iter().filter(|p| p.name.starts_with(memory::MEMORY_PREFIX)) {
            assert_eq!(dst.params.get(&p.name).unwrap(), &p.value, "{}", p.name);
        }
        assert_ne!(dst.params.get(memory::MOMENT_TOKENS).unwrap(), src.params.get(memory::MOMENT_TOKENS).unwrap());
        assert_eq!(dst.meta.tasks, vec![TaskId::CoverAndStack]);
    }
}
