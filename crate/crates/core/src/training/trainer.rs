use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::danet::{DaNet, NetConfig, Normalization, Variant};
use crate::dataset::{Dataset, Split};
use crate::diffcore::{DiffFunction, GradSet, Graph, Tensor};
use crate::exec::{self, Mode};
use crate::formats::{self, Checkpoint, NamedTensor};
use crate::toyatm::{sample_rng, GridState, ToyModel};

use super::{lr_at_step, total_loss, AdamW, TrainConfig, TrainError};

const DOMAIN_SHUFFLE: u64 = 11;
const MOMENT_PREFIX: [&str; 2] = ["adam.m.", "adam.v."];

/// One row of the loss history; losses are means over the batch, before the update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub lr: f64,
    pub l0: f64,
    pub rollout_mean: f64,
    pub total: f64,
}

/// Network plus optimizer; `opt.steps` is the number of completed updates.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub net: DaNet<f32>,
    pub opt: AdamW,
}

impl TrainState {
    pub fn new(net: DaNet<f32>) -> Self {
        let opt = AdamW::new(net.store());
        Self { net, opt }
    }

    pub fn step(&self) -> u64 {
        self.opt.steps
    }
}

/// Input statistics over the training split. Observation statistics are left empty
/// when the dataset was loaded without observations.
pub fn fit_normalization(ds: &Dataset) -> Normalization {
    let idx = ds.samples(Split::Train);
    let bgs: Vec<_> = idx.iter().map(|&s| ds.background(s)).collect();
    let obs: Vec<_> = if ds.obs.is_empty() { Vec::new() } else { idx.iter().map(|&s| ds.obs(s)).collect() };
    Normalization::fit(&bgs, &obs)
}

/// Positions within the training split visited at `step` (1-based): a fresh
/// permutation per pass over the data, seeded by pass number.
pub fn sample_order(n: usize, batch: usize, step: u64, seed: u64) -> Vec<usize> {
    let first = (step - 1) as usize * batch;
    let mut current: Option<(usize, Vec<usize>)> = None;
    (first..first + batch)
        .map(|k| {
            let pass = k / n;
            if current.as_ref().map(|c| c.0) != Some(pass) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut sample_rng(seed, DOMAIN_SHUFFLE, pass as u64));
                current = Some((pass, perm));
            }
            current.as_ref().unwrap().1[k % n]
        })
        .collect()
}

fn normalize(state: &GridState<f32>, norm: &Normalization) -> Tensor<f32> {
    let mut t = state.fields.clone();
    for (ch, (m, s)) in norm.bg_mean.iter().zip(&norm.bg_std).enumerate() {
        let (m, inv) = (*m as f32, (1.0 / s) as f32);
        t.plane_mut(ch).iter_mut().for_each(|v| *v = (*v - m) * inv);
    }
    t
}

struct SampleLoss {
    grads: GradSet<f32>,
    l0: f64,
    rollout: Vec<f64>,
}

struct Context<'a> {
    ds: &'a Dataset,
    model: Arc<dyn DiffFunction<f32>>,
    cfg: &'a TrainConfig,
    rows: Vec<f32>,
    channels: Vec<f32>,
    norm: Normalization,
}

fn sample_loss(net: &DaNet<f32>, ctx: &Context<'_>, s: usize) -> Result<SampleLoss, TrainError> {
    let with_obs = net.variant() == Variant::Assimilation;
    let inputs = net.assemble_inputs(ctx.ds.background(s), with_obs.then(|| ctx.ds.obs(s)))?;
    let mut g = Graph::new(net.store());
    let inc = net.increment(&mut g, &inputs, with_obs)?;
    let bg = g.input(inputs.bg_norm.clone());
    let analysis = g.add(bg, inc).map_err(crate::danet::NetError::from)?;
    let (rows, chans) = (&ctx.rows, &ctx.channels);
    let l0 = g
        .weighted_l1(analysis, &normalize(ctx.ds.truth(s, 0), &ctx.norm), rows, chans)
        .map_err(crate::danet::NetError::from)?;
    let mut total = l0;
    let mut rollout = Vec::with_capacity(ctx.cfg.rollout);
    if ctx.cfg.rollout > 0 {
        let std: Vec<f32> = ctx.norm.bg_std.iter().map(|&v| v as f32).collect();
        let mean: Vec<f32> = ctx.norm.bg_mean.iter().map(|&v| v as f32).collect();
        let inv: Vec<f32> = ctx.norm.bg_std.iter().map(|&v| (1.0 / v) as f32).collect();
        let shift: Vec<f32> = ctx.norm.bg_mean.iter().zip(&ctx.norm.bg_std).map(|(m, s)| (-m / s) as f32).collect();
        let start = if ctx.cfg.rollout_gradient { analysis } else { g.input(g.value(analysis).clone()) };
        let mut x = g.channel_affine(start, &std, &mean).map_err(crate::danet::NetError::from)?;
        let mut sum = None;
        for k in 1..=ctx.cfg.rollout {
            x = g.custom(x, ctx.model.clone());
            let xn = g.channel_affine(x, &inv, &shift).map_err(crate::danet::NetError::from)?;
            let lk = g
                .weighted_l1(xn, &normalize(ctx.ds.truth(s, k), &ctx.norm), rows, chans)
                .map_err(crate::danet::NetError::from)?;
            rollout.push(g.value(lk).item() as f64);
            sum = Some(match sum {
                None => lk,
                Some(acc) => g.add(acc, lk).map_err(crate::danet::NetError::from)?,
            });
        }
        let mean_roll = g.scale(sum.unwrap(), 1.0 / ctx.cfg.rollout as f32);
        total = g.add(l0, mean_roll).map_err(crate::danet::NetError::from)?;
    }
    let grads = g.backward(total).map_err(crate::danet::NetError::from)?;
    Ok(SampleLoss { grads, l0: g.value(l0).item() as f64, rollout })
}

/// Runs steps `state.step() + 1 ..= total_iterations` on the training split, writing
/// checkpoints into `checkpoint_dir` every `checkpoint_every` steps. Samples within a
/// batch may be processed in parallel; their gradients are reduced in batch order.
pub fn train(
    state: &mut TrainState,
    ds: &Dataset,
    forecast: &ToyModel,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    mode: Mode,
    mut progress: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>, TrainError> {
    cfg.validate()?;
    let train_idx = ds.samples(Split::Train);
    if train_idx.is_empty() {
        return Err(TrainError::Config("empty training split".into()));
    }
    if cfg.rollout > ds.horizon {
        return Err(TrainError::Config(format!("rollout {} exceeds dataset horizon {}", cfg.rollout, ds.horizon)));
    }
    let ctx = Context {
        ds,
        model: Arc::new(forecast.clone()),
        cfg,
        rows: ds.grid.lat_weights().iter().map(|&v| v as f32).collect(),
        channels: vec![1.0; ds.grid.channels()],
        norm: state.net.normalization(),
    };
    let mut last_ckpt: Option<PathBuf> = None;
    let mut history = Vec::new();
    for step in state.step() + 1..=cfg.total_iterations {
        let lr = lr_at_step(step, cfg)?;
        let picks: Vec<usize> = sample_order(train_idx.len(), cfg.batch_size, step, cfg.seed)
            .into_iter()
            .map(|p| train_idx[p])
            .collect();
        let net = &state.net;
        let per = exec::try_map(mode, &picks, |&s| sample_loss(net, &ctx, s))?;
        let b = per.len() as f64;
        let mut grads = GradSet::default();
        let (mut l0, mut roll, mut tot) = (0.0, 0.0, 0.0);
        for p in per {
            l0 += p.l0 / b;
            let r = if p.rollout.is_empty() { 0.0 } else { p.rollout.iter().sum::<f64>() / p.rollout.len() as f64 };
            roll += r / b;
            tot += total_loss(p.l0, &p.rollout) / b;
            grads.merge(p.grads);
        }
        if !tot.is_finite() {
            return Err(TrainError::NonFinite { step, checkpoint: last_ckpt });
        }
        if b > 1.0 {
            grads.scale(1.0 / b as f32);
        }
        state.opt.step(state.net.store_mut(), &grads, lr, cfg)?;
        let rec = LossRecord { step, lr, l0, rollout_mean: roll, total: tot };
        progress(&rec);
        history.push(rec);
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                let path = dir.join(format!("step{step:06}.ckpt"));
                formats::write_checkpoint(&path, &checkpoint_of(state))?;
                last_ckpt = Some(path);
            }
        }
    }
    Ok(history)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    step: u64,
    variant: Variant,
    net: NetConfig,
}

/// Parameters, normalization and optimizer moments.
pub fn checkpoint_of(state: &TrainState) -> Checkpoint {
    let meta = Meta {
        step: state.step(),
        variant: state.net.variant(),
        net: state.net.config().clone(),
    };
    let mut ck = Checkpoint::from_store(toml::to_string(&meta).expect("meta serializes"), state.net.store());
    for (prefix, moments) in MOMENT_PREFIX.iter().zip([&state.opt.m, &state.opt.v]) {
        for ((_, p), t) in state.net.store().iter().zip(moments) {
            if let Some(t) = t {
                ck.tensors.push(NamedTensor { name: format!("{prefix}{}", p.name), trainable: false, value: t.clone() });
            }
        }
    }
    ck
}

/// Inverse of [`checkpoint_of`]. Checkpoints without moments restore a fresh optimizer
/// at the stored step.
pub fn restore(ck: &Checkpoint) -> Result<TrainState, TrainError> {
    let meta: Meta = toml::from_str(&ck.meta).map_err(|e| TrainError::Checkpoint(format!("metadata: {e}")))?;
    let store = ck.to_store::<f32>(|n| !MOMENT_PREFIX.iter().any(|p| n.starts_with(p)));
    let net = DaNet::from_store(&meta.net, meta.variant, store)?;
    let mut opt = AdamW::new(net.store());
    opt.steps = meta.step;
    for (prefix, moments) in MOMENT_PREFIX.iter().zip([&mut opt.m, &mut opt.v]) {
        for ((_, p), slot) in net.store().iter().zip(moments.iter_mut()) {
            if let (Some(t), Some(slot)) = (ck.get(&format!("{prefix}{}", p.name)), slot.as_mut()) {
                if t.value.shape() != slot.shape() {
                    return Err(TrainError::Checkpoint(format!("moment shape mismatch for {}", p.name)));
                }
                *slot = t.value.clone();
            }
        }
    }
    Ok(TrainState { net, opt })
}

/// `step,lr,l0,rollout_mean,total`.
pub fn write_loss_csv(path: &Path, rows: &[LossRecord]) -> Result<(), TrainError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| TrainError::Io(format!("{}: {e}", dir.display())))?;
    }
    let io = |e: csv::Error| TrainError::Io(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))
}
