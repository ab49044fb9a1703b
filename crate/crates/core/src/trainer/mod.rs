//! Siamese supernet training with ensemble bootstrapping.

mod heads;
mod schedule;

pub use heads::{
    init_prediction, init_projection, mlp_forward, pool_features, LATENT_DIM, PROJECTION_HIDDEN,
};
pub use schedule::{lr_at, tau_at, TauSchedule};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment_batch, AugmentPolicy, DatasetSplit, Normalizer};
use crate::error::{Error, Result};
use crate::space::{sample_architectures, Architecture, SearchSpaceDef, Supernet};
use crate::substrate::{
    l2_normalize, optimizer_step, BnUpdate, Graph, Mode, OptimizerConfig, ParameterStore, Tensor,
};

/// How each online path chooses its regression target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    /// The normalized mean of all sampled target paths.
    Ensemble,
    /// Each path regresses onto its own target path only.
    SelfBootstrap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub paths_per_step: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub tau: f64,
    pub tau_schedule: TauSchedule,
    pub target_mode: TargetMode,
    /// Adds the view-swapped loss term and averages the two directions.
    pub symmetric: bool,
    /// Softmax each target vector before averaging.
    pub softmax_ensemble: bool,
    pub augment: AugmentPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            paths_per_step: 4,
            epochs: 20,
            warmup_epochs: 1,
            batch_size: 64,
            optimizer: OptimizerConfig::sgd(0.1, 0.9, 1e-4),
            tau: 0.99,
            tau_schedule: TauSchedule::Constant,
            target_mode: TargetMode::Ensemble,
            symmetric: false,
            softmax_ensemble: false,
            augment: AugmentPolicy::full(),
        }
    }
}

impl TrainConfig {
    /// The naive self-bootstrapping baseline under the same budget.
    pub fn naive(&self) -> Self {
        TrainConfig {
            target_mode: TargetMode::SelfBootstrap,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, reason: String| {
            Err(Error::Config {
                path: format!("trainer.{path}"),
                reason,
            })
        };
        let min_paths = if self.target_mode == TargetMode::Ensemble {
            2
        } else {
            1
        };
        if self.paths_per_step < min_paths {
            return bad(
                "paths_per_step",
                format!(
                    "must be at least {min_paths} for {:?} targets",
                    self.target_mode
                ),
            );
        }
        if self.batch_size < 2 {
            return bad(
                "batch_size",
                "batch statistics need at least 2 samples".into(),
            );
        }
        if self.epochs == 0 || self.warmup_epochs > self.epochs {
            return bad("epochs", "need epochs ≥ 1 and warmup ≤ epochs".into());
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau", format!("{} is outside [0, 1]", self.tau));
        }
        self.optimizer
            .validate()
            .or_else(|e| bad("optimizer", e.to_string()))
    }
}

/// Online and target supernets with per-block heads.
#[derive(Clone, Debug)]
pub struct SiameseState {
    pub online: Supernet,
    pub target: Supernet,
    pub online_projection: Vec<ParameterStore>,
    pub target_projection: Vec<ParameterStore>,
    /// Online only.
    pub prediction: Vec<ParameterStore>,
    pub step: u64,
}

impl SiameseState {
    pub fn new(space: &SearchSpaceDef, seed: u64) -> Result<Self> {
        let online = Supernet::build(space, seed)?;
        let target = online.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6865_6164);
        let online_projection: Vec<_> = (0..space.block_count())
            .map(|k| init_projection(space.block_feature_dim(k), &mut rng))
            .collect();
        let target_projection = online_projection.clone();
        let prediction = (0..space.block_count())
            .map(|_| init_prediction(&mut rng))
            .collect();
        Ok(SiameseState {
            online,
            target,
            online_projection,
            target_projection,
            prediction,
            step: 0,
        })
    }

    pub fn space(&self) -> &SearchSpaceDef {
        &self.online.space
    }

    fn online_stores_mut(&mut self) -> Vec<&mut ParameterStore> {
        let mut v = self.online.stores_mut();
        v.extend(self.online_projection.iter_mut());
        v.extend(self.prediction.iter_mut());
        v
    }

    /// Online/target pairs covered by the moving average.
    fn ema_pairs(&mut self) -> Vec<(&mut ParameterStore, &ParameterStore)> {
        let mut v: Vec<_> = self
            .target
            .stores_mut()
            .into_iter()
            .zip(self.online.stores())
            .collect();
        v.extend(
            self.target_projection
                .iter_mut()
                .zip(self.online_projection.iter()),
        );
        v
    }

    pub fn aligned(&self) -> bool {
        let a = self.online.stores();
        let b = self.target.stores();
        a.len() == b.len()
            && a.iter().zip(&b).all(|(x, y)| x.aligned_with(y))
            && self
                .online_projection
                .iter()
                .zip(&self.target_projection)
                .all(|(x, y)| x.aligned_with(y))
    }

    /// `target ← τ·target + (1−τ)·online` for every supernet and projection
    /// parameter; prediction heads have no target copy.
    pub fn ema_update(&mut self, tau: f64) {
        for (t, o) in self.ema_pairs() {
            for ((name, tp), (oname, op)) in t.params_mut().zip(o.params()) {
                debug_assert_eq!(name, oname);
                for (tv, &ov) in tp.data_mut().iter_mut().zip(op.data()) {
                    *tv = tau * *tv + (1.0 - tau) * ov;
                }
            }
        }
    }

    /// Every parameter and buffer under a stable name.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let mut push = |prefix: String, s: &ParameterStore| {
            for (n, t) in s.params() {
                out.push((format!("{prefix}/p/{n}"), t.clone()));
            }
            for (n, t) in s.buffers() {
                out.push((format!("{prefix}/b/{n}"), t.clone()));
            }
        };
        for (name, s) in self.online.named_stores() {
            push(format!("online/{name}"), s);
        }
        for (name, s) in self.target.named_stores() {
            push(format!("target/{name}"), s);
        }
        for (k, s) in self.online_projection.iter().enumerate() {
            push(format!("online-projection/{}", k + 1), s);
        }
        for (k, s) in self.target_projection.iter().enumerate() {
            push(format!("target-projection/{}", k + 1), s);
        }
        for (k, s) in self.prediction.iter().enumerate() {
            push(format!("prediction/{}", k + 1), s);
        }
        out
    }

    /// Overwrites values from [`SiameseState::named_tensors`] output.
    pub fn load_named(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let mut map: std::collections::HashMap<&str, &Tensor> =
            entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut stores: Vec<(String, &mut ParameterStore)> = Vec::new();
        stores.extend(
            self.online
                .named_stores_mut()
                .into_iter()
                .map(|(n, s)| (format!("online/{n}"), s)),
        );
        stores.extend(
            self.target
                .named_stores_mut()
                .into_iter()
                .map(|(n, s)| (format!("target/{n}"), s)),
        );
        for (k, s) in self.online_projection.iter_mut().enumerate() {
            stores.push((format!("online-projection/{}", k + 1), s));
        }
        for (k, s) in self.target_projection.iter_mut().enumerate() {
            stores.push((format!("target-projection/{}", k + 1), s));
        }
        for (k, s) in self.prediction.iter_mut().enumerate() {
            stores.push((format!("prediction/{}", k + 1), s));
        }
        for (prefix, store) in stores {
            let pnames: Vec<String> = store.params().map(|(n, _)| n.clone()).collect();
            for n in pnames {
                let key = format!("{prefix}/p/{n}");
                let t = map
                    .remove(key.as_str())
                    .ok_or_else(|| Error::Checkpoint(format!("missing `{key}`")))?;
                let dst = store.param_mut(&n)?;
                if dst.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!("shape mismatch for `{key}`")));
                }
                dst.data_mut().copy_from_slice(t.data());
            }
            let bnames: Vec<String> = store.buffers().map(|(n, _)| n.clone()).collect();
            for n in bnames {
                let key = format!("{prefix}/b/{n}");
                let t = map
                    .remove(key.as_str())
                    .ok_or_else(|| Error::Checkpoint(format!("missing `{key}`")))?;
                let dst = store.buffer_mut(&n)?;
                if dst.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!("shape mismatch for `{key}`")));
                }
                dst.data_mut().copy_from_slice(t.data());
            }
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected entry `{extra}`")));
        }
        Ok(())
    }
}

/// Normalized mean of per-path normalized vectors (`[N, D]` each). When all
/// members are identical the member itself is returned.
pub fn ensemble_target(vectors: &[Tensor]) -> Result<Tensor> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::shape("ensemble", "no member vectors"))?;
    if vectors.iter().all(|v| v.data() == first.data()) {
        return Ok(first.clone());
    }
    let mut mean = Tensor::zeros(first.shape());
    for v in vectors {
        if v.shape() != first.shape() {
            return Err(Error::shape(
                "ensemble",
                format!("member shape {:?} vs {:?}", v.shape(), first.shape()),
            ));
        }
        for (m, x) in mean.data_mut().iter_mut().zip(v.data()) {
            *m += x;
        }
    }
    let n = vectors.len() as f64;
    mean.data_mut().iter_mut().for_each(|m| *m /= n);
    l2_normalize(&mean, crate::substrate::tape::NORMALIZE_EPS)
}

fn softmax_rows(t: &Tensor) -> Tensor {
    let d = t.shape()[1];
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(d) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// An independent augmented view pair per sampled path, standardized.
pub fn make_training_views<R: Rng + ?Sized>(
    batch: &Tensor,
    paths: usize,
    policy: &AugmentPolicy,
    normalizer: &Normalizer,
    rng: &mut R,
) -> Vec<(Tensor, Tensor)> {
    (0..paths)
        .map(|_| {
            let mut a = augment_batch(batch, policy, rng);
            let mut b = augment_batch(batch, policy, rng);
            normalizer.apply(&mut a);
            normalizer.apply(&mut b);
            (a, b)
        })
        .collect()
}

/// Per-block normalized projected target vectors for one path, with the
/// normalization statistics the batch produced.
pub fn target_vectors(
    state: &SiameseState,
    arch: &Architecture,
    view: &Tensor,
) -> Result<(Vec<Tensor>, Vec<BnUpdate>)> {
    let space = state.space();
    let mut g = Graph::new(Mode::BatchStats);
    let x = g.input(view.clone());
    let mut h = state.target.stem_forward(&mut g, x)?;
    let mut scale = space.scale_rules.as_ref().map_or(0, |r| r.initial_scale);
    let mut out = Vec::with_capacity(arch.blocks.len());
    for (k, path) in arch.blocks.iter().enumerate() {
        let (y, s) = state.target.forward_block(&mut g, k, path, h, scale)?;
        let pooled = pool_features(&mut g, y, space.block_feature_dim(k))?;
        let z = mlp_forward(&mut g, &state.target_projection[k], pooled)?;
        let z = g.l2_normalize(z)?;
        out.push(g.value(z).clone());
        h = y;
        scale = s;
    }
    Ok((out, g.take_bn_updates()))
}

/// Records the online loss of one path: for every block, the batch-mean squared
/// distance between the predicted normalized vector and `targets[k]`. Block
/// inputs are detached so each block only learns from its own loss.
pub fn online_path_loss(
    state: &SiameseState,
    arch: &Architecture,
    view: &Tensor,
    targets: &[Tensor],
    weight: f64,
) -> Result<(Graph, crate::substrate::Var, Vec<f64>)> {
    let space = state.space();
    let mut g = Graph::recording();
    let x = g.input(view.clone());
    let mut h = state.online.stem_forward(&mut g, x)?;
    let mut scale = space.scale_rules.as_ref().map_or(0, |r| r.initial_scale);
    let mut total = None;
    let mut block_losses = Vec::with_capacity(arch.blocks.len());
    for (k, path) in arch.blocks.iter().enumerate() {
        let (y, s) = state.online.forward_block(&mut g, k, path, h, scale)?;
        let pooled = pool_features(&mut g, y, space.block_feature_dim(k))?;
        let z = mlp_forward(&mut g, &state.online_projection[k], pooled)?;
        let z = mlp_forward(&mut g, &state.prediction[k], z)?;
        let z = g.l2_normalize(z)?;
        let e = g.input(targets[k].clone());
        let d = g.sub(z, e)?;
        let sq = g.mul(d, d)?;
        let s_ = g.sum(sq)?;
        let n = targets[k].shape()[0] as f64;
        let lk = g.scale(s_, 1.0 / n)?;
        block_losses.push(g.value(lk).item());
        total = Some(match total {
            None => lk,
            Some(t) => g.add(t, lk)?,
        });
        h = g.detach(y);
        scale = s;
    }
    let total = total.ok_or_else(|| Error::shape("loss", "architecture has no blocks"))?;
    let loss = g.scale(total, weight)?;
    Ok((g, loss, block_losses))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// Sum over blocks of the path-averaged loss.
    pub loss: f64,
    pub block_losses: Vec<f64>,
}

/// One optimization step on an unnormalized `[N, 3, H, W]` batch.
pub fn train_step<R: Rng + ?Sized>(
    state: &mut SiameseState,
    config: &TrainConfig,
    batch: &Tensor,
    normalizer: &Normalizer,
    lr: f64,
    tau: f64,
    rng: &mut R,
) -> Result<StepOutcome> {
    let p = config.paths_per_step;
    let space = state.space().clone();
    let archs = sample_architectures(&space, p, rng);
    let views = make_training_views(batch, p, &config.augment, normalizer, rng);
    let directions: &[bool] = if config.symmetric {
        &[false, true]
    } else {
        &[false]
    };
    let weight = 1.0 / (p * directions.len()) as f64;

    let mut updates = Vec::new();
    let mut block_losses = vec![0.0; space.block_count()];
    for &swap in directions {
        let mut per_path = Vec::with_capacity(p);
        for (arch, (va, vb)) in archs.iter().zip(&views) {
            let tview = if swap { va } else { vb };
            let (vecs, ups) = target_vectors(state, arch, tview)?;
            updates.extend(ups);
            per_path.push(vecs);
        }
        let targets: Vec<Vec<Tensor>> = match config.target_mode {
            TargetMode::SelfBootstrap => per_path,
            TargetMode::Ensemble => {
                let shared = (0..space.block_count())
                    .map(|k| {
                        let members: Vec<Tensor> = per_path
                            .iter()
                            .map(|v| {
                                if config.softmax_ensemble {
                                    softmax_rows(&v[k])
                                } else {
                                    v[k].clone()
                                }
                            })
                            .collect();
                        ensemble_target(&members)
                    })
                    .collect::<Result<Vec<_>>>()?;
                vec![shared; p]
            }
        };
        for ((arch, (va, vb)), tgt) in archs.iter().zip(&views).zip(&targets) {
            let oview = if swap { vb } else { va };
            let (mut g, loss, bl) = online_path_loss(state, arch, oview, tgt, weight)?;
            for (acc, v) in block_losses.iter_mut().zip(bl) {
                *acc += v * weight;
            }
            let grads = g.backward(loss)?;
            updates.extend(g.take_bn_updates());
            for s in state.online_stores_mut() {
                grads.apply_to(s)?;
            }
        }
    }

    let opt = config.optimizer.with_lr(lr);
    for s in state.online_stores_mut() {
        if s.has_grads() {
            optimizer_step(s, &opt)?;
        }
        s.commit_bn(&updates)?;
    }
    for s in state.target.stores_mut() {
        s.commit_bn(&updates)?;
    }
    for s in state.target_projection.iter_mut() {
        s.commit_bn(&updates)?;
    }
    state.ema_update(tau);
    state.step += 1;
    Ok(StepOutcome {
        loss: block_losses.iter().sum(),
        block_losses,
    })
}

/// One line of the per-epoch training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// 1-based.
    pub block: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub tau: f64,
}

pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    (n / batch).max(1)
}

/// Trains all blocks jointly over `split`. `on_epoch(epoch, state)` runs
/// before the first epoch (epoch 0) and after each epoch.
pub fn train_supernet<F>(
    state: &mut SiameseState,
    config: &TrainConfig,
    split: &DatasetSplit,
    normalizer: &Normalizer,
    seed: u64,
    mut on_epoch: F,
) -> Result<Vec<EpochLog>>
where
    F: FnMut(usize, &SiameseState) -> Result<()>,
{
    config.validate()?;
    if split.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let n = split.len();
    let batch = config.batch_size.min(n);
    if batch < 2 {
        return Err(Error::Dataset(
            "training split needs at least 2 samples".into(),
        ));
    }
    let spe = steps_per_epoch(n, batch);
    let total = spe * config.epochs;
    let warmup = spe * config.warmup_epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = Vec::new();
    on_epoch(0, state)?;
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut sums = vec![0.0; state.space().block_count()];
        let (mut lr, mut tau) = (0.0, config.tau);
        for chunk in order.chunks_exact(batch).take(spe) {
            lr = lr_at(step, total, warmup, config.optimizer.lr);
            tau = tau_at(config.tau_schedule, config.tau, step, total);
            let (images, _) = split.batch(chunk);
            let out = train_step(state, config, &images, normalizer, lr, tau, &mut rng)?;
            for (s, l) in sums.iter_mut().zip(&out.block_losses) {
                *s += l;
            }
            step += 1;
        }
        for (k, s) in sums.iter().enumerate() {
            log.push(EpochLog {
                epoch,
                block: k + 1,
                mean_loss: s / spe as f64,
                lr,
                tau,
            });
        }
        on_epoch(epoch, state)?;
    }
    Ok(log)
}
