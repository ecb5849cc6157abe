//! Weakly supervised triplet training from geo-tagged volumes.
//!
//! Queries come from one traverse and the database from another. Positives
//! are the geographically nearest database volume within `r_pos`; negatives
//! are the database volumes beyond `r_neg` whose cached descriptors lie
//! closest to the query.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::descriptor::Model;
use crate::error::{Error, Result};
use crate::math;
use crate::event::{geo_distance, EventVolume, GeoPose};
use crate::rng::{derive_key, label, Stream};
use crate::snn::{apply_bn_updates, bptt_step, Graph, Mode, ParamId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub margin: f64,
    pub negatives: usize,
    pub lr: f64,
    /// Queries per gradient step.
    pub batch: usize,
    /// Processed queries between descriptor-cache refreshes.
    pub cache_batch: usize,
    pub r_pos: f64,
    pub r_neg: f64,
    pub epochs: usize,
    /// Stop after this many gradient steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Random candidate pool for hard-negative mining.
    pub pool_size: usize,
    pub bn_momentum: f64,
    /// Initialize batch-norm running statistics from data before the first step.
    pub calibrate_bn: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.1,
            negatives: 5,
            lr: 0.001,
            batch: 2,
            cache_batch: 100,
            r_pos: 15.0,
            r_neg: 75.0,
            epochs: 1,
            max_steps: None,
            seed: 0,
            optimizer: Optimizer::Sgd { momentum: 0.0 },
            pool_size: 1000,
            bn_momentum: 0.1,
            calibrate_bn: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.margin > 0.0) {
            return bad("margin must be positive");
        }
        if !(self.r_pos > 0.0) || !(self.r_neg >= self.r_pos) {
            return bad("radii must satisfy r_neg >= r_pos > 0");
        }
        if self.negatives == 0 || self.batch == 0 || self.cache_batch == 0 || self.pool_size == 0 {
            return bad("negatives, batch, cache batch and pool size must be positive");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("learning rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("batch-norm momentum must lie in [0, 1]");
        }
        self.optimizer.validate()
    }
}

/// Parameter update rule applied to the averaged batch gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    /// `momentum = 0` gives plain SGD.
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub const ADAM: Self = Self::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 };

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::Sgd { momentum } => (0.0..1.0).contains(&momentum),
            Self::Adam { beta1, beta2, eps } => (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config("optimizer decay rates must lie in [0, 1) and eps must be positive".into()))
        }
    }
}

/// Per-parameter optimizer buffers.
struct OptState {
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
    updates: i32,
}

impl OptState {
    fn new(n: usize) -> Self {
        Self { first: vec![None; n], second: vec![None; n], updates: 0 }
    }

    fn apply(&mut self, opt: Optimizer, lr: f64, id: ParamId, param: &mut Tensor, grad: &Tensor) {
        let zeros = || Tensor::filled(grad.shape(), 0.0);
        match opt {
            Optimizer::Sgd { momentum } => {
                let v = self.first[id.0].get_or_insert_with(zeros);
                for ((p, v), g) in param.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
                    *v = momentum * *v + g;
                    *p -= lr * *v;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - math::powi(beta1, self.updates);
                let c2 = 1.0 - math::powi(beta2, self.updates);
                let m = self.first[id.0].get_or_insert_with(zeros);
                let v = self.second[id.0].get_or_insert_with(zeros);
                for (((p, m), v), g) in param.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(grad.data()) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / (math::sqrt(*v / c2) + eps);
                }
            }
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_dims(q: &[f64], others: &[&[f64]]) -> Result<()> {
    if others.iter().any(|d| d.len() != q.len()) {
        return Err(Error::Shape("triplet descriptors differ in length".into()));
    }
    Ok(())
}

/// `sum_i max(|q-p|^2 - |q-n_i|^2 + margin, 0)`.
pub fn triplet_loss(q: &[f64], pos: &[f64], negs: &[&[f64]], margin: f64) -> Result<f64> {
    Ok(triplet_loss_grad(q, pos, negs, margin)?.loss)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletGrad {
    pub loss: f64,
    pub query: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

/// Loss and its gradient with respect to every descriptor.
pub fn triplet_loss_grad(q: &[f64], pos: &[f64], negs: &[&[f64]], margin: f64) -> Result<TripletGrad> {
    check_dims(q, &[pos])?;
    check_dims(q, negs)?;
    let d_pos = sq_dist(q, pos);
    let mut out = TripletGrad { loss: 0.0, query: vec![0.0; q.len()], positive: vec![0.0; q.len()], negatives: Vec::new() };
    for n in negs {
        let hinge = d_pos - sq_dist(q, n) + margin;
        let mut gn = vec![0.0; q.len()];
        if hinge > 0.0 {
            out.loss += hinge;
            for i in 0..q.len() {
                out.query[i] += 2.0 * (n[i] - pos[i]);
                out.positive[i] -= 2.0 * (q[i] - pos[i]);
                gn[i] = 2.0 * (q[i] - n[i]);
            }
        }
        out.negatives.push(gn);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub query: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Descriptors of every query and database volume, with the number of
/// queries processed since the last refresh.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DescriptorCache {
    pub query: Vec<Vec<f64>>,
    pub database: Vec<Vec<f64>>,
    pub staleness: usize,
    pub refreshes: usize,
}

/// Fixed per-volume sampling seed for cache and evaluation passes.
pub fn volume_seed(root: u64, role: &str, index: usize) -> u64 {
    derive_key(root, &[label(role), index as u64])
}

impl DescriptorCache {
    pub fn refresh(&mut self, model: &Model, data: &TrainData<'_>, seed: u64) -> Result<()> {
        let qs: Vec<u64> = (0..data.queries.len()).map(|i| volume_seed(seed, "cache.query", i)).collect();
        let ds: Vec<u64> = (0..data.database.len()).map(|i| volume_seed(seed, "cache.db", i)).collect();
        self.query = model.describe_volumes(&data.queries, &qs)?.into_iter().map(|d| d.descriptor).collect();
        self.database = model.describe_volumes(&data.database, &ds)?.into_iter().map(|d| d.descriptor).collect();
        self.staleness = 0;
        self.refreshes += 1;
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Mining {
    pub triplets: Vec<Triplet>,
    /// Queries without a pose or without a positive in range.
    pub skipped: usize,
}

fn dist(a: &Option<GeoPose>, b: &Option<GeoPose>) -> Result<Option<f64>> {
    match (a, b) {
        (Some(a), Some(b)) => geo_distance(a, b).map(Some),
        _ => Ok(None),
    }
}

/// Mine one triplet per query in `queries`.
pub fn mine_triplets(
    queries: &[usize],
    query_poses: &[Option<GeoPose>],
    db_poses: &[Option<GeoPose>],
    cache: &DescriptorCache,
    cfg: &TrainConfig,
    rng: &mut Stream,
) -> Result<Mining> {
    let mut out = Mining::default();
    for &q in queries {
        let qp = &query_poses[q];
        let mut positive: Option<(f64, usize)> = None;
        let mut eligible = Vec::new();
        for (j, dp) in db_poses.iter().enumerate() {
            let Some(d) = dist(qp, dp)? else { continue };
            if d <= cfg.r_pos && positive.is_none_or(|(best, _)| d < best) {
                positive = Some((d, j));
            }
            if d > cfg.r_neg {
                eligible.push(j);
            }
        }
        let Some((_, positive)) = positive else {
            out.skipped += 1;
            continue;
        };
        if eligible.is_empty() {
            return Err(Error::Config(format!("no database volume lies beyond {} m of query {q}", cfg.r_neg)));
        }
        if eligible.len() > cfg.pool_size {
            rng.shuffle(&mut eligible);
            eligible.truncate(cfg.pool_size);
        }
        let qd = &cache.query[q];
        let mut scored: Vec<(f64, usize)> = eligible.into_iter().map(|j| (sq_dist(qd, &cache.database[j]), j)).collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let negatives = scored.into_iter().take(cfg.negatives).map(|s| s.1).collect();
        out.triplets.push(Triplet { query: q, positive, negatives });
    }
    Ok(out)
}

/// Set every batch-norm running statistic to the batch statistics of one
/// training-mode pass over `volumes`. With the default unit-variance buffers
/// a freshly initialized network stays silent at inference on sparse spikes.
pub fn calibrate_batch_norm(model: &mut Model, volumes: &[&EventVolume], seeds: &[u64]) -> Result<()> {
    let updates = {
        let mut g = Graph::new(&model.store, Mode::TRAIN);
        model.forward_volumes(&mut g, volumes, seeds)?;
        g.bn_updates().to_vec()
    };
    apply_bn_updates(&mut model.store, &updates, 1.0);
    Ok(())
}

/// Volumes used for batch-norm calibration at the start of training.
const CALIBRATION_VOLUMES: usize = 32;

/// Query and database volumes for training.
#[derive(Clone, Debug)]
pub struct TrainData<'a> {
    pub queries: Vec<&'a EventVolume>,
    pub database: Vec<&'a EventVolume>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Mean triplet loss over the step's triplets (0 when none were mined).
    pub loss: f64,
    /// Cumulative skipped queries.
    pub skipped_queries: usize,
    /// Queries mined against the descriptor cache since its last refresh.
    pub cache_staleness: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub trace: Vec<StepRecord>,
    pub cache_refreshes: usize,
}

/// Train `model` in place. `on_step` sees the model after every update.
/// A non-finite loss or gradient aborts before the update, leaving the
/// model at its last good state.
pub fn train(
    model: &mut Model,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&Model, &StepRecord) -> Result<()>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if data.queries.is_empty() || data.database.is_empty() {
        return Err(Error::Config("training needs query and database volumes".into()));
    }
    let query_poses: Vec<_> = data.queries.iter().map(|v| v.pose).collect();
    let db_poses: Vec<_> = data.database.iter().map(|v| v.pose).collect();
    let trainable: Vec<ParamId> =
        (0..model.store.len()).map(ParamId).filter(|&id| model.store.get(id).trainable).collect();
    let mut opt = OptState::new(model.store.len());
    let mut cache = DescriptorCache::default();
    let mut trace = Vec::new();
    let mut skipped = 0;
    let mut step = 0;
    let mut mine_rng = Stream::keyed(cfg.seed, &[label("train.mine")]);
    let will_step = cfg.epochs > 0 && cfg.max_steps != Some(0);
    if will_step && cfg.calibrate_bn {
        let n = data.database.len().min(CALIBRATION_VOLUMES);
        let seeds: Vec<u64> = (0..n).map(|i| volume_seed(cfg.seed, "calibrate", i)).collect();
        calibrate_batch_norm(model, &data.database[..n], &seeds)?;
    }
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.queries.len()).collect();
        Stream::keyed(cfg.seed, &[label("train.order"), epoch as u64]).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            if cache.refreshes == 0 || cache.staleness + chunk.len() > cfg.cache_batch {
                cache.refresh(model, data, cfg.seed)?;
            }
            cache.staleness += chunk.len();
            let mined = mine_triplets(chunk, &query_poses, &db_poses, &cache, cfg, &mut mine_rng)?;
            skipped += mined.skipped;
            let loss = if mined.triplets.is_empty() { 0.0 } else { gradient_step(model, data, cfg, &mined.triplets, step, &trainable, &mut opt)? };
            let rec = StepRecord { step, loss, skipped_queries: skipped, cache_staleness: cache.staleness };
            trace.push(rec);
            on_step(model, &rec)?;
            step += 1;
        }
    }
    Ok(TrainSummary { trace, cache_refreshes: cache.refreshes })
}

fn gradient_step(
    model: &mut Model,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    triplets: &[Triplet],
    step: usize,
    trainable: &[ParamId],
    opt: &mut OptState,
) -> Result<f64> {
    let mut volumes: Vec<&EventVolume> = Vec::new();
    for t in triplets {
        volumes.push(data.queries[t.query]);
        volumes.push(data.database[t.positive]);
        volumes.extend(t.negatives.iter().map(|&n| data.database[n]));
    }
    let seeds: Vec<u64> = (0..volumes.len()).map(|i| derive_key(cfg.seed, &[label("train.tss"), step as u64, i as u64])).collect();
    let (grads, bn_updates, loss) = {
        let mut g = Graph::new(&model.store, Mode::TRAIN);
        let f = model.forward_volumes(&mut g, &volumes, &seeds)?;
        let desc = g.value(f.descriptor);
        let dim = desc.shape()[1];
        let row = |i: usize| &desc.data()[i * dim..][..dim];
        let mut seed_grad = vec![0.0; desc.len()];
        let mut loss = 0.0;
        let scale = 1.0 / triplets.len() as f64;
        let mut base = 0;
        for t in triplets {
            let negs: Vec<&[f64]> = (0..t.negatives.len()).map(|k| row(base + 2 + k)).collect();
            let tg = triplet_loss_grad(row(base), row(base + 1), &negs, cfg.margin)?;
            loss += tg.loss * scale;
            let mut put = |i: usize, g: &[f64]| {
                for (s, v) in seed_grad[i * dim..][..dim].iter_mut().zip(g) {
                    *s += v * scale;
                }
            };
            put(base, &tg.query);
            put(base + 1, &tg.positive);
            for (k, gn) in tg.negatives.iter().enumerate() {
                put(base + 2 + k, gn);
            }
            base += 2 + t.negatives.len();
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        let seed_grad = Tensor::from_vec(desc.shape(), seed_grad)?;
        let back = bptt_step(g, f.descriptor, seed_grad)?;
        (back.params, back.bn_updates, loss)
    };
    opt.updates += 1;
    for &id in trainable {
        let Some(gr) = grads.get(id) else { continue };
        opt.apply(cfg.optimizer, cfg.lr, id, model.store.value_mut(id), gr);
    }
    apply_bn_updates(&mut model.store, &bn_updates, cfg.bn_momentum);
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        let q = [0.0, 0.0];
        let p = [0.2, 0.0];
        let n = [0.3, 0.0];
        assert!((triplet_loss(&q, &p, &[&n], 0.1).unwrap() - 0.05).abs() < 1e-12);
        let same = [0.0, 0.2];
        assert!((triplet_loss(&q, &p, &[&same[..]; 5], 0.1).unwrap() - 0.5).abs() < 1e-12);
        let far = [1.0, 0.0];
        assert_eq!(triplet_loss(&q, &p, &[&far], 0.1).unwrap(), 0.0);
        assert!(triplet_loss(&q, &p, &[&[1.0][..]], 0.1).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let q = [0.1, 0.5, -0.2];
        let p = [0.3, 0.1, 0.0];
        let n1 = [0.2, 0.4, -0.1];
        let n2 = [0.0, 0.6, -0.3];
        let g = triplet_loss_grad(&q, &p, &[&n1, &n2], 0.5).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let (mut a, mut b) = (q, q);
            a[i] += h;
            b[i] -= h;
            let fd = (triplet_loss(&a, &p, &[&n1, &n2], 0.5).unwrap() - triplet_loss(&b, &p, &[&n1, &n2], 0.5).unwrap()) / (2.0 * h);
            assert!((fd - g.query[i]).abs() < 1e-6);
            let (mut a, mut b) = (n2, n2);
            a[i] += h;
            b[i] -= h;
            let fd = (triplet_loss(&q, &p, &[&n1, &a], 0.5).unwrap() - triplet_loss(&q, &p, &[&n1, &b], 0.5).unwrap()) / (2.0 * h);
            assert!((fd - g.negatives[1][i]).abs() < 1e-6);
        }
    }

    fn planar(x: f64) -> Option<GeoPose> {
        Some(GeoPose::planar(0, x, 0.0).unwrap())
    }

    #[test]
    fn mining_examples() {
        let cfg = TrainConfig { negatives: 2, ..TrainConfig::default() };
        let qp = vec![planar(0.0), planar(10_000.0)];
        let dbp = vec![planar(5.0), planar(100.0), planar(200.0), planar(300.0)];
        let cache = DescriptorCache {
            query: vec![vec![0.0], vec![0.0]],
            database: vec![vec![0.0], vec![0.3], vec![0.2], vec![0.9]],
            ..Default::default()
        };
        let m = mine_triplets(&[0, 1], &qp, &dbp, &cache, &cfg, &mut Stream::new(0)).unwrap();
        assert_eq!(m.skipped, 1);
        assert_eq!(m.triplets, vec![Triplet { query: 0, positive: 0, negatives: vec![2, 1] }]);
        let close = vec![planar(5.0), planar(50.0)];
        assert!(mine_triplets(&[0], &qp, &close, &cache, &cfg, &mut Stream::new(0)).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { r_neg: 10.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { margin: 0.0, ..TrainConfig::default() }.validate().is_err());
    }
}
