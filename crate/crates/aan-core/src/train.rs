//! Model bundle, task heads, optimizers and the training loop. A model is
//! the extractor registry, one shared cell, the inverse cell and the task
//! heads; every batch rebuilds the tape, binds all parameters once and
//! encodes the batch's payloads grouped by domain.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cells::{BoundCell, BoundInverse, CellParams, InverseCell};
use crate::error::{Error, Result};
use crate::extract::{BoundRegistry, ExtractorRegistry};
use crate::propagate::{dfc, dfd, reconstruction_loss, ConvResult};
use crate::tensor::{Gradients, Tape, Tensor, Var};
use crate::tree::{NeuroTree, NodeId};

/// One labeled training item. `group` names the dataset the item came
/// from; metrics aggregate per group.
#[derive(Debug, Clone)]
pub struct Sample {
    pub tree: NeuroTree,
    pub label: usize,
    pub task: usize,
    pub group: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    /// One head serves every task; class counts must agree.
    Shared,
    PerTask,
}

impl HeadMode {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "shared" => HeadMode::Shared,
            "per-task" => HeadMode::PerTask,
            other => return Err(Error::Config(format!("unknown head mode {other:?}"))),
        })
    }
}

/// Affine classifier from the root hidden state.
#[derive(Debug, Clone)]
pub struct TaskHead {
    w: Tensor,
    b: Tensor,
}

impl TaskHead {
    pub fn init(classes: usize, f_prime: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (f_prime as f64).sqrt();
        TaskHead {
            w: Tensor::uniform(vec![classes, f_prime], bound, rng),
            b: Tensor::uniform(vec![classes], bound, rng),
        }
    }

    pub fn classes(&self) -> usize {
        self.w.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Supervised,
    Autoencoder,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "supervised" => Mode::Supervised,
            "autoencoder" => Mode::Autoencoder,
            other => return Err(Error::Config(format!("unknown mode {other:?}"))),
        })
    }
}

/// Everything learned, in one bundle.
#[derive(Debug)]
pub struct Model {
    pub registry: ExtractorRegistry,
    pub cell: CellParams,
    pub inverse: InverseCell,
    pub heads: Vec<TaskHead>,
    pub head_mode: HeadMode,
}

impl Model {
    pub fn head_index(&self, task: usize) -> Result<usize> {
        match self.head_mode {
            HeadMode::Shared => Ok(0),
            HeadMode::PerTask => {
                if task >= self.heads.len() {
                    return Err(Error::Config(format!(
                        "task {task} has no head (have {})",
                        self.heads.len()
                    )));
                }
                Ok(task)
            }
        }
    }

    pub fn bind<'m>(&'m self, tape: &Tape) -> BoundModel<'m> {
        let registry = self.registry.bind(tape);
        let cell = self.cell.bind(tape);
        let inverse = self.inverse.bind(tape);
        let mut heads = Vec::new();
        let mut params: Vec<(String, Var)> = Vec::new();
        params.extend(registry.params().iter().cloned());
        params.extend(cell.params().iter().cloned());
        params.extend(inverse.params().iter().cloned());
        for (i, h) in self.heads.iter().enumerate() {
            let (w, b) = (tape.leaf(&h.w), tape.leaf(&h.b));
            params.push((format!("head.{i}.w"), w));
            params.push((format!("head.{i}.b"), b));
            heads.push((w, b));
        }
        BoundModel {
            model: self,
            registry,
            cell,
            inverse,
            heads,
            params,
        }
    }

    /// Storage slots in the exact order [`BoundModel::params`] reports.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.registry.params_mut();
        out.extend(self.cell.params_mut());
        out.extend(self.inverse.params_mut());
        for (i, h) in self.heads.iter_mut().enumerate() {
            out.push((format!("head.{i}.w"), &mut h.w));
            out.push((format!("head.{i}.b"), &mut h.b));
        }
        out
    }
}

pub struct BoundModel<'m> {
    model: &'m Model,
    pub registry: BoundRegistry<'m>,
    pub cell: BoundCell<'m>,
    pub inverse: BoundInverse,
    heads: Vec<(Var, Var)>,
    params: Vec<(String, Var)>,
}

impl<'m> BoundModel<'m> {
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    /// Convolve one tree given its pre-encoded features.
    pub fn conv(
        &self,
        tape: &Tape,
        tree: &NeuroTree,
        features: &BTreeMap<NodeId, Var>,
    ) -> Result<ConvResult> {
        dfc(tape, &self.cell, &self.registry, tree, features)
    }

    pub fn logits(&self, tape: &Tape, task: usize, root_hidden: Var) -> Result<Var> {
        let idx = self.model.head_index(task)?;
        let (w, b) = self.heads[idx];
        tape.add(tape.matvec(w, root_hidden)?, b)
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        t: u64,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Optimizer::Sgd { lr }
    }

    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Apply one update. `params` and `grads` must be index-aligned, which
    /// the Model binding guarantees.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor)], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension(format!(
                "{} params vs {} gradients",
                params.len(),
                grads.len()
            )));
        }
        match self {
            Optimizer::Sgd { lr } => {
                for ((_, p), g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= *lr * gv;
                    }
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                t,
                m,
                v,
            } => {
                if m.is_empty() {
                    *m = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
                    *v = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
                }
                *t += 1;
                let bc1 = 1.0 - beta1.powi(*t as i32);
                let bc2 = 1.0 - beta2.powi(*t as i32);
                for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
                    for (j, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[i][j] = *beta1 * m[i][j] + (1.0 - *beta1) * gv;
                        v[i][j] = *beta2 * v[i][j] + (1.0 - *beta2) * gv * gv;
                        let mh = m[i][j] / bc1;
                        let vh = v[i][j] / bc2;
                        *pv -= *lr * mh / (vh.sqrt() + *eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: Mode,
    pub decode_adjacency: bool,
}

/// One metrics row, matching the CSV layout `epoch,domain,split,loss,accuracy`.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub epoch: usize,
    pub group: String,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Encode every payload node of the given trees, one encoder invocation
/// per distinct domain, keyed by (tree index, node id).
pub fn batch_features(
    tape: &Tape,
    registry: &BoundRegistry<'_>,
    trees: &[&NeuroTree],
) -> Result<BTreeMap<(usize, NodeId), Var>> {
    let mut items = Vec::new();
    for (ti, tree) in trees.iter().enumerate() {
        for id in tree.node_ids() {
            let node = tree.node(id)?;
            if let (Some(p), Some(d)) = (&node.payload, node.domain) {
                items.push(((ti, id), d, p));
            }
        }
    }
    registry.features_group(tape, &items)
}

fn tree_loss(
    tape: &Tape,
    bound: &BoundModel<'_>,
    sample: &Sample,
    features: BTreeMap<NodeId, Var>,
    mode: Mode,
    decode_adjacency: bool,
) -> Result<(Var, bool)> {
    let conv = bound.conv(tape, &sample.tree, &features)?;
    match mode {
        Mode::Supervised => {
            let logits = bound.logits(tape, sample.task, conv.root_hidden)?;
            let loss = tape.nll_loss(logits, sample.label)?;
            let correct = argmax(tape.value(logits).data()) == sample.label;
            Ok((loss, correct))
        }
        Mode::Autoencoder => {
            let deconv = dfd(
                tape,
                &bound.inverse,
                bound.cell.config().readout,
                &sample.tree,
                &conv,
                decode_adjacency,
            )?;
            let loss = reconstruction_loss(tape, &bound.registry, &sample.tree, &deconv)?;
            Ok((loss, false))
        }
    }
}

/// Mean loss and accuracy over `samples`, no parameter updates, grouped by
/// sample group.
pub fn evaluate(model: &Model, samples: &[Sample], opts: &TrainOptions) -> Result<Vec<(String, f64, f64)>> {
    let mut by_group: BTreeMap<String, (f64, usize, usize)> = BTreeMap::new();
    for chunk in samples.chunks(opts.batch_size.max(1)) {
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let trees: Vec<&NeuroTree> = chunk.iter().map(|s| &s.tree).collect();
        let mut all = batch_features(&tape, &bound.registry, &trees)?;
        for (i, sample) in chunk.iter().enumerate() {
            let features: BTreeMap<NodeId, Var> = all
                .iter()
                .filter(|((ti, _), _)| *ti == i)
                .map(|((_, id), &v)| (*id, v))
                .collect();
            let (loss, correct) =
                tree_loss(&tape, &bound, sample, features, opts.mode, opts.decode_adjacency)?;
            let e = by_group.entry(sample.group.clone()).or_insert((0.0, 0, 0));
            e.0 += tape.value(loss).data()[0];
            e.1 += 1;
            e.2 += usize::from(correct);
        }
        all.clear();
    }
    Ok(by_group
        .into_iter()
        .map(|(g, (loss, n, correct))| {
            let acc = match opts.mode {
                Mode::Supervised => correct as f64 / n as f64,
                Mode::Autoencoder => f64::NAN,
            };
            (g, loss / n as f64, acc)
        })
        .collect())
}

/// Full training run. Returns one metrics row per (epoch, group, split).
pub fn train(
    model: &mut Model,
    optimizer: &mut Optimizer,
    train_set: &[Sample],
    val_set: &[Sample],
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&[MetricRow]),
) -> Result<Vec<MetricRow>> {
    if train_set.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut rows = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=opts.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut group_stats: BTreeMap<String, (f64, usize, usize)> = BTreeMap::new();
        for chunk in order.chunks(opts.batch_size) {
            let tape = Tape::new();
            let bound = model.bind(&tape);
            let trees: Vec<&NeuroTree> = chunk.iter().map(|&i| &train_set[i].tree).collect();
            let all = batch_features(&tape, &bound.registry, &trees)?;
            let mut losses = Vec::with_capacity(chunk.len());
            for (bi, &si) in chunk.iter().enumerate() {
                let sample = &train_set[si];
                let features: BTreeMap<NodeId, Var> = all
                    .iter()
                    .filter(|((ti, _), _)| *ti == bi)
                    .map(|((_, id), &v)| (*id, v))
                    .collect();
                let (loss, correct) =
                    tree_loss(&tape, &bound, sample, features, opts.mode, opts.decode_adjacency)?;
                let e = group_stats.entry(sample.group.clone()).or_insert((0.0, 0, 0));
                e.0 += tape.value(loss).data()[0];
                e.1 += 1;
                e.2 += usize::from(correct);
                losses.push(loss);
            }
            let mut total = losses[0];
            for &l in &losses[1..] {
                total = tape.add(total, l)?;
            }
            let mean = tape.scale(total, 1.0 / losses.len() as f64);
            let grads: Gradients = tape.backward(mean)?;
            let grad_list: Vec<Tensor> =
                bound.params().iter().map(|&(_, v)| grads.get(v)).collect();
            drop(bound);
            let mut slots = model.params_mut();
            optimizer.step(&mut slots, &grad_list)?;
        }
        let mut epoch_rows = Vec::new();
        for (group, (loss, n, correct)) in group_stats {
            let acc = match opts.mode {
                Mode::Supervised => correct as f64 / n as f64,
                Mode::Autoencoder => f64::NAN,
            };
            epoch_rows.push(MetricRow {
                epoch,
                group,
                split: "train".into(),
                loss: loss / n as f64,
                accuracy: acc,
            });
        }
        if !val_set.is_empty() {
            for (group, loss, acc) in evaluate(model, val_set, opts)? {
                epoch_rows.push(MetricRow {
                    epoch,
                    group,
                    split: "val".into(),
                    loss,
                    accuracy: acc,
                });
            }
        }
        on_epoch(&epoch_rows);
        rows.extend(epoch_rows);
    }
    Ok(rows)
}
