//! Recursive propagation over neuro trees: depth-first convolution up to
//! the root and depth-first deconvolution back down, with memoization so a
//! node shared by several parents is computed exactly once per pass.
//!
//! The deconvolution processes a shared node only when the last of its
//! parents has reached it, which makes the downward processing order the
//! exact reverse of the upward completion order, also on DAGs.

use std::collections::BTreeMap;

use crate::cells::{BoundCell, BoundInverse, ChildState, Readout};
use crate::error::{Error, Result};
use crate::extract::BoundRegistry;
use crate::tensor::{Tape, Var};
use crate::tree::{NeuroTree, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PassKind {
    Conv,
    Deconv,
}

impl PassKind {
    pub fn label(self) -> &'static str {
        match self {
            PassKind::Conv => "dfc",
            PassKind::Deconv => "dfd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// The walk reached the node.
    Visit,
    /// The node's state was computed here.
    Compute,
    /// Memoized state reused.
    Cached,
    /// Deconvolution arrival deferred until the last parent reaches it.
    Defer,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Visit => "visit",
            Phase::Compute => "compute",
            Phase::Cached => "cached",
            Phase::Defer => "defer",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TraceEvent {
    pub pass: PassKind,
    pub phase: Phase,
    pub node: NodeId,
    pub depth: usize,
}

#[derive(Debug)]
pub struct NodeState {
    pub hidden: Var,
    /// Winning child row per hidden unit when max readout ran.
    pub readout_indices: Option<Vec<usize>>,
    /// Distance from the root at the first arrival.
    pub level: usize,
}

/// Everything one upward pass produced.
#[derive(Debug)]
pub struct ConvResult {
    pub root_hidden: Var,
    pub states: BTreeMap<NodeId, NodeState>,
    /// Nodes in the order their state finished computing.
    pub completion_order: Vec<NodeId>,
    /// Cell applications per node; memoization keeps each at one.
    pub compute_counts: BTreeMap<NodeId, usize>,
    pub trace: Vec<TraceEvent>,
}

/// Upward pass: children before parents, left child first, each node
/// computed once. `features` holds the encoded F+B input per payload node;
/// nodes absent from it get the zero input.
pub fn dfc(
    tape: &Tape,
    cell: &BoundCell<'_>,
    registry: &BoundRegistry<'_>,
    tree: &NeuroTree,
    features: &BTreeMap<NodeId, Var>,
) -> Result<ConvResult> {
    let report = tree.validate();
    if !report.passed() {
        return Err(Error::Validation(report.violations.join("; ")));
    }
    let mut out = ConvResult {
        root_hidden: tape.zeros(vec![1]),
        states: BTreeMap::new(),
        completion_order: Vec::new(),
        compute_counts: BTreeMap::new(),
        trace: Vec::new(),
    };

    fn visit(
        tape: &Tape,
        cell: &BoundCell<'_>,
        registry: &BoundRegistry<'_>,
        tree: &NeuroTree,
        features: &BTreeMap<NodeId, Var>,
        id: NodeId,
        level: usize,
        out: &mut ConvResult,
    ) -> Result<()> {
        out.trace.push(TraceEvent {
            pass: PassKind::Conv,
            phase: Phase::Visit,
            node: id,
            depth: level,
        });
        if let Some(state) = out.states.get(&id) {
            out.trace.push(TraceEvent {
                pass: PassKind::Conv,
                phase: Phase::Cached,
                node: id,
                depth: state.level,
            });
            return Ok(());
        }
        let node = tree.node(id)?;
        for &c in &node.children {
            visit(tape, cell, registry, tree, features, c, level + 1, out)?;
        }
        let children = if node.children.is_empty() {
            None
        } else {
            let rows: Vec<Var> = node
                .children
                .iter()
                .map(|c| out.states[c].hidden)
                .collect();
            Some(ChildState {
                hidden: tape.concat_rows(&rows)?,
                adjacency: &node.adjacency,
            })
        };
        let x = match features.get(&id) {
            Some(&v) => v,
            None => registry.zero_features(tape),
        };
        let step = cell.step(tape, x, children, level)?;
        *out.compute_counts.entry(id).or_insert(0) += 1;
        out.states.insert(
            id,
            NodeState {
                hidden: step.hidden,
                readout_indices: step.readout_indices,
                level,
            },
        );
        out.completion_order.push(id);
        out.trace.push(TraceEvent {
            pass: PassKind::Conv,
            phase: Phase::Compute,
            node: id,
            depth: level,
        });
        Ok(())
    }

    visit(tape, cell, registry, tree, features, tree.root(), 0, &mut out)?;
    out.root_hidden = out.states[&tree.root()].hidden;
    Ok(out)
}

/// Everything one downward pass produced. Reconstructions stay in F-space;
/// per-domain decoders map them back to raw space.
pub struct DeconvResult {
    /// Nodes in processing order.
    pub order: Vec<NodeId>,
    /// Reconstructed node input, width F, per node.
    pub decoded: BTreeMap<NodeId, Var>,
    /// Reconstructed sibling adjacency per node with children, as plain
    /// edge scores in (0, 1).
    pub decoded_adjacency: BTreeMap<NodeId, Vec<Vec<f64>>>,
    pub trace: Vec<TraceEvent>,
}

/// Downward pass: parents before children, right child first, a shared
/// node processed at its final arrival with its parents' contributions
/// summed.
pub fn dfd(
    tape: &Tape,
    inv: &BoundInverse,
    cell_readout: Readout,
    tree: &NeuroTree,
    conv: &ConvResult,
    decode_adjacency: bool,
) -> Result<DeconvResult> {
    let mut remaining = tree.parent_counts();
    let mut pending: BTreeMap<NodeId, Var> = BTreeMap::new();
    let mut out = DeconvResult {
        order: Vec::new(),
        decoded: BTreeMap::new(),
        decoded_adjacency: BTreeMap::new(),
        trace: Vec::new(),
    };

    #[allow(clippy::too_many_arguments)]
    fn process(
        tape: &Tape,
        inv: &BoundInverse,
        cell_readout: Readout,
        tree: &NeuroTree,
        conv: &ConvResult,
        decode_adjacency: bool,
        id: NodeId,
        h: Var,
        remaining: &mut BTreeMap<NodeId, usize>,
        pending: &mut BTreeMap<NodeId, Var>,
        out: &mut DeconvResult,
    ) -> Result<()> {
        let level = conv.states[&id].level;
        out.trace.push(TraceEvent {
            pass: PassKind::Deconv,
            phase: Phase::Compute,
            node: id,
            depth: level,
        });
        out.order.push(id);
        let (x_hat, seed) = inv.decode(tape, h)?;
        out.decoded.insert(id, x_hat);

        let node = tree.node(id)?;
        if node.children.is_empty() {
            return Ok(());
        }
        let n = node.children.len();
        // spread the seed back over child rows, inverting the readout
        let rows: Vec<Var> = match (&conv.states[&id].readout_indices, cell_readout) {
            (Some(idx), _) => {
                let m = tape.unpool(seed, idx, n)?;
                (0..n).map(|i| tape.row(m, i)).collect::<Result<_>>()?
            }
            (None, Readout::Mean) => {
                let share = tape.scale(seed, 1.0 / n as f64);
                vec![share; n]
            }
            (None, Readout::Max) => {
                return Err(Error::DecodeState(format!(
                    "node {id}: max readout left no indices to invert"
                )));
            }
        };
        if decode_adjacency {
            // edge score between sibling seeds; values only, no gradient
            let vals: Vec<Vec<f64>> = rows
                .iter()
                .map(|&r| tape.value(r).data().to_vec())
                .collect();
            let mut adj = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    let dot: f64 = vals[i].iter().zip(&vals[j]).map(|(a, b)| a * b).sum();
                    adj[i][j] = 1.0 / (1.0 + (-dot).exp());
                }
            }
            out.decoded_adjacency.insert(id, adj);
        }
        for (i, &c) in node.children.iter().enumerate().rev() {
            out.trace.push(TraceEvent {
                pass: PassKind::Deconv,
                phase: Phase::Visit,
                node: c,
                depth: level + 1,
            });
            let contrib = rows[i];
            let acc = match pending.remove(&c) {
                Some(prev) => tape.add(prev, contrib)?,
                None => contrib,
            };
            let left = remaining
                .get_mut(&c)
                .ok_or(Error::UnknownNode(c))?;
            *left -= 1;
            if *left == 0 {
                process(
                    tape,
                    inv,
                    cell_readout,
                    tree,
                    conv,
                    decode_adjacency,
                    c,
                    acc,
                    remaining,
                    pending,
                    out,
                )?;
            } else {
                pending.insert(c, acc);
                out.trace.push(TraceEvent {
                    pass: PassKind::Deconv,
                    phase: Phase::Defer,
                    node: c,
                    depth: level + 1,
                });
            }
        }
        Ok(())
    }

    process(
        tape,
        inv,
        cell_readout,
        tree,
        conv,
        decode_adjacency,
        tree.root(),
        conv.root_hidden,
        &mut remaining,
        &mut pending,
        &mut out,
    )?;
    if !pending.is_empty() {
        return Err(Error::DecodeState(format!(
            "nodes never reached their final arrival: {:?}",
            pending.keys().collect::<Vec<_>>()
        )));
    }
    Ok(out)
}

/// Sum of per-node mean squared reconstruction errors over payload nodes,
/// comparing each decoded input against its domain's target.
pub fn reconstruction_loss(
    tape: &Tape,
    registry: &BoundRegistry<'_>,
    tree: &NeuroTree,
    deconv: &DeconvResult,
) -> Result<Var> {
    let mut terms = Vec::new();
    for (&id, &x_hat) in &deconv.decoded {
        let node = tree.node(id)?;
        let (Some(payload), Some(domain)) = (&node.payload, node.domain) else {
            continue;
        };
        let recon = registry.decode_one(tape, domain, x_hat)?;
        let target = registry.decode_target(tape, domain, payload)?;
        let d = tape.sub(recon, target)?;
        let width = tape.shape_of(d)[0] as f64;
        terms.push(tape.scale(tape.sum(tape.mul(d, d)?), 1.0 / width));
    }
    if terms.is_empty() {
        return Err(Error::EmptyInput(
            "reconstruction loss over a tree with no payload nodes".into(),
        ));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / terms.len() as f64))
}

/// Copy the pass outputs into the tree's decode slots as plain values.
pub fn write_decoded(
    tree: &mut NeuroTree,
    tape: &Tape,
    registry: &BoundRegistry<'_>,
    deconv: &DeconvResult,
) -> Result<()> {
    for (&id, &x_hat) in &deconv.decoded {
        let domain = tree.node(id)?.domain;
        let value = match domain {
            Some(d) => tape.value(registry.decode_one(tape, d, x_hat)?),
            None => tape.value(x_hat),
        };
        tree.node_mut(id)?.decoded_x = Some(value.data().to_vec());
    }
    for (&id, adj) in &deconv.decoded_adjacency {
        tree.node_mut(id)?.decoded_adjacency = Some(adj.clone());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{CellConfig, CellKind, CellParams, InverseCell, Readout};
    use crate::extract::{ExtractorKind, ExtractorRegistry, RawSpec};
    use crate::tree::{Adjacency, NeuroNode, Payload};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn registry() -> ExtractorRegistry {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        ExtractorRegistry::new(
            3,
            vec![(
                "num".into(),
                RawSpec::Numeric { width: 2 },
                ExtractorKind::Affine,
            )],
            &mut rng,
        )
        .unwrap()
    }

    fn cell(kind: CellKind, readout: Readout) -> CellParams {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        CellParams::init(
            CellConfig {
                kind,
                f: 3,
                b: 1,
                f_prime: 4,
                heads: 2,
                max_depth: 8,
                readout,
            },
            &mut rng,
        )
        .unwrap()
    }

    fn payload_features<'r>(
        tape: &Tape,
        bound: &BoundRegistry<'r>,
        tree: &NeuroTree,
    ) -> BTreeMap<NodeId, Var> {
        let mut features = BTreeMap::new();
        for id in tree.node_ids() {
            let node = tree.node(id).unwrap();
            if let (Some(p), Some(d)) = (&node.payload, node.domain) {
                features.insert(id, bound.features(tape, d, p).unwrap());
            }
        }
        features
    }

    fn diamond() -> NeuroTree {
        let mut tree = NeuroTree::with_root(NeuroNode::new(0));
        tree.insert_node(NeuroNode::new(1)).unwrap();
        tree.insert_node(NeuroNode::new(2)).unwrap();
        tree.insert_node(NeuroNode::with_payload(
            3,
            Payload::Numeric(vec![0.7, -0.2]),
            0,
        ))
        .unwrap();
        tree.add_child(0, 1, Adjacency::zero(1)).unwrap();
        tree.add_child(0, 2, Adjacency::zero(2)).unwrap();
        tree.add_child(1, 3, Adjacency::zero(1)).unwrap();
        tree.add_child(2, 3, Adjacency::zero(1)).unwrap();
        tree
    }

    #[test]
    fn chain_conv_computes_each_node_once_leaf_first() {
        let reg = registry();
        let params = cell(CellKind::Ran, Readout::Max);
        let tree = NeuroTree::build_chain(
            (0..5).map(|i| Payload::Numeric(vec![i as f64, 0.0])).collect(),
            0,
        )
        .unwrap();
        let tape = Tape::new();
        let bound = reg.bind(&tape);
        let c = params.bind(&tape);
        let features = payload_features(&tape, &bound, &tree);
        let conv = dfc(&tape, &c, &bound, &tree, &features).unwrap();
        assert_eq!(conv.completion_order, vec![0, 1, 2, 3, 4]);
        assert!(conv.compute_counts.values().all(|&c| c == 1));
        assert_eq!(tape.shape_of(conv.root_hidden), vec![4]);
    }

    #[test]
    fn shared_node_is_computed_once_and_reused() {
        let reg = registry();
        let params = cell(CellKind::Ran, Readout::Max);
        let tree = diamond();
        let tape = Tape::new();
        let bound = reg.bind(&tape);
        let c = params.bind(&tape);
        let features = payload_features(&tape, &bound, &tree);
        let conv = dfc(&tape, &c, &bound, &tree, &features).unwrap();
        assert_eq!(conv.compute_counts[&3], 1);
        assert_eq!(conv.completion_order, vec![3, 1, 2, 0]);
        let cached = conv
            .trace
            .iter()
            .filter(|e| e.phase == Phase::Cached)
            .count();
        assert_eq!(cached, 1);
    }

    #[test]
    fn deconv_order_reverses_conv_completion_on_the_diamond() {
        let reg = registry();
        let params = cell(CellKind::Ran, Readout::Max);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inv = InverseCell::init(3, 4, &mut rng);
        let tree = diamond();
        let tape = Tape::new();
        let bound = reg.bind(&tape);
        let c = params.bind(&tape);
        let features = payload_features(&tape, &bound, &tree);
        let conv = dfc(&tape, &c, &bound, &tree, &features).unwrap();
        let binv = inv.bind(&tape);
        let deconv = dfd(&tape, &binv, Readout::Max, &tree, &conv, false).unwrap();
        let mut want = conv.completion_order.clone();
        want.reverse();
        assert_eq!(deconv.order, want);
        assert_eq!(deconv.decoded.len(), 4);
    }

    #[test]
    fn deconv_reverses_conv_on_a_chain() {
        let reg = registry();
        let params = cell(CellKind::Gaau, Readout::Max);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inv = InverseCell::init(3, 4, &mut rng);
        let tree = NeuroTree::build_chain(
            (0..6).map(|i| Payload::Numeric(vec![i as f64, 1.0])).collect(),
            0,
        )
        .unwrap();
        let tape = Tape::new();
        let bound = reg.bind(&tape);
        let c = params.bind(&tape);
        let features = payload_features(&tape, &bound, &tree);
        let conv = dfc(&tape, &c, &bound, &tree, &features).unwrap();
        let binv = inv.bind(&tape);
        let deconv = dfd(&tape, &binv, Readout::Max, &tree, &conv, false).unwrap();
        let mut want = conv.completion_order.clone();
        want.reverse();
        assert_eq!(deconv.order, want);
    }

    #[test]
    fn autoencoder_loss_backward_reaches_every_parameter_on_the_diamond() {
        let reg = registry();
        let params = cell(CellKind::Ran, Readout::Max);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inv = InverseCell::init(3, 4, &mut rng);
        let tree = diamond();
        let tape = Tape::new();
        let bound = reg.bind(&tape);
        let c = params.bind(&tape);
        let features = payload_features(&tape, &bound, &tree);
        let conv = dfc(&tape, &c, &bound, &tree, &features).unwrap();
        let binv = inv.bind(&tape);
        let deconv = dfd(&tape, &binv, Readout::Max, &tree, &conv, false).unwrap();
        let loss = reconstruction_loss(&tape, &bound, &tree, &deconv).unwrap();
        let grads = tape.backward(loss).unwrap();
        let (_, wv) = c.params()[0];
        let g = grads.get(wv);
        assert!(g.data().iter().any(|&x| x != 0.0), "cell weight untouched");
        let (_, dv) = binv.params()[0];
        assert!(grads.get(dv).data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn write_decoded_fills_tree_slots() {
        let reg = registry();
        let params = cell(CellKind::Gau, Readout::Max);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let inv = InverseCell::init(3, 4, &mut rng);
        let mut tree = NeuroTree::build_star(
            vec![
                Payload::Numeric(vec![1.0, 2.0]),
                Payload::Numeric(vec![-1.0, 0.5]),
            ],
            vec![0, 0],
            Adjacency::complete(2),
        )
        .unwrap();
        let tape = Tape::new();
        let bound = reg.bind(&tape);
        let c = params.bind(&tape);
        let features = payload_features(&tape, &bound, &tree);
        let conv = dfc(&tape, &c, &bound, &tree, &features).unwrap();
        let binv = inv.bind(&tape);
        let deconv = dfd(&tape, &binv, Readout::Max, &tree, &conv, true).unwrap();
        write_decoded(&mut tree, &tape, &bound, &deconv).unwrap();
        // payload children decode to raw width 2
        assert_eq!(tree.node(0).unwrap().decoded_x.as_ref().unwrap().len(), 2);
        let root_adj = tree.node(2).unwrap().decoded_adjacency.as_ref().unwrap();
        assert_eq!(root_adj.len(), 2);
        assert!(root_adj
            .iter()
            .flatten()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn conv_rejects_invalid_trees() {
        let reg = registry();
        let params = cell(CellKind::Ran, Readout::Max);
        // payload without a domain tag
        let mut bad = NeuroNode::new(0);
        bad.payload = Some(Payload::Numeric(vec![1.0, 2.0]));
        let tree = NeuroTree::with_root(bad);
        let tape = Tape::new();
        let bound = reg.bind(&tape);
        let c = params.bind(&tape);
        let err = dfc(&tape, &c, &bound, &tree, &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn trace_phases_cover_both_passes() {
        let reg = registry();
        let params = cell(CellKind::Ran, Readout::Max);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let inv = InverseCell::init(3, 4, &mut rng);
        let tree = diamond();
        let tape = Tape::new();
        let bound = reg.bind(&tape);
        let c = params.bind(&tape);
        let features = payload_features(&tape, &bound, &tree);
        let conv = dfc(&tape, &c, &bound, &tree, &features).unwrap();
        let binv = inv.bind(&tape);
        let deconv = dfd(&tape, &binv, Readout::Max, &tree, &conv, false).unwrap();
        assert!(conv.trace.iter().any(|e| e.phase == Phase::Compute));
        // the shared leaf defers once on its first arrival
        assert_eq!(
            deconv
                .trace
                .iter()
                .filter(|e| e.phase == Phase::Defer)
                .count(),
            1
        );
        for e in conv.trace.iter().chain(&deconv.trace) {
            assert!(!e.pass.label().is_empty() && !e.phase.label().is_empty());
        }
    }
}
