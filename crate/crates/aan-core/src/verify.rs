//! Self-check suites runnable from the CLI and reused by the integration
//! tests: special-case equivalences against the straight-line oracles,
//! finite-difference gradient checks, traversal laws on random DAGs,
//! batched-encoding equality and attention normalization.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cells::{
    masked_attention, CellConfig, CellKind, CellParams, InverseCell, Readout,
};
use crate::data::random_dag;
use crate::error::{Error, Result};
use crate::extract::{ExtractorKind, ExtractorRegistry, RawSpec};
use crate::oracles;
use crate::propagate::{dfc, dfd};
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{HeadMode, Model, TaskHead};
use crate::tree::{Adjacency, NeuroNode, NeuroTree, NodeId, Payload};

/// Largest coordinate difference accepted in the model equivalences.
pub const TOL_EQUIV: f64 = 1e-12;
/// Relative error bound for finite-difference gradient checks.
pub const TOL_GRAD: f64 = 1e-5;
/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Gradient agreement between a shared node and its unrolled copy.
pub const TOL_SHARED_GRAD: f64 = 1e-10;
/// Attention row sums must hit one this tightly.
pub const TOL_ATTENTION: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: String,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn check(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|i| (0..t.cols()).map(|j| t.at(i, j)).collect())
        .collect()
}

fn value_of(tape: &Tape, params: &[(String, Var)], name: &str) -> Tensor {
    let (_, v) = params
        .iter()
        .find(|(n, _)| n == name)
        .unwrap_or_else(|| panic!("no parameter named {name}"));
    tape.value(*v)
}

/// Column slice `[a, b)` of each row.
fn block(rows: &[Vec<f64>], a: usize, b: usize) -> Vec<Vec<f64>> {
    rows.iter().map(|r| r[a..b].to_vec()).collect()
}

fn tagged(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    v.push(1.0); // one-hot tag of the only domain
    v
}

fn identity_registry(f: usize, rng: &mut ChaCha8Rng) -> ExtractorRegistry {
    ExtractorRegistry::new(
        f,
        vec![(
            "raw".into(),
            RawSpec::Numeric { width: f },
            ExtractorKind::Identity,
        )],
        rng,
    )
    .expect("identity registry")
}

fn cell_config(kind: CellKind, f: usize, f_prime: usize, max_depth: usize) -> CellConfig {
    CellConfig {
        kind,
        f,
        b: 1,
        f_prime,
        heads: 1,
        max_depth,
        readout: Readout::Max,
    }
}

fn features_for(
    tape: &Tape,
    bound: &crate::extract::BoundRegistry<'_>,
    tree: &NeuroTree,
) -> Result<BTreeMap<NodeId, Var>> {
    let mut out = BTreeMap::new();
    for id in tree.node_ids() {
        let node = tree.node(id)?;
        if let (Some(p), Some(d)) = (&node.payload, node.domain) {
            out.insert(id, bound.features(tape, d, p)?);
        }
    }
    Ok(out)
}

/// Chains drive the shared-weight cell exactly like an Elman recurrence.
fn check_rnn_equivalence(seeds: u64, max_depth: usize) -> CheckResult {
    let (f, fp) = (4, 5);
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reg = identity_registry(f, &mut rng);
        let cell = CellParams::init(cell_config(CellKind::Ran, f, fp, max_depth), &mut rng)
            .expect("ran init");
        for depth in 1..=max_depth {
            let xs: Vec<Vec<f64>> = (0..depth)
                .map(|_| (0..f).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let tree = NeuroTree::build_chain(
                xs.iter().cloned().map(Payload::Numeric).collect(),
                0,
            )
            .expect("chain");
            let tape = Tape::new();
            let bound = reg.bind(&tape);
            let c = cell.bind(&tape);
            let features = features_for(&tape, &bound, &tree).expect("features");
            let conv = dfc(&tape, &c, &bound, &tree, &features).expect("dfc");
            let got = tape.value(conv.root_hidden);
            let w = rows_of(&value_of(&tape, c.params(), "cell.w"));
            let oracle_xs: Vec<Vec<f64>> = xs.iter().map(|x| tagged(x)).collect();
            let want = oracles::rnn_forward(&w, &oracle_xs);
            for (g, w) in got.data().iter().zip(&want) {
                worst = worst.max((g - w).abs());
            }
        }
    }
    check(
        "chain-equals-rnn",
        worst <= TOL_EQUIV,
        format!("max |diff| {worst:.3e} over {seeds} seeds, depths 1..={max_depth}"),
    )
}

/// A chain of payload-less nodes above a single input leaf behaves as a
/// feed-forward stack with per-level weights.
fn check_mlp_equivalence() -> CheckResult {
    let (f, fp) = (4, 5);
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let reg = identity_registry(f, &mut rng);
        for depth in 1..=5usize {
            let cell = CellParams::init(cell_config(CellKind::Lan, f, fp, depth), &mut rng)
                .expect("lan init");
            // ids: 0 root ... depth leaf; only the leaf has a payload
            let mut tree = NeuroTree::with_root(NeuroNode::new(0));
            let x: Vec<f64> = (0..f).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for id in 1..=depth {
                let node = if id == depth {
                    NeuroNode::with_payload(id, Payload::Numeric(x.clone()), 0)
                } else {
                    NeuroNode::new(id)
                };
                tree.insert_node(node).expect("insert");
                tree.add_child(id - 1, id, Adjacency::zero(1)).expect("link");
            }
            let tape = Tape::new();
            let bound = reg.bind(&tape);
            let c = cell.bind(&tape);
            let features = features_for(&tape, &bound, &tree).expect("features");
            let conv = dfc(&tape, &c, &bound, &tree, &features).expect("dfc");
            let got = tape.value(conv.root_hidden);

            let level_w: Vec<Vec<Vec<f64>>> = (0..=depth)
                .map(|lv| rows_of(&value_of(&tape, c.params(), &format!("cell.lv{lv}.w"))))
                .collect();
            let in_width = f + 1;
            let w_in = block(&level_w[depth], 0, in_width);
            let hidden: Vec<Vec<Vec<f64>>> = (0..depth)
                .rev()
                .map(|lv| block(&level_w[lv], in_width, in_width + fp))
                .collect();
            let want = oracles::mlp_forward(&w_in, &hidden, &tagged(&x));
            for (g, w) in got.data().iter().zip(&want) {
                worst = worst.max((g - w).abs());
            }
        }
    }
    check(
        "layer-chain-equals-mlp",
        worst <= TOL_EQUIV,
        format!("max |diff| {worst:.3e} over depths 1..=5"),
    )
}

fn random_plain_tree(
    next_id: &mut usize,
    depth: usize,
    f: usize,
    rng: &mut ChaCha8Rng,
) -> (NeuroNode, Vec<NeuroNode>, oracles::RecTree) {
    let x: Vec<f64> = (0..f).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let id = *next_id;
    *next_id += 1;
    let mut node = NeuroNode::with_payload(id, Payload::Numeric(x.clone()), 0);
    let mut extra = Vec::new();
    let mut children = Vec::new();
    if depth > 0 {
        let arity = rng.gen_range(1..=3);
        for _ in 0..arity {
            let (child, mut rest, rec) = random_plain_tree(next_id, depth - 1, f, rng);
            node.children.push(child.id);
            extra.push(child);
            extra.append(&mut rest);
            children.push(rec);
        }
        node.adjacency = Adjacency::zero(node.children.len());
    }
    (
        node,
        extra,
        oracles::RecTree {
            x: tagged(&x),
            children,
        },
    )
}

/// With empty sibling adjacency the normalized mixing matrix is the
/// identity, so the cell reduces to a recursive network with column-max
/// child pooling.
fn check_recursive_equivalence() -> CheckResult {
    let (f, fp) = (4, 5);
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let reg = identity_registry(f, &mut rng);
        let cell =
            CellParams::init(cell_config(CellKind::Ran, f, fp, 8), &mut rng).expect("ran init");
        let mut next_id = 0;
        let (root, rest, rec) = random_plain_tree(&mut next_id, 3, f, &mut rng);
        let root_id = root.id;
        let mut tree = NeuroTree::with_root(root);
        for n in rest {
            tree.insert_node(n).expect("insert");
        }
        assert_eq!(tree.root(), root_id);
        let tape = Tape::new();
        let bound = reg.bind(&tape);
        let c = cell.bind(&tape);
        let features = features_for(&tape, &bound, &tree).expect("features");
        let conv = dfc(&tape, &c, &bound, &tree, &features).expect("dfc");
        let got = tape.value(conv.root_hidden);
        let w = rows_of(&value_of(&tape, c.params(), "cell.w"));
        let want = oracles::recursive_forward(&w, fp, &rec);
        for (g, w) in got.data().iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
    }
    check(
        "zero-adjacency-equals-recursive-net",
        worst <= TOL_EQUIV,
        format!("max |diff| {worst:.3e} over 20 random trees"),
    )
}

/// One level over a sibling star is a graph-convolution block: encode
/// rows, mix by the normalized adjacency, pool, map out.
fn check_gcn_equivalence() -> CheckResult {
    let (f, fp) = (4, 5);
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let reg = identity_registry(f, &mut rng);
        let cell =
            CellParams::init(cell_config(CellKind::Lan, f, fp, 1), &mut rng).expect("lan init");
        let n = rng.gen_range(2..=5);
        let xs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..f).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut adj = Adjacency::zero(n);
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.gen_bool(0.5) {
                    adj.set(i, j, 1);
                    adj.set(j, i, 1);
                }
            }
        }
        let tree = NeuroTree::build_star(
            xs.iter().cloned().map(Payload::Numeric).collect(),
            vec![0; n],
            adj.clone(),
        )
        .expect("star");
        let tape = Tape::new();
        let bound = reg.bind(&tape);
        let c = cell.bind(&tape);
        let features = features_for(&tape, &bound, &tree).expect("features");
        let conv = dfc(&tape, &c, &bound, &tree, &features).expect("dfc");
        let got = tape.value(conv.root_hidden);

        let in_width = f + 1;
        let w1 = rows_of(&value_of(&tape, c.params(), "cell.lv1.w"));
        let w0 = rows_of(&value_of(&tape, c.params(), "cell.lv0.w"));
        let w_leaf = block(&w1, 0, in_width);
        let w_out = block(&w0, in_width, in_width + fp);
        let tagged_xs: Vec<Vec<f64>> = xs.iter().map(|x| tagged(x)).collect();
        let want = oracles::gcn_star_forward(&w_leaf, &w_out, &tagged_xs, &adj.rows());
        for (g, w) in got.data().iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
    }
    check(
        "sibling-star-equals-gcn-block",
        worst <= TOL_EQUIV,
        format!("max |diff| {worst:.3e} over 20 random stars"),
    )
}

pub fn equivalence_suite() -> SuiteReport {
    SuiteReport {
        name: "equivalence".into(),
        checks: vec![
            check_rnn_equivalence(20, 10),
            check_mlp_equivalence(),
            check_recursive_equivalence(),
            check_gcn_equivalence(),
        ],
    }
}

fn random_model(seed: u64) -> (Model, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds = [
        CellKind::Ran,
        CellKind::Lan,
        CellKind::Raan,
        CellKind::Laan,
        CellKind::Gau,
        CellKind::Gaau,
    ];
    let kind = kinds[rng.gen_range(0..kinds.len())];
    let readout = if rng.gen_bool(0.5) {
        Readout::Max
    } else {
        Readout::Mean
    };
    let (f, fp) = (3, 4);
    let registry = ExtractorRegistry::new(
        f,
        vec![(
            "num".into(),
            RawSpec::Numeric { width: 3 },
            ExtractorKind::Affine,
        )],
        &mut rng,
    )
    .expect("registry");
    let cell = CellParams::init(
        CellConfig {
            kind,
            f,
            b: 1,
            f_prime: fp,
            heads: 2,
            max_depth: 10,
            readout,
        },
        &mut rng,
    )
    .expect("cell");
    let inverse = InverseCell::init(f, fp, &mut rng);
    let heads = vec![TaskHead::init(3, fp, &mut rng)];
    (
        Model {
            registry,
            cell,
            inverse,
            heads,
            head_mode: HeadMode::Shared,
        },
        rng,
    )
}

fn supervised_loss(model: &Model, tree: &NeuroTree, label: usize) -> f64 {
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let features = features_for(&tape, &bound.registry, tree).expect("features");
    let conv = bound.conv(&tape, tree, &features).expect("dfc");
    let logits = bound.logits(&tape, 0, conv.root_hidden).expect("logits");
    let loss = tape.nll_loss(logits, label).expect("loss");
    tape.value(loss).data()[0]
}

/// Backpropagated gradients against central finite differences, sampled
/// coordinates across every parameter of randomly drawn models and trees.
pub fn gradient_suite(configs: usize) -> SuiteReport {
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for cfg in 0..configs as u64 {
        let (mut model, mut rng) = random_model(1000 + cfg);
        let n_nodes = rng.gen_range(2..=6);
        let tree = random_dag(n_nodes, 3, 0, &mut rng).expect("dag");
        let label = rng.gen_range(0..3);

        // analytic gradients
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let features = features_for(&tape, &bound.registry, &tree).expect("features");
        let conv = bound.conv(&tape, &tree, &features).expect("dfc");
        let logits = bound.logits(&tape, 0, conv.root_hidden).expect("logits");
        let loss = tape.nll_loss(logits, label).expect("loss");
        let grads = tape.backward(loss).expect("backward");
        let analytic: Vec<(String, Tensor)> = bound
            .params()
            .iter()
            .map(|(n, v)| (n.clone(), grads.get(*v)))
            .collect();
        drop(bound);

        // sampled coordinates, finite differences
        let n_params = analytic.len();
        for _ in 0..12 {
            let pi = rng.gen_range(0..n_params);
            let numel = analytic[pi].1.numel();
            let ci = rng.gen_range(0..numel);
            let a = analytic[pi].1.data()[ci];

            let orig = {
                let mut slots = model.params_mut();
                let v = slots[pi].1.data()[ci];
                slots[pi].1.data_mut()[ci] = v + FD_STEP;
                v
            };
            let up = supervised_loss(&model, &tree, label);
            model.params_mut()[pi].1.data_mut()[ci] = orig - FD_STEP;
            let down = supervised_loss(&model, &tree, label);
            model.params_mut()[pi].1.data_mut()[ci] = orig;

            let numeric = (up - down) / (2.0 * FD_STEP);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > worst {
                worst = rel;
                worst_at = format!("config {cfg} param {} coord {ci}", analytic[pi].0);
            }
        }
    }
    SuiteReport {
        name: "gradients".into(),
        checks: vec![check(
            "backprop-matches-finite-differences",
            worst <= TOL_GRAD,
            format!("worst relative error {worst:.3e} ({worst_at}) over {configs} configs"),
        )],
    }
}

/// Traversal laws on random DAGs: one computation per node per pass, the
/// downward order is the exact reverse of the upward completion order,
/// and sharing a node gives the same gradients as unrolling it.
pub fn traversal_suite(dags: usize) -> SuiteReport {
    let mut checks = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut reverse_ok = true;
    let mut counts_ok = true;
    let mut detail = String::new();
    for i in 0..dags {
        let (model, _) = random_model(5000 + i as u64);
        let n_nodes = 3 + (i % 10);
        let tree = random_dag(n_nodes, 3, 0, &mut rng).expect("dag");
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let features = features_for(&tape, &bound.registry, &tree).expect("features");
        let conv = bound.conv(&tape, &tree, &features).expect("dfc");
        if conv.compute_counts.values().any(|&c| c != 1) {
            counts_ok = false;
            detail = format!("dag {i}: node computed more than once");
        }
        let deconv = dfd(
            &tape,
            &bound.inverse,
            bound.cell.config().readout,
            &tree,
            &conv,
            false,
        )
        .expect("dfd");
        let mut want = conv.completion_order.clone();
        want.reverse();
        if deconv.order != want {
            reverse_ok = false;
            detail = format!("dag {i}: order {:?} vs reversed {:?}", deconv.order, want);
        }
    }
    checks.push(check(
        "one-computation-per-node",
        counts_ok,
        if counts_ok {
            format!("{dags} DAGs")
        } else {
            detail.clone()
        },
    ));
    checks.push(check(
        "deconv-reverses-conv",
        reverse_ok,
        if reverse_ok {
            format!("{dags} DAGs")
        } else {
            detail.clone()
        },
    ));
    checks.push(shared_gradient_check());
    SuiteReport {
        name: "traversal".into(),
        checks,
    }
}

/// Diamond with one shared leaf versus the same diamond with the leaf
/// duplicated: losses and cell gradients must agree.
fn shared_gradient_check() -> CheckResult {
    let (model, _) = random_model(9999);
    let x = vec![0.6, -0.3, 0.2];

    let build = |shared: bool| -> NeuroTree {
        let mut tree = NeuroTree::with_root(NeuroNode::new(0));
        tree.insert_node(NeuroNode::new(1)).unwrap();
        tree.insert_node(NeuroNode::new(2)).unwrap();
        tree.insert_node(NeuroNode::with_payload(3, Payload::Numeric(x.clone()), 0))
            .unwrap();
        tree.add_child(0, 1, Adjacency::zero(1)).unwrap();
        tree.add_child(0, 2, Adjacency::zero(2)).unwrap();
        tree.add_child(1, 3, Adjacency::zero(1)).unwrap();
        if shared {
            tree.add_child(2, 3, Adjacency::zero(1)).unwrap();
        } else {
            tree.insert_node(NeuroNode::with_payload(4, Payload::Numeric(x.clone()), 0))
                .unwrap();
            tree.add_child(2, 4, Adjacency::zero(1)).unwrap();
        }
        tree
    };

    let run = |tree: &NeuroTree| -> (f64, Vec<(String, Tensor)>) {
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let features = features_for(&tape, &bound.registry, tree).expect("features");
        let conv = bound.conv(&tape, tree, &features).expect("dfc");
        let loss = tape.sum(conv.root_hidden);
        let grads = tape.backward(loss).expect("backward");
        let g = bound
            .params()
            .iter()
            .map(|(n, v)| (n.clone(), grads.get(*v)))
            .collect();
        (tape.value(loss).data()[0], g)
    };

    let (loss_s, grads_s) = run(&build(true));
    let (loss_u, grads_u) = run(&build(false));
    let mut worst = (loss_s - loss_u).abs();
    for ((_, a), (_, b)) in grads_s.iter().zip(&grads_u) {
        for (x, y) in a.data().iter().zip(b.data()) {
            worst = worst.max((x - y).abs());
        }
    }
    check(
        "shared-node-gradients-match-unrolled",
        worst <= TOL_SHARED_GRAD,
        format!("max |diff| {worst:.3e}"),
    )
}

/// Grouped encoding must be bitwise identical to one-at-a-time encoding
/// and must invoke each domain's encoder exactly once per batch.
pub fn batching_suite(batches: usize) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let reg = ExtractorRegistry::new(
        4,
        vec![
            (
                "a".into(),
                RawSpec::Numeric { width: 2 },
                ExtractorKind::Affine,
            ),
            (
                "b".into(),
                RawSpec::Tokens { vocab: 9 },
                ExtractorKind::TokenMean,
            ),
            (
                "c".into(),
                RawSpec::Numeric { width: 3 },
                ExtractorKind::Mlp { hidden: 5 },
            ),
        ],
        &mut rng,
    )
    .expect("registry");
    let mut bitwise_ok = true;
    let mut counts_ok = true;
    let mut detail = String::new();
    for batch in 0..batches {
        let n = rng.gen_range(1..=6);
        let payloads: Vec<(usize, Payload)> = (0..n)
            .map(|_| {
                let d = rng.gen_range(0..3usize);
                let p = match d {
                    0 => Payload::Numeric(vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]),
                    1 => {
                        let len = rng.gen_range(1..=4);
                        Payload::Tokens((0..len).map(|_| rng.gen_range(0..9)).collect())
                    }
                    _ => Payload::Numeric(
                        (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    ),
                };
                (d, p)
            })
            .collect();

        let tape_one = Tape::new();
        let bound_one = reg.bind(&tape_one);
        let singles: Vec<Vec<u64>> = payloads
            .iter()
            .map(|(d, p)| {
                tape_one
                    .value(bound_one.encode_one(&tape_one, *d, p).expect("encode"))
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect()
            })
            .collect();

        let tape_g = Tape::new();
        let bound_g = reg.bind(&tape_g);
        let items: Vec<(usize, usize, &Payload)> = payloads
            .iter()
            .enumerate()
            .map(|(i, (d, p))| (i, *d, p))
            .collect();
        reg.reset_call_counts();
        let grouped = bound_g.encode_group(&tape_g, &items).expect("group");
        for (i, single) in singles.iter().enumerate() {
            let bits: Vec<u64> = tape_g
                .value(grouped[&i])
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect();
            if &bits != single {
                bitwise_ok = false;
                detail = format!("batch {batch} item {i} differs");
            }
        }
        for d in 0..3 {
            let present = payloads.iter().any(|(pd, _)| *pd == d);
            let want = usize::from(present);
            if reg.call_count(d) != want {
                counts_ok = false;
                detail = format!(
                    "batch {batch} domain {d}: {} invocations, expected {want}",
                    reg.call_count(d)
                );
            }
        }
    }
    SuiteReport {
        name: "batching".into(),
        checks: vec![
            check(
                "grouped-encoding-bitwise-equal",
                bitwise_ok,
                if bitwise_ok {
                    format!("{batches} batches")
                } else {
                    detail.clone()
                },
            ),
            check(
                "one-invocation-per-domain",
                counts_ok,
                if counts_ok {
                    format!("{batches} batches")
                } else {
                    detail
                },
            ),
        ],
    }
}

/// Attention rows are probability distributions over the unmasked
/// entries, and multi-head outputs keep the configured hidden width.
pub fn attention_suite(trials: usize) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut rows_ok = true;
    let mut mask_ok = true;
    let mut detail = String::new();
    for t in 0..trials {
        let n = rng.gen_range(1..=6);
        let mut adj = Adjacency::zero(n);
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.gen_bool(0.5) {
                    adj.set(i, j, 1);
                    adj.set(j, i, 1);
                }
            }
        }
        let tape = Tape::new();
        let h = tape.leaf(&Tensor::uniform(vec![n, 4], 2.0, &mut rng));
        let a = tape.leaf(&Tensor::uniform(vec![8], 2.0, &mut rng));
        let alpha = tape.value(masked_attention(&tape, h, a, &adj).expect("attention"));
        for i in 0..n {
            let s: f64 = (0..n).map(|j| alpha.at(i, j)).sum();
            if (s - 1.0).abs() > TOL_ATTENTION {
                rows_ok = false;
                detail = format!("trial {t} row {i} sums to {s}");
            }
            for j in 0..n {
                let allowed = i == j || adj.get(i, j) != 0;
                if !allowed && alpha.at(i, j) != 0.0 {
                    mask_ok = false;
                    detail = format!("trial {t}: weight outside the mask at ({i},{j})");
                }
            }
        }
    }

    let mut width_ok = true;
    let mut width_detail = String::new();
    for heads in [1usize, 2, 4, 8] {
        let mut r2 = ChaCha8Rng::seed_from_u64(60 + heads as u64);
        let cell = CellParams::init(
            CellConfig {
                kind: CellKind::Raan,
                f: 3,
                b: 1,
                f_prime: 8,
                heads,
                max_depth: 4,
                readout: Readout::Max,
            },
            &mut r2,
        )
        .expect("raan");
        let tape = Tape::new();
        let c = cell.bind(&tape);
        let x = tape.leaf(&Tensor::uniform(vec![4], 1.0, &mut r2));
        let hmat = tape.leaf(&Tensor::uniform(vec![3, 8], 1.0, &mut r2));
        let adj = Adjacency::complete(3);
        let out = c
            .step(
                &tape,
                x,
                Some(crate::cells::ChildState {
                    hidden: hmat,
                    adjacency: &adj,
                }),
                0,
            )
            .expect("step");
        let w = tape.shape_of(out.hidden);
        if w != vec![8] {
            width_ok = false;
            width_detail = format!("{heads} heads gave width {w:?}");
        }
    }

    SuiteReport {
        name: "attention".into(),
        checks: vec![
            check(
                "rows-sum-to-one",
                rows_ok,
                if rows_ok { format!("{trials} trials") } else { detail.clone() },
            ),
            check(
                "masked-entries-stay-zero",
                mask_ok,
                if mask_ok { format!("{trials} trials") } else { detail },
            ),
            check(
                "head-outputs-concatenate-to-hidden-width",
                width_ok,
                if width_ok {
                    "heads 1,2,4,8 at width 8".into()
                } else {
                    width_detail
                },
            ),
        ],
    }
}

/// Named suites the CLI exposes.
pub fn run_suite(name: &str) -> Result<Vec<SuiteReport>> {
    Ok(match name {
        "equivalence" => vec![equivalence_suite()],
        "gradients" => vec![gradient_suite(100)],
        "traversal" => vec![traversal_suite(50)],
        "batching" => vec![batching_suite(1000)],
        "attention" => vec![attention_suite(1000)],
        "all" => vec![
            equivalence_suite(),
            gradient_suite(100),
            traversal_suite(50),
            batching_suite(1000),
            attention_suite(1000),
        ],
        other => {
            return Err(Error::Config(format!(
                "unknown suite {other:?}; have equivalence, gradients, traversal, batching, attention, all"
            )))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equivalence_suite_passes() {
        let report = equivalence_suite();
        for c in &report.checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn gradient_suite_passes_on_a_small_sample() {
        let report = gradient_suite(10);
        for c in &report.checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn traversal_suite_passes_on_a_small_sample() {
        let report = traversal_suite(10);
        for c in &report.checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn batching_suite_passes_on_a_small_sample() {
        let report = batching_suite(50);
        for c in &report.checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn attention_suite_passes_on_a_small_sample() {
        let report = attention_suite(50);
        for c in &report.checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn unknown_suite_is_a_config_error() {
        assert!(matches!(run_suite("bogus"), Err(Error::Config(_))));
    }
}
