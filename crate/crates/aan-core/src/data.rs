//! Synthetic dataset generators. Each generator emits labeled trees with
//! a known decision rule so training behavior is checkable: separable
//! blobs, token majorities, sibling parity over a star, and long chains
//! where only the leaf carries the class signal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::Sample;
use crate::tree::{Adjacency, NeuroNode, NeuroTree, Payload};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum GenKind {
    /// Two Gaussian blobs at +-`separation` per coordinate; single-node
    /// trees.
    GaussianPair {
        dim: usize,
        separation: f64,
        noise: f64,
    },
    /// Uniform token sequences; the label is the most frequent token
    /// class (token modulo `classes`), lowest class on ties.
    TokenMajority {
        vocab: usize,
        classes: usize,
        len: usize,
    },
    /// Four leaves under a fully connected star; each leaf carries one
    /// noisy bit, the label is their parity.
    SiblingParity { dim: usize },
    /// A chain whose leaf (the first timestep) is the one-hot class
    /// signal; everything above is low-amplitude distractor noise, so the
    /// signal must survive `len - 1` cell applications.
    ChainRecall {
        len: usize,
        classes: usize,
        distractor_max: f64,
    },
}

impl GenKind {
    pub fn classes(&self) -> usize {
        match self {
            GenKind::GaussianPair { .. } => 2,
            GenKind::TokenMajority { classes, .. } => *classes,
            GenKind::SiblingParity { .. } => 2,
            GenKind::ChainRecall { classes, .. } => *classes,
        }
    }
}

/// A full dataset description, also the on-disk format for generation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetSpec {
    pub name: String,
    pub kind: GenKind,
    pub n_train: usize,
    pub n_val: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("{e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serialization cannot fail")
    }
}

fn one_sample(
    kind: &GenKind,
    index: usize,
    domain: usize,
    task: usize,
    group: &str,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    // round-robin labels keep every class equally represented
    let label = index % kind.classes();
    let tree = match kind {
        GenKind::GaussianPair {
            dim,
            separation,
            noise,
        } => {
            let sign = if label == 0 { -1.0 } else { 1.0 };
            let x: Vec<f64> = (0..*dim)
                .map(|j| {
                    let center = sign * separation * if j % 2 == 0 { 1.0 } else { -1.0 };
                    center + rng.gen_range(-noise..*noise)
                })
                .collect();
            NeuroTree::build_chain(vec![Payload::Numeric(x)], domain)?
        }
        GenKind::TokenMajority {
            vocab,
            classes,
            len,
        } => {
            if *classes > *vocab {
                return Err(Error::Config(format!(
                    "token-majority: {classes} classes over vocab {vocab}"
                )));
            }
            // draw until the modal class matches the scheduled label
            let tokens = loop {
                let tokens: Vec<usize> = (0..*len).map(|_| rng.gen_range(0..*vocab)).collect();
                let mut counts = vec![0usize; *classes];
                for &t in &tokens {
                    counts[t % classes] += 1;
                }
                let mut mode = 0;
                for (c, &n) in counts.iter().enumerate().skip(1) {
                    if n > counts[mode] {
                        mode = c;
                    }
                }
                if mode == label {
                    break tokens;
                }
            };
            NeuroTree::build_chain(vec![Payload::Tokens(tokens)], domain)?
        }
        GenKind::SiblingParity { dim } => {
            // pick bits whose parity equals the label
            let mut bits = [0u8; 4];
            for b in bits.iter_mut().take(3) {
                *b = u8::from(rng.gen_bool(0.5));
            }
            let partial: u8 = bits[..3].iter().sum::<u8>() % 2;
            bits[3] = (label as u8 + 2 - partial) % 2;
            let payloads = bits
                .iter()
                .map(|&b| {
                    Payload::Numeric(
                        (0..*dim)
                            .map(|_| f64::from(b) + rng.gen_range(0.0..0.1))
                            .collect(),
                    )
                })
                .collect();
            NeuroTree::build_star(payloads, vec![domain; 4], Adjacency::complete(4))?
        }
        GenKind::ChainRecall {
            len,
            classes,
            distractor_max,
        } => {
            if *classes == 0 || *len == 0 {
                return Err(Error::Config("chain-recall needs len and classes > 0".into()));
            }
            let mut payloads = Vec::with_capacity(*len);
            let mut signal = vec![0.0; *classes];
            signal[label] = 1.0;
            payloads.push(Payload::Numeric(signal));
            for _ in 1..*len {
                payloads.push(Payload::Numeric(
                    (0..*classes)
                        .map(|_| rng.gen_range(0.0..*distractor_max))
                        .collect(),
                ));
            }
            NeuroTree::build_chain(payloads, domain)?
        }
    };
    Ok(Sample {
        tree,
        label,
        task,
        group: group.to_string(),
    })
}

/// Generate the train and validation splits. `domain` and `task` stamp
/// every node and sample so datasets can share one model.
pub fn generate(
    spec: &DatasetSpec,
    domain: usize,
    task: usize,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = (0..spec.n_train)
        .map(|i| one_sample(&spec.kind, i, domain, task, &spec.name, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let val = (0..spec.n_val)
        .map(|i| one_sample(&spec.kind, i, domain, task, &spec.name, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok((train, val))
}

/// A star whose children mix payloads from several datasets, for
/// multi-domain trees. Child i comes from `parts[i]`.
pub fn mixed_star(parts: Vec<(Payload, usize)>) -> Result<NeuroTree> {
    let n = parts.len();
    let (payloads, domains): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    NeuroTree::build_star(payloads, domains, Adjacency::complete(n))
}

/// Random rooted DAG for traversal checks: node ids are insertion order,
/// every node gets a numeric payload, later nodes attach to one or two
/// earlier ones so sharing is common but cycles are impossible.
pub fn random_dag(
    n_nodes: usize,
    payload_width: usize,
    domain: usize,
    rng: &mut ChaCha8Rng,
) -> Result<NeuroTree> {
    if n_nodes == 0 {
        return Err(Error::EmptyInput("random_dag of zero nodes".into()));
    }
    let payload = |rng: &mut ChaCha8Rng| {
        Payload::Numeric((0..payload_width).map(|_| rng.gen_range(-1.0..1.0)).collect())
    };
    let mut tree = NeuroTree::with_root(NeuroNode::with_payload(0, payload(rng), domain));
    for id in 1..n_nodes {
        tree.insert_node(NeuroNode::with_payload(id, payload(rng), domain))?;
        let n_parents = if id == 1 { 1 } else { 1 + usize::from(rng.gen_bool(0.4)) };
        let mut parents = Vec::new();
        while parents.len() < n_parents {
            let p = rng.gen_range(0..id);
            if !parents.contains(&p) {
                parents.push(p);
            }
        }
        for p in parents {
            let n_children = tree.node(p)?.children.len() + 1;
            let mut adj = Adjacency::zero(n_children);
            // random symmetric sibling edges among the existing children
            for i in 0..n_children {
                for j in (i + 1)..n_children {
                    if rng.gen_bool(0.5) {
                        adj.set(i, j, 1);
                        adj.set(j, i, 1);
                    }
                }
            }
            tree.add_child(p, id, adj)?;
        }
    }
    Ok(tree)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: GenKind) -> DatasetSpec {
        DatasetSpec {
            name: "t".into(),
            kind,
            n_train: 24,
            n_val: 12,
            seed: 5,
        }
    }

    #[test]
    fn gaussian_pair_is_balanced_and_separable() {
        let (train, val) = generate(
            &spec(GenKind::GaussianPair {
                dim: 4,
                separation: 1.0,
                noise: 0.3,
            }),
            0,
            0,
        )
        .unwrap();
        assert_eq!(train.len(), 24);
        assert_eq!(val.len(), 12);
        assert_eq!(train.iter().filter(|s| s.label == 0).count(), 12);
        // the first coordinate alone separates the classes at this noise
        for s in &train {
            let node = s.tree.node(s.tree.root()).unwrap();
            let Some(Payload::Numeric(x)) = &node.payload else {
                panic!("numeric payload")
            };
            let predicted = usize::from(x[0] > 0.0);
            assert_eq!(predicted, s.label);
        }
    }

    #[test]
    fn token_majority_labels_match_the_mode() {
        let (train, _) = generate(
            &spec(GenKind::TokenMajority {
                vocab: 6,
                classes: 3,
                len: 9,
            }),
            0,
            0,
        )
        .unwrap();
        for s in &train {
            let node = s.tree.node(s.tree.root()).unwrap();
            let Some(Payload::Tokens(toks)) = &node.payload else {
                panic!("token payload")
            };
            let mut counts = [0usize; 3];
            for &t in toks {
                counts[t % 3] += 1;
            }
            let mode = counts
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .unwrap()
                .0;
            assert_eq!(mode, s.label);
        }
    }

    #[test]
    fn sibling_parity_trees_have_four_leaves_and_true_parity() {
        let (train, _) = generate(&spec(GenKind::SiblingParity { dim: 3 }), 0, 0).unwrap();
        for s in &train {
            let root = s.tree.node(s.tree.root()).unwrap();
            assert_eq!(root.children.len(), 4);
            assert!(root.is_layer());
            let parity: u8 = root
                .children
                .iter()
                .map(|&c| {
                    let Some(Payload::Numeric(x)) = &s.tree.node(c).unwrap().payload else {
                        panic!()
                    };
                    u8::from(x[0] > 0.5)
                })
                .sum::<u8>()
                % 2;
            assert_eq!(usize::from(parity), s.label);
        }
    }

    #[test]
    fn chain_recall_hides_the_signal_at_the_leaf() {
        let (train, _) = generate(
            &spec(GenKind::ChainRecall {
                len: 10,
                classes: 4,
                distractor_max: 0.3,
            }),
            0,
            0,
        )
        .unwrap();
        for s in &train {
            assert_eq!(s.tree.len(), 10);
            assert_eq!(s.tree.max_depth(), 9);
            // walk to the leaf
            let mut id = s.tree.root();
            while !s.tree.node(id).unwrap().children.is_empty() {
                id = s.tree.node(id).unwrap().children[0];
            }
            let Some(Payload::Numeric(x)) = &s.tree.node(id).unwrap().payload else {
                panic!()
            };
            assert_eq!(x[s.label], 1.0);
            assert!(x.iter().enumerate().all(|(i, &v)| i == s.label || v == 0.0));
            // everything above the leaf is below the distractor cap
            let root = s.tree.node(s.tree.root()).unwrap();
            let Some(Payload::Numeric(r)) = &root.payload else { panic!() };
            assert!(r.iter().all(|&v| (0.0..0.3).contains(&v)));
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let sp = spec(GenKind::GaussianPair {
            dim: 3,
            separation: 1.0,
            noise: 0.2,
        });
        let (a, _) = generate(&sp, 0, 0).unwrap();
        let (b, _) = generate(&sp, 0, 0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.tree.to_json(), y.tree.to_json());
        }
    }

    #[test]
    fn spec_round_trips_through_json() {
        let sp = spec(GenKind::ChainRecall {
            len: 50,
            classes: 10,
            distractor_max: 0.3,
        });
        let back = DatasetSpec::from_json(&sp.to_json()).unwrap();
        assert_eq!(back, sp);
    }

    #[test]
    fn random_dags_validate_and_share_nodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut saw_sharing = false;
        for _ in 0..50 {
            let tree = random_dag(12, 3, 0, &mut rng).unwrap();
            assert!(tree.validate().passed());
            if tree.parent_counts().values().any(|&c| c > 1) {
                saw_sharing = true;
            }
        }
        assert!(saw_sharing, "no DAG exercised node sharing");
    }

    #[test]
    fn mixed_star_carries_multiple_domains() {
        let tree = mixed_star(vec![
            (Payload::Numeric(vec![1.0]), 0),
            (Payload::Tokens(vec![2, 3]), 1),
        ])
        .unwrap();
        assert!(tree.validate().passed());
        let root = tree.node(tree.root()).unwrap();
        let domains: Vec<_> = root
            .children
            .iter()
            .map(|&c| tree.node(c).unwrap().domain.unwrap())
            .collect();
        assert_eq!(domains, vec![0, 1]);
    }
}
