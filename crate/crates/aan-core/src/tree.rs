//! The neuro node / neuro tree data model: payloads, tags, sibling
//! adjacency over children, multi-parent child references, validation and
//! the JSON tree file format.
//!
//! A tree is a rooted DAG: a node may be the child of several parents as
//! long as no ancestor ever becomes a child, so the propagation path never
//! reverses. The sibling adjacency lives in the parent and indexes the
//! parent's `children` list; symmetric, zero-diagonal, 0/1 entries.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainTag {
    pub id: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTag {
    pub id: usize,
    pub name: String,
    pub class_count: usize,
}

/// Raw per-node data: a numeric vector or a token-index sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Numeric(Vec<f64>),
    Tokens(Vec<usize>),
}

/// Symmetric 0/1 sibling adjacency over a node's children.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    n: usize,
    data: Vec<u8>,
}

impl Adjacency {
    pub fn zero(n: usize) -> Self {
        Adjacency {
            n,
            data: vec![0; n * n],
        }
    }

    pub fn complete(n: usize) -> Self {
        let mut a = Adjacency::zero(n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    a.data[i * n + j] = 1;
                }
            }
        }
        a
    }

    pub fn from_rows(rows: Vec<Vec<u8>>) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Dimension(format!(
                "adjacency must be square, got {n} rows"
            )));
        }
        Ok(Adjacency {
            n,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: u8) {
        self.data[i * self.n + j] = v;
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| self.get(i, j) == self.get(j, i)))
    }

    pub fn has_zero_diagonal(&self) -> bool {
        (0..self.n).all(|i| self.get(i, i) == 0)
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        (0..self.n)
            .map(|i| self.data[i * self.n..(i + 1) * self.n].to_vec())
            .collect()
    }
}

/// One neuro node: optional payload and tags, ordered children and their
/// sibling adjacency, plus the decode outputs filled by deconvolution.
#[derive(Debug, Clone)]
pub struct NeuroNode {
    pub id: NodeId,
    pub payload: Option<Payload>,
    pub domain: Option<usize>,
    pub task: Option<usize>,
    pub children: Vec<NodeId>,
    pub adjacency: Adjacency,
    pub decoded_x: Option<Vec<f64>>,
    pub decoded_adjacency: Option<Vec<Vec<f64>>>,
}

impl NeuroNode {
    pub fn new(id: NodeId) -> Self {
        NeuroNode {
            id,
            payload: None,
            domain: None,
            task: None,
            children: Vec::new(),
            adjacency: Adjacency::zero(0),
            decoded_x: None,
            decoded_adjacency: None,
        }
    }

    pub fn with_payload(id: NodeId, payload: Payload, domain: usize) -> Self {
        let mut n = NeuroNode::new(id);
        n.payload = Some(payload);
        n.domain = Some(domain);
        n
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// A layer node has no payload and no domain; it contributes a zero
    /// feature vector and only performs convolution.
    pub fn is_layer(&self) -> bool {
        self.payload.is_none() && self.domain.is_none()
    }
}

#[derive(Debug, Clone)]
pub struct NeuroTree {
    root: NodeId,
    nodes: BTreeMap<NodeId, NeuroNode>,
}

#[derive(Debug, Default)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

impl NeuroTree {
    pub fn with_root(root: NeuroNode) -> Self {
        let mut nodes = BTreeMap::new();
        let id = root.id;
        nodes.insert(id, root);
        NeuroTree { root: id, nodes }
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Result<&NeuroNode> {
        self.nodes.get(&id).ok_or(Error::UnknownNode(id))
    }

    pub fn node_mut(&mut self, id: NodeId) -> Result<&mut NeuroNode> {
        self.nodes.get_mut(&id).ok_or(Error::UnknownNode(id))
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.keys().copied()
    }

    /// Insert a detached node; connect it later with [`NeuroTree::add_child`].
    pub fn insert_node(&mut self, node: NeuroNode) -> Result<()> {
        if self.nodes.contains_key(&node.id) {
            return Err(Error::Validation(format!("duplicate node id {}", node.id)));
        }
        self.nodes.insert(node.id, node);
        Ok(())
    }

    /// True if `to` is reachable from `from` via child edges.
    fn reaches(&self, from: NodeId, to: NodeId) -> Option<Vec<NodeId>> {
        let mut stack = vec![(from, vec![from])];
        let mut seen = HashSet::new();
        while let Some((cur, path)) = stack.pop() {
            if cur == to {
                return Some(path);
            }
            if !seen.insert(cur) {
                continue;
            }
            if let Some(node) = self.nodes.get(&cur) {
                for &c in &node.children {
                    let mut p = path.clone();
                    p.push(c);
                    stack.push((c, p));
                }
            }
        }
        None
    }

    /// Append `child_id` to `parent_id`'s children, replacing the sibling
    /// adjacency with `new_adjacency` sized to the new child count. An
    /// ancestor (or the parent itself) can never become a child.
    pub fn add_child(
        &mut self,
        parent_id: NodeId,
        child_id: NodeId,
        new_adjacency: Adjacency,
    ) -> Result<()> {
        self.node(parent_id)?;
        self.node(child_id)?;
        if let Some(path) = self.reaches(child_id, parent_id) {
            return Err(Error::Cycle(format!(
                "node {parent_id} is reachable from {child_id} via {path:?}; \
                 an ancestor cannot become a child"
            )));
        }
        let parent = self.nodes.get_mut(&parent_id).unwrap();
        if new_adjacency.n() != parent.children.len() + 1 {
            return Err(Error::Dimension(format!(
                "adjacency is {}x{} but the node will have {} children",
                new_adjacency.n(),
                new_adjacency.n(),
                parent.children.len() + 1
            )));
        }
        parent.children.push(child_id);
        parent.adjacency = new_adjacency;
        Ok(())
    }

    /// Parent count per node, over nodes reachable from the root.
    pub fn parent_counts(&self) -> BTreeMap<NodeId, usize> {
        let mut counts: BTreeMap<NodeId, usize> = BTreeMap::new();
        for id in self.reachable() {
            counts.entry(id).or_insert(0);
            if let Some(node) = self.nodes.get(&id) {
                for &c in &node.children {
                    *counts.entry(c).or_insert(0) += 1;
                }
            }
        }
        counts
    }

    pub fn reachable(&self) -> Vec<NodeId> {
        let mut seen = HashSet::new();
        let mut order = Vec::new();
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            if !seen.insert(id) {
                continue;
            }
            order.push(id);
            if let Some(node) = self.nodes.get(&id) {
                for &c in &node.children {
                    stack.push(c);
                }
            }
        }
        order
    }

    /// Longest root-to-leaf path counted in edges; root alone is depth 0.
    pub fn max_depth(&self) -> usize {
        fn depth(tree: &NeuroTree, id: NodeId, memo: &mut BTreeMap<NodeId, usize>) -> usize {
            if let Some(&d) = memo.get(&id) {
                return d;
            }
            let d = tree
                .nodes
                .get(&id)
                .map(|n| {
                    n.children
                        .iter()
                        .map(|&c| 1 + depth(tree, c, memo))
                        .max()
                        .unwrap_or(0)
                })
                .unwrap_or(0);
            memo.insert(id, d);
            d
        }
        depth(self, self.root, &mut BTreeMap::new())
    }

    fn has_cycle(&self) -> bool {
        // DFS with colors over reachable nodes
        #[derive(Clone, Copy, PartialEq)]
        enum Color {
            White,
            Gray,
            Black,
        }
        fn visit(tree: &NeuroTree, id: NodeId, colors: &mut BTreeMap<NodeId, Color>) -> bool {
            colors.insert(id, Color::Gray);
            if let Some(node) = tree.nodes.get(&id) {
                for &c in &node.children {
                    match colors.get(&c).copied().unwrap_or(Color::White) {
                        Color::Gray => return true,
                        Color::White => {
                            if visit(tree, c, colors) {
                                return true;
                            }
                        }
                        Color::Black => {}
                    }
                }
            }
            colors.insert(id, Color::Black);
            false
        }
        visit(self, self.root, &mut BTreeMap::new())
    }

    /// Structural checks: reachability, DAG-ness, adjacency shape and
    /// symmetry, payload/domain pairing, single root. Violations are report
    /// entries, never errors.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let reachable: HashSet<NodeId> = self.reachable().into_iter().collect();
        for (&id, node) in &self.nodes {
            if !reachable.contains(&id) {
                report
                    .violations
                    .push(format!("node {id} is not reachable from the root"));
            }
            if node.adjacency.n() != node.children.len() {
                report.violations.push(format!(
                    "node {id}: adjacency is {}x{} for {} children",
                    node.adjacency.n(),
                    node.adjacency.n(),
                    node.children.len()
                ));
            }
            if !node.adjacency.is_symmetric() {
                report
                    .violations
                    .push(format!("node {id}: adjacency not symmetric"));
            }
            if !node.adjacency.has_zero_diagonal() {
                report
                    .violations
                    .push(format!("node {id}: adjacency diagonal not zero"));
            }
            if !node.adjacency.is_binary() {
                report
                    .violations
                    .push(format!("node {id}: adjacency entries outside {{0,1}}"));
            }
            if node.payload.is_some() && node.domain.is_none() {
                report
                    .violations
                    .push(format!("node {id}: payload without a domain tag"));
            }
            for &c in &node.children {
                if !self.nodes.contains_key(&c) {
                    report
                        .violations
                        .push(format!("node {id}: dangling child reference {c}"));
                }
            }
        }
        if self.has_cycle() {
            report.violations.push("child edges contain a cycle".into());
        }
        // the root must be the single node without incoming edges
        let counts = self.parent_counts();
        for (&id, &c) in &counts {
            if id != self.root && c == 0 && reachable.contains(&id) {
                report
                    .violations
                    .push(format!("node {id} has no parent but is not the root"));
            }
        }
        if counts.get(&self.root).copied().unwrap_or(0) > 0 {
            report
                .violations
                .push(format!("root {} has an incoming edge", self.root));
        }
        report
    }

    /// Linear tree over payloads in timestep order: the first payload ends
    /// up at the leaf so depth-first convolution visits timestep order.
    pub fn build_chain(payloads: Vec<Payload>, domain: usize) -> Result<NeuroTree> {
        if payloads.is_empty() {
            return Err(Error::EmptyInput("build_chain over no payloads".into()));
        }
        let n = payloads.len();
        let mut iter = payloads.into_iter().enumerate();
        let (_, first) = iter.next().unwrap();
        // node 0 is the leaf (first timestep), node n-1 the root
        let mut tree = NeuroTree::with_root(NeuroNode::with_payload(0, first, domain));
        for (i, p) in iter {
            let mut node = NeuroNode::with_payload(i, p, domain);
            node.children = vec![i - 1];
            node.adjacency = Adjacency::zero(1);
            tree.nodes.insert(i, node);
            tree.root = i;
        }
        debug_assert_eq!(tree.root, n - 1);
        Ok(tree)
    }

    /// One payload-less root whose children carry the payloads with the
    /// given sibling adjacency.
    pub fn build_star(
        payloads: Vec<Payload>,
        domains: Vec<usize>,
        adjacency: Adjacency,
    ) -> Result<NeuroTree> {
        if payloads.len() != domains.len() {
            return Err(Error::Dimension(format!(
                "{} payloads vs {} domains",
                payloads.len(),
                domains.len()
            )));
        }
        if adjacency.n() != payloads.len() {
            return Err(Error::Dimension(format!(
                "adjacency is {}x{} for {} children",
                adjacency.n(),
                adjacency.n(),
                payloads.len()
            )));
        }
        let n = payloads.len();
        let mut root = NeuroNode::new(n);
        root.children = (0..n).collect();
        root.adjacency = adjacency;
        let mut tree = NeuroTree::with_root(root);
        for (i, (p, d)) in payloads.into_iter().zip(domains).enumerate() {
            tree.nodes.insert(i, NeuroNode::with_payload(i, p, d));
        }
        Ok(tree)
    }

    pub fn to_json(&self) -> String {
        let wire = WireTree {
            root: self.root,
            nodes: self
                .nodes
                .values()
                .map(|n| WireNode {
                    id: n.id,
                    domain: n.domain,
                    task: n.task,
                    x: n.payload.as_ref().map(|p| match p {
                        Payload::Numeric(v) => WirePayload::Numeric(v.clone()),
                        Payload::Tokens(t) => WirePayload::Tokens { tokens: t.clone() },
                    }),
                    children: n.children.clone(),
                    adjacency: n.adjacency.rows(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&wire).expect("tree serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<NeuroTree> {
        let wire: WireTree =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("{e}")))?;
        let mut nodes = BTreeMap::new();
        for wn in wire.nodes {
            if nodes.contains_key(&wn.id) {
                return Err(Error::Parse(format!("duplicate node id {}", wn.id)));
            }
            let adjacency = Adjacency::from_rows(wn.adjacency)
                .map_err(|e| Error::Parse(format!("node {}: {e}", wn.id)))?;
            nodes.insert(
                wn.id,
                NeuroNode {
                    id: wn.id,
                    payload: wn.x.map(|p| match p {
                        WirePayload::Numeric(v) => Payload::Numeric(v),
                        WirePayload::Tokens { tokens } => Payload::Tokens(tokens),
                    }),
                    domain: wn.domain,
                    task: wn.task,
                    children: wn.children,
                    adjacency,
                    decoded_x: None,
                    decoded_adjacency: None,
                },
            );
        }
        if !nodes.contains_key(&wire.root) {
            return Err(Error::Parse(format!("root {} not among nodes", wire.root)));
        }
        for node in nodes.values() {
            for &c in &node.children {
                if !nodes.contains_key(&c) {
                    return Err(Error::Parse(format!(
                        "node {}: dangling child reference {c}",
                        node.id
                    )));
                }
            }
        }
        let tree = NeuroTree {
            root: wire.root,
            nodes,
        };
        let report = tree.validate();
        if !report.passed() {
            return Err(Error::Validation(report.violations.join("; ")));
        }
        Ok(tree)
    }
}

#[derive(Serialize, Deserialize)]
struct WireTree {
    root: NodeId,
    nodes: Vec<WireNode>,
}

#[derive(Serialize, Deserialize)]
struct WireNode {
    id: NodeId,
    #[serde(skip_serializing_if = "Option::is_none")]
    domain: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    task: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    x: Option<WirePayload>,
    children: Vec<NodeId>,
    adjacency: Vec<Vec<u8>>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum WirePayload {
    Numeric(Vec<f64>),
    Tokens { tokens: Vec<usize> },
}
