use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt::Write as _;

use super::{Graph, NodeId, Role};
use crate::error::{Error, Result};

/// Evaluation order: every node exactly once, each after all its inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionPlan {
    order: Vec<NodeId>,
    rank: Vec<usize>,
}

impl ExecutionPlan {
    pub fn order(&self) -> &[NodeId] {
        &self.order
    }

    pub fn rank(&self, id: NodeId) -> usize {
        self.rank[id.0]
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Checks the plan is a permutation of the graph's nodes with inputs first.
    pub fn validate(&self, graph: &Graph) -> Result<()> {
        if self.order.len() != graph.len() {
            return Err(Error::InvalidArgument(format!(
                "plan covers {} of {} nodes",
                self.order.len(),
                graph.len()
            )));
        }
        let mut seen = vec![false; graph.len()];
        for &id in &self.order {
            if id.0 >= graph.len() || std::mem::replace(&mut seen[id.0], true) {
                return Err(Error::InvalidArgument(format!("plan repeats or invents {id}")));
            }
            for &src in &graph.node(id).inputs {
                if self.rank[src.0] >= self.rank[id.0] {
                    return Err(Error::InvalidArgument(format!(
                        "plan runs {id} before its input {src}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Order in which block outputs `y_L` are produced.
    pub fn block_sequence(&self, graph: &Graph) -> Vec<(Role, usize)> {
        let mut ports: Vec<_> = graph.block_ports().to_vec();
        ports.sort_by_key(|p| self.rank(p.node));
        ports.into_iter().map(|p| (p.role, p.block)).collect()
    }

    /// One `role:block:node` line per node, `-` for nodes outside any block.
    pub fn render(&self, graph: &Graph) -> String {
        let mut out = String::new();
        for &id in &self.order {
            let node = graph.node(id);
            let block = node.block.map_or_else(|| "-".to_string(), |b| b.to_string());
            let _ = writeln!(out, "{}:{}:{}", node.role.letter(), block, node.name);
        }
        out
    }
}

/// Depth-first cycle detection. On failure the error carries the node ids of
/// one cycle, in edge order.
pub fn validate_acyclic(graph: &Graph) -> Result<()> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let consumers = graph.consumers();
    let mut mark = vec![Mark::New; graph.len()];
    for root in 0..graph.len() {
        if mark[root] != Mark::New {
            continue;
        }
        // (node, next consumer index)
        let mut stack = vec![(root, 0usize)];
        mark[root] = Mark::Active;
        while let Some(top) = stack.last_mut() {
            let node = top.0;
            if let Some(&succ) = consumers[node].get(top.1) {
                top.1 += 1;
                match mark[succ.0] {
                    Mark::New => {
                        mark[succ.0] = Mark::Active;
                        stack.push((succ.0, 0));
                    }
                    Mark::Active => {
                        let start = stack.iter().position(|&(n, _)| n == succ.0).unwrap();
                        let cycle = stack[start..].iter().map(|&(n, _)| NodeId(n)).collect();
                        return Err(Error::CyclicGraph(cycle));
                    }
                    Mark::Done => {}
                }
            } else {
                mark[node] = Mark::Done;
                stack.pop();
            }
        }
    }
    Ok(())
}

/// Scheduling group of a node: `(block key, role rank)`. The input comes
/// first, the score heads after every block.
fn group_key(graph: &Graph, id: NodeId) -> (usize, u8) {
    let node = graph.node(id);
    let block = match (node.block, node.role) {
        (Some(b), _) => b,
        (None, Role::Shared) => 0,
        (None, _) => usize::MAX,
    };
    (block, node.role.schedule_rank())
}

/// Deterministic topological order.
///
/// Nodes are grouped by `(role, block)`. Groups run whole, lowest block index
/// first and Slave before Master at equal index, so a Master block starts as
/// soon as the Slave blocks feeding its backward skips are done. Within a
/// group nodes run in ascending id order subject to dependencies.
pub fn topo_schedule(graph: &Graph) -> Result<ExecutionPlan> {
    validate_acyclic(graph)?;
    let order = grouped_order(graph).unwrap_or_else(|| node_order(graph));
    let mut rank = vec![0; graph.len()];
    for (i, id) in order.iter().enumerate() {
        rank[id.0] = i;
    }
    let plan = ExecutionPlan { order, rank };
    plan.validate(graph)?;
    Ok(plan)
}

/// Kahn's algorithm over groups, then over nodes inside each group. Returns
/// `None` if the group quotient graph has a cycle (possible only for
/// hand-wired graphs).
fn grouped_order(graph: &Graph) -> Option<Vec<NodeId>> {
    let mut groups: BTreeMap<(usize, u8), Vec<NodeId>> = BTreeMap::new();
    for node in graph.nodes() {
        groups.entry(group_key(graph, node.id)).or_default().push(node.id);
    }
    let keys: Vec<(usize, u8)> = groups.keys().copied().collect();
    let index_of = |k: (usize, u8)| keys.binary_search(&k).unwrap();
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); keys.len()];
    let mut indeg = vec![0usize; keys.len()];
    for node in graph.nodes() {
        let to = index_of(group_key(graph, node.id));
        for &src in &node.inputs {
            let from = index_of(group_key(graph, src));
            if from != to && !succ[from].contains(&to) {
                succ[from].push(to);
                indeg[to] += 1;
            }
        }
    }
    // key order is (block, role rank), so the smallest index is the preferred
    // ready group
    let mut ready: BinaryHeap<Reverse<usize>> =
        (0..keys.len()).filter(|&g| indeg[g] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(graph.len());
    let mut done = 0;
    while let Some(Reverse(g)) = ready.pop() {
        done += 1;
        order.extend(order_within(graph, &groups[&keys[g]]));
        for &t in &succ[g] {
            indeg[t] -= 1;
            if indeg[t] == 0 {
                ready.push(Reverse(t));
            }
        }
    }
    (done == keys.len()).then_some(order)
}

fn order_within(graph: &Graph, members: &[NodeId]) -> Vec<NodeId> {
    let inside = |id: NodeId| members.binary_search(&id).is_ok();
    let mut indeg: BTreeMap<NodeId, usize> = members.iter().map(|&m| (m, 0)).collect();
    for &m in members {
        let n = graph.node(m).inputs.iter().filter(|&&s| inside(s)).count();
        indeg.insert(m, n);
    }
    let consumers = graph.consumers();
    let mut ready: BinaryHeap<Reverse<NodeId>> = indeg
        .iter()
        .filter(|(_, &d)| d == 0)
        .map(|(&m, _)| Reverse(m))
        .collect();
    let mut order = Vec::with_capacity(members.len());
    while let Some(Reverse(id)) = ready.pop() {
        order.push(id);
        for &c in &consumers[id.0] {
            if inside(c) {
                // a consumer reading the same node twice counts twice
                let d = indeg.get_mut(&c).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.push(Reverse(c));
                }
            }
        }
    }
    order
}

/// Plain node-level Kahn ordering by `(block key, role rank, id)`.
fn node_order(graph: &Graph) -> Vec<NodeId> {
    let consumers = graph.consumers();
    let mut indeg: Vec<usize> = graph.nodes().iter().map(|n| n.inputs.len()).collect();
    let key = |id: NodeId| {
        let (b, r) = group_key(graph, id);
        (b, r, id)
    };
    let mut ready: BinaryHeap<Reverse<(usize, u8, NodeId)>> = graph
        .nodes()
        .iter()
        .filter(|n| n.inputs.is_empty())
        .map(|n| Reverse(key(n.id)))
        .collect();
    let mut order = Vec::with_capacity(graph.len());
    while let Some(Reverse((_, _, id))) = ready.pop() {
        order.push(id);
        for &c in &consumers[id.0] {
            indeg[c.0] -= 1;
            if indeg[c.0] == 0 {
                ready.push(Reverse(key(c)));
            }
        }
    }
    order
}
