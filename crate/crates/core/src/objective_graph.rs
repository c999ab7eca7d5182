//! Attraction/repulsion graphs of the GFN objectives and their structural
//! checks.
//!
//! An objective is well posed when no repulsion edge joins two nodes that are
//! tied together (transitively) by attractions; the combined objective is a
//! forest of stars centred on the per-person anchors.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use crate::dsu::DisjointSet;
use crate::gfn::{Objective, PairIndex, World};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Node {
    /// Person embedding `x_i`.
    Person(usize),
    /// Scene embedding `y_j`.
    Scene(usize),
    /// Fused anchor `w_i`, identical to the fusion of person `i` with its own scene.
    Anchor(usize),
    /// Fused candidate `z_{i,j}` for `j` other than person `i`'s own scene.
    Fused(usize, usize),
}

impl Node {
    pub fn kind(&self) -> &'static str {
        match self {
            Node::Person(_) => "person",
            Node::Scene(_) => "scene",
            Node::Anchor(_) => "anchor",
            Node::Fused(..) => "fused",
        }
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Person(i) => write!(f, "x{i}"),
            Node::Scene(j) => write!(f, "y{j}"),
            Node::Anchor(i) => write!(f, "w{i}"),
            Node::Fused(i, j) => write!(f, "z{i}_{j}"),
        }
    }
}

/// Undirected edge, endpoints stored in ascending order.
pub type Edge = (Node, Node);

fn edge(a: Node, b: Node) -> Edge {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ObjectiveGraph {
    pub nodes: BTreeSet<Node>,
    pub attractions: BTreeSet<Edge>,
    pub repulsions: BTreeSet<Edge>,
}

impl ObjectiveGraph {
    fn add(&mut self, a: Node, b: Node, attract: bool) {
        self.nodes.insert(a);
        self.nodes.insert(b);
        if a == b {
            return;
        }
        let e = edge(a, b);
        if attract {
            self.attractions.insert(e);
        } else {
            self.repulsions.insert(e);
        }
    }

    /// Writes `node\ttype` lines, a blank line, then `src\tdst\tkind` lines.
    pub fn write_edge_list<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for n in &self.nodes {
            writeln!(w, "{n}\t{}", n.kind())?;
        }
        writeln!(w)?;
        for (a, b) in &self.attractions {
            writeln!(w, "{a}\t{b}\tattraction")?;
        }
        for (a, b) in &self.repulsions {
            writeln!(w, "{a}\t{b}\trepulsion")?;
        }
        Ok(())
    }

    pub fn to_edge_list(&self) -> String {
        let mut buf = Vec::new();
        self.write_edge_list(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("edge list is ASCII")
    }

    fn node_index(&self) -> BTreeMap<Node, usize> {
        self.nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect()
    }
}

/// Builds the graph of `objective` over `world`. Pairs whose two ends are the
/// same node (a person's own-scene fusion against its anchor) are dropped.
pub fn build_objective_graph(objective: Objective, world: &World) -> ObjectiveGraph {
    let mut g = ObjectiveGraph::default();
    match objective {
        Objective::Baseline => {
            for k in 0..world.num_scenes() {
                g.nodes.insert(Node::Scene(k));
            }
            for p in PairIndex::query_scene(world).pairs {
                g.nodes.insert(Node::Person(p.anchor));
                for &k in &p.candidates {
                    g.add(Node::Person(p.anchor), Node::Scene(k), k == p.positive);
                }
            }
        }
        Objective::Combined => {
            let fused = |i: usize, k: usize| {
                if world.persons()[i].own_scene == k {
                    Node::Anchor(i)
                } else {
                    Node::Fused(i, k)
                }
            };
            for p in PairIndex::query_scene(world).pairs {
                g.nodes.insert(Node::Anchor(p.anchor));
                for &k in &p.candidates {
                    g.add(Node::Anchor(p.anchor), fused(p.anchor, k), k == p.positive);
                }
            }
        }
        Objective::SceneOnly => {
            for k in 0..world.num_scenes() {
                g.nodes.insert(Node::Scene(k));
            }
            for p in PairIndex::scene_scene(world).pairs {
                for &k in &p.candidates {
                    g.add(Node::Scene(p.anchor), Node::Scene(k), k == p.positive);
                }
            }
        }
    }
    g
}

/// Partition of the nodes under the transitive closure of attractions.
pub fn attraction_groups(g: &ObjectiveGraph) -> Vec<BTreeSet<Node>> {
    let index = g.node_index();
    let nodes: Vec<Node> = g.nodes.iter().copied().collect();
    let mut dsu = DisjointSet::new(nodes.len());
    for (a, b) in &g.attractions {
        dsu.union(index[a], index[b]);
    }
    dsu.groups()
        .into_iter()
        .map(|grp| grp.into_iter().map(|i| nodes[i]).collect())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WellPosedness {
    pub well_posed: bool,
    /// Repulsion edges whose endpoints share an attraction group.
    pub conflicts: Vec<Edge>,
}

pub fn is_well_posed(g: &ObjectiveGraph) -> WellPosedness {
    let index = g.node_index();
    let mut dsu = DisjointSet::new(g.nodes.len());
    for (a, b) in &g.attractions {
        dsu.union(index[a], index[b]);
    }
    let conflicts: Vec<Edge> = g
        .repulsions
        .iter()
        .filter(|(a, b)| dsu.same(index[a], index[b]))
        .copied()
        .collect();
    WellPosedness {
        well_posed: conflicts.is_empty(),
        conflicts,
    }
}

/// True when every connected component of attraction ∪ repulsion is a star:
/// one centre adjacent to every other member, and no other adjacencies.
pub fn is_star_forest(g: &ObjectiveGraph) -> bool {
    let index = g.node_index();
    let n = g.nodes.len();
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    let mut dsu = DisjointSet::new(n);
    for (a, b) in g.attractions.iter().chain(&g.repulsions) {
        let (i, j) = (index[a], index[b]);
        adj[i].insert(j);
        adj[j].insert(i);
        dsu.union(i, j);
    }
    dsu.groups().into_iter().all(|comp| {
        if comp.len() <= 2 {
            return true;
        }
        let leaves = comp.len() - 1;
        match comp.iter().find(|&&c| adj[c].len() == leaves) {
            Some(&centre) => comp.iter().all(|&v| v == centre || adj[v].len() == 1),
            None => false,
        }
    })
}
