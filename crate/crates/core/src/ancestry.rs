//! Ancestry and dependency webs over a hub.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::annotations::{Link, PalletKind};
use crate::canonical;
use crate::error::{Error, Result};
use crate::hub::Hub;
use crate::id::PalletId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: PalletId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<PalletKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_name: Option<String>,
    /// False when the id is referenced but not present (or not readable) in
    /// the hub. Such nodes are leaves.
    pub resolved: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub child: PalletId,
    pub parent: PalletId,
    pub link: Link,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AncestryGraph {
    pub nodes: BTreeMap<PalletId, GraphNode>,
    pub edges: BTreeSet<Edge>,
}

#[derive(Serialize, Deserialize)]
struct GraphJson {
    nodes: Vec<GraphNode>,
    edges: Vec<Edge>,
}

impl AncestryGraph {
    /// Structural problems: dangling edge endpoints and cycles.
    pub fn diagnostics(&self) -> Vec<String> {
        let mut out = Vec::new();
        for e in &self.edges {
            for end in [e.child, e.parent] {
                if !self.nodes.contains_key(&end) {
                    out.push(format!("edge endpoint {end} is not a node"));
                }
            }
        }
        if let Some(id) = self.find_cycle() {
            out.push(format!("cycle through {id}"));
        }
        out
    }

    fn find_cycle(&self) -> Option<PalletId> {
        let mut parents: BTreeMap<PalletId, Vec<PalletId>> = BTreeMap::new();
        for e in &self.edges {
            parents.entry(e.child).or_default().push(e.parent);
        }
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut state: BTreeMap<PalletId, u8> = BTreeMap::new();
        for &start in self.nodes.keys() {
            if state.get(&start).copied().unwrap_or(0) != 0 {
                continue;
            }
            let mut stack = vec![(start, 0usize)];
            state.insert(start, 1);
            while let Some((node, i)) = stack.pop() {
                let ps = parents.get(&node).map(Vec::as_slice).unwrap_or(&[]);
                if i < ps.len() {
                    stack.push((node, i + 1));
                    let p = ps[i];
                    match state.get(&p).copied().unwrap_or(0) {
                        1 => return Some(p),
                        0 => {
                            state.insert(p, 1);
                            stack.push((p, 0));
                        }
                        _ => {}
                    }
                } else {
                    state.insert(node, 2);
                }
            }
        }
        None
    }

    /// Canonical JSON: `{"edges":[...],"nodes":[...]}`, both sorted.
    pub fn to_json(&self) -> String {
        canonical::to_string(&GraphJson {
            nodes: self.nodes.values().cloned().collect(),
            edges: self.edges.iter().copied().collect(),
        })
        .expect("graph serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let g: GraphJson = serde_json::from_str(s).map_err(|e| Error::Decode(e.to_string()))?;
        Ok(AncestryGraph {
            nodes: g.nodes.into_iter().map(|n| (n.id, n)).collect(),
            edges: g.edges.into_iter().collect(),
        })
    }

    /// Graphviz text. Output depends only on the graph's contents.
    pub fn render_dot(&self) -> String {
        let mut s = String::from("digraph ancestry {\n");
        for n in self.nodes.values() {
            let kind = n.kind.map(|k| k.as_str()).unwrap_or("unresolved");
            let style = if n.resolved { "" } else { ", style=dashed" };
            writeln!(s, "  \"{}\" [label=\"{}\\n{}\"{}];", n.id, kind, n.id.short(12), style).unwrap();
        }
        for e in &self.edges {
            writeln!(s, "  \"{}\" -> \"{}\" [label=\"{}\"];", e.child, e.parent, e.link.as_str()).unwrap();
        }
        s.push_str("}\n");
        s
    }
}

/// Breadth-first walk of annotation links upward from `id`.
///
/// Nodes at `max_depth` hops are included but not expanded. Ids the hub
/// cannot produce appear with `resolved: false`.
pub fn ancestors(id: &PalletId, hub: &Hub, max_depth: Option<usize>) -> Result<AncestryGraph> {
    let root = hub.annotation(id)?;
    let mut g = AncestryGraph::default();
    let mut queue = VecDeque::new();
    g.nodes.insert(
        *id,
        GraphNode {
            id: *id,
            kind: Some(root.kind),
            node_name: Some(root.node_name.clone()),
            resolved: true,
        },
    );
    queue.push_back((*id, root, 0usize));

    while let Some((child, annotation, depth)) = queue.pop_front() {
        if max_depth.is_some_and(|d| depth >= d) {
            continue;
        }
        for (parent, link) in annotation.links() {
            g.edges.insert(Edge { child, parent, link });
            if g.nodes.contains_key(&parent) {
                continue;
            }
            match hub.annotation(&parent) {
                Ok(a) => {
                    g.nodes.insert(
                        parent,
                        GraphNode {
                            id: parent,
                            kind: Some(a.kind),
                            node_name: Some(a.node_name.clone()),
                            resolved: true,
                        },
                    );
                    queue.push_back((parent, a, depth + 1));
                }
                Err(e) => {
                    if !matches!(e, Error::MissingPallet(_)) {
                        log::warn!("ancestry: {parent} unreadable: {e}");
                    }
                    g.nodes.insert(
                        parent,
                        GraphNode {
                            id: parent,
                            kind: None,
                            node_name: None,
                            resolved: false,
                        },
                    );
                }
            }
        }
    }
    Ok(g)
}

/// Every stored pallet whose annotation references `id`, sorted.
pub fn dependents(id: &PalletId, hub: &Hub) -> Result<Vec<PalletId>> {
    let mut out = Vec::new();
    for candidate in hub.ids()? {
        match hub.annotation(&candidate) {
            Ok(a) if a.references(id) => out.push(candidate),
            Ok(_) => {}
            Err(e) => log::warn!("dependents: skipping {candidate}: {e}"),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(n: u8, kind: Option<PalletKind>) -> GraphNode {
        GraphNode {
            id: PalletId::digest(&[n]),
            kind,
            node_name: kind.map(|_| format!("n{n}")),
            resolved: kind.is_some(),
        }
    }

    fn graph(nodes: &[GraphNode], edges: &[(u8, u8, Link)]) -> AncestryGraph {
        AncestryGraph {
            nodes: nodes.iter().map(|n| (n.id, n.clone())).collect(),
            edges: edges
                .iter()
                .map(|&(c, p, link)| Edge {
                    child: PalletId::digest(&[c]),
                    parent: PalletId::digest(&[p]),
                    link,
                })
                .collect(),
        }
    }

    #[test]
    fn empty_dot_is_header_and_footer() {
        assert_eq!(AncestryGraph::default().render_dot(), "digraph ancestry {\n}\n");
    }

    #[test]
    fn single_node_dot() {
        let g = graph(&[node(1, Some(PalletKind::Application))], &[]);
        let dot = g.render_dot();
        let id = PalletId::digest(&[1]);
        assert_eq!(
            dot,
            format!("digraph ancestry {{\n  \"{id}\" [label=\"application\\n{}\"];\n}}\n", id.short(12))
        );
        assert!(!dot.contains("->"));
        assert_eq!(dot, g.clone().render_dot());
    }

    #[test]
    fn dot_marks_unresolved_and_labels_links() {
        let g = graph(
            &[node(1, Some(PalletKind::DataPallet)), node(2, None)],
            &[(1, 2, Link::InputDeck)],
        );
        let dot = g.render_dot();
        assert!(dot.contains("unresolved\\n"));
        assert!(dot.contains("style=dashed"));
        assert!(dot.contains("[label=\"input_deck\"]"));
    }

    #[test]
    fn json_roundtrip() {
        let g = graph(
            &[node(1, Some(PalletKind::DataPallet)), node(2, None), node(3, Some(PalletKind::Application))],
            &[(1, 2, Link::InputDeck), (1, 3, Link::Application)],
        );
        let s = g.to_json();
        assert!(s.starts_with("{\"edges\":[{\"child\":"));
        assert_eq!(AncestryGraph::from_json(&s).unwrap(), g);
    }

    #[test]
    fn diagnostics() {
        let ok = graph(&[node(1, None), node(2, None)], &[(1, 2, Link::Application)]);
        assert!(ok.diagnostics().is_empty());
        let dangling = graph(&[node(1, None)], &[(1, 2, Link::Application)]);
        assert_eq!(dangling.diagnostics().len(), 1);
        let cyc = graph(
            &[node(1, None), node(2, None), node(3, None)],
            &[(1, 2, Link::InputPallet), (2, 3, Link::InputPallet), (3, 1, Link::InputPallet)],
        );
        assert!(cyc.diagnostics().iter().any(|d| d.contains("cycle")));
    }
}
