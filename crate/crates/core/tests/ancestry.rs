mod common;

use std::collections::BTreeSet;

use common::Env;
use datapallet::ancestry::{ancestors, dependents, AncestryGraph, Edge};
use datapallet::{chain_nodes, run_node, ExtendedContext, Link, PalletId, ProvenanceAnnotation, WorkflowNodeSpec};
use proptest::prelude::*;

fn edge(child: PalletId, parent: PalletId, link: Link) -> Edge {
    Edge { child, parent, link }
}

#[test]
fn application_alone_is_one_node() {
    let env = Env::new();
    let app = env.app("a", "");
    let g = ancestors(&app, &env.hub, None).unwrap();
    assert_eq!(g.nodes.keys().collect::<Vec<_>>(), [&app]);
    assert!(g.edges.is_empty());
    assert!(dependents(&app, &env.hub).unwrap().is_empty());
}

#[test]
fn single_node_run() {
    let env = Env::new();
    let (app, deck) = (env.app("a", ""), env.deck("d", ""));
    let spec = WorkflowNodeSpec::new("n", app, deck, vec!["true".into()]);
    let (p, _) = run_node(&spec, &env.hub, &env.opts).unwrap();
    let g = ancestors(&p, &env.hub, None).unwrap();
    assert_eq!(g.nodes.keys().copied().collect::<BTreeSet<_>>(), [p, app, deck].into());
    assert_eq!(
        g.edges,
        [edge(p, app, Link::Application), edge(p, deck, Link::InputDeck)].into()
    );
    assert_eq!(dependents(&deck, &env.hub).unwrap(), vec![p]);
}

/// Three nodes, each with its own application and deck, each consuming the
/// previous node's output.
fn chain(env: &Env) -> ([PalletId; 3], [PalletId; 3], [PalletId; 3]) {
    let apps = [0, 1, 2].map(|i| env.app(&format!("app{i}"), &format!("# {i}\n")));
    let decks = [0, 1, 2].map(|i| env.deck(&format!("deck{i}"), &format!("{i}\n")));
    let specs: Vec<_> = (0..3)
        .map(|i| {
            let cmd = format!("cat \"$0\"/deck.txt > stage{i}");
            WorkflowNodeSpec::new(format!("n{i}"), apps[i], decks[i], vec!["sh".into(), "-c".into(), cmd, "{DECK}".into()])
        })
        .collect();
    let ids = chain_nodes(&specs, &env.hub, &env.opts).unwrap();
    (apps, decks, ids.try_into().unwrap())
}

#[test]
fn three_node_chain_matches_hand_enumeration() {
    let env = Env::new();
    let (apps, decks, [a, b, c]) = chain(&env);
    let g = ancestors(&c, &env.hub, None).unwrap();

    let want_nodes: BTreeSet<_> = [a, b, c].into_iter().chain(apps).chain(decks).collect();
    let want_edges: BTreeSet<_> = [
        edge(a, apps[0], Link::Application),
        edge(a, decks[0], Link::InputDeck),
        edge(b, apps[1], Link::Application),
        edge(b, decks[1], Link::InputDeck),
        edge(b, a, Link::InputPallet),
        edge(c, apps[2], Link::Application),
        edge(c, decks[2], Link::InputDeck),
        edge(c, b, Link::InputPallet),
    ]
    .into();
    assert_eq!(g.nodes.keys().copied().collect::<BTreeSet<_>>(), want_nodes);
    assert_eq!(g.edges, want_edges);
    assert!(g.nodes.values().all(|n| n.resolved));
    assert!(g.diagnostics().is_empty());

    // Dependents reverse each edge.
    for e in &want_edges {
        assert!(dependents(&e.parent, &env.hub).unwrap().contains(&e.child));
    }
    assert_eq!(dependents(&a, &env.hub).unwrap(), vec![b]);
    assert!(dependents(&c, &env.hub).unwrap().is_empty());

    let dot = g.render_dot();
    assert_eq!(dot, ancestors(&c, &env.hub, None).unwrap().render_dot());
    assert_eq!(dot.lines().filter(|l| l.contains("[label=") && !l.contains("->")).count(), 9);
    assert_eq!(dot.lines().filter(|l| l.contains("->")).count(), 8);

    assert_eq!(AncestryGraph::from_json(&g.to_json()).unwrap(), g);
}

#[test]
fn depth_limit() {
    let env = Env::new();
    let (apps, decks, [_, b, c]) = chain(&env);
    let g0 = ancestors(&c, &env.hub, Some(0)).unwrap();
    assert_eq!(g0.nodes.len(), 1);
    assert!(g0.edges.is_empty());
    let g1 = ancestors(&c, &env.hub, Some(1)).unwrap();
    assert_eq!(g1.nodes.keys().copied().collect::<BTreeSet<_>>(), [c, b, apps[2], decks[2]].into());
    assert_eq!(g1.edges.len(), 3);
}

#[test]
fn dangling_and_extended_links_are_reported() {
    let env = Env::new();
    let gone_app = PalletId::digest(b"moved away");
    let deck = env.deck("d", "");
    let ctx = ExtendedContext {
        application_id: env.app("republisher", ""),
        input_deck_id: PalletId::digest(b"lost deck"),
        node_name: "republish".into(),
    };
    let ann = ProvenanceAnnotation::data_pallet(gone_app, deck, vec![], "x", "p").extend(ctx.clone()).unwrap();
    let p = env.seal(&ann, &[("f", b"1", 0o644)]);
    let g = ancestors(&p, &env.hub, None).unwrap();
    assert!(!g.nodes[&gone_app].resolved);
    assert!(g.nodes[&ctx.application_id].resolved);
    assert!(!g.nodes[&ctx.input_deck_id].resolved);
    assert!(g.edges.contains(&edge(p, ctx.application_id, Link::ExtendedContext)));
    assert!(g.edges.contains(&edge(p, ctx.input_deck_id, Link::ExtendedContext)));
    assert!(g.render_dot().contains("style=dashed"));
    assert!(g.diagnostics().is_empty());
}

#[test]
fn unknown_root_is_not_found() {
    let env = Env::new();
    let err = ancestors(&PalletId::digest(b"?"), &env.hub, None).unwrap_err();
    assert!(matches!(err, datapallet::Error::MissingPallet(_)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Over a random DAG, the edges into each id across whole-hub ancestry
    /// are exactly what dependents() reports.
    #[test]
    fn dependents_reverse_ancestors(parents in prop::collection::vec(prop::collection::vec(any::<prop::sample::Index>(), 0..3), 1..8)) {
        let env = Env::new();
        let app = env.app("a", "");
        let deck = env.deck("d", "");
        let mut ids: Vec<PalletId> = Vec::new();
        for (n, picks) in parents.iter().enumerate() {
            let mut inputs: Vec<PalletId> = if ids.is_empty() {
                vec![]
            } else {
                picks.iter().map(|i| ids[i.index(ids.len())]).collect()
            };
            inputs.sort();
            inputs.dedup();
            let ann = ProvenanceAnnotation::data_pallet(app, deck, inputs, "x", format!("n{n}"));
            ids.push(env.seal(&ann, &[("n", n.to_string().as_bytes(), 0o644)]));
        }
        let mut all_edges = BTreeSet::new();
        for id in env.hub.ids().unwrap() {
            all_edges.extend(ancestors(&id, &env.hub, None).unwrap().edges);
        }
        for id in env.hub.ids().unwrap() {
            let from_edges: BTreeSet<_> = all_edges.iter().filter(|e| e.parent == id).map(|e| e.child).collect();
            let deps: BTreeSet<_> = dependents(&id, &env.hub).unwrap().into_iter().collect();
            prop_assert_eq!(from_edges, deps);
        }
    }
}
