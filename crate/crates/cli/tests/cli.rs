mod common;

use std::fs;

use common::{is_id, object_file, Sandbox};
use datapallet::ancestry::AncestryGraph;
use serde_json::Value;

#[test]
fn wrap_prints_id_and_is_deterministic() {
    let sb = Sandbox::new();
    sb.write("app/bin/plot.sh", "#!/bin/sh\n", 0o755);
    sb.write("app/README", "plotter\n", 0o644);
    let a = sb.ok(&["--deterministic", "wrap", "app", "--kind", "application", "--name", "plotter"]);
    let b = sb.ok(&["--deterministic", "wrap", "app", "--kind", "application", "--name", "plotter"]);
    assert!(is_id(&a), "{a:?}");
    assert_eq!(a, b);
    // Timestamps make ordinary wraps distinct.
    let c = sb.ok(&["wrap", "app", "--kind", "application", "--name", "plotter"]);
    assert_ne!(a, c);
}

#[test]
fn wrap_single_file() {
    let sb = Sandbox::new();
    sb.write("deck.cfg", "x=1\n", 0o600);
    let id = sb.ok(&["wrap", "deck.cfg", "--kind", "input-deck", "--name", "cfg"]);
    let v: Value = serde_json::from_str(&sb.ok(&["--json", "inspect", &id])).unwrap();
    assert_eq!(v["files"][0]["path"], "deck.cfg");
    assert_eq!(v["files"][0]["mode"], "0600");
    assert_eq!(v["annotation"]["kind"], "input_deck");
}

#[test]
fn wrap_usage_errors() {
    let sb = Sandbox::new();
    assert_eq!(sb.run(&["wrap", "missing", "--kind", "application", "--name", "x"]).code, 2);
    sb.write("f", "", 0o644);
    assert_eq!(sb.run(&["wrap", "f", "--kind", "data_pallet", "--name", "x"]).code, 2);
    assert_eq!(sb.run(&["wrap", "f", "--kind", "spreadsheet", "--name", "x"]).code, 2);
    assert_eq!(sb.run(&["wrap", "f"]).code, 2);
    assert_eq!(sb.run(&["frobnicate"]).code, 2);
}

#[test]
fn run_then_inspect_links() {
    let sb = Sandbox::new();
    let (app, deck) = sb.app_and_deck("g", "#!/bin/sh\ntr a-z A-Z < \"$1\" > plot.txt\n", "hello\n");
    let report = sb.path("report.json");
    let out = sb.ok(&[
        "run", "--app", &app, "--deck", &deck, "--name", "plot", "--run-dir", &sb.runs(),
        "--report", report.to_str().unwrap(), "--", "sh", "{APP}/run.sh", "{DECK}/deck.txt",
    ]);
    assert!(is_id(&out));
    let r: Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["output_id"], out.as_str());
    assert_eq!(r["exit_code"], 0);
    for k in ["t_prepare", "t_spawn", "t_app", "t_seal", "t_teardown", "t_total"] {
        assert!(r[k].is_number(), "{k}");
    }

    let v: Value = serde_json::from_str(&sb.ok(&["--json", "inspect", &out])).unwrap();
    assert_eq!(v["annotation"]["application_id"], app.as_str());
    assert_eq!(v["annotation"]["input_deck_id"], deck.as_str());
    assert_eq!(v["annotation"]["node_name"], "plot");
    assert_eq!(v["verified"], true);

    let dest = sb.path("x");
    sb.ok(&["extract", &out, dest.to_str().unwrap()]);
    assert_eq!(fs::read_to_string(dest.join("plot.txt")).unwrap(), "HELLO\n");

    let text = sb.ok(&["inspect", &out]);
    assert!(text.contains(&app) && text.contains("plot.txt"));
}

#[test]
fn inspect_application_has_no_antecedents() {
    let sb = Sandbox::new();
    let (app, _) = sb.app_and_deck("a", "", "");
    let v: Value = serde_json::from_str(&sb.ok(&["--json", "inspect", &app])).unwrap();
    let ann = v["annotation"].as_object().unwrap();
    assert_eq!(ann["kind"], "application");
    for k in ["application_id", "input_deck_id", "input_pallet_ids", "extended_contexts"] {
        assert!(!ann.contains_key(k), "{k}");
    }
}

#[test]
fn run_error_codes() {
    let sb = Sandbox::new();
    let (app, deck) = sb.app_and_deck("a", "", "");
    let ghost = "ab".repeat(32);
    let r = sb.run(&["run", "--app", &ghost, "--deck", &deck, "--name", "n", "--run-dir", &sb.runs(), "--", "true"]);
    assert_eq!(r.code, 3, "{}", r.stderr);
    let r = sb.run(&["run", "--app", "xyz", "--deck", &deck, "--name", "n", "--run-dir", &sb.runs(), "--", "true"]);
    assert_eq!(r.code, 2);
    let r = sb.run(&["run", "--app", &app, "--deck", &deck, "--name", "n", "--run-dir", &sb.runs(), "--", "sh", "-c", "exit 7"]);
    assert_eq!(r.code, 7);
    assert!(r.stdout.is_empty());
    assert!(r.stderr.contains("quarantine"), "{}", r.stderr);
}

#[test]
fn tampered_pallets_exit_4() {
    let sb = Sandbox::new();
    let (app, _) = sb.app_and_deck("a", "#!/bin/sh\n", "");
    let copy = sb.path("copy.pallet");
    fs::copy(object_file(&sb.hub(), &app), &copy).unwrap();
    let mut bytes = fs::read(&copy).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0x20;
    fs::write(&copy, &bytes).unwrap();
    let c = copy.to_str().unwrap();
    assert_eq!(sb.run(&["inspect", c]).code, 4);
    assert_eq!(sb.run(&["verify", c]).code, 4);
    assert_eq!(sb.run(&["extract", c, sb.path("x").to_str().unwrap()]).code, 4);
    assert!(!sb.path("x").exists() || fs::read_dir(sb.path("x")).unwrap().next().is_none());
    let v: Value = serde_json::from_str(sb.run(&["--json", "verify", c]).line()).unwrap();
    assert_eq!(v["id_ok"], false);

    assert_eq!(sb.run(&["verify", &app]).code, 0);
    assert_eq!(sb.run(&["inspect", &"0".repeat(64)]).code, 3);
    assert_eq!(sb.run(&["inspect", "no-such-file"]).code, 3);
}

#[test]
fn ancestry_outputs() {
    let sb = Sandbox::new();
    let (app, deck) = sb.app_and_deck("a", "", "");
    let v: Value = serde_json::from_str(&sb.ok(&["--json", "ancestry", &app])).unwrap();
    assert_eq!(v["nodes"].as_array().unwrap().len(), 1);
    assert!(v["edges"].as_array().unwrap().is_empty());

    let mut prev: Option<String> = None;
    let mut ids = Vec::new();
    for i in 0..3 {
        let (app, deck) = sb.app_and_deck(&format!("n{i}"), &format!("# {i}\n"), &format!("{i}\n"));
        let mut args = vec!["run", "--app", &app, "--deck", &deck];
        let name = format!("node{i}");
        args.extend(["--name", &name]);
        let runs = sb.runs();
        args.extend(["--run-dir", &runs]);
        if let Some(p) = &prev {
            args.extend(["--input", p.as_str()]);
        }
        args.extend(["--", "sh", "-c", "echo $0 > f", &name]);
        let id = sb.ok(&args);
        ids.push(id.clone());
        prev = Some(id);
    }
    let last = ids.last().unwrap();
    let dot = sb.ok(&["ancestry", last, "--dot"]);
    assert!(dot.starts_with("digraph ancestry {") && dot.ends_with('}'));
    let node_statements = dot.lines().filter(|l| l.trim_start().starts_with('"') && !l.contains("->")).count();
    assert_eq!(node_statements, 9);
    assert_eq!(dot.lines().filter(|l| l.contains("->")).count(), 8);

    let json = sb.ok(&["--json", "ancestry", last]);
    let g = AncestryGraph::from_json(&json).unwrap();
    assert_eq!(g.to_json(), json);
    assert_eq!(g.nodes.len(), 9);
    let limited = AncestryGraph::from_json(&sb.ok(&["--json", "ancestry", last, "--depth", "1"])).unwrap();
    assert_eq!(limited.nodes.len(), 4);

    let deps: Vec<String> = serde_json::from_str(&sb.ok(&["--json", "ancestry", &ids[0], "--dependents"])).unwrap();
    assert_eq!(deps, vec![ids[1].clone()]);
    assert!(sb.ok(&["ancestry", &deck, "--dependents"]).is_empty());
    assert_eq!(sb.run(&["ancestry", &"1".repeat(64)]).code, 3);
}

#[test]
fn hub_flag_overrides_env() {
    let sb = Sandbox::new();
    let from_env = sb.path("env-hub");
    let r: common::Run = std::process::Command::new(common::BIN)
        .env("DATAPALLET_HUB", &from_env)
        .current_dir(sb.tmp.path())
        .args(["hub", "init"])
        .output()
        .unwrap()
        .into();
    assert_eq!(r.code, 0);
    assert!(from_env.join("index.json").is_file());

    let r: common::Run = std::process::Command::new(common::BIN)
        .env("DATAPALLET_HUB", &from_env)
        .current_dir(sb.tmp.path())
        .args(["hub", "init", "--hub", "flag-hub"])
        .output()
        .unwrap()
        .into();
    assert_eq!(r.code, 0);
    assert!(sb.path("flag-hub/index.json").is_file());

    let r: common::Run = std::process::Command::new(common::BIN)
        .env_remove("DATAPALLET_HUB")
        .current_dir(sb.tmp.path())
        .args(["hub", "init"])
        .output()
        .unwrap()
        .into();
    assert_eq!(r.code, 0);
    assert!(sb.path("pallet-hub/index.json").is_file());
}

#[test]
fn hub_list_json_is_stable_and_filtered() {
    let sb = Sandbox::new();
    assert_eq!(sb.run(&["hub", "list"]).code, 2);
    sb.ok(&["hub", "init"]);
    assert_eq!(sb.ok(&["--json", "hub", "list"]), "[]");
    let (app, deck) = sb.app_and_deck("a", "", "");
    let all = sb.ok(&["--json", "hub", "list"]);
    assert_eq!(all, sb.ok(&["--json", "hub", "list"]));
    let v: Vec<Value> = serde_json::from_str(&all).unwrap();
    assert_eq!(v.len(), 2);
    let apps: Vec<Value> = serde_json::from_str(&sb.ok(&["--json", "hub", "list", "--kind", "application"])).unwrap();
    assert_eq!(apps.len(), 1);
    assert_eq!(apps[0]["id"], app.as_str());
    assert!(sb.ok(&["hub", "list", "--kind", "input_deck"]).contains(&deck));
    assert_eq!(sb.run(&["hub", "list", "--kind", "nope"]).code, 2);
}

#[test]
fn deterministic_json_is_repeatable() {
    let a = Sandbox::new();
    let b = Sandbox::new();
    for sb in [&a, &b] {
        sb.write("app/run.sh", "#!/bin/sh\necho hi > out\n", 0o755);
        sb.write("deck/d", "1\n", 0o644);
    }
    let wrap = |sb: &Sandbox| sb.ok(&["--deterministic", "--json", "wrap", "app", "--kind", "application", "--name", "x"]);
    assert_eq!(wrap(&a), wrap(&b));
    let run = |sb: &Sandbox| {
        let app: Value = serde_json::from_str(&wrap(sb)).unwrap();
        let deck = sb.ok(&["--deterministic", "wrap", "deck", "--kind", "input_deck", "--name", "d"]);
        let out = sb.ok(&[
            "--deterministic", "run", "--app", app["id"].as_str().unwrap(), "--deck", &deck, "--name", "n",
            "--run-dir", &sb.runs(), "--", "sh", "{APP}/run.sh",
        ]);
        (out.clone(), sb.ok(&["--json", "inspect", &out]), sb.ok(&["--json", "ancestry", &out]))
    };
    assert_eq!(run(&a), run(&b));
}

#[test]
fn bench_commands() {
    let sb = Sandbox::new();
    let v: Value = serde_json::from_str(&sb.ok(&["--json", "bench", "space"])).unwrap();
    assert!(v["empty_pallet_bytes"].as_u64().unwrap() <= 4096);
    assert_eq!(v["reference_values"]["writeable_kb"], 704.5);
    assert!(sb.ok(&["bench", "space"]).contains("Empty pallet"));

    let v: Value =
        serde_json::from_str(&sb.ok(&["--json", "bench", "node", "--trials", "2", "--sleep-ms", "1", "--output-bytes", "64"])).unwrap();
    assert_eq!(v["trials"], 2);
    assert_eq!(v["rows"].as_array().unwrap().len(), 9);
    let text = sb.ok(&["bench", "node", "--trials", "1", "--sleep-ms", "1"]);
    assert!(text.contains("Workflow node overheads") && text.contains("additivity"));
    assert_eq!(sb.run(&["bench", "node", "--trials", "0"]).code, 2);
}
