use std::path::PathBuf;
use std::sync::Arc;

use dbpsim_core::activity::RejectReason;
use dbpsim_core::engine::{Fault, SelectionOutcome, SimCommand};
use dbpsim_core::history::{CompletionStatus, NoHistory};
use dbpsim_core::storage::{canonical_json, load_commands, TraceExport};
use dbpsim_core::view::{NodeClass, StateView};
use dbpsim_core::{load_scenario, HistoryStore, Label, Mode, Scenario, Session, SessionStatus, Value};

fn path(name: &str) -> PathBuf {
    [env!("CARGO_MANIFEST_DIR"), "..", "..", "fixtures", name]
        .iter()
        .collect()
}

fn fixture(name: &str) -> Vec<u8> {
    std::fs::read(path(name)).unwrap()
}

fn scenario(name: &str) -> Arc<Scenario> {
    Arc::new(load_scenario(&fixture(&format!("{name}.scenario.json"))).unwrap())
}

fn ordering_with(edit: impl FnOnce(&mut serde_json::Value)) -> Arc<Scenario> {
    let mut doc: serde_json::Value = serde_json::from_slice(&fixture("ordering.scenario.json")).unwrap();
    edit(&mut doc);
    Arc::new(load_scenario(doc.to_string().as_bytes()).unwrap())
}

fn cmd(s: &mut Session, c: SimCommand) {
    s.apply_command(c.clone(), &NoHistory)
        .unwrap_or_else(|e| panic!("{c:?}: {e}"));
}

fn seq(s: &Session) -> Vec<&str> {
    s.activity_sequence().iter().map(String::as_str).collect()
}

#[test]
fn uninterrupted_run_reaches_the_goal() {
    let mut s = Session::new(scenario("ordering"), "i".into(), 42, Mode::Batch);
    assert_eq!(s.run(Some(100), &NoHistory), SessionStatus::Completed);
    assert_eq!(s.current_snapshot().bindings()["ordersFulfilled"], Value::Num(3.0));
    assert_eq!(s.total_cost(), 9.0);
    assert_eq!(s.internal().resources["stock"], 1.0);
    assert_eq!(
        s.to_historical().unwrap().completion_status,
        CompletionStatus::GoalAchieved
    );
}

#[test]
fn interactive_edit_changes_the_next_step_of_the_same_instance() {
    let mut s = Session::new(scenario("ordering"), "inst-7".into(), 42, Mode::Interactive);
    cmd(&mut s, SimCommand::Step { n: 2 });
    assert_eq!(s.status(), SessionStatus::Paused);
    assert_eq!(seq(&s), ["ReceiveOrder", "CheckStock"]);
    let script = load_commands(&fixture("ordering-edit.commands.json")).unwrap();
    for e in script
        .commands
        .into_iter()
        .filter(|e| !matches!(e.command, SimCommand::Pause))
    {
        cmd(&mut s, e.command);
    }
    assert_eq!(s.status(), SessionStatus::Running);
    assert!(matches!(
        s.step(&NoHistory),
        SelectionOutcome::Execute { ref activity_id, ref rule_id } if activity_id == "RejectOrder" && rule_id == "r6"
    ));
    assert_eq!(s.instance_id(), "inst-7");
}

#[test]
fn edit_script_reproduces_the_second_golden() {
    let mut s = Session::new(scenario("ordering"), "inst-000001".into(), 42, Mode::Batch);
    s.queue_script(load_commands(&fixture("ordering-edit.commands.json")).unwrap().commands);
    s.run(None, &NoHistory);
    assert_eq!(
        TraceExport::from_session(&s).to_json().into_bytes(),
        fixture("ordering-b.trace.json")
    );
}

#[test]
fn supplier_outage_removes_replenishment_and_batch_ends_stuck() {
    let low_stock = || ordering_with(|d| d["declarations"]["resources"][0]["initial"] = 1.into());
    let outage = SimCommand::InjectExternal {
        assignments: [("supplierAvailable".to_owned(), Value::Bool(false))].into(),
        label: Some("supplier down".into()),
    };

    let mut s = Session::new(low_stock(), "i".into(), 42, Mode::Interactive);
    cmd(&mut s, SimCommand::Step { n: 2 });
    cmd(&mut s, SimCommand::Step { n: 1 });
    assert_eq!(seq(&s).last(), Some(&"ReplenishStock"), "control run replenishes");

    let mut s = Session::new(low_stock(), "i".into(), 42, Mode::Interactive);
    cmd(&mut s, SimCommand::Step { n: 2 });
    cmd(&mut s, outage.clone());
    cmd(&mut s, SimCommand::Step { n: 1 });
    assert_eq!(s.status(), SessionStatus::DecisionRequired);
    assert!(!seq(&s).contains(&"ReplenishStock"));

    let mut s = Session::new(low_stock(), "i".into(), 42, Mode::Batch);
    s.queue_script([dbpsim_core::engine::ScriptEntry {
        before_step: 3,
        command: SimCommand::Pause,
    }]);
    s.run(None, &NoHistory);
    cmd(&mut s, outage);
    cmd(&mut s, SimCommand::Resume);
    assert_eq!(s.run(None, &NoHistory), SessionStatus::Stuck);
    assert_eq!(s.to_historical().unwrap().completion_status, CompletionStatus::Stuck);
}

fn recorded(store: &mut HistoryStore, s: &Session) -> String {
    store.record(s.to_historical().unwrap()).unwrap()
}

#[test]
fn replay_reproduces_and_detects_divergence() {
    let sc = scenario("ordering");
    let mut store = HistoryStore::new();
    let mut original = Session::new(sc.clone(), store.allocate_instance_id(), 42, Mode::Batch);
    original.run(None, &store);
    let id = recorded(&mut store, &original);

    let mut s = Session::new(sc.clone(), store.allocate_instance_id(), 0, Mode::Batch);
    let err = s.apply_command(
        SimCommand::Replay {
            instance_id: id.clone(),
        },
        &store,
    );
    assert!(err.is_err(), "unlabelled instances are not replayable");
    store.label(&id, Label::GoodPractice, "t", 0).unwrap();
    cmd_with(
        &mut s,
        SimCommand::Replay {
            instance_id: id.clone(),
        },
        &store,
    );
    assert_eq!(s.run(None, &store), SessionStatus::Completed);
    assert_eq!(s.activity_sequence(), original.activity_sequence());
    assert_eq!(s.trace(), original.trace());

    let mut s = Session::new(sc, store.allocate_instance_id(), 0, Mode::Batch);
    cmd_with(&mut s, SimCommand::Replay { instance_id: id }, &store);
    s.apply_command(SimCommand::Start, &store).unwrap();
    cmd_with(&mut s, SimCommand::Pause, &store);
    cmd_with(&mut s, SimCommand::DeleteRule { rule_id: "r3".into() }, &store);
    cmd_with(&mut s, SimCommand::Resume, &store);
    assert_eq!(s.run(None, &store), SessionStatus::Faulted);
    match s.fault() {
        Some(Fault::Divergence(d)) => {
            assert_eq!((d.step, d.expected.as_str()), (3, "ShipOrder"));
            assert_eq!(original.trace()[2].activity_id, "ShipOrder");
        }
        other => panic!("{other:?}"),
    }
}

fn cmd_with(s: &mut Session, c: SimCommand, h: &HistoryStore) {
    s.apply_command(c.clone(), h).unwrap_or_else(|e| panic!("{c:?}: {e}"));
}

/// One finished branching run per route, keyed by the second activity.
fn branching_routes(store: &mut HistoryStore) -> std::collections::BTreeMap<String, (u64, Session)> {
    let sc = scenario("branching");
    let mut by_route = std::collections::BTreeMap::new();
    for seed in 0..50 {
        let mut s = Session::new(sc.clone(), store.allocate_instance_id(), seed, Mode::Batch);
        s.run(None, &*store);
        by_route.entry(s.activity_sequence()[1].clone()).or_insert((seed, s));
    }
    assert_eq!(by_route.len(), 2, "both routes occur");
    by_route
}

#[test]
fn vetoed_route_waits_for_the_alternative() {
    let mut store = HistoryStore::new();
    let mut routes = branching_routes(&mut store);
    let (standard_seed, standard) = routes.remove("Standard").unwrap();
    let (_, express) = routes.remove("Express").unwrap();
    // An acceptable trace sharing the first step keeps `Start` itself allowed.
    recorded(&mut store, &express);
    let id = recorded(&mut store, &standard);
    store.label(&id, Label::BadPractice, "t", 0).unwrap();

    let mut s = Session::new(
        scenario("branching"),
        store.allocate_instance_id(),
        standard_seed,
        Mode::Batch,
    );
    assert_eq!(s.run(None, &store), SessionStatus::Completed);
    assert_eq!(seq(&s), ["Start", "Express", "Finish"]);
    assert!(s
        .log()
        .iter()
        .any(|e| e.message.contains(&format!("vetoed: would follow bad practice {id}"))));
}

#[test]
fn fully_vetoed_step_requires_a_decision_with_evidence() {
    let mut store = HistoryStore::new();
    let routes = branching_routes(&mut store);
    let mut ids = Vec::new();
    for (_, s) in routes.values() {
        let id = recorded(&mut store, s);
        store.label(&id, Label::BadPractice, "t", 0).unwrap();
        ids.push(id);
    }

    let mut s = Session::new(
        scenario("branching"),
        store.allocate_instance_id(),
        0,
        Mode::Interactive,
    );
    cmd_with(&mut s, SimCommand::Start, &store);
    s.step(&store);
    assert_eq!(s.status(), SessionStatus::DecisionRequired);
    assert!(s.trace().is_empty());
    let d = s.decision().unwrap();
    assert!(d.rejected.iter().any(|r| r.activity_id == "Start"
        && matches!(&r.reason, RejectReason::BadPractice { instance_id } if ids.contains(instance_id))));
}

#[test]
fn flat_progress_stops_after_the_window() {
    let mut s = Session::new(scenario("flat-progress"), "i".into(), 0, Mode::Batch);
    cmd(&mut s, SimCommand::Start);
    let mut outcomes = Vec::new();
    while s.status() == SessionStatus::Running {
        outcomes.push(s.step(&NoHistory));
    }
    assert_eq!(outcomes.len(), 5);
    assert!(matches!(outcomes[4], SelectionOutcome::NotApproaching));
    assert_eq!(s.progress_history(), [0.0; 5]);
    assert_eq!(s.status(), SessionStatus::Stuck);
    assert_eq!(s.trace().len(), 4);
}

#[test]
fn oscillating_context_faults_on_the_first_step() {
    let mut s = Session::new(scenario("oscillator"), "i".into(), 0, Mode::Batch);
    assert_eq!(s.run(None, &NoHistory), SessionStatus::Faulted);
    match s.fault() {
        Some(Fault::NonConvergence(nc)) => {
            assert_eq!(nc.iterations, 100);
            assert_eq!(nc.variables, ["flag"]);
        }
        other => panic!("{other:?}"),
    }
    assert!(s.trace().is_empty());
}

#[test]
fn state_after_step_three_matches_the_golden_view() {
    let mut s = Session::new(scenario("ordering"), "inst-000001".into(), 42, Mode::Interactive);
    cmd(
        &mut s,
        SimCommand::SetWatch {
            expr: "stock".into(),
            id: Some("stock".into()),
        },
    );
    cmd(&mut s, SimCommand::Step { n: 3 });
    let view = StateView::build(&s, std::iter::empty(), None);
    let g = &view.process_graph;
    assert_eq!(g.class_of("ShipOrder"), Some(NodeClass::JustExecuted));
    assert_eq!(g.class_of("ReceiveOrder"), Some(NodeClass::ExecutedThisInstance));
    assert_eq!(g.class_of("CheckStock"), Some(NodeClass::ExecutedThisInstance));
    assert_eq!(view.watch_points[0].last_value, Some(Value::Num(7.0)));

    let text = canonical_json(&view);
    let golden = path("ordering-step3.state.json");
    if std::env::var_os("DBPSIM_BLESS").is_some() {
        std::fs::write(&golden, &text).unwrap();
    }
    assert_eq!(text, std::fs::read_to_string(&golden).unwrap());
}
