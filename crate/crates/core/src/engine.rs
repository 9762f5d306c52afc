//! Sessions: the select-execute loop, commands, goal monitoring and replay.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activity::{candidates, execute, Activity, ActivitySpec, ExecError, ExecutionRecord, Rejection, TraceIndex};
use crate::context::{
    diff, run_context_rules, snapshot, BindingChange, ContextMut, ContextSnapshot, ExternalContext, InternalContext,
    NonConvergence,
};
use crate::history::{CompletionStatus, HistoricalInstance, HistorySource, Label, PracticeVeto, VetoDecision};
use crate::rng::SimRng;
use crate::rules::{
    eval_condition, eval_expr, parse_expr_in, parse_rule_in, EvalError, Expr, ParseError, Pos, RuleKind, RuleSet,
    RuleSetError,
};
use crate::scenario::Scenario;
use crate::schema::Schema;
use crate::value::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum SessionStatus {
    Created,
    Running,
    Paused,
    DecisionRequired,
    Completed,
    Stuck,
    Faulted,
    Aborted,
}

impl SessionStatus {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            SessionStatus::Completed | SessionStatus::Stuck | SessionStatus::Faulted | SessionStatus::Aborted
        )
    }

    /// Whether the session state machine permits `self -> to`.
    pub fn can_transition(self, to: SessionStatus) -> bool {
        use SessionStatus::*;
        matches!(
            (self, to),
            (Created, Running)
                | (Created, Aborted)
                | (Running, Paused)
                | (Paused, Running)
                | (Running, DecisionRequired)
                | (Running, Completed)
                | (Running, Stuck)
                | (Running, Faulted)
                | (Running, Aborted)
                | (Paused, Aborted)
                | (DecisionRequired, Running)
                | (DecisionRequired, Aborted)
        )
    }
}

/// Batch sessions end `Stuck` where interactive ones wait for a decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Mode {
    Batch,
    Interactive,
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    tag = "type",
    rename_all = "camelCase",
    rename_all_fields = "camelCase",
    deny_unknown_fields
)]
pub enum SimCommand {
    Start,
    Pause,
    Resume,
    Step {
        #[serde(default = "one")]
        n: u64,
    },
    Stop,
    EditRule {
        rule_id: String,
        source: String,
    },
    AddRule {
        source: String,
    },
    DeleteRule {
        rule_id: String,
    },
    InjectExternal {
        assignments: BTreeMap<String, Value>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<String>,
    },
    DefineActivity {
        activity: ActivitySpec,
    },
    SetWatch {
        expr: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<String>,
    },
    Replay {
        instance_id: String,
    },
}

impl SimCommand {
    pub fn name(&self) -> &'static str {
        match self {
            SimCommand::Start => "start",
            SimCommand::Pause => "pause",
            SimCommand::Resume => "resume",
            SimCommand::Step { .. } => "step",
            SimCommand::Stop => "stop",
            SimCommand::EditRule { .. } => "editRule",
            SimCommand::AddRule { .. } => "addRule",
            SimCommand::DeleteRule { .. } => "deleteRule",
            SimCommand::InjectExternal { .. } => "injectExternal",
            SimCommand::DefineActivity { .. } => "defineActivity",
            SimCommand::SetWatch { .. } => "setWatch",
            SimCommand::Replay { .. } => "replay",
        }
    }

    /// Commands that change what the instance does and so belong in its script.
    fn is_recorded(&self) -> bool {
        !matches!(
            self,
            SimCommand::Start | SimCommand::Step { .. } | SimCommand::Replay { .. }
        )
    }
}

/// A command applied just before the engine attempts execution record `before_step`
/// (1-based). Entries at 0 are applied before the session starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScriptEntry {
    pub before_step: u64,
    pub command: SimCommand,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CommandError {
    #[error("'{command}' is not allowed while {status:?}")]
    WrongState {
        command: &'static str,
        status: SessionStatus,
    },
    #[error("{message}")]
    Invalid { message: String, pos: Option<Pos> },
    #[error("unknown {kind} '{id}'")]
    UnknownId { kind: &'static str, id: String },
}

impl CommandError {
    fn invalid(message: impl Into<String>) -> Self {
        CommandError::Invalid {
            message: message.into(),
            pos: None,
        }
    }

    fn parse(e: ParseError) -> Self {
        CommandError::Invalid {
            message: e.to_string(),
            pos: Some(e.pos),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("replay diverged at step {step}: expected {expected}, got {got}")]
pub struct DivergenceError {
    pub step: u64,
    pub expected: String,
    pub got: String,
}

/// Why a session faulted.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Fault {
    #[error(transparent)]
    NonConvergence(#[from] NonConvergence),
    #[error("executing '{activity}': {source}")]
    Execution { activity: String, source: ExecError },
    #[error("goal progress: {0}")]
    Progress(String),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
}

/// Evidence shown when no activity can run and the goal is unmet.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Decision {
    pub at: u64,
    pub rejected: Vec<Rejection>,
    pub rule_errors: Vec<RuleIncident>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RuleIncident {
    pub rule_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SelectionOutcome {
    Execute {
        activity_id: String,
        rule_id: String,
    },
    Finished,
    DecisionRequired(Decision),
    /// Goal progress stalled over the stagnation window.
    NotApproaching,
    Faulted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum LogLevel {
    Info,
    Warn,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LogEntry {
    pub seq: u64,
    /// Number of records in the trace when the entry was written.
    pub step: u64,
    pub at: u64,
    pub level: LogLevel,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WatchSample {
    pub step: u64,
    pub value: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WatchPoint {
    pub id: String,
    pub source: String,
    pub expr: Expr,
    pub last_value: Option<Value>,
    pub history: Vec<WatchSample>,
}

/// Outward notifications, drained by whoever hosts the session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase", rename_all_fields = "camelCase")]
pub enum SessionEvent {
    Step {
        record: ExecutionRecord,
        diff: Vec<BindingChange>,
    },
    Status {
        from: SessionStatus,
        to: SessionStatus,
    },
    Log {
        entry: LogEntry,
    },
    Watch {
        id: String,
        sample: WatchSample,
    },
    Rules {
        revision: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct ReplayPlan {
    source: String,
    sequence: Vec<String>,
}

/// Whether the last `window` progress values fail to improve on the first of them.
pub fn stagnated(values: &[f64], window: usize, direction: crate::rules::Direction) -> bool {
    if window == 0 || values.len() < window {
        return false;
    }
    let w = &values[values.len() - window..];
    !w[1..].iter().any(|v| direction.improves(w[0], *v))
}

struct Scoped<'a> {
    history: &'a dyn HistorySource,
    scenario_hash: &'a str,
}

impl PracticeVeto for Scoped<'_> {
    fn veto_check(&self, current: &[String], candidate: &str) -> VetoDecision {
        self.history.veto_check(current, candidate, self.scenario_hash)
    }
}

/// One live simulation instance.
#[derive(Debug, Clone)]
pub struct Session {
    scenario: Arc<Scenario>,
    instance_id: String,
    seed: u64,
    mode: Mode,
    status: SessionStatus,
    schema: Schema,
    rules: RuleSet,
    catalog: BTreeMap<String, Activity>,
    internal: InternalContext,
    external: ExternalContext,
    clock: u64,
    rng: SimRng,
    trace: Vec<ExecutionRecord>,
    index: TraceIndex,
    total_cost: f64,
    log: Vec<LogEntry>,
    watches: Vec<WatchPoint>,
    progress: Vec<f64>,
    stagnation_pause: bool,
    steps_attempted: u64,
    pending: VecDeque<ScriptEntry>,
    applied_script: Vec<ScriptEntry>,
    replay: Option<ReplayPlan>,
    last_diff: Vec<BindingChange>,
    decision: Option<Decision>,
    fault: Option<Fault>,
    capture_events: bool,
    outbox: Vec<SessionEvent>,
}

impl Session {
    pub fn new(scenario: Arc<Scenario>, instance_id: String, seed: u64, mode: Mode) -> Session {
        Session {
            instance_id,
            seed,
            mode,
            status: SessionStatus::Created,
            schema: scenario.schema.clone(),
            rules: scenario.rules.clone(),
            catalog: scenario.activities.clone(),
            internal: scenario.internal.clone(),
            external: scenario.external.clone(),
            clock: 0,
            rng: SimRng::new(seed),
            trace: Vec::new(),
            index: TraceIndex::default(),
            total_cost: 0.0,
            log: Vec::new(),
            watches: Vec::new(),
            progress: Vec::new(),
            stagnation_pause: false,
            steps_attempted: 0,
            pending: VecDeque::new(),
            applied_script: Vec::new(),
            replay: None,
            last_diff: Vec::new(),
            decision: None,
            fault: None,
            capture_events: false,
            outbox: Vec::new(),
            scenario,
        }
    }

    pub fn scenario(&self) -> &Arc<Scenario> {
        &self.scenario
    }
    pub fn instance_id(&self) -> &str {
        &self.instance_id
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn mode(&self) -> Mode {
        self.mode
    }
    pub fn status(&self) -> SessionStatus {
        self.status
    }
    pub fn rules(&self) -> &RuleSet {
        &self.rules
    }
    pub fn catalog(&self) -> &BTreeMap<String, Activity> {
        &self.catalog
    }
    pub fn internal(&self) -> &InternalContext {
        &self.internal
    }
    pub fn external(&self) -> &ExternalContext {
        &self.external
    }
    pub fn clock(&self) -> u64 {
        self.clock
    }
    pub fn trace(&self) -> &[ExecutionRecord] {
        &self.trace
    }
    pub fn activity_sequence(&self) -> &[String] {
        self.index.sequence()
    }
    pub fn total_cost(&self) -> f64 {
        self.total_cost
    }
    pub fn total_time(&self) -> u64 {
        HistoricalInstance::span(&self.trace)
    }
    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }
    pub fn watches(&self) -> &[WatchPoint] {
        &self.watches
    }
    pub fn progress_history(&self) -> &[f64] {
        &self.progress
    }
    pub fn steps_attempted(&self) -> u64 {
        self.steps_attempted
    }
    pub fn last_diff(&self) -> &[BindingChange] {
        &self.last_diff
    }
    pub fn decision(&self) -> Option<&Decision> {
        self.decision.as_ref()
    }
    pub fn fault(&self) -> Option<&Fault> {
        self.fault.as_ref()
    }
    pub fn command_script(&self) -> &[ScriptEntry] {
        &self.applied_script
    }

    /// Current bindings, without applying pending events or context rules.
    pub fn current_snapshot(&self) -> ContextSnapshot {
        snapshot(&self.internal, &self.external, self.clock)
    }

    /// Starts buffering [`SessionEvent`]s for [`Session::take_events`].
    pub fn capture_events(&mut self, on: bool) {
        self.capture_events = on;
    }

    pub fn take_events(&mut self) -> Vec<SessionEvent> {
        std::mem::take(&mut self.outbox)
    }

    /// Queues script entries to be applied at their step boundaries by [`Session::run`].
    pub fn queue_script(&mut self, entries: impl IntoIterator<Item = ScriptEntry>) {
        let mut all: Vec<ScriptEntry> = self.pending.drain(..).chain(entries).collect();
        all.sort_by_key(|e| e.before_step);
        self.pending = all.into();
    }

    fn emit(&mut self, ev: SessionEvent) {
        if self.capture_events {
            self.outbox.push(ev);
        }
    }

    fn note(&mut self, level: LogLevel, message: String) {
        let entry = LogEntry {
            seq: self.log.len() as u64,
            step: self.trace.len() as u64,
            at: self.clock,
            level,
            message,
        };
        self.log.push(entry.clone());
        self.emit(SessionEvent::Log { entry });
    }

    fn set_status(&mut self, to: SessionStatus) {
        let from = self.status;
        if from == to {
            return;
        }
        debug_assert!(from.can_transition(to), "{from:?} -> {to:?}");
        self.status = to;
        self.note(LogLevel::Info, format!("status {from:?} -> {to:?}"));
        self.emit(SessionEvent::Status { from, to });
    }

    fn fail(&mut self, fault: Fault) -> SelectionOutcome {
        self.note(LogLevel::Error, format!("fault: {fault}"));
        self.fault = Some(fault);
        self.set_status(SessionStatus::Faulted);
        SelectionOutcome::Faulted
    }

    fn log_rule_errors(&mut self, errors: Vec<(String, EvalError)>) -> Vec<RuleIncident> {
        errors
            .into_iter()
            .map(|(rule_id, e)| {
                self.note(LogLevel::Warn, format!("rule '{rule_id}' skipped: {e}"));
                RuleIncident {
                    rule_id,
                    message: e.to_string(),
                }
            })
            .collect()
    }

    /// Applies due events and runs context rules for the current instant.
    fn settle_context(&mut self) -> Result<ContextSnapshot, NonConvergence> {
        self.index.set_clock(self.clock);
        for ev in self.external.apply_due_events(self.clock) {
            let assigns: Vec<String> = ev.assignments.iter().map(|(k, v)| format!("{k} := {v}")).collect();
            self.note(
                LogLevel::Info,
                format!("event '{}' at {}: {}", ev.label, ev.at, assigns.join(", ")),
            );
        }
        let ctx_rules = self.rules.ranked(RuleKind::Context);
        let run = run_context_rules(
            &ctx_rules,
            &mut ContextMut {
                internal: &self.internal,
                external: &mut self.external,
            },
            &self.index,
            self.scenario.max_context_iterations(),
        )?;
        self.log_rule_errors(run.errors);
        Ok(snapshot(&self.internal, &self.external, self.clock))
    }

    /// One pass of the select-execute loop. Requires `Running`.
    ///
    /// When nothing can run but external events are still scheduled, the clock
    /// jumps to the next event and selection is retried within the same step.
    pub fn step(&mut self, history: &dyn HistorySource) -> SelectionOutcome {
        debug_assert_eq!(self.status, SessionStatus::Running);
        self.steps_attempted += 1;
        self.decision = None;
        let step_no = self.trace.len() as u64 + 1;
        let mut first = true;
        loop {
            let snap = match self.settle_context() {
                Ok(s) => s,
                Err(nc) => return self.fail(nc.into()),
            };
            if let Some(goal) = self.rules.goal().cloned() {
                match eval_condition(&goal.condition, &snap, &self.index) {
                    Ok(true) => {
                        if let Some(d) = self.replay_leftover(step_no, "goal achieved") {
                            return self.fail(d.into());
                        }
                        self.note(LogLevel::Info, format!("goal '{}' achieved", goal.id));
                        self.set_status(SessionStatus::Completed);
                        return SelectionOutcome::Finished;
                    }
                    Ok(false) => {}
                    Err(e) => {
                        self.log_rule_errors(vec![(goal.id.clone(), e)]);
                    }
                }
                if first {
                    if let Some(p) = goal.progress() {
                        let value = match eval_expr(&p.expr, &snap, &self.index) {
                            Ok(Value::Num(n)) => n,
                            Ok(other) => {
                                return self.fail(Fault::Progress(format!(
                                    "expected a number, got {}",
                                    other.value_type()
                                )))
                            }
                            Err(e) => return self.fail(Fault::Progress(e.to_string())),
                        };
                        self.progress.push(value);
                        let window = self.scenario.stagnation_window();
                        if stagnated(&self.progress, window, p.direction) {
                            self.note(
                                LogLevel::Warn,
                                format!("goal not approaching: no progress over the last {window} steps"),
                            );
                            match self.mode {
                                Mode::Batch => self.set_status(SessionStatus::Stuck),
                                Mode::Interactive => {
                                    self.stagnation_pause = true;
                                    self.set_status(SessionStatus::Paused);
                                }
                            }
                            return SelectionOutcome::NotApproaching;
                        }
                    }
                }
            }
            first = false;

            let scoped = Scoped {
                history,
                scenario_hash: &self.scenario.hash,
            };
            let report = candidates(
                &self.rules,
                &self.catalog,
                &snap,
                &self.index,
                self.index.sequence(),
                &scoped,
            );
            let incidents = self.log_rule_errors(report.rule_errors);
            for r in &report.rejected {
                if let crate::activity::RejectReason::BadPractice { instance_id } = &r.reason {
                    let msg = format!("'{}' vetoed: would follow bad practice {instance_id}", r.activity_id);
                    self.note(LogLevel::Info, msg);
                }
            }

            if let Some(head) = report.accepted.first().cloned() {
                if let Some(plan) = &self.replay {
                    let expected = plan.sequence.get(step_no as usize - 1).cloned();
                    if expected.as_deref() != Some(head.activity_id.as_str()) {
                        let d = DivergenceError {
                            step: step_no,
                            expected: expected.unwrap_or_else(|| "end of trace".into()),
                            got: head.activity_id.clone(),
                        };
                        return self.fail(d.into());
                    }
                }
                let activity = &self.catalog[&head.activity_id];
                let ex = match execute(
                    activity,
                    &self.internal,
                    &snap,
                    &self.index,
                    &mut self.rng,
                    step_no,
                    &head.rule_id,
                ) {
                    Ok(ex) => ex,
                    Err(source) => {
                        return self.fail(Fault::Execution {
                            activity: head.activity_id.clone(),
                            source,
                        })
                    }
                };
                self.internal = ex.internal;
                self.clock = ex.record.end_time;
                self.total_cost += ex.record.cost;
                self.index.push(&head.activity_id);
                self.index.set_clock(self.clock);
                self.last_diff = diff(&snap, &ex.after).unwrap_or_default();
                self.note(
                    LogLevel::Info,
                    format!(
                        "step {step_no}: {} by rule '{}' [{}, {}] cost {}",
                        head.activity_id, head.rule_id, ex.record.start_time, ex.record.end_time, ex.record.cost
                    ),
                );
                self.trace.push(ex.record.clone());
                self.emit(SessionEvent::Step {
                    record: ex.record,
                    diff: self.last_diff.clone(),
                });
                self.evaluate_watches(&ex.after);
                return SelectionOutcome::Execute {
                    activity_id: head.activity_id,
                    rule_id: head.rule_id,
                };
            }

            if let Some(next) = self.external.next_event_time() {
                self.note(LogLevel::Info, format!("no candidate; waiting until {next}"));
                self.clock = self.clock.max(next);
                continue;
            }

            if let Some(d) = self.replay_leftover(step_no, "no candidate") {
                return self.fail(d.into());
            }
            let decision = Decision {
                at: self.clock,
                rejected: report.rejected,
                rule_errors: incidents,
            };
            self.note(
                LogLevel::Warn,
                format!(
                    "no candidate activity and goal unmet ({} rejected)",
                    decision.rejected.len()
                ),
            );
            self.decision = Some(decision.clone());
            match self.mode {
                Mode::Batch => self.set_status(SessionStatus::Stuck),
                Mode::Interactive => self.set_status(SessionStatus::DecisionRequired),
            }
            return SelectionOutcome::DecisionRequired(decision);
        }
    }

    fn replay_leftover(&self, step_no: u64, got: &str) -> Option<DivergenceError> {
        let plan = self.replay.as_ref()?;
        plan.sequence.get(step_no as usize - 1).map(|expected| DivergenceError {
            step: step_no,
            expected: expected.clone(),
            got: got.to_owned(),
        })
    }

    fn evaluate_watches(&mut self, snap: &ContextSnapshot) {
        let step = self.trace.len() as u64;
        let mut events = Vec::new();
        let mut warnings = Vec::new();
        for w in &mut self.watches {
            match eval_expr(&w.expr, snap, &self.index) {
                Ok(value) => {
                    let sample = WatchSample {
                        step,
                        value: value.clone(),
                    };
                    w.last_value = Some(value);
                    w.history.push(sample.clone());
                    events.push(SessionEvent::Watch {
                        id: w.id.clone(),
                        sample,
                    });
                }
                Err(e) => warnings.push(format!("watch '{}': {e}", w.id)),
            }
        }
        for m in warnings {
            self.note(LogLevel::Warn, m);
        }
        for ev in events {
            self.emit(ev);
        }
    }

    fn require(&self, command: &SimCommand, allowed: &[SessionStatus]) -> Result<(), CommandError> {
        if allowed.contains(&self.status) {
            Ok(())
        } else {
            Err(CommandError::WrongState {
                command: command.name(),
                status: self.status,
            })
        }
    }

    /// Applies one command. Edits are only accepted while paused or awaiting a decision.
    pub fn apply_command(&mut self, cmd: SimCommand, history: &dyn HistorySource) -> Result<(), CommandError> {
        use SessionStatus::*;
        const EDITABLE: &[SessionStatus] = &[Paused, DecisionRequired];
        const LIVE: &[SessionStatus] = &[Created, Running, Paused, DecisionRequired];
        let before_step = self.trace.len() as u64 + 1;
        let recorded = cmd.is_recorded().then(|| cmd.clone());
        match &cmd {
            SimCommand::Start => {
                self.require(&cmd, &[Created])?;
                self.set_status(Running);
            }
            SimCommand::Pause => {
                self.require(&cmd, &[Running])?;
                self.set_status(Paused);
            }
            SimCommand::Resume => {
                self.require(&cmd, EDITABLE)?;
                if std::mem::take(&mut self.stagnation_pause) {
                    self.progress.clear();
                }
                self.set_status(Running);
            }
            SimCommand::Step { n } => {
                self.require(&cmd, &[Created, Paused])?;
                if self.status == Created {
                    self.set_status(Running);
                } else {
                    self.resume_for_step();
                }
                for _ in 0..*n {
                    if self.status != Running {
                        break;
                    }
                    self.step(history);
                }
                if self.status == Running {
                    self.set_status(Paused);
                }
            }
            SimCommand::Stop => {
                self.require(&cmd, LIVE)?;
                self.set_status(Aborted);
            }
            SimCommand::EditRule { rule_id, source } => {
                self.require(&cmd, EDITABLE)?;
                let rule = parse_rule_in(source, &self.schema).map_err(CommandError::parse)?;
                self.rules.replace(rule_id, rule).map_err(ruleset_error)?;
                self.note(LogLevel::Info, format!("rule '{rule_id}' replaced: {source}"));
                self.rules_changed();
            }
            SimCommand::AddRule { source } => {
                self.require(&cmd, EDITABLE)?;
                let rule = parse_rule_in(source, &self.schema).map_err(CommandError::parse)?;
                let id = rule.id.clone();
                self.rules.add(rule).map_err(ruleset_error)?;
                self.note(LogLevel::Info, format!("rule '{id}' added: {source}"));
                self.rules_changed();
            }
            SimCommand::DeleteRule { rule_id } => {
                self.require(&cmd, EDITABLE)?;
                self.rules.remove(rule_id).map_err(ruleset_error)?;
                self.note(LogLevel::Info, format!("rule '{rule_id}' deleted"));
                self.rules_changed();
            }
            SimCommand::InjectExternal { assignments, label } => {
                self.require(&cmd, EDITABLE)?;
                for (k, v) in assignments {
                    match self.schema.env.get(k) {
                        None => {
                            return Err(CommandError::invalid(format!(
                                "'{k}' is not a declared environment variable"
                            )))
                        }
                        Some(t) if *t != v.value_type() => {
                            return Err(CommandError::invalid(format!(
                                "'{k}' has type {t}, got {}",
                                v.value_type()
                            )))
                        }
                        _ => {}
                    }
                }
                let label = label.clone().unwrap_or_else(|| "injected".into());
                self.external.inject(self.clock, label.clone(), assignments.clone());
                self.note(
                    LogLevel::Info,
                    format!("external change '{label}' queued at {}", self.clock),
                );
            }
            SimCommand::DefineActivity { activity } => {
                self.require(&cmd, EDITABLE)?;
                if self.catalog.contains_key(&activity.id) {
                    return Err(CommandError::invalid(format!(
                        "activity '{}' already exists",
                        activity.id
                    )));
                }
                let mut schema = self.schema.clone();
                schema.activities.insert(activity.id.clone());
                let compiled = Activity::compile(activity, &schema).map_err(|es| {
                    CommandError::invalid(es.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))
                })?;
                self.schema = schema;
                self.catalog.insert(compiled.id.clone(), compiled);
                self.note(LogLevel::Info, format!("activity '{}' defined", activity.id));
            }
            SimCommand::SetWatch { expr, id } => {
                self.require(&cmd, LIVE)?;
                let (parsed, _) = parse_expr_in(expr, &self.schema).map_err(CommandError::parse)?;
                let id = id.clone().unwrap_or_else(|| format!("w{}", self.watches.len() + 1));
                let mut w = WatchPoint {
                    id: id.clone(),
                    source: expr.clone(),
                    expr: parsed,
                    last_value: None,
                    history: Vec::new(),
                };
                if let Ok(v) = eval_expr(&w.expr, &self.current_snapshot(), &self.index) {
                    w.last_value = Some(v);
                }
                match self.watches.iter_mut().find(|x| x.id == id) {
                    Some(slot) => *slot = w,
                    None => self.watches.push(w),
                }
                self.note(LogLevel::Info, format!("watch '{id}' set: {expr}"));
            }
            SimCommand::Replay { instance_id } => {
                self.require(&cmd, &[Created])?;
                let h = history.instance(instance_id).ok_or_else(|| CommandError::UnknownId {
                    kind: "instance",
                    id: instance_id.clone(),
                })?;
                if h.scenario_hash != self.scenario.hash {
                    return Err(CommandError::invalid(format!(
                        "instance '{instance_id}' belongs to a different scenario"
                    )));
                }
                if h.label != Label::GoodPractice {
                    return Err(CommandError::invalid(format!(
                        "instance '{instance_id}' is not labelled good practice"
                    )));
                }
                self.seed = h.seed;
                self.rng = SimRng::new(h.seed);
                self.queue_script(h.command_script.iter().cloned());
                self.replay = Some(ReplayPlan {
                    source: h.instance_id.clone(),
                    sequence: h.activity_sequence.clone(),
                });
                self.note(LogLevel::Info, format!("replaying {instance_id} with seed {}", h.seed));
            }
        }
        if let Some(command) = recorded {
            self.applied_script.push(ScriptEntry { before_step, command });
        }
        Ok(())
    }

    fn resume_for_step(&mut self) {
        if std::mem::take(&mut self.stagnation_pause) {
            self.progress.clear();
        }
        self.set_status(SessionStatus::Running);
    }

    fn rules_changed(&mut self) {
        let revision = self.rules.revision();
        self.emit(SessionEvent::Rules { revision });
    }

    /// Id of the instance being replayed, if any.
    pub fn replaying(&self) -> Option<&str> {
        self.replay.as_ref().map(|p| p.source.as_str())
    }

    fn apply_due_script(&mut self, history: &dyn HistorySource) {
        let boundary = self.trace.len() as u64 + 1;
        while self.pending.front().is_some_and(|e| e.before_step <= boundary) {
            let entry = self.pending.pop_front().expect("front checked");
            let name = entry.command.name();
            if let Err(e) = self.apply_command(entry.command, history) {
                self.note(LogLevel::Warn, format!("script command '{name}' rejected: {e}"));
            }
        }
    }

    /// Drives the session until it is terminal, blocked, or `max_steps` step
    /// attempts have been made. Queued script entries are applied at their
    /// boundaries; a `Created` session is started after entries at step 0.
    pub fn run(&mut self, max_steps: Option<u64>, history: &dyn HistorySource) -> SessionStatus {
        if max_steps == Some(0) {
            return self.status;
        }
        if self.status == SessionStatus::Created {
            while self.pending.front().is_some_and(|e| e.before_step == 0) {
                let entry = self.pending.pop_front().expect("front checked");
                let name = entry.command.name();
                if let Err(e) = self.apply_command(entry.command, history) {
                    self.note(LogLevel::Warn, format!("script command '{name}' rejected: {e}"));
                }
            }
            if self.status == SessionStatus::Created {
                let _ = self.apply_command(SimCommand::Start, history);
            }
        }
        let mut attempts = 0;
        loop {
            if self.status.is_terminal() {
                break;
            }
            self.apply_due_script(history);
            if self.status != SessionStatus::Running {
                break;
            }
            if max_steps.is_some_and(|m| attempts >= m) {
                break;
            }
            self.step(history);
            attempts += 1;
        }
        self.status
    }

    /// The record to store once the session is terminal.
    pub fn to_historical(&self) -> Option<HistoricalInstance> {
        let completion_status = match self.status {
            SessionStatus::Completed => CompletionStatus::GoalAchieved,
            SessionStatus::Stuck => CompletionStatus::Stuck,
            SessionStatus::Aborted => CompletionStatus::Aborted,
            SessionStatus::Faulted => CompletionStatus::Faulted,
            _ => return None,
        };
        Some(HistoricalInstance {
            instance_id: self.instance_id.clone(),
            scenario_hash: self.scenario.hash.clone(),
            scenario_name: self.scenario.name().to_owned(),
            seed: self.seed,
            activity_sequence: self.index.sequence().to_vec(),
            records: self.trace.clone(),
            total_time: self.total_time(),
            total_cost: self.total_cost,
            completion_status,
            label: Label::Unlabeled,
            audit: Vec::new(),
            command_script: self.applied_script.clone(),
        })
    }
}

fn ruleset_error(e: RuleSetError) -> CommandError {
    match e {
        RuleSetError::UnknownId(id) => CommandError::UnknownId { kind: "rule", id },
        other => CommandError::invalid(other.to_string()),
    }
}
