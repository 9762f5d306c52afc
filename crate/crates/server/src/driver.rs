//! Per-session executor task.
//!
//! The task owns its `Session`. Commands and view requests arrive on one
//! queue and are handled between steps, so every mutation happens at a step
//! boundary and in arrival order.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use dbpsim_core::engine::{CommandError, SessionEvent};
use dbpsim_core::view::{Cursor, StateView};
use dbpsim_core::{Session, SessionStatus, SimCommand};
use serde::Serialize;
use tokio::sync::{broadcast, mpsc, oneshot};

use crate::Shared;

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct CommandAck {
    pub status: SessionStatus,
    pub revision: u64,
    pub step_index: u64,
}

pub enum Msg {
    Command(SimCommand, oneshot::Sender<Result<CommandAck, CommandError>>),
    View(Option<Cursor>, oneshot::Sender<StateView>),
}

#[derive(Debug, Clone, Serialize)]
pub struct StreamEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub event: SessionEvent,
}

#[derive(Clone)]
pub struct SessionHandle {
    pub instance_id: String,
    pub inbox: mpsc::Sender<Msg>,
    pub events: broadcast::Sender<StreamEvent>,
}

struct Driver {
    session: Session,
    shared: Arc<Shared>,
    events: broadcast::Sender<StreamEvent>,
    seq: AtomicU64,
    recorded: bool,
    step_delay: Duration,
}

pub fn spawn(mut session: Session, shared: Arc<Shared>, step_delay: Duration) -> SessionHandle {
    session.capture_events(true);
    let (tx, rx) = mpsc::channel(64);
    let (events, _) = broadcast::channel(1024);
    let handle = SessionHandle {
        instance_id: session.instance_id().to_owned(),
        inbox: tx,
        events: events.clone(),
    };
    let driver = Driver {
        session,
        shared,
        events,
        seq: AtomicU64::new(0),
        recorded: false,
        step_delay,
    };
    tokio::spawn(driver.run(rx));
    handle
}

impl Driver {
    async fn run(mut self, mut rx: mpsc::Receiver<Msg>) {
        loop {
            if self.session.status() == SessionStatus::Running {
                match rx.try_recv() {
                    Ok(msg) => {
                        self.handle(msg);
                        continue;
                    }
                    Err(mpsc::error::TryRecvError::Disconnected) => break,
                    Err(mpsc::error::TryRecvError::Empty) => {}
                }
                {
                    let history = self.shared.history.read().expect("history lock");
                    self.session.step(&*history);
                }
                self.publish();
                if self.step_delay.is_zero() {
                    tokio::task::yield_now().await;
                } else {
                    tokio::time::sleep(self.step_delay).await;
                }
            } else {
                match rx.recv().await {
                    Some(msg) => self.handle(msg),
                    None => break,
                }
            }
        }
    }

    fn handle(&mut self, msg: Msg) {
        match msg {
            Msg::Command(cmd, reply) => {
                let result = {
                    let history = self.shared.history.read().expect("history lock");
                    self.session.apply_command(cmd, &*history)
                };
                self.publish();
                let ack = result.map(|()| CommandAck {
                    status: self.session.status(),
                    revision: self.session.rules().revision(),
                    step_index: self.session.trace().len() as u64,
                });
                let _ = reply.send(ack);
            }
            Msg::View(since, reply) => {
                let history = self.shared.history.read().expect("history lock");
                let hash = &self.session.scenario().hash;
                let own = self.session.instance_id();
                let previous: Vec<&[String]> = history
                    .scenario(hash)
                    .filter(|i| i.instance_id != own)
                    .map(|i| i.activity_sequence.as_slice())
                    .collect();
                let _ = reply.send(StateView::build(&self.session, previous, since));
            }
        }
    }

    /// Forwards buffered session events and records the instance once terminal.
    fn publish(&mut self) {
        for event in self.session.take_events() {
            let seq = self.seq.fetch_add(1, Ordering::Relaxed);
            let _ = self.events.send(StreamEvent { seq, event });
        }
        if self.session.status().is_terminal() && !self.recorded {
            self.recorded = true;
            if let Some(inst) = self.session.to_historical() {
                if let Err(e) = self.shared.record(inst) {
                    tracing::error!(error = %e, "failed to record instance");
                }
            }
        }
    }
}
