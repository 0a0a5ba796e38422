//! Discrete-event model of one pilot allocation.
//!
//! Virtual time starts at 0 with `JOB_START`; the pilot becomes usable at
//! `bootstrap_overhead_s`. From then on the loop pops the earliest pending
//! event, applies it, and refills free slots from the FIFO queue at the same
//! instant. Simultaneous events are ordered by kind (completions, then
//! failures, then node faults, then bootstrap, then launches, then walltime)
//! and then by task uid, which makes a run a pure function of its inputs.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EngineError, Event, EventKind, EventLog, WorkflowState};
use crate::platform::{max_walltime_for, PlatformConfig};
use crate::pst::{TaskDescription, TaskState, WorkflowSpec};
use crate::scheduler::{Placement, Request, SlotTable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RuntimeDist {
    Fixed {
        seconds: f64,
    },
    Uniform {
        lo_s: f64,
        hi_s: f64,
    },
    /// Use the task's `expected_runtime_s`.
    FromExpected,
}

impl RuntimeDist {
    fn validate(&self) -> Result<(), String> {
        match *self {
            Self::Fixed { seconds } if !(seconds.is_finite() && seconds > 0.0) => {
                Err(format!("fixed runtime {seconds} must be > 0"))
            }
            Self::Uniform { lo_s, hi_s }
                if !(lo_s.is_finite() && hi_s.is_finite() && lo_s > 0.0 && lo_s <= hi_s) =>
            {
                Err(format!("uniform({lo_s}, {hi_s}) needs 0 < lo ≤ hi"))
            }
            _ => Ok(()),
        }
    }

    fn sample(&self, task: &TaskDescription, rng: &mut ChaCha8Rng) -> Result<f64, String> {
        match *self {
            Self::Fixed { seconds } => Ok(seconds),
            Self::Uniform { lo_s, hi_s } if lo_s == hi_s => Ok(lo_s),
            Self::Uniform { lo_s, hi_s } => Ok(rng.gen_range(lo_s..hi_s)),
            Self::FromExpected => task
                .expected_runtime_s
                .filter(|s| s.is_finite() && *s > 0.0)
                .ok_or_else(|| format!("task {} has no expected_runtime_s", task.uid)),
        }
    }
}

/// Task durations per class. A task's class is its `class` tag if it has
/// one, otherwise its stage name; unmatched tasks use `default`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeModel {
    pub default: RuntimeDist,
    #[serde(default)]
    pub classes: BTreeMap<String, RuntimeDist>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for RuntimeModel {
    fn default() -> Self {
        Self {
            default: RuntimeDist::FromExpected,
            classes: BTreeMap::new(),
            seed: 0,
        }
    }
}

impl RuntimeModel {
    pub fn fixed(seconds: f64) -> Self {
        Self {
            default: RuntimeDist::Fixed { seconds },
            ..Self::default()
        }
    }

    pub fn uniform(lo_s: f64, hi_s: f64, seed: u64) -> Self {
        Self {
            default: RuntimeDist::Uniform { lo_s, hi_s },
            classes: BTreeMap::new(),
            seed,
        }
    }

    fn dist_for(&self, task: &TaskDescription) -> &RuntimeDist {
        let class = task.tags.get("class").unwrap_or(&task.stage_name);
        self.classes.get(class).unwrap_or(&self.default)
    }

    /// Durations for `tasks` in order, drawn from one seeded stream.
    pub fn durations<'a>(
        &self,
        tasks: impl IntoIterator<Item = &'a TaskDescription>,
    ) -> Result<Vec<f64>, EngineError> {
        self.default.validate().map_err(EngineError::Config)?;
        for d in self.classes.values() {
            d.validate().map_err(EngineError::Config)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        tasks
            .into_iter()
            .map(|t| {
                self.dist_for(t)
                    .sample(t, &mut rng)
                    .map_err(EngineError::Config)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Fault {
    /// The node goes bad at `at_ts` and stays bad: every task holding it
    /// then, or placed on it later, fails.
    PersistentNode { node_id: u32, at_ts: f64 },
    /// Fails whatever holds the node at `at_ts`; the node stays usable.
    TransientNode { node_id: u32, at_ts: f64 },
    /// The task fails after running `at_fraction` of its duration.
    TaskFault { uid: String, at_fraction: f64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FailureModel {
    #[serde(default)]
    pub faults: Vec<Fault>,
    #[serde(default)]
    pub seed: u64,
}

impl FailureModel {
    pub fn none() -> Self {
        Self::default()
    }

    /// `count` persistent node faults at seeded random nodes and times in
    /// `[0, horizon_s)`.
    pub fn random_node_faults(seed: u64, count: usize, nodes: u32, horizon_s: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let faults = (0..count)
            .map(|_| Fault::PersistentNode {
                node_id: rng.gen_range(0..nodes),
                at_ts: rng.gen_range(0.0..horizon_s),
            })
            .collect();
        Self { faults, seed }
    }

    /// The same model with node faults removed (a fresh allocation).
    pub fn without_node_faults(&self) -> Self {
        Self {
            faults: self
                .faults
                .iter()
                .filter(|f| matches!(f, Fault::TaskFault { .. }))
                .cloned()
                .collect(),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub allocation_nodes: u32,
    pub walltime_s: f64,
    pub runtime: RuntimeModel,
    #[serde(default)]
    pub failures: FailureModel,
    /// Delay between placement and launch of each task.
    #[serde(default)]
    pub launch_delay_s: f64,
    /// Global cap on launches per second; `None` is unlimited.
    #[serde(default)]
    pub launch_rate_cap: Option<f64>,
    /// Tell the scheduler about persistent node faults so it stops using
    /// the node. Off by default: the pilot keeps placing onto a bad node it
    /// has no way to detect.
    #[serde(default)]
    pub quarantine_failed_nodes: bool,
    /// Free-form label recorded in `JOB_START`.
    #[serde(default = "default_attempt")]
    pub attempt: u32,
}

fn default_attempt() -> u32 {
    1
}

impl SimConfig {
    pub fn new(allocation_nodes: u32, walltime_s: f64, runtime: RuntimeModel) -> Self {
        Self {
            allocation_nodes,
            walltime_s,
            runtime,
            failures: FailureModel::none(),
            launch_delay_s: 0.0,
            launch_rate_cap: None,
            quarantine_failed_nodes: false,
            attempt: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimAction {
    Complete { task: usize },
    Fail { task: usize, reason: String },
    NodeFault { node: u32, persistent: bool },
    BootstrapDone,
    Launch { task: usize },
    Walltime,
}

impl SimAction {
    fn priority(&self) -> u8 {
        match self {
            Self::Complete { .. } => 0,
            Self::Fail { .. } => 1,
            Self::NodeFault { .. } => 2,
            Self::BootstrapDone => 3,
            Self::Launch { .. } => 4,
            Self::Walltime => 5,
        }
    }
}

/// A future event. Ordered by `(ts, kind priority, key, seq)`.
#[derive(Debug, Clone)]
pub struct PendingEvent {
    pub ts: f64,
    pub action: SimAction,
    /// Task uid, or zero-padded node id for node faults.
    pub key: String,
    seq: u64,
}

impl PendingEvent {
    pub fn new(ts: f64, action: SimAction, key: impl Into<String>, seq: u64) -> Self {
        Self {
            ts,
            action,
            key: key.into(),
            seq,
        }
    }

    fn order(&self, other: &Self) -> Ordering {
        self.ts
            .total_cmp(&other.ts)
            .then(self.action.priority().cmp(&other.action.priority()))
            .then_with(|| self.key.cmp(&other.key))
            .then(self.seq.cmp(&other.seq))
    }
}

impl PartialEq for PendingEvent {
    fn eq(&self, other: &Self) -> bool {
        self.order(other) == Ordering::Equal
    }
}

impl Eq for PendingEvent {}

impl PartialOrd for PendingEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for PendingEvent {
    // Reversed so that `BinaryHeap` pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other.order(self)
    }
}

#[derive(Debug, Clone, Default)]
struct InFlight {
    placement: Option<Placement>,
    launched_at: Option<f64>,
    // Set by a transient fault that hit the task before launch.
    doomed: bool,
}

/// Simulation state; advance it with [`Simulation::step`].
#[derive(Debug)]
pub struct Simulation {
    cfg: SimConfig,
    state: WorkflowState,
    table: SlotTable,
    requests: Vec<Request>,
    durations: Vec<f64>,
    task_faults: Vec<Option<f64>>,
    inflight: Vec<InFlight>,
    queue: VecDeque<usize>,
    pending: BinaryHeap<PendingEvent>,
    bad_nodes: HashSet<u32>,
    next_launch: f64,
    seq: u64,
    now: f64,
    finished: bool,
    log: EventLog,
}

impl Simulation {
    pub fn new(
        specs: &[WorkflowSpec],
        platform: &PlatformConfig,
        cfg: &SimConfig,
    ) -> Result<Self, EngineError> {
        platform.validate()?;
        let nodes = cfg.allocation_nodes;
        if nodes == 0 || nodes > platform.node_count {
            return Err(EngineError::Config(format!(
                "allocation of {nodes} nodes outside 1..={}",
                platform.node_count
            )));
        }
        let allowed = max_walltime_for(&platform.policy, nodes)?;
        if !(cfg.walltime_s.is_finite() && cfg.walltime_s > 0.0) {
            return Err(EngineError::Config(format!(
                "walltime {} must be > 0",
                cfg.walltime_s
            )));
        }
        if cfg.walltime_s > allowed {
            return Err(EngineError::PolicyViolation {
                requested: cfg.walltime_s,
                allowed,
                nodes,
            });
        }
        if platform.bootstrap_overhead_s > cfg.walltime_s {
            return Err(EngineError::Config(format!(
                "bootstrap {}s exceeds walltime {}s",
                platform.bootstrap_overhead_s, cfg.walltime_s
            )));
        }
        if !(cfg.launch_delay_s.is_finite() && cfg.launch_delay_s >= 0.0) {
            return Err(EngineError::Config("launch_delay_s must be ≥ 0".into()));
        }
        if let Some(cap) = cfg.launch_rate_cap {
            if !(cap.is_finite() && cap > 0.0) {
                return Err(EngineError::Config("launch_rate_cap must be > 0".into()));
            }
        }

        let state = WorkflowState::new(specs)?;
        let descs: Vec<&TaskDescription> = (0..state.len()).map(|g| &state.task(g).desc).collect();
        let durations = cfg.runtime.durations(descs.iter().copied())?;
        let mut requests = Vec::with_capacity(descs.len());
        for d in &descs {
            let r = Request::for_task(d, &platform.node)?;
            if r.footprint.nodes_needed > nodes {
                return Err(EngineError::Config(format!(
                    "task {} needs {} nodes, allocation has {nodes}",
                    d.uid, r.footprint.nodes_needed
                )));
            }
            requests.push(r);
        }

        let mut sim = Self {
            table: SlotTable::new(&platform.node, nodes)?,
            task_faults: vec![None; state.len()],
            inflight: vec![InFlight::default(); state.len()],
            state,
            requests,
            durations,
            queue: VecDeque::new(),
            pending: BinaryHeap::new(),
            bad_nodes: HashSet::new(),
            next_launch: 0.0,
            seq: 0,
            now: 0.0,
            finished: false,
            log: EventLog::new(),
            cfg: cfg.clone(),
        };

        for fault in &cfg.failures.faults {
            match fault {
                Fault::PersistentNode { node_id, at_ts }
                | Fault::TransientNode { node_id, at_ts } => {
                    if *node_id >= nodes {
                        return Err(EngineError::Config(format!(
                            "fault on node {node_id} outside allocation of {nodes}"
                        )));
                    }
                    if !(*at_ts >= 0.0 && *at_ts <= cfg.walltime_s) {
                        return Err(EngineError::Config(format!(
                            "fault time {at_ts} outside walltime"
                        )));
                    }
                    let persistent = matches!(fault, Fault::PersistentNode { .. });
                    sim.schedule(
                        *at_ts,
                        SimAction::NodeFault {
                            node: *node_id,
                            persistent,
                        },
                    );
                }
                Fault::TaskFault { uid, at_fraction } => {
                    if !(*at_fraction > 0.0 && *at_fraction <= 1.0) {
                        return Err(EngineError::Config(format!(
                            "task fault fraction {at_fraction} outside (0, 1]"
                        )));
                    }
                    // Faults for tasks outside this job are ignored, which
                    // lets one model follow tasks across resubmissions.
                    if let Some(&g) = sim.state.index.get(uid) {
                        sim.task_faults[g] = Some(*at_fraction);
                    }
                }
            }
        }

        sim.log.push(Event::job(
            0.0,
            EventKind::JobStart,
            format!(
                "platform={} nodes={} walltime={} attempt={}",
                platform.name, nodes, cfg.walltime_s, cfg.attempt
            ),
        ));
        sim.schedule(platform.bootstrap_overhead_s, SimAction::BootstrapDone);
        sim.schedule(cfg.walltime_s, SimAction::Walltime);
        Ok(sim)
    }

    fn schedule(&mut self, ts: f64, action: SimAction) {
        let key = match &action {
            SimAction::Complete { task }
            | SimAction::Fail { task, .. }
            | SimAction::Launch { task } => self.state.task(*task).desc.uid.clone(),
            SimAction::NodeFault { node, .. } => format!("{node:010}"),
            SimAction::BootstrapDone | SimAction::Walltime => String::new(),
        };
        self.pending
            .push(PendingEvent::new(ts, action, key, self.seq));
        self.seq += 1;
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn table(&self) -> &SlotTable {
        &self.table
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn queued(&self) -> Vec<String> {
        self.queue
            .iter()
            .map(|g| self.state.task(*g).desc.uid.clone())
            .collect()
    }

    pub fn task_state(&self, uid: &str) -> Option<TaskState> {
        self.state.index.get(uid).map(|g| self.state.task(*g).state)
    }

    /// Pops the earliest pending event and applies it, along with the
    /// placements it makes possible. Returns `false` once the job has ended.
    pub fn step(&mut self) -> Result<bool, EngineError> {
        if self.finished {
            return Ok(false);
        }
        let Some(ev) = self.pending.pop() else {
            // Nothing left can happen before walltime; end now.
            self.finish(self.now);
            return Ok(false);
        };
        self.now = ev.ts;
        match ev.action {
            SimAction::BootstrapDone => {
                self.log
                    .push(Event::job(self.now, EventKind::BootstrapDone, ""));
                let ids = self.state.initial_frontier();
                self.queue.extend(ids);
            }
            SimAction::Launch { task } => self.launch(task)?,
            SimAction::Complete { task } => {
                if self.state.task(task).state == TaskState::Running {
                    self.terminate(task, TaskState::Done, String::new())?;
                }
            }
            SimAction::Fail { task, reason } => {
                if self.state.task(task).state == TaskState::Running {
                    self.terminate(task, TaskState::Failed, reason)?;
                }
            }
            SimAction::NodeFault { node, persistent } => self.node_fault(node, persistent)?,
            SimAction::Walltime => {
                self.expire()?;
                return Ok(false);
            }
        }
        if self.state.all_terminal() && self.log.bootstrap_ts().is_some() {
            self.finish(self.now);
            return Ok(false);
        }
        self.drain();
        Ok(true)
    }

    pub fn run(mut self) -> Result<EventLog, EngineError> {
        while self.step()? {}
        Ok(self.log)
    }

    fn finish(&mut self, ts: f64) {
        if !self.finished {
            self.log.push(Event::job(ts, EventKind::JobEnd, ""));
            self.finished = true;
        }
    }

    fn nodes_of(&self, g: usize) -> Option<Vec<u32>> {
        self.inflight[g].placement.as_ref().map(Placement::node_ids)
    }

    fn drain(&mut self) {
        while let Some(&g) = self.queue.front() {
            let Some(placement) = self.table.try_place(&self.requests[g]) else {
                break;
            };
            self.queue.pop_front();
            let detail = format!("cores={} gpus={}", placement.cores(), placement.gpus());
            let nodes = placement.node_ids();
            self.state
                .transition(g, TaskState::Scheduled, self.now)
                .expect("queued task is NEW");
            self.log.push(Event::task(
                self.now,
                EventKind::TaskScheduled,
                &self.requests[g].uid,
                Some(nodes),
                detail,
            ));
            self.inflight[g].placement = Some(placement);
            let mut at = self.now + self.cfg.launch_delay_s;
            if let Some(cap) = self.cfg.launch_rate_cap {
                at = at.max(self.next_launch);
                self.next_launch = at + 1.0 / cap;
            }
            self.schedule(at, SimAction::Launch { task: g });
        }
    }

    fn launch(&mut self, g: usize) -> Result<(), EngineError> {
        if self.state.task(g).state != TaskState::Scheduled {
            return Ok(());
        }
        self.state.transition(g, TaskState::Running, self.now)?;
        let placement = self.inflight[g]
            .placement
            .as_ref()
            .expect("scheduled task is placed");
        let detail = format!("cores={} gpus={}", placement.cores(), placement.gpus());
        let nodes = placement.node_ids();
        let bad = nodes.iter().find(|n| self.bad_nodes.contains(n)).copied();
        self.log.push(Event::task(
            self.now,
            EventKind::TaskLaunched,
            &self.requests[g].uid,
            Some(nodes),
            detail,
        ));
        self.inflight[g].launched_at = Some(self.now);
        if self.inflight[g].doomed {
            return self.terminate(
                g,
                TaskState::Failed,
                "node_failure: transient fault before launch".into(),
            );
        }
        let duration = self.durations[g];
        let mut end = (self.now + duration, SimAction::Complete { task: g });
        if let Some(f) = self.task_faults[g] {
            end = (
                self.now + f * duration,
                SimAction::Fail {
                    task: g,
                    reason: format!("task_fault: at {f:.2} of runtime"),
                },
            );
        }
        if let Some(node) = bad {
            // A task on a persistently bad node runs its course and then fails.
            let at = self.now + duration;
            if at <= end.0 {
                end = (
                    at,
                    SimAction::Fail {
                        task: g,
                        reason: format!("node_failure: node {node} (persistent)"),
                    },
                );
            }
        }
        self.schedule(end.0, end.1);
        Ok(())
    }

    fn terminate(&mut self, g: usize, to: TaskState, detail: String) -> Result<(), EngineError> {
        let nodes = self.nodes_of(g);
        if let Some(p) = self.inflight[g].placement.take() {
            self.table.release(&p).expect("placement is live");
        }
        let kind = match to {
            TaskState::Done => EventKind::TaskDone,
            TaskState::Failed => EventKind::TaskFailed,
            _ => EventKind::TaskCanceled,
        };
        let next = self.state.transition(g, to, self.now)?;
        self.log.push(Event::task(
            self.now,
            kind,
            &self.requests[g].uid,
            nodes,
            detail,
        ));
        self.queue.extend(next);
        Ok(())
    }

    fn node_fault(&mut self, node: u32, persistent: bool) -> Result<(), EngineError> {
        let label = if persistent {
            "persistent"
        } else {
            "transient"
        };
        self.log.push(Event {
            ts: self.now,
            kind: EventKind::NodeFailed,
            task_uid: None,
            node_ids: Some(vec![node]),
            detail: label.into(),
        });
        if persistent {
            self.bad_nodes.insert(node);
            if self.cfg.quarantine_failed_nodes {
                self.table
                    .mark_node_health(node, false)
                    .map_err(|e| EngineError::Config(e.to_string()))?;
            }
        }
        let holders: Vec<usize> = (0..self.inflight.len())
            .filter(|g| {
                self.inflight[*g]
                    .placement
                    .as_ref()
                    .is_some_and(|p| p.nodes.iter().any(|(n, _)| *n == node))
            })
            .collect();
        for g in holders {
            match self.state.task(g).state {
                TaskState::Running => self.terminate(
                    g,
                    TaskState::Failed,
                    format!("node_failure: node {node} ({label})"),
                )?,
                // Persistent faults catch these at launch via `bad_nodes`.
                TaskState::Scheduled if !persistent => self.inflight[g].doomed = true,
                _ => {}
            }
        }
        Ok(())
    }

    fn expire(&mut self) -> Result<(), EngineError> {
        for g in self.state.unfinished() {
            if self.state.task(g).state.is_terminal() {
                continue;
            }
            let nodes = self.nodes_of(g);
            if let Some(p) = self.inflight[g].placement.take() {
                self.table.release(&p).expect("placement is live");
            }
            self.state.transition(g, TaskState::Canceled, self.now)?;
            self.log.push(Event::task(
                self.now,
                EventKind::TaskCanceled,
                &self.requests[g].uid,
                nodes,
                "walltime",
            ));
        }
        self.queue.clear();
        self.finish(self.now);
        Ok(())
    }
}

/// Runs one simulated allocation to completion or walltime.
pub fn run_simulated(
    specs: &[WorkflowSpec],
    platform: &PlatformConfig,
    cfg: &SimConfig,
) -> Result<EventLog, EngineError> {
    Simulation::new(specs, platform, cfg)?.run()
}
