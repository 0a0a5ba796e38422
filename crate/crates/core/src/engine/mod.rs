//! Execution of one allocation ("batch job").
//!
//! Two backends share the event-log format: [`sim`] advances a discrete-event
//! model of an HPC allocation, [`local`] runs real subprocesses on this host.

mod event;
pub mod local;
pub mod sim;

use std::collections::{HashMap, HashSet};

use thiserror::Error;

pub use event::{detail_field, Event, EventKind, EventLog, LogError};
pub use local::run_local;
pub use sim::{
    run_simulated, FailureModel, Fault, PendingEvent, RuntimeDist, RuntimeModel, SimAction,
    SimConfig, Simulation,
};

use crate::platform::PlatformError;
use crate::pst::{self, Pipeline, PstError, Task, TaskState, WorkflowSpec};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("PolicyViolation: walltime {requested}s exceeds {allowed}s allowed for {nodes} nodes")]
    PolicyViolation {
        requested: f64,
        allowed: f64,
        nodes: u32,
    },
    #[error("ConfigError: {0}")]
    Config(String),
    #[error(transparent)]
    Platform(#[from] PlatformError),
    #[error(transparent)]
    State(#[from] PstError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl EngineError {
    /// True for problems with the inputs rather than with execution.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Self::PolicyViolation { .. } | Self::Config(_) | Self::Platform(_)
        )
    }
}

/// Task states for every pipeline in a job plus the bookkeeping needed to
/// advance stages without rescanning whole pipelines.
#[derive(Debug, Clone)]
pub(crate) struct WorkflowState {
    pub pipelines: Vec<Pipeline>,
    /// Global task id -> (pipeline, stage, index in stage).
    pub locs: Vec<(usize, usize, usize)>,
    pub index: HashMap<String, usize>,
    stage_first: Vec<Vec<usize>>,
    current: Vec<usize>,
    remaining: Vec<usize>,
    live: usize,
}

impl WorkflowState {
    pub fn new(specs: &[WorkflowSpec]) -> Result<Self, EngineError> {
        let mut names = HashSet::new();
        let mut problems = Vec::new();
        for spec in specs {
            if !names.insert(spec.name.as_str()) {
                problems.push(format!("duplicate pipeline name {}", spec.name));
            }
            problems.extend(pst::validate_workflow(spec).into_iter().map(|v| v.0));
        }
        let mut locs = Vec::new();
        let mut index = HashMap::new();
        let mut stage_first = Vec::new();
        for (p, spec) in specs.iter().enumerate() {
            let mut firsts = Vec::new();
            for (s, stage) in spec.stages.iter().enumerate() {
                firsts.push(locs.len());
                for (i, t) in stage.tasks.iter().enumerate() {
                    if index.insert(t.uid.clone(), locs.len()).is_some() {
                        problems.push(format!("uid {} used in more than one pipeline", t.uid));
                    }
                    locs.push((p, s, i));
                }
            }
            stage_first.push(firsts);
        }
        if !problems.is_empty() {
            problems.dedup();
            return Err(EngineError::Config(problems.join("; ")));
        }
        let pipelines: Vec<Pipeline> = specs.iter().map(Pipeline::new).collect();
        let remaining = pipelines
            .iter()
            .map(|p| p.stages.first().map_or(0, |s| s.tasks.len()))
            .collect();
        Ok(Self {
            current: vec![0; pipelines.len()],
            remaining,
            live: locs.len(),
            pipelines,
            locs,
            index,
            stage_first,
        })
    }

    pub fn len(&self) -> usize {
        self.locs.len()
    }

    pub fn task(&self, g: usize) -> &Task {
        let (p, s, i) = self.locs[g];
        &self.pipelines[p].stages[s].tasks[i]
    }

    fn task_mut(&mut self, g: usize) -> &mut Task {
        let (p, s, i) = self.locs[g];
        &mut self.pipelines[p].stages[s].tasks[i]
    }

    pub fn all_terminal(&self) -> bool {
        self.live == 0
    }

    fn stage_ids(&self, p: usize, s: usize) -> std::ops::Range<usize> {
        let first = self.stage_first[p][s];
        first..first + self.pipelines[p].stages[s].tasks.len()
    }

    /// First stage of every pipeline, in pipeline order.
    pub fn initial_frontier(&self) -> Vec<usize> {
        (0..self.pipelines.len())
            .flat_map(|p| self.stage_ids(p, 0))
            .collect()
    }

    /// Applies a state change. When it completes a stage, returns the ids
    /// of the next stage, which just became eligible.
    pub fn transition(
        &mut self,
        g: usize,
        to: TaskState,
        ts: f64,
    ) -> Result<Vec<usize>, EngineError> {
        pst::transition_task(self.task_mut(g), to, ts)?;
        if !to.is_terminal() {
            return Ok(Vec::new());
        }
        self.live -= 1;
        let (p, s, _) = self.locs[g];
        if s != self.current[p] {
            // Only reachable through walltime cancellation of later stages.
            return Ok(Vec::new());
        }
        self.remaining[p] -= 1;
        if self.remaining[p] > 0 {
            return Ok(Vec::new());
        }
        self.current[p] += 1;
        let next = self.current[p];
        if next >= self.pipelines[p].stages.len() {
            return Ok(Vec::new());
        }
        self.remaining[p] = self.pipelines[p].stages[next].tasks.len();
        let ids: Vec<usize> = self.stage_ids(p, next).collect();
        debug_assert_eq!(
            ids.iter()
                .map(|g| self.task(*g).uid().to_string())
                .collect::<Vec<_>>(),
            pst::frontier(&self.pipelines[p])
        );
        Ok(ids)
    }

    /// Every non-terminal task, in declaration order.
    pub fn unfinished(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|g| !self.task(*g).state.is_terminal())
            .collect()
    }
}
