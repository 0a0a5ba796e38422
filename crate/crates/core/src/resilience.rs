//! Failed-task harvesting and order-preserving resubmission.
//!
//! Failures are read back from a finished job's event log, regrouped under
//! their original stages (keeping the original stage order) and packaged as
//! a new, smaller job whose allocation fits the widest failed stage.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{run_simulated, EngineError, EventKind, EventLog, SimConfig};
use crate::platform::{max_walltime_for, task_footprint, PlatformConfig, PlatformError};
use crate::pst::{StageSpec, WorkflowSpec};

#[derive(Debug, Error)]
pub enum ResilienceError {
    #[error("IncompleteLog: no JOB_END event")]
    IncompleteLog,
    #[error("EmptyPlan: nothing to resubmit")]
    EmptyPlan,
    #[error("task {0} is not part of the workflow")]
    UnknownTask(String),
    #[error("max_attempts must be ≥ 1")]
    NoAttempts,
    #[error(transparent)]
    Platform(#[from] PlatformError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    NodeFailure,
    TaskFault,
    Canceled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub uid: String,
    pub pipeline: String,
    pub stage_name: String,
    pub stage_index: usize,
    pub kind: FailureKind,
    pub ts: f64,
}

/// One record per task of `spec` whose last event in `log` is
/// `TASK_FAILED`, or `TASK_CANCELED` when `retry_canceled` is set.
pub fn collect_failures(
    log: &EventLog,
    spec: &WorkflowSpec,
    retry_canceled: bool,
) -> Result<Vec<FailureRecord>, ResilienceError> {
    if log.job_end_ts().is_none() {
        return Err(ResilienceError::IncompleteLog);
    }
    let mut out = Vec::new();
    for e in log.terminal_events() {
        let kind = match e.kind {
            EventKind::TaskFailed if e.detail.starts_with("node_failure") => {
                FailureKind::NodeFailure
            }
            EventKind::TaskFailed => FailureKind::TaskFault,
            EventKind::TaskCanceled if retry_canceled => FailureKind::Canceled,
            _ => continue,
        };
        let uid = e.task_uid.as_deref().unwrap_or_default();
        let Some((stage_index, _)) = spec.locate(uid) else {
            continue;
        };
        out.push(FailureRecord {
            uid: uid.to_string(),
            pipeline: spec.name.clone(),
            stage_name: spec.stages[stage_index].name.clone(),
            stage_index,
            kind,
            ts: e.ts,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub nodes: u32,
    pub walltime_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResubmissionPlan {
    /// Attempt number the plan runs as (the original job is attempt 1).
    pub attempt: u32,
    pub workflows: Vec<WorkflowSpec>,
    pub allocation: Allocation,
    /// Attempt count per task including this one.
    pub attempts: BTreeMap<String, u32>,
    /// Bootstrap plus, per pipeline, the sum of each stage's longest
    /// expected runtime. `None` when some task has no runtime hint.
    pub estimated_runtime_s: Option<f64>,
    /// Whether the estimate fits the walltime.
    pub feasible: bool,
}

impl ResubmissionPlan {
    pub fn task_uids(&self) -> BTreeSet<String> {
        self.workflows
            .iter()
            .flat_map(|w| w.tasks().map(|t| t.uid.clone()))
            .collect()
    }

    /// Writes the workflows (runnable input) and the sidecar metadata.
    pub fn save(
        &self,
        workflow_path: &Path,
        sidecar_path: &Path,
        parent_log: &str,
    ) -> std::io::Result<()> {
        let text = if self.workflows.len() == 1 {
            self.workflows[0].to_json()
        } else {
            serde_json::to_string_pretty(&self.workflows).expect("workflows serialize")
        };
        std::fs::write(workflow_path, text + "\n")?;
        let sidecar = Sidecar {
            attempt: self.attempt,
            parent_log: parent_log.to_string(),
            allocation: self.allocation,
        };
        std::fs::write(
            sidecar_path,
            serde_json::to_string_pretty(&sidecar).expect("sidecar serializes") + "\n",
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub attempt: u32,
    pub parent_log: String,
    pub allocation: Allocation,
}

/// Builds the retry job for `records`. Each pipeline keeps only its failed
/// tasks, grouped under their original stages in original order. The
/// allocation gives every pipeline enough nodes to run its widest failed
/// stage fully concurrently, capped at `original_nodes`.
pub fn plan_resubmission(
    records: &[FailureRecord],
    specs: &[WorkflowSpec],
    platform: &PlatformConfig,
    original_nodes: u32,
    attempt: u32,
) -> Result<ResubmissionPlan, ResilienceError> {
    if records.is_empty() {
        return Err(ResilienceError::EmptyPlan);
    }
    let failed: BTreeSet<&str> = records.iter().map(|r| r.uid.as_str()).collect();
    for uid in &failed {
        if !specs.iter().any(|s| s.locate(uid).is_some()) {
            return Err(ResilienceError::UnknownTask(uid.to_string()));
        }
    }

    let mut workflows = Vec::new();
    let mut width_sum: u64 = 0;
    let mut estimate: Option<f64> = Some(0.0);
    for spec in specs {
        let mut stages = Vec::new();
        let mut widest: u64 = 0;
        let mut pipeline_time = Some(0.0);
        for stage in &spec.stages {
            let tasks: Vec<_> = stage
                .tasks
                .iter()
                .filter(|t| failed.contains(t.uid.as_str()))
                .cloned()
                .collect();
            if tasks.is_empty() {
                continue;
            }
            let mut width = 0u64;
            let mut longest = Some(0.0f64);
            for t in &tasks {
                width += u64::from(task_footprint(t, &platform.node)?.nodes_needed);
                longest = longest.zip(t.expected_runtime_s).map(|(a, b)| a.max(b));
            }
            widest = widest.max(width);
            pipeline_time = pipeline_time.zip(longest).map(|(a, b)| a + b);
            stages.push(StageSpec::new(stage.name.clone(), tasks));
        }
        if stages.is_empty() {
            continue;
        }
        width_sum += widest;
        estimate = estimate.zip(pipeline_time).map(|(a, b)| a.max(b));
        workflows.push(WorkflowSpec::new(spec.name.clone(), stages));
    }

    let nodes = width_sum.min(u64::from(original_nodes)).max(1) as u32;
    let walltime_s = max_walltime_for(&platform.policy, nodes)?;
    let estimated_runtime_s = estimate.map(|e| e + platform.bootstrap_overhead_s);
    Ok(ResubmissionPlan {
        attempt,
        attempts: failed.iter().map(|u| (u.to_string(), attempt)).collect(),
        workflows,
        allocation: Allocation { nodes, walltime_s },
        feasible: estimated_runtime_s.is_none_or(|e| e <= walltime_s),
        estimated_runtime_s,
    })
}

#[derive(Debug, Clone, Default)]
pub struct RetryOutcome {
    /// One log per attempt, in order.
    pub logs: Vec<EventLog>,
    /// Plans for attempts 2.., in order.
    pub plans: Vec<ResubmissionPlan>,
    /// Tasks still failed after the last attempt.
    pub unresolved: Vec<FailureRecord>,
}

/// Runs `specs`, then keeps resubmitting failures as fresh jobs until none
/// remain or `max_attempts` jobs have run. `run` executes one job given the
/// workflows, allocation and attempt number.
pub fn retry_loop<F>(
    specs: &[WorkflowSpec],
    platform: &PlatformConfig,
    allocation: Allocation,
    max_attempts: u32,
    retry_canceled: bool,
    mut run: F,
) -> Result<RetryOutcome, ResilienceError>
where
    F: FnMut(&[WorkflowSpec], Allocation, u32) -> Result<EventLog, EngineError>,
{
    if max_attempts == 0 {
        return Err(ResilienceError::NoAttempts);
    }
    let mut outcome = RetryOutcome::default();
    let mut current: Vec<WorkflowSpec> = specs.to_vec();
    let mut alloc = allocation;
    for attempt in 1..=max_attempts {
        let log = run(&current, alloc, attempt)?;
        let mut failures = Vec::new();
        for spec in &current {
            failures.extend(collect_failures(&log, spec, retry_canceled)?);
        }
        outcome.logs.push(log);
        if failures.is_empty() {
            return Ok(outcome);
        }
        if attempt == max_attempts {
            outcome.unresolved = failures;
            break;
        }
        let plan = plan_resubmission(&failures, &current, platform, allocation.nodes, attempt + 1)?;
        current = plan.workflows.clone();
        alloc = plan.allocation;
        outcome.plans.push(plan);
    }
    Ok(outcome)
}

/// [`retry_loop`] over the simulated backend. Retries get fresh
/// allocations: node faults from `cfg` apply to the first attempt only,
/// task faults to every attempt.
pub fn retry_loop_simulated(
    specs: &[WorkflowSpec],
    platform: &PlatformConfig,
    cfg: &SimConfig,
    max_attempts: u32,
    retry_canceled: bool,
) -> Result<RetryOutcome, ResilienceError> {
    let allocation = Allocation {
        nodes: cfg.allocation_nodes,
        walltime_s: cfg.walltime_s,
    };
    retry_loop(
        specs,
        platform,
        allocation,
        max_attempts,
        retry_canceled,
        |wfs, alloc, attempt| {
            let mut c = cfg.clone();
            c.attempt = attempt;
            if attempt > 1 {
                c.allocation_nodes = alloc.nodes;
                c.walltime_s = alloc.walltime_s;
                c.failures = cfg.failures.without_node_faults();
                c.runtime.seed = cfg.runtime.seed.wrapping_add(u64::from(attempt - 1));
            }
            run_simulated(wfs, platform, &c)
        },
    )
}
