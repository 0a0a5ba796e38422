//! Pipeline-Stage-Task domain model.
//!
//! A pipeline runs its stages strictly in order; all tasks inside one stage
//! are independent and may run concurrently; separate pipelines never wait on
//! each other. Task lifecycles follow
//! `NEW -> SCHEDULED -> RUNNING -> {DONE, FAILED}` with `CANCELED` reachable
//! from any non-terminal state.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PstError {
    #[error("illegal transition {from} -> {to}")]
    IllegalTransition { from: TaskState, to: TaskState },
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("failed to read workflow {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("workflow parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
}

/// What to run and how much of a node it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDescription {
    pub uid: String,
    pub executable: String,
    #[serde(default)]
    pub arguments: Vec<String>,
    /// Shell commands that prepare the environment, run in order before the
    /// executable (module loads, exports, ...).
    #[serde(default)]
    pub pre_exec: Vec<String>,
    /// MPI rank count.
    pub cpu_processes: u32,
    /// Cores per rank.
    pub cpu_threads_per_process: u32,
    #[serde(default)]
    pub gpus_per_process: u32,
    /// Runtime hint used by the simulator.
    #[serde(default)]
    pub expected_runtime_s: Option<f64>,
    /// Owning stage. Not serialized; filled in from the enclosing stage.
    #[serde(skip)]
    pub stage_name: String,
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
}

impl TaskDescription {
    pub fn new(uid: impl Into<String>, executable: impl Into<String>) -> Self {
        Self {
            uid: uid.into(),
            executable: executable.into(),
            arguments: Vec::new(),
            pre_exec: Vec::new(),
            cpu_processes: 1,
            cpu_threads_per_process: 1,
            gpus_per_process: 0,
            expected_runtime_s: None,
            stage_name: String::new(),
            tags: BTreeMap::new(),
        }
    }

    pub fn with_args<I, S>(mut self, args: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.arguments = args.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_resources(mut self, processes: u32, threads: u32, gpus: u32) -> Self {
        self.cpu_processes = processes;
        self.cpu_threads_per_process = threads;
        self.gpus_per_process = gpus;
        self
    }

    pub fn with_runtime(mut self, seconds: f64) -> Self {
        self.expected_runtime_s = Some(seconds);
        self
    }

    pub fn with_pre_exec<I, S>(mut self, steps: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.pre_exec = steps.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_tag(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.tags.insert(key.into(), value.into());
        self
    }

    pub fn total_cores(&self) -> u64 {
        u64::from(self.cpu_processes) * u64::from(self.cpu_threads_per_process)
    }

    pub fn total_gpus(&self) -> u64 {
        u64::from(self.cpu_processes) * u64::from(self.gpus_per_process)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub tasks: Vec<TaskDescription>,
}

impl StageSpec {
    pub fn new(name: impl Into<String>, tasks: Vec<TaskDescription>) -> Self {
        let mut stage = Self {
            name: name.into(),
            tasks,
        };
        stage.normalize();
        stage
    }

    fn normalize(&mut self) {
        for task in &mut self.tasks {
            task.stage_name.clone_from(&self.name);
        }
    }
}

/// A pipeline definition: stages in execution order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowSpec {
    pub name: String,
    pub stages: Vec<StageSpec>,
}

impl WorkflowSpec {
    pub fn new(name: impl Into<String>, stages: Vec<StageSpec>) -> Self {
        let mut spec = Self {
            name: name.into(),
            stages,
        };
        spec.normalize();
        spec
    }

    /// Re-derives each task's `stage_name` from its enclosing stage.
    pub fn normalize(&mut self) {
        for stage in &mut self.stages {
            stage.normalize();
        }
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskDescription> {
        self.stages.iter().flat_map(|s| s.tasks.iter())
    }

    pub fn task_count(&self) -> usize {
        self.stages.iter().map(|s| s.tasks.len()).sum()
    }

    /// Stage index and description for `uid`.
    pub fn locate(&self, uid: &str) -> Option<(usize, &TaskDescription)> {
        self.stages
            .iter()
            .enumerate()
            .find_map(|(i, s)| s.tasks.iter().find(|t| t.uid == uid).map(|t| (i, t)))
    }

    pub fn from_json(text: &str) -> Result<Self, PstError> {
        let mut spec: Self = serde_json::from_str(text).map_err(parse_error)?;
        spec.normalize();
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("workflow serializes")
    }

    pub fn load(path: &Path) -> Result<Vec<Self>, PstError> {
        let text = std::fs::read_to_string(path).map_err(|source| PstError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_many(&text)
    }

    /// Accepts either a single workflow object or an array of them.
    pub fn parse_many(text: &str) -> Result<Vec<Self>, PstError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(parse_error)?;
        let mut specs: Vec<Self> = if value.is_array() {
            serde_json::from_str(text).map_err(parse_error)?
        } else {
            vec![serde_json::from_str(text).map_err(parse_error)?]
        };
        for spec in &mut specs {
            spec.normalize();
        }
        Ok(specs)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json() + "\n")
    }
}

fn parse_error(e: serde_json::Error) -> PstError {
    PstError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

/// One problem found by [`validate_workflow`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation(pub String);

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Collects every rule violation in `spec`; an empty list means valid.
pub fn validate_workflow(spec: &WorkflowSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut v = |msg: String| out.push(Violation(msg));
    if spec.stages.is_empty() {
        v(format!("pipeline {} has no stages", spec.name));
    }
    let mut seen = HashSet::new();
    for stage in &spec.stages {
        if stage.tasks.is_empty() {
            v(format!("stage {} is empty", stage.name));
        }
        for task in &stage.tasks {
            if task.uid.is_empty() {
                v(format!("stage {} has a task with an empty uid", stage.name));
            } else if !seen.insert(task.uid.as_str()) {
                v(format!("duplicate uid {}", task.uid));
            }
            if task.executable.trim().is_empty() {
                v(format!("task {}: executable must be non-empty", task.uid));
            }
            if task.cpu_processes < 1 {
                v(format!("task {}: cpu_processes must be ≥ 1", task.uid));
            }
            if task.cpu_threads_per_process < 1 {
                v(format!(
                    "task {}: cpu_threads_per_process must be ≥ 1",
                    task.uid
                ));
            }
            if let Some(rt) = task.expected_runtime_s {
                if !(rt.is_finite() && rt > 0.0) {
                    v(format!("task {}: expected_runtime_s must be > 0", task.uid));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskState {
    New,
    Scheduled,
    Running,
    Done,
    Failed,
    Canceled,
}

impl TaskState {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Done | Self::Failed | Self::Canceled)
    }

    pub fn can_transition_to(self, to: TaskState) -> bool {
        use TaskState::*;
        match (self, to) {
            (New, Scheduled) | (Scheduled, Running) | (Running, Done) | (Running, Failed) => true,
            (from, Canceled) => !from.is_terminal(),
            _ => false,
        }
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::New => "NEW",
            Self::Scheduled => "SCHEDULED",
            Self::Running => "RUNNING",
            Self::Done => "DONE",
            Self::Failed => "FAILED",
            Self::Canceled => "CANCELED",
        };
        f.write_str(s)
    }
}

/// Runtime state of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub desc: TaskDescription,
    pub state: TaskState,
    pub nodes: Vec<u32>,
    /// (state entered, timestamp) for every transition, starting with NEW.
    pub history: Vec<(TaskState, f64)>,
}

impl Task {
    pub fn new(desc: TaskDescription) -> Self {
        Self {
            desc,
            state: TaskState::New,
            nodes: Vec::new(),
            history: vec![(TaskState::New, 0.0)],
        }
    }

    pub fn uid(&self) -> &str {
        &self.desc.uid
    }
}

/// Moves `task` to `to` at time `ts`, rejecting edges outside the lifecycle.
pub fn transition_task(task: &mut Task, to: TaskState, ts: f64) -> Result<(), PstError> {
    if !task.state.can_transition_to(to) {
        return Err(PstError::IllegalTransition {
            from: task.state,
            to,
        });
    }
    task.state = to;
    task.history.push((to, ts));
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StageState {
    Pending,
    Active,
    Complete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PipelineState {
    New,
    Running,
    Complete,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub name: String,
    pub tasks: Vec<Task>,
}

impl Stage {
    pub fn state(&self) -> StageState {
        if self.tasks.iter().all(|t| t.state.is_terminal()) {
            StageState::Complete
        } else if self.tasks.iter().all(|t| t.state == TaskState::New) {
            StageState::Pending
        } else {
            StageState::Active
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.state() == StageState::Complete
    }
}

/// Executable form of a [`WorkflowSpec`] that tracks task state.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub name: String,
    pub stages: Vec<Stage>,
}

impl Pipeline {
    pub fn new(spec: &WorkflowSpec) -> Self {
        Self {
            name: spec.name.clone(),
            stages: spec
                .stages
                .iter()
                .map(|s| Stage {
                    name: s.name.clone(),
                    tasks: s
                        .tasks
                        .iter()
                        .map(|d| {
                            let mut d = d.clone();
                            d.stage_name.clone_from(&s.name);
                            Task::new(d)
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn state(&self) -> PipelineState {
        if self.stages.iter().all(Stage::is_terminal) {
            PipelineState::Complete
        } else if self.stages.iter().all(|s| s.state() == StageState::Pending) {
            PipelineState::New
        } else {
            PipelineState::Running
        }
    }

    /// Index of the earliest stage that still has a non-terminal task.
    pub fn current_stage(&self) -> Option<usize> {
        self.stages.iter().position(|s| !s.is_terminal())
    }

    pub fn task_mut(&mut self, uid: &str) -> Option<&mut Task> {
        self.stages
            .iter_mut()
            .flat_map(|s| s.tasks.iter_mut())
            .find(|t| t.desc.uid == uid)
    }

    pub fn task(&self, uid: &str) -> Option<&Task> {
        self.stages
            .iter()
            .flat_map(|s| s.tasks.iter())
            .find(|t| t.desc.uid == uid)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &Task> {
        self.stages.iter().flat_map(|s| s.tasks.iter())
    }
}

/// NEW tasks of the earliest stage that is not fully terminal, in
/// declaration order. Empty once the pipeline is complete, and also while
/// the current stage has no NEW tasks left.
pub fn frontier(pipeline: &Pipeline) -> Vec<String> {
    match pipeline.current_stage() {
        Some(k) => pipeline.stages[k]
            .tasks
            .iter()
            .filter(|t| t.state == TaskState::New)
            .map(|t| t.desc.uid.clone())
            .collect(),
        None => Vec::new(),
    }
}

/// Per-pipeline frontiers keyed by pipeline name. Pipelines with nothing
/// eligible are omitted.
pub fn pipelines_frontier(pipelines: &[Pipeline]) -> BTreeMap<String, Vec<String>> {
    pipelines
        .iter()
        .filter_map(|p| {
            let f = frontier(p);
            (!f.is_empty()).then(|| (p.name.clone(), f))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(uid: &str) -> TaskDescription {
        TaskDescription::new(uid, "/bin/true")
    }

    fn two_stage() -> WorkflowSpec {
        WorkflowSpec::new(
            "p",
            vec![
                StageSpec::new("s1", vec![task("a"), task("b")]),
                StageSpec::new("s2", vec![task("c"), task("d")]),
            ],
        )
    }

    fn set_state(p: &mut Pipeline, uid: &str, state: TaskState) {
        p.task_mut(uid).unwrap().state = state;
    }

    #[test]
    fn duplicate_uid_reported() {
        let spec = WorkflowSpec::new("p", vec![StageSpec::new("s", vec![task("t1"), task("t1")])]);
        let v = validate_workflow(&spec);
        assert_eq!(v, vec![Violation("duplicate uid t1".into())]);
    }

    #[test]
    fn exaca_shaped_task_is_valid() {
        let t = task("exaca-0").with_resources(8, 7, 1);
        let spec = WorkflowSpec::new("p", vec![StageSpec::new("s", vec![t])]);
        assert!(validate_workflow(&spec).is_empty());
    }

    #[test]
    fn zero_processes_rejected() {
        let t = task("t").with_resources(0, 1, 0);
        let spec = WorkflowSpec::new("p", vec![StageSpec::new("s", vec![t])]);
        let v = validate_workflow(&spec);
        assert_eq!(v.len(), 1);
        assert!(v[0].0.contains("cpu_processes must be ≥ 1"));
    }

    #[test]
    fn structural_violations_all_listed() {
        let mut bad = task("");
        bad.executable = " ".into();
        bad.cpu_threads_per_process = 0;
        bad.expected_runtime_s = Some(-1.0);
        let spec = WorkflowSpec::new(
            "p",
            vec![
                StageSpec::new("empty", vec![]),
                StageSpec::new("s", vec![bad]),
            ],
        );
        assert_eq!(validate_workflow(&spec).len(), 5);
        assert_eq!(
            validate_workflow(&WorkflowSpec::new("none", vec![])).len(),
            1
        );
    }

    #[test]
    fn transitions() {
        let mut t = Task::new(task("a"));
        transition_task(&mut t, TaskState::Scheduled, 1.0).unwrap();
        transition_task(&mut t, TaskState::Running, 2.0).unwrap();
        transition_task(&mut t, TaskState::Failed, 3.0).unwrap();
        assert_eq!(t.history.len(), 4);
        assert_eq!(t.history[3], (TaskState::Failed, 3.0));

        let err = transition_task(&mut t, TaskState::Running, 4.0).unwrap_err();
        assert_eq!(err.to_string(), "illegal transition FAILED -> RUNNING");

        let mut done = Task::new(task("b"));
        done.state = TaskState::Done;
        assert!(matches!(
            transition_task(&mut done, TaskState::Running, 0.0),
            Err(PstError::IllegalTransition {
                from: TaskState::Done,
                to: TaskState::Running
            })
        ));
        assert!(transition_task(&mut done, TaskState::Canceled, 0.0).is_err());

        let mut fresh = Task::new(task("c"));
        transition_task(&mut fresh, TaskState::Canceled, 0.0).unwrap();
    }

    #[test]
    fn transition_table_is_exact() {
        use TaskState::*;
        let all = [New, Scheduled, Running, Done, Failed, Canceled];
        let allowed = [
            (New, Scheduled),
            (Scheduled, Running),
            (Running, Done),
            (Running, Failed),
            (New, Canceled),
            (Scheduled, Canceled),
            (Running, Canceled),
        ];
        for from in all {
            for to in all {
                assert_eq!(
                    from.can_transition_to(to),
                    allowed.contains(&(from, to)),
                    "{from} -> {to}"
                );
            }
        }
    }

    #[test]
    fn frontier_follows_stage_order() {
        let mut p = Pipeline::new(&two_stage());
        assert_eq!(frontier(&p), vec!["a", "b"]);

        set_state(&mut p, "a", TaskState::Done);
        set_state(&mut p, "b", TaskState::Running);
        assert!(frontier(&p).is_empty());

        set_state(&mut p, "b", TaskState::Done);
        assert_eq!(frontier(&p), vec!["c", "d"]);
        assert_eq!(frontier(&p), frontier(&p));

        set_state(&mut p, "c", TaskState::Failed);
        set_state(&mut p, "d", TaskState::Done);
        assert!(frontier(&p).is_empty());
        assert_eq!(p.state(), PipelineState::Complete);
    }

    #[test]
    fn failed_tasks_do_not_block_next_stage() {
        let mut p = Pipeline::new(&two_stage());
        set_state(&mut p, "a", TaskState::Failed);
        set_state(&mut p, "b", TaskState::Canceled);
        assert_eq!(frontier(&p), vec!["c", "d"]);
    }

    #[test]
    fn pipelines_are_independent() {
        let one = |name: &str, uid: &str| {
            Pipeline::new(&WorkflowSpec::new(
                name,
                vec![StageSpec::new("s", vec![task(uid)])],
            ))
        };
        let both = pipelines_frontier(&[one("p1", "a"), one("p2", "b")]);
        assert_eq!(both["p1"], vec!["a"]);
        assert_eq!(both["p2"], vec!["b"]);

        let mut done = one("p1", "a");
        set_state(&mut done, "a", TaskState::Done);
        let mut second = Pipeline::new(&two_stage());
        set_state(&mut second, "a", TaskState::Done);
        set_state(&mut second, "b", TaskState::Done);
        let f = pipelines_frontier(&[done, second]);
        assert_eq!(f.len(), 1);
        assert_eq!(f["p"], vec!["c", "d"]);
    }

    #[test]
    fn json_field_names() {
        let spec = WorkflowSpec::new(
            "wf",
            vec![StageSpec::new(
                "s",
                vec![task("a").with_resources(8, 7, 1).with_runtime(5.0)],
            )],
        );
        let text = spec.to_json();
        for key in [
            "\"name\"",
            "\"stages\"",
            "\"tasks\"",
            "\"uid\"",
            "\"executable\"",
            "\"arguments\"",
            "\"pre_exec\"",
            "\"cpu_processes\"",
            "\"cpu_threads_per_process\"",
            "\"gpus_per_process\"",
            "\"expected_runtime_s\"",
            "\"tags\"",
        ] {
            assert!(text.contains(key), "missing {key}");
        }
        assert!(!text.contains("stage_name"));
        let back = WorkflowSpec::from_json(&text).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.stages[0].tasks[0].stage_name, "s");
    }

    #[test]
    fn parse_error_has_line() {
        let err = WorkflowSpec::from_json("{\n  \"name\": \"x\",\n  \"stages\": [\n}").unwrap_err();
        match err {
            PstError::Parse { line, .. } => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }
}
