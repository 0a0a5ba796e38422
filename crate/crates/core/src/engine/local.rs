//! Runs workflows as real subprocesses on this host.
//!
//! Each task becomes `sh -c '<pre_exec...>; exec "$@"' sh <executable> <args>`
//! with the output directory as working directory, so stages can hand files
//! to later stages through relative paths. Waiter threads report exits over
//! a channel; this thread is the only one that touches workflow state.

use std::collections::VecDeque;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitStatus, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::Instant;

use super::{EngineError, Event, EventKind, EventLog, WorkflowState};
use crate::platform::PlatformConfig;
use crate::pst::{TaskDescription, TaskState, WorkflowSpec};

/// Subdirectory of `out_dir` holding per-task stdout/stderr.
pub const TASK_OUTPUT_DIR: &str = "task-output";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EngineError + '_ {
    move |source| EngineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn resolve_executable(exe: &str) -> Option<PathBuf> {
    let candidate = Path::new(exe);
    if exe.contains('/') {
        return candidate.is_file().then(|| candidate.to_path_buf());
    }
    std::env::var_os("PATH").and_then(|paths| {
        std::env::split_paths(&paths)
            .map(|dir| dir.join(exe))
            .find(|p| p.is_file())
    })
}

fn build_command(desc: &TaskDescription, out_dir: &Path) -> Result<Command, EngineError> {
    let mut script = String::from("set -e\n");
    for step in &desc.pre_exec {
        script.push_str(step);
        script.push('\n');
    }
    script.push_str("exec \"$@\"\n");
    let logs = out_dir.join(TASK_OUTPUT_DIR);
    let stdout_path = logs.join(format!("{}.out", desc.uid));
    let stderr_path = logs.join(format!("{}.err", desc.uid));
    let stdout = File::create(&stdout_path).map_err(io_err(&stdout_path))?;
    let stderr = File::create(&stderr_path).map_err(io_err(&stderr_path))?;
    let mut cmd = Command::new("sh");
    cmd.arg("-c")
        .arg(script)
        .arg("sh")
        .arg(&desc.executable)
        .args(&desc.arguments)
        .current_dir(out_dir)
        .env("ENSEMBLEKIT_TASK_UID", &desc.uid)
        .env("ENSEMBLEKIT_STAGE", &desc.stage_name)
        .stdin(Stdio::null())
        .stdout(stdout)
        .stderr(stderr);
    Ok(cmd)
}

fn exit_detail(status: &ExitStatus) -> String {
    match status.code() {
        Some(code) => format!("exit={code}"),
        None => {
            #[cfg(unix)]
            {
                use std::os::unix::process::ExitStatusExt;
                if let Some(sig) = status.signal() {
                    return format!("signal={sig}");
                }
            }
            "exit=unknown".into()
        }
    }
}

/// Executes `specs` with at most `max_parallel` tasks running at once and
/// returns the event log with wall-clock timestamps. Per-task output lands
/// in `out_dir/task-output/`.
pub fn run_local(
    specs: &[WorkflowSpec],
    platform: &PlatformConfig,
    max_parallel: usize,
    out_dir: &Path,
) -> Result<EventLog, EngineError> {
    if max_parallel == 0 {
        return Err(EngineError::Config("max_parallel must be ≥ 1".into()));
    }
    platform.validate()?;
    let mut state = WorkflowState::new(specs)?;
    std::fs::create_dir_all(out_dir.join(TASK_OUTPUT_DIR)).map_err(io_err(out_dir))?;

    let start = Instant::now();
    let now = || start.elapsed().as_secs_f64();
    let mut log = EventLog::new();
    log.push(Event::job(
        0.0,
        EventKind::JobStart,
        format!(
            "platform={} nodes=1 max_parallel={max_parallel}",
            platform.name
        ),
    ));
    log.push(Event::job(now(), EventKind::BootstrapDone, ""));

    let (tx, rx) = mpsc::channel::<(usize, std::io::Result<ExitStatus>)>();
    let mut queue: VecDeque<usize> = state.initial_frontier().into();
    let mut running = 0usize;
    let node = Some(vec![0]);

    while !state.all_terminal() {
        while running < max_parallel {
            let Some(g) = queue.pop_front() else { break };
            let desc = state.task(g).desc.clone();
            let ts = now();
            // Plain processes: each counts as one core of the host node.
            let slots = "cores=1 gpus=0";
            state.transition(g, TaskState::Scheduled, ts)?;
            log.push(Event::task(
                ts,
                EventKind::TaskScheduled,
                &desc.uid,
                node.clone(),
                slots,
            ));

            let spawned = match resolve_executable(&desc.executable) {
                None => Err(format!(
                    "spawn_error: executable not found: {}",
                    desc.executable
                )),
                Some(_) => build_command(&desc, out_dir)?
                    .spawn()
                    .map_err(|e| format!("spawn_error: {e}")),
            };
            let ts = now();
            state.transition(g, TaskState::Running, ts)?;
            log.push(Event::task(
                ts,
                EventKind::TaskLaunched,
                &desc.uid,
                node.clone(),
                slots,
            ));
            match spawned {
                Ok(mut child) => {
                    running += 1;
                    let tx = tx.clone();
                    thread::spawn(move || {
                        let status = child.wait();
                        let _ = tx.send((g, status));
                    });
                }
                Err(detail) => {
                    let next = state.transition(g, TaskState::Failed, ts)?;
                    log.push(Event::task(
                        ts,
                        EventKind::TaskFailed,
                        &desc.uid,
                        node.clone(),
                        detail,
                    ));
                    queue.extend(next);
                }
            }
        }
        if running == 0 {
            if queue.is_empty() {
                break;
            }
            continue;
        }
        let (g, status) = rx.recv().expect("waiter threads hold a sender");
        running -= 1;
        let ts = now();
        let uid = state.task(g).desc.uid.clone();
        let (to, kind, detail) = match status {
            Ok(s) if s.success() => (TaskState::Done, EventKind::TaskDone, "exit=0".to_string()),
            Ok(s) => (TaskState::Failed, EventKind::TaskFailed, exit_detail(&s)),
            Err(e) => (
                TaskState::Failed,
                EventKind::TaskFailed,
                format!("wait_error: {e}"),
            ),
        };
        let next = state.transition(g, to, ts)?;
        log.push(Event::task(ts, kind, &uid, node.clone(), detail));
        queue.extend(next);
    }
    log.push(Event::job(now(), EventKind::JobEnd, ""));
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pst::StageSpec;

    fn sh(uid: &str, script: &str) -> TaskDescription {
        TaskDescription::new(uid, "sh").with_args(["-c", script])
    }

    #[test]
    fn stage_ordering_and_failures() {
        let dir = tempfile::tempdir().unwrap();
        let spec = WorkflowSpec::new(
            "p",
            vec![
                StageSpec::new("write", vec![sh("w", "sleep 0.1; echo hi > handoff.txt")]),
                StageSpec::new(
                    "read",
                    vec![sh("r", "cat handoff.txt"), sh("bad", "exit 3")],
                ),
                StageSpec::new(
                    "after",
                    vec![TaskDescription::new("ghost", "/no/such/binary")],
                ),
            ],
        );
        let log = run_local(&[spec], &PlatformConfig::local(), 2, dir.path()).unwrap();
        let terminal: Vec<(String, EventKind, String)> = log
            .terminal_events()
            .into_iter()
            .map(|e| (e.task_uid.clone().unwrap(), e.kind, e.detail.clone()))
            .collect();
        assert!(terminal.contains(&("w".into(), EventKind::TaskDone, "exit=0".into())));
        assert!(terminal.contains(&("r".into(), EventKind::TaskDone, "exit=0".into())));
        assert!(terminal.contains(&("bad".into(), EventKind::TaskFailed, "exit=3".into())));
        let ghost = terminal.iter().find(|t| t.0 == "ghost").unwrap();
        assert_eq!(ghost.1, EventKind::TaskFailed);
        assert!(ghost.2.contains("spawn_error"));
        assert_eq!(log.events.last().unwrap().kind, EventKind::JobEnd);
        let out = std::fs::read_to_string(dir.path().join(TASK_OUTPUT_DIR).join("r.out")).unwrap();
        assert_eq!(out, "hi\n");
    }

    #[test]
    fn pre_exec_runs_in_task_shell() {
        let dir = tempfile::tempdir().unwrap();
        let task = sh("t", "echo $GREETING").with_pre_exec(["export GREETING=hello"]);
        let spec = WorkflowSpec::new("p", vec![StageSpec::new("s", vec![task])]);
        run_local(&[spec], &PlatformConfig::local(), 1, dir.path()).unwrap();
        let out = std::fs::read_to_string(dir.path().join(TASK_OUTPUT_DIR).join("t.out")).unwrap();
        assert_eq!(out, "hello\n");
    }

    #[test]
    fn zero_parallelism_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(run_local(&[], &PlatformConfig::local(), 0, dir.path()).is_err());
    }
}
