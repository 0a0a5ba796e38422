//! Utilization, concurrency and throughput computed from an event log.
//!
//! Everything here is a pure function of the log. Busy time runs from
//! `TASK_LAUNCHED` to the task's terminal event; time between placement and
//! launch counts as idle.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Event, EventKind, EventLog};
use crate::platform::PlatformConfig;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("IncompleteLog: no JOB_END event")]
    IncompleteLog,
    #[error("MalformedLog: {0}")]
    MalformedLog(String),
    #[error("InsufficientData: {0}")]
    InsufficientData(String),
    #[error("export I/O on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Overhead / busy / idle split of one resource, in resource-seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitAccount {
    pub capacity: f64,
    pub ovh: f64,
    pub busy: f64,
    pub idle: f64,
    pub utilization_fraction: f64,
}

impl UnitAccount {
    fn new(capacity: f64, ovh: f64, busy: f64) -> Self {
        let utilization_fraction = if capacity > 0.0 { busy / capacity } else { 0.0 };
        Self {
            capacity,
            ovh,
            busy,
            idle: capacity - ovh - busy,
            utilization_fraction,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilizationStack {
    pub allocation_nodes: u32,
    /// `ts(JOB_END)`.
    pub job_runtime_s: f64,
    /// `ts(BOOTSTRAP_DONE)`.
    pub ovh_s: f64,
    /// Job runtime minus overhead.
    pub ttx_s: f64,
    pub nodes: UnitAccount,
    pub cores: UnitAccount,
    pub gpus: UnitAccount,
}

#[derive(Debug, Clone, Default)]
struct TaskSpan<'a> {
    scheduled: Option<f64>,
    launched: Option<f64>,
    ended: Option<f64>,
    nodes: &'a [u32],
    cores: Option<f64>,
    gpus: Option<f64>,
}

fn parse_amount(e: &Event, key: &str) -> Option<f64> {
    e.detail_field(key).and_then(|v| v.parse().ok())
}

/// Per-task lifecycle timestamps, validating event order.
fn task_spans(log: &EventLog) -> Result<BTreeMap<&str, TaskSpan<'_>>, MetricsError> {
    let mut spans: BTreeMap<&str, TaskSpan> = BTreeMap::new();
    let mut last_ts = f64::NEG_INFINITY;
    for e in log.iter() {
        if e.ts < last_ts {
            return Err(MetricsError::MalformedLog(format!(
                "timestamp {} after {last_ts}",
                e.ts
            )));
        }
        last_ts = e.ts;
        let is_task = matches!(e.kind, EventKind::TaskScheduled | EventKind::TaskLaunched)
            || e.kind.is_task_terminal();
        if !is_task {
            continue;
        }
        let uid = e
            .task_uid
            .as_deref()
            .ok_or_else(|| MetricsError::MalformedLog(format!("{} without task_uid", e.kind)))?;
        let span = spans.entry(uid).or_default();
        let bad = |why: &str| MetricsError::MalformedLog(format!("task {uid}: {why}"));
        if span.ended.is_some() {
            return Err(bad("event after terminal state"));
        }
        match e.kind {
            EventKind::TaskScheduled => {
                if span.scheduled.is_some() {
                    return Err(bad("scheduled twice"));
                }
                span.scheduled = Some(e.ts);
            }
            EventKind::TaskLaunched => {
                if span.scheduled.is_none() || span.launched.is_some() {
                    return Err(bad("launch without a single prior schedule"));
                }
                span.launched = Some(e.ts);
                span.nodes = e.node_ids.as_deref().unwrap_or_default();
                span.cores = parse_amount(e, "cores");
                span.gpus = parse_amount(e, "gpus");
            }
            EventKind::TaskDone | EventKind::TaskFailed if span.launched.is_none() => {
                return Err(bad("finished without launch"));
            }
            _ => span.ended = Some(e.ts),
        }
    }
    Ok(spans)
}

/// Overhead, busy and idle resource-seconds for nodes, cores and GPUs.
/// A node counts as busy while at least one task runs on it.
pub fn compute_utilization(
    log: &EventLog,
    platform: &PlatformConfig,
    allocation_nodes: u32,
) -> Result<UtilizationStack, MetricsError> {
    let end = log.job_end_ts().ok_or(MetricsError::IncompleteLog)?;
    let ovh_s = log.bootstrap_ts().unwrap_or(0.0);
    let spans = task_spans(log)?;
    let usable = f64::from(
        platform
            .node
            .cores_total
            .saturating_sub(platform.node.cores_reserved),
    );
    let gpus_per_node = f64::from(platform.node.gpus);

    let mut per_node: BTreeMap<u32, Vec<(f64, f64)>> = BTreeMap::new();
    let (mut core_busy, mut gpu_busy) = (0.0, 0.0);
    for span in spans.values() {
        let Some(start) = span.launched else { continue };
        let stop = span.ended.unwrap_or(end).min(end);
        let dur = (stop - start).max(0.0);
        let n = span.nodes.len() as f64;
        core_busy += span.cores.unwrap_or(n * usable) * dur;
        gpu_busy += span.gpus.unwrap_or(n * gpus_per_node) * dur;
        for node in span.nodes {
            per_node.entry(*node).or_default().push((start, stop));
        }
    }
    let mut node_busy = 0.0;
    for intervals in per_node.values_mut() {
        intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut cur: Option<(f64, f64)> = None;
        for &(s, e) in intervals.iter() {
            cur = match cur {
                Some((cs, ce)) if s <= ce => Some((cs, ce.max(e))),
                Some((cs, ce)) => {
                    node_busy += ce - cs;
                    Some((s, e))
                }
                None => Some((s, e)),
            };
        }
        if let Some((cs, ce)) = cur {
            node_busy += ce - cs;
        }
    }

    let nodes = f64::from(allocation_nodes);
    Ok(UtilizationStack {
        allocation_nodes,
        job_runtime_s: end,
        ovh_s,
        ttx_s: end - ovh_s,
        nodes: UnitAccount::new(nodes * end, nodes * ovh_s, node_busy),
        cores: UnitAccount::new(nodes * usable * end, nodes * usable * ovh_s, core_busy),
        gpus: UnitAccount::new(
            nodes * gpus_per_node * end,
            nodes * gpus_per_node * ovh_s,
            gpu_busy,
        ),
    })
}

/// One change-point of the step function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcurrencyPoint {
    pub ts: f64,
    /// Scheduled but not yet launched.
    pub pending: u64,
    pub running: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConcurrencySeries {
    pub points: Vec<ConcurrencyPoint>,
}

impl ConcurrencySeries {
    pub fn max_running(&self) -> u64 {
        self.points.iter().map(|p| p.running).max().unwrap_or(0)
    }

    pub fn max_pending(&self) -> u64 {
        self.points.iter().map(|p| p.pending).max().unwrap_or(0)
    }
}

/// Sweeps the log and records `(pending, running)` wherever it changes.
/// Counts reflect the state after every event at that timestamp.
pub fn concurrency_series(log: &EventLog) -> Result<ConcurrencySeries, MetricsError> {
    task_spans(log)?;
    #[derive(PartialEq)]
    enum Phase {
        Pending,
        Running,
    }
    let mut phase: HashMap<&str, Phase> = HashMap::new();
    let (mut pending, mut running) = (0u64, 0u64);
    let mut points: Vec<ConcurrencyPoint> = Vec::new();
    let mut last = (0u64, 0u64);
    let events = &log.events;
    let mut i = 0;
    while i < events.len() {
        let ts = events[i].ts;
        while i < events.len() && events[i].ts == ts {
            let e = &events[i];
            if let Some(uid) = e.task_uid.as_deref() {
                match e.kind {
                    EventKind::TaskScheduled => {
                        phase.insert(uid, Phase::Pending);
                        pending += 1;
                    }
                    EventKind::TaskLaunched => {
                        phase.insert(uid, Phase::Running);
                        pending -= 1;
                        running += 1;
                    }
                    k if k.is_task_terminal() => match phase.remove(uid) {
                        Some(Phase::Pending) => pending -= 1,
                        Some(Phase::Running) => running -= 1,
                        None => {}
                    },
                    _ => {}
                }
            }
            i += 1;
        }
        if (pending, running) != last {
            points.push(ConcurrencyPoint {
                ts,
                pending,
                running,
            });
            last = (pending, running);
        }
    }
    Ok(ConcurrencySeries { points })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    /// `None` when all ramp placements share one instant.
    pub scheduling_rate_tasks_per_s: Option<f64>,
    pub launching_rate_tasks_per_s: Option<f64>,
    pub ramp_start_s: f64,
    /// Instant running concurrency peaks before it first drops.
    pub ramp_end_s: f64,
    pub scheduled_in_ramp: u64,
    pub launched_in_ramp: u64,
}

fn rate(ts: &[f64]) -> Option<f64> {
    let (first, last) = (ts.first()?, ts.last()?);
    let span = last - first;
    (ts.len() >= 2 && span > 0.0).then(|| (ts.len() - 1) as f64 / span)
}

/// Scheduling and launching rates over the initial ramp, i.e. everything up
/// to the moment running concurrency stops increasing.
pub fn throughput(log: &EventLog) -> Result<RateSummary, MetricsError> {
    let scheduled = log.of_kind(EventKind::TaskScheduled).count();
    if scheduled < 2 {
        return Err(MetricsError::InsufficientData(format!(
            "{scheduled} TASK_SCHEDULED events, need at least 2"
        )));
    }
    let series = concurrency_series(log)?;
    let mut ramp_end = series.points.last().map_or(0.0, |p| p.ts);
    let mut peak = 0u64;
    for p in &series.points {
        if p.running > peak {
            peak = p.running;
            ramp_end = p.ts;
        } else if p.running < peak {
            break;
        }
    }
    let in_ramp = |kind| -> Vec<f64> {
        log.of_kind(kind)
            .map(|e| e.ts)
            .filter(|t| *t <= ramp_end)
            .collect()
    };
    let sched = in_ramp(EventKind::TaskScheduled);
    let launch = in_ramp(EventKind::TaskLaunched);
    Ok(RateSummary {
        scheduling_rate_tasks_per_s: rate(&sched),
        launching_rate_tasks_per_s: rate(&launch),
        ramp_start_s: sched.first().copied().unwrap_or(0.0),
        ramp_end_s: ramp_end,
        scheduled_in_ramp: sched.len() as u64,
        launched_in_ramp: launch.len() as u64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::Json => "json",
        }
    }
}

/// File export of a computed metric.
pub trait Export: Serialize + DeserializeOwned + Sized {
    fn to_csv(&self) -> Result<String, MetricsError>;
    fn from_csv(text: &str) -> Result<Self, MetricsError>;

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize") + "\n"
    }

    fn from_json(text: &str) -> Result<Self, MetricsError> {
        Ok(serde_json::from_str(text)?)
    }

    fn render(&self, format: Format) -> Result<String, MetricsError> {
        match format {
            Format::Csv => self.to_csv(),
            Format::Json => Ok(self.to_json()),
        }
    }
}

pub fn export<T: Export>(value: &T, format: Format, path: &Path) -> Result<(), MetricsError> {
    let text = value.render(format)?;
    std::fs::write(path, text).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_rows<R: Serialize>(
    rows: impl IntoIterator<Item = R>,
    header: &[&str],
) -> Result<String, MetricsError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| MetricsError::Io {
        path: "<csv buffer>".into(),
        source: e.into_error(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

fn read_rows<R: DeserializeOwned>(text: &str) -> Result<Vec<R>, MetricsError> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(Into::into)
}

#[derive(Debug, Serialize, Deserialize)]
struct StackRow {
    unit: String,
    capacity: f64,
    ovh: f64,
    busy: f64,
    idle: f64,
    utilization_fraction: f64,
    allocation_nodes: u32,
    job_runtime_s: f64,
    ovh_s: f64,
    ttx_s: f64,
}

impl Export for UtilizationStack {
    fn to_csv(&self) -> Result<String, MetricsError> {
        let rows = [
            ("nodes", self.nodes),
            ("cores", self.cores),
            ("gpus", self.gpus),
        ]
        .into_iter()
        .map(|(unit, a)| StackRow {
            unit: unit.into(),
            capacity: a.capacity,
            ovh: a.ovh,
            busy: a.busy,
            idle: a.idle,
            utilization_fraction: a.utilization_fraction,
            allocation_nodes: self.allocation_nodes,
            job_runtime_s: self.job_runtime_s,
            ovh_s: self.ovh_s,
            ttx_s: self.ttx_s,
        });
        write_rows(
            rows,
            &[
                "unit",
                "capacity",
                "ovh",
                "busy",
                "idle",
                "utilization_fraction",
                "allocation_nodes",
                "job_runtime_s",
                "ovh_s",
                "ttx_s",
            ],
        )
    }

    fn from_csv(text: &str) -> Result<Self, MetricsError> {
        let rows: Vec<StackRow> = read_rows(text)?;
        let find = |unit: &str| -> Result<&StackRow, MetricsError> {
            rows.iter()
                .find(|r| r.unit == unit)
                .ok_or_else(|| MetricsError::MalformedLog(format!("missing {unit} row")))
        };
        let account = |r: &StackRow| UnitAccount {
            capacity: r.capacity,
            ovh: r.ovh,
            busy: r.busy,
            idle: r.idle,
            utilization_fraction: r.utilization_fraction,
        };
        let n = find("nodes")?;
        Ok(Self {
            allocation_nodes: n.allocation_nodes,
            job_runtime_s: n.job_runtime_s,
            ovh_s: n.ovh_s,
            ttx_s: n.ttx_s,
            nodes: account(n),
            cores: account(find("cores")?),
            gpus: account(find("gpus")?),
        })
    }
}

impl Export for ConcurrencySeries {
    fn to_csv(&self) -> Result<String, MetricsError> {
        write_rows(self.points.iter(), &["ts", "pending", "running"])
    }

    fn from_csv(text: &str) -> Result<Self, MetricsError> {
        Ok(Self {
            points: read_rows(text)?,
        })
    }
}

impl Export for RateSummary {
    fn to_csv(&self) -> Result<String, MetricsError> {
        write_rows(
            [self],
            &[
                "scheduling_rate_tasks_per_s",
                "launching_rate_tasks_per_s",
                "ramp_start_s",
                "ramp_end_s",
                "scheduled_in_ramp",
                "launched_in_ramp",
            ],
        )
    }

    fn from_csv(text: &str) -> Result<Self, MetricsError> {
        read_rows(text)?
            .into_iter()
            .next()
            .ok_or_else(|| MetricsError::MalformedLog("empty rate csv".into()))
    }
}
