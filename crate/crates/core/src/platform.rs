//! Machine model: node shape, walltime policy and task footprint arithmetic.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pst::TaskDescription;

/// Directory searched for `<name>.json` platform profiles in addition to
/// the built-in ones.
pub const PROFILE_DIR_ENV: &str = "ENSEMBLEKIT_PROFILE_DIR";

#[derive(Debug, Error)]
pub enum PlatformError {
    #[error("invalid node spec: {0} reserved cores leave nothing of {1}")]
    InvalidNodeSpec(u32, u32),
    #[error("task {uid} unplaceable: {reason}")]
    Unplaceable { uid: String, reason: String },
    #[error("no walltime tier covers {0} nodes")]
    PolicyGap(u32),
    #[error("platform parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid platform config: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("unknown platform profile {0}")]
    UnknownProfile(String),
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub cores_total: u32,
    /// Cores held back for system processes.
    pub cores_reserved: u32,
    pub gpus: u32,
}

impl NodeSpec {
    pub fn new(cores_total: u32, cores_reserved: u32, gpus: u32) -> Self {
        Self {
            cores_total,
            cores_reserved,
            gpus,
        }
    }
}

pub fn usable_cores(node: &NodeSpec) -> Result<u32, PlatformError> {
    if node.cores_reserved >= node.cores_total {
        return Err(PlatformError::InvalidNodeSpec(
            node.cores_reserved,
            node.cores_total,
        ));
    }
    Ok(node.cores_total - node.cores_reserved)
}

/// Facility rule mapping requested node counts to a maximum job duration.
/// Tiers are `(max_nodes, max_walltime_s)` sorted by `max_nodes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalltimePolicy {
    pub tiers: Vec<(u32, f64)>,
}

pub fn max_walltime_for(
    policy: &WalltimePolicy,
    nodes_requested: u32,
) -> Result<f64, PlatformError> {
    if nodes_requested == 0 {
        return Err(PlatformError::PolicyGap(0));
    }
    policy
        .tiers
        .iter()
        .find(|(max_nodes, _)| *max_nodes >= nodes_requested)
        .map(|(_, wall)| *wall)
        .ok_or(PlatformError::PolicyGap(nodes_requested))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatformConfig {
    pub name: String,
    pub node: NodeSpec,
    pub node_count: u32,
    /// Time to bring up the runtime before the first task can be placed.
    pub bootstrap_overhead_s: f64,
    pub policy: WalltimePolicy,
}

impl PlatformConfig {
    /// Frontier-shaped simulation target. The tier table is illustrative.
    pub fn frontier_sim() -> Self {
        Self {
            name: "frontier-sim".into(),
            node: NodeSpec::new(64, 8, 8),
            node_count: 9408,
            bootstrap_overhead_s: 85.0,
            policy: WalltimePolicy {
                tiers: vec![(91, 7200.0), (183, 21600.0), (9408, 43200.0)],
            },
        }
    }

    /// A single node shaped like the current host.
    pub fn local() -> Self {
        let cores = std::thread::available_parallelism()
            .map(|n| n.get() as u32)
            .unwrap_or(1);
        Self {
            name: "local".into(),
            node: NodeSpec::new(cores, 0, 0),
            node_count: 1,
            bootstrap_overhead_s: 0.0,
            policy: WalltimePolicy {
                tiers: vec![(1, 86400.0)],
            },
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "frontier-sim" => Some(Self::frontier_sim()),
            "local" => Some(Self::local()),
            _ => None,
        }
    }

    /// Resolves a profile name: built-ins first, then
    /// `$ENSEMBLEKIT_PROFILE_DIR/<name>.json`.
    pub fn profile(name: &str) -> Result<Self, PlatformError> {
        if let Some(p) = Self::builtin(name) {
            return Ok(p);
        }
        if let Some(dir) = std::env::var_os(PROFILE_DIR_ENV) {
            let path = PathBuf::from(dir).join(format!("{name}.json"));
            if path.is_file() {
                return load_platform_config(&path);
            }
        }
        Err(PlatformError::UnknownProfile(name.to_string()))
    }

    /// Treats `spec` as a file path when it names an existing file,
    /// otherwise as a profile name.
    pub fn resolve(spec: &str) -> Result<Self, PlatformError> {
        let path = Path::new(spec);
        if path.is_file() {
            load_platform_config(path)
        } else {
            Self::profile(spec)
        }
    }

    pub fn usable_cores(&self) -> u32 {
        usable_cores(&self.node).expect("validated platform")
    }

    pub fn validate(&self) -> Result<(), PlatformError> {
        let mut errs = Vec::new();
        if self.node.cores_total == 0 {
            errs.push("node.cores_total must be ≥ 1".to_string());
        }
        if self.node.cores_reserved >= self.node.cores_total {
            errs.push(format!(
                "node.cores_reserved ({}) must be < cores_total ({})",
                self.node.cores_reserved, self.node.cores_total
            ));
        }
        if self.node_count == 0 {
            errs.push("node_count must be ≥ 1".to_string());
        }
        if !(self.bootstrap_overhead_s.is_finite() && self.bootstrap_overhead_s >= 0.0) {
            errs.push("bootstrap_overhead_s must be ≥ 0".to_string());
        }
        if self.policy.tiers.is_empty() {
            errs.push("policy.tiers must not be empty".to_string());
        }
        for pair in self.policy.tiers.windows(2) {
            if pair[1].0 <= pair[0].0 {
                errs.push(format!(
                    "policy tier max_nodes must increase strictly ({} then {})",
                    pair[0].0, pair[1].0
                ));
            }
        }
        for (nodes, wall) in &self.policy.tiers {
            if *nodes == 0 || !(wall.is_finite() && *wall > 0.0) {
                errs.push(format!("policy tier ({nodes}, {wall}) must be positive"));
            }
        }
        if let Some((last, _)) = self.policy.tiers.last() {
            if *last < self.node_count {
                errs.push(format!(
                    "last policy tier covers {last} nodes, machine has {}",
                    self.node_count
                ));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(PlatformError::Validation(errs))
        }
    }

    pub fn from_json(text: &str) -> Result<Self, PlatformError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| PlatformError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("platform serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), PlatformError> {
        std::fs::write(path, self.to_json() + "\n").map_err(|source| PlatformError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

pub fn load_platform_config(path: &Path) -> Result<PlatformConfig, PlatformError> {
    let text = std::fs::read_to_string(path).map_err(|source| PlatformError::Io {
        path: path.display().to_string(),
        source,
    })?;
    PlatformConfig::from_json(&text)
}

/// How a task spreads over whole nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footprint {
    pub nodes_needed: u32,
    pub procs_per_node: u32,
}

/// Packs ranks onto nodes, bounded by whichever of cores or GPUs runs out
/// first. A rank never straddles two nodes.
pub fn task_footprint(desc: &TaskDescription, node: &NodeSpec) -> Result<Footprint, PlatformError> {
    let unplaceable = |reason: String| PlatformError::Unplaceable {
        uid: desc.uid.clone(),
        reason,
    };
    let cores = usable_cores(node)?;
    if desc.cpu_processes == 0 || desc.cpu_threads_per_process == 0 {
        return Err(unplaceable("zero-sized process".into()));
    }
    if desc.cpu_threads_per_process > cores {
        return Err(unplaceable(format!(
            "{} cores per process, node has {cores} usable",
            desc.cpu_threads_per_process
        )));
    }
    let mut per_node = cores / desc.cpu_threads_per_process;
    if desc.gpus_per_process > 0 {
        if desc.gpus_per_process > node.gpus {
            return Err(unplaceable(format!(
                "{} GPUs per process, node has {}",
                desc.gpus_per_process, node.gpus
            )));
        }
        per_node = per_node.min(node.gpus / desc.gpus_per_process);
    }
    Ok(Footprint {
        nodes_needed: desc.cpu_processes.div_ceil(per_node),
        procs_per_node: per_node,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frontier_node() -> NodeSpec {
        NodeSpec::new(64, 8, 8)
    }

    fn tiers() -> WalltimePolicy {
        WalltimePolicy {
            tiers: vec![(100, 7200.0), (8000, 43200.0)],
        }
    }

    #[test]
    fn usable_core_counts() {
        assert_eq!(usable_cores(&frontier_node()).unwrap(), 56);
        assert_eq!(usable_cores(&NodeSpec::new(8, 0, 0)).unwrap(), 8);
        assert!(matches!(
            usable_cores(&NodeSpec::new(8, 8, 0)),
            Err(PlatformError::InvalidNodeSpec(8, 8))
        ));
    }

    #[test]
    fn footprints() {
        let exaconstit = TaskDescription::new("c", "x").with_resources(64, 7, 1);
        assert_eq!(
            task_footprint(&exaconstit, &frontier_node()).unwrap(),
            Footprint {
                nodes_needed: 8,
                procs_per_node: 8
            }
        );
        let foam = TaskDescription::new("f", "x").with_resources(224, 1, 0);
        assert_eq!(
            task_footprint(&foam, &frontier_node()).unwrap(),
            Footprint {
                nodes_needed: 4,
                procs_per_node: 56
            }
        );
        let single = TaskDescription::new("s", "x");
        assert_eq!(
            task_footprint(&single, &NodeSpec::new(3, 1, 0)).unwrap(),
            Footprint {
                nodes_needed: 1,
                procs_per_node: 2
            }
        );
    }

    #[test]
    fn gpu_bottleneck_and_unplaceable() {
        let t = TaskDescription::new("g", "x").with_resources(10, 1, 2);
        let fp = task_footprint(&t, &frontier_node()).unwrap();
        assert_eq!(fp.procs_per_node, 4);
        assert_eq!(fp.nodes_needed, 3);

        let fat = TaskDescription::new("fat", "x").with_resources(1, 57, 0);
        assert!(matches!(
            task_footprint(&fat, &frontier_node()),
            Err(PlatformError::Unplaceable { .. })
        ));
        let gpu = TaskDescription::new("gpu", "x").with_resources(1, 1, 9);
        assert!(task_footprint(&gpu, &frontier_node()).is_err());
    }

    #[test]
    fn walltime_lookup() {
        assert_eq!(max_walltime_for(&tiers(), 40).unwrap(), 7200.0);
        assert_eq!(max_walltime_for(&tiers(), 100).unwrap(), 7200.0);
        assert_eq!(max_walltime_for(&tiers(), 8000).unwrap(), 43200.0);
        assert!(matches!(
            max_walltime_for(&tiers(), 9000),
            Err(PlatformError::PolicyGap(9000))
        ));
    }

    #[test]
    fn frontier_profile() {
        let p = PlatformConfig::profile("frontier-sim").unwrap();
        assert_eq!(p.usable_cores(), 56);
        assert_eq!(p.node.gpus, 8);
        assert_eq!(p.bootstrap_overhead_s, 85.0);
        assert_eq!(8000 * u64::from(p.usable_cores()), 448_000);
        assert_eq!(8000 * u64::from(p.node.gpus), 64_000);
        p.validate().unwrap();
        PlatformConfig::local().validate().unwrap();
        assert!(PlatformConfig::profile("summit-sim").is_err());
    }

    #[test]
    fn reserved_equal_total_is_invalid() {
        let mut p = PlatformConfig::frontier_sim();
        p.node.cores_reserved = 64;
        match PlatformConfig::from_json(&p.to_json()) {
            Err(PlatformError::Validation(v)) => assert!(v[0].contains("cores_reserved")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn json_round_trip_and_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let p = PlatformConfig::frontier_sim();
        p.save(&path).unwrap();
        assert_eq!(load_platform_config(&path).unwrap(), p);
        let v: serde_json::Value = serde_json::from_str(&p.to_json()).unwrap();
        assert_eq!(v["policy"]["tiers"][0], serde_json::json!([91, 7200.0]));
        assert_eq!(v["node"]["cores_reserved"], 8);
    }

    #[test]
    fn parse_error_carries_line() {
        match PlatformConfig::from_json("{\n\"name\": \"x\",\n\"node\": 5\n}") {
            Err(PlatformError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn footprint_ceiling_is_tight(
            procs in 1u32..500,
            threads in 1u32..=56,
            gpus in 0u32..=8,
        ) {
            let desc = TaskDescription::new("t", "x").with_resources(procs, threads, gpus);
            let fp = task_footprint(&desc, &frontier_node()).unwrap();
            prop_assert!(fp.procs_per_node >= 1);
            prop_assert!(fp.nodes_needed * fp.procs_per_node >= procs);
            prop_assert!((fp.nodes_needed - 1) * fp.procs_per_node < procs);
            prop_assert!(fp.procs_per_node * threads <= 56);
            prop_assert!(fp.procs_per_node * gpus <= 8);
        }
    }
}
