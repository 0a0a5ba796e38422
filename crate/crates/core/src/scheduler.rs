//! Pilot-side placement over per-node free core/GPU slots.
//!
//! Placement is strict FIFO with first-fit by ascending node id: a task at
//! the head of the queue that does not fit blocks everything behind it.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::platform::{task_footprint, Footprint, NodeSpec, PlatformError};
use crate::pst::TaskDescription;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchedulerError {
    #[error("placement {0} already released")]
    DoubleRelease(u64),
    #[error("unknown node {0}")]
    UnknownNode(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSlots {
    pub node_id: u32,
    pub free_cores: u32,
    pub free_gpus: u32,
    pub healthy: bool,
}

/// What a queued task asks of the slot table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub uid: String,
    pub footprint: Footprint,
    pub processes: u32,
    pub cores_per_process: u32,
    pub gpus_per_process: u32,
}

impl Request {
    pub fn for_task(desc: &TaskDescription, node: &NodeSpec) -> Result<Self, PlatformError> {
        Ok(Self {
            uid: desc.uid.clone(),
            footprint: task_footprint(desc, node)?,
            processes: desc.cpu_processes,
            cores_per_process: desc.cpu_threads_per_process,
            gpus_per_process: desc.gpus_per_process,
        })
    }

    /// Ranks on the `i`-th chosen node: full nodes first, remainder last.
    fn procs_at(&self, i: u32) -> u32 {
        let ppn = self.footprint.procs_per_node;
        if i + 1 < self.footprint.nodes_needed {
            ppn
        } else {
            self.processes - ppn * (self.footprint.nodes_needed - 1)
        }
    }

    fn total_cores(&self) -> u64 {
        u64::from(self.processes) * u64::from(self.cores_per_process)
    }

    fn total_gpus(&self) -> u64 {
        u64::from(self.processes) * u64::from(self.gpus_per_process)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub id: u64,
    pub uid: String,
    /// `(node_id, procs_on_node)` in ascending node order.
    pub nodes: Vec<(u32, u32)>,
    pub cores_per_process: u32,
    pub gpus_per_process: u32,
}

impl Placement {
    pub fn node_ids(&self) -> Vec<u32> {
        self.nodes.iter().map(|(n, _)| *n).collect()
    }

    pub fn cores(&self) -> u64 {
        self.nodes
            .iter()
            .map(|(_, p)| u64::from(*p) * u64::from(self.cores_per_process))
            .sum()
    }

    pub fn gpus(&self) -> u64 {
        self.nodes
            .iter()
            .map(|(_, p)| u64::from(*p) * u64::from(self.gpus_per_process))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotTable {
    nodes: Vec<NodeSlots>,
    usable_cores: u32,
    gpus: u32,
    live: HashSet<u64>,
    next_id: u64,
    // Healthy-node totals, for rejecting requests that cannot fit anywhere.
    healthy_free_cores: u64,
    healthy_free_gpus: u64,
}

impl SlotTable {
    /// A fully free table of `count` nodes numbered `0..count`.
    pub fn new(node: &NodeSpec, count: u32) -> Result<Self, PlatformError> {
        let usable = crate::platform::usable_cores(node)?;
        let nodes = (0..count)
            .map(|node_id| NodeSlots {
                node_id,
                free_cores: usable,
                free_gpus: node.gpus,
                healthy: true,
            })
            .collect();
        Ok(Self {
            nodes,
            usable_cores: usable,
            gpus: node.gpus,
            live: HashSet::new(),
            next_id: 0,
            healthy_free_cores: u64::from(usable) * u64::from(count),
            healthy_free_gpus: u64::from(node.gpus) * u64::from(count),
        })
    }

    pub fn nodes(&self) -> &[NodeSlots] {
        &self.nodes
    }

    pub fn node(&self, id: u32) -> Option<&NodeSlots> {
        self.nodes.get(id as usize)
    }

    pub fn usable_cores(&self) -> u32 {
        self.usable_cores
    }

    pub fn gpus_per_node(&self) -> u32 {
        self.gpus
    }

    pub fn live_placements(&self) -> usize {
        self.live.len()
    }

    /// Immutable copy of the per-node records.
    pub fn snapshot(&self) -> Vec<NodeSlots> {
        self.nodes.clone()
    }

    fn fits(&self, slot: &NodeSlots, req: &Request, procs: u32) -> bool {
        slot.healthy
            && u64::from(slot.free_cores) >= u64::from(procs) * u64::from(req.cores_per_process)
            && u64::from(slot.free_gpus) >= u64::from(procs) * u64::from(req.gpus_per_process)
    }

    /// Reserves slots on exactly `nodes_needed` healthy nodes, or returns
    /// `None` leaving the table untouched.
    pub fn try_place(&mut self, req: &Request) -> Option<Placement> {
        let needed = req.footprint.nodes_needed;
        if needed as usize > self.nodes.len()
            || req.total_cores() > self.healthy_free_cores
            || req.total_gpus() > self.healthy_free_gpus
        {
            return None;
        }
        let full = if req.procs_at(needed - 1) == req.footprint.procs_per_node {
            needed
        } else {
            needed - 1
        };
        let mut chosen: Vec<u32> = Vec::with_capacity(needed as usize);
        for slot in &self.nodes {
            if chosen.len() as u32 == full {
                break;
            }
            if self.fits(slot, req, req.footprint.procs_per_node) {
                chosen.push(slot.node_id);
            }
        }
        if (chosen.len() as u32) < full {
            return None;
        }
        let mut remainder_node = None;
        if full < needed {
            let rem = req.procs_at(needed - 1);
            remainder_node = self
                .nodes
                .iter()
                .find(|s| !chosen.contains(&s.node_id) && self.fits(s, req, rem))
                .map(|s| (s.node_id, rem));
            remainder_node?;
        }
        let mut nodes: Vec<(u32, u32)> = chosen
            .into_iter()
            .map(|n| (n, req.footprint.procs_per_node))
            .chain(remainder_node)
            .collect();
        nodes.sort_unstable();
        let placement = Placement {
            id: self.next_id,
            uid: req.uid.clone(),
            nodes,
            cores_per_process: req.cores_per_process,
            gpus_per_process: req.gpus_per_process,
        };
        self.next_id += 1;
        for &(n, procs) in &placement.nodes {
            let slot = &mut self.nodes[n as usize];
            let cores = procs * req.cores_per_process;
            let gpus = procs * req.gpus_per_process;
            slot.free_cores -= cores;
            slot.free_gpus -= gpus;
            self.healthy_free_cores -= u64::from(cores);
            self.healthy_free_gpus -= u64::from(gpus);
        }
        self.live.insert(placement.id);
        Some(placement)
    }

    pub fn release(&mut self, placement: &Placement) -> Result<(), SchedulerError> {
        if !self.live.remove(&placement.id) {
            return Err(SchedulerError::DoubleRelease(placement.id));
        }
        for &(n, procs) in &placement.nodes {
            let slot = &mut self.nodes[n as usize];
            let cores = procs * placement.cores_per_process;
            let gpus = procs * placement.gpus_per_process;
            slot.free_cores += cores;
            slot.free_gpus += gpus;
            debug_assert!(slot.free_cores <= self.usable_cores && slot.free_gpus <= self.gpus);
            if slot.healthy {
                self.healthy_free_cores += u64::from(cores);
                self.healthy_free_gpus += u64::from(gpus);
            }
        }
        Ok(())
    }

    /// Unhealthy nodes are skipped by future placements. Existing
    /// placements on the node are left alone.
    pub fn mark_node_health(&mut self, node_id: u32, healthy: bool) -> Result<(), SchedulerError> {
        let slot = self
            .nodes
            .get_mut(node_id as usize)
            .ok_or(SchedulerError::UnknownNode(node_id))?;
        if slot.healthy != healthy {
            let (c, g) = (u64::from(slot.free_cores), u64::from(slot.free_gpus));
            if healthy {
                self.healthy_free_cores += c;
                self.healthy_free_gpus += g;
            } else {
                self.healthy_free_cores -= c;
                self.healthy_free_gpus -= g;
            }
            slot.healthy = healthy;
        }
        Ok(())
    }

    /// Places queued requests head-first and stops at the first one that
    /// does not fit. Returns the placements in queue order and the requests
    /// still waiting.
    pub fn drain_queue(&mut self, queue: &[Request]) -> (Vec<Placement>, Vec<Request>) {
        let mut placed = Vec::new();
        for (i, req) in queue.iter().enumerate() {
            match self.try_place(req) {
                Some(p) => placed.push(p),
                None => return (placed, queue[i..].to_vec()),
            }
        }
        (placed, Vec::new())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frontier() -> NodeSpec {
        NodeSpec::new(64, 8, 8)
    }

    fn req(uid: &str, procs: u32, threads: u32, gpus: u32, node: &NodeSpec) -> Request {
        let d = TaskDescription::new(uid, "x").with_resources(procs, threads, gpus);
        Request::for_task(&d, node).unwrap()
    }

    #[test]
    fn exaca_fills_one_node_and_releases() {
        let node = frontier();
        let mut t = SlotTable::new(&node, 1).unwrap();
        let p = t.try_place(&req("exaca", 8, 7, 1, &node)).unwrap();
        assert_eq!(p.nodes, vec![(0, 8)]);
        assert_eq!(t.node(0).unwrap().free_cores, 0);
        assert_eq!(t.node(0).unwrap().free_gpus, 0);
        t.release(&p).unwrap();
        assert_eq!(t.node(0).unwrap().free_cores, 56);
        assert_eq!(t.node(0).unwrap().free_gpus, 8);
        assert_eq!(t.release(&p), Err(SchedulerError::DoubleRelease(p.id)));
    }

    #[test]
    fn insufficient_nodes_leaves_table_unchanged() {
        let node = frontier();
        let mut t = SlotTable::new(&node, 2).unwrap();
        let before = t.clone();
        assert!(t.try_place(&req("big", 24, 7, 1, &node)).is_none());
        assert_eq!(t, before);
    }

    #[test]
    fn remainder_goes_on_last_node() {
        let node = NodeSpec::new(4, 0, 0);
        let mut t = SlotTable::new(&node, 4).unwrap();
        let small = t.try_place(&req("s", 1, 1, 0, &node)).unwrap();
        assert_eq!(small.nodes, vec![(0, 1)]);
        // 9 ranks at 4 per node: two full nodes plus one rank; node 0 only
        // has 3 cores left so it can only host the remainder.
        let p = t.try_place(&req("r", 9, 1, 0, &node)).unwrap();
        assert_eq!(p.nodes, vec![(0, 1), (1, 4), (2, 4)]);
        assert_eq!(t.node(0).unwrap().free_cores, 2);
    }

    #[test]
    fn tasks_share_nodes() {
        let node = frontier();
        let mut t = SlotTable::new(&node, 1).unwrap();
        let a = t.try_place(&req("a", 4, 7, 1, &node)).unwrap();
        let b = t.try_place(&req("b", 4, 7, 1, &node)).unwrap();
        assert_eq!(a.node_ids(), b.node_ids());
        assert!(t.try_place(&req("c", 1, 1, 0, &node)).is_none());
    }

    #[test]
    fn drain_is_fifo_without_backfill() {
        let node = frontier();
        let mut t = SlotTable::new(&node, 4).unwrap();
        let queue = vec![req("big", 32, 7, 1, &node), req("small", 8, 7, 1, &node)];
        let (placed, waiting) = t.drain_queue(&queue);
        assert_eq!(placed.len(), 1);
        assert_eq!(placed[0].uid, "big");
        assert_eq!(waiting.len(), 1);
        assert_eq!(waiting[0].uid, "small");

        let (p, w) = t.drain_queue(&[]);
        assert!(p.is_empty() && w.is_empty());
    }

    #[test]
    fn head_blocks_even_when_later_task_fits() {
        let node = frontier();
        let mut t = SlotTable::new(&node, 4).unwrap();
        let queue = vec![
            req("a", 24, 7, 1, &node),
            req("b", 16, 7, 1, &node),
            req("c", 8, 7, 1, &node),
        ];
        let (placed, waiting) = t.drain_queue(&queue);
        assert_eq!(placed.len(), 1);
        assert_eq!(
            waiting.iter().map(|r| r.uid.as_str()).collect::<Vec<_>>(),
            ["b", "c"]
        );
    }

    #[test]
    fn exaconstit_capacity_division() {
        let node = frontier();
        let mut t = SlotTable::new(&node, 8000).unwrap();
        let queue: Vec<Request> = (0..7875)
            .map(|i| req(&format!("c{i}"), 64, 7, 1, &node))
            .collect();
        let (placed, waiting) = t.drain_queue(&queue);
        assert_eq!(placed.len(), 1000);
        assert_eq!(waiting.len(), 6875);
        assert_eq!(placed[999].nodes.last().unwrap().0, 7999);
        assert_eq!(waiting[0].uid, "c1000");
    }

    #[test]
    fn unhealthy_nodes_are_skipped() {
        let node = NodeSpec::new(8, 0, 0);
        let mut t = SlotTable::new(&node, 4).unwrap();
        t.mark_node_health(3, false).unwrap();
        for i in 0..3 {
            let p = t.try_place(&req(&format!("t{i}"), 8, 1, 0, &node)).unwrap();
            assert_ne!(p.nodes[0].0, 3);
        }
        assert!(t.try_place(&req("t3", 8, 1, 0, &node)).is_none());
        t.mark_node_health(3, true).unwrap();
        assert_eq!(
            t.try_place(&req("t3", 8, 1, 0, &node)).unwrap().nodes[0].0,
            3
        );
        assert_eq!(
            t.mark_node_health(9, false),
            Err(SchedulerError::UnknownNode(9))
        );
    }

    #[test]
    fn unhealthy_node_blocks_full_width_task() {
        let node = NodeSpec::new(8, 0, 0);
        let mut t = SlotTable::new(&node, 4).unwrap();
        t.mark_node_health(2, false).unwrap();
        assert!(t.try_place(&req("w", 32, 1, 0, &node)).is_none());
    }

    #[derive(Debug, Clone)]
    enum Op {
        Place(u32, u32, u32),
        Release(usize),
        Health(u32, bool),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (1u32..20, 1u32..9, 0u32..3).prop_map(|(p, c, g)| Op::Place(p, c, g)),
            (0usize..50).prop_map(Op::Release),
            (0u32..6, any::<bool>()).prop_map(|(n, h)| Op::Health(n, h)),
        ]
    }

    proptest! {
        #[test]
        fn conservation_and_bounds(ops in prop::collection::vec(op(), 1..100)) {
            let node = NodeSpec::new(10, 2, 4);
            let mut t = SlotTable::new(&node, 6).unwrap();
            let initial = t.snapshot();
            let mut live: Vec<Placement> = Vec::new();
            for (i, op) in ops.into_iter().enumerate() {
                match op {
                    Op::Place(p, c, g) => {
                        let d = TaskDescription::new(format!("t{i}"), "x").with_resources(p, c, g);
                        if let Ok(r) = Request::for_task(&d, &node) {
                            let before = t.clone();
                            match t.try_place(&r) {
                                Some(pl) => {
                                    prop_assert_eq!(pl.nodes.len() as u32, r.footprint.nodes_needed);
                                    prop_assert_eq!(pl.nodes.iter().map(|x| x.1).sum::<u32>(), p);
                                    for (n, _) in &pl.nodes {
                                        prop_assert!(before.node(*n).unwrap().healthy);
                                    }
                                    live.push(pl);
                                }
                                None => prop_assert_eq!(&t, &before),
                            }
                        }
                    }
                    Op::Release(k) if !live.is_empty() => {
                        let pl = live.remove(k % live.len());
                        t.release(&pl).unwrap();
                    }
                    Op::Release(_) => {}
                    Op::Health(n, h) => t.mark_node_health(n, h).unwrap(),
                }
                for s in t.nodes() {
                    prop_assert!(s.free_cores <= 8 && s.free_gpus <= 4);
                }
                let reserved: u64 = live.iter().map(Placement::cores).sum();
                let free: u64 = t.nodes().iter().map(|s| u64::from(s.free_cores)).sum();
                prop_assert_eq!(reserved + free, 48);
            }
            for pl in live.drain(..) {
                t.release(&pl).unwrap();
            }
            for n in 0..6 {
                t.mark_node_health(n, true).unwrap();
            }
            prop_assert_eq!(t.snapshot(), initial);
        }

        #[test]
        fn placement_is_deterministic(sizes in prop::collection::vec(1u32..30, 0..30)) {
            let node = NodeSpec::new(8, 0, 2);
            let queue: Vec<Request> = sizes.iter().enumerate()
                .map(|(i, p)| req(&format!("q{i}"), *p, 1, 0, &node))
                .collect();
            let mut a = SlotTable::new(&node, 10).unwrap();
            let mut b = SlotTable::new(&node, 10).unwrap();
            prop_assert_eq!(a.drain_queue(&queue), b.drain_queue(&queue));
        }
    }
}
