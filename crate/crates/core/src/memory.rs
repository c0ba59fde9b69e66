//! The teacher's memory: a resource key-value store, an append-only history
//! log with secondary indexes, and a tree of task-specific trust semantics.
//!
//! Each store sits behind its own reader-writer lock in [`MemoryModule`], so
//! different stores can be used concurrently and every upsert is an atomic
//! read-modify-write.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::num::NonZeroUsize;
use std::path::Path;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DeviceId, PerformanceRecord, ResourceProfile, TaskType, Timestamp, TrustSemantics};

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("stale update for {device}: {incoming} is older than stored {stored}")]
    StaleUpdate {
        device: DeviceId,
        stored: Timestamp,
        incoming: Timestamp,
    },
    #[error("duplicate record (existing id {existing})")]
    DuplicateRecord { existing: RecordId },
    #[error("snapshot io: {0}")]
    Io(#[from] io::Error),
    #[error("snapshot format: {0}")]
    Format(String),
}

impl MemoryError {
    pub fn code(&self) -> &'static str {
        match self {
            MemoryError::StaleUpdate { .. } => "stale_update",
            MemoryError::DuplicateRecord { .. } => "duplicate_record",
            MemoryError::Io(_) => "io",
            MemoryError::Format(_) => "snapshot_format",
        }
    }
}

// ---------------------------------------------------------------------------
// Resource information

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResourceStore {
    profiles: BTreeMap<DeviceId, ResourceProfile>,
}

/// Result of a batch resource lookup.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResourceLookup {
    pub found: Vec<ResourceProfile>,
    pub missing: Vec<DeviceId>,
}

impl ResourceStore {
    /// Newest-wins upsert. Equal timestamps overwrite.
    pub fn upsert(&mut self, profile: ResourceProfile) -> Result<(), MemoryError> {
        if let Some(stored) = self.profiles.get(profile.device()) {
            if profile.updated_at() < stored.updated_at() {
                return Err(MemoryError::StaleUpdate {
                    device: profile.device().clone(),
                    stored: stored.updated_at(),
                    incoming: profile.updated_at(),
                });
            }
        }
        self.profiles.insert(profile.device().clone(), profile);
        Ok(())
    }

    pub fn get(&self, device: &DeviceId) -> Option<&ResourceProfile> {
        self.profiles.get(device)
    }

    /// Profiles in input order; unknown devices are listed in `missing`.
    pub fn get_many(&self, devices: &[DeviceId]) -> ResourceLookup {
        let mut out = ResourceLookup::default();
        for d in devices {
            match self.profiles.get(d) {
                Some(p) => out.found.push(p.clone()),
                None => out.missing.push(d.clone()),
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ResourceProfile> {
        self.profiles.values()
    }
}

// ---------------------------------------------------------------------------
// Historical records

/// Dense, monotonically assigned record id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RecordId(pub u64);

impl std::fmt::Display for RecordId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredRecord {
    pub id: RecordId,
    pub record: PerformanceRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HistoryWindow {
    /// Records with `from <= at <= to`.
    Interval { from: Timestamp, to: Timestamp },
    /// The newest `k` records.
    LastK(NonZeroUsize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistoryQuery {
    pub collaborator: DeviceId,
    pub task_type: TaskType,
    pub window: HistoryWindow,
}

type PairKey = (DeviceId, TaskType);
/// Natural identity of a record: the same collaboration reported twice.
type RecordKey = (DeviceId, DeviceId, TaskType, Timestamp);

/// Append-only log indexed by (collaborator, task type) and by timestamp.
#[derive(Debug, Clone, Default)]
pub struct RecordLog {
    records: BTreeMap<RecordId, PerformanceRecord>,
    next_id: u64,
    by_pair: HashMap<PairKey, Vec<(Timestamp, RecordId)>>,
    by_time: BTreeMap<(Timestamp, RecordId), ()>,
    by_key: HashMap<RecordKey, RecordId>,
    retention_ms: Option<i64>,
}

fn record_key(r: &PerformanceRecord) -> RecordKey {
    (
        r.owner().clone(),
        r.collaborator().clone(),
        r.task_type().clone(),
        r.at(),
    )
}

impl PartialEq for RecordLog {
    fn eq(&self, other: &Self) -> bool {
        self.records == other.records
            && self.next_id == other.next_id
            && self.retention_ms == other.retention_ms
    }
}

impl RecordLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Log that drops records older than `horizon_ms` behind the newest one
    /// whenever [`RecordLog::prune`] runs.
    pub fn with_retention(horizon_ms: Option<i64>) -> Self {
        RecordLog {
            retention_ms: horizon_ms,
            ..Self::default()
        }
    }

    pub fn append(&mut self, record: PerformanceRecord) -> Result<RecordId, MemoryError> {
        let key = record_key(&record);
        if let Some(&existing) = self.by_key.get(&key) {
            return Err(MemoryError::DuplicateRecord { existing });
        }
        let id = RecordId(self.next_id);
        self.next_id += 1;
        self.index(id, &record);
        self.by_key.insert(key, id);
        self.records.insert(id, record);
        Ok(id)
    }

    fn index(&mut self, id: RecordId, record: &PerformanceRecord) {
        let entry = (record.at(), id);
        let list = self
            .by_pair
            .entry((record.collaborator().clone(), record.task_type().clone()))
            .or_default();
        let pos = list.partition_point(|e| *e <= entry);
        list.insert(pos, entry);
        self.by_time.insert(entry, ());
    }

    /// Matching records in ascending `(timestamp, id)` order.
    pub fn query(&self, q: &HistoryQuery) -> Vec<PerformanceRecord> {
        self.query_stored(q).into_iter().map(|s| s.record).collect()
    }

    pub fn query_stored(&self, q: &HistoryQuery) -> Vec<StoredRecord> {
        let Some(list) = self.by_pair.get(&(q.collaborator.clone(), q.task_type.clone())) else {
            return Vec::new();
        };
        let slice = match q.window {
            HistoryWindow::Interval { from, to } => {
                let lo = list.partition_point(|(t, _)| *t < from);
                let hi = list.partition_point(|(t, _)| *t <= to);
                &list[lo..hi.max(lo)]
            }
            HistoryWindow::LastK(k) => &list[list.len().saturating_sub(k.get())..],
        };
        slice
            .iter()
            .map(|(_, id)| StoredRecord {
                id: *id,
                record: self.records[id].clone(),
            })
            .collect()
    }

    pub fn get(&self, id: RecordId) -> Option<&PerformanceRecord> {
        self.records.get(&id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// All records in id order.
    pub fn iter(&self) -> impl Iterator<Item = StoredRecord> + '_ {
        self.records.iter().map(|(id, r)| StoredRecord {
            id: *id,
            record: r.clone(),
        })
    }

    /// Removes records with `at < cutoff`. Returns how many were dropped.
    pub fn prune_before(&mut self, cutoff: Timestamp) -> usize {
        let doomed: Vec<(Timestamp, RecordId)> = self
            .by_time
            .range(..(cutoff, RecordId(0)))
            .map(|(k, _)| *k)
            .collect();
        for (at, id) in &doomed {
            self.by_time.remove(&(*at, *id));
            if let Some(rec) = self.records.remove(id) {
                self.by_key.remove(&record_key(&rec));
                let pair = (rec.collaborator().clone(), rec.task_type().clone());
                if let Some(list) = self.by_pair.get_mut(&pair) {
                    list.retain(|e| e.1 != *id);
                    if list.is_empty() {
                        self.by_pair.remove(&pair);
                    }
                }
            }
        }
        doomed.len()
    }

    /// Applies the configured retention horizon relative to the newest record.
    pub fn prune(&mut self) -> usize {
        let (Some(h), Some(((newest, _), _))) = (self.retention_ms, self.by_time.last_key_value())
        else {
            return 0;
        };
        let cutoff = Timestamp(newest.0.saturating_sub(h));
        self.prune_before(cutoff)
    }

    fn from_parts(records: Vec<StoredRecord>, next_id: u64, retention_ms: Option<i64>) -> Result<Self, MemoryError> {
        let mut log = RecordLog::with_retention(retention_ms);
        for s in records {
            if s.id.0 >= next_id {
                return Err(MemoryError::Format(format!("record id {} >= next_id {next_id}", s.id)));
            }
            let key = record_key(&s.record);
            if log.records.contains_key(&s.id) || log.by_key.contains_key(&key) {
                return Err(MemoryError::Format(format!("duplicate record {}", s.id)));
            }
            log.index(s.id, &s.record);
            log.by_key.insert(key, s.id);
            log.records.insert(s.id, s.record);
        }
        log.next_id = next_id;
        Ok(log)
    }
}

// ---------------------------------------------------------------------------
// Trust semantics tree

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum NodeKind {
    Root,
    TaskType(TaskType),
    Device(DeviceId),
    Semantics(Box<TrustSemantics>),
}

impl NodeKind {
    fn key(&self) -> &str {
        match self {
            NodeKind::Root | NodeKind::Semantics(_) => "",
            NodeKind::TaskType(t) => t.as_str(),
            NodeKind::Device(d) => d.as_str(),
        }
    }

    fn depth(&self) -> usize {
        match self {
            NodeKind::Root => 0,
            NodeKind::TaskType(_) => 1,
            NodeKind::Device(_) => 2,
            NodeKind::Semantics(_) => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: NodeId,
    pub kind: NodeKind,
    pub parent: Option<NodeId>,
    /// Sorted by child key.
    pub children: Vec<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsertOutcome {
    Inserted,
    Updated,
    Unchanged,
}

/// Root -> task type -> device -> semantics leaf, stored as an arena of
/// `<self, parent, children>` nodes with dense ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticsTree {
    nodes: Vec<TreeNode>,
}

impl Default for SemanticsTree {
    fn default() -> Self {
        Self::new()
    }
}

const ROOT: NodeId = NodeId(0);

impl SemanticsTree {
    pub fn new() -> Self {
        SemanticsTree {
            nodes: vec![TreeNode {
                id: ROOT,
                kind: NodeKind::Root,
                parent: None,
                children: Vec::new(),
            }],
        }
    }

    pub fn root(&self) -> NodeId {
        ROOT
    }

    pub fn node(&self, id: NodeId) -> Option<&TreeNode> {
        self.nodes.get(id.0 as usize)
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// `(self, parent, children)` view of a node.
    pub fn triplet(&self, id: NodeId) -> Option<(NodeId, Option<NodeId>, &[NodeId])> {
        self.node(id).map(|n| (n.id, n.parent, n.children.as_slice()))
    }

    fn find_child(&self, parent: NodeId, key: &str) -> Result<NodeId, usize> {
        let children = &self.nodes[parent.0 as usize].children;
        children
            .binary_search_by(|c| self.nodes[c.0 as usize].kind.key().cmp(key))
            .map(|i| children[i])
    }

    fn add_child(&mut self, parent: NodeId, pos: usize, kind: NodeKind) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(TreeNode {
            id,
            kind,
            parent: Some(parent),
            children: Vec::new(),
        });
        self.nodes[parent.0 as usize].children.insert(pos, id);
        id
    }

    /// Inserts or replaces the single leaf for `(task type, device)`.
    pub fn upsert(&mut self, ts: TrustSemantics) -> UpsertOutcome {
        let tt_node = match self.find_child(ROOT, ts.task_type().as_str()) {
            Ok(id) => id,
            Err(pos) => self.add_child(ROOT, pos, NodeKind::TaskType(ts.task_type().clone())),
        };
        let dev_node = match self.find_child(tt_node, ts.device().as_str()) {
            Ok(id) => id,
            Err(pos) => self.add_child(tt_node, pos, NodeKind::Device(ts.device().clone())),
        };
        match self.nodes[dev_node.0 as usize].children.first().copied() {
            None => {
                self.add_child(dev_node, 0, NodeKind::Semantics(Box::new(ts)));
                UpsertOutcome::Inserted
            }
            Some(leaf) => {
                let node = &mut self.nodes[leaf.0 as usize];
                match &node.kind {
                    NodeKind::Semantics(existing) if **existing == ts => UpsertOutcome::Unchanged,
                    _ => {
                        node.kind = NodeKind::Semantics(Box::new(ts));
                        UpsertOutcome::Updated
                    }
                }
            }
        }
    }

    pub fn task_types(&self) -> Vec<TaskType> {
        self.nodes[0]
            .children
            .iter()
            .filter_map(|c| match &self.nodes[c.0 as usize].kind {
                NodeKind::TaskType(t) => Some(t.clone()),
                _ => None,
            })
            .collect()
    }

    /// All leaves under a task type, ordered by device id.
    pub fn by_task_type(&self, task_type: &TaskType) -> Vec<TrustSemantics> {
        let Ok(tt) = self.find_child(ROOT, task_type.as_str()) else {
            return Vec::new();
        };
        self.nodes[tt.0 as usize]
            .children
            .iter()
            .filter_map(|d| self.nodes[d.0 as usize].children.first())
            .filter_map(|leaf| match &self.nodes[leaf.0 as usize].kind {
                NodeKind::Semantics(ts) => Some((**ts).clone()),
                _ => None,
            })
            .collect()
    }

    pub fn get(&self, task_type: &TaskType, device: &DeviceId) -> Option<&TrustSemantics> {
        let tt = self.find_child(ROOT, task_type.as_str()).ok()?;
        let dev = self.find_child(tt, device.as_str()).ok()?;
        let leaf = self.nodes[dev.0 as usize].children.first()?;
        match &self.nodes[leaf.0 as usize].kind {
            NodeKind::Semantics(ts) => Some(ts),
            _ => None,
        }
    }

    /// Number of leaves under a task type.
    pub fn device_count(&self, task_type: &TaskType) -> usize {
        self.find_child(ROOT, task_type.as_str())
            .map(|tt| self.nodes[tt.0 as usize].children.len())
            .unwrap_or(0)
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Semantics(_)))
            .count()
    }

    /// Full structural check; returns a description of the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let first = self.nodes.first().ok_or("empty arena")?;
        if first.kind != NodeKind::Root || first.parent.is_some() {
            return Err("node 0 is not a parentless root".into());
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id.0 as usize != i {
                return Err(format!("node at slot {i} has id {}", n.id.0));
            }
            if i > 0 {
                let Some(p) = n.parent.and_then(|p| self.node(p)) else {
                    return Err(format!("node {i} has no valid parent"));
                };
                if matches!(n.kind, NodeKind::Root) {
                    return Err(format!("second root at {i}"));
                }
                if p.kind.depth() + 1 != n.kind.depth() {
                    return Err(format!("node {i} at wrong depth"));
                }
                if p.children.iter().filter(|c| c.0 as usize == i).count() != 1 {
                    return Err(format!("node {i} not listed exactly once by its parent"));
                }
            }
            for c in &n.children {
                if self.node(*c).and_then(|c| c.parent) != Some(n.id) {
                    return Err(format!("child {} of {i} does not point back", c.0));
                }
            }
            let keys: Vec<&str> = n
                .children
                .iter()
                .map(|c| self.nodes[c.0 as usize].kind.key())
                .collect();
            if keys.windows(2).any(|w| w[0] >= w[1]) && !matches!(n.kind, NodeKind::Device(_)) {
                return Err(format!("children of {i} not strictly sorted"));
            }
            match &n.kind {
                NodeKind::Device(d) => {
                    if n.children.len() != 1 {
                        return Err(format!("device node {i} has {} leaves", n.children.len()));
                    }
                    let tt = match self.node(n.parent.unwrap()).map(|p| &p.kind) {
                        Some(NodeKind::TaskType(t)) => t,
                        _ => return Err(format!("device node {i} not under a task type")),
                    };
                    if let NodeKind::Semantics(ts) = &self.nodes[n.children[0].0 as usize].kind {
                        if ts.device() != d || ts.task_type() != tt {
                            return Err(format!("leaf under {i} is for a different pair"));
                        }
                    }
                }
                NodeKind::Semantics(_) if !n.children.is_empty() => {
                    return Err(format!("leaf {i} has children"));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Level-by-level text rendering.
    pub fn render(&self) -> String {
        let mut out = String::new();
        if self.nodes.len() == 1 {
            out.push_str("root only\n");
            return out;
        }
        out.push_str("v0 (root)\n");
        for tt in &self.nodes[0].children {
            let tn = &self.nodes[tt.0 as usize];
            let _ = writeln!(out, "  [{}] {}", tn.id.0, tn.kind.key());
            for d in &tn.children {
                let dn = &self.nodes[d.0 as usize];
                let _ = write!(out, "    [{}] {}", dn.id.0, dn.kind.key());
                if let Some(NodeKind::Semantics(ts)) =
                    dn.children.first().map(|l| &self.nodes[l.0 as usize].kind)
                {
                    let _ = write!(
                        out,
                        " -> state={} comm=({}) comp=({}) records={}",
                        ts.state().as_str(),
                        ts.describe_communication(),
                        ts.describe_computation(),
                        ts.record_count()
                    );
                }
                out.push('\n');
            }
        }
        out
    }

    fn from_nodes(nodes: Vec<TreeNode>) -> Result<Self, MemoryError> {
        let tree = SemanticsTree { nodes };
        tree.check_invariants().map_err(MemoryError::Format)?;
        Ok(tree)
    }
}

// ---------------------------------------------------------------------------
// Module facade and snapshots

/// Snapshot container identifier and current version.
pub const SNAPSHOT_FORMAT: &str = "twotsd-memory-snapshot";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotDoc {
    format: String,
    version: u32,
    resources: Vec<ResourceProfile>,
    history: HistoryDoc,
    semantics: Vec<TreeNode>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HistoryDoc {
    next_id: u64,
    retention_ms: Option<i64>,
    records: Vec<StoredRecord>,
}

#[derive(Debug, Default)]
pub struct MemoryModule {
    resources: RwLock<ResourceStore>,
    history: RwLock<RecordLog>,
    tree: RwLock<SemanticsTree>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryStats {
    pub resources: usize,
    pub records: usize,
    pub tree_nodes: usize,
    pub task_types: usize,
    pub leaves: usize,
}

impl MemoryModule {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_retention(horizon_ms: Option<i64>) -> Self {
        MemoryModule {
            history: RwLock::new(RecordLog::with_retention(horizon_ms)),
            ..Self::default()
        }
    }

    pub fn upsert_resources(&self, profile: ResourceProfile) -> Result<(), MemoryError> {
        self.resources.write().upsert(profile)
    }

    pub fn get_resources(&self, devices: &[DeviceId]) -> ResourceLookup {
        self.resources.read().get_many(devices)
    }

    pub fn append_record(&self, record: PerformanceRecord) -> Result<RecordId, MemoryError> {
        self.history.write().append(record)
    }

    pub fn query_records(&self, q: &HistoryQuery) -> Vec<PerformanceRecord> {
        self.history.read().query(q)
    }

    pub fn prune_history(&self) -> usize {
        self.history.write().prune()
    }

    pub fn upsert_semantics(&self, ts: TrustSemantics) -> UpsertOutcome {
        self.tree.write().upsert(ts)
    }

    pub fn get_semantics_by_task_type(&self, task_type: &TaskType) -> Vec<TrustSemantics> {
        self.tree.read().by_task_type(task_type)
    }

    pub fn get_semantics(&self, task_type: &TaskType, device: &DeviceId) -> Option<TrustSemantics> {
        self.tree.read().get(task_type, device).cloned()
    }

    pub fn with_resources<R>(&self, f: impl FnOnce(&ResourceStore) -> R) -> R {
        f(&self.resources.read())
    }

    pub fn with_history<R>(&self, f: impl FnOnce(&RecordLog) -> R) -> R {
        f(&self.history.read())
    }

    pub fn with_tree<R>(&self, f: impl FnOnce(&SemanticsTree) -> R) -> R {
        f(&self.tree.read())
    }

    pub fn stats(&self) -> MemoryStats {
        let tree = self.tree.read();
        MemoryStats {
            resources: self.resources.read().len(),
            records: self.history.read().len(),
            tree_nodes: tree.node_count(),
            task_types: tree.task_types().len(),
            leaves: tree.leaf_count(),
        }
    }

    /// Serializes all three stores into one self-describing document.
    pub fn to_snapshot_bytes(&self) -> Vec<u8> {
        let resources = self.resources.read();
        let history = self.history.read();
        let tree = self.tree.read();
        let doc = SnapshotDoc {
            format: SNAPSHOT_FORMAT.to_string(),
            version: SNAPSHOT_VERSION,
            resources: resources.iter().cloned().collect(),
            history: HistoryDoc {
                next_id: history.next_id,
                retention_ms: history.retention_ms,
                records: history.iter().collect(),
            },
            semantics: tree.nodes.clone(),
        };
        let mut bytes = serde_json::to_vec_pretty(&doc).expect("snapshot serializes");
        bytes.push(b'\n');
        bytes
    }

    pub fn from_snapshot_bytes(bytes: &[u8]) -> Result<Self, MemoryError> {
        let head: serde_json::Value =
            serde_json::from_slice(bytes).map_err(|e| MemoryError::Format(e.to_string()))?;
        match head.get("format").and_then(|v| v.as_str()) {
            Some(SNAPSHOT_FORMAT) => {}
            other => return Err(MemoryError::Format(format!("unexpected format tag {other:?}"))),
        }
        match head.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == SNAPSHOT_VERSION as u64 => {}
            other => return Err(MemoryError::Format(format!("unsupported version {other:?}"))),
        }
        let doc: SnapshotDoc =
            serde_json::from_value(head).map_err(|e| MemoryError::Format(e.to_string()))?;
        let mut resources = ResourceStore::default();
        for p in doc.resources {
            if resources.get(p.device()).is_some() {
                return Err(MemoryError::Format(format!("duplicate profile for {}", p.device())));
            }
            resources.upsert(p)?;
        }
        let history =
            RecordLog::from_parts(doc.history.records, doc.history.next_id, doc.history.retention_ms)?;
        let tree = SemanticsTree::from_nodes(doc.semantics)?;
        Ok(MemoryModule {
            resources: RwLock::new(resources),
            history: RwLock::new(history),
            tree: RwLock::new(tree),
        })
    }

    /// Writes the snapshot via a temporary file and rename.
    pub fn save(&self, path: &Path) -> Result<(), MemoryError> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_snapshot_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MemoryError> {
        Self::from_snapshot_bytes(&fs::read(path)?)
    }
}

impl PartialEq for MemoryModule {
    fn eq(&self, other: &Self) -> bool {
        *self.resources.read() == *other.resources.read()
            && *self.history.read() == *other.history.read()
            && *self.tree.read() == *other.tree.read()
    }
}
