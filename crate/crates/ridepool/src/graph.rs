//! Road-network geometry: unit-edge graphs, shortest distances, canonical
//! solo paths, rider types, solo-rider states, and matching compatibility.
//!
//! Distances are measured in unit edges; one unit of distance is covered in
//! one simulation period.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// External node identifier as it appears in network files.
pub type NodeId = u32;

const UNREACHED: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("network has no nodes")]
    Empty,
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("self-loop at node {0}: edges must join distinct nodes")]
    SelfLoop(NodeId),
    #[error("network is not connected: {reached} of {total} nodes reachable from node {root}")]
    Disconnected {
        root: NodeId,
        reached: usize,
        total: usize,
    },
    #[error("no path between {0} and {1}")]
    NoPath(NodeId, NodeId),
    #[error("edge list line {line}: {msg}")]
    BadEdgeList { line: usize, msg: String },
    #[error("type list line {line}: {msg}")]
    BadTypeList { line: usize, msg: String },
    #[error("rider type {0}: origin equals destination")]
    ZeroLengthTrip(usize),
    #[error("arrival probability {0} outside [0,1]")]
    BadArrival(f64),
    #[error("arrival probabilities sum to {0:.6}, must not exceed 1")]
    ArrivalMass(f64),
    #[error("willingness-to-pay bounds [{0}, {1}] are not increasing")]
    BadWtp(f64, f64),
    #[error("compat table needs {needed} cached entries, over the cap of {cap}")]
    TableTooLarge { needed: usize, cap: usize },
}

/// Undirected graph whose edges all have length exactly one distance unit.
#[derive(Debug, Clone)]
pub struct RoadNetwork {
    /// External ids, ascending; position = internal index.
    ids: Vec<NodeId>,
    index: HashMap<NodeId, u32>,
    /// Adjacency by internal index, each list sorted ascending. Since ids are
    /// sorted, ascending internal order is ascending external-id order.
    adj: Vec<Vec<u32>>,
}

impl RoadNetwork {
    pub fn from_edges(edges: &[(NodeId, NodeId)]) -> Result<Self, NetError> {
        if edges.is_empty() {
            return Err(NetError::Empty);
        }
        let mut ids: Vec<NodeId> = edges.iter().flat_map(|&(a, b)| [a, b]).collect();
        ids.sort_unstable();
        ids.dedup();
        let index: HashMap<NodeId, u32> = ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i as u32))
            .collect();
        let mut adj = vec![Vec::new(); ids.len()];
        for &(a, b) in edges {
            if a == b {
                return Err(NetError::SelfLoop(a));
            }
            let (ia, ib) = (index[&a], index[&b]);
            adj[ia as usize].push(ib);
            adj[ib as usize].push(ia);
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        let net = RoadNetwork { ids, index, adj };
        let dist = net.bfs(0);
        let reached = dist.iter().filter(|&&d| d != UNREACHED).count();
        if reached != net.ids.len() {
            return Err(NetError::Disconnected {
                root: net.ids[0],
                reached,
                total: net.ids.len(),
            });
        }
        Ok(net)
    }

    /// Parses the edge-list text format: one edge per line, "node_a node_b".
    /// Blank lines and lines starting with '#' are skipped.
    pub fn from_edge_list(text: &str) -> Result<Self, NetError> {
        let mut edges = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let parse = |tok: Option<&str>| -> Result<NodeId, NetError> {
                tok.and_then(|t| t.parse().ok())
                    .ok_or_else(|| NetError::BadEdgeList {
                        line: lineno + 1,
                        msg: format!("expected two node ids, got {line:?}"),
                    })
            };
            let a = parse(it.next())?;
            let b = parse(it.next())?;
            if it.next().is_some() {
                return Err(NetError::BadEdgeList {
                    line: lineno + 1,
                    msg: format!("trailing tokens in {line:?}"),
                });
            }
            edges.push((a, b));
        }
        Self::from_edges(&edges)
    }

    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        for (i, list) in self.adj.iter().enumerate() {
            for &j in list {
                if (i as u32) < j {
                    out.push_str(&format!("{} {}\n", self.ids[i], self.ids[j as usize]));
                }
            }
        }
        out
    }

    /// Line network with nodes 0..=len, consecutive nodes joined.
    pub fn line(len: u32) -> Self {
        let edges: Vec<(NodeId, NodeId)> = (0..len).map(|i| (i, i + 1)).collect();
        Self::from_edges(&edges).expect("line network is connected")
    }

    /// Square grid of `n x n` intersections, adjacent intersections
    /// `edge_len` apart, with every edge expanded into unit segments.
    /// Node id encodes the lattice point: `y * width + x`.
    pub fn grid(n: u32, edge_len: u32) -> Self {
        assert!(n >= 2 && edge_len >= 1);
        let span = (n - 1) * edge_len;
        let width = span + 1;
        let on_line = |v: u32| v % edge_len == 0;
        let id = |x: u32, y: u32| y * width + x;
        let mut edges = Vec::new();
        for y in 0..=span {
            for x in 0..=span {
                if !on_line(x) && !on_line(y) {
                    continue;
                }
                if x < span && on_line(y) {
                    edges.push((id(x, y), id(x + 1, y)));
                }
                if y < span && on_line(x) {
                    edges.push((id(x, y), id(x, y + 1)));
                }
            }
        }
        Self::from_edges(&edges).expect("grid network is connected")
    }

    pub fn num_nodes(&self) -> usize {
        self.ids.len()
    }

    pub fn node_ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.index.contains_key(&id)
    }

    fn idx(&self, id: NodeId) -> Result<u32, NetError> {
        self.index.get(&id).copied().ok_or(NetError::UnknownNode(id))
    }

    /// BFS distance map from an internal index; `UNREACHED` marks no path.
    fn bfs(&self, src: u32) -> Vec<u32> {
        let mut dist = vec![UNREACHED; self.ids.len()];
        dist[src as usize] = 0;
        let mut queue = std::collections::VecDeque::from([src]);
        while let Some(v) = queue.pop_front() {
            let dv = dist[v as usize];
            for &w in &self.adj[v as usize] {
                if dist[w as usize] == UNREACHED {
                    dist[w as usize] = dv + 1;
                    queue.push_back(w);
                }
            }
        }
        dist
    }

    /// BFS distances from `a` to every node, aligned with `node_ids()`.
    pub fn distance_map(&self, a: NodeId) -> Result<Vec<u32>, NetError> {
        Ok(self.bfs(self.idx(a)?))
    }

    /// Length of a shortest path between two nodes, in unit edges.
    pub fn shortest_distance(&self, a: NodeId, b: NodeId) -> Result<u32, NetError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let d = self.bfs(ia)[ib as usize];
        if d == UNREACHED {
            return Err(NetError::NoPath(a, b));
        }
        Ok(d)
    }

    /// The canonical shortest path from `a` to `b`: at every step take the
    /// least-id neighbor that still lies on some shortest path. Deterministic
    /// across runs regardless of how many shortest paths exist.
    pub fn canonical_path(&self, a: NodeId, b: NodeId) -> Result<Vec<NodeId>, NetError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let to_b = self.bfs(ib);
        if to_b[ia as usize] == UNREACHED {
            return Err(NetError::NoPath(a, b));
        }
        let mut path = vec![a];
        let mut cur = ia;
        while cur != ib {
            let need = to_b[cur as usize] - 1;
            // Adjacency is sorted by id, so the first hit is the least id.
            let next = self.adj[cur as usize]
                .iter()
                .copied()
                .find(|&w| to_b[w as usize] == need)
                .expect("a shortest-path successor exists");
            path.push(self.ids[next as usize]);
            cur = next;
        }
        Ok(path)
    }
}

/// Willingness-to-pay model; determines the conversion probability
/// `lambda = 1 - F(p)` of a quoted price and its inverse `p(lambda)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WtpModel {
    /// WTP uniform on [lo, hi]: `p(lambda) = hi - (hi - lo) * lambda`.
    Uniform { lo: f64, hi: f64 },
}

impl Default for WtpModel {
    fn default() -> Self {
        WtpModel::Uniform { lo: 0.0, hi: 1.0 }
    }
}

impl WtpModel {
    pub fn validate(&self) -> Result<(), NetError> {
        match *self {
            WtpModel::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi && lo >= 0.0) {
                    return Err(NetError::BadWtp(lo, hi));
                }
            }
        }
        Ok(())
    }

    /// Price inducing conversion probability `lambda`; strictly decreasing.
    pub fn price(&self, lambda: f64) -> f64 {
        match *self {
            WtpModel::Uniform { lo, hi } => hi - (hi - lo) * lambda,
        }
    }

    /// Conversion probability `1 - F(p)` at quoted price `p`.
    pub fn conversion(&self, price: f64) -> f64 {
        match *self {
            WtpModel::Uniform { lo, hi } => ((hi - price) / (hi - lo)).clamp(0.0, 1.0),
        }
    }
}

/// Rider type: an origin-destination pair with a per-period arrival
/// probability and a willingness-to-pay model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiderType {
    pub origin: NodeId,
    pub dest: NodeId,
    /// Per-period arrival probability of this type.
    pub arrival_prob: f64,
    pub wtp: WtpModel,
}

impl RiderType {
    pub fn new(origin: NodeId, dest: NodeId, arrival_prob: f64) -> Self {
        RiderType {
            origin,
            dest,
            arrival_prob,
            wtp: WtpModel::default(),
        }
    }
}

/// Checks the type-set invariants against a network.
pub fn validate_types(net: &RoadNetwork, types: &[RiderType]) -> Result<(), NetError> {
    let mut mass = 0.0;
    for (i, t) in types.iter().enumerate() {
        if !net.contains(t.origin) {
            return Err(NetError::UnknownNode(t.origin));
        }
        if !net.contains(t.dest) {
            return Err(NetError::UnknownNode(t.dest));
        }
        if t.origin == t.dest {
            return Err(NetError::ZeroLengthTrip(i));
        }
        if !(0.0..=1.0).contains(&t.arrival_prob) || !t.arrival_prob.is_finite() {
            return Err(NetError::BadArrival(t.arrival_prob));
        }
        t.wtp.validate()?;
        mass += t.arrival_prob;
    }
    if mass > 1.0 + 1e-12 {
        return Err(NetError::ArrivalMass(mass));
    }
    Ok(())
}

/// State of a solo rider: type `i` with clock `u`. `u <= 0` means waiting at
/// the origin with `|u|` periods of window left; `u >= 1` means `u` distance
/// units traveled along the canonical path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SoloState {
    pub ty: usize,
    pub clock: i32,
}

/// Drop order of a shared trip after the pickup at the new rider's origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropOrder {
    /// Existing rider `j` is dropped first: `O_i -> D_j -> D_i`.
    ExistingFirst,
    /// New rider `i` is dropped first: `O_i -> D_i -> D_j`.
    NewFirst,
}

/// Precomputed geometry for a fixed set of rider types: BFS distance maps
/// from every origin and destination plus the canonical solo paths.
#[derive(Debug, Clone)]
pub struct TypeGeometry {
    trip_len: Vec<u32>,
    /// dist_from_origin[i][v] = d(O_i, node v) by internal index.
    dist_from_origin: Vec<Vec<u32>>,
    dist_from_dest: Vec<Vec<u32>>,
    /// canon[i][u] = internal index of position u on type i's canonical path.
    canon: Vec<Vec<u32>>,
    origin_idx: Vec<u32>,
    ids: Vec<NodeId>,
}

impl TypeGeometry {
    pub fn new(net: &RoadNetwork, types: &[RiderType]) -> Result<Self, NetError> {
        validate_types(net, types)?;
        let mut trip_len = Vec::with_capacity(types.len());
        let mut dist_from_origin = Vec::with_capacity(types.len());
        let mut dist_from_dest = Vec::with_capacity(types.len());
        let mut canon = Vec::with_capacity(types.len());
        let mut origin_idx = Vec::with_capacity(types.len());
        for t in types {
            let io = net.idx(t.origin)?;
            let id = net.idx(t.dest)?;
            let from_o = net.bfs(io);
            let from_d = net.bfs(id);
            let len = from_o[id as usize];
            debug_assert_ne!(len, UNREACHED);
            trip_len.push(len);
            let path = net.canonical_path(t.origin, t.dest)?;
            canon.push(
                path.iter()
                    .map(|&n| net.idx(n).expect("path node exists"))
                    .collect(),
            );
            dist_from_origin.push(from_o);
            dist_from_dest.push(from_d);
            origin_idx.push(io);
        }
        Ok(TypeGeometry {
            trip_len,
            dist_from_origin,
            dist_from_dest,
            canon,
            origin_idx,
            ids: net.node_ids().to_vec(),
        })
    }

    pub fn num_types(&self) -> usize {
        self.trip_len.len()
    }

    /// Solo trip length `l_i` in distance units (= periods).
    pub fn trip_len(&self, i: usize) -> u32 {
        self.trip_len[i]
    }

    /// Internal node index of a solo rider's position.
    fn position_idx(&self, j: usize, u: i32) -> u32 {
        if u <= 0 {
            self.origin_idx[j]
        } else {
            self.canon[j][u as usize]
        }
    }

    /// External node id of a solo rider's position.
    pub fn position(&self, j: usize, u: i32) -> NodeId {
        self.ids[self.position_idx(j, u) as usize]
    }

    fn d_from_origin(&self, i: usize, node: u32) -> u32 {
        self.dist_from_origin[i][node as usize]
    }

    fn d_from_dest(&self, i: usize, node: u32) -> u32 {
        self.dist_from_dest[i][node as usize]
    }

    /// d(O_i, D_j).
    pub fn origin_to_dest(&self, i: usize, j: usize) -> u32 {
        self.d_from_origin(i, self.canon[j][self.trip_len[j] as usize])
    }

    /// d(D_i, D_j).
    pub fn dest_to_dest(&self, i: usize, j: usize) -> u32 {
        self.d_from_dest(i, self.canon[j][self.trip_len[j] as usize])
    }

    /// Length of the shared tail from `O_i` onward and which rider is
    /// dropped first. Ties drop the existing rider `j` first (they departed
    /// earlier).
    pub fn shared_tail(&self, i: usize, j: usize) -> (u32, DropOrder) {
        let existing_first = self.origin_to_dest(i, j) + self.dest_to_dest(j, i);
        let new_first = self.trip_len[i] + self.dest_to_dest(i, j);
        if existing_first <= new_first {
            (existing_first, DropOrder::ExistingFirst)
        } else {
            (new_first, DropOrder::NewFirst)
        }
    }

    /// Shared trip length `l_{i,j}^u`: from the solo rider's position to
    /// `O_i`, then both drops in the cheaper order. Defined for every pair,
    /// compatible or not; constant over the waiting phase `u <= 0`.
    pub fn shared_trip_length(&self, i: usize, j: usize, u: i32) -> u32 {
        let pos = self.position_idx(j, u);
        self.d_from_origin(i, pos) + self.shared_tail(i, j).0
    }

    /// Whether a new (or waiting) rider of type `i` may join the solo rider
    /// `(j, u)`: the shared trip must beat the two solo trips combined, and
    /// the solo rider must not sit on any shortest path from `O_i`
    /// (exclusive) to `D_j`.
    pub fn is_compatible(&self, i: usize, j: usize, u: i32) -> bool {
        let shared = self.shared_trip_length(i, j, u) as i64;
        let remaining = self.trip_len[i] as i64 + self.trip_len[j] as i64 - u.max(0) as i64;
        if shared >= remaining {
            return false;
        }
        let pos = self.position_idx(j, u);
        if pos == self.origin_idx[i] {
            return true;
        }
        let on_shortest = self.d_from_origin(i, pos) + self.d_from_dest(j, pos)
            == self.origin_to_dest(i, j);
        !on_shortest
    }
}

/// Compatibility table over all solo states `(j, u)`, `-T <= u <= l_j - 1`,
/// with cached shared trip lengths.
///
/// Immutable after construction; safe to share across threads.
#[derive(Debug, Clone)]
pub struct CompatTable {
    geometry: TypeGeometry,
    window: u32,
    on_trip: bool,
    /// compatible[state][..] = sorted type ids i in N+_{j,u}.
    compatible: Vec<Vec<u32>>,
    /// shared[state][i] = l_{i,j}^u for every type i.
    shared: Vec<Vec<u32>>,
    state_off: Vec<usize>,
}

pub const DEFAULT_TABLE_CAP: usize = 32_000_000;

impl CompatTable {
    /// Builds the table for waiting window `T`. With `on_trip` false the
    /// on-trip sets `N+_{j,u}`, `u >= 1`, are emptied (pre-trip-only model);
    /// the cached shared lengths stay geometric either way.
    pub fn build(
        net: &RoadNetwork,
        types: &[RiderType],
        window: u32,
        on_trip: bool,
        entry_cap: usize,
    ) -> Result<Self, NetError> {
        let geometry = TypeGeometry::new(net, types)?;
        let n = types.len();
        let mut state_off = Vec::with_capacity(n + 1);
        let mut total = 0usize;
        state_off.push(0);
        for j in 0..n {
            total += window as usize + geometry.trip_len(j) as usize;
            state_off.push(total);
        }
        let needed = total.saturating_mul(n);
        if needed > entry_cap {
            return Err(NetError::TableTooLarge {
                needed,
                cap: entry_cap,
            });
        }
        let mut compatible = Vec::with_capacity(total);
        let mut shared = Vec::with_capacity(total);
        for j in 0..n {
            for u in -(window as i32)..geometry.trip_len(j) as i32 {
                let mut comp = Vec::new();
                let mut sl = Vec::with_capacity(n);
                for i in 0..n {
                    sl.push(geometry.shared_trip_length(i, j, u));
                    let allowed = u <= 0 || on_trip;
                    if allowed && geometry.is_compatible(i, j, u) {
                        comp.push(i as u32);
                    }
                }
                compatible.push(comp);
                shared.push(sl);
            }
        }
        Ok(CompatTable {
            geometry,
            window,
            on_trip,
            compatible,
            shared,
            state_off,
        })
    }

    pub fn geometry(&self) -> &TypeGeometry {
        &self.geometry
    }

    pub fn window(&self) -> u32 {
        self.window
    }

    pub fn on_trip_enabled(&self) -> bool {
        self.on_trip
    }

    pub fn num_types(&self) -> usize {
        self.geometry.num_types()
    }

    fn state_idx(&self, j: usize, u: i32) -> usize {
        let off = u + self.window as i32;
        debug_assert!(
            off >= 0 && (off as usize) < self.state_off[j + 1] - self.state_off[j],
            "state ({j}, {u}) out of range"
        );
        self.state_off[j] + off as usize
    }

    /// Clock range of solo states for type `j`: `-T ..= l_j - 1`.
    pub fn clock_range(&self, j: usize) -> std::ops::RangeInclusive<i32> {
        -(self.window as i32)..=(self.geometry.trip_len(j) as i32 - 1)
    }

    /// Sorted compatible new-rider types for state `(j, u)`.
    pub fn compatible_types(&self, j: usize, u: i32) -> &[u32] {
        &self.compatible[self.state_idx(j, u)]
    }

    pub fn is_compatible(&self, i: usize, j: usize, u: i32) -> bool {
        self.compatible[self.state_idx(j, u)].binary_search(&(i as u32)).is_ok()
    }

    /// Cached `l_{i,j}^u`.
    pub fn shared_trip_length(&self, i: usize, j: usize, u: i32) -> u32 {
        self.shared[self.state_idx(j, u)][i]
    }
}
