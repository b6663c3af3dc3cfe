//! Instance generators for the synthetic studies and trip-data ingestion
//! with two-step clustering (pickups to zones, then k-means on dropoffs).

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fluid::{FluidError, FluidInstance, ModelOptions};
use crate::graph::{NetError, NodeId, RiderType, RoadNetwork};

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Fluid(#[from] FluidError),
    #[error("short length {l} must be in 1..={max}")]
    BadShortLength { l: u32, max: u32 },
    #[error("requested {wanted} types but only {available} od pairs at distance {len}")]
    NotEnoughPairs {
        wanted: usize,
        available: usize,
        len: u32,
    },
    #[error("no trip records supplied")]
    NoTrips,
    #[error("trip record line {line}: {msg}")]
    BadTrip { line: usize, msg: String },
    #[error("zone file line {line}: {msg}")]
    BadZone { line: usize, msg: String },
    #[error("node coordinate file line {line}: {msg}")]
    BadCoord { line: usize, msg: String },
    #[error("window must be positive, got {0}")]
    BadWindow(f64),
    #[error("scaled arrival mass {0:.4} exceeds 1; lower the scale factor")]
    ScaleTooLarge(f64),
    #[error("all trips fell outside the zones or collapsed to zero-length types")]
    NothingIngested,
}

/// Two-type corridor: a long type spanning the whole line and a short type
/// covering its last `l` units, both ending at the same destination. The
/// heterogeneity label `delta = 1 - l / len` is recorded on the instance.
pub fn gen_example1(
    len: u32,
    l: u32,
    lambda_total: f64,
    cost_rate: f64,
    options: ModelOptions,
) -> Result<FluidInstance, InstanceError> {
    if l < 1 || l > len {
        return Err(InstanceError::BadShortLength { l, max: len });
    }
    let net = RoadNetwork::line(len);
    let each = lambda_total / 2.0;
    let types = vec![
        RiderType::new(0, len, each),
        RiderType::new(len - l, len, each),
    ];
    let mut inst = FluidInstance::new(net, types, cost_rate, options)?;
    inst.set_delta(1.0 - l as f64 / len as f64);
    Ok(inst)
}

/// `n` distinct rider types of equal trip length on the 10x10 grid with
/// 10-unit blocks, sampled uniformly without replacement from the ordered
/// node pairs at shortest distance exactly `trip_len`.
pub fn gen_example2(
    n: usize,
    trip_len: u32,
    lambda_total: f64,
    cost_rate: f64,
    seed: u64,
    options: ModelOptions,
) -> Result<FluidInstance, InstanceError> {
    let net = RoadNetwork::grid(10, 10);
    let pairs = equal_length_pairs(&net, trip_len);
    if pairs.len() < n {
        return Err(InstanceError::NotEnoughPairs {
            wanted: n,
            available: pairs.len(),
            len: trip_len,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<(NodeId, NodeId)> = pairs.choose_multiple(&mut rng, n).copied().collect();
    let each = lambda_total / n as f64;
    let types = chosen
        .into_iter()
        .map(|(o, d)| RiderType::new(o, d, each))
        .collect();
    Ok(FluidInstance::new(net, types, cost_rate, options)?)
}

/// All ordered node pairs at exactly the given shortest distance.
pub fn equal_length_pairs(net: &RoadNetwork, len: u32) -> Vec<(NodeId, NodeId)> {
    let ids = net.node_ids();
    let mut out = Vec::new();
    for &a in ids {
        let dist = net.distance_map(a).expect("known node");
        for (k, &b) in ids.iter().enumerate() {
            if a != b && dist[k] == len {
                out.push((a, b));
            }
        }
    }
    out
}

/// Parses the rider-type text format: "id origin dest lambda" per line.
pub fn parse_type_list(text: &str) -> Result<Vec<RiderType>, NetError> {
    let mut rows: Vec<(usize, RiderType)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let bad = |msg: &str| NetError::BadTypeList {
            line: lineno + 1,
            msg: msg.to_string(),
        };
        if toks.len() != 4 {
            return Err(bad("expected: id origin dest lambda"));
        }
        let id: usize = toks[0].parse().map_err(|_| bad("bad id"))?;
        let origin: NodeId = toks[1].parse().map_err(|_| bad("bad origin"))?;
        let dest: NodeId = toks[2].parse().map_err(|_| bad("bad dest"))?;
        let lambda: f64 = toks[3].parse().map_err(|_| bad("bad lambda"))?;
        rows.push((id, RiderType::new(origin, dest, lambda)));
    }
    rows.sort_by_key(|(id, _)| *id);
    Ok(rows.into_iter().map(|(_, t)| t).collect())
}

pub fn type_list_to_string(types: &[RiderType]) -> String {
    let mut out = String::new();
    for (i, t) in types.iter().enumerate() {
        out.push_str(&format!("{} {} {} {}\n", i, t.origin, t.dest, t.arrival_prob));
    }
    out
}

/// One recorded trip: pickup / dropoff coordinates and an ISO-8601 timestamp.
#[derive(Debug, Clone)]
pub struct TripRecord {
    pub pickup: (f64, f64),
    pub dropoff: (f64, f64),
    pub timestamp: chrono::NaiveDateTime,
}

/// Parses the trip CSV: header `pickup_x,pickup_y,dropoff_x,dropoff_y,timestamp`.
pub fn parse_trips(text: &str) -> Result<Vec<TripRecord>, InstanceError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with("pickup_x")) {
            continue;
        }
        let bad = |msg: String| InstanceError::BadTrip {
            line: lineno + 1,
            msg,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(format!("expected 5 fields, got {}", f.len())));
        }
        let num = |s: &str| -> Result<f64, InstanceError> {
            s.trim()
                .parse()
                .map_err(|_| bad(format!("bad number {s:?}")))
        };
        let ts = chrono::NaiveDateTime::parse_from_str(f[4].trim(), "%Y-%m-%dT%H:%M:%S")
            .or_else(|_| {
                chrono::DateTime::parse_from_rfc3339(f[4].trim()).map(|d| d.naive_utc())
            })
            .map_err(|_| bad(format!("bad ISO-8601 timestamp {:?}", f[4])))?;
        out.push(TripRecord {
            pickup: (num(f[0])?, num(f[1])?),
            dropoff: (num(f[2])?, num(f[3])?),
            timestamp: ts,
        });
    }
    Ok(out)
}

/// A pickup zone: an id and a simple polygon.
#[derive(Debug, Clone)]
pub struct Zone {
    pub id: String,
    pub polygon: Vec<(f64, f64)>,
}

/// Parses the zone file: per line, `zone_id x1 y1 x2 y2 x3 y3 ...`.
pub fn parse_zones(text: &str) -> Result<Vec<Zone>, InstanceError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: &str| InstanceError::BadZone {
            line: lineno + 1,
            msg: msg.to_string(),
        };
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 7 || toks.len() % 2 == 0 {
            return Err(bad("expected: id followed by at least 3 x y vertex pairs"));
        }
        let mut polygon = Vec::new();
        for pair in toks[1..].chunks(2) {
            let x: f64 = pair[0].parse().map_err(|_| bad("bad vertex"))?;
            let y: f64 = pair[1].parse().map_err(|_| bad("bad vertex"))?;
            polygon.push((x, y));
        }
        out.push(Zone {
            id: toks[0].to_string(),
            polygon,
        });
    }
    Ok(out)
}

/// Node coordinates for snapping cluster centroids onto the network:
/// per line, `node_id x y`.
pub fn parse_node_coords(text: &str) -> Result<Vec<(NodeId, f64, f64)>, InstanceError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: &str| InstanceError::BadCoord {
            line: lineno + 1,
            msg: msg.to_string(),
        };
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(bad("expected: node_id x y"));
        }
        out.push((
            toks[0].parse().map_err(|_| bad("bad node id"))?,
            toks[1].parse().map_err(|_| bad("bad x"))?,
            toks[2].parse().map_err(|_| bad("bad y"))?,
        ));
    }
    Ok(out)
}

/// Ray-casting point-in-polygon test; boundary points count as inside.
fn point_in_polygon(p: (f64, f64), poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let (x1, y1) = poly[i];
        let (x2, y2) = poly[(i + 1) % n];
        let cross = (x2 - x1) * (p.1 - y1) - (y2 - y1) * (p.0 - x1);
        if cross.abs() < 1e-12
            && p.0 >= x1.min(x2) - 1e-12
            && p.0 <= x1.max(x2) + 1e-12
            && p.1 >= y1.min(y2) - 1e-12
            && p.1 <= y1.max(y2) + 1e-12
        {
            return true;
        }
        if (y1 > p.1) != (y2 > p.1) {
            let xint = x1 + (p.1 - y1) / (y2 - y1) * (x2 - x1);
            if p.0 < xint {
                inside = !inside;
            }
        }
    }
    inside
}

/// Plain seeded Lloyd k-means over 2-d points. Returns (centroids, labels).
pub fn k_means(
    points: &[(f64, f64)],
    k: usize,
    seed: u64,
    iterations: usize,
) -> (Vec<(f64, f64)>, Vec<usize>) {
    assert!(k >= 1 && !points.is_empty());
    let k = k.min(points.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // k-means++ style seeding spreads the initial centroids out.
    let mut centroids: Vec<(f64, f64)> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..points.len())]);
    while centroids.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centroids
                    .iter()
                    .map(|c| (p.0 - c.0).powi(2) + (p.1 - c.1).powi(2))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            points[rng.gen_range(0..points.len())]
        } else {
            let mut draw = rng.gen::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if draw < w {
                    pick = i;
                    break;
                }
                draw -= w;
            }
            points[pick]
        };
        centroids.push(next);
    }
    let mut labels = vec![0usize; points.len()];
    for _ in 0..iterations {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = centroids
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    let da = (p.0 - a.0).powi(2) + (p.1 - a.1).powi(2);
                    let db = (p.0 - b.0).powi(2) + (p.1 - b.1).powi(2);
                    da.partial_cmp(&db).unwrap()
                })
                .map(|(idx, _)| idx)
                .unwrap();
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![(0.0, 0.0, 0usize); centroids.len()];
        for (i, p) in points.iter().enumerate() {
            let s = &mut sums[labels[i]];
            s.0 += p.0;
            s.1 += p.1;
            s.2 += 1;
        }
        for (c, s) in centroids.iter_mut().zip(&sums) {
            if s.2 > 0 {
                *c = (s.0 / s.2 as f64, s.1 / s.2 as f64);
            }
        }
        if !changed {
            break;
        }
    }
    (centroids, labels)
}

#[derive(Debug, Clone)]
pub struct IngestParams {
    pub clusters_per_zone: usize,
    /// Length of the observation window in periods; `Lambda_i` is the type's
    /// trip count divided by this.
    pub window_periods: f64,
    /// Multiplier applied to every arrival rate for desk-scale runs.
    pub scale: f64,
    pub seed: u64,
}

/// Output of ingestion: the estimated types plus per-zone diagnostics.
#[derive(Debug)]
pub struct IngestOutcome {
    pub types: Vec<RiderType>,
    pub warnings: Vec<String>,
}

/// Two-step clustering: assign pickups to zones, then k-means the dropoff
/// coordinates within each zone. Each (zone, cluster) becomes a rider type
/// whose origin / destination snap to the nearest network nodes and whose
/// arrival rate is its trip count over the window, scaled.
pub fn ingest_trips(
    records: &[TripRecord],
    zones: &[Zone],
    coords: &[(NodeId, f64, f64)],
    net: &RoadNetwork,
    params: &IngestParams,
) -> Result<IngestOutcome, InstanceError> {
    if records.is_empty() {
        return Err(InstanceError::NoTrips);
    }
    if !(params.window_periods > 0.0) {
        return Err(InstanceError::BadWindow(params.window_periods));
    }
    let nearest = |p: (f64, f64)| -> NodeId {
        coords
            .iter()
            .filter(|(id, _, _)| net.contains(*id))
            .min_by(|a, b| {
                let da = (a.1 - p.0).powi(2) + (a.2 - p.1).powi(2);
                let db = (b.1 - p.0).powi(2) + (b.2 - p.1).powi(2);
                da.partial_cmp(&db).unwrap()
            })
            .map(|(id, _, _)| *id)
            .expect("coordinate file has at least one known node")
    };

    let mut by_zone: Vec<Vec<&TripRecord>> = vec![Vec::new(); zones.len()];
    let mut unassigned = 0usize;
    for rec in records {
        match zones
            .iter()
            .position(|z| point_in_polygon(rec.pickup, &z.polygon))
        {
            Some(zi) => by_zone[zi].push(rec),
            None => unassigned += 1,
        }
    }
    let mut warnings = Vec::new();
    if unassigned > 0 {
        warnings.push(format!("{unassigned} trips outside every zone; skipped"));
    }

    let mut types: Vec<RiderType> = Vec::new();
    for (zi, zone_trips) in by_zone.iter().enumerate() {
        if zone_trips.is_empty() {
            warnings.push(format!("zone {} has no trips; skipped", zones[zi].id));
            continue;
        }
        let dropoffs: Vec<(f64, f64)> = zone_trips.iter().map(|r| r.dropoff).collect();
        let (centroids, labels) = k_means(
            &dropoffs,
            params.clusters_per_zone,
            params.seed ^ zi as u64,
            100,
        );
        for (ci, centroid) in centroids.iter().enumerate() {
            let members: Vec<&&TripRecord> = zone_trips
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == ci)
                .map(|(r, _)| r)
                .collect();
            if members.is_empty() {
                continue;
            }
            let mean_pickup = (
                members.iter().map(|r| r.pickup.0).sum::<f64>() / members.len() as f64,
                members.iter().map(|r| r.pickup.1).sum::<f64>() / members.len() as f64,
            );
            let origin = nearest(mean_pickup);
            let dest = nearest(*centroid);
            if origin == dest {
                warnings.push(format!(
                    "zone {} cluster {ci} collapsed to a zero-length trip; skipped",
                    zones[zi].id
                ));
                continue;
            }
            let rate = members.len() as f64 / params.window_periods * params.scale;
            types.push(RiderType::new(origin, dest, rate));
        }
    }
    if types.is_empty() {
        return Err(InstanceError::NothingIngested);
    }
    let mass: f64 = types.iter().map(|t| t.arrival_prob).sum();
    if mass > 1.0 {
        return Err(InstanceError::ScaleTooLarge(mass));
    }
    Ok(IngestOutcome { types, warnings })
}
