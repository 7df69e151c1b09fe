//! Road network model: locations, shortest-path travel times, fares and the
//! k-means neighborhood function.
//!
//! Travel times are stored in minutes, as an all-pairs closure, so a trip
//! duration is a single lookup. The simulation clock runs in seconds; use
//! [`TravelTimeMatrix::seconds`] at call sites that mix the two.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::SimRng;
use crate::{Error, Result};

pub type LocationId = usize;

/// Default fare constant added to every trip.
pub const DEFAULT_DELTA: f64 = 5.0;
/// Default neighborhood count.
pub const DEFAULT_NEIGHBORHOODS: usize = 10;
/// Lloyd iteration cap.
pub const KMEANS_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub id: LocationId,
    pub lat: f64,
    pub lon: f64,
}

impl Location {
    pub fn sq_dist(&self, lat: f64, lon: f64) -> f64 {
        let (a, b) = (self.lat - lat, self.lon - lon);
        a * a + b * b
    }
}

/// Directed edge of the raw road network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: LocationId,
    pub dst: LocationId,
    pub minutes: f64,
}

/// Dense all-pairs travel times in minutes.
#[derive(Debug, Clone, PartialEq)]
pub struct TravelTimeMatrix {
    n: usize,
    minutes: Vec<f64>,
}

impl TravelTimeMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn minutes(&self, from: LocationId, to: LocationId) -> f64 {
        self.minutes[from * self.n + to]
    }

    #[inline]
    pub fn seconds(&self, from: LocationId, to: LocationId) -> f64 {
        self.minutes(from, to) * 60.0
    }

    /// Every off-diagonal entry as an edge; feeding these back into
    /// [`build_travel_closure`] reproduces the matrix.
    pub fn as_edges(&self) -> Vec<Edge> {
        let mut out = Vec::with_capacity(self.n * self.n);
        for src in 0..self.n {
            for dst in 0..self.n {
                if src != dst {
                    out.push(Edge {
                        src,
                        dst,
                        minutes: self.minutes(src, dst),
                    });
                }
            }
        }
        out
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.minutes.chunks(self.n.max(1)).take(self.n)
    }
}

/// All-pairs shortest travel times over `n` locations (Floyd-Warshall).
///
/// Edges are directed. Parallel edges keep the cheapest weight. Fails if any
/// location cannot reach any other.
pub fn build_travel_closure(n: usize, edges: &[Edge]) -> Result<TravelTimeMatrix> {
    let mut d = vec![f64::INFINITY; n * n];
    for i in 0..n {
        d[i * n + i] = 0.0;
    }
    for e in edges {
        if e.src >= n || e.dst >= n {
            return Err(Error::invalid(format!(
                "edge {}->{} references a location outside 0..{n}",
                e.src, e.dst
            )));
        }
        if !(e.minutes >= 0.0) || !e.minutes.is_finite() {
            return Err(Error::invalid(format!(
                "edge {}->{} has invalid travel time {}",
                e.src, e.dst, e.minutes
            )));
        }
        let slot = &mut d[e.src * n + e.dst];
        if e.minutes < *slot {
            *slot = e.minutes;
        }
    }
    for k in 0..n {
        for i in 0..n {
            let dik = d[i * n + k];
            if dik.is_infinite() {
                continue;
            }
            for j in 0..n {
                let via = dik + d[k * n + j];
                if via < d[i * n + j] {
                    d[i * n + j] = via;
                }
            }
        }
    }
    if let Some(pos) = d.iter().position(|x| x.is_infinite()) {
        return Err(Error::Disconnected {
            from: pos / n,
            to: pos % n,
        });
    }
    Ok(TravelTimeMatrix { n, minutes: d })
}

/// Neighborhood labels `1..=count`, one per location.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborhoodMap {
    labels: Vec<u32>,
    count: usize,
}

impl NeighborhoodMap {
    pub fn new(labels: Vec<u32>, count: usize) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|&&l| l == 0 || l as usize > count) {
            return Err(Error::invalid(format!(
                "neighborhood label {bad} outside 1..={count}"
            )));
        }
        Ok(Self { labels, count })
    }

    #[inline]
    pub fn label(&self, loc: LocationId) -> u32 {
        self.labels[loc]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn members(&self, label: u32) -> Vec<LocationId> {
        (0..self.labels.len())
            .filter(|&l| self.labels[l] == label)
            .collect()
    }

    /// Writes `location_id,neighborhood`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["location_id", "neighborhood"])
            .map_err(|e| csv_err(path, e))?;
        for (id, label) in self.labels.iter().enumerate() {
            w.write_record([id.to_string(), label.to_string()])
                .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Within-cluster squared error of a labeling (labels `1..=h`).
pub fn clustering_sse(locations: &[Location], labels: &[u32], h: usize) -> f64 {
    let centroids = centroids_of(locations, labels, h);
    locations
        .iter()
        .zip(labels)
        .map(|(l, &c)| {
            let (lat, lon) = centroids[c as usize - 1];
            l.sq_dist(lat, lon)
        })
        .sum()
}

fn centroids_of(locations: &[Location], labels: &[u32], h: usize) -> Vec<(f64, f64)> {
    let mut sums = vec![(0.0, 0.0, 0usize); h];
    for (l, &c) in locations.iter().zip(labels) {
        let s = &mut sums[c as usize - 1];
        s.0 += l.lat;
        s.1 += l.lon;
        s.2 += 1;
    }
    sums.into_iter()
        .map(|(a, b, n)| {
            if n == 0 {
                (f64::NAN, f64::NAN)
            } else {
                (a / n as f64, b / n as f64)
            }
        })
        .collect()
}

fn nearest_centroid(loc: &Location, centroids: &[(f64, f64)]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, &(lat, lon)) in centroids.iter().enumerate() {
        let d = loc.sq_dist(lat, lon);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Lloyd's k-means on (lat, lon) with farthest-point seeding.
///
/// Stops when no label changes or after [`KMEANS_MAX_ITERS`] rounds. A
/// cluster that empties out is refilled with the point farthest from its
/// centroid among clusters of size > 1. Output labels are renumbered `1..=h`
/// by ascending centroid latitude, then longitude.
pub fn kmeans_neighborhoods(
    locations: &[Location],
    h: usize,
    rng: &mut SimRng,
) -> Result<NeighborhoodMap> {
    if h == 0 {
        return Err(Error::invalid("neighborhood count must be at least 1"));
    }
    if h > locations.len() {
        return Err(Error::invalid(format!(
            "neighborhood count {h} exceeds location count {}",
            locations.len()
        )));
    }
    let n = locations.len();

    let first = rng.random_range(0..n);
    let mut centroids = vec![(locations[first].lat, locations[first].lon)];
    let mut nearest_d: Vec<f64> = locations
        .iter()
        .map(|l| l.sq_dist(centroids[0].0, centroids[0].1))
        .collect();
    while centroids.len() < h {
        // Farthest point; ties go to the lowest index.
        let mut pick = 0;
        for i in 1..n {
            if nearest_d[i] > nearest_d[pick] {
                pick = i;
            }
        }
        let c = (locations[pick].lat, locations[pick].lon);
        centroids.push(c);
        for (d, l) in nearest_d.iter_mut().zip(locations) {
            *d = d.min(l.sq_dist(c.0, c.1));
        }
    }

    let mut assign: Vec<usize> = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, l) in locations.iter().enumerate() {
            let c = nearest_centroid(l, &centroids);
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        changed |= refill_empty_clusters(locations, &mut assign, &centroids, h);
        let labels: Vec<u32> = assign.iter().map(|&c| c as u32 + 1).collect();
        centroids = centroids_of(locations, &labels, h);
        if !changed {
            break;
        }
    }

    let mut order: Vec<usize> = (0..h).collect();
    order.sort_by(|&a, &b| {
        centroids[a]
            .0
            .total_cmp(&centroids[b].0)
            .then(centroids[a].1.total_cmp(&centroids[b].1))
            .then(a.cmp(&b))
    });
    let mut relabel = vec![0u32; h];
    for (rank, &c) in order.iter().enumerate() {
        relabel[c] = rank as u32 + 1;
    }
    NeighborhoodMap::new(assign.iter().map(|&c| relabel[c]).collect(), h)
}

fn refill_empty_clusters(
    locations: &[Location],
    assign: &mut [usize],
    centroids: &[(f64, f64)],
    h: usize,
) -> bool {
    let mut changed = false;
    loop {
        let mut sizes = vec![0usize; h];
        for &c in assign.iter() {
            sizes[c] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return changed;
        };
        let mut pick = None;
        let mut pick_d = -1.0;
        for (i, l) in locations.iter().enumerate() {
            let c = assign[i];
            if sizes[c] < 2 {
                continue;
            }
            let d = l.sq_dist(centroids[c].0, centroids[c].1);
            if d > pick_d {
                pick_d = d;
                pick = Some(i);
            }
        }
        match pick {
            Some(i) => {
                assign[i] = empty;
                changed = true;
            }
            None => return changed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CityGraph {
    pub locations: Vec<Location>,
    pub travel: TravelTimeMatrix,
    /// Flat fare component added to every trip.
    pub delta: f64,
    pub neighborhoods: NeighborhoodMap,
}

impl CityGraph {
    pub fn new(
        locations: Vec<Location>,
        travel: TravelTimeMatrix,
        delta: f64,
        neighborhoods: NeighborhoodMap,
    ) -> Result<Self> {
        if travel.len() != locations.len() || neighborhoods.labels.len() != locations.len() {
            return Err(Error::invalid(
                "travel matrix, neighborhoods and locations disagree in size",
            ));
        }
        if !(delta >= 0.0) || !delta.is_finite() {
            return Err(Error::invalid(format!(
                "fare constant {delta} must be >= 0"
            )));
        }
        for (i, l) in locations.iter().enumerate() {
            if l.id != i {
                return Err(Error::invalid(format!(
                    "location ids must be dense: found {} at position {i}",
                    l.id
                )));
            }
            if !l.lat.is_finite() || !l.lon.is_finite() {
                return Err(Error::invalid(format!(
                    "location {i} has non-finite coordinates"
                )));
            }
        }
        Ok(Self {
            locations,
            travel,
            delta,
            neighborhoods,
        })
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    /// Trip price: travel minutes plus the flat fare constant.
    #[inline]
    pub fn fare(&self, origin: LocationId, destination: LocationId) -> f64 {
        self.travel.minutes(origin, destination) + self.delta
    }

    #[inline]
    pub fn neighborhood(&self, loc: LocationId) -> u32 {
        self.neighborhoods.label(loc)
    }

    /// Nearest location by squared coordinate distance; ties go to the lowest id.
    pub fn snap(&self, lat: f64, lon: f64) -> Option<LocationId> {
        let mut best: Option<(LocationId, f64)> = None;
        for l in &self.locations {
            let d = l.sq_dist(lat, lon);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((l.id, d));
            }
        }
        best.map(|(id, _)| id)
    }
}

/// Grid of `width x height` unit-spaced locations joined by 4-neighbor edges.
///
/// `h` is clamped to the location count.
pub fn gen_grid_city(
    width: usize,
    height: usize,
    edge_minutes: f64,
    delta: f64,
    h: usize,
    rng: &mut SimRng,
) -> Result<CityGraph> {
    if width == 0 || height == 0 {
        return Err(Error::invalid("grid dimensions must be at least 1"));
    }
    let (locations, edges) = grid_network(width, height, edge_minutes);
    let travel = build_travel_closure(locations.len(), &edges)?;
    let neighborhoods = kmeans_neighborhoods(&locations, h.min(locations.len()).max(1), rng)?;
    CityGraph::new(locations, travel, delta, neighborhoods)
}

/// Raw grid locations and bidirectional edges, before closure.
pub fn grid_network(width: usize, height: usize, edge_minutes: f64) -> (Vec<Location>, Vec<Edge>) {
    let id = |x: usize, y: usize| y * width + x;
    let mut locations = Vec::with_capacity(width * height);
    let mut edges = Vec::new();
    for y in 0..height {
        for x in 0..width {
            locations.push(Location {
                id: id(x, y),
                lat: y as f64,
                lon: x as f64,
            });
            let mut link = |a: usize, b: usize| {
                edges.push(Edge {
                    src: a,
                    dst: b,
                    minutes: edge_minutes,
                });
                edges.push(Edge {
                    src: b,
                    dst: a,
                    minutes: edge_minutes,
                });
            };
            if x + 1 < width {
                link(id(x, y), id(x + 1, y));
            }
            if y + 1 < height {
                link(id(x, y), id(x, y + 1));
            }
        }
    }
    (locations, edges)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    csv_err(path, e)
}

#[derive(Deserialize)]
struct LocationRow {
    id: usize,
    lat: f64,
    lon: f64,
}

/// Reads `id,lat,lon`. Rows may come in any order but ids must be dense.
pub fn read_locations_csv(path: &Path) -> Result<Vec<Location>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut rows = Vec::new();
    for rec in r.deserialize::<LocationRow>() {
        let row = rec.map_err(|e| csv_err(path, e))?;
        rows.push(Location {
            id: row.id,
            lat: row.lat,
            lon: row.lon,
        });
    }
    rows.sort_by_key(|l| l.id);
    for (i, l) in rows.iter().enumerate() {
        if l.id != i {
            return Err(Error::invalid(format!(
                "{}: location ids must be dense and unique, expected {i} found {}",
                path.display(),
                l.id
            )));
        }
    }
    Ok(rows)
}

#[derive(Deserialize)]
struct EdgeRow {
    src: usize,
    dst: usize,
    minutes: f64,
}

/// Reads `src,dst,minutes` (directed edges).
pub fn read_edges_csv(path: &Path) -> Result<Vec<Edge>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize::<EdgeRow>()
        .map(|rec| {
            rec.map(|e| Edge {
                src: e.src,
                dst: e.dst,
                minutes: e.minutes,
            })
            .map_err(|e| csv_err(path, e))
        })
        .collect()
}

pub fn write_locations_csv(locations: &[Location], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["id", "lat", "lon"])
        .map_err(|e| csv_err(path, e))?;
    for l in locations {
        w.write_record([l.id.to_string(), l.lat.to_string(), l.lon.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_edges_csv(edges: &[Edge], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["src", "dst", "minutes"])
        .map_err(|e| csv_err(path, e))?;
    for e in edges {
        w.write_record([e.src.to_string(), e.dst.to_string(), e.minutes.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
