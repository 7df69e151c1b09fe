//! Request stream: trip CSV ingestion, synthetic demand and epoch batching.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::city::{csv_error, CityGraph, LocationId};
use crate::rng::SimRng;
use crate::{Error, Result};

pub type RequestId = u64;

/// Default batching window in seconds.
pub const DEFAULT_EPOCH_SECONDS: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RideRequest {
    pub id: RequestId,
    pub origin: LocationId,
    pub destination: LocationId,
    /// Seconds since simulation start.
    pub created_at: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RequestBatch {
    pub epoch: usize,
    pub requests: Vec<RideRequest>,
}

/// Ingested trips plus the count of rows discarded because pickup and
/// dropoff snapped to the same location.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IngestedTrips {
    pub requests: Vec<RideRequest>,
    pub dropped: usize,
}

#[derive(Debug, Deserialize)]
struct TripRow {
    pickup_lat: f64,
    pickup_lon: f64,
    dropoff_lat: f64,
    dropoff_lon: f64,
    epoch_seconds: f64,
}

/// Reads a trip CSV (`pickup_lat,pickup_lon,dropoff_lat,dropoff_lon,epoch_seconds`),
/// snaps coordinates to the nearest location and returns requests sorted by
/// creation time. Ids are assigned `0..` in that order.
pub fn ingest_trips(path: &Path, graph: &CityGraph) -> Result<IngestedTrips> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = IngestedTrips::default();
    for rec in reader.deserialize::<TripRow>() {
        let row = rec.map_err(|e| csv_error(path, e))?;
        if !(row.epoch_seconds >= 0.0) || !row.epoch_seconds.is_finite() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: out.requests.len() as u64 + out.dropped as u64 + 2,
                message: format!("timestamp {} must be finite and >= 0", row.epoch_seconds),
            });
        }
        let (Some(origin), Some(destination)) = (
            graph.snap(row.pickup_lat, row.pickup_lon),
            graph.snap(row.dropoff_lat, row.dropoff_lon),
        ) else {
            return Err(Error::invalid("cannot snap trips onto an empty city"));
        };
        if origin == destination {
            out.dropped += 1;
            continue;
        }
        out.requests.push(RideRequest {
            id: 0,
            origin,
            destination,
            created_at: row.epoch_seconds,
        });
    }
    out.requests
        .sort_by(|a, b| a.created_at.total_cmp(&b.created_at));
    for (i, r) in out.requests.iter_mut().enumerate() {
        r.id = i as RequestId;
    }
    Ok(out)
}

/// Writes requests in the trip CSV format using location coordinates, so
/// that [`ingest_trips`] reads them back unchanged.
pub fn write_trips_csv(requests: &[RideRequest], graph: &CityGraph, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record([
        "pickup_lat",
        "pickup_lon",
        "dropoff_lat",
        "dropoff_lon",
        "epoch_seconds",
    ])
    .map_err(|e| csv_error(path, e))?;
    for r in requests {
        let (g, e) = (&graph.locations[r.origin], &graph.locations[r.destination]);
        w.write_record([
            g.lat.to_string(),
            g.lon.to_string(),
            e.lat.to_string(),
            e.lon.to_string(),
            r.created_at.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Splits a time-sorted stream into half-open windows
/// `[k * epoch_len, (k + 1) * epoch_len)`, emitting empty batches for quiet
/// epochs up to the last request.
pub fn batch_requests(stream: &[RideRequest], epoch_len: f64) -> Vec<RequestBatch> {
    let Some(last) = stream.last() else {
        return Vec::new();
    };
    let epoch_of = |t: f64| (t / epoch_len).floor() as usize;
    let mut batches: Vec<RequestBatch> = (0..=epoch_of(last.created_at))
        .map(|epoch| RequestBatch {
            epoch,
            requests: Vec::new(),
        })
        .collect();
    for r in stream {
        batches[epoch_of(r.created_at)].requests.push(*r);
    }
    batches
}

/// Like [`batch_requests`] but always emits exactly `num_epochs` batches.
/// Requests beyond the horizon are discarded.
pub fn batch_requests_padded(
    stream: &[RideRequest],
    epoch_len: f64,
    num_epochs: usize,
) -> Vec<RequestBatch> {
    let mut batches = batch_requests(stream, epoch_len);
    batches.truncate(num_epochs);
    while batches.len() < num_epochs {
        batches.push(RequestBatch {
            epoch: batches.len(),
            requests: Vec::new(),
        });
    }
    batches
}

/// Parameters for synthetic demand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthDemand {
    pub rate_per_epoch: f64,
    pub num_epochs: usize,
    /// Probability an origin is drawn from the hot neighborhood.
    pub hotspot_skew: f64,
    pub epoch_len: f64,
}

/// Poisson arrivals per epoch with a hotspot mixture over origins.
///
/// The hot neighborhood is drawn from `rng` first. Destinations are uniform
/// over the other locations.
pub fn synth_demand(
    graph: &CityGraph,
    params: &SynthDemand,
    rng: &mut SimRng,
) -> Result<Vec<RideRequest>> {
    if !(params.rate_per_epoch >= 0.0) || !params.rate_per_epoch.is_finite() {
        return Err(Error::invalid(format!(
            "demand rate {} must be >= 0",
            params.rate_per_epoch
        )));
    }
    if !(0.0..=1.0).contains(&params.hotspot_skew) {
        return Err(Error::invalid(format!(
            "hotspot skew {} must lie in [0, 1]",
            params.hotspot_skew
        )));
    }
    let n = graph.len();
    let hot_label = rng.random_range(1..=graph.neighborhoods.count() as u32);
    let hot = graph.neighborhoods.members(hot_label);
    let mut out = Vec::new();
    if n < 2 || params.rate_per_epoch == 0.0 {
        return Ok(out);
    }
    let poisson = Poisson::new(params.rate_per_epoch).map_err(|e| Error::invalid(e.to_string()))?;
    for epoch in 0..params.num_epochs {
        let count = poisson.sample(rng) as usize;
        let start = epoch as f64 * params.epoch_len;
        let mut times: Vec<f64> = (0..count)
            .map(|_| (start + rng.random_range(0.0..params.epoch_len)).floor())
            .collect();
        times.sort_by(f64::total_cmp);
        for t in times {
            let origin = if !hot.is_empty() && rng.random_bool(params.hotspot_skew) {
                hot[rng.random_range(0..hot.len())]
            } else {
                rng.random_range(0..n)
            };
            let mut destination = rng.random_range(0..n - 1);
            if destination >= origin {
                destination += 1;
            }
            out.push(RideRequest {
                id: out.len() as RequestId,
                origin,
                destination,
                created_at: t,
            });
        }
    }
    Ok(out)
}

/// Every request ever batched (the set W) with monotone serviced flags.
#[derive(Debug, Clone, Default)]
pub struct RequestLog {
    requests: Vec<RideRequest>,
    serviced: Vec<bool>,
    index: HashMap<RequestId, usize>,
}

impl RequestLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn extend(&mut self, batch: &[RideRequest]) -> Result<()> {
        for r in batch {
            if self.index.contains_key(&r.id) {
                return Err(Error::invalid(format!("request {} logged twice", r.id)));
            }
            self.index.insert(r.id, self.requests.len());
            self.requests.push(*r);
            self.serviced.push(false);
        }
        Ok(())
    }

    pub fn mark_serviced(&mut self, id: RequestId) -> Result<()> {
        let &i = self
            .index
            .get(&id)
            .ok_or_else(|| Error::invalid(format!("request {id} is not in the log")))?;
        self.serviced[i] = true;
        Ok(())
    }

    pub fn is_serviced(&self, id: RequestId) -> bool {
        self.index.get(&id).is_some_and(|&i| self.serviced[i])
    }

    pub fn get(&self, id: RequestId) -> Option<&RideRequest> {
        self.index.get(&id).map(|&i| &self.requests[i])
    }

    pub fn requests(&self) -> &[RideRequest] {
        &self.requests
    }

    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    pub fn serviced_count(&self) -> usize {
        self.serviced.iter().filter(|&&s| s).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&RideRequest, bool)> {
        self.requests.iter().zip(self.serviced.iter().copied())
    }
}
