//! Runs a scenario against a hub over TCP, in real time.

use std::collections::BTreeMap;
use std::net::{SocketAddr, ToSocketAddrs};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde_json::Value;
use syncrec_core::experiment::{ExperimentError, ExperimentLink, SourceHandle};
use syncrec_core::model::{MarkerOrigin, MarkerSample, Sample, StreamInfo};
use syncrec_core::recorder::Recording;

use crate::client::{ClientError, ProducerClient, ShiftedClock};

fn link_err(e: ClientError) -> ExperimentError {
    ExperimentError::Link(e.to_string())
}

/// One producer connection per scenario source. Experiment time `t` is
/// wall time since the link was created; each source clock reads `t`
/// minus its configured offset.
pub struct RemoteLink {
    addr: SocketAddr,
    start: Instant,
    offsets: BTreeMap<String, f64>,
    sources: Vec<(ProducerClient, f64)>,
    metadata: BTreeMap<String, Value>,
}

impl RemoteLink {
    /// Fails when the hub cannot be reached, before anything is sent.
    pub fn connect(addr: impl ToSocketAddrs, offsets: BTreeMap<String, f64>) -> Result<Self, ExperimentError> {
        let addr = addr
            .to_socket_addrs()
            .map_err(|e| ExperimentError::Link(e.to_string()))?
            .next()
            .ok_or_else(|| ExperimentError::Link("no address".into()))?;
        // probe reachability up front
        std::net::TcpStream::connect_timeout(&addr, Duration::from_secs(3))
            .map_err(|e| ExperimentError::Link(format!("{addr}: {e}")))?;
        Ok(RemoteLink { addr, start: Instant::now(), offsets, sources: Vec::new(), metadata: BTreeMap::new() })
    }

    /// Run metadata; the wire protocol has no message for it, so callers
    /// store it next to the recording.
    pub fn metadata(&self) -> &BTreeMap<String, Value> {
        &self.metadata
    }
}

impl ExperimentLink for RemoteLink {
    fn open_source(&mut self, source_id: &str, streams: &[StreamInfo]) -> Result<SourceHandle, ExperimentError> {
        let offset = self.offsets.get(source_id).copied().unwrap_or(0.0);
        let clock = Arc::new(ShiftedClock::new(self.start, -offset));
        let client = ProducerClient::connect(self.addr, source_id, clock).map_err(link_err)?;
        let mut ids = Vec::new();
        for info in streams {
            ids.push(client.declare(info).map_err(link_err)?);
        }
        // the hub pings right after HELLO; one answered exchange means the
        // source is synchronized before it sends anything timestamped
        client.wait_for_pings(1, Duration::from_secs(5)).map_err(link_err)?;
        self.sources.push((client, offset));
        Ok(SourceHandle { index: self.sources.len() - 1, stream_ids: ids })
    }

    fn producer_time(&self, src: &SourceHandle, t: f64) -> f64 {
        t - self.sources[src.index].1
    }

    fn advance(&mut self, t: f64) -> Result<(), ExperimentError> {
        let target = self.start + Duration::from_secs_f64(t.max(0.0));
        let now = Instant::now();
        if target > now {
            thread::sleep(target - now);
        }
        Ok(())
    }

    fn push(&mut self, src: &SourceHandle, stream: usize, samples: Vec<Sample>) -> Result<(), ExperimentError> {
        let (client, _) = &self.sources[src.index];
        client.push(src.stream_ids[stream], samples).map_err(link_err)
    }

    fn marker(&mut self, src: &SourceHandle, label: &str, origin: MarkerOrigin, raw_t: f64) -> Result<(), ExperimentError> {
        let (client, _) = &self.sources[src.index];
        client.marker(&MarkerSample::new(raw_t, label, origin)).map_err(link_err)
    }

    fn set_metadata(&mut self, key: &str, value: Value) -> Result<(), ExperimentError> {
        self.metadata.insert(key.to_string(), value);
        Ok(())
    }

    fn finish(&mut self) -> Result<Option<Recording>, ExperimentError> {
        for (client, _) in self.sources.drain(..) {
            client.bye().map_err(link_err)?;
        }
        Ok(None)
    }
}
