//! Deterministic simulator of a `t × k` device mesh: ring collectives on
//! either axis, per-device event timelines, and the overlap cost model.
//!
//! Time is analytic: a transfer of `n` floats over one directed neighbor link
//! takes `n / link_bandwidth`, a computation of `f` FLOPs takes
//! `f / device_flops`.

pub mod collective;
pub mod mfu;
pub mod overlap;
pub mod timeline;

pub use collective::{ring_all_gather, ring_reduce_scatter, CollectiveReport, Ring};
pub use mfu::{mfu, TPU_V4_PEAK_FLOPS};
pub use overlap::{non_overlapped_makespan, overlapped_closed_form, schedule_overlapped};
pub use timeline::{DeviceId, DeviceTimeline, Event, EventKind, Timeline};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MeshConfig {
    /// Data-parallel extent.
    pub t: usize,
    /// Model-parallel extent.
    pub k: usize,
    pub bytes_per_float: usize,
    /// Floats per time unit on each directed neighbor link.
    pub link_bandwidth: f64,
    /// FLOPs per time unit per device.
    pub device_flops: f64,
}

impl Default for MeshConfig {
    fn default() -> Self {
        MeshConfig { t: 1, k: 1, bytes_per_float: 4, link_bandwidth: 1.0, device_flops: 1.0 }
    }
}

impl MeshConfig {
    pub fn new(t: usize, k: usize) -> Self {
        MeshConfig { t, k, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.k == 0 {
            return Err(Error::Config(format!("mesh extents must be ≥ 1, got {}×{}", self.t, self.k)));
        }
        if self.bytes_per_float == 0 {
            return Err(Error::Config("bytes_per_float must be positive".into()));
        }
        if !(self.link_bandwidth > 0.0 && self.link_bandwidth.is_finite()) {
            return Err(Error::Config(format!("invalid link_bandwidth {}", self.link_bandwidth)));
        }
        if !(self.device_flops > 0.0 && self.device_flops.is_finite()) {
            return Err(Error::Config(format!("invalid device_flops {}", self.device_flops)));
        }
        Ok(())
    }

    pub fn comm_time(&self, floats: f64) -> f64 {
        floats / self.link_bandwidth
    }

    pub fn compute_time(&self, flops: f64) -> f64 {
        flops / self.device_flops
    }

    /// Ring over the model axis within data-parallel row `row`.
    pub fn model_ring(&self, row: usize) -> Ring {
        Ring::new((0..self.k).map(|c| DeviceId { row, col: c }).collect())
    }

    /// Ring over the data axis within model column `col`.
    pub fn data_ring(&self, col: usize) -> Ring {
        Ring::new((0..self.t).map(|r| DeviceId { row: r, col }).collect())
    }
}
