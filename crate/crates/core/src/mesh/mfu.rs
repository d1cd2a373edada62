use crate::error::{Error, Result};
use crate::model::{flops_per_token, FlopMode, VitConfig};

/// Peak dense FLOP rate per TPUv4 core used for MFU figures. Configurable at
/// every call site; this is only the default.
pub const TPU_V4_PEAK_FLOPS: f64 = 2.75e14;

/// Model FLOPs utilization: training FLOPs per token times per-device token
/// throughput over the device peak rate.
pub fn mfu(cfg: &VitConfig, tokens_per_sec_per_device: f64, peak_flops_per_device: f64) -> Result<f64> {
    for (name, v) in [("throughput", tokens_per_sec_per_device), ("peak", peak_flops_per_device)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Domain(format!("{name} must be positive, got {v}")));
        }
    }
    Ok(flops_per_token(cfg, FlopMode::Train) * tokens_per_sec_per_device / peak_flops_per_device)
}
