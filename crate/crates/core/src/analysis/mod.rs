//! Diagnostics: image–text consistency by generation position, smoothing
//! and trend estimation, the conditional-MI table check, and decoding
//! overhead.

mod consistency;
pub mod mi;
pub mod overhead;
mod savgol;

pub use consistency::{
    consistency_curve, decay_slope, token_stats, weighted_slope, ConsistencyCurve, CurvePoint, DecaySlope, TokenRepr,
};
pub use mi::{mi_check, Joint, MICheckReport};
pub use overhead::{measure_overhead, BenchArm, BenchOptions, OverheadReport, Workload};
pub use savgol::{fit_window, savgol};
