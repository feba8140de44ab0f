//! Scheduler constants, deterministic DDIM stepping in both directions,
//! classifier-free guidance, and per-step null-text optimisation, all
//! written against the abstract noise predictor of [`DiffusionBackend`].
//!
//! [`DiffusionBackend`]: crate::backends::DiffusionBackend

mod archive;
mod ddim;
mod null_text;
mod schedule;

pub use archive::{load_inversion, save_inversion, InversionRef};
pub use ddim::{combine_guidance, ddim_invert, ddim_sample, ddim_step, guided_noise, Direction};
pub use null_text::{invert, optimize_null_text, InversionResult, NullTextConfig, NullTextStep};
pub use schedule::{make_schedule, DiffusionSchedule};
