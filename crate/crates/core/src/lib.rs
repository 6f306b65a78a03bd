//! Threshold-based detection of pea weevils in trap images.
//!
//! - [`imaging`]: grayscale, binary threshold, frame comparison, labeling.
//! - [`detector`]: per-frame counting state machine and event types.
//! - [`calibration`]: corpus statistics and threshold derivation.
//! - [`simulator`]: IR trigger model and synthetic trap scenes.
//! - [`store`]: filesystem persistence of images and events.

pub mod calibration;
pub mod detector;
pub mod imaging;
pub mod simulator;
pub mod store;

pub use detector::{Algorithm, DetectionConfig, DetectionEvent, DetectorState, EventLine};
pub use store::{FsStore, TrapStore};
