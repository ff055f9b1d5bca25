//! Synchronized multi-stream acquisition for human-robot collaboration
//! experiments.
//!
//! Producers declare streams and push sample chunks and event markers to a
//! [`hub::Hub`], which estimates each producer's clock offset and fans the
//! traffic out to subscribers such as the `.srec` [`recorder`]. The
//! [`epoch`] module corrects recorded timestamps onto the hub timeline and
//! cuts marker-aligned windows. [`twin`], [`sim`] and [`experiment`]
//! reproduce the two collaboration scenarios without hardware.

pub mod clock;
pub mod epoch;
pub mod experiment;
pub mod hub;
pub mod model;
pub mod recorder;
pub mod sim;
pub mod twin;
pub mod wire;
