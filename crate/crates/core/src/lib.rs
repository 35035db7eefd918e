//! Hourly atmospheric forecasting with a learned velocity field integrated by
//! explicit Euler steps.

pub mod dataset;
pub mod grid;
pub mod tape;
pub mod transport;
pub mod conditioning;
pub mod net;
pub mod checkpoint;
pub mod ode;
pub mod train;
pub mod synth;
pub mod diagnostics;
pub mod cyclone;
pub mod forecast;
