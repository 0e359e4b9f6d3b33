//! LoRaWAN smart-campus telemetry toolkit.
//!
//! Parses the LoRa-parameter and sensor-reading datasets, finds missing
//! transmissions, fills gaps, forecasts readings with an LSTM and classifies
//! room occupancy with an MLP. [`simnet`] generates seeded synthetic campuses
//! with known ground truth for testing all of the above.

pub mod apportion;
pub mod gaps;
pub mod impute;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod neural;
pub mod pipeline;
pub mod simnet;
