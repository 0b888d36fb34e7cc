//! Command-line and HTTP surface for the skillmatch retrieval engine:
//! synthetic corpus generation, two-tower training, batch encoding, index
//! construction, retrieval, evaluation, and serving — one binary, one code
//! path per operation.

pub mod commands;
pub mod files;
pub mod model;
pub mod server;
