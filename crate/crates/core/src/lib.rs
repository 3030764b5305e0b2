pub mod analyze;
pub mod cluster;
pub mod engine;
pub mod model;
pub mod planner;
pub mod replay;
pub mod request;
pub mod trace;
pub mod transport;
