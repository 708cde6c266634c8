//! Simulation of a distributed fog/cloud microservice placement control plane.

pub mod app_model;
pub mod fabric;
pub mod placement;
pub mod workload;
pub mod routing;
pub mod stores;
pub mod control_engine;
pub mod scenario;
pub mod simulation;
pub mod api;
