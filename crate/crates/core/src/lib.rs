//! Monitoring and management for dynamically grouped server fleets.
//!
//! Agents stream heartbeats and metrics over UDP to an aggregator, which
//! keeps them in fixed-size round-robin archives. Hosts are grouped into
//! cloudlets by a registry that is consulted at query time, so regrouping
//! never requires touching an agent. Commands run across a cloudlet in
//! serial or parallel through the control engine, and everything is
//! reachable through an authenticated JSON API.

pub mod agent;
pub mod aggregator;
pub mod api;
pub mod clock;
pub mod conf;
pub mod control;
pub mod protocol;
pub mod registry;
pub mod rrd;
pub mod sim;
