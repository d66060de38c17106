//! Anomaly correction for event logs by bidirectional beam-search alignment
//! under two next-event sequence models.

pub mod corpus;
pub mod procgen;
pub mod neuralnet;
pub mod aligner;
pub mod evalkit;
