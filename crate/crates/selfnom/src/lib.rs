//! Decentralized CSI-feedback reduction for MU-MIMO downlink.
//!
//! Each UE runs a small shared network over its local channel observation and
//! decides on its own whether to feed back CSI ("self-nomination"). The BS
//! schedules among the fed-back users and applies zero-forcing precoding.
//! Training enforces an average feedback budget through a primal-dual
//! Lagrangian, either by direct optimization with a straight-through
//! estimator or by a Bernoulli policy gradient.

pub mod channel;
pub mod cli;
pub mod micronet;
pub mod mimo;
pub mod pfsim;
pub mod policy;
pub mod scheduling;
pub mod training;
