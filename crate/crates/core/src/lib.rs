//! Deadlock-free error propagation for rank-based message passing.
//!
//! * [`transport`]: the non-blocking point-to-point substrate and a
//!   deterministic simulator with fault injection and schedule exploration.
//! * [`protocol`]: communicators, futures, error signalling and failed-rank
//!   resolution over an out-of-band error channel.
//! * [`ulfm`]: revoke, agree and shrink, and the communicator path that uses
//!   them instead of the error channel.
//! * [`harness`]: scenarios, verdicts, oracles and exploration drivers.

pub mod harness;
pub mod protocol;
pub mod transport;
pub mod ulfm;
