//! Provenance for transactional histories under read-committed snapshot
//! isolation: an annotation algebra with version annotations, an executor for
//! timestamped histories, a compiler from past transactions to reenactment
//! queries, and a differential-testing harness.

pub mod auditlog;
pub mod history;
pub mod mvsemiring;
pub mod provenance;
pub mod reenact;
pub mod relalg;
pub mod verify;
