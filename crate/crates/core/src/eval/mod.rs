//! Evaluation: prompt suites, the oracle detector, MG scores and
//! attention-mask agreement.

pub mod detect;
pub mod miou;
pub mod report;
pub mod multigen;
