//! Analytic cost accounting, effective-receptive-field maps, gradient
//! checking, and the brute-force IDConv oracle.

mod cost;
mod erf;
mod gradcheck;
mod oracle;

pub use cost::{count_flops, count_params, ste_flops, CostReport, CostRow};
pub use erf::{erf_map, seeded_images, ErfMap};
pub use gradcheck::{grad_check, standard_op_suite, CaseResult, GradCheckOptions, GradCheckSuite, SuiteCase};
pub use oracle::{idconv_oracle, idconv_oracle_suite, OracleReport};
