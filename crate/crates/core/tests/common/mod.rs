//! Checks shared between the integration tests and the acceptance harness.
#![allow(dead_code)]

pub mod grad;
pub mod oracle;
