//! Shared fixtures for the integration suites and the acceptance runner.
#![allow(dead_code)]

pub mod gradients;
pub mod oracles;
pub mod overfit;
