//! Checks shared by the suite tests and the acceptance report. Each target
//! uses a different subset.
#![allow(dead_code)]

pub mod gradcheck;
pub mod oracles;
