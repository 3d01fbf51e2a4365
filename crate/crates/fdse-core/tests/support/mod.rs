//! Oracle harnesses shared between the focused suites and the acceptance
//! gate. Each test binary compiles its own copy, so unused items in a given
//! binary are expected.
#![allow(dead_code)]

pub mod gradcheck;
pub mod minnorm;
