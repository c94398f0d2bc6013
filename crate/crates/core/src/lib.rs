//! Desk-scale static binary rewriter.
//!
//! The pipeline is `lift` (image to IR), any number of transform plugins
//! (IR to IR), then `emit` (IR back to a bit-exact image). The interpreter in
//! [`isa`] is the functional-equivalence oracle for every step.

pub mod corpus;
pub mod emitter;
pub mod ir;
pub mod isa;
pub mod lifter;
pub mod rng;
pub mod transforms;
