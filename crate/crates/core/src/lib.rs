//! Deterministic record/replay virtual machine.
//!
//! A small 32-bit CPU with console, timer and disk devices. Recording logs
//! every nondeterministic input against a modeled retired-instruction
//! counter; replay re-executes the run instruction for instruction and a
//! debugger can inspect, step and reverse-step guest tasks along the way.

pub mod counter;
pub mod debug;
pub mod devices;
pub mod engine;
pub mod guest;
pub mod isa;
pub mod par;
pub mod trace;
