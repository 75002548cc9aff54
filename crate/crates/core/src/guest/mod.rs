//! Everything that runs inside the VM: assembler, kernel ABI, image builder
//! and sample guests.

pub mod abi;
pub mod asm;
pub mod image;
pub mod samples;
pub mod symbols;

pub use asm::{assemble, assemble_with, disassemble, AsmError, AsmProgram};
pub use image::{build_guest_image, GuestImage, ImageError, TaskSource};
pub use samples::Sample;
pub use symbols::{SymbolError, SymbolTable};
