use std::collections::BTreeMap;

use thiserror::Error;

use crate::devices::SECTOR_SIZE;

use super::abi;
use super::asm::{assemble_with, AsmError, AsmProgram, ListingLine};
use super::symbols::SymbolTable;

/// A task program to place in the next free region.
#[derive(Debug, Clone, Copy)]
pub struct TaskSource<'a> {
    /// Prefix for the task's symbols in the merged table.
    pub name: &'a str,
    pub source: &'a str,
}

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{unit}: {source}")]
    Asm {
        unit: String,
        #[source]
        source: AsmError,
    },
    #[error("{0} tasks given; at most {max} fit", max = abi::MAX_TASKS)]
    TooManyTasks(usize),
    #[error("{unit} overlaps {what}")]
    Overlap { unit: String, what: String },
    #[error("kernel has no `trap` label at the interrupt vector {:#x}", abi::IVEC_ADDR)]
    NoVector,
    #[error("duplicate task name `{0}`")]
    DuplicateName(String),
}

/// A bootable guest: kernel memory image plus the disk it loads tasks from.
#[derive(Debug, Clone)]
pub struct GuestImage {
    pub kernel: Vec<u8>,
    pub disk: Vec<u8>,
    pub kernel_program: AsmProgram,
    pub tasks: Vec<(String, AsmProgram)>,
}

impl GuestImage {
    /// Kernel symbols as-is, task symbols as `task.label`.
    pub fn symbols(&self) -> BTreeMap<String, u32> {
        let mut out = self.kernel_program.symbols.clone();
        for (name, p) in &self.tasks {
            for (k, v) in &p.symbols {
                out.insert(format!("{name}.{k}"), *v);
            }
        }
        out
    }

    /// Code and data labels only, named as in [`GuestImage::symbols`].
    pub fn symbol_table(&self) -> SymbolTable {
        let units = std::iter::once((None, &self.kernel_program)).chain(self.tasks.iter().map(|(n, p)| (Some(n), p)));
        let mut t = SymbolTable::new();
        for (unit, p) in units {
            for l in &p.labels {
                let name = match unit {
                    Some(u) => format!("{u}.{l}"),
                    None => l.clone(),
                };
                t.insert(p.symbols[l], name);
            }
        }
        t
    }

    /// Every emitted source line, tagged with its unit, sorted by address.
    pub fn listing(&self) -> Vec<(String, ListingLine)> {
        let mut out: Vec<(String, ListingLine)> = self
            .kernel_program
            .listing
            .iter()
            .map(|l| ("kernel".to_string(), l.clone()))
            .collect();
        for (name, p) in &self.tasks {
            out.extend(p.listing.iter().map(|l| (name.clone(), l.clone())));
        }
        out.sort_by_key(|(_, l)| l.addr);
        out
    }
}

/// Assemble the kernel at address 0 and each task at its fixed region, and
/// lay the tasks out on a disk the kernel's boot loader understands.
///
/// Disk sector 0: magic, task count, then one `(first sector, sector count)`
/// pair per task. Task images follow, each starting on a sector boundary.
pub fn build_guest_image(kernel_src: &str, tasks: &[TaskSource<'_>]) -> Result<GuestImage, ImageError> {
    if tasks.len() > abi::MAX_TASKS as usize {
        return Err(ImageError::TooManyTasks(tasks.len()));
    }
    let predefined = abi::symbols();
    let kernel_program = assemble_with(kernel_src, 0, &predefined).map_err(|source| ImageError::Asm {
        unit: "kernel".into(),
        source,
    })?;
    if kernel_program.end() > abi::KERNEL_LIMIT {
        return Err(ImageError::Overlap {
            unit: "kernel".into(),
            what: format!("the task table at {:#x}", abi::KERNEL_LIMIT),
        });
    }
    if kernel_program.symbols.get("trap") != Some(&abi::IVEC_ADDR) {
        return Err(ImageError::NoVector);
    }

    let mut programs = Vec::with_capacity(tasks.len());
    for (i, t) in tasks.iter().enumerate() {
        if programs.iter().any(|(n, _): &(String, AsmProgram)| n == t.name) {
            return Err(ImageError::DuplicateName(t.name.to_string()));
        }
        let base = abi::task_base(i as u32);
        let p = assemble_with(t.source, base, &predefined).map_err(|source| ImageError::Asm {
            unit: t.name.to_string(),
            source,
        })?;
        let limit = base + abi::TASK_STRIDE - abi::STACK_RESERVE;
        if p.end() > limit {
            return Err(ImageError::Overlap {
                unit: t.name.to_string(),
                what: format!("its stack reserve at {limit:#x}"),
            });
        }
        programs.push((t.name.to_string(), p));
    }

    let mut disk = vec![0u8; SECTOR_SIZE];
    let mut header = vec![abi::DISK_MAGIC, tasks.len() as u32];
    for (_, p) in &programs {
        let first = (disk.len() / SECTOR_SIZE) as u32;
        // The image is loaded at the region base, so leading `.org` padding
        // is part of it.
        let bytes = &p.image;
        let count = bytes.len().div_ceil(SECTOR_SIZE) as u32;
        disk.extend_from_slice(bytes);
        disk.resize((first + count) as usize * SECTOR_SIZE, 0);
        header.extend([first, count]);
    }
    // One spare sector for guests that write.
    disk.resize(disk.len() + SECTOR_SIZE, 0);
    for (i, w) in header.iter().enumerate() {
        disk[i * 4..i * 4 + 4].copy_from_slice(&w.to_le_bytes());
    }

    Ok(GuestImage {
        kernel: kernel_program.image.clone(),
        disk,
        kernel_program,
        tasks: programs,
    })
}
