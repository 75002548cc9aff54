//! Sample guests and the console input that drives them.

use crate::devices::{StimulusEntry, StimulusScript};

use super::image::{build_guest_image, GuestImage, ImageError, TaskSource};

pub const KERNEL_SRC: &str = include_str!("../../guest/kernel.s");
pub const ECHO_SRC: &str = include_str!("../../guest/echo.s");
pub const COMPUTE_SRC: &str = include_str!("../../guest/compute.s");
pub const RACEY_SRC: &str = include_str!("../../guest/racey.s");
pub const TICKER_SRC: &str = include_str!("../../guest/ticker.s");
/// Shipped copy of [`super::abi::abi_inc`].
pub const ABI_INC: &str = include_str!("../../guest/abi.inc");

/// End-of-transmission: makes the echo task exit.
pub const EOT: u8 = 0x04;

const TEXT: &[u8] = b"the quick brown fox jumps over the lazy dog; 0123456789 ok\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sample {
    /// echo + compute.
    Echo,
    /// Two racey tasks and an echo task.
    Racey,
    /// ticker + compute + echo; runs past 10⁷ instructions.
    Ticker,
}

impl Sample {
    pub const ALL: [Sample; 3] = [Sample::Echo, Sample::Racey, Sample::Ticker];

    pub fn name(self) -> &'static str {
        match self {
            Sample::Echo => "echo",
            Sample::Racey => "racey",
            Sample::Ticker => "ticker",
        }
    }

    pub fn from_name(s: &str) -> Option<Sample> {
        Sample::ALL.into_iter().find(|x| x.name() == s)
    }

    pub fn tasks(self) -> Vec<TaskSource<'static>> {
        let t = |name, source| TaskSource { name, source };
        match self {
            Sample::Echo => vec![t("echo", ECHO_SRC), t("compute", COMPUTE_SRC)],
            Sample::Racey => vec![t("racey0", RACEY_SRC), t("racey1", RACEY_SRC), t("echo", ECHO_SRC)],
            Sample::Ticker => vec![t("ticker", TICKER_SRC), t("compute", COMPUTE_SRC), t("echo", ECHO_SRC)],
        }
    }

    pub fn build(self) -> Result<GuestImage, ImageError> {
        build_guest_image(KERNEL_SRC, &self.tasks())
    }

    /// Console input shared by all samples: one byte every 5 ms from
    /// `start_ms`, then EOT.
    pub fn stimulus(self, start_ms: u64) -> StimulusScript {
        typed(TEXT, start_ms, 5)
    }
}

/// One entry per byte of `text` plus a final EOT, `every_ms` apart.
pub fn typed(text: &[u8], start_ms: u64, every_ms: u64) -> StimulusScript {
    let entries = text
        .iter()
        .copied()
        .chain([EOT])
        .enumerate()
        .map(|(i, b)| StimulusEntry {
            at_ms: start_ms + i as u64 * every_ms,
            payload: vec![b],
        })
        .collect();
    StimulusScript { entries }
}
