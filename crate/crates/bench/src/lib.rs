//! Experiment harness around the `boxmatch` library: scene files, training
//! and evaluation runs, disturbance sweeps, ablations and reports.

pub mod cli;
pub mod grid;
pub mod report;
pub mod sweep;
pub mod table;

/// Invalid invocation detected after argument parsing (exit code 2).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Process exit code for a failed command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UsageError>().is_some() {
        2
    } else {
        1
    }
}
