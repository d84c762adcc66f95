//! Command implementations and renderers behind the `scsd` binary.

pub mod commands;
pub mod viz;

/// Exit codes: 0 success, 2 config/argument error, 3 runtime abort.
pub fn exit_code(err: &scsd_core::Error) -> i32 {
    match err {
        scsd_core::Error::Config(_) | scsd_core::Error::InvalidArgument(_) => 2,
        _ => 3,
    }
}
