//! Crash injection for tests: when `DATAPALLET_FAULT` names a point, the
//! process aborts there without unwinding or running destructors.

pub const ENV: &str = "DATAPALLET_FAULT";

pub const HUB_PUT_BEFORE_RENAME: &str = "hub-put-before-rename";
pub const HUB_PUT_BEFORE_INDEX: &str = "hub-put-before-index";

pub(crate) fn point(name: &str) {
    if std::env::var_os(ENV).is_some_and(|v| v == name) {
        std::process::abort();
    }
}
