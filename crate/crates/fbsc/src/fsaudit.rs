//! Optional audit trail of files opened for reading.
//!
//! The training command must never read label files (training data carries
//! no labels). Tests enable the audit, run a command, and inspect the list
//! of opened paths. All readers in this crate report through [`record`].

use std::path::{Path, PathBuf};
use std::sync::Mutex;

static AUDIT: Mutex<Option<Vec<PathBuf>>> = Mutex::new(None);

/// Start recording opened paths (clears any previous recording).
pub fn enable() {
    *AUDIT.lock().unwrap() = Some(Vec::new());
}

/// Stop recording and return the paths opened since [`enable`].
pub fn take() -> Vec<PathBuf> {
    AUDIT.lock().unwrap().take().unwrap_or_default()
}

/// Report a file open. No-op unless auditing is enabled.
pub fn record(path: &Path) {
    if let Some(log) = AUDIT.lock().unwrap().as_mut() {
        log.push(path.to_path_buf());
    }
}
