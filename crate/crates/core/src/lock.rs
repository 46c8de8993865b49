//! Advisory project lock. Builds and source patches mutate the project tree,
//! so at most one holder per report directory may run them.

use std::fs::{self, File, OpenOptions};
use std::io;
use std::path::{Path, PathBuf};

use nix::fcntl::{Flock, FlockArg};

pub const LOCK_FILE: &str = ".cfi-heal.lock";

#[derive(Debug)]
pub struct ProjectLock {
    path: PathBuf,
    _flock: Flock<File>,
}

impl ProjectLock {
    /// Blocks until the lock is held.
    pub fn acquire(report_dir: &Path) -> io::Result<Self> {
        Self::lock(report_dir, FlockArg::LockExclusive)
    }

    /// Fails with `WouldBlock` instead of waiting.
    pub fn try_acquire(report_dir: &Path) -> io::Result<Self> {
        Self::lock(report_dir, FlockArg::LockExclusiveNonblock)
    }

    fn lock(report_dir: &Path, arg: FlockArg) -> io::Result<Self> {
        fs::create_dir_all(report_dir)?;
        let path = report_dir.join(LOCK_FILE);
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)?;
        let flock = Flock::lock(file, arg).map_err(|(_, errno)| io::Error::from(errno))?;
        Ok(ProjectLock {
            path,
            _flock: flock,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
