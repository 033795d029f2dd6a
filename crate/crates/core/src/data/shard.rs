use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

/// A client's view of its own task data.
///
/// The orchestrator revokes every shard when a task completes; afterwards the
/// indices can no longer be read through any clone of the handle.
#[derive(Debug, Clone)]
pub struct ClientShard {
    client: usize,
    task: usize,
    indices: Arc<Vec<usize>>,
    revoked: Arc<AtomicBool>,
}

impl ClientShard {
    pub fn new(client: usize, task: usize, indices: Vec<usize>) -> Self {
        Self {
            client,
            task,
            indices: Arc::new(indices),
            revoked: Arc::new(AtomicBool::new(false)),
        }
    }

    pub fn client(&self) -> usize {
        self.client
    }

    pub fn task(&self) -> usize {
        self.task
    }

    pub fn indices(&self) -> Result<&[usize]> {
        if self.revoked.load(Ordering::Acquire) {
            return Err(Error::Revoked);
        }
        Ok(&self.indices)
    }

    /// Number of samples; readable after revocation since it leaks no data.
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn revoke(&self) {
        self.revoked.store(true, Ordering::Release);
    }

    pub fn is_revoked(&self) -> bool {
        self.revoked.load(Ordering::Acquire)
    }
}
