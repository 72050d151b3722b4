use std::sync::{Arc, Condvar, Mutex, RwLock};

use crate::scene::GaussianMap;

/// An immutable published map with its checksum taken at publication.
#[derive(Debug)]
pub struct Published {
    pub map: GaussianMap,
    pub checksum: u64,
    pub version: u64,
}

/// Atomically swappable map snapshot shared by the tracking and mapping
/// threads. Readers hold an `Arc` to whatever was current when they loaded.
#[derive(Debug)]
pub struct MapSnapshot {
    current: RwLock<Arc<Published>>,
    version: Mutex<u64>,
    changed: Condvar,
}

impl MapSnapshot {
    pub fn new(map: GaussianMap) -> Self {
        let checksum = map.checksum();
        Self {
            current: RwLock::new(Arc::new(Published {
                map,
                checksum,
                version: 0,
            })),
            version: Mutex::new(0),
            changed: Condvar::new(),
        }
    }

    pub fn load(&self) -> Arc<Published> {
        Arc::clone(&self.current.read().expect("snapshot lock poisoned"))
    }

    /// Replaces the current snapshot and returns its version.
    pub fn publish(&self, map: GaussianMap) -> u64 {
        let checksum = map.checksum();
        let mut v = self.version.lock().expect("snapshot lock poisoned");
        *v += 1;
        let next = Arc::new(Published {
            map,
            checksum,
            version: *v,
        });
        *self.current.write().expect("snapshot lock poisoned") = next;
        self.changed.notify_all();
        *v
    }

    pub fn version(&self) -> u64 {
        *self.version.lock().expect("snapshot lock poisoned")
    }

    /// Blocks until at least `version` has been published.
    pub fn wait_for(&self, version: u64) {
        let mut v = self.version.lock().expect("snapshot lock poisoned");
        while *v < version {
            v = self.changed.wait(v).expect("snapshot lock poisoned");
        }
    }
}
