//! Storage-write audit. Every file the library writes goes through
//! [`IoAudit::create`], which records what was written and when.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum WriteKind {
    Parameters,
    Metrics,
    Dataset,
    Plot,
    Report,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Setup,
    Training,
    Final,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WriteRecord {
    pub kind: WriteKind,
    pub phase: Phase,
    pub path: PathBuf,
    pub bytes: u64,
}

#[derive(Debug)]
struct Inner {
    phase: Phase,
    records: Vec<WriteRecord>,
}

/// Shared, cloneable audit log.
#[derive(Clone, Debug)]
pub struct IoAudit {
    inner: Arc<Mutex<Inner>>,
}

impl Default for IoAudit {
    fn default() -> Self {
        IoAudit {
            inner: Arc::new(Mutex::new(Inner {
                phase: Phase::Setup,
                records: Vec::new(),
            })),
        }
    }
}

impl IoAudit {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_phase(&self, phase: Phase) {
        self.lock().phase = phase;
    }

    pub fn phase(&self) -> Phase {
        self.lock().phase
    }

    pub fn create(&self, path: impl AsRef<Path>, kind: WriteKind) -> io::Result<AuditedFile> {
        let path = path.as_ref().to_path_buf();
        let file = BufWriter::new(File::create(&path)?);
        let index = {
            let mut g = self.lock();
            let phase = g.phase;
            g.records.push(WriteRecord {
                kind,
                phase,
                path,
                bytes: 0,
            });
            g.records.len() - 1
        };
        Ok(AuditedFile {
            file,
            audit: self.clone(),
            index,
        })
    }

    /// Convenience: create, write everything, flush.
    pub fn write_file(&self, path: impl AsRef<Path>, kind: WriteKind, bytes: &[u8]) -> io::Result<()> {
        let mut f = self.create(path, kind)?;
        f.write_all(bytes)?;
        f.flush()
    }

    /// Records a file some other writer produced.
    pub fn note(&self, path: impl AsRef<Path>, kind: WriteKind, bytes: u64) {
        let mut g = self.lock();
        let phase = g.phase;
        g.records.push(WriteRecord {
            kind,
            phase,
            path: path.as_ref().to_path_buf(),
            bytes,
        });
    }

    pub fn records(&self) -> Vec<WriteRecord> {
        self.lock().records.clone()
    }

    /// Parameter writes made at any point other than the final dump.
    pub fn parameter_writes_outside_final(&self) -> usize {
        self.lock()
            .records
            .iter()
            .filter(|r| r.kind == WriteKind::Parameters && r.phase != Phase::Final)
            .count()
    }

    pub fn writes_during(&self, phase: Phase) -> usize {
        self.lock().records.iter().filter(|r| r.phase == phase).count()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }
}

pub struct AuditedFile {
    file: BufWriter<File>,
    audit: IoAudit,
    index: usize,
}

impl Write for AuditedFile {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.file.write(buf)?;
        self.audit.lock().records[self.index].bytes += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.file.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_kind_phase_and_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let a = IoAudit::new();
        a.write_file(dir.path().join("m.csv"), WriteKind::Metrics, b"abc").unwrap();
        a.set_phase(Phase::Training);
        a.set_phase(Phase::Final);
        a.write_file(dir.path().join("p.bin"), WriteKind::Parameters, &[0; 16]).unwrap();
        let r = a.records();
        assert_eq!(r.len(), 2);
        assert_eq!((r[0].phase, r[0].bytes), (Phase::Setup, 3));
        assert_eq!((r[1].kind, r[1].bytes), (WriteKind::Parameters, 16));
        assert_eq!(a.parameter_writes_outside_final(), 0);
        assert_eq!(a.writes_during(Phase::Training), 0);
    }
}
