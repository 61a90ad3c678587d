//! Sharded training data: on-disk formats, the partition of samples across
//! nodes, and range reads used for the initial load and for partial readback
//! after a failure.

pub mod idx;
mod partition;
pub mod raw;
pub mod synth;

use std::fs::File;
use std::io::{BufReader, Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use thiserror::Error;

pub use partition::{PartitionMap, ReloadPlan, ShardRange};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt header: {0}")]
    Corrupt(String),
    #[error("sample file has {samples} records but label file has {labels}")]
    CountMismatch { samples: usize, labels: usize },
    #[error("range {start}..{end} outside 0..{count}")]
    OutOfBounds { start: usize, end: usize, count: usize },
    #[error("no ranks to partition over")]
    NoRanks,
    #[error("{samples} samples cannot cover {ranks} ranks")]
    TooFewSamples { samples: usize, ranks: usize },
    #[error("no survivors remain")]
    NoSurvivors,
    #[error("invalid failure set: {0}")]
    BadFailure(String),
    #[error("partition cover broken: {0}")]
    BadCover(String),
    #[error("partition map from epoch {map} used at epoch {comm}")]
    StaleMap { map: u32, comm: u32 },
    #[error("no dataset found in {0}")]
    NotFound(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    U8,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Idx,
    Raw,
}

/// Where one file's payload lives and how its elements are encoded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FileLayout {
    pub path: PathBuf,
    pub format: Format,
    pub dtype: Dtype,
    pub header_bytes: usize,
    pub count: usize,
    /// Elements per record.
    pub record_len: usize,
}

impl FileLayout {
    pub fn open(path: &Path) -> Result<(Self, Vec<usize>), DataError> {
        let mut f = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic[..4])?;
        let raw = magic[..4] == raw::MAGIC[..4];
        f.seek(SeekFrom::Start(0))?;
        let (format, dtype, header_bytes, count, dims) = if raw {
            let h = raw::read_header(&mut f)?;
            (Format::Raw, h.dtype, h.byte_len(), h.count, h.record_dims)
        } else {
            let h = idx::read_header(&mut f)?;
            (Format::Idx, h.dtype, h.byte_len(), h.dims[0], h.dims[1..].to_vec())
        };
        let record_len = dims.iter().product();
        let layout = FileLayout {
            path: path.to_path_buf(),
            format,
            dtype,
            header_bytes,
            count,
            record_len,
        };
        let expected = header_bytes as u64 + (count * record_len * dtype.size()) as u64;
        let actual = std::fs::metadata(path)?.len();
        if actual != expected {
            return Err(DataError::Corrupt(format!(
                "{} is {actual} bytes, header implies {expected}",
                path.display()
            )));
        }
        Ok((layout, dims))
    }

    pub fn record_bytes(&self) -> usize {
        self.record_len * self.dtype.size()
    }

    fn decode(&self, bytes: &[u8], out: &mut Vec<f64>) {
        match (self.dtype, self.format) {
            (Dtype::U8, _) => out.extend(bytes.iter().map(|&b| f64::from(b) / 255.0)),
            (Dtype::F64, Format::Raw) => {
                out.extend(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            }
            (Dtype::F64, Format::Idx) => {
                out.extend(bytes.chunks_exact(8).map(|c| f64::from_be_bytes(c.try_into().expect("8 bytes"))))
            }
        }
    }
}

/// Immutable description of a sample file and its parallel label file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetMeta {
    pub sample_count: usize,
    pub sample_shape: Vec<usize>,
    pub class_count: usize,
    pub samples: FileLayout,
    pub labels: FileLayout,
}

pub const IDX_SAMPLES: &str = "train-images-idx3-ubyte";
pub const IDX_LABELS: &str = "train-labels-idx1-ubyte";
pub const RAW_SAMPLES: &str = "samples.ftshard";
pub const RAW_LABELS: &str = "labels.ftshard";

impl DatasetMeta {
    pub fn open(samples: &Path, labels: &Path) -> Result<Self, DataError> {
        let (s, sample_shape) = FileLayout::open(samples)?;
        let (l, _) = FileLayout::open(labels)?;
        if s.count != l.count {
            return Err(DataError::CountMismatch {
                samples: s.count,
                labels: l.count,
            });
        }
        if l.record_len != 1 || l.dtype != Dtype::U8 {
            return Err(DataError::Corrupt("labels must be one u8 per record".into()));
        }
        if s.count == 0 || s.record_len == 0 {
            return Err(DataError::Corrupt("dataset is empty".into()));
        }
        let mut buf = Vec::new();
        let mut f = File::open(&l.path)?;
        f.seek(SeekFrom::Start(l.header_bytes as u64))?;
        f.read_to_end(&mut buf)?;
        let class_count = buf.iter().copied().max().map_or(0, |m| m as usize + 1);
        Ok(DatasetMeta {
            sample_count: s.count,
            sample_shape,
            class_count,
            samples: s,
            labels: l,
        })
    }

    /// Opens `train-images-idx3-ubyte` + `train-labels-idx1-ubyte`, or failing
    /// that `samples.ftshard` + `labels.ftshard`, inside `dir`.
    pub fn open_dir(dir: &Path) -> Result<Self, DataError> {
        for (s, l) in [(IDX_SAMPLES, IDX_LABELS), (RAW_SAMPLES, RAW_LABELS)] {
            let (s, l) = (dir.join(s), dir.join(l));
            if s.exists() && l.exists() {
                return Self::open(&s, &l);
            }
        }
        Err(DataError::NotFound(dir.to_path_buf()))
    }

    pub fn features(&self) -> usize {
        self.samples.record_len
    }

    /// Bytes a node would read to load the entire dataset.
    pub fn full_load_payload_bytes(&self) -> u64 {
        (self.sample_count * (self.samples.record_bytes() + self.labels.record_bytes())) as u64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadStats {
    /// Sample bytes covered by the requested ranges.
    pub sample_payload_bytes: u64,
    pub label_payload_bytes: u64,
    /// Header bytes re-read to validate the files.
    pub header_bytes: u64,
    pub wall: Duration,
}

impl LoadStats {
    pub fn payload_bytes(&self) -> u64 {
        self.sample_payload_bytes + self.label_payload_bytes
    }

    pub fn bytes_read(&self) -> u64 {
        self.payload_bytes() + self.header_bytes
    }

    pub fn merge(&mut self, other: &LoadStats) {
        self.sample_payload_bytes += other.sample_payload_bytes;
        self.label_payload_bytes += other.label_payload_bytes;
        self.header_bytes += other.header_bytes;
        self.wall += other.wall;
    }
}

/// Samples loaded for a set of ranges, in ascending index order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadedShard {
    pub indices: Vec<usize>,
    /// `indices.len() * features` normalized values.
    pub samples: Vec<f64>,
    pub labels: Vec<u8>,
    pub features: usize,
    pub stats: LoadStats,
}

impl LoadedShard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.samples[i * self.features..(i + 1) * self.features]
    }

    pub fn extend(&mut self, other: LoadedShard) {
        if self.features == 0 {
            self.features = other.features;
        }
        debug_assert_eq!(self.features, other.features);
        self.indices.extend(other.indices);
        self.samples.extend(other.samples);
        self.labels.extend(other.labels);
        self.stats.merge(&other.stats);
    }
}

/// Reads exactly the requested ranges from both files.
pub fn load_ranges(meta: &DatasetMeta, ranges: &[ShardRange]) -> Result<LoadedShard, DataError> {
    let t0 = Instant::now();
    let mut sorted = ranges.to_vec();
    sorted.sort();
    for r in &sorted {
        if r.is_empty() || r.end > meta.sample_count {
            return Err(DataError::OutOfBounds {
                start: r.start,
                end: r.end,
                count: meta.sample_count,
            });
        }
    }
    let total: usize = sorted.iter().map(ShardRange::len).sum();
    let mut out = LoadedShard {
        indices: Vec::with_capacity(total),
        samples: Vec::with_capacity(total * meta.features()),
        labels: Vec::with_capacity(total),
        features: meta.features(),
        stats: LoadStats::default(),
    };

    let mut sfile = File::open(&meta.samples.path)?;
    let mut lfile = File::open(&meta.labels.path)?;
    // re-validate headers so a file swapped underneath us is caught
    let mut hdr = vec![0u8; meta.samples.header_bytes];
    sfile.read_exact(&mut hdr)?;
    let mut lhdr = vec![0u8; meta.labels.header_bytes];
    lfile.read_exact(&mut lhdr)?;
    check_header(&meta.samples, &hdr)?;
    check_header(&meta.labels, &lhdr)?;
    out.stats.header_bytes = (hdr.len() + lhdr.len()) as u64;

    let rb = meta.samples.record_bytes();
    let mut buf = Vec::new();
    for r in &sorted {
        buf.resize(r.len() * rb, 0);
        sfile.seek(SeekFrom::Start((meta.samples.header_bytes + r.start * rb) as u64))?;
        sfile.read_exact(&mut buf)?;
        meta.samples.decode(&buf, &mut out.samples);
        out.stats.sample_payload_bytes += buf.len() as u64;

        let mut lb = vec![0u8; r.len()];
        lfile.seek(SeekFrom::Start((meta.labels.header_bytes + r.start) as u64))?;
        lfile.read_exact(&mut lb)?;
        out.stats.label_payload_bytes += lb.len() as u64;
        out.labels.extend(lb);
        out.indices.extend(r.start..r.end);
    }
    out.stats.wall = t0.elapsed();
    Ok(out)
}

fn check_header(layout: &FileLayout, bytes: &[u8]) -> Result<(), DataError> {
    let (count, record_len, dtype) = match layout.format {
        Format::Raw => {
            let h = raw::read_header(&mut &bytes[..])?;
            (h.count, h.record_dims.iter().product(), h.dtype)
        }
        Format::Idx => {
            let h = idx::read_header(&mut &bytes[..])?;
            (h.dims[0], h.dims[1..].iter().product(), h.dtype)
        }
    };
    if (count, record_len, dtype) != (layout.count, layout.record_len, layout.dtype) {
        return Err(DataError::Corrupt(format!("{} changed since open", layout.path.display())));
    }
    Ok(())
}
