//! Seeded synthetic classification data: each class has a random prototype
//! image and samples are noisy copies of their class prototype.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{idx, raw, DataError, Dtype, IDX_LABELS, IDX_SAMPLES, RAW_LABELS, RAW_SAMPLES};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub count: usize,
    /// Per-sample extents, e.g. `[28, 28, 1]`.
    pub shape: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
    /// Uniform noise amplitude in pixel units (0..=255).
    pub noise: u8,
}

impl SynthSpec {
    pub fn mnist_like(count: usize, seed: u64) -> Self {
        SynthSpec {
            count,
            shape: vec![28, 28, 1],
            classes: 10,
            seed,
            noise: 96,
        }
    }
}

/// Generates samples and labels in memory.
pub fn generate(spec: &SynthSpec) -> (Vec<u8>, Vec<u8>) {
    assert!(spec.classes >= 1 && spec.classes <= 256, "class count must fit in u8");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let features: usize = spec.shape.iter().product();
    let protos: Vec<Vec<u8>> = (0..spec.classes)
        .map(|_| (0..features).map(|_| if rng.gen_bool(0.3) { 200 } else { 20 }).collect())
        .collect();
    let a = i16::from(spec.noise);
    let noise = Uniform::new_inclusive(-a, a);
    let mut samples = Vec::with_capacity(spec.count * features);
    let mut labels = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let c = rng.gen_range(0..spec.classes);
        labels.push(c as u8);
        samples.extend(
            protos[c]
                .iter()
                .map(|&p| (i16::from(p) + noise.sample(&mut rng)).clamp(0, 255) as u8),
        );
    }
    (samples, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputFormat {
    Raw,
    Idx,
}

/// Writes a generated dataset into `dir` under the names `DatasetMeta::open_dir` expects.
pub fn write_dataset(dir: &Path, spec: &SynthSpec, format: OutputFormat) -> Result<(), DataError> {
    std::fs::create_dir_all(dir)?;
    let (samples, labels) = generate(spec);
    match format {
        OutputFormat::Raw => {
            let mut s = BufWriter::new(File::create(dir.join(RAW_SAMPLES))?);
            raw::write_header(
                &mut s,
                &raw::RawHeader {
                    count: spec.count,
                    dtype: Dtype::U8,
                    record_dims: spec.shape.clone(),
                },
            )?;
            s.write_all(&samples)?;
            s.flush()?;
            let mut l = BufWriter::new(File::create(dir.join(RAW_LABELS))?);
            raw::write_header(
                &mut l,
                &raw::RawHeader {
                    count: spec.count,
                    dtype: Dtype::U8,
                    record_dims: vec![],
                },
            )?;
            l.write_all(&labels)?;
            l.flush()?;
        }
        OutputFormat::Idx => {
            let mut dims = vec![spec.count];
            dims.extend(&spec.shape);
            let mut s = BufWriter::new(File::create(dir.join(IDX_SAMPLES))?);
            idx::write_u8(&mut s, &dims, &samples)?;
            s.flush()?;
            let mut l = BufWriter::new(File::create(dir.join(IDX_LABELS))?);
            idx::write_u8(&mut l, &[spec.count], &labels)?;
            l.flush()?;
        }
    }
    Ok(())
}
