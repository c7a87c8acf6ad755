//! IDX-format image/label files and a deterministic synthetic stand-in.
//!
//! The loader reads the standard big-endian IDX containers (magic
//! 0x00000803 for images, 0x00000801 for labels) and normalizes pixels to
//! [0, 1]. When no real data is on disk, `synth_digits` fabricates a
//! 10-class 28x28 dataset from smooth class prototypes plus jitter and
//! noise; it is learnable by a small FFN and keeps the same shapes, so the
//! permuted-task and leave-one-class-out pipelines run without downloads.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::data::{Batch, Filter, SampleMeta};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

pub const IMAGE_DIM: usize = 28 * 28;
pub const NUM_CLASSES: usize = 10;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// A loaded split: `[n, 784]` pixels in [0,1] plus labels.
#[derive(Debug, Clone)]
pub struct MnistData<E> {
    pub images: Tensor<E>,
    pub labels: Vec<u8>,
}

impl<E: Element> MnistData<E> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Reads an image/label IDX pair. Counts must agree between the two files.
pub fn load_mnist_idx<E: Element>(
    images_path: &Path,
    labels_path: &Path,
) -> Result<MnistData<E>> {
    let mut images = BufReader::new(File::open(images_path)?);
    let magic = images.read_u32::<BigEndian>()?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Data(format!(
            "{}: image magic {:#010x}, expected {:#010x}",
            images_path.display(),
            magic,
            IMAGES_MAGIC
        )));
    }
    let n = images.read_u32::<BigEndian>()? as usize;
    let rows = images.read_u32::<BigEndian>()? as usize;
    let cols = images.read_u32::<BigEndian>()? as usize;
    if rows != 28 || cols != 28 {
        return Err(Error::Data(format!(
            "expected 28x28 images, file says {rows}x{cols}"
        )));
    }
    let mut pixels = vec![0u8; n * rows * cols];
    images.read_exact(&mut pixels).map_err(|e| {
        Error::Data(format!("{}: truncated image data ({e})", images_path.display()))
    })?;

    let mut labels = BufReader::new(File::open(labels_path)?);
    let magic = labels.read_u32::<BigEndian>()?;
    if magic != LABELS_MAGIC {
        return Err(Error::Data(format!(
            "{}: label magic {:#010x}, expected {:#010x}",
            labels_path.display(),
            magic,
            LABELS_MAGIC
        )));
    }
    let n_labels = labels.read_u32::<BigEndian>()? as usize;
    if n_labels != n {
        return Err(Error::Data(format!(
            "count mismatch: {n} images vs {n_labels} labels"
        )));
    }
    let mut label_bytes = vec![0u8; n_labels];
    labels.read_exact(&mut label_bytes).map_err(|e| {
        Error::Data(format!("{}: truncated label data ({e})", labels_path.display()))
    })?;
    if let Some(&bad) = label_bytes.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(Error::Data(format!("label {bad} out of range")));
    }

    let scale = E::from_f64(1.0 / 255.0);
    let data: Vec<E> = pixels.iter().map(|&p| E::from_f64(p as f64) * scale).collect();
    Ok(MnistData {
        images: Tensor::new(vec![n, IMAGE_DIM], data)?,
        labels: label_bytes,
    })
}

/// Checks a file against an expected lowercase hex SHA-256 digest.
pub fn verify_sha256(path: &Path, expected_hex: &str) -> Result<()> {
    let mut file = File::open(path)?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut file, &mut hasher)?;
    let got = hex_string(&hasher.finalize());
    if got != expected_hex.to_lowercase() {
        return Err(Error::Data(format!(
            "{}: sha256 {got} does not match expected {expected_hex}",
            path.display()
        )));
    }
    Ok(())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes an IDX image file (28x28, one byte per pixel).
pub fn write_idx_images(path: &Path, pixels: &[u8]) -> Result<()> {
    if pixels.len() % IMAGE_DIM != 0 {
        return Err(Error::Data("pixel buffer is not a whole number of images".into()));
    }
    let mut f = File::create(path)?;
    f.write_u32::<BigEndian>(IMAGES_MAGIC)?;
    f.write_u32::<BigEndian>((pixels.len() / IMAGE_DIM) as u32)?;
    f.write_u32::<BigEndian>(28)?;
    f.write_u32::<BigEndian>(28)?;
    f.write_all(pixels)?;
    Ok(())
}

/// Writes an IDX label file.
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut f = File::create(path)?;
    f.write_u32::<BigEndian>(LABELS_MAGIC)?;
    f.write_u32::<BigEndian>(labels.len() as u32)?;
    f.write_all(labels)?;
    Ok(())
}

/// Deterministic synthetic digit-classification data with MNIST shapes.
///
/// Each class is a smooth prototype (a random coarse grid, bilinearly
/// upsampled); samples are spatially jittered, noisy copies. Classes `c`
/// and `c+5` share part of their prototype, so some classes rely on
/// similar features.
pub fn synth_digits<E: Element>(
    train_n: usize,
    test_n: usize,
    rng: &mut Stream,
) -> (MnistData<E>, MnistData<E>) {
    const GRID: usize = 7;
    let mut bases: Vec<Vec<f64>> = Vec::new();
    for _ in 0..5 {
        bases.push((0..GRID * GRID).map(|_| rng.uniform()).collect());
    }
    let mut prototypes: Vec<Vec<f64>> = Vec::new();
    for class in 0..NUM_CLASSES {
        let base = &bases[class % 5];
        let own: Vec<f64> = (0..GRID * GRID).map(|_| rng.uniform()).collect();
        // 40% shared structure with the partner class, 60% class-specific
        let coarse: Vec<f64> = base
            .iter()
            .zip(&own)
            .map(|(&b, &o)| 0.4 * b + 0.6 * o)
            .collect();
        prototypes.push(upsample_bilinear(&coarse, GRID, 28));
    }

    let sample_split = |n: usize, rng: &mut Stream| -> MnistData<E> {
        let mut data = Vec::with_capacity(n * IMAGE_DIM);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let class = rng.below(NUM_CLASSES);
            let proto = &prototypes[class];
            let dx = rng.below(5) as isize - 2;
            let dy = rng.below(5) as isize - 2;
            let gain = 0.8 + 0.4 * rng.uniform();
            for y in 0..28isize {
                for x in 0..28isize {
                    let (sy, sx) = (y + dy, x + dx);
                    let v = if (0..28).contains(&sy) && (0..28).contains(&sx) {
                        proto[(sy * 28 + sx) as usize]
                    } else {
                        0.0
                    };
                    let noise = (rng.uniform() - 0.5) * 0.3;
                    data.push(E::from_f64((gain * v + noise).clamp(0.0, 1.0)));
                }
            }
            labels.push(class as u8);
        }
        MnistData {
            images: Tensor::new(vec![n, IMAGE_DIM], data).expect("sized"),
            labels,
        }
    };

    let train = sample_split(train_n, rng);
    let test = sample_split(test_n, rng);
    (train, test)
}

fn upsample_bilinear(coarse: &[f64], from: usize, to: usize) -> Vec<f64> {
    let mut out = vec![0.0; to * to];
    let scale = (from - 1) as f64 / (to - 1) as f64;
    for y in 0..to {
        for x in 0..to {
            let fy = y as f64 * scale;
            let fx = x as f64 * scale;
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(from - 1), (x0 + 1).min(from - 1));
            let (wy, wx) = (fy - y0 as f64, fx - x0 as f64);
            out[y * to + x] = coarse[y0 * from + x0] * (1.0 - wy) * (1.0 - wx)
                + coarse[y0 * from + x1] * (1.0 - wy) * wx
                + coarse[y1 * from + x0] * wy * (1.0 - wx)
                + coarse[y1 * from + x1] * wy * wx;
        }
    }
    out
}

/// Minibatch stream over a (possibly filtered, possibly permuted) split.
///
/// Training mode reshuffles the index list every epoch from its own stream;
/// evaluation mode walks the data in order.
pub struct MnistStream<'a, E> {
    data: &'a MnistData<E>,
    indices: Vec<usize>,
    cursor: usize,
    shuffle: bool,
    permutation: Option<&'a [usize]>,
}

impl<'a, E: Element> MnistStream<'a, E> {
    pub fn new(
        data: &'a MnistData<E>,
        filter: &Filter,
        shuffle: bool,
        permutation: Option<&'a [usize]>,
    ) -> Result<Self> {
        let indices: Vec<usize> = (0..data.len())
            .filter(|&i| filter.matches(&SampleMeta::Classify { label: data.labels[i] }))
            .collect();
        if indices.is_empty() {
            return Err(Error::Data(format!("filter {filter} leaves no samples")));
        }
        Ok(MnistStream {
            data,
            indices,
            cursor: 0,
            shuffle,
            permutation,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn rewind(&mut self) {
        self.cursor = 0;
    }

    /// Next batch of up to `n` samples; wraps (reshuffling in training
    /// mode) when the split is exhausted.
    pub fn next_batch(&mut self, n: usize, rng: &mut Stream) -> Batch<E> {
        let mut picked = Vec::with_capacity(n);
        while picked.len() < n {
            if self.cursor == 0 && self.shuffle {
                rng.shuffle(&mut self.indices);
            }
            let take = (n - picked.len()).min(self.indices.len() - self.cursor);
            picked.extend_from_slice(&self.indices[self.cursor..self.cursor + take]);
            self.cursor = (self.cursor + take) % self.indices.len();
            if !self.shuffle && take == 0 {
                break;
            }
        }
        self.assemble(&picked)
    }

    /// In-order pass over the whole split in chunks of `n` (for
    /// evaluation). Returns `None` once every sample has been served since
    /// the last rewind.
    pub fn next_eval_chunk(&mut self, n: usize) -> Option<Batch<E>> {
        if self.cursor >= self.indices.len() {
            return None;
        }
        let take = n.min(self.indices.len() - self.cursor);
        let picked: Vec<usize> = self.indices[self.cursor..self.cursor + take].to_vec();
        self.cursor += take;
        Some(self.assemble(&picked))
    }

    fn assemble(&self, picked: &[usize]) -> Batch<E> {
        let mut data = Vec::with_capacity(picked.len() * IMAGE_DIM);
        let mut labels = Vec::with_capacity(picked.len());
        let mut meta = Vec::with_capacity(picked.len());
        for &i in picked {
            let row = &self.data.images.data()[i * IMAGE_DIM..(i + 1) * IMAGE_DIM];
            match self.permutation {
                Some(perm) => data.extend(perm.iter().map(|&src| row[src])),
                None => data.extend_from_slice(row),
            }
            labels.push(self.data.labels[i] as usize);
            meta.push(SampleMeta::Classify { label: self.data.labels[i] });
        }
        Batch {
            inputs: vec![Tensor::new(vec![picked.len(), IMAGE_DIM], data).expect("sized")],
            targets: vec![labels],
            active_groups: vec![0],
            meta,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{SeedPool, StreamKind};

    fn fixture_dir() -> std::path::PathBuf {
        std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
    }

    #[test]
    fn loads_checked_in_fixture() {
        let data: MnistData<f32> = load_mnist_idx(
            &fixture_dir().join("mini-images-idx3-ubyte"),
            &fixture_dir().join("mini-labels-idx1-ubyte"),
        )
        .unwrap();
        assert_eq!(data.len(), 64);
        assert_eq!(data.images.shape(), &[64, IMAGE_DIM]);
        // normalization: all pixels in [0,1], and the fixture contains a 255
        let max = data.images.data().iter().cloned().fold(0.0f32, f32::max);
        assert_eq!(max, 1.0);
        assert!(data.images.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lbl = dir.path().join("lbl");

        // labels file offered as images -> wrong magic
        write_idx_labels(&img, &[1, 2, 3]).unwrap();
        write_idx_labels(&lbl, &[1, 2, 3]).unwrap();
        let err = load_mnist_idx::<f32>(&img, &lbl).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");

        // truncated image payload
        let mut f = File::create(&img).unwrap();
        f.write_u32::<BigEndian>(IMAGES_MAGIC).unwrap();
        f.write_u32::<BigEndian>(2).unwrap();
        f.write_u32::<BigEndian>(28).unwrap();
        f.write_u32::<BigEndian>(28).unwrap();
        f.write_all(&vec![0u8; IMAGE_DIM]).unwrap(); // only one of two images
        drop(f);
        write_idx_labels(&lbl, &[0, 1]).unwrap();
        let err = load_mnist_idx::<f32>(&img, &lbl).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn rejects_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lbl = dir.path().join("lbl");
        write_idx_images(&img, &vec![0u8; 2 * IMAGE_DIM]).unwrap();
        write_idx_labels(&lbl, &[0, 1, 2]).unwrap();
        let err = load_mnist_idx::<f32>(&img, &lbl).unwrap_err();
        assert!(err.to_string().contains("count mismatch"), "{err}");
    }

    #[test]
    fn sha256_verification() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("file");
        std::fs::write(&path, b"abc").unwrap();
        let abc = "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad";
        verify_sha256(&path, abc).unwrap();
        assert!(verify_sha256(&path, &abc.replace('b', "c")).is_err());
    }

    #[test]
    fn idx_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lbl = dir.path().join("lbl");
        let pixels: Vec<u8> = (0..3 * IMAGE_DIM).map(|i| (i % 256) as u8).collect();
        write_idx_images(&img, &pixels).unwrap();
        write_idx_labels(&lbl, &[3, 1, 4]).unwrap();
        let data: MnistData<f64> = load_mnist_idx(&img, &lbl).unwrap();
        assert_eq!(data.labels, vec![3, 1, 4]);
        assert_eq!(data.images.data()[255], 1.0); // pixel 255 -> 1.0
    }

    #[test]
    fn synthetic_digits_are_deterministic_and_separable_by_class_mean() {
        let pool = SeedPool::new(123);
        let (train_a, _) = synth_digits::<f32>(256, 16, &mut pool.stream(StreamKind::DataShuffle, 0));
        let (train_b, _) = synth_digits::<f32>(256, 16, &mut pool.stream(StreamKind::DataShuffle, 0));
        assert!(train_a.images.bitwise_eq(&train_b.images));
        assert_eq!(train_a.labels, train_b.labels);
        let classes: std::collections::HashSet<u8> = train_a.labels.iter().copied().collect();
        assert_eq!(classes.len(), NUM_CLASSES);
    }

    #[test]
    fn stream_filters_and_wraps() {
        let pool = SeedPool::new(321);
        let (train, _) = synth_digits::<f32>(200, 10, &mut pool.stream(StreamKind::DataShuffle, 0));
        let mut stream =
            MnistStream::new(&train, &Filter::ExcludeClass(3), true, None).unwrap();
        let mut rng = pool.stream(StreamKind::DataShuffle, 1);
        for _ in 0..5 {
            let batch = stream.next_batch(64, &mut rng);
            assert_eq!(batch.len(), 64);
            assert!(batch
                .meta
                .iter()
                .all(|m| !matches!(m, SampleMeta::Classify { label: 3 })));
        }
    }

    #[test]
    fn eval_chunks_cover_split_exactly_once() {
        let pool = SeedPool::new(11);
        let (_, test) = synth_digits::<f32>(10, 100, &mut pool.stream(StreamKind::DataShuffle, 0));
        let mut stream = MnistStream::new(&test, &Filter::All, false, None).unwrap();
        let mut seen = 0;
        while let Some(chunk) = stream.next_eval_chunk(32) {
            seen += chunk.len();
        }
        assert_eq!(seen, 100);
        assert!(stream.next_eval_chunk(32).is_none());
    }
}
