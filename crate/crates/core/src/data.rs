//! Dataset loading (IDX, CIFAR-10 binary), label corruption and the
//! corrupted-train construction, subsetting, and deterministic batching.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_IMAGE_BYTES: usize = 3 * 32 * 32;
pub const CIFAR_RECORD_BYTES: usize = 1 + CIFAR_IMAGE_BYTES;

/// Images in `[0, 1]` with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    /// `[N × C × H × W]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub name: String,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, name: impl Into<String>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Shape(format!("images must be N×C×H×W, got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Validation(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self {
            images,
            labels,
            classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one example.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// Copies the listed examples, in order, into a batch tensor.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("gathered shape"), labels)
    }

    /// A new dataset holding the listed examples.
    pub fn select(&self, indices: &[usize], name: impl Into<String>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Validation("cannot select an empty subset".into()));
        }
        let (images, labels) = self.gather(indices);
        Self::new(images, labels, self.classes, name)
    }

    /// Per-class example counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{}: truncated header", path.display())))
}

/// Parses an IDX unsigned-byte file, returning its dimension sizes and payload.
fn parse_idx(bytes: &[u8], magic: u32, path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let found = be_u32(bytes, 0, path)?;
    if found != magic {
        return Err(Error::Format(format!(
            "{}: magic {found:#010x}, expected {magic:#010x}",
            path.display()
        )));
    }
    let ndims = (magic & 0xff) as usize;
    let dims = (0..ndims)
        .map(|d| be_u32(bytes, 4 + 4 * d, path).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndims;
    let n: usize = dims.iter().product();
    let payload = bytes
        .get(start..start + n)
        .ok_or_else(|| {
            Error::Format(format!(
                "{}: truncated payload, header declares {n} bytes but {} remain",
                path.display(),
                bytes.len().saturating_sub(start)
            ))
        })?
        .to_vec();
    Ok((dims, payload))
}

fn scale(pixels: &[u8]) -> Vec<f64> {
    pixels.iter().map(|&p| p as f64 / 255.0).collect()
}

fn dataset_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Loads an IDX image/label pair (raw or gzip). Pixels are scaled by 1/255;
/// the class count is inferred as `max(label) + 1`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let (dims, pixels) = parse_idx(&read_maybe_gz(ip)?, IDX_IMAGES_MAGIC, ip)?;
    let (ldims, labels) = parse_idx(&read_maybe_gz(lp)?, IDX_LABELS_MAGIC, lp)?;
    if dims[0] != ldims[0] {
        return Err(Error::Consistency(format!(
            "{} holds {} images but {} holds {} labels",
            ip.display(),
            dims[0],
            lp.display(),
            ldims[0]
        )));
    }
    if dims[0] == 0 || dims[1] == 0 || dims[2] == 0 {
        return Err(Error::Format(format!("{}: empty image set", ip.display())));
    }
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let images = Tensor::new(vec![dims[0], 1, dims[1], dims[2]], scale(&pixels))?;
    LabeledDataset::new(images, labels, classes, dataset_name(ip))
}

/// Loads the conventional `{prefix}-images-idx3-ubyte[.gz]` pair from a directory.
pub fn load_idx_dir(dir: impl AsRef<Path>, train: bool) -> Result<LabeledDataset> {
    let dir = dir.as_ref();
    let prefix = if train { "train" } else { "t10k" };
    let find = |stem: String| -> Result<std::path::PathBuf> {
        [dir.join(&stem), dir.join(format!("{stem}.gz"))]
            .into_iter()
            .find(|p| p.exists())
            .ok_or_else(|| Error::Validation(format!("{} not found in {}", stem, dir.display())))
    };
    let images = find(format!("{prefix}-images-idx3-ubyte"))?;
    let labels = find(format!("{prefix}-labels-idx1-ubyte"))?;
    let mut ds = load_idx(images, labels)?;
    ds.name = format!("{}:{prefix}", dir.display());
    Ok(ds)
}

/// Reads one CIFAR-10 binary batch file (3073-byte records).
pub fn load_cifar_batch(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let bytes = read_maybe_gz(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::Format(format!(
            "{}: length {} is not a positive multiple of {CIFAR_RECORD_BYTES}",
            path.display(),
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR_IMAGE_BYTES);
    for rec in bytes.chunks(CIFAR_RECORD_BYTES) {
        labels.push(rec[0] as usize);
        pixels.extend(scale(&rec[1..]));
    }
    let images = Tensor::new(vec![n, 3, 32, 32], pixels)?;
    LabeledDataset::new(images, labels, 10, dataset_name(path))
}

fn concat(parts: &[LabeledDataset], name: impl Into<String>) -> Result<LabeledDataset> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Validation("nothing to concatenate".into()))?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        if p.sample_shape() != first.sample_shape() || p.classes != first.classes {
            return Err(Error::Consistency(format!(
                "cannot concatenate {:?}/k={} with {:?}/k={}",
                first.sample_shape(),
                first.classes,
                p.sample_shape(),
                p.classes
            )));
        }
        data.extend_from_slice(p.images.data());
        labels.extend_from_slice(&p.labels);
    }
    let mut shape = vec![labels.len()];
    shape.extend_from_slice(first.sample_shape());
    LabeledDataset::new(Tensor::new(shape, data)?, labels, first.classes, name)
}

/// Loads `data_batch_1..5.bin` and `test_batch.bin` from a directory.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<(LabeledDataset, LabeledDataset)> {
    let dir = dir.as_ref();
    let train_parts = (1..=5)
        .map(|i| load_cifar_batch(dir.join(format!("data_batch_{i}.bin"))))
        .collect::<Result<Vec<_>>>()?;
    let train = concat(&train_parts, format!("{}:train", dir.display()))?;
    let mut test = load_cifar_batch(dir.join("test_batch.bin"))?;
    test.name = format!("{}:test", dir.display());
    Ok((train, test))
}

/// Replaces every label with one drawn uniformly from the other `k − 1`
/// classes. Images are shared unchanged; the input is not modified.
pub fn corrupt_labels(ds: &LabeledDataset, rng: &mut impl Rng) -> Result<LabeledDataset> {
    let k = ds.classes;
    if k < 2 {
        return Err(Error::Validation(format!("corruption needs at least 2 classes, got {k}")));
    }
    let labels = ds.labels.iter().map(|&y| (y + rng.gen_range(1..k)) % k).collect();
    Ok(LabeledDataset {
        images: ds.images.clone(),
        labels,
        classes: k,
        name: format!("{}+corrupted", ds.name),
    })
}

/// Number of corrupted-test copies appended: `⌊train/test⌋ + 1`.
pub fn corrupted_copies(train_len: usize, test_len: usize) -> usize {
    train_len / test_len + 1
}

/// The clean train set followed by `⌊train/test⌋ + 1` verbatim copies of the
/// same corrupted test set.
pub fn build_corrupted_train(train: &LabeledDataset, corrupted_test: &LabeledDataset) -> Result<LabeledDataset> {
    if corrupted_test.is_empty() {
        return Err(Error::Validation("corrupted test set is empty".into()));
    }
    let t = corrupted_copies(train.len(), corrupted_test.len());
    let mut parts = Vec::with_capacity(t + 1);
    parts.push(train.clone());
    parts.extend(std::iter::repeat_n(corrupted_test.clone(), t));
    concat(&parts, format!("{}+{}x{}", train.name, t, corrupted_test.name))
}

/// Samples `n` examples without replacement. In stratified mode each class
/// contributes `⌊n/k⌋` examples and any remainder is drawn from what is left.
pub fn subset(ds: &LabeledDataset, n: usize, rng: &mut impl Rng, stratified: bool) -> Result<LabeledDataset> {
    if n == 0 || n > ds.len() {
        return Err(Error::Validation(format!("subset size {n} not in [1, {}]", ds.len())));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(rng);
    let picked = if stratified {
        let k = ds.classes;
        if n < k {
            return Err(Error::Validation(format!("stratified subset of {n} cannot cover {k} classes")));
        }
        let per = n / k;
        let mut taken = vec![0usize; k];
        let mut picked = Vec::with_capacity(n);
        let mut rest = Vec::new();
        for &i in &order {
            let y = ds.labels[i];
            if taken[y] < per {
                taken[y] += 1;
                picked.push(i);
            } else {
                rest.push(i);
            }
        }
        if let Some(c) = taken.iter().position(|&t| t < per) {
            return Err(Error::Validation(format!(
                "class {c} has only {} examples, {per} needed",
                taken[c]
            )));
        }
        picked.extend(rest.into_iter().take(n - per * k));
        picked.shuffle(rng);
        picked
    } else {
        order.truncate(n);
        order
    };
    ds.select(&picked, format!("{}[{n}]", ds.name))
}

/// Mini-batch schedule: per-epoch permutations derived from `(seed, epoch)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
}

impl BatchPlan {
    pub fn new(batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Validation("batch size must be positive".into()));
        }
        Ok(Self { batch_size, seed })
    }

    pub fn permutation(&self, n: usize, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }
}

/// One mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// Yields the shuffled batches of one epoch, including a final short batch.
pub fn batches<'a>(ds: &'a LabeledDataset, plan: &BatchPlan, epoch: u64) -> impl Iterator<Item = Batch> + 'a {
    let order = plan.permutation(ds.len(), epoch);
    let size = plan.batch_size;
    (0..ds.len().div_ceil(size)).map(move |b| {
        let idx = &order[b * size..((b + 1) * size).min(order.len())];
        let (images, labels) = ds.gather(idx);
        Batch { images, labels }
    })
}

/// Writers and generators for small synthetic datasets.
pub mod fixtures {
    use std::io::Write;

    use flate2::write::GzEncoder;
    use flate2::Compression;

    use super::*;

    fn write_bytes(path: &Path, bytes: &[u8], gzip: bool) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let out = if gzip {
            let mut enc = GzEncoder::new(Vec::new(), Compression::default());
            enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
            enc.finish().map_err(|e| Error::io(path, e))?
        } else {
            bytes.to_vec()
        };
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// IDX image file for `n` images of `rows × cols` bytes.
    pub fn write_idx_images(path: impl AsRef<Path>, pixels: &[u8], n: usize, rows: usize, cols: usize, gzip: bool) -> Result<()> {
        assert_eq!(pixels.len(), n * rows * cols);
        let mut bytes = Vec::with_capacity(16 + pixels.len());
        for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        bytes.extend_from_slice(pixels);
        write_bytes(path.as_ref(), &bytes, gzip)
    }

    pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8], gzip: bool) -> Result<()> {
        let mut bytes = Vec::with_capacity(8 + labels.len());
        for v in [IDX_LABELS_MAGIC, labels.len() as u32] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        bytes.extend_from_slice(labels);
        write_bytes(path.as_ref(), &bytes, gzip)
    }

    /// CIFAR-10 binary batch from `(label, 3072 channel-major pixels)` records.
    pub fn write_cifar_batch(path: impl AsRef<Path>, records: &[(u8, Vec<u8>)]) -> Result<()> {
        let mut bytes = Vec::with_capacity(records.len() * CIFAR_RECORD_BYTES);
        for (label, pixels) in records {
            assert_eq!(pixels.len(), CIFAR_IMAGE_BYTES);
            bytes.push(*label);
            bytes.extend_from_slice(pixels);
        }
        write_bytes(path.as_ref(), &bytes, false)
    }

    /// Class-prototype images: each class gets a random prototype and every
    /// example is a noisy copy of its class prototype, quantized to bytes.
    pub fn prototype_bytes(n: usize, classes: usize, pixels: usize, noise: f64, rng: &mut impl Rng) -> (Vec<u8>, Vec<u8>) {
        let protos: Vec<Vec<f64>> = (0..classes)
            .map(|_| (0..pixels).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        let mut images = Vec::with_capacity(n * pixels);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % classes;
            labels.push(y as u8);
            for &p in &protos[y] {
                let v = (p + rng.gen_range(-noise..=noise)).clamp(0.0, 1.0);
                images.push((v * 255.0).round() as u8);
            }
        }
        (images, labels)
    }

    /// In-memory prototype dataset of shape `[n × channels × side × side]`.
    pub fn synthetic(n: usize, classes: usize, channels: usize, side: usize, noise: f64, seed: u64) -> Result<LabeledDataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (px, labels) = prototype_bytes(n, classes, channels * side * side, noise, &mut rng);
        // shuffle so classes are not interleaved in a fixed pattern
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let stride = channels * side * side;
        let mut data = Vec::with_capacity(px.len());
        let mut ys = Vec::with_capacity(n);
        for &i in &order {
            data.extend(scale(&px[i * stride..(i + 1) * stride]));
            ys.push(labels[i] as usize);
        }
        LabeledDataset::new(Tensor::new(vec![n, channels, side, side], data)?, ys, classes, format!("synth-{seed}"))
    }

    /// Train and test splits that share class prototypes.
    pub fn synthetic_pair(train: usize, test: usize, classes: usize, channels: usize, side: usize, noise: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        let all = synthetic(train + test, classes, channels, side, noise, seed)?;
        let idx: Vec<usize> = (0..train + test).collect();
        let mut tr = all.select(&idx[..train], format!("synth-{seed}:train"))?;
        let mut te = all.select(&idx[train..], format!("synth-{seed}:test"))?;
        tr.name = format!("synth-{seed}:train");
        te.name = format!("synth-{seed}:test");
        Ok((tr, te))
    }

    /// Writes a tiny MNIST-shaped IDX pair set (gzip) and a CIFAR-10 directory
    /// under `dir/mnist` and `dir/cifar10`.
    pub fn write_fixture_tree(dir: impl AsRef<Path>, train: usize, test: usize, seed: u64) -> Result<()> {
        let dir = dir.as_ref();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (px, labels) = prototype_bytes(train + test, 10, 28 * 28, 0.3, &mut rng);
        let split = train * 28 * 28;
        let mnist = dir.join("mnist");
        write_idx_images(mnist.join("train-images-idx3-ubyte.gz"), &px[..split], train, 28, 28, true)?;
        write_idx_labels(mnist.join("train-labels-idx1-ubyte.gz"), &labels[..train], true)?;
        write_idx_images(mnist.join("t10k-images-idx3-ubyte.gz"), &px[split..], test, 28, 28, true)?;
        write_idx_labels(mnist.join("t10k-labels-idx1-ubyte.gz"), &labels[train..], true)?;

        let (cpx, clabels) = prototype_bytes(6 * test.max(1), 10, CIFAR_IMAGE_BYTES, 0.3, &mut rng);
        let records: Vec<(u8, Vec<u8>)> = clabels
            .iter()
            .zip(cpx.chunks(CIFAR_IMAGE_BYTES))
            .map(|(&y, p)| (y, p.to_vec()))
            .collect();
        let cifar = dir.join("cifar10");
        let per = test.max(1);
        for i in 0..5 {
            write_cifar_batch(cifar.join(format!("data_batch_{}.bin", i + 1)), &records[i * per..(i + 1) * per])?;
        }
        write_cifar_batch(cifar.join("test_batch.bin"), &records[5 * per..])?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn labels_only(labels: Vec<usize>, classes: usize) -> LabeledDataset {
        let n = labels.len();
        let images = Tensor::new(vec![n, 1, 1, 1], (0..n).map(|i| i as f64).collect()).unwrap();
        LabeledDataset::new(images, labels, classes, "labels").unwrap()
    }

    #[test]
    fn idx_scaling_endpoints() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        write_idx_images(&ip, &[0, 255, 255, 0, 255, 255, 0, 0], 2, 2, 2, false).unwrap();
        write_idx_labels(&lp, &[3, 1], false).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.images.shape(), &[2, 1, 2, 2]);
        assert_eq!(ds.images.data(), &[0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(ds.labels, vec![3, 1]);
        assert_eq!(ds.classes, 4);
    }

    #[test]
    fn idx_gzip_and_raw_agree() {
        let dir = tempfile::tempdir().unwrap();
        let px: Vec<u8> = (0..3 * 4 * 5).map(|i| (i * 7 % 256) as u8).collect();
        write_idx_images(dir.path().join("a"), &px, 3, 4, 5, false).unwrap();
        write_idx_images(dir.path().join("b"), &px, 3, 4, 5, true).unwrap();
        write_idx_labels(dir.path().join("l"), &[0, 1, 2], true).unwrap();
        let a = load_idx(dir.path().join("a"), dir.path().join("l")).unwrap();
        let b = load_idx(dir.path().join("b"), dir.path().join("l")).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.images.shape(), &[3, 1, 4, 5]);
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        write_idx_images(&ip, &[0; 8], 2, 2, 2, false).unwrap();
        write_idx_labels(&lp, &[1, 2, 3], false).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Consistency(_))));
        // swapped files: wrong magic
        assert!(matches!(load_idx(&lp, &ip), Err(Error::Format(_))));
        // truncated payload
        let mut bytes = fs::read(&ip).unwrap();
        bytes.truncate(bytes.len() - 1);
        fs::write(&ip, &bytes).unwrap();
        write_idx_labels(&lp, &[1, 2], false).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format(_))));
        // truncated header
        fs::write(&ip, [0u8, 0, 8]).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format(_))));
    }

    #[test]
    fn cifar_single_record() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.bin");
        let mut px = vec![0u8; CIFAR_IMAGE_BYTES];
        px[1024] = 255; // first green pixel
        write_cifar_batch(&p, &[(7, px)]).unwrap();
        let ds = load_cifar_batch(&p).unwrap();
        assert_eq!(ds.labels, vec![7]);
        assert_eq!(ds.images.shape(), &[1, 3, 32, 32]);
        assert_eq!(ds.images.data()[1024], 1.0);
        assert_eq!(ds.classes, 10);
    }

    #[test]
    fn cifar_bad_length() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.bin");
        fs::write(&p, vec![0u8; CIFAR_RECORD_BYTES + 5]).unwrap();
        assert!(matches!(load_cifar_batch(&p), Err(Error::Format(_))));
    }

    #[test]
    fn cifar_directory() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture_tree(dir.path(), 20, 4, 1).unwrap();
        let (train, test) = load_cifar10(dir.path().join("cifar10")).unwrap();
        assert_eq!(train.len(), 20);
        assert_eq!(test.len(), 4);
        let tr = load_idx_dir(dir.path().join("mnist"), true).unwrap();
        let te = load_idx_dir(dir.path().join("mnist"), false).unwrap();
        assert_eq!((tr.len(), te.len()), (20, 4));
        assert_eq!(tr.sample_shape(), &[1, 28, 28]);
    }

    #[test]
    fn loaders_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture_tree(dir.path(), 10, 3, 5).unwrap();
        let a = load_idx_dir(dir.path().join("mnist"), true).unwrap();
        let b = load_idx_dir(dir.path().join("mnist"), true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn binary_corruption_flips() {
        let ds = labels_only(vec![0, 1, 0], 2);
        let c = corrupt_labels(&ds, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(c.labels, vec![1, 0, 1]);
        assert_eq!(c.images, ds.images);
        assert_eq!(ds.labels, vec![0, 1, 0]);
    }

    #[test]
    fn corruption_needs_two_classes() {
        let ds = labels_only(vec![0, 0], 1);
        assert!(matches!(
            corrupt_labels(&ds, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn corruption_is_uniform_over_wrong_labels() {
        // 90,000 labels, 10,000 per class; each of the 9 wrong targets of a
        // class should receive ~10,000/9 draws.
        let labels: Vec<usize> = (0..90_000).map(|i| i % 10).collect();
        let ds = labels_only(labels, 10);
        let c = corrupt_labels(&ds, &mut ChaCha8Rng::seed_from_u64(17)).unwrap();
        let mut counts = [[0usize; 10]; 10];
        for (&y, &z) in ds.labels.iter().zip(&c.labels) {
            counts[y][z] += 1;
        }
        let expected = 9_000.0 / 9.0;
        let sigma = (9_000.0 * (1.0 / 9.0) * (8.0 / 9.0f64)).sqrt();
        let mut chi2 = 0.0;
        for (y, row) in counts.iter().enumerate() {
            assert_eq!(row[y], 0);
            for (z, &n) in row.iter().enumerate() {
                if z != y {
                    assert!((n as f64 - expected).abs() < 5.0 * sigma, "{y}->{z}: {n}");
                    chi2 += (n as f64 - expected).powi(2) / expected;
                }
            }
        }
        // 10 classes × 8 dof; 5σ-ish upper bound of χ²(80)
        assert!(chi2 < 80.0 + 5.0 * (160.0f64).sqrt(), "chi2 = {chi2}");
    }

    #[test]
    fn corrupted_train_sizes() {
        let tr = labels_only(vec![0; 60_000], 2);
        let te = labels_only(vec![1; 10_000], 2);
        assert_eq!(corrupted_copies(60_000, 10_000), 7);
        assert_eq!(build_corrupted_train(&tr, &te).unwrap().len(), 130_000);
        assert_eq!(corrupted_copies(4000, 1000), 5);
        assert_eq!(4000 + 5 * 1000, 9000);
    }

    #[test]
    fn corrupted_train_layout() {
        let tr = labels_only((0..100).map(|i| i % 3).collect(), 3);
        let te = labels_only((0..100).map(|i| (i + 1) % 3).collect(), 3);
        let ct = corrupt_labels(&te, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let out = build_corrupted_train(&tr, &ct).unwrap();
        assert_eq!(out.len(), 300);
        assert_eq!(&out.labels[..100], &tr.labels[..]);
        assert_eq!(&out.images.data()[..100], tr.images.data());
        assert_eq!(&out.labels[100..200], &ct.labels[..]);
        assert_eq!(&out.labels[200..300], &ct.labels[..]);
    }

    #[test]
    fn corrupted_train_mismatch() {
        let tr = labels_only(vec![0, 1], 2);
        let te = labels_only(vec![0, 1], 3);
        assert!(matches!(build_corrupted_train(&tr, &te), Err(Error::Consistency(_))));
    }

    #[test]
    fn subset_cases() {
        let ds = labels_only((0..50).map(|i| i % 10).collect(), 10);
        let full = subset(&ds, 50, &mut ChaCha8Rng::seed_from_u64(1), false).unwrap();
        let mut seen: Vec<f64> = full.images.data().to_vec();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, (0..50).map(|i| i as f64).collect::<Vec<_>>());

        let big = labels_only((0..5000).map(|i| i % 10).collect(), 10);
        let s = subset(&big, 1000, &mut ChaCha8Rng::seed_from_u64(1), true).unwrap();
        assert_eq!(s.class_counts(), vec![100; 10]);
        let s2 = subset(&big, 1000, &mut ChaCha8Rng::seed_from_u64(1), true).unwrap();
        assert_eq!(s, s2);
        let odd = subset(&big, 1005, &mut ChaCha8Rng::seed_from_u64(1), true).unwrap();
        assert_eq!(odd.len(), 1005);
        assert!(odd.class_counts().iter().all(|&c| c >= 100));

        assert!(matches!(subset(&ds, 51, &mut ChaCha8Rng::seed_from_u64(1), false), Err(Error::Validation(_))));
        assert!(matches!(subset(&ds, 5, &mut ChaCha8Rng::seed_from_u64(1), true), Err(Error::Validation(_))));
    }

    #[test]
    fn batch_sizes_with_remainder() {
        let ds = labels_only((0..10).map(|i| i % 2).collect(), 2);
        let plan = BatchPlan::new(3, 9).unwrap();
        let sizes: Vec<usize> = batches(&ds, &plan, 0).map(|b| b.labels.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
    }

    #[test]
    fn batches_partition_and_repeat() {
        let ds = labels_only((0..37).map(|i| i % 4).collect(), 4);
        let plan = BatchPlan::new(8, 3).unwrap();
        let mut ids: Vec<f64> = batches(&ds, &plan, 2).flat_map(|b| b.images.into_data()).collect();
        let again: Vec<f64> = batches(&ds, &plan, 2).flat_map(|b| b.images.into_data()).collect();
        assert_eq!(ids, again);
        let other: Vec<f64> = batches(&ds, &plan, 3).flat_map(|b| b.images.into_data()).collect();
        assert_ne!(ids, other);
        ids.sort_by(f64::total_cmp);
        assert_eq!(ids, (0..37).map(|i| i as f64).collect::<Vec<_>>());
        let mut labels: Vec<usize> = batches(&ds, &plan, 2).flat_map(|b| b.labels).collect();
        labels.sort();
        let mut expected = ds.labels.clone();
        expected.sort();
        assert_eq!(labels, expected);
    }

    proptest! {
        #[test]
        fn corruption_never_keeps_a_label(seed in any::<u64>(), k in 2usize..12, n in 1usize..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let ds = labels_only(labels, k);
            let c = corrupt_labels(&ds, &mut rng).unwrap();
            prop_assert!(ds.labels.iter().zip(&c.labels).all(|(a, b)| a != b && *b < k));
        }

        #[test]
        fn corrupted_train_size_formula(train in 1usize..300, test in 1usize..120) {
            let tr = labels_only(vec![0; train], 2);
            let te = labels_only(vec![1; test], 2);
            let out = build_corrupted_train(&tr, &te).unwrap();
            prop_assert_eq!(out.len(), train + (train / test + 1) * test);
        }
    }
}
