//! Dataset ingestion and deterministic minibatch iteration.
//!
//! Two ingest paths: big-endian IDX image/label files (pixels scaled to
//! `[0, 1]`), and synthetic Gaussian blob datasets for desk-scale runs.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// An immutable labeled dataset. `images` is shaped
/// `[n, ...sample_shape]` with every value in `[0, 1]` for image data.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let n = images.shape().first().copied().unwrap_or(0);
        if n != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} images but {} labels",
                n,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: class_count,
            });
        }
        Ok(Self {
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape (without the leading count dimension).
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Reinterpret each sample under a new shape of equal element count,
    /// e.g. `[784]` as `[1, 28, 28]` for a conv front end.
    pub fn reshape_samples(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.sample_len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot view {}-element samples as {:?}",
                self.sample_len(),
                shape
            )));
        }
        let mut full = vec![self.len()];
        full.extend_from_slice(shape);
        self.images = self.images.reshape(full)?;
        Ok(self)
    }

    /// Gather the given sample indices into a batch tensor plus labels.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.sample_len();
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        (Tensor::new(data, shape).expect("gather shape"), labels)
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if end > bytes.len() {
        return Err(Error::IdxParse(format!("truncated file reading {what}")));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Load an IDX image file plus its companion label file.
///
/// Images: magic `0x00000803`, then count, rows, cols (all big-endian
/// u32), then one unsigned byte per pixel, scaled by 1/255. Labels: magic
/// `0x00000801`, count, one byte per label. The two counts must agree.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let img_bytes = fs::read(images_path.as_ref())?;
    let lbl_bytes = fs::read(labels_path.as_ref())?;

    let magic = read_u32_be(&img_bytes, 0, "image magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::NotIdx(format!(
            "image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"
        )));
    }
    let n = read_u32_be(&img_bytes, 4, "image count")? as usize;
    let rows = read_u32_be(&img_bytes, 8, "rows")? as usize;
    let cols = read_u32_be(&img_bytes, 12, "cols")? as usize;
    let pixel_count = n * rows * cols;
    if img_bytes.len() != 16 + pixel_count {
        return Err(Error::IdxParse(format!(
            "image file holds {} data bytes, header declares {}",
            img_bytes.len().saturating_sub(16),
            pixel_count
        )));
    }

    let magic = read_u32_be(&lbl_bytes, 0, "label magic")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::NotIdx(format!(
            "label magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}"
        )));
    }
    let n_labels = read_u32_be(&lbl_bytes, 4, "label count")? as usize;
    if lbl_bytes.len() != 8 + n_labels {
        return Err(Error::IdxParse(format!(
            "label file holds {} data bytes, header declares {}",
            lbl_bytes.len().saturating_sub(8),
            n_labels
        )));
    }
    if n != n_labels {
        return Err(Error::IdxParse(format!(
            "{n} images but {n_labels} labels"
        )));
    }

    let data: Vec<f64> = img_bytes[16..]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let labels: Vec<usize> = lbl_bytes[8..].iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().max().map_or(1, |&m| m + 1);
    Dataset::new(Tensor::new(data, vec![n, rows, cols])?, labels, class_count)
}

/// Write a dataset of `[rows, cols]`-shaped samples as an IDX pair,
/// byte-exact inverse of [`load_idx`]. Values are clamped to `[0, 1]`
/// and rounded to bytes.
pub fn save_idx(
    ds: &Dataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let (rows, cols) = match ds.sample_shape() {
        [r, c] => (*r, *c),
        other => {
            return Err(Error::ShapeMismatch(format!(
                "IDX images need [rows, cols] samples, got {other:?}"
            )))
        }
    };
    let mut img = Vec::with_capacity(16 + ds.len() * rows * cols);
    img.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for &v in ds.images.data() {
        img.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    let mut lbl = Vec::with_capacity(8 + ds.len());
    lbl.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    for &l in &ds.labels {
        lbl.push(l as u8);
    }
    fs::write(images_path.as_ref(), img)?;
    fs::write(labels_path.as_ref(), lbl)?;
    Ok(())
}

/// Default distance between blob class means, in units of the unit
/// within-class standard deviation.
pub const BLOB_SEPARATION: f64 = 6.0;

/// Gaussian clusters with class-separated means; deterministic per seed.
/// Class `c` gets its mean on coordinate axis `c % dim`, with magnitude
/// growing for classes that wrap, so any two means are at least
/// `separation` apart. Labels are balanced round-robin.
pub fn synthetic_blobs_with(
    n: usize,
    classes: usize,
    dim: usize,
    seed: u64,
    separation: f64,
) -> Result<Dataset> {
    if n == 0 || classes == 0 || dim == 0 {
        return Err(Error::InvalidConfig(
            "blob dataset needs n, classes, dim >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = vec![vec![0.0; dim]; classes];
    for (c, mean) in means.iter_mut().enumerate() {
        let axis = c % dim;
        let level = (c / dim + 1) as f64;
        let sign = if (c / dim) % 2 == 0 { 1.0 } else { -1.0 };
        mean[axis] = sign * level * separation;
    }
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for j in 0..dim {
            let noise: f64 = rng.sample(StandardNormal);
            data.push(means[c][j] + noise);
        }
        labels.push(c);
    }
    Dataset::new(Tensor::new(data, vec![n, dim])?, labels, classes)
}

/// [`synthetic_blobs_with`] at the default separation of six standard
/// deviations, far enough apart that a linear classifier is near-perfect.
pub fn synthetic_blobs(n: usize, classes: usize, dim: usize, seed: u64) -> Result<Dataset> {
    synthetic_blobs_with(n, classes, dim, seed, BLOB_SEPARATION)
}

/// A train/test pair over the same sample space.
#[derive(Debug, Clone)]
pub struct DataSplit {
    pub train: Dataset,
    pub test: Dataset,
}

/// Iterator over one epoch of minibatches. Optionally reshuffles from the
/// seed; the final short batch is included.
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl<'a> Iterator for Batches<'a> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.ds.gather(&self.order[self.cursor..end]);
        self.cursor = end;
        Some(batch)
    }
}

/// One epoch of minibatches over `ds`.
pub fn batches(ds: &Dataset, batch_size: usize, seed: u64, shuffle: bool) -> Batches<'_> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
    }
    Batches {
        ds,
        order,
        batch_size,
        cursor: 0,
    }
}

/// Number of batches one epoch yields.
pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn fixture_pair(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
        (dir.join("imgs.idx"), dir.join("lbls.idx"))
    }

    fn write_fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
        // Two 2x2 images with extreme pixel values.
        let images = vec![
            0x00, 0x00, 0x08, 0x03, // magic
            0, 0, 0, 2, // n
            0, 0, 0, 2, // rows
            0, 0, 0, 2, // cols
            0, 255, 255, 0, // image 0
            255, 255, 0, 0, // image 1
        ];
        let labels = vec![
            0x00, 0x00, 0x08, 0x01, // magic
            0, 0, 0, 2, // n
            1, 0,
        ];
        let (ip, lp) = fixture_pair(dir);
        fs::write(&ip, images).unwrap();
        fs::write(&lp, labels).unwrap();
        (ip, lp)
    }

    #[test]
    fn load_handcrafted_fixture_scales_endpoints() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_fixture(dir.path());
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.sample_shape(), &[2, 2]);
        assert_eq!(ds.images.data(), &[0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(ds.labels, vec![1, 0]);
        assert_eq!(ds.class_count, 2);
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_fixture(dir.path());
        let mut bytes = fs::read(&ip).unwrap();
        bytes[3] = 0x02;
        fs::write(&ip, bytes).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err();
        assert!(err.to_string().contains("not an IDX file"), "{err}");
    }

    #[test]
    fn truncated_image_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_fixture(dir.path());
        let bytes = fs::read(&ip).unwrap();
        fs::write(&ip, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::IdxParse(_))));
    }

    #[test]
    fn count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_fixture(dir.path());
        let labels = vec![0x00, 0x00, 0x08, 0x01, 0, 0, 0, 3, 1, 0, 1];
        fs::write(&lp, labels).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::IdxParse(_))));
    }

    #[test]
    fn idx_round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_fixture(dir.path());
        let ds = load_idx(&ip, &lp).unwrap();
        let ip2 = dir.path().join("rt.idx");
        let lp2 = dir.path().join("rt-l.idx");
        save_idx(&ds, &ip2, &lp2).unwrap();
        assert_eq!(fs::read(&ip).unwrap(), fs::read(&ip2).unwrap());
        assert_eq!(fs::read(&lp).unwrap(), fs::read(&lp2).unwrap());
    }

    #[test]
    fn loaded_pixels_stay_in_unit_interval() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_fixture(dir.path());
        let ds = load_idx(&ip, &lp).unwrap();
        assert!(ds.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn blobs_deterministic_per_seed() {
        let a = synthetic_blobs(50, 3, 4, 42).unwrap();
        let b = synthetic_blobs(50, 3, 4, 42).unwrap();
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.labels, b.labels);
        let c = synthetic_blobs(50, 3, 4, 43).unwrap();
        assert_ne!(a.images.data(), c.images.data());
    }

    #[test]
    fn blobs_single_class_all_label_zero() {
        let ds = synthetic_blobs(10, 1, 4, 0).unwrap();
        assert!(ds.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn well_separated_blobs_nearest_mean_oracle() {
        // Distance-6-sigma clusters: a nearest-class-mean classifier gets
        // at least 99%.
        let ds = synthetic_blobs(1000, 2, 8, 7).unwrap();
        let d = ds.sample_len();
        let mut means = vec![vec![0.0; d]; 2];
        let mut counts = [0usize; 2];
        for (i, &l) in ds.labels.iter().enumerate() {
            counts[l] += 1;
            for j in 0..d {
                means[l][j] += ds.images.data()[i * d + j];
            }
        }
        for (m, &c) in means.iter_mut().zip(&counts) {
            for v in m.iter_mut() {
                *v /= c as f64;
            }
        }
        let mut correct = 0;
        for (i, &l) in ds.labels.iter().enumerate() {
            let row = &ds.images.data()[i * d..(i + 1) * d];
            let dist = |m: &[f64]| -> f64 {
                row.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum()
            };
            let pred = if dist(&means[0]) <= dist(&means[1]) { 0 } else { 1 };
            if pred == l {
                correct += 1;
            }
        }
        assert!(correct as f64 / ds.len() as f64 >= 0.99);
    }

    #[test]
    fn batch_sizes_include_short_tail() {
        let ds = synthetic_blobs(10, 2, 3, 0).unwrap();
        let sizes: Vec<usize> = batches(&ds, 4, 0, true).map(|(_, y)| y.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn unshuffled_batches_keep_original_order() {
        let ds = synthetic_blobs(6, 3, 2, 0).unwrap();
        let labels: Vec<usize> = batches(&ds, 4, 9, false).flat_map(|(_, y)| y).collect();
        assert_eq!(labels, ds.labels);
    }

    #[test]
    fn every_sample_appears_exactly_once_per_epoch() {
        // Samples tagged by index so the epoch's union is checkable.
        let n = 37;
        let images = Tensor::new((0..n).map(|i| i as f64).collect(), vec![n, 1]).unwrap();
        let ds = Dataset::new(images, (0..n).map(|i| i % 3).collect(), 3).unwrap();
        let mut seen = HashSet::new();
        let mut total = 0;
        for (x, y) in batches(&ds, 5, 123, true) {
            assert_eq!(x.shape()[0], y.len());
            total += y.len();
            for &v in x.data() {
                assert!(seen.insert(v as usize), "duplicate sample {v}");
            }
        }
        assert_eq!(total, n);
        assert_eq!(seen.len(), n);
    }
}
