//! Desk-scale datasets: synthetic 2-D tasks and an IDX image loader.
//!
//! Features are kept in [0,1] per dimension so l∞ attack radii in the
//! 0.1–0.3 range are meaningful on synthetic data.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::Tensor;

/// Immutable labelled dataset. Labels are class indices `0..C`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Per-dimension [lo, hi] feature bounds, when the data has them.
    pub feature_box: Option<Vec<(f64, f64)>>,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        inputs: Vec<Tensor>,
        labels: Vec<usize>,
        num_classes: usize,
        feature_box: Option<Vec<(f64, f64)>>,
        provenance: String,
    ) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} inputs vs {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidLabel {
                label: bad,
                classes: num_classes,
            });
        }
        if let Some(bx) = &feature_box {
            for t in &inputs {
                if t.len() != bx.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "box has {} dims, input has {}",
                        bx.len(),
                        t.len()
                    )));
                }
                for (v, (lo, hi)) in t.data().iter().zip(bx) {
                    if v < lo || v > hi {
                        return Err(Error::InvalidArgument(format!(
                            "input value {v} outside box [{lo}, {hi}]"
                        )));
                    }
                }
            }
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            feature_box,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, |t| t.len())
    }

    /// New dataset holding the selected items, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut inputs = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("index {i} out of range")));
            }
            inputs.push(self.inputs[i].clone());
            labels.push(self.labels[i]);
        }
        Ok(Self {
            inputs,
            labels,
            num_classes: self.num_classes,
            feature_box: self.feature_box.clone(),
            provenance: self.provenance.clone(),
        })
    }

    /// Split into a train/test pair: disjoint, covering, deterministic.
    /// With a seed the items are permuted first; without one the split
    /// follows generation order.
    pub fn split(&self, n_train: usize, seed: Option<u64>) -> Result<(Self, Self)> {
        if n_train > self.len() {
            return Err(Error::InvalidArgument(format!(
                "n_train {} exceeds dataset size {}",
                n_train,
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(s) = seed {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
        }
        Ok((
            self.subset(&order[..n_train])?,
            self.subset(&order[n_train..])?,
        ))
    }

    /// Mini-batch index lists. With a seed the order is a deterministic
    /// permutation; without one it is dataset order.
    pub fn batches(&self, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(s) = shuffle_seed {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
        }
        let size = batch_size.max(1);
        order.chunks(size).map(|c| c.to_vec()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    TwoMoons,
    GaussianBlobs,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-moons" => Ok(SyntheticKind::TwoMoons),
            "gaussian-blobs" => Ok(SyntheticKind::GaussianBlobs),
            other => Err(Error::InvalidArgument(format!(
                "unknown synthetic dataset kind '{other}'"
            ))),
        }
    }
}

/// Canonical two-moons frame, scaled uniformly by 1/3 so the arcs keep
/// their aspect ratio: x ∈ [−1, 2] fills [0, 1], y ∈ [−0.5, 1] sits in
/// the centered band [0.25, 0.75].
fn moons_to_unit(x: f64, y: f64) -> (f64, f64) {
    (
        ((x + 1.0) / 3.0).clamp(0.0, 1.0),
        ((y + 0.5) / 3.0 + 0.25).clamp(0.0, 1.0),
    )
}

/// Canonical blobs frame: both coordinates in [−2, 2].
fn blobs_to_unit(x: f64, y: f64) -> (f64, f64) {
    (((x + 2.0) / 4.0).clamp(0.0, 1.0), ((y + 2.0) / 4.0).clamp(0.0, 1.0))
}

/// Balanced 2-D synthetic dataset, rescaled into the unit square.
///
/// `noise` is the standard deviation of Gaussian jitter applied before
/// rescaling; points the jitter pushes outside the canonical frame are
/// clamped at the frame boundary. Classes are interleaved, so any prefix
/// is near-balanced, and class counts differ by at most one.
pub fn generate_synthetic(
    kind: SyntheticKind,
    n: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two points".into()));
    }
    if noise < 0.0 {
        return Err(Error::InvalidArgument("noise must be non-negative".into()));
    }
    let n0 = n - n / 2;
    let n1 = n / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).unwrap();
    let jitter = |rng: &mut ChaCha8Rng| {
        if noise > 0.0 {
            normal.sample(rng)
        } else {
            0.0
        }
    };

    let mut class0 = Vec::with_capacity(n0);
    let mut class1 = Vec::with_capacity(n1);
    match kind {
        SyntheticKind::TwoMoons => {
            for i in 0..n0 {
                let t = if n0 == 1 {
                    0.0
                } else {
                    std::f64::consts::PI * i as f64 / (n0 - 1) as f64
                };
                let (x, y) = (t.cos() + jitter(&mut rng), t.sin() + jitter(&mut rng));
                class0.push(moons_to_unit(x, y));
            }
            for i in 0..n1 {
                let t = if n1 == 1 {
                    0.0
                } else {
                    std::f64::consts::PI * i as f64 / (n1 - 1) as f64
                };
                let (x, y) = (
                    1.0 - t.cos() + jitter(&mut rng),
                    0.5 - t.sin() + jitter(&mut rng),
                );
                class1.push(moons_to_unit(x, y));
            }
        }
        SyntheticKind::GaussianBlobs => {
            for _ in 0..n0 {
                let (x, y) = (-1.0 + jitter(&mut rng), -1.0 + jitter(&mut rng));
                class0.push(blobs_to_unit(x, y));
            }
            for _ in 0..n1 {
                let (x, y) = (1.0 + jitter(&mut rng), 1.0 + jitter(&mut rng));
                class1.push(blobs_to_unit(x, y));
            }
        }
    }

    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let (mut i0, mut i1) = (class0.into_iter(), class1.into_iter());
    loop {
        match (i0.next(), i1.next()) {
            (None, None) => break,
            (a, b) => {
                if let Some((x, y)) = a {
                    inputs.push(Tensor::vector(vec![x, y])?);
                    labels.push(0);
                }
                if let Some((x, y)) = b {
                    inputs.push(Tensor::vector(vec![x, y])?);
                    labels.push(1);
                }
            }
        }
    }

    let name = match kind {
        SyntheticKind::TwoMoons => "two-moons",
        SyntheticKind::GaussianBlobs => "gaussian-blobs",
    };
    Dataset::new(
        inputs,
        labels,
        2,
        Some(vec![(0.0, 1.0); 2]),
        format!("{name}(n={n}, noise={noise}, seed={seed})"),
    )
}

// ── IDX format ───────────────────────────────────────────────────────
//
// Big-endian. Images: magic 0x00000803, then count, rows, cols as u32,
// then unsigned bytes row-major. Labels: magic 0x00000801, then count,
// then one byte per item.

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Load at most `limit` items from an IDX image/label file pair. Pixels
/// are scaled to [0,1]; the feature box is the unit cube.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    limit: usize,
) -> Result<Dataset> {
    if limit == 0 {
        return Err(Error::Empty("limit of zero items".into()));
    }
    let mut images = Vec::new();
    std::fs::File::open(&images_path)?.read_to_end(&mut images)?;
    let mut labels = Vec::new();
    std::fs::File::open(&labels_path)?.read_to_end(&mut labels)?;
    load_idx_bytes(&images, &labels, limit)
}

pub fn load_idx_bytes(images: &[u8], labels: &[u8], limit: usize) -> Result<Dataset> {
    if limit == 0 {
        return Err(Error::Empty("limit of zero items".into()));
    }
    let img_magic = read_be_u32(images, 0)?;
    if img_magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad image magic {img_magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = read_be_u32(images, 4)? as usize;
    let rows = read_be_u32(images, 8)? as usize;
    let cols = read_be_u32(images, 12)? as usize;
    let pixels = rows * cols;
    if images.len() < 16 + count * pixels {
        return Err(Error::Format(format!(
            "truncated image file: {} bytes for {count} items of {pixels} pixels",
            images.len()
        )));
    }

    let lbl_magic = read_be_u32(labels, 0)?;
    if lbl_magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad label magic {lbl_magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let lbl_count = read_be_u32(labels, 4)? as usize;
    if lbl_count != count {
        return Err(Error::Format(format!(
            "{count} images but {lbl_count} labels"
        )));
    }
    if labels.len() < 8 + count {
        return Err(Error::Format(format!(
            "truncated label file: {} bytes for {count} items",
            labels.len()
        )));
    }

    let take = limit.min(count);
    if take == 0 {
        return Err(Error::Empty("no items in file".into()));
    }
    let mut inputs = Vec::with_capacity(take);
    let mut out_labels = Vec::with_capacity(take);
    for i in 0..take {
        let start = 16 + i * pixels;
        let data: Vec<f64> = images[start..start + pixels]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        inputs.push(Tensor::vector(data)?);
        out_labels.push(labels[8 + i] as usize);
    }
    let num_classes = out_labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(
        inputs,
        out_labels,
        num_classes.max(2),
        Some(vec![(0.0, 1.0); pixels]),
        format!("idx({take} of {count} items, {rows}x{cols})"),
    )
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Format("truncated file header".into()));
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moons_are_balanced_and_in_unit_square() {
        let d = generate_synthetic(SyntheticKind::TwoMoons, 100, 0.1, 7).unwrap();
        assert_eq!(d.len(), 100);
        let c0 = d.labels.iter().filter(|&&y| y == 0).count();
        assert_eq!(c0, 50);
        for t in &d.inputs {
            for v in t.data() {
                assert!((0.0..=1.0).contains(v));
            }
        }
    }

    #[test]
    fn odd_count_differs_by_at_most_one() {
        let d = generate_synthetic(SyntheticKind::TwoMoons, 101, 0.0, 1).unwrap();
        let c0 = d.labels.iter().filter(|&&y| y == 0).count() as i64;
        let c1 = d.labels.iter().filter(|&&y| y == 1).count() as i64;
        assert!((c0 - c1).abs() <= 1);
    }

    #[test]
    fn noiseless_moons_lie_on_canonical_arcs() {
        let d = generate_synthetic(SyntheticKind::TwoMoons, 60, 0.0, 3).unwrap();
        for (t, &y) in d.inputs.iter().zip(&d.labels) {
            // Undo the canonical rescale and check the arc equation.
            let x = t.data()[0] * 3.0 - 1.0;
            let v = (t.data()[1] - 0.25) * 3.0 - 0.5;
            let r = if y == 0 {
                (x * x + v * v).sqrt()
            } else {
                let (cx, cy) = (1.0, 0.5);
                ((x - cx).powi(2) + (v - cy).powi(2)).sqrt()
            };
            assert!((r - 1.0).abs() < 1e-9, "off-arc point ({x}, {v})");
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = generate_synthetic(SyntheticKind::GaussianBlobs, 64, 0.3, 9).unwrap();
        let b = generate_synthetic(SyntheticKind::GaussianBlobs, 64, 0.3, 9).unwrap();
        for (x, y) in a.inputs.iter().zip(&b.inputs) {
            assert_eq!(x.data(), y.data());
        }
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn split_is_disjoint_and_covering() {
        let d = generate_synthetic(SyntheticKind::TwoMoons, 50, 0.05, 2).unwrap();
        let (train, test) = d.split(30, Some(11)).unwrap();
        assert_eq!(train.len() + test.len(), d.len());
        let mut seen: Vec<Vec<u64>> = Vec::new();
        for t in train.inputs.iter().chain(&test.inputs) {
            let bits: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            assert!(!seen.contains(&bits));
            seen.push(bits);
        }
    }

    #[test]
    fn batches_deterministic_and_ordered_without_seed() {
        let d = generate_synthetic(SyntheticKind::TwoMoons, 10, 0.0, 0).unwrap();
        let plain = d.batches(4, None);
        assert_eq!(plain[0], vec![0, 1, 2, 3]);
        let a = d.batches(4, Some(5));
        let b = d.batches(4, Some(5));
        assert_eq!(a, b);
    }

    fn tiny_idx_pair(pixel: u8, label: u8) -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        images.extend_from_slice(&1u32.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&[pixel; 4]);
        let mut labels = Vec::new();
        labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        labels.extend_from_slice(&1u32.to_be_bytes());
        labels.push(label);
        (images, labels)
    }

    #[test]
    fn idx_scales_bytes() {
        let (images, labels) = tiny_idx_pair(255, 1);
        let d = load_idx_bytes(&images, &labels, 10).unwrap();
        assert_eq!(d.len(), 1);
        assert!(d.inputs[0].data().iter().all(|&v| v == 1.0));

        let (images, labels) = tiny_idx_pair(128, 0);
        let d = load_idx_bytes(&images, &labels, 1).unwrap();
        assert!((d.inputs[0].data()[0] - 128.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn idx_rejects_bad_inputs() {
        let (images, labels) = tiny_idx_pair(7, 0);
        assert!(load_idx_bytes(&images, &labels, 0).is_err());

        let mut bad_magic = images.clone();
        bad_magic[3] = 0x99;
        assert!(load_idx_bytes(&bad_magic, &labels, 1).is_err());

        let truncated = &images[..images.len() - 2];
        assert!(load_idx_bytes(truncated, &labels, 1).is_err());

        let mut wrong_count = labels.clone();
        wrong_count[7] = 9;
        assert!(load_idx_bytes(&images, &wrong_count, 1).is_err());
    }
}
