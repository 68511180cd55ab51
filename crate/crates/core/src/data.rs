use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Classification dataset with dense feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub dim: usize,
    pub classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(dim: usize, classes: usize) -> Self {
        LabeledDataset {
            dim,
            classes,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn push(&mut self, features: &[f64], label: usize) {
        debug_assert_eq!(features.len(), self.dim);
        debug_assert!(label < self.classes);
        self.features.extend_from_slice(features);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.classes];
        for i in 0..self.len() {
            by_class[self.labels[i]].push(i);
        }
        by_class
    }
}

/// Deterministic Gaussian-blob dataset: class `c` sits at a fixed unit-norm
/// direction, points are center + `noise` * N(0, I). Samples are emitted in
/// class-major order.
pub fn gen_synthetic(
    classes: usize,
    dims: usize,
    per_class: usize,
    noise: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 {
        return Err(Error::Config("need at least 2 classes".into()));
    }
    if dims < 1 {
        return Err(Error::Config("need at least 1 feature dim".into()));
    }
    let mut centers = Vec::with_capacity(classes);
    let mut center_rng = rng::rng(seed, Stream::DataCenters, 0, 0);
    for _ in 0..classes {
        let mut c: Vec<f64> = (0..dims)
            .map(|_| center_rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        c.iter_mut().for_each(|v| *v /= norm);
        centers.push(c);
    }
    let mut ds = LabeledDataset::new(dims, classes);
    let mut noise_rng = rng::rng(seed, Stream::DataNoise, 0, 0);
    let mut point = vec![0.0; dims];
    for (label, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for (p, &c) in point.iter_mut().zip(center) {
                *p = c + noise * noise_rng.sample::<f64, _>(StandardNormal);
            }
            ds.push(&point, label);
        }
    }
    Ok(ds)
}

fn read_be_u32(bytes: &[u8], off: usize, path: &Path) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::TruncatedFile {
            path: path.to_path_buf(),
            needed: off + 4,
            have: bytes.len(),
        })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

/// Load an MNIST-style IDX image/label pair. Pixels are scaled to [0, 1];
/// the class count is `max(label) + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let img = read_file(images_path)?;
    let magic = read_be_u32(&img, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: images_path.to_path_buf(),
            expected: IDX_IMAGES_MAGIC,
            got: magic,
        });
    }
    let n_images = read_be_u32(&img, 4, images_path)? as usize;
    let rows = read_be_u32(&img, 8, images_path)? as usize;
    let cols = read_be_u32(&img, 12, images_path)? as usize;
    let dim = rows * cols;
    let needed = 16 + n_images * dim;
    if img.len() < needed {
        return Err(Error::TruncatedFile {
            path: images_path.to_path_buf(),
            needed,
            have: img.len(),
        });
    }

    let lab = read_file(labels_path)?;
    let magic = read_be_u32(&lab, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: labels_path.to_path_buf(),
            expected: IDX_LABELS_MAGIC,
            got: magic,
        });
    }
    let n_labels = read_be_u32(&lab, 4, labels_path)? as usize;
    if lab.len() < 8 + n_labels {
        return Err(Error::TruncatedFile {
            path: labels_path.to_path_buf(),
            needed: 8 + n_labels,
            have: lab.len(),
        });
    }
    if n_images != n_labels {
        return Err(Error::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }

    let labels = &lab[8..8 + n_labels];
    let classes = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    let mut ds = LabeledDataset::new(dim, classes);
    let mut buf = vec![0.0; dim];
    for i in 0..n_images {
        let px = &img[16 + i * dim..16 + (i + 1) * dim];
        for (b, &p) in buf.iter_mut().zip(px) {
            *b = p as f64 / 255.0;
        }
        ds.push(&buf, labels[i] as usize);
    }
    Ok(ds)
}

/// How samples are spread across clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum PartitionMode {
    /// Uniform random equal split.
    Iid,
    /// Per-client class count drawn uniformly from {2, ..., C}.
    NoniidA,
    /// Exactly three randomly selected classes per client.
    NoniidB,
    /// Global pool reduced to `n1` samples for common classes and
    /// round(0.4 * n1) for the three rare classes (labels 0..2), then split
    /// like NoniidB.
    Imbalanced { n1: usize },
}

/// Disjoint per-client index lists into a parent dataset plus the per-client
/// class proportions `dis_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub client_indices: Vec<Vec<usize>>,
    pub proportions: Vec<Vec<f64>>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.client_indices.len()
    }

    pub fn samples(&self, client: usize) -> usize {
        self.client_indices[client].len()
    }

    /// Reproducibility manifest: client id -> index list.
    pub fn manifest_json(&self) -> String {
        serde_json::to_string(&self.client_indices).expect("indices serialize")
    }
}

fn proportions_for(ds: &LabeledDataset, indices: &[Vec<usize>]) -> Vec<Vec<f64>> {
    indices
        .iter()
        .map(|idx| {
            let mut counts = vec![0usize; ds.classes];
            for &i in idx {
                counts[ds.label(i)] += 1;
            }
            let total = idx.len().max(1) as f64;
            counts.iter().map(|&c| c as f64 / total).collect()
        })
        .collect()
}

/// Split `per_class` index pools among their claimant clients, near-evenly.
fn split_classes(
    by_class: &[Vec<usize>],
    client_classes: &[Vec<usize>],
    rng: &mut impl Rng,
) -> Result<Vec<Vec<usize>>> {
    let n_clients = client_classes.len();
    let mut claimants: Vec<Vec<usize>> = vec![Vec::new(); by_class.len()];
    for (client, classes) in client_classes.iter().enumerate() {
        for &c in classes {
            claimants[c].push(client);
        }
    }
    let mut out = vec![Vec::new(); n_clients];
    for (c, pool) in by_class.iter().enumerate() {
        let owners = &claimants[c];
        if owners.is_empty() {
            continue;
        }
        if pool.len() < owners.len() {
            return Err(Error::InsufficientData(format!(
                "class {c} has {} samples for {} claimants",
                pool.len(),
                owners.len()
            )));
        }
        let mut shuffled = pool.clone();
        shuffled.shuffle(rng);
        for (i, &idx) in shuffled.iter().enumerate() {
            out[owners[i % owners.len()]].push(idx);
        }
    }
    for idx in &mut out {
        idx.sort_unstable();
    }
    Ok(out)
}

/// Assign dataset indices to `n_clients` clients under the given mode.
/// Bit-identical under a fixed seed.
pub fn partition(
    ds: &LabeledDataset,
    n_clients: usize,
    mode: PartitionMode,
    seed: u64,
) -> Result<Partition> {
    if n_clients == 0 {
        return Err(Error::Config("need at least 1 client".into()));
    }
    if ds.is_empty() {
        return Err(Error::InsufficientData("dataset is empty".into()));
    }
    let mut rng = rng::rng(seed, Stream::Partition, n_clients as u64, 0);
    let client_indices = match mode {
        PartitionMode::Iid => {
            let mut all: Vec<usize> = (0..ds.len()).collect();
            all.shuffle(&mut rng);
            let mut out = vec![Vec::new(); n_clients];
            for (i, idx) in all.into_iter().enumerate() {
                out[i % n_clients].push(idx);
            }
            for idx in &mut out {
                idx.sort_unstable();
            }
            out
        }
        PartitionMode::NoniidA => {
            if ds.classes < 2 {
                return Err(Error::Config("non-iid-a needs at least 2 classes".into()));
            }
            let by_class = ds.class_indices();
            let mut client_classes = Vec::with_capacity(n_clients);
            let all_classes: Vec<usize> = (0..ds.classes).collect();
            for _ in 0..n_clients {
                let k = rng.gen_range(2..=ds.classes);
                let mut picked = all_classes.clone();
                picked.shuffle(&mut rng);
                picked.truncate(k);
                picked.sort_unstable();
                client_classes.push(picked);
            }
            split_classes(&by_class, &client_classes, &mut rng)?
        }
        PartitionMode::NoniidB => {
            let by_class = ds.class_indices();
            noniid_b_split(ds.classes, &by_class, n_clients, &mut rng)?
        }
        PartitionMode::Imbalanced { n1 } => {
            if ds.classes < 4 {
                return Err(Error::Config(
                    "imbalanced mode needs at least 4 classes (3 rare + common)".into(),
                ));
            }
            let n2 = ((n1 as f64) * 0.4).round() as usize;
            let mut by_class = ds.class_indices();
            for (c, pool) in by_class.iter_mut().enumerate() {
                let want = if c < 3 { n2 } else { n1 };
                if pool.len() < want {
                    return Err(Error::InsufficientData(format!(
                        "class {c} has {} samples, imbalanced pool wants {want}",
                        pool.len()
                    )));
                }
                pool.shuffle(&mut rng);
                pool.truncate(want);
                pool.sort_unstable();
            }
            noniid_b_split(ds.classes, &by_class, n_clients, &mut rng)?
        }
    };
    let proportions = proportions_for(ds, &client_indices);
    Ok(Partition {
        client_indices,
        proportions,
    })
}

fn noniid_b_split(
    classes: usize,
    by_class: &[Vec<usize>],
    n_clients: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<usize>>> {
    if classes < 3 {
        return Err(Error::Config("non-iid-b needs at least 3 classes".into()));
    }
    let all_classes: Vec<usize> = (0..classes).collect();
    let mut client_classes = Vec::with_capacity(n_clients);
    for _ in 0..n_clients {
        let mut picked = all_classes.clone();
        picked.shuffle(rng);
        picked.truncate(3);
        picked.sort_unstable();
        client_classes.push(picked);
    }
    split_classes(by_class, &client_classes, rng)
}

/// Data-distribution uniformity score `sum_c min(C * dis_c, 1)`; ranges in
/// (0, C] and peaks at the uniform distribution.
pub fn distribution_score(dis: &[f64], classes: usize) -> f64 {
    dis.iter()
        .map(|&d| (classes as f64 * d).min(1.0))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn synthetic_is_deterministic() {
        let a = gen_synthetic(2, 2, 10, 0.3, 7).unwrap();
        let b = gen_synthetic(2, 2, 10, 0.3, 7).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(2, 2, 10, 0.3, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_zero_noise_collapses_to_centers() {
        let ds = gen_synthetic(3, 4, 5, 0.0, 1).unwrap();
        for c in 0..3 {
            let first = ds.feature(c * 5).to_vec();
            for i in 0..5 {
                assert_eq!(ds.feature(c * 5 + i), &first[..]);
            }
            let norm: f64 = first.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn iid_single_client_gets_everything() {
        let ds = gen_synthetic(2, 2, 10, 0.3, 7).unwrap();
        let p = partition(&ds, 1, PartitionMode::Iid, 1).unwrap();
        assert_eq!(p.client_indices[0], (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn noniid_b_gives_three_classes_each() {
        let ds = gen_synthetic(10, 2, 200, 0.3, 7).unwrap();
        let p = partition(&ds, 20, PartitionMode::NoniidB, 1).unwrap();
        for dis in &p.proportions {
            let nonzero = dis.iter().filter(|&&d| d > 0.0).count();
            assert_eq!(nonzero, 3);
        }
    }

    #[test]
    fn noniid_a_class_counts_in_range() {
        let ds = gen_synthetic(10, 2, 300, 0.3, 7).unwrap();
        let p = partition(&ds, 12, PartitionMode::NoniidA, 5).unwrap();
        for dis in &p.proportions {
            let nonzero = dis.iter().filter(|&&d| d > 0.0).count();
            assert!((2..=10).contains(&nonzero), "got {nonzero} classes");
        }
    }

    #[test]
    fn imbalanced_rare_counts() {
        let ds = gen_synthetic(10, 2, 150, 0.3, 7).unwrap();
        let p = partition(&ds, 10, PartitionMode::Imbalanced { n1: 100 }, 3).unwrap();
        let mut counts = vec![0usize; 10];
        for idx in &p.client_indices {
            for &i in idx {
                counts[ds.label(i)] += 1;
            }
        }
        // Rare classes land 40 samples each when all are claimed.
        for c in 0..3 {
            assert!(counts[c] <= 40);
        }
        for c in 3..10 {
            assert!(counts[c] <= 100);
        }
        let claimed: Vec<usize> = (0..10).filter(|&c| counts[c] > 0).collect();
        for &c in &claimed {
            let cap = if c < 3 { 40 } else { 100 };
            assert_eq!(counts[c], cap, "claimed class {c} should be fully split");
        }
    }

    #[test]
    fn partitions_are_disjoint_and_deterministic() {
        let ds = gen_synthetic(10, 2, 100, 0.3, 7).unwrap();
        for mode in [
            PartitionMode::Iid,
            PartitionMode::NoniidA,
            PartitionMode::NoniidB,
            PartitionMode::Imbalanced { n1: 60 },
        ] {
            let a = partition(&ds, 8, mode, 42).unwrap();
            let b = partition(&ds, 8, mode, 42).unwrap();
            assert_eq!(a, b);
            let mut seen = std::collections::HashSet::new();
            for idx in &a.client_indices {
                for &i in idx {
                    assert!(i < ds.len());
                    assert!(seen.insert(i), "index {i} assigned twice");
                }
            }
        }
    }

    #[test]
    fn insufficient_data_is_reported() {
        let ds = gen_synthetic(10, 2, 1, 0.3, 7).unwrap();
        let err = partition(&ds, 30, PartitionMode::NoniidB, 1).unwrap_err();
        assert!(matches!(err, Error::InsufficientData(_)));
    }

    #[test]
    fn distribution_score_cases() {
        let uniform = vec![0.1; 10];
        assert_abs_diff_eq!(distribution_score(&uniform, 10), 10.0, epsilon = 1e-12);

        let mut two = vec![0.0; 10];
        two[0] = 0.5;
        two[1] = 0.5;
        assert_abs_diff_eq!(distribution_score(&two, 10), 2.0, epsilon = 1e-12);

        let mut skew = vec![0.0; 10];
        skew[0] = 0.95;
        skew[1] = 0.05;
        assert_abs_diff_eq!(distribution_score(&skew, 10), 1.5, epsilon = 1e-12);
    }

    fn idx_fixture(n: usize, rows: usize, cols: usize) -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&(n as u32).to_be_bytes());
        img.extend_from_slice(&(rows as u32).to_be_bytes());
        img.extend_from_slice(&(cols as u32).to_be_bytes());
        for i in 0..n * rows * cols {
            img.push((i % 251) as u8);
        }
        let mut lab = Vec::new();
        lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&(n as u32).to_be_bytes());
        for i in 0..n {
            lab.push((i % 3) as u8);
        }
        (img, lab)
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = idx_fixture(6, 2, 3);
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lab.idx");
        std::fs::write(&ip, &img).unwrap();
        std::fs::write(&lp, &lab).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.dim, 6);
        assert_eq!(ds.classes, 3);
        assert_abs_diff_eq!(ds.feature(0)[1], 1.0 / 255.0, epsilon = 1e-15);
    }

    #[test]
    fn idx_error_paths_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = idx_fixture(6, 2, 3);
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lab.idx");

        // Bad magic.
        let mut bad = img.clone();
        bad[3] = 0x99;
        std::fs::write(&ip, &bad).unwrap();
        std::fs::write(&lp, &lab).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::BadMagic { .. })));

        // Zero-byte images file.
        std::fs::write(&ip, []).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(Error::TruncatedFile { .. })
        ));

        // Count mismatch.
        let (_, lab5) = idx_fixture(5, 2, 3);
        std::fs::write(&ip, &img).unwrap();
        std::fs::write(&lp, &lab5).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(Error::CountMismatch {
                images: 6,
                labels: 5
            })
        ));
    }
}
