//! Dataset loading (IDX, CSV, synthetic blobs) and client partitioning.
//!
//! Partitions are label-skewed (each client draws from `S` assigned
//! classes) and size-skewed (client `i` keeps a `(i+1)^unbalance`-
//! proportional share), with a stratified per-client train/test split.
//! Clients are disjoint by sample index and every loader is deterministic
//! per seed.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seed;

/// An in-memory dataset with features scaled into `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Integrity(format!(
                "{} feature rows for {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Integrity(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// New dataset holding the given rows (copied).
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            name: name.into(),
        }
    }

    /// Sample indices grouped by class, in ascending order within a class.
    fn class_pools(&self) -> Vec<Vec<usize>> {
        let mut pools = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            pools[y].push(i);
        }
        pools
    }
}

/// One client's local data.
#[derive(Debug, Clone)]
pub struct ClientSplit {
    pub train: Dataset,
    pub test: Dataset,
}

/// Per-client train/test datasets produced by a partitioner.
#[derive(Debug, Clone)]
pub struct Partition {
    pub clients: Vec<ClientSplit>,
    pub classes_per_client: usize,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }
}

/// Rescale every feature column into `[0, 1]`; constant columns become 0.
fn min_max_rescale(features: &mut Array2<f64>) {
    for mut col in features.axis_iter_mut(Axis(1)) {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in col.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let range = hi - lo;
        if range > 0.0 {
            col.mapv_inplace(|v| (v - lo) / range);
        } else {
            col.fill(0.0);
        }
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], offset: usize, path: &std::path::Path) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Format(format!(
            "{}: truncated at byte {} (need {} bytes)",
            path.display(),
            bytes.len(),
            end
        )));
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Load an IDX image/label file pair (big-endian headers, `u8` payload).
/// Pixels are scaled by 1/255 and flattened row-major.
pub fn load_idx(images_path: &std::path::Path, labels_path: &std::path::Path) -> Result<Dataset> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels_raw = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;

    let magic = read_be_u32(&images, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad image magic 0x{magic:08x} at byte 0 (expected 0x{IDX_IMAGES_MAGIC:08x})",
            images_path.display()
        )));
    }
    let n = read_be_u32(&images, 4, images_path)? as usize;
    let rows = read_be_u32(&images, 8, images_path)? as usize;
    let cols = read_be_u32(&images, 12, images_path)? as usize;
    let pixel_count = n * rows * cols;
    if images.len() < 16 + pixel_count {
        return Err(Error::Format(format!(
            "{}: truncated at byte {} (expected {} pixel bytes after the 16-byte header)",
            images_path.display(),
            images.len(),
            pixel_count
        )));
    }

    let magic = read_be_u32(&labels_raw, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad label magic 0x{magic:08x} at byte 0 (expected 0x{IDX_LABELS_MAGIC:08x})",
            labels_path.display()
        )));
    }
    let n_labels = read_be_u32(&labels_raw, 4, labels_path)? as usize;
    if n_labels != n {
        return Err(Error::Format(format!(
            "{}: {} labels for {} images",
            labels_path.display(),
            n_labels,
            n
        )));
    }
    if labels_raw.len() < 8 + n_labels {
        return Err(Error::Format(format!(
            "{}: truncated at byte {} (expected {} label bytes after the 8-byte header)",
            labels_path.display(),
            labels_raw.len(),
            n_labels
        )));
    }

    let features = Array2::from_shape_vec(
        (n, rows * cols),
        images[16..16 + pixel_count]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect(),
    )
    .expect("pixel count matches shape");
    let labels: Vec<usize> = labels_raw[8..8 + n_labels]
        .iter()
        .map(|&b| b as usize)
        .collect();
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    if num_classes < 2 {
        return Err(Error::Format(format!(
            "{}: fewer than two classes present",
            labels_path.display()
        )));
    }
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Dataset::new(features, labels, num_classes, name)
}

/// Load a CSV table: header row, real feature columns, last column an
/// integer class label. Features are min-max rescaled into `[0, 1]`.
pub fn load_csv(path: &std::path::Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if record.len() < 2 {
            return Err(Error::Format(format!(
                "{}: row {} has {} columns, need at least 2",
                path.display(),
                line + 2,
                record.len()
            )));
        }
        let mut features = Vec::with_capacity(record.len() - 1);
        for field in record.iter().take(record.len() - 1) {
            features.push(field.parse::<f64>().map_err(|_| {
                Error::Format(format!(
                    "{}: row {}: bad feature value {field:?}",
                    path.display(),
                    line + 2
                ))
            })?);
        }
        let label_field = record.get(record.len() - 1).unwrap();
        let label = label_field.parse::<usize>().map_err(|_| {
            Error::Format(format!(
                "{}: row {}: bad label {label_field:?}",
                path.display(),
                line + 2
            ))
        })?;
        rows.push(features);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(Error::Empty(format!("{}: no data rows", path.display())));
    }
    let dim = rows[0].len();
    if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
        return Err(Error::Format(format!(
            "{}: row {} has {} feature columns, expected {dim}",
            path.display(),
            bad + 2,
            rows[bad].len()
        )));
    }
    let mut features =
        Array2::from_shape_vec((rows.len(), dim), rows.into_iter().flatten().collect())
            .expect("row lengths checked");
    min_max_rescale(&mut features);
    let num_classes = labels.iter().copied().max().unwrap() + 1;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    Dataset::new(features, labels, num_classes, name)
}

/// Gaussian blobs: one class mean per class sampled on a sphere of radius
/// `separation`, unit variance, min-max rescaled to `[0, 1]`.
pub fn generate_synthetic(
    num_classes: usize,
    samples_per_class: usize,
    dim: usize,
    separation: f64,
    seed_value: u64,
) -> Result<Dataset> {
    if num_classes < 2 || samples_per_class == 0 || dim == 0 {
        return Err(Error::Config(
            "synthetic data needs >= 2 classes and positive sizes".into(),
        ));
    }
    if separation < 0.0 || !separation.is_finite() {
        return Err(Error::Config(format!(
            "separation must be nonnegative, got {separation}"
        )));
    }
    let mut rng = seed::rng_from(seed_value);
    let mut means = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let raw: Vec<f64> = (0..dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = if norm > 1e-12 { separation / norm } else { 0.0 };
        means.push(raw.into_iter().map(|v| v * scale).collect::<Vec<f64>>());
    }
    let n = num_classes * samples_per_class;
    let mut features = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for s in 0..samples_per_class {
            let row = c * samples_per_class + s;
            for (d, &mu) in mean.iter().enumerate() {
                features[[row, d]] = mu + rng.sample::<f64, _>(StandardNormal);
            }
            labels.push(c);
        }
    }
    min_max_rescale(&mut features);
    Dataset::new(features, labels, num_classes, "synthetic")
}

/// Keep at most `max_total` samples, preserving class proportions; pick
/// is deterministic per seed.
pub fn stratified_subsample(data: &Dataset, max_total: usize, seed_value: u64) -> Dataset {
    if max_total >= data.len() {
        return data.clone();
    }
    let mut rng = seed::rng_from(seed_value);
    let mut keep: Vec<usize> = Vec::with_capacity(max_total);
    let pools = data.class_pools();
    for mut pool in pools {
        pool.shuffle(&mut rng);
        let share = pool.len() * max_total / data.len();
        keep.extend_from_slice(&pool[..share.min(pool.len())]);
    }
    keep.sort_unstable();
    data.subset(&keep, data.name.clone())
}

/// Stratified within-client train/test split. Test takes a rounded
/// `test_fraction` share of each class, at least one sample per side when
/// `strict`, and errors (naming the class) when a class cannot supply both
/// sides.
fn split_train_test(
    client_id: usize,
    data: &Dataset,
    indices_by_class: &[Vec<usize>],
    test_fraction: f64,
    strict: bool,
) -> Result<ClientSplit> {
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (class, pool) in indices_by_class.iter().enumerate() {
        if pool.is_empty() {
            continue;
        }
        if pool.len() < 2 {
            if strict {
                return Err(Error::Partition(format!(
                    "client {client_id}: class {class} has only {} sample(s), cannot split train/test",
                    pool.len()
                )));
            }
            train_idx.extend_from_slice(pool);
            continue;
        }
        let want = (test_fraction * pool.len() as f64).round() as usize;
        let n_test = want.clamp(1, pool.len() - 1);
        let (head, tail) = pool.split_at(pool.len() - n_test);
        train_idx.extend_from_slice(head);
        test_idx.extend_from_slice(tail);
    }
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::Partition(format!(
            "client {client_id}: empty {} split",
            if train_idx.is_empty() {
                "train"
            } else {
                "test"
            }
        )));
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok(ClientSplit {
        train: data.subset(&train_idx, format!("{}/client{client_id}/train", data.name)),
        test: data.subset(&test_idx, format!("{}/client{client_id}/test", data.name)),
    })
}

fn check_partition_args(data: &Dataset, m: usize, test_fraction: f64) -> Result<()> {
    if m == 0 {
        return Err(Error::Config("partition needs at least one client".into()));
    }
    if m > data.len() {
        return Err(Error::Partition(format!(
            "{m} clients for {} samples",
            data.len()
        )));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    Ok(())
}

/// Label- and size-skewed partition. Classes are shuffled and dealt `S`
/// per client round-robin so every class is owned when `m * S` covers the
/// class count; a class owned by several clients is divided evenly among
/// them; client `i` then keeps a `((i+1)/m)^unbalance` fraction of its
/// share (`unbalance = 0` keeps everything).
pub fn partition_noniid(
    data: &Dataset,
    m: usize,
    classes_per_client: usize,
    unbalance: f64,
    test_fraction: f64,
    seed_value: u64,
) -> Result<Partition> {
    check_partition_args(data, m, test_fraction)?;
    let s = classes_per_client;
    if s == 0 || s > data.num_classes {
        return Err(Error::Config(format!(
            "classes_per_client must be in 1..={}, got {s}",
            data.num_classes
        )));
    }
    if unbalance < 0.0 || !unbalance.is_finite() {
        return Err(Error::Config(format!(
            "unbalance must be nonnegative, got {unbalance}"
        )));
    }
    let mut rng = seed::rng_from(seed::mix(seed_value, seed::TAG_DATA));

    let mut class_order: Vec<usize> = (0..data.num_classes).collect();
    class_order.shuffle(&mut rng);
    // deal S classes per client round-robin over the shuffled order
    let assigned: Vec<Vec<usize>> = (0..m)
        .map(|i| {
            (0..s)
                .map(|t| class_order[(i * s + t) % data.num_classes])
                .collect()
        })
        .collect();
    let mut owners: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes];
    for (client, classes) in assigned.iter().enumerate() {
        for &c in classes {
            owners[c].push(client);
        }
    }

    let mut pools = data.class_pools();
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }

    // per client, per class: the owned slice of the shuffled class pool
    let mut shares: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); data.num_classes]; m];
    for (class, owner_list) in owners.iter().enumerate() {
        if owner_list.is_empty() {
            continue;
        }
        let pool = &pools[class];
        let k = owner_list.len();
        for (slot, &client) in owner_list.iter().enumerate() {
            let start = slot * pool.len() / k;
            let end = (slot + 1) * pool.len() / k;
            if start == end {
                return Err(Error::Partition(format!(
                    "class {class} has zero available samples for client {client}"
                )));
            }
            shares[client][class] = pool[start..end].to_vec();
        }
    }

    let max_weight = (m as f64).powf(unbalance);
    let mut clients = Vec::with_capacity(m);
    for (i, mut class_shares) in shares.into_iter().enumerate() {
        let keep_fraction = ((i + 1) as f64).powf(unbalance) / max_weight;
        for (class, share) in class_shares.iter_mut().enumerate() {
            if share.is_empty() {
                continue;
            }
            let keep = ((share.len() as f64 * keep_fraction).round() as usize)
                .clamp(2.min(share.len()), share.len());
            if keep < 2 {
                return Err(Error::Partition(format!(
                    "class {class} has too few samples ({keep}) for client {i}"
                )));
            }
            share.truncate(keep);
        }
        clients.push(split_train_test(
            i,
            data,
            &class_shares,
            test_fraction,
            true,
        )?);
    }
    Ok(Partition {
        clients,
        classes_per_client: s,
    })
}

/// Stratified IID shards: every class pool is shuffled and dealt
/// round-robin, so per-client label histograms match the global one.
pub fn iid_partition(
    data: &Dataset,
    m: usize,
    test_fraction: f64,
    seed_value: u64,
) -> Result<Partition> {
    check_partition_args(data, m, test_fraction)?;
    let mut rng = seed::rng_from(seed::mix(seed_value, seed::TAG_DATA));
    let mut shares: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); data.num_classes]; m];
    let mut pools = data.class_pools();
    for (class, pool) in pools.iter_mut().enumerate() {
        pool.shuffle(&mut rng);
        for (slot, &sample) in pool.iter().enumerate() {
            shares[slot % m][class].push(sample);
        }
    }
    let clients = shares
        .into_iter()
        .enumerate()
        .map(|(i, class_shares)| split_train_test(i, data, &class_shares, test_fraction, false))
        .collect::<Result<Vec<_>>>()?;
    Ok(Partition {
        clients,
        classes_per_client: data.num_classes,
    })
}
