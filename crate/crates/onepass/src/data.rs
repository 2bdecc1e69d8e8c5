//! Dataset ingestion, splitting, standardisation, and batching.
//!
//! CSV corpora are loaded into an in-memory [`Dataset`], cut by a seeded
//! permutation into train/validation/test portions, and standardised with
//! statistics taken from the training portion alone. IDX image/label pairs
//! load through the same type, and a deterministic synthetic building-energy
//! corpus is provided for fully offline runs.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::seeds;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("no data rows found")]
    Empty,
    #[error("line {line}, column {column}: {value:?} is not a finite number")]
    BadCell {
        line: usize,
        column: usize,
        value: String,
    },
    #[error("line {line}: expected {expected} fields, found {found}")]
    RaggedRow {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("target column {name:?} not found")]
    MissingTarget { name: String },
    #[error("a dataset needs at least one feature column besides the target")]
    NoFeatures,
    #[error("line {line}: class label {value} is not a valid class index")]
    BadClassLabel { line: usize, value: f64 },
    #[error("feature matrix has {x_rows} rows but there are {y_rows} targets")]
    RowMismatch { x_rows: usize, y_rows: usize },
    #[error("expected {expected} feature names, got {got}")]
    NameCount { expected: usize, got: usize },
    #[error("split fractions {fractions:?} must be positive and sum to one")]
    BadFractions { fractions: (f64, f64, f64) },
    #[error("the {name} portion of the split is empty")]
    EmptyPortion { name: &'static str },
    #[error("{path}: expected IDX magic {expected:#010x}, found {found:#010x}")]
    BadMagic {
        path: String,
        expected: u32,
        found: u32,
    },
    #[error("{path}: file is shorter than its header claims")]
    Truncated { path: String },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
}

/// How the target column is interpreted downstream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetKind {
    /// Continuous regression target.
    Regression,
    /// Class index in `0..n`.
    Classes(usize),
}

/// How to read the target column out of a file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetParse {
    Continuous,
    ClassIndex,
}

/// Which CSV column holds the target.
#[derive(Clone, Debug)]
pub enum TargetColumn {
    Last,
    Named(String),
}

/// Affine standardisation statistics captured from a training portion.
/// `std` holds the divisor actually applied, which is 1 for columns whose
/// training standard deviation fell below 1e-12.
#[derive(Clone, Debug)]
pub struct ColumnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

impl ColumnStats {
    /// Maps a standardised target value back to raw units.
    pub fn target_to_raw(&self, v: f64) -> f64 {
        v * self.target_std + self.target_mean
    }

    /// Maps a squared error on standardised targets back to raw units.
    pub fn mse_to_raw(&self, mse: f64) -> f64 {
        mse * self.target_std * self.target_std
    }
}

/// An in-memory corpus: features in a row-major `[rows, features]` tensor
/// and one target per row.
#[derive(Clone, Debug)]
pub struct Dataset {
    x: Tensor,
    y: Tensor,
    feature_names: Vec<String>,
    target: TargetKind,
    stats: Option<ColumnStats>,
}

impl Dataset {
    pub fn new(
        x: Tensor,
        y: Tensor,
        feature_names: Vec<String>,
        target: TargetKind,
    ) -> Result<Self, DataError> {
        let rows = x.shape()[0];
        if y.numel() != rows {
            return Err(DataError::RowMismatch {
                x_rows: rows,
                y_rows: y.numel(),
            });
        }
        let cols = x.shape()[1];
        if cols == 0 {
            return Err(DataError::NoFeatures);
        }
        if feature_names.len() != cols {
            return Err(DataError::NameCount {
                expected: cols,
                got: feature_names.len(),
            });
        }
        if let TargetKind::Classes(k) = target {
            for (r, &v) in y.data().iter().enumerate() {
                if v.fract() != 0.0 || v < 0.0 || v as usize >= k {
                    return Err(DataError::BadClassLabel {
                        line: r + 1,
                        value: v,
                    });
                }
            }
        }
        Ok(Dataset {
            x,
            y,
            feature_names,
            target,
            stats: None,
        })
    }

    pub fn rows(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn features(&self) -> usize {
        self.x.shape()[1]
    }

    /// Width the model head needs: 1 for regression, the class count for
    /// classification.
    pub fn output_dim(&self) -> usize {
        match self.target {
            TargetKind::Regression => 1,
            TargetKind::Classes(k) => k,
        }
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn y(&self) -> &Tensor {
        &self.y
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn target(&self) -> TargetKind {
        self.target
    }

    /// Standardisation statistics, present once [`standardise`] has run.
    pub fn stats(&self) -> Option<&ColumnStats> {
        self.stats.as_ref()
    }

    /// Builds batch tensors for the given row indices.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Tensor) {
        let d = self.features();
        let mut x = Vec::with_capacity(idx.len() * d);
        let mut y = Vec::with_capacity(idx.len());
        for &r in idx {
            x.extend_from_slice(&self.x.data()[r * d..(r + 1) * d]);
            y.push(self.y.data()[r]);
        }
        (
            Tensor::new(vec![idx.len(), d], x),
            Tensor::new(vec![idx.len(), 1], y),
        )
    }
}

/// Index lists for the three portions of a corpus.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl Split {
    /// Folds the validation rows into the training portion, keeping the
    /// validation list itself for monitoring. Used by settings that tune
    /// nothing and so have no use for held-out validation data.
    pub fn merge_validation(&self) -> Split {
        let mut train = self.train.clone();
        train.extend_from_slice(&self.val);
        Split {
            train,
            val: self.val.clone(),
            test: self.test.clone(),
            seed: self.seed,
        }
    }
}

/// Loads a CSV corpus. A header row is assumed when any cell of the first
/// row fails to parse as a number; otherwise columns are named `x0, x1, ...`
/// in file order.
pub fn load_csv(
    path: &Path,
    target: &TargetColumn,
    parse: TargetParse,
) -> Result<Dataset, DataError> {
    let file = fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let mut records = Vec::new();
    for record in reader.records() {
        records.push(record?);
    }
    if records.is_empty() {
        return Err(DataError::Empty);
    }

    let width = records[0].len();
    if width < 2 {
        return Err(DataError::NoFeatures);
    }
    let has_header = records[0].iter().any(|c| c.parse::<f64>().is_err());
    let (names, first_data_line): (Vec<String>, usize) = if has_header {
        (records[0].iter().map(str::to_string).collect(), 2)
    } else {
        ((0..width).map(|j| format!("x{j}")).collect(), 1)
    };
    let data_rows = if has_header {
        &records[1..]
    } else {
        &records[..]
    };
    if data_rows.is_empty() {
        return Err(DataError::Empty);
    }

    let target_col = match target {
        TargetColumn::Last => width - 1,
        TargetColumn::Named(name) => names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| DataError::MissingTarget { name: name.clone() })?,
    };

    let n = data_rows.len();
    let mut x = Vec::with_capacity(n * (width - 1));
    let mut y = Vec::with_capacity(n);
    for (r, record) in data_rows.iter().enumerate() {
        let line = first_data_line + r;
        if record.len() != width {
            return Err(DataError::RaggedRow {
                line,
                expected: width,
                found: record.len(),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            let value: f64 = cell.parse().map_err(|_| DataError::BadCell {
                line,
                column: j + 1,
                value: cell.to_string(),
            })?;
            if !value.is_finite() {
                return Err(DataError::BadCell {
                    line,
                    column: j + 1,
                    value: cell.to_string(),
                });
            }
            if j == target_col {
                y.push(value);
            } else {
                x.push(value);
            }
        }
    }

    let kind = match parse {
        TargetParse::Continuous => TargetKind::Regression,
        TargetParse::ClassIndex => {
            let mut max = 0usize;
            for (r, &v) in y.iter().enumerate() {
                if v.fract() != 0.0 || v < 0.0 {
                    return Err(DataError::BadClassLabel {
                        line: first_data_line + r,
                        value: v,
                    });
                }
                max = max.max(v as usize);
            }
            TargetKind::Classes(max + 1)
        }
    };

    let feature_names = names
        .into_iter()
        .enumerate()
        .filter(|(j, _)| *j != target_col)
        .map(|(_, name)| name)
        .collect();
    Dataset::new(
        Tensor::new(vec![n, width - 1], x),
        Tensor::new(vec![n, 1], y),
        feature_names,
        kind,
    )
}

/// Shuffles row indices with a seeded permutation and cuts them into
/// train, validation, and test portions. The validation and test portions
/// get `⌊f·N⌋` rows each; the remainder goes to training.
pub fn split(dataset: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<Split, DataError> {
    let (f_train, f_val, f_test) = fractions;
    let positive = f_train > 0.0 && f_val > 0.0 && f_test > 0.0;
    if !positive || (f_train + f_val + f_test - 1.0).abs() > 1e-9 {
        return Err(DataError::BadFractions { fractions });
    }

    let n = dataset.rows();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);

    let n_val = (f_val * n as f64).floor() as usize;
    let n_test = (f_test * n as f64).floor() as usize;
    let n_train = n - n_val - n_test;
    if n_train == 0 {
        return Err(DataError::EmptyPortion { name: "train" });
    }
    if n_val == 0 {
        return Err(DataError::EmptyPortion { name: "validation" });
    }
    if n_test == 0 {
        return Err(DataError::EmptyPortion { name: "test" });
    }

    Ok(Split {
        train: idx[..n_train].to_vec(),
        val: idx[n_train..n_train + n_val].to_vec(),
        test: idx[n_train + n_val..].to_vec(),
        seed,
    })
}

/// Re-expresses every feature column, and a regression target, as deviations
/// from the training-portion mean in units of the training-portion standard
/// deviation (population form). Columns whose training standard deviation is
/// below 1e-12 are centred but left unscaled. The statistics are retained on
/// the returned dataset so reported errors can be mapped back to raw units.
pub fn standardise(dataset: &Dataset, split: &Split) -> Dataset {
    let n = split.train.len() as f64;
    let d = dataset.features();

    let mut mean = vec![0.0; d];
    for &r in &split.train {
        for (j, m) in mean.iter_mut().enumerate() {
            *m += dataset.x.data()[r * d + j];
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; d];
    for &r in &split.train {
        for (j, s) in var.iter_mut().enumerate() {
            let c = dataset.x.data()[r * d + j] - mean[j];
            *s += c * c;
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|&v| {
            let s = (v / n).sqrt();
            if s < 1e-12 {
                1.0
            } else {
                s
            }
        })
        .collect();

    let mut x = dataset.x.clone();
    for r in 0..dataset.rows() {
        for j in 0..d {
            let v = &mut x.data_mut()[r * d + j];
            *v = (*v - mean[j]) / std[j];
        }
    }

    let (y, target_mean, target_std) = match dataset.target {
        TargetKind::Regression => {
            let mut tm = 0.0;
            for &r in &split.train {
                tm += dataset.y.data()[r];
            }
            tm /= n;
            let mut tv = 0.0;
            for &r in &split.train {
                let c = dataset.y.data()[r] - tm;
                tv += c * c;
            }
            let ts = (tv / n).sqrt();
            let ts = if ts < 1e-12 { 1.0 } else { ts };
            let mut y = dataset.y.clone();
            for v in y.data_mut() {
                *v = (*v - tm) / ts;
            }
            (y, tm, ts)
        }
        TargetKind::Classes(_) => (dataset.y.clone(), 0.0, 1.0),
    };

    Dataset {
        x,
        y,
        feature_names: dataset.feature_names.clone(),
        target: dataset.target,
        stats: Some(ColumnStats {
            mean,
            std,
            target_mean,
            target_std,
        }),
    }
}

/// Cuts a portion into mini-batches, reshuffling with a seed derived from
/// `(seed, epoch)` so every epoch sees a fresh order and reruns reproduce
/// it. The final partial batch is kept, and a batch size of the portion
/// length reproduces full-batch training.
pub fn batches(portion: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order = portion.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, epoch));
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn read_be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32, DataError> {
    if bytes.len() < at + 4 {
        return Err(DataError::Truncated {
            path: path.display().to_string(),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[at],
        bytes[at + 1],
        bytes[at + 2],
        bytes[at + 3],
    ]))
}

/// Loads an IDX image file into a `[count, rows*cols]` tensor with pixel
/// values scaled from bytes to `[0, 1]`.
pub fn load_idx_images(path: &Path) -> Result<Tensor, DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let magic = read_be_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: path.display().to_string(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = read_be_u32(&bytes, 4, path)? as usize;
    let rows = read_be_u32(&bytes, 8, path)? as usize;
    let cols = read_be_u32(&bytes, 12, path)? as usize;
    let need = 16 + count * rows * cols;
    if bytes.len() < need {
        return Err(DataError::Truncated {
            path: path.display().to_string(),
        });
    }
    let data = bytes[16..need].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(Tensor::new(vec![count, rows * cols], data))
}

/// Loads an IDX label file.
pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>, DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let magic = read_be_u32(&bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: path.display().to_string(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = read_be_u32(&bytes, 4, path)? as usize;
    if bytes.len() < 8 + count {
        return Err(DataError::Truncated {
            path: path.display().to_string(),
        });
    }
    Ok(bytes[8..8 + count].to_vec())
}

/// Pairs an IDX image file with its label file as a classification corpus.
pub fn load_idx_pair(images: &Path, labels: &Path) -> Result<Dataset, DataError> {
    let x = load_idx_images(images)?;
    let raw_labels = load_idx_labels(labels)?;
    if x.shape()[0] != raw_labels.len() {
        return Err(DataError::CountMismatch {
            images: x.shape()[0],
            labels: raw_labels.len(),
        });
    }
    let classes = raw_labels.iter().copied().max().map_or(1, |m| m as usize + 1);
    let y = Tensor::new(
        vec![raw_labels.len(), 1],
        raw_labels.iter().map(|&b| f64::from(b)).collect(),
    );
    let names = (0..x.shape()[1]).map(|j| format!("p{j}")).collect();
    Dataset::new(x, y, names, TargetKind::Classes(classes))
}

/// Deterministic building-energy regression corpus: 768 rows by 8 features,
/// laid out like the UCI Energy Efficiency data as a full factorial design
/// of twelve building shapes, four orientations, four glazing areas, and
/// four glazing distributions. The heating-load target mixes smooth and
/// oscillatory interactions of the design variables plus bounded seeded
/// noise, so a small network fits it well but not quickly.
pub fn synthetic_energy(seed: u64) -> Dataset {
    const GLAZING: [f64; 4] = [0.0, 0.1, 0.25, 0.4];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(768 * 8);
    let mut y = Vec::with_capacity(768);
    for s in 0..12u32 {
        let sf = f64::from(s);
        let compact = 0.62 + 0.03 * sf;
        let surface = 808.5 - 24.5 * sf;
        let wall = 245.0 + 24.5 * f64::from((s * 5) % 7);
        let roof = 110.25 + 36.75 * f64::from(s % 4);
        let height = if s % 2 == 0 { 7.0 } else { 3.5 };
        for o in 0..4u32 {
            let orientation = 2.0 + f64::from(o);
            for &glazing in &GLAZING {
                for d in 0..4u32 {
                    let dist = f64::from(d);
                    let spread = (surface - 650.0) / 100.0;
                    let load = 30.0 * compact * compact
                        + 2.2 * height * compact
                        - 1.8 * spread
                        + 14.0 * glazing * (1.0 + 0.25 * dist)
                        - 6.0 * compact * height * glazing
                        + 7.0 * (23.0 * compact + 1.3 * dist).sin()
                        + 5.0 * (17.0 * compact).cos() * spread
                        + 4.5 * (2.6 * spread + 3.1 * glazing * height).sin()
                        + 0.02 * wall * glazing
                        + 0.01 * roof
                        + 0.05 * orientation
                        + rng.gen_range(-0.35..0.35);
                    x.extend_from_slice(&[
                        compact,
                        surface,
                        wall,
                        roof,
                        height,
                        orientation,
                        glazing,
                        dist,
                    ]);
                    y.push(load);
                }
            }
        }
    }
    let names = [
        "compactness",
        "surface_area",
        "wall_area",
        "roof_area",
        "height",
        "orientation",
        "glazing_area",
        "glazing_dist",
    ]
    .map(String::from)
    .to_vec();
    Dataset::new(
        Tensor::new(vec![768, 8], x),
        Tensor::new(vec![768, 1], y),
        names,
        TargetKind::Regression,
    )
    .expect("factorial corpus is well formed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut file = tempfile::NamedTempFile::new().expect("temp file");
        file.write_all(content.as_bytes()).expect("write");
        file
    }

    #[test]
    fn headerless_csv_takes_last_column_as_target() {
        let file = write_temp("1,2\n3,4\n5,6\n");
        let ds = load_csv(file.path(), &TargetColumn::Last, TargetParse::Continuous).unwrap();
        assert_eq!(ds.rows(), 3);
        assert_eq!(ds.features(), 1);
        assert_eq!(ds.x().data(), &[1.0, 3.0, 5.0]);
        assert_eq!(ds.y().data(), &[2.0, 4.0, 6.0]);
        assert_eq!(ds.feature_names(), ["x0"]);
    }

    #[test]
    fn header_is_detected_and_named_target_selected() {
        let file = write_temp("alpha,beta,load\n1,2,3\n4,5,6\n");
        let ds = load_csv(
            file.path(),
            &TargetColumn::Named("beta".into()),
            TargetParse::Continuous,
        )
        .unwrap();
        assert_eq!(ds.feature_names(), ["alpha", "load"]);
        assert_eq!(ds.y().data(), &[2.0, 5.0]);
        assert_eq!(ds.x().data(), &[1.0, 3.0, 4.0, 6.0]);
    }

    #[test]
    fn parse_errors_carry_row_and_column() {
        let file = write_temp("1,2\n3,oops\n");
        let err = load_csv(file.path(), &TargetColumn::Last, TargetParse::Continuous).unwrap_err();
        match err {
            DataError::BadCell { line, column, value } => {
                assert_eq!((line, column), (2, 2));
                assert_eq!(value, "oops");
            }
            other => panic!("unexpected error: {other}"),
        }

        let ragged = write_temp("1,2\n3\n");
        let err = load_csv(ragged.path(), &TargetColumn::Last, TargetParse::Continuous)
            .unwrap_err();
        match err {
            DataError::RaggedRow { line, expected, found } => {
                assert_eq!((line, expected, found), (2, 2, 1));
            }
            other => panic!("unexpected error: {other}"),
        }

        let empty = write_temp("");
        assert!(matches!(
            load_csv(empty.path(), &TargetColumn::Last, TargetParse::Continuous),
            Err(DataError::Empty)
        ));

        let missing = load_csv(
            write_temp("a,b\n1,2\n").path(),
            &TargetColumn::Named("c".into()),
            TargetParse::Continuous,
        );
        assert!(matches!(missing, Err(DataError::MissingTarget { .. })));
    }

    #[test]
    fn class_targets_must_be_integer_indices() {
        let file = write_temp("1,0\n2,1\n3,2\n");
        let ds = load_csv(file.path(), &TargetColumn::Last, TargetParse::ClassIndex).unwrap();
        assert_eq!(ds.target(), TargetKind::Classes(3));
        assert_eq!(ds.output_dim(), 3);

        let bad = write_temp("1,0\n2,1.5\n");
        assert!(matches!(
            load_csv(bad.path(), &TargetColumn::Last, TargetParse::ClassIndex),
            Err(DataError::BadClassLabel { line: 2, .. })
        ));
    }

    #[test]
    fn split_sizes_floor_with_remainder_to_train() {
        let ds = synthetic_energy(0);
        let ten = Dataset::new(
            Tensor::new(vec![10, 1], (0..10).map(f64::from).collect()),
            Tensor::new(vec![10, 1], vec![0.0; 10]),
            vec!["x0".into()],
            TargetKind::Regression,
        )
        .unwrap();
        let s = split(&ten, (0.6, 0.2, 0.2), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));

        let seven = Dataset::new(
            Tensor::new(vec![7, 1], (0..7).map(f64::from).collect()),
            Tensor::new(vec![7, 1], vec![0.0; 7]),
            vec!["x0".into()],
            TargetKind::Regression,
        )
        .unwrap();
        let s = split(&seven, (0.6, 0.2, 0.2), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (5, 1, 1));

        let s = split(&ds, (0.72, 0.18, 0.10), 9).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (554, 138, 76));

        let again = split(&ds, (0.72, 0.18, 0.10), 9).unwrap();
        assert_eq!(s.train, again.train);
        assert_eq!(s.val, again.val);
        assert_eq!(s.test, again.test);

        assert!(matches!(
            split(&ds, (0.5, 0.5, 0.5), 1),
            Err(DataError::BadFractions { .. })
        ));
    }

    #[test]
    fn merging_validation_extends_training() {
        let ds = synthetic_energy(0);
        let s = split(&ds, (0.72, 0.18, 0.10), 9).unwrap();
        let merged = s.merge_validation();
        assert_eq!(merged.train.len(), s.train.len() + s.val.len());
        assert_eq!(merged.train[..s.train.len()], s.train[..]);
        assert_eq!(merged.val, s.val);
        assert_eq!(merged.test, s.test);
    }

    #[test]
    fn standardisation_uses_population_std_on_train_only() {
        let ds = Dataset::new(
            Tensor::new(vec![5, 2], vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 10.0, 5.0, 20.0, 5.0]),
            Tensor::new(vec![5, 1], vec![1.0, 2.0, 3.0, 10.0, 20.0]),
            vec!["a".into(), "b".into()],
            TargetKind::Regression,
        )
        .unwrap();
        let s = Split {
            train: vec![0, 1, 2],
            val: vec![3],
            test: vec![4],
            seed: 0,
        };
        let out = standardise(&ds, &s);

        let expected = [-1.224_744_871_391_589, 0.0, 1.224_744_871_391_589];
        for (r, want) in s.train.iter().zip(expected) {
            assert!((out.x().data()[r * 2] - want).abs() < 1e-9);
            assert!((out.y().data()[*r] - want).abs() < 1e-9);
        }
        for r in 0..5 {
            assert_eq!(out.x().data()[r * 2 + 1], 0.0);
        }
        let test_value = out.x().data()[4 * 2];
        assert!(test_value > 10.0, "test row must use train stats, got {test_value}");

        let stats = out.stats().unwrap();
        for (r, raw) in ds.y().data().iter().enumerate() {
            assert!((stats.target_to_raw(out.y().data()[r]) - raw).abs() < 1e-9);
        }
        assert!((stats.mse_to_raw(1.0) - stats.target_std * stats.target_std).abs() < 1e-12);
    }

    #[test]
    fn training_columns_are_zero_mean_unit_std_after_standardisation() {
        let ds = synthetic_energy(3);
        let s = split(&ds, (0.72, 0.18, 0.10), 3).unwrap();
        let out = standardise(&ds, &s);
        let d = out.features();
        let n = s.train.len() as f64;
        for j in 0..d {
            let mut mean = 0.0;
            for &r in &s.train {
                mean += out.x().data()[r * d + j];
            }
            mean /= n;
            let mut var = 0.0;
            for &r in &s.train {
                let c = out.x().data()[r * d + j] - mean;
                var += c * c;
            }
            let std = (var / n).sqrt();
            assert!(mean.abs() < 1e-9, "column {j} mean {mean}");
            assert!((std - 1.0).abs() < 1e-9, "column {j} std {std}");
        }

        let max_test_mean = (0..d)
            .map(|j| {
                let mut m = 0.0;
                for &r in &s.test {
                    m += out.x().data()[r * d + j];
                }
                (m / s.test.len() as f64).abs()
            })
            .fold(0.0, f64::max);
        assert!(max_test_mean > 0.02, "test means suspiciously centred");
    }

    #[test]
    fn batches_keep_partial_tail_and_cover_every_index() {
        let portion: Vec<usize> = (10..15).collect();
        let slices = batches(&portion, 2, 7, 0);
        assert_eq!(
            slices.iter().map(Vec::len).collect::<Vec<_>>(),
            vec![2, 2, 1]
        );
        let mut seen: Vec<usize> = slices.concat();
        seen.sort_unstable();
        assert_eq!(seen, portion);

        let full = batches(&portion, 5, 7, 0);
        assert_eq!(full.len(), 1);

        assert_eq!(batches(&portion, 2, 7, 3), batches(&portion, 2, 7, 3));
        assert_ne!(batches(&portion, 2, 7, 3), batches(&portion, 2, 7, 4));
    }

    #[test]
    fn idx_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("images.idx");
        let labels = dir.path().join("labels.idx");

        let mut image_bytes = Vec::new();
        image_bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        image_bytes.extend_from_slice(&2u32.to_be_bytes());
        image_bytes.extend_from_slice(&2u32.to_be_bytes());
        image_bytes.extend_from_slice(&2u32.to_be_bytes());
        image_bytes.extend_from_slice(&[0, 51, 102, 153, 204, 255, 0, 255]);
        fs::write(&images, &image_bytes).unwrap();

        let mut label_bytes = Vec::new();
        label_bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        label_bytes.extend_from_slice(&2u32.to_be_bytes());
        label_bytes.extend_from_slice(&[1, 0]);
        fs::write(&labels, &label_bytes).unwrap();

        let ds = load_idx_pair(&images, &labels).unwrap();
        assert_eq!(ds.rows(), 2);
        assert_eq!(ds.features(), 4);
        assert_eq!(ds.target(), TargetKind::Classes(2));
        assert!((ds.x().data()[1] - 51.0 / 255.0).abs() < 1e-12);
        assert_eq!(ds.y().data(), &[1.0, 0.0]);

        fs::write(&labels, &image_bytes).unwrap();
        assert!(matches!(
            load_idx_labels(&labels),
            Err(DataError::BadMagic { .. })
        ));

        fs::write(&images, &image_bytes[..10]).unwrap();
        assert!(matches!(
            load_idx_images(&images),
            Err(DataError::Truncated { .. })
        ));
    }

    #[test]
    fn synthetic_corpus_is_deterministic_and_well_scaled() {
        let a = synthetic_energy(11);
        let b = synthetic_energy(11);
        assert_eq!(a.x().data(), b.x().data());
        assert_eq!(a.y().data(), b.y().data());
        assert_ne!(a.y().data(), synthetic_energy(12).y().data());

        assert_eq!(a.rows(), 768);
        assert_eq!(a.features(), 8);
        assert!(a.x().all_finite() && a.y().all_finite());

        let mean = a.y().sum() / 768.0;
        let var = a.y().data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 768.0;
        assert!(var.sqrt() > 1.0, "target should vary, std {}", var.sqrt());
    }

    proptest! {
        #[test]
        fn split_portions_are_disjoint_and_cover(
            n in 20usize..300,
            seed in any::<u64>(),
            f_train in 0.4f64..0.7,
            f_val in 0.1f64..0.25,
        ) {
            let ds = Dataset::new(
                Tensor::new(vec![n, 1], vec![0.0; n]),
                Tensor::new(vec![n, 1], vec![0.0; n]),
                vec!["x0".into()],
                TargetKind::Regression,
            ).unwrap();
            let f_test = 1.0 - f_train - f_val;
            let s = split(&ds, (f_train, f_val, f_test), seed).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(s.val.len(), (f_val * n as f64).floor() as usize);
            prop_assert_eq!(s.test.len(), (f_test * n as f64).floor() as usize);
        }

        #[test]
        fn every_epoch_partitions_the_portion(
            n in 1usize..120,
            batch in 1usize..50,
            seed in any::<u64>(),
            epoch in 0u64..40,
        ) {
            let portion: Vec<usize> = (0..n).collect();
            let slices = batches(&portion, batch, seed, epoch);
            let mut seen: Vec<usize> = slices.concat();
            seen.sort_unstable();
            prop_assert_eq!(seen, portion);
            for (k, slice) in slices.iter().enumerate() {
                if k + 1 < slices.len() {
                    prop_assert_eq!(slice.len(), batch);
                } else {
                    prop_assert!(slice.len() <= batch && !slice.is_empty());
                }
            }
        }
    }
}
