//! Datasets, prototype tables, CSV ingestion/emission and the synthetic
//! zero-shot benchmark generator.
//!
//! Class order is the order of the [`ClassList`] everywhere: class centers,
//! distance matrices, embeddings and prototype tables all index classes the
//! same way. Seen-class matrices (centers, embedding columns) are ordered by
//! the seen subsequence of the class list.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Seen/unseen flag of a class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Seen,
    Unseen,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Seen => "seen",
            Split::Unseen => "unseen",
        }
    }

    fn parse(s: &str) -> Option<Split> {
        match s {
            "seen" => Some(Split::Seen),
            "unseen" => Some(Split::Unseen),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassInfo {
    pub id: String,
    pub split: Split,
}

/// Ordered list of classes with their seen/unseen flag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassList {
    classes: Vec<ClassInfo>,
}

impl ClassList {
    pub fn new(classes: Vec<ClassInfo>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Invalid("class list is empty".into()));
        }
        for (i, c) in classes.iter().enumerate() {
            if classes[..i].iter().any(|o| o.id == c.id) {
                return Err(Error::Invalid(format!("duplicate class id `{}`", c.id)));
            }
        }
        Ok(Self { classes })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn get(&self, index: usize) -> &ClassInfo {
        &self.classes[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClassInfo> {
        self.classes.iter()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.id == id)
    }

    /// Class-list indices of the given split, in class-list order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, c)| c.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn seen(&self) -> Vec<usize> {
        self.indices(Split::Seen)
    }

    pub fn unseen(&self) -> Vec<usize> {
        self.indices(Split::Unseen)
    }
}

/// Which side of the zero-shot protocol a dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    /// Seen-class examples only; every seen class has at least one example.
    Train,
    /// Unseen-class examples only.
    Test,
}

/// Visual feature matrix (one row per example) with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    example_ids: Vec<String>,
    classes: ClassList,
    partition: Partition,
}

impl LabeledDataset {
    /// Builds a dataset; `labels` hold indices into `classes`.
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        example_ids: Option<Vec<String>>,
        classes: ClassList,
        partition: Partition,
    ) -> Result<Self> {
        let (l, d) = features.dim();
        if l == 0 || d == 0 {
            return Err(Error::Invalid(format!("dataset must be non-empty, got {l}x{d}")));
        }
        if labels.len() != l {
            return Err(Error::shape("dataset labels", l, labels.len()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset features".into()));
        }
        let example_ids = match example_ids {
            Some(ids) if ids.len() != l => return Err(Error::shape("dataset example ids", l, ids.len())),
            Some(ids) => ids,
            None => (0..l).map(|i| i.to_string()).collect(),
        };
        let mut counts = vec![0usize; classes.len()];
        for &y in &labels {
            if y >= classes.len() {
                return Err(Error::Invalid(format!("label index {y} outside class list")));
            }
            counts[y] += 1;
        }
        let wanted = match partition {
            Partition::Train => Split::Seen,
            Partition::Test => Split::Unseen,
        };
        for (c, &n) in classes.iter().zip(&counts) {
            if n > 0 && c.split != wanted {
                return Err(Error::Invalid(format!(
                    "{} class `{}` has examples in the {:?} partition",
                    c.split.as_str(),
                    c.id,
                    partition
                )));
            }
            if n == 0 && partition == Partition::Train && c.split == Split::Seen {
                return Err(Error::EmptyClass(c.id.clone()));
            }
        }
        Ok(Self {
            features,
            labels,
            example_ids,
            classes,
            partition,
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn example_ids(&self) -> &[String] {
        &self.example_ids
    }

    pub fn classes(&self) -> &ClassList {
        &self.classes
    }

    pub fn partition(&self) -> Partition {
        self.partition
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

    /// Same examples with a replaced feature matrix (e.g. after normalization).
    pub fn with_features(&self, features: Array2<f64>) -> Result<Self> {
        Self::new(
            features,
            self.labels.clone(),
            Some(self.example_ids.clone()),
            self.classes.clone(),
            self.partition,
        )
    }

    /// Labels remapped to positions within the seen subsequence of the class list.
    pub fn seen_positions(&self) -> Result<Vec<usize>> {
        let seen = self.classes.seen();
        self.labels
            .iter()
            .map(|&y| {
                seen.binary_search(&y).map_err(|_| {
                    Error::Invalid(format!("label `{}` is not a seen class", self.classes.get(y).id))
                })
            })
            .collect()
    }
}

/// Per-class semantic prototypes: a predefined segment (n columns) and an
/// optional expanded segment (k columns). Rows follow class-list order.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeTable {
    classes: ClassList,
    predefined: Array2<f64>,
    expanded: Option<Array2<f64>>,
}

/// Which prototype columns to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Predefined,
    Expanded,
    Combined,
}

impl Segment {
    pub fn label(self) -> &'static str {
        match self {
            Segment::Predefined => "P",
            Segment::Expanded => "E",
            Segment::Combined => "P+E",
        }
    }
}

impl PrototypeTable {
    pub fn new(classes: ClassList, predefined: Array2<f64>, expanded: Option<Array2<f64>>) -> Result<Self> {
        if predefined.nrows() != classes.len() {
            return Err(Error::shape("prototype rows", classes.len(), predefined.nrows()));
        }
        if predefined.ncols() == 0 {
            return Err(Error::Invalid("predefined prototypes need n >= 1".into()));
        }
        if predefined.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("predefined prototypes".into()));
        }
        if let Some(e) = &expanded {
            if e.nrows() != classes.len() {
                return Err(Error::shape("expanded prototype rows", classes.len(), e.nrows()));
            }
            if e.ncols() == 0 {
                return Err(Error::Invalid("expanded prototypes need k >= 1".into()));
            }
            if e.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("expanded prototypes".into()));
            }
        }
        Ok(Self {
            classes,
            predefined,
            expanded,
        })
    }

    pub fn classes(&self) -> &ClassList {
        &self.classes
    }

    pub fn predefined(&self) -> &Array2<f64> {
        &self.predefined
    }

    pub fn expanded(&self) -> Option<&Array2<f64>> {
        self.expanded.as_ref()
    }

    pub fn n(&self) -> usize {
        self.predefined.ncols()
    }

    /// Expanded dimension; 0 when no expanded segment is present.
    pub fn k(&self) -> usize {
        self.expanded.as_ref().map_or(0, |e| e.ncols())
    }

    /// Copy with a new expanded segment.
    pub fn with_expanded(&self, expanded: Option<Array2<f64>>) -> Result<Self> {
        Self::new(self.classes.clone(), self.predefined.clone(), expanded)
    }

    /// Prototype matrix for the requested segment, all classes.
    pub fn segment(&self, segment: Segment) -> Result<Array2<f64>> {
        match (segment, &self.expanded) {
            (Segment::Predefined, _) => Ok(self.predefined.clone()),
            (Segment::Expanded, Some(e)) => Ok(e.clone()),
            (Segment::Combined, Some(e)) => Ok(ndarray::concatenate![Axis(1), self.predefined, *e]),
            (Segment::Combined, None) => Ok(self.predefined.clone()),
            (Segment::Expanded, None) => Err(Error::Invalid("prototype table has no expanded segment".into())),
        }
    }

    /// Rows of `matrix` (one per class) restricted to the given class indices.
    pub fn select_rows(matrix: &Array2<f64>, indices: &[usize]) -> Array2<f64> {
        matrix.select(Axis(0), indices)
    }
}

/// Parameters of the synthetic benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub m_seen: usize,
    pub v_unseen: usize,
    pub d: usize,
    pub n: usize,
    pub cluster_spread: f64,
    pub examples_per_class: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            m_seen: 40,
            v_unseen: 10,
            d: 64,
            n: 10,
            cluster_spread: 0.3,
            examples_per_class: 8,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("m_seen", self.m_seen),
            ("v_unseen", self.v_unseen),
            ("d", self.d),
            ("n", self.n),
            ("examples_per_class", self.examples_per_class),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(Error::Invalid(format!("synthetic {name} must be >= 1")));
            }
        }
        if !(self.cluster_spread >= 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::Invalid("synthetic cluster_spread must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Output of [`generate_synthetic`].
#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub prototypes: PrototypeTable,
    /// The d×n map taking a predefined prototype to its noiseless visual feature.
    pub visual_map: Array2<f64>,
}

/// Draws a seeded zero-shot benchmark.
///
/// Prototypes are standard normal; the visual map has N(0, 1/n) entries so
/// noiseless features have unit variance per coordinate. Each example of
/// class `c` is `map · prototype_c + cluster_spread · N(0, I)`. Seen classes
/// populate the train partition, unseen classes the test partition.
/// Random draws happen in a fixed order: prototypes, map, train noise, test noise.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticBenchmark> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = spec.m_seen + spec.v_unseen;
    let mut classes = Vec::with_capacity(total);
    for i in 0..spec.m_seen {
        classes.push(ClassInfo {
            id: format!("seen_{i:03}"),
            split: Split::Seen,
        });
    }
    for i in 0..spec.v_unseen {
        classes.push(ClassInfo {
            id: format!("unseen_{i:03}"),
            split: Split::Unseen,
        });
    }
    let classes = ClassList::new(classes)?;

    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let prototypes = Array2::from_shape_fn((total, spec.n), |_| normal(&mut rng));
    let map_scale = 1.0 / (spec.n as f64).sqrt();
    let visual_map = Array2::from_shape_fn((spec.d, spec.n), |_| normal(&mut rng) * map_scale);

    let draw = |class_indices: &[usize], partition: Partition, rng: &mut ChaCha8Rng| {
        let l = class_indices.len() * spec.examples_per_class;
        let mut features = Array2::zeros((l, spec.d));
        let mut labels = Vec::with_capacity(l);
        let mut ids = Vec::with_capacity(l);
        let prefix = match partition {
            Partition::Train => "train",
            Partition::Test => "test",
        };
        for &c in class_indices {
            let clean = visual_map.dot(&prototypes.row(c));
            for _ in 0..spec.examples_per_class {
                let row = labels.len();
                let mut out = features.row_mut(row);
                for (o, &v) in out.iter_mut().zip(clean.iter()) {
                    let eps: f64 = normal(rng);
                    *o = v + spec.cluster_spread * eps;
                }
                ids.push(format!("{prefix}_{row:05}"));
                labels.push(c);
            }
        }
        LabeledDataset::new(features, labels, Some(ids), classes.clone(), partition)
    };
    let train = draw(&classes.seen(), Partition::Train, &mut rng)?;
    let test = draw(&classes.unseen(), Partition::Test, &mut rng)?;
    let prototypes = PrototypeTable::new(classes, prototypes, None)?;
    Ok(SyntheticBenchmark {
        train,
        test,
        prototypes,
        visual_map,
    })
}

/// Scales every nonzero row to unit Euclidean norm; zero rows are unchanged.
pub fn l2_normalize_rows(features: &Array2<f64>) -> Array2<f64> {
    let mut out = features.clone();
    for mut row in out.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
    out
}

/// Per-class mean visual feature, one row per seen class in class-list order.
pub fn class_centers(ds: &LabeledDataset) -> Result<Array2<f64>> {
    let seen = ds.classes().seen();
    let mut centers = Array2::zeros((seen.len(), ds.dim()));
    let mut counts = vec![0usize; seen.len()];
    for (row, &y) in ds.features().rows().into_iter().zip(ds.labels()) {
        if let Ok(pos) = seen.binary_search(&y) {
            let mut c = centers.row_mut(pos);
            c += &row;
            counts[pos] += 1;
        }
    }
    for (pos, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::EmptyClass(ds.classes().get(seen[pos]).id.clone()));
        }
        centers.row_mut(pos).mapv_inplace(|v| v / count as f64);
    }
    Ok(centers)
}

/// Shortest decimal text that parses back to the identical `f64`.
pub fn format_f64(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-5..1e16).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub(crate) fn push_row(line: &mut String, values: ArrayView1<'_, f64>) {
    for v in values {
        line.push(',');
        line.push_str(&format_f64(*v));
    }
}

pub(crate) fn write_text(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Class list and partition the features file is validated against.
#[derive(Debug, Clone, Copy)]
pub struct FeatureSchema<'a> {
    pub classes: &'a ClassList,
    pub partition: Partition,
}

struct CsvRows {
    header: Vec<String>,
    rows: Vec<(usize, Vec<String>)>,
}

fn read_csv(path: &Path) -> Result<CsvRows> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| csv_error(path, e))?.iter().map(str::to_owned).collect(),
        None => {
            return Err(Error::Parse {
                path: path.into(),
                line: 1,
                message: "missing header".into(),
            })
        }
    };
    let mut rows = Vec::new();
    for record in records {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        rows.push((line, record.iter().map(str::to_owned).collect()));
    }
    Ok(CsvRows { header, rows })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Parse {
            path: path.into(),
            line,
            message: format!("{other:?}"),
        },
    }
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.into(),
        line,
        message: message.into(),
    }
}

fn parse_value(path: &Path, line: usize, column: &str, cell: &str) -> Result<f64> {
    let v: f64 = cell
        .parse()
        .map_err(|_| parse_error(path, line, format!("column `{column}`: `{cell}` is not a number")))?;
    if !v.is_finite() {
        return Err(parse_error(path, line, format!("column `{column}`: non-finite value `{cell}`")));
    }
    Ok(v)
}

/// Checks that `header[offset..]` reads `{prefix}0, {prefix}1, ...` and returns the run length.
fn indexed_columns(header: &[String], offset: usize, prefix: &str) -> usize {
    header[offset..]
        .iter()
        .enumerate()
        .take_while(|(i, h)| **h == format!("{prefix}{i}"))
        .count()
}

/// Reads `example_id,class_id,f0,...,f{d-1}`.
pub fn load_features(path: impl AsRef<Path>, schema: FeatureSchema<'_>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let csv = read_csv(path)?;
    let h = &csv.header;
    if h.len() < 3 || h[0] != "example_id" || h[1] != "class_id" {
        return Err(parse_error(path, 1, "header must start with `example_id,class_id,f0`"));
    }
    let d = indexed_columns(h, 2, "f");
    if d == 0 || d + 2 != h.len() {
        return Err(parse_error(path, 1, "feature columns must be named f0..f{d-1}"));
    }
    if csv.rows.is_empty() {
        return Err(parse_error(path, 2, "no examples"));
    }
    let mut values = Vec::with_capacity(csv.rows.len() * d);
    let mut labels = Vec::with_capacity(csv.rows.len());
    let mut ids = Vec::with_capacity(csv.rows.len());
    for (line, row) in &csv.rows {
        if row.len() != h.len() {
            return Err(parse_error(
                path,
                *line,
                format!("expected {} columns, found {}", h.len(), row.len()),
            ));
        }
        let class = schema
            .classes
            .index_of(&row[1])
            .ok_or_else(|| parse_error(path, *line, format!("unknown class id `{}`", row[1])))?;
        for (col, cell) in h[2..].iter().zip(&row[2..]) {
            values.push(parse_value(path, *line, col, cell)?);
        }
        ids.push(row[0].clone());
        labels.push(class);
    }
    let features = Array2::from_shape_vec((labels.len(), d), values).expect("row-major buffer");
    LabeledDataset::new(features, labels, Some(ids), schema.classes.clone(), schema.partition)
}

pub fn save_features(path: impl AsRef<Path>, ds: &LabeledDataset) -> Result<()> {
    let mut out = String::from("example_id,class_id");
    for j in 0..ds.dim() {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for ((id, &y), row) in ds.example_ids().iter().zip(ds.labels()).zip(ds.features().rows()) {
        out.push_str(id);
        out.push(',');
        out.push_str(&ds.classes().get(y).id);
        push_row(&mut out, row);
        out.push('\n');
    }
    write_text(path.as_ref(), &out)
}

/// Reads `class_id,split,a0..a{n-1}` with an optional `e0..e{k-1}` tail.
pub fn load_prototypes(path: impl AsRef<Path>) -> Result<PrototypeTable> {
    let path = path.as_ref();
    let csv = read_csv(path)?;
    let h = &csv.header;
    if h.len() < 3 || h[0] != "class_id" || h[1] != "split" {
        return Err(parse_error(path, 1, "header must start with `class_id,split,a0`"));
    }
    let n = indexed_columns(h, 2, "a");
    let k = indexed_columns(h, 2 + n, "e");
    if n == 0 || 2 + n + k != h.len() {
        return Err(parse_error(path, 1, "prototype columns must be a0..a{n-1} then optional e0..e{k-1}"));
    }
    let mut classes = Vec::new();
    let mut predefined = Vec::new();
    let mut expanded = Vec::new();
    for (line, row) in &csv.rows {
        if row.len() != h.len() {
            return Err(parse_error(
                path,
                *line,
                format!("expected {} columns, found {}", h.len(), row.len()),
            ));
        }
        let split = Split::parse(&row[1])
            .ok_or_else(|| parse_error(path, *line, format!("split must be seen|unseen, got `{}`", row[1])))?;
        if classes.iter().any(|c: &ClassInfo| c.id == row[0]) {
            return Err(parse_error(path, *line, format!("duplicate class id `{}`", row[0])));
        }
        classes.push(ClassInfo {
            id: row[0].clone(),
            split,
        });
        for (col, cell) in h[2..2 + n].iter().zip(&row[2..2 + n]) {
            predefined.push(parse_value(path, *line, col, cell)?);
        }
        for (col, cell) in h[2 + n..].iter().zip(&row[2 + n..]) {
            expanded.push(parse_value(path, *line, col, cell)?);
        }
    }
    if classes.is_empty() {
        return Err(parse_error(path, 2, "no classes"));
    }
    let rows = classes.len();
    let classes = ClassList::new(classes)?;
    let predefined = Array2::from_shape_vec((rows, n), predefined).expect("row-major buffer");
    let expanded = (k > 0).then(|| Array2::from_shape_vec((rows, k), expanded).expect("row-major buffer"));
    PrototypeTable::new(classes, predefined, expanded)
}

/// Writes the table; the expanded columns are included when present.
pub fn save_prototypes(path: impl AsRef<Path>, table: &PrototypeTable) -> Result<()> {
    let mut out = String::from("class_id,split");
    for j in 0..table.n() {
        out.push_str(&format!(",a{j}"));
    }
    for j in 0..table.k() {
        out.push_str(&format!(",e{j}"));
    }
    out.push('\n');
    for (i, class) in table.classes().iter().enumerate() {
        out.push_str(&class.id);
        out.push(',');
        out.push_str(class.split.as_str());
        push_row(&mut out, table.predefined().row(i));
        if let Some(e) = table.expanded() {
            push_row(&mut out, e.row(i));
        }
        out.push('\n');
    }
    write_text(path.as_ref(), &out)
}

/// Writes a plain numeric matrix with a `c0..c{w-1}` header.
pub fn save_matrix(path: impl AsRef<Path>, matrix: &Array2<f64>) -> Result<()> {
    let mut out = String::new();
    for j in 0..matrix.ncols() {
        if j > 0 {
            out.push(',');
        }
        out.push_str(&format!("c{j}"));
    }
    out.push('\n');
    for row in matrix.rows() {
        let mut line = String::new();
        push_row(&mut line, row);
        out.push_str(&line[1.min(line.len())..]);
        out.push('\n');
    }
    write_text(path.as_ref(), &out)
}

pub(crate) fn save_vector(path: impl AsRef<Path>, header: &str, values: &Array1<f64>) -> Result<()> {
    let mut out = format!("index,{header}\n");
    for (i, v) in values.iter().enumerate() {
        out.push_str(&format!("{i},{}\n", format_f64(*v)));
    }
    write_text(path.as_ref(), &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn two_class_list() -> ClassList {
        ClassList::new(vec![
            ClassInfo {
                id: "a".into(),
                split: Split::Seen,
            },
            ClassInfo {
                id: "b".into(),
                split: Split::Seen,
            },
            ClassInfo {
                id: "z".into(),
                split: Split::Unseen,
            },
        ])
        .unwrap()
    }

    #[test]
    fn normalize_three_four_five() {
        let out = l2_normalize_rows(&array![[3.0, 4.0], [0.0, 0.0]]);
        assert!((out[[0, 0]] - 0.6).abs() < 1e-15);
        assert!((out[[0, 1]] - 0.8).abs() < 1e-15);
        assert_eq!(out.row(1), array![0.0, 0.0]);
    }

    #[test]
    fn normalize_random_rows_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Array2::from_shape_fn((10, 8), |_| rng.random_range(-5.0..5.0));
        let out = l2_normalize_rows(&m);
        for row in out.rows() {
            // recomputed independently from the normalized output
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn centers_midpoint_and_identity() {
        let classes = two_class_list();
        let ds = LabeledDataset::new(
            array![[0.0, 0.0], [2.0, 4.0], [7.0, -1.0]],
            vec![0, 0, 1],
            None,
            classes,
            Partition::Train,
        )
        .unwrap();
        let c = class_centers(&ds).unwrap();
        assert_eq!(c, array![[1.0, 2.0], [7.0, -1.0]]);
    }

    #[test]
    fn centers_match_brute_force_grouping() {
        let bench = generate_synthetic(&SyntheticSpec {
            seed: 3,
            m_seen: 6,
            v_unseen: 2,
            d: 5,
            n: 3,
            cluster_spread: 1.0,
            examples_per_class: 7,
        })
        .unwrap();
        let centers = class_centers(&bench.train).unwrap();
        let seen = bench.train.classes().seen();
        for (pos, &class) in seen.iter().enumerate() {
            let members: Vec<_> = (0..bench.train.len())
                .filter(|&i| bench.train.labels()[i] == class)
                .collect();
            for j in 0..5 {
                let mean = members.iter().map(|&i| bench.train.features()[[i, j]]).sum::<f64>() / members.len() as f64;
                assert!((centers[[pos, j]] - mean).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn seen_class_without_examples_is_rejected() {
        let err = LabeledDataset::new(array![[1.0]], vec![0], None, two_class_list(), Partition::Train).unwrap_err();
        assert!(matches!(err, Error::EmptyClass(ref id) if id == "b"));
    }

    #[test]
    fn unseen_examples_rejected_in_training_partition() {
        let err = LabeledDataset::new(array![[1.0], [2.0], [3.0]], vec![0, 1, 2], None, two_class_list(), Partition::Train);
        assert!(err.is_err());
    }

    #[test]
    fn synthetic_shapes_and_determinism() {
        let spec = SyntheticSpec {
            seed: 11,
            m_seen: 5,
            v_unseen: 3,
            d: 16,
            n: 4,
            cluster_spread: 0.3,
            examples_per_class: 10,
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.train.features().dim(), (50, 16));
        assert_eq!(a.test.features().dim(), (30, 16));
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(a.prototypes, b.prototypes);
    }

    #[test]
    fn synthetic_noiseless_examples_equal_mapped_prototype() {
        let spec = SyntheticSpec {
            cluster_spread: 0.0,
            m_seen: 4,
            v_unseen: 2,
            d: 9,
            n: 3,
            examples_per_class: 5,
            seed: 2,
        };
        let bench = generate_synthetic(&spec).unwrap();
        for (row, &y) in bench.train.features().rows().into_iter().zip(bench.train.labels()) {
            let clean = bench.visual_map.dot(&bench.prototypes.predefined().row(y));
            assert_eq!(row, clean);
        }
        let centers = class_centers(&bench.train).unwrap();
        for (pos, &c) in bench.train.classes().seen().iter().enumerate() {
            let clean = bench.visual_map.dot(&bench.prototypes.predefined().row(c));
            for (a, b) in centers.row(pos).iter().zip(clean.iter()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn load_reports_nan_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        fs::write(&path, "example_id,class_id,f0,f1\n0,a,1,2\n1,b,NaN,2\n").unwrap();
        let classes = two_class_list();
        let err = load_features(
            &path,
            FeatureSchema {
                classes: &classes,
                partition: Partition::Train,
            },
        )
        .unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn load_three_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        fs::write(
            &path,
            "example_id,class_id,f0,f1,f2,f3\nx,a,1,2,3,4\ny,b,0.5,-1,2e-3,0\nw,a,1,1,1,1\n",
        )
        .unwrap();
        let classes = two_class_list();
        let ds = load_features(
            &path,
            FeatureSchema {
                classes: &classes,
                partition: Partition::Train,
            },
        )
        .unwrap();
        assert_eq!(ds.features().dim(), (3, 4));
        assert_eq!(ds.labels(), &[0, 1, 0]);
        assert_eq!(ds.example_ids()[2], "w");
    }

    #[test]
    fn load_errors_name_lines() {
        let dir = tempfile::tempdir().unwrap();
        let classes = two_class_list();
        let schema = FeatureSchema {
            classes: &classes,
            partition: Partition::Train,
        };
        let cases = [
            ("example_id,class_id,f0\n0,a,1\n1,q,2\n", 3),
            ("example_id,class_id,f0\n0,a,1\n1,b,2,3\n", 3),
            ("example_id,class_id,f0\n0,a,x\n1,b,2\n", 2),
        ];
        for (i, (text, want)) in cases.iter().enumerate() {
            let path = dir.path().join(format!("{i}.csv"));
            fs::write(&path, text).unwrap();
            match load_features(&path, schema) {
                Err(Error::Parse { line, .. }) => assert_eq!(line, *want, "case {i}"),
                other => panic!("case {i}: {other:?}"),
            }
        }
    }

    #[test]
    fn prototype_round_trip_with_expanded() {
        let classes = two_class_list();
        let table = PrototypeTable::new(
            classes,
            array![[1.0, 0.1], [2.0, 1e-9], [-3.5, 7.0]],
            Some(array![[0.5], [1e20], [-0.0]]),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        save_prototypes(&path, &table).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("class_id,split,a0,a1,e0\n"));
        assert!(!text.contains('\r'));
        assert_eq!(load_prototypes(&path).unwrap(), table);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn features_round_trip_bit_exact(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let features = Array2::from_shape_fn((rows, cols), |_| {
                let mantissa: f64 = rng.random_range(-1.0..1.0);
                mantissa * 10f64.powi(rng.random_range(-30..30))
            });
            let classes = ClassList::new(vec![ClassInfo { id: "only".into(), split: Split::Seen }]).unwrap();
            let ds = LabeledDataset::new(features, vec![0; rows], None, classes.clone(), Partition::Train).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("f.csv");
            save_features(&path, &ds).unwrap();
            let back = load_features(&path, FeatureSchema { classes: &classes, partition: Partition::Train }).unwrap();
            for (a, b) in ds.features().iter().zip(back.features().iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn normalize_is_idempotent(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = Array2::from_shape_fn((6, 5), |_| rng.random_range(-3.0..3.0));
            let once = l2_normalize_rows(&m);
            let twice = l2_normalize_rows(&once);
            for (a, b) in once.iter().zip(twice.iter()) {
                prop_assert!((a - b).abs() <= 1e-15);
            }
        }

        #[test]
        fn centers_commute_with_permutation(seed in any::<u64>()) {
            let bench = generate_synthetic(&SyntheticSpec {
                seed, m_seen: 3, v_unseen: 1, d: 4, n: 2, cluster_spread: 1.0, examples_per_class: 5,
            }).unwrap();
            let l = bench.train.len();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let mut order: Vec<usize> = (0..l).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            let features = bench.train.features().select(Axis(0), &order);
            let labels = order.iter().map(|&i| bench.train.labels()[i]).collect();
            let permuted = LabeledDataset::new(features, labels, None, bench.train.classes().clone(), Partition::Train).unwrap();
            let a = class_centers(&bench.train).unwrap();
            let b = class_centers(&permuted).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
