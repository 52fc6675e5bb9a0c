//! Visual→semantic projection and nearest-prototype recognition.
//!
//! The projection is a linear autoencoder `x → f_e(x) → f_d(f_e(x))` whose
//! code is pulled toward the class prototype:
//! `mean ‖x − f_d(f_e(x))‖² + λ · mean ‖f_e(x) − P_y‖²`.
//! Only the forward map `f_e` is used at test time.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{format_f64, write_text, LabeledDataset, PrototypeTable, Segment};
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, AdamConfig, Gradients, LayerSpec, Network};

pub use crate::prototypes::NeighborMetric as Metric;

/// Linear encoder/decoder pair, optionally with tied weights (`W_d = W_eᵀ`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionModel {
    encoder: Network,
    decoder: Network,
    tied: bool,
    lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionGradients {
    pub encoder: Gradients,
    pub decoder: Gradients,
}

impl ProjectionGradients {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.encoder.to_flat();
        out.extend(self.decoder.to_flat());
        out
    }
}

impl ProjectionModel {
    pub fn init(input_dim: usize, semantic_dim: usize, lambda: f64, tied: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Invalid("projection lambda must be finite and >= 0".into()));
        }
        let encoder = Network::init(&[LayerSpec::new(input_dim, semantic_dim, Activation::Linear)], rng)?;
        let mut decoder = Network::init(&[LayerSpec::new(semantic_dim, input_dim, Activation::Linear)], rng)?;
        if tied {
            decoder.layers_mut()[0].weight = encoder.layers()[0].weight.t().to_owned();
        }
        Ok(Self {
            encoder,
            decoder,
            tied,
            lambda,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn semantic_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn tied(&self) -> bool {
        self.tied
    }

    pub fn encoder(&self) -> &Network {
        &self.encoder
    }

    pub fn decoder(&self) -> &Network {
        &self.decoder
    }

    /// Forward projection `f_e` of each row.
    pub fn project(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.encoder.predict(x)
    }

    /// Trainable parameters: encoder, then decoder (bias only when tied).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.encoder.to_flat();
        if self.tied {
            out.extend(self.decoder.layers()[0].bias.iter().copied());
        } else {
            out.extend(self.decoder.to_flat());
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        let split = self.encoder.param_count();
        let tail = if self.tied { self.input_dim() } else { self.decoder.param_count() };
        if values.len() != split + tail {
            return Err(Error::shape("projection parameters", split + tail, values.len()));
        }
        self.encoder.set_flat(&values[..split])?;
        if self.tied {
            let layer = &mut self.decoder.layers_mut()[0];
            layer.bias.assign(&ArrayView1::from(&values[split..]));
            self.sync_tied();
        } else {
            self.decoder.set_flat(&values[split..])?;
        }
        Ok(())
    }

    fn sync_tied(&mut self) {
        if self.tied {
            let w = self.encoder.layers()[0].weight.t().to_owned();
            self.decoder.layers_mut()[0].weight = w;
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = format!(
            "projection {} {}\n",
            if self.tied { "tied" } else { "untied" },
            format_f64(self.lambda)
        );
        self.encoder.write_checkpoint(&mut out);
        self.decoder.write_checkpoint(&mut out);
        write_text(path.as_ref(), &out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
        let bad = || Error::Invalid(format!("{}: not a projection checkpoint", path.display()));
        let (tied, lambda) = match header.as_slice() {
            ["projection", t, l] => (*t == "tied", l.parse::<f64>().map_err(|_| bad())?),
            _ => return Err(bad()),
        };
        let encoder = Network::read_checkpoint(&mut lines)?;
        let decoder = Network::read_checkpoint(&mut lines)?;
        Ok(Self {
            encoder,
            decoder,
            tied,
            lambda,
        })
    }
}

/// Projection objective on a batch, with gradients.
pub fn projection_loss(
    model: &ProjectionModel,
    x: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
) -> Result<(f64, ProjectionGradients)> {
    let b = x.nrows();
    if b == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    if targets.dim() != (b, model.semantic_dim()) {
        return Err(Error::shape(
            "projection targets",
            format!("{b}x{}", model.semantic_dim()),
            format!("{:?}", targets.dim()),
        ));
    }
    let enc = model.encoder.forward(x)?;
    let code = enc.output();
    let dec = model.decoder.forward(code.view())?;
    let xhat = dec.output();
    let rec: f64 = x.iter().zip(xhat.iter()).map(|(a, c)| (a - c) * (a - c)).sum::<f64>() / b as f64;
    let lat: f64 = code.iter().zip(targets.iter()).map(|(a, c)| (a - c) * (a - c)).sum::<f64>() / b as f64;
    let dxhat = (xhat - &x) * (2.0 / b as f64);
    let (mut decoder, dcode) = model.decoder.backward(&dec, dxhat.view())?;
    let dcode = dcode + &((code - &targets) * (2.0 * model.lambda / b as f64));
    let (mut encoder, _) = model.encoder.backward(&enc, dcode.view())?;
    if model.tied {
        let shared = decoder.layers[0].weight.t().to_owned();
        encoder.layers[0].weight += &shared;
        decoder.layers[0].weight.fill(0.0);
    }
    Ok((rec + model.lambda * lat, ProjectionGradients { encoder, decoder }))
}

/// Flattened gradient in [`ProjectionModel::to_flat`] order.
pub fn projection_flat_grad(model: &ProjectionModel, grads: &ProjectionGradients) -> Vec<f64> {
    let mut out = grads.encoder.to_flat();
    if model.tied {
        out.extend(grads.decoder.layers[0].bias.iter().copied());
    } else {
        out.extend(grads.decoder.to_flat());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionConfig {
    pub lambda: f64,
    pub tied: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            tied: false,
            epochs: 200,
            batch_size: 64,
            adam: AdamConfig::default(),
            seed: 7,
        }
    }
}

/// Trains the projection on seen examples. `prototypes` has one row per
/// class of the dataset's class list (only seen rows are read).
///
/// The RNG seeded with `config.seed` draws the encoder, then the decoder,
/// then one shuffle per epoch.
pub fn train_projection(
    train: &LabeledDataset,
    prototypes: &Array2<f64>,
    config: &ProjectionConfig,
) -> Result<ProjectionModel> {
    if prototypes.nrows() != train.classes().len() {
        return Err(Error::shape("projection prototypes", train.classes().len(), prototypes.nrows()));
    }
    if config.batch_size == 0 {
        return Err(Error::Invalid("batch size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = ProjectionModel::init(train.dim(), prototypes.ncols(), config.lambda, config.tied, &mut rng)?;
    let targets = prototypes.select(Axis(0), train.labels());
    let mut enc_opt = Adam::new(config.adam, &model.encoder);
    let mut dec_opt = Adam::new(config.adam, &model.decoder);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let x = train.features().select(Axis(0), chunk);
            let t = targets.select(Axis(0), chunk);
            let (loss, grads) = projection_loss(&model, x.view(), t.view())?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("projection loss at epoch {epoch}")));
            }
            enc_opt.step(&mut model.encoder, &grads.encoder)?;
            dec_opt.step(&mut model.decoder, &grads.decoder)?;
            model.sync_tied();
        }
    }
    Ok(model)
}

/// Candidate prototypes for recognition.
#[derive(Debug, Clone, PartialEq)]
pub struct UnseenPrototypes {
    /// Class-list indices, in class-list order.
    pub classes: Vec<usize>,
    pub ids: Vec<String>,
    /// One row per candidate class.
    pub matrix: Array2<f64>,
}

impl UnseenPrototypes {
    pub fn from_table(table: &PrototypeTable, segment: Segment) -> Result<Self> {
        let classes = table.classes().unseen();
        if classes.is_empty() {
            return Err(Error::Invalid("no unseen classes to recognize".into()));
        }
        let matrix = table.segment(segment)?.select(Axis(0), &classes);
        let ids = classes.iter().map(|&c| table.classes().get(c).id.clone()).collect();
        Ok(Self { classes, ids, matrix })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

fn distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>, a_norm: f64, metric: Metric) -> Result<f64> {
    match metric {
        Metric::Euclidean => Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()),
        Metric::Cosine => {
            let b_norm = b.dot(&b).sqrt();
            if b_norm == 0.0 {
                return Err(Error::ZeroNorm("cosine distance to a zero prototype".into()));
            }
            Ok(1.0 - a.dot(&b) / (a_norm * b_norm))
        }
    }
}

/// Prototype rows ordered nearest first; ties go to the lower row.
pub fn rank_prototypes(embedding: ArrayView1<'_, f64>, prototypes: ArrayView2<'_, f64>, metric: Metric) -> Result<Vec<usize>> {
    if prototypes.ncols() != embedding.len() {
        return Err(Error::shape("prototype dimension", embedding.len(), prototypes.ncols()));
    }
    if prototypes.nrows() == 0 {
        return Err(Error::Invalid("no prototypes to rank".into()));
    }
    let norm = embedding.dot(&embedding).sqrt();
    if metric == Metric::Cosine && norm == 0.0 {
        return Err(Error::ZeroNorm("projected embedding has zero norm; cosine distance undefined".into()));
    }
    let mut scored = prototypes
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| distance(embedding, row, norm, metric).map(|d| (d, i)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(_, i)| i).collect())
}

/// Class-list index of the nearest candidate to `embedding`.
pub fn classify_embedding(embedding: ArrayView1<'_, f64>, protos: &UnseenPrototypes, metric: Metric) -> Result<usize> {
    Ok(protos.classes[rank_prototypes(embedding, protos.matrix.view(), metric)?[0]])
}

/// Projects `x` and returns the class-list index of the nearest candidate.
pub fn classify(model: &ProjectionModel, x: ArrayView1<'_, f64>, protos: &UnseenPrototypes, metric: Metric) -> Result<usize> {
    let row = x.insert_axis(Axis(0));
    let embedding = model.project(row)?;
    classify_embedding(embedding.row(0), protos, metric)
}

/// Rank (0-based) of the true class for every test example.
fn true_class_ranks(
    model: &ProjectionModel,
    test: &LabeledDataset,
    protos: &UnseenPrototypes,
    metric: Metric,
) -> Result<Vec<(usize, usize, usize)>> {
    if test.is_empty() {
        return Err(Error::Invalid("empty test set".into()));
    }
    let embeddings = model.project(test.features().view())?;
    let rows: Vec<usize> = (0..test.len()).collect();
    rows.par_iter()
        .map(|&i| {
            let truth = test.labels()[i];
            let truth_pos = protos
                .classes
                .iter()
                .position(|&c| c == truth)
                .ok_or_else(|| Error::Invalid(format!("test label `{}` is not a candidate class", test.classes().get(truth).id)))?;
            let ranking = rank_prototypes(embeddings.row(i), protos.matrix.view(), metric)?;
            let rank = ranking.iter().position(|&r| r == truth_pos).expect("ranking is a permutation");
            Ok((truth_pos, ranking[0], rank))
        })
        .collect()
}

/// Fraction of test examples whose class is among the `k` nearest, for `k = 1..=max_k`.
pub fn hit_at_k(
    model: &ProjectionModel,
    test: &LabeledDataset,
    protos: &UnseenPrototypes,
    max_k: usize,
    metric: Metric,
) -> Result<Vec<f64>> {
    Ok(evaluate(model, test, protos, max_k, metric)?.hit_at_k)
}

/// `counts[i][j]`: examples of candidate `i` predicted as candidate `j`.
pub fn confusion_matrix(
    model: &ProjectionModel,
    test: &LabeledDataset,
    protos: &UnseenPrototypes,
    metric: Metric,
) -> Result<Array2<u64>> {
    Ok(evaluate(model, test, protos, 1, metric)?.confusion)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    /// Candidate class ids, in confusion-matrix order.
    pub class_ids: Vec<String>,
    /// `hit_at_k[k - 1]` is Hit@k.
    pub hit_at_k: Vec<f64>,
    pub confusion: Array2<u64>,
    pub per_class_accuracy: Vec<f64>,
    pub per_class_count: Vec<u64>,
}

impl EvaluationReport {
    pub fn hit1(&self) -> f64 {
        self.hit_at_k[0]
    }

    pub fn report_csv(&self) -> String {
        let mut out = String::from("k,hit_at_k\n");
        for (i, h) in self.hit_at_k.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, format_f64(*h)));
        }
        out
    }

    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("class_id");
        for id in &self.class_ids {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        for (id, row) in self.class_ids.iter().zip(self.confusion.rows()) {
            out.push_str(id);
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn per_class_csv(&self) -> String {
        let mut out = String::from("class_id,count,accuracy\n");
        for ((id, n), a) in self.class_ids.iter().zip(&self.per_class_count).zip(&self.per_class_accuracy) {
            out.push_str(&format!("{id},{n},{}\n", format_f64(*a)));
        }
        out
    }

    /// Writes `report.csv`, `confusion.csv` and `per_class.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_text(&dir.join("report.csv"), &self.report_csv())?;
        write_text(&dir.join("confusion.csv"), &self.confusion_csv())?;
        write_text(&dir.join("per_class.csv"), &self.per_class_csv())
    }
}

/// Hit@1..=max_k, confusion counts and per-class accuracy in one pass.
pub fn evaluate(
    model: &ProjectionModel,
    test: &LabeledDataset,
    protos: &UnseenPrototypes,
    max_k: usize,
    metric: Metric,
) -> Result<EvaluationReport> {
    let v = protos.len();
    if max_k == 0 || max_k > v {
        return Err(Error::Invalid(format!("Hit@k needs 1 <= K <= {v}, got {max_k}")));
    }
    let outcomes = true_class_ranks(model, test, protos, metric)?;
    let mut rank_counts = vec![0u64; v];
    let mut confusion = Array2::<u64>::zeros((v, v));
    for &(truth, predicted, rank) in &outcomes {
        rank_counts[rank] += 1;
        confusion[[truth, predicted]] += 1;
    }
    let total = outcomes.len() as f64;
    let mut cumulative = 0u64;
    let hit_at_k = rank_counts
        .iter()
        .take(max_k)
        .map(|&c| {
            cumulative += c;
            cumulative as f64 / total
        })
        .collect();
    let per_class_count: Vec<u64> = confusion.rows().into_iter().map(|r| r.sum()).collect();
    let per_class_accuracy = per_class_count
        .iter()
        .enumerate()
        .map(|(i, &n)| if n == 0 { 0.0 } else { confusion[[i, i]] as f64 / n as f64 })
        .collect();
    Ok(EvaluationReport {
        class_ids: protos.ids.clone(),
        hit_at_k,
        confusion,
        per_class_accuracy,
        per_class_count,
    })
}

/// Mean `‖f_e(x) − P_y‖` over the dataset.
pub fn mean_code_distance(model: &ProjectionModel, ds: &LabeledDataset, prototypes: &Array2<f64>) -> Result<f64> {
    let codes = model.project(ds.features().view())?;
    let targets = prototypes.select(Axis(0), ds.labels());
    let total: f64 = codes
        .rows()
        .into_iter()
        .zip(targets.rows())
        .map(|(a, b)| (&a - &b).mapv(|v| v * v).sum().sqrt())
        .sum();
    Ok(total / ds.len() as f64)
}

#[doc(hidden)]
pub fn identity_projection(dim: usize) -> ProjectionModel {
    let layer = |d: usize| {
        Network::from_layers(vec![crate::nn::Layer {
            spec: LayerSpec::new(d, d, Activation::Linear),
            weight: Array2::eye(d),
            bias: Array1::zeros(d),
        }])
        .expect("identity layer")
    };
    ProjectionModel {
        encoder: layer(dim),
        decoder: layer(dim),
        tied: false,
        lambda: 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, ClassInfo, ClassList, Partition, Split, SyntheticSpec};
    use crate::nn::{gradient_check, GradCheckOptions};
    use ndarray::array;
    use rand::Rng;

    fn candidates(matrix: Array2<f64>) -> UnseenPrototypes {
        let v = matrix.nrows();
        UnseenPrototypes {
            classes: (0..v).collect(),
            ids: (0..v).map(|i| format!("u{i}")).collect(),
            matrix,
        }
    }

    fn unseen_classes(v: usize) -> ClassList {
        let mut c: Vec<ClassInfo> = (0..v)
            .map(|i| ClassInfo {
                id: format!("u{i}"),
                split: Split::Unseen,
            })
            .collect();
        c.push(ClassInfo {
            id: "s".into(),
            split: Split::Seen,
        });
        ClassList::new(c).unwrap()
    }

    #[test]
    fn exact_hit_and_tie_rule() {
        let protos = candidates(array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let model = identity_projection(2);
        for metric in [Metric::Cosine, Metric::Euclidean] {
            assert_eq!(classify(&model, array![0.0, 1.0].view(), &protos, metric).unwrap(), 1);
        }
        // equidistant from rows 0 and 1 under both metrics, and row 2 is farther under euclidean
        let ties = candidates(array![[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(classify(&model, array![1.0, 1.0].view(), &ties, Metric::Cosine).unwrap(), 0);
        assert_eq!(classify(&model, array![1.0, 1.0].view(), &ties, Metric::Euclidean).unwrap(), 0);
    }

    #[test]
    fn zero_embedding_rejected_under_cosine() {
        let protos = candidates(array![[1.0, 0.0]]);
        let model = identity_projection(2);
        assert!(matches!(
            classify(&model, array![0.0, 0.0].view(), &protos, Metric::Cosine),
            Err(Error::ZeroNorm(_))
        ));
        assert_eq!(classify(&model, array![0.0, 0.0].view(), &protos, Metric::Euclidean).unwrap(), 0);
    }

    #[test]
    fn cosine_argmin_invariant_to_prototype_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let m = Array2::from_shape_fn((6, 4), |_| rng.random_range(-1.0..1.0));
            let e = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
            let scale = rng.random_range(0.01..100.0);
            let a = classify_embedding(e.view(), &candidates(m.clone()), Metric::Cosine).unwrap();
            let b = classify_embedding(e.view(), &candidates(&m * scale), Metric::Cosine).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rank_two_example() {
        // truth u1 is second nearest
        let test = LabeledDataset::new(array![[1.0, 0.1]], vec![1], None, unseen_classes(2), Partition::Test).unwrap();
        let protos = candidates(array![[1.0, 0.0], [0.0, 1.0]]);
        let report = evaluate(&identity_projection(2), &test, &protos, 2, Metric::Euclidean).unwrap();
        assert_eq!(report.hit_at_k, vec![0.0, 1.0]);
        assert!(evaluate(&identity_projection(2), &test, &protos, 3, Metric::Euclidean).is_err());
    }

    #[test]
    fn hit_k_matches_brute_force_ranks() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = 5;
        let l = 60;
        let features = Array2::from_shape_fn((l, 3), |_| rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..l).map(|i| i % v).collect();
        let test = LabeledDataset::new(features.clone(), labels.clone(), None, unseen_classes(v), Partition::Test).unwrap();
        let protos = candidates(Array2::from_shape_fn((v, 3), |_| rng.random_range(-1.0..1.0)));
        for metric in [Metric::Cosine, Metric::Euclidean] {
            let report = evaluate(&identity_projection(3), &test, &protos, v, metric).unwrap();
            let mut hits = vec![0usize; v];
            for i in 0..l {
                let x = features.row(i);
                let dist = |j: usize| {
                    let p = protos.matrix.row(j);
                    match metric {
                        Metric::Euclidean => (&x - &p).mapv(|t| t * t).sum().sqrt(),
                        Metric::Cosine => 1.0 - x.dot(&p) / (x.dot(&x).sqrt() * p.dot(&p).sqrt()),
                    }
                };
                let own = dist(labels[i]);
                // rank = number of candidates strictly closer, plus ties with a lower index
                let rank = (0..v)
                    .filter(|&j| dist(j) < own || (dist(j) == own && j < labels[i]))
                    .count();
                for h in hits.iter_mut().skip(rank) {
                    *h += 1;
                }
            }
            for k in 0..v {
                assert_eq!(report.hit_at_k[k], hits[k] as f64 / l as f64);
            }
            assert_eq!(report.hit_at_k[v - 1], 1.0);
            let trace: u64 = (0..v).map(|i| report.confusion[[i, i]]).sum();
            assert_eq!(trace as f64 / l as f64, report.hit_at_k[0]);
            for (row, &n) in report.confusion.rows().into_iter().zip(&report.per_class_count) {
                assert_eq!(row.sum(), n);
                assert_eq!(n, 12);
            }
        }
    }

    #[test]
    fn perfect_classifier_is_diagonal() {
        let test = LabeledDataset::new(
            array![[1.0, 0.0], [0.0, 2.0], [3.0, 0.1]],
            vec![0, 1, 0],
            None,
            unseen_classes(2),
            Partition::Test,
        )
        .unwrap();
        let protos = candidates(array![[1.0, 0.0], [0.0, 1.0]]);
        let c = confusion_matrix(&identity_projection(2), &test, &protos, Metric::Cosine).unwrap();
        assert_eq!(c, array![[2, 0], [0, 1]]);
    }

    #[test]
    fn projection_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Array2::from_shape_fn((6, 5), |_| rng.random_range(-1.0..1.0));
        let t = Array2::from_shape_fn((6, 3), |_| rng.random_range(-1.0..1.0));
        for tied in [false, true] {
            let model = ProjectionModel::init(5, 3, 0.7, tied, &mut rng).unwrap();
            let (_, grads) = projection_loss(&model, x.view(), t.view()).unwrap();
            let mut probe = model.clone();
            let report = gradient_check(
                |p| {
                    probe.set_flat(p).unwrap();
                    projection_loss(&probe, x.view(), t.view()).unwrap().0
                },
                &model.to_flat(),
                &projection_flat_grad(&model, &grads),
                GradCheckOptions::default(),
            );
            assert!(report.passed(), "tied={tied}: {report:?}");
        }
    }

    fn toy() -> (LabeledDataset, Array2<f64>) {
        let bench = generate_synthetic(&SyntheticSpec {
            seed: 5,
            m_seen: 6,
            v_unseen: 2,
            d: 10,
            n: 3,
            cluster_spread: 0.1,
            examples_per_class: 10,
        })
        .unwrap();
        (bench.train, bench.prototypes.predefined().clone())
    }

    #[test]
    fn zero_epochs_and_determinism() {
        let (train, protos) = toy();
        let config = ProjectionConfig {
            epochs: 0,
            ..Default::default()
        };
        let model = train_projection(&train, &protos, &config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        assert_eq!(model, ProjectionModel::init(10, 3, 1.0, false, &mut rng).unwrap());
        let config = ProjectionConfig {
            epochs: 20,
            ..Default::default()
        };
        assert_eq!(
            train_projection(&train, &protos, &config).unwrap(),
            train_projection(&train, &protos, &config).unwrap()
        );
    }

    #[test]
    fn large_lambda_pulls_codes_to_prototypes() {
        let (train, protos) = toy();
        let run = |lambda: f64| {
            let config = ProjectionConfig {
                lambda,
                epochs: 150,
                adam: AdamConfig {
                    learning_rate: 1e-2,
                    ..Default::default()
                },
                ..Default::default()
            };
            mean_code_distance(&train_projection(&train, &protos, &config).unwrap(), &train, &protos).unwrap()
        };
        let free = run(0.0);
        let pulled = run(50.0);
        assert!(pulled < free, "lambda=50: {pulled}, lambda=0: {free}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = ProjectionModel::init(4, 2, 0.25, true, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        model.save(&path).unwrap();
        assert_eq!(ProjectionModel::load(&path).unwrap(), model);
    }
}
