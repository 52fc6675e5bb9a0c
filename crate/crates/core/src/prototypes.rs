//! Prototype update after expansion.
//!
//! Seen classes get the mean latent code of their training examples. Unseen
//! classes get `Σ θ_i · expanded_i` over their `g` nearest seen classes,
//! where `θ` reconstructs the unseen predefined prototype from the
//! neighbors' predefined prototypes in the least-squares sense.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::data::{LabeledDataset, PrototypeTable};
use crate::error::{Error, Result};
use crate::expansion::{encode_examples, ExpansionModel};
use crate::linalg::least_squares_rows;

/// Number of seen neighbors used to reconstruct an unseen prototype.
pub const DEFAULT_NEIGHBORS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeighborMetric {
    Euclidean,
    Cosine,
}

impl NeighborMetric {
    pub fn name(self) -> &'static str {
        match self {
            NeighborMetric::Euclidean => "euclidean",
            NeighborMetric::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "euclidean" => Some(NeighborMetric::Euclidean),
            "cosine" => Some(NeighborMetric::Cosine),
            _ => None,
        }
    }
}

/// Reconstruction of one unseen predefined prototype from seen neighbors.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSolution {
    /// Positions among the seen classes, nearest first.
    pub neighbors: Vec<usize>,
    pub theta: Array1<f64>,
    /// `‖target − Σ θ_i · neighbor_i‖`.
    pub residual: f64,
}

/// Mean latent code per seen class, rows in seen-class order.
pub fn expand_seen_prototypes(model: &ExpansionModel, ds: &LabeledDataset) -> Result<Array2<f64>> {
    let codes = encode_examples(model, ds.features().view())?;
    let positions = ds.seen_positions()?;
    let seen = ds.classes().seen();
    grouped_means(&codes, &positions, seen.len()).map_err(|pos| Error::EmptyClass(ds.classes().get(seen[pos]).id.clone()))
}

fn grouped_means(values: &Array2<f64>, groups: &[usize], count: usize) -> std::result::Result<Array2<f64>, usize> {
    let mut sums = Array2::zeros((count, values.ncols()));
    let mut sizes = vec![0usize; count];
    for (row, &g) in values.rows().into_iter().zip(groups) {
        let mut target = sums.row_mut(g);
        target += &row;
        sizes[g] += 1;
    }
    for (g, &size) in sizes.iter().enumerate() {
        if size == 0 {
            return Err(g);
        }
        sums.row_mut(g).mapv_inplace(|v| v / size as f64);
    }
    Ok(sums)
}

/// `[predefined, expanded]`; with no expanded segment the predefined vector is returned.
pub fn concat_prototype(predefined: ArrayView1<'_, f64>, expanded: Option<ArrayView1<'_, f64>>) -> Array1<f64> {
    match expanded {
        Some(e) => concatenate![Axis(0), predefined, e],
        None => predefined.to_owned(),
    }
}

/// Inverse of [`concat_prototype`].
pub fn split_prototype(combined: ArrayView1<'_, f64>, n: usize) -> Result<(Array1<f64>, Array1<f64>)> {
    if n > combined.len() {
        return Err(Error::shape("prototype split", format!("<= {}", combined.len()), n));
    }
    Ok((combined.slice(s![..n]).to_owned(), combined.slice(s![n..]).to_owned()))
}

fn distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>, metric: NeighborMetric) -> Result<f64> {
    match metric {
        NeighborMetric::Euclidean => Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()),
        NeighborMetric::Cosine => {
            let na = a.dot(&a).sqrt();
            let nb = b.dot(&b).sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(Error::ZeroNorm("cosine neighbor search on a zero prototype".into()));
            }
            Ok(1.0 - a.dot(&b) / (na * nb))
        }
    }
}

/// The `g` seen prototypes (rows of `seen`) closest to `target`; ties go to the lower index.
pub fn nearest_seen_neighbors(
    target: ArrayView1<'_, f64>,
    seen: ArrayView2<'_, f64>,
    g: usize,
    metric: NeighborMetric,
) -> Result<Vec<usize>> {
    let m = seen.nrows();
    if g == 0 || g > m {
        return Err(Error::Invalid(format!("neighbor count g={g} must be in 1..={m}")));
    }
    if seen.ncols() != target.len() {
        return Err(Error::shape("neighbor search", seen.ncols(), target.len()));
    }
    let mut scored = seen
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| distance(target, row, metric).map(|d| (d, i)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(g).map(|(_, i)| i).collect())
}

/// Least-squares coefficients expressing `target` through the rows of `neighbor_protos`.
pub fn solve_theta(
    target: ArrayView1<'_, f64>,
    neighbor_protos: ArrayView2<'_, f64>,
    neighbors: Vec<usize>,
) -> Result<NeighborSolution> {
    if neighbors.len() != neighbor_protos.nrows() {
        return Err(Error::shape("neighbor ids", neighbor_protos.nrows(), neighbors.len()));
    }
    let theta = least_squares_rows(neighbor_protos, target)?;
    let fitted = neighbor_protos.t().dot(&theta);
    let residual = (&target - &fitted).mapv(|v| v * v).sum().sqrt();
    Ok(NeighborSolution {
        neighbors,
        theta,
        residual,
    })
}

/// `Σ θ_i · seen_expanded[neighbor_i]`.
pub fn expand_unseen_prototype(sol: &NeighborSolution, seen_expanded: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    let mut out = Array1::zeros(seen_expanded.ncols());
    for (&i, &t) in sol.neighbors.iter().zip(sol.theta.iter()) {
        if i >= seen_expanded.nrows() {
            return Err(Error::Invalid(format!("neighbor {i} has no expanded prototype")));
        }
        out.scaled_add(t, &seen_expanded.row(i));
    }
    Ok(out)
}

/// Options for [`build_full_prototype_table`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateOptions {
    /// Clamped to the number of seen classes.
    pub neighbors: usize,
    pub metric: NeighborMetric,
    /// Search neighbors on L2-normalized predefined prototypes.
    pub normalize_search: bool,
}

impl Default for UpdateOptions {
    fn default() -> Self {
        Self {
            neighbors: DEFAULT_NEIGHBORS,
            metric: NeighborMetric::Euclidean,
            normalize_search: false,
        }
    }
}

/// Fills the expanded segment of every class.
///
/// `seen_expanded` holds one row per seen class (seen-class order). With
/// `None` the expansion is disabled and the predefined table is returned
/// unchanged. Also returns the neighbor solution of each unseen class.
pub fn build_full_prototype_table(
    table: &PrototypeTable,
    seen_expanded: Option<&Array2<f64>>,
    options: UpdateOptions,
) -> Result<(PrototypeTable, Vec<NeighborSolution>)> {
    let Some(seen_expanded) = seen_expanded else {
        return Ok((table.with_expanded(None)?, Vec::new()));
    };
    let classes = table.classes();
    let seen = classes.seen();
    let unseen = classes.unseen();
    if seen_expanded.nrows() != seen.len() {
        return Err(Error::shape("seen expanded prototypes", seen.len(), seen_expanded.nrows()));
    }
    let seen_pre = table.predefined().select(Axis(0), &seen);
    let search_space = if options.normalize_search {
        crate::data::l2_normalize_rows(&seen_pre)
    } else {
        seen_pre.clone()
    };
    let g = options.neighbors.min(seen.len());
    let k = seen_expanded.ncols();
    let mut expanded = Array2::zeros((classes.len(), k));
    for (pos, &c) in seen.iter().enumerate() {
        expanded.row_mut(c).assign(&seen_expanded.row(pos));
    }
    let mut solutions = Vec::with_capacity(unseen.len());
    for &c in &unseen {
        let target = table.predefined().row(c);
        let query = if options.normalize_search {
            let norm = target.dot(&target).sqrt();
            if norm > 0.0 {
                &target / norm
            } else {
                target.to_owned()
            }
        } else {
            target.to_owned()
        };
        let neighbors = nearest_seen_neighbors(query.view(), search_space.view(), g, options.metric)?;
        let basis = seen_pre.select(Axis(0), &neighbors);
        let sol = solve_theta(target, basis.view(), neighbors)?;
        expanded.row_mut(c).assign(&expand_unseen_prototype(&sol, seen_expanded.view())?);
        solutions.push(sol);
    }
    Ok((table.with_expanded(Some(expanded))?, solutions))
}

/// Seen means from the model, then the unseen reconstruction.
pub fn update_prototypes(
    model: &ExpansionModel,
    train: &LabeledDataset,
    table: &PrototypeTable,
    options: UpdateOptions,
) -> Result<(PrototypeTable, Vec<NeighborSolution>)> {
    let seen_expanded = expand_seen_prototypes(model, train)?;
    build_full_prototype_table(table, Some(&seen_expanded), options)
}
