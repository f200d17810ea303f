//! Last-hidden-layer discriminant scoring. Each sample's firing vector is
//! the per-neuron spatial max of the tagged layer's activations; stacking
//! them gives the firing matrix, from which within-class and between-class
//! scatter matrices are formed (raw sums of squares, no 1/(n-1)
//! normalisation — the scores are ratios, so normalisation cancels). The
//! production score for neuron j is the diagonal ratio
//! `v_j = sigma2_b(j) / (sigma2_w(j) + eps)`; the full generalized
//! eigensolver over the scatter pencil exists for validation and reporting
//! only and never sits on the pruning path.

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::Dataset;
use crate::graph::{forward, GraphError, NetGraph};

/// Guard added to within-class variances (and to the pencil diagonal in the
/// eigensolver): dead-on-class rectified neurons make zero within-class
/// variance common, and an unguarded ratio is undefined.
pub const EPSILON: f64 = 1e-9;

/// Sample variance below this counts as a zero-variance (dead) column.
pub const ZERO_VARIANCE: f64 = 1e-12;

/// Activations are quantised to this step before duplicate-column detection.
pub const DUPLICATE_QUANTUM: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum LdaError {
    #[error("all firing columns are degenerate (dead layer)")]
    DeadLayer,
    #[error("need at least two classes with two or more rows each (class {class} has {rows})")]
    ClassTooSmall { class: usize, rows: usize },
    #[error("firing matrix needs at least two classes, found {0}")]
    NotEnoughClasses(usize),
    #[error("selection is empty")]
    EmptySelection,
    #[error("scatter pencil is not positive definite after regularisation")]
    NotPositiveDefinite,
    #[error("eigensolver did not converge")]
    EigenFailed,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// N observations of M surviving neuron columns from the tagged layer, with
/// the mapping from cleaned column to original neuron index.
#[derive(Debug, Clone)]
pub struct FiringMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    labels: Vec<u8>,
    column_to_neuron: Vec<usize>,
    class_count: usize,
}

impl FiringMatrix {
    pub fn from_rows(
        raw: Vec<Vec<f64>>,
        labels: Vec<u8>,
        class_count: usize,
    ) -> Result<Self, LdaError> {
        let rows = raw.len();
        if rows == 0 || raw[0].is_empty() {
            return Err(LdaError::DeadLayer);
        }
        let m0 = raw[0].len();
        if raw.iter().any(|r| r.len() != m0) || labels.len() != rows {
            return Err(LdaError::Dimension(format!(
                "ragged rows or {} labels for {} rows",
                labels.len(),
                rows
            )));
        }

        // Column cleaning: drop zero-variance columns, then exact duplicates
        // after quantisation.
        let n = rows as f64;
        let mut keep: Vec<usize> = Vec::with_capacity(m0);
        let mut seen = std::collections::HashSet::new();
        for c in 0..m0 {
            let mean = raw.iter().map(|r| r[c]).sum::<f64>() / n;
            let var = raw.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            if var < ZERO_VARIANCE {
                continue;
            }
            let key: Vec<i64> = raw
                .iter()
                .map(|r| (r[c] / DUPLICATE_QUANTUM).round() as i64)
                .collect();
            if seen.insert(key) {
                keep.push(c);
            }
        }
        if keep.is_empty() {
            return Err(LdaError::DeadLayer);
        }

        let mut data = Vec::with_capacity(rows * keep.len());
        for r in &raw {
            for &c in &keep {
                data.push(r[c]);
            }
        }
        Ok(FiringMatrix {
            rows,
            cols: keep.len(),
            data,
            labels,
            column_to_neuron: keep,
            class_count,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn column_to_neuron(&self) -> &[usize] {
        &self.column_to_neuron
    }

    pub fn neuron_of_column(&self, col: usize) -> usize {
        self.column_to_neuron[col]
    }
}

/// Firing score of one neuron for one sample: the activation itself for a
/// flat layer, the spatial max for a convolutional one.
pub fn firing_row(activation: &crate::tensor::Tensor) -> Vec<f64> {
    match activation.shape() {
        [c, h, w] => {
            let hw = h * w;
            (0..*c)
                .map(|ch| {
                    activation.data()[ch * hw..(ch + 1) * hw]
                        .iter()
                        .cloned()
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect()
        }
        _ => activation.data().to_vec(),
    }
}

/// Run the net over the dataset and collect the cleaned firing matrix from
/// the tagged last-hidden layer.
pub fn build_firing_matrix(g: &NetGraph, data: &Dataset) -> Result<FiringMatrix, LdaError> {
    if data.is_empty() {
        return Err(LdaError::Dimension("empty dataset".into()));
    }
    let tag = g.last_hidden();
    let raw: Vec<Vec<f64>> = data
        .images
        .par_iter()
        .map(|x| forward(g, x, None).map(|cache| firing_row(cache.output(tag))))
        .collect::<Result<_, _>>()?;
    FiringMatrix::from_rows(raw, data.labels.clone(), data.class_count)
}

/// Within-class, between-class and total scatter of a firing matrix
/// (`sigma_b = sigma_a - sigma_w`), stored dense and symmetric.
#[derive(Debug, Clone)]
pub struct ScatterPair {
    m: usize,
    sw: Vec<f64>,
    sb: Vec<f64>,
    sa: Vec<f64>,
}

impl ScatterPair {
    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn sw(&self) -> &[f64] {
        &self.sw
    }

    pub fn sb(&self) -> &[f64] {
        &self.sb
    }

    pub fn sa(&self) -> &[f64] {
        &self.sa
    }

    pub fn sw_diag(&self) -> Vec<f64> {
        (0..self.m).map(|j| self.sw[j * self.m + j]).collect()
    }

    pub fn sb_diag(&self) -> Vec<f64> {
        (0..self.m).map(|j| self.sb[j * self.m + j]).collect()
    }

    /// L1 mass of the off-diagonal relative to the diagonal — the
    /// decorrelation diagnostic reported alongside pruning runs.
    pub fn offdiag_mass(matrix: &[f64], m: usize) -> f64 {
        let mut off = 0.0;
        let mut diag = 0.0;
        for i in 0..m {
            for j in 0..m {
                let v = matrix[i * m + j].abs();
                if i == j {
                    diag += v;
                } else {
                    off += v;
                }
            }
        }
        off / diag.max(f64::MIN_POSITIVE)
    }
}

/// Accumulate `X~^T X~` over the given rows with the supplied mean.
fn centered_gram(fm: &FiringMatrix, rows: &[usize], mean: &[f64], acc: &mut [f64]) {
    let m = fm.cols();
    let mut centered = vec![0.0; m];
    for &r in rows {
        for (c, cv) in centered.iter_mut().enumerate() {
            *cv = fm.row(r)[c] - mean[c];
        }
        for i in 0..m {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            let row_acc = &mut acc[i * m..(i + 1) * m];
            for (j, &cj) in centered.iter().enumerate() {
                row_acc[j] += ci * cj;
            }
        }
    }
}

pub fn scatter(fm: &FiringMatrix) -> Result<ScatterPair, LdaError> {
    let m = fm.cols();
    let n = fm.rows();

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); fm.class_count()];
    for r in 0..n {
        by_class[fm.labels()[r] as usize].push(r);
    }
    let present: Vec<usize> = (0..by_class.len())
        .filter(|&c| !by_class[c].is_empty())
        .collect();
    if present.len() < 2 {
        return Err(LdaError::NotEnoughClasses(present.len()));
    }
    for &c in &present {
        if by_class[c].len() < 2 {
            return Err(LdaError::ClassTooSmall {
                class: c,
                rows: by_class[c].len(),
            });
        }
    }

    let mean_of = |rows: &[usize]| -> Vec<f64> {
        let mut mean = vec![0.0; m];
        for &r in rows {
            for (s, v) in mean.iter_mut().zip(fm.row(r)) {
                *s += v;
            }
        }
        for s in &mut mean {
            *s /= rows.len() as f64;
        }
        mean
    };

    let mut sw = vec![0.0; m * m];
    for &c in &present {
        let mean = mean_of(&by_class[c]);
        centered_gram(fm, &by_class[c], &mean, &mut sw);
    }

    let all_rows: Vec<usize> = (0..n).collect();
    let global_mean = mean_of(&all_rows);
    let mut sa = vec![0.0; m * m];
    centered_gram(fm, &all_rows, &global_mean, &mut sa);

    let sb: Vec<f64> = sa.iter().zip(&sw).map(|(a, w)| a - w).collect();
    Ok(ScatterPair { m, sw, sb, sa })
}

/// Diagonal discriminant ratios per column: within/between variances along
/// each neuron dimension and their guarded ratio. Columns with (numerically)
/// zero within-class variance but real between-class spread separate the
/// classes perfectly; they are flagged and rank above every finite ratio.
#[derive(Debug, Clone)]
pub struct LdaScores {
    pub sw_diag: Vec<f64>,
    pub sb_diag: Vec<f64>,
    pub v: Vec<f64>,
    pub infinite: Vec<bool>,
}

impl LdaScores {
    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    /// Column indices ordered best-first: flagged columns first, then by
    /// descending ratio, ties broken by ascending index.
    pub fn ranked(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.v.len()).collect();
        order.sort_by(|&a, &b| {
            self.infinite[b]
                .cmp(&self.infinite[a])
                .then(self.v[b].partial_cmp(&self.v[a]).expect("finite scores"))
                .then(a.cmp(&b))
        });
        order
    }
}

pub fn lda_scores(s: &ScatterPair) -> LdaScores {
    let sw_diag = s.sw_diag();
    let sb_diag = s.sb_diag();
    let mut v = Vec::with_capacity(s.dim());
    let mut infinite = Vec::with_capacity(s.dim());
    for j in 0..s.dim() {
        let w = sw_diag[j].max(0.0);
        let b = sb_diag[j].max(0.0);
        v.push(b / (w + EPSILON));
        infinite.push(sw_diag[j] < EPSILON && sb_diag[j] > EPSILON);
    }
    LdaScores {
        sw_diag,
        sb_diag,
        v,
        infinite,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectPolicy {
    TopK(usize),
    /// Keep columns with ratio >= threshold (flagged columns always pass).
    Threshold(f64),
}

/// Survivors of the last hidden layer under the given policy, as both
/// cleaned-column indices and original neuron indices (ascending).
#[derive(Debug, Clone)]
pub struct Selection {
    pub columns: Vec<usize>,
    pub neurons: Vec<usize>,
}

pub fn select_neurons(
    fm: &FiringMatrix,
    scores: &LdaScores,
    policy: SelectPolicy,
) -> Result<Selection, LdaError> {
    if scores.len() != fm.cols() {
        return Err(LdaError::Dimension(format!(
            "{} scores for {} columns",
            scores.len(),
            fm.cols()
        )));
    }
    let mut columns: Vec<usize> = match policy {
        SelectPolicy::TopK(k) => scores.ranked().into_iter().take(k).collect(),
        SelectPolicy::Threshold(t) => (0..scores.len())
            .filter(|&j| scores.infinite[j] || scores.v[j] >= t)
            .collect(),
    };
    columns.sort_unstable();
    if columns.is_empty() {
        return Err(LdaError::EmptySelection);
    }
    let neurons = columns.iter().map(|&c| fm.neuron_of_column(c)).collect();
    Ok(Selection { columns, neurons })
}

/// All eigenpairs of the pencil `(sigma_b, sigma_w + eps I)`, eigenvalues
/// descending, eigenvectors unit-norm with the largest-magnitude component
/// positive. Validation/reporting only.
pub fn generalized_eig_oracle(
    sb: &[f64],
    sw: &[f64],
    m: usize,
) -> Result<Vec<(f64, Vec<f64>)>, LdaError> {
    if sb.len() != m * m || sw.len() != m * m {
        return Err(LdaError::Dimension(format!(
            "expected two {m}x{m} matrices"
        )));
    }
    let mut a = DMatrix::from_row_slice(m, m, sw);
    for j in 0..m {
        a[(j, j)] += EPSILON;
    }
    let b = DMatrix::from_row_slice(m, m, sb);

    let chol = nalgebra::Cholesky::new(a).ok_or(LdaError::NotPositiveDefinite)?;
    let l = chol.l();
    // Reduce to the standard symmetric problem: C = L^-1 B L^-T.
    let x = l
        .clone()
        .solve_lower_triangular(&b)
        .ok_or(LdaError::NotPositiveDefinite)?;
    let c = l
        .clone()
        .solve_lower_triangular(&x.transpose())
        .ok_or(LdaError::NotPositiveDefinite)?;
    let c = (&c + c.transpose()) * 0.5;

    let eig = nalgebra::SymmetricEigen::try_new(c, 1.0e-13, 10_000).ok_or(LdaError::EigenFailed)?;

    let lt = l.transpose();
    let mut pairs: Vec<(f64, Vec<f64>)> = Vec::with_capacity(m);
    for j in 0..m {
        let y = eig.eigenvectors.column(j).into_owned();
        let e = lt
            .solve_upper_triangular(&y)
            .ok_or(LdaError::NotPositiveDefinite)?;
        let norm = e.norm();
        let mut v: Vec<f64> = (e / norm).iter().cloned().collect();
        let lead = v
            .iter()
            .cloned()
            .enumerate()
            .max_by(|(_, x), (_, y)| x.abs().partial_cmp(&y.abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        if v[lead] < 0.0 {
            for c in &mut v {
                *c = -*c;
            }
        }
        pairs.push((eig.eigenvalues[j], v));
    }
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite eigenvalues"));
    Ok(pairs)
}
