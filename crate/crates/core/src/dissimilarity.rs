//! Random-forest dissimilarities.
//!
//! A tree says two instances are dissimilar (1) when they reach different
//! leaves and identical (0) otherwise; a forest averages this over its `M`
//! trees. Matrices are accumulated per tree as integer same-leaf counts and
//! divided by `M` once, so parallel and serial construction agree bit for
//! bit and every entry sits exactly on the `1/M` grid.

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView1, ArrayView2, Zip};
use rayon::prelude::*;
use thiserror::Error;

use crate::forest::{Forest, ForestError, Tree};

#[derive(Debug, Error)]
pub enum DissimilarityError {
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error("{ids} instance ids for {len} matrix {axis}")]
    IdCount { axis: &'static str, ids: usize, len: usize },
    #[error("entry ({row}, {col}) = {value} lies outside [0, 1]")]
    OutOfRange { row: usize, col: usize, value: f64 },
    #[error("cannot average an empty list of matrices")]
    Empty,
    #[error("matrix {index} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        index: usize,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("matrix {index} describes different instances than matrix 0")]
    AxisMismatch { index: usize },
    #[error("matrix is not square over one instance set")]
    NotSquare,
    #[error("entries ({0}, {1}) and ({1}, {0}) differ")]
    NotSymmetric(usize, usize),
    #[error("diagonal entry {0} is not zero")]
    NonZeroDiagonal(usize),
    #[error("matrix csv: {0}")]
    Csv(String),
}

pub type Result<T> = std::result::Result<T, DissimilarityError>;

fn check_ids(values: &Array2<f64>, rows: &[usize], cols: &[usize]) -> Result<()> {
    if rows.len() != values.nrows() {
        return Err(DissimilarityError::IdCount {
            axis: "rows",
            ids: rows.len(),
            len: values.nrows(),
        });
    }
    if cols.len() != values.ncols() {
        return Err(DissimilarityError::IdCount {
            axis: "columns",
            ids: cols.len(),
            len: values.ncols(),
        });
    }
    Ok(())
}

fn check_unit_range(values: &Array2<f64>) -> Result<()> {
    match values.indexed_iter().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        Some(((row, col), &value)) => Err(DissimilarityError::OutOfRange { row, col, value }),
        None => Ok(()),
    }
}

/// Pairwise dissimilarities between a set of row instances and a set of
/// column instances (usually the training set).
#[derive(Debug, Clone, PartialEq)]
pub struct DissimilarityMatrix {
    values: Array2<f64>,
    row_instances: Vec<usize>,
    column_instances: Vec<usize>,
}

/// `1 - D`, entrywise, on the same axes.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: Array2<f64>,
    row_instances: Vec<usize>,
    column_instances: Vec<usize>,
}

macro_rules! matrix_accessors {
    ($t:ty) => {
        impl $t {
            pub fn new(values: Array2<f64>, row_instances: Vec<usize>, column_instances: Vec<usize>) -> Result<Self> {
                check_ids(&values, &row_instances, &column_instances)?;
                check_unit_range(&values)?;
                Ok(Self {
                    values,
                    row_instances,
                    column_instances,
                })
            }

            pub fn values(&self) -> ArrayView2<'_, f64> {
                self.values.view()
            }

            pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
                self.values.row(i)
            }

            pub fn row_instances(&self) -> &[usize] {
                &self.row_instances
            }

            pub fn column_instances(&self) -> &[usize] {
                &self.column_instances
            }

            pub fn shape(&self) -> (usize, usize) {
                self.values.dim()
            }

            /// Square with identical row and column instance lists.
            pub fn is_square_over_same(&self) -> bool {
                self.row_instances == self.column_instances
            }

            pub fn into_values(self) -> Array2<f64> {
                self.values
            }
        }
    };
}

matrix_accessors!(DissimilarityMatrix);
matrix_accessors!(SimilarityMatrix);

impl DissimilarityMatrix {
    /// Checks symmetry and the zero diagonal of a train x train matrix.
    pub fn check_square_invariants(&self) -> Result<()> {
        if !self.is_square_over_same() {
            return Err(DissimilarityError::NotSquare);
        }
        check_unit_range(&self.values)?;
        let n = self.values.nrows();
        for i in 0..n {
            if self.values[[i, i]] != 0.0 {
                return Err(DissimilarityError::NonZeroDiagonal(i));
            }
            for j in i + 1..n {
                if self.values[[i, j]] != self.values[[j, i]] {
                    return Err(DissimilarityError::NotSymmetric(i, j));
                }
            }
        }
        Ok(())
    }

    /// True when every entry is a multiple of `1/m`.
    pub fn is_on_grid(&self, m: usize) -> bool {
        let m = m as f64;
        self.values.iter().all(|v| {
            let scaled = v * m;
            (scaled - scaled.round()).abs() < 1e-9
        })
    }

    /// CSV with a header of column instance ids and a leading column of row
    /// instance ids.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        write_matrix_csv(out, &self.values, &self.row_instances, &self.column_instances)
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let (values, rows, cols) = read_matrix_csv(input)?;
        Self::new(values, rows, cols)
    }
}

impl SimilarityMatrix {
    pub fn to_dissimilarity(&self) -> DissimilarityMatrix {
        DissimilarityMatrix {
            values: self.values.mapv(|s| 1.0 - s),
            row_instances: self.row_instances.clone(),
            column_instances: self.column_instances.clone(),
        }
    }

    /// Restricts the matrix to the given row and column positions.
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> SimilarityMatrix {
        let values = Array2::from_shape_fn((rows.len(), cols.len()), |(i, j)| self.values[[rows[i], cols[j]]]);
        SimilarityMatrix {
            values,
            row_instances: rows.iter().map(|&i| self.row_instances[i]).collect(),
            column_instances: cols.iter().map(|&j| self.column_instances[j]).collect(),
        }
    }
}

fn write_matrix_csv<W: Write>(out: W, values: &Array2<f64>, rows: &[usize], cols: &[usize]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut record: Vec<String> = Vec::with_capacity(cols.len() + 1);
    record.push("instance".into());
    record.extend(cols.iter().map(usize::to_string));
    w.write_record(&record)?;
    for (i, row) in values.rows().into_iter().enumerate() {
        record.clear();
        record.push(rows[i].to_string());
        record.extend(row.iter().map(f64::to_string));
        w.write_record(&record)?;
    }
    w.flush()
}

fn read_matrix_csv<R: Read>(input: R) -> Result<(Array2<f64>, Vec<usize>, Vec<usize>)> {
    let err = |m: String| DissimilarityError::Csv(m);
    let mut reader = csv::Reader::from_reader(input);
    let header = reader.headers().map_err(|e| err(e.to_string()))?.clone();
    let cols = header
        .iter()
        .skip(1)
        .map(|s| s.parse::<usize>().map_err(|_| err(format!("bad column id `{s}`"))))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| err(e.to_string()))?;
        rows.push(record[0].parse::<usize>().map_err(|_| err(format!("bad row id `{}`", &record[0])))?);
        for cell in record.iter().skip(1) {
            values.push(cell.parse::<f64>().map_err(|_| err(format!("bad value `{cell}`")))?);
        }
    }
    let values = Array2::from_shape_vec((rows.len(), cols.len()), values).map_err(|e| err(e.to_string()))?;
    Ok((values, rows, cols))
}

/// 0 when both instances reach the same leaf of `tree`, else 1.
pub fn tree_dissimilarity(tree: &Tree, x_i: ArrayView1<'_, f64>, x_j: ArrayView1<'_, f64>) -> Result<u8> {
    let a = tree.leaf_index(x_i)?;
    let b = tree.leaf_index(x_j)?;
    Ok(u8::from(a != b))
}

/// Fraction of the forest's trees that separate the two instances.
pub fn forest_dissimilarity(forest: &Forest, x_i: ArrayView1<'_, f64>, x_j: ArrayView1<'_, f64>) -> Result<f64> {
    let mut different = 0u32;
    for tree in forest.trees() {
        different += u32::from(tree_dissimilarity(tree, x_i, x_j)?);
    }
    Ok(f64::from(different) / forest.num_trees() as f64)
}

/// Number of trees in which row instance `i` and column instance `j` share
/// a leaf.
pub fn same_leaf_counts(forest: &Forest, rows: ArrayView2<'_, f64>, columns: ArrayView2<'_, f64>) -> Result<Array2<u32>> {
    let shape = (rows.nrows(), columns.nrows());
    forest
        .trees()
        .par_iter()
        .try_fold(
            || Array2::<u32>::zeros(shape),
            |mut acc, tree| {
                let row_leaves = tree.leaf_indices(rows)?;
                let col_leaves = tree.leaf_indices(columns)?;
                let mut buckets = vec![Vec::new(); tree.num_leaves()];
                for (j, &l) in col_leaves.iter().enumerate() {
                    buckets[l].push(j);
                }
                for (i, &l) in row_leaves.iter().enumerate() {
                    for &j in &buckets[l] {
                        acc[[i, j]] += 1;
                    }
                }
                Ok::<_, DissimilarityError>(acc)
            },
        )
        .try_reduce(|| Array2::<u32>::zeros(shape), |a, b| Ok(a + b))
}

/// Dissimilarity of every row instance to every column instance.
pub fn build_matrix(
    forest: &Forest,
    rows: ArrayView2<'_, f64>,
    row_ids: &[usize],
    columns: ArrayView2<'_, f64>,
    column_ids: &[usize],
) -> Result<DissimilarityMatrix> {
    let counts = same_leaf_counts(forest, rows, columns)?;
    let m = forest.num_trees() as u32;
    let values = counts.mapv(|c| f64::from(m - c) / f64::from(m));
    let out = DissimilarityMatrix {
        values,
        row_instances: row_ids.to_vec(),
        column_instances: column_ids.to_vec(),
    };
    check_ids(&out.values, &out.row_instances, &out.column_instances)?;
    Ok(out)
}

/// Train x train matrix over one table.
pub fn build_square(forest: &Forest, table: ArrayView2<'_, f64>, ids: &[usize]) -> Result<DissimilarityMatrix> {
    build_matrix(forest, table, ids, table, ids)
}

/// Entrywise mean of matrices that share their axes.
pub fn joint_average(matrices: &[DissimilarityMatrix]) -> Result<DissimilarityMatrix> {
    let first = matrices.first().ok_or(DissimilarityError::Empty)?;
    let mut sum = first.values.clone();
    for (index, m) in matrices.iter().enumerate().skip(1) {
        if m.values.dim() != first.values.dim() {
            return Err(DissimilarityError::ShapeMismatch {
                index,
                expected: first.values.dim(),
                found: m.values.dim(),
            });
        }
        if m.row_instances != first.row_instances || m.column_instances != first.column_instances {
            return Err(DissimilarityError::AxisMismatch { index });
        }
        Zip::from(&mut sum).and(&m.values).for_each(|s, &v| *s += v);
    }
    let q = matrices.len() as f64;
    sum.mapv_inplace(|s| s / q);
    Ok(DissimilarityMatrix {
        values: sum,
        row_instances: first.row_instances.clone(),
        column_instances: first.column_instances.clone(),
    })
}

pub fn to_similarity(d: &DissimilarityMatrix) -> SimilarityMatrix {
    SimilarityMatrix {
        values: d.values.mapv(|v| 1.0 - v),
        row_instances: d.row_instances.clone(),
        column_instances: d.column_instances.clone(),
    }
}
