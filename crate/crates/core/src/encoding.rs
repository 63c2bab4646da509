//! Sinusoidal positional encodings of node depth.

use ndarray::Array2;

use crate::dag::DepthVector;
use crate::error::{Error, Result};

/// `n × d` matrix of depth encodings; row `v` depends only on `depth(v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DagPositionalEncoding {
    pub pe: Array2<f64>,
}

impl DagPositionalEncoding {
    pub fn d(&self) -> usize {
        self.pe.ncols()
    }
}

/// Encoding of a single depth value into `d` columns. Column `2i` is
/// `sin(depth / 10000^(2i/d))` and `2i+1` the matching cosine; for odd `d` the
/// last column is a sine.
pub fn encode_depth(depth: usize, d: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), d);
    let t = depth as f64;
    for i in 0..d.div_ceil(2) {
        let angle = t / 10000f64.powf((2 * i) as f64 / d as f64);
        out[2 * i] = angle.sin();
        if 2 * i + 1 < d {
            out[2 * i + 1] = angle.cos();
        }
    }
}

pub fn dagpe(depths: &DepthVector, d: usize) -> Result<DagPositionalEncoding> {
    if d == 0 {
        return Err(Error::ShapeMismatch("encoding dimension must be at least 1".into()));
    }
    let mut pe = Array2::zeros((depths.depth.len(), d));
    for (mut row, &depth) in pe.rows_mut().into_iter().zip(&depths.depth) {
        encode_depth(depth, d, row.as_slice_mut().expect("standard layout"));
    }
    Ok(DagPositionalEncoding { pe })
}

/// `features + pe`, elementwise.
pub fn add_pe(features: &Array2<f64>, pe: &DagPositionalEncoding) -> Result<Array2<f64>> {
    if features.dim() != pe.pe.dim() {
        return Err(Error::ShapeMismatch(format!(
            "features {:?} vs encoding {:?}",
            features.dim(),
            pe.pe.dim()
        )));
    }
    Ok(features + &pe.pe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn depths(depth: Vec<usize>) -> DepthVector {
        let dag_depth = depth.iter().copied().max().unwrap_or(0);
        DepthVector { depth, dag_depth }
    }

    #[test]
    fn depth_zero_alternates() {
        for d in 1..9 {
            let pe = dagpe(&depths(vec![0]), d).unwrap();
            for (c, &x) in pe.pe.row(0).iter().enumerate() {
                assert_eq!(x, if c % 2 == 0 { 0.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn depth_one_two_columns() {
        let pe = dagpe(&depths(vec![1]), 2).unwrap();
        assert!((pe.pe[[0, 0]] - 0.841471).abs() < 1e-6);
        assert!((pe.pe[[0, 1]] - 0.540302).abs() < 1e-6);
    }

    #[test]
    fn odd_dimension_ends_with_sine() {
        let pe = dagpe(&depths(vec![3]), 5).unwrap();
        let angle = 3.0 / 10000f64.powf(4.0 / 5.0);
        assert_eq!(pe.pe[[0, 4]], angle.sin());
    }

    #[test]
    fn equal_depths_equal_rows() {
        // Diamond with an extra sink hanging off node 0: nodes 1, 2 and 4 share depth 1.
        let pe = dagpe(&depths(vec![0, 1, 1, 2, 1]), 6).unwrap();
        assert_eq!(pe.pe.row(1), pe.pe.row(2));
        assert_eq!(pe.pe.row(1), pe.pe.row(4));
        assert_ne!(pe.pe.row(1), pe.pe.row(3));
    }

    #[test]
    fn add_pe_cases() {
        let pe = dagpe(&depths(vec![0, 2]), 2).unwrap();
        assert_eq!(add_pe(&Array2::zeros((2, 2)), &pe).unwrap(), pe.pe);

        let zero_pe = dagpe(&depths(vec![0, 0]), 1).unwrap();
        let x = array![[0.5], [-2.0]];
        assert_eq!(add_pe(&x, &zero_pe).unwrap(), x);

        let pe = DagPositionalEncoding { pe: array![[0.0, 1.0]] };
        assert_eq!(add_pe(&array![[1.0, 1.0]], &pe).unwrap(), array![[1.0, 2.0]]);

        assert!(matches!(add_pe(&Array2::zeros((3, 2)), &pe), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn injective_over_practical_depths() {
        let d = 16;
        let pe = dagpe(&depths((0..=1000).collect()), d).unwrap();
        for a in 0..=1000 {
            for b in (a + 1)..=1000 {
                assert!(pe.pe.row(a) != pe.pe.row(b), "depths {a} and {b} collide");
            }
        }
    }

    #[test]
    fn entries_bounded() {
        let pe = dagpe(&depths((0..200).collect()), 7).unwrap();
        assert!(pe.pe.iter().all(|x| (-1.0..=1.0).contains(x)));
    }
}
