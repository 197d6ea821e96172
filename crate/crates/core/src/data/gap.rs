use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

/// Train/test partition holding out the middle region of one input feature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapSplit {
    pub feature_index: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// One split per input feature; the test set is the middle tercile of the
/// stable sort on that feature, i.e. sorted positions `⌊N/3⌋..⌊2N/3⌋`.
pub fn make_gap_splits(data: &Dataset) -> Result<Vec<GapSplit>> {
    let n = data.len();
    gap_splits(data, |_| (n / 3, 2 * n / 3))
}

/// Like [`make_gap_splits`] but holds out a middle fraction `f` of the sorted
/// order: positions `⌊N(1−f)/2⌋..⌊N(1+f)/2⌋`.
pub fn make_gap_splits_with_fraction(data: &Dataset, fraction: f64) -> Result<Vec<GapSplit>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("gap fraction must lie in (0, 1), got {fraction}")));
    }
    let n = data.len() as f64;
    gap_splits(data, |_| {
        (
            (n * (1.0 - fraction) / 2.0).floor() as usize,
            (n * (1.0 + fraction) / 2.0).floor() as usize,
        )
    })
}

fn gap_splits(data: &Dataset, bounds: impl Fn(usize) -> (usize, usize)) -> Result<Vec<GapSplit>> {
    let n = data.len();
    if n < 3 {
        return Err(Error::Input(format!("gap splits need at least 3 rows, got {n}")));
    }
    if data.dim() == 0 {
        return Err(Error::Input("gap splits need at least one feature".into()));
    }
    let x = data.inputs();
    let splits = (0..data.dim())
        .map(|j| {
            let mut order: Vec<usize> = (0..n).collect();
            // `sort_by` is stable, so equal feature values keep row order.
            order.sort_by(|&a, &b| x[[a, j]].total_cmp(&x[[b, j]]));
            let (lo, hi) = bounds(j);
            let mut test = order[lo..hi].to_vec();
            let mut train: Vec<usize> = order[..lo].iter().chain(&order[hi..]).copied().collect();
            test.sort_unstable();
            train.sort_unstable();
            GapSplit {
                feature_index: j,
                train,
                test,
            }
        })
        .collect();
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn three_rows_hold_out_the_middle_point() {
        let ds = Dataset::regression(array![[5.0, 0.0], [1.0, 2.0], [3.0, 1.0]], vec![0.0; 3]).unwrap();
        let splits = make_gap_splits(&ds).unwrap();
        assert_eq!(splits.len(), 2);
        assert_eq!(splits[0].test, vec![2]);
        assert_eq!(splits[0].train, vec![0, 1]);
        assert_eq!(splits[1].test, vec![2]);
    }

    #[test]
    fn too_few_rows() {
        let ds = Dataset::regression(array![[1.0], [2.0]], vec![0.0; 2]).unwrap();
        assert!(make_gap_splits(&ds).is_err());
    }

    #[test]
    fn ties_follow_row_order() {
        let ds = Dataset::regression(array![[1.0], [1.0], [1.0], [1.0], [1.0], [1.0]], vec![0.0; 6]).unwrap();
        let s = &make_gap_splits(&ds).unwrap()[0];
        assert_eq!(s.test, vec![2, 3]);
    }

    #[test]
    fn fraction_override() {
        let ds = Dataset::regression(ndarray::Array2::from_shape_fn((10, 1), |(i, _)| i as f64), vec![0.0; 10]).unwrap();
        let s = &make_gap_splits_with_fraction(&ds, 0.5).unwrap()[0];
        assert_eq!(s.test, vec![2, 3, 4, 5, 6]);
        assert!(make_gap_splits_with_fraction(&ds, 1.0).is_err());
    }
}
