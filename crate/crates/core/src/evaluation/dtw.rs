use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Optimal monotone alignment between two frame sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct DtwAlignment {
    /// Index pairs `(i, j)` from `(0, 0)` to `(T_a − 1, T_b − 1)`.
    pub path: Vec<(usize, usize)>,
    /// Sum of Euclidean frame distances along the path.
    pub cost: f64,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Dynamic time warping with steps (1,0), (0,1), (1,1) and Euclidean local
/// distance over all columns jointly. Ties prefer the diagonal step.
pub fn dtw_align(a: &Tensor, b: &Tensor) -> Result<DtwAlignment> {
    let (n, m) = (a.rows(), b.rows());
    if n == 0 || m == 0 {
        return Err(Error::dim("DTW needs two non-empty sequences"));
    }
    if a.cols() != b.cols() {
        return Err(Error::dim(format!(
            "DTW sequences have {} and {} channels",
            a.cols(),
            b.cols()
        )));
    }
    let idx = |i: usize, j: usize| i * m + j;
    let mut acc = vec![f64::INFINITY; n * m];
    for i in 0..n {
        for j in 0..m {
            let d = euclidean(a.row(i), b.row(j));
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { acc[idx(i - 1, j - 1)] } else { f64::INFINITY };
                let up = if i > 0 { acc[idx(i - 1, j)] } else { f64::INFINITY };
                let left = if j > 0 { acc[idx(i, j - 1)] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            acc[idx(i, j)] = best + d;
        }
    }
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while (i, j) != (0, 0) {
        (i, j) = if i == 0 {
            (0, j - 1)
        } else if j == 0 {
            (i - 1, 0)
        } else {
            let diag = acc[idx(i - 1, j - 1)];
            let up = acc[idx(i - 1, j)];
            let left = acc[idx(i, j - 1)];
            if diag <= up && diag <= left {
                (i - 1, j - 1)
            } else if up <= left {
                (i - 1, j)
            } else {
                (i, j - 1)
            }
        };
        path.push((i, j));
    }
    path.reverse();
    Ok(DtwAlignment {
        path,
        cost: acc[idx(n - 1, m - 1)],
    })
}

/// Expands both sequences along `path` by index duplication.
pub fn warp_pair(a: &Tensor, b: &Tensor, path: &[(usize, usize)]) -> Result<(Tensor, Tensor)> {
    if path.iter().any(|&(i, j)| i >= a.rows() || j >= b.rows()) {
        return Err(Error::dim("DTW path indexes past the sequence end"));
    }
    let ra: Vec<&[f64]> = path.iter().map(|&(i, _)| a.row(i)).collect();
    let rb: Vec<&[f64]> = path.iter().map(|&(_, j)| b.row(j)).collect();
    Ok((Tensor::from_rows(&ra)?, Tensor::from_rows(&rb)?))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn scalar_seq(xs: &[f64]) -> Tensor {
        Tensor::matrix(xs.len(), 1, xs.to_vec()).unwrap()
    }

    /// Minimum cost over every monotone path, by exhaustive recursion.
    fn brute_force(a: &Tensor, b: &Tensor) -> f64 {
        fn go(a: &Tensor, b: &Tensor, i: usize, j: usize) -> f64 {
            let d = euclidean(a.row(i), b.row(j));
            if i + 1 == a.rows() && j + 1 == b.rows() {
                return d;
            }
            let mut best = f64::INFINITY;
            if i + 1 < a.rows() {
                best = best.min(go(a, b, i + 1, j));
            }
            if j + 1 < b.rows() {
                best = best.min(go(a, b, i, j + 1));
            }
            if i + 1 < a.rows() && j + 1 < b.rows() {
                best = best.min(go(a, b, i + 1, j + 1));
            }
            d + best
        }
        go(a, b, 0, 0)
    }

    fn path_cost(a: &Tensor, b: &Tensor, path: &[(usize, usize)]) -> f64 {
        path.iter().map(|&(i, j)| euclidean(a.row(i), b.row(j))).sum()
    }

    #[test]
    fn identical_sequences_follow_diagonal() {
        let a = scalar_seq(&[0.0, 1.0, 1.0, 3.0]);
        let r = dtw_align(&a, &a).unwrap();
        assert_eq!(r.cost, 0.0);
        assert_eq!(r.path, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
    }

    #[test]
    fn duplicates_first_frame() {
        let r = dtw_align(&scalar_seq(&[0.0, 1.0]), &scalar_seq(&[0.0, 0.0, 1.0])).unwrap();
        assert_eq!(r.cost, 0.0);
        assert_eq!(r.path, vec![(0, 0), (0, 1), (1, 2)]);
        let (wa, wb) = warp_pair(&scalar_seq(&[0.0, 1.0]), &scalar_seq(&[0.0, 0.0, 1.0]), &r.path).unwrap();
        assert_eq!(wa, wb);
    }

    #[test]
    fn empty_rejected() {
        assert!(dtw_align(&Tensor::zeros(&[0, 12]), &Tensor::zeros(&[3, 12])).is_err());
        assert!(dtw_align(&Tensor::zeros(&[2, 12]), &Tensor::zeros(&[3, 11])).is_err());
    }

    fn seq(max: usize) -> impl Strategy<Value = Tensor> {
        (1..=max).prop_flat_map(|n| {
            proptest::collection::vec(-2.0f64..2.0, n * 3).prop_map(move |d| Tensor::matrix(n, 3, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn matches_exhaustive_search(a in seq(6), b in seq(6)) {
            let r = dtw_align(&a, &b).unwrap();
            prop_assert!((r.cost - brute_force(&a, &b)).abs() < 1e-9);
            prop_assert!((path_cost(&a, &b, &r.path) - r.cost).abs() < 1e-9);
            prop_assert_eq!(r.path[0], (0, 0));
            prop_assert_eq!(*r.path.last().unwrap(), (a.rows() - 1, b.rows() - 1));
            for w in r.path.windows(2) {
                let step = (w[1].0 - w[0].0, w[1].1 - w[0].1);
                prop_assert!(matches!(step, (1, 0) | (0, 1) | (1, 1)));
            }
        }

        #[test]
        fn symmetric_and_nonnegative(a in seq(7), b in seq(7)) {
            let ab = dtw_align(&a, &b).unwrap().cost;
            let ba = dtw_align(&b, &a).unwrap().cost;
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert_eq!(dtw_align(&a, &a).unwrap().cost, 0.0);
        }
    }
}
