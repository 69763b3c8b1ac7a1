//! Exact Euclidean k-nearest-neighbour search over the calibration cache.
//!
//! A linear scan is exact and fast enough for the calibration sizes this crate
//! targets (thousands of points, d <= 256). Ties are broken by insertion order.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    /// Position of the point in the calibration cache.
    pub index: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborIndex {
    dim: usize,
    data: Vec<f64>,
}

impl NeighborIndex {
    pub fn new<'a>(points: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut data = Vec::new();
        let mut dim = None;
        for p in points {
            match dim {
                None => dim = Some(p.len()),
                Some(d) if d != p.len() => {
                    return Err(Error::Epistemic(format!(
                        "neighbour index: point dimension {} differs from {d}",
                        p.len()
                    )))
                }
                Some(_) => {}
            }
            data.extend_from_slice(p);
        }
        let dim = dim.ok_or_else(|| Error::Epistemic("neighbour index: no points".into()))?;
        Ok(NeighborIndex { dim, data })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, index: usize) -> &[f64] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    /// The `k` nearest points to `v`, ascending by distance.
    pub fn query(&self, v: &[f64], k: usize) -> Result<Vec<Neighbor>> {
        self.query_excluding(v, k, None)
    }

    /// Like [`query`](Self::query) but skips the cache entry `exclude`, for
    /// leave-one-out scoring of calibration points.
    pub fn query_excluding(
        &self,
        v: &[f64],
        k: usize,
        exclude: Option<usize>,
    ) -> Result<Vec<Neighbor>> {
        if v.len() != self.dim {
            return Err(Error::Epistemic(format!(
                "query dimension {} differs from index dimension {}",
                v.len(),
                self.dim
            )));
        }
        let available = self.len() - usize::from(exclude.is_some_and(|e| e < self.len()));
        if k > available {
            return Err(Error::Epistemic(format!(
                "k = {k} exceeds the {available} available calibration points"
            )));
        }
        let mut all: Vec<Neighbor> = (0..self.len())
            .filter(|&i| Some(i) != exclude)
            .map(|i| Neighbor {
                index: i,
                distance: squared_distance(v, self.point(i)),
            })
            .collect();
        let order = |a: &Neighbor, b: &Neighbor| {
            a.distance
                .total_cmp(&b.distance)
                .then(a.index.cmp(&b.index))
        };
        if k < all.len() && k > 0 {
            all.select_nth_unstable_by(k - 1, order);
            all.truncate(k);
        } else {
            all.truncate(k);
        }
        all.sort_by(order);
        for n in &mut all {
            n.distance = n.distance.sqrt();
        }
        Ok(all)
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index(points: &[Vec<f64>]) -> NeighborIndex {
        NeighborIndex::new(points.iter().map(Vec::as_slice)).unwrap()
    }

    #[test]
    fn nearest_two_on_a_line() {
        let idx = index(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![3.0, 0.0]]);
        let n = idx.query(&[0.9, 0.0], 2).unwrap();
        assert_eq!(n[0].index, 1);
        assert!((n[0].distance - 0.1).abs() < 1e-12);
        assert_eq!(n[1].index, 0);
        assert!((n[1].distance - 0.9).abs() < 1e-12);
    }

    #[test]
    fn k_equal_to_size_returns_everything() {
        let idx = index(&[vec![5.0], vec![1.0], vec![3.0]]);
        let n = idx.query(&[0.0], 3).unwrap();
        assert_eq!(n.iter().map(|x| x.index).collect::<Vec<_>>(), vec![1, 2, 0]);
        assert!(idx.query(&[0.0], 4).is_err());
    }

    #[test]
    fn ties_go_to_earlier_points() {
        let idx = index(&[vec![1.0], vec![-1.0], vec![1.0], vec![-1.0]]);
        let n = idx.query(&[0.0], 3).unwrap();
        assert_eq!(n.iter().map(|x| x.index).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn excluding_self() {
        let idx = index(&[vec![0.0], vec![1.0], vec![2.0]]);
        let n = idx.query_excluding(&[0.0], 2, Some(0)).unwrap();
        assert_eq!(n.iter().map(|x| x.index).collect::<Vec<_>>(), vec![1, 2]);
        assert!(idx.query_excluding(&[0.0], 3, Some(0)).is_err());
    }

    proptest::proptest! {
        #[test]
        fn matches_exhaustive_sort(
            pts in proptest::collection::vec(proptest::collection::vec(-10i32..10, 2), 1..40),
            q in proptest::collection::vec(-10i32..10, 2),
            k in 1usize..40,
        ) {
            let pts: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().map(|&x| x as f64).collect()).collect();
            let q: Vec<f64> = q.iter().map(|&x| x as f64).collect();
            let k = k.min(pts.len());
            let idx = index(&pts);
            let got: Vec<usize> = idx.query(&q, k).unwrap().iter().map(|n| n.index).collect();
            let mut oracle: Vec<(f64, usize)> = pts
                .iter()
                .enumerate()
                .map(|(i, p)| (((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)), i))
                .collect();
            oracle.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<usize> = oracle.iter().take(k).map(|x| x.1).collect();
            proptest::prop_assert_eq!(got, want);
        }
    }
}
