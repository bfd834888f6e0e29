//! Brute-force geometry kernels: farthest point sampling, fixed-radius and
//! k-nearest neighborhoods, inverse-distance interpolation and neighborhood
//! grouping. All searches are `O(Q * N)` scans over `[N, D]` coordinate
//! tensors; ties always resolve to the lower source index.

use crate::error::TensorError;
use crate::tape::Var;
use crate::tensor::{Real, Tensor};

type Res<T> = Result<T, TensorError>;

/// Weight regularizer for inverse-squared-distance interpolation.
pub const INTERP_EPS: f64 = 1e-8;

/// Points with optional per-point features and integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<T: Real> {
    pub coords: Tensor<T>,
    pub features: Option<Tensor<T>>,
    pub labels: Option<Vec<usize>>,
}

impl<T: Real> PointCloud<T> {
    pub fn new(coords: Tensor<T>, features: Option<Tensor<T>>, labels: Option<Vec<usize>>) -> Res<Self> {
        if coords.rank() != 2 {
            return Err(TensorError::Rank(format!("coords must be [N, D], got {:?}", coords.shape())));
        }
        if !coords.all_finite() {
            return Err(TensorError::NonFinite("point coordinates"));
        }
        let n = coords.shape()[0];
        if let Some(f) = &features {
            if f.rank() != 2 || f.shape()[0] != n {
                return Err(TensorError::Shape(format!("features {:?} for {n} points", f.shape())));
            }
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(TensorError::Shape(format!("{} labels for {n} points", l.len())));
            }
        }
        Ok(Self { coords, features, labels })
    }

    pub fn len(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The same cloud with points reordered so that point `i` of the result
    /// is point `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            coords: self.coords.select_rows(order),
            features: self.features.as_ref().map(|f| f.select_rows(order)),
            labels: self.labels.as_ref().map(|l| order.iter().map(|&i| l[i]).collect()),
        }
    }
}

/// Fixed-width neighbor lists: `width` source indices per query, stored
/// query-major. Indices may be offset to address a stacked batch.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborList<T> {
    pub indices: Vec<usize>,
    pub width: usize,
    /// Euclidean distances, filled by [`knn`] only.
    pub distances: Option<Vec<T>>,
}

impl<T: Real> NeighborList<T> {
    pub fn queries(&self) -> usize {
        self.indices.len() / self.width
    }

    pub fn of(&self, q: usize) -> &[usize] {
        &self.indices[q * self.width..(q + 1) * self.width]
    }

    /// Shifts every index by `by`.
    pub fn offset(mut self, by: usize) -> Self {
        self.indices.iter_mut().for_each(|i| *i += by);
        self
    }

    /// Appends another list of the same width.
    pub fn extend(&mut self, other: NeighborList<T>) {
        assert_eq!(self.width, other.width, "neighbor list width");
        self.indices.extend(other.indices);
        match (&mut self.distances, other.distances) {
            (Some(a), Some(b)) => a.extend(b),
            (a, _) => *a = None,
        }
    }
}

fn check_points<T: Real>(t: &Tensor<T>, what: &str) -> Res<(usize, usize)> {
    if t.rank() != 2 {
        return Err(TensorError::Rank(format!("{what} must be [N, D], got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn check_dims<T: Real>(queries: &Tensor<T>, sources: &Tensor<T>) -> Res<(usize, usize)> {
    let (q, dq) = check_points(queries, "queries")?;
    let (n, dn) = check_points(sources, "sources")?;
    if dq != dn {
        return Err(TensorError::Shape(format!("query dim {dq} vs source dim {dn}")));
    }
    Ok((q, n))
}

#[inline]
fn dist2<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Greedy max-min subset selection starting from `seed`. Each step adds the
/// unselected point whose squared distance to the selected set is largest.
pub fn farthest_point_sample<T: Real>(coords: &Tensor<T>, count: usize, seed: usize) -> Res<Vec<usize>> {
    let (n, _) = check_points(coords, "coords")?;
    if count == 0 || count > n {
        return Err(TensorError::Count(format!("cannot sample {count} of {n} points")));
    }
    if seed >= n {
        return Err(TensorError::Count(format!("seed index {seed} out of {n} points")));
    }
    let mut min_d = vec![T::infinity(); n];
    let mut taken = vec![false; n];
    let mut picked = Vec::with_capacity(count);
    let mut cur = seed;
    loop {
        picked.push(cur);
        taken[cur] = true;
        if picked.len() == count {
            return Ok(picked);
        }
        let c = coords.row(cur);
        let mut best: Option<usize> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let d = dist2(coords.row(i), c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if best.is_none_or(|b| min_d[i] > min_d[b]) {
                best = Some(i);
            }
        }
        cur = best.expect("count <= n leaves an unselected point");
    }
}

/// Up to `max_neighbors` sources strictly inside radius `radius` of each query,
/// in ascending index order, padded by repeating the first hit. A query with
/// no source in range falls back to its nearest source.
pub fn ball_query<T: Real>(queries: &Tensor<T>, sources: &Tensor<T>, radius: T, max_neighbors: usize) -> Res<NeighborList<T>> {
    let (q, n) = check_dims(queries, sources)?;
    if radius <= T::zero() || max_neighbors == 0 {
        return Err(TensorError::Count(format!("ball query needs r > 0 and K >= 1 (r = {radius}, K = {max_neighbors})")));
    }
    let r2 = radius * radius;
    let mut indices = Vec::with_capacity(q * max_neighbors);
    for qi in 0..q {
        let p = queries.row(qi);
        let start = indices.len();
        let mut nearest = (T::infinity(), 0);
        for j in 0..n {
            let d = dist2(sources.row(j), p);
            if d < r2 {
                indices.push(j);
                if indices.len() - start == max_neighbors {
                    break;
                }
            }
            if d < nearest.0 {
                nearest = (d, j);
            }
        }
        let first = if indices.len() > start { indices[start] } else { nearest.1 };
        indices.resize(start + max_neighbors, first);
    }
    Ok(NeighborList { indices, width: max_neighbors, distances: None })
}

/// The `k` nearest sources of each query by Euclidean distance, nearest first.
pub fn knn<T: Real>(queries: &Tensor<T>, sources: &Tensor<T>, k: usize) -> Res<NeighborList<T>> {
    let (q, n) = check_dims(queries, sources)?;
    if k == 0 || k > n {
        return Err(TensorError::Count(format!("cannot take {k} nearest of {n} sources")));
    }
    let mut indices = Vec::with_capacity(q * k);
    let mut distances = Vec::with_capacity(q * k);
    let mut scratch: Vec<(T, usize)> = Vec::with_capacity(n);
    let by_dist = |a: &(T, usize), b: &(T, usize)| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1));
    for qi in 0..q {
        let p = queries.row(qi);
        scratch.clear();
        scratch.extend((0..n).map(|j| (dist2(sources.row(j), p), j)));
        if k < n {
            scratch.select_nth_unstable_by(k - 1, by_dist);
        }
        let head = &mut scratch[..k];
        head.sort_unstable_by(by_dist);
        for &(d, j) in head.iter() {
            indices.push(j);
            distances.push(d.sqrt());
        }
    }
    Ok(NeighborList { indices, width: k, distances: Some(distances) })
}

/// Normalized inverse-squared-distance weights `1 / (d^2 + eps)` for a kNN
/// list, one row of `width` weights per query.
pub fn interpolation_weights<T: Real>(neighbors: &NeighborList<T>) -> Vec<T> {
    let d = neighbors.distances.as_ref().expect("interpolation needs knn distances");
    let eps = T::of(INTERP_EPS);
    let mut w: Vec<T> = d.iter().map(|&d| T::one() / (d * d + eps)).collect();
    for row in w.chunks_mut(neighbors.width) {
        let total: T = row.iter().copied().sum();
        row.iter_mut().for_each(|x| *x /= total);
    }
    w
}

/// Interpolates `feats[N, C]` living on `sources` onto `queries` by
/// inverse-squared-distance weighting over the `k` nearest sources.
pub fn interpolate_features<'t, T: Real>(queries: &Tensor<T>, sources: &Tensor<T>, feats: Var<'t, T>, k: usize) -> Res<Var<'t, T>> {
    let (_, n) = check_dims(queries, sources)?;
    let fshape = feats.shape();
    if fshape.len() != 2 || fshape[0] != n {
        return Err(TensorError::Shape(format!("features {fshape:?} for {n} sources")));
    }
    let nl = knn(queries, sources, k)?;
    let w = interpolation_weights(&nl);
    feats.weighted_gather(&nl.indices, &w, k)
}

/// Gathers each query's neighbor features, appends the neighbor's position
/// relative to the query, applies `mlp` to every (query, neighbor) row and
/// max-reduces over the neighbors.
///
/// `feats` and `coords` are addressed by the list's indices through their
/// `[rows, last_dim]` views; `query_coords` has one row per query. The
/// result is `[Q, C_out]`.
pub fn group_and_reduce<'t, T, F>(
    neighbors: &NeighborList<T>,
    feats: Var<'t, T>,
    coords: &Tensor<T>,
    query_coords: &Tensor<T>,
    mlp: F,
) -> Res<Var<'t, T>>
where
    T: Real,
    F: FnOnce(Var<'t, T>) -> Res<Var<'t, T>>,
{
    let q = neighbors.queries();
    let k = neighbors.width;
    if query_coords.rows() != q || query_coords.last_dim() != coords.last_dim() {
        return Err(TensorError::Shape(format!(
            "{q} queries with query coords {:?} and coords {:?}",
            query_coords.shape(),
            coords.shape()
        )));
    }
    let n = coords.rows();
    if let Some(&bad) = neighbors.indices.iter().find(|&&i| i >= n) {
        return Err(TensorError::Internal(format!("neighbor index {bad} out of {n} points")));
    }
    let d = coords.last_dim();
    let mut rel = Vec::with_capacity(q * k * d);
    for qi in 0..q {
        let center = query_coords.row(qi);
        for &j in neighbors.of(qi) {
            rel.extend(coords.row(j).iter().zip(center).map(|(&p, &c)| p - c));
        }
    }
    let tape = feats.tape();
    let grouped = feats.gather_rows(&neighbors.indices)?;
    let rel = tape.constant(Tensor::new([q * k, d], rel)?);
    let rows = grouped.concat_lastdim(rel)?;
    let mapped = mlp(rows)?;
    let cout = mapped.value().last_dim();
    mapped.reshape(&[q, k, cout])?.max_over_rows()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn line(xs: &[f64]) -> Tensor<f64> {
        let data: Vec<f64> = xs.iter().flat_map(|&x| [x, 0.0, 0.0]).collect();
        Tensor::from_f64([xs.len(), 3], &data).unwrap()
    }

    #[test]
    fn fps_examples() {
        let pts = line(&[0.0, 10.0, 3.0, 9.0]);
        assert_eq!(farthest_point_sample(&pts, 3, 0).unwrap(), vec![0, 1, 2]);
        let mut all = farthest_point_sample(&pts, 4, 2).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert_eq!(farthest_point_sample(&pts, 1, 3).unwrap(), vec![3]);
        assert!(matches!(farthest_point_sample(&pts, 5, 0), Err(TensorError::Count(_))));
    }

    #[test]
    fn fps_with_duplicates_never_repeats() {
        let pts = line(&[1.0, 1.0, 1.0, 2.0]);
        let s = farthest_point_sample(&pts, 4, 0).unwrap();
        assert_eq!(s, vec![0, 3, 1, 2]);
    }

    #[test]
    fn ball_query_pads_and_falls_back() {
        let q = line(&[0.0]);
        let src = line(&[2.0, 0.5]);
        let nl = ball_query(&q, &src, 1.0, 4).unwrap();
        assert_eq!(nl.indices, vec![1, 1, 1, 1]);

        let far = line(&[5.0, 3.0]);
        let nl = ball_query(&q, &far, 1.0, 2).unwrap();
        assert_eq!(nl.indices, vec![1, 1]);

        let src = line(&[0.3, -0.2, 0.1]);
        let nl = ball_query(&q, &src, 100.0, 3).unwrap();
        assert_eq!(nl.indices, vec![0, 1, 2]);
    }

    #[test]
    fn knn_examples() {
        let q = line(&[0.0]);
        let src = line(&[-1.0, 1.0, 5.0]);
        let nl = knn(&q, &src, 2).unwrap();
        assert_eq!(nl.indices, vec![0, 1]);

        let src = line(&[4.0, 0.0, 1.0]);
        let nl = knn(&q, &src, 1).unwrap();
        assert_eq!(nl.indices, vec![1]);
        assert_eq!(nl.distances.unwrap(), vec![0.0]);
        assert!(matches!(knn(&q, &src, 4), Err(TensorError::Count(_))));
    }

    #[test]
    fn interpolation_examples() {
        let tape = Tape::<f64>::new();
        let src = line(&[-1.0, 1.0]);
        let feats = tape.constant(Tensor::from_f64([2, 1], &[0.0, 2.0]).unwrap());
        let out = interpolate_features(&line(&[0.0]), &src, feats, 2).unwrap();
        assert!((out.value().item() - 1.0).abs() < 1e-12);

        let src = line(&[0.0, 0.7, 2.0]);
        let feats = tape.constant(Tensor::from_f64([3, 2], &[3.0, -1.0, 8.0, 8.0, 0.0, 5.0]).unwrap());
        let out = interpolate_features(&line(&[0.7]), &src, feats, 3).unwrap();
        assert!(out.value().max_abs_diff(&Tensor::from_f64([1, 2], &[8.0, 8.0]).unwrap()) < 1e-4);
    }

    #[test]
    fn group_single_self_neighbor_is_identity_reduce() {
        let tape = Tape::<f64>::new();
        let coords = line(&[0.5, 2.0]);
        let feats = tape.constant(Tensor::from_f64([2, 2], &[1.0, -2.0, 3.0, 4.0]).unwrap());
        let nl = NeighborList { indices: vec![1], width: 1, distances: None };
        let out = group_and_reduce(&nl, feats, &coords, &coords.select_rows(&[1]), Ok).unwrap();
        assert_eq!(out.value().data(), &[3.0, 4.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn group_padding_matches_single_entry() {
        let tape = Tape::<f64>::new();
        let coords = line(&[0.5, 2.0, -1.0]);
        let feats = tape.constant(Tensor::from_f64([3, 1], &[1.0, -2.0, 3.0]).unwrap());
        let center = line(&[0.0]);
        let single = NeighborList { indices: vec![2], width: 1, distances: None };
        let padded = NeighborList { indices: vec![2, 2, 2], width: 3, distances: None };
        let a = group_and_reduce(&single, feats, &coords, &center, Ok).unwrap();
        let b = group_and_reduce(&padded, feats, &coords, &center, Ok).unwrap();
        assert_eq!(*a.value(), *b.value());
    }

    #[test]
    fn point_cloud_validates_extents() {
        let coords = Tensor::<f64>::zeros([3, 3]);
        assert!(PointCloud::new(coords.clone(), None, Some(vec![0, 1])).is_err());
        assert!(PointCloud::new(coords.clone(), Some(Tensor::zeros([2, 4])), None).is_err());
        let pc = PointCloud::new(coords, None, Some(vec![0, 1, 2])).unwrap();
        assert_eq!(pc.permuted(&[2, 0, 1]).labels.unwrap(), vec![2, 0, 1]);
    }
}
