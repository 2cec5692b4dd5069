//! Exact nearest-neighbor and radius queries over 3D point sets.
//!
//! Ordering is by squared distance with ties broken by lower source index,
//! so the hashed and brute-force paths return identical lists.

use std::cmp::Ordering;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NeighborMode<T> {
    Knn { k: usize },
    Ball { radius: T, max_count: usize },
}

impl<T: Real> NeighborMode<T> {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NeighborMode::Knn { k } if k == 0 => Err(Error::InvalidInput("knn requires k >= 1".into())),
            NeighborMode::Ball { radius, max_count } if !(radius > T::zero()) || max_count == 0 => Err(
                Error::InvalidInput("ball query requires radius > 0 and max_count >= 1".into()),
            ),
            _ => Ok(()),
        }
    }
}

/// One `(source index, distance)` list per query, ascending by distance.
pub type NeighborList<T> = Vec<Vec<(usize, T)>>;

#[inline]
pub fn squared_distance<T: Real>(a: [T; 3], b: [T; 3]) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
fn order<T: Real>(a: &(T, usize), b: &(T, usize)) -> Ordering {
    a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

fn finish<T: Real>(mut v: Vec<(T, usize)>, limit: usize) -> Vec<(usize, T)> {
    v.sort_by(order);
    v.truncate(limit);
    v.into_iter().map(|(d2, i)| (i, d2.sqrt())).collect()
}

/// O(M K) reference scan.
pub fn brute_force_query<T: Real>(queries: &[[T; 3]], sources: &[[T; 3]], mode: NeighborMode<T>) -> Result<NeighborList<T>> {
    mode.validate()?;
    Ok(queries
        .iter()
        .map(|&q| {
            let all = sources.iter().enumerate().map(|(i, &s)| (squared_distance(q, s), i));
            match mode {
                NeighborMode::Knn { k } => finish(all.collect(), k),
                NeighborMode::Ball { radius, max_count } => {
                    let r2 = radius * radius;
                    finish(all.filter(|x| x.0 <= r2).collect(), max_count)
                }
            }
        })
        .collect())
}

/// Uniform hash grid over a fixed source set.
#[derive(Debug, Clone)]
pub struct SpatialHashGrid<T> {
    cell: T,
    points: Vec<[T; 3]>,
    cells: HashMap<[i64; 3], Vec<usize>>,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl<T: Real> SpatialHashGrid<T> {
    pub fn new(points: Vec<[T; 3]>, cell: T) -> Result<Self> {
        if !(cell > T::zero() && cell.is_finite()) {
            return Err(Error::InvalidInput(format!("cell size must be positive, got {cell}")));
        }
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for (i, &p) in points.iter().enumerate() {
            let c = cell_of(p, cell);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
            cells.entry(c).or_default().push(i);
        }
        Ok(Self {
            cell,
            points,
            cells,
            lo,
            hi,
        })
    }

    /// Cell size from the source bounding-box diagonal over the cube root
    /// of the source count.
    pub fn knn_cell_size(points: &[[T; 3]]) -> T {
        if points.is_empty() {
            return T::one();
        }
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let diag = squared_distance(lo, hi).sqrt();
        let c = diag / T::from_usize_lossy(points.len()).cbrt();
        if c > T::zero() {
            c
        } else {
            T::one()
        }
    }

    pub fn for_mode(points: Vec<[T; 3]>, mode: NeighborMode<T>) -> Result<Self> {
        let cell = match mode {
            NeighborMode::Knn { .. } => Self::knn_cell_size(&points),
            NeighborMode::Ball { radius, .. } => radius,
        };
        Self::new(points, cell)
    }

    pub fn cell_size(&self) -> T {
        self.cell
    }

    pub fn points(&self) -> &[[T; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn occupied_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn query(&self, q: [T; 3], mode: NeighborMode<T>) -> Vec<(usize, T)> {
        match mode {
            NeighborMode::Knn { k } => self.knn(q, k),
            NeighborMode::Ball { radius, max_count } => self.ball(q, radius, max_count),
        }
    }

    pub fn ball(&self, q: [T; 3], radius: T, max_count: usize) -> Vec<(usize, T)> {
        if self.points.is_empty() {
            return Vec::new();
        }
        let r2 = radius * radius;
        let qc = cell_of(q, self.cell);
        let reach = (radius / self.cell).ceil().to_i64().unwrap_or(i64::MAX / 4);
        let mut found = Vec::new();
        let (from, to) = self.clamp_cube(qc, reach);
        if from.iter().zip(&to).any(|(a, b)| a > b) {
            return Vec::new();
        }
        let volume = (0..3).map(|a| (to[a] - from[a] + 1) as u128).product::<u128>();
        if volume > self.cells.len() as u128 {
            for (c, idx) in &self.cells {
                if (0..3).all(|a| c[a] >= from[a] && c[a] <= to[a]) {
                    self.collect_within(q, idx, r2, &mut found);
                }
            }
        } else {
            for x in from[0]..=to[0] {
                for y in from[1]..=to[1] {
                    for z in from[2]..=to[2] {
                        if let Some(idx) = self.cells.get(&[x, y, z]) {
                            self.collect_within(q, idx, r2, &mut found);
                        }
                    }
                }
            }
        }
        finish(found, max_count)
    }

    fn collect_within(&self, q: [T; 3], idx: &[usize], r2: T, out: &mut Vec<(T, usize)>) {
        for &i in idx {
            let d2 = squared_distance(q, self.points[i]);
            if d2 <= r2 {
                out.push((d2, i));
            }
        }
    }

    fn clamp_cube(&self, qc: [i64; 3], r: i64) -> ([i64; 3], [i64; 3]) {
        let mut from = [0; 3];
        let mut to = [0; 3];
        for a in 0..3 {
            from[a] = qc[a].saturating_sub(r).max(self.lo[a]);
            to[a] = qc[a].saturating_add(r).min(self.hi[a]);
        }
        (from, to)
    }

    pub fn knn(&self, q: [T; 3], k: usize) -> Vec<(usize, T)> {
        if self.points.is_empty() || k == 0 {
            return Vec::new();
        }
        let k = k.min(self.points.len());
        let qc = cell_of(q, self.cell);
        let mut best: Vec<(T, usize)> = Vec::with_capacity(k + 1);
        let push = |best: &mut Vec<(T, usize)>, cand: (T, usize)| {
            if best.len() == k && order(&cand, &best[k - 1]) != Ordering::Less {
                return;
            }
            let pos = best.partition_point(|b| order(b, &cand) == Ordering::Less);
            best.insert(pos, cand);
            best.truncate(k);
        };
        let mut r: i64 = 0;
        loop {
            let shell_cells = (2 * r + 1).pow(3) - if r > 0 { (2 * r - 1).pow(3) } else { 0 };
            if shell_cells > 8 * self.cells.len() as i64 {
                // Remaining shells are mostly empty; sweep the occupied cells
                // that lie outside the cube already searched.
                for (c, idx) in &self.cells {
                    let cheb = (0..3).map(|a| (c[a] - qc[a]).abs()).max().unwrap_or(0);
                    if cheb >= r {
                        for &i in idx {
                            push(&mut best, (squared_distance(q, self.points[i]), i));
                        }
                    }
                }
                break;
            }
            self.visit_shell(qc, r, |i| push(&mut best, (squared_distance(q, self.points[i]), i)));
            let covered = (0..3).all(|a| qc[a] - r <= self.lo[a] && qc[a] + r >= self.hi[a]);
            if covered {
                break;
            }
            if best.len() == k {
                let guard = self.cube_clearance(q, qc, r);
                if best[k - 1].0 < guard * guard {
                    break;
                }
            }
            r += 1;
        }
        best.into_iter().map(|(d2, i)| (i, d2.sqrt())).collect()
    }

    /// Distance from `q` to the boundary of the cube of cells `qc +- r`; any
    /// point outside that cube is at least this far away.
    fn cube_clearance(&self, q: [T; 3], qc: [i64; 3], r: i64) -> T {
        let mut m = T::infinity();
        for a in 0..3 {
            let lo = T::from_i64(qc[a] - r).unwrap() * self.cell;
            let hi = T::from_i64(qc[a] + r + 1).unwrap() * self.cell;
            m = m.min(q[a] - lo).min(hi - q[a]);
        }
        m.max(T::zero())
    }

    fn visit_shell(&self, qc: [i64; 3], r: i64, mut f: impl FnMut(usize)) {
        let (from, to) = self.clamp_cube(qc, r);
        if from.iter().zip(&to).any(|(a, b)| a > b) {
            return;
        }
        for x in from[0]..=to[0] {
            for y in from[1]..=to[1] {
                let edge_xy = (x - qc[0]).abs() == r || (y - qc[1]).abs() == r;
                if edge_xy {
                    for z in from[2]..=to[2] {
                        if let Some(idx) = self.cells.get(&[x, y, z]) {
                            idx.iter().for_each(|&i| f(i));
                        }
                    }
                } else {
                    for z in [qc[2] - r, qc[2] + r] {
                        if z < from[2] || z > to[2] {
                            continue;
                        }
                        if let Some(idx) = self.cells.get(&[x, y, z]) {
                            idx.iter().for_each(|&i| f(i));
                        }
                        if r == 0 {
                            break;
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn cell_of<T: Real>(p: [T; 3], cell: T) -> [i64; 3] {
    p.map(|v| (v / cell).floor().to_i64().unwrap_or(0))
}

/// Neighborhoods of every query within `sources`, via a hash grid sized
/// for the mode.
pub fn neighbor_query<T: Real>(queries: &[[T; 3]], sources: &[[T; 3]], mode: NeighborMode<T>) -> Result<NeighborList<T>> {
    mode.validate()?;
    if sources.is_empty() {
        return Ok(vec![Vec::new(); queries.len()]);
    }
    let grid = SpatialHashGrid::for_mode(sources.to_vec(), mode)?;
    Ok(queries.iter().map(|&q| grid.query(q, mode)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize, s: f64) -> Vec<[f64; 3]> {
        (0..n).map(|_| [(); 3].map(|_| rng.gen_range(-s..s))).collect()
    }

    #[test]
    fn coincident_source_first() {
        let src = vec![[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.5, 0.0, 0.0]];
        let out = neighbor_query(&[[0.0, 0.0, 0.0]], &src, NeighborMode::Knn { k: 2 }).unwrap();
        assert_eq!(out[0][0], (1, 0.0));
        assert_eq!(out[0][1].0, 2);
    }

    #[test]
    fn equidistant_lower_index_first() {
        let src = vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]];
        let out = neighbor_query(&[[0.0; 3]], &src, NeighborMode::Knn { k: 1 }).unwrap();
        assert_eq!(out[0], vec![(0, 1.0)]);
        let src = vec![[3.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0]];
        let out = neighbor_query(&[[0.0; 3]], &src, NeighborMode::Knn { k: 2 }).unwrap();
        assert_eq!(out[0].iter().map(|x| x.0).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn empty_sources_and_bad_modes() {
        let out = neighbor_query::<f64>(&[[0.0; 3]; 2], &[], NeighborMode::Knn { k: 3 }).unwrap();
        assert_eq!(out, vec![vec![], vec![]]);
        assert!(neighbor_query::<f64>(&[[0.0; 3]], &[[0.0; 3]], NeighborMode::Knn { k: 0 }).is_err());
        assert!(neighbor_query::<f64>(&[[0.0; 3]], &[[0.0; 3]], NeighborMode::Ball { radius: 0.0, max_count: 4 }).is_err());
    }

    #[test]
    fn fewer_sources_than_k() {
        let out = neighbor_query(&[[0.0; 3]], &[[1.0, 1.0, 1.0], [2.0; 3]], NeighborMode::Knn { k: 5 }).unwrap();
        assert_eq!(out[0].len(), 2);
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src = cloud(&mut rng, 500, 10.0);
        let qs = cloud(&mut rng, 500, 12.0);
        let mode = NeighborMode::Knn { k: 3 };
        assert_eq!(neighbor_query(&qs, &src, mode).unwrap(), brute_force_query(&qs, &src, mode).unwrap());
    }

    #[test]
    fn far_queries_and_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut src = cloud(&mut rng, 200, 1.0);
        src.extend(cloud(&mut rng, 50, 1.0).into_iter().map(|p| [p[0] + 60.0, p[1], p[2]]));
        let qs: Vec<[f64; 3]> = (0..40).map(|i| [i as f64 * 3.0 - 30.0, 25.0, -4.0]).collect();
        for mode in [NeighborMode::Knn { k: 7 }, NeighborMode::Ball { radius: 30.0, max_count: 9 }] {
            assert_eq!(neighbor_query(&qs, &src, mode).unwrap(), brute_force_query(&qs, &src, mode).unwrap());
        }
    }

    #[test]
    fn ball_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src = cloud(&mut rng, 800, 5.0);
        let qs = cloud(&mut rng, 300, 6.0);
        let mode = NeighborMode::Ball { radius: 2.0, max_count: 16 };
        let got = neighbor_query(&qs, &src, mode).unwrap();
        assert_eq!(got, brute_force_query(&qs, &src, mode).unwrap());
        assert!(got.iter().all(|l| l.iter().all(|&(_, d)| d <= 2.0)));
        assert!(got.iter().any(|l| l.len() == 16));
    }

    #[test]
    fn grid_places_each_point_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let src = cloud(&mut rng, 300, 4.0);
        let g = SpatialHashGrid::new(src, 0.7).unwrap();
        let mut seen: Vec<usize> = g.cells.values().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..300).collect::<Vec<_>>());
        assert!(SpatialHashGrid::new(vec![[0.0f64; 3]], 0.0).is_err());
    }
}
