use super::neighbors::squared_distance;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Greedy max-min sampling seeded at index 0. Ties pick the lower index.
pub fn farthest_point_sample<T: Real>(points: &[[T; 3]], m: usize) -> Result<Vec<usize>> {
    if m == 0 || m > points.len() {
        return Err(Error::InsufficientPoints {
            requested: m,
            available: points.len(),
        });
    }
    let mut chosen = Vec::with_capacity(m);
    let mut min_d2 = vec![T::infinity(); points.len()];
    let mut current = 0;
    chosen.push(current);
    while chosen.len() < m {
        let c = points[current];
        let mut best = (T::neg_infinity(), 0usize);
        for (i, (p, d)) in points.iter().zip(min_d2.iter_mut()).enumerate() {
            let d2 = squared_distance(*p, c);
            if d2 < *d {
                *d = d2;
            }
            if *d > best.0 {
                best = (*d, i);
            }
        }
        current = best.1;
        chosen.push(current);
    }
    Ok(chosen)
}
