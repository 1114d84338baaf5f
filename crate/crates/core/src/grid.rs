//! Uniform cell list for fixed-radius neighbour queries.

use std::collections::HashMap;

use crate::geometry::{dist_sq, Vec3};

/// Hash grid over a static point set. Cells are cubes of edge `cell_size`; a radius
/// query with `radius <= cell_size` only needs the 27 surrounding cells.
#[derive(Debug, Clone)]
pub struct SpatialGrid {
    cell_size: f64,
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
    points: Vec<Vec3>,
}

impl SpatialGrid {
    pub fn new(points: Vec<Vec3>, cell_size: f64) -> Self {
        assert!(cell_size > 0.0, "cell size must be positive");
        let mut cells: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(cell_of(*p, cell_size)).or_default().push(i);
        }
        Self {
            cell_size,
            cells,
            points,
        }
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    /// Calls `f(index, squared_distance)` for every point strictly closer than `radius`.
    pub fn for_each_within(&self, query: Vec3, radius: f64, mut f: impl FnMut(usize, f64)) {
        let reach = (radius / self.cell_size).ceil().max(1.0) as i64;
        let (cx, cy, cz) = cell_of(query, self.cell_size);
        let r2 = radius * radius;
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    let Some(bucket) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) else {
                        continue;
                    };
                    for &i in bucket {
                        let d2 = dist_sq(self.points[i], query);
                        if d2 < r2 {
                            f(i, d2);
                        }
                    }
                }
            }
        }
    }

    /// Indices of all points strictly within `radius` of `query`, ascending.
    pub fn within(&self, query: Vec3, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.for_each_within(query, radius, |i, _| out.push(i));
        out.sort_unstable();
        out
    }
}

fn cell_of(p: Vec3, size: f64) -> (i64, i64, i64) {
    (
        (p[0] / size).floor() as i64,
        (p[1] / size).floor() as i64,
        (p[2] / size).floor() as i64,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<Vec3> = (0..400)
            .map(|_| [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)])
            .collect();
        let grid = SpatialGrid::new(pts.clone(), 6.0);
        for radius in [1.0, 6.0, 9.5] {
            for q in pts.iter().take(50) {
                let expect: Vec<usize> = (0..pts.len()).filter(|&i| dist_sq(pts[i], *q) < radius * radius).collect();
                assert_eq!(grid.within(*q, radius), expect);
            }
        }
    }
}
