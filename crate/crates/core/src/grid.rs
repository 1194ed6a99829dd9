//! Spatial grids of initial points.

use crate::error::{Error, Result};
use crate::linalg::Vect;

/// Tensor grid over a box, first axis fastest in the flat index.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialGrid {
    mins: Vec<f64>,
    maxs: Vec<f64>,
    points: Vec<usize>,
}

impl SpatialGrid {
    pub fn new(mins: Vec<f64>, maxs: Vec<f64>, points: Vec<usize>) -> Result<Self> {
        if mins.is_empty() || mins.len() != maxs.len() || mins.len() != points.len() {
            return Err(Error::Config("grid axes must be nonempty and consistent".into()));
        }
        if mins.len() > crate::linalg::MAX_DIM {
            return Err(Error::Capability(format!(
                "grids support at most {} axes",
                crate::linalg::MAX_DIM
            )));
        }
        for a in 0..mins.len() {
            if points[a] == 0 {
                return Err(Error::Config("grid needs at least one point per axis".into()));
            }
            if points[a] == 1 {
                if maxs[a] != mins[a] {
                    return Err(Error::Config("single-point axis needs min == max".into()));
                }
            } else if !(maxs[a] > mins[a]) {
                return Err(Error::Config("grid box must be nondegenerate (max > min)".into()));
            }
        }
        Ok(SpatialGrid { mins, maxs, points })
    }

    pub fn single_point(x: &Vect) -> Self {
        SpatialGrid {
            mins: x.as_slice().to_vec(),
            maxs: x.as_slice().to_vec(),
            points: vec![1; x.dim()],
        }
    }

    /// Uniform 1-d grid.
    pub fn line(min: f64, max: f64, points: usize) -> Result<Self> {
        SpatialGrid::new(vec![min], vec![max], vec![points])
    }

    pub fn dim(&self) -> usize {
        self.mins.len()
    }

    pub fn points_per_axis(&self, axis: usize) -> usize {
        self.points[axis]
    }

    pub fn n_points(&self) -> usize {
        self.points.iter().product()
    }

    pub fn min(&self, axis: usize) -> f64 {
        self.mins[axis]
    }

    pub fn max(&self, axis: usize) -> f64 {
        self.maxs[axis]
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        if self.points[axis] <= 1 {
            0.0
        } else {
            (self.maxs[axis] - self.mins[axis]) / (self.points[axis] - 1) as f64
        }
    }

    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        if i + 1 == self.points[axis] {
            self.maxs[axis]
        } else {
            self.mins[axis] + self.spacing(axis) * i as f64
        }
    }

    pub fn point(&self, flat: usize) -> Vect {
        let mut rem = flat;
        let mut x = Vect::zeros(self.dim());
        for a in 0..self.dim() {
            let i = rem % self.points[a];
            rem /= self.points[a];
            x.set(a, self.coord(a, i));
        }
        x
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        let mut flat = 0;
        for a in (0..self.dim()).rev() {
            flat = flat * self.points[a] + idx[a];
        }
        flat
    }

    pub fn contains(&self, y: &Vect) -> bool {
        (0..self.dim()).all(|a| y.get(a) >= self.mins[a] && y.get(a) <= self.maxs[a])
    }

    /// Lower cell index and in-cell fraction along one axis; y must be in the box.
    pub fn cell(&self, axis: usize, y: f64) -> (usize, f64) {
        let n = self.points[axis];
        if n <= 1 {
            return (0, 0.0);
        }
        let h = self.spacing(axis);
        let rel = (y - self.mins[axis]) / h;
        let mut i = rel.floor() as isize;
        if i < 0 {
            i = 0;
        }
        let mut i = i as usize;
        if i >= n - 1 {
            i = n - 2;
        }
        let frac = ((y - self.coord(axis, i)) / h).clamp(0.0, 1.0);
        (i, frac)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_indices_roundtrip() {
        let g = SpatialGrid::line(-2.0, 2.0, 101).unwrap();
        assert_eq!(g.n_points(), 101);
        assert!((g.spacing(0) - 0.04).abs() < 1e-15);
        assert_eq!(g.point(0).x(), -2.0);
        assert_eq!(g.point(100).x(), 2.0);
        let (i, f) = g.cell(0, 0.02);
        assert_eq!(i, 50);
        assert!((f - 0.5).abs() < 1e-12);
    }

    #[test]
    fn plane_flat_ordering_first_axis_fastest() {
        let g = SpatialGrid::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![3, 2]).unwrap();
        assert_eq!(g.n_points(), 6);
        assert_eq!(g.point(1).as_slice(), &[0.5, 0.0]);
        assert_eq!(g.point(3).as_slice(), &[0.0, 1.0]);
        assert_eq!(g.flat_index(&[2, 1]), 5);
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(SpatialGrid::line(1.0, 1.0, 5).is_err());
        assert!(SpatialGrid::line(1.0, 1.0, 1).is_ok());
    }
}
