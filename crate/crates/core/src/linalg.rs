//! Small dense vectors and matrices for state dimensions up to [`MAX_DIM`].
//!
//! The engine steps millions of replicas, so these types are plain stack
//! arrays with an explicit dimension field: no heap traffic in the hot loop.
//! Demonstrations beyond d = 3 are out of scope for this engine.

/// Largest supported state dimension.
pub const MAX_DIM: usize = 3;

/// A point or vector in R^d, d <= MAX_DIM.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Vect {
    dim: usize,
    a: [f64; MAX_DIM],
}

/// A d x d matrix, row major, d <= MAX_DIM.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat {
    dim: usize,
    a: [f64; MAX_DIM * MAX_DIM],
}

impl Vect {
    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1 && dim <= MAX_DIM, "dimension {dim} out of range");
        Vect { dim, a: [0.0; MAX_DIM] }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        let mut out = Vect::zeros(v.len());
        out.a[..v.len()].copy_from_slice(v);
        out
    }

    /// 1-d convenience constructor.
    pub fn scalar(x: f64) -> Self {
        let mut out = Vect::zeros(1);
        out.a[0] = x;
        out
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.a[..self.dim]
    }

    /// First component; panics unless d = 1.
    pub fn x(&self) -> f64 {
        assert_eq!(self.dim, 1, "x() is reserved for 1-d vectors");
        self.a[0]
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        debug_assert!(i < self.dim);
        self.a[i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, v: f64) {
        debug_assert!(i < self.dim);
        self.a[i] = v;
    }

    #[inline]
    pub fn add(&self, rhs: &Vect) -> Vect {
        debug_assert_eq!(self.dim, rhs.dim);
        let mut out = *self;
        for i in 0..self.dim {
            out.a[i] += rhs.a[i];
        }
        out
    }

    #[inline]
    pub fn sub(&self, rhs: &Vect) -> Vect {
        debug_assert_eq!(self.dim, rhs.dim);
        let mut out = *self;
        for i in 0..self.dim {
            out.a[i] -= rhs.a[i];
        }
        out
    }

    #[inline]
    pub fn scale(&self, c: f64) -> Vect {
        let mut out = *self;
        for i in 0..self.dim {
            out.a[i] *= c;
        }
        out
    }

    #[inline]
    pub fn axpy(&mut self, c: f64, rhs: &Vect) {
        debug_assert_eq!(self.dim, rhs.dim);
        for i in 0..self.dim {
            self.a[i] += c * rhs.a[i];
        }
    }

    #[inline]
    pub fn dot(&self, rhs: &Vect) -> f64 {
        debug_assert_eq!(self.dim, rhs.dim);
        let mut s = 0.0;
        for i in 0..self.dim {
            s += self.a[i] * rhs.a[i];
        }
        s
    }

    #[inline]
    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.as_slice().iter().all(|v| v.is_finite())
    }
}

impl Mat {
    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1 && dim <= MAX_DIM, "dimension {dim} out of range");
        Mat { dim, a: [0.0; MAX_DIM * MAX_DIM] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Mat::zeros(dim);
        for i in 0..dim {
            m.a[i * dim + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let d = rows.len();
        let mut m = Mat::zeros(d);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), d, "matrix rows must have length {d}");
            m.a[i * d..i * d + d].copy_from_slice(r);
        }
        m
    }

    /// 1-d convenience constructor.
    pub fn scalar(v: f64) -> Self {
        let mut m = Mat::zeros(1);
        m.a[0] = v;
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.dim && j < self.dim);
        self.a[i * self.dim + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.dim && j < self.dim);
        self.a[i * self.dim + j] = v;
    }

    #[inline]
    pub fn add(&self, rhs: &Mat) -> Mat {
        debug_assert_eq!(self.dim, rhs.dim);
        let mut out = *self;
        for i in 0..self.dim * self.dim {
            out.a[i] += rhs.a[i];
        }
        out
    }

    #[inline]
    pub fn sub(&self, rhs: &Mat) -> Mat {
        debug_assert_eq!(self.dim, rhs.dim);
        let mut out = *self;
        for i in 0..self.dim * self.dim {
            out.a[i] -= rhs.a[i];
        }
        out
    }

    #[inline]
    pub fn scale(&self, c: f64) -> Mat {
        let mut out = *self;
        for i in 0..self.dim * self.dim {
            out.a[i] *= c;
        }
        out
    }

    #[inline]
    pub fn axpy(&mut self, c: f64, rhs: &Mat) {
        debug_assert_eq!(self.dim, rhs.dim);
        for i in 0..self.dim * self.dim {
            self.a[i] += c * rhs.a[i];
        }
    }

    #[inline]
    pub fn matmul(&self, rhs: &Mat) -> Mat {
        let d = self.dim;
        debug_assert_eq!(d, rhs.dim);
        let mut out = Mat::zeros(d);
        for i in 0..d {
            for k in 0..d {
                let v = self.a[i * d + k];
                if v != 0.0 {
                    for j in 0..d {
                        out.a[i * d + j] += v * rhs.a[k * d + j];
                    }
                }
            }
        }
        out
    }

    #[inline]
    pub fn matvec(&self, v: &Vect) -> Vect {
        let d = self.dim;
        debug_assert_eq!(d, v.dim());
        let mut out = Vect::zeros(d);
        for i in 0..d {
            let mut s = 0.0;
            for j in 0..d {
                s += self.a[i * d + j] * v.get(j);
            }
            out.set(i, s);
        }
        out
    }

    /// Row-vector product v^T M, returned as a vector.
    #[inline]
    pub fn vecmat(&self, v: &Vect) -> Vect {
        let d = self.dim;
        debug_assert_eq!(d, v.dim());
        let mut out = Vect::zeros(d);
        for j in 0..d {
            let mut s = 0.0;
            for i in 0..d {
                s += v.get(i) * self.a[i * d + j];
            }
            out.set(j, s);
        }
        out
    }

    /// Outer product col * row^T.
    #[inline]
    pub fn outer(col: &Vect, row: &Vect) -> Mat {
        let d = col.dim();
        debug_assert_eq!(d, row.dim());
        let mut out = Mat::zeros(d);
        for i in 0..d {
            for j in 0..d {
                out.a[i * d + j] = col.get(i) * row.get(j);
            }
        }
        out
    }

    #[inline]
    pub fn frobenius(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.dim * self.dim {
            s += self.a[i] * self.a[i];
        }
        s.sqrt()
    }

    pub fn det(&self) -> f64 {
        let a = &self.a;
        match self.dim {
            1 => a[0],
            2 => a[0] * a[3] - a[1] * a[2],
            3 => {
                a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6])
                    + a[2] * (a[3] * a[7] - a[4] * a[6])
            }
            _ => unreachable!(),
        }
    }

    /// Inverse via Gaussian elimination with partial pivoting.
    /// Returns None when a pivot is exactly zero or the result is non-finite.
    pub fn inverse(&self) -> Option<Mat> {
        let d = self.dim;
        let mut aug = [[0.0f64; 2 * MAX_DIM]; MAX_DIM];
        for i in 0..d {
            for j in 0..d {
                aug[i][j] = self.a[i * d + j];
            }
            aug[i][d + i] = 1.0;
        }
        for col in 0..d {
            let mut piv = col;
            for r in col + 1..d {
                if aug[r][col].abs() > aug[piv][col].abs() {
                    piv = r;
                }
            }
            if aug[piv][col] == 0.0 {
                return None;
            }
            aug.swap(col, piv);
            let p = aug[col][col];
            for j in 0..2 * d {
                aug[col][j] /= p;
            }
            for r in 0..d {
                if r != col {
                    let f = aug[r][col];
                    if f != 0.0 {
                        for j in 0..2 * d {
                            aug[r][j] -= f * aug[col][j];
                        }
                    }
                }
            }
        }
        let mut out = Mat::zeros(d);
        for i in 0..d {
            for j in 0..d {
                out.a[i * d + j] = aug[i][d + j];
            }
        }
        if out.a[..d * d].iter().all(|v| v.is_finite()) {
            Some(out)
        } else {
            None
        }
    }

    pub fn is_finite(&self) -> bool {
        self.a[..self.dim * self.dim].iter().all(|v| v.is_finite())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.a[..self.dim * self.dim]
    }
}
