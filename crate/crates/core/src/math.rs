//! Fixed-size 3-vectors and 3×3 matrices.

use monoview_autodiff::Scalar;

pub type Vec3<T> = [T; 3];

/// Row-major 3×3 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3<T>(pub [[T; 3]; 3]);

impl<T: Scalar> Mat3<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Mat3([[o, z, z], [z, o, z], [z, z, o]])
    }

    pub fn transpose(&self) -> Self {
        let m = &self.0;
        Mat3([[m[0][0], m[1][0], m[2][0]], [m[0][1], m[1][1], m[2][1]], [m[0][2], m[1][2], m[2][2]]])
    }

    pub fn mul(&self, other: &Self) -> Self {
        let mut out = [[T::zero(); 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[i][k] * other.0[k][j]).sum();
            }
        }
        Mat3(out)
    }

    pub fn apply(&self, v: &Vec3<T>) -> Vec3<T> {
        let m = &self.0;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    pub fn determinant(&self) -> T {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Largest absolute entry of `selfᵀ·self − I`.
    pub fn orthonormality_error(&self) -> T {
        let p = self.transpose().mul(self);
        let mut err = T::zero();
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { T::one() } else { T::zero() };
                err = err.max((p.0[i][j] - target).abs());
            }
        }
        err
    }

    pub fn frobenius_distance_sq(&self, other: &Self) -> T {
        let mut acc = T::zero();
        for i in 0..3 {
            for j in 0..3 {
                let d = self.0[i][j] - other.0[i][j];
                acc += d * d;
            }
        }
        acc
    }

    /// Rotation angle of `selfᵀ·other` (both assumed to be rotations), radians.
    pub fn geodesic_distance(&self, other: &Self) -> T {
        let r = self.transpose().mul(other);
        let trace = r.0[0][0] + r.0[1][1] + r.0[2][2];
        let two = T::one() + T::one();
        ((trace - T::one()) / two).max(-T::one()).min(T::one()).acos()
    }

    pub fn cast<U: Scalar>(&self) -> Mat3<U> {
        let mut out = [[U::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = U::from_f64(self.0[i][j].to_f64().unwrap()).unwrap();
            }
        }
        Mat3(out)
    }
}

pub fn dot<T: Scalar>(a: &Vec3<T>, b: &Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm<T: Scalar>(a: &Vec3<T>) -> T {
    dot(a, a).sqrt()
}

pub fn normalize<T: Scalar>(a: &Vec3<T>) -> Vec3<T> {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

pub fn add<T: Scalar>(a: &Vec3<T>, b: &Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub<T: Scalar>(a: &Vec3<T>, b: &Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale<T: Scalar>(a: &Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}
