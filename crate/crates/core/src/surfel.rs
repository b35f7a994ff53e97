//! Oriented Gaussian disk primitives.
//!
//! A surfel's tangent axes are the first two columns of the rotation matrix
//! of its (normalized) quaternion; the normal is their cross product, which
//! equals the third column. Opacity is never stored: it is derived from the
//! signed distance value through [`crate::surface::opacity_transform`].

use std::fmt;

use nalgebra::{Matrix3, Quaternion, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bubble instance a surfel is bound to. Id 0 is the nucleation region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub enum BubbleId {
    #[default]
    Unassigned,
    Id(u32),
}

impl BubbleId {
    pub const NUCLEATION: BubbleId = BubbleId::Id(0);

    pub fn is_assigned(self) -> bool {
        matches!(self, BubbleId::Id(_))
    }

    pub fn id(self) -> Option<u32> {
        match self {
            BubbleId::Id(b) => Some(b),
            BubbleId::Unassigned => None,
        }
    }

    /// On-disk encoding: -1 for unassigned.
    pub fn to_i32(self) -> i32 {
        match self {
            BubbleId::Unassigned => -1,
            BubbleId::Id(b) => b as i32,
        }
    }

    pub fn from_i32(v: i32) -> Self {
        if v < 0 {
            BubbleId::Unassigned
        } else {
            BubbleId::Id(v as u32)
        }
    }
}

impl fmt::Display for BubbleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BubbleId::Unassigned => write!(f, "unassigned"),
            BubbleId::Id(b) => write!(f, "{b}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Surfel {
    /// Center, meters.
    pub position: Vector3<f64>,
    /// Standard deviations along the two tangent axes, meters.
    pub scale: Vector2<f64>,
    /// Orientation quaternion stored as (w, x, y, z).
    pub rotation: Vector4<f64>,
    pub color: Vector3<f64>,
    /// Signed distance sample, meters.
    pub sdf: f64,
    pub bubble: BubbleId,
}

impl Surfel {
    pub fn new(
        position: Vector3<f64>,
        scale: Vector2<f64>,
        rotation: Vector4<f64>,
        color: Vector3<f64>,
        sdf: f64,
    ) -> Result<Self> {
        let norm = rotation.norm();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(Error::InvalidSurfel(format!("degenerate rotation {rotation:?}")));
        }
        if !(scale.x > 0.0 && scale.y > 0.0) {
            return Err(Error::InvalidSurfel(format!("non-positive scale {scale:?}")));
        }
        if !position.iter().chain(color.iter()).all(|v| v.is_finite()) || !sdf.is_finite() {
            return Err(Error::InvalidSurfel("non-finite attribute".into()));
        }
        Ok(Self { position, scale, rotation: rotation / norm, color, sdf, bubble: BubbleId::Unassigned })
    }

    pub fn frame(&self) -> Matrix3<f64> {
        rotation_matrix(&self.rotation)
    }

    pub fn tangent_u(&self) -> Vector3<f64> {
        self.frame().column(0).into()
    }

    pub fn tangent_v(&self) -> Vector3<f64> {
        self.frame().column(1).into()
    }

    /// Unit normal `t_u x t_v`.
    pub fn normal(&self) -> Vector3<f64> {
        surfel_normal(self)
    }

    /// Flip the normal (and the sign of the SDF sample) without changing how
    /// the surfel renders: rotate by pi about the first tangent axis.
    pub fn flip_orientation(&mut self) {
        let q = self.rotation;
        // q * (0, 1, 0, 0)
        self.rotation = Vector4::new(-q[1], q[0], q[3], -q[2]);
        self.sdf = -self.sdf;
    }

    /// Renormalize the quaternion if it drifted from unit length.
    pub fn renormalize(&mut self) {
        let n = self.rotation.norm();
        if (n - 1.0).abs() > 1e-12 {
            self.rotation /= n;
        }
    }
}

/// Normal of a surfel, `t_u x t_v`.
pub fn surfel_normal(surfel: &Surfel) -> Vector3<f64> {
    let r = surfel.frame();
    let tu: Vector3<f64> = r.column(0).into();
    let tv: Vector3<f64> = r.column(1).into();
    tu.cross(&tv)
}

/// Rotation matrix of the normalized quaternion `(w, x, y, z)`.
pub fn rotation_matrix(q: &Vector4<f64>) -> Matrix3<f64> {
    let q = q / q.norm();
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Hamilton product of two `(w, x, y, z)` quaternions.
pub fn quat_mul(a: &Vector4<f64>, b: &Vector4<f64>) -> Vector4<f64> {
    let qa = Quaternion::new(a[0], a[1], a[2], a[3]);
    let qb = Quaternion::new(b[0], b[1], b[2], b[3]);
    let p = qa * qb;
    Vector4::new(p.w, p.i, p.j, p.k)
}

/// Gradient w.r.t. the raw quaternion given gradients w.r.t. the three
/// columns (t_u, t_v, n) of its rotation matrix. The result is orthogonal
/// to `q` because the frame only depends on `q / |q|`.
pub fn quaternion_gradient(
    q: &Vector4<f64>,
    g_tu: &Vector3<f64>,
    g_tv: &Vector3<f64>,
    g_n: &Vector3<f64>,
) -> Vector4<f64> {
    let norm = q.norm();
    let qh = q / norm;
    let (w, x, y, z) = (qh[0], qh[1], qh[2], qh[3]);
    // d col0 / d(w,x,y,z)
    let c0 = [
        Vector3::new(0.0, 2.0 * z, -2.0 * y),
        Vector3::new(0.0, 2.0 * y, 2.0 * z),
        Vector3::new(-4.0 * y, 2.0 * x, -2.0 * w),
        Vector3::new(-4.0 * z, 2.0 * w, 2.0 * x),
    ];
    let c1 = [
        Vector3::new(-2.0 * z, 0.0, 2.0 * x),
        Vector3::new(2.0 * y, -4.0 * x, 2.0 * w),
        Vector3::new(2.0 * x, 0.0, 2.0 * z),
        Vector3::new(-2.0 * w, -4.0 * z, 2.0 * y),
    ];
    let c2 = [
        Vector3::new(2.0 * y, -2.0 * x, 0.0),
        Vector3::new(2.0 * z, -2.0 * w, -4.0 * x),
        Vector3::new(2.0 * w, 2.0 * z, -4.0 * y),
        Vector3::new(2.0 * x, 2.0 * y, 0.0),
    ];
    let mut g_hat = Vector4::zeros();
    for k in 0..4 {
        g_hat[k] = c0[k].dot(g_tu) + c1[k].dot(g_tv) + c2[k].dot(g_n);
    }
    (g_hat - qh * qh.dot(&g_hat)) / norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn surfel_with(q: Vector4<f64>) -> Surfel {
        Surfel::new(Vector3::zeros(), Vector2::new(0.1, 0.1), q, Vector3::repeat(0.5), 0.0).unwrap()
    }

    #[test]
    fn identity_rotation_gives_z_normal() {
        let s = surfel_with(Vector4::new(1.0, 0.0, 0.0, 0.0));
        assert_eq!(s.tangent_u(), Vector3::x());
        assert_eq!(s.tangent_v(), Vector3::y());
        assert_eq!(s.normal(), Vector3::z());
    }

    #[test]
    fn quarter_turn_about_x() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let s = surfel_with(Vector4::new(h, h, 0.0, 0.0));
        assert!((s.normal() - Vector3::new(0.0, -1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn flip_orientation_negates_normal_and_sdf() {
        let mut s = surfel_with(Vector4::new(0.9, 0.1, -0.3, 0.2));
        s.sdf = 0.02;
        let (n, tu) = (s.normal(), s.tangent_u());
        s.flip_orientation();
        assert!((s.normal() + n).norm() < 1e-12);
        assert!((s.tangent_u() - tu).norm() < 1e-12);
        assert_eq!(s.sdf, -0.02);
    }

    #[test]
    fn bubble_id_encoding() {
        assert_eq!(BubbleId::from_i32(-1), BubbleId::Unassigned);
        assert_eq!(BubbleId::Id(7).to_i32(), 7);
        assert_ne!(BubbleId::Unassigned, BubbleId::NUCLEATION);
    }

    #[test]
    fn rejects_bad_scale() {
        let r = Surfel::new(Vector3::zeros(), Vector2::new(0.0, 0.1), Vector4::x(), Vector3::zeros(), 0.0);
        assert!(matches!(r, Err(Error::InvalidSurfel(_))));
    }

    fn unit_quat() -> impl Strategy<Value = Vector4<f64>> {
        prop::array::uniform4(-1.0f64..1.0)
            .prop_filter("non-degenerate", |a| a.iter().map(|v| v * v).sum::<f64>() > 1e-3)
            .prop_map(|a| Vector4::from(a).normalize())
    }

    proptest! {
        #[test]
        fn normal_matches_nalgebra_third_column(q in unit_quat()) {
            let s = surfel_with(q);
            let uq = nalgebra::UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
            let col: Vector3<f64> = uq.to_rotation_matrix().matrix().column(2).into();
            prop_assert!((s.normal() - col).norm() < 1e-12);
            prop_assert!((s.normal().norm() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn frame_is_a_homomorphism(a in unit_quat(), b in unit_quat()) {
            let lhs = rotation_matrix(&quat_mul(&a, &b));
            let rhs = rotation_matrix(&a) * rotation_matrix(&b);
            prop_assert!((lhs - rhs).abs().max() < 1e-6);
        }

        #[test]
        fn quaternion_gradient_matches_finite_differences(
            q in unit_quat(),
            g in prop::array::uniform9(-1.0f64..1.0),
        ) {
            let gtu = Vector3::new(g[0], g[1], g[2]);
            let gtv = Vector3::new(g[3], g[4], g[5]);
            let gn = Vector3::new(g[6], g[7], g[8]);
            let f = |q: &Vector4<f64>| {
                let r = rotation_matrix(q);
                gtu.dot(&r.column(0)) + gtv.dot(&r.column(1)) + gn.dot(&r.column(2))
            };
            let analytic = quaternion_gradient(&q, &gtu, &gtv, &gn);
            for k in 0..4 {
                let h = 1e-6;
                let mut qp = q;
                let mut qm = q;
                qp[k] += h;
                qm[k] -= h;
                let fd = (f(&qp) - f(&qm)) / (2.0 * h);
                prop_assert!((fd - analytic[k]).abs() < 1e-6, "k={} fd={} an={}", k, fd, analytic[k]);
            }
        }
    }
}
