//! Eye-contact labels from 3-D gaze geometry and head-angle grids.
//!
//! Points are in the camera frame, millimeters, with the camera at the origin.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Default eye-contact tolerance: the gaze line must pass within this many
/// millimeters of the camera.
pub const EC_THRESHOLD_MM: f64 = 30.0;

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

fn scale(a: Vec3, k: f64) -> Vec3 {
    [a[0] * k, a[1] * k, a[2] * k]
}

/// Face center and gaze target of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaze3dRecord {
    pub face_center: Vec3,
    pub gaze_target: Vec3,
}

impl Gaze3dRecord {
    pub fn new(face_center: Vec3, gaze_target: Vec3) -> Result<Self> {
        let r = Gaze3dRecord {
            face_center,
            gaze_target,
        };
        r.direction()?;
        Ok(r)
    }

    /// `gt - fc`.
    pub fn gaze_vector(&self) -> Vec3 {
        sub(self.gaze_target, self.face_center)
    }

    /// Unit gaze direction.
    pub fn direction(&self) -> Result<Vec3> {
        let v = self.gaze_vector();
        let n = norm(v);
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "face center {:?} and gaze target {:?} coincide",
                self.face_center, self.gaze_target
            )));
        }
        Ok(scale(v, 1.0 / n))
    }

    /// Whether the gaze points into the half-space containing the camera.
    pub fn faces_camera(&self) -> Result<bool> {
        let d = self.direction()?;
        Ok(dot(d, scale(self.face_center, -1.0)) > 0.0)
    }
}

/// Perpendicular distance from the camera origin to the infinite line
/// through the face center along the gaze direction: `‖fc − (fc·d) d‖`.
pub fn ec_distance(rec: &Gaze3dRecord) -> Result<f64> {
    let d = rec.direction()?;
    let fc = rec.face_center;
    Ok(norm(sub(fc, scale(d, dot(fc, d)))))
}

/// `‖v − (v·d) d‖` with `v = gt − fc` taken literally. Since `d` is `v`
/// normalized this is zero up to rounding for every record, which is why
/// [`ec_distance`] measures from the origin instead.
pub fn ec_distance_literal(rec: &Gaze3dRecord) -> Result<f64> {
    let d = rec.direction()?;
    let v = rec.gaze_vector();
    Ok(norm(sub(v, scale(d, dot(v, d)))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EcLabel {
    EC,
    OFT,
}

/// Eye contact iff the gaze line passes strictly closer than `threshold_mm`
/// to the camera and the gaze heads toward it.
pub fn label_ec_mpii(rec: &Gaze3dRecord, threshold_mm: f64) -> Result<EcLabel> {
    let dist = ec_distance(rec)?;
    Ok(if dist < threshold_mm && rec.faces_camera()? {
        EcLabel::EC
    } else {
        EcLabel::OFT
    })
}

/// Eye contact iff both angles are exactly zero on the dataset's discrete grid.
pub fn label_ec_columbia(elevation_deg: f64, yaw_deg: f64) -> EcLabel {
    if elevation_deg == 0.0 && yaw_deg == 0.0 {
        EcLabel::EC
    } else {
        EcLabel::OFT
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(fc: Vec3, gt: Vec3) -> Gaze3dRecord {
        Gaze3dRecord::new(fc, gt).unwrap()
    }

    /// Closest approach of `fc + t d` to the origin over a fine `t` grid.
    fn brute_force(r: &Gaze3dRecord) -> (f64, f64) {
        let d = r.direction().unwrap();
        let fc = r.face_center;
        let mut best = (f64::INFINITY, 0.0);
        let mut t = -3000.0;
        while t <= 3000.0 {
            let p = [fc[0] + t * d[0], fc[1] + t * d[1], fc[2] + t * d[2]];
            let n = norm(p);
            if n < best.0 {
                best = (n, t);
            }
            t += 0.05;
        }
        best
    }

    #[test]
    fn collinear_toward_camera() {
        let r = rec([0.0, 0.0, 1000.0], [0.0, 0.0, 0.0]);
        assert_eq!(ec_distance(&r).unwrap(), 0.0);
        assert_eq!(label_ec_mpii(&r, EC_THRESHOLD_MM).unwrap(), EcLabel::EC);
    }

    #[test]
    fn collinear_away_from_camera_is_not_contact() {
        let r = rec([0.0, 0.0, 1000.0], [0.0, 0.0, 2000.0]);
        assert_eq!(ec_distance(&r).unwrap(), 0.0);
        assert_eq!(label_ec_mpii(&r, EC_THRESHOLD_MM).unwrap(), EcLabel::OFT);
    }

    #[test]
    fn lateral_offset_100mm() {
        let r = rec([100.0, 0.0, 1000.0], [100.0, 0.0, 0.0]);
        assert_eq!(ec_distance(&r).unwrap(), 100.0);
        let (bf, _) = brute_force(&r);
        assert!((bf - 100.0).abs() < 1e-6);
    }

    #[test]
    fn threshold_is_strict() {
        let near = rec([29.9, 0.0, 1000.0], [29.9, 0.0, 0.0]);
        let at = rec([30.0, 0.0, 1000.0], [30.0, 0.0, 0.0]);
        assert_eq!(label_ec_mpii(&near, 30.0).unwrap(), EcLabel::EC);
        assert_eq!(ec_distance(&at).unwrap(), 30.0);
        assert_eq!(label_ec_mpii(&at, 30.0).unwrap(), EcLabel::OFT);
    }

    #[test]
    fn literal_formula_degenerates_to_zero() {
        let r = rec([100.0, -40.0, 700.0], [-250.0, 90.0, 0.0]);
        assert!(ec_distance_literal(&r).unwrap() < 1e-9);
        assert!(ec_distance(&r).unwrap() > 1.0);
    }

    #[test]
    fn coincident_points_rejected() {
        assert!(Gaze3dRecord::new([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn columbia_grid() {
        assert_eq!(label_ec_columbia(0.0, 0.0), EcLabel::EC);
        assert_eq!(label_ec_columbia(0.0, 5.0), EcLabel::OFT);
        assert_eq!(label_ec_columbia(-10.0, 0.0), EcLabel::OFT);
    }

    fn arb_record() -> impl Strategy<Value = Gaze3dRecord> {
        (
            -300.0f64..300.0,
            -300.0f64..300.0,
            300.0f64..1200.0,
            -80.0f64..80.0,
            -80.0f64..80.0,
            -50.0f64..50.0,
        )
            .prop_map(|(fx, fy, fz, gx, gy, gz)| rec([fx, fy, fz], [gx, gy, gz]))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn matches_brute_force(r in arb_record()) {
            // grid step 0.05 bounds the brute-force overshoot by 0.025 mm
            let (bf, _) = brute_force(&r);
            prop_assert!((bf - ec_distance(&r).unwrap()).abs() < 0.03);
        }

        #[test]
        fn homogeneous_of_degree_one(r in arb_record(), s in 0.01f64..50.0) {
            let scaled = rec(scale(r.face_center, s), scale(r.gaze_target, s));
            let a = ec_distance(&scaled).unwrap();
            let b = s * ec_distance(&r).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * b.max(1.0));
        }

        #[test]
        fn threshold_monotone(r in arb_record(), t in 1.0f64..100.0, extra in 0.0f64..100.0) {
            if label_ec_mpii(&r, t).unwrap() == EcLabel::EC {
                prop_assert_eq!(label_ec_mpii(&r, t + extra).unwrap(), EcLabel::EC);
            }
        }
    }
}
