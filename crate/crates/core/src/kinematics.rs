//! Frames, twists and wrenches for a gripper holding a revolute door.
//!
//! Conventions used throughout the crate:
//!
//! * The door frame `{d}` has its origin on the hinge axis and its z-axis
//!   along the hinge. The door panel extends along `+y_d`.
//! * The gripper frame `{g}` sits at the grasp point `[0, r, z_dg]` in `{d}`,
//!   rotated by [`rotation_door_to_gripper`].
//! * Six-vectors are always laid out as `[linear(3), angular(3)]` for twists
//!   and `[force(3), torque(3)]` for wrenches.
//! * Angles are radians.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{Isometry3, Matrix3, Rotation3, Translation3, UnitQuaternion, Vector3};

use crate::error::{invalid, Result};

/// Largest grasp angle magnitude accepted before `tan`/`cos` become singular.
pub const MAX_GRASP_ANGLE: f64 = FRAC_PI_2 - 1e-3;

/// Named coordinate frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Frame {
    World,
    Door,
    Gripper,
}

/// Spatial velocity `[v; ω]` expressed in `frame`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
    pub frame: Frame,
}

impl Twist {
    pub fn new(linear: Vector3<f64>, angular: Vector3<f64>, frame: Frame) -> Self {
        Self {
            linear,
            angular,
            frame,
        }
    }

    pub fn zero(frame: Frame) -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros(), frame)
    }

    pub fn from_array(values: [f64; 6], frame: Frame) -> Self {
        Self::new(
            Vector3::new(values[0], values[1], values[2]),
            Vector3::new(values[3], values[4], values[5]),
            frame,
        )
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.linear.x,
            self.linear.y,
            self.linear.z,
            self.angular.x,
            self.angular.y,
            self.angular.z,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self::new(self.linear * factor, self.angular * factor, self.frame)
    }

    /// Re-express the twist in another frame given the rotation from the
    /// target frame to the current one (`R_target_current`).
    pub fn rotated(&self, rotation: &Matrix3<f64>, frame: Frame) -> Self {
        Self::new(rotation * self.linear, rotation * self.angular, frame)
    }
}

/// Force-torque pair `[F; τ]` expressed in `frame`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wrench {
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
    pub frame: Frame,
}

impl Wrench {
    pub fn new(force: Vector3<f64>, torque: Vector3<f64>, frame: Frame) -> Self {
        Self {
            force,
            torque,
            frame,
        }
    }

    pub fn zero(frame: Frame) -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros(), frame)
    }

    pub fn from_array(values: [f64; 6], frame: Frame) -> Self {
        Self::new(
            Vector3::new(values[0], values[1], values[2]),
            Vector3::new(values[3], values[4], values[5]),
            frame,
        )
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.force.x,
            self.force.y,
            self.force.z,
            self.torque.x,
            self.torque.y,
            self.torque.z,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn rotated(&self, rotation: &Matrix3<f64>, frame: Frame) -> Self {
        Self::new(rotation * self.force, rotation * self.torque, frame)
    }
}

/// Where the gripper holds the door and how fast the door should turn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraspGeometry {
    /// Distance from the gripper origin to the hinge axis (m).
    pub r: f64,
    /// Angle between `z_g` and `y_d` (rad).
    pub theta: f64,
    /// Grasp height along the hinge axis (m).
    pub z_dg: f64,
    /// Target door angular speed (rad/s, signed).
    pub omega: f64,
}

impl GraspGeometry {
    pub fn new(r: f64, theta: f64, z_dg: f64, omega: f64) -> Result<Self> {
        if !(r.is_finite() && r > 0.0) {
            return invalid(format!("grasp radius must be positive, got {r}"));
        }
        if !(theta.is_finite() && z_dg.is_finite() && omega.is_finite()) {
            return invalid("grasp geometry must be finite");
        }
        Ok(Self {
            r,
            theta,
            z_dg,
            omega,
        })
    }

    /// Grasp point in the door frame.
    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(0.0, self.r, self.z_dg)
    }
}

/// An orthonormal 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(pub Matrix3<f64>);

impl RotationMatrix {
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    /// `max |R Rᵀ − I|` over all entries.
    pub fn orthonormality_error(&self) -> f64 {
        (self.0 * self.0.transpose() - Matrix3::identity()).amax()
    }
}

/// Clamp a grasp angle away from ±π/2.
pub fn clamp_grasp_angle(theta: f64) -> f64 {
    theta.clamp(-MAX_GRASP_ANGLE, MAX_GRASP_ANGLE)
}

fn check_action(r: f64, theta: f64, omega: f64) -> Result<()> {
    if !(r.is_finite() && r > 0.0) {
        return invalid(format!("radius must be positive and finite, got {r}"));
    }
    if !(theta.is_finite() && theta.abs() < FRAC_PI_2) {
        return invalid(format!("grasp angle must satisfy |theta| < pi/2, got {theta}"));
    }
    if !omega.is_finite() {
        return invalid(format!("angular speed must be finite, got {omega}"));
    }
    Ok(())
}

/// Gripper-frame twist that turns the door at `omega` for a grasp at
/// radius `r` and angle `theta`: `ω·[r, 0, 0, 0, −cosθ, sinθ]`.
pub fn twist_from_action(r: f64, theta: f64, omega: f64) -> Result<Twist> {
    check_action(r, theta, omega)?;
    let (sin, cos) = theta.sin_cos();
    Ok(Twist::new(
        Vector3::new(omega * r, 0.0, 0.0),
        Vector3::new(0.0, -omega * cos, omega * sin),
        Frame::Gripper,
    ))
}

/// Orientation of the gripper frame expressed in the door frame (`R_dg`).
pub fn rotation_door_to_gripper(theta: f64) -> RotationMatrix {
    let (sin, cos) = theta.sin_cos();
    RotationMatrix(Matrix3::new(
        -1.0, 0.0, 0.0, //
        0.0, -sin, -cos, //
        0.0, -cos, sin,
    ))
}

/// Velocity of the grasp point in the door frame when the door turns at
/// `omega`: `ω_d × T_dg`.
pub fn door_frame_velocity(omega: f64, r: f64) -> Result<Twist> {
    if !(r.is_finite() && r > 0.0) {
        return invalid(format!("radius must be positive and finite, got {r}"));
    }
    if !omega.is_finite() {
        return invalid(format!("angular speed must be finite, got {omega}"));
    }
    let angular = Vector3::new(0.0, 0.0, omega);
    // The hinge-parallel component of T_dg does not contribute to ω × T_dg.
    let lever = Vector3::new(0.0, r, 0.0);
    Ok(Twist::new(angular.cross(&lever), angular, Frame::Door))
}

/// The same twist as [`twist_from_action`], assembled by rotating the
/// door-frame grasp velocity into the gripper frame.
pub fn transform_chain(r: f64, theta: f64, omega: f64) -> Result<Twist> {
    check_action(r, theta, omega)?;
    let door = door_frame_velocity(omega, r)?;
    let r_gd = rotation_door_to_gripper(theta).transpose();
    Ok(door.rotated(r_gd.matrix(), Frame::Gripper))
}

/// Gripper-frame wrench felt while the door is dragged ideally:
/// force `[F, 0, 0]`, torque `[0, −τ cosθ, τ sinθ]`.
pub fn ideal_wrench(theta: f64, force: f64, torque: f64) -> Result<Wrench> {
    if !(force.is_finite() && force > 0.0) {
        return invalid(format!("force magnitude must be positive, got {force}"));
    }
    if !(torque.is_finite() && torque > 0.0) {
        return invalid(format!("torque magnitude must be positive, got {torque}"));
    }
    if !theta.is_finite() {
        return invalid("grasp angle must be finite");
    }
    let (sin, cos) = theta.sin_cos();
    Ok(Wrench::new(
        Vector3::new(force, 0.0, 0.0),
        Vector3::new(0.0, -torque * cos, torque * sin),
        Frame::Gripper,
    ))
}

/// World placement of the hinge: origin on the axis, `z` along the axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoorMount {
    pub hinge_origin: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl DoorMount {
    pub fn hinge_axis(&self) -> Vector3<f64> {
        self.orientation * Vector3::z()
    }

    /// World pose of the door frame after turning by `door_angle`.
    pub fn door_pose(&self, door_angle: f64) -> Isometry3<f64> {
        let rotation =
            self.orientation * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), door_angle);
        Isometry3::from_parts(Translation3::from(self.hinge_origin), rotation)
    }
}

/// World pose of the gripper rigidly attached at `geometry` to a door
/// turned by `door_angle`.
pub fn gripper_pose_from_door(
    geometry: &GraspGeometry,
    mount: &DoorMount,
    door_angle: f64,
) -> Isometry3<f64> {
    let door = mount.door_pose(door_angle);
    let r_dg = rotation_door_to_gripper(geometry.theta);
    let local = Isometry3::from_parts(
        Translation3::from(geometry.translation()),
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r_dg.0)),
    );
    door * local
}

/// Distance from `point` to the line through `origin` along unit `axis`.
pub fn distance_to_axis(point: &Vector3<f64>, origin: &Vector3<f64>, axis: &Vector3<f64>) -> f64 {
    let offset = point - origin;
    (offset - axis * axis.dot(&offset)).norm()
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{FRAC_PI_4, PI};

    use approx::assert_abs_diff_eq;

    use super::*;

    fn assert_twist(t: &Twist, expected: [f64; 6]) {
        for (a, b) in t.to_array().iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn twist_at_zero_angle() {
        let t = twist_from_action(1.0, 0.0, 1.0).unwrap();
        assert_twist(&t, [1.0, 0.0, 0.0, 0.0, -1.0, 0.0]);
        assert_eq!(t.frame, Frame::Gripper);
    }

    #[test]
    fn twist_at_right_angle() {
        let t = twist_from_action(0.3, FRAC_PI_2 - 1e-15, -0.2);
        // |θ| < π/2 is strict; the closest representable angle still passes.
        let t = t.unwrap();
        assert_twist(&t, [-0.06, 0.0, 0.0, 0.0, 0.0, -0.2]);
    }

    #[test]
    fn twist_rejects_bad_arguments() {
        assert!(twist_from_action(0.0, 0.0, 1.0).is_err());
        assert!(twist_from_action(-1.0, 0.0, 1.0).is_err());
        assert!(twist_from_action(f64::NAN, 0.0, 1.0).is_err());
        assert!(twist_from_action(0.5, FRAC_PI_2, 1.0).is_err());
        assert!(twist_from_action(0.5, 0.1, f64::INFINITY).is_err());
    }

    #[test]
    fn twist_matches_chain_at_samples() {
        for (r, th, w) in [(0.4, 0.3, 0.25), (0.5, -0.3, 0.1), (1.0, 0.0, 1.0)] {
            let a = twist_from_action(r, th, w).unwrap();
            let b = transform_chain(r, th, w).unwrap();
            assert_twist(&a, b.to_array());
        }
    }

    #[test]
    fn rotation_examples() {
        let r0 = rotation_door_to_gripper(0.0);
        let expected = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, -1.0, 0.0);
        assert!((r0.0 - expected).amax() < 1e-15);
        let r90 = rotation_door_to_gripper(FRAC_PI_2);
        let expected = Matrix3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0);
        assert!((r90.0 - expected).amax() < 1e-15);
        for k in 0..100 {
            let th = -PI + 2.0 * PI * k as f64 / 99.0;
            assert!(rotation_door_to_gripper(th).orthonormality_error() < 1e-12);
        }
    }

    #[test]
    fn door_velocity_examples() {
        assert_twist(&door_frame_velocity(1.0, 1.0).unwrap(), [-1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_twist(&door_frame_velocity(0.0, 0.3).unwrap(), [0.0; 6]);
        assert_twist(
            &door_frame_velocity(-0.2, 0.4).unwrap(),
            [0.08, 0.0, 0.0, 0.0, 0.0, -0.2],
        );
        assert!(door_frame_velocity(1.0, 0.0).is_err());
    }

    #[test]
    fn ideal_wrench_examples() {
        let w = ideal_wrench(0.0, 10.0, 2.0).unwrap();
        assert_eq!(w.to_array(), [10.0, 0.0, 0.0, 0.0, -2.0, 0.0]);
        let w = ideal_wrench(FRAC_PI_4, 1.0, 1.0).unwrap();
        let h = 2f64.sqrt() / 2.0;
        assert_abs_diff_eq!(w.torque.y, -h, epsilon = 1e-15);
        assert_abs_diff_eq!(w.torque.z, h, epsilon = 1e-15);
        assert_abs_diff_eq!(w.torque.z / w.torque.y, -FRAC_PI_4.tan(), epsilon = 1e-15);
        assert!(ideal_wrench(0.1, 0.0, 1.0).is_err());
        assert!(ideal_wrench(0.1, 1.0, -1.0).is_err());
    }

    #[test]
    fn ideal_wrench_is_door_wrench_seen_from_gripper() {
        // Door-frame reaction [−F, 0, 0] / [0, 0, τ] rotated into {g}.
        let (th, f, tau) = (0.3, 5.0, 1.5);
        let r_gd = rotation_door_to_gripper(th).transpose();
        let door = Wrench::new(Vector3::new(-f, 0.0, 0.0), Vector3::new(0.0, 0.0, tau), Frame::Door);
        let via_rotation = door.rotated(r_gd.matrix(), Frame::Gripper);
        let direct = ideal_wrench(th, f, tau).unwrap();
        for (a, b) in via_rotation.to_array().iter().zip(direct.to_array()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn gripper_pose_at_rest_and_quarter_turn() {
        let g = GraspGeometry::new(0.4, 0.2, 0.1, -0.2).unwrap();
        let mount = DoorMount {
            hinge_origin: Vector3::new(0.5, 0.0, 0.3),
            orientation: UnitQuaternion::identity(),
        };
        let p0 = gripper_pose_from_door(&g, &mount, 0.0);
        assert!((p0.translation.vector - Vector3::new(0.5, 0.4, 0.4)).amax() < 1e-12);
        let p90 = gripper_pose_from_door(&g, &mount, FRAC_PI_2);
        assert!((p90.translation.vector - Vector3::new(0.1, 0.0, 0.4)).amax() < 1e-12);
        // The gripper's z-axis stays orthogonal to the door normal x_d.
        let door = mount.door_pose(0.0);
        let zg = p0.rotation * Vector3::z();
        assert_abs_diff_eq!(zg.dot(&(door.rotation * Vector3::x())), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn grasp_geometry_rejects_nonpositive_radius() {
        assert!(GraspGeometry::new(0.0, 0.0, 0.0, 0.1).is_err());
        assert!(GraspGeometry::new(0.2, f64::NAN, 0.0, 0.1).is_err());
    }
}
