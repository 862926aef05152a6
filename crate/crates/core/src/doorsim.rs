//! A cabinet door on a revolute joint, dragged by a velocity-commanded
//! gripper.
//!
//! The door is a uniform rectangular panel turning about one vertical edge.
//! The gripper is kinematic: its pose integrates the commanded body twist
//! exactly (SE(3) exponential per substep). Gripper and door grasp frame are
//! tied by a six-axis linear spring-damper; the force-torque sensor reads
//! that coupling wrench, and the door receives its reaction. The door itself
//! is integrated with semi-implicit Euler under the coupling moment, hinge
//! damping and smoothed Coulomb friction.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{Isometry3, Matrix3, Translation3, UnitQuaternion, Vector3};

use crate::envdomain::EnvParams;
use crate::error::{invalid, Error, Result};
use crate::kinematics::{
    distance_to_axis, gripper_pose_from_door, DoorMount, Frame, GraspGeometry, Twist, Wrench,
};

/// Length of the state vector `s_t`: gripper-frame wrench then world twist.
pub const STATE_DIM: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    /// Control period (s). 100 Hz.
    pub control_dt: f64,
    /// Physics substeps per control step.
    pub substeps: usize,
    /// Episode cap in control steps.
    pub max_steps: usize,
    /// Coupling stiffness, translational (N/m).
    pub linear_stiffness: f64,
    /// Coupling stiffness, rotational (N·m/rad).
    pub angular_stiffness: f64,
    /// Coupling damping as a fraction of critical, relative to the door.
    pub damping_ratio: f64,
    /// An episode counts as a success once `|angle|` exceeds this (rad).
    pub success_angle: f64,
    /// Fully open: the episode ends here (rad).
    pub stop_angle: f64,
    /// Normal-load proxy multiplying the friction coefficient (N·m).
    pub friction_torque_scale: f64,
    /// Velocity scale of the `tanh` friction smoothing (rad/s).
    pub friction_smoothing: f64,
    /// Handle distance from the free edge of the door (m).
    pub handle_inset: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            control_dt: 0.01,
            substeps: 10,
            max_steps: 500,
            linear_stiffness: 5000.0,
            angular_stiffness: 50.0,
            damping_ratio: 1.0,
            success_angle: 45f64.to_radians(),
            stop_angle: 90f64.to_radians(),
            friction_torque_scale: 1.0,
            friction_smoothing: 1e-3,
            handle_inset: 0.06,
        }
    }
}

/// Rigid-body quantities derived from one [`EnvParams`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoorModel {
    pub mount: DoorMount,
    pub geometry: GraspGeometry,
    pub mass: f64,
    /// Moment of inertia about the hinge (kg·m²).
    pub inertia: f64,
    /// Torsional damping (N·m·s/rad).
    pub damping: f64,
    /// Coulomb friction torque amplitude (N·m).
    pub friction_torque: f64,
    pub linear_damping: f64,
    pub angular_damping: f64,
}

impl DoorModel {
    pub fn new(e: &EnvParams, config: &SimConfig) -> Result<Self> {
        e.validate()?;
        let mass = e.density * e.length * e.width * e.thickness;
        let inertia = panel_inertia(mass, e.width, e.thickness);
        let r = e.width - config.handle_inset + e.position_y;
        let z_dg = 0.5 * e.length + e.position_z;
        let geometry = GraspGeometry::new(r, e.theta_init, z_dg, e.target_speed)?;
        let mount = DoorMount {
            hinge_origin: Vector3::new(e.position_x, 0.0, e.height),
            orientation: e.orientation(),
        };
        let effective_mass = inertia / (r * r);
        let linear_damping =
            2.0 * config.damping_ratio * (config.linear_stiffness * effective_mass).sqrt();
        let angular_damping =
            2.0 * config.damping_ratio * (config.angular_stiffness * inertia).sqrt();
        Ok(Self {
            mount,
            geometry,
            mass,
            inertia,
            damping: e.damping,
            friction_torque: e.friction * config.friction_torque_scale,
            linear_damping,
            angular_damping,
        })
    }
}

/// Inertia of a thin rectangular panel about an edge axis through the middle
/// of its thickness.
pub fn panel_inertia(mass: f64, width: f64, thickness: f64) -> f64 {
    mass * (width * width / 3.0 + thickness * thickness / 12.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoorState {
    pub angle: f64,
    pub angular_velocity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GripperState {
    pub pose: Isometry3<f64>,
    /// Gripper twist in the world frame.
    pub twist: Twist,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    /// `[force(3), torque(3)]` in `{g}` followed by `[v(3), ω(3)]` in `{w}`.
    pub s: [f64; STATE_DIM],
    pub step_index: usize,
    /// Ground truth; never part of the policy input.
    pub door_angle: f64,
}

impl Observation {
    pub fn wrench(&self) -> Wrench {
        Wrench::from_array(self.s[..6].try_into().unwrap(), Frame::Gripper)
    }
}

/// Simulator-side quantities reported after every step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub door: DoorState,
    pub true_r: f64,
    pub true_theta: f64,
    pub kinetic_energy: f64,
    pub coupling_energy: f64,
    pub success: bool,
}

/// The wrench pair exchanged through the coupling, both in world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingWrench {
    pub on_gripper: Wrench,
    pub on_door: Wrench,
    /// Where the door-side wrench acts.
    pub door_point: Vector3<f64>,
}

#[derive(Debug, Clone)]
pub struct DoorSim {
    config: SimConfig,
    model: DoorModel,
    door: DoorState,
    gripper: GripperState,
    /// Commanded body twist currently applied.
    command: Twist,
    step_index: usize,
    done: bool,
}

impl DoorSim {
    /// Build a simulator already reset onto door `e`.
    pub fn new(config: SimConfig, e: &EnvParams) -> Result<Self> {
        let model = DoorModel::new(e, &config)?;
        let pose = gripper_pose_from_door(&model.geometry, &model.mount, 0.0);
        let mut sim = Self {
            config,
            model,
            door: DoorState {
                angle: 0.0,
                angular_velocity: 0.0,
            },
            gripper: GripperState {
                pose,
                twist: Twist::zero(Frame::World),
            },
            command: Twist::zero(Frame::Gripper),
            step_index: 0,
            done: false,
        };
        sim.reset(e)?;
        Ok(sim)
    }

    /// Put door `e` at rest, closed, with the gripper attached at its handle.
    pub fn reset(&mut self, e: &EnvParams) -> Result<Observation> {
        self.model = DoorModel::new(e, &self.config)?;
        self.door = DoorState {
            angle: 0.0,
            angular_velocity: 0.0,
        };
        self.gripper = GripperState {
            pose: gripper_pose_from_door(&self.model.geometry, &self.model.mount, 0.0),
            twist: Twist::zero(Frame::World),
        };
        self.command = Twist::zero(Frame::Gripper);
        self.step_index = 0;
        self.done = false;
        Ok(self.observation())
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn model(&self) -> &DoorModel {
        &self.model
    }

    pub fn door_state(&self) -> DoorState {
        self.door
    }

    pub fn gripper_state(&self) -> GripperState {
        self.gripper
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Advance one control period under a gripper-frame twist command.
    pub fn step(&mut self, action: &Twist) -> Result<(Observation, bool, StepInfo)> {
        if self.done {
            return Err(Error::EpisodeFinished);
        }
        if action.frame != Frame::Gripper {
            return invalid("commanded twist must be expressed in the gripper frame");
        }
        if !action.is_finite() {
            return invalid("commanded twist must be finite");
        }
        self.command = *action;
        let h = self.config.control_dt / self.config.substeps as f64;
        for _ in 0..self.config.substeps {
            self.gripper.pose *= body_twist_exp(action, h);
            self.integrate_door(h);
        }
        let rotation = self.gripper.pose.rotation;
        self.gripper.twist = Twist::new(
            rotation * action.linear,
            rotation * action.angular,
            Frame::World,
        );
        self.step_index += 1;
        let angle = self.door.angle;
        self.done = self.step_index >= self.config.max_steps || angle.abs() >= self.config.stop_angle;
        Ok((self.observation(), self.done, self.info()))
    }

    fn integrate_door(&mut self, h: f64) {
        let coupling = self.coupling();
        let axis = self.model.mount.hinge_axis();
        let lever = coupling.door_point - self.model.mount.hinge_origin;
        let moment = axis.dot(&(lever.cross(&coupling.on_door.force) + coupling.on_door.torque));
        let rate = self.door.angular_velocity;
        let s = self.config.friction_smoothing;
        let friction = self.model.friction_torque * (rate / s).tanh();
        let friction_slope = self.model.friction_torque / s * (1.0 - (rate / s).tanh().powi(2));
        // Linearly implicit Euler: light doors make the damping, friction and
        // coupling terms too stiff for an explicit update at this step size.
        let arm2 = axis.cross(&lever).norm_squared();
        let d_rate = -(self.model.linear_damping * arm2 + self.model.angular_damping);
        let d_angle = -(self.config.linear_stiffness * arm2 + self.config.angular_stiffness);
        let inertia = self.model.inertia;
        let next = (inertia * rate / h + moment - friction + (friction_slope - d_rate) * rate)
            / (inertia / h + self.model.damping + friction_slope - d_rate - h * d_angle);
        self.door.angular_velocity = next;
        self.door.angle += next * h;
    }

    /// World pose of the door-attached grasp frame plus its world velocity.
    fn grasp_frame(&self) -> (Isometry3<f64>, Vector3<f64>, Vector3<f64>) {
        let pose = gripper_pose_from_door(&self.model.geometry, &self.model.mount, self.door.angle);
        let omega = self.model.mount.hinge_axis() * self.door.angular_velocity;
        let velocity = omega.cross(&(pose.translation.vector - self.model.mount.hinge_origin));
        (pose, velocity, omega)
    }

    /// Current spring-damper wrench between gripper and door.
    pub fn coupling(&self) -> CouplingWrench {
        let (grasp, grasp_v, grasp_w) = self.grasp_frame();
        let cmd = self.command;
        let rotation = self.gripper.pose.rotation;
        let gripper_v = rotation * cmd.linear;
        let gripper_w = rotation * cmd.angular;
        let dp = self.gripper.pose.translation.vector - grasp.translation.vector;
        let dv = gripper_v - grasp_v;
        let rot_err = (rotation * grasp.rotation.inverse()).scaled_axis();
        let dw = gripper_w - grasp_w;
        let force = dp * self.config.linear_stiffness + dv * self.model.linear_damping;
        let torque = rot_err * self.config.angular_stiffness + dw * self.model.angular_damping;
        CouplingWrench {
            on_gripper: Wrench::new(-force, -torque, Frame::World),
            on_door: Wrench::new(force, torque, Frame::World),
            door_point: grasp.translation.vector,
        }
    }

    /// Force-torque sensor reading in the gripper frame.
    pub fn sensor_wrench(&self) -> Wrench {
        let r_gw: Matrix3<f64> = self.gripper.pose.rotation.inverse().to_rotation_matrix().into_inner();
        self.coupling().on_gripper.rotated(&r_gw, Frame::Gripper)
    }

    /// Current hinge radius and grasp angle of the gripper relative to the
    /// door frame.
    pub fn ground_truth(&self) -> (f64, f64) {
        let door = self.model.mount.door_pose(self.door.angle);
        let local = door.inverse() * self.gripper.pose;
        let t = local.translation.vector;
        let r = (t.x * t.x + t.y * t.y).sqrt();
        let z_local = local.rotation * Vector3::z();
        let theta = z_local.z.atan2(-z_local.y);
        (r, theta)
    }

    pub fn success(&self) -> bool {
        success(self.door.angle, &self.config)
    }

    pub fn kinetic_energy(&self) -> f64 {
        0.5 * self.model.inertia * self.door.angular_velocity.powi(2)
    }

    /// Potential energy stored in the coupling springs.
    pub fn coupling_energy(&self) -> f64 {
        let (grasp, _, _) = self.grasp_frame();
        let dp = self.gripper.pose.translation.vector - grasp.translation.vector;
        let rot_err = (self.gripper.pose.rotation * grasp.rotation.inverse()).scaled_axis();
        0.5 * self.config.linear_stiffness * dp.norm_squared()
            + 0.5 * self.config.angular_stiffness * rot_err.norm_squared()
    }

    /// Distance of the gripper origin from the hinge axis.
    pub fn gripper_hinge_distance(&self) -> f64 {
        distance_to_axis(
            &self.gripper.pose.translation.vector,
            &self.model.mount.hinge_origin,
            &self.model.mount.hinge_axis(),
        )
    }

    pub fn observation(&self) -> Observation {
        let mut s = [0.0; STATE_DIM];
        s[..6].copy_from_slice(&self.sensor_wrench().to_array());
        s[6..].copy_from_slice(&self.gripper.twist.to_array());
        Observation {
            s,
            step_index: self.step_index,
            door_angle: self.door.angle,
        }
    }

    fn info(&self) -> StepInfo {
        let (true_r, true_theta) = self.ground_truth();
        StepInfo {
            door: self.door,
            true_r,
            true_theta,
            kinetic_energy: self.kinetic_energy(),
            coupling_energy: self.coupling_energy(),
            success: self.success(),
        }
    }
}

/// Strictly beyond the success angle, in either turning direction.
pub fn success(door_angle: f64, config: &SimConfig) -> bool {
    door_angle.abs() > config.success_angle
}

/// SE(3) exponential of a constant body twist held for `dt`.
fn body_twist_exp(twist: &Twist, dt: f64) -> Isometry3<f64> {
    let phi = twist.angular * dt;
    let v = twist.linear * dt;
    let angle = phi.norm();
    let skew = phi.cross_matrix();
    let (a, b) = if angle < 1e-6 {
        let a2 = angle * angle;
        (0.5 - a2 / 24.0, 1.0 / 6.0 - a2 / 120.0)
    } else {
        (
            (1.0 - angle.cos()) / (angle * angle),
            (angle - angle.sin()) / (angle * angle * angle),
        )
    };
    let left_jacobian = Matrix3::identity() + skew * a + skew * skew * b;
    Isometry3::from_parts(
        Translation3::from(left_jacobian * v),
        UnitQuaternion::from_scaled_axis(phi),
    )
}

/// Wrap an angle into `[-π, π]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let wrapped = (angle + PI).rem_euclid(2.0 * PI) - PI;
    if wrapped == -PI {
        PI
    } else {
        wrapped
    }
}

/// One row of a trajectory log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub step: usize,
    pub door_angle: f64,
    pub s: [f64; STATE_DIM],
    pub action: Vec<f64>,
    pub reward: f64,
}

/// Per-step log written as `step,door_angle,s0..s11,a0..,reward`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryLog {
    pub rows: Vec<TrajectoryRow>,
}

impl TrajectoryLog {
    pub fn push(&mut self, row: TrajectoryRow) {
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let action_dim = self.rows.first().map_or(2, |r| r.action.len());
        let mut out = String::from("step,door_angle");
        for i in 0..STATE_DIM {
            write!(out, ",s{i}").unwrap();
        }
        for i in 0..action_dim {
            write!(out, ",a{i}").unwrap();
        }
        out.push_str(",reward\n");
        for row in &self.rows {
            write!(out, "{},{}", row.step, row.door_angle).unwrap();
            for v in row.s {
                write!(out, ",{v}").unwrap();
            }
            for v in &row.action {
                write!(out, ",{v}").unwrap();
            }
            writeln!(out, ",{}", row.reward).unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::envdomain::{mean_env, sample_env};
    use crate::kinematics::twist_from_action;

    fn ideal_action(sim: &DoorSim) -> Twist {
        let g = sim.model().geometry;
        twist_from_action(g.r, g.theta, g.omega).unwrap()
    }

    #[test]
    fn reset_is_at_rest() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let e = sample_env(&mut rng);
            let sim = DoorSim::new(SimConfig::default(), &e).unwrap();
            let obs = sim.observation();
            assert!(obs.s.iter().all(|v| v.abs() < 1e-9), "{:?}", obs.s);
            assert_eq!(sim.door_state().angular_velocity, 0.0);
            let (r, th) = sim.ground_truth();
            assert!((r - sim.model().geometry.r).abs() < 1e-12);
            assert!((th - e.theta_init).abs() < 1e-12, "{th} {}", e.theta_init);
        }
    }

    #[test]
    fn mean_door_inertia_matches_hand_formula() {
        let e = mean_env();
        let model = DoorModel::new(&e, &SimConfig::default()).unwrap();
        // 1650 kg/m³ · 0.30 · 0.525 · 0.02 m³ = 5.1975 kg
        let m = 5.1975;
        assert!((model.mass - m).abs() < 1e-12);
        let j = m * 0.525 * 0.525 / 3.0 + m * 0.02 * 0.02 / 12.0;
        assert!((model.inertia - j).abs() < 1e-12);
        assert!((model.inertia - 0.477_693_562_5).abs() < 1e-9);
    }

    #[test]
    fn zero_command_keeps_equilibrium() {
        let mut sim = DoorSim::new(SimConfig::default(), &mean_env()).unwrap();
        for _ in 0..100 {
            let (obs, _, _) = sim.step(&Twist::zero(Frame::Gripper)).unwrap();
            assert!(obs.door_angle.abs() < 1e-12);
            assert!(obs.s.iter().all(|v| v.abs() < 1e-9));
        }
    }

    #[test]
    fn step_after_done_fails() {
        let config = SimConfig {
            max_steps: 3,
            ..SimConfig::default()
        };
        let mut sim = DoorSim::new(config, &mean_env()).unwrap();
        let zero = Twist::zero(Frame::Gripper);
        for k in 0..3 {
            let (_, done, _) = sim.step(&zero).unwrap();
            assert_eq!(done, k == 2);
        }
        assert!(matches!(sim.step(&zero), Err(Error::EpisodeFinished)));
        sim.reset(&mean_env()).unwrap();
        assert!(sim.step(&zero).is_ok());
    }

    #[test]
    fn rejects_world_frame_command() {
        let mut sim = DoorSim::new(SimConfig::default(), &mean_env()).unwrap();
        assert!(sim.step(&Twist::zero(Frame::World)).is_err());
    }

    #[test]
    fn ideal_tracking_opens_mean_door() {
        let mut sim = DoorSim::new(SimConfig::default(), &mean_env()).unwrap();
        let action = ideal_action(&sim);
        let mut last = 0.0f64;
        let mut opened_at = None;
        let (r0, th0) = sim.ground_truth();
        loop {
            let (obs, done, info) = sim.step(&action).unwrap();
            assert!(obs.door_angle.abs() >= last.abs() - 1e-12, "non-monotone opening");
            last = obs.door_angle;
            if info.success && opened_at.is_none() {
                opened_at = Some(obs.step_index);
            }
            assert!((info.true_r - r0).abs() < 1e-3);
            assert!((info.true_theta - th0).abs() < 1e-3);
            if done {
                break;
            }
        }
        assert!(opened_at.unwrap() < 500);
    }

    #[test]
    fn static_pull_reads_spring_force() {
        let mut sim = DoorSim::new(SimConfig::default(), &mean_env()).unwrap();
        let dx = 1e-3;
        // Shift the gripper along its own x-axis with the door held still.
        sim.gripper.pose *= Isometry3::translation(dx, 0.0, 0.0);
        let w = sim.sensor_wrench();
        assert!((w.force.x + sim.config.linear_stiffness * dx).abs() < 1e-9);
        assert!(w.force.y.abs() < 1e-9 && w.force.z.abs() < 1e-9);
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
    }

    #[test]
    fn success_is_strict() {
        let c = SimConfig::default();
        assert!(success(46f64.to_radians(), &c));
        assert!(success(-46f64.to_radians(), &c));
        assert!(!success(45f64.to_radians(), &c));
        assert!(!success(0.0, &c));
    }

    #[test]
    fn body_twist_exp_traces_circle() {
        // Unit-speed rotation about z with tangential velocity r: a circle of
        // radius r about the point r·y.
        let t = Twist::new(Vector3::new(0.5, 0.0, 0.0), Vector3::new(0.0, 0.0, 1.0), Frame::Gripper);
        let mut pose = Isometry3::identity();
        for _ in 0..1000 {
            pose *= body_twist_exp(&t, 1e-3);
        }
        let centre = Vector3::new(0.0, 0.5, 0.0);
        assert!(((pose.translation.vector - centre).norm() - 0.5).abs() < 1e-12);
    }
}
