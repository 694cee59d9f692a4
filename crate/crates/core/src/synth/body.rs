use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    add, axis_angle, mat_mul, mat_vec, normalize, scale, transpose, BodyPose, Mat3, Vec3,
    IDENTITY,
};

pub const BONE_COUNT: usize = 9;
pub const DEFAULT_VERTEX_COUNT: usize = 600;

const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;

/// One capsule of the articulated body. Geometry is expressed in the
/// parent's frame at rest; motion is a periodic swing about `swing_axis`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bone {
    pub name: String,
    pub parent: Option<usize>,
    /// Joint location relative to the parent's start, in the parent's frame.
    pub attach: Vec3,
    pub rest_dir: Vec3,
    pub length: f64,
    pub radius: f64,
    pub color: [f64; 3],
    /// Stripe period along the bone axis in meters; 0 disables stripes.
    pub stripe_period: f64,
    pub stripe_color: [f64; 3],
    pub swing_axis: Vec3,
    pub amplitude: f64,
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RootMotion {
    pub height: f64,
    pub yaw0: f64,
    pub yaw_amplitude: f64,
    pub sway: f64,
    pub frequency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub seed: u64,
    pub bones: Vec<Bone>,
    /// Joint angular frequency in radians per frame.
    pub frequency: f64,
    pub root: RootMotion,
}

impl SubjectSpec {
    pub fn without_motion(mut self) -> Self {
        for b in &mut self.bones {
            b.amplitude = 0.0;
        }
        self.root.yaw_amplitude = 0.0;
        self.root.sway = 0.0;
        self
    }

    /// Root bone's world rotation and translation at time `t`.
    pub fn root_transform(&self, t: usize) -> (Mat3, Vec3) {
        let phase = self.root.frequency * t as f64;
        let yaw = self.root.yaw0 + self.root.yaw_amplitude * phase.sin();
        let rot = axis_angle([0.0, 1.0, 0.0], yaw);
        let trans = [
            self.root.sway * phase.sin(),
            self.root.height,
            self.root.sway * (0.5 * phase).sin(),
        ];
        (rot, trans)
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        uniform(rng, 0.25, 0.95),
        uniform(rng, 0.25, 0.95),
        uniform(rng, 0.25, 0.95),
    ]
}

/// Deterministic nine-bone subject drawn from a ChaCha8 stream seeded with
/// `seed`: pelvis, spine, head, two upper arms, two forearms, two thighs.
pub fn generate_subject(seed: u64) -> SubjectSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let torso = color(&mut rng);
    let skin = [
        uniform(&mut rng, 0.55, 0.95),
        uniform(&mut rng, 0.4, 0.75),
        uniform(&mut rng, 0.3, 0.6),
    ];
    let sleeve = color(&mut rng);
    let legs = color(&mut rng);
    let stripe_a = color(&mut rng);
    let stripe_b = color(&mut rng);

    let hip = uniform(&mut rng, 0.24, 0.34);
    let spine_len = uniform(&mut rng, 0.42, 0.55);
    let shoulder = uniform(&mut rng, 0.17, 0.23);
    let upper_arm = uniform(&mut rng, 0.26, 0.32);
    let forearm = uniform(&mut rng, 0.22, 0.3);
    let thigh = uniform(&mut rng, 0.4, 0.5);
    let arm_r = uniform(&mut rng, 0.045, 0.06);
    let leg_r = uniform(&mut rng, 0.065, 0.085);
    let torso_r = uniform(&mut rng, 0.12, 0.16);
    let head_r = uniform(&mut rng, 0.09, 0.11);
    let arm_period = uniform(&mut rng, 0.06, 0.12);
    let leg_period = uniform(&mut rng, 0.08, 0.14);
    let spine_period = uniform(&mut rng, 0.1, 0.16);
    let frequency = uniform(&mut rng, 0.18, 0.3);

    let mut phase = || uniform(&mut rng, 0.0, std::f64::consts::TAU);
    let phases: Vec<f64> = (0..BONE_COUNT).map(|_| phase()).collect();
    let mut amp = |lo, hi| uniform(&mut rng, lo, hi);
    let amps = [
        0.0,
        amp(0.05, 0.15),
        amp(0.1, 0.3),
        amp(0.4, 0.8),
        amp(0.3, 0.7),
        amp(0.4, 0.8),
        amp(0.3, 0.7),
        amp(0.3, 0.6),
        amp(0.3, 0.6),
    ];
    let root = RootMotion {
        height: 0.0,
        yaw0: uniform(&mut rng, 0.0, std::f64::consts::TAU),
        yaw_amplitude: uniform(&mut rng, 0.2, 0.5),
        sway: uniform(&mut rng, 0.02, 0.08),
        frequency: uniform(&mut rng, 0.05, 0.12),
    };

    let down = normalize([0.0, -1.0, 0.0]);
    let bone = |name: &str,
                parent: Option<usize>,
                attach: Vec3,
                rest_dir: Vec3,
                length: f64,
                radius: f64,
                color: [f64; 3],
                stripe: (f64, [f64; 3]),
                swing_axis: Vec3,
                i: usize| Bone {
        name: name.to_string(),
        parent,
        attach,
        rest_dir: normalize(rest_dir),
        length,
        radius,
        color,
        stripe_period: stripe.0,
        stripe_color: stripe.1,
        swing_axis,
        amplitude: amps[i],
        phase: phases[i],
    };
    let x = [1.0, 0.0, 0.0];
    let z = [0.0, 0.0, 1.0];
    let bones = vec![
        bone("pelvis", None, [-hip / 2.0, 0.0, 0.0], x, hip, leg_r * 1.2, legs, (0.0, legs), x, 0),
        bone("spine", Some(0), [hip / 2.0, 0.05, 0.0], [0.0, 1.0, 0.0], spine_len, torso_r, torso, (spine_period, stripe_a), z, 1),
        bone(
            "head",
            Some(1),
            [0.0, spine_len + torso_r * 0.6 + head_r, 0.0],
            [0.0, 1.0, 0.0],
            head_r * 0.4,
            head_r,
            skin,
            (0.0, skin),
            x,
            2,
        ),
        bone("upper_arm_l", Some(1), [-shoulder, spine_len - 0.04, 0.0], [-0.35, -1.0, 0.0], upper_arm, arm_r, sleeve, (arm_period, stripe_b), x, 3),
        bone("forearm_l", Some(3), scale(normalize([-0.35, -1.0, 0.0]), upper_arm), down, forearm, arm_r * 0.85, skin, (arm_period, stripe_a), x, 4),
        bone("upper_arm_r", Some(1), [shoulder, spine_len - 0.04, 0.0], [0.35, -1.0, 0.0], upper_arm, arm_r, sleeve, (arm_period, stripe_b), x, 5),
        bone("forearm_r", Some(5), scale(normalize([0.35, -1.0, 0.0]), upper_arm), down, forearm, arm_r * 0.85, skin, (arm_period, stripe_a), x, 6),
        bone("thigh_l", Some(0), [0.0, 0.0, 0.0], [-0.1, -1.0, 0.0], thigh, leg_r, legs, (leg_period, stripe_b), x, 7),
        bone("thigh_r", Some(0), [hip, 0.0, 0.0], [0.1, -1.0, 0.0], thigh, leg_r, legs, (leg_period, stripe_b), x, 8),
    ];
    SubjectSpec {
        seed,
        bones,
        frequency,
        root,
    }
}

/// A posed capsule in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Capsule {
    pub start: Vec3,
    pub end: Vec3,
    pub radius: f64,
    pub bone: usize,
}

/// Posed body at one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct BodyFrame {
    pub t: usize,
    pub joint_angles: Vec<f64>,
    /// Surface samples in world coordinates.
    pub vertices: Vec<Vec3>,
    /// World → body-local transform of the root.
    pub pose: BodyPose,
    /// Posed capsules; empty when the frame was read back from disk.
    pub capsules: Vec<Capsule>,
}

impl BodyFrame {
    /// The frame after the world is moved by `x ↦ Q·x + s`.
    pub fn after_world_motion(&self, q: &Mat3, s: Vec3) -> BodyFrame {
        let mv = |x: Vec3| add(mat_vec(q, x), s);
        BodyFrame {
            t: self.t,
            joint_angles: self.joint_angles.clone(),
            vertices: self.vertices.iter().map(|&v| mv(v)).collect(),
            pose: self.pose.after_world_motion(q, s),
            capsules: self
                .capsules
                .iter()
                .map(|c| Capsule {
                    start: mv(c.start),
                    end: mv(c.end),
                    ..*c
                })
                .collect(),
        }
    }

    pub fn local_vertices(&self) -> Vec<Vec3> {
        self.vertices
            .iter()
            .map(|&v| self.pose.world_to_body(v))
            .collect()
    }
}

fn vertex_allocation(total: usize, bones: usize) -> Vec<usize> {
    if bones == 0 {
        return Vec::new();
    }
    let base = total / bones;
    let extra = total % bones;
    (0..bones).map(|b| base + usize::from(b < extra)).collect()
}

fn orthonormal_frame(axis: Vec3) -> (Vec3, Vec3) {
    let helper = if axis[0].abs() < 0.9 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let e1 = normalize(crate::geometry::cross(axis, helper));
    let e2 = crate::geometry::cross(axis, e1);
    (e1, e2)
}

/// Fixed spiral lattice of `n` points on a capsule surface.
fn capsule_lattice(c: &Capsule, n: usize) -> impl Iterator<Item = Vec3> + '_ {
    let seg = crate::geometry::sub(c.end, c.start);
    let len = crate::geometry::norm(seg);
    let axis = if len > 1e-12 {
        scale(seg, 1.0 / len)
    } else {
        [0.0, 1.0, 0.0]
    };
    let (e1, e2) = orthonormal_frame(axis);
    let r = c.radius;
    let span = len + 2.0 * r;
    (0..n).map(move |k| {
        let s = -r + span * (k as f64 + 0.5) / n as f64;
        let (along, radial) = if s < 0.0 {
            (s, (r * r - s * s).max(0.0).sqrt())
        } else if s > len {
            let u = s - len;
            (s, (r * r - u * u).max(0.0).sqrt())
        } else {
            (s, r)
        };
        let phi = GOLDEN_ANGLE * k as f64;
        let ring = add(scale(e1, phi.cos() * radial), scale(e2, phi.sin() * radial));
        add(add(c.start, scale(axis, along)), ring)
    })
}

/// Forward kinematics for `spec` at time `t` with `vertex_count` surface
/// samples.
pub fn pose_subject_with(spec: &SubjectSpec, t: usize, vertex_count: usize) -> BodyFrame {
    let (root_rot, root_trans) = spec.root_transform(t);
    let n = spec.bones.len();
    let mut rot: Vec<Mat3> = vec![IDENTITY; n];
    let mut start: Vec<Vec3> = vec![[0.0; 3]; n];
    let mut angles = Vec::with_capacity(n);
    let mut capsules = Vec::with_capacity(n);
    for (i, b) in spec.bones.iter().enumerate() {
        let angle = b.amplitude * (spec.frequency * t as f64 + b.phase).sin();
        angles.push(angle);
        let swing = axis_angle(b.swing_axis, angle);
        let (parent_rot, parent_start) = match b.parent {
            Some(p) => (rot[p], start[p]),
            None => (root_rot, root_trans),
        };
        start[i] = add(parent_start, mat_vec(&parent_rot, b.attach));
        rot[i] = mat_mul(&parent_rot, &swing);
        let end = add(start[i], scale(mat_vec(&rot[i], b.rest_dir), b.length));
        capsules.push(Capsule {
            start: start[i],
            end,
            radius: b.radius,
            bone: i,
        });
    }
    let vertices = capsules
        .iter()
        .zip(vertex_allocation(vertex_count, n))
        .flat_map(|(c, k)| capsule_lattice(c, k).collect::<Vec<_>>())
        .collect();
    let rt = transpose(&root_rot);
    let pose = BodyPose {
        rotation: rt,
        translation: scale(mat_vec(&rt, root_trans), -1.0),
    };
    BodyFrame {
        t,
        joint_angles: angles,
        vertices,
        pose,
        capsules,
    }
}

pub fn pose_subject(spec: &SubjectSpec, t: usize) -> BodyFrame {
    pose_subject_with(spec, t, DEFAULT_VERTEX_COUNT)
}
