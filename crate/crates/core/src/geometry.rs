//! Pinhole cameras, rays, bounding boxes and rigid body frames.
//!
//! Conventions: world→camera is `x_cam = R·x + t`, camera axes are
//! x right / y down / z forward, and pixel centers sit at integer
//! coordinates with the origin at the top-left pixel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

pub fn det(m: &Mat3) -> f64 {
    dot(m[0], cross(m[1], m[2]))
}

pub fn inverse(m: &Mat3) -> Option<Mat3> {
    let d = det(m);
    if d.abs() < 1e-300 {
        return None;
    }
    let c0 = cross(m[1], m[2]);
    let c1 = cross(m[2], m[0]);
    let c2 = cross(m[0], m[1]);
    // Columns of the inverse are the cofactor rows.
    Some(transpose(&[scale(c0, 1.0 / d), scale(c1, 1.0 / d), scale(c2, 1.0 / d)]))
}

/// Rotation by `angle` radians about a unit `axis` (Rodrigues).
pub fn axis_angle(axis: Vec3, angle: f64) -> Mat3 {
    let [x, y, z] = normalize(axis);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

pub fn is_rotation(m: &Mat3, tol: f64) -> bool {
    let mtm = mat_mul(&transpose(m), m);
    let ortho = (0..3).all(|i| (0..3).all(|j| (mtm[i][j] - IDENTITY[i][j]).abs() <= tol));
    ortho && (det(m) - 1.0).abs() <= tol
}

/// Pinhole camera with world→camera extrinsics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub k: Mat3,
    pub r: Mat3,
    pub t: Vec3,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(k: Mat3, r: Mat3, t: Vec3, width: usize, height: usize) -> Result<Self> {
        let cam = Camera {
            k,
            r,
            t,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !is_rotation(&self.r, 1e-6) {
            return Err(Error::invalid("camera rotation is not orthonormal"));
        }
        let k = &self.k;
        let upper = k[1][0] == 0.0 && k[2][0] == 0.0 && k[2][1] == 0.0 && k[2][2] == 1.0;
        if !upper || k[0][0] <= 0.0 || k[1][1] <= 0.0 {
            return Err(Error::invalid(
                "intrinsics must be upper-triangular with positive focal lengths",
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera image is empty"));
        }
        Ok(())
    }

    pub fn intrinsics(focal: f64, width: usize, height: usize) -> Mat3 {
        [
            [focal, 0.0, (width as f64 - 1.0) / 2.0],
            [0.0, focal, (height as f64 - 1.0) / 2.0],
            [0.0, 0.0, 1.0],
        ]
    }

    /// Camera at `eye` looking at `target` with world `up` pointing towards
    /// the top of the image.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = normalize(sub(target, eye));
        let up_perp = sub(up, scale(forward, dot(up, forward)));
        if norm(up_perp) < 1e-9 {
            return Err(Error::invalid("look_at: up is parallel to the view direction"));
        }
        let down = scale(normalize(up_perp), -1.0);
        let right = cross(down, forward);
        let r = [right, down, forward];
        let t = scale(mat_vec(&r, eye), -1.0);
        Camera::new(Camera::intrinsics(focal, width, height), r, t, width, height)
    }

    /// This camera carried around the vertical axis through `pivot` by
    /// `angle` radians (counter-clockwise seen from above).
    pub fn orbited(&self, pivot: Vec3, angle: f64) -> Result<Camera> {
        let q = axis_angle([0.0, 1.0, 0.0], angle);
        let center = add(pivot, mat_vec(&q, sub(self.center(), pivot)));
        let r = mat_mul(&self.r, &transpose(&q));
        let t = scale(mat_vec(&r, center), -1.0);
        Camera::new(self.k, r, t, self.width, self.height)
    }

    /// The same camera after the world is moved by `x ↦ Q·x + s`.
    pub fn after_world_motion(&self, q: &Mat3, s: Vec3) -> Result<Camera> {
        let r = mat_mul(&self.r, &transpose(q));
        let t = sub(self.t, mat_vec(&r, s));
        Camera::new(self.k, r, t, self.width, self.height)
    }

    /// Camera center `−Rᵀt` in world coordinates.
    pub fn center(&self) -> Vec3 {
        scale(mat_t_vec(&self.r, self.t), -1.0)
    }

    pub fn to_camera(&self, x: Vec3) -> Vec3 {
        add(mat_vec(&self.r, x), self.t)
    }

    /// Perspective projection to pixel coordinates plus camera depth.
    pub fn project(&self, x: Vec3) -> Result<([f64; 2], f64)> {
        let xc = self.to_camera(x);
        if xc[2] <= 1e-9 {
            return Err(Error::BehindCamera(xc[2]));
        }
        let h = mat_vec(&self.k, xc);
        Ok(([h[0] / h[2], h[1] / h[2]], xc[2]))
    }

    pub fn contains_pixel(&self, p: [f64; 2]) -> bool {
        p[0] >= -0.5
            && p[1] >= -0.5
            && p[0] <= self.width as f64 - 0.5
            && p[1] <= self.height as f64 - 0.5
    }

    /// Unit-direction ray through pixel `p` (bounds unset).
    pub fn generate_ray(&self, p: [f64; 2]) -> Result<Ray> {
        if !self.contains_pixel(p) {
            return Err(Error::OutOfBounds(p[0], p[1]));
        }
        let kinv = inverse(&self.k).ok_or_else(|| Error::invalid("singular intrinsics"))?;
        let dir_cam = mat_vec(&kinv, [p[0], p[1], 1.0]);
        Ok(Ray {
            origin: self.center(),
            dir: normalize(mat_t_vec(&self.r, dir_cam)),
            bounds: None,
        })
    }
}

pub fn project_point(cam: &Camera, x: Vec3) -> Result<([f64; 2], f64)> {
    cam.project(x)
}

pub fn generate_ray(cam: &Camera, p: [f64; 2]) -> Result<Ray> {
    cam.generate_ray(p)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    /// `(z_near, z_far)` once intersected with a volume.
    pub bounds: Option<(f64, f64)>,
}

impl Ray {
    pub fn at(&self, z: f64) -> Vec3 {
        add(self.origin, scale(self.dir, z))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if (0..3).any(|i| !(min[i] <= max[i])) {
            return Err(Error::invalid(format!("box min {min:?} exceeds max {max:?}")));
        }
        Ok(Aabb { min, max })
    }

    pub fn size(&self) -> Vec3 {
        sub(self.max, self.min)
    }

    pub fn center(&self) -> Vec3 {
        scale(add(self.min, self.max), 0.5)
    }

    pub fn contains(&self, p: Vec3, tol: f64) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] - tol && p[i] <= self.max[i] + tol)
    }

    /// Grows every side by `pad` on both ends.
    pub fn padded(&self, pad: f64) -> Aabb {
        Aabb {
            min: sub(self.min, [pad; 3]),
            max: add(self.max, [pad; 3]),
        }
    }
}

/// Tight box around `vertices`, each side scaled by `1 + margin` about
/// the center.
pub fn body_bbox(vertices: &[Vec3], margin: f64) -> Result<Aabb> {
    let first = vertices
        .first()
        .ok_or_else(|| Error::invalid("bounding box of an empty vertex set"))?;
    let (mut lo, mut hi) = (*first, *first);
    for v in vertices {
        for i in 0..3 {
            lo[i] = lo[i].min(v[i]);
            hi[i] = hi[i].max(v[i]);
        }
    }
    if margin == 0.0 {
        return Aabb::new(lo, hi);
    }
    let mut min = [0.0; 3];
    let mut max = [0.0; 3];
    for i in 0..3 {
        let c = 0.5 * (lo[i] + hi[i]);
        let half = 0.5 * (hi[i] - lo[i]) * (1.0 + margin);
        min[i] = c - half;
        max[i] = c + half;
    }
    Aabb::new(min, max)
}

pub const MIN_RAY_DEPTH: f64 = 1e-6;

/// Slab test. Returns entry/exit distances clamped to at least
/// [`MIN_RAY_DEPTH`], or `None` when the ray misses or the box lies behind.
pub fn ray_box_bounds(ray: &Ray, b: &Aabb) -> Option<(f64, f64)> {
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    for i in 0..3 {
        let (o, d) = (ray.origin[i], ray.dir[i]);
        if d == 0.0 {
            if o < b.min[i] || o > b.max[i] {
                return None;
            }
            continue;
        }
        let t1 = (b.min[i] - o) / d;
        let t2 = (b.max[i] - o) / d;
        t_enter = t_enter.max(t1.min(t2));
        t_exit = t_exit.min(t1.max(t2));
    }
    if t_exit < t_enter || t_exit < MIN_RAY_DEPTH {
        return None;
    }
    Some((t_enter.max(MIN_RAY_DEPTH), t_exit))
}

/// Rigid world→body-local transform `y = R·x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyPose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl BodyPose {
    pub fn identity() -> Self {
        BodyPose {
            rotation: IDENTITY,
            translation: [0.0; 3],
        }
    }

    pub fn world_to_body(&self, x: Vec3) -> Vec3 {
        add(mat_vec(&self.rotation, x), self.translation)
    }

    pub fn body_to_world(&self, y: Vec3) -> Vec3 {
        mat_t_vec(&self.rotation, sub(y, self.translation))
    }

    /// Pose after the world itself is moved by `x ↦ Q·x + s`.
    pub fn after_world_motion(&self, q: &Mat3, s: Vec3) -> BodyPose {
        // y = R·Qᵀ·(x' − s) + t
        let rotation = mat_mul(&self.rotation, &transpose(q));
        let translation = sub(self.translation, mat_vec(&rotation, s));
        BodyPose {
            rotation,
            translation,
        }
    }
}

pub fn world_to_body(pose: &BodyPose, x: Vec3) -> Vec3 {
    pose.world_to_body(x)
}

pub fn body_to_world(pose: &BodyPose, y: Vec3) -> Vec3 {
    pose.body_to_world(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn simple_cam() -> Camera {
        Camera::new(
            [[100.0, 0.0, 50.0], [0.0, 100.0, 50.0], [0.0, 0.0, 1.0]],
            IDENTITY,
            [0.0; 3],
            101,
            101,
        )
        .unwrap()
    }

    #[test]
    fn orbiting_matches_look_at_from_the_rotated_eye() {
        let target = [0.0, 0.2, 0.0];
        let at = |a: f64| {
            Camera::look_at([3.0 * a.sin(), 1.0, 3.0 * a.cos()], target, [0.0, 1.0, 0.0], 90.0, 64, 48)
                .unwrap()
        };
        let moved = at(0.3).orbited(target, 1.1).unwrap();
        let expect = at(1.4);
        for i in 0..3 {
            assert!((moved.t[i] - expect.t[i]).abs() < 1e-12);
            for j in 0..3 {
                assert!((moved.r[i][j] - expect.r[i][j]).abs() < 1e-12);
            }
        }
        assert_eq!(moved.k, expect.k);
    }

    #[test]
    fn moving_world_and_camera_together_keeps_projections() {
        let cam = Camera::look_at([2.0, 1.0, 3.0], [0.0; 3], [0.0, 1.0, 0.0], 60.0, 64, 64).unwrap();
        let q = axis_angle(normalize([1.0, 2.0, -0.5]), 0.7);
        let s = [0.3, -1.0, 2.0];
        let moved = cam.after_world_motion(&q, s).unwrap();
        for x in [[0.1, 0.2, -0.3], [0.0; 3], [-0.4, 0.5, 0.2]] {
            let (a, za) = cam.project(x).unwrap();
            let (b, zb) = moved.project(add(mat_vec(&q, x), s)).unwrap();
            assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
            assert!((za - zb).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_examples() {
        let cam = simple_cam();
        let (p, z) = cam.project([0.0, 0.0, 1.0]).unwrap();
        assert_eq!(p, [50.0, 50.0]);
        assert_eq!(z, 1.0);
        let (p, _) = cam.project([1.0, 0.0, 2.0]).unwrap();
        assert_eq!(p, [100.0, 50.0]);
        assert!(matches!(
            cam.project([0.0, 0.0, -1.0]),
            Err(Error::BehindCamera(_))
        ));
    }

    #[test]
    fn ray_examples() {
        let cam = simple_cam();
        let r = cam.generate_ray([50.0, 50.0]).unwrap();
        assert_eq!(r.dir, [0.0, 0.0, 1.0]);
        assert_eq!(r.origin, [0.0; 3]);
        assert!(cam.generate_ray([-3.0, 4.0]).is_err());
        for s in [0.5, 1.0, 3.0] {
            let p = [17.25, 80.5];
            let r = cam.generate_ray(p).unwrap();
            let (q, _) = cam.project(r.at(s)).unwrap();
            assert!((q[0] - p[0]).abs() < 1e-4 && (q[1] - p[1]).abs() < 1e-4);
        }
    }

    #[test]
    fn bbox_examples() {
        let b = body_bbox(&[[0.0; 3], [1.0; 3]], 0.025).unwrap();
        for i in 0..3 {
            assert!((b.min[i] + 0.0125).abs() < 1e-12);
            assert!((b.max[i] - 1.0125).abs() < 1e-12);
        }
        let b = body_bbox(&[[0.3, -1.0, 2.0]], 0.0).unwrap();
        assert_eq!(b.min, b.max);
        let pts = [[0.1, 0.5, -0.2], [0.7, -0.3, 0.4], [0.2, 0.2, 0.0]];
        let b = body_bbox(&pts, 0.0).unwrap();
        assert_eq!(b.min, [0.1, -0.3, -0.2]);
        assert_eq!(b.max, [0.7, 0.5, 0.4]);
        assert!(body_bbox(&[], 0.025).is_err());
    }

    #[test]
    fn slab_examples() {
        let unit = Aabb::new([0.0; 3], [1.0; 3]).unwrap();
        let r = Ray {
            origin: [-2.0, 0.5, 0.5],
            dir: [1.0, 0.0, 0.0],
            bounds: None,
        };
        assert_eq!(ray_box_bounds(&r, &unit), Some((2.0, 3.0)));
        let parallel = Ray {
            origin: [-2.0, 1.5, 0.5],
            dir: [1.0, 0.0, 0.0],
            bounds: None,
        };
        assert_eq!(ray_box_bounds(&parallel, &unit), None);
        let inside = Ray {
            origin: [0.5; 3],
            dir: [0.0, 1.0, 0.0],
            bounds: None,
        };
        assert_eq!(ray_box_bounds(&inside, &unit), Some((MIN_RAY_DEPTH, 0.5)));
        let behind = Ray {
            origin: [2.0, 0.5, 0.5],
            dir: [1.0, 0.0, 0.0],
            bounds: None,
        };
        assert_eq!(ray_box_bounds(&behind, &unit), None);
        let grazing = Ray {
            origin: [-1.0, 1.0, 0.5],
            dir: [1.0, 0.0, 0.0],
            bounds: None,
        };
        assert_eq!(ray_box_bounds(&grazing, &unit), Some((1.0, 2.0)));
    }

    #[test]
    fn pose_examples() {
        let x = [0.3, -1.2, 4.0];
        assert_eq!(BodyPose::identity().world_to_body(x), x);
        let shift = BodyPose {
            rotation: IDENTITY,
            translation: [1.0, 2.0, 3.0],
        };
        assert_eq!(shift.world_to_body(x), add(x, [1.0, 2.0, 3.0]));
    }

    fn arb_unit() -> impl Strategy<Value = Vec3> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
            .prop_filter("non-degenerate", |(a, b, c)| a * a + b * b + c * c > 0.01)
            .prop_map(|(a, b, c)| normalize([a, b, c]))
    }

    proptest! {
        #[test]
        fn random_cameras_round_trip(
            eye_dir in arb_unit(),
            dist in 2.0f64..6.0,
            focal in 40.0f64..200.0,
            px in 0.0f64..63.0,
            py in 0.0f64..47.0,
            s in 0.05f64..10.0,
        ) {
            prop_assume!(eye_dir[1].abs() < 0.95);
            let cam = Camera::look_at(scale(eye_dir, dist), [0.0; 3], [0.0, 1.0, 0.0], focal, 64, 48).unwrap();
            prop_assert!(is_rotation(&cam.r, 1e-9));
            let ray = cam.generate_ray([px, py]).unwrap();
            prop_assert!((norm(ray.dir) - 1.0).abs() < 1e-9);
            let (q, _) = cam.project(ray.at(s)).unwrap();
            prop_assert!((q[0] - px).abs() < 1e-4 && (q[1] - py).abs() < 1e-4);
        }

        #[test]
        fn slab_endpoints_lie_in_box(
            o in (-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0),
            d in arb_unit(),
            lo in (-1.0f64..0.0, -1.0f64..0.0, -1.0f64..0.0),
            ext in (0.01f64..2.0, 0.01f64..2.0, 0.01f64..2.0),
        ) {
            let b = Aabb::new([lo.0, lo.1, lo.2], [lo.0 + ext.0, lo.1 + ext.1, lo.2 + ext.2]).unwrap();
            let ray = Ray { origin: [o.0, o.1, o.2], dir: d, bounds: None };
            if let Some((near, far)) = ray_box_bounds(&ray, &b) {
                prop_assert!(near >= MIN_RAY_DEPTH && far >= near);
                // the clamped entry is inside when the origin is
                prop_assert!(b.contains(ray.at(near), 1e-7));
                prop_assert!(b.contains(ray.at(far), 1e-7));
            }
        }

        #[test]
        fn bbox_margin_scales_sides(
            pts in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0), 1..30),
            m in 0.0f64..0.5,
        ) {
            let v: Vec<Vec3> = pts.iter().map(|p| [p.0, p.1, p.2]).collect();
            let tight = body_bbox(&v, 0.0).unwrap();
            let grown = body_bbox(&v, m).unwrap();
            for i in 0..3 {
                prop_assert!((grown.size()[i] - (1.0 + m) * tight.size()[i]).abs() < 1e-9);
            }
        }

        #[test]
        fn pose_round_trip(axis in arb_unit(), angle in -3.2f64..3.2, t in (-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), x in (-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0)) {
            let pose = BodyPose { rotation: axis_angle(axis, angle), translation: [t.0, t.1, t.2] };
            let x = [x.0, x.1, x.2];
            let back = pose.body_to_world(pose.world_to_body(x));
            for i in 0..3 {
                prop_assert!((back[i] - x[i]).abs() < 1e-9);
            }
        }
    }
}
