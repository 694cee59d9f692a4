use rayon::prelude::*;

use super::body::{pose_subject_with, BodyFrame, Capsule, SubjectSpec};
use crate::geometry::{add, dot, normalize, scale, sub, Camera, Vec3};
use crate::imaging::{Image, Mask};

pub const AMBIENT: f64 = 0.3;
/// Direction towards the single directional light, world frame.
pub const LIGHT_DIR: Vec3 = [0.267_261_241_912_424_4, 0.801_783_725_737_273_2, 0.534_522_483_824_848_8];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub depth: f64,
    pub capsule: usize,
    pub point: Vec3,
}

fn sphere_entry(origin: Vec3, dir: Vec3, center: Vec3, r: f64) -> Option<f64> {
    let oc = sub(origin, center);
    let b = dot(dir, oc);
    let c = dot(oc, oc) - r * r;
    let h = b * b - c;
    if h < 0.0 {
        return None;
    }
    let t = -b - h.sqrt();
    (t > 0.0).then_some(t)
}

/// Entry depth of a unit-direction ray into a capsule, if any. The capsule
/// is the union of a finite cylinder and two end balls; the entry into a
/// union is the earliest entry into any part, and the cylinder's flat caps
/// lie inside the balls, so only the lateral surface needs testing.
pub fn ray_capsule(origin: Vec3, dir: Vec3, c: &Capsule) -> Option<f64> {
    let ba = sub(c.end, c.start);
    let oa = sub(origin, c.start);
    let baba = dot(ba, ba);
    let bard = dot(ba, dir);
    let baoa = dot(ba, oa);
    let rdoa = dot(dir, oa);
    let oaoa = dot(oa, oa);
    let mut best: Option<f64> = None;
    let mut take = |t: Option<f64>| {
        if let Some(t) = t {
            if best.is_none_or(|b| t < b) {
                best = Some(t);
            }
        }
    };
    let a = baba - bard * bard;
    if baba > 0.0 && a > 1e-12 * baba {
        let b = baba * rdoa - baoa * bard;
        let cc = baba * oaoa - baoa * baoa - c.radius * c.radius * baba;
        let h = b * b - a * cc;
        if h >= 0.0 {
            let t = (-b - h.sqrt()) / a;
            let y = baoa + t * bard;
            if t > 0.0 && y > 0.0 && y < baba {
                take(Some(t));
            }
        }
    }
    take(sphere_entry(origin, dir, c.start, c.radius));
    take(sphere_entry(origin, dir, c.end, c.radius));
    best
}

pub fn nearest_hit(origin: Vec3, dir: Vec3, capsules: &[Capsule]) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (i, c) in capsules.iter().enumerate() {
        if let Some(t) = ray_capsule(origin, dir, c) {
            if best.is_none_or(|b| t < b.depth) {
                best = Some(Hit {
                    depth: t,
                    capsule: i,
                    point: add(origin, scale(dir, t)),
                });
            }
        }
    }
    best
}

/// Shaded surface color at a hit: base albedo or stripe color by axial
/// position, Lambert term plus ambient.
pub fn surface_color(spec: &SubjectSpec, capsules: &[Capsule], hit: &Hit) -> [f64; 3] {
    let c = &capsules[hit.capsule];
    let bone = &spec.bones[c.bone];
    let axis = sub(c.end, c.start);
    let len2 = dot(axis, axis);
    let along = dot(sub(hit.point, c.start), axis);
    let s = if len2 > 0.0 {
        (along / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let normal = normalize(sub(hit.point, add(c.start, scale(axis, s))));
    let axial = if len2 > 0.0 { along / len2.sqrt() } else { 0.0 };
    let striped = bone.stripe_period > 0.0 && (axial / bone.stripe_period).floor() as i64 % 2 != 0;
    let albedo = if striped { bone.stripe_color } else { bone.color };
    let shade = AMBIENT + (1.0 - AMBIENT) * dot(normal, LIGHT_DIR).max(0.0);
    albedo.map(|a| a * shade)
}

/// Ground-truth image and exact foreground mask of `frame` seen from `cam`,
/// on a black background. Capsules are re-posed from `spec` when the frame
/// does not carry them.
pub fn render_gt(frame: &BodyFrame, spec: &SubjectSpec, cam: &Camera) -> (Image, Mask) {
    let posed;
    let capsules = if frame.capsules.len() == spec.bones.len() {
        &frame.capsules
    } else {
        posed = pose_subject_with(spec, frame.t, 0).capsules;
        &posed
    };
    let (w, h) = (cam.width, cam.height);
    let rows: Vec<(Vec<f32>, Vec<bool>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut rgb = vec![0.0f32; w * 3];
            let mut hits = vec![false; w];
            for x in 0..w {
                let ray = cam
                    .generate_ray([x as f64, y as f64])
                    .expect("pixel centers are inside the image");
                if let Some(hit) = nearest_hit(ray.origin, ray.dir, capsules) {
                    let col = surface_color(spec, capsules, &hit);
                    for ch in 0..3 {
                        rgb[x * 3 + ch] = col[ch] as f32;
                    }
                    hits[x] = true;
                }
            }
            (rgb, hits)
        })
        .collect();
    let mut image = Image::black(w, h);
    let mut mask = Mask::empty(w, h);
    for (y, (rgb, hits)) in rows.into_iter().enumerate() {
        image.data[y * w * 3..(y + 1) * w * 3].copy_from_slice(&rgb);
        mask.data[y * w..(y + 1) * w].copy_from_slice(&hits);
    }
    (image, mask)
}
