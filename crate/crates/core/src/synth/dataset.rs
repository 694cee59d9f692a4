use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::body::{generate_subject, pose_subject_with, BodyFrame, SubjectSpec, DEFAULT_VERTEX_COUNT};
use super::raytrace::render_gt;
use crate::error::{Error, Result};
use crate::geometry::{BodyPose, Camera, Vec3};
use crate::imaging::{Image, Mask};

pub const MANIFEST: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

/// Capture rig and clip length used by [`generate_captures`].
#[derive(Clone, Debug, PartialEq)]
pub struct CaptureConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub views: usize,
    pub vertex_count: usize,
    pub ring_radius: f64,
    pub camera_height: f64,
    /// Focal length as a multiple of the image width.
    pub focal_factor: f64,
}

impl Default for CaptureConfig {
    fn default() -> Self {
        CaptureConfig {
            width: 64,
            height: 64,
            frames: 30,
            views: 4,
            vertex_count: DEFAULT_VERTEX_COUNT,
            ring_radius: 3.0,
            camera_height: 1.0,
            focal_factor: 1.6,
        }
    }
}

pub const RING_TARGET: Vec3 = [0.0, 0.15, 0.0];

/// `count` cameras evenly spaced on a horizontal ring, all looking at the
/// middle of the body.
pub fn ring_cameras(cfg: &CaptureConfig) -> Result<Vec<Camera>> {
    (0..cfg.views)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / cfg.views as f64;
            let eye = [
                cfg.ring_radius * a.sin(),
                cfg.camera_height,
                cfg.ring_radius * a.cos(),
            ];
            Camera::look_at(
                eye,
                RING_TARGET,
                [0.0, 1.0, 0.0],
                cfg.focal_factor * cfg.width as f64,
                cfg.width,
                cfg.height,
            )
        })
        .collect()
}

/// Everything recorded for one performer.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectCapture {
    pub name: String,
    pub seed: u64,
    pub frames: Vec<BodyFrame>,
    /// Indexed `[view][t]`.
    pub images: Vec<Vec<Image>>,
    pub masks: Vec<Vec<Mask>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptureSet {
    pub cameras: Vec<Camera>,
    pub frames: usize,
    pub subjects: Vec<SubjectCapture>,
}

impl CaptureSet {
    pub fn width(&self) -> usize {
        self.cameras.first().map_or(0, |c| c.width)
    }

    pub fn height(&self) -> usize {
        self.cameras.first().map_or(0, |c| c.height)
    }

    pub fn subject(&self, name: &str) -> Result<&SubjectCapture> {
        self.subjects
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::invalid(format!("no subject named {name:?}")))
    }
}

pub fn subject_name(index: usize) -> String {
    format!("s{index:02}")
}

pub fn capture_subject(
    name: String,
    seed: u64,
    spec: &SubjectSpec,
    cameras: &[Camera],
    cfg: &CaptureConfig,
) -> SubjectCapture {
    let frames: Vec<BodyFrame> = (0..cfg.frames)
        .map(|t| pose_subject_with(spec, t, cfg.vertex_count))
        .collect();
    let rendered: Vec<Vec<(Image, Mask)>> = cameras
        .iter()
        .map(|cam| frames.iter().map(|f| render_gt(f, spec, cam)).collect())
        .collect();
    let (images, masks) = rendered
        .into_iter()
        .map(|per_view| per_view.into_iter().unzip())
        .unzip();
    SubjectCapture {
        name,
        seed,
        frames,
        images,
        masks,
    }
}

/// Per-subject seeds for a dataset generated from one `seed`.
pub fn subject_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.gen()).collect()
}

/// Generates one subject per seed on the default ring rig.
pub fn generate_captures(seeds: &[u64], cfg: &CaptureConfig) -> Result<CaptureSet> {
    if cfg.width % 2 != 0 || cfg.height % 2 != 0 {
        return Err(Error::invalid("image dimensions must be even"));
    }
    if cfg.frames == 0 || cfg.views == 0 {
        return Err(Error::invalid("need at least one frame and one view"));
    }
    let cameras = ring_cameras(cfg)?;
    let subjects = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| {
            capture_subject(subject_name(i), seed, &generate_subject(seed), &cameras, cfg)
        })
        .collect();
    Ok(CaptureSet {
        cameras,
        frames: cfg.frames,
        subjects,
    })
}

#[derive(Serialize, Deserialize)]
struct ManifestSubject {
    name: String,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    width: usize,
    height: usize,
    frames: usize,
    vertex_count: usize,
    cameras: Vec<Camera>,
    subjects: Vec<ManifestSubject>,
}

fn image_path(dir: &Path, kind: &str, subject: &str, view: usize, t: usize) -> PathBuf {
    dir.join(kind)
        .join(subject)
        .join(view.to_string())
        .join(format!("{t}.png"))
}

fn verts_path(dir: &Path, subject: &str, t: usize) -> PathBuf {
    dir.join("verts").join(subject).join(format!("{t}.bin"))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

pub fn encode_vertices(frame: &BodyFrame) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + frame.vertices.len() * 24 + 96);
    out.extend_from_slice(&(frame.vertices.len() as u32).to_le_bytes());
    for v in &frame.vertices {
        for c in v {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    for row in 0..3 {
        for col in 0..3 {
            out.extend_from_slice(&frame.pose.rotation[row][col].to_le_bytes());
        }
        out.extend_from_slice(&frame.pose.translation[row].to_le_bytes());
    }
    out
}

pub fn decode_vertices(bytes: &[u8], t: usize) -> Result<BodyFrame> {
    let corrupt = |what: &str| Error::Format(format!("vertex file for frame {t}: {what}"));
    let count = bytes
        .get(..4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
        .ok_or_else(|| corrupt("missing vertex count"))?;
    let expected = 4 + count * 24 + 96;
    if bytes.len() != expected {
        return Err(corrupt(&format!(
            "expected {expected} bytes for {count} vertices, found {}",
            bytes.len()
        )));
    }
    let mut vals = bytes[4..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut next = || vals.next().expect("length checked above");
    let vertices = (0..count).map(|_| [next(), next(), next()]).collect();
    let mut pose = BodyPose::identity();
    for row in 0..3 {
        for col in 0..3 {
            pose.rotation[row][col] = next();
        }
        pose.translation[row] = next();
    }
    Ok(BodyFrame {
        t,
        joint_angles: Vec::new(),
        vertices,
        pose,
        capsules: Vec::new(),
    })
}

pub fn write_dataset(captures: &CaptureSet, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        width: captures.width(),
        height: captures.height(),
        frames: captures.frames,
        vertex_count: captures
            .subjects
            .first()
            .and_then(|s| s.frames.first())
            .map_or(0, |f| f.vertices.len()),
        cameras: captures.cameras.clone(),
        subjects: captures
            .subjects
            .iter()
            .map(|s| ManifestSubject {
                name: s.name.clone(),
                seed: s.seed,
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;

    for s in &captures.subjects {
        create_dir(&dir.join("verts").join(&s.name))?;
        for f in &s.frames {
            let path = verts_path(dir, &s.name, f.t);
            fs::write(&path, encode_vertices(f))
                .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        }
        for view in 0..captures.cameras.len() {
            create_dir(&dir.join("img").join(&s.name).join(view.to_string()))?;
            create_dir(&dir.join("mask").join(&s.name).join(view.to_string()))?;
            for t in 0..captures.frames {
                s.images[view][t].save_png(&image_path(dir, "img", &s.name, view, t))?;
                s.masks[view][t].save_png(&image_path(dir, "mask", &s.name, view, t))?;
            }
        }
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<CaptureSet> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::io(format!("reading dataset manifest {}", path.display()), e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    for cam in &manifest.cameras {
        cam.validate()?;
        if cam.width != manifest.width || cam.height != manifest.height {
            return Err(Error::Format("camera resolution differs from manifest".into()));
        }
    }
    let subjects = manifest
        .subjects
        .iter()
        .map(|ms| read_subject(dir, ms, &manifest))
        .collect::<Result<Vec<_>>>()?;
    Ok(CaptureSet {
        cameras: manifest.cameras,
        frames: manifest.frames,
        subjects,
    })
}

fn read_subject(dir: &Path, ms: &ManifestSubject, manifest: &Manifest) -> Result<SubjectCapture> {
    let frames = (0..manifest.frames)
        .map(|t| {
            let path = verts_path(dir, &ms.name, t);
            let bytes =
                fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            let frame = decode_vertices(&bytes, t)?;
            if frame.vertices.len() != manifest.vertex_count {
                return Err(Error::Format(format!(
                    "{}: {} vertices, manifest says {}",
                    path.display(),
                    frame.vertices.len(),
                    manifest.vertex_count
                )));
            }
            Ok(frame)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut images = Vec::with_capacity(manifest.cameras.len());
    let mut masks = Vec::with_capacity(manifest.cameras.len());
    for view in 0..manifest.cameras.len() {
        let mut imgs = Vec::with_capacity(manifest.frames);
        let mut ms_ = Vec::with_capacity(manifest.frames);
        for t in 0..manifest.frames {
            let img = Image::load_png(&image_path(dir, "img", &ms.name, view, t))?;
            let mask = Mask::load_png(&image_path(dir, "mask", &ms.name, view, t))?;
            if (img.width, img.height) != (manifest.width, manifest.height)
                || (mask.width, mask.height) != (manifest.width, manifest.height)
            {
                return Err(Error::Format(format!(
                    "subject {} view {view} frame {t}: image size differs from manifest",
                    ms.name
                )));
            }
            imgs.push(img);
            ms_.push(mask);
        }
        images.push(imgs);
        masks.push(ms_);
    }
    Ok(SubjectCapture {
        name: ms.name.clone(),
        seed: ms.seed,
        frames,
        images,
        masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CaptureConfig {
        CaptureConfig {
            width: 16,
            height: 16,
            frames: 3,
            views: 3,
            ..CaptureConfig::default()
        }
    }

    #[test]
    fn ring_cameras_are_valid_and_face_the_body() {
        let cams = ring_cameras(&CaptureConfig::default()).unwrap();
        assert_eq!(cams.len(), 4);
        for c in &cams {
            let (p, depth) = c.project(RING_TARGET).unwrap();
            assert!(depth > 2.5);
            assert!((p[0] - 31.5).abs() < 1e-9 && (p[1] - 31.5).abs() < 1e-9);
        }
    }

    #[test]
    fn vertex_encoding_round_trips_bit_exactly() {
        let set = generate_captures(&[3], &small()).unwrap();
        let f = &set.subjects[0].frames[1];
        let back = decode_vertices(&encode_vertices(f), 1).unwrap();
        assert_eq!(back.vertices, f.vertices);
        assert_eq!(back.pose, f.pose);
        assert!(decode_vertices(&encode_vertices(f)[..50], 1).is_err());
    }

    #[test]
    fn odd_resolution_rejected() {
        let cfg = CaptureConfig {
            width: 15,
            ..small()
        };
        assert!(generate_captures(&[0], &cfg).is_err());
    }
}
