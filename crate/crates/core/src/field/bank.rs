use std::sync::Arc;

use crate::encoder::{bilinear_taps, Encoder};
use crate::error::{Error, Result};
use crate::geometry::{Camera, Vec3};
use crate::imaging::Image;
use crate::synth::{BodyFrame, SubjectCapture};
use crate::tensor::{ParamStore, Real, RowMap, Tape, Var};

/// Observations available for one query time: the input cameras, the body
/// fit at the query time (slot 0) and at each memory frame, and the images
/// of every input view at those times.
#[derive(Clone, Debug)]
pub struct FrameInputs<'a> {
    pub cameras: Vec<Camera>,
    pub frames: Vec<&'a BodyFrame>,
    /// `[view][slot]`.
    pub images: Vec<Vec<&'a Image>>,
}

/// Memory frame indices `t + offset`. With `clamp`, indices past either
/// end of the clip reuse the boundary frame; otherwise they are an error.
pub fn memory_frames(t: usize, offsets: &[isize], frames: usize, clamp: bool) -> Result<Vec<usize>> {
    if t >= frames {
        return Err(Error::invalid(format!("frame {t} outside clip of {frames}")));
    }
    offsets
        .iter()
        .map(|&o| {
            let m = t as isize + o;
            if (0..frames as isize).contains(&m) {
                Ok(m as usize)
            } else if clamp {
                Ok(m.clamp(0, frames as isize - 1) as usize)
            } else {
                Err(Error::invalid(format!(
                    "memory frame {m} (t={t}, offset {o}) outside clip of {frames}"
                )))
            }
        })
        .collect()
}

impl<'a> FrameInputs<'a> {
    pub fn new(
        cameras: Vec<Camera>,
        frames: Vec<&'a BodyFrame>,
        images: Vec<Vec<&'a Image>>,
    ) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::invalid("need at least one input view"));
        }
        if frames.is_empty() {
            return Err(Error::invalid("need the query frame"));
        }
        if images.len() != cameras.len() || images.iter().any(|v| v.len() != frames.len()) {
            return Err(Error::invalid("images must be given for every view and frame"));
        }
        let l = frames[0].vertices.len();
        if frames.iter().any(|f| f.vertices.len() != l) {
            return Err(Error::invalid("vertex count differs between frames"));
        }
        for (cam, imgs) in cameras.iter().zip(&images) {
            if imgs.iter().any(|im| im.width != cam.width || im.height != cam.height) {
                return Err(Error::invalid("image size differs from its camera"));
            }
        }
        Ok(FrameInputs {
            cameras,
            frames,
            images,
        })
    }

    /// Inputs for `subject` at time `t` with the given memory frames.
    pub fn from_subject(
        subject: &'a SubjectCapture,
        cameras: &[Camera],
        views: &[usize],
        t: usize,
        memory: &[usize],
    ) -> Result<Self> {
        let n = subject.frames.len();
        let slots: Vec<usize> = std::iter::once(t).chain(memory.iter().copied()).collect();
        if let Some(bad) = slots.iter().find(|&&s| s >= n) {
            return Err(Error::invalid(format!("frame {bad} outside clip of {n}")));
        }
        if let Some(bad) = views.iter().find(|&&v| v >= cameras.len()) {
            return Err(Error::invalid(format!("view {bad} does not exist")));
        }
        FrameInputs::new(
            views.iter().map(|&v| cameras[v].clone()).collect(),
            slots.iter().map(|&s| &subject.frames[s]).collect(),
            views
                .iter()
                .map(|&v| slots.iter().map(|&s| &subject.images[v][s]).collect())
                .collect(),
        )
    }

    pub fn views(&self) -> usize {
        self.cameras.len()
    }

    /// Query frame plus memory frames.
    pub fn slots(&self) -> usize {
        self.frames.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.frames[0].vertices.len()
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.cameras[0].width, self.cameras[0].height)
    }

    /// Images in encoder batch order `(view, slot)` for the first `slots`
    /// slots.
    pub fn batch(&self, slots: usize) -> Vec<&'a Image> {
        self.images
            .iter()
            .flat_map(|v| v[..slots].iter().copied())
            .collect()
    }
}

/// Taps of world point `x` seen by `cam` into image number `image` of an
/// encoded stack whose maps hold `sites` rows each.
fn point_taps<T: Real>(cam: &Camera, x: Vec3, image: usize, sites: usize) -> Option<Vec<(usize, T)>> {
    let (p, _) = cam.project(x).ok()?;
    let taps = bilinear_taps(p, cam.width, cam.height)?;
    Some(
        taps.iter()
            .filter(|t| t.1 > 0.0)
            .map(|&(s, w)| (image * sites + s, T::lit(w)))
            .collect(),
    )
}

/// Per-(view, vertex, slot) skeletal features.
#[derive(Clone, Debug)]
pub struct SkeletalBank {
    /// `[views·vertices·slots × d]`, view-major, then vertex, then slot
    /// (slot 0 is the query time).
    pub features: Var,
    /// False where the vertex projects behind the camera or off the image;
    /// such entries are zero.
    pub valid: Vec<bool>,
    pub views: usize,
    pub vertices: usize,
    pub slots: usize,
}

impl SkeletalBank {
    pub fn row(&self, view: usize, vertex: usize, slot: usize) -> usize {
        (view * self.vertices + vertex) * self.slots + slot
    }
}

/// Bank sampling map into an encoded stack laid out as [`FrameInputs::batch`]
/// with every slot encoded.
pub fn bank_map<T: Real>(inputs: &FrameInputs) -> (RowMap<T>, Vec<bool>) {
    let (w, h) = inputs.image_size();
    let sites = (w / 2) * (h / 2);
    let (views, l, slots) = (inputs.views(), inputs.vertex_count(), inputs.slots());
    let mut map = RowMap::with_capacity(views * slots * sites, views * l * slots, views * l * slots * 4);
    let mut valid = Vec::with_capacity(views * l * slots);
    for (v, cam) in inputs.cameras.iter().enumerate() {
        for i in 0..l {
            for (s, frame) in inputs.frames.iter().enumerate() {
                match point_taps(cam, frame.vertices[i], v * slots + s, sites) {
                    Some(taps) => {
                        map.push_row(taps);
                        valid.push(true);
                    }
                    None => {
                        map.push_empty();
                        valid.push(false);
                    }
                }
            }
        }
    }
    (map, valid)
}

/// Samples the bank from an already encoded stack (`[views·slots·sites × d]`).
pub fn gather_bank<T: Real>(tape: &mut Tape<T>, encoded: Var, inputs: &FrameInputs) -> Result<SkeletalBank> {
    let (map, valid) = bank_map(inputs);
    let features = tape.gather(encoded, Arc::new(map))?;
    Ok(SkeletalBank {
        features,
        valid,
        views: inputs.views(),
        vertices: inputs.vertex_count(),
        slots: inputs.slots(),
    })
}

/// Encodes every input image and samples it at the projected body vertices.
pub fn build_skeletal_bank<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    encoder: &Encoder,
    inputs: &FrameInputs,
) -> Result<SkeletalBank> {
    let encoded = encoder.encode(tape, store, &inputs.batch(inputs.slots()))?;
    gather_bank(tape, encoded, inputs)
}

/// Pixel-aligned sampling map for query points in every input view at the
/// query time. Rows are `(point, view)`; the stack holds `slots` encoded
/// images per view, of which slot 0 is used.
pub fn pixel_map<T: Real>(
    cameras: &[Camera],
    points: &[Vec3],
    slots: usize,
) -> (RowMap<T>, Vec<bool>) {
    let (w, h) = (cameras[0].width, cameras[0].height);
    let sites = (w / 2) * (h / 2);
    let views = cameras.len();
    let mut map = RowMap::with_capacity(views * slots * sites, points.len() * views, points.len() * views * 4);
    let mut valid = Vec::with_capacity(points.len() * views);
    for &x in points {
        for (v, cam) in cameras.iter().enumerate() {
            match point_taps(cam, x, v * slots, sites) {
                Some(taps) => {
                    map.push_row(taps);
                    valid.push(true);
                }
                None => {
                    map.push_empty();
                    valid.push(false);
                }
            }
        }
    }
    (map, valid)
}

/// Pixel-aligned features `[points·views × d]` of world points at the query
/// time, with per-(point, view) validity.
pub fn sample_query_pixel_features<T: Real>(
    tape: &mut Tape<T>,
    encoded: Var,
    inputs: &FrameInputs,
    slots_encoded: usize,
    points: &[Vec3],
) -> Result<(Var, Vec<bool>)> {
    let (map, valid) = pixel_map(&inputs.cameras, points, slots_encoded);
    Ok((tape.gather(encoded, Arc::new(map))?, valid))
}
