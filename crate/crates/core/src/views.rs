//! Target/anchor view sampling and patch extraction.
//!
//! A target is a random crop at the largest scale. Each anchor is either a
//! crop at a strictly smaller scale inside the target rectangle, or a masked
//! nucleus patch whose rectangle also lies inside the target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::synth::{NucleusRecord, SlideRecord};

/// Target resamples tried before a nucleus anchor falls back to tissue.
pub const NUCLEUS_RETRIES: u32 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ViewBatchSpec {
    /// Crop sizes, strictly decreasing; `scales[0]` is the target scale.
    pub scales: Vec<u32>,
    /// Anchors per target (`M`).
    pub anchors: usize,
    pub nucleus_size: u32,
    /// Probability that an anchor is a nucleus view. The default gives the
    /// nucleus view the same weight as each smaller tissue scale.
    pub nucleus_fraction: f64,
}

impl Default for ViewBatchSpec {
    fn default() -> Self {
        Self {
            scales: vec![64, 32, 16],
            anchors: 4,
            nucleus_size: 16,
            nucleus_fraction: 1.0 / 3.0,
        }
    }
}

impl ViewBatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scales.len() < 2 {
            return Err(Error::config("at least two view scales are required"));
        }
        if self.scales.windows(2).any(|w| w[0] <= w[1]) || *self.scales.last().unwrap() == 0 {
            return Err(Error::config(format!(
                "scales {:?} must be strictly decreasing and positive",
                self.scales
            )));
        }
        if self.anchors == 0 {
            return Err(Error::config("anchors per target must be at least 1"));
        }
        if self.nucleus_size == 0 || self.nucleus_size > self.scales[0] {
            return Err(Error::config("nucleus view size must be in 1..=target scale"));
        }
        if !(0.0..=1.0).contains(&self.nucleus_fraction) {
            return Err(Error::config("nucleus_fraction must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn target_scale(&self) -> u32 {
        self.scales[0]
    }
}

/// Axis-aligned square in slide pixel coordinates; `x..x+size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x: i64,
    pub y: i64,
    pub size: u32,
}

impl Rect {
    pub fn contains(&self, other: &Rect) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.x + other.size as i64 <= self.x + self.size as i64
            && other.y + other.size as i64 <= self.y + self.size as i64
    }

    /// The `size × size` square whose centre pixel is `(cx, cy)`.
    pub fn centred(cx: u32, cy: u32, size: u32) -> Self {
        Rect {
            x: cx as i64 - (size / 2) as i64,
            y: cy as i64 - (size / 2) as i64,
            size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewKind {
    /// Index into [`ViewBatchSpec::scales`].
    Tissue(usize),
    /// Nucleus id within the slide.
    Nucleus(u16),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct View {
    pub kind: ViewKind,
    pub rect: Rect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewSample {
    pub target: View,
    pub anchors: Vec<View>,
}

fn random_crop(rng: &mut ChaCha8Rng, within: Rect, size: u32) -> Rect {
    let slack = (within.size - size) as i64;
    Rect {
        x: within.x + rng.random_range(0..=slack),
        y: within.y + rng.random_range(0..=slack),
        size,
    }
}

/// Samples one target and `spec.anchors` anchors from `slide`.
pub fn sample_views(slide: &SlideRecord, spec: &ViewBatchSpec, rng: &mut ChaCha8Rng) -> Result<ViewSample> {
    spec.validate()?;
    let ts = spec.target_scale();
    if ts > slide.width || ts > slide.height {
        return Err(Error::invalid(format!(
            "target scale {ts} does not fit in a {}×{} slide",
            slide.width, slide.height
        )));
    }
    let n_small = spec.scales.len() - 1;
    // Some(scale index) for tissue anchors, None for nucleus anchors.
    let plan: Vec<Option<usize>> = (0..spec.anchors)
        .map(|_| {
            if rng.random_bool(spec.nucleus_fraction) {
                None
            } else {
                Some(1 + rng.random_range(0..n_small as u32) as usize)
            }
        })
        .collect();
    let wants_nucleus = plan.iter().any(Option::is_none);
    let slide_rect = Rect {
        x: 0,
        y: 0,
        size: slide.width.min(slide.height),
    };

    let mut target = random_crop(rng, slide_rect, ts);
    let mut eligible = nuclei_inside(slide, target, spec.nucleus_size);
    let mut retries = 0;
    while wants_nucleus && eligible.is_empty() && retries < NUCLEUS_RETRIES {
        target = random_crop(rng, slide_rect, ts);
        eligible = nuclei_inside(slide, target, spec.nucleus_size);
        retries += 1;
    }

    let anchors = plan
        .into_iter()
        .map(|p| match p {
            None if !eligible.is_empty() => {
                let rec = eligible[rng.random_range(0..eligible.len() as u32) as usize];
                View {
                    kind: ViewKind::Nucleus(rec.id),
                    rect: Rect::centred(rec.cx, rec.cy, spec.nucleus_size),
                }
            }
            // fallback: the largest anchor scale
            p => {
                let s = p.unwrap_or(1);
                View {
                    kind: ViewKind::Tissue(s),
                    rect: random_crop(rng, target, spec.scales[s]),
                }
            }
        })
        .collect();
    Ok(ViewSample {
        target: View {
            kind: ViewKind::Tissue(0),
            rect: target,
        },
        anchors,
    })
}

/// Seeded convenience wrapper around [`sample_views`].
pub fn sample_views_seeded(slide: &SlideRecord, spec: &ViewBatchSpec, seed: u64) -> Result<ViewSample> {
    sample_views(slide, spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn nuclei_inside(slide: &SlideRecord, target: Rect, size: u32) -> Vec<NucleusRecord> {
    slide
        .nuclei
        .iter()
        .filter(|n| target.contains(&Rect::centred(n.cx, n.cy, size)))
        .copied()
        .collect()
}

/// Square RGB patch, interleaved, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patch {
    pub size: u32,
    pub data: Vec<u8>,
}

impl Patch {
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = 3 * (y * self.size + x) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// `[3, out, out]` tensor in `[0, 1]`, nearest-neighbour resampled.
    pub fn to_tensor(&self, out: usize) -> Tensor {
        let s = self.size as usize;
        let mut data = vec![0.0; 3 * out * out];
        for y in 0..out {
            let sy = y * s / out;
            for x in 0..out {
                let sx = x * s / out;
                let i = 3 * (sy * s + sx);
                for c in 0..3 {
                    data[c * out * out + y * out + x] = self.data[i + c] as f64 / 255.0;
                }
            }
        }
        Tensor::new(vec![3, out, out], data).expect("shape matches data")
    }
}

/// Pixels of `rect`; positions outside the slide are zero.
pub fn crop(slide: &SlideRecord, rect: Rect) -> Patch {
    let s = rect.size;
    let mut data = vec![0u8; 3 * (s * s) as usize];
    for py in 0..s {
        let y = rect.y + py as i64;
        if y < 0 || y >= slide.height as i64 {
            continue;
        }
        for px in 0..s {
            let x = rect.x + px as i64;
            if x < 0 || x >= slide.width as i64 {
                continue;
            }
            let i = 3 * (py * s + px) as usize;
            data[i..i + 3].copy_from_slice(&slide.pixel(x as u32, y as u32));
        }
    }
    Patch { size: s, data }
}

/// `size × size` patch centred on the nucleus; every pixel outside its mask
/// is zero.
pub fn nucleus_view(slide: &SlideRecord, rec: &NucleusRecord, size: u32) -> Result<Patch> {
    if rec.cx >= slide.width || rec.cy >= slide.height || slide.label(rec.cx, rec.cy) != rec.id {
        return Err(Error::invalid(format!(
            "nucleus {} does not belong to slide {}",
            rec.id, slide.id
        )));
    }
    let rect = Rect::centred(rec.cx, rec.cy, size);
    let mut patch = crop(slide, rect);
    for py in 0..size {
        for px in 0..size {
            let (x, y) = (rect.x + px as i64, rect.y + py as i64);
            let inside = x >= 0
                && y >= 0
                && x < slide.width as i64
                && y < slide.height as i64
                && slide.label(x as u32, y as u32) == rec.id;
            if !inside {
                let i = 3 * (py * size + px) as usize;
                patch.data[i..i + 3].fill(0);
            }
        }
    }
    Ok(patch)
}

/// The patch for `view`.
pub fn extract(slide: &SlideRecord, view: &View, nucleus_size: u32) -> Result<Patch> {
    match view.kind {
        ViewKind::Tissue(_) => Ok(crop(slide, view.rect)),
        ViewKind::Nucleus(id) => {
            let rec = slide
                .nuclei
                .iter()
                .find(|n| n.id == id)
                .ok_or_else(|| Error::invalid(format!("slide {} has no nucleus {id}", slide.id)))?;
            nucleus_view(slide, rec, nucleus_size)
        }
    }
}
