//! Bulk embedding export and the embeddings file.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::container::{Container, Section, EMBEDDINGS_MAGIC};
use crate::error::{Error, Result};
use crate::geometry::{distance_from_origin, Curvature};
use crate::synth::{NucleusClass, SlideRecord, Subtype};
use crate::training::Checkpoint;
use crate::views::{crop, nucleus_view, Rect};

/// Label value for "not applicable" in the `subtype` and `cell_class`
/// sections.
pub const NO_LABEL: u32 = u32::MAX;
/// Tissue crops per side of the per-scale grid.
pub const GRID: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ViewTag {
    /// Index into the checkpoint's scale list; `0` is the largest.
    Tissue(u32),
    Nucleus,
}

/// One embedded view.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub slide: u32,
    pub tag: ViewTag,
    pub subtype: Option<Subtype>,
    pub cell_class: Option<NucleusClass>,
    pub coords: Vec<f32>,
    pub pre: Vec<f32>,
}

impl EmbeddingRecord {
    pub fn coords_f64(&self) -> Vec<f64> {
        self.coords.iter().map(|x| *x as f64).collect()
    }

    /// `d_B(0, z)` on the unit ball.
    pub fn distance(&self) -> f64 {
        distance_from_origin(&self.coords_f64(), Curvature::unit())
    }
}

/// Embedded views plus the scale list that names the tissue tags.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub dim: usize,
    pub scales: Vec<u32>,
    pub records: Vec<EmbeddingRecord>,
}

impl Embeddings {
    pub fn kind_code(&self, tag: ViewTag) -> u32 {
        match tag {
            ViewTag::Tissue(i) => i,
            ViewTag::Nucleus => self.scales.len() as u32,
        }
    }

    pub fn kind_name(&self, tag: ViewTag) -> String {
        match tag {
            ViewTag::Tissue(i) => format!("tissue-{}", self.scales[i as usize]),
            ViewTag::Nucleus => "nucleus".into(),
        }
    }

    /// Every tag in code order.
    pub fn tags(&self) -> Vec<ViewTag> {
        (0..self.scales.len() as u32)
            .map(ViewTag::Tissue)
            .chain(std::iter::once(ViewTag::Nucleus))
            .collect()
    }

    fn tag_of(&self, code: u32) -> Result<ViewTag> {
        let n = self.scales.len() as u32;
        match code {
            c if c < n => Ok(ViewTag::Tissue(c)),
            c if c == n => Ok(ViewTag::Nucleus),
            c => Err(Error::invalid(format!("unknown view kind code {c}"))),
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let n = self.records.len() as u32;
        let d = self.dim as u32;
        let mut c = Container::new(EMBEDDINGS_MAGIC);
        c.push(Section::f32(
            "coords",
            vec![n, d],
            self.records.iter().flat_map(|r| r.coords.iter().copied()).collect(),
        )?)?;
        c.push(Section::f32(
            "pre",
            vec![n, d],
            self.records.iter().flat_map(|r| r.pre.iter().copied()).collect(),
        )?)?;
        c.push(Section::u32(
            "kind",
            vec![n],
            self.records.iter().map(|r| self.kind_code(r.tag)).collect(),
        )?)?;
        c.push(Section::u32(
            "subtype",
            vec![n],
            self.records
                .iter()
                .map(|r| r.subtype.map_or(NO_LABEL, Subtype::code))
                .collect(),
        )?)?;
        c.push(Section::u32(
            "cell_class",
            vec![n],
            self.records
                .iter()
                .map(|r| r.cell_class.map_or(NO_LABEL, NucleusClass::code))
                .collect(),
        )?)?;
        c.push(Section::u32(
            "slide",
            vec![n],
            self.records.iter().map(|r| r.slide).collect(),
        )?)?;
        c.push(Section::u32(
            "scales",
            vec![self.scales.len() as u32],
            self.scales.clone(),
        )?)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let (cd, coords) = c.f32s("coords")?;
        let (pd, pre) = c.f32s("pre")?;
        if cd.len() != 2 || pd != cd {
            return Err(Error::invalid(format!(
                "coords {cd:?} and pre {pd:?} must be equal N×d matrices"
            )));
        }
        let (n, d) = (cd[0] as usize, cd[1] as usize);
        let col = |name: &str| -> Result<Vec<u32>> {
            let (_, v) = c.u32s(name)?;
            if v.len() != n {
                return Err(Error::DimensionMismatch {
                    what: format!("`{name}` length"),
                    expected: n,
                    found: v.len(),
                });
            }
            Ok(v.to_vec())
        };
        let (kind, subtype, cell, slide) = (col("kind")?, col("subtype")?, col("cell_class")?, col("slide")?);
        let mut out = Self {
            dim: d,
            scales: c.u32s("scales")?.1.to_vec(),
            records: Vec::with_capacity(n),
        };
        fn label<T>(v: u32, i: usize, f: fn(u32) -> Option<T>) -> Result<Option<T>> {
            if v == NO_LABEL {
                Ok(None)
            } else {
                f(v).map(Some)
                    .ok_or_else(|| Error::invalid(format!("unknown label code {v} in record {i}")))
            }
        }
        for i in 0..n {
            out.records.push(EmbeddingRecord {
                slide: slide[i],
                tag: out.tag_of(kind[i])?,
                subtype: label(subtype[i], i, Subtype::from_code)?,
                cell_class: label(cell[i], i, NucleusClass::from_code)?,
                coords: coords[i * d..(i + 1) * d].to_vec(),
                pre: pre[i * d..(i + 1) * d].to_vec(),
            });
        }
        Ok(out)
    }

    /// Code table for the `kind`, `subtype` and `cell_class` columns.
    pub fn sidecar(&self) -> String {
        let mut s = String::from("column\tcode\tname\n");
        for t in self.tags() {
            s.push_str(&format!("kind\t{}\t{}\n", self.kind_code(t), self.kind_name(t)));
        }
        for t in Subtype::ALL {
            s.push_str(&format!("subtype\t{}\t{t}\n", t.code()));
        }
        for c in NucleusClass::ALL {
            s.push_str(&format!("cell_class\t{}\t{c}\n", c.code()));
        }
        s.push_str(&format!("subtype\t{NO_LABEL}\tnone\ncell_class\t{NO_LABEL}\tnone\n"));
        s
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".codes.tsv");
        PathBuf::from(p)
    }

    /// Writes the container and its code sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)?;
        let side = Self::sidecar_path(path);
        fs::write(&side, self.sidecar()).map_err(|e| Error::io(side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path, EMBEDDINGS_MAGIC)?)
    }

    pub fn of_tag(&self, tag: ViewTag) -> impl Iterator<Item = &EmbeddingRecord> {
        self.records.iter().filter(move |r| r.tag == tag)
    }
}

/// Tissue crops on a `GRID × GRID` lattice for every scale, then every
/// nucleus view, per slide in corpus order.
pub fn embed_dataset(ck: &Checkpoint, slides: &[SlideRecord]) -> Result<Embeddings> {
    let cfg = &ck.config;
    let scales = cfg.scales.clone();
    let input = cfg.input_size;
    let k = Curvature::new(cfg.kappa)?;
    let per_slide: Vec<Result<Vec<EmbeddingRecord>>> = slides
        .par_iter()
        .map(|slide| {
            let mut out = Vec::new();
            let embed = |patch: crate::views::Patch| -> Result<(Vec<f32>, Vec<f32>)> {
                let pre = ck.encoder.encode(&patch.to_tensor(input))?;
                let z = pre.to_ball(k);
                Ok((
                    z.coords().iter().map(|x| *x as f32).collect(),
                    pre.0.iter().map(|x| *x as f32).collect(),
                ))
            };
            for (si, &s) in scales.iter().enumerate() {
                if s > slide.width || s > slide.height {
                    return Err(Error::invalid(format!(
                        "scale {s} does not fit slide {} ({}×{})",
                        slide.id, slide.width, slide.height
                    )));
                }
                for gy in 0..GRID {
                    for gx in 0..GRID {
                        let rect = Rect {
                            x: (gx * (slide.width - s) / (GRID - 1)) as i64,
                            y: (gy * (slide.height - s) / (GRID - 1)) as i64,
                            size: s,
                        };
                        let (coords, pre) = embed(crop(slide, rect))?;
                        out.push(EmbeddingRecord {
                            slide: slide.id,
                            tag: ViewTag::Tissue(si as u32),
                            subtype: Some(slide.subtype),
                            cell_class: None,
                            coords,
                            pre,
                        });
                    }
                }
            }
            for rec in &slide.nuclei {
                let (coords, pre) = embed(nucleus_view(slide, rec, cfg.nucleus_size)?)?;
                out.push(EmbeddingRecord {
                    slide: slide.id,
                    tag: ViewTag::Nucleus,
                    subtype: Some(slide.subtype),
                    cell_class: Some(rec.class),
                    coords,
                    pre,
                });
            }
            Ok(out)
        })
        .collect();
    let mut records = Vec::new();
    for r in per_slide {
        records.extend(r?);
    }
    Ok(Embeddings {
        dim: cfg.dim,
        scales,
        records,
    })
}
