//! Subtype × nucleus-class assignment degree: the inner product of mean
//! prototype assignments.

use crate::analysis::embed::{Embeddings, ViewTag};
use crate::error::{Error, Result};
use crate::prototypes::{mean_assignment, AssignmentVector, PrototypeSet, Temperature};
use crate::synth::{NucleusClass, Subtype};

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapTable {
    pub classes: Vec<NucleusClass>,
    pub subtypes: Vec<Subtype>,
    /// `cells[class][subtype]`.
    pub cells: Vec<Vec<f64>>,
}

impl HeatmapTable {
    pub fn get(&self, class: NucleusClass, subtype: Subtype) -> Option<f64> {
        let r = self.classes.iter().position(|c| *c == class)?;
        let c = self.subtypes.iter().position(|s| *s == subtype)?;
        Some(self.cells[r][c])
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("class");
        for t in &self.subtypes {
            s.push_str(&format!("\t{t}"));
        }
        s.push('\n');
        for (c, row) in self.classes.iter().zip(&self.cells) {
            s.push_str(c.name());
            for v in row {
                s.push_str(&format!("\t{v:.6}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Heatmap from already-grouped assignments. Every group must be
/// non-empty.
pub fn heatmap_from_groups(
    subtypes: &[(Subtype, Vec<AssignmentVector>)],
    classes: &[(NucleusClass, Vec<AssignmentVector>)],
) -> Result<HeatmapTable> {
    let empty: Vec<String> = subtypes
        .iter()
        .filter(|g| g.1.is_empty())
        .map(|g| g.0.to_string())
        .chain(classes.iter().filter(|g| g.1.is_empty()).map(|g| g.0.to_string()))
        .collect();
    if !empty.is_empty() {
        return Err(Error::invalid(format!("empty label groups: {}", empty.join(", "))));
    }
    let sub_means = subtypes
        .iter()
        .map(|(_, v)| mean_assignment(v.iter()))
        .collect::<Result<Vec<_>>>()?;
    let cls_means = classes
        .iter()
        .map(|(_, v)| mean_assignment(v.iter()))
        .collect::<Result<Vec<_>>>()?;
    Ok(HeatmapTable {
        classes: classes.iter().map(|g| g.0).collect(),
        subtypes: subtypes.iter().map(|g| g.0).collect(),
        cells: cls_means
            .iter()
            .map(|c| sub_means.iter().map(|s| c.dot(s)).collect())
            .collect(),
    })
}

/// Tissue views (every scale) grouped by slide subtype against nucleus
/// views grouped by class, assigned with temperature `tau`.
pub fn assignment_heatmap(emb: &Embeddings, protos: &PrototypeSet, tau: Temperature) -> Result<HeatmapTable> {
    if emb.dim != protos.dim() {
        return Err(Error::DimensionMismatch {
            what: "embedding vs prototype dimension".into(),
            expected: protos.dim(),
            found: emb.dim,
        });
    }
    let mut subtypes: Vec<(Subtype, Vec<AssignmentVector>)> = Subtype::ALL.iter().map(|s| (*s, Vec::new())).collect();
    let mut classes: Vec<(NucleusClass, Vec<AssignmentVector>)> =
        NucleusClass::ALL.iter().map(|c| (*c, Vec::new())).collect();
    for r in &emb.records {
        let p = protos.assign_slice(&r.coords_f64(), tau)?;
        match (r.tag, r.subtype, r.cell_class) {
            (ViewTag::Tissue(_), Some(s), _) => subtypes[s as usize].1.push(p),
            (ViewTag::Nucleus, _, Some(c)) => classes[c as usize].1.push(p),
            _ => {}
        }
    }
    heatmap_from_groups(&subtypes, &classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_gives_one_over_k() {
        let u = || vec![AssignmentVector::uniform(8); 3];
        let t = heatmap_from_groups(
            &[(Subtype::Fl, u()), (Subtype::Dlbcl, u())],
            &[(NucleusClass::Centroblast, u())],
        )
        .unwrap();
        for row in &t.cells {
            for v in row {
                assert!((v - 0.125).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn identical_one_hot_gives_one() {
        let h = || vec![AssignmentVector::one_hot(5, 2); 4];
        let t = heatmap_from_groups(&[(Subtype::Reactive, h())], &[(NucleusClass::Centrocyte, h())]).unwrap();
        assert_eq!(t.get(NucleusClass::Centrocyte, Subtype::Reactive), Some(1.0));
        assert!(t.to_tsv().starts_with("class\tS-Reactive\n"));
    }

    #[test]
    fn empty_group_is_named() {
        let err = heatmap_from_groups(
            &[(Subtype::Reactive, vec![AssignmentVector::uniform(2)])],
            &[(NucleusClass::CleavedLarge, vec![])],
        )
        .unwrap_err();
        assert!(err.to_string().contains("Cleaved-Large"));
    }
}
