//! Distribution of geodesic distance from the origin per view kind.

use crate::analysis::embed::{Embeddings, ViewTag};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KindHistogram {
    pub name: String,
    pub count: usize,
    pub mean_distance: f64,
    /// Percent of this kind's records per bin; sums to 100.
    pub percent: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadialHistogram {
    /// `bins + 1` edges spanning `[0, max distance]`.
    pub edges: Vec<f64>,
    pub kinds: Vec<KindHistogram>,
}

/// Bins `(kind name, distances)` groups on a shared axis. Groups without
/// members are omitted.
pub fn histogram(groups: &[(String, Vec<f64>)], bins: usize) -> Result<RadialHistogram> {
    if bins < 2 {
        return Err(Error::config(format!("need at least 2 bins, got {bins}")));
    }
    if groups.iter().all(|(_, d)| d.is_empty()) {
        return Err(Error::invalid("no records to bin"));
    }
    let max = groups.iter().flat_map(|(_, d)| d.iter()).fold(0.0f64, |a, b| a.max(*b));
    let edges = (0..=bins).map(|i| max * i as f64 / bins as f64).collect();
    let kinds = groups
        .iter()
        .filter(|(_, d)| !d.is_empty())
        .map(|(name, d)| {
            let mut counts = vec![0usize; bins];
            for x in d {
                let b = if max > 0.0 {
                    ((x / max) * bins as f64) as usize
                } else {
                    0
                };
                counts[b.min(bins - 1)] += 1;
            }
            KindHistogram {
                name: name.clone(),
                count: d.len(),
                mean_distance: d.iter().sum::<f64>() / d.len() as f64,
                percent: counts.iter().map(|c| 100.0 * *c as f64 / d.len() as f64).collect(),
            }
        })
        .collect();
    Ok(RadialHistogram { edges, kinds })
}

pub fn radial_histogram(emb: &Embeddings, bins: usize) -> Result<RadialHistogram> {
    let groups: Vec<(String, Vec<f64>)> = emb
        .tags()
        .into_iter()
        .map(|t| (emb.kind_name(t), emb.of_tag(t).map(|r| r.distance()).collect()))
        .collect();
    histogram(&groups, bins)
}

impl RadialHistogram {
    pub fn kind(&self, name: &str) -> Option<&KindHistogram> {
        self.kinds.iter().find(|k| k.name == name)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("bin\tlo\thi");
        for k in &self.kinds {
            s.push('\t');
            s.push_str(&k.name);
        }
        s.push('\n');
        for b in 0..self.edges.len() - 1 {
            s.push_str(&format!("{b}\t{:.6}\t{:.6}", self.edges[b], self.edges[b + 1]));
            for k in &self.kinds {
                s.push_str(&format!("\t{:.6}", k.percent[b]));
            }
            s.push('\n');
        }
        s
    }

    pub fn summary_tsv(&self) -> String {
        let mut s = String::from("kind\tcount\tmean_distance\n");
        for k in &self.kinds {
            s.push_str(&format!("{}\t{}\t{:.6}\n", k.name, k.count, k.mean_distance));
        }
        s
    }
}

/// Share of nucleus views within each fifth of all records ranked by
/// distance from the origin (innermost first).
pub fn nucleus_share_by_quintile(emb: &Embeddings) -> Result<[f64; 5]> {
    let mut ranked: Vec<(f64, bool)> = emb
        .records
        .iter()
        .map(|r| (r.distance(), r.tag == ViewTag::Nucleus))
        .collect();
    if ranked.len() < 5 {
        return Err(Error::invalid("need at least 5 records for quintiles"));
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = ranked.len();
    let mut out = [0.0; 5];
    for (q, share) in out.iter_mut().enumerate() {
        let group = &ranked[q * n / 5..(q + 1) * n / 5];
        *share = group.iter().filter(|r| r.1).count() as f64 / group.len() as f64;
    }
    Ok(out)
}
