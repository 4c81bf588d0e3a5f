//! On-disk corpus: a manifest plus per-slide PPM image, PGM label raster and
//! nucleus table.
//!
//! ```text
//! corpus/manifest.tsv            id  subtype  seed  image  records
//! corpus/slide_0000.ppm          P6, maxval 255
//! corpus/slide_0000.masks.pgm    P5, maxval 65535, little-endian samples
//! corpus/slide_0000.nuclei.tsv   id  class  cx  cy
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::synth::{NucleusClass, NucleusRecord, SlideRecord, Subtype};

pub const MANIFEST: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "id\tsubtype\tseed\timage\trecords";
const NUCLEI_HEADER: &str = "id\tclass\tcx\tcy";

fn corpus_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Corpus {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn slide_stem(id: u32) -> String {
    format!("slide_{id:04}")
}

pub fn encode_ppm(width: u32, height: u32, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn encode_pgm16(width: u32, height: u32, values: &[u16]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses a binary netpbm header; returns `(width, height, maxval, payload
/// offset)`.
fn parse_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<(u32, u32, u32, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(corpus_err(
            path,
            format!("expected {} header", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|b| *b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corpus_err(path, format!("malformed header at byte {start}")))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(corpus_err(path, format!("malformed header at byte {pos}")));
    }
    Ok((fields[0], fields[1], fields[2], pos + 1))
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<(u32, u32, Vec<u8>)> {
    let (w, h, max, off) = parse_header(bytes, b"P6", path)?;
    if max != 255 {
        return Err(corpus_err(path, format!("unsupported maxval {max}")));
    }
    let n = 3 * (w as usize) * (h as usize);
    if bytes.len() - off != n {
        return Err(corpus_err(
            path,
            format!("expected {n} payload bytes, found {}", bytes.len() - off),
        ));
    }
    Ok((w, h, bytes[off..].to_vec()))
}

pub fn decode_pgm16(bytes: &[u8], path: &Path) -> Result<(u32, u32, Vec<u16>)> {
    let (w, h, max, off) = parse_header(bytes, b"P5", path)?;
    if max != 65535 {
        return Err(corpus_err(path, format!("unsupported maxval {max}")));
    }
    let n = 2 * (w as usize) * (h as usize);
    if bytes.len() - off != n {
        return Err(corpus_err(
            path,
            format!("expected {n} payload bytes, found {}", bytes.len() - off),
        ));
    }
    let vals = bytes[off..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    Ok((w, h, vals))
}

fn encode_nuclei(nuclei: &[NucleusRecord]) -> String {
    let mut s = format!("{NUCLEI_HEADER}\n");
    for n in nuclei {
        s.push_str(&format!("{}\t{}\t{}\t{}\n", n.id, n.class, n.cx, n.cy));
    }
    s
}

fn decode_nuclei(text: &str, path: &Path) -> Result<Vec<NucleusRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(NUCLEI_HEADER) {
        return Err(corpus_err(path, "missing nucleus table header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || corpus_err(path, format!("malformed row {}", i + 2));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(NucleusRecord {
                id: f[0].parse().map_err(|_| bad())?,
                class: f[1].parse::<NucleusClass>().map_err(|_| bad())?,
                cx: f[2].parse().map_err(|_| bad())?,
                cy: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Writes `slides` under `dir`, creating it if needed.
pub fn write_corpus(dir: &Path, slides: &[SlideRecord]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    for s in slides {
        let stem = slide_stem(s.id);
        let image = format!("{stem}.ppm");
        let records = format!("{stem}.nuclei.tsv");
        write(&dir.join(&image), &encode_ppm(s.width, s.height, &s.image))?;
        write(
            &dir.join(format!("{stem}.masks.pgm")),
            &encode_pgm16(s.width, s.height, &s.labels),
        )?;
        write(&dir.join(&records), encode_nuclei(&s.nuclei).as_bytes())?;
        manifest.push_str(&format!("{}\t{}\t{}\t{image}\t{records}\n", s.id, s.subtype, s.seed));
    }
    write(&dir.join(MANIFEST), manifest.as_bytes())
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: u32,
    pub subtype: Subtype,
    pub seed: u64,
    pub image: PathBuf,
    pub records: PathBuf,
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let text = String::from_utf8(read(&path)?).map_err(|_| corpus_err(&path, "manifest is not UTF-8"))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(corpus_err(&path, "missing manifest header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || corpus_err(&path, format!("malformed row {}", i + 2));
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(ManifestEntry {
                id: f[0].parse().map_err(|_| bad())?,
                subtype: f[1].parse().map_err(|_| bad())?,
                seed: f[2].parse().map_err(|_| bad())?,
                image: dir.join(f[3]),
                records: dir.join(f[4]),
            })
        })
        .collect()
}

pub fn read_slide(dir: &Path, entry: &ManifestEntry) -> Result<SlideRecord> {
    let (width, height, image) = decode_ppm(&read(&entry.image)?, &entry.image)?;
    let mask_path = dir.join(format!("{}.masks.pgm", slide_stem(entry.id)));
    let (mw, mh, labels) = decode_pgm16(&read(&mask_path)?, &mask_path)?;
    if (mw, mh) != (width, height) {
        return Err(corpus_err(
            &mask_path,
            format!("mask is {mw}×{mh}, image is {width}×{height}"),
        ));
    }
    let text = String::from_utf8(read(&entry.records)?).map_err(|_| corpus_err(&entry.records, "not UTF-8"))?;
    let nuclei = decode_nuclei(&text, &entry.records)?;
    for n in &nuclei {
        if n.cx >= width || n.cy >= height || labels[(n.cy * width + n.cx) as usize] != n.id {
            return Err(corpus_err(
                &entry.records,
                format!("nucleus {} centre is not on its mask", n.id),
            ));
        }
    }
    Ok(SlideRecord {
        id: entry.id,
        subtype: entry.subtype,
        seed: entry.seed,
        width,
        height,
        image,
        labels,
        nuclei,
    })
}

/// Loads every slide listed in the manifest, in manifest order.
pub fn read_corpus(dir: &Path) -> Result<Vec<SlideRecord>> {
    let entries = read_manifest(dir)?;
    if entries.is_empty() {
        return Err(corpus_err(&dir.join(MANIFEST), "corpus has no slides"));
    }
    entries.iter().map(|e| read_slide(dir, e)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_corpus, SubtypeProfile};

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let slides = generate_corpus(&SubtypeProfile::default_set(), 3, 5, 128).unwrap();
        write_corpus(dir.path(), &slides).unwrap();
        assert_eq!(read_corpus(dir.path()).unwrap(), slides);
    }

    #[test]
    fn pgm_is_little_endian() {
        let b = encode_pgm16(2, 1, &[0x0102, 7]);
        let off = b.len() - 4;
        assert_eq!(&b[off..], &[0x02, 0x01, 7, 0]);
        assert_eq!(decode_pgm16(&b, Path::new("x")).unwrap().2, vec![0x0102, 7]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let b = b"P6\n# made by hand\n1 1\n255\n\x01\x02\x03";
        assert_eq!(decode_ppm(b, Path::new("x")).unwrap(), (1, 1, vec![1, 2, 3]));
    }

    #[test]
    fn truncated_image_is_rejected() {
        let mut b = encode_ppm(2, 2, &[0; 12]);
        b.pop();
        assert!(matches!(decode_ppm(&b, Path::new("x")), Err(Error::Corpus { .. })));
        assert!(decode_ppm(b"P5\n1 1\n255\n\0", Path::new("x")).is_err());
    }

    #[test]
    fn missing_manifest_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_corpus(dir.path()), Err(Error::Io { .. })));
    }
}
