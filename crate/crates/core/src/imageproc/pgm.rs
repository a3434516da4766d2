//! Binary `P5` portable graymap reading and writing.
//!
//! Writes always use the canonical header `P5\n{w} {h}\n{maxval}\n`, so a
//! canonical file survives read then write byte for byte. 16-bit samples
//! are big-endian.

use std::fs;
use std::path::Path;

use super::{BinaryMask, GrayImage, ImageError, LabelMap, Result};

/// Raw samples of a graymap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PgmImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ImageError + '_ {
    move |source| ImageError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads the next whitespace-delimited header token, skipping `#` comments.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(ImageError::Header("header ends early".into()));
    }
    Ok(&bytes[start..*pos])
}

fn number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let t = token(bytes, pos)?;
    std::str::from_utf8(t)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ImageError::Header(format!("bad {what} {:?}", String::from_utf8_lossy(t))))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<PgmImage> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(ImageError::BadMagic);
    }
    match bytes[1] {
        b'5' => {}
        b'1'..=b'4' | b'6' | b'7' => {
            return Err(ImageError::Unsupported(
                String::from_utf8_lossy(&bytes[..2]).into_owned(),
            ))
        }
        _ => return Err(ImageError::BadMagic),
    }
    let mut pos = 2;
    let width = number(bytes, &mut pos, "width")?;
    let height = number(bytes, &mut pos, "height")?;
    let maxval = number(bytes, &mut pos, "maxval")?;
    if maxval == 0 {
        return Err(ImageError::ZeroMaxval);
    }
    if maxval > 65535 {
        return Err(ImageError::Header(format!("maxval {maxval} exceeds 65535")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(ImageError::Header("missing separator after maxval".into()));
    }
    pos += 1;
    let per = if maxval < 256 { 1 } else { 2 };
    let count = width
        .checked_mul(height)
        .ok_or_else(|| ImageError::Header("extents overflow".into()))?;
    let expected = count * per;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(ImageError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let samples: Vec<u16> = if per == 1 {
        payload[..expected].iter().map(|&b| b as u16).collect()
    } else {
        payload[..expected]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    if let Some(&s) = samples.iter().find(|&&s| s as usize > maxval) {
        return Err(ImageError::Header(format!("sample {s} exceeds maxval {maxval}")));
    }
    Ok(PgmImage {
        width,
        height,
        maxval: maxval as u16,
        samples,
    })
}

pub fn encode_pgm(img: &PgmImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", img.width, img.height, img.maxval).into_bytes();
    if img.maxval < 256 {
        out.extend(img.samples.iter().map(|&s| s as u8));
    } else {
        for s in &img.samples {
            out.extend_from_slice(&s.to_be_bytes());
        }
    }
    out
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<PgmImage> {
    let path = path.as_ref();
    decode_pgm(&fs::read(path).map_err(io_err(path))?)
}

pub fn write_pgm(path: impl AsRef<Path>, img: &PgmImage) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(img)).map_err(io_err(path))
}

impl From<&PgmImage> for GrayImage {
    fn from(p: &PgmImage) -> Self {
        let m = p.maxval as f32;
        GrayImage {
            width: p.width,
            height: p.height,
            maxval: p.maxval,
            values: p.samples.iter().map(|&s| s as f32 / m).collect(),
        }
    }
}

impl From<&GrayImage> for PgmImage {
    fn from(g: &GrayImage) -> Self {
        let m = g.maxval as f32;
        PgmImage {
            width: g.width,
            height: g.height,
            maxval: g.maxval,
            samples: g.values.iter().map(|v| (v * m).round() as u16).collect(),
        }
    }
}

impl TryFrom<&PgmImage> for BinaryMask {
    type Error = ImageError;

    /// 0 is a hole, `maxval` is valid; anything else is rejected.
    fn try_from(p: &PgmImage) -> Result<Self> {
        let mut valid = Vec::with_capacity(p.samples.len());
        for (index, &s) in p.samples.iter().enumerate() {
            if s == 0 {
                valid.push(false);
            } else if s == p.maxval {
                valid.push(true);
            } else {
                return Err(ImageError::NotBinary {
                    index,
                    value: s as u32,
                });
            }
        }
        BinaryMask::new(p.width, p.height, valid)
    }
}

impl From<&BinaryMask> for PgmImage {
    fn from(m: &BinaryMask) -> Self {
        PgmImage {
            width: m.width,
            height: m.height,
            maxval: 255,
            samples: m.valid.iter().map(|&v| if v { 255 } else { 0 }).collect(),
        }
    }
}

impl From<&LabelMap> for PgmImage {
    /// Labels are stored as raw sample values.
    fn from(l: &LabelMap) -> Self {
        PgmImage {
            width: l.width,
            height: l.height,
            maxval: 255,
            samples: l.labels.iter().map(|&v| v as u16).collect(),
        }
    }
}

pub fn read_gray(path: impl AsRef<Path>) -> Result<GrayImage> {
    Ok(GrayImage::from(&read_pgm(path)?))
}

pub fn write_gray(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    write_pgm(path, &PgmImage::from(img))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    BinaryMask::try_from(&read_pgm(path)?)
}

pub fn write_mask(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    write_pgm(path, &PgmImage::from(mask))
}

/// Reads raw sample values as labels in `0..=max_label`.
pub fn read_labels(path: impl AsRef<Path>, max_label: u8) -> Result<LabelMap> {
    let p = read_pgm(path)?;
    let mut labels = Vec::with_capacity(p.samples.len());
    for &s in &p.samples {
        if s > max_label as u16 {
            return Err(ImageError::Label {
                label: s.min(255) as u8,
                max: max_label,
            });
        }
        labels.push(s as u8);
    }
    LabelMap::new(p.width, p.height, max_label, labels)
}

pub fn write_labels(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    write_pgm(path, &PgmImage::from(labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(header: &str, payload: &[u8]) -> Vec<u8> {
        let mut v = header.as_bytes().to_vec();
        v.extend_from_slice(payload);
        v
    }

    #[test]
    fn scales_by_maxval() {
        let p = decode_pgm(&file("P5\n2 2\n255\n", &[0, 128, 255, 64])).unwrap();
        let g = GrayImage::from(&p);
        assert_eq!(g.values(), &[0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0]);
    }

    #[test]
    fn sixteen_bit_is_big_endian() {
        let p = decode_pgm(&file("P5 1 2 65535\n", &[0x01, 0x02, 0xff, 0xff])).unwrap();
        assert_eq!(p.samples, vec![0x0102, 0xffff]);
        let g = GrayImage::from(&p);
        assert_eq!(g.maxval(), 65535);
        assert_eq!(PgmImage::from(&g).samples, p.samples);
    }

    #[test]
    fn header_comments_are_skipped() {
        let p = decode_pgm(&file("P5\n# made by hand\n1 1\n# depth\n255\n", &[7])).unwrap();
        assert_eq!(p.samples, vec![7]);
    }

    #[test]
    fn canonical_bytes_round_trip() {
        let bytes = file("P5\n3 1\n255\n", &[1, 2, 3]);
        let g = GrayImage::from(&decode_pgm(&bytes).unwrap());
        assert_eq!(encode_pgm(&PgmImage::from(&g)), bytes);
    }

    #[test]
    fn errors_are_distinct() {
        assert!(matches!(decode_pgm(b"XY"), Err(ImageError::BadMagic)));
        assert!(matches!(
            decode_pgm(b"P2\n1 1\n255\n7\n"),
            Err(ImageError::Unsupported(_))
        ));
        assert!(matches!(
            decode_pgm(&file("P5\n2 2\n255\n", &[1, 2])),
            Err(ImageError::Truncated { expected: 4, found: 2 })
        ));
        assert!(matches!(
            decode_pgm(&file("P5\n1 1\n0\n", &[0])),
            Err(ImageError::ZeroMaxval)
        ));
        assert!(matches!(decode_pgm(b"P5\n1"), Err(ImageError::Header(_))));
    }

    #[test]
    fn masks_must_be_zero_or_maxval() {
        let ok = decode_pgm(&file("P5\n2 1\n255\n", &[0, 255])).unwrap();
        let m = BinaryMask::try_from(&ok).unwrap();
        assert_eq!(m.valid(), &[false, true]);
        assert_eq!(PgmImage::from(&m), ok);
        let bad = decode_pgm(&file("P5\n2 1\n255\n", &[0, 17])).unwrap();
        assert!(matches!(
            BinaryMask::try_from(&bad),
            Err(ImageError::NotBinary { index: 1, value: 17 })
        ));
    }
}
