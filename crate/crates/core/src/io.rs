//! Image files, experiment configuration and training manifests.
//!
//! Intensities are mapped to `[0, 1]` on load. Output images default to
//! 16-bit to avoid quantising solver output.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bilevel::{TrainingPair, TrainingSet};
use crate::error::{Error, Result};
use crate::fidelity::{synthesize_noise, NoiseSpec};
use crate::grid::{Boundary, GridSpec, ImageGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImageFormat {
    /// Binary PGM (P5) with the given bit depth.
    Pgm { bits: u8 },
    /// ASCII PGM (P2).
    PgmAscii { bits: u8 },
    /// Grayscale PNG.
    Png { bits: u8 },
}

impl ImageFormat {
    /// 16-bit format chosen by file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref() {
            Some("pgm") => Ok(ImageFormat::Pgm { bits: 16 }),
            Some("png") => Ok(ImageFormat::Png { bits: 16 }),
            other => Err(Error::UnsupportedFormat(format!("extension {:?}", other.unwrap_or("")))),
        }
    }

    fn bits(self) -> u8 {
        match self {
            ImageFormat::Pgm { bits } | ImageFormat::PgmAscii { bits } | ImageFormat::Png { bits } => bits,
        }
    }
}

/// Loads a grayscale image on a Neumann grid with the default mesh size.
pub fn load_image(path: &Path) -> Result<ImageGrid> {
    load_image_on(path, Boundary::Neumann, None)
}

/// Loads a grayscale image with explicit grid metadata.
pub fn load_image_on(path: &Path, boundary: Boundary, h: Option<f64>) -> Result<ImageGrid> {
    let bytes = fs::read(path)?;
    let (w, ht, values) = if bytes.starts_with(b"P2") || bytes.starts_with(b"P5") {
        decode_pgm(&bytes)?
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(&bytes)?
    } else {
        return Err(Error::UnsupportedFormat(format!("{}: not a PGM or PNG file", path.display())));
    };
    let mut spec = GridSpec::new(w, ht, boundary);
    if let Some(h) = h {
        spec = spec.with_h(h);
    }
    ImageGrid::new(spec, values)
}

/// Cursor over PGM header tokens, skipping whitespace and `#` comments.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn token(&mut self) -> Result<&str> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => self.pos += 1,
                Some(_) => break,
                None => return Err(Error::CorruptHeader("unexpected end of file".into())),
            }
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|c| !c.is_ascii_whitespace()) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| Error::CorruptHeader("non-ASCII header".into()))
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.token()?.parse().map_err(|_| Error::CorruptHeader(format!("bad {what}")))
    }
}

fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let mut hd = Header { bytes, pos: 0 };
    let magic = hd.token()?.to_string();
    let w = hd.number("width")?;
    let h = hd.number("height")?;
    let maxval = hd.number("maxval")?;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::CorruptHeader(format!("width {w}, height {h}, maxval {maxval}")));
    }
    let n = w.checked_mul(h).ok_or_else(|| Error::CorruptHeader("image too large".into()))?;
    let scale = 1.0 / maxval as f64;
    let mut values = Vec::with_capacity(n);
    if magic == "P2" {
        for _ in 0..n {
            let v = hd.number("sample")?;
            if v > maxval {
                return Err(Error::CorruptHeader(format!("sample {v} exceeds maxval {maxval}")));
            }
            values.push(v as f64 * scale);
        }
    } else {
        // Exactly one whitespace byte separates the header from the raster.
        let start = hd.pos + 1;
        let bps = if maxval > 255 { 2 } else { 1 };
        let data = bytes
            .get(start..start + n * bps)
            .ok_or_else(|| Error::CorruptHeader(format!("raster truncated ({} of {} bytes)", bytes.len().saturating_sub(start), n * bps)))?;
        for k in 0..n {
            let v = if bps == 2 { u16::from_be_bytes([data[2 * k], data[2 * k + 1]]) as usize } else { data[k] as usize };
            if v > maxval {
                return Err(Error::CorruptHeader(format!("sample {v} exceeds maxval {maxval}")));
            }
            values.push(v as f64 * scale);
        }
    }
    Ok((w, h, values))
}

fn decode_png(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| Error::CorruptHeader(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::CorruptHeader(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let depth = match info.bit_depth {
        png::BitDepth::Eight => 8,
        png::BitDepth::Sixteen => 16,
        d => return Err(Error::UnsupportedFormat(format!("PNG bit depth {d:?}"))),
    };
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::UnsupportedFormat(format!("PNG color type {:?}", info.color_type)));
    }
    let data = &buf[..info.buffer_size()];
    let values = if depth == 16 {
        data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0).collect()
    } else {
        data.iter().map(|&v| v as f64 / 255.0).collect()
    };
    Ok((w, h, values))
}

fn quantize(grid: &ImageGrid, bits: u8) -> Result<Vec<u16>> {
    let max = match bits {
        8 => 255.0,
        16 => 65535.0,
        b => return Err(Error::UnsupportedFormat(format!("{b}-bit output"))),
    };
    Ok(grid.values.iter().map(|&v| (v.clamp(0.0, 1.0) * max).round() as u16).collect())
}

/// Saves in the 16-bit format implied by the extension.
pub fn save_image(grid: &ImageGrid, path: &Path) -> Result<()> {
    save_image_as(grid, path, ImageFormat::from_path(path)?)
}

/// Values are clamped to `[0, 1]` and rounded.
pub fn save_image_as(grid: &ImageGrid, path: &Path, format: ImageFormat) -> Result<()> {
    let q = quantize(grid, format.bits())?;
    let (w, h) = (grid.width(), grid.height());
    let maxval = if format.bits() == 8 { 255 } else { 65535 };
    let mut out = BufWriter::new(fs::File::create(path)?);
    match format {
        ImageFormat::Pgm { bits } => {
            write!(out, "P5\n{w} {h}\n{maxval}\n")?;
            let raster: Vec<u8> = if bits == 8 { q.iter().map(|&v| v as u8).collect() } else { q.iter().flat_map(|v| v.to_be_bytes()).collect() };
            out.write_all(&raster)?;
        }
        ImageFormat::PgmAscii { .. } => {
            write!(out, "P2\n{w} {h}\n{maxval}\n")?;
            for row in q.chunks(w) {
                let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                writeln!(out, "{}", line.join(" "))?;
            }
        }
        ImageFormat::Png { bits } => {
            let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(if bits == 8 { png::BitDepth::Eight } else { png::BitDepth::Sixteen });
            let mut wr = enc.write_header().map_err(|e| Error::Io(std::io::Error::other(e)))?;
            let raster: Vec<u8> = if bits == 8 { q.iter().map(|&v| v as u8).collect() } else { q.iter().flat_map(|v| v.to_be_bytes()).collect() };
            wr.write_image_data(&raster).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Parses flat `key = value` text. Blank lines and `#` comments are ignored;
/// keys may not repeat.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", no + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Like [`parse_key_values`] but rejects repeated keys.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (k, v) in parse_key_values(text)? {
        if map.insert(k.clone(), v).is_some() {
            return Err(Error::Config(format!("key {k} given twice")));
        }
    }
    Ok(map)
}

pub fn load_config(path: &Path) -> Result<BTreeMap<String, String>> {
    parse_config(&fs::read_to_string(path)?)
}

/// Noise descriptor `kind:value[+kind:value...]`, e.g. `impulse:0.05+gaussian:0.005`.
/// The Gaussian value is the variance.
pub fn parse_noise(desc: &str) -> Result<NoiseSpec> {
    let stages: Vec<NoiseSpec> = desc
        .split('+')
        .map(|s| {
            let (kind, val) = s.trim().split_once(':').ok_or_else(|| Error::Config(format!("noise stage {s:?}: expected kind:value")))?;
            let v: f64 = val.trim().parse().map_err(|_| Error::Config(format!("noise stage {s:?}: bad number")))?;
            let spec = match kind.trim() {
                "gaussian" => NoiseSpec::Gaussian { variance: v },
                "poisson" => NoiseSpec::Poisson { peak: v },
                "impulse" => NoiseSpec::Impulse { density: v },
                k => return Err(Error::Config(format!("unknown noise kind {k}"))),
            };
            spec.validate()?;
            Ok(spec)
        })
        .collect::<Result<_>>()?;
    Ok(if stages.len() == 1 { stages.into_iter().next().expect("one stage") } else { NoiseSpec::Composite { stages } })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NoisySource {
    File(PathBuf),
    Synthetic { noise: String, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clean: PathBuf,
    pub noisy: NoisySource,
}

/// Training database description.
///
/// ```text
/// boundary = neumann
/// h = 0.015625                      # optional
/// pair = clean0.pgm noisy0.pgm
/// pair = clean1.pgm noise=gaussian:0.02 seed=3
/// ```
///
/// Relative paths are resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub boundary: Boundary,
    pub h: Option<f64>,
}

pub fn parse_boundary(s: &str) -> Result<Boundary> {
    match s {
        "neumann" => Ok(Boundary::Neumann),
        "dirichlet" | "dirichlet0" => Ok(Boundary::Dirichlet0),
        b => Err(Error::Config(format!("unknown boundary {b}"))),
    }
}

impl DatasetManifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut m = DatasetManifest { entries: Vec::new(), boundary: Boundary::Neumann, h: None };
        for (k, v) in parse_key_values(text)? {
            match k.as_str() {
                "boundary" => m.boundary = parse_boundary(&v)?,
                "h" => m.h = Some(v.parse().map_err(|_| Error::Config(format!("bad h {v}")))?),
                "pair" => {
                    let parts: Vec<&str> = v.split_whitespace().collect();
                    let clean = base.join(parts.first().ok_or_else(|| Error::Config("pair without paths".into()))?);
                    let noisy = match &parts[1..] {
                        [p] if !p.contains('=') => NoisySource::File(base.join(p)),
                        rest => {
                            let mut noise = None;
                            let mut seed = 0;
                            for t in rest {
                                match t.split_once('=') {
                                    Some(("noise", d)) => noise = Some(d.to_string()),
                                    Some(("seed", s)) => seed = s.parse().map_err(|_| Error::Config(format!("bad seed {s}")))?,
                                    _ => return Err(Error::Config(format!("bad pair field {t}"))),
                                }
                            }
                            let noise = noise.ok_or_else(|| Error::Config("pair needs a noisy path or noise=".into()))?;
                            parse_noise(&noise)?;
                            NoisySource::Synthetic { noise, seed }
                        }
                    };
                    m.entries.push(ManifestEntry { clean, noisy });
                }
                other => return Err(Error::Config(format!("unknown manifest key {other}"))),
            }
        }
        if m.entries.is_empty() {
            return Err(Error::Config("manifest lists no pairs".into()));
        }
        Ok(m)
    }

    pub fn load_file(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&fs::read_to_string(path)?, base)
    }

    /// Reads every image and synthesises noisy data where requested.
    pub fn load(&self) -> Result<TrainingSet> {
        let mut pairs = Vec::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            let f0 = load_image_on(&e.clean, self.boundary, self.h)?;
            let f = match &e.noisy {
                NoisySource::File(p) => load_image_on(p, self.boundary, self.h)?,
                NoisySource::Synthetic { noise, seed } => synthesize_noise(&f0, &parse_noise(noise)?, *seed)?,
            };
            if !f.spec.same_shape(&f0.spec) {
                return Err(Error::DimensionMismatch { expected: (f0.width(), f0.height()), found: (f.width(), f.height()) });
            }
            pairs.push(TrainingPair { f0, f, id: i.to_string() });
        }
        TrainingSet::new(pairs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tmp(name: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("varilearn-io-{}", std::process::id()));
        fs::create_dir_all(&d).unwrap();
        d.join(name)
    }

    fn random(w: usize, h: usize, seed: u64) -> ImageGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageGrid::from_fn(GridSpec::new(w, h, Boundary::Neumann), |_, _| rng.random::<f64>())
    }

    #[test]
    fn sixteen_bit_roundtrip_is_within_quantisation() {
        let g = random(13, 7, 1);
        for (name, fmt) in [("a.pgm", ImageFormat::Pgm { bits: 16 }), ("a.png", ImageFormat::Png { bits: 16 }), ("b.pgm", ImageFormat::PgmAscii { bits: 16 })] {
            let p = tmp(name);
            save_image_as(&g, &p, fmt).unwrap();
            let back = load_image(&p).unwrap();
            assert_eq!((back.width(), back.height()), (13, 7));
            assert!(back.max_abs_diff(&g) <= 0.5 / 65535.0 + 1e-15, "{name}");
        }
    }

    #[test]
    fn ascii_and_binary_encodings_agree() {
        let g = random(9, 11, 2);
        for bits in [8, 16] {
            let a = tmp(&format!("asc{bits}.pgm"));
            let b = tmp(&format!("bin{bits}.pgm"));
            save_image_as(&g, &a, ImageFormat::PgmAscii { bits }).unwrap();
            save_image_as(&g, &b, ImageFormat::Pgm { bits }).unwrap();
            assert_eq!(load_image(&a).unwrap(), load_image(&b).unwrap());
        }
    }

    #[test]
    fn truncated_file_is_reported() {
        let g = random(8, 8, 3);
        let p = tmp("t.pgm");
        save_image(&g, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load_image(&p), Err(Error::CorruptHeader(_))));
        fs::write(&p, b"P5\n8 ").unwrap();
        assert!(matches!(load_image(&p), Err(Error::CorruptHeader(_))));
    }

    #[test]
    fn unknown_format_is_rejected() {
        let p = tmp("x.bmp");
        fs::write(&p, b"BM....").unwrap();
        assert!(matches!(load_image(&p), Err(Error::UnsupportedFormat(_))));
        assert!(matches!(save_image(&random(2, 2, 0), &p), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn header_comments_are_skipped() {
        let p = tmp("c.pgm");
        fs::write(&p, b"P2\n# a comment\n2 1 # trailing\n255\n0 255\n").unwrap();
        assert_eq!(load_image(&p).unwrap().values, vec![0.0, 1.0]);
    }

    #[test]
    fn config_parsing() {
        let m = parse_config("# comment\nreg = tv\n\nlambda = 100, 20  # two\n").unwrap();
        assert_eq!(m["reg"], "tv");
        assert_eq!(m["lambda"], "100, 20");
        assert!(parse_config("a = 1\na = 2").is_err());
        assert!(parse_config("novalue").is_err());
    }

    #[test]
    fn noise_descriptors() {
        assert_eq!(parse_noise("gaussian:0.02").unwrap(), NoiseSpec::Gaussian { variance: 0.02 });
        assert!(matches!(parse_noise("impulse:0.05+gaussian:0.005").unwrap(), NoiseSpec::Composite { stages } if stages.len() == 2));
        assert!(parse_noise("speckle:1").is_err());
        assert!(parse_noise("gaussian:-1").is_err());
    }

    #[test]
    fn manifest_loads_files_and_synthetic_pairs() {
        let g = random(6, 5, 4);
        let c = tmp("m_clean.pgm");
        let n = tmp("m_noisy.pgm");
        save_image(&g, &c).unwrap();
        save_image(&g, &n).unwrap();
        let text = "boundary = neumann\npair = m_clean.pgm m_noisy.pgm\npair = m_clean.pgm noise=gaussian:0.01 seed=5\n";
        let m = DatasetManifest::parse(text, c.parent().unwrap()).unwrap();
        let t = m.load().unwrap();
        assert_eq!(t.len(), 2);
        let t2 = m.load().unwrap();
        assert_eq!(t.pairs[1].f, t2.pairs[1].f);

        let other = tmp("m_small.pgm");
        save_image(&random(3, 3, 5), &other).unwrap();
        let bad = DatasetManifest::parse("pair = m_clean.pgm m_small.pgm", c.parent().unwrap()).unwrap();
        assert!(matches!(bad.load(), Err(Error::DimensionMismatch { .. })));
    }
}
