//! Corpus and dataset plumbing: byte-level vocabularies, portable graymap
//! images, and the synthetic classification set used for desk-scale runs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embed::Image;
use crate::error::{Error, Result};

/// Character-level vocabulary: the distinct bytes of a corpus, sorted, with
/// token id = rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    bytes: Vec<u8>,
    index: [Option<u16>; 256],
}

impl Vocab {
    pub fn from_bytes(mut bytes: Vec<u8>) -> Result<Self> {
        bytes.sort_unstable();
        bytes.dedup();
        if bytes.is_empty() {
            return Err(Error::Input("vocabulary from an empty corpus".to_string()));
        }
        let mut index = [None; 256];
        for (i, &b) in bytes.iter().enumerate() {
            index[b as usize] = Some(i as u16);
        }
        Ok(Vocab { bytes, index })
    }

    pub fn from_corpus(corpus: &[u8]) -> Result<Self> {
        Vocab::from_bytes(corpus.to_vec())
    }

    pub fn size(&self) -> usize {
        self.bytes.len()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn encode(&self, text: &[u8]) -> Result<Vec<usize>> {
        text.iter()
            .map(|&b| {
                self.index[b as usize].map(|i| i as usize).ok_or_else(|| {
                    Error::Input(format!(
                        "character {} is not in the vocabulary",
                        escape_byte(b)
                    ))
                })
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<u8>> {
        ids.iter()
            .map(|&id| {
                self.bytes
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Index(format!("token id {id} outside vocabulary")))
            })
            .collect()
    }

    /// One symbol per line, line index = token id. Whitespace, backslash and
    /// non-printable bytes are escaped so every symbol stays on its line.
    pub fn to_file_text(&self) -> String {
        let mut out = String::new();
        for &b in &self.bytes {
            out.push_str(&escape_byte(b));
            out.push('\n');
        }
        out
    }

    pub fn from_file_text(text: &str) -> Result<Self> {
        let mut bytes = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let b = unescape_symbol(line)
                .ok_or_else(|| Error::Format(format!("bad vocab entry on line {}", lineno + 1)))?;
            bytes.push(b);
        }
        let vocab = Vocab::from_bytes(bytes.clone())?;
        if vocab.bytes != bytes {
            return Err(Error::Format(
                "vocab file entries must be distinct and sorted".to_string(),
            ));
        }
        Ok(vocab)
    }

    /// Single-line escaped form, used inside checkpoint config blocks.
    pub fn to_escaped_string(&self) -> String {
        self.bytes.iter().map(|&b| escape_byte(b)).collect()
    }

    pub fn from_escaped_string(s: &str) -> Result<Self> {
        Vocab::from_bytes(unescape_string(s)?)
    }
}

fn escape_byte(b: u8) -> String {
    match b {
        b'\\' => "\\\\".to_string(),
        b'\n' => "\\n".to_string(),
        b'\r' => "\\r".to_string(),
        b'\t' => "\\t".to_string(),
        b' ' => "\\x20".to_string(),
        0x21..=0x7e => (b as char).to_string(),
        other => format!("\\x{other:02x}"),
    }
}

fn unescape_symbol(line: &str) -> Option<u8> {
    let bytes = unescape_string(line).ok()?;
    if bytes.len() == 1 {
        Some(bytes[0])
    } else {
        None
    }
}

fn unescape_string(s: &str) -> Result<Vec<u8>> {
    let raw = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < raw.len() {
        if raw[i] != b'\\' {
            out.push(raw[i]);
            i += 1;
            continue;
        }
        let code = raw
            .get(i + 1)
            .ok_or_else(|| Error::Format("dangling escape".to_string()))?;
        match code {
            b'\\' => {
                out.push(b'\\');
                i += 2;
            }
            b'n' => {
                out.push(b'\n');
                i += 2;
            }
            b'r' => {
                out.push(b'\r');
                i += 2;
            }
            b't' => {
                out.push(b'\t');
                i += 2;
            }
            b'x' => {
                let hex = s
                    .get(i + 2..i + 4)
                    .ok_or_else(|| Error::Format("truncated \\x escape".to_string()))?;
                let v = u8::from_str_radix(hex, 16)
                    .map_err(|_| Error::Format(format!("bad hex escape \\x{hex}")))?;
                out.push(v);
                i += 4;
            }
            other => {
                return Err(Error::Format(format!(
                    "unknown escape \\{}",
                    *other as char
                )))
            }
        }
    }
    Ok(out)
}

// ── Portable graymap ─────────────────────────────────────────────────

/// Read a P2 (ASCII) or P5 (binary) PGM with maxval <= 255 into an image
/// with intensities in [0, 1].
pub fn read_pgm(path: &Path) -> Result<Image> {
    let raw = fs::read(path)
        .map_err(|e| Error::Input(format!("cannot read image {}: {e}", path.display())))?;
    parse_pgm(&raw).map_err(|e| match e {
        Error::Input(msg) => Error::Input(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_pgm(raw: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let magic = next_token(raw, &mut pos).ok_or_else(|| bad("missing magic"))?;
    let binary = match magic.as_slice() {
        b"P2" => false,
        b"P5" => true,
        _ => return Err(bad("not a P2/P5 graymap")),
    };
    let width = next_int(raw, &mut pos).ok_or_else(|| bad("missing width"))?;
    let height = next_int(raw, &mut pos).ok_or_else(|| bad("missing height"))?;
    let maxval = next_int(raw, &mut pos).ok_or_else(|| bad("missing maxval"))?;
    if width == 0 || height == 0 {
        return Err(bad("zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(bad("maxval must be in 1..=255"));
    }
    let count = width * height;
    let mut data = Vec::with_capacity(count);
    if binary {
        // single whitespace byte separates header from raster
        pos += 1;
        if raw.len() < pos + count {
            return Err(bad("truncated raster"));
        }
        for &b in &raw[pos..pos + count] {
            data.push(b as f64 / maxval as f64);
        }
    } else {
        for _ in 0..count {
            let v = next_int(raw, &mut pos).ok_or_else(|| bad("truncated raster"))?;
            if v > maxval {
                return Err(bad("sample exceeds maxval"));
            }
            data.push(v as f64 / maxval as f64);
        }
    }
    Image::new(height, width, 1, data)
}

fn bad(msg: &str) -> Error {
    Error::Input(format!("bad PGM: {msg}"))
}

fn next_token(raw: &[u8], pos: &mut usize) -> Option<Vec<u8>> {
    loop {
        while *pos < raw.len() && raw[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < raw.len() && raw[*pos] == b'#' {
            while *pos < raw.len() && raw[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    if *pos >= raw.len() {
        return None;
    }
    let start = *pos;
    while *pos < raw.len() && !raw[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    Some(raw[start..*pos].to_vec())
}

fn next_int(raw: &[u8], pos: &mut usize) -> Option<usize> {
    let token = next_token(raw, pos)?;
    std::str::from_utf8(&token).ok()?.parse().ok()
}

/// Write a binary (P5) graymap, clamping intensities into [0, 1].
pub fn write_pgm(path: &Path, image: &Image) -> Result<()> {
    if image.channels != 1 {
        return Err(Error::Input("PGM output requires a single channel".to_string()));
    }
    let mut out = Vec::new();
    write!(out, "P5\n{} {}\n255\n", image.width, image.height)?;
    for &v in &image.data {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    fs::write(path, out)?;
    Ok(())
}

// ── Labelled image directories ───────────────────────────────────────

/// A labelled image set plus its class names (sorted directory names).
#[derive(Debug, Clone)]
pub struct LabeledImages {
    pub classes: Vec<String>,
    pub items: Vec<(Image, usize)>,
}

/// Load `<dir>/<class>/<name>.pgm`, classes sorted, files sorted per class.
pub fn load_labeled_dir(dir: &Path) -> Result<LabeledImages> {
    let mut classes: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok())
        .filter(|entry| entry.path().is_dir())
        .filter_map(|entry| entry.file_name().into_string().ok())
        .collect();
    classes.sort();
    if classes.len() < 2 {
        return Err(Error::Input(format!(
            "{} must contain at least two class directories",
            dir.display()
        )));
    }
    let mut items = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for (label, class) in classes.iter().enumerate() {
        let class_dir = dir.join(class);
        let mut files: Vec<PathBuf> = fs::read_dir(&class_dir)
            .map_err(|e| Error::Input(format!("cannot read {}: {e}", class_dir.display())))?
            .filter_map(|entry| entry.ok())
            .map(|entry| entry.path())
            .filter(|p| p.extension().map(|e| e == "pgm").unwrap_or(false))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Input(format!(
                "class directory {} holds no .pgm files",
                class_dir.display()
            )));
        }
        for file in files {
            let image = read_pgm(&file)?;
            match dims {
                None => dims = Some((image.height, image.width)),
                Some((h, w)) if (image.height, image.width) != (h, w) => {
                    return Err(Error::Input(format!(
                        "{} is {}x{}, other images are {h}x{w}",
                        file.display(),
                        image.height,
                        image.width
                    )))
                }
                Some(_) => {}
            }
            items.push((image, label));
        }
    }
    Ok(LabeledImages { classes, items })
}

/// Pattern families for the synthetic set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatternKind {
    Bright,
    Dark,
    Stripes,
    Checker,
}

impl PatternKind {
    pub fn name(self) -> &'static str {
        match self {
            PatternKind::Bright => "bright",
            PatternKind::Dark => "dark",
            PatternKind::Stripes => "stripes",
            PatternKind::Checker => "checker",
        }
    }

    fn sample(self, side: usize, rng: &mut ChaCha8Rng) -> Image {
        let noise = |rng: &mut ChaCha8Rng| -> f64 { rng.gen_range(-0.12..0.12) };
        let data: Vec<f64> = (0..side * side)
            .map(|i| {
                let (y, x) = (i / side, i % side);
                let base = match self {
                    PatternKind::Bright => 0.78,
                    PatternKind::Dark => 0.22,
                    PatternKind::Stripes => {
                        if y % 2 == 0 {
                            0.85
                        } else {
                            0.15
                        }
                    }
                    PatternKind::Checker => {
                        if (x + y) % 2 == 0 {
                            0.85
                        } else {
                            0.15
                        }
                    }
                };
                (base + noise(rng)).clamp(0.0, 1.0)
            })
            .collect();
        Image::new(side, side, 1, data).expect("square image")
    }
}

/// Generate `<dir>/{train,test}/<class>/NNN.pgm` with `side`x`side` images.
pub fn generate_synthetic_cls(
    dir: &Path,
    kinds: &[PatternKind],
    side: usize,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (split, count) in [("train", n_train), ("test", n_test)] {
        for kind in kinds {
            let class_dir = dir.join(split).join(kind.name());
            fs::create_dir_all(&class_dir)?;
            let per_class = count / kinds.len();
            for i in 0..per_class {
                let image = kind.sample(side, &mut rng);
                write_pgm(&class_dir.join(format!("{i:04}.pgm")), &image)?;
            }
        }
    }
    Ok(())
}
