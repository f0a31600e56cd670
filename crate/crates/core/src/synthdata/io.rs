//! Binary PPM/PGM files, per-sequence manifests and dataset splits.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{generate_sequence, Difficulty, GenerateOptions, Image, ObjectMotion, SequenceRecord};
use crate::error::{Error, Result};
use crate::mask::IdMask;

const FORMAT_VERSION: u32 = 1;

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        msg: msg.into(),
    }
}

/// Reads the whitespace-separated header fields of a binary PNM file,
/// skipping `#` comments. Returns the fields and the payload offset.
fn pnm_header(bytes: &[u8], magic: &str) -> Result<([usize; 3], usize)> {
    if !bytes.starts_with(magic.as_bytes()) {
        return Err(parse_err(0, format!("expected magic `{magic}`")));
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(parse_err(pos, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(start, "expected a decimal number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| parse_err(start, "number out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(parse_err(pos, "expected whitespace before payload")),
    }
    if fields[2] != 255 {
        return Err(parse_err(pos, format!("unsupported maxval {}", fields[2])));
    }
    if fields[0] == 0 || fields[1] == 0 {
        return Err(parse_err(pos, "zero image extent"));
    }
    Ok((fields, pos))
}

fn payload(bytes: &[u8], offset: usize, len: usize) -> Result<&[u8]> {
    let got = bytes.len().saturating_sub(offset);
    if got < len {
        return Err(parse_err(
            bytes.len(),
            format!("truncated payload: expected {len} bytes, found {got}"),
        ));
    }
    if got > len {
        return Err(parse_err(offset + len, "trailing bytes after payload"));
    }
    Ok(&bytes[offset..])
}

pub fn write_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read_ppm(bytes: &[u8]) -> Result<Image> {
    let ([w, h, _], off) = pnm_header(bytes, "P6")?;
    let data = payload(bytes, off, w * h * 3)?.to_vec();
    Ok(Image { h, w, data })
}

pub fn write_pgm(mask: &IdMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.w(), mask.h()).into_bytes();
    out.extend_from_slice(mask.ids());
    out
}

pub fn read_pgm(bytes: &[u8]) -> Result<IdMask> {
    let ([w, h, _], off) = pnm_header(bytes, "P5")?;
    let data = payload(bytes, off, w * h)?.to_vec();
    IdMask::new(h, w, data)
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    id: String,
    seed: u64,
    difficulty: Difficulty,
    n_frames: usize,
    n_objects: usize,
    height: usize,
    width: usize,
    objects: Vec<ObjectMotion>,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

fn frame_name(t: usize, ext: &str) -> String {
    format!("{t:05}.{ext}")
}

/// Writes `frames/`, `masks/` and `manifest.json` under `dir`.
pub fn write_sequence(rec: &SequenceRecord, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("frames"))?;
    fs::create_dir_all(dir.join("masks"))?;
    for (t, (img, mask)) in rec.frames.iter().zip(&rec.masks).enumerate() {
        fs::write(dir.join("frames").join(frame_name(t, "ppm")), write_ppm(img))?;
        fs::write(dir.join("masks").join(frame_name(t, "pgm")), write_pgm(mask))?;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        id: rec.id.clone(),
        seed: rec.seed,
        difficulty: rec.difficulty,
        n_frames: rec.len(),
        n_objects: rec.n_objects,
        height: rec.h(),
        width: rec.w(),
        objects: rec.motion.clone(),
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(())
}

pub fn read_sequence(dir: &Path) -> Result<SequenceRecord> {
    let manifest: Manifest = serde_json::from_slice(&read_file(&dir.join("manifest.json"))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::config(format!(
            "unsupported sequence format version {}",
            manifest.format_version
        )));
    }
    let with_path = |path: PathBuf, e: Error| match e {
        Error::Parse { offset, msg } => Error::Parse {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    };
    let mut frames = Vec::with_capacity(manifest.n_frames);
    let mut masks = Vec::with_capacity(manifest.n_frames);
    for t in 0..manifest.n_frames {
        let fp = dir.join("frames").join(frame_name(t, "ppm"));
        let img = read_ppm(&read_file(&fp)?).map_err(|e| with_path(fp.clone(), e))?;
        let mp = dir.join("masks").join(frame_name(t, "pgm"));
        let mask = read_pgm(&read_file(&mp)?).map_err(|e| with_path(mp.clone(), e))?;
        if (img.h, img.w) != (manifest.height, manifest.width) || (mask.h(), mask.w()) != (img.h, img.w) {
            return Err(Error::shape(
                "sequence frame",
                &[img.h, img.w, mask.h(), mask.w()],
                &[manifest.height, manifest.width],
            ));
        }
        if mask.max_id() as usize > manifest.n_objects {
            return Err(Error::config(format!(
                "{}: id {} exceeds object count",
                mp.display(),
                mask.max_id()
            )));
        }
        frames.push(img);
        masks.push(mask);
    }
    let mut rec = SequenceRecord::new(
        manifest.id,
        manifest.seed,
        manifest.difficulty,
        frames,
        masks,
        manifest.objects,
    )?;
    rec.n_objects = manifest.n_objects;
    Ok(rec)
}

/// Parameters of a train/val split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitOptions {
    pub n_train: usize,
    pub n_val: usize,
    pub base_seed: u64,
    pub h: usize,
    pub w: usize,
    pub n_frames: usize,
    /// Object counts are drawn uniformly from `1..=max_objects`.
    pub max_objects: usize,
}

impl Default for SplitOptions {
    fn default() -> Self {
        SplitOptions {
            n_train: 40,
            n_val: 10,
            base_seed: 0,
            h: 32,
            w: 32,
            n_frames: 8,
            max_objects: 3,
        }
    }
}

impl SplitOptions {
    /// Seed of sequence `i` of a split; validation seeds live 2³² above
    /// the training range.
    pub fn seed(&self, split: &str, i: usize) -> u64 {
        let offset = if split == "val" { 1u64 << 32 } else { 0 };
        self.base_seed.wrapping_add(offset).wrapping_add(i as u64)
    }

    /// Options for sequence `i` of a split: difficulties cycle so each
    /// split is balanced.
    pub fn sequence_options(&self, split: &str, i: usize) -> GenerateOptions {
        let seed = self.seed(split, i);
        GenerateOptions {
            h: self.h,
            w: self.w,
            n_frames: self.n_frames,
            n_objects: 1 + (super::derived_seed(seed, u64::MAX) % self.max_objects.max(1) as u64) as usize,
            difficulty: Difficulty::ALL[i % Difficulty::ALL.len()],
            motion_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 {
            return Err(Error::config("n_train and n_val must be at least 1"));
        }
        if self.max_objects == 0 || self.max_objects > super::MAX_OBJECTS {
            return Err(Error::config(format!(
                "max_objects must be in 1..={}",
                super::MAX_OBJECTS
            )));
        }
        Ok(())
    }
}

fn sequence_dir_name(split: &str, i: usize) -> String {
    format!("{split}-{i:04}")
}

/// Generates one split in memory, in index order.
pub fn generate_split(opts: &SplitOptions, split: &str) -> Result<Vec<SequenceRecord>> {
    opts.validate()?;
    let n = match split {
        "train" => opts.n_train,
        "val" => opts.n_val,
        other => return Err(Error::config(format!("unknown split `{other}`"))),
    };
    use rayon::prelude::*;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rec = generate_sequence(opts.seed(split, i), &opts.sequence_options(split, i))?;
            rec.id = sequence_dir_name(split, i);
            Ok(rec)
        })
        .collect()
}

/// Generates and writes `<root>/train/*` and `<root>/val/*`.
pub fn make_split(root: &Path, opts: &SplitOptions) -> Result<Vec<PathBuf>> {
    opts.validate()?;
    let mut jobs = Vec::new();
    for (split, n) in [("train", opts.n_train), ("val", opts.n_val)] {
        for i in 0..n {
            jobs.push((split, i));
        }
    }
    use rayon::prelude::*;
    jobs.par_iter()
        .map(|&(split, i)| {
            let mut rec = generate_sequence(opts.seed(split, i), &opts.sequence_options(split, i))?;
            rec.id = sequence_dir_name(split, i);
            let dir = root.join(split).join(&rec.id);
            write_sequence(&rec, &dir)?;
            Ok(dir)
        })
        .collect()
}

/// Reads every sequence of `<root>/<split>`, ordered by directory name.
pub fn load_split(root: &Path, split: &str) -> Result<Vec<SequenceRecord>> {
    let dir = root.join(split);
    let entries = fs::read_dir(&dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(dir.clone()),
        _ => Error::Io(e),
    })?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| read_sequence(d)).collect()
}
