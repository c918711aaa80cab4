//! Video sequences on disk: the raw `STBNVID1` container and PNG frame directories.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};
use stbn_core::videodata::VideoSequence;

use crate::error::{format_err, io_err, Error, Result};

pub const VIDEO_MAGIC: &[u8; 8] = b"STBNVID1";
/// Extension that selects the raw container when saving.
pub const VIDEO_EXTENSION: &str = "stbnvid";

pub fn write_container(seq: &VideoSequence, mut w: impl Write) -> std::io::Result<()> {
    w.write_all(VIDEO_MAGIC)?;
    for d in seq.dims() {
        w.write_all(&(d as i32).to_le_bytes())?;
    }
    for v in seq.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

pub(crate) fn read_dims<const N: usize>(r: &mut impl Read, magic: &[u8; 8], path: &Path) -> Result<[usize; N]> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m).map_err(io_err(path))?;
    if &m != magic {
        return Err(format_err(path, format!("bad magic, expected {}", String::from_utf8_lossy(magic))));
    }
    let mut dims = [0usize; N];
    for d in &mut dims {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(io_err(path))?;
        let v = i32::from_le_bytes(b);
        if v <= 0 {
            return Err(format_err(path, format!("non-positive dimension {v}")));
        }
        *d = v as usize;
    }
    Ok(dims)
}

pub(crate) fn read_f32s(r: &mut impl Read, count: usize, path: &Path) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| format_err(path, format!("truncated payload: {e}")))?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(io_err(path))? != 0 {
        return Err(format_err(path, "trailing bytes after payload"));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn read_container(path: &Path) -> Result<VideoSequence> {
    let mut r = BufReader::new(fs::File::open(path).map_err(io_err(path))?);
    let [t, h, w, c] = read_dims::<4>(&mut r, VIDEO_MAGIC, path)?;
    let data = read_f32s(&mut r, t * h * w * c, path)?;
    Ok(VideoSequence::new(t, h, w, c, data)?.with_id(stem(path)))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// Reads every `*.png` in `dir` in lexicographic order. Frames with colour
/// become 3-channel; grayscale frames 1-channel. Alpha is dropped.
pub fn load_png_dir(dir: &Path) -> Result<VideoSequence> {
    let files = png_files(dir)?;
    if files.is_empty() {
        return Err(Error::NoFrames(dir.to_path_buf()));
    }
    let mut shape: Option<(u32, u32, usize)> = None;
    let mut data = Vec::new();
    for f in &files {
        let img = image::open(f).map_err(|source| Error::Image {
            path: f.clone(),
            source,
        })?;
        let c = if img.color().has_color() { 3 } else { 1 };
        let this = (img.width(), img.height(), c);
        match shape {
            None => shape = Some(this),
            Some(s) if s != this => {
                return Err(format_err(
                    f,
                    format!("frame is {}x{}x{}, earlier frames are {}x{}x{}", this.1, this.0, this.2, s.1, s.0, s.2),
                ))
            }
            Some(_) => {}
        }
        let raw = if c == 3 { img.to_rgb8().into_raw() } else { img.to_luma8().into_raw() };
        data.extend(raw.into_iter().map(|v| v as f32 / 255.0));
    }
    let (w, h, c) = shape.expect("at least one frame");
    Ok(VideoSequence::new(files.len(), h as usize, w as usize, c, data)?.with_id(stem(dir)))
}

fn quantise(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes frames as `0001.png`, `0002.png`, ... Values are clipped to `[0, 1]`
/// and quantised to 8 bits.
pub fn save_png_dir(seq: &VideoSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let [t, h, w, c] = seq.dims();
    let digits = (t.to_string().len()).max(4);
    for k in 0..t {
        let frame: Vec<u8> = seq.data()[k * h * w * c..(k + 1) * h * w * c].iter().map(|&v| quantise(v)).collect();
        let img = if c == 3 {
            DynamicImage::ImageRgb8(RgbImage::from_raw(w as u32, h as u32, frame).expect("sized buffer"))
        } else {
            DynamicImage::ImageLuma8(GrayImage::from_raw(w as u32, h as u32, frame).expect("sized buffer"))
        };
        let path = dir.join(format!("{:0digits$}.png", k + 1));
        img.save(&path).map_err(|source| Error::Image { path, source })?;
    }
    Ok(())
}

/// Directories load as PNG frames; files as the raw container.
pub fn load_sequence(path: &Path) -> Result<VideoSequence> {
    if path.is_dir() {
        load_png_dir(path)
    } else {
        read_container(path)
    }
}

/// Paths ending in `.stbnvid` get the lossless container; anything else is
/// treated as a PNG frame directory.
pub fn save_sequence(seq: &VideoSequence, path: &Path) -> Result<()> {
    if is_container_path(path) {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let f = fs::File::create(path).map_err(io_err(path))?;
        write_container(seq, BufWriter::new(f)).map_err(io_err(path))
    } else {
        save_png_dir(seq, path)
    }
}

pub fn is_container_path(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case(VIDEO_EXTENSION))
}
