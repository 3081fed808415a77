//! PNG/PPM ingestion, 8-bit export, heatmaps and corpus directories.

use std::fs;
use std::path::{Path, PathBuf};

use gsir_core::ImageBuffer;
use image::{DynamicImage, ImageFormat, ImageReader, Rgb, RgbImage};

use crate::error::{CliError, CliResult};

/// Reads an 8- or 16-bit PNG or binary PPM into `[0, 1]` RGB.
pub fn load_image(path: &Path) -> CliResult<ImageBuffer> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let format = image::guess_format(&bytes).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Pnm) {
        return Err(CliError::Format(format!("{}: unsupported image format {format:?}, expected PNG or PPM", path.display())));
    }
    let img = ImageReader::with_format(std::io::Cursor::new(bytes), format)
        .decode()
        .map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
    Ok(to_buffer(&img))
}

fn to_buffer(img: &DynamicImage) -> ImageBuffer {
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) | DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => {
            let rgb = img.to_rgb16();
            ImageBuffer::from_fn(w, h, |r, c| rgb.get_pixel(c as u32, r as u32).0.map(|v| v as f64 / 65535.0))
        }
        _ => {
            let rgb = img.to_rgb8();
            ImageBuffer::from_fn(w, h, |r, c| rgb.get_pixel(c as u32, r as u32).0.map(|v| v as f64 / 255.0))
        }
    }
}

/// Clamps to `[0, 1]` and rounds to 8 bits.
pub fn to_rgb8(img: &ImageBuffer) -> RgbImage {
    RgbImage::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        Rgb(img.get(y as usize, x as usize).map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

/// Writes an 8-bit PNG, or a binary PPM when the extension is `.ppm`.
pub fn save_image(img: &ImageBuffer, path: &Path) -> CliResult<()> {
    let format = match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()) {
        Some(e) if e == "ppm" || e == "pnm" => ImageFormat::Pnm,
        _ => ImageFormat::Png,
    };
    to_rgb8(img).save_with_format(path, format).map_err(|e| match e {
        image::ImageError::IoError(io) => CliError::io(path, io),
        other => CliError::Format(format!("{}: {other}", path.display())),
    })
}

/// Binary 8-bit PGM of `values` (row-major `rows × cols`) mapped linearly
/// from `[lo, hi]` to `[0, 255]`.
pub fn write_pgm(path: &Path, values: &[f64], rows: usize, cols: usize, lo: f64, hi: f64) -> CliResult<()> {
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| {
        let t = if v.is_finite() { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 };
        (t * 255.0).round() as u8
    }));
    write_file(path, &out)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

/// PNG/PPM files in `dir`, sorted by name.
pub fn corpus_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("png" | "ppm" | "pnm")) {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!("corpus {} contains no PNG or PPM images", dir.display())));
    }
    Ok(files)
}

/// A named list of images.
pub struct Corpus {
    pub names: Vec<String>,
    pub images: Vec<ImageBuffer>,
}

impl Corpus {
    pub fn load_dir(dir: &Path) -> CliResult<Self> {
        let files = corpus_files(dir)?;
        let names = files.iter().map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned()).collect();
        let images = files.iter().map(|p| load_image(p)).collect::<CliResult<_>>()?;
        Ok(Self { names, images })
    }

    pub fn from_images(prefix: &str, images: Vec<ImageBuffer>) -> Self {
        Self { names: (1..=images.len()).map(|i| format!("{prefix}{i}")).collect(), images }
    }
}
