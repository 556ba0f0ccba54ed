//! PNG codecs: 8-bit color images and 16-bit depth maps.

use std::io::Cursor;
use std::path::Path;

use image::{ColorType, DynamicImage, ImageFormat, ImageReader};

use crate::error::{Error, Result};
use crate::raster::Image;

fn quantize8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn from_dynamic(img: DynamicImage) -> Result<Image> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, bytes) = match img.color() {
        ColorType::L8 => (3, img.to_rgb8().into_raw()),
        ColorType::La8 => (4, img.to_rgba8().into_raw()),
        ColorType::Rgb8 => (3, img.into_rgb8().into_raw()),
        ColorType::Rgba8 => (4, img.into_rgba8().into_raw()),
        other => return Err(Error::UnsupportedImage(format!("{other:?}; only 8-bit gray, RGB and RGBA are read"))),
    };
    Image::new(w, h, channels, bytes.into_iter().map(|b| b as f32 / 255.0).collect())
}

/// Decodes 8-bit PNG bytes into a 3- or 4-channel image in [0,1].
pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let img = ImageReader::with_format(Cursor::new(bytes), ImageFormat::Png)
        .decode()
        .map_err(|e| Error::UnsupportedImage(e.to_string()))?;
    from_dynamic(img)
}

/// Decodes any supported 8-bit image container (PNG or otherwise guessed from bytes).
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let img = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| Error::UnsupportedImage(e.to_string()))?
        .decode()
        .map_err(|e| Error::UnsupportedImage(e.to_string()))?;
    from_dynamic(img)
}

pub fn read_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// RGB view of a PNG; transparent pixels are composited over `background`.
pub fn read_rgb(path: impl AsRef<Path>, background: [f32; 3]) -> Result<Image> {
    let img = read_png(path)?;
    Ok(if img.channels() == 4 { alpha_over(&img, background)? } else { img })
}

/// `rgb * a + background * (1 - a)` for an RGBA image.
pub fn alpha_over(rgba: &Image, background: [f32; 3]) -> Result<Image> {
    if rgba.channels() != 4 {
        return Err(Error::invalid(format!("alpha compositing needs 4 channels, got {}", rgba.channels())));
    }
    Ok(Image::from_fn(rgba.width(), rgba.height(), 3, |x, y, c| {
        let p = rgba.pixel(x, y);
        p[c] * p[3] + background[c] * (1.0 - p[3])
    }))
}

/// 8-bit PNG of a 1-, 3- or 4-channel image; values are clamped to [0,1].
pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let color = match img.channels() {
        1 => ColorType::L8,
        3 => ColorType::Rgb8,
        4 => ColorType::Rgba8,
        c => return Err(Error::UnsupportedImage(format!("cannot encode {c}-channel image"))),
    };
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize8(v)).collect();
    encode_raw(&bytes, img.width(), img.height(), color)
}

fn encode_raw(bytes: &[u8], w: usize, h: usize, color: ColorType) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    image::write_buffer_with_format(&mut Cursor::new(&mut out), bytes, w as u32, h as u32, color, ImageFormat::Png)
        .map_err(|e| Error::UnsupportedImage(e.to_string()))?;
    Ok(out)
}

pub fn write_png(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_png(img)?).map_err(|e| Error::io(path, e))
}

/// 16-bit grayscale PNG storing `depth / max_depth` over the full code range.
pub fn encode_depth_png(depth: &Image, max_depth: f32) -> Result<Vec<u8>> {
    if depth.channels() != 1 || !(max_depth > 0.0) {
        return Err(Error::invalid("depth PNG needs a 1-channel map and a positive range"));
    }
    let bytes: Vec<u8> = depth
        .data()
        .iter()
        .flat_map(|&d| {
            let q = ((d / max_depth).clamp(0.0, 1.0) * 65535.0).round() as u16;
            q.to_ne_bytes()
        })
        .collect();
    encode_raw(&bytes, depth.width(), depth.height(), ColorType::L16)
}

pub fn decode_depth_png(bytes: &[u8], max_depth: f32) -> Result<Image> {
    let img = ImageReader::with_format(Cursor::new(bytes), ImageFormat::Png)
        .decode()
        .map_err(|e| Error::UnsupportedImage(e.to_string()))?;
    if img.color() != ColorType::L16 {
        return Err(Error::UnsupportedImage(format!("depth maps are 16-bit gray, got {:?}", img.color())));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_luma16().into_raw().into_iter().map(|q| q as f32 / 65535.0 * max_depth).collect();
    Image::new(w, h, 1, data)
}

pub fn write_depth_png(path: impl AsRef<Path>, depth: &Image, max_depth: f32) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_depth_png(depth, max_depth)?).map_err(|e| Error::io(path, e))
}

pub fn read_depth_png(path: impl AsRef<Path>, max_depth: f32) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_depth_png(&bytes, max_depth)
}

/// RGB images of a directory in file-name order. Non-image files are skipped.
pub fn load_image_dir(dir: impl AsRef<Path>, background: [f32; 3]) -> Result<Vec<(String, Image)>> {
    let dir = dir.as_ref();
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    entries.sort();
    entries
        .into_iter()
        .map(|p| {
            let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let img = decode_image(&bytes).map_err(|e| Error::Format {
                path: p.clone(),
                message: e.to_string(),
            })?;
            let img = if img.channels() == 4 { alpha_over(&img, background)? } else { img };
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, img))
        })
        .collect()
}
