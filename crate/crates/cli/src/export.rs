//! 8-bit PNG previews of imgio images. Quantization and windowing discard
//! information, so these files are for viewing only.

use std::fs;
use std::path::{Path, PathBuf};

use epiwarp::imgio::{header_path, payload_path, read_image, Image2D, ImageKind};
use image::{GrayImage, Luma};

use crate::error::CliError;

/// Intensity range mapped to 0..=255.
pub fn auto_window(img: &Image2D) -> (f32, f32) {
    let px = img.pixels();
    match img.kind() {
        ImageKind::FieldHz | ImageKind::VdmPx => {
            let m = px.iter().fold(0.0f32, |a, v| a.max(v.abs()));
            (-m, m)
        }
        _ => {
            let lo = px.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = px.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            (lo.min(0.0), hi)
        }
    }
}

pub fn to_gray(img: &Image2D, window: (f32, f32)) -> GrayImage {
    let (lo, hi) = window;
    let span = if hi > lo { hi - lo } else { 1.0 };
    GrayImage::from_fn(img.width() as u32, img.height() as u32, |c, r| {
        let v = (img.get(r as usize, c as usize) - lo) / span;
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

/// Image stems under `root`, in sorted order. A stem is a `<name>.json`
/// header with a `<name>.bin` payload beside it.
pub fn find_stems(root: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut stems = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = fs::read_dir(&dir).map_err(|source| CliError::Io {
            path: dir.clone(),
            source,
        })?;
        for entry in entries {
            let path = entry
                .map_err(|source| CliError::Io {
                    path: dir.clone(),
                    source,
                })?
                .path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "json") {
                let stem = path.with_extension("");
                if payload_path(&stem).is_file() {
                    stems.push(stem);
                }
            }
        }
    }
    stems.sort();
    Ok(stems)
}

/// Writes one PNG per image found in `inputs` (stems or directories) and
/// returns the files written.
pub fn export(inputs: &[PathBuf], out: &Path, window: Option<(f32, f32)>) -> Result<Vec<PathBuf>, CliError> {
    let mut jobs: Vec<(PathBuf, PathBuf)> = Vec::new();
    for input in inputs {
        if input.is_dir() {
            for stem in find_stems(input)? {
                let rel = stem.strip_prefix(input).expect("found under input").to_path_buf();
                jobs.push((stem, rel));
            }
        } else if header_path(input).is_file() {
            let name = input
                .file_name()
                .ok_or_else(|| CliError::Usage(format!("--in {}: not an image stem", input.display())))?;
            jobs.push((input.clone(), PathBuf::from(name)));
        } else {
            return Err(CliError::Usage(format!(
                "--in {}: neither a directory nor an image stem (expected {})",
                input.display(),
                header_path(input).display()
            )));
        }
    }
    let mut written = Vec::new();
    for (stem, rel) in jobs {
        let img = read_image(&stem)?;
        let mut dest = out.join(rel);
        dest.as_mut_os_string().push(".png");
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent).map_err(|source| CliError::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
        to_gray(&img, window.unwrap_or_else(|| auto_window(&img)))
            .save(&dest)
            .map_err(|source| CliError::Png {
                path: dest.clone(),
                source,
            })?;
        written.push(dest);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use epiwarp::imgio::Geometry;

    #[test]
    fn window_ends_map_to_black_and_white() {
        let img = Image2D::from_fn(Geometry::new(3, 1), ImageKind::DwiB50, |_, c| c as f32);
        let g = to_gray(&img, auto_window(&img));
        assert_eq!([g.get_pixel(0, 0)[0], g.get_pixel(1, 0)[0], g.get_pixel(2, 0)[0]], [0, 128, 255]);
    }

    #[test]
    fn signed_maps_are_centred_on_grey() {
        let img = Image2D::from_fn(Geometry::new(3, 1), ImageKind::FieldHz, |_, c| c as f32 - 1.0);
        assert_eq!(auto_window(&img), (-1.0, 1.0));
        let img = Image2D::from_fn(Geometry::new(2, 1), ImageKind::VdmPx, |_, c| 4.0 * c as f32);
        assert_eq!(to_gray(&img, auto_window(&img)).get_pixel(0, 0)[0], 128);
    }

    #[test]
    fn flat_image_does_not_divide_by_zero() {
        let img = Image2D::filled(Geometry::new(2, 2), ImageKind::Mask, 0.0);
        assert!(to_gray(&img, auto_window(&img)).pixels().all(|p| p[0] == 0));
    }
}
