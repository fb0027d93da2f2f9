//! Frame I/O: numbered PNG directories, video files via `ffmpeg`, and
//! uniform temporal sampling.

use std::path::{Path, PathBuf};
use std::process::Command;

use image::{imageops::FilterType, DynamicImage, ImageBuffer, Rgb, RgbImage};
use ndarray::Array3;

use crate::error::{Error, Result};

/// An RGB frame laid out `(3, height, width)` with values in `[0, 1]`.
pub type Frame = Array3<f64>;

/// Indices of `k` frames at uniform stride over a clip of `total` frames,
/// starting at frame 0.
pub fn uniform_indices(total: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Config("frame count must be at least 1".into()));
    }
    if total < k {
        return Err(Error::Config(format!("clip has {total} frames, {k} requested")));
    }
    Ok((0..k).map(|i| i * total / k).collect())
}

/// Sorted frame files of a directory. Files are ordered by the number
/// embedded in their stem, falling back to the name.
pub fn list_frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            files.push(path);
        }
    }
    let number = |p: &PathBuf| -> Option<u64> {
        let stem = p.file_stem()?.to_str()?;
        let digits: String = stem.chars().filter(|c| c.is_ascii_digit()).collect();
        digits.parse().ok()
    };
    files.sort_by(|a, b| number(a).cmp(&number(b)).then_with(|| a.cmp(b)));
    Ok(files)
}

/// Reads all frames of `source`: a directory of numbered PNGs or a video
/// file decoded through an `ffmpeg` executable on `PATH`.
pub fn frame_files(source: &Path, scratch: &Path) -> Result<Vec<PathBuf>> {
    if source.is_dir() {
        return list_frame_files(source);
    }
    if !source.is_file() {
        return Err(Error::io(
            source,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such video or frame directory"),
        ));
    }
    std::fs::create_dir_all(scratch).map_err(|e| Error::io(scratch, e))?;
    let status = Command::new("ffmpeg")
        .args(["-loglevel", "error", "-nostdin", "-i"])
        .arg(source)
        .args(["-vsync", "0"])
        .arg(scratch.join("%05d.png"))
        .status()
        .map_err(|e| Error::io(source, std::io::Error::new(e.kind(), format!("cannot run ffmpeg: {e}"))))?;
    if !status.success() {
        return Err(Error::Image {
            path: source.to_path_buf(),
            message: format!("ffmpeg exited with {status}"),
        });
    }
    list_frame_files(scratch)
}

pub fn load_image(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Center-crops to a square and resizes to `size × size`.
pub fn preprocess(img: &DynamicImage, size: usize) -> Frame {
    let (w, h) = (img.width(), img.height());
    let side = w.min(h);
    let cropped = img.crop_imm((w - side) / 2, (h - side) / 2, side, side);
    let resized = if side as usize == size {
        cropped.to_rgb8()
    } else {
        cropped
            .resize_exact(size as u32, size as u32, FilterType::Triangle)
            .to_rgb8()
    };
    rgb_to_frame(&resized)
}

pub fn rgb_to_frame(img: &RgbImage) -> Frame {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Array3::from_shape_fn((3, h, w), |(c, y, x)| img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
}

pub fn frame_to_rgb(frame: &Frame) -> RgbImage {
    let (_, h, w) = frame.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (frame[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

pub fn save_frame(frame: &Frame, path: &Path) -> Result<()> {
    frame_to_rgb(frame).save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn frame_to_png(frame: &Frame) -> Result<Vec<u8>> {
    let mut bytes = std::io::Cursor::new(Vec::new());
    frame_to_rgb(frame)
        .write_to(&mut bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Backend(format!("png encode: {e}")))?;
    Ok(bytes.into_inner())
}

/// Writes frames as `000.png`, `001.png`, … into `dir`.
pub fn save_frames(frames: &[Frame], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        save_frame(f, &dir.join(format!("{i:03}.png")))?;
    }
    Ok(())
}

/// Loads every frame of a PNG directory at its stored resolution.
pub fn load_frames(dir: &Path) -> Result<Vec<Frame>> {
    list_frame_files(dir)?
        .iter()
        .map(|p| load_image(p).map(|img| rgb_to_frame(&img.to_rgb8())))
        .collect()
}

/// Samples `k` frames uniformly and preprocesses them to `size × size`.
pub fn sample_frames(source: &Path, k: usize, size: usize) -> Result<Vec<Frame>> {
    let scratch = std::env::temp_dir().join(format!("eve-frames-{}", std::process::id()));
    let files = frame_files(source, &scratch);
    let result = files.and_then(|files| {
        let indices = uniform_indices(files.len(), k)?;
        indices
            .iter()
            .map(|&i| load_image(&files[i]).map(|img| preprocess(&img, size)))
            .collect()
    });
    if scratch.exists() {
        let _ = std::fs::remove_dir_all(&scratch);
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_sampling_examples() {
        assert_eq!(uniform_indices(8, 8).unwrap(), (0..8).collect::<Vec<_>>());
        assert_eq!(uniform_indices(16, 8).unwrap(), vec![0, 2, 4, 6, 8, 10, 12, 14]);
        assert_eq!(uniform_indices(5, 1).unwrap(), vec![0]);
        assert_eq!(uniform_indices(10, 4).unwrap(), vec![0, 2, 5, 7]);
        assert!(uniform_indices(3, 4).is_err());
        assert!(uniform_indices(3, 0).is_err());
    }

    #[test]
    fn numbered_files_sort_numerically() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["10.png", "2.png", "frame_1.png", "notes.txt"] {
            let f = Array3::from_elem((3, 4, 4), 0.5);
            if name.ends_with(".png") {
                save_frame(&f, &dir.path().join(name)).unwrap();
            } else {
                std::fs::write(dir.path().join(name), "x").unwrap();
            }
        }
        let names: Vec<_> = list_frame_files(dir.path())
            .unwrap()
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, vec!["frame_1.png", "2.png", "10.png"]);
    }

    #[test]
    fn crop_then_resize() {
        let img = RgbImage::from_fn(32, 16, |x, _| if !(8..24).contains(&x) { Rgb([255, 0, 0]) } else { Rgb([0, 0, 255]) });
        let f = preprocess(&DynamicImage::ImageRgb8(img), 8);
        assert_eq!(f.dim(), (3, 8, 8));
        assert!(f.slice(ndarray::s![2, .., ..]).iter().all(|v| *v > 0.99));
        assert!(f.slice(ndarray::s![0, .., ..]).iter().all(|v| *v < 0.01));
    }

    #[test]
    fn png_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let f = Array3::from_shape_fn((3, 4, 5), |(c, y, x)| (c + y + x) as f64 / 10.0);
        save_frames(&[f.clone(), f.clone()], dir.path()).unwrap();
        let back = load_frames(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        let err = back[0].iter().zip(f.iter()).map(|(a, b)| (a - b.min(1.0)).abs()).fold(0.0, f64::max);
        assert!(err <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn missing_source_is_io_error() {
        let err = sample_frames(Path::new("/definitely/not/here"), 2, 8).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
