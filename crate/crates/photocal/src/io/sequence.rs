//! Loading image sequences from a directory, optionally with a times file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{Frame, GrayImage};

/// Load an 8-bit grayscale sequence.
///
/// Frames are ordered lexicographically by filename; when `times_file` is
/// given, filename stems must parse as integer ids, frames are ordered by id
/// and each must have a `id timestamp exposure_ms` entry. Color or non-8-bit
/// images are rejected rather than converted, since conversion would alter
/// the photometry being calibrated.
pub fn load_sequence(directory: &Path, times_file: Option<&Path>) -> Result<Vec<Frame>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(directory)
        .map_err(|e| Error::io(directory, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort_by(|a, b| a.file_name().cmp(&b.file_name()));

    if paths.is_empty() {
        return Err(Error::Image {
            path: directory.to_path_buf(),
            reason: "no .png or .pgm frames found".into(),
        });
    }

    let times = times_file.map(parse_times_file).transpose()?;

    let mut frames = Vec::with_capacity(paths.len());
    for path in &paths {
        let image = load_gray8(path)?;
        let gt_exposure = match &times {
            None => None,
            Some((times_path, map)) => {
                let id = file_stem_id(path)?;
                let exposure = map.get(&id).copied().ok_or_else(|| Error::Times {
                    path: times_path.clone(),
                    reason: format!("no entry for frame id {id} ({})", path.display()),
                })?;
                Some(exposure)
            }
        };
        frames.push((path, image, gt_exposure));
    }

    if times.is_some() {
        frames.sort_by_key(|(path, _, _)| file_stem_id(path).expect("checked above"));
    }

    Ok(frames
        .into_iter()
        .enumerate()
        .map(|(index, (_, image, gt_exposure))| Frame {
            index,
            image,
            gt_exposure,
        })
        .collect())
}

fn file_stem_id(path: &Path) -> Result<u64> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default();
    stem.parse::<u64>().map_err(|_| Error::Times {
        path: path.to_path_buf(),
        reason: format!("filename stem '{stem}' is not an integer frame id"),
    })
}

fn parse_times_file(path: &Path) -> Result<(PathBuf, BTreeMap<u64, f64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let entry_err = |reason: String| Error::Times {
            path: path.to_path_buf(),
            reason: format!("line {} ('{}'): {}", lineno + 1, line, reason),
        };
        if fields.len() < 3 {
            return Err(entry_err("expected 'id timestamp exposure'".into()));
        }
        let id: u64 = fields[0]
            .parse()
            .map_err(|_| entry_err(format!("bad frame id '{}'", fields[0])))?;
        let exposure: f64 = fields[2]
            .parse()
            .map_err(|_| entry_err(format!("bad exposure '{}'", fields[2])))?;
        if !(exposure > 0.0) {
            return Err(entry_err(format!(
                "exposure must be positive, got {exposure}"
            )));
        }
        map.insert(id, exposure);
    }
    Ok((path.to_path_buf(), map))
}

fn load_gray8(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    match img {
        image::DynamicImage::ImageLuma8(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            Ok(GrayImage::new(w, h, buf.into_raw()))
        }
        other => Err(Error::Image {
            path: path.to_path_buf(),
            reason: format!(
                "expected 8-bit grayscale, got {:?}; color input is rejected, not converted",
                other.color()
            ),
        }),
    }
}

/// Write one frame as an 8-bit grayscale PNG.
pub fn write_gray8_png(path: &Path, img: &GrayImage) -> Result<()> {
    let buf = image::GrayImage::from_raw(img.width() as u32, img.height() as u32, img.data().to_vec())
        .expect("dimensions match buffer");
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Write a 16-bit grayscale PNG from raw values.
pub fn write_gray16_png(path: &Path, width: usize, height: usize, data: &[u16]) -> Result<()> {
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(
        width as u32,
        height as u32,
        data.to_vec(),
    )
    .expect("dimensions match buffer");
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Read a two-column `frame_index,exposure` CSV (header optional).
pub fn read_exposures_csv(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<(u64, f64)> = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("frame") {
            continue;
        }
        let mut parts = line.split(',');
        let bad = |reason: &str| Error::CalibFile {
            path: path.to_path_buf(),
            reason: format!("bad csv line '{line}': {reason}"),
        };
        let idx: u64 = parts
            .next()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| bad("missing frame index"))?;
        let exp: f64 = parts
            .next()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| bad("missing exposure"))?;
        rows.push((idx, exp));
    }
    rows.sort_by_key(|(i, _)| *i);
    Ok(rows.into_iter().map(|(_, e)| e).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_pgm(path: &Path, w: usize, h: usize, value: u8) {
        let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
        bytes.extend(std::iter::repeat(value).take(w * h));
        std::fs::write(path, bytes).unwrap();
    }

    #[test]
    fn loads_pgm_directory_in_order() {
        let dir = tempfile::tempdir().unwrap();
        for (name, v) in [("b.pgm", 2u8), ("a.pgm", 1), ("c.pgm", 3)] {
            write_pgm(&dir.path().join(name), 4, 3, v);
        }
        let frames = load_sequence(dir.path(), None).unwrap();
        assert_eq!(frames.len(), 3);
        assert_eq!(
            frames.iter().map(|f| f.image.get(0, 0)).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
        assert!(frames.iter().all(|f| f.gt_exposure.is_none()));
        assert_eq!(frames[2].index, 2);
    }

    #[test]
    fn times_file_populates_exposures() {
        let dir = tempfile::tempdir().unwrap();
        for id in [7u64, 8, 9] {
            write_pgm(&dir.path().join(format!("{id}.pgm")), 4, 3, id as u8);
        }
        let times = dir.path().join("times.txt");
        std::fs::write(&times, "7 1403636.58 10.5\n8 1403636.62 11.0\n9 1403636.66 12.0\n")
            .unwrap();
        let frames = load_sequence(dir.path(), Some(&times)).unwrap();
        assert_eq!(frames[0].gt_exposure, Some(10.5));
        assert_eq!(frames[2].gt_exposure, Some(12.0));
    }

    #[test]
    fn zero_exposure_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_pgm(&dir.path().join("0.pgm"), 4, 3, 0);
        let times = dir.path().join("times.txt");
        std::fs::write(&times, "0 100.0 0.0\n").unwrap();
        let err = load_sequence(dir.path(), Some(&times)).unwrap_err();
        assert!(err.to_string().contains("positive"), "{err}");
    }

    #[test]
    fn missing_times_entry_names_frame() {
        let dir = tempfile::tempdir().unwrap();
        write_pgm(&dir.path().join("3.pgm"), 4, 3, 0);
        let times = dir.path().join("times.txt");
        std::fs::write(&times, "4 100.0 5.0\n").unwrap();
        let err = load_sequence(dir.path(), Some(&times)).unwrap_err();
        assert!(err.to_string().contains("frame id 3"), "{err}");
    }

    #[test]
    fn color_png_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("0.png");
        let rgb = image::RgbImage::from_pixel(4, 4, image::Rgb([10, 20, 30]));
        rgb.save(&path).unwrap();
        let err = load_sequence(dir.path(), None).unwrap_err();
        assert!(err.to_string().contains("rejected"), "{err}");
    }
}
