//! Labeled (`images/` + `labels/`) and unlabeled image directories.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use walkdir::WalkDir;

use crate::augment::ImageSample;
use crate::boxes::GroundTruthBox;
use crate::error::{Error, Result};

use super::image::{ppm_size, read_ppm};

pub const IMAGE_EXTENSION: &str = "ppm";

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub image: PathBuf,
    pub label: Option<PathBuf>,
    pub boxes: Vec<GroundTruthBox>,
    /// `(width, height)`.
    pub size: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub split: String,
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
    /// Files that looked like images but could not be read.
    pub skipped: Vec<PathBuf>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Decodes every image, in manifest order.
    pub fn load_images(&self) -> Result<Vec<ImageSample>> {
        self.entries
            .par_iter()
            .map(|e| {
                let pixels = read_ppm(&e.image)?;
                let id = e.image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                ImageSample::new(pixels, e.boxes.clone(), id)
            })
            .collect()
    }
}

fn split_name(dir: &Path) -> String {
    dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn is_image(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case(IMAGE_EXTENSION))
}

/// Parses one label file: lines `class cx cy w h`, normalized.
pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<GroundTruthBox>> {
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.into(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", fields.len())));
        }
        let class: u32 = fields[0].parse().map_err(|_| err(format!("bad class id `{}`", fields[0])))?;
        if class != 0 {
            return Err(err(format!("class {class} out of range for a single-class dataset")));
        }
        let mut v = [0f32; 4];
        for (k, f) in fields[1..].iter().enumerate() {
            v[k] = f.parse().map_err(|_| err(format!("bad number `{f}`")))?;
            if !(0.0..=1.0).contains(&v[k]) {
                return Err(err(format!("value {f} outside [0, 1]")));
            }
        }
        if v[2] <= 0.0 || v[3] <= 0.0 {
            return Err(err("box width and height must be positive".into()));
        }
        boxes.push(GroundTruthBox::new(v[0], v[1], v[2], v[3]));
    }
    Ok(boxes)
}

fn sorted_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory")));
    }
    let mut out = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::io(dir, e.into()))?;
        if entry.file_type().is_file() && is_image(entry.path()) {
            out.push(entry.into_path());
        }
    }
    Ok(out)
}

/// `dir/images/*.ppm` with labels from `dir/labels/<stem>.txt`. Images
/// without a label file have no boxes.
pub fn load_labeled_dataset(dir: &Path) -> Result<DatasetManifest> {
    let images = sorted_images(&dir.join("images"))?;
    let mut entries = Vec::with_capacity(images.len());
    for image in images {
        let stem = image.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let label = dir.join("labels").join(format!("{stem}.txt"));
        let (label, boxes) = if label.is_file() {
            let text = std::fs::read_to_string(&label).map_err(|e| Error::io(&label, e))?;
            let boxes = parse_labels(&text, &label)?;
            (Some(label), boxes)
        } else {
            (None, Vec::new())
        };
        let size = ppm_size(&image)?;
        entries.push(DatasetEntry { image, label, boxes, size });
    }
    if entries.is_empty() {
        return Err(Error::invalid(format!("no .{IMAGE_EXTENSION} images under {}", dir.join("images").display())));
    }
    Ok(DatasetManifest {
        split: split_name(dir),
        root: dir.into(),
        entries,
        skipped: Vec::new(),
    })
}

/// Every readable image under `dir`, recursively, in lexicographic order.
pub fn load_unlabeled_dataset(dir: &Path) -> Result<DatasetManifest> {
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for image in sorted_images(dir)? {
        match ppm_size(&image) {
            Ok(size) => entries.push(DatasetEntry {
                image,
                label: None,
                boxes: Vec::new(),
                size,
            }),
            Err(e) => {
                log::warn!("skipping unreadable image: {e}");
                skipped.push(image);
            }
        }
    }
    if entries.is_empty() {
        return Err(Error::invalid(format!("no readable images under {}", dir.display())));
    }
    Ok(DatasetManifest {
        split: split_name(dir),
        root: dir.into(),
        entries,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_lines() {
        let p = Path::new("x.txt");
        let b = parse_labels("0 0.5 0.5 0.2 0.4\n", p).unwrap();
        assert_eq!(b, vec![GroundTruthBox::new(0.5, 0.5, 0.2, 0.4)]);
        assert!(parse_labels("", p).unwrap().is_empty());
        match parse_labels("0 0.5 0.5 0.2 0.4\n1 0.5 0.5 0.2 0.4", p) {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(parse_labels("0 1.5 0.5 0.2 0.4", p).is_err());
        assert!(parse_labels("0 0.5 0.5 0.2", p).is_err());
    }
}
