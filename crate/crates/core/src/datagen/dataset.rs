//! Directory datasets: `<root>/input/*.png`, `<root>/gt/*.png` and an optional
//! `<root>/mask/*.png` (single channel, 0 or 255), matched by file name.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::mask::{derive_mask_with, MaskParams};
use super::scene::SceneSpec;
use super::ImageTriplet;
use crate::error::{Error, Result};
use crate::image::Image;

fn png_names(dir: &Path) -> Result<BTreeSet<String>> {
    let mut names = BTreeSet::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                names.insert(name.to_string());
            }
        }
    }
    Ok(names)
}

fn first_orphan<'a>(a: &'a BTreeSet<String>, b: &'a BTreeSet<String>) -> Option<&'a String> {
    a.difference(b).next()
}

/// Streams triplets from a dataset directory in lexicographic file order.
///
/// The listing is validated up front; images are decoded lazily.
pub struct DatasetReader {
    root: PathBuf,
    names: Vec<String>,
    has_masks: bool,
    mask_params: MaskParams,
    next: usize,
}

impl DatasetReader {
    pub fn open(root: &Path) -> Result<Self> {
        Self::open_with(root, MaskParams::default())
    }

    pub fn open_with(root: &Path, mask_params: MaskParams) -> Result<Self> {
        let inputs = png_names(&root.join("input"))?;
        let gts = png_names(&root.join("gt"))?;
        if let Some(o) = first_orphan(&inputs, &gts) {
            return Err(Error::Listing(format!("input/{o} has no matching gt/{o}")));
        }
        if let Some(o) = first_orphan(&gts, &inputs) {
            return Err(Error::Listing(format!("gt/{o} has no matching input/{o}")));
        }
        let mask_dir = root.join("mask");
        let has_masks = mask_dir.is_dir();
        if has_masks {
            let masks = png_names(&mask_dir)?;
            if let Some(o) = first_orphan(&inputs, &masks) {
                return Err(Error::Listing(format!("input/{o} has no matching mask/{o}")));
            }
            if let Some(o) = first_orphan(&masks, &inputs) {
                return Err(Error::Listing(format!("mask/{o} has no matching input/{o}")));
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            names: inputs.into_iter().collect(),
            has_masks,
            mask_params,
            next: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    fn read(&self, name: &str) -> Result<ImageTriplet> {
        let load_rgb = |sub: &str| -> Result<Image> {
            let path = self.root.join(sub).join(name);
            let im = Image::load_png(&path)?;
            if im.channels() == 3 {
                Ok(im)
            } else {
                let g = im.data().iter().flat_map(|&v| [v, v, v]).collect();
                Image::from_vec(im.height(), im.width(), 3, g)
            }
        };
        let input = load_rgb("input")?;
        let gt = load_rgb("gt")?;
        input.ensure_same_dims(&gt)?;
        let mask = if self.has_masks {
            let raw = Image::load_png(&self.root.join("mask").join(name))?;
            let lum = raw.luminance();
            let bin = lum.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
            Image::from_vec(raw.height(), raw.width(), 1, bin)?
        } else {
            derive_mask_with(&input, &gt, self.mask_params)?
        };
        let stem = Path::new(name)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(name)
            .to_string();
        let t = ImageTriplet {
            input,
            gt,
            mask,
            id: stem,
        };
        t.validate()?;
        Ok(t)
    }
}

impl Iterator for DatasetReader {
    type Item = Result<ImageTriplet>;

    fn next(&mut self) -> Option<Self::Item> {
        let name = self.names.get(self.next)?.clone();
        self.next += 1;
        Some(self.read(&name))
    }
}

/// Load every triplet of a dataset directory.
pub fn load_dataset(root: &Path) -> Result<Vec<ImageTriplet>> {
    DatasetReader::open(root)?.collect()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub file: String,
    pub spec: SceneSpec,
}

/// Record of how a synthetic dataset was generated.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub generator: String,
    pub entries: Vec<ManifestEntry>,
}

/// Write triplets in the directory layout read by [`load_dataset`]. When a
/// manifest is given it is written to `<root>/manifest.json`.
pub fn write_dataset(root: &Path, triplets: &[ImageTriplet], manifest: Option<&Manifest>) -> Result<()> {
    for sub in ["input", "gt", "mask"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for t in triplets {
        let name = format!("{}.png", t.id);
        t.input.save_png(&root.join("input").join(&name))?;
        t.gt.save_png(&root.join("gt").join(&name))?;
        t.mask.save_png(&root.join("mask").join(&name))?;
    }
    if let Some(m) = manifest {
        let path = root.join("manifest.json");
        let text = serde_json::to_string_pretty(m)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{derive_mask, generate_corpus};

    fn make_dirs(root: &Path, subs: &[&str]) {
        for s in subs {
            fs::create_dir_all(root.join(s)).unwrap();
        }
    }

    #[test]
    fn empty_directories_give_empty_stream() {
        let dir = tempfile::tempdir().unwrap();
        make_dirs(dir.path(), &["input", "gt"]);
        assert!(load_dataset(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn triplets_come_back_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let mut ts = generate_corpus(10, 3, (32, 32), 1).unwrap();
        ts.reverse();
        write_dataset(dir.path(), &ts, None).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        let ids: Vec<_> = loaded.iter().map(|t| t.id.as_str()).collect();
        assert_eq!(ids, ["syn_000010", "syn_000011", "syn_000012"]);
        assert_eq!(loaded[0].mask, ts[2].mask);
    }

    #[test]
    fn missing_mask_dir_falls_back_to_derived_masks() {
        let dir = tempfile::tempdir().unwrap();
        let ts = generate_corpus(20, 2, (32, 32), 1).unwrap();
        write_dataset(dir.path(), &ts, None).unwrap();
        fs::remove_dir_all(dir.path().join("mask")).unwrap();
        for t in load_dataset(dir.path()).unwrap() {
            let p = MaskParams::default();
            let direct = derive_mask(&t.input, &t.gt, p.tau, p.dilate_iters).unwrap();
            assert_eq!(t.mask, direct);
        }
    }

    #[test]
    fn orphans_are_named() {
        let dir = tempfile::tempdir().unwrap();
        make_dirs(dir.path(), &["input", "gt"]);
        Image::new(16, 16, 3)
            .save_png(&dir.path().join("input").join("lonely.png"))
            .unwrap();
        match DatasetReader::open(dir.path()) {
            Err(Error::Listing(msg)) => assert!(msg.contains("lonely.png")),
            other => panic!("expected listing error, got {:?}", other.map(|r| r.len())),
        }
    }

    #[test]
    fn undecodable_image_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        make_dirs(dir.path(), &["input", "gt"]);
        fs::write(dir.path().join("input").join("a.png"), b"not a png").unwrap();
        fs::write(dir.path().join("gt").join("a.png"), b"not a png").unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("a.png"));
    }
}
