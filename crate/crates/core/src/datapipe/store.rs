//! On-disk dataset layout: `root/manifest.json` plus per-instance
//! directories of 8-bit PNG pairs, `inst_<id>/{lr_<n>.png, hr_<n>.png}`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datapipe::{PatchKind, PatchSet};
use crate::error::{Error, Result};
use crate::numerics::{num, wide, Element, Tensor};

pub const FORMAT_VERSION: u32 = 1;

/// The dataset manifest persisted as `manifest.json`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub scale: usize,
    pub crop: usize,
    pub stride: usize,
    /// Degradation kernel identifier.
    pub kernel: String,
    /// Hash of the condensation configuration that produced a synthetic set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    /// Seeds the producing run used, by name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<BTreeMap<String, u64>>,
    pub instances: Vec<ManifestInstance>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct ManifestInstance {
    pub source_id: String,
    /// Path of the source HR image (prepared real datasets only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hr_image: Option<String>,
    /// LR/HR pair count.
    pub patches: usize,
}

/// One instance's paired LR and HR patch sets.
#[derive(Clone, Debug)]
pub struct InstancePair<S: Element> {
    pub source_id: String,
    pub lr: PatchSet<S>,
    pub hr: PatchSet<S>,
}

impl<S: Element> InstancePair<S> {
    pub fn validate(&self) -> Result<()> {
        self.lr.validate()?;
        self.hr.validate()?;
        if self.lr.len() != self.hr.len() {
            return Err(Error::Contract(format!(
                "instance {}: {} LR patches vs {} HR patches",
                self.source_id,
                self.lr.len(),
                self.hr.len()
            )));
        }
        Ok(())
    }
}

fn instance_dir(root: &Path, source_id: &str) -> PathBuf {
    root.join(format!("inst_{source_id}"))
}

/// Quantize one patch to 8-bit RGB rows (HWC order) and write it as PNG.
pub(crate) fn write_png<S: Element>(path: &Path, patch: &[S], h: usize, w: usize) -> Result<()> {
    let mut bytes = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = wide(patch[(c * h + y) * w + x]).clamp(0.0, 1.0);
                bytes.push((v * 255.0).round() as u8);
            }
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, bytes).expect("sized buffer");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path.to_path_buf(), io),
            other => Error::Format(format!("cannot encode {}: {other}", path.display())),
        })
}

/// Read a PNG back as a `[3, H, W]` tensor in `[0,1]`.
pub(crate) fn read_png<S: Element>(path: &Path) -> Result<Tensor<S>> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path.to_path_buf(), io),
        other => Error::Format(format!("cannot decode {}: {other}", path.display())),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![S::zero(); 3 * h * w];
    for (x, y, pixel) in rgb.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[(c * h + y) * w + x] = num::<S>(pixel[c] as f64 / 255.0);
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Write a dataset under `root`. Refuses to overwrite a root whose existing
/// manifest records a different configuration hash.
pub fn write_dataset<S: Element>(
    root: &Path,
    manifest: &DatasetManifest,
    instances: &[InstancePair<S>],
) -> Result<()> {
    if manifest.instances.len() != instances.len() {
        return Err(Error::Contract(format!(
            "manifest lists {} instances, {} provided",
            manifest.instances.len(),
            instances.len()
        )));
    }
    for (entry, pair) in manifest.instances.iter().zip(instances) {
        pair.validate()?;
        if entry.source_id != pair.source_id || entry.patches != pair.lr.len() {
            return Err(Error::Contract(format!(
                "manifest entry {} ({} patches) does not match instance {} ({} patches)",
                entry.source_id,
                entry.patches,
                pair.source_id,
                pair.lr.len()
            )));
        }
    }
    let manifest_path = root.join("manifest.json");
    if manifest_path.exists() {
        let existing = read_manifest(root)?;
        if existing.config_hash != manifest.config_hash {
            return Err(Error::Integrity(format!(
                "{} was produced under config hash {:?}, refusing to overwrite with {:?}",
                root.display(),
                existing.config_hash,
                manifest.config_hash
            )));
        }
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root.to_path_buf(), e))?;
    for pair in instances {
        let dir = instance_dir(root, &pair.source_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(dir.clone(), e))?;
        for n in 0..pair.lr.len() {
            write_png(&dir.join(format!("lr_{n}.png")), pair.lr.patch(n), pair.lr.height(), pair.lr.width())?;
            write_png(&dir.join(format!("hr_{n}.png")), pair.hr.patch(n), pair.hr.height(), pair.hr.width())?;
        }
    }
    let json = serde_json::to_string_pretty(manifest).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(manifest_path.clone(), e))?;
    Ok(())
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(path.clone(), e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: format version {} (expected {FORMAT_VERSION})",
            path.display(),
            manifest.version
        )));
    }
    Ok(manifest)
}

/// Check that every file the manifest promises exists; returns the list of
/// missing relative paths (empty = intact).
pub fn missing_files(root: &Path, manifest: &DatasetManifest) -> Vec<String> {
    let mut missing = Vec::new();
    for entry in &manifest.instances {
        let dir = instance_dir(root, &entry.source_id);
        for n in 0..entry.patches {
            for side in ["lr", "hr"] {
                let file = dir.join(format!("{side}_{n}.png"));
                if !file.exists() {
                    missing.push(format!("inst_{}/{side}_{n}.png", entry.source_id));
                }
            }
        }
    }
    missing
}

/// Validate a dataset on disk: intact manifest, no gaps. Returns the
/// manifest on success; an integrity error names every missing file.
pub fn validate_dataset(root: &Path) -> Result<DatasetManifest> {
    let manifest = read_manifest(root)?;
    let missing = missing_files(root, &manifest);
    if !missing.is_empty() {
        return Err(Error::Integrity(format!(
            "{} missing {} file(s): {}",
            root.display(),
            missing.len(),
            missing.join(", ")
        )));
    }
    Ok(manifest)
}

/// Read a dataset back. Patch sets come back kind-tagged as synthetic when
/// the manifest carries a condensation config hash, real otherwise.
pub fn read_dataset<S: Element>(root: &Path) -> Result<(DatasetManifest, Vec<InstancePair<S>>)> {
    let manifest = validate_dataset(root)?;
    let (lr_kind, hr_kind) = if manifest.config_hash.is_some() {
        (PatchKind::SyntheticLr, PatchKind::SyntheticHr)
    } else {
        (PatchKind::RealLr, PatchKind::RealHr)
    };
    let mut instances = Vec::with_capacity(manifest.instances.len());
    for entry in &manifest.instances {
        let dir = instance_dir(root, &entry.source_id);
        let mut read_side = |side: &str, kind: PatchKind| -> Result<PatchSet<S>> {
            let mut pixels: Option<Tensor<S>> = None;
            for n in 0..entry.patches {
                let img = read_png::<S>(&dir.join(format!("{side}_{n}.png")))?;
                let stack = pixels.get_or_insert_with(|| {
                    Tensor::zeros(&[entry.patches, img.dim(0), img.dim(1), img.dim(2)])
                });
                if img.shape() != &stack.shape()[1..] {
                    return Err(Error::Integrity(format!(
                        "inst_{}/{side}_{n}.png is {:?}, expected {:?}",
                        entry.source_id,
                        img.shape(),
                        &stack.shape()[1..]
                    )));
                }
                let len = img.numel();
                stack.data_mut()[n * len..(n + 1) * len].copy_from_slice(img.data());
            }
            let pixels = pixels.ok_or_else(|| {
                Error::Integrity(format!("instance {} lists zero patches", entry.source_id))
            })?;
            PatchSet::new(pixels, entry.source_id.clone(), vec![], kind)
        };
        let lr = read_side("lr", lr_kind)?;
        let hr = read_side("hr", hr_kind)?;
        let pair = InstancePair { source_id: entry.source_id.clone(), lr, hr };
        pair.validate()?;
        instances.push(pair);
    }
    Ok((manifest, instances))
}
