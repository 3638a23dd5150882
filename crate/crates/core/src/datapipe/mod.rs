//! Dataset ingestion and persistence.
//!
//! Source images are cropped into overlapped HR patches on a stride grid
//! (with a flush-to-edge position so every pixel is covered), degraded to LR
//! by bicubic downsampling, and persisted as 8-bit PNG pairs under a JSON
//! manifest.

mod resample;
mod store;

pub use resample::{bicubic_resize_raw, downsample_bicubic, upsample_bicubic};
pub use store::{
    read_dataset, validate_dataset, write_dataset, DatasetManifest, InstancePair, ManifestInstance,
    FORMAT_VERSION,
};
pub(crate) use store::{read_png, write_png};

use crate::error::{Error, Result};
use crate::numerics::{Element, Tensor};

/// What a patch set holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchKind {
    RealLr,
    RealHr,
    SyntheticLr,
    SyntheticHr,
}

impl PatchKind {
    pub fn is_synthetic(self) -> bool {
        matches!(self, PatchKind::SyntheticLr | PatchKind::SyntheticHr)
    }
}

/// A uniform stack of RGB patches from one instance, pixels in `[0,1]`.
/// `coords` are per-patch `(top, left)` in the source image — present for
/// freshly cropped real patches, empty for synthetic ones (and for sets read
/// back from disk, where the crop origin is no longer known).
#[derive(Clone, Debug)]
pub struct PatchSet<S: Element> {
    pub pixels: Tensor<S>,
    pub source_id: String,
    pub coords: Vec<(usize, usize)>,
    pub kind: PatchKind,
}

impl<S: Element> PatchSet<S> {
    pub fn new(pixels: Tensor<S>, source_id: String, coords: Vec<(usize, usize)>, kind: PatchKind) -> Result<Self> {
        let set = PatchSet { pixels, source_id, coords, kind };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.rank() != 4 || self.pixels.dim(1) != 3 {
            return Err(Error::Contract(format!(
                "patch set wants [N,3,H,W] pixels, got {:?}",
                self.pixels.shape()
            )));
        }
        if !self.pixels.all_finite() {
            return Err(Error::Contract(format!("non-finite pixel in patch set {}", self.source_id)));
        }
        if self
            .pixels
            .data()
            .iter()
            .any(|&v| v < S::zero() || v > S::one())
        {
            return Err(Error::Contract(format!("pixel outside [0,1] in patch set {}", self.source_id)));
        }
        if self.kind.is_synthetic() && !self.coords.is_empty() {
            return Err(Error::Contract("synthetic patches carry no source coordinates".into()));
        }
        if !self.coords.is_empty() && self.coords.len() != self.len() {
            return Err(Error::Contract(format!(
                "{} coordinates for {} patches",
                self.coords.len(),
                self.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pixels.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.pixels.dim(2)
    }

    pub fn width(&self) -> usize {
        self.pixels.dim(3)
    }

    /// The flat pixel slice of one patch (`3 * H * W` values).
    pub fn patch(&self, n: usize) -> &[S] {
        let stride = 3 * self.height() * self.width();
        &self.pixels.data()[n * stride..(n + 1) * stride]
    }
}

/// The crop grid along one axis: positions `0, stride, 2*stride, ...` while
/// the window fits, plus a final flush-to-edge position when the last window
/// does not already touch the border. Covers every pixel.
pub fn grid_positions(extent: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut positions: Vec<usize> = (0..)
        .map(|i| i * stride)
        .take_while(|p| p + size <= extent)
        .collect();
    if let Some(&last) = positions.last() {
        if last + size < extent {
            positions.push(extent - size);
        }
    }
    positions
}

/// Crop a `[3, H, W]` image into overlapped `size x size` HR patches.
pub fn crop_patches<S: Element>(
    image: &Tensor<S>,
    size: usize,
    stride: usize,
    source_id: &str,
) -> Result<PatchSet<S>> {
    if image.rank() != 3 || image.dim(0) != 3 {
        return Err(Error::Contract(format!("crop wants a [3,H,W] image, got {:?}", image.shape())));
    }
    if stride == 0 || size == 0 {
        return Err(Error::Config("crop size and stride must be positive".into()));
    }
    let (h, w) = (image.dim(1), image.dim(2));
    if size > h || size > w {
        return Err(Error::Config(format!(
            "crop size {size} exceeds image extent {h}x{w} for {source_id}"
        )));
    }
    let rows = grid_positions(h, size, stride);
    let cols = grid_positions(w, size, stride);
    let mut coords = Vec::with_capacity(rows.len() * cols.len());
    let mut data = Vec::with_capacity(rows.len() * cols.len() * 3 * size * size);
    for &top in &rows {
        for &left in &cols {
            coords.push((top, left));
            for c in 0..3 {
                for y in top..top + size {
                    let base = (c * h + y) * w + left;
                    data.extend_from_slice(&image.data()[base..base + size]);
                }
            }
        }
    }
    PatchSet::new(
        Tensor::new(vec![coords.len(), 3, size, size], data)?,
        source_id.to_string(),
        coords,
        PatchKind::RealHr,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_covers_paper_protocol() {
        assert_eq!(grid_positions(512, 256, 128), vec![0, 128, 256]);
        assert_eq!(grid_positions(256, 256, 128), vec![0]);
        assert_eq!(grid_positions(300, 256, 128), vec![0, 44]);
    }

    #[test]
    fn crop_counts_and_coords() {
        let img = Tensor::<f64>::from_fn(&[3, 12, 16], |i| (i % 97) as f64 / 96.0);
        let set = crop_patches(&img, 8, 4, "demo").unwrap();
        // rows: 0..=4 -> [0,4]; cols: [0,4,8]
        assert_eq!(set.len(), 6);
        assert_eq!(set.coords[0], (0, 0));
        assert_eq!(set.coords[5], (4, 8));
        assert_eq!(set.pixels.shape(), &[6, 3, 8, 8]);
        assert_eq!(set.kind, PatchKind::RealHr);
        // patch (4, 8), channel 2, local pixel (3, 5) reads source (7, 13)
        let want = img.data()[(2 * 12 + 7) * 16 + 13];
        assert_eq!(set.patch(5)[2 * 64 + 3 * 8 + 5], want);
    }

    #[test]
    fn oversized_crop_is_config_error() {
        let img = Tensor::<f64>::zeros(&[3, 4, 4]);
        assert!(matches!(crop_patches(&img, 8, 4, "x"), Err(Error::Config(_))));
    }

    #[test]
    fn union_of_windows_covers_every_pixel() {
        // holds whenever windows can touch, i.e. stride <= size
        for &(extent, size, stride) in &[(17usize, 5usize, 3usize), (23, 7, 7), (9, 4, 4), (300, 256, 128)] {
            let mut covered = vec![false; extent];
            for p in grid_positions(extent, size, stride) {
                covered[p..p + size].iter_mut().for_each(|c| *c = true);
            }
            assert!(covered.iter().all(|&c| c), "gap for {extent}/{size}/{stride}");
        }
    }

    #[test]
    fn synthetic_sets_reject_coords() {
        let pix = Tensor::<f64>::filled(&[1, 3, 2, 2], 0.5);
        let err = PatchSet::new(pix, "s".into(), vec![(0, 0)], PatchKind::SyntheticLr);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn out_of_range_pixels_are_refused() {
        let pix = Tensor::<f64>::filled(&[1, 3, 2, 2], 1.5);
        assert!(PatchSet::new(pix, "s".into(), vec![], PatchKind::RealHr).is_err());
    }
}
