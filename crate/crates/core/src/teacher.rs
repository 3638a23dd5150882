//! Stage two: produce HR counterparts for condensed LR patches through a
//! pluggable upsampler. Backends never feed back into condensation, so the
//! condensed pixels are identical no matter which teacher later runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use crate::datapipe::{read_png, upsample_bicubic, write_png, PatchKind, PatchSet};
use crate::error::{Error, Result};
use crate::numerics::{Element, Tensor};

/// How HR targets are produced from LR patches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum UpsamplerBackend {
    /// Built-in bicubic kernel, run in the upsampling direction.
    Bicubic,
    /// Shell command template run under `sh -c`. `{in_dir}`, `{out_dir}` and
    /// `{scale}` are substituted (paths shell-quoted) before execution; the
    /// command finds `lr_<n>.png` in the input dir and must write
    /// `hr_<n>.png` at exactly scale× size, exiting 0 on success.
    ExternalCommand { template: String },
    /// Directory already containing `hr_<n>.png` outputs.
    PrecomputedDir { dir: PathBuf },
}

/// A backend plus its upsampling factor.
#[derive(Clone, Debug)]
pub struct Upsampler {
    pub backend: UpsamplerBackend,
    pub scale: usize,
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', "'\\''"))
}

fn utf8_path(path: &Path) -> Result<&str> {
    path.to_str()
        .ok_or_else(|| Error::Backend(format!("non-UTF-8 path {}", path.display())))
}

impl Upsampler {
    pub fn new(backend: UpsamplerBackend, scale: usize) -> Result<Self> {
        if scale == 0 {
            return Err(Error::Config("upsampler scale must be positive".into()));
        }
        Ok(Upsampler { backend, scale })
    }

    /// Map an LR patch set to its HR counterpart: same count, same order,
    /// index-aligned pairing, spatial size multiplied by the scale.
    pub fn upsample<S: Element>(&self, lr: &PatchSet<S>) -> Result<PatchSet<S>> {
        let hr_kind = match lr.kind {
            PatchKind::RealLr => PatchKind::RealHr,
            PatchKind::SyntheticLr => PatchKind::SyntheticHr,
            other => {
                return Err(Error::Contract(format!("upsampler input must be LR, got {other:?}")))
            }
        };
        match &self.backend {
            UpsamplerBackend::Bicubic => upsample_bicubic(lr, self.scale),
            UpsamplerBackend::ExternalCommand { template } => {
                let work = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
                run_external(template, lr, hr_kind, self.scale, work.path())
            }
            UpsamplerBackend::PrecomputedDir { dir } => {
                collect_outputs(dir, lr, hr_kind, self.scale)
            }
        }
    }
}

/// Stage the LR set as PNGs under `work`, run the substituted command, and
/// collect the outputs. `work` is wiped with its temp dir when it drops, so
/// a failed run leaves nothing behind.
fn run_external<S: Element>(
    template: &str,
    lr: &PatchSet<S>,
    hr_kind: PatchKind,
    scale: usize,
    work: &Path,
) -> Result<PatchSet<S>> {
    let in_dir = work.join("in");
    let out_dir = work.join("out");
    fs::create_dir(&in_dir).map_err(|e| Error::io(in_dir.clone(), e))?;
    fs::create_dir(&out_dir).map_err(|e| Error::io(out_dir.clone(), e))?;
    for n in 0..lr.len() {
        write_png(&in_dir.join(format!("lr_{n}.png")), lr.patch(n), lr.height(), lr.width())?;
    }
    let cmd = template
        .replace("{in_dir}", &shell_quote(utf8_path(&in_dir)?))
        .replace("{out_dir}", &shell_quote(utf8_path(&out_dir)?))
        .replace("{scale}", &scale.to_string());
    let output = Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .output()
        .map_err(|e| Error::Backend(format!("cannot run `{cmd}`: {e}")))?;
    if !output.status.success() {
        return Err(Error::Backend(format!(
            "command exited with {}: {}",
            output.status,
            String::from_utf8_lossy(&output.stderr).trim()
        )));
    }
    collect_outputs(&out_dir, lr, hr_kind, scale)
}

/// Gather `hr_<n>.png` for every LR index. Any missing or mis-sized file
/// fails the whole set — partial teacher output is never returned.
fn collect_outputs<S: Element>(
    dir: &Path,
    lr: &PatchSet<S>,
    kind: PatchKind,
    scale: usize,
) -> Result<PatchSet<S>> {
    let (want_h, want_w) = (lr.height() * scale, lr.width() * scale);
    let mut stack = Tensor::zeros(&[lr.len(), 3, want_h, want_w]);
    let mut problems = Vec::new();
    for n in 0..lr.len() {
        let path = dir.join(format!("hr_{n}.png"));
        if !path.exists() {
            problems.push(format!("hr_{n}.png missing"));
            continue;
        }
        let img = read_png::<S>(&path)?;
        if img.shape() != [3, want_h, want_w] {
            problems.push(format!(
                "hr_{n}.png is {}x{}, expected {want_h}x{want_w}",
                img.dim(1),
                img.dim(2)
            ));
            continue;
        }
        let len = img.numel();
        stack.data_mut()[n * len..(n + 1) * len].copy_from_slice(img.data());
    }
    if !problems.is_empty() {
        return Err(Error::Backend(format!(
            "{} bad output(s) in {}: {}",
            problems.len(),
            dir.display(),
            problems.join("; ")
        )));
    }
    PatchSet::new(stack, lr.source_id.clone(), lr.coords.clone(), kind)
}
