//! Out-of-process backends: external commands and pre-generated directories.
//!
//! Subprocess contract: the child receives on stdin a single JSON header line
//! `{"height":H,"width":W,"mode":M,"seed":S}` terminated by `\n`, followed
//! by a PNG.
//!
//! | mode           | stdin PNG                                 | stdout PNG                          |
//! |----------------|-------------------------------------------|-------------------------------------|
//! | `segment-gray` | 8-bit gray rendering of the lightness     | 16-bit single-channel class ids     |
//! | `segment-rgb`  | 8-bit RGB, gray replicated to 3 channels  | 16-bit single-channel class ids     |
//! | `generate`     | 16-bit single-channel class ids           | 8-bit RGB reference                 |
//!
//! Class id 0 means "unlabeled". `seed` is 0 for segmentation requests.
//! A non-zero exit status is a backend failure; stderr is kept as diagnostics.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::segmentation::SegmentationMap;
use super::{BackendDescriptor, BackendFailure, BackendKind, Contract, Generator, LatentCode, Segmenter};
use crate::colorspace::{gray_from_lightness, RgbImage};
use crate::io;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubprocessMode {
    SegmentGray,
    SegmentRgb,
    Generate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestHeader {
    pub height: usize,
    pub width: usize,
    pub mode: SubprocessMode,
    pub seed: u64,
}

/// Write a request in the subprocess wire format.
pub fn write_request(out: &mut impl Write, header: &RequestHeader, png: &[u8]) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, header)?;
    out.write_all(b"\n")?;
    out.write_all(png)
}

/// Split a request into its header and PNG payload.
pub fn read_request(bytes: &[u8]) -> Result<(RequestHeader, &[u8]), String> {
    let newline = bytes.iter().position(|&b| b == b'\n').ok_or("missing header line")?;
    let header = serde_json::from_slice(&bytes[..newline]).map_err(|e| format!("bad header: {e}"))?;
    Ok((header, &bytes[newline + 1..]))
}

/// Runs an external program per request.
#[derive(Debug, Clone)]
pub struct CommandBackend {
    pub name: String,
    pub program: PathBuf,
    pub args: Vec<String>,
    /// How segmentation input is presented; ignored for generation.
    pub segment_mode: SubprocessMode,
    pub concurrent: bool,
}

impl CommandBackend {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        let program = program.into();
        Self {
            name: format!("cmd:{}", program.display()),
            program,
            args,
            segment_mode: SubprocessMode::SegmentGray,
            concurrent: false,
        }
    }

    fn run(&self, header: &RequestHeader, png: &[u8]) -> Result<Vec<u8>, BackendFailure> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| BackendFailure::new(format!("cannot start {}: {e}", self.program.display())))?;
        let mut stdin = child.stdin.take().expect("stdin is piped");
        let mut request = Vec::with_capacity(png.len() + 128);
        write_request(&mut request, header, png).expect("writing to a Vec");
        // Feed stdin from a thread so a chatty child cannot deadlock on stdout.
        let feeder = std::thread::spawn(move || stdin.write_all(&request));
        let output = child
            .wait_with_output()
            .map_err(|e| BackendFailure::new(format!("waiting for {}: {e}", self.program.display())))?;
        let fed = feeder.join().expect("stdin feeder panicked");
        let stderr = String::from_utf8_lossy(&output.stderr).into_owned();
        if !output.status.success() {
            return Err(BackendFailure {
                message: format!("{} exited with {}", self.program.display(), output.status),
                diagnostics: stderr,
            });
        }
        if let Err(e) = fed {
            return Err(BackendFailure { message: format!("writing request: {e}"), diagnostics: stderr });
        }
        Ok(output.stdout)
    }

    fn descriptor_for(&self, kind: BackendKind) -> BackendDescriptor {
        BackendDescriptor {
            kind,
            name: self.name.clone(),
            contract: Contract::Subprocess { program: self.program.clone(), args: self.args.clone() },
        }
    }
}

impl Segmenter for CommandBackend {
    fn descriptor(&self) -> BackendDescriptor {
        self.descriptor_for(BackendKind::Segmenter)
    }

    fn segment(&self, lightness: &Array2<f32>) -> Result<Array2<u32>, BackendFailure> {
        let (h, w) = lightness.dim();
        let mode = match self.segment_mode {
            SubprocessMode::Generate => SubprocessMode::SegmentGray,
            m => m,
        };
        let gray = gray_from_lightness(lightness).map_err(|e| BackendFailure::new(e.to_string()))?;
        let png = match mode {
            SubprocessMode::SegmentRgb => io::encode_png(&gray),
            _ => io::encode_gray_png(&gray.pixels().index_axis(ndarray::Axis(2), 0).to_owned()),
        }
        .map_err(|e| BackendFailure::new(e.to_string()))?;
        let out = self.run(&RequestHeader { height: h, width: w, mode, seed: 0 }, &png)?;
        io::decode_labels_png(&out).map_err(|e| BackendFailure::new(format!("bad segmenter output: {e}")))
    }

    fn concurrent_safe(&self) -> bool {
        self.concurrent
    }
}

impl Generator for CommandBackend {
    fn descriptor(&self) -> BackendDescriptor {
        self.descriptor_for(BackendKind::Generator)
    }

    fn generate(&self, seg: &SegmentationMap, z: &LatentCode) -> Result<RgbImage, BackendFailure> {
        let (h, w) = seg.dim();
        let png = io::encode_labels_png(&seg.class_labels()).map_err(|e| BackendFailure::new(e.to_string()))?;
        let header = RequestHeader { height: h, width: w, mode: SubprocessMode::Generate, seed: z.seed };
        let out = self.run(&header, &png)?;
        io::decode_rgb(&out).map_err(|e| BackendFailure::new(format!("bad generator output: {e}")))
    }

    fn concurrent_safe(&self) -> bool {
        self.concurrent
    }
}

/// Serves pre-computed results laid out as `seg/<stem>.png` (16-bit class
/// ids) and `refs/<stem>/ref_<i>.png`. As a generator, the latent seed is the
/// reference index `i`.
#[derive(Debug, Clone)]
pub struct DirectoryBackend {
    pub root: PathBuf,
    pub stem: String,
}

impl DirectoryBackend {
    pub fn new(root: impl Into<PathBuf>, stem: impl Into<String>) -> Self {
        Self { root: root.into(), stem: stem.into() }
    }

    pub fn segmentation_path(&self) -> PathBuf {
        self.root.join("seg").join(format!("{}.png", self.stem))
    }

    pub fn reference_path(&self, index: u64) -> PathBuf {
        self.root.join("refs").join(&self.stem).join(format!("ref_{index}.png"))
    }

    /// Number of consecutive `ref_<i>.png` files starting at 0.
    pub fn reference_count(&self) -> usize {
        (0..).take_while(|&i| self.reference_path(i).is_file()).count()
    }

    fn descriptor_for(&self, kind: BackendKind) -> BackendDescriptor {
        BackendDescriptor {
            kind,
            name: format!("dir:{}", self.root.display()),
            contract: Contract::Directory { root: self.root.clone() },
        }
    }
}

fn read_failure(path: &Path, e: impl std::fmt::Display) -> BackendFailure {
    BackendFailure::new(format!("{}: {e}", path.display()))
}

impl Segmenter for DirectoryBackend {
    fn descriptor(&self) -> BackendDescriptor {
        self.descriptor_for(BackendKind::Segmenter)
    }

    fn segment(&self, _lightness: &Array2<f32>) -> Result<Array2<u32>, BackendFailure> {
        let path = self.segmentation_path();
        io::load_labels_png(&path).map_err(|e| read_failure(&path, e))
    }

    fn concurrent_safe(&self) -> bool {
        true
    }
}

impl Generator for DirectoryBackend {
    fn descriptor(&self) -> BackendDescriptor {
        self.descriptor_for(BackendKind::Generator)
    }

    fn generate(&self, _seg: &SegmentationMap, z: &LatentCode) -> Result<RgbImage, BackendFailure> {
        let path = self.reference_path(z.seed);
        io::load_rgb(&path).map_err(|e| read_failure(&path, e))
    }

    fn concurrent_safe(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_framing_round_trips() {
        let header = RequestHeader { height: 3, width: 4, mode: SubprocessMode::SegmentRgb, seed: 9 };
        let mut buf = Vec::new();
        write_request(&mut buf, &header, b"\x89PNG-ish").unwrap();
        assert!(buf.starts_with(br#"{"height":3,"width":4,"mode":"segment-rgb","seed":9}"#));
        let (back, payload) = read_request(&buf).unwrap();
        assert_eq!(back, header);
        assert_eq!(payload, b"\x89PNG-ish");
    }

    #[test]
    fn failing_command_keeps_stderr() {
        let backend = CommandBackend::new("sh", vec!["-c".into(), "cat >/dev/null; echo boom >&2; exit 3".into()]);
        let err = Segmenter::segment(&backend, &Array2::from_elem((2, 2), 50.0)).unwrap_err();
        assert!(err.message.contains("exited"), "{}", err.message);
        assert_eq!(err.diagnostics.trim(), "boom");
    }

    #[test]
    fn missing_program_is_a_failure_not_a_panic() {
        let backend = CommandBackend::new("/nonexistent/segmenter", vec![]);
        assert!(Segmenter::segment(&backend, &Array2::from_elem((1, 1), 0.0)).is_err());
    }
}
