//! Head detection frontend.
//!
//! Backends produce raw boxes; [`DetectorHandle::detect_heads`] clamps them
//! into the unit square, drops low-confidence and empty boxes and sorts by
//! descending confidence.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::frame::FrameImage;
use crate::types::HeadBox;

/// Names accepted for `detector.backend`.
pub const BACKENDS: [&str; 2] = ["stub", "external"];

/// Unvalidated detector output in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawDetection {
    pub corners: [f64; 4],
    pub confidence: f64,
}

pub trait DetectorBackend: Send + Sync {
    fn detect_raw(&self, img: &FrameImage) -> Result<Vec<RawDetection>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub backend: String,
    pub min_confidence: f64,
    /// Scripted detections for the stub backend (annotation JSONL schema).
    pub sidecar: Option<PathBuf>,
    /// Program and leading arguments of the external backend; the image
    /// path is appended.
    pub command: Vec<String>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            backend: "stub".into(),
            min_confidence: 0.0,
            sidecar: None,
            command: Vec::new(),
        }
    }
}

pub struct DetectorHandle {
    pub backend_name: String,
    pub min_confidence: f64,
    backend: Box<dyn DetectorBackend>,
}

impl std::fmt::Debug for DetectorHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DetectorHandle")
            .field("backend_name", &self.backend_name)
            .field("min_confidence", &self.min_confidence)
            .finish()
    }
}

fn check_confidence(c: f64) -> Result<()> {
    if (0.0..=1.0).contains(&c) {
        Ok(())
    } else {
        Err(Error::InvalidValue(format!(
            "min_confidence {c} outside [0, 1]"
        )))
    }
}

impl DetectorHandle {
    pub fn from_config(cfg: &DetectorConfig) -> Result<Self> {
        check_confidence(cfg.min_confidence)?;
        let backend: Box<dyn DetectorBackend> = match cfg.backend.as_str() {
            "stub" => Box::new(match &cfg.sidecar {
                Some(p) => StubDetector::from_sidecar(p)?,
                None => StubDetector::default(),
            }),
            "external" => Box::new(ExternalDetector::new(cfg.command.clone())?),
            other => return Err(Error::UnknownBackend(other.to_string())),
        };
        Ok(DetectorHandle {
            backend_name: cfg.backend.clone(),
            min_confidence: cfg.min_confidence,
            backend,
        })
    }

    pub fn with_backend(
        name: &str,
        min_confidence: f64,
        backend: Box<dyn DetectorBackend>,
    ) -> Result<Self> {
        check_confidence(min_confidence)?;
        Ok(DetectorHandle {
            backend_name: name.to_string(),
            min_confidence,
            backend,
        })
    }

    /// Stub handle that reports `boxes` for every frame.
    pub fn scripted(boxes: Vec<HeadBox>) -> Self {
        DetectorHandle {
            backend_name: "stub".into(),
            min_confidence: 0.0,
            backend: Box::new(StubDetector::everywhere(
                boxes
                    .into_iter()
                    .map(|b| RawDetection {
                        corners: b.corners(),
                        confidence: b.confidence,
                    })
                    .collect(),
            )),
        }
    }

    /// Heads in `img`, most confident first. An empty list is a success.
    pub fn detect_heads(&self, img: &FrameImage) -> Result<Vec<HeadBox>> {
        let raw = self.backend.detect_raw(img)?;
        let mut heads: Vec<HeadBox> = raw
            .into_iter()
            .filter_map(|r| {
                let [x0, y0, x1, y1] = r.corners;
                HeadBox::clamped(x0, y0, x1, y1, r.confidence)
            })
            .filter(|b| b.confidence >= self.min_confidence)
            .collect();
        heads.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        Ok(heads)
    }
}

/// Replays scripted boxes keyed by image. A frame matches by its full origin
/// path, then by file name, then the wildcard key `*`.
#[derive(Debug, Clone, Default)]
pub struct StubDetector {
    by_image: HashMap<String, Vec<RawDetection>>,
}

impl StubDetector {
    pub fn everywhere(dets: Vec<RawDetection>) -> Self {
        let mut by_image = HashMap::new();
        by_image.insert("*".to_string(), dets);
        StubDetector { by_image }
    }

    pub fn insert(&mut self, image: impl Into<String>, det: RawDetection) {
        self.by_image.entry(image.into()).or_default().push(det);
    }

    pub fn from_sidecar(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        let mut stub = StubDetector::default();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| Error::Detector {
                backend: "stub".into(),
                message: format!("{}:{}: {e}", path.display(), i + 1),
            })?;
            stub.insert(
                rec.image,
                RawDetection {
                    corners: rec.bbox,
                    confidence: rec.confidence.unwrap_or(1.0),
                },
            );
        }
        Ok(stub)
    }
}

impl DetectorBackend for StubDetector {
    fn detect_raw(&self, img: &FrameImage) -> Result<Vec<RawDetection>> {
        let origin = img.origin();
        let file_name = origin
            .and_then(|o| Path::new(o).file_name())
            .map(|n| n.to_string_lossy().into_owned());
        let hit = origin
            .and_then(|o| self.by_image.get(o))
            .or_else(|| file_name.and_then(|n| self.by_image.get(&n)))
            .or_else(|| self.by_image.get("*"));
        Ok(hit.cloned().unwrap_or_default())
    }
}

/// Runs an installed detector program once per frame. The program receives
/// the image path as its last argument and prints one JSON object per face,
/// `{"box": [x0, y0, x1, y1], "confidence": c}`, in normalized coordinates.
/// Calls are serialized.
#[derive(Debug)]
pub struct ExternalDetector {
    command: Vec<String>,
    lock: Mutex<()>,
}

#[derive(Deserialize)]
struct ExternalLine {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    confidence: Option<f64>,
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl ExternalDetector {
    pub fn new(command: Vec<String>) -> Result<Self> {
        if command.is_empty() {
            return Err(Error::Detector {
                backend: "external".into(),
                message: "detector.command is empty".into(),
            });
        }
        Ok(ExternalDetector {
            command,
            lock: Mutex::new(()),
        })
    }

    fn fail(message: impl Into<String>) -> Error {
        Error::Detector {
            backend: "external".into(),
            message: message.into(),
        }
    }
}

impl DetectorBackend for ExternalDetector {
    fn detect_raw(&self, img: &FrameImage) -> Result<Vec<RawDetection>> {
        let _guard = self.lock.lock().unwrap_or_else(|p| p.into_inner());
        let existing = img.origin().map(PathBuf::from).filter(|p| p.exists());
        let temp = match existing {
            Some(_) => None,
            None => {
                let n = TEMP_COUNTER.fetch_add(1, Ordering::Relaxed);
                let p = std::env::temp_dir()
                    .join(format!("gt360-detect-{}-{n}.png", std::process::id()));
                img.save(&p)?;
                Some(p)
            }
        };
        let path = existing
            .or_else(|| temp.clone())
            .expect("one of the two is set");
        let output = Command::new(&self.command[0])
            .args(&self.command[1..])
            .arg(&path)
            .output();
        if let Some(t) = &temp {
            let _ = std::fs::remove_file(t);
        }
        let output = output.map_err(|e| Self::fail(format!("running {}: {e}", self.command[0])))?;
        if !output.status.success() {
            return Err(Self::fail(format!(
                "{} exited with {}: {}",
                self.command[0],
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        String::from_utf8_lossy(&output.stdout)
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let e: ExternalLine = serde_json::from_str(l)
                    .map_err(|e| Self::fail(format!("bad output `{l}`: {e}")))?;
                Ok(RawDetection {
                    corners: e.bbox,
                    confidence: e.confidence.unwrap_or(1.0),
                })
            })
            .collect()
    }
}
