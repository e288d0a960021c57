//! Unified annotation records and the JSONL manifest format.
//!
//! One JSON object per line:
//!
//! ```text
//! {"image": "<path>", "box": [x0, y0, x1, y1], "label": "EC|OFT|IFT|UNKNOWN",
//!  "target": [x, y] | null, "source": "<dataset tag>", "confidence": <optional>}
//! ```
//!
//! Coordinates are normalized to `[0, 1]`. Relative image paths resolve
//! against the manifest's directory.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{HeadBox, Point};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SampleLabel {
    EC,
    OFT,
    IFT,
    UNKNOWN,
}

impl SampleLabel {
    /// Whether the gaze target lies inside the frame.
    pub fn is_in_frame(&self) -> bool {
        matches!(self, SampleLabel::IFT)
    }
}

/// One head in one image with whatever gaze annotation its dataset offers.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSample {
    pub image_ref: String,
    pub head: HeadBox,
    pub label: SampleLabel,
    pub target: Option<Point>,
    pub source: String,
}

impl AnnotatedSample {
    pub fn new(
        image_ref: impl Into<String>,
        head: HeadBox,
        label: SampleLabel,
        target: Option<Point>,
        source: impl Into<String>,
    ) -> Result<Self> {
        let s = AnnotatedSample {
            image_ref: image_ref.into(),
            head,
            label,
            target,
            source: source.into(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        match (self.label, self.target) {
            (SampleLabel::IFT, None) => {
                Err(Error::InvalidValue("IFT sample without target".into()))
            }
            (SampleLabel::IFT, Some((x, y)))
                if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) =>
            {
                Err(Error::InvalidValue(format!(
                    "IFT target ({x}, {y}) outside the frame"
                )))
            }
            (SampleLabel::EC | SampleLabel::OFT, Some(_)) => Err(Error::InvalidValue(format!(
                "{:?} sample must not carry a target",
                self.label
            ))),
            _ => Ok(()),
        }
    }

    pub fn to_record(&self) -> SampleRecord {
        SampleRecord {
            image: self.image_ref.clone(),
            bbox: self.head.corners(),
            label: self.label,
            target: self.target.map(|(x, y)| [x, y]),
            source: self.source.clone(),
            confidence: (self.head.confidence != 1.0).then_some(self.head.confidence),
        }
    }
}

/// Wire form of one manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub image: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub label: SampleLabel,
    #[serde(default)]
    pub target: Option<[f64; 2]>,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl SampleRecord {
    pub fn into_sample(self) -> Result<AnnotatedSample> {
        let [x0, y0, x1, y1] = self.bbox;
        let head = HeadBox::new(x0, y0, x1, y1, self.confidence.unwrap_or(1.0))?;
        AnnotatedSample::new(
            self.image,
            head,
            self.label,
            self.target.map(|[x, y]| (x, y)),
            self.source,
        )
    }
}

/// Validated manifest contents.
#[derive(Debug, Clone, Default)]
pub struct UnifiedDataset {
    pub samples: Vec<AnnotatedSample>,
    /// Directory that relative image paths resolve against.
    pub root: PathBuf,
}

impl UnifiedDataset {
    pub fn source_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for s in &self.samples {
            *counts.entry(s.source.clone()).or_insert(0) += 1;
        }
        counts
    }

    pub fn resolve(&self, image_ref: &str) -> PathBuf {
        let p = Path::new(image_ref);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Reject lines whose image file does not exist.
    pub require_images: bool,
}

/// Parses and validates a JSONL manifest. Every offending line is reported.
pub fn load_unified(path: impl AsRef<Path>, opts: LoadOptions) -> Result<UnifiedDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening manifest {}", path.display()), e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut data = UnifiedDataset {
        samples: Vec::new(),
        root,
    };
    let mut bad = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<SampleRecord>(&line)
            .map_err(|e| e.to_string())
            .and_then(|r| r.into_sample().map_err(|e| e.to_string()));
        match parsed {
            Ok(s) => {
                if opts.require_images && !data.resolve(&s.image_ref).exists() {
                    bad.push((n, format!("missing image {}", s.image_ref)));
                } else {
                    data.samples.push(s);
                }
            }
            Err(msg) => bad.push((n, msg)),
        }
    }
    if !bad.is_empty() {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            lines: bad,
        });
    }
    for (source, count) in data.source_counts() {
        log::info!("{}: {count} samples from {source}", path.display());
    }
    Ok(data)
}

pub fn write_manifest(path: impl AsRef<Path>, samples: &[AnnotatedSample]) -> Result<()> {
    let path = path.as_ref();
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?,
    );
    for s in samples {
        serde_json::to_writer(&mut out, &s.to_record())?;
        out.write_all(b"\n")
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    out.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn empty_manifest_loads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "m.jsonl", "");
        assert!(load_unified(&p, LoadOptions::default())
            .unwrap()
            .samples
            .is_empty());
    }

    #[test]
    fn ift_without_target_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let body = concat!(
            r#"{"image":"a.png","box":[0.1,0.1,0.2,0.2],"label":"OFT","target":null,"source":"vat"}"#,
            "\n",
            r#"{"image":"b.png","box":[0.1,0.1,0.2,0.2],"label":"IFT","target":null,"source":"vat"}"#,
            "\n"
        );
        let p = write(dir.path(), "m.jsonl", body);
        match load_unified(&p, LoadOptions::default()).unwrap_err() {
            Error::Manifest { lines, .. } => {
                assert_eq!(lines.len(), 1);
                assert_eq!(lines[0].0, 2);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn mixed_sources_are_counted() {
        let dir = tempfile::tempdir().unwrap();
        let mut samples = Vec::new();
        let plan = [("gazefollow", 13usize), ("vat", 10), ("mpii", 7)];
        for (source, n) in plan {
            for i in 0..n {
                let head = HeadBox::from_corners([0.1, 0.1, 0.3, 0.35]).unwrap();
                let (label, target) = match i % 3 {
                    0 => (SampleLabel::IFT, Some((0.5, 0.25 + i as f64 * 0.01))),
                    1 => (SampleLabel::OFT, None),
                    _ => (SampleLabel::EC, None),
                };
                samples.push(
                    AnnotatedSample::new(format!("{source}/{i}.png"), head, label, target, source)
                        .unwrap(),
                );
            }
        }
        let p = dir.path().join("m.jsonl");
        write_manifest(&p, &samples).unwrap();
        let loaded = load_unified(&p, LoadOptions::default()).unwrap();
        assert_eq!(loaded.samples, samples);
        let counts = loaded.source_counts();
        for (source, n) in plan {
            assert_eq!(counts[source], n);
        }
    }

    #[test]
    fn missing_images_rejected_when_required() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "m.jsonl",
            r#"{"image":"nope.png","box":[0.1,0.1,0.2,0.2],"label":"UNKNOWN","source":"x"}"#,
        );
        assert!(load_unified(
            &p,
            LoadOptions {
                require_images: true
            }
        )
        .is_err());
        assert!(load_unified(&p, LoadOptions::default()).is_ok());
    }

    #[test]
    fn unknown_fields_and_bad_boxes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "m.jsonl",
            concat!(
                r#"{"image":"a","box":[0.1,0.1,0.2,0.2],"label":"OFT","source":"x","extra":1}"#,
                "\n",
                r#"{"image":"a","box":[0.3,0.1,0.2,0.2],"label":"OFT","source":"x"}"#,
                "\n",
                r#"{"image":"a","box":[0.1,0.1,0.2,0.2],"label":"EC","target":[0.5,0.5],"source":"x"}"#
            ),
        );
        match load_unified(&p, LoadOptions::default()).unwrap_err() {
            Error::Manifest { lines, .. } => {
                assert_eq!(lines.iter().map(|l| l.0).collect::<Vec<_>>(), vec![1, 2, 3])
            }
            e => panic!("unexpected {e}"),
        }
    }
}
