//! Converters from public dataset layouts to the unified manifest schema.
//!
//! Expected input layouts (paths relative to the `--in` directory):
//!
//! * **gazefollow**: `*_annotations_release.txt`, comma separated
//!   `path,idx,body_x,body_y,body_w,body_h,eye_x,eye_y,gaze_x,gaze_y,
//!   bbox_x_min,bbox_y_min,bbox_x_max,bbox_y_max[,inout,...]`. Head boxes are
//!   in pixels, gaze in normalized units. Rows sharing `(path, idx)` (the
//!   multi-annotator test split) are merged by averaging gaze points.
//! * **vat**: `annotations/<split>/<show>/<clip>/<person>.txt` with lines
//!   `frame,xmin,ymin,xmax,ymax,gazex,gazey` in pixels, `-1,-1` meaning out of
//!   frame; frames live at `images/<show>/<clip>/<frame>`.
//! * **mpii**: `pXX/pXX.txt`, 28 whitespace separated fields per line: image
//!   path, screen gaze (2), six landmarks (12), head pose (6), face center (3),
//!   gaze target (3), evaluation eye. Labels come from the gaze-ray distance.
//! * **columbia**: images named `SSSS_Dm_<P>P_<V>V_<H>H.jpg` anywhere below
//!   the input; `V` is gaze elevation and `H` gaze yaw in degrees.
//! * **eyediap**: session directories holding `frames/` (extracted RGB frames,
//!   sorted by name), `ball_tracking.txt` and `eye_tracking.txt`, both
//!   semicolon separated with a header row. The ball columns whose names
//!   contain `rgb` and end in `x`/`y` give the target in RGB pixels; the eye
//!   file's `rgb` x/y columns give eye centers, from which a head box is
//!   built. Only floating-target sessions (`_FT_` in the name) are used when
//!   any exist.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::eyediap::{sample_eyediap_frames, FRAMES_PER_VIDEO};
use super::geometry::{label_ec_columbia, label_ec_mpii, EcLabel, Gaze3dRecord, EC_THRESHOLD_MM};
use super::sample::{AnnotatedSample, SampleLabel};
use crate::error::{Error, Result};
use crate::types::HeadBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceFormat {
    GazeFollow,
    Vat,
    Mpii,
    Columbia,
    Eyediap,
}

impl SourceFormat {
    pub fn tag(&self) -> &'static str {
        match self {
            SourceFormat::GazeFollow => "gazefollow",
            SourceFormat::Vat => "vat",
            SourceFormat::Mpii => "mpii",
            SourceFormat::Columbia => "columbia",
            SourceFormat::Eyediap => "eyediap",
        }
    }
}

impl FromStr for SourceFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "gazefollow" => SourceFormat::GazeFollow,
            "vat" => SourceFormat::Vat,
            "mpii" => SourceFormat::Mpii,
            "columbia" => SourceFormat::Columbia,
            "eyediap" => SourceFormat::Eyediap,
            other => {
                return Err(Error::InvalidValue(format!(
                    "unknown dataset source `{other}`"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct Conversion {
    pub samples: Vec<AnnotatedSample>,
    /// Rows that could not be turned into a valid sample, with the reason.
    pub skipped: Vec<String>,
}

impl Conversion {
    pub fn label_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut m = BTreeMap::new();
        for s in &self.samples {
            let k = match s.label {
                SampleLabel::EC => "EC",
                SampleLabel::OFT => "OFT",
                SampleLabel::IFT => "IFT",
                SampleLabel::UNKNOWN => "UNKNOWN",
            };
            *m.entry(k).or_insert(0) += 1;
        }
        m
    }

    pub fn oft_fraction(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let n = self
            .samples
            .iter()
            .filter(|s| s.label == SampleLabel::OFT)
            .count();
        n as f64 / self.samples.len() as f64
    }
}

/// Head, label, gaze-point sum and annotator count for one (path, idx) key.
type GazeFollowAccum = (HeadBox, SampleLabel, (f64, f64), usize);

pub fn convert(format: SourceFormat, input: &Path) -> Result<Conversion> {
    let root = input
        .canonicalize()
        .map_err(|e| Error::io(format!("resolving {}", input.display()), e))?;
    let conv = match format {
        SourceFormat::GazeFollow => convert_gazefollow(&root)?,
        SourceFormat::Vat => convert_vat(&root)?,
        SourceFormat::Mpii => convert_mpii(&root)?,
        SourceFormat::Columbia => convert_columbia(&root)?,
        SourceFormat::Eyediap => convert_eyediap(&root, FRAMES_PER_VIDEO)?,
    };
    for s in &conv.skipped {
        log::warn!("{}: skipped {s}", format.tag());
    }
    Ok(conv)
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    out.sort();
    Ok(out)
}

fn walk_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for p in list_dir(dir)? {
        if p.is_dir() {
            walk_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

fn num(field: &str, what: &str) -> std::result::Result<f64, String> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| format!("bad {what} `{}`", field.trim()))
}

#[derive(Default)]
struct DimCache(HashMap<PathBuf, (u32, u32)>);

impl DimCache {
    fn get(&mut self, path: &Path) -> std::result::Result<(f64, f64), String> {
        if let Some(&(w, h)) = self.0.get(path) {
            return Ok((w as f64, h as f64));
        }
        let (w, h) =
            image::image_dimensions(path).map_err(|e| format!("{}: {e}", path.display()))?;
        self.0.insert(path.to_path_buf(), (w, h));
        Ok((w as f64, h as f64))
    }
}

fn pixel_box(b: [f64; 4], w: f64, h: f64) -> std::result::Result<HeadBox, String> {
    HeadBox::clamped(b[0] / w, b[1] / h, b[2] / w, b[3] / h, 1.0)
        .ok_or_else(|| format!("empty head box {b:?}"))
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn convert_gazefollow(root: &Path) -> Result<Conversion> {
    let mut conv = Conversion::default();
    let mut dims = DimCache::default();
    let files: Vec<PathBuf> = list_dir(root)?
        .into_iter()
        .filter(|p| p.to_string_lossy().ends_with("_annotations_release.txt"))
        .collect();
    if files.is_empty() {
        return Err(Error::InvalidValue(format!(
            "no *_annotations_release.txt in {}",
            root.display()
        )));
    }
    for file in files {
        let mut merged: BTreeMap<(String, String), GazeFollowAccum> = BTreeMap::new();
        let name = file
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        for (i, line) in read(&file)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row = (|| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() < 14 {
                    return Err(format!("{} fields, expected at least 14", f.len()));
                }
                let img = root.join(f[0].trim());
                let (w, h) = dims.get(&img)?;
                let gx = num(f[8], "gaze_x")?;
                let gy = num(f[9], "gaze_y")?;
                let b = [
                    num(f[10], "bbox")?,
                    num(f[11], "bbox")?,
                    num(f[12], "bbox")?,
                    num(f[13], "bbox")?,
                ];
                let head = pixel_box(b, w, h)?;
                let inout = f.get(14).and_then(|v| v.trim().parse::<i64>().ok());
                let label = match inout {
                    Some(0) => SampleLabel::OFT,
                    Some(-1) => SampleLabel::UNKNOWN,
                    _ if gx < 0.0 || gy < 0.0 => SampleLabel::OFT,
                    _ => SampleLabel::IFT,
                };
                Ok((
                    (path_str(&img), f[1].trim().to_string()),
                    head,
                    label,
                    (gx, gy),
                ))
            })();
            match row {
                Ok((key, head, label, g)) => {
                    let e = merged.entry(key).or_insert((head, label, (0.0, 0.0), 0));
                    if label == SampleLabel::IFT && e.1 == SampleLabel::IFT {
                        e.2 .0 += g.0;
                        e.2 .1 += g.1;
                        e.3 += 1;
                    }
                }
                Err(msg) => conv.skipped.push(format!("{name}:{}: {msg}", i + 1)),
            }
        }
        for ((img, idx), (head, label, sum, n)) in merged {
            let target = (label == SampleLabel::IFT && n > 0).then(|| {
                let k = n as f64;
                ((sum.0 / k).clamp(0.0, 1.0), (sum.1 / k).clamp(0.0, 1.0))
            });
            match AnnotatedSample::new(img.clone(), head, label, target, "gazefollow") {
                Ok(s) => conv.samples.push(s),
                Err(e) => conv.skipped.push(format!("{img}#{idx}: {e}")),
            }
        }
    }
    Ok(conv)
}

fn convert_vat(root: &Path) -> Result<Conversion> {
    let mut conv = Conversion::default();
    let mut dims = DimCache::default();
    let ann_root = root.join("annotations");
    let mut files = Vec::new();
    walk_files(&ann_root, &mut files)?;
    for file in files
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
    {
        let rel = file.strip_prefix(&ann_root).unwrap_or(&file);
        // <split>/<show>/<clip>/<person>.txt
        let parts: Vec<_> = rel.components().collect();
        if parts.len() < 4 {
            conv.skipped
                .push(format!("{}: unexpected location", rel.display()));
            continue;
        }
        let clip_dir = root
            .join("images")
            .join(parts[parts.len() - 3].as_os_str())
            .join(parts[parts.len() - 2].as_os_str());
        for (i, line) in read(&file)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row = (|| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 7 {
                    return Err(format!("{} fields, expected 7", f.len()));
                }
                let img = clip_dir.join(f[0].trim());
                let (w, h) = dims.get(&img)?;
                let b = [
                    num(f[1], "xmin")?,
                    num(f[2], "ymin")?,
                    num(f[3], "xmax")?,
                    num(f[4], "ymax")?,
                ];
                let head = pixel_box(b, w, h)?;
                let (gx, gy) = (num(f[5], "gazex")?, num(f[6], "gazey")?);
                let (label, target) = if gx < 0.0 || gy < 0.0 {
                    (SampleLabel::OFT, None)
                } else {
                    let t = ((gx / w).clamp(0.0, 1.0), (gy / h).clamp(0.0, 1.0));
                    (SampleLabel::IFT, Some(t))
                };
                AnnotatedSample::new(path_str(&img), head, label, target, "vat")
                    .map_err(|e| e.to_string())
            })();
            match row {
                Ok(s) => conv.samples.push(s),
                Err(msg) => conv
                    .skipped
                    .push(format!("{}:{}: {msg}", rel.display(), i + 1)),
            }
        }
    }
    Ok(conv)
}

/// Square head box around facial landmarks: the landmark extent spans eye and
/// mouth corners, so the head is taken as twice its larger side.
fn landmark_box(xs: &[f64], ys: &[f64], w: f64, h: f64) -> std::result::Result<HeadBox, String> {
    let (x0, x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, &v| {
        (a.0.min(v), a.1.max(v))
    });
    let (y0, y1) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, &v| {
        (a.0.min(v), a.1.max(v))
    });
    let half = (x1 - x0).max(y1 - y0);
    let (cx, cy) = (0.5 * (x0 + x1), 0.5 * (y0 + y1));
    pixel_box(
        [cx - half, cy - 1.2 * half, cx + half, cy + 0.8 * half],
        w,
        h,
    )
}

fn convert_mpii(root: &Path) -> Result<Conversion> {
    let mut conv = Conversion::default();
    let mut dims = DimCache::default();
    for subject in list_dir(root)?.into_iter().filter(|p| p.is_dir()) {
        let Some(name) = subject
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
        else {
            continue;
        };
        let file = subject.join(format!("{name}.txt"));
        if !file.exists() {
            continue;
        }
        for (i, line) in read(&file)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row = (|| {
                let f: Vec<&str> = line.split_whitespace().collect();
                if f.len() != 28 {
                    return Err(format!("{} fields, expected 28", f.len()));
                }
                let img = subject.join(f[0]);
                let (w, h) = dims.get(&img)?;
                let mut xs = Vec::with_capacity(6);
                let mut ys = Vec::with_capacity(6);
                for k in 0..6 {
                    xs.push(num(f[3 + 2 * k], "landmark")?);
                    ys.push(num(f[4 + 2 * k], "landmark")?);
                }
                let head = landmark_box(&xs, &ys, w, h)?;
                let v = |j: usize| -> std::result::Result<[f64; 3], String> {
                    Ok([num(f[j], "3d")?, num(f[j + 1], "3d")?, num(f[j + 2], "3d")?])
                };
                let rec = Gaze3dRecord::new(v(21)?, v(24)?).map_err(|e| e.to_string())?;
                let label = match label_ec_mpii(&rec, EC_THRESHOLD_MM).map_err(|e| e.to_string())? {
                    EcLabel::EC => SampleLabel::EC,
                    EcLabel::OFT => SampleLabel::OFT,
                };
                AnnotatedSample::new(path_str(&img), head, label, None, "mpii")
                    .map_err(|e| e.to_string())
            })();
            match row {
                Ok(s) => conv.samples.push(s),
                Err(msg) => conv.skipped.push(format!("{name}.txt:{}: {msg}", i + 1)),
            }
        }
    }
    Ok(conv)
}

/// Parses `(elevation, yaw)` from a name such as `0001_2m_-15P_10V_-5H.jpg`.
pub fn parse_columbia_name(name: &str) -> Option<(f64, f64)> {
    let stem = name.rsplit_once('.').map_or(name, |(s, _)| s);
    let mut v = None;
    let mut h = None;
    for part in stem.split('_') {
        if let Some(x) = part.strip_suffix('V') {
            v = x.parse::<f64>().ok();
        } else if let Some(x) = part.strip_suffix('H') {
            h = x.parse::<f64>().ok();
        }
    }
    Some((v?, h?))
}

fn convert_columbia(root: &Path) -> Result<Conversion> {
    let mut conv = Conversion::default();
    let mut files = Vec::new();
    walk_files(root, &mut files)?;
    let full = HeadBox::from_corners([0.0, 0.0, 1.0, 1.0])?;
    for f in files {
        let Some(name) = f.file_name().map(|n| n.to_string_lossy().into_owned()) else {
            continue;
        };
        if !name.to_ascii_lowercase().ends_with(".jpg") {
            continue;
        }
        match parse_columbia_name(&name) {
            Some((elev, yaw)) => {
                let label = match label_ec_columbia(elev, yaw) {
                    EcLabel::EC => SampleLabel::EC,
                    EcLabel::OFT => SampleLabel::OFT,
                };
                conv.samples.push(AnnotatedSample::new(
                    path_str(&f),
                    full,
                    label,
                    None,
                    "columbia",
                )?);
            }
            None => conv
                .skipped
                .push(format!("{name}: no V/H angles in file name")),
        }
    }
    Ok(conv)
}

/// Semicolon table keyed by the (lower-cased) frame column.
struct Table {
    header: Vec<String>,
    rows: BTreeMap<usize, Vec<f64>>,
}

impl Table {
    fn parse(path: &Path) -> Result<Table> {
        let text = read(path)?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::InvalidValue(format!("{} is empty", path.display())))?
            .split(';')
            .map(|s| s.trim().to_ascii_lowercase())
            .collect();
        let frame_col = header
            .iter()
            .position(|h| h.contains("frame"))
            .ok_or_else(|| Error::InvalidValue(format!("{}: no frame column", path.display())))?;
        let mut rows = BTreeMap::new();
        for (i, l) in lines.enumerate() {
            let vals: Vec<f64> = l
                .split(';')
                .map(|v| v.trim().parse::<f64>().unwrap_or(f64::NAN))
                .collect();
            let frame = vals.get(frame_col).copied().unwrap_or(f64::NAN);
            if frame.is_nan() || frame < 0.0 {
                return Err(Error::InvalidValue(format!(
                    "{}:{}: bad frame number",
                    path.display(),
                    i + 2
                )));
            }
            rows.insert(frame as usize, vals);
        }
        Ok(Table { header, rows })
    }

    /// Column pairs whose names contain `rgb` and end in `x` / `y`.
    fn rgb_xy(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, h) in self.header.iter().enumerate() {
            if h.contains("rgb") && h.ends_with('x') {
                let twin = format!("{}y", &h[..h.len() - 1]);
                if let Some(j) = self.header.iter().position(|c| *c == twin) {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

fn convert_eyediap(root: &Path, per_video: usize) -> Result<Conversion> {
    let mut conv = Conversion::default();
    let sessions: Vec<PathBuf> = list_dir(root)?
        .into_iter()
        .filter(|p| p.join("ball_tracking.txt").exists())
        .collect();
    let floating: Vec<PathBuf> = sessions
        .iter()
        .filter(|p| p.to_string_lossy().contains("_FT_"))
        .cloned()
        .collect();
    let sessions = if floating.is_empty() {
        sessions
    } else {
        floating
    };

    let mut index = Vec::new();
    let mut frames_by_session = Vec::new();
    for s in &sessions {
        let frames: Vec<PathBuf> = list_dir(&s.join("frames"))?
            .into_iter()
            .filter(|p| p.is_file())
            .collect();
        index.push((path_str(s), frames.len()));
        frames_by_session.push(frames);
    }
    let picks = sample_eyediap_frames(&index, per_video)?;

    for (si, session) in sessions.iter().enumerate() {
        let ball = Table::parse(&session.join("ball_tracking.txt"))?;
        let eyes = Table::parse(&session.join("eye_tracking.txt"))?;
        let (bx, by) = *ball.rgb_xy().first().ok_or_else(|| {
            Error::InvalidValue(format!(
                "{}: ball_tracking.txt lacks rgb x/y columns",
                session.display()
            ))
        })?;
        let eye_cols = eyes.rgb_xy();
        let frames = &frames_by_session[si];
        let key = path_str(session);
        for &(_, frame) in picks.iter().filter(|(id, _)| *id == key) {
            let img = &frames[frame];
            let row = (|| {
                let (w, h) = image::image_dimensions(img).map_err(|e| e.to_string())?;
                let (w, h) = (w as f64, h as f64);
                let e = eyes.rows.get(&frame).ok_or("no eye tracking row")?;
                let pts: Vec<(f64, f64)> = eye_cols
                    .iter()
                    .map(|&(i, j)| {
                        (
                            e.get(i).copied().unwrap_or(f64::NAN),
                            e.get(j).copied().unwrap_or(f64::NAN),
                        )
                    })
                    .filter(|(x, y)| x.is_finite() && y.is_finite())
                    .collect();
                if pts.len() < 2 {
                    return Err("fewer than two eye positions".to_string());
                }
                let (cx, cy) = (
                    pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64,
                    pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64,
                );
                let spread = pts
                    .iter()
                    .flat_map(|a| pts.iter().map(move |b| (a.0 - b.0).hypot(a.1 - b.1)))
                    .fold(0.0, f64::max)
                    .max(1.0);
                let half = 1.5 * spread;
                let head = pixel_box([cx - half, cy - half, cx + half, cy + 1.2 * half], w, h)?;
                let b = ball.rows.get(&frame).ok_or("no ball tracking row")?;
                let (tx, ty) = (
                    b.get(bx).copied().unwrap_or(f64::NAN),
                    b.get(by).copied().unwrap_or(f64::NAN),
                );
                let inside = tx.is_finite()
                    && ty.is_finite()
                    && (0.0..w).contains(&tx)
                    && (0.0..h).contains(&ty);
                let (label, target) = if inside {
                    (SampleLabel::IFT, Some((tx / w, ty / h)))
                } else {
                    (SampleLabel::OFT, None)
                };
                AnnotatedSample::new(path_str(img), head, label, target, "eyediap")
                    .map_err(|e| e.to_string())
            })();
            match row {
                Ok(s) => conv.samples.push(s),
                Err(msg) => conv
                    .skipped
                    .push(format!("{} frame {frame}: {msg}", session.display())),
            }
        }
    }
    log::info!(
        "eyediap: {} samples, {:.1}% out of frame",
        conv.samples.len(),
        100.0 * conv.oft_fraction()
    );
    Ok(conv)
}
