//! Dataset ingestion, LR degradation and the toy-face generator.
//!
//! Image dataset layout (all paths relative to the root):
//!
//! ```text
//! root/<name>.png        HR face image (png/jpg)
//! root/<stem>.pts        L lines "x y", no header
//! root/bboxes.txt        one line per image: "<name> x0 y0 w h"
//! ```
//!
//! Video layout: `root/<video_id>/frame_%06d.png`.

mod resample;
mod toy;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Result, ShtError};
use crate::image::{BBox, ImageRole, ImageTensor, LandmarkSet};

pub use resample::{bottleneck_size, cubic, degrade, resize_bicubic, CropTransform};
pub use toy::{generate_toy_dataset, generate_toy_video, ToyFaceSpec, ToyRanges, TOY_INTEROCULAR, TOY_LANDMARKS};

pub const BBOX_INDEX: &str = "bboxes.txt";
pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Where a face's pixels come from.
#[derive(Debug, Clone, PartialEq)]
pub enum FaceSource {
    File(PathBuf),
    Memory(ImageTensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedFace {
    /// File name relative to the dataset root.
    pub name: String,
    pub source: FaceSource,
    /// Points plus bbox and (when configured) interocular anchors.
    pub landmarks: LandmarkSet,
    pub subject: Option<String>,
    pub frame: Option<usize>,
}

impl AnnotatedFace {
    pub fn image(&self) -> Result<ImageTensor> {
        match &self.source {
            FaceSource::File(p) => ImageTensor::load(p, ImageRole::Hr),
            FaceSource::Memory(img) => Ok(img.clone()),
        }
    }

    pub fn bbox(&self) -> Option<&BBox> {
        self.landmarks.bbox()
    }
}

/// Parses a plain landmark file: exactly `expected` lines of "x y".
/// Blank lines are ignored.
pub fn parse_landmarks(text: &str, expected: usize, path: &Path) -> Result<Vec<[f64; 2]>> {
    let malformed = |line: usize, reason: String| ShtError::MalformedLandmarkFile { path: path.to_path_buf(), line, reason };
    let mut points = Vec::with_capacity(expected);
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() != 2 {
            return Err(malformed(i + 1, format!("expected \"x y\", found {} fields", vals.len())));
        }
        let parse = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite());
        match (parse(vals[0]), parse(vals[1])) {
            (Some(x), Some(y)) => points.push([x, y]),
            _ => return Err(malformed(i + 1, format!("not a coordinate pair: `{line}`"))),
        }
    }
    if points.len() != expected {
        return Err(malformed(text.lines().count(), format!("{} landmarks, expected {expected}", points.len())));
    }
    Ok(points)
}

pub fn read_landmarks(path: &Path, expected: usize) -> Result<Vec<[f64; 2]>> {
    parse_landmarks(&fs::read_to_string(path)?, expected, path)
}

pub fn format_landmarks(lm: &LandmarkSet) -> String {
    lm.points().iter().map(|p| format!("{:.4} {:.4}\n", p[0], p[1])).collect()
}

pub fn write_landmarks(path: &Path, lm: &LandmarkSet) -> Result<()> {
    Ok(fs::write(path, format_landmarks(lm))?)
}

/// Parses the 300W `.pts` variant (`version`, `n_points`, braces).
pub fn parse_300w_pts(text: &str, path: &Path) -> Result<Vec<[f64; 2]>> {
    let malformed = |line: usize, reason: String| ShtError::MalformedLandmarkFile { path: path.to_path_buf(), line, reason };
    let mut declared = None;
    let mut body = String::new();
    let mut inside = false;
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(n) = t.strip_prefix("n_points:") {
            declared = Some(n.trim().parse::<usize>().map_err(|_| malformed(i + 1, "bad n_points".into()))?);
        } else if t == "{" {
            inside = true;
        } else if t == "}" {
            inside = false;
        } else if inside {
            body.push_str(t);
            body.push('\n');
        } else if !t.is_empty() && !t.starts_with("version") {
            return Err(malformed(i + 1, format!("unexpected header line `{t}`")));
        }
    }
    let n = declared.ok_or_else(|| malformed(1, "missing n_points header".into()))?;
    parse_landmarks(&body, n, path)
}

pub fn read_bbox_index(path: &Path) -> Result<HashMap<String, BBox>> {
    let text = fs::read_to_string(path)?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let f: Vec<&str> = t.split_whitespace().collect();
        let nums: Option<Vec<f64>> = f.get(1..).map(|r| r.iter().filter_map(|s| s.parse().ok()).collect());
        match nums {
            Some(v) if f.len() == 5 && v.len() == 4 => {
                out.insert(f[0].to_string(), BBox::new(v[0], v[1], v[2], v[3])?);
            }
            _ => return Err(ShtError::InvalidBBox(format!("{}:{}: `{t}`", path.display(), i + 1))),
        }
    }
    Ok(out)
}

/// Options for [`load_image_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct LoadOptions {
    pub num_landmarks: usize,
    pub interocular: Option<[usize; 2]>,
    /// Fail on the first bad item instead of skipping it.
    pub strict: bool,
}

/// A skipped item and the reason.
#[derive(Debug)]
pub struct Skipped {
    pub name: String,
    pub error: ShtError,
}

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    Ok(paths)
}

/// Loads every image under `root` that has a landmark file and a bbox entry.
pub fn load_image_dataset(root: &Path, opts: &LoadOptions) -> Result<(Vec<AnnotatedFace>, Vec<Skipped>)> {
    let index_path = root.join(BBOX_INDEX);
    if !index_path.exists() {
        return Err(ShtError::MissingAnnotation(format!("{} not found", index_path.display())));
    }
    let bboxes = read_bbox_index(&index_path)?;
    let names: Vec<String> = list_images(root)?
        .iter()
        .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(str::to_string))
        .collect();
    let mut faces = Vec::new();
    let mut skipped = Vec::new();
    for name in names {
        match load_item(root, &name, &bboxes, opts) {
            Ok(face) => faces.push(face),
            Err(e) if opts.strict => return Err(e),
            Err(error) => {
                log::warn!("skipping {name}: {error}");
                skipped.push(Skipped { name, error });
            }
        }
    }
    Ok((faces, skipped))
}

fn load_item(root: &Path, name: &str, bboxes: &HashMap<String, BBox>, opts: &LoadOptions) -> Result<AnnotatedFace> {
    let path = root.join(name);
    let pts = path.with_extension("pts");
    if !pts.exists() {
        return Err(ShtError::MissingAnnotation(format!("{} has no {}", name, pts.display())));
    }
    let points = read_landmarks(&pts, opts.num_landmarks)?;
    let bbox = *bboxes.get(name).ok_or_else(|| ShtError::MissingAnnotation(format!("{name} missing from {BBOX_INDEX}")))?;
    let (w, h) = image::image_dimensions(&path).map_err(|source| ShtError::ImageDecode { path: path.clone(), source })?;
    if !bbox.intersects_frame(w as usize, h as usize) {
        return Err(ShtError::InvalidBBox(format!("{name}: box lies outside the {w}×{h} image")));
    }
    let mut landmarks = LandmarkSet::new(points)?.with_bbox(bbox);
    if let Some(pair) = opts.interocular {
        landmarks = landmarks.with_interocular(pair)?;
    }
    Ok(AnnotatedFace { name: name.to_string(), source: FaceSource::File(path), landmarks, subject: None, frame: None })
}

/// Writes images, landmark files and the bbox index under `root`.
pub fn write_image_dataset(root: &Path, faces: &[AnnotatedFace]) -> Result<()> {
    fs::create_dir_all(root)?;
    let mut index = String::new();
    for f in faces {
        let path = root.join(&f.name);
        f.image()?.save(&path)?;
        write_landmarks(&path.with_extension("pts"), &f.landmarks)?;
        let b = f.bbox().ok_or_else(|| ShtError::MissingAnnotation(format!("{} has no bbox", f.name)))?;
        index.push_str(&format!("{} {:.4} {:.4} {:.4} {:.4}\n", f.name, b.x0, b.y0, b.w, b.h));
    }
    Ok(fs::write(root.join(BBOX_INDEX), index)?)
}

/// Writes `frames` as `<root>/<id>/frame_00000.png`, `frame_00001.png`, ….
pub fn write_video(root: &Path, id: &str, frames: &[ImageTensor]) -> Result<VideoSequence> {
    let dir = root.join(id);
    fs::create_dir_all(&dir)?;
    let paths = frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let p = dir.join(format!("frame_{i:05}.png"));
            f.save(&p)?;
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VideoSequence { id: id.to_string(), frames: paths })
}

/// Ordered frames of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSequence {
    pub id: String,
    pub frames: Vec<PathBuf>,
}

fn frame_number(name: &str) -> Option<u64> {
    let stem = name.strip_prefix("frame_")?;
    let digits = stem.split('.').next()?;
    digits.parse().ok()
}

/// One sequence per sub-directory of `root`, frames ordered by number.
/// Gaps in the numbering are kept as-is.
pub fn load_video_dataset(root: &Path) -> Result<Vec<VideoSequence>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect();
    dirs.sort();
    dirs.into_iter()
        .map(|dir| {
            let id = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            let mut frames: Vec<(u64, PathBuf)> = fs::read_dir(&dir)?
                .filter_map(|e| e.ok())
                .filter_map(|e| {
                    let name = e.file_name().into_string().ok()?;
                    frame_number(&name).map(|n| (n, e.path()))
                })
                .collect();
            if frames.is_empty() {
                return Err(ShtError::EmptyVideo(id));
            }
            frames.sort();
            Ok(VideoSequence { id, frames: frames.into_iter().map(|(_, p)| p).collect() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dir(n: usize) -> (tempfile::TempDir, Vec<AnnotatedFace>) {
        let dir = tempfile::tempdir().unwrap();
        let faces = generate_toy_dataset(n, &ToyRanges { size: 32, ..Default::default() }, 1).unwrap();
        write_image_dataset(dir.path(), &faces).unwrap();
        (dir, faces)
    }

    fn opts() -> LoadOptions {
        LoadOptions { num_landmarks: TOY_LANDMARKS, interocular: Some(TOY_INTEROCULAR), strict: true }
    }

    #[test]
    fn write_then_load_round_trip() {
        let (dir, faces) = toy_dir(3);
        let (loaded, skipped) = load_image_dataset(dir.path(), &opts()).unwrap();
        assert_eq!(loaded.len(), 3);
        assert!(skipped.is_empty());
        for (a, b) in faces.iter().zip(&loaded) {
            for (p, q) in a.landmarks.points().iter().zip(b.landmarks.points()) {
                assert!((p[0] - q[0]).abs() <= 5e-5 && (p[1] - q[1]).abs() <= 5e-5);
            }
        }
    }

    #[test]
    fn short_landmark_file_is_malformed() {
        let (dir, _) = toy_dir(2);
        fs::write(dir.path().join("toy_00001.pts"), "1 2\n3 4\n5 6\n7 8\n").unwrap();
        let err = load_image_dataset(dir.path(), &opts()).unwrap_err();
        assert!(matches!(err, ShtError::MalformedLandmarkFile { .. }), "{err}");
        let lenient = LoadOptions { strict: false, ..opts() };
        let (loaded, skipped) = load_image_dataset(dir.path(), &lenient).unwrap();
        assert_eq!((loaded.len(), skipped.len()), (1, 1));
    }

    #[test]
    fn bad_line_reports_line_number() {
        let err = parse_landmarks("1 2\n3 x\n", 2, Path::new("a.pts")).unwrap_err();
        assert!(matches!(err, ShtError::MalformedLandmarkFile { line: 2, .. }));
    }

    #[test]
    fn bbox_outside_image_rejected() {
        let (dir, _) = toy_dir(2);
        let index = fs::read_to_string(dir.path().join(BBOX_INDEX)).unwrap();
        let patched = index.replacen(index.lines().next().unwrap(), "toy_00000.png 100 100 10 10", 1);
        fs::write(dir.path().join(BBOX_INDEX), patched).unwrap();
        let lenient = LoadOptions { strict: false, ..opts() };
        let (loaded, skipped) = load_image_dataset(dir.path(), &lenient).unwrap();
        assert_eq!(loaded.len(), 1);
        assert!(matches!(skipped[0].error, ShtError::InvalidBBox(_)));
    }

    #[test]
    fn missing_annotation() {
        let (dir, _) = toy_dir(1);
        fs::remove_file(dir.path().join("toy_00000.pts")).unwrap();
        assert!(matches!(load_image_dataset(dir.path(), &opts()), Err(ShtError::MissingAnnotation(_))));
    }

    #[test]
    fn pts_300w_variant() {
        let text = "version: 1\nn_points:  2\n{\n10.5 20\n30 40.25\n}\n";
        assert_eq!(parse_300w_pts(text, Path::new("x.pts")).unwrap(), vec![[10.5, 20.0], [30.0, 40.25]]);
        assert!(parse_300w_pts("version: 1\nn_points: 3\n{\n1 2\n}\n", Path::new("x.pts")).is_err());
    }

    #[test]
    fn videos_ordered_with_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::filled(4, 4, 3, 0.5, ImageRole::Hr).unwrap();
        for v in ["b", "a"] {
            fs::create_dir(dir.path().join(v)).unwrap();
            for i in [7, 2, 10, 0] {
                img.save(&dir.path().join(v).join(format!("frame_{i:06}.png"))).unwrap();
            }
        }
        fs::create_dir(dir.path().join("c")).unwrap();
        img.save(&dir.path().join("c/frame_000000.png")).unwrap();
        let vids = load_video_dataset(dir.path()).unwrap();
        assert_eq!(vids.iter().map(|v| v.id.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
        let names: Vec<_> = vids[0].frames.iter().map(|p| p.file_name().unwrap().to_str().unwrap().to_string()).collect();
        assert_eq!(names, ["frame_000000.png", "frame_000002.png", "frame_000007.png", "frame_000010.png"]);
        assert_eq!(vids[2].frames.len(), 1);
        fs::create_dir(dir.path().join("d")).unwrap();
        assert!(matches!(load_video_dataset(dir.path()), Err(ShtError::EmptyVideo(_))));
    }
}
