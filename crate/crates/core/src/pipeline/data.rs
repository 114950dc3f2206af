//! Sequences and their on-disk text format.
//!
//! A sequence is a directory holding
//!
//! * `manifest.txt`: the header `# glt-sequence v1`, then `category <name>`,
//!   then one frame file name per line;
//! * one point file per frame, one `x y z` triple per line, in meters;
//! * `gt.txt`: the header `# glt-gt v1`, then `frame cx cy cz w h l yaw` per
//!   annotated frame.
//!
//! Blank lines and lines starting with `#` after the header are ignored.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{Box3D, Point3, PointCloud};

pub const MANIFEST_HEADER: &str = "# glt-sequence v1";
pub const GT_HEADER: &str = "# glt-gt v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub cloud: PointCloud,
    pub gt_box: Option<Box3D>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub category: String,
    pub frames: Vec<Frame>,
}

impl Sequence {
    /// Checks the tracking preconditions: two or more frames and an
    /// annotated first frame.
    pub fn validate(&self) -> Result<()> {
        if self.frames.len() < 2 {
            return Err(Error::Input(format!(
                "sequence {} has {} frame(s); tracking needs at least 2",
                self.name,
                self.frames.len()
            )));
        }
        if self.frames[0].gt_box.is_none() {
            return Err(Error::Input(format!("sequence {}: first frame has no box", self.name)));
        }
        Ok(())
    }

    /// Additionally requires a box on every frame, as training and
    /// evaluation do.
    pub fn validate_annotated(&self) -> Result<()> {
        self.validate()?;
        if let Some(i) = self.frames.iter().position(|f| f.gt_box.is_none()) {
            return Err(Error::Input(format!("sequence {}: frame {i} has no box", self.name)));
        }
        Ok(())
    }

    pub fn template_box(&self) -> Result<Box3D> {
        self.frames
            .first()
            .and_then(|f| f.gt_box)
            .ok_or_else(|| Error::Input(format!("sequence {}: first frame has no box", self.name)))
    }

    pub fn gt_boxes(&self) -> Result<Vec<Box3D>> {
        self.validate_annotated()?;
        Ok(self.frames.iter().map(|f| f.gt_box.expect("validated")).collect())
    }
}

fn frame_file(i: usize) -> String {
    format!("{i:06}.txt")
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_sequence(dir: &Path, seq: &Sequence) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!("{MANIFEST_HEADER}\ncategory {}\n", seq.category);
    let mut gt = format!("{GT_HEADER}\n");
    for (i, frame) in seq.frames.iter().enumerate() {
        let name = frame_file(i);
        manifest.push_str(&name);
        manifest.push('\n');
        let mut points = String::with_capacity(frame.cloud.len() * 32);
        for p in &frame.cloud.coords {
            let _ = writeln!(points, "{} {} {}", p[0], p[1], p[2]);
        }
        write_file(&dir.join(&name), &points)?;
        if let Some(b) = frame.gt_box {
            let [cx, cy, cz] = b.center;
            let [w, h, l] = b.size;
            let _ = writeln!(gt, "{i} {cx} {cy} {cz} {w} {h} {l} {}", b.yaw);
        }
    }
    write_file(&dir.join("manifest.txt"), &manifest)?;
    write_file(&dir.join("gt.txt"), &gt)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Content lines after a mandatory header, with their 1-based numbers.
fn body_lines<'a>(path: &Path, text: &'a str, header: &str) -> Result<Vec<(usize, &'a str)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first.trim() == header => {}
        Some((_, first)) => {
            return Err(Error::data(path, format!("expected header {header:?}, found {first:?}")));
        }
        None => return Err(Error::data(path, "empty file")),
    }
    Ok(lines
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .collect())
}

fn parse_floats<const N: usize>(path: &Path, line_no: usize, fields: &[&str]) -> Result<[f64; N]> {
    if fields.len() != N {
        return Err(Error::data(
            path,
            format!("line {line_no}: expected {N} numbers, found {}", fields.len()),
        ));
    }
    let mut out = [0.0f64; N];
    for (o, f) in out.iter_mut().zip(fields) {
        *o = f
            .parse()
            .map_err(|_| Error::data(path, format!("line {line_no}: bad number {f:?}")))?;
        if !o.is_finite() {
            return Err(Error::data(path, format!("line {line_no}: non-finite value {f}")));
        }
    }
    Ok(out)
}

fn read_points(path: &Path) -> Result<PointCloud> {
    let text = read_text(path)?;
    let mut coords: Vec<Point3> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        coords.push(parse_floats::<3>(path, i + 1, &fields)?);
    }
    PointCloud::new(coords).map_err(|e| Error::data(path, e.to_string()))
}

pub fn read_sequence(dir: &Path) -> Result<Sequence> {
    let manifest_path = dir.join("manifest.txt");
    let manifest = read_text(&manifest_path)?;
    let body = body_lines(&manifest_path, &manifest, MANIFEST_HEADER)?;
    let mut category = String::from("unknown");
    let mut files: Vec<&str> = Vec::new();
    for (_, line) in body {
        match line.strip_prefix("category ") {
            Some(c) => category = c.trim().to_string(),
            None => files.push(line),
        }
    }
    let mut frames = Vec::with_capacity(files.len());
    for f in &files {
        frames.push(Frame {
            cloud: read_points(&dir.join(f))?,
            gt_box: None,
        });
    }

    let gt_path = dir.join("gt.txt");
    if gt_path.exists() {
        let gt = read_text(&gt_path)?;
        for (line_no, line) in body_lines(&gt_path, &gt, GT_HEADER)? {
            let fields: Vec<&str> = line.split_whitespace().collect();
            let (idx, rest) = fields
                .split_first()
                .ok_or_else(|| Error::data(&gt_path, format!("line {line_no}: empty")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::data(&gt_path, format!("line {line_no}: bad frame index {idx:?}")))?;
            let [cx, cy, cz, w, h, l, yaw] = parse_floats::<7>(&gt_path, line_no, rest)?;
            let frame = frames.get_mut(idx).ok_or_else(|| {
                Error::data(&gt_path, format!("line {line_no}: frame {idx} not in manifest"))
            })?;
            frame.gt_box = Some(
                Box3D::new([cx, cy, cz], [w, h, l], yaw)
                    .map_err(|e| Error::data(&gt_path, format!("line {line_no}: {e}")))?,
            );
        }
    }
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Sequence {
        name,
        category,
        frames,
    })
}

/// Every sequence directory (one holding `manifest.txt`) directly under
/// `root`, sorted by name.
pub fn read_dataset(root: &Path) -> Result<Vec<Sequence>> {
    if root.join("manifest.txt").exists() {
        return Ok(vec![read_sequence(root)?]);
    }
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.join("manifest.txt").is_file() {
            dirs.push(path);
        }
    }
    if dirs.is_empty() {
        return Err(Error::data(root, "no sequence directories found"));
    }
    dirs.sort();
    dirs.iter().map(|d| read_sequence(d)).collect()
}

pub fn write_dataset(root: &Path, sequences: &[Sequence]) -> Result<()> {
    for seq in sequences {
        write_sequence(&root.join(&seq.name), seq)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Sequence {
        let b = Box3D::new([1.0, 2.0, 0.5], [1.8, 1.5, 4.0], 0.3).unwrap();
        Sequence {
            name: "seq".into(),
            category: "car".into(),
            frames: vec![
                Frame {
                    cloud: PointCloud::new(vec![[0.1, 0.2, 0.3], [1.0 / 3.0, -2.5, 1e-9]]).unwrap(),
                    gt_box: Some(b),
                },
                Frame {
                    cloud: PointCloud::new(vec![[4.0, 5.0, 6.0]]).unwrap(),
                    gt_box: None,
                },
            ],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let seq = tiny();
        write_sequence(&dir.path().join("seq"), &seq).unwrap();
        let back = read_sequence(&dir.path().join("seq")).unwrap();
        assert_eq!(back, seq);
        let all = read_dataset(dir.path()).unwrap();
        assert_eq!(all, vec![seq]);
    }

    #[test]
    fn malformed_files_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        let seq_dir = dir.path().join("s");
        write_sequence(&seq_dir, &tiny()).unwrap();
        fs::write(seq_dir.join("000001.txt"), "1 2\n").unwrap();
        assert!(matches!(read_sequence(&seq_dir), Err(Error::Data { .. })));

        fs::write(seq_dir.join("manifest.txt"), "# something else\n").unwrap();
        assert!(matches!(read_sequence(&seq_dir), Err(Error::Data { .. })));
        assert!(matches!(read_dataset(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn validation_rules() {
        let mut seq = tiny();
        seq.validate().unwrap();
        assert!(seq.validate_annotated().is_err());
        seq.frames.truncate(1);
        assert!(seq.validate().is_err());
    }
}
