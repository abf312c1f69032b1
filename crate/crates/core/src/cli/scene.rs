//! Plain-text camera and match files.
//!
//! Cameras, one per line:
//! `id fx fy cx cy width height r11 r12 r13 r21 r22 r23 r31 r32 r33 t1 t2 t3 [image]`
//!
//! Matches, one per line: `view_a u1 v1 view_b u2 v2`
//!
//! Blank lines are skipped and `#` starts a comment.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector2, Vector3};

use super::CliError;
use crate::epipolar::{CameraIntrinsics, CameraPose, CameraView, Correspondence};

const CAMERA_FIELDS: usize = 19;
const MATCH_FIELDS: usize = 6;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneBundle {
    pub views: Vec<CameraView>,
    pub correspondences: Vec<Correspondence>,
    /// Optional image per view id.
    pub images: BTreeMap<String, PathBuf>,
}

impl SceneBundle {
    pub fn view(&self, id: &str) -> Option<&CameraView> {
        self.views.iter().find(|v| v.id == id)
    }
}

struct Token<'a> {
    text: &'a str,
    column: usize,
}

/// Splits off comments and returns whitespace-separated tokens with their
/// 1-based character columns.
fn tokenize(line: &str) -> Vec<Token<'_>> {
    let content = line.split('#').next().unwrap_or("");
    let mut tokens = Vec::new();
    let mut start: Option<(usize, usize)> = None;
    for (col, (byte, ch)) in content.char_indices().enumerate() {
        match (ch.is_whitespace(), start) {
            (false, None) => start = Some((byte, col + 1)),
            (true, Some((b, c))) => {
                tokens.push(Token {
                    text: &content[b..byte],
                    column: c,
                });
                start = None;
            }
            _ => {}
        }
    }
    if let Some((b, c)) = start {
        tokens.push(Token {
            text: &content[b..],
            column: c,
        });
    }
    tokens
}

struct LineCtx<'a> {
    file: &'a str,
    line: usize,
}

impl LineCtx<'_> {
    fn error(&self, column: usize, message: impl Into<String>) -> CliError {
        CliError::Parse {
            file: self.file.to_string(),
            line: self.line,
            column,
            message: message.into(),
        }
    }

    fn float(&self, tok: &Token<'_>, what: &str) -> Result<f64, CliError> {
        tok.text
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| self.error(tok.column, format!("expected a finite number for {what}, found {:?}", tok.text)))
    }

    fn dimension(&self, tok: &Token<'_>, what: &str) -> Result<u32, CliError> {
        tok.text
            .parse::<u32>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| self.error(tok.column, format!("expected a positive integer for {what}, found {:?}", tok.text)))
    }
}

fn display_name(path: &Path) -> String {
    path.display().to_string()
}

/// Parses a camera file. Relative image paths are kept as written.
pub fn parse_cameras(text: &str, file: &str) -> Result<(Vec<CameraView>, BTreeMap<String, PathBuf>), CliError> {
    let mut views = Vec::new();
    let mut images = BTreeMap::new();
    let mut seen = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        let ctx = LineCtx { file, line: n + 1 };
        let tokens = tokenize(line);
        if tokens.is_empty() {
            continue;
        }
        if tokens.len() != CAMERA_FIELDS && tokens.len() != CAMERA_FIELDS + 1 {
            let column = tokens.get(CAMERA_FIELDS + 1).or(tokens.last()).map_or(1, |t| t.column);
            return Err(ctx.error(
                column,
                format!("expected {CAMERA_FIELDS} fields (plus optional image), found {}", tokens.len()),
            ));
        }
        let id = tokens[0].text.to_string();
        let names = ["fx", "fy", "cx", "cy"];
        let mut intr = [0.0; 4];
        for (slot, (tok, name)) in intr.iter_mut().zip(tokens[1..5].iter().zip(names)) {
            *slot = ctx.float(tok, name)?;
        }
        let width = ctx.dimension(&tokens[5], "width")?;
        let height = ctx.dimension(&tokens[6], "height")?;
        let mut r = [0.0; 9];
        for (slot, tok) in r.iter_mut().zip(&tokens[7..16]) {
            *slot = ctx.float(tok, "rotation")?;
        }
        let mut t = [0.0; 3];
        for (slot, tok) in t.iter_mut().zip(&tokens[16..19]) {
            *slot = ctx.float(tok, "translation")?;
        }
        let semantic = |e: crate::epipolar::GeometryError| CliError::Semantic(format!("{file}:{}: camera {id:?}: {e}", n + 1));
        let intrinsics = CameraIntrinsics::new(intr[0], intr[1], intr[2], intr[3]).map_err(semantic)?;
        let pose = CameraPose::new(Matrix3::from_row_slice(&r), Vector3::from(t)).map_err(semantic)?;
        if !seen.insert(id.clone()) {
            return Err(CliError::Semantic(format!("{file}:{}: duplicate view id {id:?}", n + 1)));
        }
        if let Some(img) = tokens.get(CAMERA_FIELDS) {
            images.insert(id.clone(), PathBuf::from(img.text));
        }
        views.push(CameraView::new(id.clone(), intrinsics, pose, width, height).map_err(semantic)?);
    }
    Ok((views, images))
}

/// Parses a match file, resolving every view id against `views`.
pub fn parse_matches(text: &str, file: &str, views: &[CameraView]) -> Result<Vec<Correspondence>, CliError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let ctx = LineCtx { file, line: n + 1 };
        let tokens = tokenize(line);
        if tokens.is_empty() {
            continue;
        }
        if tokens.len() != MATCH_FIELDS {
            let column = tokens.get(MATCH_FIELDS).or(tokens.last()).map_or(1, |t| t.column);
            return Err(ctx.error(column, format!("expected {MATCH_FIELDS} fields, found {}", tokens.len())));
        }
        let x1 = Vector2::new(ctx.float(&tokens[1], "u1")?, ctx.float(&tokens[2], "v1")?);
        let x2 = Vector2::new(ctx.float(&tokens[4], "u2")?, ctx.float(&tokens[5], "v2")?);
        let c = Correspondence::new(tokens[0].text, x1, tokens[3].text, x2);
        for (id, px) in [(&c.view_a, &c.x1), (&c.view_b, &c.x2)] {
            let view = views
                .iter()
                .find(|v| &v.id == id)
                .ok_or_else(|| CliError::Semantic(format!("{file}:{}: unknown view {id:?}", n + 1)))?;
            if !view.contains_pixel(px) {
                return Err(CliError::Semantic(format!(
                    "{file}:{}: pixel ({}, {}) outside view {id:?}",
                    n + 1,
                    px.x,
                    px.y
                )));
            }
        }
        out.push(c);
    }
    Ok(out)
}

/// Reads and resolves a camera file and a match file. Image paths are made
/// relative to the camera file's directory.
pub fn parse_scene(camera_path: &Path, matches_path: &Path) -> Result<SceneBundle, CliError> {
    let cameras = std::fs::read_to_string(camera_path).map_err(|e| CliError::io(camera_path, e))?;
    let matches = std::fs::read_to_string(matches_path).map_err(|e| CliError::io(matches_path, e))?;
    let (views, images) = parse_cameras(&cameras, &display_name(camera_path))?;
    let correspondences = parse_matches(&matches, &display_name(matches_path), &views)?;
    let base = camera_path.parent().unwrap_or(Path::new(""));
    let images = images
        .into_iter()
        .map(|(id, p)| (id, if p.is_relative() { base.join(p) } else { p }))
        .collect();
    Ok(SceneBundle {
        views,
        correspondences,
        images,
    })
}

/// Serializes views in the camera file format. Floats use the shortest
/// representation that parses back to the same value.
pub fn write_cameras(views: &[CameraView], images: &BTreeMap<String, PathBuf>) -> String {
    let mut out = String::from("# id fx fy cx cy width height r11 r12 r13 r21 r22 r23 r31 r32 r33 t1 t2 t3 [image]\n");
    for v in views {
        let i = &v.intrinsics;
        let _ = write!(out, "{} {} {} {} {} {} {}", v.id, i.fx, i.fy, i.cx, i.cy, v.width, v.height);
        for r in 0..3 {
            for c in 0..3 {
                let _ = write!(out, " {}", v.pose.rotation[(r, c)]);
            }
        }
        for t in v.pose.translation.iter() {
            let _ = write!(out, " {t}");
        }
        if let Some(p) = images.get(&v.id) {
            let _ = write!(out, " {}", p.display());
        }
        out.push('\n');
    }
    out
}

pub fn write_matches(correspondences: &[Correspondence]) -> String {
    let mut out = String::from("# view_a u1 v1 view_b u2 v2\n");
    for c in correspondences {
        let _ = writeln!(out, "{} {} {} {} {} {}", c.view_a, c.x1.x, c.x1.y, c.view_b, c.x2.x, c.x2.y);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const CAMS: &str = "\
# two cameras
a 500 500 320 240 640 480 1 0 0 0 1 0 0 0 1 0 0 0
b 500 500 320 240 640 480 1 0 0 0 1 0 0 0 1 -1 0 0  # shifted
";

    #[test]
    fn tokenizer_tracks_columns() {
        let toks = tokenize("  ab c\tdd # x y");
        let got: Vec<_> = toks.iter().map(|t| (t.text, t.column)).collect();
        assert_eq!(got, vec![("ab", 3), ("c", 6), ("dd", 8)]);
    }

    #[test]
    fn parses_cameras_and_matches() {
        let (views, images) = parse_cameras(CAMS, "cams.txt").unwrap();
        assert_eq!(views.len(), 2);
        assert!(images.is_empty());
        assert_eq!(views[1].pose.translation, Vector3::new(-1.0, 0.0, 0.0));
        let matches = parse_matches("a 10 20 b 30 40\n\n", "m.txt", &views).unwrap();
        assert_eq!(matches.len(), 1);
        assert!(parse_matches("", "m.txt", &views).unwrap().is_empty());
    }

    #[test]
    fn malformed_number_reports_position() {
        let err = parse_cameras("a 500 5x0 320 240 640 480 1 0 0 0 1 0 0 0 1 0 0 0\n", "c.txt").unwrap_err();
        match err {
            CliError::Parse { file, line, column, .. } => assert_eq!((file.as_str(), line, column), ("c.txt", 1, 7)),
            other => panic!("{other:?}"),
        }
        let err = parse_matches("\na 1 2 b 3\n", "m.txt", &[]).unwrap_err();
        assert!(matches!(err, CliError::Parse { line: 2, .. }), "{err:?}");
    }

    #[test]
    fn dangling_view_is_named() {
        let (views, _) = parse_cameras(CAMS, "cams.txt").unwrap();
        let err = parse_matches("a 1 2 99 3 4\n", "m.txt", &views).unwrap_err();
        assert_eq!(err.category(), "semantic");
        assert!(err.to_string().contains("\"99\""), "{err}");
    }

    #[test]
    fn rejects_duplicates_and_bad_rotation() {
        let dup = format!("{CAMS}a 500 500 320 240 640 480 1 0 0 0 1 0 0 0 1 0 0 0\n");
        assert!(matches!(parse_cameras(&dup, "c"), Err(CliError::Semantic(_))));
        let bad = "a 500 500 320 240 640 480 2 0 0 0 1 0 0 0 1 0 0 0\n";
        assert!(matches!(parse_cameras(bad, "c"), Err(CliError::Semantic(_))));
    }

    #[test]
    fn serializer_round_trips() {
        let (views, _) = parse_cameras(CAMS, "cams.txt").unwrap();
        let mut images = BTreeMap::new();
        images.insert("b".to_string(), PathBuf::from("b.png"));
        let text = write_cameras(&views, &images);
        let (again, imgs) = parse_cameras(&text, "x").unwrap();
        assert_eq!(again, views);
        assert_eq!(imgs, images);
        assert_eq!(write_cameras(&again, &imgs), text);
    }
}
