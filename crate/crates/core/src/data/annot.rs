//! Landmark annotations and the `glefmt v1` text format: one header line,
//! then one comma-separated record per image — image_id, category, bbox
//! (x0,y0,x1,y1), and 8 landmark triplets (x, y, visibility code).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const FORMAT_HEADER: &str = "glefmt v1";
pub const NUM_SLOTS: usize = 8;

/// Canonical landmark order; also the report column order.
pub const SLOT_NAMES: [&str; NUM_SLOTS] = [
    "L.Collar",
    "R.Collar",
    "L.Sleeve",
    "R.Sleeve",
    "L.Waistline",
    "R.Waistline",
    "L.Hem",
    "R.Hem",
];

/// Visibility codes follow the DeepFashion list-file convention:
/// 0 = visible, 1 = occluded, 2 = absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Visibility {
    Visible,
    Occluded,
    Absent,
}

impl Visibility {
    pub fn code(&self) -> u8 {
        match self {
            Visibility::Visible => 0,
            Visibility::Occluded => 1,
            Visibility::Absent => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Visibility::Visible),
            1 => Some(Visibility::Occluded),
            2 => Some(Visibility::Absent),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    FullBody,
    Upper,
    Lower,
}

impl Category {
    pub fn as_str(&self) -> &'static str {
        match self {
            Category::FullBody => "full_body",
            Category::Upper => "upper",
            Category::Lower => "lower",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full_body" => Some(Category::FullBody),
            "upper" => Some(Category::Upper),
            "lower" => Some(Category::Lower),
            _ => None,
        }
    }

    /// Slots that must be absent for this category; all other slots must be
    /// present (visible or occluded). Full-body garments carry all 8
    /// landmarks, upper garments 6 (no waistline), lower garments 4 (no
    /// collar, no sleeve).
    pub fn absent_slots(&self) -> &'static [usize] {
        match self {
            Category::FullBody => &[],
            Category::Upper => &[4, 5],
            Category::Lower => &[0, 1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub x: f64,
    pub y: f64,
    pub visibility: Visibility,
}

impl Landmark {
    pub fn absent() -> Self {
        Landmark {
            x: 0.0,
            y: 0.0,
            visibility: Visibility::Absent,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkAnnotation {
    pub image_id: String,
    pub category: Category,
    /// (x0, y0, x1, y1) in pixels.
    pub bbox: [f64; 4],
    pub landmarks: [Landmark; NUM_SLOTS],
}

impl LandmarkAnnotation {
    /// Structural validation: bbox non-degenerate, absence pattern exactly
    /// matches the category, absent slots carry no coordinates.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let [x0, y0, x1, y1] = self.bbox;
        if !self.bbox.iter().all(|v| v.is_finite()) || x1 <= x0 || y1 <= y0 {
            return Err(format!("degenerate bbox ({x0}, {y0}, {x1}, {y1})"));
        }
        let absent = self.category.absent_slots();
        for (i, lm) in self.landmarks.iter().enumerate() {
            let must_be_absent = absent.contains(&i);
            let is_absent = lm.visibility == Visibility::Absent;
            if must_be_absent && !is_absent {
                return Err(format!(
                    "slot {}: coordinate present but category {} requires it absent",
                    SLOT_NAMES[i],
                    self.category.as_str()
                ));
            }
            if !must_be_absent && is_absent {
                return Err(format!(
                    "slot {}: absent but category {} requires it present",
                    SLOT_NAMES[i],
                    self.category.as_str()
                ));
            }
            if is_absent && (lm.x != 0.0 || lm.y != 0.0) {
                return Err(format!(
                    "slot {}: absent slots must carry coordinates (0, 0), got ({}, {})",
                    SLOT_NAMES[i], lm.x, lm.y
                ));
            }
            if !is_absent && (!lm.x.is_finite() || !lm.y.is_finite()) {
                return Err(format!("slot {}: non-finite coordinates", SLOT_NAMES[i]));
            }
        }
        Ok(())
    }

    /// Check visible landmarks against the image dimensions.
    pub fn validate_bounds(&self, width: usize, height: usize) -> std::result::Result<(), String> {
        for (i, lm) in self.landmarks.iter().enumerate() {
            if lm.visibility == Visibility::Visible
                && (lm.x < 0.0 || lm.y < 0.0 || lm.x >= width as f64 || lm.y >= height as f64)
            {
                return Err(format!(
                    "slot {}: visible landmark ({}, {}) outside {width}x{height} image",
                    SLOT_NAMES[i], lm.x, lm.y
                ));
            }
        }
        Ok(())
    }
}

/// Serialize annotations in `glefmt v1` (header line + one record per image).
pub fn save_annotations(path: &Path, annotations: &[LandmarkAnnotation]) -> Result<()> {
    let mut out = String::new();
    out.push_str(FORMAT_HEADER);
    out.push('\n');
    for ann in annotations {
        out.push_str(&format_record(ann));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

fn format_record(ann: &LandmarkAnnotation) -> String {
    let mut fields: Vec<String> = vec![ann.image_id.clone(), ann.category.as_str().to_string()];
    fields.extend(ann.bbox.iter().map(|v| v.to_string()));
    for lm in &ann.landmarks {
        fields.push(lm.x.to_string());
        fields.push(lm.y.to_string());
        fields.push(lm.visibility.code().to_string());
    }
    fields.join(",")
}

/// Parse and validate a `glefmt v1` file. Blank lines and `#` comments are
/// allowed after the header; every malformed or invariant-violating record is
/// rejected with its line number.
pub fn load_annotations(path: &Path) -> Result<Vec<LandmarkAnnotation>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let file = path.display().to_string();
    let fail = |line: usize, msg: String| Error::Annotation {
        file: file.clone(),
        line,
        msg,
    };

    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == FORMAT_HEADER => {}
        Some((_, header)) => {
            return Err(fail(1, format!("bad header '{}', expected '{FORMAT_HEADER}'", header.trim())))
        }
        None => return Err(fail(1, format!("empty file, expected '{FORMAT_HEADER}' header"))),
    }

    let mut annotations = Vec::new();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        annotations.push(parse_record(line).map_err(|msg| fail(line_no, msg))?);
    }
    Ok(annotations)
}

fn parse_record(line: &str) -> std::result::Result<LandmarkAnnotation, String> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    let expected = 2 + 4 + 3 * NUM_SLOTS;
    if fields.len() != expected {
        return Err(format!("{} fields, expected {expected}", fields.len()));
    }

    let image_id = fields[0].to_string();
    if image_id.is_empty()
        || image_id.contains('/')
        || image_id.contains('\\')
        || image_id.contains("..")
    {
        return Err(format!("invalid image_id '{image_id}'"));
    }
    let category = Category::parse(fields[1])
        .ok_or_else(|| format!("unknown category '{}'", fields[1]))?;

    let num = |s: &str, what: &str| -> std::result::Result<f64, String> {
        s.parse::<f64>().map_err(|e| format!("bad {what} '{s}': {e}"))
    };
    let bbox = [
        num(fields[2], "bbox x0")?,
        num(fields[3], "bbox y0")?,
        num(fields[4], "bbox x1")?,
        num(fields[5], "bbox y1")?,
    ];

    let mut landmarks = [Landmark::absent(); NUM_SLOTS];
    for (slot, lm) in landmarks.iter_mut().enumerate() {
        let base = 6 + slot * 3;
        let x = num(fields[base], &format!("{} x", SLOT_NAMES[slot]))?;
        let y = num(fields[base + 1], &format!("{} y", SLOT_NAMES[slot]))?;
        let code: u8 = fields[base + 2]
            .parse()
            .map_err(|_| format!("bad visibility code '{}' for {}", fields[base + 2], SLOT_NAMES[slot]))?;
        let visibility = Visibility::from_code(code)
            .ok_or_else(|| format!("visibility code {code} for {} not in 0/1/2", SLOT_NAMES[slot]))?;
        *lm = Landmark { x, y, visibility };
    }

    let ann = LandmarkAnnotation {
        image_id,
        category,
        bbox,
        landmarks,
    };
    ann.validate()?;
    Ok(ann)
}
