//! Ground-truth ingestion: class labels, the dataset manifest and per-class counts.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

/// Number of diagnosis categories.
pub const NUM_CLASSES: usize = 7;

/// Header shared by the one-hot ground-truth table and the probability CSV.
pub const ONE_HOT_HEADER: [&str; 8] = ["image", "MEL", "NV", "BCC", "AKIEC", "BKL", "DF", "VASC"];

/// Extensions probed, in order, when resolving an image id to a file.
pub const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

/// One of the seven lesion diagnoses, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ClassLabel {
    Mel,
    Nv,
    Bcc,
    Akiec,
    Bkl,
    Df,
    Vasc,
}

impl ClassLabel {
    /// All labels in canonical index order.
    pub const ALL: [ClassLabel; NUM_CLASSES] = [
        ClassLabel::Mel,
        ClassLabel::Nv,
        ClassLabel::Bcc,
        ClassLabel::Akiec,
        ClassLabel::Bkl,
        ClassLabel::Df,
        ClassLabel::Vasc,
    ];

    /// Labels in alphabetical code order, the column order of the
    /// published class-count table. Positional factor lists use this order.
    pub const TABLE_ORDER: [ClassLabel; NUM_CLASSES] = [
        ClassLabel::Akiec,
        ClassLabel::Bcc,
        ClassLabel::Bkl,
        ClassLabel::Df,
        ClassLabel::Mel,
        ClassLabel::Nv,
        ClassLabel::Vasc,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<ClassLabel> {
        Self::ALL.get(index).copied()
    }

    pub fn code(self) -> &'static str {
        match self {
            ClassLabel::Mel => "MEL",
            ClassLabel::Nv => "NV",
            ClassLabel::Bcc => "BCC",
            ClassLabel::Akiec => "AKIEC",
            ClassLabel::Bkl => "BKL",
            ClassLabel::Df => "DF",
            ClassLabel::Vasc => "VASC",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown class code `{0}`")]
pub struct UnknownClass(pub String);

impl FromStr for ClassLabel {
    type Err = UnknownClass;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ClassLabel::ALL.iter().copied().find(|c| c.code() == s).ok_or_else(|| UnknownClass(s.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("missing or misordered header, expected `{expected}`")]
    BadHeader { expected: String },
    #[error("expected {expected} columns, found {found}, row {row}")]
    ColumnCount { row: u64, expected: usize, found: usize },
    #[error("not one-hot, row {row}")]
    NotOneHot { row: u64 },
    #[error("invalid cell `{value}` (expected 0, 0.0, 1 or 1.0), row {row}")]
    InvalidCell { row: u64, value: String },
    #[error("duplicate image id `{id}`, row {row}")]
    DuplicateId { row: u64, id: String },
    #[error("empty image id, row {row}")]
    EmptyId { row: u64 },
    #[error("{source}, row {row}")]
    UnknownClass { row: u64, source: UnknownClass },
    #[error("malformed csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("no image file for `{id}` in {dir} (tried jpg, jpeg, png)")]
    ImageNotFound { id: String, dir: PathBuf },
}

/// A single ground-truth record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image_id: String,
    /// Path relative to the images directory.
    pub path: PathBuf,
    pub label: ClassLabel,
}

/// Labelled images, unique by id and sorted by id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Builds a manifest, sorting by image id and rejecting duplicates.
    pub fn from_entries(mut entries: Vec<ManifestEntry>) -> Result<Self, ManifestError> {
        entries.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        if let Some(w) = entries.windows(2).find(|w| w[0].image_id == w[1].image_id) {
            return Err(ManifestError::DuplicateId { row: 0, id: w[0].image_id.clone() });
        }
        Ok(DatasetManifest { entries })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&ManifestEntry> {
        self.entries.binary_search_by(|e| e.image_id.as_str().cmp(image_id)).ok().map(|i| &self.entries[i])
    }

    /// Replaces every entry's path with the first existing
    /// `<images_dir>/<image_id>.<ext>` for ext in jpg, jpeg, png.
    pub fn resolve_paths(&mut self, images_dir: &Path) -> Result<(), ManifestError> {
        for entry in &mut self.entries {
            entry.path = resolve_image_path(images_dir, &entry.image_id).ok_or_else(|| {
                ManifestError::ImageNotFound { id: entry.image_id.clone(), dir: images_dir.to_path_buf() }
            })?;
        }
        Ok(())
    }

    /// Canonical `image_id,path,label` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id,path,label\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{}\n", e.image_id, e.path.display(), e.label));
        }
        out
    }

    /// Parses the canonical CSV written by [`DatasetManifest::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self, ManifestError> {
        let mut rows = csv_rows(text);
        expect_header(&mut rows, &["image_id", "path", "label"])?;
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for rec in rows {
            let (row, rec) = rec?;
            if rec.len() != 3 {
                return Err(ManifestError::ColumnCount { row, expected: 3, found: rec.len() });
            }
            let image_id = rec[0].to_string();
            if image_id.is_empty() {
                return Err(ManifestError::EmptyId { row });
            }
            if !seen.insert(image_id.clone()) {
                return Err(ManifestError::DuplicateId { row, id: image_id });
            }
            let label = rec[2].parse().map_err(|source| ManifestError::UnknownClass { row, source })?;
            entries.push(ManifestEntry { image_id, path: PathBuf::from(&rec[1]), label });
        }
        DatasetManifest::from_entries(entries)
    }
}

/// Probes `<images_dir>/<image_id>.<ext>` and returns the relative file name found.
pub fn resolve_image_path(images_dir: &Path, image_id: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| PathBuf::from(format!("{image_id}.{ext}")))
        .find(|rel| images_dir.join(rel).is_file())
}

pub(crate) fn csv_rows(text: &str) -> impl Iterator<Item = Result<(u64, csv::StringRecord), csv::Error>> + '_ {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes())
        .into_records()
        .map(|r| r.map(|rec| (rec.position().map_or(0, |p| p.line()), rec)))
}

/// Consumes the header row and checks it matches `expected` exactly.
pub(crate) fn expect_header<I>(rows: &mut I, expected: &[&str]) -> Result<(), ManifestError>
where
    I: Iterator<Item = Result<(u64, csv::StringRecord), csv::Error>>,
{
    let bad = || ManifestError::BadHeader { expected: expected.join(",") };
    match rows.next() {
        Some(Ok((_, rec))) if rec.iter().map(str::trim).eq(expected.iter().copied()) => Ok(()),
        Some(Err(e)) => Err(e.into()),
        _ => Err(bad()),
    }
}

fn parse_one_hot_cell(cell: &str, row: u64) -> Result<bool, ManifestError> {
    match cell.trim() {
        "1" | "1.0" => Ok(true),
        "0" | "0.0" => Ok(false),
        other => Err(ManifestError::InvalidCell { row, value: other.to_string() }),
    }
}

/// Parses the one-hot ground-truth table (`image,MEL,NV,BCC,AKIEC,BKL,DF,VASC`).
///
/// Row numbers in errors are 1-based lines of the input, so the first data
/// row is row 2. Entry paths default to `<image_id>.jpg` until
/// [`DatasetManifest::resolve_paths`] is called.
pub fn parse_ground_truth(csv_text: &str) -> Result<DatasetManifest, ManifestError> {
    let mut rows = csv_rows(csv_text);
    expect_header(&mut rows, &ONE_HOT_HEADER)?;

    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for rec in rows {
        let (row, rec) = rec?;
        if rec.len() != ONE_HOT_HEADER.len() {
            return Err(ManifestError::ColumnCount { row, expected: ONE_HOT_HEADER.len(), found: rec.len() });
        }
        let image_id = rec[0].trim().to_string();
        if image_id.is_empty() {
            return Err(ManifestError::EmptyId { row });
        }
        let mut hot = None;
        let mut ones = 0;
        for (i, cell) in rec.iter().skip(1).enumerate() {
            if parse_one_hot_cell(cell, row)? {
                ones += 1;
                hot = ClassLabel::from_index(i);
            }
        }
        let label = match (ones, hot) {
            (1, Some(label)) => label,
            _ => return Err(ManifestError::NotOneHot { row }),
        };
        if !seen.insert(image_id.clone()) {
            return Err(ManifestError::DuplicateId { row, id: image_id });
        }
        entries.push(ManifestEntry { path: PathBuf::from(format!("{image_id}.jpg")), image_id, label });
    }
    DatasetManifest::from_entries(entries)
}

/// Writes a manifest back out in the one-hot ground-truth layout.
pub fn write_ground_truth(m: &DatasetManifest) -> String {
    let mut out = ONE_HOT_HEADER.join(",");
    out.push('\n');
    for e in m.entries() {
        out.push_str(&e.image_id);
        for c in ClassLabel::ALL {
            out.push_str(if c == e.label { ",1.0" } else { ",0.0" });
        }
        out.push('\n');
    }
    out
}

/// Images per class, indexed by [`ClassLabel::index`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassCounts(pub [u64; NUM_CLASSES]);

impl ClassCounts {
    /// Builds counts from values listed in [`ClassLabel::TABLE_ORDER`].
    pub fn from_table_order(values: [u64; NUM_CLASSES]) -> Self {
        let mut counts = [0; NUM_CLASSES];
        for (label, v) in ClassLabel::TABLE_ORDER.iter().zip(values) {
            counts[label.index()] = v;
        }
        ClassCounts(counts)
    }

    pub fn get(&self, label: ClassLabel) -> u64 {
        self.0[label.index()]
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    pub fn table_order(&self) -> [u64; NUM_CLASSES] {
        ClassLabel::TABLE_ORDER.map(|c| self.get(c))
    }
}

pub fn class_counts(m: &DatasetManifest) -> ClassCounts {
    let mut counts = [0u64; NUM_CLASSES];
    for e in m.entries() {
        counts[e.label.index()] += 1;
    }
    ClassCounts(counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "image,MEL,NV,BCC,AKIEC,BKL,DF,VASC\n";

    #[test]
    fn label_index_roundtrip() {
        for (i, c) in ClassLabel::ALL.iter().enumerate() {
            assert_eq!(c.index(), i);
            assert_eq!(ClassLabel::from_index(i), Some(*c));
            assert_eq!(c.code().parse::<ClassLabel>().unwrap(), *c);
        }
        assert_eq!(ClassLabel::from_index(7), None);
        assert!("XYZ".parse::<ClassLabel>().is_err());
    }

    #[test]
    fn one_hot_decode() {
        let m = parse_ground_truth(&format!(
            "{HEADER}ISIC_002,0.0,0.0,0.0,0.0,0.0,0.0,1.0\nISIC_001,1.0,0.0,0.0,0.0,0.0,0.0,0.0\n"
        ))
        .unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.entries()[0].image_id, "ISIC_001");
        assert_eq!(m.entries()[0].label, ClassLabel::Mel);
        assert_eq!(m.entries()[1].label, ClassLabel::Vasc);
    }

    #[test]
    fn crlf_and_integer_cells() {
        let m = parse_ground_truth("image,MEL,NV,BCC,AKIEC,BKL,DF,VASC\r\nA,0,1,0,0,0,0,0\r\n").unwrap();
        assert_eq!(m.entries()[0].label, ClassLabel::Nv);
    }

    #[test]
    fn not_one_hot_reports_row() {
        let err = parse_ground_truth(&format!("{HEADER}ISIC_003,1.0,1.0,0,0,0,0,0\n")).unwrap_err();
        assert_eq!(err.to_string(), "not one-hot, row 2");
        let err = parse_ground_truth(&format!("{HEADER}A,1,0,0,0,0,0,0\nB,0,0,0,0,0,0,0\n")).unwrap_err();
        assert_eq!(err.to_string(), "not one-hot, row 3");
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            parse_ground_truth("image,NV,MEL,BCC,AKIEC,BKL,DF,VASC\n"),
            Err(ManifestError::BadHeader { .. })
        ));
        assert!(matches!(parse_ground_truth(""), Err(ManifestError::BadHeader { .. })));
        assert!(matches!(
            parse_ground_truth(&format!("{HEADER}A,0.5,0.5,0,0,0,0,0\n")),
            Err(ManifestError::InvalidCell { row: 2, .. })
        ));
        assert!(matches!(
            parse_ground_truth(&format!("{HEADER}A,1,0,0,0,0,0,0\nA,1,0,0,0,0,0,0\n")),
            Err(ManifestError::DuplicateId { row: 3, .. })
        ));
        assert!(matches!(
            parse_ground_truth(&format!("{HEADER}A,1,0,0,0,0,0\n")),
            Err(ManifestError::ColumnCount { row: 2, .. })
        ));
    }

    #[test]
    fn counts() {
        assert_eq!(class_counts(&parse_ground_truth(HEADER).unwrap()).0, [0; 7]);
        let m = parse_ground_truth(&format!("{HEADER}a,0,1,0,0,0,0,0\nb,0,1,0,0,0,0,0\nc,0,1,0,0,0,0,0\n")).unwrap();
        let c = class_counts(&m);
        assert_eq!(c.get(ClassLabel::Nv), 3);
        assert_eq!(c.total(), 3);
    }

    #[test]
    fn table_order_roundtrip() {
        let c = ClassCounts::from_table_order([327, 514, 1099, 115, 1113, 6705, 142]);
        assert_eq!(c.get(ClassLabel::Mel), 1113);
        assert_eq!(c.get(ClassLabel::Akiec), 327);
        assert_eq!(c.table_order(), [327, 514, 1099, 115, 1113, 6705, 142]);
        assert_eq!(c.total(), 10_015);
    }

    #[test]
    fn canonical_csv_roundtrip() {
        let m = parse_ground_truth(&format!("{HEADER}b,0,0,1,0,0,0,0\na,0,0,0,0,0,1,0\n")).unwrap();
        assert_eq!(DatasetManifest::from_csv(&m.to_csv()).unwrap(), m);
        assert_eq!(parse_ground_truth(&write_ground_truth(&m)).unwrap(), m);
    }

    #[test]
    fn resolves_extensions_in_order() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.png"), b"").unwrap();
        std::fs::write(dir.path().join("a.jpeg"), b"").unwrap();
        std::fs::write(dir.path().join("b.png"), b"").unwrap();
        assert_eq!(resolve_image_path(dir.path(), "a"), Some(PathBuf::from("a.jpeg")));
        assert_eq!(resolve_image_path(dir.path(), "b"), Some(PathBuf::from("b.png")));
        assert_eq!(resolve_image_path(dir.path(), "c"), None);
    }
}
