//! Plan execution: expands a plan over a manifest into work items and runs
//! them on a pool of workers, writing one PNG per item.
//!
//! Output bytes depend only on the item, never on which worker ran it or
//! when, so any worker count yields the same tree.

use std::fmt;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use image::ImageReader;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::balancer::AugmentationPlan;
use crate::imgops::{hflip, max_rgb_normalize, rotate, ImageBuffer};
use crate::manifest::{resolve_image_path, ClassLabel, DatasetManifest, NUM_CLASSES};

/// Largest factor whose angles still get distinct millidegree names.
pub const MAX_NAMEABLE_FACTOR: u32 = 360_000;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("plan expects {expected} {label} images but the manifest has {found}")]
    PlanMismatch { label: ClassLabel, expected: u64, found: u64 },
    #[error("rotation factor {factor} for {label} exceeds {MAX_NAMEABLE_FACTOR}")]
    FactorTooLarge { label: ClassLabel, factor: u32 },
    #[error("workers must be at least 1")]
    NoWorkers,
    #[error("{source_id} ({output_name}): {message}")]
    Item { source_id: String, output_name: String, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl PipelineError {
    /// True for failures reading or writing files rather than bad data.
    pub fn is_io(&self) -> bool {
        matches!(self, PipelineError::Io { .. })
    }
}

/// What a work item does to its source image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Operation {
    Copy,
    Flip,
    Rotate(f64),
    FlipRotate(f64),
}

impl Operation {
    fn flips(self) -> bool {
        matches!(self, Operation::Flip | Operation::FlipRotate(_))
    }

    fn angle(self) -> Option<f64> {
        match self {
            Operation::Rotate(a) | Operation::FlipRotate(a) => Some(a),
            _ => None,
        }
    }
}

fn millidegrees(angle: f64) -> i64 {
    (angle * 1000.0).round() as i64
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Operation::Copy => f.write_str("copy"),
            Operation::Flip => f.write_str("flip"),
            Operation::Rotate(a) => write!(f, "rotate({:.3})", millidegrees(a) as f64 / 1000.0),
            Operation::FlipRotate(a) => write!(f, "flip+rotate({:.3})", millidegrees(a) as f64 / 1000.0),
        }
    }
}

/// Output file stem for an item: `<id>__o`, `<id>__f`, `<id>__r<mdeg>` or
/// `<id>__f_r<mdeg>`, where `<mdeg>` is the angle in millidegrees rounded
/// half up and zero-padded to six digits.
pub fn output_name(source_id: &str, op: Operation) -> String {
    match op {
        Operation::Copy => format!("{source_id}__o"),
        Operation::Flip => format!("{source_id}__f"),
        Operation::Rotate(a) => format!("{source_id}__r{:06}", millidegrees(a)),
        Operation::FlipRotate(a) => format!("{source_id}__f_r{:06}", millidegrees(a)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkItem {
    pub source_id: String,
    /// Source file relative to the images directory.
    pub source_path: PathBuf,
    pub label: ClassLabel,
    pub operation: Operation,
    pub normalize: bool,
    pub output_name: String,
}

/// Expands a plan into one work item per output file.
///
/// Per source image: a copy, a flip if the plan flips, and for each angle a
/// rotation plus (when flipping) a flipped rotation. Items are grouped by
/// source in manifest order.
pub fn expand(plan: &AugmentationPlan, m: &DatasetManifest, normalize: bool) -> Result<Vec<WorkItem>, PipelineError> {
    let mut found = [0u64; NUM_CLASSES];
    for e in m.entries() {
        found[e.label.index()] += 1;
    }
    for cp in plan.classes() {
        if cp.input_count != found[cp.label.index()] {
            return Err(PipelineError::PlanMismatch {
                label: cp.label,
                expected: cp.input_count,
                found: found[cp.label.index()],
            });
        }
        if cp.rotation_factor > MAX_NAMEABLE_FACTOR {
            return Err(PipelineError::FactorTooLarge { label: cp.label, factor: cp.rotation_factor });
        }
    }

    let mut items = Vec::with_capacity(plan.total_output() as usize);
    for e in m.entries() {
        let cp = plan.class(e.label);
        let mut ops = vec![Operation::Copy];
        if cp.flip {
            ops.push(Operation::Flip);
        }
        for &a in &cp.angles {
            ops.push(Operation::Rotate(a));
            if cp.flip {
                ops.push(Operation::FlipRotate(a));
            }
        }
        items.extend(ops.into_iter().map(|operation| WorkItem {
            source_id: e.image_id.clone(),
            source_path: e.path.clone(),
            label: e.label,
            operation,
            normalize,
            output_name: output_name(&e.image_id, operation),
        }));
    }
    Ok(items)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputRow {
    pub output_name: String,
    pub source_id: String,
    pub label: ClassLabel,
    pub operation: Operation,
}

/// Produced files, sorted by output name. Each file is `<output_name>.png`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OutputManifest {
    pub rows: Vec<OutputRow>,
}

impl OutputManifest {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn class_counts(&self) -> [u64; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for r in &self.rows {
            c[r.label.index()] += 1;
        }
        c
    }

    /// `output_name,source_id,label,operation` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("output_name,source_id,label,operation\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.output_name, r.source_id, r.label, r.operation));
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ExecuteOptions {
    pub workers: usize,
    /// Normalize the source before flipping/rotating instead of after.
    pub normalize_first: bool,
    /// Record failing items and carry on instead of aborting.
    pub keep_going: bool,
}

impl Default for ExecuteOptions {
    fn default() -> Self {
        ExecuteOptions { workers: 1, normalize_first: false, keep_going: false }
    }
}

#[derive(Debug)]
pub struct ExecuteReport {
    pub manifest: OutputManifest,
    /// Only populated with `keep_going`; sorted by item order.
    pub failures: Vec<PipelineError>,
}

/// Decodes a JPEG or PNG file (format sniffed from content) to RGB8.
pub fn load_image(path: &Path) -> Result<ImageBuffer, String> {
    let reader = ImageReader::open(path)
        .map_err(|e| format!("cannot open {}: {e}", path.display()))?
        .with_guessed_format()
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let decoded = reader.decode().map_err(|e| format!("cannot decode {}: {e}", path.display()))?;
    Ok(decoded.into_rgb8().into())
}

/// Encodes an image as PNG.
pub fn encode_png(img: &ImageBuffer) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    image::RgbImage::from(img.clone())
        .write_to(&mut buf, image::ImageFormat::Png)
        .expect("in-memory PNG encoding cannot fail");
    buf.into_inner()
}

/// Writes `bytes` to `path` through a temporary sibling and a rename, so a
/// reader never sees a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

fn apply(src: &ImageBuffer, flipped: &mut Option<ImageBuffer>, item: &WorkItem, normalize_last: bool) -> ImageBuffer {
    let base = if item.operation.flips() { flipped.get_or_insert_with(|| hflip(src)) } else { src };
    let out = match item.operation.angle() {
        Some(a) => rotate(base, a),
        None => base.clone(),
    };
    if normalize_last && item.normalize {
        max_rgb_normalize(&out)
    } else {
        out
    }
}

fn process_group(
    items: &[WorkItem],
    images_dir: &Path,
    out_dir: &Path,
    opts: &ExecuteOptions,
    mut on_result: impl FnMut(usize, Result<OutputRow, PipelineError>) -> bool,
) {
    let first = &items[0];
    let item_err = |item: &WorkItem, message: String| PipelineError::Item {
        source_id: item.source_id.clone(),
        output_name: item.output_name.clone(),
        message,
    };
    let direct = images_dir.join(&first.source_path);
    let path = if direct.is_file() {
        Some(direct)
    } else {
        resolve_image_path(images_dir, &first.source_id).map(|p| images_dir.join(p))
    };
    let loaded = match path {
        Some(p) => load_image(&p),
        None => Err(format!("source image not found in {}", images_dir.display())),
    };
    let src = match loaded {
        Ok(img) => img,
        Err(msg) => {
            for (i, item) in items.iter().enumerate() {
                if !on_result(i, Err(item_err(item, msg.clone()))) {
                    return;
                }
            }
            return;
        }
    };
    // Flip and normalization commute, so normalizing first is done once per source.
    let src_norm;
    let src = if opts.normalize_first && first.normalize {
        src_norm = max_rgb_normalize(&src);
        &src_norm
    } else {
        &src
    };
    let mut flipped = None;
    for (i, item) in items.iter().enumerate() {
        let img = apply(src, &mut flipped, item, !opts.normalize_first);
        let dest = out_dir.join(format!("{}.png", item.output_name));
        let result = write_atomic(&dest, &encode_png(&img))
            .map(|()| OutputRow {
                output_name: item.output_name.clone(),
                source_id: item.source_id.clone(),
                label: item.label,
                operation: item.operation,
            })
            .map_err(|source| PipelineError::Io { path: dest, source });
        if !on_result(i, result) {
            return;
        }
    }
}

/// Runs every item, writing `<out_dir>/<output_name>.png`.
///
/// Items sharing a source are processed together so each source is decoded
/// once. Workers claim groups from a shared cursor; results are collected
/// and sorted by output name at the end.
pub fn execute(
    items: &[WorkItem],
    images_dir: &Path,
    out_dir: &Path,
    opts: &ExecuteOptions,
) -> Result<ExecuteReport, PipelineError> {
    if opts.workers == 0 {
        return Err(PipelineError::NoWorkers);
    }
    fs::create_dir_all(out_dir).map_err(|source| PipelineError::Io { path: out_dir.to_path_buf(), source })?;

    let mut groups = Vec::new();
    let mut start = 0;
    for i in 1..=items.len() {
        if i == items.len() || items[i].source_id != items[start].source_id {
            groups.push(start..i);
            start = i;
        }
    }

    let cursor = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let rows = Mutex::new(Vec::with_capacity(items.len()));
    let failures = Mutex::new(Vec::new());

    std::thread::scope(|s| {
        for _ in 0..opts.workers.min(groups.len().max(1)) {
            s.spawn(|| loop {
                if abort.load(Ordering::Relaxed) {
                    break;
                }
                let g = cursor.fetch_add(1, Ordering::Relaxed);
                let Some(range) = groups.get(g) else { break };
                let base = range.start;
                process_group(&items[range.clone()], images_dir, out_dir, opts, |i, r| match r {
                    Ok(row) => {
                        rows.lock().unwrap().push(row);
                        true
                    }
                    Err(e) => {
                        failures.lock().unwrap().push((base + i, e));
                        if !opts.keep_going {
                            abort.store(true, Ordering::Relaxed);
                        }
                        opts.keep_going
                    }
                });
            });
        }
    });

    let mut failures = failures.into_inner().unwrap();
    failures.sort_by_key(|(i, _)| *i);
    let mut failures: Vec<PipelineError> = failures.into_iter().map(|(_, e)| e).collect();
    if !opts.keep_going && !failures.is_empty() {
        return Err(failures.swap_remove(0));
    }
    let mut rows = rows.into_inner().unwrap();
    rows.sort_by(|a, b| a.output_name.cmp(&b.output_name));
    Ok(ExecuteReport { manifest: OutputManifest { rows }, failures })
}

/// SHA-256 over the sorted `name<TAB>sha256(content)` lines of the
/// regular files directly inside `dir`, optionally only those with the
/// given extension.
pub fn dir_digest(dir: &Path, extension: Option<&str>) -> std::io::Result<String> {
    let mut entries = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let wanted = extension.is_none_or(|ext| entry.path().extension().is_some_and(|e| e == ext));
        if wanted && entry.file_type()?.is_file() {
            let content = fs::read(entry.path())?;
            entries.push((entry.file_name().to_string_lossy().into_owned(), hex::encode(Sha256::digest(&content))));
        }
    }
    entries.sort();
    let mut h = Sha256::new();
    for (name, hash) in entries {
        h.update(format!("{name}\t{hash}\n").as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}
