#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dermaug::imgops::ImageBuffer;
use dermaug::manifest::{ClassLabel, NUM_CLASSES};
use dermaug::pipeline::encode_png;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GT_HEADER: &str = "image,MEL,NV,BCC,AKIEC,BKL,DF,VASC";

/// Published training counts in AKIEC,BCC,BKL,DF,MEL,NV,VASC order.
pub const TABLE_COUNTS: [u64; NUM_CLASSES] = [327, 514, 1099, 115, 1113, 6705, 142];
pub const TABLE_AFTER_FLIP: [u64; NUM_CLASSES] = [654, 1028, 2198, 230, 2226, 13410, 284];
pub const TABLE_AFTER_ROTATION: [u64; NUM_CLASSES] = [14388, 13364, 13188, 13800, 13356, 13410, 14768];
pub const TABLE_TOTAL: u64 = 96_274;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn one_hot_row(id: &str, label: ClassLabel) -> String {
    let mut row = id.to_string();
    for c in ClassLabel::ALL {
        row.push_str(if c == label { ",1.0" } else { ",0.0" });
    }
    row
}

/// Ground-truth CSV with `counts[c]` images per class (table order), ids
/// shuffled so the parser's sorting is exercised.
pub fn ground_truth_csv(counts_table_order: [u64; NUM_CLASSES], seed: u64) -> String {
    let mut rows = Vec::new();
    let mut n = 0;
    for (label, &k) in ClassLabel::TABLE_ORDER.iter().zip(&counts_table_order) {
        for _ in 0..k {
            rows.push(one_hot_row(&format!("ISIC_{n:07}"), *label));
            n += 1;
        }
    }
    let mut r = rng(seed);
    for i in (1..rows.len()).rev() {
        rows.swap(i, r.gen_range(0..=i));
    }
    let mut out = String::from(GT_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row);
        out.push('\n');
    }
    out
}

pub fn random_image(r: &mut impl Rng, w: u32, h: u32) -> ImageBuffer {
    ImageBuffer::new(w, h, (0..w * h * 3).map(|_| r.gen()).collect()).unwrap()
}

/// Textured image whose colour is dominated by a class-specific base.
pub fn class_image(r: &mut impl Rng, label: ClassLabel, w: u32, h: u32) -> ImageBuffer {
    const BASES: [[i32; 3]; NUM_CLASSES] =
        [[200, 40, 40], [40, 200, 40], [40, 40, 200], [200, 200, 40], [200, 40, 200], [40, 200, 200], [120, 120, 120]];
    let base = BASES[label.index()];
    ImageBuffer::from_fn(w, h, |x, y| {
        let wave = ((x as i32 * 7 + y as i32 * 3) % 17) - 8;
        std::array::from_fn(|c| (base[c] + wave + r.gen_range(-12..=12)).clamp(0, 255) as u8)
    })
    .unwrap()
}

/// Writes `per_class` synthetic PNGs per class plus a matching ground truth.
/// Returns (images_dir, ground_truth_path).
pub fn write_dataset(root: &Path, prefix: &str, per_class: usize, side: u32, seed: u64) -> (PathBuf, PathBuf) {
    let images = root.join(format!("{prefix}_images"));
    fs::create_dir_all(&images).unwrap();
    let mut r = rng(seed);
    let mut gt = format!("{GT_HEADER}\n");
    for label in ClassLabel::ALL {
        for k in 0..per_class {
            let id = format!("{prefix}_{}_{k:03}", label.code());
            let img = class_image(&mut r, label, side, side);
            fs::write(images.join(format!("{id}.png")), encode_png(&img)).unwrap();
            gt.push_str(&one_hot_row(&id, label));
            gt.push('\n');
        }
    }
    let gt_path = root.join(format!("{prefix}_gt.csv"));
    fs::write(&gt_path, gt).unwrap();
    (images, gt_path)
}

pub fn dermaug(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dermaug")).args(args).output().expect("binary runs")
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

pub fn count_png(dir: &Path) -> usize {
    fs::read_dir(dir).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count()
}
