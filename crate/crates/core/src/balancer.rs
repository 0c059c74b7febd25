//! Flip + rotation augmentation plans that even out class sizes.
//!
//! Every image of a class is optionally mirrored first; then each image of
//! the (possibly doubled) set yields `factor` copies: itself plus
//! `factor - 1` rotations at `360 / factor * j` degrees. Factors 0 and 1
//! both mean "no rotation".

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::manifest::{ClassCounts, ClassLabel, NUM_CLASSES};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BalancerError {
    #[error("target must be at least 1, got {0}")]
    InvalidTarget(u64),
    #[error("invalid target `{0}` (expected a positive integer or `largest-class`)")]
    BadTargetSpec(String),
    #[error("plan: {0}")]
    Parse(String),
}

/// Rotation angles in degrees for rotation factor `factor`:
/// `360 * j / factor` for `j = 1 .. factor - 1`; empty for 0 and 1.
pub fn rotation_angles(factor: u32) -> Vec<f64> {
    if factor < 2 {
        return Vec::new();
    }
    (1..factor).map(|j| 360.0 * f64::from(j) / f64::from(factor)).collect()
}

/// The schedule for a single class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPlan {
    pub label: ClassLabel,
    pub input_count: u64,
    pub flip: bool,
    pub rotation_factor: u32,
    pub angles: Vec<f64>,
    pub expected_output: u64,
}

impl ClassPlan {
    pub fn new(label: ClassLabel, input_count: u64, flip: bool, rotation_factor: u32) -> Self {
        ClassPlan {
            label,
            input_count,
            flip,
            rotation_factor,
            angles: rotation_angles(rotation_factor),
            expected_output: input_count * if flip { 2 } else { 1 } * u64::from(rotation_factor.max(1)),
        }
    }

    pub fn after_flip(&self) -> u64 {
        self.input_count * if self.flip { 2 } else { 1 }
    }
}

/// Per-class augmentation schedule, in canonical class order.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPlan {
    per_class: Vec<ClassPlan>,
}

impl AugmentationPlan {
    pub fn classes(&self) -> &[ClassPlan] {
        &self.per_class
    }

    pub fn class(&self, label: ClassLabel) -> &ClassPlan {
        &self.per_class[label.index()]
    }

    pub fn total_input(&self) -> u64 {
        self.per_class.iter().map(|c| c.input_count).sum()
    }

    pub fn total_after_flip(&self) -> u64 {
        self.per_class.iter().map(ClassPlan::after_flip).sum()
    }

    pub fn total_output(&self) -> u64 {
        self.per_class.iter().map(|c| c.expected_output).sum()
    }

    /// Factor vector in canonical class order.
    pub fn factors(&self) -> [u32; NUM_CLASSES] {
        ClassLabel::ALL.map(|c| self.class(c).rotation_factor)
    }

    /// Serializes as `class,input_count,flip,factor,expected_output` rows,
    /// followed by one `#angles,<class>,<a1>;<a2>;...` line per class.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,input_count,flip,factor,expected_output\n");
        for c in &self.per_class {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                c.label, c.input_count, c.flip, c.rotation_factor, c.expected_output
            ));
        }
        for c in &self.per_class {
            let angles: Vec<String> = c.angles.iter().map(|a| a.to_string()).collect();
            out.push_str(&format!("#angles,{},{}\n", c.label, angles.join(";")));
        }
        out
    }

    /// Parses [`AugmentationPlan::to_csv`] output. Counts and angles are
    /// re-derived from the factors and must agree with what the file states.
    pub fn from_csv(text: &str) -> Result<Self, BalancerError> {
        let err = |msg: String| BalancerError::Parse(msg);
        let mut lines = text.lines().map(str::trim_end).filter(|l| !l.is_empty());
        if lines.next() != Some("class,input_count,flip,factor,expected_output") {
            return Err(err("missing header `class,input_count,flip,factor,expected_output`".into()));
        }
        let mut slots: [Option<ClassPlan>; NUM_CLASSES] = Default::default();
        let mut angle_lines = Vec::new();
        for (n, line) in lines.enumerate() {
            let row = n + 2;
            if let Some(rest) = line.strip_prefix("#angles,") {
                angle_lines.push((row, rest.to_string()));
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 5 {
                return Err(err(format!("expected 5 columns, row {row}")));
            }
            let label: ClassLabel = cells[0].parse().map_err(|e| err(format!("{e}, row {row}")))?;
            let num = |s: &str| s.parse::<u64>().map_err(|_| err(format!("bad integer `{s}`, row {row}")));
            let input_count = num(cells[1])?;
            let flip = cells[2].parse::<bool>().map_err(|_| err(format!("bad flag `{}`, row {row}", cells[2])))?;
            let factor = u32::try_from(num(cells[3])?).map_err(|_| err(format!("factor too large, row {row}")))?;
            let plan = ClassPlan::new(label, input_count, flip, factor);
            if plan.expected_output != num(cells[4])? {
                return Err(err(format!("expected_output disagrees with counts and factor, row {row}")));
            }
            let slot = &mut slots[label.index()];
            if slot.is_some() {
                return Err(err(format!("duplicate class {label}, row {row}")));
            }
            *slot = Some(plan);
        }
        let mut per_class = Vec::with_capacity(NUM_CLASSES);
        for (i, slot) in slots.into_iter().enumerate() {
            per_class.push(slot.ok_or_else(|| err(format!("class {} missing", ClassLabel::ALL[i])))?);
        }
        for (row, rest) in angle_lines {
            let (code, list) = rest.split_once(',').unwrap_or((rest.as_str(), ""));
            let label: ClassLabel = code.parse().map_err(|e| err(format!("{e}, row {row}")))?;
            let angles: Result<Vec<f64>, _> =
                list.split(';').filter(|s| !s.is_empty()).map(str::parse::<f64>).collect();
            let angles = angles.map_err(|_| err(format!("bad angle list, row {row}")))?;
            if angles != per_class[label.index()].angles {
                return Err(err(format!("angles for {label} disagree with its factor, row {row}")));
            }
        }
        Ok(AugmentationPlan { per_class })
    }
}

impl fmt::Display for AugmentationPlan {
    /// Human-readable table in the published column order.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<16}", "")?;
        for c in ClassLabel::TABLE_ORDER {
            write!(f, "{:>8}", c.code())?;
        }
        writeln!(f, "{:>10}", "TOTAL")?;
        type Column = fn(&ClassPlan) -> u64;
        let rows: [(&str, Column, u64); 4] = [
            ("input", |c| c.input_count, self.total_input()),
            ("after flip", ClassPlan::after_flip, self.total_after_flip()),
            ("factor", |c| u64::from(c.rotation_factor), 0),
            ("after rotation", |c| c.expected_output, self.total_output()),
        ];
        for (name, get, total) in rows {
            write!(f, "{name:<16}")?;
            for c in ClassLabel::TABLE_ORDER {
                write!(f, "{:>8}", get(self.class(c)))?;
            }
            if name == "factor" {
                writeln!(f)?;
            } else {
                writeln!(f, "{total:>10}")?;
            }
        }
        Ok(())
    }
}

/// Builds a plan from explicit per-class factors (canonical order).
pub fn plan_from_factors(counts: &ClassCounts, factors: [u32; NUM_CLASSES], flip: bool) -> AugmentationPlan {
    AugmentationPlan {
        per_class: ClassLabel::ALL
            .iter()
            .map(|&c| ClassPlan::new(c, counts.get(c), flip, factors[c.index()]))
            .collect(),
    }
}

/// Size every class should approach in [`plan_auto`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AutoTarget {
    Count(u64),
    /// The largest per-class count after flipping.
    LargestClass,
}

impl FromStr for AutoTarget {
    type Err = BalancerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "largest-class" {
            return Ok(AutoTarget::LargestClass);
        }
        s.parse::<u64>().map(AutoTarget::Count).map_err(|_| BalancerError::BadTargetSpec(s.to_string()))
    }
}

/// Picks `factor = max(1, round_half_up(target / after_flip))` per class;
/// empty classes get factor 0.
pub fn plan_auto(counts: &ClassCounts, flip: bool, target: AutoTarget) -> Result<AugmentationPlan, BalancerError> {
    let mult = if flip { 2 } else { 1 };
    let target = match target {
        AutoTarget::Count(t) if t < 1 => return Err(BalancerError::InvalidTarget(t)),
        AutoTarget::Count(t) => t,
        AutoTarget::LargestClass => counts.0.iter().map(|&n| n * mult).max().unwrap_or(0),
    };
    let factors = ClassLabel::ALL.map(|c| {
        let n = counts.get(c) * mult;
        if n == 0 {
            return 0;
        }
        let rounded = (2 * target + n) / (2 * n);
        u32::try_from(rounded.max(1)).unwrap_or(u32::MAX)
    });
    Ok(plan_from_factors(counts, factors, flip))
}
