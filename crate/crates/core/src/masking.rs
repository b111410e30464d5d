//! Selection masks over a conv feature grid and the gather that turns a
//! tensor plus mask into local descriptors.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, l2_normalize};
use crate::tensor::{DescriptorSet, FeatureTensor, KeypointList};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    None,
    Sift,
    Sum,
    Max,
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskKind::None => "none",
            MaskKind::Sift => "sift",
            MaskKind::Sum => "sum",
            MaskKind::Max => "max",
        })
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(MaskKind::None),
            "sift" => Ok(MaskKind::Sift),
            "sum" => Ok(MaskKind::Sum),
            "max" => Ok(MaskKind::Max),
            other => Err(Error::Config(format!("unknown mask kind {other:?}"))),
        }
    }
}

/// Duplicate-free grid coordinates, 1-based, sorted row-major (by `y`, then `x`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMask {
    width: usize,
    height: usize,
    coords: Vec<(usize, usize)>,
}

impl SelectionMask {
    /// Sorts and deduplicates `coords`; rejects out-of-grid entries.
    pub fn new(width: usize, height: usize, mut coords: Vec<(usize, usize)>) -> Result<Self> {
        if let Some(&(x, y)) = coords
            .iter()
            .find(|&&(x, y)| !(1..=width).contains(&x) || !(1..=height).contains(&y))
        {
            return Err(Error::InvalidDimensions(format!(
                "mask coordinate ({x}, {y}) outside the {width}x{height} grid"
            )));
        }
        coords.sort_unstable_by_key(|&(x, y)| (y, x));
        coords.dedup();
        Ok(Self {
            width,
            height,
            coords,
        })
    }

    /// Every location of the grid, row-major.
    pub fn full(width: usize, height: usize) -> Self {
        let coords = (1..=height)
            .flat_map(|y| (1..=width).map(move |x| (x, y)))
            .collect();
        Self {
            width,
            height,
            coords,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn coords(&self) -> &[(usize, usize)] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Fraction of grid locations retained.
    pub fn retained_fraction(&self) -> f64 {
        self.coords.len() as f64 / (self.width * self.height) as f64
    }

    /// Text dump: a `# W H` header then one `x y` line per coordinate.
    pub fn write_text<W: Write>(&self, mut sink: W) -> Result<()> {
        writeln!(sink, "# {} {}", self.width, self.height)?;
        for (x, y) in &self.coords {
            writeln!(sink, "{x} {y}")?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(source: R) -> Result<Self> {
        let mut lines = source.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Malformed("empty mask dump".into()))??;
        let dims = header
            .strip_prefix('#')
            .ok_or_else(|| Error::Malformed("mask dump lacks the '# W H' header".into()))?;
        let (w, h) = parse_pair(dims)?;
        let mut coords = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            coords.push(parse_pair(&line)?);
        }
        Self::new(w, h, coords)
    }
}

fn parse_pair(s: &str) -> Result<(usize, usize)> {
    let mut it = s.split_whitespace().map(str::parse::<usize>);
    match (it.next(), it.next(), it.next()) {
        (Some(Ok(a)), Some(Ok(b)), None) => Ok((a, b)),
        _ => Err(Error::Malformed(format!(
            "expected two integers, got {s:?}"
        ))),
    }
}

/// Maps each keypoint onto the grid with `round(x·W/W_I)` (halves away from
/// zero), clamped into `[1, W] × [1, H]`.
pub fn compute_sift_mask(t: &FeatureTensor, kp: &KeypointList) -> Result<SelectionMask> {
    if kp.is_empty() {
        return Err(Error::EmptyMask("no keypoints".into()));
    }
    let (w, h) = (t.width(), t.height());
    let sx = w as f64 / kp.image_width() as f64;
    let sy = h as f64 / kp.image_height() as f64;
    let coords = kp
        .points()
        .iter()
        .map(|&(x, y)| {
            let gx = (x as f64 * sx).round().clamp(1.0, w as f64) as usize;
            let gy = (y as f64 * sy).round().clamp(1.0, h as f64) as usize;
            (gx, gy)
        })
        .collect();
    SelectionMask::new(w, h, coords)
}

/// Union over channels of the per-channel argmax location. Ties go to the
/// smallest row-major index.
pub fn compute_max_mask(t: &FeatureTensor) -> SelectionMask {
    let k = t.channels();
    let mut best = vec![0usize; k];
    let mut best_val = vec![f32::NEG_INFINITY; k];
    for (loc, cell) in t.data().chunks_exact(k).enumerate() {
        for (c, &v) in cell.iter().enumerate() {
            if v > best_val[c] {
                best_val[c] = v;
                best[c] = loc;
            }
        }
    }
    let w = t.width();
    let coords = best
        .into_iter()
        .map(|loc| (loc % w + 1, loc / w + 1))
        .collect();
    SelectionMask::new(w, t.height(), coords).expect("argmax locations lie in the grid")
}

/// Locations whose channel sum reaches the lower median of all channel sums.
pub fn compute_sum_mask(t: &FeatureTensor) -> SelectionMask {
    let sums = channel_sums(t);
    let mut sorted = sums.clone();
    sorted.sort_by(f64::total_cmp);
    let threshold = sorted[sorted.len().div_ceil(2) - 1];
    let w = t.width();
    let coords = sums
        .iter()
        .enumerate()
        .filter(|(_, &s)| s >= threshold)
        .map(|(loc, _)| (loc % w + 1, loc / w + 1))
        .collect();
    SelectionMask::new(w, t.height(), coords).expect("locations lie in the grid")
}

fn channel_sums(t: &FeatureTensor) -> Vec<f64> {
    t.data()
        .chunks_exact(t.channels())
        .map(|cell| cell.iter().map(|&v| v as f64).sum())
        .collect()
}

/// Dispatches on `kind`. `None` yields no mask; the SIFT kind requires keypoints.
pub fn compute_mask(
    kind: MaskKind,
    t: &FeatureTensor,
    kp: Option<&KeypointList>,
) -> Result<Option<SelectionMask>> {
    match kind {
        MaskKind::None => Ok(None),
        MaskKind::Max => Ok(Some(compute_max_mask(t))),
        MaskKind::Sum => Ok(Some(compute_sum_mask(t))),
        MaskKind::Sift => {
            let kp = kp.ok_or_else(|| Error::Malformed("SIFT mask needs keypoints".into()))?;
            compute_sift_mask(t, kp).map(Some)
        }
    }
}

/// Gathers one K-dim row per retained coordinate, in mask order. Without a
/// mask every location is returned in row-major order.
pub fn apply_mask(t: &FeatureTensor, mask: Option<&SelectionMask>) -> Result<DescriptorSet> {
    let k = t.channels();
    let Some(mask) = mask else {
        let data = t.data().iter().map(|&v| v as f64).collect();
        return DescriptorSet::from_flat(k, data);
    };
    if mask.width() != t.width() || mask.height() != t.height() {
        return Err(Error::InvalidDimensions(format!(
            "{}x{} mask applied to a {}x{} tensor",
            mask.width(),
            mask.height(),
            t.width(),
            t.height()
        )));
    }
    let mut out = DescriptorSet::with_capacity(k, mask.len());
    let mut row = vec![0.0; k];
    for &(x, y) in mask.coords() {
        for (dst, &src) in row.iter_mut().zip(t.at(x, y)) {
            *dst = src as f64;
        }
        out.push(&row)?;
    }
    Ok(out)
}

/// Concatenates channel blocks of same-resolution tensors in input order.
pub fn stack_hypercolumn(tensors: &[FeatureTensor]) -> Result<FeatureTensor> {
    let first = tensors
        .first()
        .ok_or_else(|| Error::Empty("no tensors to stack".into()))?;
    if tensors.len() == 1 {
        return Ok(first.clone());
    }
    let (w, h) = (first.width(), first.height());
    if let Some(bad) = tensors.iter().find(|t| t.width() != w || t.height() != h) {
        return Err(Error::InvalidDimensions(format!(
            "cannot stack a {}x{} tensor with a {w}x{h} tensor",
            bad.width(),
            bad.height()
        )));
    }
    let total: usize = tensors.iter().map(FeatureTensor::channels).sum();
    let mut data = Vec::with_capacity(w * h * total);
    for loc in 0..w * h {
        for t in tensors {
            let k = t.channels();
            data.extend_from_slice(&t.data()[loc * k..(loc + 1) * k]);
        }
    }
    FeatureTensor::new(w, h, total, data)
}

/// Corpus-level mask statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskStats {
    pub images: usize,
    /// Mean of |mask| / (W·H).
    pub retained_fraction: f64,
    /// Mean fraction of pairwise dot products of l2-normalised retained
    /// descriptors inside `[-0.15, 0.15]`.
    pub concentration: f64,
}

pub const CONCENTRATION_BAND: f64 = 0.15;

/// One corpus item: the (stacked) tensor and optional keypoints.
pub struct MaskInput<'a> {
    pub tensor: &'a FeatureTensor,
    pub keypoints: Option<&'a KeypointList>,
}

/// `pair_cap` bounds the number of descriptor pairs examined per image; pairs
/// are taken at an even stride through the `i < j` enumeration.
pub fn mask_stats(corpus: &[MaskInput<'_>], kind: MaskKind, pair_cap: usize) -> Result<MaskStats> {
    if corpus.is_empty() {
        return Err(Error::Empty("mask statistics over an empty corpus".into()));
    }
    let mut retained = 0.0;
    let mut concentration = 0.0;
    for item in corpus {
        let mask = match compute_mask(kind, item.tensor, item.keypoints) {
            Ok(m) => m,
            Err(Error::EmptyMask(_)) => None,
            Err(e) => return Err(e),
        };
        retained += mask.as_ref().map_or(1.0, SelectionMask::retained_fraction);
        let mut desc = apply_mask(item.tensor, mask.as_ref())?;
        concentration += band_fraction(&mut desc, pair_cap);
    }
    let n = corpus.len() as f64;
    Ok(MaskStats {
        images: corpus.len(),
        retained_fraction: retained / n,
        concentration: concentration / n,
    })
}

fn band_fraction(desc: &mut DescriptorSet, pair_cap: usize) -> f64 {
    let n = desc.len();
    let total = n * n.saturating_sub(1) / 2;
    if total == 0 || pair_cap == 0 {
        return 0.0;
    }
    let rows: Vec<Vec<f64>> = desc
        .rows()
        .map(|r| {
            let mut v = r.to_vec();
            l2_normalize(&mut v);
            v
        })
        .collect();
    let stride = total.div_ceil(pair_cap);
    let (mut seen, mut inside, mut idx) = (0usize, 0usize, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            if idx % stride == 0 {
                seen += 1;
                if dot(&rows[i], &rows[j]).abs() <= CONCENTRATION_BAND {
                    inside += 1;
                }
            }
            idx += 1;
        }
    }
    inside as f64 / seen as f64
}
