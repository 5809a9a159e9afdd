//! Token block layouts and the additive attention masks built from them.

use std::ops::Range;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Class,
    Mask,
    Image,
}

/// Ordered token segments: one class segment, one mask segment, then zero
/// or more image segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    segments: Vec<(SegmentKind, usize)>,
}

impl BlockLayout {
    pub fn new(segments: Vec<(SegmentKind, usize)>) -> Result<Self> {
        match segments.as_slice() {
            [(SegmentKind::Class, _), (SegmentKind::Mask, _), rest @ ..] => {
                if rest.iter().any(|(k, _)| *k != SegmentKind::Image) {
                    return Err(Error::Layout(
                        "only image segments may follow the class and mask segments".into(),
                    ));
                }
            }
            _ => {
                return Err(Error::Layout(
                    "layout must start with exactly one class then one mask segment".into(),
                ))
            }
        }
        if let Some((k, _)) = segments.iter().find(|(_, n)| *n == 0) {
            return Err(Error::Layout(format!("{k:?} segment has no tokens")));
        }
        Ok(Self { segments })
    }

    pub fn one_step(class_tokens: usize, mask_tokens: usize) -> Result<Self> {
        Self::new(vec![(SegmentKind::Class, class_tokens), (SegmentKind::Mask, mask_tokens)])
    }

    /// Class and mask segments followed by one image segment of
    /// `image_tokens` per reference.
    pub fn mrar(class_tokens: usize, mask_tokens: usize, image_tokens: usize, references: usize) -> Result<Self> {
        let mut segs = vec![(SegmentKind::Class, class_tokens), (SegmentKind::Mask, mask_tokens)];
        segs.extend(std::iter::repeat((SegmentKind::Image, image_tokens)).take(references));
        Self::new(segs)
    }

    pub fn segments(&self) -> &[(SegmentKind, usize)] {
        &self.segments
    }

    pub fn total_tokens(&self) -> usize {
        self.segments.iter().map(|(_, n)| n).sum()
    }

    pub fn image_segments(&self) -> usize {
        self.segments.len() - 2
    }

    /// Token range of every segment, in order.
    pub fn segment_ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.segments
            .iter()
            .map(|(_, n)| {
                let r = start..start + n;
                start += n;
                r
            })
            .collect()
    }

    /// Causal blocks: block 0 is class+mask, block `j >= 1` is image segment `j-1`.
    pub fn causal_blocks(&self) -> Vec<Range<usize>> {
        let segs = self.segment_ranges();
        let mut blocks = vec![0..segs[1].end];
        blocks.extend(segs[2..].iter().cloned());
        blocks
    }
}

/// Square additive mask with entries `0` (attend) or `-inf` (blocked).
/// The diagonal is always `0`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    size: usize,
    entries: Vec<f64>,
}

impl AttentionMask {
    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            entries: vec![0.0; size * size],
        }
    }

    pub fn from_entries(size: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != size * size {
            return Err(Error::InvalidArgument(format!(
                "mask of size {size} needs {} entries, got {}",
                size * size,
                entries.len()
            )));
        }
        if entries.iter().any(|&e| !(e == 0.0 || e == f64::NEG_INFINITY)) {
            return Err(Error::InvalidArgument("mask entries must be 0 or -inf".into()));
        }
        if let Some(i) = (0..size).find(|&i| entries[i * size + i] != 0.0) {
            return Err(Error::InvalidArgument(format!("mask diagonal blocked at {i}")));
        }
        Ok(Self { size, entries })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.size + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.size..(i + 1) * self.size]
    }

    pub fn is_blocked(&self, i: usize, j: usize) -> bool {
        self.entry(i, j) == f64::NEG_INFINITY
    }

    pub fn is_all_zero(&self) -> bool {
        self.entries.iter().all(|&e| e == 0.0)
    }

    pub fn transpose(&self) -> Self {
        let n = self.size;
        let entries = (0..n * n).map(|k| self.entries[(k % n) * n + k / n]).collect();
        Self { size: n, entries }
    }
}

/// All-zero (bidirectional) mask over a class+mask layout.
pub fn build_mask_1step(layout: &BlockLayout) -> Result<AttentionMask> {
    if layout.image_segments() > 0 {
        return Err(Error::Layout(format!(
            "1-step layout cannot contain image segments (found {})",
            layout.image_segments()
        )));
    }
    Ok(AttentionMask::zeros(layout.total_tokens()))
}

/// Block-causal mask: a token in causal block `j` attends to every token of
/// blocks `0..=j` and to nothing later.
pub fn build_mask_mrar(layout: &BlockLayout) -> AttentionMask {
    let n = layout.total_tokens();
    let blocks = layout.causal_blocks();
    let mut entries = vec![0.0; n * n];
    for (bi, rows) in blocks.iter().enumerate() {
        let visible_end = rows.end;
        for i in rows.clone() {
            for e in &mut entries[i * n + visible_end..(i + 1) * n] {
                *e = f64::NEG_INFINITY;
            }
        }
        debug_assert!(bi == 0 || rows.start >= blocks[bi - 1].end);
    }
    AttentionMask { size: n, entries }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_validation() {
        assert!(BlockLayout::new(vec![(SegmentKind::Mask, 2), (SegmentKind::Class, 2)]).is_err());
        assert!(BlockLayout::new(vec![(SegmentKind::Class, 2)]).is_err());
        assert!(BlockLayout::new(vec![
            (SegmentKind::Class, 2),
            (SegmentKind::Mask, 2),
            (SegmentKind::Class, 1)
        ])
        .is_err());
        assert!(BlockLayout::one_step(0, 2).is_err());
        assert_eq!(BlockLayout::mrar(4, 16, 16, 2).unwrap().total_tokens(), 52);
    }

    #[test]
    fn one_step_masks_are_zero() {
        let m = build_mask_1step(&BlockLayout::one_step(2, 4).unwrap()).unwrap();
        assert_eq!(m.size(), 6);
        assert!(m.is_all_zero());
        assert_eq!(m.transpose(), m);
        let big = build_mask_1step(&BlockLayout::one_step(64, 16).unwrap()).unwrap();
        assert_eq!(big.size(), 80);
        assert!(big.is_all_zero());
        assert!(build_mask_1step(&BlockLayout::mrar(2, 4, 4, 1).unwrap()).is_err());
    }

    #[test]
    fn mrar_without_images_equals_one_step() {
        let l = BlockLayout::mrar(3, 5, 5, 0).unwrap();
        assert_eq!(build_mask_mrar(&l), build_mask_1step(&l).unwrap());
    }

    #[test]
    fn two_blocks_of_two() {
        // blocks (2, 2): class=1, mask=1 forms block 0, one image of 2 tokens.
        let l = BlockLayout::mrar(1, 1, 2, 1).unwrap();
        let m = build_mask_mrar(&l);
        for i in 0..4 {
            for j in 0..4 {
                let blocked = i < 2 && j >= 2;
                assert_eq!(m.is_blocked(i, j), blocked, "({i},{j})");
            }
        }
    }

    #[test]
    fn blocks_4_3_3() {
        let l = BlockLayout::mrar(1, 3, 3, 2).unwrap();
        let m = build_mask_mrar(&l);
        assert_eq!(m.size(), 10);
        for j in 0..10 {
            assert_eq!(m.is_blocked(5, j), j >= 7, "token 5 -> {j}");
        }
        for i in 0..10 {
            assert_eq!(m.entry(i, i), 0.0);
        }
    }

    #[test]
    fn from_entries_rejects_bad_values() {
        assert!(AttentionMask::from_entries(2, vec![0.0, 1.0, 0.0, 0.0]).is_err());
        assert!(AttentionMask::from_entries(2, vec![f64::NEG_INFINITY, 0.0, 0.0, 0.0]).is_err());
        assert!(AttentionMask::from_entries(2, vec![0.0, f64::NEG_INFINITY, 0.0, 0.0]).is_ok());
    }
}

impl AttentionMask {
    /// Skips validation; only for exercising error paths of consumers.
    #[cfg(test)]
    pub(crate) fn from_raw_unchecked(size: usize, entries: Vec<f64>) -> Self {
        Self { size, entries }
    }
}
