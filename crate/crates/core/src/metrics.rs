//! Evaluation: pixel error, foreground-restricted pair-counting score and
//! the mutual-information score, plus connected-component labeling to turn
//! binary maps into segmentations.
//!
//! Both partition scores restrict to voxels whose ground-truth label is
//! foreground. Predicted background inside that restriction counts as
//! singleton segments (a missed voxel is not "co-segmented" with other
//! misses). Scores are computed from contingency-table counts, never by
//! explicit pair enumeration; the tests hold them against brute-force
//! enumeration oracles.
//!
//! Values are not comparable to challenge leaderboards: the border-thinning
//! preprocessing used there is out of scope, so scores here are raw.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pixel connectivity for component labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

/// Per-pixel segment ids; 0 is background, positive ids are contiguous from
/// 1 in first-scan order.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeling {
    pub ids: Vec<u32>,
    pub h: usize,
    pub w: usize,
    pub n_segments: usize,
}

impl Labeling {
    pub fn new(ids: Vec<u32>, h: usize, w: usize) -> Result<Self> {
        if ids.len() != h * w {
            return Err(Error::Dimension(format!(
                "labeling of {} ids does not cover {h}x{w}",
                ids.len()
            )));
        }
        Ok(Labeling {
            ids,
            h,
            w,
            n_segments: 0,
        }
        .canonicalized())
    }

    /// Relabels positive ids to 1..K in order of first appearance.
    pub fn canonicalized(&self) -> Labeling {
        let mut remap: HashMap<u32, u32> = HashMap::new();
        let mut next = 1u32;
        let ids = self
            .ids
            .iter()
            .map(|&id| {
                if id == 0 {
                    0
                } else {
                    *remap.entry(id).or_insert_with(|| {
                        let v = next;
                        next += 1;
                        v
                    })
                }
            })
            .collect();
        Labeling {
            ids,
            h: self.h,
            w: self.w,
            n_segments: (next - 1) as usize,
        }
    }

    pub fn foreground_count(&self) -> usize {
        self.ids.iter().filter(|&&id| id > 0).count()
    }
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n as u32).collect(),
        }
    }

    fn find(&mut self, x: u32) -> u32 {
        let mut root = x;
        while self.parent[root as usize] != root {
            root = self.parent[root as usize];
        }
        let mut cur = x;
        while self.parent[cur as usize] != root {
            let next = self.parent[cur as usize];
            self.parent[cur as usize] = root;
            cur = next;
        }
        root
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Deterministic: smaller root wins.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Labels maximal connected foreground regions of a binary map. Ids are
/// assigned in first-scan (row-major) order, so the result is deterministic.
pub fn connected_components(map: &[u8], h: usize, w: usize, conn: Connectivity) -> Labeling {
    let mut uf = UnionFind::new(h * w);
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            if map[idx] == 0 {
                continue;
            }
            let try_join = |yy: isize, xx: isize, uf: &mut UnionFind| {
                if yy >= 0 && xx >= 0 && (xx as usize) < w {
                    let nidx = yy as usize * w + xx as usize;
                    if map[nidx] != 0 {
                        uf.union(idx as u32, nidx as u32);
                    }
                }
            };
            // Scan-order neighbors: west and the previous row.
            try_join(y as isize, x as isize - 1, &mut uf);
            try_join(y as isize - 1, x as isize, &mut uf);
            if conn == Connectivity::Eight {
                try_join(y as isize - 1, x as isize - 1, &mut uf);
                try_join(y as isize - 1, x as isize + 1, &mut uf);
            }
        }
    }
    let mut ids = vec![0u32; h * w];
    for idx in 0..h * w {
        if map[idx] != 0 {
            ids[idx] = uf.find(idx as u32) + 1;
        }
    }
    Labeling::new(ids, h, w).expect("lengths match by construction")
}

/// Mean over evaluated voxels of `|p_fg(v) - y(v)|`. Probability maps are
/// `[2, h, w]` per slice with channel 1 the foreground; `mask` selects the
/// evaluated slices (all when `None`).
pub fn pixel_error<T: Scalar>(
    probs: &[Tensor<T>],
    labels: &[Vec<u8>],
    mask: Option<&[bool]>,
) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} probability slices vs {} label slices",
            probs.len(),
            labels.len()
        )));
    }
    if let Some(m) = mask {
        if m.len() != probs.len() {
            return Err(Error::Dimension(format!(
                "mask covers {} slices, stack has {}",
                m.len(),
                probs.len()
            )));
        }
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (z, (p, y)) in probs.iter().zip(labels.iter()).enumerate() {
        if mask.is_some_and(|m| !m[z]) {
            continue;
        }
        let (c, h, w) = p.dims3()?;
        if c != 2 || y.len() != h * w {
            return Err(Error::Dimension(format!(
                "slice {z}: probability map {:?} vs {} labels",
                p.shape(),
                y.len()
            )));
        }
        let plane = h * w;
        for v in 0..plane {
            let fg = p.data()[plane + v].to_f64();
            total += (fg - f64::from(y[v])).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Usage("no voxels selected for evaluation".into()));
    }
    Ok(total / count as f64)
}

/// Joint label counts over ground-truth foreground voxels, accumulated
/// across slices (ids never merge across slices).
#[derive(Debug, Default)]
pub struct ForegroundContingency {
    counts: BTreeMap<(u64, u64), u64>,
    pred_offset: u64,
    gt_offset: u64,
    singleton: u64,
    n: u64,
}

impl ForegroundContingency {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one slice pair. Voxels with background ground truth are ignored;
    /// predicted background voxels become fresh singleton segments.
    pub fn add_slice(&mut self, pred: &Labeling, gt: &Labeling) -> Result<()> {
        if pred.h != gt.h || pred.w != gt.w {
            return Err(Error::Dimension(format!(
                "labeling extents differ: {}x{} vs {}x{}",
                pred.h, pred.w, gt.h, gt.w
            )));
        }
        for (&p, &g) in pred.ids.iter().zip(gt.ids.iter()) {
            if g == 0 {
                continue;
            }
            let gk = self.gt_offset + u64::from(g);
            let pk = if p == 0 {
                self.singleton += 1;
                // Singletons live in their own key space above all real ids,
                // ordered by creation (scan) order.
                (1u64 << 40) + self.singleton
            } else {
                self.pred_offset + u64::from(p)
            };
            *self.counts.entry((pk, gk)).or_insert(0) += 1;
            self.n += 1;
        }
        self.pred_offset += u64::from(pred.n_segments as u32);
        self.gt_offset += u64::from(gt.n_segments as u32);
        Ok(())
    }

    pub fn foreground_voxels(&self) -> u64 {
        self.n
    }

    fn marginals(&self) -> (BTreeMap<u64, u64>, BTreeMap<u64, u64>) {
        let mut pred: BTreeMap<u64, u64> = BTreeMap::new();
        let mut gt: BTreeMap<u64, u64> = BTreeMap::new();
        for (&(p, g), &c) in &self.counts {
            *pred.entry(p).or_insert(0) += c;
            *gt.entry(g).or_insert(0) += c;
        }
        (pred, gt)
    }

    /// Pair-counting F-score: precision and recall over same-segment voxel
    /// pairs, combined by harmonic mean.
    pub fn rand_score(&self) -> Result<f64> {
        if self.n == 0 {
            return Err(Error::Usage(
                "no foreground voxels in the ground truth".into(),
            ));
        }
        let pairs = |count: u64| count * count.saturating_sub(1) / 2;
        let agree: u64 = self.counts.values().map(|&c| pairs(c)).sum();
        let (pred, gt) = self.marginals();
        let same_pred: u64 = pred.values().map(|&c| pairs(c)).sum();
        let same_gt: u64 = gt.values().map(|&c| pairs(c)).sum();

        let precision = if same_pred == 0 {
            1.0
        } else {
            agree as f64 / same_pred as f64
        };
        let recall = if same_gt == 0 {
            1.0
        } else {
            agree as f64 / same_gt as f64
        };
        if precision + recall == 0.0 {
            return Ok(0.0);
        }
        Ok(2.0 * precision * recall / (precision + recall))
    }

    /// Mutual-information F-score `2 I(P;G) / (H(P) + H(G))` over the joint
    /// foreground label distribution; 1 when both partitions are trivial
    /// (identical single segments).
    ///
    /// Terms are built from integer counts with one division each
    /// (`(c/n) * ln(c*n / (c_p*c_g))`), so identical partitions make the
    /// mutual-information sum bitwise equal to the entropies and the score
    /// exactly 1.
    pub fn info_score(&self) -> Result<f64> {
        if self.n == 0 {
            return Err(Error::Usage(
                "no foreground voxels in the ground truth".into(),
            ));
        }
        let n = self.n as f64;
        let (pred, gt) = self.marginals();
        let entropy = |m: &BTreeMap<u64, u64>| -> f64 {
            m.values()
                .map(|&c| (c as f64 / n) * (n / c as f64).ln())
                .sum::<f64>()
        };
        let h_pred = entropy(&pred);
        let h_gt = entropy(&gt);
        if h_pred + h_gt == 0.0 {
            return Ok(1.0);
        }
        let mut mi = 0.0;
        for (&(p, g), &c) in &self.counts {
            let num = c as f64 * n;
            let den = pred[&p] as f64 * gt[&g] as f64;
            mi += (c as f64 / n) * (num / den).ln();
        }
        Ok((2.0 * mi / (h_pred + h_gt)).clamp(0.0, 1.0))
    }
}

/// Pair-counting score of a single slice pair.
pub fn rand_score_foreground(pred: &Labeling, gt: &Labeling) -> Result<f64> {
    let mut table = ForegroundContingency::new();
    table.add_slice(pred, gt)?;
    table.rand_score()
}

/// Mutual-information score of a single slice pair.
pub fn info_score(pred: &Labeling, gt: &Labeling) -> Result<f64> {
    let mut table = ForegroundContingency::new();
    table.add_slice(pred, gt)?;
    table.info_score()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labeling(ids: &[u32], h: usize, w: usize) -> Labeling {
        Labeling::new(ids.to_vec(), h, w).unwrap()
    }

    #[test]
    fn all_background_labels_to_zero() {
        let l = connected_components(&[0; 12], 3, 4, Connectivity::Eight);
        assert!(l.ids.iter().all(|&id| id == 0));
        assert_eq!(l.n_segments, 0);
    }

    #[test]
    fn diagonal_pixels_depend_on_connectivity() {
        let map = [1, 0, 0, 1];
        let four = connected_components(&map, 2, 2, Connectivity::Four);
        assert_eq!(four.n_segments, 2);
        let eight = connected_components(&map, 2, 2, Connectivity::Eight);
        assert_eq!(eight.n_segments, 1);
    }

    #[test]
    fn canonicalization_is_idempotent_and_scan_ordered() {
        let map = [0, 1, 1, 0, 1, 1, 0, 0, 0, 1, 0, 1];
        let l = connected_components(&map, 3, 4, Connectivity::Four);
        let again = l.canonicalized();
        assert_eq!(l, again);
        // First foreground pixel in scan order carries id 1.
        let first = l.ids.iter().find(|&&id| id != 0).copied().unwrap();
        assert_eq!(first, 1);
    }

    #[test]
    fn pixel_error_hand_cases() {
        let perfect = vec![Tensor::<f64>::new(
            vec![2, 1, 2],
            vec![0.0, 1.0, 1.0, 0.0],
        )
        .unwrap()];
        let labels = vec![vec![1u8, 0]];
        assert_eq!(pixel_error(&perfect, &labels, None).unwrap(), 0.0);

        let uniform = vec![Tensor::<f64>::full(&[2, 1, 2], 0.5)];
        assert_eq!(pixel_error(&uniform, &labels, None).unwrap(), 0.5);

        let p = vec![Tensor::<f64>::new(vec![2, 1, 2], vec![0.2, 0.7, 0.8, 0.3]).unwrap()];
        let err = pixel_error(&p, &labels, None).unwrap();
        assert!((err - 0.25).abs() < 1e-12, "{err}");
    }

    #[test]
    fn pixel_error_honors_mask_and_rejects_empty() {
        let probs = vec![
            Tensor::<f64>::full(&[2, 1, 1], 0.5),
            Tensor::<f64>::new(vec![2, 1, 1], vec![0.0, 1.0]).unwrap(),
        ];
        let labels = vec![vec![0u8], vec![1u8]];
        let masked = pixel_error(&probs, &labels, Some(&[false, true])).unwrap();
        assert_eq!(masked, 0.0);
        assert!(matches!(
            pixel_error(&probs, &labels, Some(&[false, false])),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn identical_partitions_score_one() {
        let gt = labeling(&[1, 1, 0, 2, 2, 0], 2, 3);
        assert_eq!(rand_score_foreground(&gt, &gt).unwrap(), 1.0);
        assert_eq!(info_score(&gt, &gt).unwrap(), 1.0);
    }

    #[test]
    fn worked_four_pixel_example() {
        // Ground truth: two 2-pixel segments; prediction merges all four.
        let gt = labeling(&[1, 1, 2, 2], 2, 2);
        let pred = labeling(&[1, 1, 1, 1], 2, 2);
        let v_rand = rand_score_foreground(&pred, &gt).unwrap();
        assert!((v_rand - 0.5).abs() < 1e-12, "{v_rand}");
        // Merged prediction carries zero mutual information.
        assert_eq!(info_score(&pred, &gt).unwrap(), 0.0);
    }

    #[test]
    fn scores_are_invariant_to_id_permutation() {
        let gt = labeling(&[1, 1, 2, 2, 3, 0], 2, 3);
        let pred = labeling(&[2, 2, 1, 1, 3, 0], 2, 3);
        let same = labeling(&[1, 1, 2, 2, 3, 0], 2, 3);
        assert_eq!(
            rand_score_foreground(&pred, &gt).unwrap(),
            rand_score_foreground(&same, &gt).unwrap()
        );
        assert_eq!(
            info_score(&pred, &gt).unwrap(),
            info_score(&same, &gt).unwrap()
        );
    }

    #[test]
    fn independent_partitions_score_zero_information() {
        // Joint distribution is the product of the marginals.
        let gt = labeling(&[1, 1, 2, 2], 2, 2);
        let pred = labeling(&[1, 2, 1, 2], 2, 2);
        assert_eq!(info_score(&pred, &gt).unwrap(), 0.0);
    }

    #[test]
    fn predicted_background_is_singletons_not_a_segment() {
        // Both foreground voxels of one gt segment missed by the prediction:
        // they must not count as a correctly co-segmented pair.
        let gt = labeling(&[1, 1, 0, 0], 2, 2);
        let pred = labeling(&[0, 0, 0, 0], 2, 2);
        let v = rand_score_foreground(&pred, &gt).unwrap();
        // agree = 0, same_pred = 0 (singletons), same_gt = 1.
        assert_eq!(v, 0.0);
    }

    #[test]
    fn no_foreground_is_a_usage_error() {
        let gt = labeling(&[0, 0, 0, 0], 2, 2);
        let pred = labeling(&[1, 1, 0, 0], 2, 2);
        assert!(matches!(
            rand_score_foreground(&pred, &gt),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn multi_slice_accumulation_keeps_slices_apart() {
        let gt_a = labeling(&[1, 1, 0, 0], 2, 2);
        let gt_b = labeling(&[1, 1, 0, 0], 2, 2);
        let pred_a = labeling(&[1, 1, 0, 0], 2, 2);
        let pred_b = labeling(&[1, 1, 0, 0], 2, 2);
        let mut table = ForegroundContingency::new();
        table.add_slice(&pred_a, &gt_a).unwrap();
        table.add_slice(&pred_b, &gt_b).unwrap();
        // Slices are separate segments; identical partitions still score 1.
        assert_eq!(table.rand_score().unwrap(), 1.0);
        assert_eq!(table.info_score().unwrap(), 1.0);
        assert_eq!(table.foreground_voxels(), 4);
    }
}
