//! Zero-shot depth evaluation: least-squares scale/shift alignment, AbsRel,
//! δ1, pairwise ordering accuracy, and average-rank aggregation.

use crate::error::{Error, Result};

/// Depth raster with a validity mask. Values are meters or arbitrary units;
/// ground-truth values must be strictly positive on valid pixels wherever a
/// ratio metric divides by them.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl DepthMap {
    pub fn new(h: usize, w: usize, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if values.len() != h * w || mask.len() != h * w {
            return Err(Error::Dimension(format!(
                "depth map {h}×{w} needs {} values and mask bits, got {} and {}",
                h * w,
                values.len(),
                mask.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("depth map contains non-finite values".into()));
        }
        Ok(DepthMap { h, w, values, mask })
    }

    /// All pixels valid.
    pub fn dense(h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        let mask = vec![true; values.len()];
        DepthMap::new(h, w, values, mask)
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    fn common_valid<'a>(&'a self, other: &'a DepthMap) -> Result<Vec<usize>> {
        if self.h != other.h || self.w != other.w {
            return Err(Error::Dimension(format!(
                "depth maps differ in size: {}×{} vs {}×{}",
                self.h, self.w, other.h, other.w
            )));
        }
        Ok((0..self.values.len())
            .filter(|&i| self.mask[i] && other.mask[i])
            .collect())
    }
}

/// Per-sample evaluation summary.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub absrel: f64,
    pub delta1: f64,
    pub scale: f64,
    pub shift: f64,
    pub n_valid: usize,
}

/// Closed-form least-squares fit of `scale·pred + shift ≈ gt` over the
/// common valid pixels, via the 2×2 normal equations.
pub fn align_least_squares(pred: &DepthMap, gt: &DepthMap) -> Result<(f64, f64)> {
    let idx = pred.common_valid(gt)?;
    let n = idx.len();
    if n < 2 {
        return Err(Error::Degenerate(format!(
            "alignment needs at least 2 common valid pixels, got {n}"
        )));
    }
    let mut sp = 0.0;
    let mut spp = 0.0;
    let mut sd = 0.0;
    let mut spd = 0.0;
    for &i in &idx {
        let p = pred.values[i];
        let d = gt.values[i];
        sp += p;
        spp += p * p;
        sd += d;
        spd += p * d;
    }
    let nf = n as f64;
    let det = nf * spp - sp * sp;
    if det.abs() < 1e-12 * nf * nf {
        return Err(Error::Degenerate(
            "prediction has zero variance on the valid pixels".into(),
        ));
    }
    let scale = (nf * spd - sp * sd) / det;
    let shift = (sd - scale * sp) / nf;
    Ok((scale, shift))
}

/// Elementwise `scale·pred + shift`; the mask is preserved.
pub fn apply_alignment(pred: &DepthMap, scale: f64, shift: f64) -> DepthMap {
    DepthMap {
        h: pred.h,
        w: pred.w,
        values: pred.values.iter().map(|v| scale * v + shift).collect(),
        mask: pred.mask.clone(),
    }
}

/// Mean over common valid pixels of |aligned − gt| / gt. Ground truth must
/// be strictly positive there.
pub fn absrel(aligned: &DepthMap, gt: &DepthMap) -> Result<f64> {
    let idx = aligned.common_valid(gt)?;
    if idx.is_empty() {
        return Err(Error::Degenerate("no common valid pixels".into()));
    }
    let mut acc = 0.0;
    for &i in &idx {
        let d = gt.values[i];
        if d <= 0.0 {
            return Err(Error::Data(format!(
                "ground-truth depth must be positive on valid pixels, got {d} at index {i}"
            )));
        }
        acc += (aligned.values[i] - d).abs() / d;
    }
    Ok(acc / idx.len() as f64)
}

/// Fraction of common valid pixels with `max(d̃/d, d/d̃) < 1.25`, strict.
/// Non-positive aligned values fail the test.
pub fn delta1(aligned: &DepthMap, gt: &DepthMap) -> Result<f64> {
    let idx = aligned.common_valid(gt)?;
    if idx.is_empty() {
        return Err(Error::Degenerate("no common valid pixels".into()));
    }
    let mut pass = 0usize;
    for &i in &idx {
        let d = gt.values[i];
        if d <= 0.0 {
            return Err(Error::Data(format!(
                "ground-truth depth must be positive on valid pixels, got {d} at index {i}"
            )));
        }
        let a = aligned.values[i];
        if a > 0.0 && (a / d).max(d / a) < 1.25 {
            pass += 1;
        }
    }
    Ok(pass as f64 / idx.len() as f64)
}

/// Which pixel of an annotated pair is closer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Closer {
    A,
    B,
}

/// One annotated pixel pair: positions in (y, x) order.
#[derive(Clone, Copy, Debug)]
pub struct PixelPair {
    pub a: (usize, usize),
    pub b: (usize, usize),
    pub closer: Closer,
}

/// Fraction of pairs whose predicted depth ordering matches the label.
/// Predicted ties count as incorrect.
pub fn pairwise_accuracy(pred: &DepthMap, pairs: &[PixelPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Parameter(
            "pairwise accuracy needs at least one pair".into(),
        ));
    }
    let mut correct = 0usize;
    for (k, pair) in pairs.iter().enumerate() {
        let at = |p: (usize, usize)| -> Result<f64> {
            if p.0 >= pred.h || p.1 >= pred.w {
                return Err(Error::Data(format!(
                    "pair {k} references pixel ({}, {}) outside a {}×{} map",
                    p.0, p.1, pred.h, pred.w
                )));
            }
            Ok(pred.values[p.0 * pred.w + p.1])
        };
        let da = at(pair.a)?;
        let db = at(pair.b)?;
        let predicted = if da < db {
            Some(Closer::A)
        } else if db < da {
            Some(Closer::B)
        } else {
            None
        };
        if predicted == Some(pair.closer) {
            correct += 1;
        }
    }
    Ok(correct as f64 / pairs.len() as f64)
}

/// Ranking direction of one measurement column.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    LowerBetter,
    HigherBetter,
}

/// Per-setting mean rank across measurement columns. Rank 1 is best in each
/// column per its direction; ties share the mean of the tied ranks
/// (fractional ranking).
pub fn average_rank(table: &[Vec<f64>], directions: &[Direction]) -> Result<Vec<f64>> {
    if table.len() < 2 {
        return Err(Error::Parameter(format!(
            "average rank needs at least 2 settings, got {}",
            table.len()
        )));
    }
    let cols = directions.len();
    if cols == 0 || table.iter().any(|row| row.len() != cols) {
        return Err(Error::Parameter(format!(
            "every setting needs exactly {cols} measurements"
        )));
    }
    if table.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Parameter(
            "ranking table contains non-finite measurements".into(),
        ));
    }
    let n = table.len();
    let mut totals = vec![0.0; n];
    for (c, dir) in directions.iter().enumerate() {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            let (va, vb) = (table[a][c], table[b][c]);
            let cmp = va.partial_cmp(&vb).expect("validated finite");
            match dir {
                Direction::LowerBetter => cmp,
                Direction::HigherBetter => cmp.reverse(),
            }
        });
        let mut pos = 0;
        while pos < n {
            let mut end = pos + 1;
            while end < n && table[order[end]][c] == table[order[pos]][c] {
                end += 1;
            }
            // Tied block [pos, end) shares the mean of ranks pos+1..=end.
            let shared = (pos + 1 + end) as f64 / 2.0;
            for &setting in &order[pos..end] {
                totals[setting] += shared;
            }
            pos = end;
        }
    }
    Ok(totals.iter().map(|t| t / cols as f64).collect())
}

/// Two-line CSV layout of a temperature-ablation rank row: one column per
/// setting, the best (lowest) average rank bracketed.
pub fn format_rank_table(taus: &[f64], ranks: &[f64]) -> String {
    let mut best = 0;
    for (i, r) in ranks.iter().enumerate() {
        if *r < ranks[best] {
            best = i;
        }
    }
    let mut header = String::from("tau");
    let mut row = String::from("avg_rank");
    for (i, (t, r)) in taus.iter().zip(ranks).enumerate() {
        header.push_str(&format!(",{t}"));
        if i == best {
            row.push_str(&format!(",[{r}]"));
        } else {
            row.push_str(&format!(",{r}"));
        }
    }
    format!("{header}\n{row}\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;

    fn dense(values: &[f64]) -> DepthMap {
        DepthMap::dense(1, values.len(), values.to_vec()).unwrap()
    }

    #[test]
    fn align_exact_fit_is_identity() {
        let gt = dense(&[1.0, 2.0, 3.0, 4.0]);
        let (s, t) = align_least_squares(&gt, &gt).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(t.abs() < 1e-12);
    }

    #[test]
    fn align_recovers_affine_relation() {
        let gt = dense(&[1.0, 2.0, 5.0, 9.0]);
        let pred = dense(
            &gt.values
                .iter()
                .map(|d| (d - 7.0) / 3.0)
                .collect::<Vec<_>>(),
        );
        let (s, t) = align_least_squares(&pred, &gt).unwrap();
        assert!((s - 3.0).abs() < 1e-9, "{s}");
        assert!((t - 7.0).abs() < 1e-9, "{t}");
    }

    #[test]
    fn align_matches_normal_equation_oracle() {
        let mut rng = Prng::new(1);
        for _ in 0..20 {
            let pred_v: Vec<f64> = (0..10).map(|_| rng.uniform(0.5, 4.0)).collect();
            let gt_v: Vec<f64> = pred_v
                .iter()
                .map(|p| 2.0 * p + 1.0 + rng.uniform(-0.1, 0.1))
                .collect();
            let pred = dense(&pred_v);
            let gt = dense(&gt_v);
            let (s, t) = align_least_squares(&pred, &gt).unwrap();

            // Independent oracle: explicit 2×2 solve.
            let n = pred_v.len() as f64;
            let sp: f64 = pred_v.iter().sum();
            let spp: f64 = pred_v.iter().map(|p| p * p).sum();
            let sd: f64 = gt_v.iter().sum();
            let spd: f64 = pred_v.iter().zip(&gt_v).map(|(p, d)| p * d).sum();
            let det = n * spp - sp * sp;
            let s_o = (n * spd - sp * sd) / det;
            let t_o = (sd - s_o * sp) / n;
            assert!((s - s_o).abs() < 1e-9);
            assert!((t - t_o).abs() < 1e-9);
        }
    }

    #[test]
    fn align_rejects_zero_variance() {
        let pred = dense(&[2.0, 2.0, 2.0]);
        let gt = dense(&[1.0, 2.0, 3.0]);
        assert!(matches!(
            align_least_squares(&pred, &gt),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn apply_alignment_cases() {
        let pred = dense(&[1.0, 2.0]);
        assert_eq!(apply_alignment(&pred, 1.0, 0.0).values, vec![1.0, 2.0]);
        assert_eq!(apply_alignment(&pred, 0.0, 4.5).values, vec![4.5, 4.5]);
        assert_eq!(apply_alignment(&pred, 2.0, 1.0).values, vec![3.0, 5.0]);
    }

    #[test]
    fn absrel_basics() {
        let gt = dense(&[1.0, 2.0, 4.0]);
        assert_eq!(absrel(&gt, &gt).unwrap(), 0.0);
        let scaled = dense(&gt.values.iter().map(|v| 1.1 * v).collect::<Vec<_>>());
        assert!((absrel(&scaled, &gt).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn absrel_matches_loop_oracle() {
        let aligned = dense(&[1.2, 1.9, 4.5, 0.8]);
        let gt = dense(&[1.0, 2.0, 4.0, 1.0]);
        let got = absrel(&aligned, &gt).unwrap();
        let expect = (0.2 / 1.0 + 0.1 / 2.0 + 0.5 / 4.0 + 0.2 / 1.0) / 4.0;
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn absrel_rejects_nonpositive_gt() {
        let aligned = dense(&[1.0, 1.0]);
        let gt = dense(&[1.0, 0.0]);
        assert!(matches!(absrel(&aligned, &gt), Err(Error::Data(_))));
    }

    #[test]
    fn delta1_boundary_is_strict() {
        let gt = dense(&[1.0, 2.0]);
        assert_eq!(delta1(&gt, &gt).unwrap(), 1.0);
        let boundary = dense(&gt.values.iter().map(|v| 1.25 * v).collect::<Vec<_>>());
        assert_eq!(delta1(&boundary, &gt).unwrap(), 0.0);
    }

    #[test]
    fn delta1_hand_count() {
        let gt = dense(&[1.0, 1.0, 1.0, 1.0]);
        let aligned = dense(&[1.1, 1.3, 0.9, 0.7]);
        assert_eq!(delta1(&aligned, &gt).unwrap(), 0.5);
    }

    #[test]
    fn delta1_negative_aligned_fails_pixel() {
        let gt = dense(&[1.0, 1.0]);
        let aligned = dense(&[-1.0, 1.0]);
        assert_eq!(delta1(&aligned, &gt).unwrap(), 0.5);
    }

    #[test]
    fn pairwise_self_consistency() {
        let mut rng = Prng::new(2);
        let pred = DepthMap::dense(4, 4, (0..16).map(|_| rng.uniform(1.0, 5.0)).collect()).unwrap();
        let mut pairs = Vec::new();
        for _ in 0..6 {
            let a = (rng.below(4) as usize, rng.below(4) as usize);
            let mut b = (rng.below(4) as usize, rng.below(4) as usize);
            while b == a {
                b = (rng.below(4) as usize, rng.below(4) as usize);
            }
            let da = pred.values[a.0 * 4 + a.1];
            let db = pred.values[b.0 * 4 + b.1];
            let closer = if da < db { Closer::A } else { Closer::B };
            pairs.push(PixelPair { a, b, closer });
        }
        assert_eq!(pairwise_accuracy(&pred, &pairs).unwrap(), 1.0);
        let inverted: Vec<PixelPair> = pairs
            .iter()
            .map(|p| PixelPair {
                closer: if p.closer == Closer::A {
                    Closer::B
                } else {
                    Closer::A
                },
                ..*p
            })
            .collect();
        assert_eq!(pairwise_accuracy(&pred, &inverted).unwrap(), 0.0);
    }

    #[test]
    fn pairwise_matches_loop_oracle() {
        let mut rng = Prng::new(3);
        let pred = DepthMap::dense(3, 5, (0..15).map(|_| rng.uniform(1.0, 5.0)).collect()).unwrap();
        let pairs: Vec<PixelPair> = (0..6)
            .map(|_| PixelPair {
                a: (rng.below(3) as usize, rng.below(5) as usize),
                b: (rng.below(3) as usize, rng.below(5) as usize),
                closer: if rng.next_f64() < 0.5 {
                    Closer::A
                } else {
                    Closer::B
                },
            })
            .collect();
        let got = pairwise_accuracy(&pred, &pairs).unwrap();
        let mut correct = 0;
        for p in &pairs {
            let da = pred.values[p.a.0 * 5 + p.a.1];
            let db = pred.values[p.b.0 * 5 + p.b.1];
            let matches = match p.closer {
                Closer::A => da < db,
                Closer::B => db < da,
            };
            if matches {
                correct += 1;
            }
        }
        assert_eq!(got, correct as f64 / 6.0);
    }

    #[test]
    fn pairwise_ties_count_as_incorrect() {
        let pred = DepthMap::dense(1, 2, vec![2.0, 2.0]).unwrap();
        let pairs = [PixelPair {
            a: (0, 0),
            b: (0, 1),
            closer: Closer::A,
        }];
        assert_eq!(pairwise_accuracy(&pred, &pairs).unwrap(), 0.0);
    }

    #[test]
    fn pairwise_rejects_out_of_bounds() {
        let pred = DepthMap::dense(2, 2, vec![1.0; 4]).unwrap();
        let pairs = [PixelPair {
            a: (0, 0),
            b: (2, 0),
            closer: Closer::A,
        }];
        assert!(matches!(
            pairwise_accuracy(&pred, &pairs),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn rank_single_column_sort_order() {
        let table = vec![vec![0.3], vec![0.1], vec![0.2]];
        let ranks = average_rank(&table, &[Direction::LowerBetter]).unwrap();
        assert_eq!(ranks, vec![3.0, 1.0, 2.0]);
    }

    #[test]
    fn rank_full_ties_share_mean() {
        let table = vec![vec![1.0, 2.0]; 4];
        let ranks =
            average_rank(&table, &[Direction::LowerBetter, Direction::HigherBetter]).unwrap();
        for r in ranks {
            assert!((r - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_matches_sort_based_oracle() {
        let mut rng = Prng::new(4);
        for _ in 0..10 {
            let n = 5;
            let cols = 8;
            let table: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..cols).map(|_| rng.uniform(0.0, 1.0)).collect())
                .collect();
            let dirs: Vec<Direction> = (0..cols)
                .map(|_| {
                    if rng.next_f64() < 0.5 {
                        Direction::LowerBetter
                    } else {
                        Direction::HigherBetter
                    }
                })
                .collect();
            let got = average_rank(&table, &dirs).unwrap();

            // Oracle: rank of setting s in column c = 1 + #better + #ties/2.
            for s in 0..n {
                let mut total = 0.0;
                for c in 0..cols {
                    let mine = table[s][c];
                    let mut better = 0.0;
                    let mut tied = 0.0;
                    for o in 0..n {
                        if o == s {
                            continue;
                        }
                        let their = table[o][c];
                        let is_better = match dirs[c] {
                            Direction::LowerBetter => their < mine,
                            Direction::HigherBetter => their > mine,
                        };
                        if is_better {
                            better += 1.0;
                        } else if their == mine {
                            tied += 1.0;
                        }
                    }
                    total += 1.0 + better + tied / 2.0;
                }
                assert!(
                    (got[s] - total / cols as f64).abs() < 1e-9,
                    "setting {s}: {} vs {}",
                    got[s],
                    total / cols as f64
                );
            }
        }
    }

    #[test]
    fn rank_bounds_and_permutation() {
        let table = vec![vec![0.5, 0.9], vec![0.2, 0.4], vec![0.7, 0.1]];
        let dirs = [Direction::LowerBetter, Direction::LowerBetter];
        let ranks = average_rank(&table, &dirs).unwrap();
        for r in &ranks {
            assert!((1.0..=3.0).contains(r));
        }
        let permuted = vec![table[2].clone(), table[0].clone(), table[1].clone()];
        let pranks = average_rank(&permuted, &dirs).unwrap();
        assert_eq!(pranks, vec![ranks[2], ranks[0], ranks[1]]);
    }

    #[test]
    fn rank_rejects_non_finite_measurements() {
        let table = vec![vec![0.1], vec![f64::NAN]];
        assert!(matches!(
            average_rank(&table, &[Direction::LowerBetter]),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn rank_rejects_tiny_or_ragged_tables() {
        assert!(matches!(
            average_rank(&[vec![1.0]], &[Direction::LowerBetter]),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            average_rank(&[vec![1.0], vec![1.0, 2.0]], &[Direction::LowerBetter]),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn metrics_invariant_under_affine_pred_transform() {
        let mut rng = Prng::new(5);
        for _ in 0..10 {
            let gt =
                DepthMap::dense(3, 3, (0..9).map(|_| rng.uniform(1.0, 5.0)).collect()).unwrap();
            let pred =
                DepthMap::dense(3, 3, (0..9).map(|_| rng.uniform(1.0, 5.0)).collect()).unwrap();
            let a = rng.uniform(0.1, 10.0);
            let b = rng.uniform(-5.0, 5.0);
            let transformed = apply_alignment(&pred, a, b);

            let eval = |p: &DepthMap| -> (f64, f64) {
                let (s, t) = align_least_squares(p, &gt).unwrap();
                let al = apply_alignment(p, s, t);
                (absrel(&al, &gt).unwrap(), delta1(&al, &gt).unwrap())
            };
            let (ar0, d0) = eval(&pred);
            let (ar1, d1) = eval(&transformed);
            assert!((ar0 - ar1).abs() < 1e-9, "{ar0} vs {ar1}");
            assert!((d0 - d1).abs() < 1e-9);
        }
    }

    #[test]
    fn exact_affine_pred_scores_perfectly() {
        let mut rng = Prng::new(6);
        let gt = DepthMap::dense(4, 4, (0..16).map(|_| rng.uniform(1.0, 5.0)).collect()).unwrap();
        let pred = apply_alignment(&gt, 0.25, -0.1);
        let (s, t) = align_least_squares(&pred, &gt).unwrap();
        let aligned = apply_alignment(&pred, s, t);
        assert!(absrel(&aligned, &gt).unwrap() < 1e-9);
        assert_eq!(delta1(&aligned, &gt).unwrap(), 1.0);
    }

    #[test]
    fn rank_table_fixture_layout() {
        // Display fixture: published setting/rank pairs flow through the
        // formatter unchanged, best bracketed, integers printed bare.
        let table = format_rank_table(&[2.0, 2.5, 3.0, 3.5, 4.0], &[2.3, 1.3, 2.0, 1.5, 2.1]);
        assert_eq!(table, "tau,2,2.5,3,3.5,4\navg_rank,2.3,[1.3],2,1.5,2.1\n");
    }

    #[test]
    fn pairwise_invariant_under_monotone_transform() {
        let mut rng = Prng::new(7);
        let pred = DepthMap::dense(3, 3, (0..9).map(|_| rng.uniform(1.0, 5.0)).collect()).unwrap();
        let pairs: Vec<PixelPair> = (0..8)
            .map(|_| PixelPair {
                a: (rng.below(3) as usize, rng.below(3) as usize),
                b: (rng.below(3) as usize, rng.below(3) as usize),
                closer: if rng.next_f64() < 0.5 {
                    Closer::A
                } else {
                    Closer::B
                },
            })
            .collect();
        let base = pairwise_accuracy(&pred, &pairs).unwrap();
        let warped = DepthMap::dense(
            3,
            3,
            pred.values.iter().map(|v| (v * 0.7).exp() + 3.0).collect(),
        )
        .unwrap();
        assert_eq!(pairwise_accuracy(&warped, &pairs).unwrap(), base);
    }
}
