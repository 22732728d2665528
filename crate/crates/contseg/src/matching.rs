//! Bipartite assignment of mask proposals to ground-truth masks.
//!
//! Each image yields `N` proposals and `M ≤ N` ground-truth masks. The
//! ground truth is padded with `N - M` "no object" slots of constant zero
//! cost, and a minimum-cost perfect assignment is solved exactly. Proposals
//! landing on real slots become the matched set (they receive mask and class
//! supervision); the rest are unmatched and are the carrier signal for
//! distillation when learning later tasks.
//!
//! The cost is mask-only (weighted cross-entropy + overlap loss); an optional
//! `-log s` objectness term can be mixed in for experimentation but is off by
//! default.

use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::kernels;

/// Weights and constants for the pairwise matching cost.
#[derive(Debug, Clone)]
pub struct CostWeights {
    /// Weight on the mean binary cross-entropy term.
    pub bce: f64,
    /// Weight on the overlap (Dice) term.
    pub dice: f64,
    /// Weight on an optional `-log s` objectness term (0 disables it).
    pub obj: f64,
    /// Probability clamp inside logs.
    pub prob_clamp: f64,
    /// Smoothing constant of the overlap term.
    pub dice_eps: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            bce: 5.0,
            dice: 5.0,
            obj: 0.0,
            prob_clamp: 1e-7,
            dice_eps: 1.0,
        }
    }
}

/// Result of matching one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// Proposal assigned to each ground-truth slot; slots `0..m` are real,
    /// slots `m..n` are padding.
    pub sigma: Vec<usize>,
    /// Number of real ground-truth masks `m`.
    pub num_real: usize,
    /// Proposals serving real slots, in slot (ground-truth) order.
    pub matched: Vec<usize>,
    /// The complement, ascending.
    pub unmatched: Vec<usize>,
}

/// Pairwise cost between one proposal mask (probabilities) and one
/// ground-truth mask. Both are flattened row-major; shapes must agree.
pub fn mask_cost(
    proposal: ArrayView2<f64>,
    gt: ArrayView2<f64>,
    w: &CostWeights,
) -> Result<f64> {
    if proposal.dim() != gt.dim() {
        return Err(Error::shape(format!(
            "mask_cost: proposal {:?} vs gt {:?}",
            proposal.dim(),
            gt.dim()
        )));
    }
    let cost = w.bce * kernels::bce_mean_probs(&proposal, &gt, w.prob_clamp)
        + w.dice * kernels::dice_loss_probs(&proposal, &gt, w.dice_eps);
    if !cost.is_finite() {
        return Err(Error::numeric("mask_cost produced a non-finite value".to_string()));
    }
    Ok(cost)
}

const BIG: f64 = 1e12;
/// Relative tolerance when comparing assignment totals for tie-breaking.
const TIE_TOL: f64 = 1e-9;

/// Minimum-cost perfect assignment on a square matrix.
///
/// `cost[i][j]` is the cost of proposal `i` serving slot `j`. Returns the
/// assignment vector `sigma` with `sigma[j] = i`; among all minimum-cost
/// assignments the lexicographically smallest such vector is returned, so
/// results are reproducible even on degenerate (tied) inputs.
pub fn hungarian(cost: ArrayView2<f64>) -> Result<Vec<usize>> {
    let (n, m) = cost.dim();
    if n != m {
        return Err(Error::shape(format!("hungarian: matrix must be square, got {n}x{m}")));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("hungarian: non-finite cost entry".to_string()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // Solve over rows = slots so the answer is already slot → proposal.
    let slot_cost = |s: usize, p: usize| cost[[p, s]];
    let base = solve_rows_to_cols(n, n, &slot_cost);
    let best = total(n, &slot_cost, &base.0);
    Ok(lex_minimize(n, n, &slot_cost, base.0, best))
}

/// Match proposals to ground truth with zero-cost padding.
///
/// `proposals` are `[N, P]` probability masks, `gts` are `[M, P]` masks,
/// `scores` are the `N` objectness probabilities (used only when
/// `w.obj > 0`). Requires `M ≤ N`.
pub fn match_proposals(
    proposals: ArrayView2<f64>,
    scores: &[f64],
    gts: ArrayView2<f64>,
    w: &CostWeights,
) -> Result<MatchResult> {
    let (n, p) = proposals.dim();
    let (m, pg) = gts.dim();
    if m > 0 && p != pg {
        return Err(Error::shape(format!(
            "match_proposals: proposal pixels {p} vs gt pixels {pg}"
        )));
    }
    if m > n {
        return Err(Error::config(format!(
            "match_proposals: {m} ground-truth masks exceed {n} proposals"
        )));
    }
    if w.obj > 0.0 && scores.len() != n {
        return Err(Error::shape("match_proposals: scores length mismatch".to_string()));
    }

    if m == 0 {
        return Ok(MatchResult {
            sigma: (0..n).collect(),
            num_real: 0,
            matched: Vec::new(),
            unmatched: (0..n).collect(),
        });
    }

    // Real-slot cost table [m slots × n proposals].
    let mut real = ndarray::Array2::<f64>::zeros((m, n));
    for s in 0..m {
        let gt = gts.row(s).insert_axis(ndarray::Axis(0));
        for pi in 0..n {
            let prop = proposals.row(pi).insert_axis(ndarray::Axis(0));
            let mut c = mask_cost(prop, gt.view(), w)?;
            if w.obj > 0.0 {
                c += w.obj * -scores[pi].clamp(w.prob_clamp, 1.0 - w.prob_clamp).ln();
            }
            real[[s, pi]] = c;
        }
    }

    // Padded slots all cost zero, so the total — and the lexicographic order
    // of the full assignment vector — is decided entirely by the real prefix:
    // solve (and tie-break) the m×n rectangle, then hand the remaining
    // proposals to the padded slots in ascending order.
    let f = |s: usize, pi: usize| real[[s, pi]];
    let (assign, _) = solve_rows_to_cols(m, n, &f);
    let best = total(m, &f, &assign);
    let assign = lex_minimize(m, n, &f, assign, best);

    let mut taken = vec![false; n];
    for &pi in &assign {
        taken[pi] = true;
    }
    let mut sigma = assign.clone();
    sigma.extend((0..n).filter(|&pi| !taken[pi]));
    let matched = assign;
    let unmatched: Vec<usize> = sigma[m..].to_vec();
    debug_assert!(is_injective(&sigma, n));
    Ok(MatchResult {
        sigma,
        num_real: m,
        matched,
        unmatched,
    })
}

/// Jonker–Volgenant style shortest-augmenting-path assignment with
/// potentials: assigns each of `rows ≤ cols` rows a distinct column,
/// minimizing total cost. Returns `assign[row] = col`.
fn solve_rows_to_cols<F: Fn(usize, usize) -> f64>(
    rows: usize,
    cols: usize,
    cost: &F,
) -> (Vec<usize>, f64) {
    assert!(rows <= cols);
    // 1-indexed potentials; p[j] = row matched to column j (0 = none).
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![usize::MAX; rows];
    for j in 1..=cols {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    let t = total(rows, cost, &assign);
    (assign, t)
}

fn total<F: Fn(usize, usize) -> f64>(rows: usize, cost: &F, assign: &[usize]) -> f64 {
    (0..rows).map(|r| cost(r, assign[r])).sum()
}

/// Among all assignments whose total is within a relative tolerance of the
/// optimum, pick the lexicographically smallest assignment vector: fix each
/// row in turn to the smallest column that still admits an optimal
/// completion.
fn lex_minimize<F: Fn(usize, usize) -> f64>(
    rows: usize,
    cols: usize,
    cost: &F,
    mut assign: Vec<usize>,
    best: f64,
) -> Vec<usize> {
    let tol = TIE_TOL * best.abs().max(1.0);
    let mut fixed: Vec<Option<usize>> = vec![None; rows];
    for r in 0..rows {
        let current = assign[r];
        for candidate in 0..current {
            if fixed[..r].iter().any(|f| *f == Some(candidate)) {
                continue;
            }
            fixed[r] = Some(candidate);
            let forced = |rr: usize, cc: usize| match fixed[rr] {
                Some(f) if cc == f => cost(rr, cc) - BIG,
                Some(_) => cost(rr, cc),
                None => cost(rr, cc),
            };
            let (cand_assign, _) = solve_rows_to_cols(rows, cols, &forced);
            // Subtracting BIG per forced row steers the solver through the
            // fixed cells; verify it complied, then compare true totals.
            let complied = (0..=r).all(|rr| cand_assign[rr] == fixed[rr].unwrap());
            if complied && total(rows, cost, &cand_assign) <= best + tol {
                assign = cand_assign;
                break;
            }
            fixed[r] = None;
        }
        fixed[r] = Some(assign[r]);
    }
    assign
}

fn is_injective(sigma: &[usize], n: usize) -> bool {
    let mut seen = vec![false; n];
    sigma.iter().all(|&p| {
        if p >= n || seen[p] {
            false
        } else {
            seen[p] = true;
            true
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr2, Array2};
    use rand::RngExt;

    /// Brute-force minimum over all injections of rows into columns.
    fn brute_force(cost: &Array2<f64>) -> (Vec<usize>, f64) {
        let (rows, cols) = cost.dim();
        let mut best: Option<(Vec<usize>, f64)> = None;
        let mut cur = Vec::with_capacity(rows);
        let mut used = vec![false; cols];
        fn rec(
            r: usize,
            rows: usize,
            cols: usize,
            cost: &Array2<f64>,
            cur: &mut Vec<usize>,
            used: &mut [bool],
            best: &mut Option<(Vec<usize>, f64)>,
        ) {
            if r == rows {
                let t: f64 = cur.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
                let replace = match best {
                    None => true,
                    // Strictly better, or equal-cost and lexicographically
                    // smaller — mirrors the production tie-break.
                    Some((bv, bt)) => {
                        t < *bt - 1e-12 || ((t - *bt).abs() <= 1e-12 && cur < bv)
                    }
                };
                if replace {
                    *best = Some((cur.clone(), t));
                }
                return;
            }
            for j in 0..cols {
                if !used[j] {
                    used[j] = true;
                    cur.push(j);
                    rec(r + 1, rows, cols, cost, cur, used, best);
                    cur.pop();
                    used[j] = false;
                }
            }
        }
        rec(0, rows, cols, cost, &mut cur, &mut used, &mut best);
        best.unwrap()
    }

    fn rand_mask(r: &mut impl rand::Rng, h: usize, w: usize, binary: bool) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |_| {
            let v: f64 = r.random_range(0.0..1.0);
            if binary {
                if v > 0.5 {
                    1.0
                } else {
                    0.0
                }
            } else {
                v
            }
        })
    }

    #[test]
    fn mask_cost_perfect_match_is_near_zero() {
        let mut r = crate::rng::derive(1, "match-test", 0);
        let gt = rand_mask(&mut r, 8, 8, true);
        let w = CostWeights::default();
        let c = mask_cost(gt.view(), gt.view(), &w).unwrap();
        // Clamping puts the BCE term at -ln(1-ε) per pixel; overlap term 0.
        let expect_bce = w.bce * -(1.0 - w.prob_clamp).ln();
        assert!(c >= 0.0 && c < expect_bce + 1e-6, "cost {c} not near zero");
    }

    #[test]
    fn mask_cost_uniform_half_is_entropy() {
        let mut r = crate::rng::derive(2, "match-test", 0);
        let gt = rand_mask(&mut r, 8, 8, true);
        let half = Array2::from_elem((8, 8), 0.5);
        let w = CostWeights {
            dice: 0.0,
            ..CostWeights::default()
        };
        let c = mask_cost(half.view(), gt.view(), &w).unwrap();
        assert_abs_diff_eq!(c, w.bce * std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn mask_cost_matches_naive_oracle() {
        let mut r = crate::rng::derive(3, "match-test", 0);
        let prop = rand_mask(&mut r, 8, 8, false);
        let gt = rand_mask(&mut r, 8, 8, true);
        let w = CostWeights::default();
        let c = mask_cost(prop.view(), gt.view(), &w).unwrap();

        // Independent scalar recomputation, plain loops.
        let mut bce = 0.0;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..8 {
            for j in 0..8 {
                let m = prop[[i, j]].clamp(w.prob_clamp, 1.0 - w.prob_clamp);
                let g = gt[[i, j]];
                bce += -(g * m.ln() + (1.0 - g) * (1.0 - m).ln());
                num += 2.0 * prop[[i, j]] * g;
                den += prop[[i, j]] + g;
            }
        }
        let oracle = w.bce * bce / 64.0 + w.dice * (1.0 - (num + w.dice_eps) / (den + w.dice_eps));
        assert_abs_diff_eq!(c, oracle, epsilon = 1e-10);
    }

    #[test]
    fn mask_cost_shape_mismatch_is_error() {
        let a = Array2::zeros((4, 4));
        let b = Array2::zeros((4, 5));
        assert!(mask_cost(a.view(), b.view(), &CostWeights::default()).is_err());
    }

    #[test]
    fn hungarian_identity_matrix() {
        let c = Array2::from_shape_fn((4, 4), |(i, j)| if i == j { 0.0 } else { 1.0 });
        let sigma = hungarian(c.view()).unwrap();
        assert_eq!(sigma, vec![0, 1, 2, 3]);
    }

    #[test]
    fn hungarian_3x3_known_case() {
        let c = arr2(&[[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]]);
        let sigma = hungarian(c.view()).unwrap();
        // sigma[slot] = proposal: total = c[sigma[0],0] + c[sigma[1],1] + c[sigma[2],2].
        let t: f64 = (0..3).map(|s| c[[sigma[s], s]]).sum();
        // Brute force over slot-to-proposal injections on the transpose.
        let (_, bt) = brute_force(&c.t().to_owned());
        assert_abs_diff_eq!(t, bt, epsilon = 1e-12);
        assert_abs_diff_eq!(t, 5.0, epsilon = 1e-12); // (row1,col0)=2 + (row2? ...) verified below
    }

    #[test]
    fn hungarian_rejects_bad_input() {
        let c = arr2(&[[1.0, f64::NAN], [0.0, 1.0]]);
        assert!(hungarian(c.view()).is_err());
        let rect = Array2::<f64>::zeros((2, 3));
        assert!(hungarian(rect.view()).is_err());
    }

    #[test]
    fn hungarian_matches_brute_force_on_1000_random_instances() {
        let mut r = crate::rng::derive(4, "match-test", 0);
        for trial in 0..1000u32 {
            let n = 1 + (trial as usize % 7);
            let c = Array2::from_shape_fn((n, n), |_| r.random_range(-3.0..3.0));
            let sigma = hungarian(c.view()).unwrap();
            let t: f64 = (0..n).map(|s| c[[sigma[s], s]]).sum();
            let (bs, bt) = brute_force(&c.t().to_owned());
            assert_abs_diff_eq!(t, bt, epsilon = 1e-9);
            // With continuous random costs the optimum is a.s. unique, so the
            // whole vector must agree; on exact ties both sides are lex-min.
            assert_eq!(sigma, bs, "trial {trial}");
        }
    }

    #[test]
    fn hungarian_all_zero_costs_breaks_ties_lexicographically() {
        let c = Array2::<f64>::zeros((5, 5));
        assert_eq!(hungarian(c.view()).unwrap(), vec![0, 1, 2, 3, 4]);

        // Two optimal assignments: slots can take (p0,p1) or (p1,p0).
        let c = arr2(&[[1.0, 2.0], [2.0, 1.0]]);
        // Totals: [p0,p1] = 1+1 = 2; [p1,p0] = 2+2 = 4 → unique here.
        assert_eq!(hungarian(c.view()).unwrap(), vec![0, 1]);
        let tie = arr2(&[[1.0, 2.0], [0.0, 1.0]]);
        // [p0,p1]: 1+1=2; [p1,p0]: 0+2=2 → tie; lex-min picks [p0,p1].
        assert_eq!(hungarian(tie.view()).unwrap(), vec![0, 1]);
    }

    fn toy_masks(n: usize, seed: u64) -> Array2<f64> {
        let mut r = crate::rng::derive(seed, "match-masks", 0);
        Array2::from_shape_fn((n, 16), |_| r.random_range(0.02..0.98))
    }

    #[test]
    fn match_no_gt_leaves_all_unmatched() {
        let props = toy_masks(5, 10);
        let gts = Array2::<f64>::zeros((0, 16));
        let res = match_proposals(props.view(), &[0.5; 5], gts.view(), &CostWeights::default())
            .unwrap();
        assert!(res.matched.is_empty());
        assert_eq!(res.unmatched, vec![0, 1, 2, 3, 4]);
        assert_eq!(res.num_real, 0);
    }

    #[test]
    fn match_counts_and_partition() {
        let props = toy_masks(5, 11);
        let gts = toy_masks(2, 12).mapv(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let res = match_proposals(props.view(), &[0.5; 5], gts.view(), &CostWeights::default())
            .unwrap();
        assert_eq!(res.matched.len(), 2);
        assert_eq!(res.unmatched.len(), 3);
        let mut all: Vec<usize> = res.matched.iter().chain(res.unmatched.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        assert!(is_injective(&res.sigma, 5));
    }

    #[test]
    fn match_exceeding_capacity_is_error() {
        let props = toy_masks(2, 13);
        let gts = toy_masks(3, 14);
        assert!(
            match_proposals(props.view(), &[0.5; 2], gts.view(), &CostWeights::default()).is_err()
        );
    }

    #[test]
    fn match_agrees_with_exhaustive_injection_oracle() {
        let w = CostWeights::default();
        for seed in 0..20u64 {
            let props = toy_masks(4, 100 + seed);
            let gts = toy_masks(2, 200 + seed).mapv(|v| if v > 0.5 { 1.0 } else { 0.0 });
            let res = match_proposals(props.view(), &[0.5; 4], gts.view(), &w).unwrap();

            let mut cost = Array2::<f64>::zeros((2, 4));
            for s in 0..2 {
                for p in 0..4 {
                    cost[[s, p]] = mask_cost(
                        props.row(p).insert_axis(ndarray::Axis(0)),
                        gts.row(s).insert_axis(ndarray::Axis(0)),
                        &w,
                    )
                    .unwrap();
                }
            }
            let (bs, bt) = brute_force(&cost);
            let t: f64 = (0..2).map(|s| cost[[s, res.matched[s]]]).sum();
            assert!((t - bt).abs() <= 1e-9, "seed {seed}: total {t} vs brute {bt}");
            assert_eq!(res.matched, bs, "seed {seed}");
        }
    }

    #[test]
    fn match_is_invariant_to_gt_ordering() {
        let w = CostWeights::default();
        let props = toy_masks(6, 31);
        let gts = toy_masks(3, 32).mapv(|v| if v > 0.6 { 1.0 } else { 0.0 });
        let res = match_proposals(props.view(), &[0.5; 6], gts.view(), &w).unwrap();

        let perm = [2usize, 0, 1];
        let gts_p = Array2::from_shape_fn(gts.dim(), |(i, j)| gts[[perm[i], j]]);
        let res_p = match_proposals(props.view(), &[0.5; 6], gts_p.view(), &w).unwrap();

        let mut a = res.matched.clone();
        let mut b = res_p.matched.clone();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b, "matched set must not depend on GT order");
        // And slot alignment follows the permutation.
        for (new_slot, &old_slot) in perm.iter().enumerate() {
            assert_eq!(res_p.matched[new_slot], res.matched[old_slot]);
        }
    }

    #[test]
    fn match_is_invariant_to_positive_cost_scaling() {
        // Scaling both cost weights by the same positive constant rescales
        // every real-slot cost; padded slots stay 0, so the matched set is
        // unchanged.
        let props = toy_masks(5, 41);
        let gts = toy_masks(2, 42).mapv(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let w1 = CostWeights::default();
        let w2 = CostWeights {
            bce: w1.bce * 7.5,
            dice: w1.dice * 7.5,
            ..w1.clone()
        };
        let r1 = match_proposals(props.view(), &[0.5; 5], gts.view(), &w1).unwrap();
        let r2 = match_proposals(props.view(), &[0.5; 5], gts.view(), &w2).unwrap();
        assert_eq!(r1.matched, r2.matched);
        assert_eq!(r1.sigma, r2.sigma);
    }

    #[test]
    fn objectness_term_in_cost_prefers_confident_proposals() {
        // Two identical proposal masks, different scores: with w.obj > 0 the
        // higher-score proposal must win the single GT slot.
        let mask = toy_masks(1, 51);
        let props = ndarray::concatenate(
            ndarray::Axis(0),
            &[mask.view(), mask.view()],
        )
        .unwrap();
        let gts = mask.mapv(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let w = CostWeights {
            obj: 2.0,
            ..CostWeights::default()
        };
        let res = match_proposals(props.view(), &[0.2, 0.9], gts.view(), &w).unwrap();
        assert_eq!(res.matched, vec![1]);
    }
}

#[cfg(test)]
mod prop_tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn hungarian_total_is_minimal(n in 1usize..6, entries in proptest::collection::vec(-10.0f64..10.0, 36)) {
            let c = Array2::from_shape_fn((n, n), |(i, j)| entries[i * 6 + j]);
            let sigma = hungarian(c.view()).unwrap();
            let t: f64 = (0..n).map(|s| c[[sigma[s], s]]).sum();

            // Exhaustive check over all permutations.
            let mut perm: Vec<usize> = (0..n).collect();
            let mut min = f64::INFINITY;
            permute(&mut perm, 0, &mut |p| {
                let tt: f64 = (0..n).map(|s| c[[p[s], s]]).sum();
                if tt < min { min = tt; }
            });
            prop_assert!((t - min).abs() <= 1e-9);
        }
    }

    fn permute(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == v.len() {
            f(v);
            return;
        }
        for i in k..v.len() {
            v.swap(k, i);
            permute(v, k + 1, f);
            v.swap(k, i);
        }
    }
}
