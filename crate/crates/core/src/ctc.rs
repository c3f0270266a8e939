//! Connectionist Temporal Classification.
//!
//! Every recursion runs in log space. The loss gradient is taken with respect to
//! the per-frame log-probabilities, i.e. `d(-log P)/d(log p_t(k)) = -occupancy_t(k)`.

use crate::error::{Error, Result};
use crate::numerics::{log_add, logsumexp_unchecked, Tensor};

const NEG_INF: f64 = f64::NEG_INFINITY;

/// Penalty a single infeasible sample contributes to a batched loss.
pub const INFEASIBLE_PENALTY: f64 = 1e4;

/// Per-frame log-probability rows over a vocabulary that includes `blank`.
#[derive(Clone, Debug, PartialEq)]
pub struct CtcPosteriors {
    log_probs: Tensor,
    blank: usize,
}

impl CtcPosteriors {
    /// Wraps a `frames x vocab` matrix of log-probabilities.
    ///
    /// Rows must exponentiate to a distribution within `1e-5`.
    pub fn new(log_probs: Tensor, blank: usize) -> Result<Self> {
        if log_probs.shape().len() != 2 {
            return Err(Error::usage("posteriors must be a frames x vocab matrix"));
        }
        if blank >= log_probs.cols() {
            return Err(Error::usage(format!(
                "blank id {blank} outside vocabulary of {}",
                log_probs.cols()
            )));
        }
        for t in 0..log_probs.rows() {
            let mass: f64 = log_probs.row(t).iter().map(|v| v.exp()).sum();
            if (mass - 1.0).abs() > 1e-5 {
                return Err(Error::usage(format!("frame {t} sums to {mass}, not 1")));
            }
        }
        Ok(CtcPosteriors { log_probs, blank })
    }

    /// Builds posteriors from probabilities (taking logs).
    pub fn from_probs(probs: &[Vec<f64>], blank: usize) -> Result<Self> {
        let logs: Vec<Vec<f64>> = probs
            .iter()
            .map(|r| r.iter().map(|p| p.ln()).collect())
            .collect();
        CtcPosteriors::new(Tensor::from_rows(&logs)?, blank)
    }

    /// Skips the normalization check; for unnormalized log-scores under test.
    pub fn from_log_probs_unchecked(log_probs: Tensor, blank: usize) -> Self {
        CtcPosteriors { log_probs, blank }
    }

    pub fn frames(&self) -> usize {
        self.log_probs.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.log_probs.cols()
    }

    pub fn blank(&self) -> usize {
        self.blank
    }

    pub fn log_probs(&self) -> &Tensor {
        &self.log_probs
    }

    #[inline]
    fn lp(&self, t: usize, k: usize) -> f64 {
        self.log_probs.get(t, k)
    }
}

/// Shortest frame count able to emit `target`: one frame per label plus a
/// separating blank between equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_target(post: &CtcPosteriors, target: &[usize]) -> Result<()> {
    for &k in target {
        if k == post.blank {
            return Err(Error::usage("target contains the blank id"));
        }
        if k >= post.vocab_size() {
            return Err(Error::usage(format!(
                "target id {k} outside vocabulary of {}",
                post.vocab_size()
            )));
        }
    }
    let needed = min_frames(target);
    if post.frames() < needed {
        return Err(Error::InfeasibleAlignment {
            frames: post.frames(),
            needed,
        });
    }
    Ok(())
}

/// `-log P(target | posteriors)` and its gradient with respect to the log-probabilities.
pub fn ctc_loss(post: &CtcPosteriors, target: &[usize]) -> Result<(f64, Tensor)> {
    check_target(post, target)?;
    let t_len = post.frames();
    let ext: Vec<usize> = std::iter::once(post.blank)
        .chain(target.iter().flat_map(|&k| [k, post.blank]))
        .collect();
    let s_len = ext.len();
    // s-2 skip is allowed onto a label that differs from the label two back.
    let skip: Vec<bool> = (0..s_len)
        .map(|s| s >= 2 && ext[s] != post.blank && ext[s] != ext[s - 2])
        .collect();

    let mut alpha = vec![NEG_INF; t_len * s_len];
    alpha[0] = post.lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = post.lp(0, ext[1]);
    }
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if skip[s] {
                a = log_add(a, prev[s - 2]);
            }
            cur[s] = a + post.lp(t, ext[s]);
        }
    }
    let last = (t_len - 1) * s_len;
    let log_p = if s_len > 1 {
        log_add(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };

    let mut beta = vec![NEG_INF; t_len * s_len];
    beta[last + s_len - 1] = post.lp(t_len - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = post.lp(t_len - 1, ext[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        for s in 0..s_len {
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && skip[s + 2] {
                b = log_add(b, next[s + 2]);
            }
            cur[s] = b + post.lp(t, ext[s]);
        }
    }

    let v = post.vocab_size();
    let mut grad = Tensor::zeros(&[t_len, v]);
    if log_p == NEG_INF {
        // Every admissible path has probability zero; no usable direction.
        return Ok((f64::INFINITY, grad));
    }
    let g = grad.data_mut();
    for t in 0..t_len {
        for s in 0..s_len {
            let i = t * s_len + s;
            let occ = alpha[i] + beta[i] - post.lp(t, ext[s]) - log_p;
            if occ > NEG_INF {
                g[t * v + ext[s]] -= occ.exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// Collapses a frame-label path: merge repeats, then drop blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Exhaustive-enumeration reference for [`ctc_loss`] on tiny inputs.
///
/// Returns `+inf` when no path collapses to `target`.
pub fn ctc_loss_bruteforce(post: &CtcPosteriors, target: &[usize]) -> Result<f64> {
    let (t_len, v) = (post.frames(), post.vocab_size());
    if v > 6 || t_len > 8 || target.len() > 4 {
        return Err(Error::usage(format!(
            "enumeration bounds exceeded (V={v}, T={t_len}, L={})",
            target.len()
        )));
    }
    if target.contains(&post.blank) {
        return Err(Error::usage("target contains the blank id"));
    }
    let mut path = vec![0usize; t_len];
    let mut terms = Vec::new();
    loop {
        if collapse(&path, post.blank) == target {
            terms.push(path.iter().enumerate().map(|(t, &k)| post.lp(t, k)).sum::<f64>());
        }
        // odometer increment
        let mut i = 0;
        while i < t_len {
            path[i] += 1;
            if path[i] < v {
                break;
            }
            path[i] = 0;
            i += 1;
        }
        if i == t_len {
            break;
        }
    }
    if terms.is_empty() {
        return Ok(f64::INFINITY);
    }
    Ok(-logsumexp_unchecked(&terms))
}

/// Frame-wise argmax followed by [`collapse`].
pub fn ctc_greedy_decode(post: &CtcPosteriors) -> Vec<usize> {
    let path: Vec<usize> = (0..post.frames())
        .map(|t| {
            let row = post.log_probs.row(t);
            let mut best = 0;
            for (k, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    collapse(&path, post.blank)
}

/// Incremental CTC prefix state for label-synchronous search.
///
/// `ends_blank[t]` / `ends_label[t]` hold the log-probability that frames `0..=t`
/// emit exactly `prefix` and end in a blank or in the last label respectively.
#[derive(Clone, Debug, PartialEq)]
pub struct CtcPrefixState {
    pub prefix: Vec<usize>,
    ends_blank: Vec<f64>,
    ends_label: Vec<f64>,
    /// Log-probability of all label sequences that start with `prefix`.
    pub prefix_log_prob: f64,
}

impl CtcPrefixState {
    /// State of the empty prefix: all mass on all-blank paths.
    pub fn initial(post: &CtcPosteriors) -> Self {
        let mut ends_blank = Vec::with_capacity(post.frames());
        let mut acc = 0.0;
        for t in 0..post.frames() {
            acc += post.lp(t, post.blank);
            ends_blank.push(acc);
        }
        CtcPrefixState {
            prefix: Vec::new(),
            ends_label: vec![NEG_INF; post.frames()],
            ends_blank,
            prefix_log_prob: 0.0,
        }
    }

    /// Log-probability that the whole frame sequence emits exactly `prefix`.
    pub fn finalize(&self) -> f64 {
        let last = self.ends_blank.len() - 1;
        log_add(self.ends_blank[last], self.ends_label[last])
    }
}

/// Extends `state` by `next` and returns the change in prefix log-probability.
pub fn ctc_prefix_score(
    state: &CtcPrefixState,
    next: usize,
    post: &CtcPosteriors,
) -> Result<(f64, CtcPrefixState)> {
    if next == post.blank {
        return Err(Error::usage("cannot extend a CTC prefix with blank"));
    }
    if next >= post.vocab_size() {
        return Err(Error::usage(format!("token {next} outside vocabulary")));
    }
    if state.ends_blank.len() != post.frames() {
        return Err(Error::usage("prefix state belongs to different posteriors"));
    }
    let t_len = post.frames();
    let last = state.prefix.last().copied();
    let mut ends_label = vec![NEG_INF; t_len];
    let mut ends_blank = vec![NEG_INF; t_len];
    if state.prefix.is_empty() {
        ends_label[0] = post.lp(0, next);
    }
    let mut psi = ends_label[0];
    for t in 1..t_len {
        let phi = if last == Some(next) {
            state.ends_blank[t - 1]
        } else {
            log_add(state.ends_blank[t - 1], state.ends_label[t - 1])
        };
        ends_label[t] = log_add(ends_label[t - 1], phi) + post.lp(t, next);
        ends_blank[t] = log_add(ends_blank[t - 1], ends_label[t - 1]) + post.lp(t, post.blank);
        psi = log_add(psi, phi + post.lp(t, next));
    }
    let delta = if psi == NEG_INF {
        NEG_INF
    } else {
        psi - state.prefix_log_prob
    };
    let mut prefix = state.prefix.clone();
    prefix.push(next);
    Ok((
        delta,
        CtcPrefixState {
            prefix,
            ends_blank,
            ends_label,
            prefix_log_prob: psi,
        },
    ))
}

/// How per-sample CTC losses combine across a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// Batched CTC over packed posteriors.
///
/// `segments[i] = (first_row, frames)` locates sample `i`. Infeasible samples add
/// [`INFEASIBLE_PENALTY`] with zero gradient instead of failing the batch.
pub fn ctc_batch_loss(
    log_probs: &Tensor,
    blank: usize,
    segments: &[(usize, usize)],
    targets: &[Vec<usize>],
    reduction: Reduction,
) -> Result<(f64, Tensor, Vec<f64>)> {
    if segments.len() != targets.len() || segments.is_empty() {
        return Err(Error::usage("ctc_batch_loss: segment/target count mismatch"));
    }
    let scale = match reduction {
        Reduction::Mean => 1.0 / segments.len() as f64,
        Reduction::Sum => 1.0,
    };
    let mut grad = Tensor::zeros(log_probs.shape());
    let mut per_sample = Vec::with_capacity(segments.len());
    let mut total = 0.0;
    let v = log_probs.cols();
    for (&(start, len), target) in segments.iter().zip(targets) {
        let post = CtcPosteriors::from_log_probs_unchecked(log_probs.slice_rows(start, len), blank);
        let loss = match ctc_loss(&post, target) {
            Ok((l, g)) if l.is_finite() && l <= INFEASIBLE_PENALTY => {
                for (dst, src) in grad.data_mut()[start * v..(start + len) * v]
                    .iter_mut()
                    .zip(g.data())
                {
                    *dst = scale * src;
                }
                l
            }
            Ok(_) | Err(Error::InfeasibleAlignment { .. }) => INFEASIBLE_PENALTY,
            Err(e) => return Err(e),
        };
        per_sample.push(loss);
        total += loss;
    }
    Ok((total * scale, grad, per_sample))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error, Rng};
    use proptest::prelude::*;

    // vocabulary: 0 = blank, 1 = a, 2 = b
    fn example() -> CtcPosteriors {
        CtcPosteriors::from_probs(&[vec![0.5, 0.3, 0.2], vec![0.4, 0.4, 0.2]], 0).unwrap()
    }

    fn random_post(t: usize, v: usize, rng: &mut Rng) -> CtcPosteriors {
        let rows: Vec<Vec<f64>> = (0..t)
            .map(|_| {
                let logits: Vec<f64> = (0..v).map(|_| 2.0 * rng.normal()).collect();
                let lse = logsumexp_unchecked(&logits);
                logits.iter().map(|x| x - lse).collect()
            })
            .collect();
        CtcPosteriors::new(Tensor::from_rows(&rows).unwrap(), 0).unwrap()
    }

    #[test]
    fn forced_single_alignment_has_zero_loss() {
        let post = CtcPosteriors::from_probs(&[vec![0.0, 1.0]], 0).unwrap();
        let (loss, _) = ctc_loss(&post, &[1]).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn three_alignment_example() {
        let (loss, _) = ctc_loss(&example(), &[1]).unwrap();
        assert!((loss + 0.44f64.ln()).abs() < 1e-12);
        assert!((loss - 0.8210).abs() < 1e-4);
        let brute = ctc_loss_bruteforce(&example(), &[1]).unwrap();
        assert!((loss - brute).abs() < 1e-9);
    }

    #[test]
    fn repeated_label_needs_blank() {
        let err = ctc_loss(&example(), &[1, 1]).unwrap_err();
        assert!(matches!(err, Error::InfeasibleAlignment { frames: 2, needed: 3 }));
        assert_eq!(ctc_loss_bruteforce(&example(), &[1, 1]).unwrap(), f64::INFINITY);
    }

    #[test]
    fn blank_in_target_rejected() {
        assert!(ctc_loss(&example(), &[0]).unwrap_err().is_usage());
        assert!(ctc_loss_bruteforce(&example(), &[0]).unwrap_err().is_usage());
    }

    #[test]
    fn empty_target_is_all_blank() {
        let mut rng = Rng::new(3);
        let post = random_post(5, 3, &mut rng);
        let want: f64 = -(0..5).map(|t| post.lp(t, 0)).sum::<f64>();
        assert!((ctc_loss_bruteforce(&post, &[]).unwrap() - want).abs() < 1e-12);
        assert!((ctc_loss(&post, &[]).unwrap().0 - want).abs() < 1e-12);
    }

    #[test]
    fn bruteforce_bounds_enforced() {
        let mut rng = Rng::new(4);
        assert!(ctc_loss_bruteforce(&random_post(9, 3, &mut rng), &[1]).is_err());
        assert!(ctc_loss_bruteforce(&random_post(3, 7, &mut rng), &[1]).is_err());
    }

    #[test]
    fn greedy_collapse_rules() {
        assert_eq!(collapse(&[1, 1, 0, 2, 2], 0), vec![1, 2]);
        assert_eq!(collapse(&[0, 0, 0], 0), Vec::<usize>::new());
        assert_eq!(collapse(&[1, 0, 1], 0), vec![1, 1]);
        let onehot = |path: &[usize]| {
            let rows: Vec<Vec<f64>> = path
                .iter()
                .map(|&k| (0..3).map(|j| if j == k { 0.8 } else { 0.1 }).collect())
                .collect();
            CtcPosteriors::from_probs(&rows, 0).unwrap()
        };
        assert_eq!(ctc_greedy_decode(&onehot(&[1, 1, 0, 2, 2])), vec![1, 2]);
        assert_eq!(ctc_greedy_decode(&onehot(&[1, 0, 1])), vec![1, 1]);
    }

    #[test]
    fn prefix_score_examples() {
        let post = CtcPosteriors::from_probs(&[vec![0.0, 1.0]], 0).unwrap();
        let s0 = CtcPrefixState::initial(&post);
        let (_, s1) = ctc_prefix_score(&s0, 1, &post).unwrap();
        assert!(s1.finalize().abs() < 1e-12);

        let post = example();
        let s0 = CtcPrefixState::initial(&post);
        let (_, sa) = ctc_prefix_score(&s0, 1, &post).unwrap();
        assert!((sa.finalize() - 0.44f64.ln()).abs() < 1e-12);
        let (_, sb) = ctc_prefix_score(&s0, 2, &post).unwrap();
        assert!((sb.finalize() - 0.22f64.ln()).abs() < 1e-12);
        assert!((sb.finalize() + 1.5141).abs() < 1e-4);
        assert!(ctc_prefix_score(&s0, 0, &post).unwrap_err().is_usage());
    }

    #[test]
    fn prefix_deltas_sum_to_prefix_probability() {
        let mut rng = Rng::new(9);
        let post = random_post(6, 4, &mut rng);
        let mut st = CtcPrefixState::initial(&post);
        let mut acc = 0.0;
        for &k in &[2, 2, 3] {
            let (d, next) = ctc_prefix_score(&st, k, &post).unwrap();
            acc += d;
            st = next;
        }
        assert!((acc - st.prefix_log_prob).abs() < 1e-12);
        assert!(st.prefix_log_prob >= st.finalize());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(12);
        let post = random_post(4, 3, &mut rng);
        let target = [1, 2];
        let (_, grad) = ctc_loss(&post, &target).unwrap();
        let num = finite_diff_grad(
            |x| {
                let p = CtcPosteriors::from_log_probs_unchecked(x.clone(), 0);
                ctc_loss(&p, &target).unwrap().0
            },
            post.log_probs(),
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(&grad, &num, 1e-8) <= 1e-4);
    }

    #[test]
    fn batch_loss_caps_infeasible_samples() {
        let post = example();
        let mut packed = post.log_probs().data().to_vec();
        packed.extend_from_slice(post.log_probs().data());
        let packed = Tensor::new(vec![4, 3], packed).unwrap();
        let segs = [(0, 2), (2, 2)];
        let targets = vec![vec![1], vec![1, 1]];
        let (loss, grad, per) = ctc_batch_loss(&packed, 0, &segs, &targets, Reduction::Mean).unwrap();
        assert!((per[0] + 0.44f64.ln()).abs() < 1e-12);
        assert_eq!(per[1], INFEASIBLE_PENALTY);
        assert!((loss - (per[0] + per[1]) / 2.0).abs() < 1e-9);
        assert!(grad.data()[6..].iter().all(|&g| g == 0.0));
        assert!(grad.is_finite());
    }

    fn all_targets(vocab: usize, max_len: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        let mut frontier = vec![vec![]];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for t in &frontier {
                for k in 1..vocab {
                    let mut t2: Vec<usize> = t.clone();
                    t2.push(k);
                    next.push(t2);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn matches_bruteforce(seed in 0u64..10_000, t in 1usize..7, v in 2usize..5, l in 0usize..4) {
            let mut rng = Rng::new(seed);
            let post = random_post(t, v, &mut rng);
            let target: Vec<usize> = (0..l).map(|_| rng.int_in(1, v - 1)).collect();
            let brute = ctc_loss_bruteforce(&post, &target).unwrap();
            match ctc_loss(&post, &target) {
                Ok((loss, _)) => {
                    prop_assert!(loss >= 0.0);
                    prop_assert!((loss - brute).abs() <= 1e-6);
                }
                Err(Error::InfeasibleAlignment { .. }) => prop_assert!(brute.is_infinite()),
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
        }

        #[test]
        fn probabilities_of_all_targets_sum_below_one(seed in 0u64..10_000, t in 1usize..6, v in 2usize..4) {
            let mut rng = Rng::new(seed);
            let post = random_post(t, v, &mut rng);
            let total: f64 = all_targets(v, 2)
                .iter()
                .filter_map(|tg| ctc_loss(&post, tg).ok())
                .map(|(l, _)| (-l).exp())
                .sum();
            prop_assert!(total <= 1.0 + 1e-12);
        }

        #[test]
        fn finalized_prefix_equals_negative_loss(seed in 0u64..10_000, t in 1usize..7, v in 2usize..5, l in 0usize..4) {
            let mut rng = Rng::new(seed);
            let post = random_post(t, v, &mut rng);
            let target: Vec<usize> = (0..l).map(|_| rng.int_in(1, v - 1)).collect();
            let mut st = CtcPrefixState::initial(&post);
            for &k in &target {
                st = ctc_prefix_score(&st, k, &post).unwrap().1;
            }
            match ctc_loss(&post, &target) {
                Ok((loss, _)) => prop_assert!((st.finalize() + loss).abs() <= 1e-8),
                Err(_) => prop_assert_eq!(st.finalize(), f64::NEG_INFINITY),
            }
        }
    }
}
