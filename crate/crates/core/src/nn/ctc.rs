//! CTC loss by the forward-backward recursion over the blank-interleaved
//! label lattice, in log space.

use super::logits::{log_add, LogitMatrix};
use super::NnError;

#[derive(Debug, Clone, PartialEq)]
pub struct CtcOutput {
    /// `-ln p(target | logits)`, or `+inf` when no alignment exists.
    pub loss: f64,
    /// False when the target needs more frames than the matrix has.
    pub feasible: bool,
    /// `∂loss/∂logits`, row-major like the input. Zero when infeasible.
    pub grad: Option<Vec<f64>>,
}

/// Frames needed to emit `target`: one per label plus one blank between
/// each pair of equal neighbours.
pub fn min_frames(target: &[u32]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// CTC negative log-likelihood of `target` under `logits`, with the blank as
/// the last class.
///
/// The gradient treats every entry of `logits` as an independent input (no
/// renormalization). Chaining it through a log-softmax gives the usual
/// `softmax - posterior` form.
pub fn ctc_loss(logits: &LogitMatrix, target: &[u32], want_grad: bool) -> Result<CtcOutput, NnError> {
    let blank = logits.blank();
    let classes = logits.classes();
    if let Some(&bad) = target.iter().find(|&&l| l >= blank) {
        return Err(NnError::Target(format!(
            "label {bad} is the blank or outside {} classes",
            classes
        )));
    }
    let frames = logits.frames();
    if frames == 0 || min_frames(target) > frames {
        return Ok(CtcOutput {
            loss: f64::INFINITY,
            feasible: false,
            grad: want_grad.then(|| vec![0.0; frames * classes]),
        });
    }

    let s_len = 2 * target.len() + 1;
    let label = |s: usize| if s % 2 == 0 { blank } else { target[s / 2] };
    // skip transition s-2 → s allowed for non-blank labels differing from s-2
    let can_skip = |s: usize| s >= 2 && s % 2 == 1 && label(s) != label(s - 2);
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = logits.get(0, blank as usize);
    if s_len > 1 {
        alpha[1] = logits.get(0, label(1) as usize);
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if can_skip(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            cur[s] = acc + logits.get(t, label(s) as usize);
        }
    }
    let last = (frames - 1) * s_len;
    let log_p = if s_len > 1 {
        log_add(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };
    if log_p == ninf {
        return Ok(CtcOutput {
            loss: f64::INFINITY,
            feasible: false,
            grad: want_grad.then(|| vec![0.0; frames * classes]),
        });
    }

    let grad = want_grad.then(|| {
        let mut beta = vec![ninf; frames * s_len];
        beta[last + s_len - 1] = logits.get(frames - 1, blank as usize);
        if s_len > 1 {
            beta[last + s_len - 2] = logits.get(frames - 1, label(s_len - 2) as usize);
        }
        for t in (0..frames - 1).rev() {
            let (cur, next) = beta.split_at_mut((t + 1) * s_len);
            let cur = &mut cur[t * s_len..];
            for s in 0..s_len {
                let mut acc = next[s];
                if s + 1 < s_len {
                    acc = log_add(acc, next[s + 1]);
                }
                if s + 2 < s_len && can_skip(s + 2) {
                    acc = log_add(acc, next[s + 2]);
                }
                cur[s] = acc + logits.get(t, label(s) as usize);
            }
        }
        let mut grad = vec![0.0; frames * classes];
        let mut occupancy = vec![ninf; classes];
        for t in 0..frames {
            occupancy.iter_mut().for_each(|v| *v = ninf);
            for s in 0..s_len {
                let k = label(s) as usize;
                occupancy[k] = log_add(occupancy[k], alpha[t * s_len + s] + beta[t * s_len + s]);
            }
            for (k, &occ) in occupancy.iter().enumerate() {
                let y = logits.get(t, k);
                if occ != ninf && y != ninf {
                    grad[t * classes + k] = -(occ - y - log_p).exp();
                }
            }
        }
        grad
    });

    Ok(CtcOutput {
        loss: -log_p,
        feasible: true,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Sums the probability of every frame-level path whose collapse equals
    /// the target, by enumerating all `classes^frames` paths.
    fn brute_force_log_p(logits: &LogitMatrix, target: &[u32]) -> f64 {
        let (n, c) = (logits.frames(), logits.classes());
        let blank = logits.blank();
        let mut total = 0.0f64;
        for code in 0..c.pow(n as u32) {
            let mut path = Vec::with_capacity(n);
            let mut x = code;
            for _ in 0..n {
                path.push((x % c) as u32);
                x /= c;
            }
            let mut collapsed = Vec::new();
            let mut prev = None;
            for &k in &path {
                if Some(k) != prev && k != blank {
                    collapsed.push(k);
                }
                prev = Some(k);
            }
            if collapsed == target {
                total += path
                    .iter()
                    .enumerate()
                    .map(|(t, &k)| logits.get(t, k as usize))
                    .sum::<f64>()
                    .exp();
            }
        }
        total.ln()
    }

    fn random_logits(rng: &mut ChaCha8Rng, frames: usize, classes: usize) -> LogitMatrix {
        let scores: Vec<f64> = (0..frames * classes).map(|_| rng.random_range(-3.0..3.0)).collect();
        LogitMatrix::from_scores(frames, classes, &scores).unwrap()
    }

    #[test]
    fn single_frame_single_label() {
        let m = LogitMatrix::from_probabilities(1, 2, &[0.6, 0.4]).unwrap();
        let out = ctc_loss(&m, &[0], false).unwrap();
        assert!((out.loss + 0.6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_three_paths() {
        let m = LogitMatrix::from_probabilities(2, 2, &[0.6, 0.4, 0.6, 0.4]).unwrap();
        let out = ctc_loss(&m, &[0], false).unwrap();
        assert!((out.loss + 0.84f64.ln()).abs() < 1e-12);
        assert!((brute_force_log_p(&m, &[0]) - 0.84f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_target_is_all_blank() {
        let m = LogitMatrix::from_probabilities(3, 2, &[0.3, 0.7, 0.5, 0.5, 0.1, 0.9]).unwrap();
        let out = ctc_loss(&m, &[], false).unwrap();
        assert!((out.loss + (0.7f64 * 0.5 * 0.9).ln()).abs() < 1e-12);
    }

    #[test]
    fn infeasible_target() {
        let m = LogitMatrix::from_probabilities(2, 2, &[0.5; 4]).unwrap();
        // "aa" needs a separating blank: three frames
        let out = ctc_loss(&m, &[0, 0], true).unwrap();
        assert!(!out.feasible);
        assert_eq!(out.loss, f64::INFINITY);
        assert!(out.grad.unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn blank_in_target_rejected() {
        let m = LogitMatrix::from_probabilities(2, 2, &[0.5; 4]).unwrap();
        assert!(ctc_loss(&m, &[1], false).is_err());
    }

    #[test]
    fn matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for frames in 1..=4 {
            for classes in 2..=3 {
                for len in 0..=2 {
                    for _ in 0..3 {
                        let m = random_logits(&mut rng, frames, classes);
                        let target: Vec<u32> = (0..len)
                            .map(|_| rng.random_range(0..classes as u32 - 1))
                            .collect();
                        let out = ctc_loss(&m, &target, false).unwrap();
                        let bf = brute_force_log_p(&m, &target);
                        if out.feasible {
                            assert!((-out.loss - bf).abs() < 1e-9, "{frames} {classes} {target:?}");
                        } else {
                            assert_eq!(bf, f64::NEG_INFINITY);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-4;
        for _ in 0..20 {
            let frames = rng.random_range(2..=4);
            let classes = rng.random_range(2..=3);
            let m = random_logits(&mut rng, frames, classes);
            let len = rng.random_range(1..=2);
            let target: Vec<u32> = (0..len).map(|_| rng.random_range(0..classes as u32 - 1)).collect();
            let out = ctc_loss(&m, &target, true).unwrap();
            if !out.feasible {
                continue;
            }
            let grad = out.grad.unwrap();
            for i in 0..frames * classes {
                let mut plus = m.data().to_vec();
                plus[i] += h;
                let mut minus = m.data().to_vec();
                minus[i] -= h;
                let lp = ctc_loss(&LogitMatrix::new(frames, classes, plus).unwrap(), &target, false)
                    .unwrap()
                    .loss;
                let lm = ctc_loss(&LogitMatrix::new(frames, classes, minus).unwrap(), &target, false)
                    .unwrap()
                    .loss;
                let numeric = (lp - lm) / (2.0 * h);
                let denom = grad[i].abs().max(numeric.abs()).max(1e-8);
                assert!((grad[i] - numeric).abs() / denom < 1e-4, "{} vs {}", grad[i], numeric);
            }
        }
    }

    #[test]
    fn softmax_chain_sums_to_zero() {
        // Σ_k ∂L/∂u_t(k) = -1 for every frame: each path visits one class per frame
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_logits(&mut rng, 6, 4);
        let out = ctc_loss(&m, &[0, 2, 2], true).unwrap();
        for row in out.grad.unwrap().chunks(4) {
            assert!((row.iter().sum::<f64>() + 1.0).abs() < 1e-9);
        }
    }
}
