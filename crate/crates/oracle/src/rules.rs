//! Brute-force re-derivations of decision rules and closed forms.

/// Transition year from a trace of `(year, p)` by exhaustive comparison:
/// the answer is the first entry that is ≥ 0.5, not below any entry, and
/// strictly above every earlier entry. `None` when no entry qualifies.
pub fn transition_by_exhaustion(trace: &[(i32, f32)]) -> Option<i32> {
    'candidates: for (i, &(year, p)) in trace.iter().enumerate() {
        if p < 0.5 {
            continue;
        }
        for (j, &(_, q)) in trace.iter().enumerate() {
            if q > p || (j < i && q == p) {
                continue 'candidates;
            }
        }
        return Some(year);
    }
    None
}

/// Whether the roof photographed in `year` is the replacement.
fn is_new_roof(year: i32, reroof: Option<i32>) -> bool {
    reroof.is_some_and(|t| year >= t)
}

/// All unordered pairs `(earlier, later)` of `years` with their
/// different-roof label, enumerated by nested loops.
pub fn pairs_by_enumeration(years: &[i32], reroof: Option<i32>) -> Vec<(i32, i32, bool)> {
    let mut out = Vec::new();
    for (i, &a) in years.iter().enumerate() {
        for &b in &years[i + 1..] {
            out.push((a, b, is_new_roof(a, reroof) != is_new_roof(b, reroof)));
        }
    }
    out
}

/// `C(n, 2)`.
pub fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Different-roof pairs when `k` of `n` images precede the reroof.
pub fn different_roof_pairs(n: usize, k: usize) -> usize {
    k * (n - k)
}

/// Expected detection accuracy of a predictor that guesses "no reroof" with
/// probability `p` on data where the truth is "no reroof" with probability
/// `p`, independently: `p² + (1 − p)²`.
pub fn categorical_expected_accuracy(p_no_reroof: f64) -> f64 {
    p_no_reroof * p_no_reroof + (1.0 - p_no_reroof) * (1.0 - p_no_reroof)
}

/// Standard error of a mean of `trials` Bernoulli(`p`) outcomes.
pub fn bernoulli_standard_error(p: f64, trials: usize) -> f64 {
    (p * (1.0 - p) / trials as f64).sqrt()
}

/// `½ Σ (μ² + σ² − 1 − log σ²)` with `σ² − 1` via `expm1` and compensated
/// (Neumaier) summation.
pub fn kl_high_precision(mu: &[f32], log_var: &[f32]) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for (&m, &lv) in mu.iter().zip(log_var) {
        let (m, lv) = (m as f64, lv as f64);
        for term in [m * m, lv.exp_m1(), -lv] {
            let t = sum + term;
            if sum.abs() >= term.abs() {
                comp += (sum - t) + term;
            } else {
                comp += (term - t) + sum;
            }
            sum = t;
        }
    }
    0.5 * (sum + comp)
}
