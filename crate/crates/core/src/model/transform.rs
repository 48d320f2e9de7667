//! Maps between the unconstrained optimizer scale and probabilities/simplexes.

/// Inverse-logit, evaluated without overflow for large |x|.
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Multinomial-logit map with the last category as reference.
///
/// `logits` has one entry fewer than the returned simplex; the reference
/// category carries an implicit logit of zero.
pub fn softmax_with_reference(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(0.0_f64, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    out.push((-max).exp());
    normalize_in_place(&mut out);
    out
}

/// Inverse of [`softmax_with_reference`]: log-ratios against the last entry.
pub fn log_ratios(simplex: &[f64]) -> Vec<f64> {
    let last = simplex[simplex.len() - 1];
    simplex[..simplex.len() - 1]
        .iter()
        .map(|&x| (x / last).ln())
        .collect()
}

/// Softmax over a subset of categories; entries outside `mask` are zero.
///
/// `logits` has one entry per category with the reference already set to
/// zero by the caller.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { (l - max).exp() } else { 0.0 })
        .collect();
    normalize_in_place(&mut out);
    out
}

pub(crate) fn normalize_in_place(v: &mut [f64]) {
    let total: f64 = v.iter().sum();
    for x in v.iter_mut() {
        *x /= total;
    }
}
