use crate::error::{Error, Result};

fn check(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Correlation(format!(
            "length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Correlation(format!(
            "need at least 2 points, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Correlation("non-finite input".into()));
    }
    Ok(())
}

/// Pair counts over all `i < j`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PairCounts {
    pub concordant: u64,
    pub discordant: u64,
    /// Tied in `x` only.
    pub ties_x: u64,
    /// Tied in `y` only.
    pub ties_y: u64,
    pub ties_both: u64,
}

pub fn pair_counts(x: &[f64], y: &[f64]) -> PairCounts {
    let mut c = PairCounts::default();
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let dx = x[i].total_cmp(&x[j]);
            let dy = y[i].total_cmp(&y[j]);
            use std::cmp::Ordering::Equal;
            match (dx, dy) {
                (Equal, Equal) => c.ties_both += 1,
                (Equal, _) => c.ties_x += 1,
                (_, Equal) => c.ties_y += 1,
                (a, b) if a == b => c.concordant += 1,
                _ => c.discordant += 1,
            }
        }
    }
    c
}

/// Tie-corrected Kendall rank correlation; `None` when either input is constant.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    check(x, y)?;
    let c = pair_counts(x, y);
    let cd = (c.concordant + c.discordant) as f64;
    let denom = ((cd + c.ties_x as f64) * (cd + c.ties_y as f64)).sqrt();
    if denom == 0.0 {
        return Ok(None);
    }
    let num = c.concordant as f64 - c.discordant as f64;
    Ok(Some((num / denom).clamp(-1.0, 1.0)))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn has_ties(v: &[f64]) -> bool {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s.windows(2).any(|w| w[0] == w[1])
}

/// Spearman rank correlation. Untied inputs use the squared rank-difference
/// formula; ties fall back to Pearson over average ranks.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    check(x, y)?;
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    if has_ties(x) || has_ties(y) {
        return pearson_r(&rx, &ry);
    }
    let n = x.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(Some(
        (1.0 - 6.0 * d2 / (n * (n * n - 1.0))).clamp(-1.0, 1.0),
    ))
}

/// Product-moment correlation by the two-pass formula; `None` on zero variance.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    check(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    const X: [f64; 4] = [1.0, 2.0, 3.0, 4.0];
    const Y: [f64; 4] = [1.0, 3.0, 2.0, 4.0];

    #[test]
    fn worked_example_counts() {
        let c = pair_counts(&X, &Y);
        assert_eq!((c.concordant, c.discordant), (5, 1));
        assert_eq!(kendall_tau_b(&X, &Y).unwrap(), Some(4.0 / 6.0));
        assert_eq!(spearman_rho(&X, &Y).unwrap(), Some(0.8));
    }

    #[test]
    fn perfect_and_reversed() {
        let rev: Vec<f64> = X.iter().rev().copied().collect();
        assert_eq!(kendall_tau_b(&X, &X).unwrap(), Some(1.0));
        assert_eq!(kendall_tau_b(&X, &rev).unwrap(), Some(-1.0));
        assert_eq!(spearman_rho(&X, &rev).unwrap(), Some(-1.0));
        let affine: Vec<f64> = X.iter().map(|v| 2.0 * v + 1.0).collect();
        assert_eq!(pearson_r(&X, &affine).unwrap(), Some(1.0));
    }

    #[test]
    fn constant_input_is_undefined() {
        let c = [2.0; 4];
        assert_eq!(pearson_r(&X, &c).unwrap(), None);
        assert_eq!(kendall_tau_b(&c, &X).unwrap(), None);
        assert_eq!(spearman_rho(&X, &c).unwrap(), None);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(pearson_r(&X, &[1.0, 2.0]).is_err());
        assert!(kendall_tau_b(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn average_ranks_share_ties() {
        assert_eq!(
            average_ranks(&[10.0, 20.0, 10.0, 5.0]),
            vec![2.5, 4.0, 2.5, 1.0]
        );
    }
}
