//! Textbook correlation definitions, written from scratch for comparison.

pub fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn tie_pairs(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let mut total = 0.0;
    let mut i = 0;
    while i < s.len() {
        let j = s[i..].iter().take_while(|&&x| x == s[i]).count();
        total += (j * (j - 1) / 2) as f64;
        i += j;
    }
    total
}

pub fn textbook_tau(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += sgn(x[i] - x[j]) * sgn(y[i] - y[j]);
        }
    }
    let n0 = (n * (n - 1) / 2) as f64;
    s / ((n0 - tie_pairs(x)) * (n0 - tie_pairs(y))).sqrt()
}

pub fn textbook_rank(v: &[f64], i: usize) -> f64 {
    let below = v.iter().filter(|&&x| x < v[i]).count() as f64;
    let equal = v.iter().filter(|&&x| x == v[i]).count() as f64;
    1.0 + below + (equal - 1.0) / 2.0
}

pub fn textbook_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

pub fn textbook_spearman_distinct(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let d2: f64 = (0..x.len())
        .map(|i| (textbook_rank(x, i) - textbook_rank(y, i)).powi(2))
        .sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

pub fn textbook_spearman(x: &[f64], y: &[f64]) -> f64 {
    let rx: Vec<f64> = (0..x.len()).map(|i| textbook_rank(x, i)).collect();
    let ry: Vec<f64> = (0..y.len()).map(|i| textbook_rank(y, i)).collect();
    textbook_pearson(&rx, &ry)
}

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}
