//! Significance statistics: Wilcoxon signed-rank and quadratic-weighted
//! Cohen's kappa.

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StatsError {
    #[error("all differences are zero")]
    AllZero,
    #[error("empty input")]
    Empty,
    #[error("rating vectors have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("rating scale must have at least 2 categories")]
    ScaleTooSmall,
    #[error("rating {0} outside scale of size {1}")]
    OutOfScale(usize, usize),
    #[error("degenerate expected agreement matrix")]
    DegenerateExpected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WilcoxonResult {
    /// Sum of ranks of positive differences (W+).
    pub statistic: f64,
    pub n: usize,
    /// P(W+ >= observed) under the null.
    pub p_one_sided: f64,
    pub p_two_sided: f64,
    pub exact: bool,
}

/// Largest n for which the exact 2^n null distribution is enumerated.
pub const WILCOXON_EXACT_LIMIT: usize = 20;

/// Average ranks of |d|, ties sharing their mean rank.
pub fn tied_ranks(abs: &[f64]) -> Vec<f64> {
    let n = abs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| abs[a].partial_cmp(&abs[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share the average of ranks i+1..=j+1
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn normal_cdf(z: f64) -> f64 {
    // Abramowitz & Stegun 7.1.26 erf approximation, |error| < 1.5e-7
    let x = z / std::f64::consts::SQRT_2;
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let erf = sign * (1.0 - poly * (-x * x).exp());
    0.5 * (1.0 + erf)
}

/// One-sample Wilcoxon signed-rank test on paired differences. Zero
/// differences are dropped; ties in |d| receive average ranks. For
/// n <= `WILCOXON_EXACT_LIMIT` the p-value enumerates all 2^n sign
/// assignments; above that a normal approximation with tie-corrected
/// variance and continuity correction is used.
pub fn wilcoxon_signed_rank(differences: &[f64]) -> Result<WilcoxonResult, StatsError> {
    let nonzero: Vec<f64> = differences.iter().copied().filter(|&d| d != 0.0).collect();
    if nonzero.is_empty() {
        return Err(StatsError::AllZero);
    }
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let ranks = tied_ranks(&abs);
    let n = nonzero.len();
    let w_plus: f64 = nonzero
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();
    if n <= WILCOXON_EXACT_LIMIT {
        // exact null: each rank is positive with probability 1/2
        let total = 1u64 << n;
        let mut ge = 0u64;
        let mut le = 0u64;
        let eps = 1e-9;
        for mask in 0..total {
            let mut w = 0.0;
            for (i, r) in ranks.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    w += r;
                }
            }
            if w >= w_plus - eps {
                ge += 1;
            }
            if w <= w_plus + eps {
                le += 1;
            }
        }
        let p_ge = ge as f64 / total as f64;
        let p_le = le as f64 / total as f64;
        Ok(WilcoxonResult {
            statistic: w_plus,
            n,
            p_one_sided: p_ge,
            p_two_sided: (2.0 * p_ge.min(p_le)).min(1.0),
            exact: true,
        })
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        // tie correction over groups of equal |d|
        let mut sorted = abs.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut tie_term = 0.0;
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_term += t * t * t - t;
            i = j + 1;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let sd = var.sqrt();
        let z_ge = (w_plus - 0.5 - mean) / sd;
        let p_ge = 1.0 - normal_cdf(z_ge);
        let z_le = (w_plus + 0.5 - mean) / sd;
        let p_le = normal_cdf(z_le);
        Ok(WilcoxonResult {
            statistic: w_plus,
            n,
            p_one_sided: p_ge,
            p_two_sided: (2.0 * p_ge.min(p_le)).min(1.0),
            exact: false,
        })
    }
}

/// The ordinal human-rating scale: no, partially, yes.
pub const RATING_SCALE: [&str; 3] = ["no", "partially", "yes"];
/// Numeric values the scale maps to when averaged.
pub const RATING_VALUES: [f64; 3] = [0.0, 0.5, 1.0];

pub fn rating_category(label: &str) -> Option<usize> {
    RATING_SCALE.iter().position(|&s| s == label)
}

/// Quadratic-weighted Cohen's kappa over category indices 0..k:
/// 1 - (sum w_ij O_ij) / (sum w_ij E_ij), w_ij = (i-j)^2 / (k-1)^2.
pub fn cohen_kappa_quadratic(
    ratings_a: &[usize],
    ratings_b: &[usize],
    k: usize,
) -> Result<f64, StatsError> {
    if k < 2 {
        return Err(StatsError::ScaleTooSmall);
    }
    if ratings_a.len() != ratings_b.len() {
        return Err(StatsError::LengthMismatch(ratings_a.len(), ratings_b.len()));
    }
    if ratings_a.is_empty() {
        return Err(StatsError::Empty);
    }
    for &r in ratings_a.iter().chain(ratings_b) {
        if r >= k {
            return Err(StatsError::OutOfScale(r, k));
        }
    }
    let n = ratings_a.len() as f64;
    let mut observed = vec![vec![0.0; k]; k];
    let mut row = vec![0.0; k];
    let mut col = vec![0.0; k];
    for (&a, &b) in ratings_a.iter().zip(ratings_b) {
        observed[a][b] += 1.0;
        row[a] += 1.0;
        col[b] += 1.0;
    }
    let denom_w = ((k - 1) * (k - 1)) as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..k {
        for j in 0..k {
            let w = ((i as f64 - j as f64) * (i as f64 - j as f64)) / denom_w;
            num += w * observed[i][j];
            den += w * row[i] * col[j] / n;
        }
    }
    if den == 0.0 {
        return Err(StatsError::DegenerateExpected);
    }
    Ok(1.0 - num / den)
}
