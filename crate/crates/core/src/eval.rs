//! Order-aware evaluation: reciprocal-rank relevance, DCG, aggregation,
//! significance testing and the random-user ablation.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{SessionId, TagId, UserId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `1 / rank*(t)` against the ground-truth order; zero when absent.
pub fn relevance<T: Scalar>(predicted_tag: TagId, ground_truth: &[TagId]) -> T {
    ground_truth
        .iter()
        .position(|&t| t == predicted_tag)
        .map_or_else(T::zero, |p| T::one() / T::from_count(p + 1))
}

/// `rel(t_1) + Σ_{i≥2} rel(t_i) / log2(i)`.
pub fn dcg<T: Scalar>(predicted: &[TagId], ground_truth: &[TagId]) -> T {
    let rank: HashMap<TagId, usize> = ground_truth.iter().enumerate().map(|(i, &t)| (t, i + 1)).collect();
    predicted
        .iter()
        .enumerate()
        .filter_map(|(i, t)| rank.get(t).map(|&r| (i + 1, r)))
        .map(|(pos, r)| {
            let rel = T::one() / T::from_count(r);
            if pos == 1 {
                rel
            } else {
                rel / T::from_count(pos).log2()
            }
        })
        .sum()
}

/// DCG of the first `k` predictions.
pub fn dcg_at_k<T: Scalar>(predicted: &[TagId], ground_truth: &[TagId], k: usize) -> T {
    dcg(&predicted[..k.min(predicted.len())], ground_truth)
}

/// `(per_image_mean, per_user_mean)`; the per-user mean weights every user
/// equally regardless of how many images they have.
pub fn aggregate<T: Scalar>(per_image_scores: &[(UserId, T)]) -> Result<(T, T)> {
    if per_image_scores.is_empty() {
        return Err(Error::invalid("no scores to aggregate"));
    }
    let per_image = per_image_scores.iter().map(|&(_, s)| s).sum::<T>() / T::from_count(per_image_scores.len());
    let mut by_user: BTreeMap<UserId, (T, usize)> = BTreeMap::new();
    for &(u, s) in per_image_scores {
        let e = by_user.entry(u).or_insert((T::zero(), 0));
        e.0 += s;
        e.1 += 1;
    }
    let per_user = by_user.values().map(|&(s, n)| s / T::from_count(n)).sum::<T>() / T::from_count(by_user.len());
    Ok((per_image, per_user))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TestKind {
    PairedTwoSided,
    WelchTwoSided,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTestResult<T> {
    pub t_statistic: T,
    pub p_value: T,
    pub n: usize,
    pub df: T,
    pub kind: TestKind,
    /// Set when the differences have zero variance but a non-zero mean.
    pub degenerate: bool,
}

/// Natural log of the gamma function (Lanczos, g = 7).
pub fn ln_gamma<T: Scalar>(x: T) -> T {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    let half = T::lit(0.5);
    if x < half {
        // Reflection.
        let pi = T::lit(std::f64::consts::PI);
        return (pi / (pi * x).sin()).ln() - ln_gamma(T::one() - x);
    }
    let x = x - T::one();
    let mut a = T::lit(COEF[0]);
    let t = x + T::lit(7.5);
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += T::lit(c) / (x + T::from_count(i));
    }
    T::lit(0.5 * (2.0 * std::f64::consts::PI).ln()) + (x + half) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_continued_fraction<T: Scalar>(x: T, a: T, b: T) -> T {
    let tiny = T::lit(1e-300).max(T::min_positive_value());
    let eps = T::epsilon();
    let one = T::one();
    let (qab, qap, qam) = (a + b, a + one, a - one);
    let mut c = one;
    let mut d = one - qab * x / qap;
    if d.abs() < tiny {
        d = tiny;
    }
    d = one / d;
    let mut h = d;
    for m in 1..=500usize {
        let m = T::from_count(m);
        let m2 = m + m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = one + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = one + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = one / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = one + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = one + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = one / d;
        let delta = d * c;
        h *= delta;
        if (delta - one).abs() <= eps {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn regularized_incomplete_beta<T: Scalar>(x: T, a: T, b: T) -> T {
    if x <= T::zero() {
        return T::zero();
    }
    if x >= T::one() {
        return T::one();
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (T::one() - x).ln();
    let front = ln_front.exp();
    if x < (a + T::one()) / (a + b + T::lit(2.0)) {
        front * beta_continued_fraction(x, a, b) / a
    } else {
        T::one() - front * beta_continued_fraction(T::one() - x, b, a) / b
    }
}

/// Two-sided tail probability `P(|T_df| ≥ |t|)`.
pub fn student_t_two_sided_p<T: Scalar>(t: T, df: T) -> T {
    if t.is_infinite() {
        return T::zero();
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(x, df / T::lit(2.0), T::lit(0.5))
}

fn mean_var<T: Scalar>(v: &[T]) -> (T, T) {
    let n = T::from_count(v.len());
    let mean = v.iter().copied().sum::<T>() / n;
    let ss = v.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>();
    (mean, ss / (n - T::one()))
}

/// Paired two-sided t-test on `a[i] − b[i]` with `n − 1` degrees of freedom.
pub fn paired_ttest<T: Scalar>(scores_a: &[T], scores_b: &[T]) -> Result<TTestResult<T>> {
    if scores_a.len() != scores_b.len() {
        return Err(Error::invalid("paired samples differ in length"));
    }
    let n = scores_a.len();
    if n < 2 {
        return Err(Error::invalid("paired t-test needs at least 2 samples"));
    }
    let diffs: Vec<T> = scores_a.iter().zip(scores_b).map(|(&a, &b)| a - b).collect();
    let (mean, var) = mean_var(&diffs);
    let df = T::from_count(n - 1);
    let kind = TestKind::PairedTwoSided;
    if var <= T::zero() {
        let zero_mean = mean == T::zero();
        return Ok(TTestResult {
            t_statistic: if zero_mean { T::zero() } else { mean.signum() * T::infinity() },
            p_value: if zero_mean { T::one() } else { T::zero() },
            n,
            df,
            kind,
            degenerate: !zero_mean,
        });
    }
    let t = mean / (var / T::from_count(n)).sqrt();
    Ok(TTestResult {
        t_statistic: t,
        p_value: student_t_two_sided_p(t, df),
        n,
        df,
        kind,
        degenerate: false,
    })
}

/// Unpaired two-sided Welch test with Welch–Satterthwaite degrees of freedom.
pub fn welch_ttest<T: Scalar>(scores_a: &[T], scores_b: &[T]) -> Result<TTestResult<T>> {
    if scores_a.len() < 2 || scores_b.len() < 2 {
        return Err(Error::invalid("Welch t-test needs at least 2 samples per group"));
    }
    let (ma, va) = mean_var(scores_a);
    let (mb, vb) = mean_var(scores_b);
    let (na, nb) = (T::from_count(scores_a.len()), T::from_count(scores_b.len()));
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    let n = scores_a.len() + scores_b.len();
    let kind = TestKind::WelchTwoSided;
    if se2 <= T::zero() {
        let same = ma == mb;
        return Ok(TTestResult {
            t_statistic: if same { T::zero() } else { (ma - mb).signum() * T::infinity() },
            p_value: if same { T::one() } else { T::zero() },
            n,
            df: na + nb - T::lit(2.0),
            kind,
            degenerate: !same,
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - T::one()) + sb * sb / (nb - T::one()));
    Ok(TTestResult {
        t_statistic: t,
        p_value: student_t_two_sided_p(t, df),
        n,
        df,
        kind,
        degenerate: false,
    })
}

/// For each query owner, a uniformly drawn user from `pool` other than the owner.
pub fn ablate_random_user(query_owners: &[UserId], pool: &[UserId], seed: u64) -> Result<Vec<UserId>> {
    if pool.len() < 2 {
        return Err(Error::invalid("random-user ablation needs at least 2 users"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(query_owners
        .iter()
        .map(|owner| {
            let others: Vec<UserId> = pool.iter().copied().filter(|u| u != owner).collect();
            others[rng.random_range(0..others.len())]
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore<T> {
    pub session: SessionId,
    pub user: UserId,
    pub dcg: T,
    pub dcg_at_k: T,
}

/// Aggregated scores of one method/configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport<T> {
    pub label: String,
    pub n_tags: String,
    pub k: usize,
    pub per_image: Vec<ImageScore<T>>,
    pub dcg_per_image: T,
    pub dcg_at_k_per_image: T,
    pub dcg_per_user: T,
    pub dcg_at_k_per_user: T,
}

impl<T: Scalar> EvalReport<T> {
    pub fn from_scores(label: impl Into<String>, n_tags: impl Into<String>, k: usize, per_image: Vec<ImageScore<T>>) -> Result<Self> {
        let full: Vec<(UserId, T)> = per_image.iter().map(|s| (s.user, s.dcg)).collect();
        let top: Vec<(UserId, T)> = per_image.iter().map(|s| (s.user, s.dcg_at_k)).collect();
        let (dcg_per_image, dcg_per_user) = aggregate(&full)?;
        let (dcg_at_k_per_image, dcg_at_k_per_user) = aggregate(&top)?;
        Ok(EvalReport {
            label: label.into(),
            n_tags: n_tags.into(),
            k,
            per_image,
            dcg_per_image,
            dcg_at_k_per_image,
            dcg_per_user,
            dcg_at_k_per_user,
        })
    }

    pub fn dcg_at_k_scores(&self) -> Vec<T> {
        self.per_image.iter().map(|s| s.dcg_at_k).collect()
    }

    pub fn dcg_scores(&self) -> Vec<T> {
        self.per_image.iter().map(|s| s.dcg).collect()
    }
}
