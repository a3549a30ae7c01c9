use crate::error::{Error, Result};

use super::dist::{chi2_sf, f_sf, normal_quantile, normal_sf, studentized_range_sf, t_two_sided};
use super::{mean, variance, SampleVector, TestResult};

/// Largest combined sample size for which the rank-sum p-value is exact.
pub const EXACT_WILCOXON_MAX_N: usize = 12;

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci)
}

/// Shapiro-Wilk W with Royston's (1995, AS R94) coefficients and p-value.
///
/// A constant sample returns a degenerate result without a p-value.
pub fn shapiro_wilk(x: &SampleVector) -> Result<TestResult> {
    const NAME: &str = "shapiro-wilk";
    let n = x.len();
    if !(3..=50).contains(&n) {
        return Err(Error::Stats(format!("shapiro-wilk needs 3..=50 values, got {n}")));
    }
    let mut v = x.values.clone();
    v.sort_by(f64::total_cmp);
    if v[n - 1] - v[0] <= 0.0 {
        return Ok(TestResult::undefined(NAME, f64::NAN, "zero variance"));
    }

    let half = n / 2;
    let an = n as f64;
    let mut a = vec![0.0; half];
    if n == 3 {
        a[0] = std::f64::consts::FRAC_1_SQRT_2;
    } else {
        const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056];
        const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
        let m: Vec<f64> = (1..=half).map(|i| normal_quantile((i as f64 - 0.375) / (an + 0.25))).collect();
        let summ2 = 2.0 * m.iter().map(|v| v * v).sum::<f64>();
        let ssumm2 = summ2.sqrt();
        let rsn = 1.0 / an.sqrt();
        let a1 = poly(&C1, rsn) - m[0] / ssumm2;
        a[0] = a1;
        let (first, fac) = if n > 5 {
            let a2 = -m[1] / ssumm2 + poly(&C2, rsn);
            a[1] = a2;
            let fac = ((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1]) / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2)).sqrt();
            (2, fac)
        } else {
            let fac = ((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a1 * a1)).sqrt();
            (1, fac)
        };
        for i in first..half {
            a[i] = -m[i] / fac;
        }
    }

    let mu = mean(&v);
    let ss: f64 = v.iter().map(|x| (x - mu) * (x - mu)).sum();
    let num: f64 = (0..half).map(|i| a[i] * (v[n - 1 - i] - v[i])).sum();
    let w = (num * num / ss).min(1.0);

    let p = if n == 3 {
        let pi6 = 6.0 / std::f64::consts::PI;
        let stqr = std::f64::consts::PI / 3.0;
        (pi6 * (w.sqrt().asin() - stqr)).max(0.0)
    } else {
        let y = (1.0 - w).ln();
        let (z, m, s) = if n <= 11 {
            let gamma = poly(&[-2.273, 0.459], an);
            if y >= gamma {
                return Ok(TestResult::new(NAME, w, 1e-99, vec![]));
            }
            let m = poly(&[0.544, -0.39978, 0.025054, -6.714e-4], an);
            let s = poly(&[1.3822, -0.77857, 0.062767, -0.0020322], an).exp();
            (-(gamma - y).ln(), m, s)
        } else {
            let ln_n = an.ln();
            let m = poly(&[-1.5861, -0.31082, -0.083751, 0.0038915], ln_n);
            let s = poly(&[-0.4803, -0.082676, 0.0030302], ln_n).exp();
            (y, m, s)
        };
        normal_sf((z - m) / s)
    };
    Ok(TestResult::new(NAME, w, p, vec![]))
}

/// Decomposition of a models x folds score matrix.
pub(crate) struct RmDecomposition {
    pub k: usize,
    pub n: usize,
    pub means: Vec<f64>,
    pub ss_models: f64,
    pub ss_error: f64,
}

impl RmDecomposition {
    pub fn df_models(&self) -> f64 {
        (self.k - 1) as f64
    }

    pub fn df_error(&self) -> f64 {
        ((self.k - 1) * (self.n - 1)) as f64
    }

    pub fn ms_error(&self) -> f64 {
        self.ss_error / self.df_error()
    }
}

pub(crate) fn decompose(groups: &[SampleVector], min_groups: usize) -> Result<RmDecomposition> {
    let k = groups.len();
    if k < min_groups {
        return Err(Error::Stats(format!("need at least {min_groups} groups, got {k}")));
    }
    let n = groups[0].len();
    if let Some(g) = groups.iter().find(|g| g.len() != n) {
        return Err(Error::Stats(format!(
            "group {} has {} folds, expected {n}",
            g.label,
            g.len()
        )));
    }
    if n < 2 {
        return Err(Error::Stats(format!("need at least 2 folds per group, got {n}")));
    }
    let means: Vec<f64> = groups.iter().map(|g| g.mean()).collect();
    let grand = mean(&means);
    let fold_means: Vec<f64> = (0..n).map(|i| groups.iter().map(|g| g.values[i]).sum::<f64>() / k as f64).collect();
    let ss_models = if means.iter().all(|m| *m == means[0]) {
        0.0
    } else {
        n as f64 * means.iter().map(|m| (m - grand) * (m - grand)).sum::<f64>()
    };
    let mut ss_error = 0.0;
    for (g, m) in groups.iter().zip(&means) {
        for (x, fm) in g.values.iter().zip(&fold_means) {
            let e = x - m - fm + grand;
            ss_error += e * e;
        }
    }
    Ok(RmDecomposition {
        k,
        n,
        means,
        ss_models,
        ss_error,
    })
}

/// One-way repeated-measures ANOVA over models evaluated on the same folds.
///
/// No sphericity correction is applied.
pub fn anova_rm(groups: &[SampleVector]) -> Result<TestResult> {
    const NAME: &str = "anova-rm";
    let d = decompose(groups, 3)?;
    let df = vec![d.df_models(), d.df_error()];
    if d.ss_models == 0.0 {
        return Ok(TestResult::new(NAME, 0.0, 1.0, df));
    }
    if d.ss_error <= 0.0 {
        return Ok(TestResult::new(NAME, f64::INFINITY, 0.0, df).flagged("zero residual variance"));
    }
    let f = (d.ss_models / d.df_models()) / d.ms_error();
    let p = f_sf(f, d.df_models(), d.df_error());
    Ok(TestResult::new(NAME, f, p, df).note("sphericity not corrected"))
}

/// Tukey HSD for every pair `(i, j)` with `i < j`, in lexicographic order.
///
/// The error term is the residual mean square of the repeated-measures
/// ANOVA, so `q = |mean_i - mean_j| / sqrt(MS_error / n)`.
pub fn tukey_hsd(groups: &[SampleVector]) -> Result<Vec<TestResult>> {
    const NAME: &str = "tukey-hsd";
    let d = decompose(groups, 2)?;
    let df_err = d.df_error();
    let se = (d.ms_error().max(0.0) / d.n as f64).sqrt();
    let mut out = Vec::with_capacity(d.k * (d.k - 1) / 2);
    for i in 0..d.k {
        for j in i + 1..d.k {
            let diff = (d.means[i] - d.means[j]).abs();
            let r = if diff == 0.0 {
                TestResult::new(NAME, 0.0, 1.0, vec![d.k as f64, df_err])
            } else if se == 0.0 {
                TestResult::new(NAME, f64::INFINITY, 0.0, vec![d.k as f64, df_err]).flagged("zero residual variance")
            } else {
                let q = diff / se;
                TestResult::new(NAME, q, studentized_range_sf(q, d.k, df_err), vec![d.k as f64, df_err])
            };
            out.push(r.note(format!("{} vs {}", groups[i].label, groups[j].label)));
        }
    }
    Ok(out)
}

/// Bartlett's test for equal variances.
pub fn bartlett(x: &SampleVector, y: &SampleVector) -> Result<TestResult> {
    let groups = [x, y];
    if let Some(g) = groups.iter().find(|g| g.len() < 2) {
        return Err(Error::Stats(format!("bartlett needs 2 values in {}, got {}", g.label, g.len())));
    }
    let vars: Vec<f64> = groups.iter().map(|g| variance(&g.values)).collect();
    if let Some(i) = vars.iter().position(|v| *v <= 0.0) {
        return Err(Error::Stats(format!("bartlett: {} has zero variance", groups[i].label)));
    }
    let k = groups.len() as f64;
    let ns: Vec<f64> = groups.iter().map(|g| g.len() as f64).collect();
    let total: f64 = ns.iter().sum();
    let pooled = ns.iter().zip(&vars).map(|(n, v)| (n - 1.0) * v).sum::<f64>() / (total - k);
    let num = (total - k) * pooled.ln() - ns.iter().zip(&vars).map(|(n, v)| (n - 1.0) * v.ln()).sum::<f64>();
    let den = 1.0 + (ns.iter().map(|n| 1.0 / (n - 1.0)).sum::<f64>() - 1.0 / (total - k)) / (3.0 * (k - 1.0));
    let t = (num / den).max(0.0);
    Ok(TestResult::new("bartlett", t, chi2_sf(t, k - 1.0), vec![k - 1.0]))
}

/// Two-sided independent-samples t-test, pooled or Welch.
pub fn t_test_independent(x: &SampleVector, y: &SampleVector, equal_variance: bool) -> Result<TestResult> {
    let name = if equal_variance { "t-test" } else { "welch" };
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::Stats(format!(
            "{name} needs 2 values per sample, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    let (vx, vy) = (variance(&x.values), variance(&y.values));
    let diff = x.mean() - y.mean();
    let (se2, df) = if equal_variance {
        let pooled = ((nx - 1.0) * vx + (ny - 1.0) * vy) / (nx + ny - 2.0);
        (pooled * (1.0 / nx + 1.0 / ny), nx + ny - 2.0)
    } else {
        let (a, b) = (vx / nx, vy / ny);
        let s = a + b;
        let df = if s > 0.0 { s * s / (a * a / (nx - 1.0) + b * b / (ny - 1.0)) } else { nx + ny - 2.0 };
        (s, df)
    };
    if se2 <= 0.0 {
        let r = if diff == 0.0 {
            TestResult::new(name, 0.0, 1.0, vec![df])
        } else {
            TestResult::new(name, diff.signum() * f64::INFINITY, 0.0, vec![df])
        };
        return Ok(r.flagged("both samples constant"));
    }
    let t = diff / se2.sqrt();
    Ok(TestResult::new(name, t, t_two_sided(t, df), vec![df]))
}

/// Mid-ranks (1-based) of `values`, plus the tie sizes.
fn mid_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        if j > i {
            ties.push(j - i + 1);
        }
        i = j + 1;
    }
    (ranks, ties)
}

/// Exact two-sided rank-sum p-value: the share of all `C(n_x + n_y, n_x)`
/// relabelings whose rank sum lies at least as far from its mean as the
/// observed one. Ties use mid-ranks.
pub fn wilcoxon_exact_p(x: &[f64], y: &[f64]) -> f64 {
    let nx = x.len();
    let all: Vec<f64> = x.iter().chain(y).copied().collect();
    let n = all.len();
    let (ranks, _) = mid_ranks(&all);
    // Doubled mid-ranks are integers.
    let r2: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let observed: usize = r2[..nx].iter().sum();
    let centre2 = nx * (n + 1);
    let max_sum: usize = r2.iter().sum();
    // counts[j][s]: subsets of size j with doubled rank sum s
    let mut counts = vec![vec![0u64; max_sum + 1]; nx + 1];
    counts[0][0] = 1;
    for &r in &r2 {
        for j in (1..=nx).rev() {
            for s in (r..=max_sum).rev() {
                let c = counts[j - 1][s - r];
                if c > 0 {
                    counts[j][s] += c;
                }
            }
        }
    }
    let dist = |s: usize| s.abs_diff(centre2);
    let threshold = dist(observed);
    let total: u64 = counts[nx].iter().sum();
    let extreme: u64 = counts[nx]
        .iter()
        .enumerate()
        .filter(|(s, _)| dist(*s) >= threshold)
        .map(|(_, c)| c)
        .sum();
    extreme as f64 / total as f64
}

/// Wilcoxon rank-sum test. The statistic is the rank sum of `x`.
///
/// Exact when `n_x + n_y <= 12`, otherwise the normal approximation with
/// tie and continuity corrections.
pub fn wilcoxon_rank_sum(x: &SampleVector, y: &SampleVector) -> Result<TestResult> {
    const NAME: &str = "wilcoxon-rank-sum";
    if x.is_empty() || y.is_empty() {
        return Err(Error::Stats("wilcoxon rank-sum needs at least one value per sample".into()));
    }
    let all: Vec<f64> = x.values.iter().chain(&y.values).copied().collect();
    let (nx, ny, n) = (x.len() as f64, y.len() as f64, all.len() as f64);
    let (ranks, ties) = mid_ranks(&all);
    let w: f64 = ranks[..x.len()].iter().sum();
    let u = w - nx * (nx + 1.0) / 2.0;
    if all.len() <= EXACT_WILCOXON_MAX_N {
        let p = wilcoxon_exact_p(&x.values, &y.values);
        return Ok(TestResult::new(NAME, w, p, vec![]).note(format!("exact; U = {u}")));
    }
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum();
    let var = nx * ny / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return Ok(TestResult::new(NAME, w, 1.0, vec![]).flagged("all values tied"));
    }
    let dev = ((u - nx * ny / 2.0).abs() - 0.5).max(0.0);
    let z = dev / var.sqrt();
    let p = (2.0 * normal_sf(z)).min(1.0);
    Ok(TestResult::new(NAME, w, p, vec![]).note(format!("normal approximation; U = {u}; z = {z}")))
}
