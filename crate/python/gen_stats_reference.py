"""Reference values for the statistics tests, computed with scipy and statsmodels.

Writes crates/core/tests/fixtures/stats_reference.json.
"""

import json
import pathlib

import numpy as np
import pandas as pd
from scipy import stats
from statsmodels.stats.anova import AnovaRM

OUT = pathlib.Path(__file__).resolve().parents[1] / "crates/core/tests/fixtures/stats_reference.json"
CASES = 20


def draw(rng, n):
    kind = rng.integers(4)
    if kind == 0:
        return rng.normal(0.8, 0.05, n)
    if kind == 1:
        return rng.exponential(1.0, n)
    if kind == 2:
        return rng.uniform(0, 1, n)
    return np.round(rng.normal(0.5, 0.2, n), 2)


def shapiro_cases(rng):
    out = []
    for i in range(CASES):
        n = int(rng.integers(3, 51)) if i > 2 else [3, 10, 11][i]
        x = draw(rng, n)
        w, p = stats.shapiro(x)
        out.append({"x": x.tolist(), "w": float(w), "p": float(p)})
    return out


def score_matrix(rng, k, n):
    folds = rng.normal(0.0, 0.03, n)
    offsets = rng.normal(0.0, 0.02, k)
    return 0.8 + offsets[:, None] + folds[None, :] + rng.normal(0, 0.02, (k, n))


def anova_cases(rng):
    out = []
    hand = np.array([[0.80, 0.85, 0.78, 0.90], [0.70, 0.76, 0.69, 0.83], [0.82, 0.80, 0.79, 0.91]])
    mats = [hand] + [score_matrix(rng, int(rng.integers(3, 7)), int(rng.integers(3, 11))) for _ in range(CASES - 1)]
    for m in mats:
        k, n = m.shape
        df = pd.DataFrame(
            {"score": m.ravel(), "model": np.repeat(np.arange(k), n), "fold": np.tile(np.arange(n), k)}
        )
        res = AnovaRM(df, "score", "fold", within=["model"]).fit().anova_table
        out.append(
            {"groups": m.tolist(), "f": float(res["F Value"].iloc[0]), "p": float(res["Pr > F"].iloc[0])}
        )
    return out


def tukey_cases(rng):
    out = []
    hand = np.array([[0.80, 0.85, 0.78, 0.90, 0.84], [0.70, 0.76, 0.69, 0.83, 0.72], [0.82, 0.80, 0.79, 0.91, 0.86]])
    mats = [hand] + [score_matrix(rng, int(rng.integers(2, 7)), int(rng.integers(3, 11))) for _ in range(CASES - 1)]
    for m in mats:
        k, n = m.shape
        resid = m - m.mean(axis=1, keepdims=True) - m.mean(axis=0, keepdims=True) + m.mean()
        df_err = (k - 1) * (n - 1)
        ms_err = (resid**2).sum() / df_err
        se = np.sqrt(ms_err / n)
        pairs = []
        for i in range(k):
            for j in range(i + 1, k):
                q = abs(m[i].mean() - m[j].mean()) / se
                pairs.append({"q": float(q), "p": float(stats.studentized_range.sf(q, k, df_err))})
        out.append({"groups": m.tolist(), "pairs": pairs})
    return out


def two_sample_cases(rng, fn):
    out = []
    for _ in range(CASES):
        nx, ny = int(rng.integers(2, 16)), int(rng.integers(2, 16))
        x = draw(rng, nx)
        y = draw(rng, ny) * float(rng.uniform(0.5, 3.0))
        out.append({"x": x.tolist(), "y": y.tolist(), **fn(x, y)})
    return out


def bartlett_ref(x, y):
    t, p = stats.bartlett(x, y)
    return {"statistic": float(t), "p": float(p)}


def pooled_ref(x, y):
    r = stats.ttest_ind(x, y, equal_var=True)
    return {"statistic": float(r.statistic), "p": float(r.pvalue), "df": float(r.df)}


def welch_ref(x, y):
    r = stats.ttest_ind(x, y, equal_var=False)
    return {"statistic": float(r.statistic), "p": float(r.pvalue), "df": float(r.df)}


def wilcoxon_cases(rng):
    out = []
    for _ in range(CASES):
        nx, ny = int(rng.integers(7, 31)), int(rng.integers(7, 31))
        x = np.round(rng.normal(0.8, 0.05, nx), 2)
        y = np.round(rng.normal(0.8 + rng.uniform(-0.05, 0.05), 0.05, ny), 2)
        r = stats.mannwhitneyu(x, y, alternative="two-sided", method="asymptotic", use_continuity=True)
        u = float(r.statistic)
        out.append({"x": x.tolist(), "y": y.tolist(), "u": u, "p": float(r.pvalue)})
    return out


def main():
    rng = np.random.default_rng(20240607)
    data = {
        "shapiro": shapiro_cases(rng),
        "anova_rm": anova_cases(rng),
        "tukey": tukey_cases(rng),
        "bartlett": two_sample_cases(rng, bartlett_ref),
        "t_pooled": two_sample_cases(rng, pooled_ref),
        "t_welch": two_sample_cases(rng, welch_ref),
        "wilcoxon_normal": wilcoxon_cases(rng),
    }
    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text(json.dumps(data, indent=1))
    print(f"wrote {OUT}")


if __name__ == "__main__":
    main()
