"""Pass/fail rules applied to Monte Carlo reports and orthogonality audits."""

from dataclasses import dataclass

import numpy as np


@dataclass
class Verdict:
    name: str
    passed: bool
    detail: str

    def line(self):
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def _fmt(v):
    return "(" + ", ".join(f"{x:.4g}" for x in v) + ")"


def bias_reduction(report, N=2000):
    """Per coordinate, median |E_N g(theta0) - E g(theta0)| of the orthogonal
    pipeline below the naive pipeline's median |E_N m(theta0) - E m(theta0)|."""
    rs = report.by_n(N)
    orth = np.median(np.abs([r["bias_orth"] for r in rs]), axis=0)
    naive = np.median(np.abs([r["bias_naive"] for r in rs]), axis=0)
    lit_g = np.median(np.abs([r["g_theta0"] for r in rs]), axis=0)
    lit_m = np.median(np.abs([r["m_theta0"] for r in rs]), axis=0)
    ok = bool(np.all(orth < naive))
    detail = (f"{len(rs)} reps, median |bias| orth {_fmt(orth)} vs naive {_fmt(naive)}; "
              f"raw median |E_N g| {_fmt(lit_g)} vs |E_N m| {_fmt(lit_m)}")
    return Verdict("bias reduction", ok, detail)


def raw_moment_shrinkage(report, N=2000):
    """Per coordinate, median |E_N g(theta0)| below median |E_N m(theta0)|.

    Compares levels rather than errors, so a slack moment biased toward zero
    favours the naive pipeline.  Reported next to ``bias_reduction``.
    """
    rs = report.by_n(N)
    g = np.median(np.abs([r["g_theta0"] for r in rs]), axis=0)
    m = np.median(np.abs([r["m_theta0"] for r in rs]), axis=0)
    pop = np.asarray(rs[0]["pop_theta0"])
    detail = (f"{len(rs)} reps, median |E_N g| {_fmt(g)} vs |E_N m| {_fmt(m)}, "
              f"population value {_fmt(pop)}")
    return Verdict("raw moment level", bool(np.all(g < m)), detail)


def rate_shrinkage(report, ratio=2.0):
    Ns = sorted({r["N"] for r in report.records})
    med = [float(np.median([r["hausdorff"] for r in report.by_n(N)])) for N in Ns]
    mono = all(b <= a for a, b in zip(med, med[1:]))
    r = med[0] / med[-1] if med[-1] > 0 else float("inf")
    ok = mono and r >= ratio
    detail = "median d_H " + ", ".join(f"N={N}: {m:.4g}" for N, m in zip(Ns, med)) + f"; ratio {r:.3g}"
    return Verdict("rate shrinkage", ok, detail)


def containment(report, level=0.95):
    Ns = sorted({r["N"] for r in report.records})
    rates = [float(np.mean([r["contains_theta0"] for r in report.by_n(N)])) for N in Ns]
    ok = all(x >= level for x in rates)
    detail = ", ".join(f"N={N}: {x:.3f}" for N, x in zip(Ns, rates))
    return Verdict("containment of theta0", ok, detail)


def coverage(report, N=2000, lo=0.85, hi=0.97):
    rs = [r for r in report.by_n(N) if "covered" in r]
    if not rs:
        return Verdict("subsampling coverage", False, "no coverage records")
    c = float(np.mean([r["covered"] for r in rs]))
    fb = sum(r["subsample_fallback"] for r in rs)
    detail = (f"{len(rs)} reps, coverage {c:.3f} (target [{lo}, {hi}]), "
              f"median c_tau {np.median([r['c_tau'] for r in rs]):.4g}, fallbacks {fb}")
    return Verdict("subsampling coverage", lo <= c <= hi, detail)


def orthogonality(audit):
    parts = []
    ok = audit["pass"]
    for fam, d in audit["families"].items():
        parts.append(f"{fam}: orth {'ok' if d['orthogonal_pass'] else 'FAIL'} "
                     f"(|orth|/|naive| {d['ratio']:.3f}), flipped "
                     f"{'passes (bad)' if d['flipped_pass'] else 'fails (good)'}")
    return Verdict("Neyman orthogonality", ok, "; ".join(parts))
