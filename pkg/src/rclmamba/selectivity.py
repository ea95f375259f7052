"""Selectivity instrumentation for scan traces.

Each timestep's hidden state is scored by how much of it is explained by
the fresh input contribution versus the carried-over previous state:

    r_prev = |cos(h_t, h_{t-1})|      (h_{-1} is the zero initial state)
    r_in   = |cos(h_t, B_t x_t)|
    s_t    = r_in / (r_in + r_prev)

Cosines against a zero vector are 0; if both correlations vanish the score
is 0.5 (no evidence either way). Steps with s > 0.7 are state-maintaining
(SM), s < 0.3 state-ignoring (SI), everything else non-robust (NR); the
boundaries themselves fall into NR.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Union

import numpy as np
from scipy.special import stdtr

SM_THRESHOLD = 0.7
SI_THRESHOLD = 0.3
ENTROPY_BINS = 20

LABELS = ("SM", "SI", "NR")


def _abs_cos(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return abs(float(a @ b) / (na * nb))


def memory_scores(hidden: np.ndarray, input_contrib: np.ndarray) -> np.ndarray:
    """Per-timestep scores s_t in [0, 1] for one sequence.

    hidden, input_contrib: [T, d_inner, d_state].
    """
    hidden = np.asarray(hidden, dtype=np.float64)
    ic = np.asarray(input_contrib, dtype=np.float64)
    if hidden.shape != ic.shape or hidden.ndim != 3:
        raise ValueError(
            f"expected matching [T, d, n] arrays, got {hidden.shape} and {ic.shape}"
        )
    t_len = hidden.shape[0]
    flat_h = hidden.reshape(t_len, -1)
    flat_ic = ic.reshape(t_len, -1)
    prev = np.concatenate([np.zeros((1, flat_h.shape[1])), flat_h[:-1]], axis=0)
    scores = np.empty(t_len, dtype=np.float64)
    for t in range(t_len):
        r_prev = _abs_cos(flat_h[t], prev[t])
        r_in = _abs_cos(flat_h[t], flat_ic[t])
        denom = r_in + r_prev
        scores[t] = 0.5 if denom == 0.0 else r_in / denom
    return scores


def classify_scores(scores: np.ndarray) -> np.ndarray:
    """Map scores to labels; returns an array of 'SM'/'SI'/'NR' strings."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.full(scores.shape, "NR", dtype="<U2")
    labels[scores > SM_THRESHOLD] = "SM"
    labels[scores < SI_THRESHOLD] = "SI"
    return labels


def focus_ratio(n_sm: int, n_si: int, n_nr: int) -> float:
    """Fraction of steps with a decisive memory posture."""
    total = n_sm + n_si + n_nr
    if total <= 0:
        raise ValueError("focus ratio needs at least one classified step")
    if min(n_sm, n_si, n_nr) < 0:
        raise ValueError("negative class counts")
    return (n_sm + n_si) / total


def memory_entropy(scores: np.ndarray) -> tuple[float, np.ndarray]:
    """Shannon entropy (nats) of the score distribution over 20 equal-width
    bins spanning [0, 1]. Returns (entropy, bin_counts)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise ValueError("memory entropy needs at least one score")
    counts, _ = np.histogram(scores, bins=ENTROPY_BINS, range=(0.0, 1.0))
    p = counts / counts.sum()
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum()), counts


def pearson(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Correlation coefficient and two-sided p-value from the t distribution
    with n-2 degrees of freedom."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    n = x.size
    if n < 3:
        raise ValueError(f"need at least 3 points, got {n}")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0.0:
        raise ValueError("zero variance input")
    r = float((xc * yc).sum() / denom)
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * np.sqrt((n - 2) / (1.0 - r * r))
    p = 2.0 * float(stdtr(n - 2, -abs(t)))
    return r, p


def similarity_heatmap(hidden: np.ndarray) -> np.ndarray:
    """T x T matrix of cosine similarities between flattened hidden states.
    Rows with zero norm contribute zeros."""
    hidden = np.asarray(hidden, dtype=np.float64)
    if hidden.ndim != 3:
        raise ValueError(f"expected [T, d, n], got shape {hidden.shape}")
    flat = hidden.reshape(hidden.shape[0], -1)
    norms = np.linalg.norm(flat, axis=1)
    safe = np.where(norms == 0.0, 1.0, norms)
    unit = flat / safe[:, None]
    unit[norms == 0.0] = 0.0
    return unit @ unit.T


@dataclass
class SelectivityReport:
    n_sm: int
    n_si: int
    n_nr: int
    fr: float
    me: float
    bins: list[int]

    @classmethod
    def from_scores(cls, scores: np.ndarray) -> "SelectivityReport":
        labels = classify_scores(scores)
        n_sm = int((labels == "SM").sum())
        n_si = int((labels == "SI").sum())
        n_nr = int((labels == "NR").sum())
        me, counts = memory_entropy(scores)
        return cls(
            n_sm=n_sm,
            n_si=n_si,
            n_nr=n_nr,
            fr=focus_ratio(n_sm, n_si, n_nr),
            me=me,
            bins=[int(c) for c in counts],
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def emit_traces(
    out_dir: Union[str, Path],
    scores: np.ndarray,
    delta: np.ndarray,
    hidden: np.ndarray,
    report: SelectivityReport,
) -> dict[str, Path]:
    """Write the probe artifacts for one sequence.

    delta.csv:   t,delta_mean         (mean step size over channels)
    memory.csv:  t,score,class
    heatmap.csv: T rows of T comma-separated cosines, no header
    report.json: class counts, focus ratio, memory entropy, bin counts

    Floats are written with repr() so parsing them back is exact.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scores = np.asarray(scores, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    labels = classify_scores(scores)

    delta_path = out_dir / "delta.csv"
    with open(delta_path, "w") as fh:
        fh.write("t,delta_mean\n")
        means = delta.mean(axis=-1)
        for t in range(means.shape[0]):
            fh.write(f"{t},{float(means[t])!r}\n")

    memory_path = out_dir / "memory.csv"
    with open(memory_path, "w") as fh:
        fh.write("t,score,class\n")
        for t in range(scores.shape[0]):
            fh.write(f"{t},{float(scores[t])!r},{labels[t]}\n")

    heat = similarity_heatmap(hidden)
    heatmap_path = out_dir / "heatmap.csv"
    with open(heatmap_path, "w") as fh:
        for row in heat:
            fh.write(",".join(repr(v) for v in row.tolist()) + "\n")

    report_path = out_dir / "report.json"
    report_path.write_text(report.to_json() + "\n")

    return {
        "delta": delta_path,
        "memory": memory_path,
        "heatmap": heatmap_path,
        "report": report_path,
    }
