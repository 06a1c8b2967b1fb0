"""Does the embedding track typed text? Edit distance vs. score correlation, plus plots."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import NUM_FEATURES, FeatureSequence
from .evaluation import embed_trials, score_trials, select_auth_trials
from .net import as_embedder


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Unit-cost edit distance between two symbol sequences."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("need two equal-length 1-D samples with at least 2 points")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx == 0 or syy == 0:
        raise ValueError("correlation undefined for a constant sample")
    r = float(xc @ yc) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


def linear_fit(x, y) -> tuple[float, float]:
    """Ordinary least squares of y on x: (slope, intercept)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xc = x - x.mean()
    sxx = float(xc @ xc)
    if sxx == 0:
        raise ValueError("regression undefined for a constant regressor")
    slope = float(xc @ (y - y.mean())) / sxx
    return slope, float(y.mean() - slope * x.mean())


@dataclass
class TextScorePair:
    levenshtein: int
    embed_distance: float
    genuine: bool


@dataclass
class CorrelationReport:
    p: float
    slope: float
    intercept: float
    n: int
    pairs: list[TextScorePair]
    p_genuine: float | None
    p_impostor: float | None
    plot_indices: np.ndarray  # one genuine + one impostor pair per subject

    def pairs_csv(self) -> str:
        lines = ["levenshtein,embed_distance,genuine"]
        lines += [f"{t.levenshtein},{t.embed_distance!r},{int(t.genuine)}" for t in self.pairs]
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        def fmt(v):
            return "undefined" if v is None else repr(v)

        return (
            f"pairs={self.n}\npearson={self.p!r}\n"
            f"pearson_genuine={fmt(self.p_genuine)}\npearson_impostor={fmt(self.p_impostor)}\n"
            f"slope={self.slope!r}\nintercept={self.intercept!r}\n"
        )


def _maybe_pearson(x, y) -> float | None:
    try:
        return pearson(x, y)
    except ValueError:
        return None


def text_dependency_report(model, test_set: Sequence[FeatureSequence], M: int, k: int, rng, G: int = 1) -> CorrelationReport:
    """Edit distance of the compared keycode strings (first M keys) vs. their score.

    Covers every genuine and impostor comparison of the authentication
    protocol. Correlation and fit use all pairs pooled.
    """
    trials = select_auth_trials(test_set, G, k, rng)
    gal, qry = embed_trials(model, trials, M)
    scores = score_trials(trials, gal, qry)
    keys = [[s.keycodes[:M] for s in g] for g in trials.gallery]
    qkeys = [[s.keycodes[:M] for s in q] for q in trials.queries]

    def text_dist(i: int, query_keys) -> float:
        return float(np.mean([levenshtein(g, query_keys) for g in keys[i]]))

    pairs: list[TextScorePair] = []
    gen_idx, imp_idx = [], []
    n_sub = len(trials.subjects)
    for i in range(n_sub):
        gi = []
        for q, score in zip(qkeys[i], scores.genuine[i]):
            gi.append(len(pairs))
            pairs.append(TextScorePair(text_dist(i, q), float(score), True))
        ii = []
        others = [j for j in range(n_sub) if j != i]
        for j, score in zip(others, scores.impostor[i]):
            ii.append(len(pairs))
            pairs.append(TextScorePair(text_dist(i, qkeys[j][trials.impostor_query[j]]), float(score), False))
        gen_idx.append(gi)
        imp_idx.append(ii)
    for pr in pairs:
        if float(pr.levenshtein).is_integer():
            pr.levenshtein = int(pr.levenshtein)

    dl = np.array([p.levenshtein for p in pairs], dtype=float)
    de = np.array([p.embed_distance for p in pairs])
    gen = np.array([p.genuine for p in pairs])
    p = pearson(dl, de)
    slope, intercept = linear_fit(dl, de)
    plot_idx = np.array([[rng.choice(g), rng.choice(m)] for g, m in zip(gen_idx, imp_idx)]).ravel()
    return CorrelationReport(
        p, slope, intercept, len(pairs), pairs,
        _maybe_pearson(dl[gen], de[gen]), _maybe_pearson(dl[~gen], de[~gen]), plot_idx,
    )


# --------------------------------------------------------------------------
# control embedders


def text_hash_embedder(dim: int = 8192, n: int = 4):
    """Embedding built only from the typed keys: hashed keycode n-gram counts."""

    def embed(seqs: Sequence[FeatureSequence], M: int) -> np.ndarray:
        out = np.zeros((len(seqs), dim))
        for r, s in enumerate(seqs):
            keys = s.keycodes[:M]
            for i in range(len(keys) - n + 1):
                h = 0
                for k in keys[i : i + n]:
                    h = (h * 257 + k + 1) % 2_147_483_647
                out[r, (h * 2_654_435_761) % 2_147_483_647 % dim] += 1.0
        return out

    return embed


def timing_only(model):
    """Wrap an embedder so it never sees keycodes (key column zeroed)."""
    inner = as_embedder(model)

    def embed(seqs: Sequence[FeatureSequence], M: int) -> np.ndarray:
        stripped = []
        for s in seqs:
            values = s.values.copy()
            values[:, NUM_FEATURES - 1] = 0.0
            stripped.append(FeatureSequence(s.subject_id, s.session_id, values, values, s.mask, (), s.attributes))
        return inner(stripped, M)

    return embed


def oracle_embedder(dim: int | None = None):
    """One-hot subject embedding: genuine distance 0, impostor distance sqrt(2)."""
    index: dict[str, int] = {}

    def embed(seqs: Sequence[FeatureSequence], M: int) -> np.ndarray:
        for s in seqs:
            index.setdefault(s.subject_id, len(index))
        width = dim or max(len(index), 1)
        out = np.zeros((len(seqs), max(width, len(index))))
        for r, s in enumerate(seqs):
            out[r, index[s.subject_id]] = 1.0
        return out

    return embed


def constant_embedder(dim: int = 128):
    def embed(seqs: Sequence[FeatureSequence], M: int) -> np.ndarray:
        return np.ones((len(seqs), dim))

    return embed


# --------------------------------------------------------------------------
# plots

_W, _H = 480, 360
_PAD = 56
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def _fmt(v: float) -> str:
    return f"{v:.3f}"


def emit_plot(
    points,
    kind: str,
    path,
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    groups=None,
    metadata: dict | None = None,
) -> dict:
    """Write a standalone SVG; returns the metadata embedded in its comment block.

    ``kind`` is ``roc`` (FAR vs FRR, unit axes), ``scatter`` (with an OLS
    regression overlay) or ``line``. ``groups`` colors scatter points.
    """
    if kind not in ("roc", "scatter", "line"):
        raise ValueError(f"unknown plot kind {kind!r}")
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) == 0:
        raise ValueError("points must be a nonempty N x 2 array")
    finite = np.isfinite(pts).all(axis=1)
    pts = pts[finite]
    if len(pts) == 0:
        raise ValueError("no finite points to plot")
    meta = {"kind": kind, "points": str(len(pts))}
    if kind == "roc":
        x0, x1, y0, y1 = 0.0, 1.0, 0.0, 1.0
    else:
        x0, x1 = float(pts[:, 0].min()), float(pts[:, 0].max())
        y0, y1 = float(pts[:, 1].min()), float(pts[:, 1].max())
        if x1 == x0:
            x0, x1 = x0 - 0.5, x1 + 0.5
        if y1 == y0:
            y0, y1 = y0 - 0.5, y1 + 0.5

    def sx(v):
        return _PAD + (v - x0) / (x1 - x0) * (_W - 2 * _PAD)

    def sy(v):
        return _H - _PAD - (v - y0) / (y1 - y0) * (_H - 2 * _PAD)

    body = []
    if kind == "scatter":
        g = np.zeros(len(pts), dtype=int) if groups is None else np.asarray(groups, dtype=int)[finite]
        for (x, y), gi in zip(pts, g):
            body.append(f'<circle cx="{_fmt(sx(x))}" cy="{_fmt(sy(y))}" r="2" fill="{_COLORS[gi % len(_COLORS)]}"/>')
        if len(pts) >= 2 and pts[:, 0].std() > 0:
            slope, intercept = linear_fit(pts[:, 0], pts[:, 1])
            meta["slope"] = repr(slope)
            meta["intercept"] = repr(intercept)
            ya, yb = intercept + slope * x0, intercept + slope * x1
            body.append(
                f'<line x1="{_fmt(sx(x0))}" y1="{_fmt(sy(ya))}" x2="{_fmt(sx(x1))}" y2="{_fmt(sy(yb))}" '
                'stroke="#d62728" stroke-width="1.5"/>'
            )
    else:
        order = pts if kind == "line" else pts[np.lexsort((-pts[:, 1], pts[:, 0]))]
        coords = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in order)
        body.append(f'<polyline points="{coords}" fill="none" stroke="{_COLORS[0]}" stroke-width="1.5"/>')
        if kind == "roc":
            body.append(
                f'<line x1="{_fmt(sx(0))}" y1="{_fmt(sy(0))}" x2="{_fmt(sx(1))}" y2="{_fmt(sy(1))}" '
                'stroke="#999999" stroke-dasharray="4 3"/>'
            )
    for k, v in (metadata or {}).items():
        meta[str(k)] = str(v)

    meta_block = "\n".join(f"{k}={v}" for k, v in meta.items())
    axes = [
        f'<rect x="{_PAD}" y="{_PAD}" width="{_W - 2 * _PAD}" height="{_H - 2 * _PAD}" fill="none" stroke="#000000"/>',
        f'<text x="{_W / 2}" y="{_H - 14}" text-anchor="middle" font-size="12">{_escape(xlabel)}</text>',
        f'<text x="16" y="{_H / 2}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {_H / 2})">{_escape(ylabel)}</text>',
        f'<text x="{_W / 2}" y="24" text-anchor="middle" font-size="14">{_escape(title)}</text>',
        f'<text x="{_PAD}" y="{_H - _PAD + 16}" font-size="10">{_fmt(x0)}</text>',
        f'<text x="{_W - _PAD}" y="{_H - _PAD + 16}" text-anchor="end" font-size="10">{_fmt(x1)}</text>',
        f'<text x="{_PAD - 4}" y="{_H - _PAD}" text-anchor="end" font-size="10">{_fmt(y0)}</text>',
        f'<text x="{_PAD - 4}" y="{_PAD + 10}" text-anchor="end" font-size="10">{_fmt(y1)}</text>',
    ]
    svg = "\n".join(
        [
            '<?xml version="1.0" encoding="UTF-8"?>',
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
            f"<!-- keybio-metadata\n{meta_block}\n-->",
            *axes,
            *body,
            "</svg>",
            "",
        ]
    )
    directory = os.path.dirname(os.fspath(path))
    if directory and not os.path.isdir(directory):
        raise OSError(f"cannot write plot: directory {directory!r} does not exist")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(svg)
    return meta


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def read_plot_metadata(path) -> dict[str, str]:
    text = open(path, encoding="utf-8").read()
    start = text.index("<!-- keybio-metadata") + len("<!-- keybio-metadata")
    end = text.index("-->", start)
    out = {}
    for line in text[start:end].strip().splitlines():
        k, _, v = line.partition("=")
        out[k] = v
    return out
