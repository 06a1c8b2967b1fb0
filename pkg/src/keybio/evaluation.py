"""Authentication (per-subject EER) and identification (rank-n) protocols.

Scores are distances: lower means more likely genuine, and a comparison
is accepted when its score is below the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .data import FeatureSequence, group_by_subject
from .learn import InsufficientDataError
from .net import as_embedder

NUM_QUERIES = 5
IDENT_GALLERY = 10


def auth_score(gallery: np.ndarray, query: np.ndarray) -> float:
    """Mean Euclidean distance between the query and each gallery embedding."""
    gallery = np.atleast_2d(np.asarray(gallery, dtype=float))
    if gallery.shape[0] == 0:
        raise ValueError("empty gallery")
    diff = gallery - np.asarray(query, dtype=float)
    return float(np.sqrt((diff * diff).sum(axis=1)).mean())


def roc_points(genuine, impostor) -> np.ndarray:
    """Exhaustive sweep: rows of (threshold, FAR, FRR) over every distinct score plus +inf."""
    g = np.sort(np.asarray(genuine, dtype=float))
    i = np.sort(np.asarray(impostor, dtype=float))
    if len(g) == 0 or len(i) == 0:
        raise ValueError("need nonempty genuine and impostor scores")
    thr = np.append(np.unique(np.concatenate([g, i])), np.inf)
    far = np.searchsorted(i, thr, side="left") / len(i)
    frr = 1.0 - np.searchsorted(g, thr, side="left") / len(g)
    return np.column_stack([thr, far, frr])


def compute_eer(genuine, impostor) -> float:
    """Equal error rate in percent.

    FAR - FRR is non-decreasing along the sweep; the EER is read off where
    it changes sign, interpolating linearly between the two adjacent
    thresholds that bracket the crossing.
    """
    pts = roc_points(genuine, impostor)
    far, frr = pts[:, 1], pts[:, 2]
    d = far - frr
    k = int(np.flatnonzero(d >= 0)[0])  # k >= 1: FAR = 0 and FRR = 1 at the lowest score
    if d[k] == 0:
        return 100.0 * float(far[k])
    w = -d[k - 1] / (d[k] - d[k - 1])
    return 100.0 * float(far[k - 1] + w * (far[k] - far[k - 1]))


# --------------------------------------------------------------------------
# authentication


@dataclass
class AuthTrials:
    """Which sequences are compared under the authentication protocol."""

    subjects: list[str]
    gallery: list[list[FeatureSequence]]  # per subject, G sequences
    queries: list[list[FeatureSequence]]  # per subject, 5 sequences
    impostor_query: list[int]  # per subject, index into its queries


def select_auth_trials(test_set: Sequence[FeatureSequence], G: int, k: int, rng: np.random.Generator) -> AuthTrials:
    """k subjects; gallery = first G sessions, queries = last 5 sessions.

    The impostor sample a subject contributes against everyone else is the
    first of its 5 queries after a seeded shuffle.
    """
    if G < 1:
        raise ValueError("G must be >= 1")
    if k < 2:
        raise ValueError("k must be >= 2")
    by_subject = group_by_subject(test_set)
    eligible = [s for s, seqs in by_subject.items() if len(seqs) >= G + NUM_QUERIES]
    if len(eligible) < k:
        raise InsufficientDataError(
            f"need {k} subjects with >= {G + NUM_QUERIES} sequences, found {len(eligible)}"
        )
    chosen = sorted(rng.permutation(len(eligible))[:k])
    subjects = [eligible[i] for i in chosen]
    gallery = [by_subject[s][:G] for s in subjects]
    queries = [by_subject[s][-NUM_QUERIES:] for s in subjects]
    imp = [int(rng.permutation(NUM_QUERIES)[0]) for _ in subjects]
    return AuthTrials(subjects, gallery, queries, imp)


@dataclass
class ScoreSet:
    genuine: list[np.ndarray]
    impostor: list[np.ndarray]

    @property
    def num_genuine(self) -> int:
        return sum(len(g) for g in self.genuine)

    @property
    def num_impostor(self) -> int:
        return sum(len(i) for i in self.impostor)


def score_trials(trials: AuthTrials, gallery_emb: np.ndarray, query_emb: np.ndarray) -> ScoreSet:
    """Scores from embeddings shaped k x G x D (gallery) and k x 5 x D (queries)."""
    k, G, D = gallery_emb.shape
    genuine = []
    for i in range(k):
        genuine.append(cdist(query_emb[i], gallery_emb[i]).mean(axis=1))
    imp_q = query_emb[np.arange(k), trials.impostor_query]  # k x D
    # all[i, j] = mean distance from subject i's gallery to subject j's impostor sample
    all_scores = cdist(gallery_emb.reshape(k * G, D), imp_q).reshape(k, G, k).mean(axis=1)
    impostor = [np.delete(all_scores[i], i) for i in range(k)]
    return ScoreSet(genuine, impostor)


def embed_trials(model, trials: AuthTrials, M: int):
    embedder = as_embedder(model)
    k = len(trials.subjects)
    G = len(trials.gallery[0])
    flat = [s for gal in trials.gallery for s in gal] + [q for qs in trials.queries for q in qs]
    emb = np.asarray(embedder(flat, M), dtype=float)
    D = emb.shape[1]
    return emb[: k * G].reshape(k, G, D), emb[k * G :].reshape(k, NUM_QUERIES, D)


@dataclass
class AuthReport:
    subjects: list[str]
    per_subject_eer: np.ndarray
    mean_eer: float
    roc: np.ndarray  # threshold, FAR, FRR over pooled scores
    scores: ScoreSet
    G: int
    M: int
    k: int

    def per_subject_csv(self) -> str:
        lines = ["subject_id,eer_percent"]
        lines += [f"{s},{e!r}" for s, e in zip(self.subjects, self.per_subject_eer.tolist())]
        return "\n".join(lines) + "\n"

    def roc_csv(self) -> str:
        lines = ["threshold,far,frr"]
        lines += [f"{t!r},{a!r},{b!r}" for t, a, b in self.roc.tolist()]
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        return (
            f"authentication M={self.M} G={self.G} k={self.k}\n"
            f"genuine_scores={self.scores.num_genuine} impostor_scores={self.scores.num_impostor}\n"
            f"mean_eer_percent={self.mean_eer!r}\n"
            f"std_eer_percent={float(self.per_subject_eer.std())!r}\n"
        )


def run_auth_protocol(model, test_set: Sequence[FeatureSequence], G: int, M: int, k: int, rng) -> AuthReport:
    """Per-subject EER over k enrolled subjects, averaged.

    ``model`` is a :class:`~keybio.net.ModelParams` or any
    ``f(sequences, M) -> embeddings`` callable.
    """
    trials = select_auth_trials(test_set, G, k, rng)
    gal, qry = embed_trials(model, trials, M)
    scores = score_trials(trials, gal, qry)
    eers = np.array([compute_eer(g, i) for g, i in zip(scores.genuine, scores.impostor)])
    roc = roc_points(np.concatenate(scores.genuine), np.concatenate(scores.impostor))
    return AuthReport(trials.subjects, eers, float(eers.mean()), roc, scores, G, M, k)


# --------------------------------------------------------------------------
# identification


def ident_distance(gallery: np.ndarray, queries: np.ndarray) -> float:
    """Mean distance over every gallery x query embedding combination."""
    gallery = np.atleast_2d(np.asarray(gallery, dtype=float))
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    if gallery.shape[0] == 0 or queries.shape[0] == 0:
        raise ValueError("empty gallery or query set")
    return float(cdist(gallery, queries).mean())


@dataclass
class GalleryProfile:
    subject_id: str
    gallery: np.ndarray  # G x D
    attributes: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not 1 <= len(self.gallery) <= IDENT_GALLERY:
            raise ValueError(f"gallery size must be in [1, {IDENT_GALLERY}], got {len(self.gallery)}")


@dataclass
class QuerySet:
    subject_id: str
    queries: np.ndarray  # Q x D
    attributes: dict[str, str] = field(default_factory=dict)


@dataclass
class IdentReport:
    ns: list[int]
    accuracy: dict[int, float]  # percent
    background_size: int
    prescreen: str | None
    ranks: dict[str, int]
    ties: int

    def rank_csv(self) -> str:
        lines = ["rank,accuracy_percent"]
        lines += [f"{n},{self.accuracy[n]!r}" for n in self.ns]
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        lines = [
            f"identification background={self.background_size} prescreen={self.prescreen or 'none'}",
            f"queries={len(self.ranks)} tied_true_matches={self.ties}",
        ]
        lines += [f"rank_{n}_percent={self.accuracy[n]!r}" for n in self.ns]
        return "\n".join(lines) + "\n"


def rank_n_accuracy(
    background: Sequence[GalleryProfile],
    queries: Sequence[QuerySet],
    ns: Sequence[int],
    prescreen: str | None = None,
) -> IdentReport:
    """Rank of the true subject among the background for every query set.

    With ``prescreen``, background profiles whose attribute differs from the
    query subject's are dropped before ranking. Equal distances keep the
    background order.
    """
    ns = sorted(set(int(n) for n in ns))
    B = len(background)
    if not ns or ns[0] < 1 or ns[-1] > B:
        raise ValueError(f"ranks must lie in [1, {B}]")
    ids = [p.subject_id for p in background]
    pos = {s: i for i, s in enumerate(ids)}
    ranks: dict[str, int] = {}
    ties = 0
    for q in queries:
        if q.subject_id not in pos:
            raise ValueError(f"query subject {q.subject_id!r} missing from background")
        cand = range(B)
        if prescreen is not None:
            want = q.attributes.get(prescreen)
            cand = [i for i in cand if background[i].attributes.get(prescreen) == want]
        cand = list(cand)
        dist = np.array([ident_distance(background[i].gallery, q.queries) for i in cand])
        true_at = cand.index(pos[q.subject_id])
        order = np.argsort(dist, kind="stable")
        ranks[q.subject_id] = int(np.flatnonzero(order == true_at)[0]) + 1
        ties += int((dist == dist[true_at]).sum() > 1)
    r = np.array(list(ranks.values()))
    acc = {n: 100.0 * float((r <= n).mean()) for n in ns}
    return IdentReport(ns, acc, B, prescreen, ranks, ties)


def build_ident_sets(model, test_set: Sequence[FeatureSequence], B: int, M: int, rng):
    """Background profiles (first 10 sessions) and query sets (last 5) for B subjects."""
    need = IDENT_GALLERY + NUM_QUERIES
    by_subject = group_by_subject(test_set)
    eligible = [s for s, seqs in by_subject.items() if len(seqs) >= need]
    if len(eligible) < B:
        raise InsufficientDataError(f"need {B} subjects with >= {need} sequences, found {len(eligible)}")
    subjects = [eligible[i] for i in sorted(rng.permutation(len(eligible))[:B])]
    embedder = as_embedder(model)
    flat = [q for s in subjects for q in by_subject[s][:IDENT_GALLERY] + by_subject[s][-NUM_QUERIES:]]
    emb = np.asarray(embedder(flat, M), dtype=float).reshape(B, need, -1)
    background, queries = [], []
    for s, e in zip(subjects, emb):
        attrs = by_subject[s][0].attributes
        background.append(GalleryProfile(s, e[:IDENT_GALLERY], attrs))
        queries.append(QuerySet(s, e[IDENT_GALLERY:], attrs))
    return background, queries


def run_ident_protocol(model, test_set, B: int, M: int, ns, rng, prescreen: str | None = None) -> IdentReport:
    background, queries = build_ident_sets(model, test_set, B, M, rng)
    return rank_n_accuracy(background, queries, ns, prescreen)
