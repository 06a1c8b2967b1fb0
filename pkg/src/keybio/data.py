"""Keystroke logs, per-keystroke timing features and synthetic typists.

Log format, one event per line after a header::

    subject_id,session_id,keycode,press_ms,release_ms

Lines starting with ``#`` are comments. The directive
``#@attrs,<subject_id>,<session_id>,key=value;key=value`` attaches
attributes (country, device, ...) to a session and is what lets
synthetic datasets round-trip through text.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .seeding import derive_rng

log = logging.getLogger(__name__)

HEADER = "subject_id,session_id,keycode,press_ms,release_ms"
ATTR_DIRECTIVE = "#@attrs"
NUM_FEATURES = 5
FEATURE_NAMES = ("hl", "il", "pl", "rl", "key")


class LogFormatError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class KeystrokeEvent(NamedTuple):
    keycode: int
    press_time: int
    release_time: int


@dataclass
class KeystrokeSequence:
    subject_id: str
    session_id: str
    events: tuple[KeystrokeEvent, ...]
    attributes: dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.events)

    @property
    def keycodes(self) -> tuple[int, ...]:
        return tuple(e.keycode for e in self.events)


class FeatureFrame(NamedTuple):
    hl: float
    il: float
    pl: float
    rl: float
    key_norm: float


@dataclass
class FeatureSequence:
    """Normalized features of one session.

    ``values`` holds all N frames; ``matrix``/``mask`` are the fixed-length
    view fed to the network (identical to ``values`` until padded).
    """

    subject_id: str
    session_id: str
    values: np.ndarray
    matrix: np.ndarray
    mask: np.ndarray
    keycodes: tuple[int, ...] = ()
    attributes: dict[str, str] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> list[FeatureFrame]:
        return [FeatureFrame(*map(float, row)) for row in self.values]


def _validate_event(ev: KeystrokeEvent, lineno: int = 0) -> None:
    if not 0 <= ev.keycode <= 255:
        raise LogFormatError(lineno, f"keycode {ev.keycode} outside 0-255")
    if ev.release_time < ev.press_time:
        raise LogFormatError(
            lineno, f"release_time {ev.release_time} precedes press_time {ev.press_time}"
        )


def _clean_events(events: Iterable[KeystrokeEvent]) -> tuple[KeystrokeEvent, ...]:
    # sort by press time (stable), drop exact duplicate triples
    seen = set()
    out = []
    for ev in sorted(events, key=lambda e: e.press_time):
        if ev in seen:
            continue
        seen.add(ev)
        out.append(ev)
    return tuple(out)


def _parse_attrs(body: str, lineno: int) -> dict[str, str]:
    attrs = {}
    if not body:
        return attrs
    for item in body.split(";"):
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise LogFormatError(lineno, f"bad attribute item {item!r}")
        attrs[key.strip()] = value.strip()
    return attrs


def parse_log(text: str) -> list[KeystrokeSequence]:
    """Parse a keystroke log into per-session sequences.

    Sessions keep their order of first appearance. Sessions with fewer than
    two keystrokes are dropped (no inter-key features exist) and counted in
    a warning.
    """
    groups: dict[tuple[str, str], list[KeystrokeEvent]] = {}
    attrs: dict[tuple[str, str], dict[str, str]] = {}
    header_seen = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith(ATTR_DIRECTIVE + ","):
            parts = line.split(",", 3)
            if len(parts) < 3:
                raise LogFormatError(lineno, "attribute directive needs subject and session")
            key = (parts[1], parts[2])
            attrs.setdefault(key, {}).update(_parse_attrs(parts[3] if len(parts) > 3 else "", lineno))
            continue
        if line.startswith("#"):
            continue
        if not header_seen:
            if line.replace(" ", "") != HEADER:
                raise LogFormatError(lineno, f"expected header {HEADER!r}")
            header_seen = True
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 5:
            raise LogFormatError(lineno, f"expected 5 fields, got {len(parts)}")
        subject, session = parts[0], parts[1]
        if not subject or not session:
            raise LogFormatError(lineno, "empty subject or session id")
        try:
            ev = KeystrokeEvent(int(parts[2]), int(parts[3]), int(parts[4]))
        except ValueError:
            raise LogFormatError(lineno, "keycode and timestamps must be integers") from None
        _validate_event(ev, lineno)
        groups.setdefault((subject, session), []).append(ev)

    sequences = []
    dropped = 0
    for (subject, session), events in groups.items():
        cleaned = _clean_events(events)
        if len(cleaned) < 2:
            dropped += 1
            continue
        sequences.append(
            KeystrokeSequence(subject, session, cleaned, dict(attrs.get((subject, session), {})))
        )
    if dropped:
        log.warning("dropped %d session(s) with fewer than 2 keystrokes", dropped)
    return sequences


def format_log(sequences: Iterable[KeystrokeSequence]) -> str:
    lines = [HEADER]
    for seq in sequences:
        for ident in (seq.subject_id, seq.session_id):
            if "," in ident or not ident:
                raise ValueError(f"identifier {ident!r} cannot be serialized")
        if seq.attributes:
            body = ";".join(f"{k}={v}" for k, v in sorted(seq.attributes.items()))
            lines.append(f"{ATTR_DIRECTIVE},{seq.subject_id},{seq.session_id},{body}")
        for ev in seq.events:
            lines.append(
                f"{seq.subject_id},{seq.session_id},{ev.keycode},{ev.press_time},{ev.release_time}"
            )
    return "\n".join(lines) + "\n"


def read_log(path) -> list[KeystrokeSequence]:
    with open(path, encoding="utf-8") as fh:
        return parse_log(fh.read())


def write_log(path, sequences: Iterable[KeystrokeSequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_log(sequences))


def extract_features(seq: KeystrokeSequence) -> FeatureSequence:
    """Hold, inter-key, press and release latencies (seconds) plus keycode/255.

    The first keystroke has no predecessor, so its IL/PL/RL are zero.
    """
    if len(seq.events) < 2:
        raise ValueError("need at least 2 keystrokes to extract features")
    ev = np.asarray(seq.events, dtype=np.int64)
    key, press, release = ev[:, 0], ev[:, 1], ev[:, 2]
    n = len(ev)
    out = np.zeros((n, NUM_FEATURES), dtype=np.float64)
    out[:, 0] = (release - press) / 1000.0
    out[1:, 1] = (press[1:] - release[:-1]) / 1000.0
    out[1:, 2] = (press[1:] - press[:-1]) / 1000.0
    out[1:, 3] = (release[1:] - release[:-1]) / 1000.0
    out[:, 4] = key / 255.0
    return FeatureSequence(
        subject_id=seq.subject_id,
        session_id=seq.session_id,
        values=out,
        matrix=out.copy(),
        mask=np.ones(n, dtype=bool),
        keycodes=seq.keycodes,
        attributes=dict(seq.attributes),
    )


def pad_or_truncate(fs: FeatureSequence, M: int) -> FeatureSequence:
    """Fixed-length view: keep the first M frames, zero-pad the tail."""
    if M < 1:
        raise ValueError("M must be >= 1")
    n = min(fs.n, M)
    matrix = np.zeros((M, NUM_FEATURES), dtype=np.float64)
    matrix[:n] = fs.values[:n]
    mask = np.zeros(M, dtype=bool)
    mask[:n] = True
    return FeatureSequence(
        fs.subject_id, fs.session_id, fs.values, matrix, mask, fs.keycodes, fs.attributes
    )


def stack_batch(seqs: Sequence[FeatureSequence], M: int) -> tuple[np.ndarray, np.ndarray]:
    """B x M x 5 inputs and B x M mask."""
    x = np.zeros((len(seqs), M, NUM_FEATURES))
    mask = np.zeros((len(seqs), M), dtype=bool)
    for i, fs in enumerate(seqs):
        n = min(fs.n, M)
        x[i, :n] = fs.values[:n]
        mask[i, :n] = True
    return x, mask


def group_by_subject(items: Iterable) -> dict[str, list]:
    """Items keyed by ``subject_id`` in first-appearance order."""
    out: dict[str, list] = {}
    for item in items:
        out.setdefault(item.subject_id, []).append(item)
    return out


def split_subjects(dataset: Sequence, train_fraction: float, seed: int):
    """Disjoint subject partition; each side keeps the dataset's order."""
    subjects = list(group_by_subject(dataset))
    if len(subjects) < 2:
        raise ValueError("need at least 2 subjects to split")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    rng = derive_rng(seed, "split")
    order = rng.permutation(len(subjects))
    n_train = int(round(train_fraction * len(subjects)))
    n_train = min(max(n_train, 1), len(subjects) - 1)
    train_ids = {subjects[i] for i in order[:n_train]}
    train = [s for s in dataset if s.subject_id in train_ids]
    test = [s for s in dataset if s.subject_id not in train_ids]
    return train, test


# --------------------------------------------------------------------------
# synthetic typists

WORDS = (
    "the of and to in is you that it he was for on are as with his they at be "
    "this have from or one had by word but not what all were we when your can "
    "said there use an each which she do how their if will up other about out "
    "many then them these so some her would make like him into time has look "
    "two more write go see number no way could people my than first water been "
    "call who oil its now find long down day did get come made may part over "
    "new sound take only little work know place year live me back give most "
    "very after thing our just name good sentence man think say great where "
    "help through much before line right too mean old any same tell boy follow "
    "came want show also around form three small set put end does another well "
    "large must big even such because turn here why ask went men read need land "
    "different home us move try kind hand picture again change off play spell "
    "air away animal house point page letter mother answer found study still"
).split()

SPACE = 32
COUNTRIES = ("FI", "US", "IN", "GB", "DE", "BR")


@dataclass
class SynthConfig:
    """Population model for synthetic typists. Times are milliseconds."""

    num_subjects: int = 100
    sessions_per_subject: int = 15
    mean_sentence_len: int = 70
    sentence_pool: int = 12
    typo_rate: float = 0.02
    hold_mean: float = 105.0
    hold_spread: float = 25.0
    interval_mean: float = 196.0  # 5.1 keys per second
    interval_spread: float = 15.0
    within_cv_low: float = 0.15
    within_cv_high: float = 0.35
    key_offset_sd: float = 5.0
    session_drift_sd: float = 0.02
    pace_drift_sd: float = 0.7  # per-session log-scale jitter of intervals only
    countries: tuple[str, ...] = COUNTRIES
    seed: int = 0

    def validate(self) -> None:
        for name in ("num_subjects", "sessions_per_subject", "mean_sentence_len", "sentence_pool"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.mean_sentence_len < 2:
            raise ValueError("mean_sentence_len must be >= 2")
        if self.hold_mean <= 0 or self.interval_mean <= 0:
            raise ValueError("timing means must be > 0")
        if min(self.hold_spread, self.interval_spread, self.key_offset_sd, self.session_drift_sd, self.pace_drift_sd) < 0:
            raise ValueError("spreads must be >= 0")
        if not 0 < self.within_cv_low <= self.within_cv_high:
            raise ValueError("need 0 < within_cv_low <= within_cv_high")
        if not 0 <= self.typo_rate < 1:
            raise ValueError("typo_rate must be in [0, 1)")
        if not self.countries:
            raise ValueError("countries must be nonempty")


def _word_codes(word: str) -> list[int]:
    return [ord(c) for c in word.upper()]


def _make_sentence(rng: np.random.Generator, target_len: int) -> list[int]:
    codes: list[int] = []
    while len(codes) < target_len:
        if codes:
            codes.append(SPACE)
        codes.extend(_word_codes(WORDS[rng.integers(len(WORDS))]))
    return codes[:max(target_len, 2)]


def _with_typos(rng: np.random.Generator, codes: list[int], rate: float) -> list[int]:
    out = []
    for c in codes:
        u = rng.random()
        if u < rate / 3:  # deletion
            continue
        if u < 2 * rate / 3:  # substitution
            out.append(int(rng.integers(65, 91)))
            continue
        out.append(c)
        if u < rate:  # insertion
            out.append(int(rng.integers(65, 91)))
    if len(out) < 2:
        out = list(codes[:2])
    return out


@dataclass
class _Profile:
    hold_mu: float
    hold_sd: float
    interval_mu: float
    interval_sd: float
    hold_offset: np.ndarray
    interval_offset: np.ndarray


def _draw_profile(rng: np.random.Generator, cfg: SynthConfig, key_freq: np.ndarray) -> _Profile:
    hold_mu = max(30.0, rng.normal(cfg.hold_mean, cfg.hold_spread))
    interval_mu = max(60.0, rng.normal(cfg.interval_mean, cfg.interval_spread))
    cv_h, cv_i = rng.uniform(cfg.within_cv_low, cfg.within_cv_high, size=2)
    hold_offset = rng.normal(0.0, cfg.key_offset_sd, size=256)
    interval_offset = rng.normal(0.0, cfg.key_offset_sd, size=256)
    # zero mean under the key distribution: overall pace comes from the means alone
    hold_offset -= key_freq @ hold_offset
    interval_offset -= key_freq @ interval_offset
    return _Profile(hold_mu, cv_h * hold_mu, interval_mu, cv_i * interval_mu, hold_offset, interval_offset)


def _type_session(rng: np.random.Generator, prof: _Profile, codes: list[int], cfg: SynthConfig):
    codes_arr = np.asarray(codes)
    drift = max(0.5, rng.normal(1.0, cfg.session_drift_sd))
    hold = rng.normal((prof.hold_mu + prof.hold_offset[codes_arr]) * drift, prof.hold_sd)
    pace = np.exp(rng.normal(0.0, cfg.pace_drift_sd)) if cfg.pace_drift_sd > 0 else 1.0
    interval = rng.normal((prof.interval_mu + prof.interval_offset[codes_arr]) * drift * pace, prof.interval_sd * pace)
    # truncated at 1 ms
    hold = np.maximum(1, np.rint(hold)).astype(np.int64)
    interval = np.maximum(1, np.rint(interval)).astype(np.int64)
    interval[0] = 0
    start = 1_500_000_000_000 + int(rng.integers(0, 10**9))
    press = start + np.cumsum(interval)
    release = press + hold
    return tuple(
        KeystrokeEvent(int(k), int(p), int(r)) for k, p, r in zip(codes_arr, press, release)
    )


def generate_synthetic(cfg: SynthConfig) -> list[KeystrokeSequence]:
    """Sessions of synthetic typists, deterministic for ``cfg.seed``.

    Each subject gets a latent timing profile drawn once; each session
    types a sentence from a shared pool (with typos) under that profile.
    Text choice is independent of the subject.
    """
    cfg.validate()
    text_rng = derive_rng(cfg.seed, "synth.sentences")
    pool = []
    for _ in range(cfg.sentence_pool):
        target = int(np.clip(round(text_rng.normal(cfg.mean_sentence_len, 8)), 2, None))
        pool.append(_make_sentence(text_rng, target))

    key_freq = np.bincount(np.concatenate([np.asarray(c) for c in pool]), minlength=256).astype(float)
    key_freq /= key_freq.sum()

    rng = derive_rng(cfg.seed, "synth.subjects")
    width = max(4, len(str(cfg.num_subjects - 1)))
    out = []
    for s in range(cfg.num_subjects):
        prof = _draw_profile(rng, cfg, key_freq)
        country = cfg.countries[int(rng.integers(len(cfg.countries)))]
        attrs = {"country": country, "device": "desktop"}
        sid = f"s{s:0{width}d}"
        for j in range(cfg.sessions_per_subject):
            codes = _with_typos(rng, pool[int(rng.integers(len(pool)))], cfg.typo_rate)
            events = _type_session(rng, prof, codes, cfg)
            out.append(KeystrokeSequence(sid, str(j), _clean_events(events), dict(attrs)))
    return out
