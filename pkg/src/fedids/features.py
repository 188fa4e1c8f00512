"""Preprocessing pipeline: timestamp removal, TF-IDF vocabulary, sliding
windows, per-window featurization, training-noise injection, and the
trace-level train/validation split.

A window of W raw tokens becomes one (W, V) sample: row t is zero except
for the column of token t, which carries its within-window tf (count / W)
times the vocabulary idf. The flattened sample is L2-normalized when its
norm is positive, so rows keep their relative magnitudes while the overall
input scale stays bounded.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .errors import ParseError, ValidationError

if TYPE_CHECKING:  # pragma: no cover
    from .traces import Trace

PAD_TOKEN = "<pad>"

_LINE_RE = re.compile(r"^(\d+(?:\.\d+)?)\s+(\S+)$")


def strip_timestamp(line: str) -> str:
    """Return the syscall name from a `<epoch_seconds> <name>` line."""
    m = _LINE_RE.match(line.strip())
    if m is None:
        raise ParseError(f"line does not match '<timestamp> <syscall>': {line!r}")
    return m.group(2)


@dataclass(frozen=True)
class TfIdfVocab:
    """Fitted vocabulary: term order, document frequencies, idf weights.

    idf uses the smooth variant ln((1 + n_docs) / (1 + df)) + 1, which is
    strictly positive for every retained term.
    """

    terms: tuple[str, ...]
    doc_freq: tuple[int, ...]
    idf: np.ndarray
    n_docs: int

    def __post_init__(self):
        object.__setattr__(
            self, "term_index", {t: i for i, t in enumerate(self.terms)})

    @property
    def size(self) -> int:
        return len(self.terms)

    def save(self, path: str | Path) -> None:
        payload = {
            "version": 1,
            "n_docs": self.n_docs,
            "terms": list(self.terms),
            "doc_freq": list(self.doc_freq),
            "idf": [float(x) for x in self.idf],
        }
        Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "TfIdfVocab":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        if payload.get("version") != 1:
            raise ValidationError(f"vocab file version {payload.get('version')!r} not supported")
        return cls(
            terms=tuple(payload["terms"]),
            doc_freq=tuple(payload["doc_freq"]),
            idf=np.asarray(payload["idf"], dtype=np.float64),
            n_docs=int(payload["n_docs"]),
        )


def fit_vocab(training_traces: Sequence["Trace"], max_terms: int = 1000) -> TfIdfVocab:
    """Keep the max_terms terms with the highest total count (ties broken
    lexicographically ascending); document frequency counts traces that
    contain the term at least once.
    """
    totals: Counter = Counter()
    doc_freq: Counter = Counter()
    n_docs = 0
    for trace in training_traces:
        if not trace.tokens:
            continue
        n_docs += 1
        totals.update(trace.tokens)
        doc_freq.update(set(trace.tokens))
    if n_docs == 0 or not totals:
        raise ValidationError("fit_vocab: corpus has no non-empty traces")
    ranked = sorted(totals.items(), key=lambda kv: (-kv[1], kv[0]))[:max_terms]
    terms = tuple(t for t, _ in ranked)
    df = tuple(doc_freq[t] for t in terms)
    idf = np.array(
        [math.log((1 + n_docs) / (1 + d)) + 1.0 for d in df], dtype=np.float64)
    return TfIdfVocab(terms=terms, doc_freq=df, idf=idf, n_docs=n_docs)


def sliding_windows(tokens: Sequence[str], window: int = 10, stride: int = 2) -> list[list[str]]:
    """Windows at offsets 0, stride, 2*stride, ...; a too-short sequence
    yields a single window right-padded with the reserved pad token.
    """
    if window < 1 or stride < 1:
        raise ValidationError(f"sliding_windows: window and stride must be >= 1, got {window}, {stride}")
    n = len(tokens)
    if n == 0:
        raise ValidationError("sliding_windows: empty token list")
    if n < window:
        return [list(tokens) + [PAD_TOKEN] * (window - n)]
    return [list(tokens[o:o + window]) for o in range(0, n - window + 1, stride)]


def featurize_window(window: Sequence[str], vocab: TfIdfVocab) -> np.ndarray:
    """(W, V) matrix; see module docstring for the composition rule."""
    w = len(window)
    counts = Counter(window)
    out = np.zeros((w, vocab.size), dtype=np.float64)
    index = vocab.term_index
    for t, tok in enumerate(window):
        col = index.get(tok)
        if col is not None:
            out[t, col] = (counts[tok] / w) * vocab.idf[col]
    norm = np.linalg.norm(out)
    if norm > 0.0:
        out /= norm
    return out


def inject_noise(features: np.ndarray, sigma: float = 0.02,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """features + iid N(0, sigma^2); training inputs only, never eval."""
    if sigma < 0:
        raise ValidationError(f"inject_noise: sigma must be >= 0, got {sigma}")
    if sigma == 0.0:
        return features.copy()
    if rng is None:
        raise ValidationError("inject_noise: rng required when sigma > 0")
    return features + rng.normal(0.0, sigma, size=features.shape)


@dataclass
class SplitSpec:
    train_fraction: float = 0.7
    seed: int = 42
    stratified: bool = True

    def validate(self) -> list[str]:
        if not 0.0 < self.train_fraction < 1.0:
            return [f"split.train_fraction: must be in (0, 1), got {self.train_fraction}"]
        return []


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_train_val(traces: Sequence["Trace"], spec: SplitSpec) -> tuple[list, list]:
    """Trace-level split so all windows of a trace land on one side.

    Stratified mode splits each class independently with round-half-up on
    train_fraction * class size.
    """
    problems = spec.validate()
    if problems:
        raise ValidationError(problems)
    rng = np.random.default_rng(spec.seed)
    if not spec.stratified:
        order = rng.permutation(len(traces))
        k = _round_half_up(spec.train_fraction * len(traces))
        train = [traces[i] for i in order[:k]]
        val = [traces[i] for i in order[k:]]
        return train, val

    by_label: dict[str, list] = {}
    for t in traces:
        by_label.setdefault(t.label, []).append(t)
    train, val = [], []
    for label in sorted(by_label):
        group = by_label[label]
        if len(group) < 2:
            raise ValidationError(
                f"split: class {label!r} has {len(group)} trace(s), need >= 2 for stratification")
        order = rng.permutation(len(group))
        k = _round_half_up(spec.train_fraction * len(group))
        train.extend(group[i] for i in order[:k])
        val.extend(group[i] for i in order[k:])
    return train, val


@dataclass
class FeatureConfig:
    """Windowing and noise knobs for the whole pipeline."""

    max_terms: int = 1000
    window: int = 10
    stride: int = 2
    noise_sigma: float = 0.02

    def validate(self) -> list[str]:
        problems = []
        if self.max_terms < 1:
            problems.append(f"features.max_terms: must be >= 1, got {self.max_terms}")
        if self.window < 1:
            problems.append(f"features.window: must be >= 1, got {self.window}")
        if self.stride < 1:
            problems.append(f"features.stride: must be >= 1, got {self.stride}")
        if self.noise_sigma < 0:
            problems.append(f"features.noise_sigma: must be >= 0, got {self.noise_sigma}")
        return problems


@dataclass
class Sample:
    """One windowed feature sequence with its inherited label."""

    features: np.ndarray  # (W, V)
    label: int            # 1 = malicious
    trace_id: str
    window_index: int


def trace_to_samples(trace: "Trace", vocab: TfIdfVocab,
                     window: int = 10, stride: int = 2) -> list[Sample]:
    from .traces import MALICIOUS

    label = 1 if trace.label == MALICIOUS else 0
    return [
        Sample(features=featurize_window(win, vocab), label=label,
               trace_id=trace.id, window_index=i)
        for i, win in enumerate(sliding_windows(trace.tokens, window, stride))
    ]


@dataclass
class WindowDataset:
    """Stacked windowed features for a set of traces."""

    x: np.ndarray          # (N, W, V) float64
    y: np.ndarray          # (N,) int8, 1 = malicious
    trace_ids: np.ndarray  # (N,) object
    trace_labels: dict[str, int]

    def __len__(self) -> int:
        return self.x.shape[0]


def featurize_traces(traces: Iterable["Trace"], vocab: TfIdfVocab,
                     window: int = 10, stride: int = 2) -> WindowDataset:
    """Featurize traces in canonical (id-sorted) order.

    The id sort makes the sample order a function of the trace *set*, not
    of how the caller happened to arrange the list, which keeps shuffled
    training schedules reproducible across partitionings.
    """
    from .traces import MALICIOUS

    ordered = sorted(traces, key=lambda t: t.id)
    xs, ys, ids = [], [], []
    trace_labels = {}
    for trace in ordered:
        label = 1 if trace.label == MALICIOUS else 0
        trace_labels[trace.id] = label
        for win in sliding_windows(trace.tokens, window, stride):
            xs.append(featurize_window(win, vocab))
            ys.append(label)
            ids.append(trace.id)
    if not xs:
        raise ValidationError("featurize_traces: no traces to featurize")
    return WindowDataset(
        x=np.stack(xs),
        y=np.asarray(ys, dtype=np.int8),
        trace_ids=np.asarray(ids, dtype=object),
        trace_labels=trace_labels,
    )


def write_sample_csv(features: np.ndarray, path: str | Path) -> None:
    """Dense row-major CSV dump of one sample, for debugging."""
    np.savetxt(path, features, delimiter=",", fmt="%.10g")
