"""Synthetic labeled system-call trace corpora.

Benign traces are random walks on a first-order Markov chain over a fixed
syscall alphabet. Malicious traces walk a perturbed chain (a convex mix of
the benign chain and an independent random chain, controlled by a single
``separability`` scalar) and additionally get short attack bursts spliced
in at a configurable per-position rate. Corpora round-trip through a plain
on-disk format: one timestamped line per call plus a JSON manifest mapping
file names to labels.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorpusError, ValidationError

BENIGN = "benign"
MALICIOUS = "malicious"
LABELS = (BENIGN, MALICIOUS)

TOKEN_RE = re.compile(r"^[a-z_][a-z0-9_]*$")

# Roughly frequency-ordered so that small alphabets keep the calls the
# default attack bursts rely on. Alphabet indices past the end of this
# list fall back to generated `sc_<n>` names.
SYSCALL_NAMES = [
    "read", "write", "openat", "close", "ioctl", "futex", "epoll_wait",
    "getuid", "mmap", "fstat", "ptrace", "execve", "setuid", "socket",
    "connect", "kill", "chmod", "clock_gettime", "recvfrom", "sendto",
    "munmap", "mprotect", "brk", "rt_sigaction", "rt_sigprocmask",
    "rt_sigreturn", "pread64", "pwrite64", "readv", "writev", "access",
    "faccessat", "pipe2", "pselect6", "ppoll", "sched_yield", "mremap",
    "msync", "mincore", "madvise", "dup", "dup3", "nanosleep", "getitimer",
    "setitimer", "getpid", "gettid", "sendfile", "accept4", "sendmsg",
    "recvmsg", "shutdown", "bind", "listen", "getsockname", "getpeername",
    "socketpair", "setsockopt", "getsockopt", "clone", "fork", "vfork",
    "exit", "exit_group", "wait4", "waitid", "tgkill", "uname", "fcntl",
    "flock", "fsync", "fdatasync", "truncate", "ftruncate", "getdents64",
    "getcwd", "chdir", "fchdir", "renameat", "mkdirat", "unlinkat",
    "symlinkat", "readlinkat", "fchmod", "fchmodat", "fchown", "fchownat",
    "umask", "gettimeofday", "clock_nanosleep", "getrlimit", "getrusage",
    "sysinfo", "times", "geteuid", "getgid", "getegid", "setgid",
    "setpgid", "getppid", "setsid", "setreuid", "setregid", "getgroups",
    "setgroups", "capget", "capset", "sigaltstack", "utimensat", "mknodat",
    "statfs", "fstatfs", "prctl", "arch_prctl", "setrlimit", "sync",
    "mount", "umount2", "sethostname", "newfstatat", "lseek", "eventfd2",
    "epoll_create1", "epoll_ctl", "timerfd_create", "timerfd_settime",
    "inotify_init1", "inotify_add_watch", "memfd_create", "getrandom",
    "splice", "tee", "copy_file_range",
]

ATTACK_NGRAMS_DEFAULT = (
    ("ptrace", "execve", "setuid"),
    ("openat", "ptrace", "kill"),
    ("socket", "connect", "execve", "write"),
    ("execve", "chmod", "setuid"),
)


@dataclass
class Trace:
    """One labeled system-call log."""

    id: str
    label: str
    tokens: list[str]
    raw_lines: list[str] | None = None


@dataclass
class GeneratorSpec:
    """Knobs for the synthetic corpus generator.

    ``separability`` scales how far the malicious transition chain is mixed
    away from the benign one (0 = identical chains, 1 = fully independent).
    """

    alphabet_size: int = 120
    benign_transition_seed: int = 101
    malicious_transition_seed: int = 202
    attack_ngrams: tuple[tuple[str, ...], ...] = ATTACK_NGRAMS_DEFAULT
    attack_injection_rate: float = 0.03
    trace_length_range: tuple[int, int] = (24, 60)
    class_counts: tuple[int, int] = (510, 690)
    separability: float = 0.6
    # Concentration of the Dirichlet draw behind each transition row; lower
    # values give burstier, more structured call patterns.
    transition_concentration: float = 0.3

    def validate(self) -> list[str]:
        problems = []
        if self.alphabet_size < 20:
            problems.append(
                f"generator.alphabet_size: must be >= 20, got {self.alphabet_size}")
        lo, hi = self.trace_length_range
        if lo < 20:
            problems.append(
                f"generator.trace_length_range: min must be >= 20, got {lo}")
        if hi < lo:
            problems.append(
                f"generator.trace_length_range: max {hi} < min {lo}")
        if not 0.0 <= self.attack_injection_rate <= 1.0:
            problems.append(
                "generator.attack_injection_rate: must be in [0, 1], "
                f"got {self.attack_injection_rate}")
        if not 0.0 <= self.separability <= 1.0:
            problems.append(
                f"generator.separability: must be in [0, 1], got {self.separability}")
        n_b, n_m = self.class_counts
        if n_b < 1 or n_m < 1:
            problems.append(
                f"generator.class_counts: each class needs >= 1 trace, got {self.class_counts}")
        if self.transition_concentration <= 0:
            problems.append(
                "generator.transition_concentration: must be > 0, "
                f"got {self.transition_concentration}")
        names = set(self.alphabet())
        for gram in self.attack_ngrams:
            if not gram:
                problems.append("generator.attack_ngrams: empty n-gram")
                continue
            for tok in gram:
                if not TOKEN_RE.match(tok):
                    problems.append(
                        f"generator.attack_ngrams: token {tok!r} violates the syscall-name grammar")
                elif tok not in names:
                    problems.append(
                        f"generator.attack_ngrams: token {tok!r} not in the alphabet "
                        f"(first {self.alphabet_size} names)")
        return problems

    def check(self) -> None:
        problems = self.validate()
        if problems:
            raise ValidationError(problems)

    def alphabet(self) -> list[str]:
        names = SYSCALL_NAMES[: self.alphabet_size]
        names += [f"sc_{i}" for i in range(len(names), self.alphabet_size)]
        return names


def _transition_matrix(rng: np.random.Generator, n: int, concentration: float) -> np.ndarray:
    """Row-stochastic (n, n) matrix with Dirichlet-distributed rows."""
    rows = rng.dirichlet(np.full(n, concentration), size=n)
    return rows


def build_transition_matrices(spec: GeneratorSpec) -> tuple[np.ndarray, np.ndarray]:
    """Benign chain and its separability-mixed malicious counterpart."""
    n = spec.alphabet_size
    benign = _transition_matrix(
        np.random.default_rng(spec.benign_transition_seed), n, spec.transition_concentration)
    other = _transition_matrix(
        np.random.default_rng(spec.malicious_transition_seed), n, spec.transition_concentration)
    s = spec.separability
    malicious = (1.0 - s) * benign + s * other
    malicious /= malicious.sum(axis=1, keepdims=True)
    return benign, malicious


def _walk(rng: np.random.Generator, cum_rows: np.ndarray, length: int) -> np.ndarray:
    n = cum_rows.shape[0]
    out = np.empty(length, dtype=np.int64)
    state = int(rng.integers(n))
    out[0] = state
    draws = rng.random(length - 1)
    for j in range(1, length):
        state = int(np.searchsorted(cum_rows[state], draws[j - 1], side="right"))
        if state >= n:  # guard against cumsum rounding at 1.0
            state = n - 1
        out[j] = state
    return out


def _inject_bursts(rng: np.random.Generator, seq: np.ndarray,
                   grams: list[np.ndarray], rate: float) -> np.ndarray:
    if rate <= 0.0 or not grams:
        return seq
    out = seq.copy()
    draws = rng.random(len(seq))
    i = 0
    while i < len(seq):
        if draws[i] < rate:
            gram = grams[int(rng.integers(len(grams)))]
            end = min(i + len(gram), len(seq))
            out[i:end] = gram[: end - i]
            i = end
        else:
            i += 1
    return out


def generate_corpus(spec: GeneratorSpec, seed: int) -> list[Trace]:
    """Deterministically sample a labeled corpus from (spec, seed).

    Per-trace RNG streams are derived from (seed, trace index), so the
    output is independent of generation order.
    """
    spec.check()
    names = spec.alphabet()
    benign_m, malicious_m = build_transition_matrices(spec)
    cum_b = np.cumsum(benign_m, axis=1)
    cum_m = np.cumsum(malicious_m, axis=1)
    gram_idx = [np.array([names.index(t) for t in g], dtype=np.int64)
                for g in spec.attack_ngrams]
    lo, hi = spec.trace_length_range
    n_benign, n_malicious = spec.class_counts

    traces = []
    for idx in range(n_benign + n_malicious):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(idx,)))
        malicious = idx >= n_benign
        length = int(rng.integers(lo, hi + 1))
        seq = _walk(rng, cum_m if malicious else cum_b, length)
        if malicious:
            seq = _inject_bursts(rng, seq, gram_idx, spec.attack_injection_rate)
        traces.append(Trace(
            id=f"trace_{idx:05d}",
            label=MALICIOUS if malicious else BENIGN,
            tokens=[names[i] for i in seq],
        ))
    return traces


MANIFEST_NAME = "manifest.json"
_TIME_BASE = 1_600_000_000


def write_corpus(traces: list[Trace], dir_path: str | Path) -> Path:
    """Write one timestamped text file per trace plus a label manifest.

    Returns the manifest path. Timestamps are synthetic and derived from
    the trace position so reruns produce byte-identical output.
    """
    out = Path(dir_path)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, trace in enumerate(traces):
        name = f"{trace.id}.txt"
        base = _TIME_BASE + i
        lines = [f"{base + 0.003 * j:.3f} {tok}" for j, tok in enumerate(trace.tokens)]
        (out / name).write_text("\n".join(lines) + "\n", encoding="utf-8")
        entries.append({"name": name, "label": trace.label})
    manifest_path = out / MANIFEST_NAME
    manifest_path.write_text(
        json.dumps({"files": entries}, indent=2) + "\n", encoding="utf-8")
    return manifest_path


def read_corpus(dir_path: str | Path) -> list[Trace]:
    """Load a corpus written by :func:`write_corpus`.

    Inverse of write_corpus on (id, label, tokens). Raises CorpusError for
    a missing manifest, a missing or empty trace file, an unknown label, or
    a malformed line (reported with file name and line number).
    """
    from .features import strip_timestamp  # one-way layering: features never imports traces at runtime

    root = Path(dir_path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise CorpusError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorpusError(f"manifest is not valid JSON: {manifest_path}: {exc}") from exc
    if not isinstance(manifest, dict) or "files" not in manifest:
        raise CorpusError(f"manifest missing 'files' key: {manifest_path}")

    traces = []
    for entry in manifest["files"]:
        name, label = entry.get("name"), entry.get("label")
        if label not in LABELS:
            raise CorpusError(f"unknown label {label!r} for file {name!r}")
        path = root / name
        if not path.is_file():
            raise CorpusError(f"trace file missing: {path}")
        raw_lines = path.read_text(encoding="utf-8").splitlines()
        tokens = []
        for lineno, line in enumerate(raw_lines, start=1):
            if not line.strip():
                continue
            try:
                tok = strip_timestamp(line)
            except Exception as exc:
                raise CorpusError(f"{name}:{lineno}: {exc}") from exc
            if not TOKEN_RE.match(tok):
                raise CorpusError(
                    f"{name}:{lineno}: token {tok!r} violates the syscall-name grammar")
            tokens.append(tok)
        if not tokens:
            raise CorpusError(f"trace file has no calls: {path}")
        traces.append(Trace(id=Path(name).stem, label=label, tokens=tokens,
                            raw_lines=raw_lines))
    return traces
