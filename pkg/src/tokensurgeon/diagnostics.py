"""Ways to judge a transplant without running a language model.

* per-token sparse decompositions and their text rendering
* mutual coherence of the anchor dictionary
* detection of mismatched numeric tokenization schemes
* a synthetic benchmark with a known orthogonal map between the two spaces
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .omp import SolverConfig, omp_solve
from .tensorio import Vocabulary
from .transplant import Method, transplant
from .vocab_align import Dictionary, build_dictionary, compute_overlap

# leading-space markers: plain space, byte-level BPE, sentencepiece
SPACE_MARKERS = (" ", "Ġ", "▁")
_ASCII_DIGITS = frozenset("0123456789")


@dataclass(frozen=True)
class Decomposition:
    token: str
    terms: Tuple[Tuple[str, float], ...]
    relative_residual: float
    shared: bool = False

    def render(self, precision: int = 3) -> str:
        return f"{self.token} ≈ {format_terms(self.terms, precision)}"


def format_terms(terms: Sequence[Tuple[str, float]], precision: int = 3) -> str:
    parts = []
    for i, (tok, coef) in enumerate(terms):
        mag = f"{abs(coef):.{precision}f}·'{tok}'"
        if i == 0:
            parts.append(mag if coef >= 0 else f"-{mag}")
        else:
            parts.append(f"{'+' if coef >= 0 else '-'} {mag}")
    return " ".join(parts) if parts else "0"


def render_table(decompositions: Sequence[Decomposition], precision: int = 3) -> str:
    """Two-column text table: token, then its decomposition."""
    header = ("Token", "Sparse Linear Decomposition")
    rows = [
        (d.token, "≈ " + format_terms(d.terms, precision)) for d in decompositions
    ]
    width = max([len(header[0])] + [len(r[0]) for r in rows])
    rule = "-" * (width + 2 + max([len(header[1])] + [len(r[1]) for r in rows]))
    lines = [rule, f"{header[0]:<{width}}  {header[1]}", rule]
    for token, text in rows:
        lines.append(f"{token:<{width}}  {text}")
    lines.append(rule)
    return "\n".join(lines) + "\n"


def explain_token(
    token: str,
    base_vocab: Vocabulary,
    donor_vocab: Vocabulary,
    donor_emb: np.ndarray,
    config: Optional[SolverConfig] = None,
    *,
    dictionary: Optional[Dictionary] = None,
    max_atoms: Optional[int] = None,
    seed: int = 0,
) -> Decomposition:
    """Decompose a donor token over the shared anchors.

    Shared tokens are copied verbatim during a transplant, so they decompose
    into themselves. Pass ``dictionary`` to avoid rebuilding it per call; it
    must come from the same ``max_atoms``/``seed`` as the transplant for the
    coefficients to match.
    """
    if token not in donor_vocab:
        raise KeyError(f"token {token!r} is not in the donor vocabulary")
    if token in base_vocab:
        return Decomposition(token, ((token, 1.0),), 0.0, shared=True)
    if dictionary is None:
        anchors = compute_overlap(base_vocab, donor_vocab)
        dictionary = build_dictionary(anchors, donor_emb, max_atoms=max_atoms, seed=seed)
    code = omp_solve(dictionary, donor_emb[donor_vocab[token]], config)
    order = np.argsort(-np.abs(code.coeffs), kind="stable")
    terms = tuple(
        (dictionary.anchors.tokens[code.support[i]], float(code.coeffs[i])) for i in order
    )
    return Decomposition(token, terms, code.relative_residual)


def dictionary_coherence(
    dictionary: Dictionary, sample: Optional[int] = None, seed: int = 0
) -> float:
    """Largest ``|<phi_i, phi_j>| / (||phi_i|| ||phi_j||)`` over distinct atoms.

    Exact over all pairs when ``sample`` is None or covers every pair,
    otherwise estimated from ``sample`` random pairs.
    """
    n = dictionary.size
    if n < 2:
        raise ValueError("coherence needs at least two atoms")
    unit = dictionary.atoms / dictionary.norms[:, None]
    n_pairs = n * (n - 1) // 2
    if sample is None or sample >= n_pairs:
        best = 0.0
        step = 1024
        for start in range(0, n, step):
            block = np.abs(unit[start : start + step] @ unit.T)
            idx = np.arange(block.shape[0])
            block[idx, start + idx] = 0.0
            best = max(best, float(block.max()))
    else:
        if sample < 1:
            raise ValueError("sample must be >= 1")
        rng = np.random.default_rng(seed)
        i = rng.integers(0, n, size=sample)
        j = rng.integers(0, n - 1, size=sample)
        j = j + (j >= i)
        best = float(np.abs(np.einsum("ij,ij->i", unit[i], unit[j])).max())
    return min(1.0, best)


@dataclass(frozen=True)
class NumericSchemeReport:
    counts: Dict[str, int]
    total: int
    scheme: str
    peer_counts: Optional[Dict[str, int]] = None
    peer_total: Optional[int] = None
    peer_scheme: Optional[str] = None
    mismatch: Optional[bool] = None

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


def _digit_strings(vocab) -> set:
    found = set()
    for token in vocab:
        for marker in SPACE_MARKERS:
            if token.startswith(marker):
                token = token[len(marker) :]
                break
        if token and set(token) <= _ASCII_DIGITS:
            found.add(token)
    return found


def _classify(digits: set) -> Tuple[Dict[str, int], str]:
    by_len: Dict[int, int] = {}
    for s in digits:
        by_len[len(s)] = by_len.get(len(s), 0) + 1
    counts = {
        "1": by_len.get(1, 0),
        "2": by_len.get(2, 0),
        "3": by_len.get(3, 0),
        "4+": sum(c for length, c in by_len.items() if length >= 4),
    }
    if not digits:
        return counts, "none"
    longest = max(by_len)
    if longest == 1 and by_len[1] == 10:
        return counts, "single-digit"
    complete = all(by_len.get(length, 0) == 10**length for length in range(1, longest + 1))
    if longest >= 2 and complete:
        return counts, "multi-digit-chunking"
    return counts, "mixed"


def numeric_scheme_report(vocab, peer=None) -> NumericSchemeReport:
    """Count pure-ASCII-digit tokens by length and name the numeric scheme.

    One leading space marker is stripped before classification, and each
    digit string is counted once. ``single-digit`` means exactly "0".."9";
    ``multi-digit-chunking`` means every digit string up to some length
    L >= 2 is present and nothing longer.
    """
    digits = _digit_strings(vocab)
    counts, scheme = _classify(digits)
    if peer is None:
        return NumericSchemeReport(counts, len(digits), scheme)
    peer_digits = _digit_strings(peer)
    peer_counts, peer_scheme = _classify(peer_digits)
    return NumericSchemeReport(
        counts,
        len(digits),
        scheme,
        peer_counts=peer_counts,
        peer_total=len(peer_digits),
        peer_scheme=peer_scheme,
        mismatch=scheme != peer_scheme,
    )


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic transplant problem with a known orthogonal map.

    Donor rows have i.i.d. N(0, 1/dim) entries, so ``noise`` is roughly the
    norm of the Gaussian perturbation added to each unit-ish base anchor.
    """

    dim: int = 256
    dict_size: int = 4096
    targets: int = 2000
    sparsity: int = 4
    noise: float = 0.0
    base_only: int = 512
    base_dim: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1 or self.dict_size < 1 or self.targets < 0:
            raise ValueError("dim and dict_size must be >= 1, targets >= 0")
        if not 1 <= self.sparsity <= self.dict_size:
            raise ValueError("sparsity must be in [1, dict_size]")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.base_dim is not None and self.base_dim < self.dim:
            raise ValueError("base_dim must be >= dim for an isometric map")


@dataclass
class SynthProblem:
    spec: SynthSpec
    U: np.ndarray
    base_emb: np.ndarray
    base_vocab: Vocabulary
    donor_emb: np.ndarray
    donor_vocab: Vocabulary
    unseen: List[str]
    true_support: np.ndarray
    truth: np.ndarray  # U @ donor embedding of each unseen token


def random_orthogonal(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """``rows x cols`` matrix with orthonormal columns (Haar when square)."""
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.diag(r))


def make_synthetic(spec: SynthSpec) -> SynthProblem:
    rng = np.random.default_rng(spec.seed)
    d, n, T, m = spec.dim, spec.dict_size, spec.targets, spec.sparsity
    base_dim = spec.base_dim or d
    U = random_orthogonal(base_dim, d, rng)

    anchors = (rng.standard_normal((n, d)) / np.sqrt(d)).astype(np.float32)
    support = np.array(
        [rng.choice(n, size=m, replace=False) for _ in range(T)], dtype=np.int64
    ).reshape(T, m)
    coeffs = rng.uniform(0.5, 1.0, size=(T, m)) * rng.choice([-1.0, 1.0], size=(T, m))
    anchors64 = anchors.astype(np.float64)
    targets = np.einsum("tm,tmd->td", coeffs, anchors64[support]).astype(np.float32)

    donor_emb = np.concatenate([anchors, targets]).astype(np.float32)
    anchor_tokens = [f"a{j}" for j in range(n)]
    unseen = [f"u{i}" for i in range(T)]
    donor_vocab = Vocabulary({t: i for i, t in enumerate(anchor_tokens + unseen)})

    base_anchor = anchors64 @ U.T
    if spec.noise:
        base_anchor += rng.standard_normal(base_anchor.shape) * (spec.noise / np.sqrt(base_dim))
    base_extra = rng.standard_normal((spec.base_only, base_dim)) / np.sqrt(base_dim)
    base_tokens = anchor_tokens + [f"b{i}" for i in range(spec.base_only)]
    order = rng.permutation(len(base_tokens))
    stacked = np.concatenate([base_anchor, base_extra])
    base_emb = np.empty_like(stacked, dtype=np.float32)
    base_emb[order] = stacked.astype(np.float32)
    base_vocab = Vocabulary({t: int(order[i]) for i, t in enumerate(base_tokens)})

    truth = targets.astype(np.float64) @ U.T
    return SynthProblem(
        spec, U, base_emb, base_vocab, donor_emb, donor_vocab, unseen, support, truth
    )


@dataclass
class BenchRow:
    method: str
    k: Optional[int]
    mean_rel_err: float
    p95_rel_err: float
    runtime_ms: float
    errors: np.ndarray = field(repr=False, default=None)


def relative_errors(problem: SynthProblem, new_emb: np.ndarray) -> np.ndarray:
    rows = np.array([problem.donor_vocab[t] for t in problem.unseen], dtype=np.int64)
    got = new_emb[rows].astype(np.float64)
    return np.linalg.norm(got - problem.truth, axis=1) / np.linalg.norm(problem.truth, axis=1)


def synth_benchmark(
    spec: SynthSpec,
    methods: Sequence[str] = ("omp", "zero", "mean"),
    ks: Sequence[int] = (8,),
    config: Optional[SolverConfig] = None,
    workers: Optional[int] = None,
    problem: Optional[SynthProblem] = None,
) -> List[BenchRow]:
    """Transplant the synthetic problem with each method (and each k for omp).

    Scores are ``||e_new - U e_donor|| / ||U e_donor||`` over the unseen
    tokens. Baselines ignore k and produce one row each.
    """
    problem = problem or make_synthetic(spec)
    base = config or SolverConfig()
    rows = []
    for name in methods:
        method = Method(name)
        for k in ks if method is Method.OMP else (None,):
            cfg = replace(base, k=k) if k is not None else None
            start = time.perf_counter()
            new_emb, _ = transplant(
                problem.base_emb, problem.base_vocab, problem.donor_emb,
                problem.donor_vocab, method, cfg, workers=workers,
            )
            elapsed = (time.perf_counter() - start) * 1000.0
            err = relative_errors(problem, new_emb)
            rows.append(BenchRow(
                method.value, k,
                float(err.mean()) if err.size else 0.0,
                float(np.percentile(err, 95)) if err.size else 0.0,
                elapsed, err,
            ))
    return rows


CSV_HEADER = ("method", "k", "mean_rel_err", "p95_rel_err", "runtime_ms")


def bench_to_csv(rows: Sequence[BenchRow], timings: bool = True) -> str:
    """CSV with a fixed header. Without ``timings`` the runtime column is blank,
    which makes the output a pure function of the inputs."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        writer.writerow([
            r.method,
            "" if r.k is None else r.k,
            repr(r.mean_rel_err),
            repr(r.p95_rel_err),
            f"{r.runtime_ms:.3f}" if timings else "",
        ])
    return buf.getvalue()


def bench_to_text(rows: Sequence[BenchRow]) -> str:
    lines = [f"{'method':<6} {'k':>4} {'mean_rel_err':>14} {'p95_rel_err':>14} {'runtime_ms':>11}"]
    for r in rows:
        k = "-" if r.k is None else str(r.k)
        lines.append(
            f"{r.method:<6} {k:>4} {r.mean_rel_err:>14.6e} {r.p95_rel_err:>14.6e} {r.runtime_ms:>11.1f}"
        )
    return "\n".join(lines) + "\n"
