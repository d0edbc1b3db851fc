"""Build a base-space embedding matrix laid out for the donor vocabulary.

Shared tokens copy their base row. Unseen tokens are either reconstructed by
applying a donor-space sparse code to the base rows of the same anchors
(``omp``), or filled by a baseline (``zero`` / ``mean``).
"""

from __future__ import annotations

import enum
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .omp import SolverConfig, SparseCode, omp_solve_batch
from .tensorio import Vocabulary
from .vocab_align import AnchorSet, build_dictionary, compute_overlap, partition_tokens

LOG = logging.getLogger(__name__)


class Method(str, enum.Enum):
    OMP = "omp"
    ZERO = "zero"
    MEAN = "mean"


@dataclass
class TransplantReport:
    method: str
    k: Optional[int]
    donor_tokens: int
    shared: int
    unseen: int
    # unseen tokens with a zero donor embedding; they get the mean row under omp
    zero_target_fallback: int = 0
    skipped_zero_atoms: int = 0
    dictionary_atoms: int = 0
    # donor matrix rows not addressed by any donor token (left at zero)
    unmapped_rows: int = 0
    residual_mean: Optional[float] = None
    residual_median: Optional[float] = None
    residual_p95: Optional[float] = None
    timings: Dict[str, float] = field(default_factory=dict)
    codes: Optional[Dict[str, SparseCode]] = field(default=None, repr=False)

    def to_dict(self, timings: bool = True) -> dict:
        out = asdict(self)
        out.pop("codes")
        if not timings:
            out.pop("timings")
        return out

    def to_json(self, timings: bool = True) -> str:
        return json.dumps(self.to_dict(timings=timings), indent=2, sort_keys=True) + "\n"


def apply_code(code: SparseCode, anchors: AnchorSet, base_emb: np.ndarray) -> np.ndarray:
    """Weighted sum of the base-space rows of the code's anchors (float64)."""
    support = np.asarray(code.support, dtype=np.int64)
    if support.size and (support.min() < 0 or support.max() >= len(anchors)):
        raise IndexError(f"code support out of range for {len(anchors)} anchors")
    rows = np.asarray(base_emb, dtype=np.float64)[anchors.base_rows[support]]
    return np.asarray(code.coeffs, dtype=np.float64) @ rows


def _check_pair(name: str, emb: np.ndarray, vocab: Vocabulary) -> None:
    if emb.ndim != 2:
        raise ValueError(f"{name} embeddings must be 2-D, got shape {emb.shape}")
    vocab.check_pairing(emb)


def _transplant(
    base_mats: Sequence[np.ndarray],
    base_vocab: Vocabulary,
    donor_emb: np.ndarray,
    donor_vocab: Vocabulary,
    method,
    config: Optional[SolverConfig],
    max_atoms: Optional[int],
    seed: int,
    workers: Optional[int],
    keep_codes: bool,
    progress: Optional[Callable[[int, int], None]],
) -> Tuple[List[np.ndarray], TransplantReport]:
    method = Method(method)
    config = config or SolverConfig()
    for i, mat in enumerate(base_mats):
        _check_pair(f"base[{i}]", mat, base_vocab)
        if mat.shape[0] != base_mats[0].shape[0]:
            raise ValueError("base matrices must have the same number of rows")
    _check_pair("donor", donor_emb, donor_vocab)

    timings: Dict[str, float] = {}
    clock = time.perf_counter()

    shared, unseen = partition_tokens(base_vocab, donor_vocab)
    n_out = donor_emb.shape[0]
    outs = [np.zeros((n_out, m.shape[1]), dtype=np.float32) for m in base_mats]
    for out, mat in zip(outs, base_mats):
        if shared:
            dst = np.array([donor_vocab[t] for t in shared], dtype=np.int64)
            src = np.array([base_vocab[t] for t in shared], dtype=np.int64)
            out[dst] = mat[src]
    report = TransplantReport(
        method=method.value,
        k=config.k if method is Method.OMP else None,
        donor_tokens=len(donor_vocab),
        shared=len(shared),
        unseen=len(unseen),
        unmapped_rows=n_out - len(donor_vocab),
    )
    timings["copy_shared"] = time.perf_counter() - clock
    if not unseen:
        report.timings = timings
        return outs, report

    unseen_rows = np.array([donor_vocab[t] for t in unseen], dtype=np.int64)
    means = [np.asarray(m, dtype=np.float64).mean(axis=0) for m in base_mats]

    if method is Method.ZERO:
        pass
    elif method is Method.MEAN:
        for out, mean in zip(outs, means):
            out[unseen_rows] = mean.astype(np.float32)
    else:
        clock = time.perf_counter()
        anchors = compute_overlap(base_vocab, donor_vocab)
        dictionary = build_dictionary(anchors, donor_emb, max_atoms=max_atoms, seed=seed)
        report.skipped_zero_atoms = dictionary.dropped_zero
        report.dictionary_atoms = dictionary.size
        timings["build_dictionary"] = time.perf_counter() - clock

        targets = np.asarray(donor_emb, dtype=np.float64)[unseen_rows]
        nonzero = np.linalg.norm(targets, axis=1) > 0
        report.zero_target_fallback = int((~nonzero).sum())
        for out, mean in zip(outs, means):
            out[unseen_rows[~nonzero]] = mean.astype(np.float32)

        clock = time.perf_counter()
        codes = omp_solve_batch(
            dictionary, targets[nonzero], config, progress=progress, workers=workers
        )
        timings["solve"] = time.perf_counter() - clock

        clock = time.perf_counter()
        base_anchor_rows = [
            np.asarray(m, dtype=np.float64)[dictionary.anchors.base_rows] for m in base_mats
        ]
        for row, code in zip(unseen_rows[nonzero].tolist(), codes):
            for out, anchor_rows in zip(outs, base_anchor_rows):
                out[row] = (code.coeffs @ anchor_rows[code.support]).astype(np.float32)
        timings["assemble"] = time.perf_counter() - clock

        if codes:
            rel = np.array([c.relative_residual for c in codes])
            report.residual_mean = float(rel.mean())
            report.residual_median = float(np.median(rel))
            report.residual_p95 = float(np.percentile(rel, 95))
        if keep_codes:
            solved = [t for t, nz in zip(unseen, nonzero) if nz]
            report.codes = dict(zip(solved, codes))

    report.timings = timings
    return outs, report


def transplant(
    base_emb: np.ndarray,
    base_vocab: Vocabulary,
    donor_emb: np.ndarray,
    donor_vocab: Vocabulary,
    method="omp",
    config: Optional[SolverConfig] = None,
    *,
    max_atoms: Optional[int] = None,
    seed: int = 0,
    workers: Optional[int] = None,
    keep_codes: bool = False,
    progress: Optional[Callable[[int, int], None]] = None,
) -> Tuple[np.ndarray, TransplantReport]:
    """Return the new ``(donor rows, d_base)`` float32 matrix and a report.

    Row ``i`` of the result belongs to donor token id ``i``. Ids of the donor
    matrix not used by any donor token stay zero.
    """
    (out,), report = _transplant(
        [base_emb], base_vocab, donor_emb, donor_vocab, method, config,
        max_atoms, seed, workers, keep_codes, progress,
    )
    return out, report


def transplant_tied_pair(
    input_emb: np.ndarray,
    output_emb: np.ndarray,
    base_vocab: Vocabulary,
    donor_emb: np.ndarray,
    donor_vocab: Vocabulary,
    method="omp",
    config: Optional[SolverConfig] = None,
    *,
    max_atoms: Optional[int] = None,
    seed: int = 0,
    workers: Optional[int] = None,
    keep_codes: bool = False,
    progress: Optional[Callable[[int, int], None]] = None,
) -> Tuple[np.ndarray, np.ndarray, TransplantReport]:
    """Transplant input embeddings and an untied output projection together.

    Each unseen token is solved once in donor space and the same code is
    applied to both base matrices.
    """
    (out_in, out_out), report = _transplant(
        [input_emb, output_emb], base_vocab, donor_emb, donor_vocab, method, config,
        max_atoms, seed, workers, keep_codes, progress,
    )
    return out_in, out_out, report
