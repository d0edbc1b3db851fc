"""Orthogonal Matching Pursuit with an incrementally updated QR factorization.

For a target ``v`` and a dictionary with atoms ``phi_j`` the solver greedily
picks the atom most correlated with the current residual, extends a thin QR
factorization of the selected atoms by one Gram-Schmidt step, and refits the
coefficients on the whole support. Keeping ``Q`` and ``Q^T v`` around makes
each least-squares update cost O(t*d) instead of re-solving from scratch.

Targets are processed in blocks so the correlation scan, which dominates the
cost, becomes one matrix-matrix product per iteration. Every per-target
quantity is computed row by row, so a target's result does not depend on
which other targets share its block.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .vocab_align import Dictionary

LOG = logging.getLogger(__name__)

SELECTION_MODES = ("normalized", "raw")


class AtomInSpanError(np.linalg.LinAlgError):
    """The appended atom is numerically in the span of the current factor."""


class SingularMatrixError(np.linalg.LinAlgError):
    pass


class BatchSolveError(RuntimeError):
    """Some targets of a batch failed; the rest were solved.

    ``results`` holds one entry per input target (``None`` where it failed)
    and ``failures`` maps the failing input index to its error message.
    """

    def __init__(self, results: List[Optional["SparseCode"]], failures: Dict[int, str]):
        first = min(failures)
        super().__init__(
            f"{len(failures)} of {len(results)} targets failed; "
            f"first at index {first}: {failures[first]}"
        )
        self.results = results
        self.failures = failures


@dataclass(frozen=True)
class SolverConfig:
    """Knobs for :func:`omp_solve`.

    ``reorth_interval`` of ``None`` disables periodic re-orthogonalization.
    ``early_stop_tol`` is a threshold on ``||r|| / ||v||``; 0 runs all ``k``
    iterations unless the residual vanishes exactly.
    """

    k: int = 64
    selection: str = "normalized"
    reorth_interval: Optional[int] = 16
    early_stop_tol: float = 0.0
    rank_tol: float = 1e-6

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.selection not in SELECTION_MODES:
            raise ValueError(
                f"selection must be one of {SELECTION_MODES}, got {self.selection!r}"
            )
        if self.reorth_interval is not None and self.reorth_interval < 1:
            raise ValueError("reorth_interval must be >= 1 or None")
        if self.early_stop_tol < 0:
            raise ValueError("early_stop_tol must be >= 0")
        if self.rank_tol < 0:
            raise ValueError("rank_tol must be >= 0")


@dataclass(frozen=True, eq=False)
class SparseCode:
    support: np.ndarray
    coeffs: np.ndarray
    residual_norm: float
    target_norm: float
    # residual norm after each selection, in selection order
    history: Tuple[float, ...] = field(default=())

    @property
    def relative_residual(self) -> float:
        if self.target_norm == 0:
            return 0.0
        return self.residual_norm / self.target_norm

    def dense(self, size: int) -> np.ndarray:
        x = np.zeros(size)
        x[self.support] = self.coeffs
        return x

    def identical(self, other: "SparseCode") -> bool:
        """Bitwise equality of support, coefficients and residual."""
        return (
            np.array_equal(self.support, other.support)
            and self.coeffs.tobytes() == other.coeffs.tobytes()
            and self.residual_norm == other.residual_norm
        )

    def __len__(self) -> int:
        return len(self.support)


@dataclass(frozen=True, eq=False)
class QRState:
    """Thin QR factorization ``Q @ R`` of the atoms selected so far."""

    Q: np.ndarray  # (d, t), orthonormal columns
    R: np.ndarray  # (t, t), upper triangular
    reorth_interval: Optional[int] = 16

    @classmethod
    def empty(cls, dim: int, reorth_interval: Optional[int] = 16) -> "QRState":
        return cls(np.zeros((dim, 0)), np.zeros((0, 0)), reorth_interval)

    @property
    def t(self) -> int:
        return self.Q.shape[1]


def reorthogonalize(Q: np.ndarray, R: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Restore orthonormality of ``Q`` while keeping ``Q @ R`` unchanged.

    Works on single ``(d, t)`` factors or stacks ``(..., d, t)``. The
    correction ``S`` from a Householder QR of ``Q`` is sign-fixed to a
    positive diagonal and folded into ``R``.
    """
    Q2, S = np.linalg.qr(Q)
    signs = np.sign(np.diagonal(S, axis1=-2, axis2=-1))
    signs[signs == 0] = 1.0
    Q2 = Q2 * signs[..., None, :]
    S = S * signs[..., :, None]
    return Q2, S @ R


def qr_append(state: QRState, atom: np.ndarray, rank_tol: float = 1e-6) -> QRState:
    """Extend the factorization by one column.

    Raises :class:`AtomInSpanError` when the part of ``atom`` orthogonal to
    the current span is below ``rank_tol * ||atom||``.
    """
    atom = np.asarray(atom, dtype=np.float64)
    d, t = state.Q.shape
    if atom.shape != (d,):
        raise ValueError(f"atom has shape {atom.shape}, expected ({d},)")
    proj = state.Q.T @ atom
    qhat = atom - state.Q @ proj
    nrm = float(np.linalg.norm(qhat))
    if nrm <= rank_tol * float(np.linalg.norm(atom)) or nrm == 0.0:
        raise AtomInSpanError(
            f"atom is in the span of the selected columns (residual norm {nrm:.3e})"
        )
    Q = np.empty((d, t + 1))
    Q[:, :t] = state.Q
    Q[:, t] = qhat / nrm
    R = np.zeros((t + 1, t + 1))
    R[:t, :t] = state.R
    R[:t, t] = proj
    R[t, t] = nrm
    interval = state.reorth_interval
    if interval and (t + 1) % interval == 0:
        Q, R = reorthogonalize(Q, R)
    return QRState(Q, R, interval)


def solve_triangular(R: np.ndarray, rhs: np.ndarray, tol: Optional[float] = None) -> np.ndarray:
    """Back substitution for upper-triangular ``R x = rhs``."""
    R = np.asarray(R, dtype=np.float64)
    rhs = np.asarray(rhs, dtype=np.float64)
    if R.ndim != 2 or R.shape[0] != R.shape[1]:
        raise ValueError(f"R must be square, got shape {R.shape}")
    t = R.shape[0]
    if rhs.shape != (t,):
        raise ValueError(f"rhs has shape {rhs.shape}, expected ({t},)")
    diag = np.abs(np.diagonal(R))
    if t == 0:
        return np.zeros(0)
    if tol is None:
        tol = diag.max() * t * np.finfo(np.float64).eps
    if (diag <= tol).any():
        i = int(np.argmin(diag))
        raise SingularMatrixError(f"singular triangular system: |R[{i},{i}]| = {diag[i]:.3e}")
    x = np.zeros(t)
    for i in range(t - 1, -1, -1):
        x[i] = (rhs[i] - R[i, i + 1 :] @ x[i + 1 :]) / R[i, i]
    return x


def _rows_matmul(X: np.ndarray, M: np.ndarray) -> np.ndarray:
    # A one-row product goes through gemv, whose rounding differs from gemm;
    # pad so every row is computed by the same kernel.
    if X.shape[0] == 1:
        return (np.vstack([X, np.zeros_like(X)]) @ M)[:1]
    return X @ M


def _solve_block(dictionary: Dictionary, V: np.ndarray, config: SolverConfig) -> List[SparseCode]:
    atoms = dictionary.atoms
    atom_norms = dictionary.norms
    n, d = atoms.shape
    B = V.shape[0]
    kmax = min(config.k, n, d)
    normalized = config.selection == "normalized"
    interval = config.reorth_interval

    Q = np.zeros((B, kmax, d))  # basis vectors stored as rows
    Rf = np.zeros((B, kmax, kmax))
    qtv = np.zeros((B, kmax))
    support = np.full((B, kmax), -1, dtype=np.int64)
    count = np.zeros(B, dtype=np.int64)
    blocked = np.zeros((B, n), dtype=bool)
    history: List[List[float]] = [[] for _ in range(B)]

    target_norms = np.linalg.norm(V, axis=1)
    residual = V.copy()
    active = target_norms > config.early_stop_tol * target_norms

    t = 0
    while t < kmax and active.any():
        rows = np.flatnonzero(active)
        scores = np.abs(_rows_matmul(residual[rows], atoms.T))
        if normalized:
            scores /= atom_norms
        scores[blocked[rows]] = -1.0

        pending = np.arange(rows.size)
        appended = []
        while pending.size:
            local = scores[pending]
            cand = local.argmax(axis=1)
            exhausted = local[np.arange(pending.size), cand] < 0
            if exhausted.any():
                active[rows[pending[exhausted]]] = False
                pending, cand = pending[~exhausted], cand[~exhausted]
                if not pending.size:
                    break
            g = rows[pending]
            a = atoms[cand]
            Qg = Q[g, :t]
            proj = (Qg @ a[:, :, None])[:, :, 0]
            qhat = a - (proj[:, None, :] @ Qg)[:, 0, :]
            nrm = np.linalg.norm(qhat, axis=1)
            bad = (nrm <= config.rank_tol * atom_norms[cand]) | (nrm == 0)
            if bad.any():
                blocked[g[bad], cand[bad]] = True
                scores[pending[bad], cand[bad]] = -1.0
            ok = ~bad
            if ok.any():
                gi, ci = g[ok], cand[ok]
                Q[gi, t] = qhat[ok] / nrm[ok, None]
                Rf[gi, :t, t] = proj[ok]
                Rf[gi, t, t] = nrm[ok]
                support[gi, t] = ci
                blocked[gi, ci] = True
                appended.append(gi)
            pending = pending[bad]

        if not appended:
            break
        g = np.sort(np.concatenate(appended))
        count[g] = t + 1
        Vg = V[g]
        qtv[g, t] = (Q[g, t][:, None, :] @ Vg[:, :, None])[:, 0, 0]
        if interval and (t + 1) % interval == 0:
            Qs, Rs = reorthogonalize(Q[g, : t + 1].transpose(0, 2, 1), Rf[g, : t + 1, : t + 1])
            Q[g, : t + 1] = Qs.transpose(0, 2, 1)
            Rf[g, : t + 1, : t + 1] = Rs
            qtv[g, : t + 1] = (Q[g, : t + 1] @ Vg[:, :, None])[:, :, 0]
        residual[g] = Vg - (qtv[g, None, : t + 1] @ Q[g, : t + 1])[:, 0, :]
        rnorm = np.linalg.norm(residual[g], axis=1)
        for i, r in zip(g.tolist(), rnorm.tolist()):
            history[i].append(r)
        active[g[rnorm <= config.early_stop_tol * target_norms[g]]] = False
        t += 1

    codes = []
    for i in range(B):
        ti = int(count[i])
        sup = support[i, :ti].copy()
        x = solve_triangular(Rf[i, :ti, :ti], qtv[i, :ti])
        r = V[i] - x @ atoms[sup]
        codes.append(
            SparseCode(
                support=sup,
                coeffs=x,
                residual_norm=float(np.linalg.norm(r)),
                target_norm=float(target_norms[i]),
                history=tuple(history[i]),
            )
        )
    return codes


def _check_target(dictionary: Dictionary, target) -> np.ndarray:
    v = np.asarray(target, dtype=np.float64)
    if v.shape != (dictionary.dim,):
        raise ValueError(
            f"target has shape {v.shape}, dictionary atoms have dimension {dictionary.dim}"
        )
    if not np.isfinite(v).all():
        raise ValueError("target contains non-finite values")
    return v


def omp_solve(dictionary: Dictionary, target, config: Optional[SolverConfig] = None) -> SparseCode:
    """Sparse code of ``target`` over ``dictionary`` with at most ``config.k`` atoms.

    Ties in the selection step go to the lowest atom index. Atoms whose
    orthogonal remainder falls under ``rank_tol`` are skipped in favour of
    the next best candidate.
    """
    config = config or SolverConfig()
    if dictionary.size < 1:
        raise ValueError("dictionary has no atoms")
    v = _check_target(dictionary, target)
    return _solve_block(dictionary, v[None, :], config)[0]


def resolve_workers(workers: Optional[int] = None) -> int:
    if workers is None:
        env = os.environ.get("TOKENSURGEON_THREADS")
        workers = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(workers))


def omp_solve_batch(
    dictionary: Dictionary,
    targets: Sequence,
    config: Optional[SolverConfig] = None,
    progress: Optional[Callable[[int, int], None]] = None,
    workers: Optional[int] = None,
    block_size: int = 64,
) -> List[SparseCode]:
    """Solve many targets; element ``i`` equals ``omp_solve(dictionary, targets[i])``.

    Targets are cut into fixed blocks of ``block_size`` and blocks run on up
    to ``workers`` threads. ``progress(done, total)`` is called as blocks
    finish. Invalid targets do not stop the batch: once everything else is
    solved a :class:`BatchSolveError` carrying the partial results is raised.
    """
    config = config or SolverConfig()
    if dictionary.size < 1:
        raise ValueError("dictionary has no atoms")
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    total = len(targets)
    results: List[Optional[SparseCode]] = [None] * total
    failures: Dict[int, str] = {}

    if isinstance(targets, np.ndarray) and targets.ndim == 2 and targets.shape[1] == dictionary.dim:
        V = np.asarray(targets, dtype=np.float64)
        finite = np.isfinite(V).all(axis=1)
        for i in np.flatnonzero(~finite):
            failures[int(i)] = "target contains non-finite values"
        valid = np.flatnonzero(finite)
    else:
        V = np.zeros((total, dictionary.dim))
        valid_list = []
        for i, target in enumerate(targets):
            try:
                V[i] = _check_target(dictionary, target)
            except ValueError as exc:
                failures[i] = str(exc)
            else:
                valid_list.append(i)
        valid = np.array(valid_list, dtype=np.int64)

    blocks = [valid[s : s + block_size] for s in range(0, valid.size, block_size)]

    def run(idx: np.ndarray) -> List[SparseCode]:
        return _solve_block(dictionary, V[idx], config)

    done = len(failures)
    nworkers = min(resolve_workers(workers), max(1, len(blocks)))
    if nworkers == 1:
        outputs = map(run, blocks)
        executor = None
    else:
        executor = ThreadPoolExecutor(max_workers=nworkers)
        outputs = executor.map(run, blocks)
    try:
        for idx, codes in zip(blocks, outputs):
            for i, code in zip(idx.tolist(), codes):
                results[i] = code
            done += idx.size
            if progress is not None:
                progress(done, total)
    finally:
        if executor is not None:
            executor.shutdown()

    if failures:
        raise BatchSolveError(results, failures)
    return results  # type: ignore[return-value]
