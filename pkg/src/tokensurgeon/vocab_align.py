"""Shared-token correspondence between two vocabularies and the donor dictionary."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .tensorio import Vocabulary

LOG = logging.getLogger(__name__)


class EmptyOverlapError(ValueError):
    pass


@dataclass(frozen=True)
class AnchorSet:
    """Tokens present in both vocabularies, ordered by donor id."""

    tokens: Tuple[str, ...]
    base_rows: np.ndarray
    donor_rows: np.ndarray

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pairs(self) -> List[Tuple[str, int, int]]:
        return list(zip(self.tokens, self.base_rows.tolist(), self.donor_rows.tolist()))

    def subset(self, positions: np.ndarray) -> "AnchorSet":
        positions = np.asarray(positions, dtype=np.int64)
        return AnchorSet(
            tokens=tuple(self.tokens[i] for i in positions),
            base_rows=self.base_rows[positions],
            donor_rows=self.donor_rows[positions],
        )


@dataclass(frozen=True)
class Dictionary:
    """Donor-space atoms, one row per anchor.

    ``atoms[j]`` is the donor embedding of ``anchors.tokens[j]``; storage is
    float64 so correlation scans and solves accumulate in double precision.
    """

    atoms: np.ndarray
    norms: np.ndarray
    anchors: AnchorSet
    dropped_zero: int = 0

    @property
    def size(self) -> int:
        return self.atoms.shape[0]

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    @classmethod
    def from_atoms(cls, atoms, tokens=None) -> "Dictionary":
        """Wrap a raw ``(n, d)`` array; handy for synthetic problems."""
        atoms = np.array(atoms, dtype=np.float64, ndmin=2)
        n = atoms.shape[0]
        if tokens is None:
            tokens = tuple(str(i) for i in range(n))
        rows = np.arange(n, dtype=np.int64)
        anchors = AnchorSet(tuple(tokens), rows, rows.copy())
        norms = np.linalg.norm(atoms, axis=1)
        if (norms == 0).any():
            raise ValueError("dictionary atoms must be non-zero")
        atoms.flags.writeable = False
        return cls(atoms=atoms, norms=norms, anchors=anchors)


def compute_overlap(base: Vocabulary, donor: Vocabulary) -> AnchorSet:
    """Exact string intersection of the two vocabularies, sorted by donor id."""
    if len(base) == 0 or len(donor) == 0:
        raise EmptyOverlapError("empty token overlap: a vocabulary is empty")
    shared = sorted((t for t in donor if t in base), key=donor.__getitem__)
    if not shared:
        raise EmptyOverlapError(
            "empty token overlap: the vocabularies share no tokens, so unseen "
            "tokens cannot be reconstructed from anchors"
        )
    return AnchorSet(
        tokens=tuple(shared),
        base_rows=np.array([base[t] for t in shared], dtype=np.int64),
        donor_rows=np.array([donor[t] for t in shared], dtype=np.int64),
    )


def partition_tokens(base: Vocabulary, donor: Vocabulary) -> Tuple[List[str], List[str]]:
    """Split the donor vocabulary into (shared, unseen), each in donor-id order."""
    shared, unseen = [], []
    for token in sorted(donor, key=donor.__getitem__):
        (shared if token in base else unseen).append(token)
    return shared, unseen


def build_dictionary(
    anchors: AnchorSet,
    donor_emb: np.ndarray,
    max_atoms: Optional[int] = None,
    seed: int = 0,
) -> Dictionary:
    """Gather donor embeddings of the anchors into a dictionary.

    With ``max_atoms`` a uniform random subset of that many anchors is used
    (deterministic for a given ``seed``; anchor order is preserved). Zero-norm
    rows are dropped and counted in ``dropped_zero``.
    """
    if len(anchors) and int(anchors.donor_rows.max()) >= donor_emb.shape[0]:
        raise IndexError("anchor donor row out of range for donor embeddings")
    positions = np.arange(len(anchors), dtype=np.int64)
    if max_atoms is not None:
        if max_atoms < 1:
            raise ValueError("max_atoms must be >= 1")
        if max_atoms < len(anchors):
            rng = np.random.default_rng(seed)
            positions = np.sort(rng.choice(len(anchors), size=max_atoms, replace=False))

    atoms = np.asarray(donor_emb, dtype=np.float64)[anchors.donor_rows[positions]]
    norms = np.linalg.norm(atoms, axis=1)
    keep = norms > 0
    dropped = int((~keep).sum())
    if not keep.any():
        raise ValueError("all dictionary atoms have zero norm")
    if dropped:
        LOG.info("dropping %d zero-norm anchor atoms from the dictionary", dropped)
        atoms, norms, positions = atoms[keep], norms[keep], positions[keep]
    atoms = np.ascontiguousarray(atoms)
    atoms.flags.writeable = False
    return Dictionary(
        atoms=atoms,
        norms=norms,
        anchors=anchors.subset(positions),
        dropped_zero=dropped,
    )
