"""Per-head attention patterns and their dense boolean masks.

Three cases define who position k may attend to:

* k in the query set Q: every real position,
* row head, table k: Q plus every token in the same row,
* column head, table k: Q plus every token in the same column.

The head-independent baseline mask ("sat") allows same-row OR same-column
plus Q.  Patterns are kept as index metadata and evaluated lazily; only
the dense reference path renders them to n x n masks.  No edge ever
touches padding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tables import EncoderConfig, TokenizedExample

ROW = "row"
COLUMN = "column"
SAT = "sat"
FULL = "full"

__all__ = [
    "AttentionPattern",
    "head_kind",
    "head_pattern",
    "sat_pattern",
    "full_pattern",
    "to_mask",
    "mask_to_pbm",
    "ROW",
    "COLUMN",
    "SAT",
    "FULL",
]


@dataclass(frozen=True)
class AttentionPattern:
    """Lazy allowed-attention relation over (k, j) position pairs."""

    kind: str
    row_ids: np.ndarray
    col_ids: np.ndarray
    is_query: np.ndarray
    is_pad: np.ndarray

    @property
    def n(self) -> int:
        return len(self.row_ids)

    def allowed_row(self, k: int) -> np.ndarray:
        """Boolean vector of the positions k may attend to."""
        real = ~self.is_pad
        if self.is_pad[k]:
            return np.zeros(self.n, dtype=bool)
        if self.is_query[k] or self.kind == FULL:
            return real.copy()
        if self.kind == ROW:
            same = self.row_ids == self.row_ids[k]
        elif self.kind == COLUMN:
            same = self.col_ids == self.col_ids[k]
        elif self.kind == SAT:
            same = (self.row_ids == self.row_ids[k]) | (self.col_ids == self.col_ids[k])
        else:
            raise ValueError(f"unknown pattern kind {self.kind!r}")
        return real & (self.is_query | same)

    def allowed(self, k: int, j: int) -> bool:
        return bool(self.allowed_row(k)[j])


def head_kind(head: int, cfg: EncoderConfig) -> str:
    """Kind of 1-based head index: heads 1..num_row_heads are row heads."""
    if not 1 <= head <= cfg.num_heads:
        raise ValueError(f"head {head} out of range 1..{cfg.num_heads}")
    return ROW if head <= cfg.num_row_heads else COLUMN


def _pattern(ex: TokenizedExample, kind: str) -> AttentionPattern:
    return AttentionPattern(
        kind=kind,
        row_ids=ex.row_ids,
        col_ids=ex.col_ids,
        is_query=ex.is_query,
        is_pad=ex.is_pad,
    )


def head_pattern(ex: TokenizedExample, head: int, cfg: EncoderConfig) -> AttentionPattern:
    """Attention pattern of one head (1-based index)."""
    return _pattern(ex, head_kind(head, cfg))


def sat_pattern(ex: TokenizedExample) -> AttentionPattern:
    """Head-independent same-row-or-same-column baseline pattern."""
    return _pattern(ex, SAT)


def full_pattern(ex: TokenizedExample) -> AttentionPattern:
    """Standard dense attention (only padding excluded)."""
    return _pattern(ex, FULL)


def to_mask(p: AttentionPattern) -> np.ndarray:
    """Render a pattern to an (n, n) boolean mask; mask[k, j] = allowed(k, j)."""
    real = ~p.is_pad
    q = p.is_query & real
    full = real[:, None] & real[None, :]
    if p.kind == FULL:
        return full
    if p.kind == ROW:
        same = p.row_ids[:, None] == p.row_ids[None, :]
    elif p.kind == COLUMN:
        same = p.col_ids[:, None] == p.col_ids[None, :]
    elif p.kind == SAT:
        same = (p.row_ids[:, None] == p.row_ids[None, :]) | (
            p.col_ids[:, None] == p.col_ids[None, :]
        )
    else:
        raise ValueError(f"unknown pattern kind {p.kind!r}")
    table_src = full & ~q[:, None]
    return (q[:, None] & full) | (table_src & (q[None, :] | same))


def mask_to_pbm(mask: np.ndarray, comment: str = "") -> str:
    """Serialize a boolean mask as a PBM (P1) 0/1 text grid."""
    n_rows, n_cols = mask.shape
    lines = ["P1"]
    if comment:
        lines.append(f"# {comment}")
    lines.append(f"{n_cols} {n_rows}")
    for row in mask:
        lines.append(" ".join("1" if v else "0" for v in row))
    return "\n".join(lines) + "\n"
