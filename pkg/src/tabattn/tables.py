"""Tables, flattened token layouts, and per-head traversal orders.

A table-question example is flattened into one token sequence::

    [CLS] <query tokens> [SEP] <cell tokens, row-major>

Every position carries a row index, column index, per-column rank index,
and positional index.  Query positions (the [CLS], the query tokens, and
the first [SEP]) have row = column = 0.  Tokenization itself is out of
scope: this module consumes pre-tokenized integer sequences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Cell",
    "Table",
    "EncoderConfig",
    "TokenizedExample",
    "flatten",
    "row_major_order",
    "col_major_order",
    "invert_permutation",
    "apply_permutation",
    "max_row_span",
    "max_col_span",
    "table_from_json",
    "table_to_json",
    "load_table_file",
]


def _as_token_tuple(tokens) -> tuple[int, ...]:
    return tuple(int(t) for t in tokens)


@dataclass(frozen=True)
class Cell:
    """One cell: token ids, optional numeric value, optional linked sentences.

    ``numeric_value`` feeds the per-column rank index; ``linked_sentences``
    are entity-description sentences available for expansion (each one a
    token-id sequence).  Empty cells are permitted as empty token tuples.
    """

    tokens: tuple[int, ...] = ()
    numeric_value: float | None = None
    linked_sentences: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "tokens", _as_token_tuple(self.tokens))
        object.__setattr__(
            self,
            "linked_sentences",
            tuple(_as_token_tuple(s) for s in self.linked_sentences),
        )


@dataclass(frozen=True)
class Table:
    """A rectangular grid of cells.  Rows and columns are 1-based everywhere.

    ``header=True`` marks the first row as a header row; it still
    participates as table row r=1 (no special index), the flag only matters
    to downstream flow aggregation.
    """

    cells: tuple[tuple[Cell, ...], ...]
    header: bool = False

    def __post_init__(self):
        rows = tuple(tuple(r) for r in self.cells)
        if len(rows) < 1 or len(rows[0]) < 1:
            raise ValueError("table must have at least one row and one column")
        width = len(rows[0])
        for r in rows:
            if len(r) != width:
                raise ValueError("table must be rectangular")
            for c in r:
                if not isinstance(c, Cell):
                    raise TypeError("table cells must be Cell instances")
        object.__setattr__(self, "cells", rows)

    @property
    def n_rows(self) -> int:
        return len(self.cells)

    @property
    def n_cols(self) -> int:
        return len(self.cells[0])

    def cell(self, row: int, col: int) -> Cell:
        """1-based cell accessor."""
        return self.cells[row - 1][col - 1]

    def token_count(self) -> int:
        return sum(len(c.tokens) for row in self.cells for c in row)

    @staticmethod
    def from_tokens(rows, header: bool = False) -> "Table":
        """Build a table from nested token-id lists (no numerics, no links)."""
        return Table(
            cells=tuple(tuple(Cell(tokens=c) for c in row) for row in rows),
            header=header,
        )


@dataclass(frozen=True)
class EncoderConfig:
    """Encoder hyper-parameters shared by the dense and bucketed paths.

    Heads 1..num_row_heads are row heads, the rest column heads.  The
    hidden size is always num_heads * head_dim.  ``positional_reset=None``
    resolves to True exactly when max_len > 512.
    """

    num_row_heads: int = 2
    num_col_heads: int = 2
    head_dim: int = 16
    num_layers: int = 2
    ffn_dim: int = 128
    global_size: int = 116
    radius: int = 42
    max_len: int = 2048
    positional_reset: bool | None = None
    vocab_size: int = 1000
    max_rows: int = 256
    max_cols: int = 256
    max_rank: int = 256
    max_position: int = 512
    cls_id: int = 1
    sep_id: int = 2
    pad_id: int = 0

    def __post_init__(self):
        if self.num_row_heads < 0 or self.num_col_heads < 0:
            raise ValueError("head counts must be non-negative")
        if self.num_row_heads + self.num_col_heads < 1:
            raise ValueError("need at least one attention head")
        if self.head_dim < 1 or self.num_layers < 0 or self.ffn_dim < 1:
            raise ValueError("bad dimensions")
        if self.global_size < 1:
            raise ValueError("global part must at least hold [CLS]")
        if self.radius < 1:
            raise ValueError("radius must be >= 1")

    @property
    def num_heads(self) -> int:
        return self.num_row_heads + self.num_col_heads

    @property
    def hidden_size(self) -> int:
        return self.num_heads * self.head_dim

    @property
    def reset_positions(self) -> bool:
        if self.positional_reset is None:
            return self.max_len > 512
        return self.positional_reset


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TokenizedExample:
    """Flattened example with per-token index metadata.

    ``cell_spans`` maps (row, col) -> half-open [start, stop) range; the
    ranges partition exactly the non-query, non-padding positions.  Padding
    positions have row = col = rank = 0, is_query False, is_pad True.
    """

    token_ids: np.ndarray
    row_ids: np.ndarray
    col_ids: np.ndarray
    rank_ids: np.ndarray
    position_ids: np.ndarray
    is_query: np.ndarray
    is_pad: np.ndarray
    cell_spans: dict[tuple[int, int], tuple[int, int]]
    header: bool = False

    def __post_init__(self):
        n = len(self.token_ids)
        for name in ("token_ids", "row_ids", "col_ids", "rank_ids", "position_ids"):
            object.__setattr__(self, name, _frozen(np.asarray(getattr(self, name), dtype=np.int64)))
        for name in ("is_query", "is_pad"):
            object.__setattr__(self, name, _frozen(np.asarray(getattr(self, name), dtype=bool)))
        for name in ("row_ids", "col_ids", "rank_ids", "position_ids", "is_query", "is_pad"):
            if len(getattr(self, name)) != n:
                raise ValueError("index arrays must all share the token count")
        real = ~self.is_pad
        table_like = (self.row_ids > 0) | (self.col_ids > 0)
        if np.any(self.is_query & table_like):
            raise ValueError("query positions must have row = col = 0")
        if np.any(real & ~self.is_query & ~table_like):
            raise ValueError("non-query real positions must carry table indices")

    @property
    def n(self) -> int:
        return len(self.token_ids)

    @property
    def n_real(self) -> int:
        return int((~self.is_pad).sum())

    @property
    def query_size(self) -> int:
        return int(self.is_query.sum())

    def cell_offsets(self) -> np.ndarray:
        """Intra-cell offset of each position (0 outside cell spans)."""
        off = np.zeros(self.n, dtype=np.int64)
        for start, stop in self.cell_spans.values():
            off[start:stop] = np.arange(stop - start)
        return off


def _column_ranks(table: Table) -> dict[tuple[int, int], int]:
    """Dense per-column rank of numeric cells, ascending; ties share a rank."""
    ranks: dict[tuple[int, int], int] = {}
    for c in range(1, table.n_cols + 1):
        values = sorted(
            {
                table.cell(r, c).numeric_value
                for r in range(1, table.n_rows + 1)
                if table.cell(r, c).numeric_value is not None
            }
        )
        order = {v: i + 1 for i, v in enumerate(values)}
        for r in range(1, table.n_rows + 1):
            v = table.cell(r, c).numeric_value
            ranks[(r, c)] = order[v] if v is not None else 0
    return ranks


def flatten(query_tokens, table: Table, cfg: EncoderConfig, *, pad_to: int | None = None) -> TokenizedExample:
    """Flatten a query and table into one indexed token sequence.

    The layout is [CLS], query, [SEP], then cells in row-major order.  An
    empty query token list is allowed (Q degenerates to {CLS, SEP}); a
    missing query is not.  Raises ValueError when the sequence exceeds
    cfg.max_len — callers are expected to fit oversized tables to a budget
    first (see tabattn.qa.fit_budget).
    """
    if query_tokens is None:
        raise ValueError("query must be a token sequence (may be empty)")
    query_tokens = _as_token_tuple(query_tokens)

    tok: list[int] = [cfg.cls_id, *query_tokens, cfg.sep_id]
    q_len = len(tok)
    row: list[int] = [0] * q_len
    col: list[int] = [0] * q_len
    rank: list[int] = [0] * q_len
    pos: list[int] = list(range(q_len))

    ranks = _column_ranks(table)
    spans: dict[tuple[int, int], tuple[int, int]] = {}
    cursor = q_len
    for r in range(1, table.n_rows + 1):
        for c in range(1, table.n_cols + 1):
            cell = table.cell(r, c)
            k = len(cell.tokens)
            spans[(r, c)] = (cursor, cursor + k)
            tok.extend(cell.tokens)
            row.extend([r] * k)
            col.extend([c] * k)
            rank.extend([ranks[(r, c)]] * k)
            if cfg.reset_positions:
                pos.extend(range(k))
            else:
                pos.extend(range(cursor, cursor + k))
            cursor += k

    n = len(tok)
    if n > cfg.max_len:
        raise ValueError(
            f"flattened length {n} exceeds max_len {cfg.max_len}; "
            "fit the table to a budget before flattening"
        )
    is_query = [True] * q_len + [False] * (n - q_len)
    is_pad = [False] * n

    if pad_to is not None:
        if pad_to < n:
            raise ValueError(f"pad_to {pad_to} shorter than sequence {n}")
        extra = pad_to - n
        tok.extend([cfg.pad_id] * extra)
        row.extend([0] * extra)
        col.extend([0] * extra)
        rank.extend([0] * extra)
        pos.extend([0] * extra)
        is_query.extend([False] * extra)
        is_pad.extend([True] * extra)

    return TokenizedExample(
        token_ids=np.array(tok),
        row_ids=np.array(row),
        col_ids=np.array(col),
        rank_ids=np.array(rank),
        position_ids=np.array(pos),
        is_query=np.array(is_query),
        is_pad=np.array(is_pad),
        cell_spans=spans,
        header=table.header,
    )


def _traversal(ex: TokenizedExample, primary: np.ndarray, secondary: np.ndarray) -> np.ndarray:
    # group 0: query prefix, 1: table tokens, 2: padding (always last)
    group = np.ones(ex.n, dtype=np.int64)
    group[ex.is_query] = 0
    group[ex.is_pad] = 2
    orig = np.arange(ex.n)
    off = ex.cell_offsets()
    # lexsort: last key is most significant
    return np.lexsort((orig, off, secondary, primary, group))


def row_major_order(ex: TokenizedExample) -> np.ndarray:
    """Row-order traversal: query prefix, then cells sorted by (row, col).

    Returns a gather permutation ``p``: position ``p[i]`` of the original
    layout lands at slot ``i`` of the traversal.  Padding sorts last.
    """
    return _traversal(ex, ex.row_ids, ex.col_ids)


def col_major_order(ex: TokenizedExample) -> np.ndarray:
    """Column-order traversal: query prefix, then cells sorted by (col, row)."""
    return _traversal(ex, ex.col_ids, ex.row_ids)


def invert_permutation(perm: np.ndarray) -> np.ndarray:
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return inv


def apply_permutation(ex: TokenizedExample, perm: np.ndarray) -> TokenizedExample:
    """Reorder an example by a gather permutation, remapping cell spans.

    Cell tokens must stay contiguous under ``perm`` (true for the
    traversal orders above).
    """
    inv = invert_permutation(perm)
    spans: dict[tuple[int, int], tuple[int, int]] = {}
    for key, (start, stop) in ex.cell_spans.items():
        if stop == start:
            spans[key] = (start, stop)
            continue
        new_pos = np.sort(inv[np.arange(start, stop)])
        if new_pos[-1] - new_pos[0] != stop - start - 1:
            raise ValueError("permutation splits a cell span")
        spans[key] = (int(new_pos[0]), int(new_pos[-1]) + 1)
    return TokenizedExample(
        token_ids=ex.token_ids[perm],
        row_ids=ex.row_ids[perm],
        col_ids=ex.col_ids[perm],
        rank_ids=ex.rank_ids[perm],
        position_ids=ex.position_ids[perm],
        is_query=ex.is_query[perm],
        is_pad=ex.is_pad[perm],
        cell_spans=spans,
        header=ex.header,
    )


def max_row_span(ex: TokenizedExample) -> int:
    """Largest total token count of any single row."""
    table = ~ex.is_pad & ~ex.is_query
    if not table.any():
        return 0
    return int(np.bincount(ex.row_ids[table]).max())


def max_col_span(ex: TokenizedExample) -> int:
    """Largest total token count of any single column."""
    table = ~ex.is_pad & ~ex.is_query
    if not table.any():
        return 0
    return int(np.bincount(ex.col_ids[table]).max())


# ---------------------------------------------------------------------------
# JSON table format (documented in README: rows / query / links / numeric /
# header; "r,c" keys are 1-based).
# ---------------------------------------------------------------------------

def table_from_json(obj: dict) -> tuple[list[int], Table]:
    """Parse the JSON table record; returns (query_tokens, table)."""
    rows = obj["rows"]
    links = obj.get("links", {})
    numeric = obj.get("numeric", {})

    def key(r, c):
        return f"{r},{c}"

    cells = []
    for ri, row in enumerate(rows, start=1):
        cells.append(
            tuple(
                Cell(
                    tokens=tokens,
                    numeric_value=numeric.get(key(ri, ci)),
                    linked_sentences=tuple(tuple(s) for s in links.get(key(ri, ci), [])),
                )
                for ci, tokens in enumerate(row, start=1)
            )
        )
    table = Table(cells=tuple(cells), header=bool(obj.get("header", False)))
    return list(obj.get("query", [])), table


def table_to_json(query_tokens, table: Table) -> dict:
    obj: dict = {
        "query": list(query_tokens),
        "rows": [[list(c.tokens) for c in row] for row in table.cells],
    }
    links = {}
    numeric = {}
    for r in range(1, table.n_rows + 1):
        for c in range(1, table.n_cols + 1):
            cell = table.cell(r, c)
            if cell.linked_sentences:
                links[f"{r},{c}"] = [list(s) for s in cell.linked_sentences]
            if cell.numeric_value is not None:
                numeric[f"{r},{c}"] = cell.numeric_value
    if links:
        obj["links"] = links
    if numeric:
        obj["numeric"] = numeric
    if table.header:
        obj["header"] = True
    return obj


def load_table_file(path) -> tuple[list[int], Table]:
    with open(Path(path)) as fh:
        return table_from_json(json.load(fh))
