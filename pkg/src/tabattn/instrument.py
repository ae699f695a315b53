"""Operation and memory counters shared by the dense and bucketed paths.

``score_ops`` counts attention score-matrix entries computed for real
source rows (synthetic bucket-padding rows excluded, masked in-window
targets included).  ``peak_attn_bytes`` is the memory proxy: the largest
number of bytes simultaneously held by one head's score/probability/context
intermediates — deliberately not process RSS, so scaling shape is
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass
class OpCounters:
    score_ops: int = 0
    peak_attn_bytes: int = 0

    def add_score_ops(self, n: int) -> None:
        self.score_ops += int(n)

    def observe_attn_bytes(self, nbytes: int) -> None:
        if nbytes > self.peak_attn_bytes:
            self.peak_attn_bytes = int(nbytes)

    def reset(self) -> None:
        self.score_ops = 0
        self.peak_attn_bytes = 0
