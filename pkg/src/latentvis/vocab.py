"""Token ids for the grid-needle task.

Layout: six specials, then one token per grid row, one per grid column, one
per glyph.  A full training sequence reads

    [visual tokens] QRY ROW_r COL_c | LOOK ROW_r COL_c AUX | [aux block] | ANS GLYPH_g EOS

where the question is ``QRY ROW COL`` and the phase-1 text ends in the
trigger ``AUX``.
"""

from __future__ import annotations

from dataclasses import dataclass

PAD, EOS, AUX, ANS, QRY, LOOK = range(6)
N_SPECIAL = 6


@dataclass(frozen=True)
class Vocab:
    grid_size: int = 8
    n_glyphs: int = 8

    @property
    def size(self) -> int:
        return N_SPECIAL + 2 * self.grid_size + self.n_glyphs

    def row(self, r: int) -> int:
        return N_SPECIAL + r

    def col(self, c: int) -> int:
        return N_SPECIAL + self.grid_size + c

    def glyph(self, g: int) -> int:
        return N_SPECIAL + 2 * self.grid_size + g

    def glyph_of(self, token: int):
        g = token - N_SPECIAL - 2 * self.grid_size
        return g if 0 <= g < self.n_glyphs else None

    def question(self, r: int, c: int) -> list[int]:
        return [QRY, self.row(r), self.col(c)]

    def phase1(self, r: int, c: int, trigger: bool = True) -> list[int]:
        ids = [LOOK, self.row(r), self.col(c)]
        return ids + [AUX] if trigger else ids

    def names(self) -> list[str]:
        out = ["<pad>", "<eos>", "<auxiliary>", "<answer>", "<query>", "<look>"]
        out += [f"row{r}" for r in range(self.grid_size)]
        out += [f"col{c}" for c in range(self.grid_size)]
        out += [f"glyph{g}" for g in range(self.n_glyphs)]
        return out
