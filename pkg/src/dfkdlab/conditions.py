"""Integer condition codes understood by the toy conditional noise predictor.

Codes ``[0, K*n_content*n_style)`` address (class, content, style) combinations,
followed by ``K`` class-only codes and a single unconditional code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class WorldBinding:
    K: int
    n_content: int
    n_style: int

    @classmethod
    def from_spec(cls, spec) -> "WorldBinding":
        return cls(spec.K, spec.n_content, spec.n_style)

    @property
    def n_combo_codes(self) -> int:
        return self.K * self.n_content * self.n_style

    @property
    def n_codes(self) -> int:
        return self.n_combo_codes + self.K + 1

    @property
    def uncond_code(self) -> int:
        return self.n_combo_codes + self.K

    def class_code(self, class_id):
        self._check_class(class_id)
        return self.n_combo_codes + np.asarray(class_id, dtype=np.int64)

    def combo_code(self, class_id, content, style):
        """Code of ``(class, content mod n_content, style mod n_style)``; vectorized."""
        self._check_class(class_id)
        k = np.asarray(class_id, dtype=np.int64)
        c = np.asarray(content, dtype=np.int64) % self.n_content
        s = np.asarray(style, dtype=np.int64) % self.n_style
        return (k * self.n_content + c) * self.n_style + s

    def decode(self, code: int) -> tuple:
        """Inverse of the code maps: ``(class, content, style)`` with ``None`` for dropped factors."""
        code = int(code)
        if not 0 <= code < self.n_codes:
            raise KeyError(f"unknown condition code {code}")
        if code == self.uncond_code:
            return (None, None, None)
        if code >= self.n_combo_codes:
            return (code - self.n_combo_codes, None, None)
        k, rest = divmod(code, self.n_content * self.n_style)
        c, s = divmod(rest, self.n_style)
        return (k, c, s)

    def _check_class(self, class_id) -> None:
        k = np.asarray(class_id)
        if k.size and (k.min() < 0 or k.max() >= self.K):
            raise ValueError(f"class id out of range [0, {self.K})")

    def to_dict(self) -> dict:
        return {"K": self.K, "n_content": self.n_content, "n_style": self.n_style}


@dataclass(frozen=True)
class ConditionCode:
    index: int
    class_id: int | None = None
    content: int | None = None
    style: int | None = None
