"""Utility functions with marginal utility and its inverse."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import sympy as sp


@dataclass(frozen=True)
class Utility:
    """``log`` or power ``c**gamma / gamma`` with ``0 < gamma < 1``."""

    kind: str = "log"
    gamma: float | None = None

    def __post_init__(self):
        if self.kind not in ("log", "power"):
            raise ValueError(f"unknown utility {self.kind!r}")
        if self.kind == "power" and not (self.gamma is not None and 0.0 < self.gamma < 1.0):
            raise ValueError("power utility needs 0 < gamma < 1")

    @classmethod
    def log(cls) -> "Utility":
        return cls("log")

    @classmethod
    def power(cls, gamma: float) -> "Utility":
        return cls("power", float(gamma))

    def expr(self, c: sp.Symbol) -> sp.Expr:
        if self.kind == "log":
            return sp.log(c)
        return c ** sp.Float(self.gamma) / sp.Float(self.gamma)

    def U(self, c):
        c = np.asarray(c, dtype=float)
        return np.log(c) if self.kind == "log" else c**self.gamma / self.gamma

    def dU(self, c):
        c = np.asarray(c, dtype=float)
        return 1.0 / c if self.kind == "log" else c ** (self.gamma - 1.0)

    def dU_inv(self, y):
        """Inverse marginal utility; defined for ``y > 0`` only."""
        y = np.asarray(y, dtype=float)
        if np.any(y <= 0):
            raise ValueError("inverse marginal utility needs a positive argument")
        return 1.0 / y if self.kind == "log" else y ** (1.0 / (self.gamma - 1.0))

    def to_dict(self) -> dict:
        return {"kind": self.kind} | ({"gamma": self.gamma} if self.kind == "power" else {})

    @classmethod
    def from_dict(cls, d: dict) -> "Utility":
        return cls(d.get("kind", "log"), d.get("gamma"))
