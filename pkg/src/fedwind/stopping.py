"""Patience-based early stopping that remembers the best candidate."""

from __future__ import annotations

import math
from typing import Any


class EarlyStopping:
    """Track a score to minimise; signal a stop after ``patience`` non-improving steps.

    Improvement is strict (``score < best``). The payload passed with the best
    score is kept so callers can restore it when training stops.
    """

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best_score = math.inf
        self.best_payload: Any = None
        self.best_step: int | None = None
        self.wait = 0
        self.steps = 0

    def update(self, score: float, payload: Any = None) -> bool:
        """Record one step; return True when training should stop."""
        step = self.steps
        self.steps += 1
        if score < self.best_score:
            self.best_score = score
            self.best_payload = payload
            self.best_step = step
            self.wait = 0
            return False
        self.wait += 1
        return self.wait >= self.patience
