"""Event-table CSV input with missing cells."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd


@dataclass(frozen=True)
class DataMatrix:
    labels: tuple[str, ...]
    values: np.ndarray  # n x m, NaN marks a missing cell

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def columns(self, labels) -> tuple[np.ndarray, int]:
        """Complete rows of the requested columns and the number of rows dropped."""
        missing = [lab for lab in labels if lab not in self.labels]
        if missing:
            raise KeyError(f"columns not in data: {', '.join(missing)}")
        idx = [self.labels.index(lab) for lab in labels]
        sub = self.values[:, idx]
        keep = ~np.isnan(sub).any(axis=1)
        return sub[keep], int((~keep).sum())


def read_data_csv(path) -> DataMatrix:
    """Header row of labels, one row per event; empty cells are missing.

    A first column named ``event_date`` or ``timestamp`` is skipped, so
    pipeline output can be fed straight in.
    """
    frame = pd.read_csv(Path(path), dtype=str, keep_default_na=False)
    if len(frame.columns) and frame.columns[0] in ("event_date", "timestamp"):
        frame = frame.iloc[:, 1:]
    frame = frame.replace("", np.nan)
    values = frame.apply(pd.to_numeric, errors="raise").to_numpy(dtype=float)
    return DataMatrix(tuple(str(c) for c in frame.columns), values)
