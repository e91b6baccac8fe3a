"""Ordered control segments and their JSON summary."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .propagator import Control, concatenate

PURPOSES = ("ramp", "lyapunov", "local", "rotation", "reversed", "reference", "unramp")


@dataclass
class Segment:
    purpose: str
    control: Control
    note: str = ""

    def __post_init__(self):
        if self.purpose not in PURPOSES:
            raise ValueError(f"unknown segment purpose {self.purpose!r}")


@dataclass
class SteerPlan:
    """Controls to be applied one after the other."""

    segments: list = field(default_factory=list)
    achieved_error: float = float("nan")
    info: dict = field(default_factory=dict)
    final_state: np.ndarray | None = field(default=None, repr=False)

    @property
    def total_T(self):
        return float(sum(s.control.T for s in self.segments))

    def append(self, purpose, control, note=""):
        if control.samples.size:
            self.segments.append(Segment(purpose, control, note))

    def extend(self, other: "SteerPlan"):
        self.segments.extend(other.segments)

    def control(self) -> Control:
        """All segments glued into one control starting at t = 0."""
        return concatenate([s.control for s in self.segments])

    def segment_table(self):
        rows, t = [], 0.0
        for i, s in enumerate(self.segments):
            rows.append({"index": i, "purpose": s.purpose, "t_start": t, "duration": s.control.T,
                         "samples": int(s.control.samples.size), "l2_norm": s.control.l2_norm(),
                         "note": s.note})
            t += s.control.T
        return rows

    def summary(self):
        return {"achieved_error": float(self.achieved_error), "total_T": self.total_T,
                "segments": self.segment_table(), "info": _plain(self.info)}

    def to_json(self):
        return json.dumps(self.summary(), sort_keys=True, indent=2)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj
