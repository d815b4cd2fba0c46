"""Loss-plateau early stopping shared by autoencoder and clustering training."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class EarlyStop:
    """Halt when the epoch-to-epoch loss change stays below a threshold.

    Parameters
    ----------
    eta : int
        Patience: number of consecutive small-change epoch transitions
        required before halting.
    delta_ae : float
        Loss-change threshold applied during autoencoder pretraining.
    delta_cluster : float
        Loss-change threshold applied during clustering training.
    """

    eta: int
    delta_ae: float
    delta_cluster: float

    def __post_init__(self):
        if self.eta < 1:
            raise ValueError(f"eta must be >= 1, got {self.eta}")
        if self.delta_ae <= 0 or self.delta_cluster <= 0:
            raise ValueError("both deltas must be > 0")

    def delta_for(self, phase: str) -> float:
        if phase == "ae":
            return self.delta_ae
        if phase == "cluster":
            return self.delta_cluster
        raise ValueError(f"unknown phase {phase!r}, expected 'ae' or 'cluster'")


def early_stop_check(history, stop: EarlyStop, phase: str) -> bool:
    """Decide whether training should halt given the per-epoch loss history.

    Returns True iff the most recent ``eta`` consecutive epoch transitions
    all changed by less than the phase's delta (in absolute value).  With
    fewer than ``eta + 1`` recorded epochs the answer is always False, so a
    loop that checks after every epoch can never halt before epoch eta + 1.
    """
    if len(history) == 0:
        raise ValueError("history must be non-empty")
    delta = stop.delta_for(phase)
    if len(history) < stop.eta + 1:
        return False
    tail = history[-(stop.eta + 1):]
    return all(abs(tail[i + 1] - tail[i]) < delta for i in range(stop.eta))
