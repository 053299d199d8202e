"""Training losses on masked magnitudes.

``y_mag`` is the ``(F, N)`` magnitude of one observed channel (channel 0 of
whatever the student sees). Distances are L2 norms over all T-F bins, one
norm per source, summed over sources; ``squared=True`` swaps in the squared
norm. No normalisation by bin count is applied.
"""
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor

IDENTITY = (0, 1)
SWAPPED = (1, 0)
PERMUTATIONS = (IDENTITY, SWAPPED)


@dataclass(frozen=True)
class LossWeights:
    stationary: float = 0.1
    transient: float = 0.1

    def __post_init__(self):
        if self.stationary < 0 or self.transient < 0:
            raise ValueError("noise loss weights must be >= 0")

    def as_tuple(self):
        return (self.stationary, self.transient)


@dataclass
class Stage1Refs:
    """Reference magnitudes, each ``(2, F, N)``: speech (|X1|, |X2|), noise (stationary, transient)."""
    speech_mag: np.ndarray
    noise_mag: np.ndarray

    def __post_init__(self):
        self.speech_mag = np.asarray(self.speech_mag)
        self.noise_mag = np.asarray(self.noise_mag)
        for name in ("speech_mag", "noise_mag"):
            v = getattr(self, name)
            if v.ndim != 3 or v.shape[0] != 2:
                raise ValueError(f"{name} must be (2, F, N), got {v.shape}")
            if np.any(v < 0):
                raise ValueError(f"{name} has negative entries")
        if self.speech_mag.shape != self.noise_mag.shape:
            raise ValueError(f"speech {self.speech_mag.shape} vs noise {self.noise_mag.shape}")


def _dist(a, b, squared):
    d = a - b
    return ag.sum_(d * d) if squared else ag.l2_norm(d)


def _check(name, shape, y_mag):
    if tuple(shape) != np.shape(y_mag):
        raise ValueError(f"{name} shape {tuple(shape)} does not match |Y| {np.shape(y_mag)}")


def _pit(estimates, targets, squared):
    """Min over the two assignments of summed distances.

    ``estimates[i]`` is paired with ``targets[perm[i]]``.
    """
    best = None
    for perm in PERMUTATIONS:
        total = _dist(estimates[0], targets[perm[0]], squared) \
            + _dist(estimates[1], targets[perm[1]], squared)
        # strict < keeps the identity on ties
        if best is None or total.item() < best[0].item():
            best = (total, perm)
    return best


def upit_speech_loss(speech_masks, y_mag, speech_refs, squared=False):
    """uPIT loss between masked magnitudes and two reference magnitudes.

    Returns ``(loss, perm)`` where mask ``i`` is assigned to reference ``perm[i]``.
    """
    speech_masks = ag.as_tensor(speech_masks)
    y = np.asarray(y_mag, dtype=speech_masks.dtype)
    refs = np.asarray(speech_refs)
    _check("speech masks", speech_masks.shape[1:], y)
    _check("speech refs", refs.shape[1:], y)
    est = [speech_masks[i] * y for i in range(2)]
    tgt = [Tensor(refs[j].astype(y.dtype)) for j in range(2)]
    return _pit(est, tgt, squared)


def noise_loss(noise_masks, y_mag, noise_refs, weights=LossWeights(), squared=False):
    noise_masks = ag.as_tensor(noise_masks)
    y = np.asarray(y_mag, dtype=noise_masks.dtype)
    _check("noise masks", noise_masks.shape[1:], y)
    total = Tensor(np.zeros((), dtype=y.dtype))
    for q, w in enumerate(weights.as_tuple()):
        ref = noise_refs[q]
        ref = ref if isinstance(ref, Tensor) else Tensor(np.asarray(ref, dtype=y.dtype))
        _check("noise refs", ref.shape, y)
        total = total + _dist(noise_masks[q] * y, ref, squared) * w
    return total


def stage1_loss(maskset, y_mag, refs, weights=LossWeights(), squared=False):
    """Speech uPIT loss plus weighted fixed-order noise losses.

    Returns ``(loss, perm)``.
    """
    speech, perm = upit_speech_loss(maskset.speech, y_mag, refs.speech_mag, squared)
    return speech + noise_loss(maskset.noise, y_mag, refs.noise_mag, weights, squared), perm


def stage2_loss(teacher, student, y_mag, weights=LossWeights(), squared=False):
    """Teacher-student loss; the teacher's masks are treated as constants.

    ``teacher`` and ``student`` are MaskSets (or ``(4, F, N)`` arrays for the
    teacher). Returns ``(loss, perm)`` with student mask ``i`` matched to
    teacher mask ``perm[i]``.
    """
    tea = teacher.values if hasattr(teacher, "values") else np.asarray(teacher)
    stu = student.masks
    y = np.asarray(y_mag, dtype=stu.dtype)
    _check("teacher masks", tea.shape[1:], y)
    _check("student masks", stu.shape[1:], y)
    tea_mag = (tea * y).astype(y.dtype)
    est = [stu[i] * y for i in range(2)]
    tgt = [Tensor(tea_mag[j]) for j in range(2)]
    speech, perm = _pit(est, tgt, squared)
    noise = noise_loss(stu[2:4], y, [Tensor(tea_mag[2]), Tensor(tea_mag[3])], weights, squared)
    return speech + noise, perm
