"""Slow, naive reference implementations used to check the fast code.

Nothing here imports from the rest of the package; everything is plain
float64/complex128 numpy and explicit loops.
"""
import itertools
import math
from dataclasses import dataclass, field

import numpy as np


def finite_diff_grad(f, x, eps=1e-6):
    """Central-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = float(f(x))
        flat[i] = old - eps
        lo = float(f(x))
        flat[i] = old
        gf[i] = (hi - lo) / (2 * eps)
    return g


def _l2(a, b, squared=False):
    total = 0.0
    for u, v in zip(np.ravel(a), np.ravel(b)):
        total += (float(u) - float(v)) ** 2
    return total if squared else math.sqrt(total)


def enumerate_permutation_loss(masks, y_mag, refs, squared=False):
    """Speech loss by explicit enumeration of every assignment.

    ``masks`` and ``refs`` are ``(2, F, N)``. Returns ``(loss, perm)`` where
    mask ``i`` goes with ``refs[perm[i]]``; the first minimum found wins,
    and the identity is enumerated first.
    """
    masks = np.asarray(masks, dtype=np.float64)
    y = np.asarray(y_mag, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    best = None
    for perm in itertools.permutations(range(len(refs))):
        total = 0.0
        for i, j in enumerate(perm):
            total += _l2(masks[i] * y, refs[j], squared)
        if best is None or total < best[0]:
            best = (total, perm)
    return best


def stage1_loss_oracle(masks, y_mag, speech_refs, noise_refs, w=(0.1, 0.1), squared=False):
    """Four masks: speech uPIT by enumeration plus fixed-order weighted noise terms."""
    masks = np.asarray(masks, dtype=np.float64)
    y = np.asarray(y_mag, dtype=np.float64)
    speech, perm = enumerate_permutation_loss(masks[:2], y, speech_refs, squared)
    noise = 0.0
    for q in range(2):
        noise += w[q] * _l2(masks[2 + q] * y, np.asarray(noise_refs)[q], squared)
    return speech + noise, perm


def stage2_loss_oracle(teacher, student, y_mag, w=(0.1, 0.1), squared=False):
    teacher = np.asarray(teacher, dtype=np.float64)
    y = np.asarray(y_mag, dtype=np.float64)
    return stage1_loss_oracle(student, y, teacher[:2] * y, teacher[2:] * y, w, squared)


def analytic_mvdr_2mic(d, phi_n_diag):
    """Closed-form MVDR filter for two mics and a diagonal noise covariance.

    With ``Phi_n = diag(p1, p2)``: ``w_i = (d_i / p_i) / (|d1|^2/p1 + |d2|^2/p2)``.
    """
    d1, d2 = complex(d[0]), complex(d[1])
    p1, p2 = float(phi_n_diag[0]), float(phi_n_diag[1])
    den = abs(d1) ** 2 / p1 + abs(d2) ** 2 / p2
    return np.array([d1 / p1 / den, d2 / p2 / den])


@dataclass
class OracleCase:
    name: str
    inputs: dict = field(default_factory=dict)
    expected: object = None
    tolerance: float = 0.0


def report_line(name, measured, bound, passed):
    """One harness line: name, measured value, bound, PASS/FAIL."""
    return f"{name:<40s} measured={measured:<14.6g} bound={bound:<10.6g} {'PASS' if passed else 'FAIL'}"


def check_case(case, measured, lower_is_better=True):
    """Compare ``measured`` against ``case.tolerance``; returns ``(passed, line)``."""
    if lower_is_better:
        passed = bool(measured < case.tolerance)
    else:
        passed = bool(measured >= case.tolerance)
    line = report_line(case.name, measured, case.tolerance, passed)
    if not passed and case.inputs:
        line += "\n  inputs: " + repr({k: np.asarray(v).tolist() for k, v in case.inputs.items()})
    return passed, line


def cts_rule_violations(entries, segments, max_len=20.0, max_silence=2.5, tol=1e-9):
    """List every way ``segments`` break the three CTS cut rules (empty when clean).

    ``entries`` are ``(speaker, start, end, word_or_None)`` tuples and
    ``segments`` are ``(start, end, speaker_count)`` tuples.
    """
    bad = []

    def speakers(a, b):
        return {s for s, e0, e1, _ in entries if e0 < b and e1 > a}

    def silences(a, b):
        # maximal uncovered gaps inside [a, b]
        spans = sorted((max(a, e0), min(b, e1)) for _, e0, e1, _ in entries if e0 < b and e1 > a)
        gaps, t = [], a
        for s0, s1 in spans:
            if s0 > t:
                gaps.append(s0 - t)
            t = max(t, s1)
        if b > t:
            gaps.append(b - t)
        return gaps

    for i, (a, b, n) in enumerate(segments):
        if not a < b:
            bad.append(f"segment {i} is empty")
            continue
        if i and a < segments[i - 1][1] - tol:
            bad.append(f"segment {i} overlaps its predecessor")
        spk = speakers(a, b)
        if len(spk) > 2:
            bad.append(f"segment {i} holds {len(spk)} speakers")
        if n != len(spk):
            bad.append(f"segment {i} reports {n} speakers, has {len(spk)}")
        if b - a > max_len + tol:
            cut = a + max_len
            words = [e1 for _, e0, e1, w in entries if w is not None and e0 < cut < e1]
            if not words or abs(b - max(words)) > tol:
                bad.append(f"segment {i} is {b - a:.3f} s without a straddling word")
        if any(g > max_silence + tol for g in silences(a, b)):
            bad.append(f"segment {i} contains a silence longer than {max_silence} s")
        if not spk:
            bad.append(f"segment {i} has no speech")
    for i in range(1, len(segments)):
        pa, pb, _ = segments[i - 1]
        a = segments[i][0]
        if a - pb > tol:
            gaps = silences(pb, a)
            long_gap = any(g > max_silence + tol for g in gaps)
            crowded = len(speakers(pb, a)) > 2
            if not long_gap and not crowded:
                bad.append(f"gap {pb:.3f}-{a:.3f} before segment {i} is neither long silence nor 3-talker")
        elif abs(a - pb) <= tol:
            length_cut = abs(pb - (pa + max_len)) <= tol or any(
                w is not None and abs(e1 - pb) <= tol and e0 < pa + max_len < e1
                for _, e0, e1, w in entries)
            prev = speakers(pa, pb)
            # talkers joining exactly at the boundary count in their listed order
            starting = [s for s, e0, _, _ in entries if abs(e0 - pb) <= tol]
            onset = any(s not in prev and len(prev | set(starting[:i])) >= 2
                        for i, s in enumerate(starting))
            if not length_cut and not onset:
                bad.append(f"boundary at {pb:.3f} is neither a length cut nor a third-speaker onset")
    # speech outside segments is allowed only while three talkers overlap, or
    # while two earlier talkers outlast a third talker's onset (the wait)
    def active(t):
        return speakers(t, t + 1e-9)

    def waiting(mid):
        for sp, t0, _, _ in entries:
            if t0 <= mid and len((active(t0) & active(mid)) - {sp}) >= 2:
                return True
        return False

    edges = sorted({t for _, e0, e1, _ in entries for t in (e0, e1)})
    for t0, t1 in zip(edges, edges[1:]):
        mid = 0.5 * (t0 + t1)
        if not active(mid):
            continue
        if any(a - tol <= mid <= b + tol for a, b, _ in segments):
            continue
        if len(active(mid)) > 2 or waiting(mid):
            continue
        bad.append(f"speech at {mid:.3f} s is not covered")
    return bad
