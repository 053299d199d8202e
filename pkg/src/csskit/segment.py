"""Long-form segmentation for teacher-student training.

* :func:`fws` cuts fixed 4 s windows.
* :func:`cts` sweeps a word/segment-level diarization and cuts when a third
  speaker starts, when the segment grows past ``max_len``, or at a silence
  longer than ``max_silence``.

Diarization sidecar format (UTF-8, one record per line, tab separated)::

    speaker_id <TAB> start_sec <TAB> end_sec [<TAB> token]

Blank lines and lines starting with ``#`` are ignored.
"""
from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class DiarizationEntry:
    speaker: str
    start: float
    end: float
    word: str = None

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError(f"entry {self.speaker} has start {self.start} >= end {self.end}")


class DiarizationAnnotation:
    def __init__(self, entries):
        self.entries = list(entries)
        for a, b in zip(self.entries, self.entries[1:]):
            if b.start < a.start:
                raise ValueError(f"annotation not sorted by start at {b.start} s")

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    @property
    def speakers(self):
        return sorted({e.speaker for e in self.entries})


@dataclass(frozen=True)
class Segment:
    start: float
    end: float
    speaker_count: int = 0
    quality_score: float = None

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ValueError(f"invalid segment [{self.start}, {self.end})")
        if self.speaker_count < 0:
            raise ValueError("speaker_count must be >= 0")

    @property
    def duration(self):
        return self.end - self.start


def read_annotation(path):
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) not in (3, 4):
                raise ValueError(f"{path}:{lineno}: expected 3 or 4 tab-separated fields")
            try:
                start, end = float(parts[1]), float(parts[2])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: start/end must be numbers") from None
            entries.append(DiarizationEntry(parts[0], start, end, parts[3] if len(parts) == 4 else None))
    return DiarizationAnnotation(entries)


def write_annotation(path, annotation):
    with open(path, "w", encoding="utf-8") as fh:
        for e in annotation:
            fields = [e.speaker, f"{e.start:.3f}", f"{e.end:.3f}"]
            if e.word is not None:
                fields.append(e.word)
            fh.write("\t".join(fields) + "\n")


def fws(total_dur, window=4.0, min_final=1.0):
    """Non-overlapping fixed windows; a final partial window is kept if >= ``min_final`` s."""
    if total_dur <= 0:
        raise ValueError("total_dur must be positive")
    segs = []
    start = 0.0
    k = 0
    while start < total_dur:
        end = min(total_dur, (k + 1) * window)
        if end - start >= window or end - start >= min_final or not segs:
            segs.append(Segment(start, end))
        k += 1
        start = k * window
    return segs


def _speakers_in(entries, start, end):
    return {e.speaker for e in entries if e.start < end and e.end > start}


def cts(diar, max_len=20.0, max_silence=2.5):
    """Conversational-transcription-based segmentation.

    Sweeps entries in start order, cutting

    1. at the onset of a third distinct speaker. The new segment starts
       there; if two earlier talkers are still active at that point it
       starts instead when the earlier of them stops, so no segment ever
       holds three talkers;
    2. when the segment passes ``max_len``. The cut goes at
       ``start + max_len`` unless a word entry straddles that point, in
       which case the word is kept whole and the cut moves to its end;
    3. at any silence gap longer than ``max_silence``; the gap is dropped.
    """
    entries = list(diar)
    for a, b in zip(entries, entries[1:]):
        if b.start < a.start:
            raise ValueError(f"annotation not sorted by start at {b.start} s")
    out = []
    seg_start = None
    seg_end = None
    live = []  # entries intersecting the open segment

    def emit(end):
        if end > seg_start:
            out.append(Segment(seg_start, end, len(_speakers_in(live, seg_start, end))))

    def length_cuts(horizon):
        # only cut where every entry starting before the cut has been seen
        nonlocal seg_start, live
        while seg_end - seg_start > max_len and seg_start + max_len <= horizon:
            cut = seg_start + max_len
            for e in live:
                if e.word is not None and e.start < cut < e.end:
                    cut = max(cut, e.end)
            if cut >= seg_end:
                break
            emit(cut)
            seg_start = cut
            live = [e for e in live if e.end > cut]

    for i, e in enumerate(entries):
        horizon = entries[i + 1].start if i + 1 < len(entries) else float("inf")
        if seg_start is None:
            seg_start, seg_end, live = e.start, e.end, [e]
            length_cuts(horizon)
            continue
        if e.start - seg_end > max_silence:
            emit(seg_end)
            seg_start, seg_end, live = e.start, e.end, [e]
            length_cuts(horizon)
            continue
        current = _speakers_in(live, seg_start, max(seg_end, e.start))
        if e.speaker not in current and len(current) >= 2:
            emit(e.start)
            carried = [x for x in live if x.end > e.start and x.speaker != e.speaker]
            last_end = {}
            for x in carried:
                last_end[x.speaker] = max(last_end.get(x.speaker, 0.0), x.end)
            new_start = e.start
            if len(last_end) >= 2:
                # wait until only one earlier talker remains
                new_start = sorted(last_end.values())[-2]
            seg_start = new_start
            live = [x for x in live if x.end > new_start] + [e]
            seg_end = max(seg_end, e.end)
            if seg_end <= seg_start:
                seg_start, seg_end, live = e.end, e.end, []
            length_cuts(horizon)
            continue
        live.append(e)
        seg_end = max(seg_end, e.end)
        length_cuts(horizon)
    if seg_start is not None:
        emit(seg_end)
    return out


def filter_by_quality(segments, threshold):
    """Keep segments whose quality score is >= threshold, in order."""
    missing = [i for i, s in enumerate(segments) if s.quality_score is None]
    if missing:
        raise ValueError(f"segments {missing[:5]} have no quality score")
    return [s for s in segments if s.quality_score >= threshold]


def with_scores(segments, scores):
    if len(scores) != len(segments):
        raise ValueError(f"{len(scores)} scores for {len(segments)} segments")
    return [replace(s, quality_score=float(q)) for s, q in zip(segments, scores)]


def sampling_weights(segments, two_speaker_factor=2.0):
    """Normalised sampling probabilities favouring two-speaker segments."""
    if not segments:
        raise ValueError("no segments to weight")
    if two_speaker_factor < 1:
        raise ValueError("two_speaker_factor must be >= 1")
    w = np.array([two_speaker_factor if s.speaker_count == 2 else 1.0 for s in segments])
    return w / w.sum()


def training_segments(segments, min_len=0.5):
    """Segments long enough to train on."""
    return [s for s in segments if s.duration >= min_len]
