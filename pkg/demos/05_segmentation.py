"""CTS vs FWS segmentation of a simulated session's diarization.

Run: python3 demos/05_segmentation.py
"""
from csskit import recipes
from csskit.config import parse_config
from csskit.segment import cts, fws, sampling_weights

cfg = parse_config({})
rec = recipes.longform_corpus(cfg.simulate, seed=0, n=1)[0]
print(f"{len(rec.diarization)} diarization entries over {rec.duration:.1f} s")

segs = cts(rec.diarization)
print("CTS segments:")
for s, w in zip(segs, sampling_weights(segs)):
    print(f"  {s.start:6.2f} - {s.end:6.2f}  speakers {s.speaker_count}  draw prob {w:.3f}")
print(f"FWS: {len(fws(rec.duration))} fixed 4 s windows")
