"""Agatston scoring of a hand-built phantom.

Three lesions on separate slices, one per density band, plus a speck
below the 1 mm^2 area floor that must not count.

    python3 demos/calcium_phantom.py
"""
from ctsurv.cac import agatston
from ctsurv.synth import Lesion, gen_cac_phantom

lesions = [
    Lesion(0, 4, 4, 3, 3, 160.0),   # weight 1
    Lesion(1, 12, 12, 2, 4, 320.0),  # weight 3
    Lesion(2, 20, 6, 4, 4, 650.0),  # weight 4
    Lesion(3, 10, 10, 1, 1, 500.0),  # 0.64 mm^2, below the area floor
]
volume, mask, expected = gen_cac_phantom(lesions, spacing=(0.8, 0.8, 3.0))
report = agatston(volume, mask)

for comp in report.lesions:
    print(f"slice {comp.slice_index}: area {comp.area_mm2:6.2f} mm^2, peak {comp.peak_hu:5.0f} HU, "
          f"weight {comp.weight}, score {comp.score:6.2f}")
print(f"total {report.total_score:.2f} (expected {expected:.2f})")
