"""Synthetic cohorts and calcium phantoms with known ground truth."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .cac import HU_THRESHOLD, MIN_AREA_MM2, density_weight
from .dataio import FeatureTable, Mask, OutcomeTable, Volume


@dataclass(frozen=True)
class BatchEffect:
    fraction: float
    shift: float = 0.0
    scale: float = 1.0
    name: str | None = None


@dataclass(frozen=True)
class CohortSpec:
    """Weibull proportional-hazards cohort.

    Features ``x0..`` are standard normal; the first ``len(beta)`` drive the
    hazard and ``n_noise`` extra columns carry no signal. Batch effects are
    applied to the features listed in ``batch_features`` (all by default)
    after outcomes are drawn.
    """

    n_subjects: int
    beta: tuple[float, ...] = (1.0, -0.5)
    weibull_shape: float = 1.0
    weibull_scale: float = 36.0
    censoring_rate: float = 0.3
    batches: tuple[BatchEffect, ...] = (BatchEffect(1.0),)
    n_noise: int = 0
    batch_features: tuple[int, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.weibull_shape <= 0 or self.weibull_scale <= 0:
            raise ValueError("Weibull shape and scale must be > 0")
        if not 0 <= self.censoring_rate < 1:
            raise ValueError("censoring_rate must be in [0, 1)")
        if abs(sum(b.fraction for b in self.batches) - 1.0) > 1e-9:
            raise ValueError("batch fractions must sum to 1")
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        object.__setattr__(
            self, "batches", tuple(b if isinstance(b, BatchEffect) else BatchEffect(**b) for b in self.batches)
        )

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d["batches"] = tuple(BatchEffect(**b) for b in d.get("batches", [{"fraction": 1.0}]))
        if "batch_features" in d and d["batch_features"] is not None:
            d["batch_features"] = tuple(d["batch_features"])
        return cls(**d)

    def to_json(self):
        return json.dumps(asdict(self), indent=1)


@dataclass
class GroundTruth:
    beta: np.ndarray
    linear_predictor: np.ndarray
    clean_features: np.ndarray
    event_time: np.ndarray
    censor_time: np.ndarray
    batch_params: dict = field(default_factory=dict)
    censoring_achieved: float = 0.0


def _calibrate_censoring(T, V, target, n):
    """Scale ``c`` so that ``mean(c * V < T)`` hits ``target``."""
    if target == 0:
        return math.inf, 0.0
    rate = lambda c: float(np.mean(c * V < T))
    lo, hi = 0.0, 1.0
    while rate(hi) > target:
        hi *= 2.0
        if hi > 1e12:
            break
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if rate(mid) > target:
            lo = mid
        else:
            hi = mid
    # the rate is a step function of c; take the closer side
    c = lo if abs(rate(lo) - target) < abs(rate(hi) - target) else hi
    achieved = rate(c)
    if abs(achieved - target) > 0.05:
        raise ValueError(f"censoring target {target} unachievable (closest {achieved:.3f} at n={n})")
    return c, achieved


def gen_cohort(spec: CohortSpec):
    """Draw ``(FeatureTable, OutcomeTable, GroundTruth)``.

    Event times invert the Weibull PH survival
    ``S(t|x) = exp(-(t/scale)^shape * exp(beta.x))``; censoring is uniform
    on ``(0, c)`` with ``c`` calibrated to the target rate.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n_subjects
    beta = np.array(spec.beta)
    p = beta.size + spec.n_noise
    X = rng.standard_normal((n, p))
    lp = X[:, : beta.size] @ beta
    U = rng.uniform(size=n)
    T = spec.weibull_scale * (-np.log(U) / np.exp(lp)) ** (1.0 / spec.weibull_shape)
    V = rng.uniform(size=n)
    c, achieved = _calibrate_censoring(T, V, spec.censoring_rate, n)
    C = c * V if np.isfinite(c) else np.full(n, np.inf)
    time = np.minimum(T, C)
    event = (T <= C).astype(int)

    # batch assignment by exact counts, then effects on the chosen features
    counts = np.floor([b.fraction * n for b in spec.batches]).astype(int)
    counts[0] += n - counts.sum()
    labels = np.repeat(np.arange(len(spec.batches)), counts)
    labels = rng.permutation(labels)
    names = [b.name or f"B{k}" for k, b in enumerate(spec.batches)]
    cols = list(range(p)) if spec.batch_features is None else list(spec.batch_features)
    Xb = X.copy()
    for k, b in enumerate(spec.batches):
        rows = labels == k
        Xb[np.ix_(rows, cols)] = Xb[np.ix_(rows, cols)] * b.scale + b.shift

    width = len(str(n - 1))
    ids = tuple(f"S{i:0{width}d}" for i in range(n))
    features = FeatureTable(ids, tuple(f"x{j}" for j in range(p)), Xb, tuple(names[k] for k in labels))
    outcomes = OutcomeTable(ids, time, event)
    truth = GroundTruth(
        beta=beta,
        linear_predictor=lp,
        clean_features=X,
        event_time=T,
        censor_time=C,
        batch_params={names[k]: {"shift": b.shift, "scale": b.scale} for k, b in enumerate(spec.batches)},
        censoring_achieved=achieved,
    )
    return features, outcomes, truth


@dataclass(frozen=True)
class Lesion:
    """Axis-aligned block on slice ``z`` covering rows ``y:y+h`` and columns ``x:x+w``."""

    z: int
    y: int
    x: int
    h: int
    w: int
    hu: float


def _touches(a: Lesion, b: Lesion) -> bool:
    # 8-connectivity: blocks within one voxel of each other on a slice merge
    if a.z != b.z:
        return False
    return not (a.y + a.h < b.y or b.y + b.h < a.y or a.x + a.w < b.x or b.x + b.w < a.x)


def gen_cac_phantom(lesions, shape=(4, 32, 32), spacing=(1.0, 1.0, 3.0), background=-50.0):
    """Volume, artery mask and the Agatston score expected from the lesion list.

    ``shape`` is ``(nz, ny, nx)``; ``spacing`` is ``(sx, sy, sz)``. Lesions
    on the same slice must not touch (including diagonally), so each is
    exactly one connected component.
    """
    lesions = [l if isinstance(l, Lesion) else Lesion(**l) for l in lesions]
    nz, ny, nx = shape
    vol = np.full(shape, float(background), dtype=np.float32)
    mask = np.zeros(shape, dtype=bool)
    for i, a in enumerate(lesions):
        if not (0 <= a.z < nz and 0 <= a.y and a.y + a.h <= ny and 0 <= a.x and a.x + a.w <= nx):
            raise ValueError(f"lesion {a} out of bounds")
        if a.h < 1 or a.w < 1:
            raise ValueError(f"lesion {a} is empty")
        for b in lesions[:i]:
            if _touches(a, b):
                raise ValueError(f"lesions {b} and {a} overlap or touch")
    for a in lesions:
        vol[a.z, a.y:a.y + a.h, a.x:a.x + a.w] = a.hu
        mask[a.z, max(a.y - 1, 0):a.y + a.h + 1, max(a.x - 1, 0):a.x + a.w + 1] = True
    sx, sy, _ = spacing
    scores = []
    for a in lesions:
        hu = float(np.float32(a.hu))
        area = a.h * a.w * (sx * sy)
        if hu >= HU_THRESHOLD and area >= MIN_AREA_MM2:
            scores.append(area * density_weight(hu))
    return Volume(vol, spacing), Mask(mask, spacing), math.fsum(scores)


def random_phantom(rng, shape=(4, 32, 32), spacing=None, max_lesions=8):
    """Random non-touching lesion list, for property tests."""
    nz, ny, nx = shape
    if spacing is None:
        s = float(rng.choice([0.5, 0.6, 0.7, 0.8, 1.0]))
        spacing = (s, s, 3.0)
    lesions = []
    for _ in range(int(rng.integers(0, max_lesions + 1))):
        h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        cand = Lesion(
            int(rng.integers(0, nz)),
            int(rng.integers(0, ny - h + 1)),
            int(rng.integers(0, nx - w + 1)),
            h,
            w,
            float(rng.choice([100.0, 129.0, 130.0, 150.0, 199.0, 200.0, 250.0, 300.0, 399.0, 400.0, 800.0])),
        )
        if not any(_touches(cand, b) for b in lesions):
            lesions.append(cand)
    return lesions, spacing
