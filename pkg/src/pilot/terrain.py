"""Procedural heightfield terrains and robot-centric elevation scans.

Terrain profiles are one-dimensional (height as a function of the travel
axis x) and fully determined by (kind, difficulty, seed), so any terrain
can be reconstructed bit-exactly from its config description.  The scan
is an 11-sample line of base-relative heights, the planar stand-in for a
robot-centric elevation map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ARENA_X_MIN = -2.0
ARENA_X_MAX = 12.0
# Featured terrain (risers, slopes, bumps) begins at this x for generated
# terrains, so the spawn region around x=0 is always flat.
FEATURE_START_X = 1.0

SCAN_SAMPLES = 11
SCAN_SPACING = 0.1
SCAN_CLIP = 1.0

KINDS = ("flat", "rough", "slope", "stairs_up", "stairs_down", "platform")

STEP_HEIGHT_MIN = 0.05
STEP_HEIGHT_MAX = 0.17
STEP_RUN_RANGE = (0.25, 0.35)
SLOPE_GRADE_MAX = 0.4
PLATFORM_HEIGHT_MAX = 0.3
PLATFORM_WIDTH = 0.5
PLATFORM_PERIOD = 2.5
ROUGH_AMP_MIN = 0.01
ROUGH_AMP_MAX = 0.08
ROUGH_TILE = 0.2
DEFAULT_NUM_STEPS = 8

_SINE_WEIGHTS = (0.45, 0.30, 0.25)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    """Counter-based integer hash; lets rough tiles be a pure function of x."""
    with np.errstate(over="ignore"):
        z = (x.astype(np.uint64) + np.uint64(0x9E3779B97F4A7C15))
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def _tile_noise(seed: int, idx: np.ndarray) -> np.ndarray:
    """Deterministic uniform values in [-1, 1] per integer tile index."""
    h = _splitmix64(idx.astype(np.int64).view(np.uint64) ^ np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    return h.astype(np.float64) / float(2**64) * 2.0 - 1.0


@dataclass(frozen=True)
class Terrain:
    """A 1-D heightfield profile over the arena span.

    Explicitly constructed terrains default to ``x_start=0`` (features begin
    immediately); ``generate`` places features past a flat lead-in instead.
    """

    kind: str
    difficulty: float = 0.0
    seed: int = 0
    step_height_m: float = 0.1
    step_run_m: float = 0.3
    num_steps: int = DEFAULT_NUM_STEPS
    slope_grade: float = 0.2
    platform_height_m: float = 0.2
    platform_width_m: float = PLATFORM_WIDTH
    platform_period_m: float = PLATFORM_PERIOD
    roughness_m: float = 0.05
    x_start: float = 0.0
    # Rough-terrain sinusoid parameters, derived from the seed by generate().
    rough_freqs: tuple = (1.7, 3.1, 5.3)
    rough_phases: tuple = (0.0, 1.0, 2.0)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown terrain kind: {self.kind!r} (expected one of {KINDS})")
        if not 0.0 <= self.difficulty <= 1.0:
            raise ValueError(f"difficulty must be in [0, 1], got {self.difficulty}")

    def height_at(self, x) -> np.ndarray:
        """Terrain height at abscissa x (scalar or array); x is clamped to the arena."""
        x = np.clip(np.asarray(x, dtype=np.float64), ARENA_X_MIN, ARENA_X_MAX)
        return _height(self, x)

    def spawn_height(self) -> float:
        return float(self.height_at(0.0))


def _height(t: Terrain, x: np.ndarray) -> np.ndarray:
    rel = x - t.x_start
    if t.kind == "flat":
        return np.zeros_like(x)
    if t.kind == "slope":
        return t.slope_grade * np.maximum(0.0, rel)
    if t.kind == "stairs_up":
        k = np.floor(rel / t.step_run_m)
        return t.step_height_m * np.clip(k, 0.0, t.num_steps)
    if t.kind == "stairs_down":
        k = np.floor(rel / t.step_run_m) + 1.0
        return t.step_height_m * np.clip(t.num_steps - k, 0.0, t.num_steps)
    if t.kind == "platform":
        u = np.mod(rel, t.platform_period_m)
        on = (rel >= 0.0) & (u >= 1.0) & (u < 1.0 + t.platform_width_m)
        return np.where(on, t.platform_height_m, 0.0)
    if t.kind == "rough":
        h = np.zeros_like(x)
        for w, f, p in zip(_SINE_WEIGHTS, t.rough_freqs, t.rough_phases):
            h = h + w * np.sin(f * rel + p)
        tiles = _tile_noise(t.seed, np.floor(rel / ROUGH_TILE))
        h = t.roughness_m * (h + 0.5 * tiles)
        return np.where(rel >= 0.0, h, 0.0)
    raise ValueError(f"unknown terrain kind: {t.kind!r}")


def generate(kind: str, difficulty: float, seed: int) -> Terrain:
    """Build a terrain whose feature scale grows monotonically with difficulty."""
    if kind not in KINDS:
        raise ValueError(f"unknown terrain kind: {kind!r} (expected one of {KINDS})")
    if not 0.0 <= difficulty <= 1.0:
        raise ValueError(f"difficulty must be in [0, 1], got {difficulty}")
    rng = np.random.Generator(np.random.PCG64([seed & 0xFFFFFFFF, KINDS.index(kind)]))
    step_h = STEP_HEIGHT_MIN + difficulty * (STEP_HEIGHT_MAX - STEP_HEIGHT_MIN)
    step_run = float(rng.uniform(*STEP_RUN_RANGE))
    grade = 0.05 + difficulty * (SLOPE_GRADE_MAX - 0.05)
    plat_h = min(PLATFORM_HEIGHT_MAX, 0.1 + 0.2 * difficulty)
    amp = ROUGH_AMP_MIN + difficulty * (ROUGH_AMP_MAX - ROUGH_AMP_MIN)
    freqs = tuple(float(f) for f in rng.uniform(1.0, 6.0, size=3))
    phases = tuple(float(p) for p in rng.uniform(0.0, 2.0 * np.pi, size=3))
    return Terrain(
        kind=kind,
        difficulty=difficulty,
        seed=seed,
        step_height_m=step_h,
        step_run_m=step_run,
        slope_grade=grade,
        platform_height_m=plat_h,
        roughness_m=amp,
        x_start=FEATURE_START_X,
        rough_freqs=freqs,
        rough_phases=phases,
    )


def height_at(terrain: Terrain, x) -> np.ndarray:
    return terrain.height_at(x)


@dataclass(frozen=True)
class ElevationScan:
    """Base-relative terrain heights at 11 samples, 0.1 m apart, centered on the base."""

    values: np.ndarray
    spacing: float = SCAN_SPACING
    origin: float = 0.0


def scan(terrain: Terrain, base_x: float, base_z: float) -> ElevationScan:
    """Sample clip(base_z - h(x_i), -1, 1) at x_i = base_x + (i - 5) * 0.1."""
    offs = (np.arange(SCAN_SAMPLES) - SCAN_SAMPLES // 2) * SCAN_SPACING
    xs = base_x + offs
    vals = np.clip(base_z - terrain.height_at(xs), -SCAN_CLIP, SCAN_CLIP)
    return ElevationScan(values=vals, origin=float(xs[0]))


def from_config(cfg: dict) -> Terrain:
    """Build a terrain from config keys: kind, difficulty, seed + optional explicit params."""
    kind = cfg.get("kind", "flat")
    t = generate(kind, float(cfg.get("difficulty", 0.0)), int(cfg.get("seed", 0)))
    overrides = {}
    for key in ("step_height_m", "step_run_m", "slope_grade", "platform_height_m",
                "platform_width_m", "roughness_m", "x_start", "num_steps"):
        if key in cfg:
            overrides[key] = cfg[key]
    if overrides:
        from dataclasses import replace
        t = replace(t, **overrides)
    return t


class TerrainBatch:
    """Stacked per-env terrains supporting vectorized height queries.

    Heights are evaluated kind-by-kind over boolean masks, so a batch may
    mix arbitrary terrain kinds without per-env Python loops in the hot path.
    """

    def __init__(self, terrains: list[Terrain]):
        self.terrains = list(terrains)
        self._rebuild()

    def _rebuild(self):
        ts = self.terrains
        n = len(ts)
        self.n = n
        self.kind_ids = np.array([KINDS.index(t.kind) for t in ts], dtype=np.int64)
        self.x_start = np.array([t.x_start for t in ts])
        self.step_h = np.array([t.step_height_m for t in ts])
        self.step_run = np.array([t.step_run_m for t in ts])
        self.num_steps = np.array([t.num_steps for t in ts], dtype=np.float64)
        self.grade = np.array([t.slope_grade for t in ts])
        self.plat_h = np.array([t.platform_height_m for t in ts])
        self.plat_w = np.array([t.platform_width_m for t in ts])
        self.plat_p = np.array([t.platform_period_m for t in ts])
        self.amp = np.array([t.roughness_m for t in ts])
        self.seeds = np.array([t.seed for t in ts], dtype=np.int64)
        self.freqs = np.array([t.rough_freqs for t in ts])   # (n, 3)
        self.phases = np.array([t.rough_phases for t in ts])  # (n, 3)

    def replace(self, idx: np.ndarray, terrains: list[Terrain]):
        for i, t in zip(np.atleast_1d(idx), terrains):
            self.terrains[int(i)] = t
        self._rebuild()

    def height(self, x: np.ndarray) -> np.ndarray:
        """Heights for per-env query points; x has shape (n,) or (n, k)."""
        x = np.clip(np.asarray(x, dtype=np.float64), ARENA_X_MIN, ARENA_X_MAX)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[:, None]
        expand = lambda a: a[:, None]
        rel = x - expand(self.x_start)
        out = np.zeros_like(x)

        m = self.kind_ids == KINDS.index("slope")
        if m.any():
            out[m] = (expand(self.grade) * np.maximum(0.0, rel))[m]
        m = self.kind_ids == KINDS.index("stairs_up")
        if m.any():
            k = np.floor(rel / expand(self.step_run))
            out[m] = (expand(self.step_h) * np.clip(k, 0.0, expand(self.num_steps)))[m]
        m = self.kind_ids == KINDS.index("stairs_down")
        if m.any():
            k = np.floor(rel / expand(self.step_run)) + 1.0
            out[m] = (expand(self.step_h) * np.clip(expand(self.num_steps) - k, 0.0,
                                                    expand(self.num_steps)))[m]
        m = self.kind_ids == KINDS.index("platform")
        if m.any():
            u = np.mod(rel, expand(self.plat_p))
            on = (rel >= 0.0) & (u >= 1.0) & (u < 1.0 + expand(self.plat_w))
            out[m] = np.where(on, expand(self.plat_h), 0.0)[m]
        m = self.kind_ids == KINDS.index("rough")
        if m.any():
            h = np.zeros_like(x)
            for j, w in enumerate(_SINE_WEIGHTS):
                h += w * np.sin(self.freqs[:, j][:, None] * rel + self.phases[:, j][:, None])
            idx = np.floor(rel / ROUGH_TILE).astype(np.int64)
            mixed = (idx ^ self.seeds[:, None]).view(np.uint64)
            tiles = _splitmix64(mixed).astype(np.float64) / float(2**64) * 2.0 - 1.0
            h = expand(self.amp) * (h + 0.5 * tiles)
            out[m] = np.where(rel >= 0.0, h, 0.0)[m]
        return out[:, 0] if squeeze else out

    def spawn_heights(self) -> np.ndarray:
        return self.height(np.zeros(self.n))

    def scans(self, base_x: np.ndarray, base_z: np.ndarray) -> np.ndarray:
        """(n, 11) base-relative heights, clipped to [-1, 1]."""
        offs = (np.arange(SCAN_SAMPLES) - SCAN_SAMPLES // 2) * SCAN_SPACING
        xs = base_x[:, None] + offs[None, :]
        return np.clip(base_z[:, None] - self.height(xs), -SCAN_CLIP, SCAN_CLIP)
