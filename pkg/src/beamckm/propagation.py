"""2D beamforming propagation oracle.

Synthesizes ground-truth beam-aware channel maps on a pixel grid: per-pixel
complex channel vectors from a uniform linear array (direct path with
blockage penalty plus optional single specular reflections off axis-aligned
building faces), then beamformed received power in dB.

Geometry convention: pixel (row, col) has center (x, y) = (col, row) in
pixel units; the array sits at the transmitter pixel with its elements along
the x (column) axis, so broadside points along +y (+row) and the steering
angle theta satisfies sin(theta) = dx/d. A forward-facing element pattern
((1 + cos(angle from broadside))/2)^element_gain_exponent breaks the
front-back ambiguity a bare linear array has in 2D; exponent 0 disables it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

Pixel = tuple[int, int]  # (row, col)


@dataclass
class EnvScene:
    """Building occupancy grid plus transmitter placement."""

    width_px: int
    height_px: int
    resolution_m: float
    buildings: np.ndarray          # [height_px, width_px], values in {0,1}
    tx_pos: Pixel                  # (row, col)
    tx_height_m: float = 1.5       # informational only
    scene_id: str = ""

    def __post_init__(self):
        self.buildings = np.asarray(self.buildings, dtype=np.uint8)
        if self.buildings.shape != (self.height_px, self.width_px):
            raise ValueError(f"buildings grid {self.buildings.shape} does not match "
                             f"{self.height_px}x{self.width_px}")
        if not np.isin(self.buildings, (0, 1)).all():
            raise ValueError("buildings grid must be binary")
        r, c = self.tx_pos
        if not (0 <= r < self.height_px and 0 <= c < self.width_px):
            raise ValueError(f"tx_pos {self.tx_pos} outside grid")
        if self.buildings[r, c]:
            raise ValueError(f"tx_pos {self.tx_pos} lies on a building pixel")
        self._has_buildings = bool(self.buildings.any())

    def tx_onehot(self) -> np.ndarray:
        grid = np.zeros((self.height_px, self.width_px), dtype=np.float64)
        grid[self.tx_pos] = 1.0
        return grid


@dataclass
class BeamVector:
    """Complex antenna weights under a total power constraint."""

    weights: np.ndarray
    power_budget: float = 1.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.complex128).reshape(-1)
        power = float(np.sum(np.abs(self.weights) ** 2))
        if power > self.power_budget + 1e-9:
            raise ValueError(f"beam power {power:.6g} exceeds budget {self.power_budget}")

    @property
    def n_antennas(self) -> int:
        return self.weights.shape[0]


@dataclass
class ChannelParams:
    path_loss_exponent: float = 3.0      # eta
    reference_distance_m: float = 1.0    # d0
    shadow_penalty_db: float = 25.0      # per blocked direct path
    reflection_enabled: bool = True
    reflection_loss_db: float = 10.0
    noise_floor_db: float = -math.inf    # sigma^2 in dB; disabled by default
    floor_db: float = -150.0
    element_gain_exponent: float = 1.0   # 0 disables the element pattern
    carrier_ghz: float = 2.4             # informational only

    def __post_init__(self):
        if self.path_loss_exponent <= 0 or self.reference_distance_m <= 0:
            raise ValueError("path_loss_exponent and reference_distance_m must be positive")
        if self.floor_db >= 0:
            raise ValueError("floor_db must be negative")


@dataclass
class ChannelMap:
    """Per-pixel beamformed power in dB with a free-space validity mask."""

    values_db: np.ndarray
    valid_mask: np.ndarray
    beam: BeamVector | None = None
    scene_id: str = ""

    def __post_init__(self):
        self.values_db = np.asarray(self.values_db, dtype=np.float64)
        self.valid_mask = np.asarray(self.valid_mask, dtype=np.uint8)
        if self.values_db.shape != self.valid_mask.shape:
            raise ValueError("map and mask shapes differ")


# ---------------------------------------------------------------------------
# array response


def steering_vector(theta: float, n: int, spacing_ratio: float = 0.5) -> np.ndarray:
    """ULA response exp(-j*2*pi*spacing_ratio*m*sin(theta)), m = 0..n-1."""
    if n < 1 or spacing_ratio <= 0:
        raise ValueError("need n >= 1 and spacing_ratio > 0")
    m = np.arange(n)
    return np.exp(-2j * math.pi * spacing_ratio * m * math.sin(theta))


def _response_from_sin(sin_theta: float, n: int, spacing_ratio: float) -> np.ndarray:
    m = np.arange(n)
    return np.exp(-2j * math.pi * spacing_ratio * m * sin_theta)


# ---------------------------------------------------------------------------
# grid line of sight


def _interior_cells(x0: float, y0: float, x1: float, y1: float,
                    height: int, width: int) -> np.ndarray:
    """Pixels whose interior the open segment crosses with positive length.

    Cell boundaries sit at half-integer coordinates. Crossing parameters are
    collected, zero-length intervals (corner touches) are dropped, and each
    remaining interval's midpoint identifies one cell. Returns [K,2] (row,col).
    """
    dx, dy = x1 - x0, y1 - y0
    ts = [np.array([0.0, 1.0])]
    if dx != 0.0:
        lo, hi = (x0, x1) if x0 < x1 else (x1, x0)
        ks = np.arange(math.floor(lo + 0.5), math.ceil(hi - 0.5)) + 0.5
        ts.append((ks - x0) / dx)
    if dy != 0.0:
        lo, hi = (y0, y1) if y0 < y1 else (y1, y0)
        ks = np.arange(math.floor(lo + 0.5), math.ceil(hi - 0.5)) + 0.5
        ts.append((ks - y0) / dy)
    t = np.sort(np.clip(np.concatenate(ts), 0.0, 1.0))
    spans = np.diff(t)
    keep = spans > 1e-12
    if not keep.any():
        return np.empty((0, 2), dtype=np.int64)
    mids = t[:-1][keep] + spans[keep] / 2.0
    cols = np.floor(x0 + mids * dx + 0.5).astype(np.int64)
    rows = np.floor(y0 + mids * dy + 0.5).astype(np.int64)
    ok = (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width)
    return np.stack([rows[ok], cols[ok]], axis=1)


def los_blocked(scene: EnvScene, a: Pixel, b: Pixel) -> bool:
    """True iff the line between pixel centers crosses a building pixel other
    than a and b themselves."""
    for p in (a, b):
        if not (0 <= p[0] < scene.height_px and 0 <= p[1] < scene.width_px):
            raise ValueError(f"pixel {p} outside grid")
    if not scene._has_buildings:
        return False
    cells = _interior_cells(float(a[1]), float(a[0]), float(b[1]), float(b[0]),
                            scene.height_px, scene.width_px)
    for r, c in cells:
        if (r, c) != a and (r, c) != b and scene.buildings[r, c]:
            return True
    return False


def _path_clear(scene: EnvScene, x0: float, y0: float, x1: float, y1: float,
                exclude: tuple[Pixel, ...]) -> bool:
    cells = _interior_cells(x0, y0, x1, y1, scene.height_px, scene.width_px)
    for r, c in cells:
        if (r, c) in exclude:
            continue
        if scene.buildings[r, c]:
            return False
    return True


# ---------------------------------------------------------------------------
# reflecting walls


@dataclass(frozen=True)
class Wall:
    """Maximal exposed run of axis-aligned building faces.

    axis "x": vertical face on the line x=line spanning y in [lo, hi];
    axis "y": horizontal face on y=line spanning x. side is the sign of the
    free half-space relative to the line.
    """

    axis: str
    line: float
    lo: float
    hi: float
    side: int


def wall_segments(buildings: np.ndarray) -> list[Wall]:
    occ = np.asarray(buildings, dtype=bool)
    h, w = occ.shape
    walls: list[Wall] = []

    def runs(mask_1d: np.ndarray) -> list[tuple[int, int]]:
        idx = np.flatnonzero(mask_1d)
        if idx.size == 0:
            return []
        breaks = np.flatnonzero(np.diff(idx) > 1)
        starts = np.concatenate([[0], breaks + 1])
        ends = np.concatenate([breaks, [idx.size - 1]])
        return [(int(idx[s]), int(idx[e])) for s, e in zip(starts, ends)]

    for c in range(w):
        if c >= 1:
            exposed = occ[:, c] & ~occ[:, c - 1]
            for r0, r1 in runs(exposed):
                walls.append(Wall("x", c - 0.5, r0 - 0.5, r1 + 0.5, -1))
        if c + 1 < w:
            exposed = occ[:, c] & ~occ[:, c + 1]
            for r0, r1 in runs(exposed):
                walls.append(Wall("x", c + 0.5, r0 - 0.5, r1 + 0.5, +1))
    for r in range(h):
        if r >= 1:
            exposed = occ[r, :] & ~occ[r - 1, :]
            for c0, c1 in runs(exposed):
                walls.append(Wall("y", r - 0.5, c0 - 0.5, c1 + 0.5, -1))
        if r + 1 < h:
            exposed = occ[r, :] & ~occ[r + 1, :]
            for c0, c1 in runs(exposed):
                walls.append(Wall("y", r + 0.5, c0 - 0.5, c1 + 0.5, +1))
    return walls


# ---------------------------------------------------------------------------
# channel synthesis


def _element_factor(cos_broadside: float, exponent: float) -> float:
    if exponent == 0.0:
        return 1.0
    return ((1.0 + cos_broadside) / 2.0) ** exponent


def _amplitude(dist_m: float, params: ChannelParams) -> float:
    d0 = params.reference_distance_m
    return (max(dist_m, d0) / d0) ** (-params.path_loss_exponent / 2.0)


def channel_vector(scene: EnvScene, params: ChannelParams, q: Pixel,
                   n_antennas: int, spacing_ratio: float = 0.5,
                   walls: list[Wall] | None = None) -> np.ndarray:
    """Complex channel h(q): attenuated array responses of the direct path
    (shadow-penalized when blocked) plus any clear first-order reflections."""
    r, c = q
    if not (0 <= r < scene.height_px and 0 <= c < scene.width_px):
        raise ValueError(f"pixel {q} outside grid")
    if scene.buildings[r, c]:
        raise ValueError(f"pixel {q} is a building pixel")
    tr, tc = scene.tx_pos
    tx_x, tx_y = float(tc), float(tr)
    q_x, q_y = float(c), float(r)

    dx, dy = q_x - tx_x, q_y - tx_y
    d_px = math.hypot(dx, dy)
    if d_px == 0.0:
        sin_t, cos_b = 0.0, 1.0
    else:
        sin_t, cos_b = dx / d_px, dy / d_px
    g = _amplitude(d_px * scene.resolution_m, params) \
        * _element_factor(cos_b, params.element_gain_exponent)
    if los_blocked(scene, scene.tx_pos, q):
        g *= 10.0 ** (-params.shadow_penalty_db / 20.0)
    h = g * _response_from_sin(sin_t, n_antennas, spacing_ratio)

    if params.reflection_enabled:
        if walls is None:
            walls = wall_segments(scene.buildings)
        refl_scale = 10.0 ** (-params.reflection_loss_db / 20.0)
        for wall in walls:
            if wall.axis == "x":
                a_t, a_q, o_t, o_q = tx_x, q_x, tx_y, q_y
            else:
                a_t, a_q, o_t, o_q = tx_y, q_y, tx_x, q_x
            ft, fq = wall.side * (a_t - wall.line), wall.side * (a_q - wall.line)
            if ft <= 1e-9 or fq <= 1e-9:
                continue
            tpar = ft / (ft + fq)
            r_o = o_t + tpar * (o_q - o_t)
            if not (wall.lo <= r_o <= wall.hi):
                continue
            if wall.axis == "x":
                rx, ry = wall.line, r_o
            else:
                rx, ry = r_o, wall.line
            tx_cell = scene.tx_pos
            if not _path_clear(scene, tx_x, tx_y, rx, ry, (tx_cell,)):
                continue
            if not _path_clear(scene, rx, ry, q_x, q_y, (q,)):
                continue
            leg1 = math.hypot(rx - tx_x, ry - tx_y)
            leg2 = math.hypot(q_x - rx, q_y - ry)
            if leg1 == 0.0:
                continue
            sin_r = (rx - tx_x) / leg1
            cos_r = (ry - tx_y) / leg1
            g_ref = _amplitude((leg1 + leg2) * scene.resolution_m, params) \
                * _element_factor(cos_r, params.element_gain_exponent) * refl_scale
            h = h + g_ref * _response_from_sin(sin_r, n_antennas, spacing_ratio)
    return h


def beam_gain_db(h: np.ndarray, w: BeamVector | np.ndarray, floor_db: float) -> float:
    """Beamformed receive power 10*log10(|h^H w|^2), clamped at floor_db."""
    wv = w.weights if isinstance(w, BeamVector) else np.asarray(w)
    h = np.asarray(h)
    if h.shape != wv.shape:
        raise ValueError(f"length mismatch: h {h.shape} vs w {wv.shape}")
    power = abs(np.sum(np.conj(h) * wv)) ** 2
    if power <= 0.0:
        return floor_db
    return max(10.0 * math.log10(power), floor_db)


def channel_field(scene: EnvScene, params: ChannelParams, n_antennas: int,
                  spacing_ratio: float = 0.5) -> np.ndarray:
    """h(q) for every free pixel, zeros on buildings; [H, W, n_antennas]."""
    walls = wall_segments(scene.buildings) if params.reflection_enabled else []
    out = np.zeros((scene.height_px, scene.width_px, n_antennas), dtype=np.complex128)
    for r in range(scene.height_px):
        for c in range(scene.width_px):
            if not scene.buildings[r, c]:
                out[r, c] = channel_vector(scene, params, (r, c), n_antennas,
                                           spacing_ratio, walls=walls)
    return out


def generate_ckm(scene: EnvScene, params: ChannelParams, w: BeamVector,
                 spacing_ratio: float = 0.5,
                 field: np.ndarray | None = None) -> ChannelMap:
    """Ground-truth beam-aware map: per-pixel beam gain over free space,
    floor value and mask 0 on building pixels.

    `field` may carry a precomputed channel_field (beams share it)."""
    if field is None:
        field = channel_field(scene, params, w.n_antennas, spacing_ratio)
    occupied = scene.buildings.astype(bool)
    values = np.full((scene.height_px, scene.width_px), params.floor_db)
    noise = 10.0 ** (params.noise_floor_db / 10.0) \
        if math.isfinite(params.noise_floor_db) else 0.0
    wv = w.weights
    # per-pixel beam_gain_db so the map matches independent per-pixel calls exactly
    for r in range(scene.height_px):
        for c in range(scene.width_px):
            if occupied[r, c]:
                continue
            if noise:
                power = abs(np.sum(np.conj(field[r, c]) * wv)) ** 2 + noise
                values[r, c] = max(10.0 * math.log10(power), params.floor_db)
            else:
                values[r, c] = beam_gain_db(field[r, c], wv, params.floor_db)
    mask = (~occupied).astype(np.uint8)
    return ChannelMap(values_db=values, valid_mask=mask, beam=w, scene_id=scene.scene_id)


def make_random_beam(rng: np.random.Generator, n_antennas: int,
                     theta_range: tuple[float, float] = (-math.pi / 2, math.pi / 2),
                     perturb_sigma: float = 0.1, power_budget: float = 1.0,
                     spacing_ratio: float = 0.5) -> BeamVector:
    """Steering vector at a uniform random angle plus complex Gaussian
    perturbation (std perturb_sigma per element), renormalized to the budget."""
    theta = rng.uniform(*theta_range)
    w = steering_vector(theta, n_antennas, spacing_ratio)
    noise = rng.standard_normal(n_antennas) + 1j * rng.standard_normal(n_antennas)
    w = w + perturb_sigma / math.sqrt(2.0) * noise
    w = w * math.sqrt(power_budget) / np.linalg.norm(w)
    return BeamVector(weights=w, power_budget=power_budget)


def db_to_unit(db: np.ndarray, floor_db: float, ceiling_db: float = 0.0) -> np.ndarray:
    """Map dB values to [0,1] for the VAE's sigmoid range."""
    return np.clip((db - floor_db) / (ceiling_db - floor_db), 0.0, 1.0)


def unit_to_db(unit: np.ndarray, floor_db: float, ceiling_db: float = 0.0) -> np.ndarray:
    return unit * (ceiling_db - floor_db) + floor_db
