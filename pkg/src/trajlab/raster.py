"""Bird's-eye-view rasterization of agent-frame scenes.

Pixel convention: column grows with +x (forward), row grows with -y, so the
image reads like a map with the agent driving to the right. Pixel ``(r, c)``
has its center at ``cfg.pixel_to_world(r, c)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from trajlab.errors import ConfigurationError
from trajlab.scenegen import Scene

KINDS = ("drivable", "lane", "ped_crossing", "walkway", "agents")
EDGE_EPS = 1e-9
LANE_STROKE_FRACTION = 0.25

DEFAULT_COLORS = {
    "drivable": (0.25, 0.25, 0.70),
    "lane": (1.00, 0.85, 0.20),
    "ped_crossing": (0.60, 0.20, 0.60),
    "walkway": (0.20, 0.60, 0.25),
    "agents": (0.95, 0.95, 0.95),
    "target": (1.00, 0.10, 0.10),
}


@dataclass
class RasterConfig:
    size_px: int = 64
    extent_m: float = 120.0
    target_offset: tuple = (0.25, 0.5)
    color_table: dict = field(default_factory=lambda: dict(DEFAULT_COLORS))

    def __post_init__(self):
        if int(self.size_px) != self.size_px or self.size_px < 8:
            raise ConfigurationError("size_px must be an integer >= 8")
        self.size_px = int(self.size_px)
        if not (np.isfinite(self.extent_m) and self.extent_m > 0):
            raise ConfigurationError("extent_m must be positive and finite")
        self.target_offset = tuple(float(v) for v in self.target_offset)
        missing = set(KINDS) - set(self.color_table)
        if missing:
            raise ConfigurationError(f"color_table lacks {sorted(missing)}")

    @property
    def meters_per_pixel(self) -> float:
        return self.extent_m / self.size_px

    @property
    def origin(self) -> tuple[float, float]:
        """World coordinates of the image's left and top edges."""
        fx, fy = self.target_offset
        return -fx * self.extent_m, (1.0 - fy) * self.extent_m

    def world_to_pixel(self, points: np.ndarray) -> np.ndarray:
        """Continuous (row, col) coordinates; pixel centers land on integers."""
        pts = np.asarray(points, dtype=np.float64)
        x0, y0 = self.origin
        mpp = self.meters_per_pixel
        col = (pts[..., 0] - x0) / mpp - 0.5
        row = (y0 - pts[..., 1]) / mpp - 0.5
        return np.stack([row, col], axis=-1)

    def pixel_to_world(self, rows, cols) -> np.ndarray:
        x0, y0 = self.origin
        mpp = self.meters_per_pixel
        x = x0 + (np.asarray(cols, dtype=np.float64) + 0.5) * mpp
        y = y0 - (np.asarray(rows, dtype=np.float64) + 0.5) * mpp
        return np.stack([x, y], axis=-1)

    def pixel_centers(self) -> np.ndarray:
        """(size, size, 2) world coordinates of every pixel center."""
        r, c = np.meshgrid(np.arange(self.size_px), np.arange(self.size_px), indexing="ij")
        return self.pixel_to_world(r, c)

    def nearest_pixel(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Nearest pixel indices plus an in-window flag for each point."""
        rc = np.rint(self.world_to_pixel(points)).astype(np.int64)
        inside = np.all((rc >= 0) & (rc < self.size_px), axis=-1)
        rc = np.clip(rc, 0, self.size_px - 1)
        return rc[..., 0], rc[..., 1], inside

    def to_dict(self) -> dict:
        return {
            "size_px": self.size_px,
            "extent_m": float(self.extent_m),
            "target_offset": list(self.target_offset),
            "color_table": {k: list(v) for k, v in sorted(self.color_table.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RasterConfig":
        kw = dict(d)
        if "color_table" in kw:
            kw["color_table"] = {**DEFAULT_COLORS, **{k: tuple(v) for k, v in kw["color_table"].items()}}
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None


@dataclass(frozen=True)
class LayerSpec:
    kinds: tuple

    def __post_init__(self):
        kinds = tuple(self.kinds)
        if not kinds:
            raise ValueError("LayerSpec needs at least one kind")
        unknown = [k for k in kinds if k not in KINDS]
        if unknown:
            raise ValueError(f"unknown layer kinds {unknown}")
        if len(set(kinds)) != len(kinds):
            raise ValueError(f"duplicate kinds in {kinds}")
        object.__setattr__(self, "kinds", kinds)

    @property
    def name(self) -> str:
        return "+".join(self.kinds)

    @classmethod
    def parse(cls, text: str) -> "LayerSpec":
        return cls(tuple(t.strip() for t in text.split("+") if t.strip()))


# Backbone inputs, numbered as in the layer ablation: 1 drivable+lane,
# 2 agents+lane, 3 drivable, 4 agents. Agents are listed last so they paint
# over the static layers.
DEFAULT_SPECS = (
    LayerSpec(("drivable", "lane")),
    LayerSpec(("lane", "agents")),
    LayerSpec(("drivable",)),
    LayerSpec(("agents",)),
)
LAYER_LABELS = {1: "drivable+lane", 2: "agents+lane", 3: "drivable", 4: "agents"}


def specs_for_subset(subset) -> list[LayerSpec]:
    """Map 1-based layer numbers to default specs, e.g. (1, 2, 4)."""
    out = []
    for i in subset:
        if not 1 <= int(i) <= len(DEFAULT_SPECS):
            raise ConfigurationError(f"layer number {i} outside 1..{len(DEFAULT_SPECS)}")
        out.append(DEFAULT_SPECS[int(i) - 1])
    return out


@dataclass
class RasterStack:
    specs: list
    grids: np.ndarray  # (N, size, size, 3)

    def __post_init__(self):
        if self.grids.ndim != 4 or self.grids.shape[-1] != 3 or len(self.specs) != len(self.grids):
            raise ValueError("grids must be (N, size, size, 3) with one spec per layer")

    @property
    def layers(self):
        return list(zip(self.specs, self.grids))

    def as_chw(self) -> np.ndarray:
        """(N, 3, size, size) layout for convolutional backbones."""
        return np.ascontiguousarray(self.grids.transpose(0, 3, 1, 2))


# ---------------------------------------------------------------------------
# geometry primitives


def point_in_polygon(point, poly: np.ndarray, eps: float = EDGE_EPS) -> bool:
    """Crossing-number test; points on an edge count as inside."""
    px, py = float(point[0]), float(point[1])
    n = len(poly)
    inside = False
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        dx, dy = x2 - x1, y2 - y1
        seg2 = dx * dx + dy * dy
        t = ((px - x1) * dx + (py - y1) * dy) / seg2 if seg2 > 0 else 0.0
        t = min(max(t, 0.0), 1.0)
        if (px - x1 - t * dx) ** 2 + (py - y1 - t * dy) ** 2 <= eps * eps:
            return True
        if (y1 > py) != (y2 > py):
            x_cross = x1 + (py - y1) * dx / dy
            if px < x_cross:
                inside = not inside
    return inside


def fill_polygon(poly: np.ndarray, cfg: RasterConfig) -> np.ndarray:
    """Boolean mask of pixels whose centers lie inside or on ``poly`` (scanline)."""
    size = cfg.size_px
    mask = np.zeros((size, size), dtype=bool)
    poly = np.asarray(poly, dtype=np.float64)
    x = poly[:, 0]
    y = poly[:, 1]
    x2 = np.roll(x, -1)
    y2 = np.roll(y, -1)
    centers_x = cfg.pixel_to_world(np.zeros(size), np.arange(size))[:, 0]
    centers_y = cfg.pixel_to_world(np.arange(size), np.zeros(size))[:, 1]
    mpp = cfg.meters_per_pixel
    eps = EDGE_EPS

    ymin, ymax = y.min(), y.max()
    for r, yc in enumerate(centers_y):
        if yc < ymin - eps or yc > ymax + eps:
            continue
        # half-open crossing rule for interior spans
        crosses = (y > yc) != (y2 > yc)
        if np.any(crosses):
            xs = x[crosses] + (yc - y[crosses]) * (x2[crosses] - x[crosses]) / (y2[crosses] - y[crosses])
            xs.sort()
            for xa, xb in zip(xs[0::2], xs[1::2]):
                lo = int(np.ceil((xa - eps - centers_x[0]) / mpp))
                hi = int(np.floor((xb + eps - centers_x[0]) / mpp))
                lo, hi = max(lo, 0), min(hi, size - 1)
                if lo <= hi:
                    mask[r, lo:hi + 1] = True
        # boundary pass: centers lying on an edge are inside
        near = (yc >= np.minimum(y, y2) - eps) & (yc <= np.maximum(y, y2) + eps)
        flat = near & (np.abs(y2 - y) <= eps)
        for i in np.flatnonzero(flat & (np.abs(yc - y) <= eps)):
            lo_x, hi_x = min(x[i], x2[i]), max(x[i], x2[i])
            mask[r, (centers_x >= lo_x - eps) & (centers_x <= hi_x + eps)] = True
        sloped = near & ~flat
        if np.any(sloped):
            xe = x[sloped] + (yc - y[sloped]) * (x2[sloped] - x[sloped]) / (y2[sloped] - y[sloped])
            hit = np.abs(centers_x[None, :] - xe[:, None]) <= eps
            mask[r] |= hit.any(axis=0)
    return mask


def stroke_polyline(points: np.ndarray, width: float, cfg: RasterConfig) -> np.ndarray:
    """Pixels whose centers are within ``width / 2`` of the polyline."""
    centers = cfg.pixel_centers().reshape(-1, 2)
    half = 0.5 * width
    mask = np.zeros(len(centers), dtype=bool)
    pts = np.asarray(points, dtype=np.float64)
    for a, b in zip(pts[:-1], pts[1:]):
        d = b - a
        L2 = float(d @ d)
        rel = centers - a
        t = np.clip(rel @ d / L2, 0.0, 1.0) if L2 > 0 else np.zeros(len(centers))
        diff = rel - t[:, None] * d
        mask |= np.einsum("ij,ij->i", diff, diff) <= half * half
    return mask.reshape(cfg.size_px, cfg.size_px)


# ---------------------------------------------------------------------------
# layers


def _paint(grid: np.ndarray, mask: np.ndarray, color) -> None:
    grid[mask] = np.asarray(color, dtype=np.float64)


def rasterize_layer(scene: Scene, spec: LayerSpec, cfg: RasterConfig) -> np.ndarray:
    """Paint ``spec.kinds`` in order (last writer wins) into a (size, size, 3) grid."""
    if not isinstance(spec, LayerSpec):
        spec = LayerSpec(tuple(spec))
    grid = np.zeros((cfg.size_px, cfg.size_px, 3), dtype=np.float64)
    colors = cfg.color_table
    for kind in spec.kinds:
        if kind == "drivable":
            for poly in scene.drivable:
                _paint(grid, fill_polygon(poly, cfg), colors["drivable"])
        elif kind == "ped_crossing":
            for poly in scene.ped_crossings:
                _paint(grid, fill_polygon(poly, cfg), colors["ped_crossing"])
        elif kind == "walkway":
            for poly in scene.walkways:
                _paint(grid, fill_polygon(poly, cfg), colors["walkway"])
        elif kind == "lane":
            for lane in scene.lanes:
                width = max(LANE_STROKE_FRACTION * lane.width, cfg.meters_per_pixel)
                _paint(grid, stroke_polyline(lane.points, width, cfg), colors["lane"])
        elif kind == "agents":
            for agent in scene.agents:
                color = colors.get("target", colors["agents"]) if agent.is_target else colors["agents"]
                _paint(grid, fill_polygon(agent.corners(), cfg), color)
    return grid


def build_stack(scene: Scene, specs=DEFAULT_SPECS, cfg: RasterConfig | None = None) -> RasterStack:
    cfg = cfg or RasterConfig()
    specs = [s if isinstance(s, LayerSpec) else LayerSpec(tuple(s)) for s in specs]
    if not specs:
        raise ValueError("at least one layer spec is required")
    grids = np.stack([rasterize_layer(scene, s, cfg) for s in specs])
    return RasterStack(specs=specs, grids=grids)


def drivable_mask(scene: Scene, cfg: RasterConfig) -> np.ndarray:
    mask = np.zeros((cfg.size_px, cfg.size_px), dtype=bool)
    for poly in scene.drivable:
        mask |= fill_polygon(poly, cfg)
    return mask


def write_ppm(path, grid: np.ndarray) -> Path:
    """Dump a (H, W, 3) grid in [0, 1] as binary P6."""
    path = Path(path)
    data = np.clip(np.rint(np.asarray(grid) * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape[:2]
    with path.open("wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
    return path


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError("not a binary P6 file")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    data = np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return data.astype(np.float64) / maxval


def ppm_name(sample_id: str, spec: LayerSpec) -> str:
    return f"{sample_id}_{spec.name}.ppm"
