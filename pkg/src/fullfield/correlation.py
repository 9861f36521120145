"""2D subset-matching engine.

A square reference subset (default 35 px) is tracked into a target image by
minimizing the zero-normalized sum of squared differences (ZNSSD) over a
6-parameter first-order warp, refined with inverse-compositional
Gauss-Newton.  Fields are computed on a step lattice (default 6 px): the
first target frame is solved by seeding one point and propagating best-first
by neighbor correlation quality; later frames chain from the previous
frame's solution, which makes every point independent and keeps results
bitwise identical for any worker count.
"""

from __future__ import annotations

import csv
import heapq
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from . import _icgn
from .errors import InputFormatError, NumericalError
from .imaging import GrayImage

# Status values mirrored from the compiled core.
ST_CONVERGED = _icgn.CONVERGED
ST_MAX_ITERS = _icgn.MAX_ITERS
ST_OUT_OF_BOUNDS = _icgn.OUT_OF_BOUNDS
ST_FLAT_TARGET = _icgn.FLAT_TARGET
ST_SINGULAR = _icgn.SINGULAR_HESSIAN
ST_FLAT_REFERENCE = _icgn.FLAT_REFERENCE
ST_DIVERGED = _icgn.DIVERGED
ST_SKIPPED = _icgn.SKIPPED

FIELD_CSV_HEADER = ("frame,t_s,ix,iy,x_px,y_px,u_px,v_px,"
                    "dudx,dudy,dvdx,dvdy,zncc,valid")


@dataclass(frozen=True)
class CorrelationConfig:
    """Engine knobs; defaults follow the deployed measurement settings."""

    subset_px: int = 35
    step_px: int = 6
    max_iters: int = 50
    convergence_tol: float = 1e-4
    znssd_valid_max: float = 0.4
    min_subset_std: float = 0.02
    search_radius_px: int = 10

    def __post_init__(self):
        problems = []
        if self.subset_px < 11 or self.subset_px % 2 == 0:
            problems.append("subset_px must be odd and >= 11")
        if self.step_px < 1:
            problems.append("step_px must be >= 1")
        if not self.convergence_tol > 0:
            problems.append("convergence_tol must be > 0")
        if self.max_iters < 1:
            problems.append("max_iters must be >= 1")
        if not 0 < self.znssd_valid_max <= 4:
            problems.append("znssd_valid_max must be in (0, 4]")
        if self.search_radius_px < 0:
            problems.append("search_radius_px must be >= 0")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def half(self) -> int:
        return self.subset_px // 2


@dataclass
class SubsetWarp:
    """First-order subset warp p = (u, du/dx, du/dy, v, dv/dx, dv/dy).

    Local coordinates (xi, eta) map to (xi + u + ux*xi + uy*eta,
    eta + v + vx*xi + vy*eta).
    """

    u: float = 0.0
    dudx: float = 0.0
    dudy: float = 0.0
    v: float = 0.0
    dvdx: float = 0.0
    dvdy: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.u, self.dudx, self.dudy,
                         self.v, self.dvdx, self.dvdy])

    @classmethod
    def from_array(cls, p) -> "SubsetWarp":
        return cls(*(float(x) for x in p))

    def displace(self, xi, eta):
        """Warped local coordinates for offsets (xi, eta) from the center."""
        return (xi + self.u + self.dudx * xi + self.dudy * eta,
                eta + self.v + self.dvdx * xi + self.dvdy * eta)


@dataclass
class SubsetResult:
    center: tuple[int, int]
    warp: SubsetWarp
    cost: float
    zncc: float
    iterations: int
    valid: bool
    status: int = ST_CONVERGED


class DisplacementField2D:
    """Per-lattice-point subset results for one target frame.

    Struct-of-arrays layout, (ny, nx) grids; lattice point (ix, iy) sits at
    pixel (x0 + ix * step, y0 + iy * step) of the reference image.
    """

    def __init__(self, origin, step, nx, ny, frame_index=0, t_s=0.0):
        self.x0, self.y0 = int(origin[0]), int(origin[1])
        self.step = int(step)
        self.nx, self.ny = int(nx), int(ny)
        self.frame_index = int(frame_index)
        self.t_s = float(t_s)
        self.p = np.zeros((ny, nx, 6))
        self.cost = np.full((ny, nx), 4.0)
        self.zncc = np.full((ny, nx), -1.0)
        self.iterations = np.zeros((ny, nx), dtype=np.int32)
        self.status = np.full((ny, nx), ST_SKIPPED, dtype=np.int32)
        self.valid = np.zeros((ny, nx), dtype=bool)

    @property
    def shape(self):
        return (self.ny, self.nx)

    def xs(self) -> np.ndarray:
        return self.x0 + self.step * np.arange(self.nx)

    def ys(self) -> np.ndarray:
        return self.y0 + self.step * np.arange(self.ny)

    @property
    def u(self) -> np.ndarray:
        return self.p[:, :, 0]

    @property
    def v(self) -> np.ndarray:
        return self.p[:, :, 3]

    def point(self, ix: int, iy: int) -> SubsetResult:
        return SubsetResult(
            center=(self.x0 + ix * self.step, self.y0 + iy * self.step),
            warp=SubsetWarp.from_array(self.p[iy, ix]),
            cost=float(self.cost[iy, ix]),
            zncc=float(self.zncc[iy, ix]),
            iterations=int(self.iterations[iy, ix]),
            valid=bool(self.valid[iy, ix]),
            status=int(self.status[iy, ix]),
        )


# ---------------------------------------------------------------------------
# Zero-normalized criteria on raw sample vectors


def _normalized(samples, name):
    a = np.asarray(samples, dtype=np.float64).ravel()
    if a.size < 2:
        raise ValueError(f"{name} needs at least 2 samples")
    z = a - a.mean()
    norm = float(np.linalg.norm(z))
    if norm < 1e-15:
        raise NumericalError(f"{name} has zero variance (uncorrelatable)")
    return z / norm


def zncc(ref_samples, def_samples) -> float:
    """Zero-normalized cross-correlation of two equal-length sample sets."""
    r = _normalized(ref_samples, "ref_samples")
    g = _normalized(def_samples, "def_samples")
    if r.size != g.size:
        raise ValueError("sample lists must have equal length")
    return float(np.dot(r, g))


def znssd(ref_samples, def_samples) -> float:
    """ZNSSD cost in [0, 4]; equals 2 * (1 - zncc) and is invariant to
    positive gain and offset in either argument."""
    return 2.0 * (1.0 - zncc(ref_samples, def_samples))


# ---------------------------------------------------------------------------
# Single-subset operations


def _check_subset_interior(image: GrayImage, center, half, slack=0):
    cx, cy = int(center[0]), int(center[1])
    if (cx - half - slack < 0 or cx + half + slack > image.width - 1
            or cy - half - slack < 0 or cy + half + slack > image.height - 1):
        raise ValueError(
            f"subset at ({cx}, {cy}) with half-width {half} (+{slack}) is not "
            f"interior to a {image.width}x{image.height} image"
        )
    return cx, cy


def integer_search(ref: GrayImage, dfm: GrayImage, center,
                   search_radius_px: int, cfg: CorrelationConfig):
    """Integer offset maximizing ZNCC inside the search window.

    Ties resolve to the earliest offset scanned row-major from
    (-r, -r).  Raises when the window leaves the image or the reference
    subset is flat.
    """
    half = cfg.half
    cx, cy = _check_subset_interior(ref, center, half)
    r = int(search_radius_px)
    if (cx - half - r < 0 or cx + half + r > dfm.width - 1
            or cy - half - r < 0 or cy + half + r > dfm.height - 1):
        raise ValueError("search window exceeds the target image")
    dx, dy, z, ok = _icgn.integer_search_core(
        ref.intensities, dfm.intensities, cx, cy, half, r)
    if not ok:
        raise NumericalError("flat reference subset in integer search")
    return int(dx), int(dy)


def icgn_refine(ref: GrayImage, dfm: GrayImage, center,
                init: SubsetWarp | None, cfg: CorrelationConfig) -> SubsetResult:
    """Refine one subset warp; failures come back as an invalid result."""
    half = cfg.half
    cx, cy = _check_subset_interior(ref, center, half)
    interp = dfm.spline()
    gx, gy = ref.spline().gradient_images()
    p = (init.as_array() if init is not None else np.zeros(6))
    cost, z, iters, status = _icgn.refine_subset(
        ref.intensities, gx, gy, interp.cpad, dfm.height, dfm.width,
        cx, cy, half, p, cfg.max_iters, cfg.convergence_tol,
        cfg.min_subset_std)
    valid = status == ST_CONVERGED and cost <= cfg.znssd_valid_max
    return SubsetResult((cx, cy), SubsetWarp.from_array(p),
                        float(cost), float(z), int(iters), valid, int(status))


# ---------------------------------------------------------------------------
# Field computation


def build_lattice(image: GrayImage, roi, cfg: CorrelationConfig):
    """Lattice origin and size for an ROI (x0, y0, x1, y1), half-open.

    Centers keep the subset inside the ROI and clear of the interpolation
    margin by one extra pixel.
    """
    x0, y0, x1, y1 = (int(v) for v in roi)
    half = cfg.half
    pad = half + 3  # subset half-width + interpolation margin + 1 px slack
    cx_min = max(x0 + half, pad)
    cy_min = max(y0 + half, pad)
    cx_max = min(x1 - 1 - half, image.width - 1 - pad)
    cy_max = min(y1 - 1 - half, image.height - 1 - pad)
    if cx_max < cx_min or cy_max < cy_min:
        raise ValueError("ROI leaves no room for any subset")
    nx = (cx_max - cx_min) // cfg.step_px + 1
    ny = (cy_max - cy_min) // cfg.step_px + 1
    return (cx_min, cy_min), nx, ny


def _lattice_centers(field: DisplacementField2D):
    xs = field.xs()
    ys = field.ys()
    cx = np.tile(xs, field.ny).astype(np.int64)
    cy = np.repeat(ys, field.nx).astype(np.int64)
    return cx, cy


def correlate_field(ref: GrayImage, dfm: GrayImage, roi,
                    cfg: CorrelationConfig, seed=None,
                    prior: DisplacementField2D | None = None,
                    frame_index: int = 0, t_s: float = 0.0,
                    ) -> DisplacementField2D:
    """Track every lattice point of ``roi`` from ``ref`` into ``dfm``.

    Without a prior field, the seed lattice point (given as (ix, iy), or
    chosen as the highest-contrast subset) is located by integer search and
    refined, then the solution grows outward best-first: the frontier is
    ordered by the donor point's ZNCC, ties by the candidate's row-major
    lattice index, so the sweep is deterministic.  With a prior field
    (temporal chaining) every point starts from its own previous warp and is
    refined independently.

    Invalid points (flat subsets, divergence, cost above threshold, chain
    gaps) stay flagged and never seed neighbors.
    """
    origin, nx, ny = build_lattice(ref, roi, cfg)
    out = DisplacementField2D(origin, cfg.step_px, nx, ny, frame_index, t_s)
    cx, cy = _lattice_centers(out)
    npts = nx * ny

    stds = np.empty(npts)
    _icgn.subset_std_grid(ref.intensities, cx, cy, cfg.half, stds)
    correlatable = stds >= cfg.min_subset_std

    interp = dfm.spline()
    gx, gy = ref.spline().gradient_images()
    ref_i = ref.intensities

    if prior is not None:
        if prior.shape != (ny, nx) or (prior.x0, prior.y0) != origin \
                or prior.step != cfg.step_px:
            raise ValueError("prior field lattice does not match the ROI lattice")
        inits = prior.p.reshape(npts, 6).astype(np.float64)
        active = correlatable & prior.valid.ravel()
        out_p = np.zeros((npts, 6))
        out_cost = np.empty(npts)
        out_zncc = np.empty(npts)
        out_iters = np.empty(npts, dtype=np.int32)
        out_status = np.empty(npts, dtype=np.int32)
        _icgn.refine_many(ref_i, gx, gy, interp.cpad, dfm.height, dfm.width,
                          cx, cy, cfg.half, inits, active,
                          cfg.max_iters, cfg.convergence_tol,
                          cfg.min_subset_std,
                          out_p, out_cost, out_zncc, out_iters, out_status)
        out.p = out_p.reshape(ny, nx, 6)
        out.cost = out_cost.reshape(ny, nx)
        out.zncc = out_zncc.reshape(ny, nx)
        out.iterations = out_iters.reshape(ny, nx)
        out.status = out_status.reshape(ny, nx)
        out.status[~correlatable.reshape(ny, nx)] = ST_FLAT_REFERENCE
        out.valid = ((out.status == ST_CONVERGED)
                     & (out.cost <= cfg.znssd_valid_max))
        return out

    # Seeded best-first propagation for the first frame.
    if not np.any(correlatable):
        raise NumericalError("no correlatable lattice point in ROI")
    if seed is None:
        seed_idx = int(np.argmax(stds))
    else:
        sx, sy = int(seed[0]), int(seed[1])
        if not (0 <= sx < nx and 0 <= sy < ny):
            raise ValueError(f"seed lattice index {seed} outside {nx}x{ny} lattice")
        seed_idx = sy * nx + sx
        if not correlatable[seed_idx]:
            raise NumericalError("seed lattice point is not correlatable")

    sdx, sdy = integer_search(
        ref, dfm, (int(cx[seed_idx]), int(cy[seed_idx])),
        cfg.search_radius_px, cfg)
    seed_res = icgn_refine(ref, dfm, (int(cx[seed_idx]), int(cy[seed_idx])),
                           SubsetWarp(u=float(sdx), v=float(sdy)), cfg)
    if not seed_res.valid:
        raise NumericalError(
            f"seed point failed to converge (status {seed_res.status}, "
            f"cost {seed_res.cost:.3f})")

    done = np.zeros(npts, dtype=bool)
    heap: list = []
    counter = 0

    def store(idx, p, cost, z, iters, status):
        iy, ix = divmod(idx, nx)
        out.p[iy, ix] = p
        out.cost[iy, ix] = cost
        out.zncc[iy, ix] = z
        out.iterations[iy, ix] = iters
        out.status[iy, ix] = status
        ok = status == ST_CONVERGED and cost <= cfg.znssd_valid_max
        out.valid[iy, ix] = ok
        return ok

    def push_neighbors(idx, donor_zncc, donor_p):
        nonlocal counter
        iy, ix = divmod(idx, nx)
        for nix, niy in ((ix - 1, iy), (ix + 1, iy), (ix, iy - 1), (ix, iy + 1)):
            if 0 <= nix < nx and 0 <= niy < ny:
                nidx = niy * nx + nix
                if not done[nidx]:
                    heapq.heappush(
                        heap, (-donor_zncc, nidx, counter, donor_p.copy()))
                    counter += 1

    done[seed_idx] = True
    if store(seed_idx, seed_res.warp.as_array(), seed_res.cost, seed_res.zncc,
             seed_res.iterations, seed_res.status):
        push_neighbors(seed_idx, seed_res.zncc, seed_res.warp.as_array())

    while heap:
        _, idx, _, init_p = heapq.heappop(heap)
        if done[idx]:
            continue
        done[idx] = True
        if not correlatable[idx]:
            store(idx, np.zeros(6), 4.0, -1.0, 0, ST_FLAT_REFERENCE)
            continue
        p = init_p.copy()
        cost, z, iters, status = _icgn.refine_subset(
            ref_i, gx, gy, interp.cpad, dfm.height, dfm.width,
            int(cx[idx]), int(cy[idx]), cfg.half, p,
            cfg.max_iters, cfg.convergence_tol, cfg.min_subset_std)
        if store(idx, p, cost, z, iters, status):
            push_neighbors(idx, z, p)
    return out


# ---------------------------------------------------------------------------
# CSV export / import


def _fmt(v: float) -> str:
    return f"{v:.10g}"


def write_field_csv(field: DisplacementField2D, path) -> None:
    """Write one frame's lattice; invalid points leave displacement cells empty."""
    with open(path, "w", newline="") as fh:
        fh.write(FIELD_CSV_HEADER + "\n")
        w = csv.writer(fh, lineterminator="\n")
        for iy in range(field.ny):
            for ix in range(field.nx):
                x = field.x0 + ix * field.step
                y = field.y0 + iy * field.step
                row = [field.frame_index, _fmt(field.t_s), ix, iy, x, y]
                if field.valid[iy, ix]:
                    p = field.p[iy, ix]
                    row += [_fmt(p[0]), _fmt(p[3]), _fmt(p[1]), _fmt(p[2]),
                            _fmt(p[4]), _fmt(p[5]), _fmt(field.zncc[iy, ix]), 1]
                else:
                    evaluated = field.status[iy, ix] in (
                        ST_CONVERGED, ST_MAX_ITERS, ST_DIVERGED)
                    z = _fmt(field.zncc[iy, ix]) if evaluated else ""
                    row += ["", "", "", "", "", "", z, 0]
                w.writerow(row)


def read_field_csv(path) -> DisplacementField2D:
    """Load a frame written by write_field_csv."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or ",".join(header) != FIELD_CSV_HEADER:
            raise InputFormatError(f"{path}: unexpected field CSV header")
        rows = list(reader)
    if not rows:
        raise InputFormatError(f"{path}: empty field CSV")
    ixs = np.array([int(r[2]) for r in rows])
    iys = np.array([int(r[3]) for r in rows])
    nx = ixs.max() + 1
    ny = iys.max() + 1
    if len(rows) != nx * ny:
        raise InputFormatError(f"{path}: ragged lattice ({len(rows)} rows)")
    xs = np.array([int(r[4]) for r in rows])
    ys = np.array([int(r[5]) for r in rows])
    step = int(xs[1] - xs[0]) if nx > 1 else (int(ys[nx] - ys[0]) if ny > 1 else 1)
    field = DisplacementField2D((xs.min(), ys.min()), max(step, 1), nx, ny,
                                frame_index=int(rows[0][0]),
                                t_s=float(rows[0][1]))
    for r in rows:
        ix, iy = int(r[2]), int(r[3])
        if r[13] == "1":
            u, v, dudx, dudy, dvdx, dvdy = (float(c) for c in r[6:12])
            field.p[iy, ix] = (u, dudx, dudy, v, dvdx, dvdy)
            field.zncc[iy, ix] = float(r[12])
            field.cost[iy, ix] = 2.0 * (1.0 - field.zncc[iy, ix])
            field.status[iy, ix] = ST_CONVERGED
            field.valid[iy, ix] = True
        else:
            field.status[iy, ix] = ST_SKIPPED
    return field


__all__ = [
    "CorrelationConfig", "SubsetWarp", "SubsetResult", "DisplacementField2D",
    "zncc", "znssd", "integer_search", "icgn_refine", "correlate_field",
    "build_lattice", "write_field_csv", "read_field_csv", "FIELD_CSV_HEADER",
]

# math is used by callers of SubsetWarp helpers
_ = math
