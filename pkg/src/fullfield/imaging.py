"""Image representation, PGM I/O, speckle synthesis, interpolation, warping.

Everything downstream works on normalized grayscale grids: intensities are
float64 in [0, 1], row-major, immutable after construction.  Interpolation is
an interpolating (prefiltered) cubic B-spline with a 2 px excluded border
margin; subpixel sampling outside that margin is an error, not extrapolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from . import _spline
from .errors import InputFormatError, NumericalError

INTERIOR_MARGIN = 2.0


class PgmError(InputFormatError):
    """Base class for PGM parsing failures."""


class PgmHeaderError(PgmError):
    """Header is not a well-formed binary (P5) PGM header."""


class PgmTruncatedError(PgmError):
    """Payload shorter than width * height samples."""


class PgmMaxvalError(PgmError):
    """Maxval other than 255 or 65535."""


class GrayImage:
    """Immutable grayscale image with intensities in [0, 1].

    Attributes:
        width, height: pixel dimensions.
        intensities: (height, width) float64 array, read-only.
    """

    __slots__ = ("width", "height", "intensities", "_interp")

    def __init__(self, intensities: np.ndarray):
        a = np.ascontiguousarray(intensities, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise ValueError("intensities must be a non-empty 2D grid")
        if not np.all(np.isfinite(a)):
            raise ValueError("intensities must be finite")
        if a.min() < 0.0 or a.max() > 1.0:
            raise ValueError("intensities must lie in [0, 1]")
        a.setflags(write=False)
        object.__setattr__(self, "intensities", a)
        object.__setattr__(self, "height", a.shape[0])
        object.__setattr__(self, "width", a.shape[1])
        object.__setattr__(self, "_interp", None)

    def __setattr__(self, name, value):
        raise AttributeError("GrayImage is immutable")

    @property
    def shape(self) -> tuple[int, int]:
        return self.intensities.shape

    def spline(self) -> "SplineInterpolator":
        """Cached interpolator for this image (built on first use)."""
        if self._interp is None:
            object.__setattr__(self, "_interp", SplineInterpolator(self.intensities))
        return self._interp


# ---------------------------------------------------------------------------
# PGM (P5) I/O


def read_image(path) -> GrayImage:
    """Read a binary PGM (P5) file, normalizing intensities by its maxval.

    Raises PgmHeaderError, PgmMaxvalError, or PgmTruncatedError for the
    respective malformations; 16-bit samples are big-endian per the format.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    fields = []
    pos = 0
    # Header: magic, width, height, maxval; '#' comments allowed between tokens.
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            eol = data.find(b"\n", pos)
            if eol < 0:
                raise PgmHeaderError(f"{path}: unterminated comment in header")
            pos = eol + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PgmHeaderError(f"{path}: incomplete PGM header")
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise PgmHeaderError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise PgmHeaderError(f"{path}: non-numeric dimensions or maxval") from None
    if width <= 0 or height <= 0:
        raise PgmHeaderError(f"{path}: non-positive dimensions {width}x{height}")
    if maxval not in (255, 65535):
        raise PgmMaxvalError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    dtype = np.dtype(">u2") if maxval == 65535 else np.dtype("u1")
    need = width * height * dtype.itemsize
    payload = data[pos : pos + need]
    if len(payload) < need:
        raise PgmTruncatedError(
            f"{path}: payload has {len(payload)} bytes, expected {need}"
        )
    samples = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    return GrayImage(samples.astype(np.float64) / maxval)


def write_image(image: GrayImage, path, maxval: int = 65535) -> None:
    """Write a binary PGM (P5); round-trip error is bounded by 1/(2*maxval)."""
    if maxval not in (255, 65535):
        raise PgmMaxvalError(f"cannot write maxval {maxval}")
    header = f"P5\n{image.width} {image.height}\n{maxval}\n".encode("ascii")
    q = np.rint(image.intensities * maxval)
    dtype = np.dtype(">u2") if maxval == 65535 else np.dtype("u1")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(q.astype(dtype).tobytes())


# ---------------------------------------------------------------------------
# Speckle synthesis

_SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class SpeckleSpec:
    """Parameters of the synthetic speckle texture.

    density is the expected speckle count per 100x100 px window; placement is
    stratified (one jittered speckle per cell) so local coverage cannot
    collapse the way purely uniform placement can.
    """

    density: float = 40.0
    radius_px: float = 2.5
    radius_jitter: float = 0.3
    contrast: float = 0.8
    rng_seed: int = 0
    edge_sigma_px: float = 0.5
    background: float = 0.95

    def validate(self) -> None:
        if not self.density > 0:
            raise ValueError("density must be > 0")
        if not self.radius_px >= 1.0:
            raise ValueError("radius_px must be >= 1")
        if not 0.0 < self.contrast <= 1.0:
            raise ValueError("contrast must be in (0, 1]")
        if not 0.0 <= self.radius_jitter < 1.0:
            raise ValueError("radius_jitter must be in [0, 1)")
        if not 0.0 < self.background <= 1.0:
            raise ValueError("background must be in (0, 1]")
        if self.background - self.contrast < 0.0:
            raise ValueError("contrast exceeds background level")


class DiskField:
    """A fixed set of soft-edged disks, evaluable at arbitrary coordinates.

    Used both to raster speckle images and, by the synthetic harness, as a
    continuous surface texture.  Evaluation is exact (no raster intermediate):
    each disk contributes opacity Phi((r - d) / sigma) and contributions
    combine as transparencies, so overlaps stay smooth and bounded.
    """

    def __init__(self, spec: SpeckleSpec, width: float, height: float):
        spec.validate()
        if width <= 0 or height <= 0:
            raise ValueError("zero-area speckle domain")
        self.spec = spec
        self.width = float(width)
        self.height = float(height)
        rng = np.random.default_rng(spec.rng_seed)
        cell = math.sqrt(1.0e4 / spec.density)
        ncx = max(1, int(math.ceil(width / cell)))
        ncy = max(1, int(math.ceil(height / cell)))
        jitter = rng.random((ncy, ncx, 3))
        gx, gy = np.meshgrid(np.arange(ncx), np.arange(ncy))
        self.cx = ((gx + jitter[:, :, 0]) * cell).ravel()
        self.cy = ((gy + jitter[:, :, 1]) * cell).ravel()
        self.radius = spec.radius_px * (
            1.0 + spec.radius_jitter * (2.0 * jitter[:, :, 2].ravel() - 1.0)
        )
        # 3x3 neighborhood search is exact to ~Phi(-6) with this bin size.
        self.bin_size = float(self.radius.max() + 6.0 * spec.edge_sigma_px)
        self.nbx = max(1, int(math.ceil(width / self.bin_size)))
        self.nby = max(1, int(math.ceil(height / self.bin_size)))
        bx = np.clip((self.cx / self.bin_size).astype(np.int64), 0, self.nbx - 1)
        by = np.clip((self.cy / self.bin_size).astype(np.int64), 0, self.nby - 1)
        flat = by * self.nbx + bx
        order = np.argsort(flat, kind="stable")
        self.items = order.astype(np.int64)
        counts = np.bincount(flat, minlength=self.nbx * self.nby)
        self.start = np.concatenate(([0], np.cumsum(counts)))[:-1].astype(np.int64)
        self.count = counts.astype(np.int64)

    def evaluate(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        xs = np.ascontiguousarray(xs, dtype=np.float64).ravel()
        ys = np.ascontiguousarray(ys, dtype=np.float64).ravel()
        out = np.empty_like(xs)
        fg = self.spec.background - self.spec.contrast
        _disk_eval(
            xs, ys, self.cx, self.cy, self.radius,
            self.bin_size, self.nbx, self.nby,
            self.start, self.count, self.items,
            self.spec.background, fg, self.spec.edge_sigma_px, out,
        )
        return out


@njit(cache=True)
def _disk_eval(xs, ys, cx, cy, radius, bin_size, nbx, nby,
               start, count, items, bg, fg, sigma, out):
    inv = 1.0 / (_SQRT2 * sigma)
    for k in range(xs.size):
        x = xs[k]
        y = ys[k]
        bx = int(math.floor(x / bin_size))
        by = int(math.floor(y / bin_size))
        trans = 1.0
        for gy in range(by - 1, by + 2):
            if gy < 0 or gy >= nby:
                continue
            for gx in range(bx - 1, bx + 2):
                if gx < 0 or gx >= nbx:
                    continue
                cell = gy * nbx + gx
                for ii in range(start[cell], start[cell] + count[cell]):
                    j = items[ii]
                    dx = x - cx[j]
                    dy = y - cy[j]
                    d = math.sqrt(dx * dx + dy * dy)
                    alpha = 0.5 * math.erfc((d - radius[j]) * inv)
                    trans *= 1.0 - alpha
        out[k] = bg + (fg - bg) * (1.0 - trans)


def synthesize_speckle(spec: SpeckleSpec, width: int, height: int) -> GrayImage:
    """Render a speckle pattern; a pure function of (spec, width, height)."""
    if width <= 0 or height <= 0:
        raise ValueError("zero-area image")
    field = DiskField(spec, width, height)
    xs, ys = np.meshgrid(np.arange(width, dtype=np.float64),
                         np.arange(height, dtype=np.float64))
    vals = field.evaluate(xs, ys).reshape(height, width)
    return GrayImage(np.clip(vals, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Subpixel interpolation


class SplineInterpolator:
    """Prefiltered interpolating cubic B-spline over one intensity grid."""

    def __init__(self, intensities: np.ndarray):
        self.height, self.width = intensities.shape
        self.cpad = _spline.prefilter_coefficients(intensities)
        self._grad = None

    def in_margin(self, x, y) -> np.ndarray:
        m = INTERIOR_MARGIN
        return ((np.asarray(x) >= m) & (np.asarray(x) <= self.width - 1 - m)
                & (np.asarray(y) >= m) & (np.asarray(y) <= self.height - 1 - m))

    def value(self, x, y):
        """Spline value at scalar or array coordinates inside the margin."""
        xs = np.atleast_1d(np.asarray(x, dtype=np.float64))
        ys = np.atleast_1d(np.asarray(y, dtype=np.float64))
        if not np.all(self.in_margin(xs, ys)):
            raise NumericalError(
                f"interpolation coordinate outside the {INTERIOR_MARGIN:g} px "
                f"interior margin of a {self.width}x{self.height} image"
            )
        out = np.empty(xs.shape, dtype=np.float64)
        _spline.eval_spline_many(self.cpad, xs.ravel(), ys.ravel(), out.ravel())
        return float(out[0]) if np.isscalar(x) or np.ndim(x) == 0 else out

    def gradient_images(self) -> tuple[np.ndarray, np.ndarray]:
        """d/dx and d/dy of the interpolant at every integer pixel."""
        if self._grad is None:
            self._grad = _spline.node_gradients(self.cpad)
        return self._grad


def interpolate(image: GrayImage, x, y):
    """Subpixel intensity at (x, y), >= 2 px inside every border.

    Exact at integer nodes; C2 between them.
    """
    return image.spline().value(x, y)


# ---------------------------------------------------------------------------
# Ground-truth deformation maps and warping


class DeformationMap:
    """Continuous forward map (x, y) -> (x + u, y + v) with an exact inverse.

    Concrete families cover what the test harness needs: translations,
    affine stretches, rotations, and a smooth radial bow.  ``inverse(x, y)``
    returns source coordinates such that forward(inverse(p)) == p.
    """

    def displacement(self, x, y):
        raise NotImplementedError

    def forward(self, x, y):
        u, v = self.displacement(x, y)
        return x + u, y + v

    def inverse(self, x, y):
        raise NotImplementedError


class Translation(DeformationMap):
    def __init__(self, dx: float, dy: float):
        self.dx = float(dx)
        self.dy = float(dy)

    def displacement(self, x, y):
        return np.full_like(np.asarray(x, dtype=float), self.dx), \
            np.full_like(np.asarray(y, dtype=float), self.dy)

    def inverse(self, x, y):
        return np.asarray(x, dtype=float) - self.dx, np.asarray(y, dtype=float) - self.dy


class Affine(DeformationMap):
    """x' = A (x - c) + c + d for an invertible 2x2 A, center c, offset d."""

    def __init__(self, a11, a12, a21, a22, center=(0.0, 0.0), offset=(0.0, 0.0)):
        self.A = np.array([[a11, a12], [a21, a22]], dtype=float)
        det = np.linalg.det(self.A)
        if abs(det) < 1e-12:
            raise NumericalError("affine deformation map is not invertible")
        self.Ainv = np.linalg.inv(self.A)
        self.center = np.asarray(center, dtype=float)
        self.offset = np.asarray(offset, dtype=float)

    @classmethod
    def stretch(cls, exx=0.0, eyy=0.0, exy=0.0, center=(0.0, 0.0)):
        return cls(1.0 + exx, exy, exy, 1.0 + eyy, center=center)

    @classmethod
    def rotation(cls, theta: float, center=(0.0, 0.0)):
        c, s = math.cos(theta), math.sin(theta)
        return cls(c, -s, s, c, center=center)

    def displacement(self, x, y):
        p = np.stack([np.asarray(x, dtype=float), np.asarray(y, dtype=float)])
        rel = p - self.center.reshape(2, *([1] * (p.ndim - 1)))
        q = np.tensordot(self.A, rel, axes=(1, 0)) - rel
        off = self.offset.reshape(2, *([1] * (p.ndim - 1)))
        return q[0] + off[0], q[1] + off[1]

    def inverse(self, x, y):
        p = np.stack([np.asarray(x, dtype=float), np.asarray(y, dtype=float)])
        c = self.center.reshape(2, *([1] * (p.ndim - 1)))
        off = self.offset.reshape(2, *([1] * (p.ndim - 1)))
        rel = p - off - c
        q = np.tensordot(self.Ainv, rel, axes=(1, 0)) + c
        return q[0], q[1]


class RadialBow(DeformationMap):
    """In-plane radial displacement amp * rho * exp(-rho^2 / 2) (rho = r / scale).

    Small amplitudes only; the inverse is solved by fixed point to 1e-13 and
    a non-contracting amplitude raises NumericalError.
    """

    def __init__(self, amplitude: float, scale: float, center):
        if abs(amplitude) >= 0.3 * scale:
            raise NumericalError("bow amplitude too large to invert reliably")
        self.amplitude = float(amplitude)
        self.scale = float(scale)
        self.center = np.asarray(center, dtype=float)

    def displacement(self, x, y):
        dx = np.asarray(x, dtype=float) - self.center[0]
        dy = np.asarray(y, dtype=float) - self.center[1]
        rho2 = (dx * dx + dy * dy) / self.scale**2
        g = (self.amplitude / self.scale) * np.exp(-0.5 * rho2)
        return g * dx, g * dy

    def inverse(self, x, y):
        sx = np.asarray(x, dtype=float).copy()
        sy = np.asarray(y, dtype=float).copy()
        for _ in range(200):
            u, v = self.displacement(sx, sy)
            nx = np.asarray(x, dtype=float) - u
            ny = np.asarray(y, dtype=float) - v
            step = max(np.max(np.abs(nx - sx)), np.max(np.abs(ny - sy)))
            sx, sy = nx, ny
            if step < 1e-13:
                return sx, sy
        raise NumericalError("bow inverse did not converge")


def warp_image(image: GrayImage, dmap: DeformationMap) -> GrayImage:
    """Resample ``image`` under the forward map ``dmap``.

    output(p) = input(dmap.inverse(p)).  Integer-coordinate sources are
    copied exactly (so identity and integer shifts are bit-exact); other
    interior sources go through the spline; sources outside the margin fall
    back to their nearest pixel.
    """
    h, w = image.shape
    ys, xs = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float),
                         indexing="ij")
    sx, sy = dmap.inverse(xs, ys)
    sx = np.asarray(sx, dtype=np.float64)
    sy = np.asarray(sy, dtype=np.float64)
    out = np.empty((h, w), dtype=np.float64)

    rx, ry = np.rint(sx), np.rint(sy)
    exact = ((np.abs(sx - rx) < 1e-12) & (np.abs(sy - ry) < 1e-12)
             & (rx >= 0) & (rx <= w - 1) & (ry >= 0) & (ry <= h - 1))
    interp = image.spline()
    interior = interp.in_margin(sx, sy) & ~exact
    outside = ~exact & ~interior

    ix = np.clip(rx, 0, w - 1).astype(np.intp)
    iy = np.clip(ry, 0, h - 1).astype(np.intp)
    out[exact] = image.intensities[iy[exact], ix[exact]]
    out[outside] = image.intensities[iy[outside], ix[outside]]
    if np.any(interior):
        vals = np.empty(int(interior.sum()), dtype=np.float64)
        _spline.eval_spline_many(interp.cpad, sx[interior], sy[interior], vals)
        out[interior] = vals
    return GrayImage(np.clip(out, 0.0, 1.0))


__all__ = [
    "GrayImage", "SpeckleSpec", "DiskField", "DeformationMap", "Translation",
    "Affine", "RadialBow", "SplineInterpolator",
    "read_image", "write_image", "synthesize_speckle", "interpolate",
    "warp_image", "PgmError", "PgmHeaderError", "PgmTruncatedError",
    "PgmMaxvalError", "INTERIOR_MARGIN",
]
