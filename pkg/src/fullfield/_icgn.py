"""Inverse-compositional Gauss-Newton subset refinement (compiled core).

One reference subset at an integer center is matched against the target
image's spline coefficients.  The Hessian is built once from reference
gradients; each iteration warps the subset, evaluates the target spline,
forms the zero-normalized residual, and composes the inverse increment.

Status codes double as the contract with the Python layer: a point is valid
only when status == CONVERGED and the final cost clears the threshold.
"""

import math

import numpy as np
from numba import njit, prange

from ._spline import eval_spline

CONVERGED = 0
MAX_ITERS = 1
OUT_OF_BOUNDS = 2
FLAT_TARGET = 3
SINGULAR_HESSIAN = 4
FLAT_REFERENCE = 5
DIVERGED = 6
SKIPPED = 7          # no initializer (flat ref, chain gap, unreached)

MARGIN = 2.0


@njit(cache=True)
def _invert6(H, out):
    """Gauss-Jordan inverse with partial pivoting; False when singular."""
    a = np.empty((6, 12))
    for i in range(6):
        for j in range(6):
            a[i, j] = H[i, j]
            a[i, j + 6] = 1.0 if i == j else 0.0
    for col in range(6):
        piv = col
        best = abs(a[col, col])
        for r in range(col + 1, 6):
            if abs(a[r, col]) > best:
                best = abs(a[r, col])
                piv = r
        if best < 1e-300:
            return False
        if piv != col:
            for j in range(12):
                tmp = a[col, j]
                a[col, j] = a[piv, j]
                a[piv, j] = tmp
        d = a[col, col]
        for j in range(12):
            a[col, j] /= d
        for r in range(6):
            if r != col:
                f = a[r, col]
                if f != 0.0:
                    for j in range(12):
                        a[r, j] -= f * a[col, j]
    for i in range(6):
        for j in range(6):
            out[i, j] = a[i, j + 6]
    return True


@njit(cache=True, inline="always")
def _corner_motion(dp, half):
    """Largest displacement the increment causes at a subset corner."""
    m = 0.0
    for sx in (-half, half):
        for sy in (-half, half):
            du = dp[0] + dp[1] * sx + dp[2] * sy
            dv = dp[3] + dp[4] * sx + dp[5] * sy
            d = math.sqrt(du * du + dv * dv)
            if d > m:
                m = d
    return m


@njit(cache=True, inline="always")
def _compose_inverse(p, dp):
    """p <- p o dp^-1 for the first-order warp; False when dp is singular."""
    a11 = 1.0 + dp[1]
    a12 = dp[2]
    a21 = dp[4]
    a22 = 1.0 + dp[5]
    det = a11 * a22 - a12 * a21
    if abs(det) < 1e-12:
        return False
    i11 = a22 / det
    i12 = -a12 / det
    i21 = -a21 / det
    i22 = a11 / det
    ib1 = -(i11 * dp[0] + i12 * dp[3])
    ib2 = -(i21 * dp[0] + i22 * dp[3])
    p11 = 1.0 + p[1]
    p12 = p[2]
    p21 = p[4]
    p22 = 1.0 + p[5]
    n11 = p11 * i11 + p12 * i21
    n12 = p11 * i12 + p12 * i22
    n21 = p21 * i11 + p22 * i21
    n22 = p21 * i12 + p22 * i22
    nb1 = p11 * ib1 + p12 * ib2 + p[0]
    nb2 = p21 * ib1 + p22 * ib2 + p[3]
    p[0] = nb1
    p[1] = n11 - 1.0
    p[2] = n12
    p[3] = nb2
    p[4] = n21
    p[5] = n22 - 1.0
    return True


@njit(cache=True)
def refine_subset(ref, gx, gy, cpad_def, def_h, def_w, cx, cy, half,
                  p, max_iters, tol, min_std):
    """Refine warp ``p`` (modified in place) for the subset centered at
    integer (cx, cy) of ``ref``.  Returns (cost, zncc, iters, status)."""
    side = 2 * half + 1
    n = side * side

    f = np.empty(n)
    fx = np.empty(n)
    fy = np.empty(n)
    fsum = 0.0
    k = 0
    for dy in range(-half, half + 1):
        for dx in range(-half, half + 1):
            v = ref[cy + dy, cx + dx]
            f[k] = v
            fx[k] = gx[cy + dy, cx + dx]
            fy[k] = gy[cy + dy, cx + dx]
            fsum += v
            k += 1
    fmean = fsum / n
    fvar = 0.0
    for i in range(n):
        f[i] -= fmean
        fvar += f[i] * f[i]
    fnorm = math.sqrt(fvar)
    if fnorm < min_std * math.sqrt(1.0 * n):
        return 4.0, -1.0, 0, FLAT_REFERENCE

    # Hessian from reference-side steepest-descent rows, built once.
    H = np.zeros((6, 6))
    k = 0
    for dy in range(-half, half + 1):
        for dx in range(-half, half + 1):
            j0 = fx[k]
            j1 = fx[k] * dx
            j2 = fx[k] * dy
            j3 = fy[k]
            j4 = fy[k] * dx
            j5 = fy[k] * dy
            H[0, 0] += j0 * j0
            H[0, 1] += j0 * j1
            H[0, 2] += j0 * j2
            H[0, 3] += j0 * j3
            H[0, 4] += j0 * j4
            H[0, 5] += j0 * j5
            H[1, 1] += j1 * j1
            H[1, 2] += j1 * j2
            H[1, 3] += j1 * j3
            H[1, 4] += j1 * j4
            H[1, 5] += j1 * j5
            H[2, 2] += j2 * j2
            H[2, 3] += j2 * j3
            H[2, 4] += j2 * j4
            H[2, 5] += j2 * j5
            H[3, 3] += j3 * j3
            H[3, 4] += j3 * j4
            H[3, 5] += j3 * j5
            H[4, 4] += j4 * j4
            H[4, 5] += j4 * j5
            H[5, 5] += j5 * j5
            k += 1
    for i in range(6):
        for j in range(i):
            H[i, j] = H[j, i]
    hinv = np.empty((6, 6))
    if not _invert6(H, hinv):
        return 4.0, -1.0, 0, SINGULAR_HESSIAN

    g = np.empty(n)
    b = np.empty(6)
    dp = np.empty(6)
    xlo = MARGIN
    xhi = def_w - 1 - MARGIN
    ylo = MARGIN
    yhi = def_h - 1 - MARGIN

    cost = 4.0
    zncc = -1.0
    iters = 0
    status = MAX_ITERS
    for _ in range(max_iters):
        iters += 1
        gsum = 0.0
        gg = 0.0
        cross = 0.0
        k = 0
        oob = False
        for dy in range(-half, half + 1):
            for dx in range(-half, half + 1):
                wx = cx + dx + p[0] + p[1] * dx + p[2] * dy
                wy = cy + dy + p[3] + p[4] * dx + p[5] * dy
                if wx < xlo or wx > xhi or wy < ylo or wy > yhi:
                    oob = True
                    break
                gi = eval_spline(cpad_def, wx, wy)
                g[k] = gi
                gsum += gi
                gg += gi * gi
                cross += f[k] * gi
                k += 1
            if oob:
                break
        if oob:
            return cost, zncc, iters, OUT_OF_BOUNDS
        gmean = gsum / n
        gvar = gg - n * gmean * gmean
        if gvar <= 1e-20:
            return cost, zncc, iters, FLAT_TARGET
        gnorm = math.sqrt(gvar)
        zncc = cross / (fnorm * gnorm)
        cost = 2.0 * (1.0 - zncc)

        ratio = fnorm / gnorm
        for j in range(6):
            b[j] = 0.0
        k = 0
        for dy in range(-half, half + 1):
            for dx in range(-half, half + 1):
                r = f[k] - ratio * (g[k] - gmean)
                b[0] -= fx[k] * r
                b[1] -= fx[k] * dx * r
                b[2] -= fx[k] * dy * r
                b[3] -= fy[k] * r
                b[4] -= fy[k] * dx * r
                b[5] -= fy[k] * dy * r
                k += 1
        for i in range(6):
            dp[i] = 0.0
            for j in range(6):
                dp[i] += hinv[i, j] * b[j]
        motion = _corner_motion(dp, half)
        if not math.isfinite(motion) or motion > 4.0 * side:
            return cost, zncc, iters, DIVERGED
        if not _compose_inverse(p, dp):
            return cost, zncc, iters, DIVERGED
        if motion < tol:
            status = CONVERGED
            break

    if status == CONVERGED:
        # Report the cost of the final (post-update) warp.
        gsum = 0.0
        gg = 0.0
        cross = 0.0
        k = 0
        for dy in range(-half, half + 1):
            for dx in range(-half, half + 1):
                wx = cx + dx + p[0] + p[1] * dx + p[2] * dy
                wy = cy + dy + p[3] + p[4] * dx + p[5] * dy
                if wx < xlo or wx > xhi or wy < ylo or wy > yhi:
                    return cost, zncc, iters, OUT_OF_BOUNDS
                gi = eval_spline(cpad_def, wx, wy)
                gsum += gi
                gg += gi * gi
                cross += f[k] * gi
                k += 1
        gmean = gsum / n
        gvar = gg - n * gmean * gmean
        if gvar <= 1e-20:
            return cost, zncc, iters, FLAT_TARGET
        gnorm = math.sqrt(gvar)
        zncc = cross / (fnorm * gnorm)
        cost = 2.0 * (1.0 - zncc)
    return cost, zncc, iters, status


@njit(cache=True, parallel=True)
def refine_many(ref, gx, gy, cpad_def, def_h, def_w, centers_x, centers_y,
                half, inits, active, max_iters, tol, min_std,
                out_p, out_cost, out_zncc, out_iters, out_status):
    """Refine every active point independently; bitwise deterministic for
    any thread count because iterations share no mutable state."""
    npts = centers_x.size
    for i in prange(npts):
        if not active[i]:
            out_status[i] = SKIPPED
            out_cost[i] = 4.0
            out_zncc[i] = -1.0
            out_iters[i] = 0
            continue
        p = inits[i].copy()
        cost, zncc, iters, status = refine_subset(
            ref, gx, gy, cpad_def, def_h, def_w,
            centers_x[i], centers_y[i], half, p, max_iters, tol, min_std)
        for j in range(6):
            out_p[i, j] = p[j]
        out_cost[i] = cost
        out_zncc[i] = zncc
        out_iters[i] = iters
        out_status[i] = status


@njit(cache=True)
def integer_search_core(ref, dfm, cx, cy, half, radius):
    """Best integer offset by ZNCC over a square window.

    Offsets are scanned row-major ((-r,-r) .. (r,r)); strict improvement
    keeps the earliest offset among ties.  Returns (dx, dy, zncc, ok).
    """
    side = 2 * half + 1
    n = side * side
    f = np.empty(n)
    fsum = 0.0
    k = 0
    for dy in range(-half, half + 1):
        for dx in range(-half, half + 1):
            v = ref[cy + dy, cx + dx]
            f[k] = v
            fsum += v
            k += 1
    fmean = fsum / n
    fvar = 0.0
    for i in range(n):
        f[i] -= fmean
        fvar += f[i] * f[i]
    if fvar <= 1e-20:
        return 0, 0, -2.0, False
    fnorm = math.sqrt(fvar)

    best = -2.0
    best_dx = 0
    best_dy = 0
    for oy in range(-radius, radius + 1):
        for ox in range(-radius, radius + 1):
            gsum = 0.0
            gg = 0.0
            cross = 0.0
            k = 0
            for dy in range(-half, half + 1):
                row = cy + dy + oy
                for dx in range(-half, half + 1):
                    gi = dfm[row, cx + dx + ox]
                    gsum += gi
                    gg += gi * gi
                    cross += f[k] * gi
                    k += 1
            gmean = gsum / n
            gvar = gg - n * gmean * gmean
            if gvar <= 1e-20:
                continue
            z = cross / (fnorm * math.sqrt(gvar))
            if z > best:
                best = z
                best_dx = ox
                best_dy = oy
    return best_dx, best_dy, best, best > -2.0


@njit(cache=True)
def subset_std_grid(img, centers_x, centers_y, half, out):
    """Reference-subset intensity standard deviation at each lattice point."""
    side = 2 * half + 1
    n = side * side
    for i in range(centers_x.size):
        cx = centers_x[i]
        cy = centers_y[i]
        s = 0.0
        ss = 0.0
        for dy in range(-half, half + 1):
            for dx in range(-half, half + 1):
                v = img[cy + dy, cx + dx]
                s += v
                ss += v * v
        mean = s / n
        var = ss / n - mean * mean
        out[i] = math.sqrt(var) if var > 0.0 else 0.0
