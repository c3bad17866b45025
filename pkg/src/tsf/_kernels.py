"""Fused stencil sweeps for the FTCS recurrence and its adjoint.

All arrays are C-contiguous float64 with layout (nz, ny, nx). Boundary
neighbours are clamped to the edge cell, which is the replicate-ghost
(zero-flux) condition. The x loop is split into the two edge columns and a
branch-free interior so the interior vectorizes.
"""

from numba import njit


@njit(inline="always")
def _lap(a, z, y, x, zm, zp, ym, yp, xm, xp, cx, cy, cz):
    c = a[z, y, x]
    return (
        (a[z, y, xp] + a[z, y, xm] - 2.0 * c) * cx
        + (a[z, yp, x] + a[z, ym, x] - 2.0 * c) * cy
        + (a[zp, y, x] + a[zm, y, x] - 2.0 * c) * cz
    )


@njit(inline="always")
def _klap(k, a, z, y, x, zm, zp, ym, yp, xm, xp, cx, cy, cz):
    w = 2.0 * k[z, y, x] * a[z, y, x]
    return (
        (k[z, y, xp] * a[z, y, xp] + k[z, y, xm] * a[z, y, xm] - w) * cx
        + (k[z, yp, x] * a[z, yp, x] + k[z, ym, x] * a[z, ym, x] - w) * cy
        + (k[zp, y, x] * a[zp, y, x] + k[zm, y, x] * a[zm, y, x] - w) * cz
    )


@njit(cache=True)
def laplacian(u, cx, cy, cz, out):
    nz, ny, nx = u.shape
    last = nx - 1
    for z in range(nz):
        zm = z - 1 if z > 0 else 0
        zp = z + 1 if z < nz - 1 else nz - 1
        for y in range(ny):
            ym = y - 1 if y > 0 else 0
            yp = y + 1 if y < ny - 1 else ny - 1
            out[z, y, 0] = _lap(u, z, y, 0, zm, zp, ym, yp, 0, min(1, last), cx, cy, cz)
            for x in range(1, last):
                out[z, y, x] = _lap(u, z, y, x, zm, zp, ym, yp, x - 1, x + 1, cx, cy, cz)
            if last > 0:
                out[z, y, last] = _lap(u, z, y, last, zm, zp, ym, yp, last - 1, last, cx, cy, cz)


@njit(cache=True)
def ftcs_step(u, k, src, dt, cx, cy, cz, out):
    """out = u + dt * (k * lap(u) + src on the z = 0 layer)."""
    nz, ny, nx = u.shape
    last = nx - 1
    for z in range(nz):
        zm = z - 1 if z > 0 else 0
        zp = z + 1 if z < nz - 1 else nz - 1
        for y in range(ny):
            ym = y - 1 if y > 0 else 0
            yp = y + 1 if y < ny - 1 else ny - 1
            out[z, y, 0] = u[z, y, 0] + dt * k[z, y, 0] * _lap(
                u, z, y, 0, zm, zp, ym, yp, 0, min(1, last), cx, cy, cz)
            for x in range(1, last):
                out[z, y, x] = u[z, y, x] + dt * k[z, y, x] * _lap(
                    u, z, y, x, zm, zp, ym, yp, x - 1, x + 1, cx, cy, cz)
            if last > 0:
                out[z, y, last] = u[z, y, last] + dt * k[z, y, last] * _lap(
                    u, z, y, last, zm, zp, ym, yp, last - 1, last, cx, cy, cz)
            if z == 0:
                for x in range(nx):
                    out[0, y, x] += dt * src[y, x]


@njit(inline="always")
def _adj(lam, u, k, dt, z, y, x, zm, zp, ym, yp, xm, xp, cx, cy, cz, lam_out, dk):
    lam_out[z, y, x] = lam[z, y, x] + dt * _klap(k, lam, z, y, x, zm, zp, ym, yp, xm, xp, cx, cy, cz)
    dk[z, y, x] += dt * lam[z, y, x] * _lap(u, z, y, x, zm, zp, ym, yp, xm, xp, cx, cy, cz)


@njit(cache=True)
def adjoint_step(lam, u, k, dt, cx, cy, cz, lam_out, dk):
    """One backward sweep of the transposed FTCS step.

    lam_out = lam + dt * lap(k * lam)   (lap is symmetric)
    dk     += dt * lam * lap(u)
    """
    nz, ny, nx = u.shape
    last = nx - 1
    for z in range(nz):
        zm = z - 1 if z > 0 else 0
        zp = z + 1 if z < nz - 1 else nz - 1
        for y in range(ny):
            ym = y - 1 if y > 0 else 0
            yp = y + 1 if y < ny - 1 else ny - 1
            _adj(lam, u, k, dt, z, y, 0, zm, zp, ym, yp, 0, min(1, last), cx, cy, cz, lam_out, dk)
            for x in range(1, last):
                _adj(lam, u, k, dt, z, y, x, zm, zp, ym, yp, x - 1, x + 1, cx, cy, cz, lam_out, dk)
            if last > 0:
                _adj(lam, u, k, dt, z, y, last, zm, zp, ym, yp, last - 1, last, cx, cy, cz,
                     lam_out, dk)
