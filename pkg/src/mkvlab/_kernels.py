"""Compiled Euler-Maruyama kernels with counter-based normal draws.

Every particle owns a 64-bit key derived from ``(seed, index)``. The normal
used by particle ``i`` for noise component ``a`` at step ``k`` is a pure
function of ``(key_i, k, a)``: a SplitMix64 finalizer turns counters into
uniform words and a 256-layer ziggurat (the layout used by numpy) turns
those into standard normals. No generator state exists, so results do not
depend on the order in which particles are visited.
"""
from __future__ import annotations

import math

import numba
import numpy as np
from numba import uint64

GOLDEN = 0x9E3779B97F4A7C15
_PARTICLE_STRIDE = 0xD1B54A32D192ED03
_ZIG_R = 3.6541528853610088
_ZIG_V = 0.00492867323399
_BLOCK = 256  # counters reserved per draw (rejections consume extra words)


def _ziggurat_tables():
    """Marsaglia-Tsang tables for a 52-bit, 256-layer ziggurat."""
    scale = 2.0**52
    dn = tn = _ZIG_R
    ki = np.zeros(256, dtype=np.uint64)
    wi = np.zeros(256)
    fi = np.zeros(256)
    q = _ZIG_V / math.exp(-0.5 * dn * dn)
    ki[0] = np.uint64((dn / q) * scale)
    wi[0] = q / scale
    wi[255] = dn / scale
    fi[0] = 1.0
    fi[255] = math.exp(-0.5 * dn * dn)
    for i in range(254, 0, -1):
        dn = math.sqrt(-2.0 * math.log(_ZIG_V / dn + math.exp(-0.5 * dn * dn)))
        ki[i + 1] = np.uint64((dn / tn) * scale)
        tn = dn
        fi[i] = math.exp(-0.5 * dn * dn)
        wi[i] = dn / scale
    return ki, wi, fi


TABLES = _ziggurat_tables()


@numba.njit(inline="always")
def mix64(z):
    z = (z ^ (z >> uint64(30))) * uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> uint64(27))) * uint64(0x94D049BB133111EB)
    return z ^ (z >> uint64(31))


@numba.njit(inline="always")
def _unit(z):
    return (z >> uint64(11)) * (1.0 / 9007199254740992.0)


@numba.njit(inline="always")
def counter_normal(ctr, ki, wi, fi):
    """Standard normal determined by the counter ``ctr``."""
    g = uint64(GOLDEN)
    j = uint64(0)
    while True:
        j += uint64(1)
        r = mix64(ctr + j * g)
        idx = r & uint64(0xFF)
        r >>= uint64(8)
        negative = r & uint64(1)
        rabs = (r >> uint64(1)) & uint64(0x000FFFFFFFFFFFFF)
        x = rabs * wi[idx]
        if negative:
            x = -x
        if rabs < ki[idx]:
            return x
        if idx == 0:
            # tail beyond the base strip
            while True:
                j += uint64(1)
                xx = -math.log1p(-_unit(mix64(ctr + j * g))) / _ZIG_R
                j += uint64(1)
                yy = -math.log1p(-_unit(mix64(ctr + j * g)))
                if yy + yy > xx * xx:
                    return -(_ZIG_R + xx) if negative else _ZIG_R + xx
        else:
            j += uint64(1)
            u = _unit(mix64(ctr + j * g))
            if (fi[idx - 1] - fi[idx]) * u + fi[idx] < math.exp(-0.5 * x * x):
                return x


@numba.njit(cache=True)
def particle_keys(seed, n):
    keys = np.empty(n, dtype=np.uint64)
    base = mix64(uint64(seed) + uint64(GOLDEN))
    for i in range(n):
        keys[i] = mix64(base + uint64(i + 1) * uint64(_PARTICLE_STRIDE))
    return keys


@numba.njit(cache=True)
def fill_normals(keys, step, r, out, ki, wi, fi):
    """Draws ``out[i, a]`` exactly as the step kernels would at ``step``."""
    g = uint64(GOLDEN)
    for i in range(keys.shape[0]):
        for a in range(r):
            out[i, a] = counter_normal(keys[i] + uint64((step * r + a) * _BLOCK) * g, ki, wi, fi)


@numba.njit(cache=True)
def _mean(x, out):
    n, d = x.shape
    for a in range(d):
        out[a] = 0.0
    for i in range(n):
        for a in range(d):
            out[a] += x[i, a]
    for a in range(d):
        out[a] /= n


@numba.njit(inline="always")
def _coefficients(m, noise):
    # d = 2 coefficients, noise padded to two columns
    r = noise.shape[1]
    n01 = noise[0, 1] if r > 1 else 0.0
    n11 = noise[1, 1] if r > 1 else 0.0
    return m[0, 0], m[0, 1], m[1, 0], m[1, 1], noise[0, 0], n01, noise[1, 0], n11


@numba.njit(cache=True)
def em_run_serial(x, m, kdt, noise, keys, k0, nsteps, ki, wi, fi):
    """Advance ``x`` in place by ``nsteps`` steps of

        x <- m x + kdt mean(x) + noise xi,

    with ``m = I - dt (C + K)``, ``kdt = dt K`` and ``noise`` the scaled
    noise factor (d x r). Returns the number of completed steps; stops
    early when the ensemble mean is no longer finite.

    Each coordinate is accumulated left to right as
    ``shift + sum_b m[a, b] x[b] + sum_b noise[a, b] xi[b]``; the unrolled
    d = 2 branch keeps that order.
    """
    n, d = x.shape
    r = noise.shape[1]
    g = uint64(GOLDEN)
    mean = np.empty(d)
    total = np.empty(d)
    shift = np.empty(d)
    xi = np.empty(r)
    y = np.empty(d)
    m00, m01, m10, m11, n00, n01, n10, n11 = 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0
    if d == 2 and r >= 1:
        m00, m01, m10, m11, n00, n01, n10, n11 = _coefficients(m, noise)
    _mean(x, mean)
    for s in range(nsteps):
        for a in range(d):
            if not np.isfinite(mean[a]):
                return s
        for a in range(d):
            acc = 0.0
            for b in range(d):
                acc += kdt[a, b] * mean[b]
            shift[a] = acc
            total[a] = 0.0
        step = uint64((k0 + s) * r * _BLOCK) * g
        if d == 2 and r >= 1:
            s0 = shift[0]
            s1 = shift[1]
            t0 = 0.0
            t1 = 0.0
            for i in range(n):
                base = keys[i] + step
                z0 = counter_normal(base, ki, wi, fi)
                z1 = counter_normal(base + uint64(_BLOCK) * g, ki, wi, fi) if r > 1 else 0.0
                x0 = x[i, 0]
                x1 = x[i, 1]
                y0 = s0 + m00 * x0 + m01 * x1 + n00 * z0 + n01 * z1
                y1 = s1 + m10 * x0 + m11 * x1 + n10 * z0 + n11 * z1
                x[i, 0] = y0
                x[i, 1] = y1
                t0 += y0
                t1 += y1
            total[0] = t0
            total[1] = t1
        else:
            for i in range(n):
                base = keys[i] + step
                for a in range(r):
                    xi[a] = counter_normal(base + uint64(a * _BLOCK) * g, ki, wi, fi)
                for a in range(d):
                    acc = shift[a]
                    for b in range(d):
                        acc += m[a, b] * x[i, b]
                    for b in range(r):
                        acc += noise[a, b] * xi[b]
                    y[a] = acc
                # same summation order as _mean, so the two kernels agree bitwise
                for a in range(d):
                    x[i, a] = y[a]
                    total[a] += y[a]
        for a in range(d):
            mean[a] = total[a] / n
    for a in range(d):
        if not np.isfinite(mean[a]):
            return nsteps - 1
    return nsteps


@numba.njit(cache=True, parallel=True)
def em_run_parallel(x, m, kdt, noise, keys, k0, nsteps, ki, wi, fi):
    """Same arithmetic as :func:`em_run_serial`; the particle loop runs in
    parallel and the mean is reduced serially in index order."""
    n, d = x.shape
    r = noise.shape[1]
    g = uint64(GOLDEN)
    mean = np.empty(d)
    shift = np.empty(d)
    m00, m01, m10, m11, n00, n01, n10, n11 = 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0
    if d == 2 and r >= 1:
        m00, m01, m10, m11, n00, n01, n10, n11 = _coefficients(m, noise)
    _mean(x, mean)
    for s in range(nsteps):
        for a in range(d):
            if not np.isfinite(mean[a]):
                return s
        for a in range(d):
            acc = 0.0
            for b in range(d):
                acc += kdt[a, b] * mean[b]
            shift[a] = acc
        step = uint64((k0 + s) * r * _BLOCK) * g
        if d == 2 and r >= 1:
            s0 = shift[0]
            s1 = shift[1]
            for i in numba.prange(n):
                base = keys[i] + step
                z0 = counter_normal(base, ki, wi, fi)
                z1 = counter_normal(base + uint64(_BLOCK) * g, ki, wi, fi) if r > 1 else 0.0
                x0 = x[i, 0]
                x1 = x[i, 1]
                x[i, 0] = s0 + m00 * x0 + m01 * x1 + n00 * z0 + n01 * z1
                x[i, 1] = s1 + m10 * x0 + m11 * x1 + n10 * z0 + n11 * z1
        else:
            for i in numba.prange(n):
                xi = np.empty(r)
                y = np.empty(d)
                base = keys[i] + step
                for a in range(r):
                    xi[a] = counter_normal(base + uint64(a * _BLOCK) * g, ki, wi, fi)
                for a in range(d):
                    acc = shift[a]
                    for b in range(d):
                        acc += m[a, b] * x[i, b]
                    for b in range(r):
                        acc += noise[a, b] * xi[b]
                    y[a] = acc
                for a in range(d):
                    x[i, a] = y[a]
        _mean(x, mean)
    for a in range(d):
        if not np.isfinite(mean[a]):
            return nsteps - 1
    return nsteps
