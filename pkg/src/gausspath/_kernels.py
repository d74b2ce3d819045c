"""Compiled inner loops.

Everything here works on plain arrays so the Python layer can keep its
dataclasses.  Field caches are laid out as

    vals[p, k]      value of component k at quadrature node p
    grads[p, k, a]  derivative along axis a of component k at node p

with nodes flattened row-major over the axes.  Node-major layout keeps
everything a local update touches at one node in adjacent memory.  Gauge component index is
``k = colour * 4 + mu``; the harmonic oscillator uses a single component.
"""
import math

import numpy as np
from numba import njit

KIND_HO = 0
KIND_GAUGE = 1


@njit(cache=True, inline="always")
def min_image(d, extent):
    d = d % extent
    if d > 0.5 * extent:
        d -= extent
    return d


@njit(cache=True)
def stencil(center, width, r2, extents, nodes, out_idx, out_g, out_gp, cand_idx, cand_d):
    """Write the truncated Gaussian and its gradient on nearby nodes.

    Returns the number of nodes written.  ``cand_idx``/``cand_d`` are
    scratch arrays of shape (dims, m) and (2 * dims, m): node index,
    displacement and per-axis Gaussian factor for every candidate node.
    The Gaussian is separable, so no exponential is taken per node.
    """
    dims = extents.shape[0]
    r = math.sqrt(r2)
    inv_w2 = 1.0 / (width * width)
    counts = np.empty(dims, np.int64)
    for a in range(dims):
        n = nodes[a]
        h = extents[a] / n
        k = int(r / h) + 1
        m = 0
        if 2 * k + 1 >= n:
            lo, hi = 0, n
        else:
            jc = int(math.floor(center[a] / h))
            lo, hi = jc - k, jc + k + 1
        for j in range(lo, hi):
            jj = j % n
            d = min_image((jj + 0.5) * h - center[a], extents[a])
            if d * d <= r2:
                cand_idx[a, m] = jj
                cand_d[a, m] = d
                cand_d[dims + a, m] = math.exp(-d * d * inv_w2)
                m += 1
        counts[a] = m

    total = 0
    if dims == 1:
        for i0 in range(counts[0]):
            d0 = cand_d[0, i0]
            g = cand_d[1, i0]
            out_idx[total] = cand_idx[0, i0]
            out_g[total] = g
            out_gp[0, total] = -2.0 * d0 * inv_w2 * g
            total += 1
        return total

    n1, n2, n3 = nodes[1], nodes[2], nodes[3]
    for i0 in range(counts[0]):
        d0 = cand_d[0, i0]
        s0 = d0 * d0
        e0 = cand_d[4, i0]
        f0 = cand_idx[0, i0] * n1
        for i1 in range(counts[1]):
            d1 = cand_d[1, i1]
            s1 = s0 + d1 * d1
            if s1 > r2:
                continue
            e1 = e0 * cand_d[5, i1]
            f1 = (f0 + cand_idx[1, i1]) * n2
            for i2 in range(counts[2]):
                d2 = cand_d[2, i2]
                s2 = s1 + d2 * d2
                if s2 > r2:
                    continue
                e2 = e1 * cand_d[6, i2]
                f2 = (f1 + cand_idx[2, i2]) * n3
                for i3 in range(counts[3]):
                    d3 = cand_d[3, i3]
                    if s2 + d3 * d3 > r2:
                        continue
                    g = e2 * cand_d[7, i3]
                    out_idx[total] = f2 + cand_idx[3, i3]
                    out_g[total] = g
                    c = -2.0 * inv_w2 * g
                    out_gp[0, total] = c * d0
                    out_gp[1, total] = c * d1
                    out_gp[2, total] = c * d2
                    out_gp[3, total] = c * d3
                    total += 1
    return total


@njit(cache=True)
def scatter(vals, grads, comp, idx, g, gp, cnt, coef):
    dims = gp.shape[0]
    for t in range(cnt):
        p = idx[t]
        vals[p, comp] += coef * g[t]
        for a in range(dims):
            grads[p, comp, a] += coef * gp[a, t]


@njit(cache=True)
def build_fields(coef, centers, widths, r_factor, extents, nodes, vals, grads,
                 idx, g, gp, cand_idx, cand_d):
    vals[:] = 0.0
    grads[:] = 0.0
    ncomp, nsum = coef.shape
    for k in range(ncomp):
        for i in range(nsum):
            c = coef[k, i]
            if c == 0.0:
                continue
            w = widths[k, i]
            r2 = (w * r_factor) ** 2
            cnt = stencil(centers[k, i], w, r2, extents, nodes, idx, g, gp, cand_idx, cand_d)
            scatter(vals, grads, k, idx, g, gp, cnt, c)


@njit(cache=True, inline="always")
def _gauge_f(vals, grads, p, a, mu, nu, ncol, coupling):
    f = grads[p, a * 4 + nu, mu] - grads[p, a * 4 + mu, nu]
    if ncol == 3 and coupling != 0.0:
        b = (a + 1) % 3
        c = (a + 2) % 3
        f += coupling * (vals[p, b * 4 + mu] * vals[p, c * 4 + nu]
                         - vals[p, c * 4 + mu] * vals[p, b * 4 + nu])
    return f


@njit(cache=True)
def density_sum(kind, vals, grads, mass, omega2, ncol, coupling):
    """Sum of the Lagrangian density over all nodes (no cell volume)."""
    npts = vals.shape[0]
    total = 0.0
    if kind == KIND_HO:
        for p in range(npts):
            q = vals[p, 0]
            qd = grads[p, 0, 0]
            total += 0.5 * mass * qd * qd + 0.5 * mass * omega2 * q * q
    else:
        for p in range(npts):
            for a in range(ncol):
                for mu in range(4):
                    for nu in range(mu + 1, 4):
                        f = _gauge_f(vals, grads, p, a, mu, nu, ncol, coupling)
                        total += 0.5 * f * f
    return total


@njit(cache=True)
def density_at_nodes(kind, vals, grads, mass, omega2, ncol, coupling, out):
    npts = vals.shape[0]
    for p in range(npts):
        s = 0.0
        if kind == KIND_HO:
            q = vals[p, 0]
            qd = grads[p, 0, 0]
            s = 0.5 * mass * qd * qd + 0.5 * mass * omega2 * q * q
        else:
            for a in range(ncol):
                for mu in range(4):
                    for nu in range(mu + 1, 4):
                        f = _gauge_f(vals, grads, p, a, mu, nu, ncol, coupling)
                        s += 0.5 * f * f
        out[p] = s


@njit(cache=True)
def _ho_delta(vals, grads, idx, g, gp, cnt, delta, mass, omega2):
    total = 0.0
    for t in range(cnt):
        p = idx[t]
        q = vals[p, 0]
        qd = grads[p, 0, 0]
        qn = q + delta * g[t]
        qdn = qd + delta * gp[0, t]
        total += 0.5 * mass * (qdn * qdn - qd * qd) + 0.5 * mass * omega2 * (qn * qn - q * q)
    return total


@njit(cache=True)
def _u1_delta(vals, grads, mu, idx, gp, cnt, delta):
    total = 0.0
    for t in range(cnt):
        p = idx[t]
        for nu in range(4):
            if nu == mu:
                continue
            f_old = grads[p, nu, mu] - grads[p, mu, nu]
            f_new = f_old - delta * gp[nu, t]
            total += 0.5 * (f_new * f_new - f_old * f_old)
    return total


@njit(cache=True)
def _su2_delta(vals, grads, comp, idx, g, gp, cnt, delta, coupling):
    a0 = comp // 4
    mu = comp % 4
    k0, k1, k2 = mu, 4 + mu, 8 + mu
    total = 0.0
    for t in range(cnt):
        p = idx[t]
        dg = delta * g[t]
        m0 = vals[p, k0]
        m1 = vals[p, k1]
        m2 = vals[p, k2]
        n0, n1, n2 = m0, m1, m2
        if a0 == 0:
            n0 += dg
        elif a0 == 1:
            n1 += dg
        else:
            n2 += dg
        for nu in range(4):
            if nu == mu:
                continue
            v0 = vals[p, nu]
            v1 = vals[p, 4 + nu]
            v2 = vals[p, 8 + nu]
            # d_mu A^a_nu - d_nu A^a_mu
            c0 = grads[p, nu, mu] - grads[p, k0, nu]
            c1 = grads[p, 4 + nu, mu] - grads[p, k1, nu]
            c2 = grads[p, 8 + nu, mu] - grads[p, k2, nu]
            f0 = c0 + coupling * (m1 * v2 - m2 * v1)
            f1 = c1 + coupling * (m2 * v0 - m0 * v2)
            f2 = c2 + coupling * (m0 * v1 - m1 * v0)
            dd = delta * gp[nu, t]
            if a0 == 0:
                c0 -= dd
            elif a0 == 1:
                c1 -= dd
            else:
                c2 -= dd
            e0 = c0 + coupling * (n1 * v2 - n2 * v1)
            e1 = c1 + coupling * (n2 * v0 - n0 * v2)
            e2 = c2 + coupling * (n0 * v1 - n1 * v0)
            total += 0.5 * (e0 * e0 + e1 * e1 + e2 * e2 - f0 * f0 - f1 * f1 - f2 * f2)
    return total


@njit(cache=True)
def local_delta(kind, vals, grads, comp, idx, g, gp, cnt, delta, mass, omega2, ncol, coupling):
    """Change of the density sum when ``delta * stencil`` is added to ``comp``.

    Old and new integrands are evaluated node by node and subtracted; only
    planes (mu, nu) containing the updated direction can change.
    """
    if kind == KIND_HO:
        return _ho_delta(vals, grads, idx, g, gp, cnt, delta, mass, omega2)
    if ncol == 1:
        return _u1_delta(vals, grads, comp, idx, gp, cnt, delta)
    return _su2_delta(vals, grads, comp, idx, g, gp, cnt, delta, coupling)


@njit(cache=True)
def metropolis_block(kind, coef, centers, widths, r_factor, extents, nodes, vals, grads,
                     draws, cutoff, cell_volume, mass, omega2, ncol, coupling,
                     idx, g, gp, cand_idx, cand_d):
    """Run ``len(draws)`` single-term Metropolis updates in place.

    Each row of ``draws`` holds three uniforms on [0, 1): term choice,
    proposal amplitude and acceptance test.  Returns (accepted, dS_sum).
    """
    ncomp, nsum = coef.shape
    nterms = ncomp * nsum
    accepted = 0
    ds_sum = 0.0
    for s in range(draws.shape[0]):
        flat = int(draws[s, 0] * nterms)
        if flat >= nterms:
            flat = nterms - 1
        k = flat // nsum
        i = flat % nsum
        delta = cutoff * (2.0 * draws[s, 1] - 1.0)
        w = widths[k, i]
        r2 = (w * r_factor) ** 2
        cnt = stencil(centers[k, i], w, r2, extents, nodes, idx, g, gp, cand_idx, cand_d)
        ds = cell_volume * local_delta(kind, vals, grads, k, idx, g, gp, cnt, delta,
                                       mass, omega2, ncol, coupling)
        if ds <= 0.0 or draws[s, 2] < math.exp(-ds):
            coef[k, i] += delta
            scatter(vals, grads, k, idx, g, gp, cnt, delta)
            accepted += 1
            ds_sum += ds
    return accepted, ds_sum


@njit(cache=True)
def evaluate_points(points, coef, centers, widths, r2s, extents, cell_counts,
                    cell_start, cell_items, out_val, out_grad):
    """Truncated Gaussian sum (and gradient) at arbitrary points for one component.

    Terms are pre-binned into a uniform cell grid whose cell size is at least
    the largest truncation radius, so only the 3**dims neighbouring cells are
    visited (or the whole axis when it has fewer than three cells).
    """
    dims = extents.shape[0]
    npts = points.shape[0]
    offs = np.empty((dims, 3), np.int64)
    noff = np.empty(dims, np.int64)
    pos = np.empty(dims, np.int64)
    for p in range(npts):
        for a in range(dims):
            nc = cell_counts[a]
            cs = extents[a] / nc
            cc = int(math.floor(points[p, a] / cs)) % nc
            if nc < 3:
                for j in range(nc):
                    offs[a, j] = j
                noff[a] = nc
            else:
                offs[a, 0] = (cc - 1) % nc
                offs[a, 1] = cc
                offs[a, 2] = (cc + 1) % nc
                noff[a] = 3
        val = 0.0
        for a in range(dims):
            out_grad[p, a] = 0.0
        pos[:] = 0
        while True:
            cell = 0
            for a in range(dims):
                cell = cell * cell_counts[a] + offs[a, pos[a]]
            for t in range(cell_start[cell], cell_start[cell + 1]):
                i = cell_items[t]
                d2 = 0.0
                for a in range(dims):
                    dd = min_image(points[p, a] - centers[i, a], extents[a])
                    d2 += dd * dd
                if d2 <= r2s[i]:
                    w = widths[i]
                    e = coef[i] * math.exp(-d2 / (w * w))
                    val += e
                    for a in range(dims):
                        dd = min_image(points[p, a] - centers[i, a], extents[a])
                        out_grad[p, a] += -2.0 * dd / (w * w) * e
            a = dims - 1
            while a >= 0:
                pos[a] += 1
                if pos[a] < noff[a]:
                    break
                pos[a] = 0
                a -= 1
            if a < 0:
                break
        out_val[p] = val
