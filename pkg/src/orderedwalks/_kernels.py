"""Compiled inner loops.

Random numbers come from a counter-based splitmix64 stream whose starting
state is a hash of ``(key, replica)``.  A replica's draws therefore do not
depend on which thread runs it or on how many replicas are in the batch.
Law arguments are the tuple returned by ``StepLaw.kernel_args``: ``kind``
(0 lattice, 1 gaussian), ``atoms`` (rows of increments), the Walker alias
table ``alias_p``/``alias_i``, ``mean`` and ``std``.
"""
from __future__ import annotations

import numpy as np
from numba import njit, prange

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S32 = np.uint64(32)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0
_TWO_PI = 2.0 * np.pi


@njit(inline="always")
def _mix(z):
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    return z ^ (z >> _S31)


@njit(cache=True)
def replica_state(key, r):
    """Initial stream state of replica ``r``; injective in r < 2**32."""
    return _mix((np.uint64(key) << _S32) | np.uint64(r))


@njit(inline="always")
def _uniform(s):
    """Next state and a uniform double in [0, 1)."""
    s = s + _GOLDEN
    return s, (_mix(s) >> _S11) * _INV53


@njit(inline="always")
def _normal(s):
    s, u1 = _uniform(s)
    s, u2 = _uniform(s)
    return s, np.sqrt(-2.0 * np.log(1.0 - u1)) * np.cos(_TWO_PI * u2)


@njit(inline="always")
def _atom(s, alias_p, alias_i):
    s, u = _uniform(s)
    x = u * alias_p.shape[0]
    j = np.int64(x)
    return s, j if x - j < alias_p[j] else alias_i[j]


@njit(inline="always")
def _draw(kind, atoms, alias_p, alias_i, mean, std, s, out):
    """One gap increment into ``out``; returns the advanced state."""
    if kind == 0:
        s, j = _atom(s, alias_p, alias_i)
        for k in range(out.shape[0]):
            out[k] = atoms[j, k]
    else:
        s, z = _normal(s)
        prev = mean[0] + std * z
        for k in range(out.shape[0]):
            s, z = _normal(s)
            cur = mean[k + 1] + std * z
            out[k] = cur - prev
            prev = cur
    return s


@njit(inline="always")
def _draw_state(kind, atoms, alias_p, alias_i, mean, std, s, out):
    """One full d-dimensional increment into ``out``."""
    if kind == 0:
        s, j = _atom(s, alias_p, alias_i)
        for k in range(out.shape[0]):
            out[k] = atoms[j, k]
    else:
        for k in range(out.shape[0]):
            s, z = _normal(s)
            out[k] = mean[k] + std * z
    return s


@njit(cache=True)
def gap_path(kind, atoms, alias_p, alias_i, mean, std, y0, horizon, stop_at_tau, key, replica):
    m = y0.shape[0]
    s = replica_state(key, replica)
    incs = np.zeros((horizon, m), dtype=y0.dtype)
    y = y0.copy()
    inc = np.zeros_like(y0)
    tau = 0
    n = 0
    while n < horizon:
        s = _draw(kind, atoms, alias_p, alias_i, mean, std, s, inc)
        alive = True
        for k in range(m):
            incs[n, k] = inc[k]
            y[k] += inc[k]
            if not y[k] > 0:
                alive = False
        n += 1
        if not alive and tau == 0:
            tau = n
            if stop_at_tau:
                break
    return incs, n, tau


@njit(parallel=True, cache=True)
def excursions(kind, atoms, alias_p, alias_i, mean, std, probes, qs, truncation, stop_r, key, r0, n_rep):
    """Run the gap walk from 0 until the first common ladder time J_1.

    Returns per replica: undiscounted indicator counts (n_rep x P), discounted
    sums (n_rep x P x C) with discount factors ``qs = exp(-c)``, the number
    of steps taken, and a status (0: J_1 observed, 1: censored at
    ``truncation``, 2: some R component passed ``stop_r``, after which
    further contributions are negligible and J_1 is a.s. infinite up to that
    negligible mass).
    """
    n_probe, m = probes.shape
    n_c = qs.shape[0]
    counts = np.zeros((n_rep, n_probe))
    dsums = np.zeros((n_rep, n_probe, n_c))
    steps = np.zeros(n_rep, np.int64)
    status = np.zeros(n_rep, np.int8)
    for i in prange(n_rep):
        s = replica_state(key, r0 + i)
        y = np.zeros_like(probes[0])
        top = np.zeros_like(probes[0])
        gap = np.zeros_like(probes[0])
        inc = np.zeros_like(probes[0])
        disc = np.ones(n_c)
        cnt = np.zeros(n_probe)
        dsum = np.zeros((n_probe, n_c))
        st = 1
        n = 0
        while n < truncation:
            n += 1
            s = _draw(kind, atoms, alias_p, alias_i, mean, std, s, inc)
            for c in range(n_c):
                # flush before subnormals; monotone, so orderings survive
                disc[c] = disc[c] * qs[c] if disc[c] > 1e-290 else 0.0
            up = True
            far = False
            for k in range(m):
                y[k] += inc[k]
                gap[k] = top[k] - y[k]
                up &= gap[k] < 0
                far |= gap[k] >= stop_r[k]
                top[k] = max(top[k], y[k])
            if up:
                st = 0
                break
            for p in range(n_probe):
                hit = 1.0
                for k in range(m):
                    hit *= gap[k] < probes[p, k]
                cnt[p] += hit
                for c in range(n_c):
                    dsum[p, c] += hit * disc[c]
            if far:
                st = 2
                break
        counts[i] = cnt
        dsums[i] = dsum
        steps[i] = n
        status[i] = st
    return counts, dsums, steps, status


@njit(parallel=True, cache=True)
def ladder_gaps(kind, atoms, alias_p, alias_i, mean, std, m, n_j, truncation, key, r0, n_rep):
    """Successive differences J_1, J_2 - J_1, ... of common ladder times.

    Each inter-ladder segment gets its own budget of ``truncation`` steps;
    ``-1`` marks a censored segment (later entries are also -1).
    """
    out = np.full((n_rep, n_j), -1, np.int64)
    for i in prange(n_rep):
        s = replica_state(key, r0 + i)
        y = np.zeros(m, dtype=atoms.dtype)
        top = np.zeros(m, dtype=atoms.dtype)
        inc = np.zeros(m, dtype=atoms.dtype)
        for j in range(n_j):
            n = 0
            found = False
            while n < truncation:
                n += 1
                s = _draw(kind, atoms, alias_p, alias_i, mean, std, s, inc)
                up = True
                for k in range(m):
                    y[k] += inc[k]
                    if y[k] > top[k]:
                        top[k] = y[k]
                    else:
                        up = False
                if up:
                    found = True
                    break
            if not found:
                break
            out[i, j] = n
    return out


@njit(parallel=True, cache=True)
def exit_times(kind, atoms, alias_p, alias_i, mean, std, starts, horizon, safe, key, r0, n_rep):
    """Exit times from several starts driven by the same increments.

    ``tau[i, j]`` is the exit time, ``-1`` when alive at ``horizon`` and
    ``-2`` when every gap passed ``safe`` (all components drift upward and
    the probability of a later exit is negligible).
    """
    n_s, m = starts.shape
    tau = np.full((n_rep, n_s), -1, np.int64)
    for i in prange(n_rep):
        s = replica_state(key, r0 + i)
        y = starts.copy()
        inc = np.zeros_like(starts[0])
        live = np.ones(n_s, np.bool_)
        n_live = n_s
        n = 0
        while n < horizon and n_live > 0:
            n += 1
            s = _draw(kind, atoms, alias_p, alias_i, mean, std, s, inc)
            for j in range(n_s):
                if not live[j]:
                    continue
                inside = True
                clear = True
                for k in range(m):
                    y[j, k] += inc[k]
                    if not y[j, k] > 0:
                        inside = False
                    if not y[j, k] >= safe[k]:
                        clear = False
                if not inside:
                    tau[i, j] = n
                    live[j] = False
                    n_live -= 1
                elif clear:
                    tau[i, j] = -2
                    live[j] = False
                    n_live -= 1
    return tau


@njit(parallel=True, cache=True)
def renewal(kind, atoms, alias_p, alias_i, mean, std, probes, weak, max_beta, truncation, safe, key, r0, n_rep):
    """Indicator counts over the union of descending ladder times.

    At each descending ladder time (of any component) the indicator
    ``min_{1..n} Y > -y`` is added for every probe.  Status: 0 every probe
    is dead, 1 step budget exhausted, 2 all components far above their
    minima, 3 ``max_beta`` events reached.
    """
    n_probe, m = probes.shape
    sums = np.zeros((n_rep, n_probe))
    last = np.zeros((n_rep, n_probe))
    n_beta = np.zeros(n_rep, np.int64)
    steps = np.zeros(n_rep, np.int64)
    status = np.zeros(n_rep, np.int8)
    for i in prange(n_rep):
        s = replica_state(key, r0 + i)
        y = np.zeros_like(probes[0])
        low0 = np.zeros_like(probes[0])
        low1 = np.zeros_like(probes[0])
        inc = np.zeros_like(probes[0])
        dead = np.zeros(n_probe, np.bool_)
        n_dead = 0
        for p in range(n_probe):
            for k in range(m):
                if not probes[p, k] > 0:
                    dead[p] = True
            if dead[p]:
                n_dead += 1
        st = 1
        n = 0
        nb = 0
        if n_dead == n_probe:
            st = 0
        while st == 1 and n < truncation:
            n += 1
            s = _draw(kind, atoms, alias_p, alias_i, mean, std, s, inc)
            event = False
            clear = True
            for k in range(m):
                y[k] += inc[k]
                if n == 1 or y[k] < low1[k]:
                    low1[k] = y[k]
                if y[k] < low0[k] or (weak and y[k] == low0[k]):
                    event = True
                if y[k] < low0[k]:
                    low0[k] = y[k]
                if not y[k] - low0[k] >= safe[k]:
                    clear = False
            if event:
                nb += 1
                for p in range(n_probe):
                    if dead[p]:
                        continue
                    alive = True
                    for k in range(m):
                        if not low1[k] > -probes[p, k]:
                            alive = False
                            break
                    if alive:
                        sums[i, p] += 1.0
                        if nb == max_beta:
                            last[i, p] = 1.0
                    else:
                        dead[p] = True
                        n_dead += 1
                if n_dead == n_probe:
                    st = 0
                elif nb >= max_beta:
                    st = 3
            if st == 1 and clear:
                st = 2
        sums_n = n
        steps[i] = sums_n
        n_beta[i] = nb
        status[i] = st
    return sums, last, n_beta, steps, status


@njit(parallel=True, cache=True)
def geometric_rejection(kind, atoms, alias_p, alias_i, mean, std, x0, log_q, T, max_attempts, key, r0, n_acc):
    """Rejection sampler for the walk killed at an independent geometric time.

    ``log_q = -c``.  A draw is accepted when N >= T and the walk stays in the
    chamber at times 1..N.  Returns the first T+1 states of each accepted
    path, the attempts used and an accepted flag.
    """
    d = x0.shape[0]
    paths = np.zeros((n_acc, T + 1, d), dtype=x0.dtype)
    attempts = np.zeros(n_acc, np.int64)
    accepted = np.zeros(n_acc, np.bool_)
    for i in prange(n_acc):
        s = replica_state(key, r0 + i)
        x = x0.copy()
        inc = np.zeros_like(x0)
        a = 0
        while a < max_attempts and not accepted[i]:
            a += 1
            s, u = _uniform(s)
            big_n = np.floor(np.log(1.0 - u) / log_q)
            if big_n < T:
                continue
            x[:] = x0
            paths[i, 0, :] = x0
            ok = True
            n = 0
            while n < big_n:
                n += 1
                s = _draw_state(kind, atoms, alias_p, alias_i, mean, std, s, inc)
                for k in range(d):
                    x[k] += inc[k]
                for k in range(d - 1):
                    if not x[k] < x[k + 1]:
                        ok = False
                        break
                if not ok:
                    break
                if n <= T:
                    paths[i, n, :] = x
            if ok:
                accepted[i] = True
        attempts[i] = a
    return paths, attempts, accepted


@njit(cache=True)
def _neumaier(values, idx):
    s = 0.0
    comp = 0.0
    for j in idx:
        v = values[j]
        t = s + v
        if abs(s) >= abs(v):
            comp += (s - t) + v
        else:
            comp += (v - t) + s
        s = t
    return s + comp


@njit(cache=True)
def _neumaier_all(values):
    s = 0.0
    comp = 0.0
    for v in values:
        t = s + v
        if abs(s) >= abs(v):
            comp += (s - t) + v
        else:
            comp += (v - t) + s
        s = t
    return s + comp


@njit(cache=True)
def _harvest(values, idx):
    s = _neumaier(values, idx)
    for j in idx:
        values[j] = 0.0
    return s


@njit(cache=True)
def forward_survival(mass, offs, probs, lo, hi, low_idx, high_idx, n_steps):
    """Push the killed gap walk forward on a padded flat grid.

    Cells in ``low_idx`` (some gap <= 0) collect exited mass, cells in
    ``high_idx`` the mass that left the box upward.  Both are emptied after
    every step.  Returns the alive, absorbed and overflow mass after each
    step 1..n_steps.
    """
    alive = np.zeros(n_steps + 1)
    absorbed = np.zeros(n_steps + 1)
    overflow = np.zeros(n_steps + 1)
    alive[0] = _neumaier_all(mass)
    old = mass.copy()
    new = np.zeros_like(mass)
    n_a = offs.shape[0]
    for n in range(1, n_steps + 1):
        for i in range(lo, hi):
            s = 0.0
            for a in range(n_a):
                s += probs[a] * old[i - offs[a]]
            new[i] = s
        absorbed[n] = absorbed[n - 1] + _harvest(new, low_idx)
        overflow[n] = overflow[n - 1] + _harvest(new, high_idx)
        alive[n] = _neumaier_all(new)
        old, new = new, old
    return alive, absorbed, overflow, old


@njit(cache=True)
def backward_survival(offs, probs, size, lo, hi, low_idx, high_idx, out_idx, weights, checkpoints):
    """Backward recursion u_{n+1}(y) = sum_a p_a 1{y+a alive} u_n(y+a).

    Runs a lower copy (cells above the box count as exited) and an upper copy
    (they count as surviving forever).  Accumulates sum_n w[c, n] u_n(y) over
    the cells ``out_idx`` and snapshots the running sums at ``checkpoints``.
    """
    n_c, n_w = weights.shape
    n_out = out_idx.shape[0]
    n_chk = checkpoints.shape[0]
    acc_lo = np.zeros((n_chk, n_c, n_out))
    acc_hi = np.zeros((n_chk, n_c, n_out))
    run_lo = np.zeros((n_c, n_out))
    run_hi = np.zeros((n_c, n_out))
    u_lo = np.ones(size)
    u_hi = np.ones(size)
    w_lo = np.zeros(size)
    w_hi = np.zeros(size)
    n_a = offs.shape[0]
    chk = 0
    for n in range(n_w):
        for c in range(n_c):
            wc = weights[c, n]
            for j in range(n_out):
                run_lo[c, j] += wc * u_lo[out_idx[j]]
                run_hi[c, j] += wc * u_hi[out_idx[j]]
        while chk < n_chk and checkpoints[chk] == n:
            acc_lo[chk] = run_lo
            acc_hi[chk] = run_hi
            chk += 1
        if n == n_w - 1:
            break
        for j in low_idx:
            u_lo[j] = 0.0
            u_hi[j] = 0.0
        for j in high_idx:
            u_lo[j] = 0.0
            u_hi[j] = 1.0
        for i in range(lo, hi):
            s_lo = 0.0
            s_hi = 0.0
            for a in range(n_a):
                s_lo += probs[a] * u_lo[i + offs[a]]
                s_hi += probs[a] * u_hi[i + offs[a]]
            w_lo[i] = s_lo
            w_hi[i] = s_hi
        u_lo, w_lo = w_lo, u_lo
        u_hi, w_hi = w_hi, u_hi
    return acc_lo, acc_hi


@njit(cache=True)
def reflected_chain(atoms, probs, box, strides, probes, qs, n_steps):
    """Exact law of R_n = (R_{n-1} - dY_n)^+ killed at the first ladder time.

    Cells are R in [0, box]^m (flattened with ``strides``).  ``probes`` are
    in the same (reduced) units.  Returns, per probe and discount,
    sum_{n=1}^{n_steps} q^n P(R_{n-1} - dY_n < y, J_1 > n) together with
    the killed and overflow masses and the mass still in the box.
    """
    n_cells = 1
    for k in range(atoms.shape[1]):
        n_cells *= box + 1
    n_probe = probes.shape[0]
    n_c = qs.shape[0]
    m = atoms.shape[1]
    n_a = atoms.shape[0]
    old = np.zeros(n_cells)
    new = np.zeros(n_cells)
    old[0] = 1.0
    tally = np.zeros((n_probe, n_c))
    step_hit = np.zeros(n_probe)
    disc = np.ones(n_c)
    killed = 0.0
    overflow = 0.0
    r = np.zeros(m, np.int64)
    t = np.zeros(m, np.int64)
    for n in range(1, n_steps + 1):
        new[:] = 0.0
        step_hit[:] = 0.0
        for cell in range(n_cells):
            v = old[cell]
            if v == 0.0:
                continue
            rem = cell
            for k in range(m):
                r[k] = rem // strides[k]
                rem -= r[k] * strides[k]
            for a in range(n_a):
                w = v * probs[a]
                neg = True
                out = False
                idx = 0
                for k in range(m):
                    t[k] = r[k] - atoms[a, k]
                    if t[k] >= 0:
                        neg = False
                        if t[k] > box:
                            out = True
                        idx += t[k] * strides[k]
                if neg:
                    killed += w
                    continue
                for p in range(n_probe):
                    hit = True
                    for k in range(m):
                        if not t[k] < probes[p, k]:
                            hit = False
                            break
                    if hit:
                        step_hit[p] += w
                if out:
                    overflow += w
                else:
                    new[idx] += w
        for c in range(n_c):
            disc[c] = disc[c] * qs[c] if disc[c] > 1e-290 else 0.0
        for p in range(n_probe):
            for c in range(n_c):
                tally[p, c] += disc[c] * step_hit[p]
        old, new = new, old
    return tally, killed, overflow, old.sum()
