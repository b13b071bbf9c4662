"""Hot loops: per-record gradient accumulation and batched candidate scoring.

Every kernel exists twice, a numba ``@njit`` loop and a vectorised numpy
version. The numba path is used when numba imports and the environment variable
``MOHR_DISABLE_NUMBA`` is unset (or ``0``); :func:`set_backend` switches at
runtime. Both paths read float32 or float64 parameters and accumulate in
float64.

Record layouts (int64 arrays with four columns):

* sequence records: ``(user, item, next_item, negative_item)``
* item records:     ``(item, relation_id, related_item, negative_item)``
* relation records: ``(user, item, relevant_relation, negative_relation)``
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit
    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f

_disabled = os.environ.get("MOHR_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")
USE_NUMBA = HAS_NUMBA and not _disabled


def set_backend(name: str) -> None:
    global USE_NUMBA
    if name == "numba":
        if not HAS_NUMBA:
            raise RuntimeError("numba is not installed")
        USE_NUMBA = True
    elif name == "numpy":
        USE_NUMBA = False
    else:
        raise ValueError(f"unknown backend {name!r}")


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------- numba path

@njit(cache=True)
def _softplus(x):
    if x > 0.0:
        return x + np.log1p(np.exp(-x))
    return np.log1p(np.exp(x))


@njit(cache=True)
def _sigmoid(x):
    if x >= 0.0:
        return 1.0 / (1.0 + np.exp(-x))
    z = np.exp(x)
    return z / (1.0 + z)


@njit(cache=True)
def _rel_probs(U, I, Rv, br, u, i, s, P):
    nr, K = Rv.shape
    for r in range(nr):
        acc = 0.0
        for k in range(K):
            h = np.float64(U[u, k]) + I[i, k] - Rv[r, k]
            acc += h * h
        s[r] = br[r] - acc
    smax = s[0]
    for r in range(1, nr):
        if s[r] > smax:
            smax = s[r]
    tot = 0.0
    for r in range(nr):
        P[r] = np.exp(s[r] - smax)
        tot += P[r]
    for r in range(nr):
        P[r] /= tot


@njit(cache=True)
def _seq_nb(U, I, Rv, bi, br, recs, scale, bias_c, mixture, gU, gI, gR, gbi, gbr):
    nr, K = Rv.shape
    s = np.empty(nr)
    P = np.empty(nr)
    comp = np.empty((2, nr))
    mix = np.zeros(2)
    rs = np.empty(2)
    total = 0.0
    for b in range(recs.shape[0]):
        u, i = recs[b, 0], recs[b, 1]
        if mixture:
            _rel_probs(U, I, Rv, br, u, i, s, P)
        for t in range(2):
            j = recs[b, 2 + t]
            acc = 0.0
            for k in range(K):
                e = np.float64(I[i, k]) + U[u, k] - I[j, k]
                acc += e * e
            pref = np.float64(bi[j]) - acc
            if mixture:
                m = 0.0
                for r in range(nr):
                    acc = 0.0
                    for k in range(K):
                        f = np.float64(I[i, k]) + Rv[r, k] - I[j, k]
                        acc += f * f
                    c = -acc
                    if bias_c:
                        c = c + bi[j]
                    comp[t, r] = c
                    m += P[r] * c
                mix[t] = m
                rs[t] = pref + m
            else:
                acc = 0.0
                for k in range(K):
                    f = np.float64(I[i, k]) + Rv[0, k] - I[j, k]
                    acc += f * f
                rs[t] = pref - acc
        delta = rs[0] - rs[1]
        total += _softplus(-delta)
        g = -_sigmoid(-delta) * scale
        for t in range(2):
            j = recs[b, 2 + t]
            gj = g if t == 0 else -g
            for k in range(K):
                e = np.float64(I[i, k]) + U[u, k] - I[j, k]
                gI[i, k] -= 2.0 * gj * e
                gU[u, k] -= 2.0 * gj * e
                gI[j, k] += 2.0 * gj * e
            gbi[j] += gj
            if mixture:
                for r in range(nr):
                    coef = gj * P[r]
                    for k in range(K):
                        f = np.float64(I[i, k]) + Rv[r, k] - I[j, k]
                        gI[i, k] -= 2.0 * coef * f
                        gR[r, k] -= 2.0 * coef * f
                        gI[j, k] += 2.0 * coef * f
                    if bias_c:
                        gbi[j] += coef
            else:
                for k in range(K):
                    f = np.float64(I[i, k]) + Rv[0, k] - I[j, k]
                    gI[i, k] -= 2.0 * gj * f
                    gR[0, k] -= 2.0 * gj * f
                    gI[j, k] += 2.0 * gj * f
        if mixture:
            for r in range(nr):
                gs = g * P[r] * ((comp[0, r] - mix[0]) - (comp[1, r] - mix[1]))
                for k in range(K):
                    h = np.float64(U[u, k]) + I[i, k] - Rv[r, k]
                    gU[u, k] -= 2.0 * gs * h
                    gI[i, k] -= 2.0 * gs * h
                    gR[r, k] += 2.0 * gs * h
                gbr[r] += gs
    return total


@njit(cache=True)
def _item_nb(I, Rv, bi, recs, scale, gI, gR, gbi):
    K = I.shape[1]
    total = 0.0
    for b in range(recs.shape[0]):
        i, r, p, q = recs[b, 0], recs[b, 1], recs[b, 2], recs[b, 3]
        dp = 0.0
        dq = 0.0
        for k in range(K):
            head = np.float64(I[i, k]) + Rv[r, k]
            fp = head - I[p, k]
            fq = head - I[q, k]
            dp += fp * fp
            dq += fq * fq
        delta = (bi[p] - dp) - (bi[q] - dq)
        total += _softplus(-delta)
        g = -_sigmoid(-delta) * scale
        for k in range(K):
            head = np.float64(I[i, k]) + Rv[r, k]
            fp = head - I[p, k]
            fq = head - I[q, k]
            gh = -2.0 * g * (fp - fq)
            gI[i, k] += gh
            gR[r, k] += gh
            gI[p, k] += 2.0 * g * fp
            gI[q, k] -= 2.0 * g * fq
        gbi[p] += g
        gbi[q] -= g
    return total


@njit(cache=True)
def _rel_nb(U, I, Rv, br, recs, scale, on_scores, gU, gI, gR, gbr):
    nr, K = Rv.shape
    s = np.empty(nr)
    P = np.empty(nr)
    gsv = np.empty(nr)
    total = 0.0
    for b in range(recs.shape[0]):
        u, i, rp, rn = recs[b, 0], recs[b, 1], recs[b, 2], recs[b, 3]
        _rel_probs(U, I, Rv, br, u, i, s, P)
        if on_scores:
            delta = s[rp] - s[rn]
        else:
            delta = P[rp] - P[rn]
        total += _softplus(-delta)
        g = -_sigmoid(-delta) * scale
        for r in range(nr):
            if on_scores:
                gsv[r] = 0.0
            else:
                ip = 1.0 if r == rp else 0.0
                ineg = 1.0 if r == rn else 0.0
                gsv[r] = g * (P[rp] * (ip - P[r]) - P[rn] * (ineg - P[r]))
        if on_scores:
            gsv[rp] += g
            gsv[rn] -= g
        for r in range(nr):
            gs = gsv[r]
            for k in range(K):
                h = np.float64(U[u, k]) + I[i, k] - Rv[r, k]
                gU[u, k] -= 2.0 * gs * h
                gI[i, k] -= 2.0 * gs * h
                gR[r, k] += 2.0 * gs * h
            gbr[r] += gs
    return total


@njit(cache=True, nogil=True)
def _score_nb(U, I, Rv, bi, br, users, ctx, cands, bias_c, mixture, out):
    nr, K = Rv.shape
    s = np.empty(nr)
    P = np.empty(nr)
    for b in range(cands.shape[0]):
        u, i = users[b], ctx[b]
        if mixture:
            _rel_probs(U, I, Rv, br, u, i, s, P)
        for c in range(cands.shape[1]):
            j = cands[b, c]
            acc = 0.0
            for k in range(K):
                e = np.float64(I[i, k]) + U[u, k] - I[j, k]
                acc += e * e
            pref = np.float64(bi[j]) - acc
            if mixture:
                m = 0.0
                for r in range(nr):
                    acc = 0.0
                    for k in range(K):
                        f = np.float64(I[i, k]) + Rv[r, k] - I[j, k]
                        acc += f * f
                    cr = -acc
                    if bias_c:
                        cr = cr + bi[j]
                    m += P[r] * cr
                out[b, c] = pref + m
            else:
                acc = 0.0
                for k in range(K):
                    f = np.float64(I[i, k]) + Rv[0, k] - I[j, k]
                    acc += f * f
                out[b, c] = pref - acc


# ---------------------------------------------------------------- numpy path

def _softplus_np(x):
    return np.logaddexp(0.0, x)


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    z = np.exp(x[~pos])
    out[~pos] = z / (1.0 + z)
    return out


def _rel_probs_np(U, I, Rv, br, u, i):
    h = (U[u].astype(np.float64) + I[i])[:, None, :] - Rv[None, :, :]
    s = br[None, :] - np.square(h).sum(-1)
    z = np.exp(s - s.max(axis=1, keepdims=True))
    return s, z / z.sum(axis=1, keepdims=True), h


def _seq_np(U, I, Rv, bi, br, recs, scale, bias_c, mixture, gU, gI, gR, gbi, gbr):
    u, i = recs[:, 0], recs[:, 1]
    Ii = I[i].astype(np.float64)
    if mixture:
        _, P, h = _rel_probs_np(U, I, Rv, br, u, i)
        rel_idx = np.arange(Rv.shape[0])
        rv = Rv.astype(np.float64)
    else:
        P = np.ones((len(recs), 1))
        rel_idx = np.zeros(1, dtype=np.int64)
        rv = Rv[:1].astype(np.float64)
    parts = []
    for t in range(2):
        j = recs[:, 2 + t]
        e = Ii + U[u] - I[j]
        pref = bi[j].astype(np.float64) - np.square(e).sum(-1)
        f = Ii[:, None, :] + rv[None, :, :] - I[j][:, None, :]
        comp = -np.square(f).sum(-1)
        if mixture and bias_c:
            comp = comp + bi[j][:, None]
        mix = (P * comp).sum(-1)
        parts.append((j, e, f, comp, mix, pref + mix))
    delta = parts[0][5] - parts[1][5]
    total = _softplus_np(-delta).sum()
    g = -_sigmoid_np(-delta) * scale
    for t, (j, e, f, comp, mix, _) in enumerate(parts):
        gj = g if t == 0 else -g
        ge = (2.0 * gj)[:, None] * e
        np.add.at(gI, i, -ge)
        np.add.at(gU, u, -ge)
        np.add.at(gI, j, ge)
        np.add.at(gbi, j, gj)
        coef = gj[:, None] * P
        gf = 2.0 * coef[:, :, None] * f
        np.add.at(gI, i, -gf.sum(1))
        np.add.at(gR, (np.broadcast_to(rel_idx, coef.shape),), -gf)
        np.add.at(gI, j, gf.sum(1))
        if mixture and bias_c:
            np.add.at(gbi, j, coef.sum(1))
    if mixture:
        (_, _, _, c0, m0, _), (_, _, _, c1, m1, _) = parts
        gs = g[:, None] * P * ((c0 - m0[:, None]) - (c1 - m1[:, None]))
        _scatter_rel_scores(gs, h, u, i, rel_idx, gU, gI, gR, gbr)
    return total


def _scatter_rel_scores(gs, h, u, i, rel_idx, gU, gI, gR, gbr):
    gh = 2.0 * gs[:, :, None] * h
    np.add.at(gU, u, -gh.sum(1))
    np.add.at(gI, i, -gh.sum(1))
    np.add.at(gR, (np.broadcast_to(rel_idx, gs.shape),), gh)
    np.add.at(gbr, (np.broadcast_to(rel_idx, gs.shape),), gs)


def _item_np(I, Rv, bi, recs, scale, gI, gR, gbi):
    i, r, p, q = recs.T
    head = I[i].astype(np.float64) + Rv[r]
    fp = head - I[p]
    fq = head - I[q]
    delta = (bi[p] - np.square(fp).sum(-1)) - (bi[q] - np.square(fq).sum(-1))
    total = _softplus_np(-delta).sum()
    g = (-_sigmoid_np(-delta) * scale)[:, None]
    gh = -2.0 * g * (fp - fq)
    np.add.at(gI, i, gh)
    np.add.at(gR, r, gh)
    np.add.at(gI, p, 2.0 * g * fp)
    np.add.at(gI, q, -2.0 * g * fq)
    np.add.at(gbi, p, g[:, 0])
    np.add.at(gbi, q, -g[:, 0])
    return total


def _rel_np(U, I, Rv, br, recs, scale, on_scores, gU, gI, gR, gbr):
    u, i, rp, rn = recs.T
    rows = np.arange(len(recs))
    s, P, h = _rel_probs_np(U, I, Rv, br, u, i)
    src = s if on_scores else P
    delta = src[rows, rp] - src[rows, rn]
    total = _softplus_np(-delta).sum()
    g = -_sigmoid_np(-delta) * scale
    if on_scores:
        gs = np.zeros_like(P)
        gs[rows, rp] += g
        gs[rows, rn] -= g
    else:
        onehot_p = np.zeros_like(P)
        onehot_p[rows, rp] = 1.0
        onehot_n = np.zeros_like(P)
        onehot_n[rows, rn] = 1.0
        gs = g[:, None] * (P[rows, rp][:, None] * (onehot_p - P) - P[rows, rn][:, None] * (onehot_n - P))
    rel_idx = np.arange(Rv.shape[0])
    _scatter_rel_scores(gs, h, u, i, rel_idx, gU, gI, gR, gbr)
    return total


def _score_np(U, I, Rv, bi, br, users, ctx, cands, bias_c, mixture, out, chunk=256):
    for lo in range(0, len(users), chunk):
        u = users[lo:lo + chunk]
        i = ctx[lo:lo + chunk]
        c = cands[lo:lo + chunk]
        Ii = I[i].astype(np.float64)[:, None, :]
        tails = I[c]
        bias = bi[c].astype(np.float64)
        pref = bias - np.square(Ii + U[u][:, None, :] - tails).sum(-1)
        if not mixture:
            out[lo:lo + chunk] = pref - np.square(Ii + Rv[0] - tails).sum(-1)
            continue
        _, P, _ = _rel_probs_np(U, I, Rv, br, u, i)
        mix = np.zeros_like(pref)
        for r in range(Rv.shape[0]):
            comp = -np.square(Ii + Rv[r] - tails).sum(-1)
            if bias_c:
                comp = comp + bias
            mix += P[:, r:r + 1] * comp
        out[lo:lo + chunk] = pref + mix


# ---------------------------------------------------------------- dispatch

def _recs(a):
    return np.ascontiguousarray(a, dtype=np.int64).reshape(-1, 4)


def accumulate_gradients(params, grads, seq, items, rels, w_seq=1.0, w_item=1.0, w_rel=1.0,
                         rel_on_scores=False):
    """Add the gradient of ``w_seq*T_S + w_item*T_I + w_rel*T_R`` into ``grads``.

    Each loss is the batch mean of ``-ln sigmoid(delta)``. ``grads`` is a
    float64 :class:`~mohr.model.ModelParams`-shaped container modified in place.
    Returns the three batch-mean losses (``nan`` for an empty batch).
    """
    U, I, Rv = params.user_vecs, params.item_vecs, params.rel_vecs
    bi, br = params.item_bias, params.rel_bias
    gU, gI, gR = grads.user_vecs, grads.item_vecs, grads.rel_vecs
    gbi, gbr = grads.item_bias, grads.rel_bias
    seq, items, rels = _recs(seq), _recs(items), _recs(rels)
    out = np.full(3, np.nan)
    nb = USE_NUMBA
    if len(seq):
        fn = _seq_nb if nb else _seq_np
        out[0] = fn(U, I, Rv, bi, br, seq, w_seq / len(seq), bool(params.bias_in_mixture),
                    bool(params.mixture), gU, gI, gR, gbi, gbr) / len(seq)
    if len(items):
        fn = _item_nb if nb else _item_np
        out[1] = fn(I, Rv, bi, items, w_item / len(items), gI, gR, gbi) / len(items)
    if len(rels):
        fn = _rel_nb if nb else _rel_np
        out[2] = fn(U, I, Rv, br, rels, w_rel / len(rels), bool(rel_on_scores),
                    gU, gI, gR, gbr) / len(rels)
    return out


def score_candidates(params, users, ctx, cands) -> np.ndarray:
    """Sequential scores, ``out[b, c]`` for user ``users[b]`` after ``ctx[b]``."""
    users = np.ascontiguousarray(users, dtype=np.int64)
    ctx = np.ascontiguousarray(ctx, dtype=np.int64)
    cands = np.ascontiguousarray(cands, dtype=np.int64)
    if cands.ndim == 1:
        cands = np.broadcast_to(cands, (len(users), len(cands)))
        cands = np.ascontiguousarray(cands)
    out = np.empty(cands.shape, dtype=np.float64)
    fn = _score_nb if USE_NUMBA else _score_np
    fn(params.user_vecs, params.item_vecs, params.rel_vecs, params.item_bias, params.rel_bias,
       users, ctx, cands, bool(params.bias_in_mixture), bool(params.mixture), out)
    return out
