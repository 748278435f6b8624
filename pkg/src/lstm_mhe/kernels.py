"""Hot numeric kernels.

Each kernel has a loop implementation compiled with numba (``*_nb``) and a
vectorised numpy twin (``*_np``). The public names dispatch to the numba
version when it is available and not disabled through
``LSTM_MHE_DISABLE_NUMBA``.

Gate weights are stacked row-wise in the order (input, forget, cell, output):
``wu`` is (4H, I), ``wh`` is (4H, H) and ``b`` is (4H,).
"""

import math

import numpy as np

from ._accel import NUMBA_AVAILABLE, njit


# ---------------------------------------------------------------------------
# BPTT: masked MSE over a padded batch of sequences

@njit
def _sig(z):
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


@njit
def seq_loss_grad_nb(wu, wh, b, fcw, fcb, x, y, mask):
    nb, nt, ni = x.shape
    nh = wh.shape[1]
    no = fcw.shape[0]

    count = 0.0
    for s in range(nb):
        for t in range(nt):
            count += mask[s, t]
    count *= no

    dwu = np.zeros_like(wu)
    dwh = np.zeros_like(wh)
    db = np.zeros_like(b)
    dfcw = np.zeros_like(fcw)
    dfcb = np.zeros_like(fcb)
    sse = 0.0
    if count == 0.0:
        return 0.0, 0.0, dwu, dwh, db, dfcw, dfcb

    gates = np.zeros((nt, 4 * nh))
    cs = np.zeros((nt + 1, nh))
    hs = np.zeros((nt + 1, nh))
    tc = np.zeros((nt, nh))
    err = np.zeros((nt, no))
    dh_next = np.zeros(nh)
    dc_next = np.zeros(nh)
    dz = np.zeros(4 * nh)
    scale = 2.0 / count

    for s in range(nb):
        # forward
        for j in range(nh):
            cs[0, j] = 0.0
            hs[0, j] = 0.0
        for t in range(nt):
            for r in range(4 * nh):
                acc = b[r]
                for k in range(ni):
                    acc += wu[r, k] * x[s, t, k]
                for k in range(nh):
                    acc += wh[r, k] * hs[t, k]
                if r < 2 * nh or r >= 3 * nh:
                    gates[t, r] = _sig(acc)
                else:
                    gates[t, r] = math.tanh(acc)
            for j in range(nh):
                ig = gates[t, j]
                fg = gates[t, nh + j]
                gg = gates[t, 2 * nh + j]
                og = gates[t, 3 * nh + j]
                cn = fg * cs[t, j] + ig * gg
                cs[t + 1, j] = cn
                tc[t, j] = math.tanh(cn)
                hs[t + 1, j] = og * tc[t, j]
            m = mask[s, t]
            for o in range(no):
                yh = fcb[o]
                for j in range(nh):
                    yh += fcw[o, j] * hs[t + 1, j]
                e = (yh - y[s, t, o]) * m
                sse += e * e
                err[t, o] = e * scale

        # backward
        for j in range(nh):
            dh_next[j] = 0.0
            dc_next[j] = 0.0
        for t in range(nt - 1, -1, -1):
            for o in range(no):
                e = err[t, o]
                dfcb[o] += e
                for j in range(nh):
                    dfcw[o, j] += e * hs[t + 1, j]
            for j in range(nh):
                dh = dh_next[j]
                for o in range(no):
                    dh += fcw[o, j] * err[t, o]
                ig = gates[t, j]
                fg = gates[t, nh + j]
                gg = gates[t, 2 * nh + j]
                og = gates[t, 3 * nh + j]
                dc = dh * og * (1.0 - tc[t, j] * tc[t, j]) + dc_next[j]
                dz[j] = dc * gg * ig * (1.0 - ig)
                dz[nh + j] = dc * cs[t, j] * fg * (1.0 - fg)
                dz[2 * nh + j] = dc * ig * (1.0 - gg * gg)
                dz[3 * nh + j] = dh * tc[t, j] * og * (1.0 - og)
                dc_next[j] = dc * fg
            for r in range(4 * nh):
                d = dz[r]
                db[r] += d
                for k in range(ni):
                    dwu[r, k] += d * x[s, t, k]
                for k in range(nh):
                    dwh[r, k] += d * hs[t, k]
            for k in range(nh):
                acc = 0.0
                for r in range(4 * nh):
                    acc += wh[r, k] * dz[r]
                dh_next[k] = acc

    return sse / count, count, dwu, dwh, db, dfcw, dfcb


def _sig_np(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def seq_loss_grad_np(wu, wh, b, fcw, fcb, x, y, mask):
    nb, nt, ni = x.shape
    nh = wh.shape[1]
    no = fcw.shape[0]
    count = float(mask.sum()) * no
    zeros = (np.zeros_like(wu), np.zeros_like(wh), np.zeros_like(b),
             np.zeros_like(fcw), np.zeros_like(fcb))
    if count == 0.0:
        return (0.0, 0.0) + zeros

    gates = np.empty((nt, nb, 4 * nh))
    cs = np.zeros((nt + 1, nb, nh))
    hs = np.zeros((nt + 1, nb, nh))
    tc = np.empty((nt, nb, nh))
    xt = np.ascontiguousarray(x.transpose(1, 0, 2))
    mt = mask.T[:, :, None]
    # input projection for all steps at once
    zin = xt @ wu.T + b
    for t in range(nt):
        z = zin[t] + hs[t] @ wh.T
        g = gates[t]
        g[:, :2 * nh] = _sig_np(z[:, :2 * nh])
        g[:, 2 * nh:3 * nh] = np.tanh(z[:, 2 * nh:3 * nh])
        g[:, 3 * nh:] = _sig_np(z[:, 3 * nh:])
        cs[t + 1] = g[:, nh:2 * nh] * cs[t] + g[:, :nh] * g[:, 2 * nh:3 * nh]
        tc[t] = np.tanh(cs[t + 1])
        hs[t + 1] = g[:, 3 * nh:] * tc[t]
    yhat = hs[1:] @ fcw.T + fcb
    e = (yhat - y.transpose(1, 0, 2)) * mt
    sse = float(np.sum(e * e))
    err = e * (2.0 / count)

    dfcw = np.einsum("tbo,tbj->oj", err, hs[1:])
    dfcb = err.sum(axis=(0, 1))
    dhout = err @ fcw
    dzs = np.empty((nt, nb, 4 * nh))
    dh_next = np.zeros((nb, nh))
    dc_next = np.zeros((nb, nh))
    for t in range(nt - 1, -1, -1):
        g = gates[t]
        ig, fg, gg, og = g[:, :nh], g[:, nh:2 * nh], g[:, 2 * nh:3 * nh], g[:, 3 * nh:]
        dh = dhout[t] + dh_next
        dc = dh * og * (1.0 - tc[t] ** 2) + dc_next
        dz = dzs[t]
        dz[:, :nh] = dc * gg * ig * (1.0 - ig)
        dz[:, nh:2 * nh] = dc * cs[t] * fg * (1.0 - fg)
        dz[:, 2 * nh:3 * nh] = dc * ig * (1.0 - gg ** 2)
        dz[:, 3 * nh:] = dh * tc[t] * og * (1.0 - og)
        dc_next = dc * fg
        dh_next = dz @ wh
    dwu = np.einsum("tbr,tbk->rk", dzs, xt)
    dwh = np.einsum("tbr,tbk->rk", dzs, hs[:-1])
    db = dzs.sum(axis=(0, 1))
    return sse / count, count, dwu, dwh, db, dfcw, dfcb


# ---------------------------------------------------------------------------
# Forward-only prediction over a padded batch

@njit
def seq_predict_nb(wu, wh, b, fcw, fcb, x):
    nb, nt, ni = x.shape
    nh = wh.shape[1]
    no = fcw.shape[0]
    out = np.zeros((nb, nt, no))
    z = np.zeros(4 * nh)
    h = np.zeros(nh)
    c = np.zeros(nh)
    for s in range(nb):
        for j in range(nh):
            h[j] = 0.0
            c[j] = 0.0
        for t in range(nt):
            for r in range(4 * nh):
                acc = b[r]
                for k in range(ni):
                    acc += wu[r, k] * x[s, t, k]
                for k in range(nh):
                    acc += wh[r, k] * h[k]
                z[r] = acc
            for j in range(nh):
                ig = _sig(z[j])
                fg = _sig(z[nh + j])
                gg = math.tanh(z[2 * nh + j])
                og = _sig(z[3 * nh + j])
                c[j] = fg * c[j] + ig * gg
                h[j] = og * math.tanh(c[j])
            for o in range(no):
                acc = fcb[o]
                for j in range(nh):
                    acc += fcw[o, j] * h[j]
                out[s, t, o] = acc
    return out


def seq_predict_np(wu, wh, b, fcw, fcb, x):
    nb, nt, _ = x.shape
    nh = wh.shape[1]
    h = np.zeros((nb, nh))
    c = np.zeros((nb, nh))
    hs = np.empty((nt, nb, nh))
    zin = x.transpose(1, 0, 2) @ wu.T + b
    for t in range(nt):
        z = zin[t] + h @ wh.T
        ig = _sig_np(z[:, :nh])
        fg = _sig_np(z[:, nh:2 * nh])
        gg = np.tanh(z[:, 2 * nh:3 * nh])
        og = _sig_np(z[:, 3 * nh:])
        c = fg * c + ig * gg
        h = og * np.tanh(c)
        hs[t] = h
    return (hs @ fcw.T + fcb).transpose(1, 0, 2)


# ---------------------------------------------------------------------------
# MHE rollout: x = (theta_w, theta_r, h, c), exogenous (n_em, t_em) per interval

@njit
def rollout_nb(wu, wh, b, fcw, fcb, mean, std, exo, x0, w, dk, with_jac):
    n = exo.shape[0]
    nh = wh.shape[1]
    nx = 2 + 2 * nh
    xs = np.zeros((n + 1, nx))
    jac = np.zeros((n if with_jac else 0, nx, nx))
    for j in range(nx):
        xs[0, j] = x0[j]
    u = np.zeros(4)
    z = np.zeros(4 * nh)
    gv = np.zeros(4 * nh)
    dzv = np.zeros(4 * nh)
    hn = np.zeros(nh)
    cn = np.zeros(nh)
    tcn = np.zeros(nh)
    # dz/dx for x in (theta_w, theta_r, h); c does not enter the pre-activations
    dzdx = np.zeros((4 * nh, 2 + nh))
    dhn = np.zeros((nh, nx))
    dcn = np.zeros((nh, nx))
    for k in range(n):
        u[0] = (exo[k, 0] - mean[0]) / std[0]
        u[1] = (exo[k, 1] - mean[1]) / std[1]
        u[2] = (xs[k, 0] - mean[2]) / std[2]
        u[3] = (xs[k, 1] - mean[3]) / std[3]
        for r in range(4 * nh):
            acc = b[r]
            for q in range(4):
                acc += wu[r, q] * u[q]
            for q in range(nh):
                acc += wh[r, q] * xs[k, 2 + q]
            z[r] = acc
            if r < 2 * nh or r >= 3 * nh:
                gv[r] = _sig(acc)
                dzv[r] = gv[r] * (1.0 - gv[r])
            else:
                gv[r] = math.tanh(acc)
                dzv[r] = 1.0 - gv[r] * gv[r]
        for j in range(nh):
            cn[j] = gv[nh + j] * xs[k, 2 + nh + j] + gv[j] * gv[2 * nh + j]
            tcn[j] = math.tanh(cn[j])
            hn[j] = gv[3 * nh + j] * tcn[j]
        for o in range(2):
            acc = fcb[o]
            for j in range(nh):
                acc += fcw[o, j] * hn[j]
            xs[k + 1, o] = xs[k, o] + dk * acc + w[k, o]
        for j in range(nh):
            xs[k + 1, 2 + j] = hn[j]
            xs[k + 1, 2 + nh + j] = cn[j]
        if with_jac:
            for r in range(4 * nh):
                dzdx[r, 0] = wu[r, 2] / std[2]
                dzdx[r, 1] = wu[r, 3] / std[3]
                for q in range(nh):
                    dzdx[r, 2 + q] = wh[r, q]
            for j in range(nh):
                di = dzv[j]
                df = dzv[nh + j]
                dg = dzv[2 * nh + j]
                do = dzv[3 * nh + j]
                cp = xs[k, 2 + nh + j]
                sech2 = 1.0 - tcn[j] * tcn[j]
                for q in range(2 + nh):
                    dcq = (df * dzdx[nh + j, q] * cp
                           + di * dzdx[j, q] * gv[2 * nh + j]
                           + gv[j] * dg * dzdx[2 * nh + j, q])
                    dcn[j, q] = dcq
                    dhn[j, q] = do * dzdx[3 * nh + j, q] * tcn[j] + gv[3 * nh + j] * sech2 * dcq
                for q in range(nh):
                    dcq = 0.0
                    if q == j:
                        dcq = gv[nh + j]
                    dcn[j, 2 + nh + q] = dcq
                    dhn[j, 2 + nh + q] = gv[3 * nh + j] * sech2 * dcq
            for o in range(2):
                for q in range(nx):
                    acc = 0.0
                    for j in range(nh):
                        acc += fcw[o, j] * dhn[j, q]
                    jac[k, o, q] = dk * acc
                jac[k, o, o] += 1.0
            for j in range(nh):
                for q in range(nx):
                    jac[k, 2 + j, q] = dhn[j, q]
                    jac[k, 2 + nh + j, q] = dcn[j, q]
    return xs, jac


def rollout_np(wu, wh, b, fcw, fcb, mean, std, exo, x0, w, dk, with_jac):
    n = exo.shape[0]
    nh = wh.shape[1]
    nx = 2 + 2 * nh
    xs = np.zeros((n + 1, nx))
    xs[0] = x0
    jac = np.zeros((n if with_jac else 0, nx, nx))
    uexo = (exo - mean[:2]) / std[:2]
    zexo = uexo @ wu[:, :2].T + b
    wth = wu[:, 2:4] / std[2:4]
    zth0 = wu[:, 2:4] @ (mean[2:4] / std[2:4])
    dzdx = np.hstack([wth, wh])
    eye_f = np.arange(nh)
    for k in range(n):
        th = xs[k, :2]
        h = xs[k, 2:2 + nh]
        c = xs[k, 2 + nh:]
        z = zexo[k] + wth @ th - zth0 + wh @ h
        ig = _sig_np(z[:nh])
        fg = _sig_np(z[nh:2 * nh])
        gg = np.tanh(z[2 * nh:3 * nh])
        og = _sig_np(z[3 * nh:])
        cn = fg * c + ig * gg
        tcn = np.tanh(cn)
        hn = og * tcn
        rates = fcw @ hn + fcb
        xs[k + 1, :2] = th + dk * rates + w[k]
        xs[k + 1, 2:2 + nh] = hn
        xs[k + 1, 2 + nh:] = cn
        if with_jac:
            di = (ig * (1.0 - ig))[:, None] * dzdx[:nh]
            df = (fg * (1.0 - fg))[:, None] * dzdx[nh:2 * nh]
            dg = (1.0 - gg ** 2)[:, None] * dzdx[2 * nh:3 * nh]
            do = (og * (1.0 - og))[:, None] * dzdx[3 * nh:]
            dc = np.zeros((nh, nx))
            dc[:, :2 + nh] = df * c[:, None] + di * gg[:, None] + ig[:, None] * dg
            dc[eye_f, 2 + nh + eye_f] = fg
            dh = og[:, None] * (1.0 - tcn ** 2)[:, None] * dc
            dh[:, :2 + nh] += do * tcn[:, None]
            jk = jac[k]
            jk[:2] = dk * (fcw @ dh)
            jk[0, 0] += 1.0
            jk[1, 1] += 1.0
            jk[2:2 + nh] = dh
            jk[2 + nh:] = dc
    return xs, jac


if NUMBA_AVAILABLE:
    seq_loss_grad = seq_loss_grad_nb
    seq_predict = seq_predict_nb
    rollout = rollout_nb
else:
    seq_loss_grad = seq_loss_grad_np
    seq_predict = seq_predict_np
    rollout = rollout_np
