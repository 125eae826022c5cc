"""Pure numpy mini-batch SGD step, used when the compiled core is unavailable.

Records are applied one after another, each at the parameters left by the
previous record, matching the compiled kernel.
"""

from __future__ import annotations

import math

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


def _log_el(d2: np.ndarray, s: np.ndarray, d: int) -> np.ndarray:
    return -0.5 * d * (LOG_2PI + np.log(s)) - d2 / (2.0 * s)


def _dvar(d2: np.ndarray, s: np.ndarray, d: int) -> np.ndarray:
    return -0.5 * d / s + d2 / (2.0 * s * s)


def sgd_batch(means, variances, theta, q, v, neg, user, qneg, vneg,
              margin, step, var_min, var_max, slot=None, uslot=None):
    """Same contract as the compiled ``sgd_batch``; scratch arrays are ignored."""
    loss, bad = 0.0, 0
    bpr = len(user) > 0
    for b in range(len(q)):
        r = slice(b, b + 1)
        l, n = _record_step(means, variances, theta, q[r], v[r], neg[r],
                            user[r] if bpr else user, qneg[r] if bpr else qneg,
                            vneg[r] if bpr else vneg, margin, step, var_min, var_max)
        loss += l
        bad += n
    return loss, bad


def _record_step(means, variances, theta, q, v, neg, user, qneg, vneg,
                 margin, step, var_min, var_max):
    d = means.shape[1]
    mq, mv, mn = means[q], means[v], means[neg]
    vq = variances[q]

    dp = mq - mv
    d2p = np.einsum("bj,bj->b", dp, dp)
    sp = vq + variances[v]
    lpos = _log_el(d2p, sp, d)

    dn = mq[:, None, :] - mn
    d2n = np.einsum("bkj,bkj->bk", dn, dn)
    sn = vq[:, None] + variances[neg]
    lneg = _log_el(d2n, sn, d)

    h = margin - lpos[:, None] + lneg
    active = h > 0.0
    loss = float(h[active].sum())
    nact = active.sum(axis=1).astype(np.float64)

    a = active[..., None]
    gn_mean = np.where(a, dn / sn[..., None], 0.0)
    gn_var = np.where(active, _dvar(d2n, sn, d), 0.0)
    gp_mean = nact[:, None] * dp / sp[:, None]
    gp_var = -nact * _dvar(d2p, sp, d)

    ids = [q, v, neg.reshape(-1)]
    gmeans = [gp_mean - gn_mean.sum(axis=1), -gp_mean, gn_mean.reshape(-1, d)]
    gvars = [gp_var + gn_var.sum(axis=1), gp_var, gn_var.reshape(-1)]

    if len(user):
        th = theta[user]
        gthetas = []
        for pos, negi in ((q, qneg), (v, vneg)):
            diff = means[pos] - means[negi]
            x = np.einsum("bj,bj->b", th, diff)
            sg = 1.0 / (1.0 + np.exp(-x))
            loss += float((1.0 - sg).sum())
            g = -sg * (1.0 - sg)
            gthetas.append(g[:, None] * diff)
            ids += [pos, negi]
            gmeans += [g[:, None] * th, -g[:, None] * th]
            gvars += [np.zeros(len(pos)), np.zeros(len(pos))]
        uids, uinv = np.unique(user, return_inverse=True)
        gt = np.zeros((len(uids), d))
        np.add.at(gt, uinv, gthetas[0] + gthetas[1])
        theta[uids] -= step * gt

    all_ids = np.concatenate(ids)
    touched, inv = np.unique(all_ids, return_inverse=True)
    gm = np.zeros((len(touched), d))
    gs = np.zeros(len(touched))
    np.add.at(gm, inv, np.concatenate(gmeans))
    np.add.at(gs, inv, np.concatenate(gvars))

    means[touched] -= step * gm
    new_var = variances[touched] - step * gs
    bad = int((~np.isfinite(means[touched])).sum() + (~np.isfinite(new_var)).sum())
    if len(user):
        bad += int((~np.isfinite(theta[np.unique(user)])).sum())
    variances[touched] = np.clip(new_var, var_min, var_max)
    return loss, bad
