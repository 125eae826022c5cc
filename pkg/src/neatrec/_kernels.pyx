# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled mini-batch SGD step for the margin + BPR objective.

Mirrors :func:`neatrec._kernels_py.sgd_batch` exactly in semantics: records
are visited in order and each record's gradient is evaluated at the current
parameters and applied before the next record is read. The whole step runs
without the GIL so several threads may call it on shared arrays (lock-free,
lost updates tolerated).
"""

from libc.math cimport exp, isfinite, log
from libc.stdlib cimport calloc, free, malloc

ctypedef long long i64

cdef double LOG_2PI = 1.8378770664093453


cdef inline double _sqdiff(const double* a, const double* b, double* out, Py_ssize_t d) noexcept nogil:
    cdef Py_ssize_t j
    cdef double acc = 0.0, x
    for j in range(d):
        x = a[j] - b[j]
        out[j] = x
        acc += x * x
    return acc


cdef inline Py_ssize_t _claim(i64* slot, i64* touched, Py_ssize_t* n, i64 idx) noexcept nogil:
    if slot[idx] < 0:
        slot[idx] = n[0]
        touched[n[0]] = idx
        n[0] += 1
    return <Py_ssize_t>slot[idx]


def sgd_batch(double[:, ::1] means, double[::1] variances, double[:, ::1] theta,
              const i64[::1] q, const i64[::1] v, const i64[:, ::1] neg,
              const i64[::1] user, const i64[::1] qneg, const i64[::1] vneg,
              double margin, double step, double var_min, double var_max,
              i64[::1] slot, i64[::1] uslot):
    """Run the records of one mini-batch; return ``(loss_sum, n_nonfinite)``.

    ``slot`` is a scratch array of -1s with length n_items, restored before
    returning; ``uslot`` is accepted for interface compatibility.
    """
    cdef Py_ssize_t B = q.shape[0]
    cdef Py_ssize_t K = neg.shape[1]
    cdef Py_ssize_t d = means.shape[1]
    cdef bint bpr = user.shape[0] > 0
    cdef Py_ssize_t cap = K + 4
    cdef double loss = 0.0
    cdef Py_ssize_t bad = 0

    cdef double* gm = <double*>calloc(cap * d, sizeof(double))
    cdef double* gs = <double*>calloc(cap, sizeof(double))
    cdef double* gt = <double*>calloc(d, sizeof(double))
    cdef double* dp = <double*>malloc(d * sizeof(double))
    cdef double* dn = <double*>malloc(d * sizeof(double))
    cdef i64* touched = <i64*>malloc(cap * sizeof(i64))
    if not (gm and gs and gt and dp and dn and touched):
        free(gm); free(gs); free(gt); free(dp); free(dn); free(touched)
        raise MemoryError()

    cdef Py_ssize_t nt
    cdef Py_ssize_t b, k, j, sq_, sv_, sn_, sa_, sb_, t
    cdef i64 iq, iv, ineg, iu, ia, ib
    cdef double sp, d2p, lpos, sn, d2n, lneg, h, gvar, x, sg, g, nact
    cdef double* mq
    cdef double* th
    cdef double* w

    with nogil:
        for b in range(B):
            nt = 0
            iq = q[b]
            iv = v[b]
            mq = &means[iq, 0]
            sq_ = _claim(&slot[0], touched, &nt, iq)
            sv_ = _claim(&slot[0], touched, &nt, iv)
            d2p = _sqdiff(mq, &means[iv, 0], dp, d)
            sp = variances[iq] + variances[iv]
            lpos = -0.5 * d * (LOG_2PI + log(sp)) - d2p / (2.0 * sp)
            nact = 0.0
            for k in range(K):
                ineg = neg[b, k]
                d2n = _sqdiff(mq, &means[ineg, 0], dn, d)
                sn = variances[iq] + variances[ineg]
                lneg = -0.5 * d * (LOG_2PI + log(sn)) - d2n / (2.0 * sn)
                h = margin - lpos + lneg
                if h > 0.0:
                    loss += h
                    nact += 1.0
                    sn_ = _claim(&slot[0], touched, &nt, ineg)
                    for j in range(d):
                        gm[sq_ * d + j] -= dn[j] / sn
                        gm[sn_ * d + j] += dn[j] / sn
                    gvar = -0.5 * d / sn + d2n / (2.0 * sn * sn)
                    gs[sq_] += gvar
                    gs[sn_] += gvar
            if nact > 0.0:
                for j in range(d):
                    gm[sq_ * d + j] += nact * dp[j] / sp
                    gm[sv_ * d + j] -= nact * dp[j] / sp
                gvar = -nact * (-0.5 * d / sp + d2p / (2.0 * sp * sp))
                gs[sq_] += gvar
                gs[sv_] += gvar
            if bpr:
                iu = user[b]
                th = &theta[iu, 0]
                for t in range(2):
                    if t == 0:
                        ia = iq
                        ib = qneg[b]
                    else:
                        ia = iv
                        ib = vneg[b]
                    sa_ = _claim(&slot[0], touched, &nt, ia)
                    sb_ = _claim(&slot[0], touched, &nt, ib)
                    x = 0.0
                    for j in range(d):
                        x += th[j] * (means[ia, j] - means[ib, j])
                    sg = 1.0 / (1.0 + exp(-x))
                    loss += 1.0 - sg
                    g = -sg * (1.0 - sg)
                    for j in range(d):
                        gt[j] += g * (means[ia, j] - means[ib, j])
                        gm[sa_ * d + j] += g * th[j]
                        gm[sb_ * d + j] -= g * th[j]

            # apply this record's update before reading the next record
            for t in range(nt):
                ia = touched[t]
                w = &means[ia, 0]
                for j in range(d):
                    w[j] -= step * gm[t * d + j]
                    gm[t * d + j] = 0.0
                    if not isfinite(w[j]):
                        bad += 1
                x = variances[ia] - step * gs[t]
                gs[t] = 0.0
                if not isfinite(x):
                    bad += 1
                elif x < var_min:
                    x = var_min
                elif x > var_max:
                    x = var_max
                variances[ia] = x
                slot[ia] = -1
            if bpr:
                w = &theta[iu, 0]
                for j in range(d):
                    w[j] -= step * gt[j]
                    gt[j] = 0.0
                    if not isfinite(w[j]):
                        bad += 1

    free(gm); free(gs); free(gt); free(dp); free(dn); free(touched)
    return loss, bad
