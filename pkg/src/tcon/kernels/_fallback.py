"""Vectorised numpy implementation of the per-pair co-attention kernels."""

import numpy as np


def pair_forward(fs, ft, ass, att, si, ti):
    """Cross similarity and raw co-attention for every pair ``(si[p], ti[p])``.

    Returns ``(ast, raw)``, both shaped ``(P, Ks, Kt)``.
    """
    ast = np.matmul(fs[si], np.swapaxes(ft[ti], 1, 2))
    raw = ass[si][:, :, None] * att[ti][:, None, :] * ast
    return ast, raw


def pair_backward(fs, ft, ass, att, si, ti, ast, g_raw):
    """Per-pair gradients of ``raw`` w.r.t. features and self-attention factors.

    Returns ``(g_fs, g_ft, g_ass, g_att)`` with one slab per pair; callers
    reduce them onto videos.
    """
    u = ass[si]
    v = att[ti]
    g_ast = g_raw * u[:, :, None] * v[:, None, :]
    weighted = g_raw * ast
    g_u = (weighted * v[:, None, :]).sum(axis=2)
    g_v = (weighted * u[:, :, None]).sum(axis=1)
    g_fs = np.matmul(g_ast, ft[ti])
    g_ft = np.matmul(np.swapaxes(g_ast, 1, 2), fs[si])
    return g_fs, g_ft, g_u, g_v
