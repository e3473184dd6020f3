"""Unified gate-attention network: attention fusion followed by irrelevance filtering.

All stages act row-wise, so rows from several episodes can be stacked into
one call as long as row ``i`` of ``Y`` and ``X`` describe the same candidate.
"""
from dataclasses import dataclass, field

import numpy as np

from .numerics import Parameter

FULL = "full"
SKIP_FILTER = "skip_filter"          # attended features feed the policy directly
SKIP_ATTENTION = "skip_attention"    # bilinear fusion straight into the filter
MODES = (FULL, SKIP_FILTER, SKIP_ATTENTION)


class FusionParameters:
    def __init__(self, d_x, d_y, d=200, j=200, rng=None, y_std=1.0):
        rng = rng if rng is not None else np.random.default_rng(0)

        def init(name, a, b, std=None):
            std = 1.0 / np.sqrt(a) if std is None else std
            return Parameter(f"fusion.{name}", rng.normal(0.0, std, (a, b)))

        self.d_x, self.d_y, self.d, self.j = d_x, d_y, d, j
        self.w_q = init("w_q", d_x, d)
        # Y rows stack unit-norm embeddings, so entries are O(1/sqrt(d_s)); unit
        # std keeps K and V at O(1) before the multiplicative stages
        self.w_k = init("w_k", d_y, d, std=y_std)
        self.w_v = init("w_v", d_y, d, std=y_std)
        self.w_kl = init("w_kl", d, j)
        self.w_ql = init("w_ql", d, j)
        self.w_vr = init("w_vr", d, j)
        self.w_qr = init("w_qr", d, j)
        self.w_m = init("w_m", j, d)
        # ones: a_i = sum of a softmax row = 1, so attention starts as the identity
        self.w_gl = Parameter("fusion.w_gl", np.ones((d, 1)))
        self.w_f = init("w_f", j, 1)

    def parameters(self):
        return [self.w_q, self.w_k, self.w_v, self.w_kl, self.w_ql, self.w_vr, self.w_qr,
                self.w_m, self.w_gl, self.w_f]


@dataclass
class AttendedFeatures:
    z: object
    z_pooled: object = None
    b_l: object = None
    b_r: object = None
    gate: object = None
    g_s: object = None
    attn: object = None
    v_hat: object = None
    g_f: object = None
    trace: list = field(default_factory=list)

    def pooled_values(self):
        """Column sum of the attended rows (the collapsed single-vector form)."""
        return None if self.v_hat is None else self.v_hat.value.sum(axis=0)


def project_qkv(tp, x, y, p):
    return tp.matmul(x, p.w_q), tp.matmul(y, p.w_k), tp.matmul(y, p.w_v)


def bilinear_joint(tp, q, k, v, p):
    b_l = tp.hadamard(tp.matmul(k, p.w_kl), tp.matmul(q, p.w_ql))
    b_r = tp.hadamard(tp.matmul(v, p.w_vr), tp.matmul(q, p.w_qr))
    return b_l, b_r


def filtration_gate(tp, b_l, p):
    return tp.sigmoid(tp.matmul(b_l, p.w_m))


def gated_attention(tp, gate, k, q, p):
    """Row-softmax over the feature axis of (g*K) * ((1-g)*Q); a = G_s W_g."""
    g_s = tp.softmax_rows(tp.hadamard(tp.hadamard(gate, k), tp.hadamard(tp.one_minus(gate), q)))
    return g_s, tp.matmul(g_s, p.w_gl)


def attend(tp, attn, b_r):
    return tp.row_scale(b_r, attn)


def irrelevance_filter(tp, b_r, v_hat, p):
    """Per-row scalar gate sigma(u_i . w_f) on u = B^r * V_hat; Z = G_f * u."""
    u = tp.hadamard(b_r, v_hat)
    g_f = tp.sigmoid(tp.matmul(u, p.w_f))
    z = tp.row_scale(u, g_f)
    return g_f, z, tp.mean_rows(z)


def fuse(tp, y, x, p, mode=FULL):
    if mode not in MODES:
        raise ValueError(f"unknown fusion mode {mode!r}")
    if y.value.shape[0] != x.value.shape[0]:
        raise ValueError(f"Y and X row counts differ: {y.value.shape} vs {x.value.shape}")
    out = AttendedFeatures(z=None)
    q, k, v = project_qkv(tp, x, y, p)
    out.b_l, out.b_r = bilinear_joint(tp, q, k, v, p)
    out.trace += ["project_qkv", "bilinear_joint"]
    if mode == SKIP_ATTENTION:
        out.g_f, out.z, out.z_pooled = irrelevance_filter(tp, out.b_r, out.b_l, p)
        out.trace.append("irrelevance_filter")
        return out
    out.gate = filtration_gate(tp, out.b_l, p)
    out.g_s, out.attn = gated_attention(tp, out.gate, k, q, p)
    out.v_hat = attend(tp, out.attn, out.b_r)
    out.trace += ["filtration_gate", "gated_attention", "attend"]
    if mode == SKIP_FILTER:
        out.z = out.v_hat
        out.z_pooled = tp.mean_rows(out.v_hat)
        return out
    out.g_f, out.z, out.z_pooled = irrelevance_filter(tp, out.b_r, out.v_hat, p)
    out.trace.append("irrelevance_filter")
    return out
