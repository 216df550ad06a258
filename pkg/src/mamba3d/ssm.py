"""State-space scans and the gated Mamba block.

The LTI routines work on plain float64 arrays and serve as oracles. The
selective scan is a single recorded op with a hand-written reverse-time
adjoint; :func:`selective_scan_reference` builds the same recurrence from
elementary tensor ops so the two can be checked against each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class LTIParams:
    A_bar: np.ndarray  # (N, N) or diagonal (N,)
    B_bar: np.ndarray  # (N,)
    C_bar: np.ndarray  # (N,)

    def __post_init__(self):
        self.A_bar = np.atleast_1d(np.asarray(self.A_bar, dtype=np.float64))
        self.B_bar = np.atleast_1d(np.asarray(self.B_bar, dtype=np.float64)).reshape(-1)
        self.C_bar = np.atleast_1d(np.asarray(self.C_bar, dtype=np.float64)).reshape(-1)
        n = self.B_bar.size
        if self.C_bar.size != n or self.A_bar.shape not in ((n,), (n, n)):
            raise T.ShapeError(
                f"LTI shapes disagree: A {self.A_bar.shape}, B {self.B_bar.shape}, C {self.C_bar.shape}"
            )

    @property
    def diagonal(self) -> bool:
        return self.A_bar.ndim == 1

    def apply_A(self, h: np.ndarray) -> np.ndarray:
        return self.A_bar * h if self.diagonal else self.A_bar @ h


def _as_sequence(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size < 1:
        raise T.ShapeError(f"expected a non-empty 1-D sequence, got shape {x.shape}")
    return x


def lti_scan_recurrent(x, p: LTIParams) -> np.ndarray:
    """``h_t = A h_{t-1} + B x_t``, ``y_t = C h_t`` from ``h_0 = 0``."""
    x = _as_sequence(x)
    h = np.zeros_like(p.B_bar)
    y = np.empty_like(x)
    for t, xt in enumerate(x):
        h = p.apply_A(h) + p.B_bar * xt
        y[t] = p.C_bar @ h
    return y


def lti_kernel(p: LTIParams, length: int) -> np.ndarray:
    """``(CB, CAB, ..., CA^{length-1}B)``."""
    k = np.empty(length)
    v = p.B_bar.copy()
    for j in range(length):
        k[j] = p.C_bar @ v
        v = p.apply_A(v)
    return k


def lti_scan_conv(x, p: LTIParams) -> np.ndarray:
    """Causal convolution of ``x`` with the precomputed global kernel."""
    x = _as_sequence(x)
    return np.convolve(x, lti_kernel(p, x.size))[: x.size]


# ---------------------------------------------------------------- discretization


def discretize(A_log, delta):
    """Zero-order hold on the diagonal state, Euler on the input.

    ``A = -exp(A_log)`` with shape (D, N) and ``delta`` (..., D) give
    ``A_bar = exp(delta * A)`` of shape (..., D, N) and the input factor
    ``delta`` of shape (..., D, 1), so that ``B_bar = delta * B``.
    """
    A_log = A_log if isinstance(A_log, Tensor) else Tensor(np.asarray(A_log, dtype=np.float64))
    delta = delta if isinstance(delta, Tensor) else Tensor(np.asarray(delta, dtype=A_log.dtype))
    if np.any(delta.data <= 0):
        raise ValueError("discretize needs delta > 0 elementwise")
    A = -T.exp(A_log)
    d = T.unsqueeze(delta, -1)
    shape = delta.shape + (A.shape[-1],)
    A_bar = T.exp(T.expand(d, shape) * A)
    return A_bar, d


# ---------------------------------------------------------------- selective scan


def _scan_forward(u, delta, A, Bm, Cm, Dskip):
    dA = np.exp(delta[..., None] * A)
    dBu = (delta * u)[..., None] * Bm[:, :, None, :]
    hs = np.empty_like(dA)
    h = np.zeros_like(dA[:, 0])
    for t in range(u.shape[1]):
        h = dA[:, t] * h + dBu[:, t]
        hs[:, t] = h
    y = np.einsum("bldn,bln->bld", hs, Cm) + u * Dskip
    return y, dA, hs


def scan(u: Tensor, delta: Tensor, A: Tensor, Bm: Tensor, Cm: Tensor, Dskip: Tensor) -> Tensor:
    """Selective scan over axis 1.

    u, delta: (B, L, D); A: (D, N) continuous-time (negative); Bm, Cm: (B, L, N);
    Dskip: (D,). Returns y (B, L, D).
    """
    b, length, d = u.shape
    n = A.shape[-1]
    if delta.shape != u.shape or A.shape != (d, n) or Bm.shape != (b, length, n) \
            or Cm.shape != (b, length, n) or Dskip.shape != (d,):
        raise T.ShapeError(
            f"scan shapes: u {u.shape}, delta {delta.shape}, A {A.shape}, B {Bm.shape}, "
            f"C {Cm.shape}, D {Dskip.shape}"
        )
    # internals run in at least float64; f32 callers get results cast back
    wide = np.promote_types(u.dtype, np.float64)
    ud, dd, Ad, Bd, Cd, Dd = (t.data.astype(wide, copy=False) for t in (u, delta, A, Bm, Cm, Dskip))
    y, dA, hs = _scan_forward(ud, dd, Ad, Bd, Cd, Dd)

    def bw(gy):
        gy = gy.astype(wide, copy=False)
        gD = (gy * ud).sum(axis=(0, 1))
        gu = gy * Dd
        gC = np.einsum("bld,bldn->bln", gy, hs)
        g_dA = np.empty_like(dA)
        g_dBu = np.empty_like(dA)
        carry = np.zeros_like(dA[:, 0])
        for t in range(length - 1, -1, -1):
            gh = gy[:, t, :, None] * Cd[:, t, None, :] + carry
            g_dBu[:, t] = gh
            g_dA[:, t] = gh * hs[:, t - 1] if t > 0 else 0.0
            carry = gh * dA[:, t]
        w = g_dA * dA
        g_delta = (w * Ad).sum(axis=-1)
        gA = np.einsum("bldn,bld->dn", w, dd)
        gBu = (g_dBu * Bd[:, :, None, :]).sum(axis=-1)
        g_delta += gBu * ud
        gu = gu + gBu * dd
        gB = np.einsum("bldn,bld->bln", g_dBu, dd * ud)
        return tuple(g.astype(u.dtype, copy=False) for g in (gu, g_delta, gA, gB, gC, gD))

    return T.custom_op(y.astype(u.dtype, copy=False), (u, delta, A, Bm, Cm, Dskip), bw, "selective_scan")


def scan_reference(u: Tensor, delta: Tensor, A: Tensor, Bm: Tensor, Cm: Tensor, Dskip: Tensor) -> Tensor:
    """Same recurrence as :func:`scan`, spelled out with elementary ops."""
    b, length, d = u.shape
    n = A.shape[-1]
    A_bar = T.exp(T.expand(T.unsqueeze(delta, -1), (b, length, d, n)) * A)
    dBu = T.expand(T.unsqueeze(delta * u, -1), (b, length, d, n)) * T.expand(
        T.unsqueeze(Bm, 2), (b, length, d, n)
    )
    h = None
    ys = []
    for t in range(length):
        h = dBu[:, t] if h is None else A_bar[:, t] * h + dBu[:, t]
        c = T.expand(T.unsqueeze(Cm[:, t], 1), (b, d, n))
        ys.append((h * c).sum(axis=-1))
    return T.stack(ys, axis=1) + u * Dskip


@dataclass
class SSMConfig:
    d_state: int = 16
    d_conv: int = 4
    expand: int = 2
    dt_rank: int | None = None  # None -> ceil(C / 16)
    dt_min: float = 1e-3
    dt_max: float = 0.1

    def rank_for(self, c: int) -> int:
        return self.dt_rank if self.dt_rank else max(1, math.ceil(c / 16))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return np.clip(rng.standard_normal(shape), -2.0, 2.0) * std


def init_ssm_params(rng: np.random.Generator, d_inner: int, d_state: int, dt_rank: int,
                    dt_min: float = 1e-3, dt_max: float = 0.1) -> dict[str, Tensor]:
    dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), d_inner))
    dt_bias = dt + np.log(-np.expm1(-dt))  # inverse softplus
    a = np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_inner, 1))
    return {
        "W_B": Tensor(trunc_normal(rng, (d_inner, d_state))),
        "W_C": Tensor(trunc_normal(rng, (d_inner, d_state))),
        "dt_down": Tensor(trunc_normal(rng, (d_inner, dt_rank))),
        "dt_up": Tensor(trunc_normal(rng, (dt_rank, d_inner))),
        "dt_bias": Tensor(dt_bias),
        "A_log": Tensor(np.log(a)),
        "D": Tensor(np.ones(d_inner)),
    }


def step_sizes(x: Tensor, p: dict[str, Tensor]) -> Tensor:
    return T.softplus(T.linear(x @ p["dt_down"], p["dt_up"], p["dt_bias"]))


def selective_scan(x: Tensor, p: dict[str, Tensor], reference: bool = False) -> Tensor:
    """Input-dependent scan of x (B, L, D): per-position B, C and step size from x."""
    squeeze = x.ndim == 2
    if squeeze:
        x = T.unsqueeze(x, 0)
    Bm = x @ p["W_B"]
    Cm = x @ p["W_C"]
    delta = step_sizes(x, p)
    A = -T.exp(p["A_log"])
    y = (scan_reference if reference else scan)(x, delta, A, Bm, Cm, p["D"])
    return y[0] if squeeze else y


# ---------------------------------------------------------------- Mamba block


def causal_conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Depthwise causal convolution over axis 1: x (B, L, D), w (D, W), b (D,)."""
    bsz, length, d = x.shape
    width = w.shape[1]
    if w.shape[0] != d or b.shape != (d,):
        raise T.ShapeError(f"conv weight {w.shape} / bias {b.shape} do not match {d} channels")
    xp = np.concatenate([np.zeros((bsz, width - 1, d), dtype=x.dtype), x.data], axis=1)
    y = np.broadcast_to(b.data, x.shape).copy()
    for j in range(width):
        y += xp[:, j : j + length] * w.data[:, j]

    def bw(g):
        gw = np.empty_like(w.data)
        gxp = np.zeros_like(xp)
        for j in range(width):
            gw[:, j] = (g * xp[:, j : j + length]).sum(axis=(0, 1))
            gxp[:, j : j + length] += g * w.data[:, j]
        return gxp[:, width - 1 :], gw, g.sum(axis=(0, 1))

    return T.custom_op(y, (x, w, b), bw, "causal_conv1d")


def init_mamba_params(rng: np.random.Generator, c: int, cfg: SSMConfig) -> dict[str, Tensor]:
    d_inner = cfg.expand * c
    bound = 1.0 / math.sqrt(cfg.d_conv)
    p = {
        "in_proj": Tensor(trunc_normal(rng, (c, 2 * d_inner))),
        "conv_w": Tensor(rng.uniform(-bound, bound, (d_inner, cfg.d_conv))),
        "conv_b": Tensor(np.zeros(d_inner)),
        "out_proj": Tensor(trunc_normal(rng, (d_inner, c))),
    }
    for k, v in init_ssm_params(rng, d_inner, cfg.d_state, cfg.rank_for(c), cfg.dt_min, cfg.dt_max).items():
        p[f"ssm.{k}"] = v
    return p


def subparams(params: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    pre = prefix + "."
    return {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}


def mamba_block(x: Tensor, p: dict[str, Tensor], reference: bool = False) -> Tensor:
    """Gated Mamba mixer over x (B, L, C); y_t depends only on x_{<=t}."""
    squeeze = x.ndim == 2
    if squeeze:
        x = T.unsqueeze(x, 0)
    d_inner = p["in_proj"].shape[1] // 2
    xz = x @ p["in_proj"]
    main, gate = xz[..., :d_inner], xz[..., d_inner:]
    u = T.silu(causal_conv1d(main, p["conv_w"], p["conv_b"]))
    y = selective_scan(u, subparams(p, "ssm"), reference=reference)
    out = (y * T.silu(gate)) @ p["out_proj"]
    return out[0] if squeeze else out


# ---------------------------------------------------------------- FLOP counts


def selective_scan_flops(length: int, d_inner: int, d_state: int, dt_rank: int) -> int:
    """Multiply-adds counted as 2 FLOPs; pointwise transcendental ops count 1."""
    per_pos = (
        2 * 2 * d_inner * d_state  # B and C projections
        + 2 * d_inner * dt_rank + 2 * dt_rank * d_inner + d_inner  # low-rank step + bias
        + 4 * d_inner  # softplus
        + d_inner * d_state  # delta * A
        + d_inner * d_state  # exp
        + d_inner + d_inner * d_state  # delta * u * B
        + 2 * d_inner * d_state  # h = dA * h + dBu
        + 2 * d_inner * d_state  # readout through C
        + 2 * d_inner  # skip
    )
    return per_pos * length


def mamba_block_flops(length: int, c: int, cfg: SSMConfig) -> int:
    d_inner = cfg.expand * c
    per_pos = (
        2 * c * 2 * d_inner  # in_proj
        + 2 * d_inner * cfg.d_conv + d_inner  # conv + bias
        + 2 * 4 * d_inner  # two SiLUs
        + d_inner  # gating product
        + 2 * d_inner * c  # out_proj
    )
    return per_pos * length + selective_scan_flops(length, d_inner, cfg.d_state, cfg.rank_for(c))
