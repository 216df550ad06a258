"""Analytic FLOP counts for the encoder and a reference self-attention layer, plus wall-time sampling.

Convention: a multiply-add is 2 FLOPs, other pointwise ops 1, softplus and
SiLU 4, GELU 8, exp 1. Counts are exact integers so that linearity in the
sequence length can be checked without tolerance. Patch grouping (FPS and
KNN) is geometry preprocessing and is reported apart from the model totals.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import encoder as E
from . import ssm
from . import tensor as T
from .encoder import EncoderConfig
from .tensor import Tensor

BRANCH_NAMES = {"fwd": "L+SSM", "chan": "C-SSM", "tok": "L-SSM"}
_VARIANT_BRANCHES = {"bi_ssm": ("fwd", "chan"), "one_ssm": ("fwd",), "token_flip": ("fwd", "tok"),
                     "tri_ssm": ("fwd", "chan", "tok")}


def layernorm_flops(n: int, c: int) -> int:
    return 8 * n * c  # mean, centre, square, mean, rsqrt-scale, affine


def linear_flops(n: int, c_in: int, c_out: int) -> int:
    return n * (2 * c_in * c_out + c_out)


def embedding_flops(L: int, cfg: EncoderConfig) -> int:
    d0, d1, d2 = cfg.embed_dims
    K = cfg.K
    per_patch = (linear_flops(K, 3, d0) + K * d0 + linear_flops(K, d0, d1) + K * d1
                 + linear_flops(K, 2 * d1, d2) + K * d2 + linear_flops(K, d2, cfg.C) + K * cfg.C)
    pos = linear_flops(1, 3, cfg.pos_hidden) + 8 * cfg.pos_hidden + linear_flops(1, cfg.pos_hidden, cfg.C)
    return L * (per_patch + pos)


def lnp_flops(L: int, cfg: EncoderConfig) -> int:
    n, c, k = L + 1, cfg.C, cfg.k
    per_token = (
        c  # + pos
        + c + 4 * k * c + 3 * k * c  # residual, mean/var, standardize
        + 2 * k * 2 * c  # affine on [residual, center]
        + (5 if cfg.pooling == "k_pool" else 2) * k * 2 * c  # pooling
        + 2 * 2 * c * c + c  # align
        + c  # residual add
    )
    return layernorm_flops(n, c) + n * per_token


def branch_flops(L: int, cfg: EncoderConfig) -> dict[str, int]:
    n = L + 1
    m = ssm.mamba_block_flops(n, cfg.C, cfg.ssm) + n * cfg.C  # + residual merge
    return {BRANCH_NAMES[b]: m for b in _VARIANT_BRANCHES[cfg.variant]}


def head_flops(cfg: EncoderConfig) -> int:
    h, c = cfg.head_hidden, cfg.C
    return (2 * c * 3) + linear_flops(1, 2 * c, h) + 8 * h + linear_flops(1, h, h) + 8 * h \
        + linear_flops(1, h, cfg.n_classes)


def knn_flops(L: int) -> int:
    """Pairwise squared distances between centers: 3 sub, 3 mul, 2 add per pair."""
    return 8 * L * L


def layer_flops(L: int, cfg: EncoderConfig) -> dict[str, int]:
    """One encoder layer: LNP plus the bi-SSM branches (the bi-SSM LayerNorm is booked to L+SSM)."""
    out = {"LNP": lnp_flops(L, cfg), **branch_flops(L, cfg)}
    out["L+SSM"] += layernorm_flops(L + 1, cfg.C)
    return out


def model_flops(L: int, cfg: EncoderConfig) -> dict[str, int]:
    out = {"embedding": embedding_flops(L, cfg)}
    for k, v in layer_flops(L, cfg).items():
        out[k] = cfg.depth * v
    out["head"] = head_flops(cfg)
    return out


def attention_layer_flops(L: int, c: int) -> dict[str, int]:
    """Pre-norm single-head self-attention with residual over L+1 tokens."""
    n = L + 1
    return {
        "qkv": layernorm_flops(n, c) + 3 * linear_flops(n, c, c),
        "scores": 2 * n * n * c + n * n,  # QK^T and scaling
        "softmax": 5 * n * n,
        "mix": 2 * n * n * c,
        "out": linear_flops(n, c, c) + n * c,
    }


# ---------------------------------------------------------------- reference attention layer


def init_attention_params(c: int, rng: np.random.Generator) -> dict[str, Tensor]:
    p: dict[str, Tensor] = {}
    E._ln(p, "ln", c)
    for name in ("q", "k", "v", "o"):
        E._lin(rng, p, name, c, c)
    return E._cast(p)


def attention_layer(x: Tensor, p: dict[str, Tensor]) -> Tensor:
    """``x + W_o softmax(q k^T / sqrt(C)) v`` with q, k, v from LN(x); x is (..., n, C)."""
    h = T.layernorm(x, p["ln.g"], p["ln.b"])
    q, k, v = (T.linear(h, p[f"{n}.w"], p[f"{n}.b"]) for n in ("q", "k", "v"))
    scores = T.matmul(q, T.transpose(k, (*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)))
    a = T.softmax(scores * (1.0 / np.sqrt(x.shape[-1])), axis=-1)
    return x + T.linear(T.matmul(a, v), p["o.w"], p["o.b"])


# ---------------------------------------------------------------- reports


@dataclass
class FlopReport:
    model: str
    lengths: list[int]
    components: dict[str, list[int]]
    wall: list[float] = field(default_factory=list)  # median seconds per length
    knn: list[int] = field(default_factory=list)  # preprocessing, not in totals

    @property
    def totals(self) -> list[int]:
        return [sum(v[i] for v in self.components.values()) for i in range(len(self.lengths))]

    def per_token(self) -> list[Fraction]:
        return [Fraction(t, L) for t, L in zip(self.totals, self.lengths)]

    def second_differences(self) -> list[Fraction]:
        """Second divided differences of the totals; all zero iff the count is affine in L."""
        L, f = self.lengths, self.totals
        slopes = [Fraction(f[i + 1] - f[i], L[i + 1] - L[i]) for i in range(len(L) - 1)]
        return [(slopes[i + 1] - slopes[i]) / (L[i + 2] - L[i]) for i in range(len(slopes) - 1)]

    def csv_rows(self) -> list[str]:
        names = list(self.components)
        rows = []
        for i, L in enumerate(self.lengths):
            wall = f"{self.wall[i]:.6g}" if self.wall else ""
            knn = str(self.knn[i]) if self.knn else ""
            for name in names:
                rows.append(f"{self.model},{L},{name},{self.components[name][i]},")
            rows.append(f"{self.model},{L},total,{self.totals[i]},{wall}")
            if knn:
                rows.append(f"{self.model},{L},knn_preprocessing,{knn},")
        return rows


CSV_HEADER = "model,L,component,flops,wall_median_s"


def _check_lengths(lengths) -> list[int]:
    lengths = [int(x) for x in lengths]
    if len(lengths) < 1 or any(x < 1 for x in lengths) or any(a >= b for a, b in zip(lengths, lengths[1:])):
        raise ValueError(f"lengths must be positive and strictly ascending, got {lengths}")
    return lengths


def ssm_layer_report(cfg: EncoderConfig, lengths) -> FlopReport:
    lengths = _check_lengths(lengths)
    per = [layer_flops(L, cfg) for L in lengths]
    return FlopReport("ssm_layer", lengths, {k: [d[k] for d in per] for k in per[0]})


def attention_report(c: int, lengths) -> FlopReport:
    lengths = _check_lengths(lengths)
    per = [attention_layer_flops(L, c) for L in lengths]
    return FlopReport("attention_layer", lengths, {k: [d[k] for d in per] for k in per[0]})


def model_report(cfg: EncoderConfig, lengths) -> FlopReport:
    lengths = _check_lengths(lengths)
    per = [model_flops(L, cfg) for L in lengths]
    return FlopReport("mamba3d", lengths, {k: [d[k] for d in per] for k in per[0]},
                      knn=[knn_flops(L) for L in lengths])


def _median_time(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def time_layers(cfg: EncoderConfig, lengths, repeats: int = 3, seed: int = 0) -> tuple[list[float], list[float]]:
    """Median forward wall time of one encoder layer and one attention layer at each L."""
    rng = np.random.default_rng(seed)
    params = E.init_encoder_params(cfg, rng)
    lnp_p = ssm.subparams(params, "layers.0.lnp")
    mix_p = ssm.subparams(params, "layers.0.mix")
    att_p = init_attention_params(cfg.C, rng)
    ssm_t, att_t = [], []
    for L in _check_lengths(lengths):
        centers = rng.standard_normal((1, L, 3))
        nbr = E.center_neighbors(centers, min(cfg.k, L))
        x = Tensor(rng.standard_normal((1, L + 1, cfg.C)), dtype=T.get_default_dtype())
        pos = Tensor(rng.standard_normal((1, L + 1, cfg.C)), dtype=T.get_default_dtype())

        def run_ssm():
            z = E.TokenSequence(x, centers, pos, nbr)
            E.bi_ssm_block(E.lnp_block(z, lnp_p, cfg).tokens, mix_p, cfg.variant)

        with T.no_grad():
            ssm_t.append(_median_time(run_ssm, repeats))
            att_t.append(_median_time(lambda: attention_layer(x, att_p), repeats))
    return ssm_t, att_t
