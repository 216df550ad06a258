"""Per-block gradient checks on a tiny configuration.

Each block is differentiated at a generic, well-conditioned point: matrices
scaled by fan-in, O(1) step sizes and state decay rates near 1, so no
gradient component is structurally tiny and the relative-error metric
measures the backward pass rather than finite-difference roundoff.
"""

from __future__ import annotations

from dataclasses import dataclass
import numpy as np

from . import encoder as E
from . import ssm
from . import tensor as T
from .encoder import EncoderConfig
from .geometry import chamfer_distance, group_batch, synth_shapes
from .gradcheck import THRESHOLD, grad_errors, random_projection_loss
from .ssm import subparams
from .tensor import Tensor

BLOCKS = ("light_pointnet", "k_norm", "k_pooling", "lnp", "selective_scan", "mamba_block", "bi_ssm",
          "head", "chamfer")
ALL_BLOCKS = BLOCKS + ("encoder",)
MAX_PARAMS = 200_000


def tiny_config(**kw) -> EncoderConfig:
    base = dict(depth=1, C=16, k=3, L=8, K=8, N=64, d_state=4, embed_dims=(8, 16, 16), pos_hidden=8,
                head_hidden=16, n_classes=3)
    base.update(kw)
    return EncoderConfig(**base)


def check_point(params: dict[str, Tensor], rng: np.random.Generator) -> dict[str, Tensor]:
    """Redraw every parameter at a generic point suited to finite differencing."""
    out = {}
    for name, v in params.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "A_log":
            x = np.log(rng.uniform(0.5, 1.5, v.shape))
        elif leaf == "dt_bias":
            x = rng.uniform(-1.0, 0.5, v.shape)
        elif leaf in ("g", "gamma"):
            x = 1.0 + 0.2 * rng.standard_normal(v.shape)
        elif v.ndim >= 2:
            x = rng.standard_normal(v.shape) / np.sqrt(v.shape[0])
        else:
            x = 0.3 * rng.standard_normal(v.shape)
        out[name] = Tensor(x, dtype=v.dtype)
    return out


def sign_flip(x: Tensor) -> Tensor:
    """Identity forward, negated backward; injects a wrong-sign gradient for mutation tests."""
    return T.custom_op(x.data.copy(), (x,), lambda g: (-g,), "sign_flip")


@dataclass
class CheckResult:
    block: str
    error: float
    threshold: float
    worst_tensor: str

    @property
    def passed(self) -> bool:
        return bool(self.error <= self.threshold)


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def _block_case(block: str, cfg: EncoderConfig, rng: np.random.Generator):
    """Return (f, inputs, options) for one block; f maps inputs to a pre-loss output tensor."""
    full = check_point(E.init_encoder_params(cfg, rng), rng)
    c = cfg.C
    if block == "light_pointnet":
        p = {k: v for k, v in full.items() if k.startswith("embed.")}
        return lambda v: E.light_pointnet_embed(v["x"], v), {"x": _rand(rng, 2, cfg.K, 3), **p}, {"h": 1e-4}
    centers = rng.standard_normal((1, cfg.L, 3))
    nbr = E.center_neighbors(centers, cfg.k)
    if block == "k_norm":
        inputs = {"x": _rand(rng, 1, cfg.L + 1, c), "gamma": _rand(rng, 2 * c), "beta": _rand(rng, 2 * c)}
        return lambda v: E.k_norm(v["x"], nbr, v["gamma"], v["beta"], cfg.eps, cfg.knorm_var), inputs, {}
    if block == "k_pooling":
        return lambda v: E.k_pooling(v["x"], cfg.pooling), {"x": _rand(rng, 1, cfg.L + 1, cfg.k, 2 * c)}, {}
    if block == "lnp":
        lp = subparams(full, "layers.0.lnp")
        inputs = {"tokens": _rand(rng, 1, cfg.L + 1, c), "pos": _rand(rng, 1, cfg.L + 1, c), **lp}

        def f(v):
            z = E.TokenSequence(v["tokens"], centers, v["pos"], nbr)
            return E.lnp_block(z, v, cfg).tokens

        return f, inputs, {}
    if block == "selective_scan":
        p = check_point(ssm.init_ssm_params(rng, 4, cfg.d_state, 2), rng)
        return lambda v: ssm.selective_scan(v["x"], v), {"x": _rand(rng, 8, 4), **p}, {}
    if block == "mamba_block":
        p = check_point(ssm.init_mamba_params(rng, 8, cfg.ssm), rng)
        return lambda v: ssm.mamba_block(v["x"], v), {"x": _rand(rng, 6, 8), **p}, {}
    if block == "bi_ssm":
        p = subparams(full, "layers.0.mix")
        return (lambda v: E.bi_ssm_block(v["x"], v, cfg.variant)), {"x": _rand(rng, 1, cfg.L + 1, c), **p}, \
            {"max_coords": 12}
    if block == "head":
        p = check_point(E.init_head_params(cfg, rng), rng)
        return lambda v: E.classification_head(E.readout(v["x"]), v), {"x": _rand(rng, 1, cfg.L + 1, c), **p}, \
            {"h": 1e-4}
    if block == "chamfer":
        inputs = {"a": _rand(rng, 8, 3), "b": _rand(rng, 6, 3)}
        return lambda v: chamfer_distance(v["a"], v["b"]), inputs, {}
    if block == "encoder":
        cloud = synth_shapes("torus", cfg.N, seed=int(rng.integers(1 << 30)))
        groups, gcenters = group_batch([cloud], cfg.L, cfg.K)
        return lambda v: E.encode_patches(groups, gcenters, v, cfg), dict(full), {"h": 1e-4, "max_coords": 3}
    raise ValueError(f"unknown block {block!r}; expected one of {ALL_BLOCKS}")


def check_block(block: str, cfg: EncoderConfig | None = None, seed: int = 0,
                mutate: bool = False) -> CheckResult:
    cfg = cfg or tiny_config()
    dt = np.dtype(T.get_default_dtype())
    rng = np.random.default_rng(seed)
    f, inputs, opts = _block_case(block, cfg, rng)
    inputs = {k: Tensor(v.data, dtype=dt) for k, v in inputs.items()}
    wrap = sign_flip if mutate else (lambda t: t)

    def loss(v):
        out = wrap(f(v))
        return out if out.size == 1 else random_projection_loss(out, seed)

    errs = grad_errors(loss, inputs, scheme="richardson", seed=seed, oracle=True, **opts)
    worst = max(errs, key=errs.get)
    return CheckResult(block, errs[worst], THRESHOLD[dt], worst)


def run_gradchecks(cfg: EncoderConfig | None = None, blocks=BLOCKS, seed: int = 0,
                   mutate: str | None = None) -> list[CheckResult]:
    cfg = cfg or tiny_config()
    n = E.count_params(E.init_encoder_params(cfg, np.random.default_rng(0)))
    if n > MAX_PARAMS:
        raise ValueError(f"gradcheck needs a tiny config (<= {MAX_PARAMS} parameters), got {n}")
    return [check_block(b, cfg, seed, mutate == b) for b in blocks]


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'block':<16}{'max rel err':>14}{'threshold':>12}  status  worst tensor"]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{r.block:<16}{r.error:>14.3e}{r.threshold:>12.1e}  {status:<6}  {r.worst_tensor}")
    return "\n".join(lines)

