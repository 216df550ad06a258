"""Point-cloud encoder: patch embedding, tokens, local norm pooling and bidirectional SSM layers.

Parameters live in one flat ``name -> Tensor`` dict. Layer ``i`` owns the
keys under ``layers.{i}.``; the shared embedding, positional encoder and
tokens sit at the top level.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import ssm
from . import tensor as T
from .geometry import PointCloud, group_batch, knn
from .ssm import SSMConfig, subparams, trunc_normal
from .tensor import Tensor

VARIANTS = ("bi_ssm", "one_ssm", "token_flip", "tri_ssm")
POOLINGS = ("k_pool", "max", "avg", "max_avg")
VAR_MODES = ("graph", "channel")


@dataclass
class EncoderConfig:
    depth: int = 12  # T
    C: int = 384
    k: int = 4
    L: int = 64
    K: int = 32
    N: int = 1024
    d_state: int = 16
    d_conv: int = 4
    expand: int = 2
    dt_rank: int | None = None
    variant: str = "bi_ssm"
    pooling: str = "k_pool"
    knorm_var: str = "graph"
    eps: float = 1e-5
    embed_dims: tuple = (128, 256, 512)
    pos_hidden: int = 128
    head_hidden: int = 256
    dropout: float = 0.1
    n_classes: int = 3

    def __post_init__(self):
        self.embed_dims = tuple(int(d) for d in self.embed_dims)
        self.validate()

    def validate(self) -> None:
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.C < 2 or self.C % 2:
            raise ValueError(f"C must be even and positive, got {self.C}")
        if not 1 <= self.k <= self.L:
            raise ValueError(f"need 1 <= k <= L, got k={self.k}, L={self.L}")
        if not 1 <= self.L <= self.N or not 1 <= self.K <= self.N:
            raise ValueError(f"need L <= N and K <= N, got L={self.L}, K={self.K}, N={self.N}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if self.knorm_var not in VAR_MODES:
            raise ValueError(f"knorm_var must be one of {VAR_MODES}, got {self.knorm_var!r}")
        if len(self.embed_dims) != 3 or min(self.embed_dims) < 1:
            raise ValueError(f"embed_dims needs three positive widths, got {self.embed_dims}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.n_classes < 1 or self.eps <= 0:
            raise ValueError("n_classes must be >= 1 and eps > 0")

    @property
    def ssm(self) -> SSMConfig:
        return SSMConfig(d_state=self.d_state, d_conv=self.d_conv, expand=self.expand, dt_rank=self.dt_rank)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["embed_dims"] = list(self.embed_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown encoder keys: {unknown}")
        return cls(**d)


@dataclass
class TokenSequence:
    tokens: Tensor  # (B, L+1, C); slot 0 is CLS
    centers: np.ndarray  # (B, L, 3), aligned with slots 1..L
    pos: Tensor  # (B, L+1, C) positional encoding added at every layer
    neighbors: np.ndarray  # (B, L, k) indices into 0..L-1
    layer: int = 0

    def replace(self, tokens: Tensor) -> "TokenSequence":
        return TokenSequence(tokens, self.centers, self.pos, self.neighbors, self.layer + 1)


# ---------------------------------------------------------------- initialization


def _cast(p: dict[str, Tensor]) -> dict[str, Tensor]:
    dt = T.get_default_dtype()
    return {k: v if v.dtype == dt else Tensor(v.data, dtype=dt) for k, v in p.items()}


def _lin(rng, p, name, n_in, n_out):
    p[f"{name}.w"] = Tensor(trunc_normal(rng, (n_in, n_out)))
    p[f"{name}.b"] = Tensor(np.zeros(n_out))


def _ln(p, name, c):
    p[f"{name}.g"] = Tensor(np.ones(c))
    p[f"{name}.b"] = Tensor(np.zeros(c))


def init_bi_ssm_params(rng, c: int, variant: str, cfg: SSMConfig, prefix: str, p: dict) -> None:
    _ln(p, f"{prefix}.ln", c)
    branches = {"bi_ssm": ("fwd", "chan"), "one_ssm": ("fwd",), "token_flip": ("fwd", "tok"),
                "tri_ssm": ("fwd", "chan", "tok")}[variant]
    for br in branches:
        for k, v in ssm.init_mamba_params(rng, c, cfg).items():
            p[f"{prefix}.{br}.{k}"] = v


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    c = cfg.C
    d0, d1, d2 = cfg.embed_dims
    p: dict[str, Tensor] = {}
    _lin(rng, p, "embed.fc1", 3, d0)
    _lin(rng, p, "embed.fc2", d0, d1)
    _lin(rng, p, "embed.fc3", 2 * d1, d2)
    _lin(rng, p, "embed.fc4", d2, c)
    _lin(rng, p, "pos.fc1", 3, cfg.pos_hidden)
    _lin(rng, p, "pos.fc2", cfg.pos_hidden, c)
    p["cls_token"] = Tensor(trunc_normal(rng, (c,)))
    p["cls_pos"] = Tensor(trunc_normal(rng, (c,)))
    for i in range(cfg.depth):
        pre = f"layers.{i}"
        _ln(p, f"{pre}.lnp.ln", c)
        p[f"{pre}.lnp.gamma"] = Tensor(np.ones(2 * c))
        p[f"{pre}.lnp.beta"] = Tensor(np.zeros(2 * c))
        _lin(rng, p, f"{pre}.lnp.align", 2 * c, c)
        init_bi_ssm_params(rng, c, cfg.variant, cfg.ssm, f"{pre}.mix", p)
    _ln(p, "norm", c)
    return _cast(p)


def init_head_params(cfg: EncoderConfig, rng: np.random.Generator, prefix: str = "head") -> dict[str, Tensor]:
    p: dict[str, Tensor] = {}
    h = cfg.head_hidden
    _lin(rng, p, f"{prefix}.fc1", 2 * cfg.C, h)
    _lin(rng, p, f"{prefix}.fc2", h, h)
    _lin(rng, p, f"{prefix}.fc3", h, cfg.n_classes)
    return _cast(p)


def count_params(params: dict[str, Tensor], prefix: str = "") -> int:
    return int(sum(t.size for k, t in params.items() if k.startswith(prefix)))


# ---------------------------------------------------------------- embedding and tokens


def _dense(x: Tensor, p: dict, name: str) -> Tensor:
    return T.linear(x, p[f"{name}.w"], p[f"{name}.b"])


def light_pointnet_embed(patches, p: dict[str, Tensor]) -> Tensor:
    """Per-patch features (..., L, C) from center-relative points (..., L, K, 3).

    Shared per-point MLP, max over the K points, the pooled vector concatenated
    back onto every point, a second MLP and a final max. Invariant to the
    order of points within a patch.
    """
    x = patches if isinstance(patches, Tensor) else Tensor(np.asarray(patches, dtype=p["embed.fc1.w"].dtype))
    if x.ndim < 3 or x.shape[-1] != 3:
        raise T.ShapeError(f"patches must be (..., L, K, 3), got {x.shape}")
    f = _dense(T.relu(_dense(x, p, "embed.fc1")), p, "embed.fc2")  # (..., K, d1)
    g = T.expand(T.reduce_max(f, axis=-2, keepdims=True), f.shape)
    f = T.concat([g, f], axis=-1)
    f = _dense(T.relu(_dense(f, p, "embed.fc3")), p, "embed.fc4")
    return T.reduce_max(f, axis=-2)


def pos_encode(centers, p: dict[str, Tensor]) -> Tensor:
    c = centers if isinstance(centers, Tensor) else Tensor(np.asarray(centers, dtype=p["pos.fc1.w"].dtype))
    return _dense(T.gelu(_dense(c, p, "pos.fc1")), p, "pos.fc2")


def center_neighbors(centers: np.ndarray, k: int) -> np.ndarray:
    """k nearest centers (self first) per center; (B, L, 3) -> (B, L, k)."""
    centers = np.asarray(centers, dtype=np.float64)
    if k > centers.shape[1]:
        raise ValueError(f"k={k} exceeds the {centers.shape[1]} available tokens")
    return np.stack([knn(c, c, k) for c in centers])


def assemble_tokens(embeddings: Tensor, centers, p: dict[str, Tensor], k: int) -> TokenSequence:
    """Prepend CLS and add positional encodings; embeddings (B, L, C), centers (B, L, 3)."""
    b, length, c = embeddings.shape
    centers = np.asarray(centers, dtype=np.float64)
    if centers.shape != (b, length, 3):
        raise T.ShapeError(f"centers {centers.shape} do not match embeddings {embeddings.shape}")
    cls = T.expand(T.reshape(p["cls_token"], (1, 1, c)), (b, 1, c))
    cls_pos = T.expand(T.reshape(p["cls_pos"], (1, 1, c)), (b, 1, c))
    pos = T.concat([cls_pos, pos_encode(centers, p)], axis=1)
    tokens = T.concat([cls, embeddings], axis=1) + pos
    return TokenSequence(tokens, centers, pos, center_neighbors(centers, k))


# ---------------------------------------------------------------- local norm pooling


def k_norm(tokens: Tensor, neighbors: np.ndarray, gamma: Tensor, beta: Tensor,
           eps: float = 1e-5, var_mode: str = "graph") -> Tensor:
    """Neighbour residuals standardized per local graph, joined with the center feature.

    tokens (B, L+1, C) with CLS at slot 0; neighbors (B, L, k) index slots 1..L.
    Returns (B, L+1, k, 2C). CLS has no neighbourhood: its residual half is
    zero and its k rows are copies.
    """
    b, n, c = tokens.shape
    k = neighbors.shape[-1]
    feats = tokens[:, 1:]
    fk = T.batch_gather(feats, neighbors)  # (B, L, k, C)
    fc = T.expand(T.unsqueeze(feats, 2), fk.shape)
    r = fk - fc
    axes = (2, 3) if var_mode == "graph" else (2,)
    std = T.sqrt(T.reduce_var(r, axis=axes, keepdims=True) + eps)
    normed = r / T.expand(std, r.shape)
    local = T.concat([normed, fc], axis=-1)
    cls = T.expand(T.reshape(tokens[:, :1], (b, 1, 1, c)), (b, 1, k, c))
    cls = T.concat([Tensor(np.zeros((b, 1, k, c), dtype=tokens.dtype)), cls], axis=-1)
    return T.concat([cls, local], axis=1) * gamma + beta


def k_pooling(propagated: Tensor, mode: str = "k_pool") -> Tensor:
    """Aggregate over the neighbour axis (-2): (..., k, D) -> (..., D)."""
    if mode == "k_pool":
        w = T.softmax(propagated, axis=-2)
        return (w * propagated).sum(axis=-2)
    if mode == "max":
        return T.reduce_max(propagated, axis=-2)
    if mode == "avg":
        return T.reduce_mean(propagated, axis=-2)
    if mode == "max_avg":
        return T.reduce_max(propagated, axis=-2) + T.reduce_mean(propagated, axis=-2)
    raise ValueError(f"unknown pooling {mode!r}")


def lnp_block(z: TokenSequence, p: dict[str, Tensor], cfg: EncoderConfig) -> TokenSequence:
    """``z + align(pool(knorm(LN(z + pos))))``; p holds the layer's ``lnp.*`` keys without prefix."""
    x = T.layernorm(z.tokens + z.pos, p["ln.g"], p["ln.b"])
    prop = k_norm(x, z.neighbors, p["gamma"], p["beta"], cfg.eps, cfg.knorm_var)
    out = _dense(k_pooling(prop, cfg.pooling), p, "align")
    return z.replace(z.tokens + out)


# ---------------------------------------------------------------- bidirectional SSM


def channel_flip(x: Tensor) -> Tensor:
    return T.flip(x, -1)


def token_flip(x: Tensor) -> Tensor:
    return T.flip(x, -2)


def bi_ssm_block(x: Tensor, p: dict[str, Tensor], variant: str = "bi_ssm") -> Tensor:
    """``x + M_fwd(LN x) + flip(M_chan(flip(LN x)))`` plus the variant's branch set."""
    h = T.layernorm(x, p["ln.g"], p["ln.b"])
    out = x + ssm.mamba_block(h, subparams(p, "fwd"))
    if variant in ("bi_ssm", "tri_ssm"):
        out = out + channel_flip(ssm.mamba_block(channel_flip(h), subparams(p, "chan")))
    if variant in ("token_flip", "tri_ssm"):
        out = out + token_flip(ssm.mamba_block(token_flip(h), subparams(p, "tok")))
    return out


# ---------------------------------------------------------------- full encoder


def encode_tokens(z: TokenSequence, params: dict[str, Tensor], cfg: EncoderConfig) -> Tensor:
    for i in range(cfg.depth):
        layer = subparams(params, f"layers.{i}")
        z = lnp_block(z, subparams(layer, "lnp"), cfg)
        z = z.replace(bi_ssm_block(z.tokens, subparams(layer, "mix"), cfg.variant))
    return T.layernorm(z.tokens, params["norm.g"], params["norm.b"])


def encode_patches(groups, centers, params: dict[str, Tensor], cfg: EncoderConfig) -> Tensor:
    """groups (B, L, K, 3), centers (B, L, 3) -> normalized tokens (B, L+1, C)."""
    emb = light_pointnet_embed(groups, params)
    return encode_tokens(assemble_tokens(emb, centers, params, cfg.k), params, cfg)


def encoder_forward(cloud, cfg: EncoderConfig, params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """(cls_feature, tokens) for one PointCloud (shapes (C,), (L+1, C)) or a list of them (batched)."""
    single = isinstance(cloud, (PointCloud, np.ndarray))
    clouds = [cloud] if single else list(cloud)
    groups, centers = group_batch(clouds, cfg.L, cfg.K)
    tokens = encode_patches(groups, centers, params, cfg)
    if single:
        tokens = tokens[0]
        return tokens[0], tokens
    return tokens[:, 0], tokens


# ---------------------------------------------------------------- classification head


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or rate <= 0:
        return x
    keep = rng.random(x.shape) >= rate
    return T.where_mask(x, keep, 1.0 / (1.0 - rate))


def readout(tokens: Tensor) -> Tensor:
    """Classification feature: ``[CLS, max + mean over patch tokens]`` of width 2C.

    Forward scans never carry patch information back to slot 0, so the CLS
    token alone would be input-independent; the pooled half carries the cloud.
    """
    patches = tokens[..., 1:, :]
    pooled = T.reduce_max(patches, axis=-2) + T.reduce_mean(patches, axis=-2)
    return T.concat([tokens[..., 0, :], pooled], axis=-1)


def classification_head(cls_feature: Tensor, p: dict[str, Tensor], rate: float = 0.1,
                        rng: np.random.Generator | None = None, prefix: str = "head") -> Tensor:
    """Three-layer MLP over the :func:`readout` feature; dropout only when an rng is given (training)."""
    h = dropout(T.gelu(_dense(cls_feature, p, f"{prefix}.fc1")), rate, rng)
    h = dropout(T.gelu(_dense(h, p, f"{prefix}.fc2")), rate, rng)
    return _dense(h, p, f"{prefix}.fc3")
