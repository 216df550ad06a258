import math

import numpy as np
import pytest

from mamba3d import encoder as E
from mamba3d import tensor as T
from mamba3d.checks import check_block, tiny_config
from mamba3d.encoder import EncoderConfig
from mamba3d.geometry import synth_shapes
from mamba3d.gradcheck import finite_diff_check, random_projection_loss
from mamba3d.ssm import subparams
from mamba3d.tensor import Tensor


@pytest.fixture(autouse=True)
def f64():
    with T.default_dtype("f64"):
        yield


def tiny(**kw):
    base = dict(depth=2, C=16, k=3, L=8, K=8, N=64, d_state=4, embed_dims=(8, 16, 16), pos_hidden=8, head_hidden=8)
    base.update(kw)
    return EncoderConfig(**base)


def randomized(params, rng, scale=0.3, keep=("A_log", ".D", ".g")):
    """Replace the small init weights by O(1) ones so every path carries signal.

    Step-size biases get O(1) values too: at the init's tiny steps the A_log
    gradients drown in finite-difference roundoff.
    """
    out = {}
    for k, v in params.items():
        if any(k.endswith(s) for s in keep):
            out[k] = v
        elif k.endswith("dt_bias"):
            out[k] = Tensor(rng.uniform(-1.0, 1.0, v.shape))
        else:
            out[k] = Tensor(rng.standard_normal(v.shape) * scale)
    return out


# ---------------------------------------------------------------- config


@pytest.mark.parametrize("kw", [dict(depth=0), dict(C=15), dict(k=9), dict(k=0), dict(variant="quad"),
                                dict(pooling="sum"), dict(L=100)])
def test_config_rejects(kw):
    with pytest.raises(ValueError):
        tiny(**kw)


def test_config_round_trip():
    cfg = tiny(variant="tri_ssm")
    assert EncoderConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        EncoderConfig.from_dict({**cfg.to_dict(), "bogus": 1})


# ---------------------------------------------------------------- light-PointNet


def test_embed_permutation_invariant_bit_exact():
    rng = np.random.default_rng(0)
    cfg = tiny()
    p = E.init_encoder_params(cfg, rng)
    x = rng.standard_normal((2, 8, 16, 3))
    base = E.light_pointnet_embed(x, p).data
    for _ in range(5):
        xp = x.copy()
        for b in range(2):
            for l in range(8):
                xp[b, l] = xp[b, l][rng.permutation(16)]
        assert np.array_equal(E.light_pointnet_embed(xp, p).data, base)


def test_embed_duplicate_rows():
    rng = np.random.default_rng(1)
    p = E.init_encoder_params(tiny(), rng)
    x = rng.standard_normal((5, 8, 3))
    x[3] = x[1]
    out = E.light_pointnet_embed(x, p).data
    assert out.shape == (5, 16)
    assert np.array_equal(out[3], out[1])


def test_embed_gradcheck():
    rng = np.random.default_rng(2)
    p = randomized({k: v for k, v in E.init_encoder_params(tiny(), rng).items() if k.startswith("embed")}, rng)
    # well-separated points keep the max-pool winners away from ties
    x = Tensor(rng.standard_normal((2, 8, 3)))
    inputs = {"x": x, **p}
    err = finite_diff_check(lambda v: random_projection_loss(E.light_pointnet_embed(v["x"], v)), inputs,
                            scheme="richardson", h=1e-4)
    assert err <= 1e-6


# ---------------------------------------------------------------- tokens


@pytest.mark.parametrize("L", [64, 128])
def test_assemble_full_shapes(L):
    cfg = EncoderConfig(L=L, depth=1)
    rng = np.random.default_rng(0)
    p = {k: v for k, v in E.init_encoder_params(cfg, rng).items() if not k.startswith("layers")}
    z = E.assemble_tokens(Tensor(np.zeros((1, L, 384))), rng.standard_normal((1, L, 3)), p, cfg.k)
    assert z.tokens.shape == (1, L + 1, 384)
    assert z.neighbors.shape == (1, L, 4)


def test_assemble_zero_pos_is_raw_embeddings():
    rng = np.random.default_rng(0)
    p = E.init_encoder_params(tiny(), rng)
    for k in ("pos.fc1.w", "pos.fc1.b", "pos.fc2.w", "pos.fc2.b", "cls_pos"):
        p[k] = Tensor(np.zeros(p[k].shape))
    emb = rng.standard_normal((2, 8, 16))
    z = E.assemble_tokens(Tensor(emb), rng.standard_normal((2, 8, 3)), p, 3)
    assert np.array_equal(z.tokens.data[:, 1:], emb)
    assert np.array_equal(z.tokens.data[:, 0], np.tile(p["cls_token"].data, (2, 1)))


# ---------------------------------------------------------------- K-norm / K-pooling


def test_knorm_zero_residual():
    rng = np.random.default_rng(0)
    c, k = 4, 3
    row = rng.standard_normal(c)
    tokens = Tensor(np.tile(row, (1, 6, 1)))
    nbr = np.tile(np.arange(k), (1, 5, 1))
    g, b = Tensor(rng.standard_normal(2 * c)), Tensor(rng.standard_normal(2 * c))
    out = E.k_norm(tokens, nbr, g, b).data
    expected = np.concatenate([np.zeros(c), row]) * g.data + b.data
    np.testing.assert_array_equal(out, np.broadcast_to(expected, out.shape))


def test_knorm_single_neighbor_hand_oracle():
    # token 1 has neighbours {itself, token 2}; only one residual row is non-zero
    c = 4
    f1, f2 = np.array([1.0, 2.0, 0.0, -1.0]), np.array([2.0, 0.0, 1.0, 1.0])
    tokens = Tensor(np.stack([np.zeros(c), f1, f2])[None])
    nbr = np.array([[[0, 1], [1, 0]]])
    out = E.k_norm(tokens, nbr, Tensor(np.ones(2 * c)), Tensor(np.zeros(2 * c)), eps=1e-5).data
    r = f2 - f1
    entries = np.concatenate([np.zeros(c), r])  # k x C residual entries of the graph
    std = math.sqrt(entries.var() + 1e-5)
    np.testing.assert_allclose(out[0, 1, 1, :c], r / std, rtol=1e-14)
    np.testing.assert_array_equal(out[0, 1, 0, :c], np.zeros(c))
    np.testing.assert_array_equal(out[0, 1, 1, c:], f1)


def test_knorm_k_larger_than_L():
    with pytest.raises(ValueError):
        E.center_neighbors(np.zeros((1, 3, 3)), 4)


def test_kpool_examples():
    v = Tensor(np.full((1, 4, 2), 0.7))
    np.testing.assert_allclose(E.k_pooling(v).data, [[0.7, 0.7]], rtol=1e-15)
    x = Tensor(np.array([[0.0], [math.log(3)]]))
    assert E.k_pooling(x).data[0] == pytest.approx(0.75 * math.log(3), abs=1e-12)
    assert E.k_pooling(x).data[0] == pytest.approx(0.8240, abs=1e-4)


@pytest.mark.parametrize("seed", range(20))
def test_kpool_weights_and_neighbor_permutation(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((9, 4, 6)) * 3
    w = T.softmax(Tensor(x), axis=-2).data
    assert (w >= 0).all() and np.abs(w.sum(axis=-2) - 1).max() <= 1e-6
    perm = rng.permutation(4)
    for mode in E.POOLINGS:
        a = E.k_pooling(Tensor(x), mode).data
        b = E.k_pooling(Tensor(x[:, perm]), mode).data
        assert np.abs(a - b).max() <= 1e-6


@pytest.mark.parametrize("var_mode", ["graph", "channel"])
def test_knorm_kpool_gradcheck(var_mode):
    rng = np.random.default_rng(4)
    centers = rng.standard_normal((1, 8, 3))
    nbr = E.center_neighbors(centers, 3)
    inputs = {"x": Tensor(rng.standard_normal((1, 9, 6))), "g": Tensor(rng.standard_normal(12)),
              "b": Tensor(rng.standard_normal(12))}
    f = lambda v: random_projection_loss(E.k_pooling(E.k_norm(v["x"], nbr, v["g"], v["b"], var_mode=var_mode)))
    assert finite_diff_check(f, inputs, scheme="richardson") <= 1e-6


def layer_fixture(rng, cfg):
    p = randomized(E.init_encoder_params(cfg, rng), rng)
    centers = rng.standard_normal((2, cfg.L, 3))
    z = E.assemble_tokens(Tensor(rng.standard_normal((2, cfg.L, cfg.C))), centers, p, cfg.k)
    return p, z


def test_lnp_zero_is_residual():
    rng = np.random.default_rng(0)
    cfg = tiny(C=6)
    p, z = layer_fixture(rng, cfg)
    lp = subparams(p, "layers.0.lnp")
    for k in ("gamma", "beta", "align.w", "align.b"):
        lp[k] = Tensor(np.zeros(lp[k].shape))
    out = E.lnp_block(z, lp, cfg)
    assert np.array_equal(out.tokens.data, z.tokens.data)
    assert out.tokens.shape == (2, 9, 6)


@pytest.mark.parametrize("pooling", E.POOLINGS)
def test_lnp_gradcheck(pooling):
    rng = np.random.default_rng(5)
    cfg = tiny(C=6, depth=1, pooling=pooling)
    p, z = layer_fixture(rng, cfg)
    lp = subparams(p, "layers.0.lnp")
    inputs = {"tokens": z.tokens, "pos": z.pos, **lp}

    def f(v):
        zz = E.TokenSequence(v["tokens"], z.centers, v["pos"], z.neighbors)
        return random_projection_loss(E.lnp_block(zz, v, cfg).tokens)

    assert finite_diff_check(f, inputs, scheme="richardson", h=1e-4) <= 1e-6


# ---------------------------------------------------------------- bi-SSM


def test_channel_flip_examples():
    np.testing.assert_array_equal(E.channel_flip(Tensor([[1.0, 2.0, 3.0]])).data, [[3.0, 2.0, 1.0]])
    x = np.random.default_rng(0).standard_normal((4, 5, 6))
    assert np.array_equal(E.channel_flip(E.channel_flip(Tensor(x))).data, x)
    pal = np.array([[1.0, 2.0, 2.0, 1.0]])
    assert np.array_equal(E.channel_flip(Tensor(pal)).data, pal)


@pytest.mark.parametrize("variant", E.VARIANTS)
def test_bi_ssm_zero_projections_identity(variant):
    rng = np.random.default_rng(1)
    cfg = tiny(variant=variant)
    p = subparams(randomized(E.init_encoder_params(cfg, rng), rng), "layers.0.mix")
    for k in p:
        if k.endswith("out_proj"):
            p[k] = Tensor(np.zeros(p[k].shape))
    x = rng.standard_normal((2, 9, 16))
    assert np.array_equal(E.bi_ssm_block(Tensor(x), p, variant).data, x)


def test_bi_ssm_branches_contribute():
    rng = np.random.default_rng(2)
    cfg = tiny()
    p = subparams(randomized(E.init_encoder_params(cfg, rng), rng), "layers.0.mix")
    x = Tensor(rng.standard_normal((2, 9, 16)))
    outs = {v: E.bi_ssm_block(x, p, v).data for v in ("bi_ssm", "one_ssm")}
    assert outs["bi_ssm"].shape == (2, 9, 16)
    assert np.abs(outs["bi_ssm"] - outs["one_ssm"]).max() > 1e-8


@pytest.mark.parametrize("variant", E.VARIANTS)
def test_bi_ssm_gradcheck(variant):
    r = check_block("bi_ssm", tiny_config(C=8, variant=variant), seed=3)
    assert r.passed, r


# ---------------------------------------------------------------- encoder


def test_encoder_full_shape():
    cfg = EncoderConfig()
    cloud = synth_shapes("sphere", 1024, seed=0)
    rng = np.random.default_rng(0)
    p = E.init_encoder_params(cfg, rng)
    with T.default_dtype("f32"), T.no_grad():
        p32 = {k: Tensor(v.data, dtype="f32") for k, v in p.items()}
        cls, tokens = E.encoder_forward(cloud, cfg, p32)
    assert cls.shape == (384,) and tokens.shape == (65, 384)
    assert np.isfinite(tokens.data).all()


def test_encoder_tiny_shape_and_batch():
    cfg = EncoderConfig(N=128, L=16, K=8, depth=2, C=32, d_state=4)
    p = E.init_encoder_params(cfg, np.random.default_rng(0))
    clouds = [synth_shapes(i, 128, seed=i) for i in range(3)]
    cls, tokens = E.encoder_forward(clouds[0], cfg, p)
    assert cls.shape == (32,) and tokens.shape == (17, 32)
    bcls, btok = E.encoder_forward(clouds, cfg, p)
    assert btok.shape == (3, 17, 32)
    np.testing.assert_allclose(btok.data[0], tokens.data, rtol=1e-10, atol=1e-12)


def test_encoder_within_patch_permutation_f32():
    cfg = EncoderConfig(N=128, L=16, K=8, depth=2, C=32, d_state=4)
    rng = np.random.default_rng(1)
    with T.default_dtype("f32"):
        p = E.init_encoder_params(cfg, rng)
        cloud = synth_shapes("torus", 128, seed=3)
        groups, centers = E.group_batch([cloud], cfg.L, cfg.K)
        base = E.encode_patches(groups, centers, p, cfg).data
        for _ in range(3):
            g2 = groups.copy()
            for l in range(cfg.L):
                g2[0, l] = g2[0, l][rng.permutation(cfg.K)]
            assert np.abs(E.encode_patches(g2, centers, p, cfg).data - base).max() <= 1e-5


@pytest.mark.parametrize("seed", range(3))
def test_encoder_end_to_end_gradcheck_f64(seed):
    r = check_block("encoder", seed=seed)
    assert r.error <= 1e-6, r


@pytest.mark.parametrize("seed", range(1, 6))
def test_encoder_end_to_end_gradcheck_f32(seed):
    with T.default_dtype("f32"):
        r = check_block("encoder", seed=seed)
    assert r.error <= 1e-3, r


@pytest.mark.xfail(strict=True, reason="sampled dt_down component is ~1e-5 of the terms it sums; "
                                       "f32 rounding of those terms alone gives ~1e-3 relative error")
def test_encoder_end_to_end_gradcheck_f32_cancelling_component():
    with T.default_dtype("f32"):
        r = check_block("encoder", seed=0)
    assert r.error <= 1e-3, r


# ---------------------------------------------------------------- head


def test_head_zero_weights_uniform():
    cfg = tiny(n_classes=5)
    p = E.init_head_params(cfg, np.random.default_rng(0))
    p = {k: Tensor(np.zeros(v.shape)) for k, v in p.items()}
    logits = E.classification_head(Tensor(np.ones((2, 32))), p)
    assert logits.shape == (2, 5)
    assert T.cross_entropy(logits, np.array([0, 3])).item() == pytest.approx(math.log(5), abs=1e-12)


def test_head_dropout_only_with_rng():
    rng = np.random.default_rng(1)
    cfg = tiny()
    p = randomized(E.init_head_params(cfg, rng), rng)
    x = Tensor(rng.standard_normal((4, 32)))
    a = E.classification_head(x, p).data
    assert np.array_equal(a, E.classification_head(x, p).data)
    assert not np.array_equal(a, E.classification_head(x, p, 0.5, np.random.default_rng(0)).data)


def test_head_gradcheck():
    rng = np.random.default_rng(2)
    cfg = tiny()
    p = randomized(E.init_head_params(cfg, rng), rng)
    inputs = {"x": Tensor(rng.standard_normal((3, 32))), **p}
    f = lambda v: T.cross_entropy(E.classification_head(v["x"], v), np.array([0, 1, 2]))
    assert finite_diff_check(f, inputs, scheme="richardson") <= 1e-6


def test_readout_matches_numpy():
    x = np.random.default_rng(3).standard_normal((2, 9, 16))
    got = E.readout(Tensor(x)).data
    want = np.concatenate([x[:, 0], x[:, 1:].max(1) + x[:, 1:].mean(1)], axis=-1)
    assert got.shape == (2, 32)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-14)


def test_cls_slot_blind_to_patches_but_readout_is_not():
    # causal token scans never carry patch content back to slot 0
    cfg = tiny()
    rng = np.random.default_rng(4)
    params = randomized(E.init_encoder_params(cfg, rng), rng)
    a = synth_shapes("sphere", cfg.N, seed=1)
    b = synth_shapes("cube", cfg.N, seed=2)
    cls_a, tok_a = E.encoder_forward(a, cfg, params)
    cls_b, tok_b = E.encoder_forward(b, cfg, params)
    np.testing.assert_allclose(cls_a.data, cls_b.data, atol=1e-12)
    assert np.abs(E.readout(tok_a).data - E.readout(tok_b).data).max() > 1e-3
