import json

import numpy as np
import pytest

from mamba3d import config as C
from mamba3d import data as D
from mamba3d.encoder import EncoderConfig
from mamba3d.training import TrainHyper


# ---------------------------------------------------------------- RunConfig


def test_defaults_round_trip():
    cfg = C.RunConfig()
    back = C.loads(cfg.dumps())
    assert back == cfg and back.dumps() == cfg.dumps()


@pytest.mark.parametrize("name", sorted(C.PRESETS))
def test_presets_round_trip(name):
    cfg = C.preset(name)
    assert C.loads(cfg.dumps()) == cfg


def test_resolved_document_lists_every_field():
    d = json.loads(C.RunConfig().dumps())
    assert set(d["encoder"]) == set(EncoderConfig().to_dict())
    assert set(d["train"]) == set(TrainHyper().to_dict())
    assert {"seed", "dtype", "data", "out", "init_checkpoint"} <= set(d)


@pytest.mark.parametrize("doc,path", [
    ({"bogus": 1}, "bogus"),
    ({"encoder": {"Cc": 8}}, "encoder.Cc"),
    ({"train": {"lr_max": 1e-3}}, "train.lr_max"),
    ({"encoder": {"C": "64"}}, "encoder.C"),
    ({"encoder": {"C": 64.0}}, "encoder.C"),
    ({"train": {"augment": 1}}, "train.augment"),
    ({"train": {"betas": [0.9]}}, "train.betas"),
    ({"train": {"mask_range": [0.5, "x"]}}, "train.mask_range[1]"),
    ({"seed": "3"}, "seed"),
    ({"dtype": "f16"}, "dtype"),
    ({"encoder": []}, "encoder"),
])
def test_rejects_with_key_path(doc, path):
    with pytest.raises(C.ConfigError) as e:
        C.from_dict(doc)
    assert e.value.path == path
    assert str(e.value).startswith(path)


def test_semantic_error_names_section():
    with pytest.raises(C.ConfigError, match="^encoder: .*variant"):
        C.from_dict({"encoder": {"variant": "quad_ssm"}})


def test_invalid_json():
    with pytest.raises(C.ConfigError, match="line 1"):
        C.loads("{")


def test_ints_accepted_for_floats():
    cfg = C.from_dict({"train": {"lr": 1, "weight_decay": 0}})
    assert cfg.train.lr == 1 and cfg.train.weight_decay == 0


def test_seed_env_override():
    cfg = C.apply_env(C.RunConfig(seed=1), {"M3D_SEED": "42"})
    assert cfg.seed == 42
    assert C.apply_env(C.RunConfig(seed=1), {}).seed == 1
    with pytest.raises(C.ConfigError, match="M3D_SEED"):
        C.apply_env(C.RunConfig(), {"M3D_SEED": "abc"})


def test_merge_nested():
    assert C.merge({"a": {"b": 1, "c": 2}, "d": 3}, {"a": {"b": 5}}) == {"a": {"b": 5, "c": 2}, "d": 3}


# ---------------------------------------------------------------- synthetic dataset


def test_synth_counts_and_split():
    samples = D.synth_dataset(3, 100, 32, 0.01, seed=0)
    assert len(samples) == 300
    assert sum(s.split == "train" for s in samples) == 240
    for c in range(3):
        assert sum(s.split == "train" and s.label == c for s in samples) == 80
    assert len({s.path for s in samples}) == 300


def test_write_read_round_trip(tmp_path):
    samples = D.synth_dataset(2, 5, 16, 0.0, seed=3)
    manifest = D.write_dataset(tmp_path, samples)
    assert manifest.read_text().splitlines()[0] == "path,label,split"
    rows = D.read_manifest(tmp_path)
    assert [(r.path, r.label, r.split) for r in rows] == [(s.path, s.label, s.split) for s in samples]
    train, test = D.load_dataset(manifest)
    assert len(train) + len(test) == 10 and len(train) == 8
    got = {s.path: s.cloud for s in samples}
    first = [s for s in samples if s.split == "train"][0]
    np.testing.assert_allclose(train[0].points, got[first.path].points, atol=1e-5)


def test_same_seed_byte_identical(tmp_path):
    for sub in ("a", "b"):
        D.write_dataset(tmp_path / sub, D.synth_dataset(3, 4, 16, 0.02, seed=9))
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(files) == 13
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    other = D.synth_dataset(3, 4, 16, 0.02, seed=10)
    assert not np.array_equal(other[0].cloud.points, D.synth_dataset(3, 4, 16, 0.02, seed=9)[0].cloud.points)


@pytest.mark.parametrize("kw", [{"classes": 0}, {"classes": 4}, {"per_class": 0}, {"noise": -1.0}])
def test_synth_rejects(kw):
    with pytest.raises(ValueError):
        D.synth_dataset(**{"points": 16, **kw})


def test_manifest_errors(tmp_path):
    (tmp_path / "manifest.csv").write_text("file,label,split\n")
    with pytest.raises(ValueError, match="header"):
        D.read_manifest(tmp_path)
    (tmp_path / "manifest.csv").write_text("path,label,split\na.xyz,0,val\n")
    with pytest.raises(ValueError, match=":2: split"):
        D.read_manifest(tmp_path)
    (tmp_path / "manifest.csv").write_text("path,label,split\na.xyz,zero,train\n")
    with pytest.raises(ValueError, match="label"):
        D.read_manifest(tmp_path)
