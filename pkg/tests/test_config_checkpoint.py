import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from idensenet import autodiff as ad
from idensenet import checkpoint as ckpt
from idensenet.autodiff import Tape
from idensenet.config import ConfigError, RunConfig
from idensenet.flow import build_model
from idensenet.likelihood import nll_tensor
from idensenet.optim import AdamState, adam_step


def small_config(**kw):
    base = dict(n_blocks=2, depth=2, growth=8, iterations=3, batch=16, test_size=50)
    return RunConfig(**{**base, **kw})


def trained_state(config, steps=3):
    model = build_model(config.model_config(), np.random.default_rng(0))
    adam = AdamState.init(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(1)
    for _ in range(steps):
        model.power_iteration_step()
        with Tape():
            loss = nll_tensor(model, rng.normal(size=(8, 2)))
        model.zero_grad()
        ad.backward(loss)
        adam_step(model.parameters(), adam)
    return model, adam


class TestRunConfig:
    def test_defaults(self):
        c = RunConfig()
        assert (c.dataset, c.n_blocks, c.depth, c.coeff, c.lr, c.batch, c.iterations) == ("TwoMoons", 10, 3, 0.98, 1e-3, 500, 50_000)
        assert c.concat == "learnable" and c.estimator == "exact"

    def test_json_round_trip(self, tmp_path):
        c = small_config(dataset="checkerboard", kind="residual", residual_widths=[8, 8], seed=4)
        c.save(tmp_path / "c.json")
        assert RunConfig.load(tmp_path / "c.json") == c
        assert RunConfig.from_json(c.to_json()).to_dict() == c.to_dict()

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="frobnicate"):
            RunConfig.from_dict({**RunConfig().to_dict(), "frobnicate": 1})

    @pytest.mark.parametrize(
        "bad",
        [dict(dataset="spirals"), dict(lr=0.0), dict(batch=0), dict(coeff=1.2), dict(activation="tanh"), dict(estimator="exactish"), dict(iterations=-1)],
    )
    def test_invalid_values(self, bad):
        with pytest.raises(ConfigError):
            RunConfig(**bad)

    def test_bad_json(self):
        with pytest.raises(ConfigError):
            RunConfig.from_json("{not json")
        with pytest.raises(ConfigError):
            RunConfig.from_json("[1, 2]")

    def test_replace_validates(self):
        c = RunConfig()
        assert c.replace(seed=3).seed == 3
        with pytest.raises(ConfigError):
            c.replace(n_blocks=0)

    def test_dataset_canonicalised(self):
        assert RunConfig(dataset="two_circles").dataset == "TwoCircles"

    @settings(max_examples=30, deadline=None)
    @given(
        st.integers(1, 5),
        st.integers(0, 4),
        st.sampled_from([4, 8, 16]),
        st.sampled_from(["clipswish", "lipswish", "crelu"]),
        st.floats(0.1, 0.99),
        st.integers(0, 2**31),
    )
    def test_lossless_serialisation(self, blocks, depth, growth, act, coeff, seed):
        c = RunConfig(n_blocks=blocks, depth=depth, growth=growth, activation=act, coeff=coeff, seed=seed)
        assert RunConfig.from_json(c.to_json()) == c


class TestCheckpoint:
    def test_forward_bit_identical(self, tmp_path, rng):
        config = small_config()
        model, adam = trained_state(config)
        path = ckpt.save(tmp_path / "m.bin", config, model, adam, 3)
        state = ckpt.load(path)
        x = rng.normal(size=(20, 2))
        np.testing.assert_array_equal(state.model.forward(x)[0].data, model.forward(x)[0].data)
        assert state.iteration == 3
        assert state.config == config

    def test_optimizer_and_spectral_state(self, tmp_path):
        config = small_config(kind="residual")
        model, adam = trained_state(config)
        state = ckpt.load(ckpt.save(tmp_path / "m.bin", config, model, adam, 7, {"note": [1, 2]}))
        assert state.adam.step == adam.step
        for name in adam.m:
            np.testing.assert_array_equal(state.adam.m[name], adam.m[name])
            np.testing.assert_array_equal(state.adam.v[name], adam.v[name])
        for a, b in zip(model.spectral_weights(), state.model.spectral_weights()):
            np.testing.assert_array_equal(a.u, b.u)
            assert a.sigma == b.sigma
        assert state.state == {"note": [1, 2]}

    def test_without_optimizer(self, tmp_path):
        config = small_config()
        model, _ = trained_state(config, steps=0)
        state = ckpt.load(ckpt.save(tmp_path / "m.bin", config, model))
        assert state.adam is None
        assert state.iteration == 0

    def test_layout_header(self, tmp_path):
        config = small_config()
        model, _ = trained_state(config, steps=0)
        raw = ckpt.encode(config, model)
        assert raw[:8] == b"IDNSNET\0"
        version, blob_len = struct.unpack_from("<II", raw, 8)
        assert version == ckpt.VERSION
        header = json.loads(raw[16 : 16 + blob_len])
        assert header["config"] == config.to_dict()
        (count,) = struct.unpack_from("<I", raw, 16 + blob_len)
        _, records = ckpt.decode_records(raw)
        assert count == len(records)
        assert {n.split("/")[0] for n in records} >= {"param", "spectral_u", "spectral_v", "spectral_sigma", "iteration"}

    def test_payload_is_little_endian_float64(self, tmp_path):
        config = small_config()
        model, _ = trained_state(config, steps=0)
        raw = ckpt.encode(config, model)
        _, records = ckpt.decode_records(raw)
        name = next(n for n in records if n.startswith("param/"))
        arr = records[name]
        assert np.ascontiguousarray(arr, dtype="<f8").tobytes() in raw

    @pytest.mark.parametrize(
        "mutate, message",
        [
            (lambda b: b"XXXXXXXX" + b[8:], "magic"),
            (lambda b: b[:8] + struct.pack("<I", 99) + b[12:], "version"),
            (lambda b: b[:-5], "truncated"),
            (lambda b: b + b"\0", "trailing"),
        ],
    )
    def test_corruption_detected(self, mutate, message):
        config = small_config()
        model, _ = trained_state(config, steps=0)
        with pytest.raises(ckpt.CheckpointError, match=message):
            ckpt.decode_records(mutate(ckpt.encode(config, model)))

    def test_shape_mismatch(self, tmp_path):
        config = small_config()
        model, _ = trained_state(config, steps=0)
        _, records = ckpt.decode_records(ckpt.encode(config, model))
        with pytest.raises(ckpt.CheckpointError, match="shape mismatch"):
            ckpt.restore(config.replace(growth=16), records)

    def test_save_is_atomic(self, tmp_path):
        config = small_config()
        model, _ = trained_state(config, steps=0)
        path = tmp_path / "m.bin"
        ckpt.save(path, config, model)
        ckpt.save(path, config, model, iteration=5)
        assert not (tmp_path / "m.bin.tmp").exists()
        assert ckpt.load(path).iteration == 5
