import struct

import numpy as np
import pytest

from xvec.errors import ConfigError, DataError, FormatError
from xvec.model import (
    CHECKPOINT_MAGIC,
    FrameLayerSpec,
    Model,
    ModelConfig,
    build_model,
    load_model,
    save_model,
)
from xvec.pooling import MultiHeadPool, StatsPool, stats_pool
from xvec.train import check_model_gradients


def layers(*specs):
    return tuple(FrameLayerSpec(offsets=tuple(o), width=w) for o, w in specs)


def tiny_config(pooling="stats", **overrides):
    kwargs = dict(
        input_dim=4,
        frame_layers=layers(((-1, 0, 1), 6), ((-2, 0, 2), 6), ((0,), 8)),
        pooling=pooling,
        key_layer=2,
        compat=[5, 4],
        heads=2 if pooling == "multihead" else 1,
        utterance_layers=[7],
        num_speakers=3,
    )
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


FULL_SCALE = dict(
    input_dim=60,
    frame_layers=layers(
        ((-2, -1, 0, 1, 2), 512),
        ((-2, 0, 2), 512),
        ((-3, 0, 3), 512),
        ((0,), 512),
        ((0,), 1500),
    ),
    utterance_layers=[512, 512],
    num_speakers=100,
)


class TestModelConfig:
    def test_full_scale_shapes(self):
        cfg = ModelConfig(pooling="stats", **FULL_SCALE)
        model = build_model(cfg, seed=0)
        shapes = dict((n, a.shape) for n, a in model.state_arrays())
        assert shapes["frame0.weight"] == (512, 300)
        assert shapes["frame1.weight"] == (512, 1536)
        assert shapes["frame2.weight"] == (512, 1536)
        assert shapes["frame3.weight"] == (512, 512)
        assert shapes["frame4.weight"] == (1500, 512)
        assert shapes["utt0.weight"] == (512, 3000)
        assert shapes["utt1.weight"] == (512, 512)
        assert shapes["classifier.weight"] == (100, 512)

    def test_heads_must_divide_value_dim(self):
        cfg = ModelConfig(
            input_dim=20,
            frame_layers=layers(
                ((-2, -1, 0, 1, 2), 64), ((-2, 0, 2), 64), ((-3, 0, 3), 64),
                ((0,), 64), ((0,), 192),
            ),
            pooling="multihead",
            key_layer=4,
            compat=[100],
            heads=10,
            utterance_layers=[64, 64],
            num_speakers=32,
        )
        with pytest.raises(ConfigError, match="heads"):
            cfg.validate()

    def test_heads_must_divide_query_dim(self):
        cfg = tiny_config("multihead", compat=[5, 5], heads=2)
        with pytest.raises(ConfigError, match="heads"):
            cfg.validate()

    def test_unknown_key_is_named(self):
        d = tiny_config().to_dict()
        d["pooling_kind"] = "stats"
        with pytest.raises(ConfigError, match="pooling_kind"):
            ModelConfig.from_dict(d)

    def test_unknown_frame_layer_key_is_named(self):
        d = tiny_config().to_dict()
        d["frame_layers"][0]["with"] = 9
        with pytest.raises(ConfigError, match="with"):
            ModelConfig.from_dict(d)

    def test_round_trip(self):
        for pooling in ("stats", "attention", "multihead"):
            cfg = tiny_config(pooling)
            assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_key_layer_zero_means_last(self):
        assert tiny_config(key_layer=0).effective_key_layer == 3
        assert tiny_config(key_layer=2).effective_key_layer == 2

    def test_validation_names_fields(self):
        cases = [
            (dict(input_dim=0), "input_dim"),
            (dict(num_speakers=1), "num_speakers"),
            (dict(pooling="mean"), "pooling"),
            (dict(pooling="attention", compat=[]), "compat"),
            (dict(pooling="attention", heads=3), "heads"),
            (dict(pooling="multihead", key_layer=9), "key_layer"),
            (dict(embedding_tap=5), "embedding_tap"),
            (dict(utterance_layers=[]), "utterance_layers"),
        ]
        for overrides, field in cases:
            with pytest.raises(ConfigError, match=field):
                tiny_config(**overrides).validate()


class TestBuild:
    def test_same_seed_bit_identical(self):
        a = build_model(tiny_config("multihead"), seed=7)
        b = build_model(tiny_config("multihead"), seed=7)
        for (name, xa), (_, xb) in zip(a.state_arrays(), b.state_arrays()):
            np.testing.assert_array_equal(xa, xb, err_msg=name)

    def test_different_seed_differs(self):
        a = build_model(tiny_config(), seed=0)
        b = build_model(tiny_config(), seed=1)
        assert any(not np.array_equal(xa, xb)
                   for (_, xa), (_, xb) in zip(a.state_arrays(), b.state_arrays()))

    def test_fresh_state(self):
        model = build_model(tiny_config("multihead"), seed=3)
        for block in model.frame_blocks:
            np.testing.assert_array_equal(block.affine.bias.value, 0.0)
            np.testing.assert_array_equal(block.bn.gamma.value, 1.0)
            np.testing.assert_array_equal(block.bn.beta.value, 0.0)
            np.testing.assert_array_equal(block.bn.running_mean, 0.0)
            np.testing.assert_array_equal(block.bn.running_var, 1.0)

    def test_query_init_scale(self):
        # q ~ N(0, 1/d_q): sample variance of a 100-dim draw should sit near 0.01
        cfg = tiny_config("multihead", compat=[10, 100], heads=2)
        draws = [build_model(cfg, seed=s).pool.query.value for s in range(30)]
        var = np.concatenate(draws).var()
        assert 0.007 < var < 0.013

    def test_parameter_groups_cover_everything(self):
        model = build_model(tiny_config("multihead"), seed=0)
        groups = model.parameter_groups()
        assert len(groups["theta_f"]) == 3 * 4
        assert len(groups["theta_k"]) == 2 * 4
        assert len(groups["query"]) == 1
        assert len(groups["theta_u"]) == 2 * 2
        stats_groups = build_model(tiny_config(), seed=0).parameter_groups()
        assert stats_groups["theta_k"] == [] and stats_groups["query"] == []


class TestForward:
    def test_posterior_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        for pooling in ("stats", "attention", "multihead"):
            model = build_model(tiny_config(pooling), seed=1)
            trace = model.forward(rng.standard_normal((9, 4)))
            assert trace.posteriors.shape == (1, 3)
            np.testing.assert_allclose(trace.posteriors.sum(), 1.0, atol=1e-6)

    def test_stats_trace_has_no_attention(self):
        model = build_model(tiny_config(), seed=0)
        trace = model.forward(np.zeros((4, 4)))
        assert trace.attention is None
        assert trace.pooled.shape == (16,)

    def test_attention_trace_shape(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((6, 4))
        trace = build_model(tiny_config("attention"), seed=0).forward(x)
        assert trace.attention.shape == (1, 6)
        trace = build_model(tiny_config("multihead"), seed=0).forward(x)
        assert trace.attention.shape == (2, 6)
        np.testing.assert_allclose(trace.attention.sum(axis=1), 1.0, atol=1e-9)

    def test_pooling_swap_keeps_shapes(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((5, 4))
        dims = set()
        for pooling in ("stats", "attention", "multihead"):
            trace = build_model(tiny_config(pooling), seed=0).forward(x)
            dims.add((trace.pooled.shape, trace.posteriors.shape))
        assert len(dims) == 1

    def test_wrong_input_dim(self):
        model = build_model(tiny_config(), seed=0)
        with pytest.raises(DataError, match="columns"):
            model.forward(np.zeros((3, 5)))

    def test_infer_is_batch_independent(self):
        model = build_model(tiny_config("multihead"), seed=4)
        rng = np.random.default_rng(4)
        x = rng.standard_normal((8, 4))
        full = model.forward(x).frame_activations[0]
        half = model.forward(x[:4]).frame_activations[0]
        np.testing.assert_array_equal(full[:3], half[:3])  # splice edge differs at row 3

    def test_duplicated_frames_stats_invariance(self):
        # point-context layers so splicing cannot see the duplication seam
        cfg = tiny_config(frame_layers=layers(((0,), 6), ((0,), 8)), key_layer=0)
        model = build_model(cfg, seed=5)
        x = np.random.default_rng(5).standard_normal((7, 4))
        once = model.forward(x).pooled
        twice = model.forward(np.repeat(x, 2, axis=0)).pooled
        np.testing.assert_allclose(twice, once, atol=1e-9)

    def test_key_layer_last_means_keys_are_values(self):
        x = np.random.default_rng(6).standard_normal((5, 4))
        explicit = build_model(tiny_config("multihead", key_layer=3), seed=2)
        default = build_model(tiny_config("multihead", key_layer=0), seed=2)
        np.testing.assert_array_equal(
            explicit.forward(x).posteriors, default.forward(x).posteriors
        )
        keys = explicit.forward(x).frame_activations[2]
        values = explicit.forward(x).frame_activations[-1]
        np.testing.assert_array_equal(keys, values)

    def test_small_query_approaches_stats_pooling(self):
        # as the query shrinks the weights flatten and attention meets the
        # stats path; the stock initialization only bounds the gap loosely
        rng = np.random.default_rng(7)
        x = rng.standard_normal((40, 4))
        for pooling in ("attention", "multihead"):
            model = build_model(tiny_config(pooling), seed=7)
            model.pool.query.value *= 1e-3
            trace = model.forward(x)
            reference = stats_pool(trace.frame_activations[-1])
            rel = np.abs(trace.pooled - reference) / np.maximum(np.abs(reference), 1e-8)
            assert rel.max() < 1e-2
            assert trace.attention.max() < 0.5  # nothing collapses to one frame

    def test_fresh_attention_does_not_collapse(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((40, 4))
        for seed in range(5):
            trace = build_model(tiny_config("attention"), seed=seed).forward(x)
            assert trace.attention.max() < 0.5


class TestEmbedding:
    def test_embedding_is_preactivation(self):
        model = build_model(tiny_config(utterance_layers=[7, 5]), seed=0)
        x = np.random.default_rng(0).standard_normal((6, 4))
        trace = model.forward(x)
        emb = model.extract_embedding(x)
        assert emb.shape == (7,)
        np.testing.assert_array_equal(emb, trace.utterance_preactivations[0])
        affine = model.utt_affines[0]
        np.testing.assert_allclose(
            emb, affine.weight.value @ trace.pooled + affine.bias.value, rtol=1e-12
        )

    def test_embedding_tap_selects_layer(self):
        model = build_model(tiny_config(utterance_layers=[7, 5], embedding_tap=1), seed=0)
        x = np.random.default_rng(1).standard_normal((6, 4))
        emb = model.extract_embedding(x)
        assert emb.shape == (5,)
        np.testing.assert_array_equal(emb, model.forward(x).utterance_preactivations[1])

    def test_repeatable(self):
        model = build_model(tiny_config("multihead"), seed=0)
        x = np.random.default_rng(2).standard_normal((5, 4))
        np.testing.assert_array_equal(model.extract_embedding(x), model.extract_embedding(x))


class TestGradcheckFullModel:
    @pytest.mark.parametrize("pooling", ["stats", "attention", "multihead"])
    def test_tiny_model(self, pooling):
        model = build_model(tiny_config(pooling), seed=11)
        rng = np.random.default_rng(11)
        report = check_model_gradients(model, rng.standard_normal((5, 4)), label=2)
        assert report.passed, f"{pooling}: worst {report.worst} at {report.max_rel_err:.3e}"
        assert report.max_rel_err < 1e-4


class TestBatchedForward:
    def test_replicated_chunks_match_single_forward(self):
        for pooling in ("stats", "attention", "multihead"):
            model = build_model(tiny_config(pooling), seed=12)
            chunk = np.random.default_rng(12).standard_normal((6, 4))
            single = model.forward(chunk, train=True).posteriors[0]
            batched, _ = model.forward_batch(np.repeat(chunk[None], 3, axis=0), train=True)
            for row in batched:
                np.testing.assert_allclose(row, single, rtol=1e-9)

    def test_rejects_wrong_shapes(self):
        model = build_model(tiny_config(), seed=0)
        with pytest.raises(DataError, match="3-D"):
            model.forward_batch(np.zeros((5, 4)))
        with pytest.raises(DataError, match="columns"):
            model.forward_batch(np.zeros((2, 5, 3)))

    @pytest.mark.parametrize("pooling", ["stats", "attention", "multihead"])
    def test_gradients_match_finite_differences(self, pooling):
        from helpers import assert_grads_close, numeric_grad
        from xvec.nn import cross_entropy, cross_entropy_backward

        model = build_model(tiny_config(pooling), seed=13)
        feats = np.random.default_rng(13).standard_normal((3, 5, 4))
        labels = np.array([0, 2, 1])
        running = {n: a for n, a in model.state_arrays() if "running" in n}
        saved = {n: a.copy() for n, a in running.items()}

        def loss():
            for n, a in running.items():
                a[...] = saved[n]
            posteriors, _ = model.forward_batch(feats, train=True)
            return float(cross_entropy(posteriors, labels))

        model.zero_grad()
        posteriors, cache = model.forward_batch(feats, train=True)
        d_input = model.backward_batch(cross_entropy_backward(posteriors, labels), cache)
        for n, a in running.items():
            a[...] = saved[n]
        for p in model.parameters():
            assert_grads_close(p.grad, numeric_grad(loss, p.value), what=p.name)
        assert_grads_close(d_input, numeric_grad(loss, feats), what="input")


class TestCheckpoint:
    def _model(self, tmp_path, pooling="multihead"):
        model = build_model(tiny_config(pooling), seed=9)
        # perturb running stats so the round trip covers non-initial state
        model.frame_blocks[0].bn.running_mean += 0.25
        path = tmp_path / "m.xvm"
        save_model(model, path)
        return model, path

    def test_round_trip_values(self, tmp_path):
        for pooling in ("stats", "attention", "multihead"):
            model, path = self._model(tmp_path, pooling)
            loaded = load_model(path)
            assert loaded.config == model.config
            for (name, xa), (_, xb) in zip(model.state_arrays(), loaded.state_arrays()):
                np.testing.assert_array_equal(xa, xb, err_msg=name)

    def test_round_trip_bytes(self, tmp_path):
        _, path = self._model(tmp_path)
        again = tmp_path / "again.xvm"
        save_model(load_model(path), again)
        assert path.read_bytes() == again.read_bytes()

    def test_forward_agrees_after_reload(self, tmp_path):
        model, path = self._model(tmp_path)
        x = np.random.default_rng(3).standard_normal((6, 4))
        np.testing.assert_array_equal(
            model.forward(x).posteriors, load_model(path).forward(x).posteriors
        )

    def test_bad_magic(self, tmp_path):
        _, path = self._model(tmp_path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XVM9"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="byte 0"):
            load_model(path)

    def test_truncated_tensor(self, tmp_path):
        _, path = self._model(tmp_path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(FormatError, match="truncated"):
            load_model(path)

    def test_trailing_bytes(self, tmp_path):
        _, path = self._model(tmp_path)
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(FormatError, match="trailing"):
            load_model(path)

    def test_count_mismatch(self, tmp_path):
        _, path = self._model(tmp_path)
        blob = bytearray(path.read_bytes())
        (config_len,) = struct.unpack_from("<Q", blob, 4)
        struct.pack_into("<Q", blob, 12 + config_len, 999)
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="999"):
            load_model(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "short.xvm"
        path.write_bytes(CHECKPOINT_MAGIC + b"\x01")
        with pytest.raises(FormatError, match="magic"):
            load_model(path)
