"""Unit tests for the routed low-rank adapter layer."""

import json
import math
from pathlib import Path

import numpy as np
import pytest

from loralab import adapter
from loralab.adapter import (
    CheckpointDataError,
    CheckpointShapeError,
    CheckpointVersionError,
    Gradients,
    ILoRAConfig,
    ILoRALayer,
    TokenBatch,
    backward,
    drop_head,
    forward,
    gradient_check,
    init,
    load_checkpoint,
    param_count,
    plain_lora,
    save_checkpoint,
    uniform_tags,
)
from loralab.numkit import Rng, ShapeError, matmul

FIXTURE = Path(__file__).parent / "data" / "one_by_one_checkpoint.json"


def small_config(**overrides):
    base = dict(h=8, d=6, r=3, n=3, alpha=6.0, dropout_p=0.0)
    base.update(overrides)
    return ILoRAConfig(**base)


def random_batch(rng, length, width, task_id=0):
    return TokenBatch(
        H=rng.normal(length, width), segment_tags=uniform_tags(length), task_id=task_id
    )


class TestConfigValidation:
    def test_rank_bound_names_field(self):
        with pytest.raises(ValueError, match="r must satisfy"):
            ILoRAConfig(h=4, d=4, r=5, n=1, alpha=1.0)

    def test_alpha_positive(self):
        with pytest.raises(ValueError, match="alpha"):
            ILoRAConfig(h=4, d=4, r=2, n=1, alpha=0.0)

    def test_dropout_range(self):
        with pytest.raises(ValueError, match="dropout_p"):
            ILoRAConfig(h=4, d=4, r=2, n=1, alpha=1.0, dropout_p=1.0)

    def test_head_count_positive(self):
        with pytest.raises(ValueError, match="n must be"):
            ILoRAConfig(h=4, d=4, r=2, n=0, alpha=1.0)


class TestInit:
    def test_forward_equals_frozen_path_at_init(self):
        for seed in range(5):
            layer = init(small_config(), Rng(seed))
            batch = random_batch(Rng(seed, stream=1), 5, 8)
            out, _, _ = forward(layer, batch)
            assert np.array_equal(out, matmul(batch.H, layer.W0.T))

    def test_same_seed_bit_identical(self):
        a = init(small_config(), Rng(3))
        b = init(small_config(), Rng(3))
        assert np.array_equal(a.W0, b.W0)
        assert np.array_equal(a.A, b.A)
        assert np.array_equal(a.Wr, b.Wr)
        for x, y in zip(a.B, b.B):
            assert np.array_equal(x, y)

    def test_different_seeds_differ(self):
        a = init(small_config(), Rng(0))
        b = init(small_config(), Rng(1))
        assert np.any(a.A != b.A)

    def test_b_heads_start_at_zero(self):
        layer = init(small_config(), Rng(2))
        for b in layer.B:
            assert np.array_equal(b, np.zeros_like(b))


class TestForward:
    def test_single_head_equals_plain_lora_formula(self):
        rng = Rng(10)
        layer = plain_lora(small_config(n=1), rng)
        layer.B[0] += rng.normal(6, 3)
        batch = random_batch(rng, 7, 8)
        out, trace, _ = forward(layer, batch)
        c = layer.config.scaling
        oracle = matmul(batch.H, layer.W0.T) + c * matmul(
            matmul(batch.H, layer.A.T), layer.B[0].T
        )
        assert np.max(np.abs(out - oracle)) <= 1e-12
        assert np.array_equal(trace.S, np.ones((7, 1)))

    def test_zero_router_gives_uniform_gates(self):
        rng = Rng(11)
        layer = init(small_config(), rng)
        layer.Wr = np.zeros_like(layer.Wr)
        for b in layer.B:
            b += rng.normal(6, 3)
        batch = random_batch(rng, 5, 8)
        out, trace, _ = forward(layer, batch)
        np.testing.assert_allclose(trace.S, 1.0 / 3.0, atol=1e-15)
        c = layer.config.scaling
        p = matmul(batch.H, layer.A.T)
        mean_u = sum(matmul(p, b.T) for b in layer.B)
        oracle = matmul(batch.H, layer.W0.T) + (c / 3.0) * mean_u
        assert np.max(np.abs(out - oracle)) <= 1e-13

    def test_matches_scalar_loop_oracle(self):
        # Independent reimplementation with plain Python loops, eval mode.
        rng = Rng(12)
        cfg = ILoRAConfig(h=3, d=2, r=2, n=2, alpha=4.0)
        layer = init(cfg, rng)
        for b in layer.B:
            b += rng.normal(2, 2)
        batch = random_batch(rng, 2, 3)
        out, trace, _ = forward(layer, batch)

        H = batch.H
        L, h, d, r, n = 2, 3, 2, 2, 2
        c = cfg.alpha / cfg.r
        oracle = np.zeros((L, d))
        for t in range(L):
            p = [sum(H[t, k] * layer.A[j, k] for k in range(h)) for j in range(r)]
            g = [sum(p[j] * layer.Wr[i, j] for j in range(r)) for i in range(n)]
            m = max(g)
            e = [math.exp(x - m) for x in g]
            s = [x / sum(e) for x in e]
            for dd in range(d):
                base = sum(H[t, k] * layer.W0[dd, k] for k in range(h))
                delta = 0.0
                for i in range(n):
                    u = sum(p[j] * layer.B[i][dd, j] for j in range(r))
                    delta += s[i] * u
                oracle[t, dd] = base + c * delta
            for i in range(n):
                assert abs(trace.S[t, i] - s[i]) <= 1e-13
        assert np.max(np.abs(out - oracle)) <= 1e-13

    def test_routing_rows_sum_to_one(self):
        rng = Rng(13)
        layer = init(small_config(), rng)
        for b in layer.B:
            b += rng.normal(6, 3)
        layer.Wr = rng.normal(3, 3)
        for _ in range(5):
            _, trace, _ = forward(layer, random_batch(rng, 9, 8))
            np.testing.assert_allclose(trace.S.sum(axis=1), 1.0, atol=1e-12)

    def test_width_mismatch(self):
        layer = init(small_config(), Rng(0))
        with pytest.raises(ShapeError, match="h=8"):
            forward(layer, random_batch(Rng(1), 4, 5))

    def test_trace_carries_metadata(self):
        layer = init(small_config(), Rng(0))
        batch = random_batch(Rng(1), 6, 8, task_id=2)
        _, trace, _ = forward(layer, batch)
        assert trace.task_id == 2
        assert trace.segment_tags == batch.segment_tags


class TestDropout:
    def test_eval_mode_needs_no_rng_and_is_deterministic(self):
        layer = init(small_config(dropout_p=0.4), Rng(0))
        batch = random_batch(Rng(1), 6, 8)
        a, _, _ = forward(layer, batch)
        b, _, _ = forward(layer, batch)
        assert np.array_equal(a, b)

    def test_train_mode_requires_rng(self):
        layer = init(small_config(dropout_p=0.4), Rng(0))
        with pytest.raises(ValueError, match="rng"):
            forward(layer, random_batch(Rng(1), 6, 8), train_mode=True)

    def test_inverted_scaling_mask(self):
        layer = init(small_config(dropout_p=0.5), Rng(0))
        layer.B[0] += Rng(9).normal(6, 3)
        batch = random_batch(Rng(1), 64, 8)
        _, _, cache = forward(layer, batch, train_mode=True, rng=Rng(2))
        assert set(np.unique(cache.mask)) <= {0.0, 2.0}
        # the frozen path is computed from raw H, not the dropped copy
        out, _, _ = forward(layer, batch, train_mode=True, rng=Rng(2))
        zero_rows = np.where((cache.mask == 0).all(axis=1))[0]
        for t in zero_rows:
            np.testing.assert_allclose(out[t], matmul(batch.H, layer.W0.T)[t], atol=1e-12)

    def test_base_path_uses_raw_tokens(self):
        # with all heads zero, dropout must not change the output at all
        layer = init(small_config(dropout_p=0.5), Rng(0))
        batch = random_batch(Rng(1), 16, 8)
        out, _, _ = forward(layer, batch, train_mode=True, rng=Rng(2))
        assert np.array_equal(out, matmul(batch.H, layer.W0.T))


class TestBackward:
    def trained_like_layer(self, seed, cfg=None):
        rng = Rng(seed)
        layer = init(cfg or small_config(), rng)
        for b in layer.B:
            b += rng.normal(layer.config.d, layer.config.r, std=0.5)
        return layer, rng

    def test_zero_upstream_gradient(self):
        layer, rng = self.trained_like_layer(0)
        batch = random_batch(rng, 4, 8)
        _, _, cache = forward(layer, batch)
        g = backward(layer, cache, np.zeros((4, 6)))
        assert np.array_equal(g.dA, np.zeros_like(layer.A))
        assert np.array_equal(g.dWr, np.zeros_like(layer.Wr))
        assert np.array_equal(g.dH, np.zeros_like(batch.H))
        for db in g.dB:
            assert not db.any()

    def test_single_head_router_gradient_is_zero(self):
        layer, rng = self.trained_like_layer(1, small_config(n=1))
        batch = random_batch(rng, 4, 8)
        _, _, cache = forward(layer, batch)
        g = backward(layer, cache, rng.normal(4, 6))
        assert np.array_equal(g.dWr, np.zeros_like(layer.Wr))

    def test_gradient_check_passes(self):
        report = gradient_check(seed=0, instances=3)
        assert report["ok"], report["failures"]
        for entry in report["worst"].values():
            assert entry["max_rel_err"] <= 1e-6

    def test_gradient_check_catches_sabotage(self):
        def broken(layer, cache, dy):
            g = backward(layer, cache, dy)
            return Gradients(dA=g.dA * 1.01, dB=g.dB, dWr=g.dWr, dH=g.dH)

        report = gradient_check(seed=0, instances=2, backward_fn=broken)
        assert not report["ok"]
        assert any(f.startswith("A") for f in report["failures"])

    def test_gradients_through_fixed_dropout_mask(self):
        # re-seeding the rng before every forward pins the Bernoulli mask,
        # which makes the loss a fixed differentiable function
        from loralab import numkit

        cfg = small_config(dropout_p=0.3)
        layer, rng = self.trained_like_layer(2, cfg)
        H = rng.normal(4, 8)
        weights = rng.normal(4, 6)
        tags = uniform_tags(4)

        _, _, cache = forward(
            layer, TokenBatch(H=H, segment_tags=tags), train_mode=True, rng=Rng(77)
        )
        grads = backward(layer, cache, weights)

        def loss_h(hv):
            out, _, _ = forward(
                layer, TokenBatch(H=hv, segment_tags=tags), train_mode=True, rng=Rng(77)
            )
            return float(np.sum(weights * out))

        fd = numkit.finite_diff_grad(loss_h, H)
        scale = max(np.max(np.abs(fd)), 1e-8)
        assert np.max(np.abs(grads.dH - fd)) / scale <= 1e-6

        def loss_a(av):
            trial = layer.copy()
            trial.A = av
            out, _, _ = forward(
                trial, TokenBatch(H=H, segment_tags=tags), train_mode=True, rng=Rng(77)
            )
            return float(np.sum(weights * out))

        fd_a = numkit.finite_diff_grad(loss_a, layer.A)
        scale = max(np.max(np.abs(fd_a)), 1e-8)
        assert np.max(np.abs(grads.dA - fd_a)) / scale <= 1e-6

    def test_stale_cache_rejected(self):
        layer, rng = self.trained_like_layer(3)
        batch = random_batch(rng, 4, 8)
        _, _, cache = forward(layer, batch)
        layer.set_trainable([p.copy() for p in layer.trainable()])
        with pytest.raises(ValueError, match="stale"):
            backward(layer, cache, np.zeros((4, 6)))


class TestDropHead:
    def test_drop_all_heads_reproduces_frozen_path(self):
        rng = Rng(4)
        layer = init(small_config(), rng)
        for b in layer.B:
            b += rng.normal(6, 3)
        batch = random_batch(rng, 5, 8)
        for i in range(3):
            layer = drop_head(layer, i)
        out, _, _ = forward(layer, batch)
        assert np.array_equal(out, matmul(batch.H, layer.W0.T))

    def test_remaining_term_identity(self):
        rng = Rng(5)
        layer = init(small_config(n=2), rng)
        for b in layer.B:
            b += rng.normal(6, 3)
        batch = random_batch(rng, 5, 8)
        dropped = drop_head(layer, 1)
        out, trace, _ = forward(dropped, batch)
        c = layer.config.scaling
        p = matmul(batch.H, layer.A.T)
        oracle = matmul(batch.H, layer.W0.T) + c * (
            trace.S[:, 0:1] * matmul(p, layer.B[0].T)
        )
        assert np.max(np.abs(out - oracle)) <= 1e-13

    def test_router_untouched_and_original_intact(self):
        rng = Rng(6)
        layer = init(small_config(), rng)
        layer.B[1] += rng.normal(6, 3)
        dropped = drop_head(layer, 1)
        assert np.array_equal(dropped.Wr, layer.Wr)
        assert layer.B[1].any()
        assert not dropped.B[1].any()

    def test_index_out_of_range(self):
        layer = init(small_config(), Rng(0))
        with pytest.raises(IndexError):
            drop_head(layer, 3)


class TestParamCount:
    def test_arithmetic(self):
        layer = init(small_config(), Rng(0))
        assert param_count(layer) == 24 + 54 + 9

    def test_single_head_halves_b_budget(self):
        one = init(small_config(n=1), Rng(0))
        two = init(small_config(n=2), Rng(0))
        c = one.config
        b_one = param_count(one) - c.r * c.h - 1 * c.r
        b_two = param_count(two) - c.r * c.h - 2 * c.r
        assert b_two == 2 * b_one

    def test_matches_stored_entries(self):
        layer = init(small_config(n=4), Rng(1))
        assert param_count(layer) == sum(p.size for p in layer.trainable())


class TestCheckpoints:
    def test_round_trip_bit_exact(self, tmp_path):
        for seed in range(3):
            rng = Rng(seed)
            layer = init(small_config(n=2), rng)
            for b in layer.B:
                b += rng.normal(6, 3)
            path = tmp_path / f"ckpt_{seed}.json"
            save_checkpoint(layer, path)
            loaded = load_checkpoint(path)
            assert loaded.config == layer.config
            assert np.array_equal(loaded.W0, layer.W0)
            assert np.array_equal(loaded.A, layer.A)
            assert np.array_equal(loaded.Wr, layer.Wr)
            for x, y in zip(loaded.B, layer.B):
                assert np.array_equal(x, y)

    def test_handwritten_fixture_loads_exact_values(self):
        layer = load_checkpoint(FIXTURE)
        assert layer.config == ILoRAConfig(h=1, d=1, r=1, n=1, alpha=2.0)
        assert layer.W0[0, 0] == 0.5
        assert layer.A[0, 0] == -1.25
        assert layer.B[0][0, 0] == 3.0
        assert layer.Wr[0, 0] == 0.0625

    def test_version_mismatch(self, tmp_path):
        doc = json.loads(FIXTURE.read_text())
        doc["version"] = 2
        p = tmp_path / "v2.json"
        p.write_text(json.dumps(doc))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(p)

    def test_shape_mismatch(self, tmp_path):
        doc = json.loads(FIXTURE.read_text())
        doc["tensors"][1]["rows"] = 2
        p = tmp_path / "badshape.json"
        p.write_text(json.dumps(doc))
        with pytest.raises(CheckpointShapeError):
            load_checkpoint(p)

    def test_corrupt_base64(self, tmp_path):
        doc = json.loads(FIXTURE.read_text())
        doc["tensors"][0]["data_b64"] = "!!!not-base64!!!"
        p = tmp_path / "badb64.json"
        p.write_text(json.dumps(doc))
        with pytest.raises(CheckpointDataError):
            load_checkpoint(p)

    def test_truncated_payload(self, tmp_path):
        doc = json.loads(FIXTURE.read_text())
        doc["tensors"][0]["data_b64"] = "AAAA"
        p = tmp_path / "short.json"
        p.write_text(json.dumps(doc))
        with pytest.raises(CheckpointDataError, match="bytes"):
            load_checkpoint(p)

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "garbage.json"
        p.write_text("{not json")
        with pytest.raises(CheckpointDataError):
            load_checkpoint(p)

    def test_missing_tensor(self, tmp_path):
        doc = json.loads(FIXTURE.read_text())
        doc["tensors"] = doc["tensors"][:-1]
        p = tmp_path / "missing.json"
        p.write_text(json.dumps(doc))
        with pytest.raises(CheckpointDataError, match="tensor set"):
            load_checkpoint(p)


class TestTokenBatch:
    def test_tag_length_mismatch(self):
        with pytest.raises(ShapeError):
            TokenBatch(H=np.zeros((3, 2)), segment_tags=("text",))

    def test_unknown_tag(self):
        with pytest.raises(ValueError, match="segment tag"):
            TokenBatch(H=np.zeros((1, 2)), segment_tags=("smell",))

    def test_uniform_tags_partition(self):
        tags = uniform_tags(8)
        assert len(tags) == 8
        assert tags.count("visual") == 3
        assert tags.count("audio") == 3
        assert tags.count("text") == 2
