import struct

import numpy as np
import pytest

from echolocate.audio import MelSpectrogram
from echolocate.transformer import (
    AstConfig,
    AstWeights,
    ClassScores,
    PatchSequence,
    ast_forward,
    ast_logits,
    default_labels,
    encode,
    load_labels,
    patchify,
)

from reference_ast import reference_forward

SMALL = AstConfig(n_mels=32, embed_dim=12, layers=2, heads=3, mlp_ratio=2, max_time_patches=4,
                  labels=("a", "b", "c", "d"))


def mel(values):
    return MelSpectrogram(np.asarray(values, dtype=float))


def with_biases(w, rng, scale=0.05):
    """Random weights with non-trivial biases and LayerNorm gains, so every parameter matters."""
    w = AstWeights(w)
    for k in w:
        if k.endswith("bias") or k.endswith("ln1.weight") or k.endswith("ln2.weight") or k == "norm.weight":
            w[k] = w[k] + rng.normal(0, scale, w[k].shape)
    return w


class TestConfig:
    def test_defaults(self):
        cfg = AstConfig()
        assert (cfg.patch_freq, cfg.patch_time, cfg.embed_dim, cfg.layers, cfg.heads) == (16, 16, 192, 2, 3)
        assert cfg.n_classes == 50 == len(default_labels())

    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            AstConfig(embed_dim=10, heads=3)

    def test_labels_file(self, tmp_path):
        (tmp_path / "l.txt").write_text("dog\n\ncat\n rain \n")
        assert load_labels(tmp_path / "l.txt") == ("dog", "cat", "rain")


class TestPatchify:
    def test_128_by_100(self):
        seq = patchify(mel(np.ones((128, 100))))
        assert len(seq) == 56 == 8 * 7
        assert seq.patches.shape == (56, 256)
        # the last time column is 100 - 96 = 4 frames of data, the rest padding
        last = seq.patches[6].reshape(16, 16)
        assert np.all(last[:, :4] == 1) and np.all(last[:, 4:] == 0)

    def test_exact_tiling(self):
        assert len(patchify(mel(np.ones((128, 16))))) == 8

    def test_zero_mel(self):
        assert not np.any(patchify(mel(np.zeros((128, 40)))).patches)

    def test_short_input_single_column(self):
        seq = patchify(mel(np.ones((128, 5))))
        assert len(seq) == 8 and set(seq.cols) == {0}

    def test_freq_major_order(self):
        values = np.arange(128 * 32, dtype=float).reshape(128, 32)
        seq = patchify(mel(values))
        assert list(seq.rows[:4]) == [0, 0, 1, 1] and list(seq.cols[:4]) == [0, 1, 0, 1]
        np.testing.assert_array_equal(seq.patches[3].reshape(16, 16), values[16:32, 16:32])

    def test_band_count_checked(self):
        with pytest.raises(ValueError):
            patchify(mel(np.ones((64, 20))))


class TestForward:
    def test_zero_weights_give_half(self):
        cfg = AstConfig()
        seq = patchify(mel(np.random.default_rng(0).standard_normal((128, 100))), cfg)
        scores = ast_forward(seq, AstWeights.zeros(cfg), cfg)
        assert np.all(scores.values == 0.5)

    def test_matches_reference_small(self, rng):
        values = rng.standard_normal((32, 40))
        w = with_biases(AstWeights.random(SMALL, seed=3, scale=0.3), rng)
        got = ast_forward(patchify(mel(values), SMALL), w, SMALL).values
        np.testing.assert_allclose(got, reference_forward(values, w, SMALL), atol=1e-5)

    @pytest.mark.slow
    def test_matches_reference_default_dims(self, rng):
        cfg = AstConfig(labels=("x", "y", "z"))
        values = rng.standard_normal((128, 20))
        w = with_biases(AstWeights.random(cfg, seed=9, scale=0.05), rng)
        got = ast_forward(patchify(mel(values), cfg), w, cfg).values
        np.testing.assert_allclose(got, reference_forward(values, w, cfg), atol=1e-5)

    def test_deterministic(self, rng):
        seq = patchify(mel(rng.standard_normal((32, 30))), SMALL)
        w = AstWeights.random(SMALL, seed=1)
        a = ast_forward(seq, w, SMALL).values
        b = ast_forward(seq, w, SMALL).values
        assert a.tobytes() == b.tobytes()

    def test_scores_strictly_inside_unit_interval(self, rng):
        w = AstWeights.random(SMALL, seed=2)
        w["head.bias"] = np.array([1e6, -1e6, 0.0, 50.0])
        s = ast_forward(patchify(mel(rng.standard_normal((32, 20))), SMALL), w, SMALL)
        assert np.all(s.values > 0) and np.all(s.values < 1)
        assert s.label == "a"

    def test_label_stable_under_logit_rescaling(self, rng):
        seq = patchify(mel(rng.standard_normal((32, 30))), SMALL)
        w = AstWeights.random(SMALL, seed=4, scale=0.5)
        base = ast_forward(seq, w, SMALL).label
        for factor in (0.01, 3.0, 1000.0):
            scaled = AstWeights(w)
            scaled["head.weight"] = w["head.weight"] * factor
            scaled["head.bias"] = w["head.bias"] * factor
            assert ast_forward(seq, scaled, SMALL).label == base

    def test_attention_rows_sum_to_one(self, rng):
        seq = patchify(mel(rng.standard_normal((32, 50))), SMALL)
        attn = []
        encode(seq, AstWeights.random(SMALL, seed=5, scale=0.5), SMALL, attention=attn)
        assert len(attn) == SMALL.layers
        for a in attn:
            assert a.shape == (SMALL.heads, len(seq) + 1, len(seq) + 1)
            assert np.max(np.abs(a.sum(axis=-1) - 1.0)) < 1e-6

    def test_shape_mismatch_rejected(self, rng):
        w = AstWeights.random(SMALL)
        w["head.bias"] = np.zeros(7)
        with pytest.raises(ValueError):
            ast_logits(patchify(mel(np.zeros((32, 16))), SMALL), w, SMALL)

    def test_non_finite_rejected(self):
        w = AstWeights.random(SMALL)
        w["cls"] = np.full(SMALL.embed_dim, np.nan)
        with pytest.raises(ValueError):
            w.validate(SMALL)

    def test_too_long_input_rejected(self):
        with pytest.raises(ValueError):
            ast_forward(patchify(mel(np.zeros((32, 16 * 5))), SMALL), AstWeights.random(SMALL), SMALL)


class TestPermutation:
    def _shuffled_contents(self, seq, order):
        # patch contents move; grid coordinates (and so positional embeddings) stay put
        return PatchSequence(seq.patches[order], seq.rows, seq.cols)

    def test_invariant_without_positions(self, rng):
        seq = patchify(mel(rng.standard_normal((32, 60))), SMALL)
        w = AstWeights.random(SMALL, seed=6, scale=0.5)
        w["pos"] = np.zeros_like(w["pos"])
        base = ast_logits(seq, w, SMALL)
        for k in range(5):
            order = np.random.default_rng(k).permutation(len(seq))
            np.testing.assert_allclose(ast_logits(self._shuffled_contents(seq, order), w, SMALL),
                                       base, rtol=0, atol=1e-12)

    def test_sensitive_with_positions(self, rng):
        seq = patchify(mel(rng.standard_normal((32, 60))), SMALL)
        w = AstWeights.random(SMALL, seed=6, scale=0.5)
        base = ast_logits(seq, w, SMALL)
        order = np.random.default_rng(0).permutation(len(seq))
        moved = ast_logits(self._shuffled_contents(seq, order), w, SMALL)
        assert np.max(np.abs(moved - base)) > 1e-6

    def test_reordering_whole_tokens_is_harmless(self, rng):
        seq = patchify(mel(rng.standard_normal((32, 60))), SMALL)
        w = AstWeights.random(SMALL, seed=7, scale=0.5)
        order = np.random.default_rng(1).permutation(len(seq))
        np.testing.assert_allclose(ast_logits(seq.permuted(order), w, SMALL), ast_logits(seq, w, SMALL),
                                   atol=1e-12)


class TestWeightFile:
    def test_round_trip(self, tmp_path):
        w = AstWeights.random(SMALL, seed=8)
        w.save(tmp_path / "w.bin", SMALL)
        back, cfg = AstWeights.load(tmp_path / "w.bin")
        assert cfg == SMALL
        for k in w:
            np.testing.assert_array_equal(back[k], w[k].astype(np.float32))

    def test_layout(self, tmp_path):
        w = AstWeights.zeros(SMALL)
        w.save(tmp_path / "w.bin", SMALL)
        blob = (tmp_path / "w.bin").read_bytes()
        assert blob[:4] == b"ECHW"
        version, hlen = struct.unpack("<II", blob[4:12])
        n_values = sum(int(np.prod(s)) for s in SMALL.shapes().values())
        assert version == 1 and len(blob) == 12 + hlen + 4 * n_values

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(ValueError):
            AstWeights.load(tmp_path / "x.bin")

    def test_truncated(self, tmp_path):
        AstWeights.zeros(SMALL).save(tmp_path / "w.bin", SMALL)
        blob = (tmp_path / "w.bin").read_bytes()
        (tmp_path / "t.bin").write_bytes(blob[:-8])
        with pytest.raises(ValueError):
            AstWeights.load(tmp_path / "t.bin")


class TestClassScores:
    def test_to_dict_top(self):
        s = ClassScores(("a", "b", "c"), np.array([0.2, 0.9, 0.5]), "b", 1.23)
        d = s.to_dict(top=2)
        assert d["label"] == "b" and d["timestamp_s"] == 1.23
        assert [t["label"] for t in d["top"]] == ["b", "c"]
