import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import placement_ssl.training as training
from placement_ssl.config import load_config
from placement_ssl.data import PairRecord, build_splits, init_pseudo_labels
from placement_ssl.model import ModelStack
from placement_ssl.scene import SceneSpec, generate_scene, oracle_labels, sample_placements
from placement_ssl.training import (
    DivergenceError,
    LossWeights,
    bce,
    correct_labels,
    encode_batch,
    loss_sup,
    make_state,
    mix_labels,
    run_ssl,
    sample_pairs,
    train_step,
)

SPEC = SceneSpec()


def labeled(n, k, start=0, domain="S"):
    rng = np.random.default_rng(start)
    out = []
    for i in range(n):
        s = generate_scene(SPEC, start + i)
        b = sample_placements(s, k, rng, SPEC.sampling_range)
        out.append(PairRecord(start + i, s, b, oracle_labels(s, b), domain))
    return out


def tiny_config(**kw):
    base = dict(n_s=6, n_t=6, n_test=4, k_s=4, k_t=6, k_test=6, pretrain_epochs=1, correction_period=1,
                rounds=2, pairs_per_batch=2, feature_dim=8, resolution=16)
    base.update(kw)
    return load_config(**base)


def tiny_split(cfg):
    return build_splits(cfg.scene_spec(), cfg.n_s, cfg.n_t, cfg.n_test, cfg.novel_categories, cfg.seed,
                        cfg.k_s, cfg.k_t, cfg.k_test)


class TestLabelCorrection:
    def test_single_update(self):
        assert mix_labels([1.0], [0.0], 0.4)[0] == 0.4
        assert mix_labels([0.0], [1.0], 0.4)[0] == pytest.approx(0.6, abs=1e-15)

    def test_repeated_updates_converge_geometrically(self):
        y = np.zeros(1)
        for m in range(1, 30):
            y = mix_labels(y, [1.0], 0.4)
            assert abs(y[0] - (1 - 0.4**m)) < 1e-12

    @pytest.mark.parametrize("alpha, expected", [(0.0, 0.0), (1.0, 1.0)])
    def test_alpha_extremes(self, alpha, expected):
        assert mix_labels([1.0], [0.0], alpha)[0] == expected

    def test_correct_labels_uses_strict_threshold(self, monkeypatch):
        recs = [PairRecord(0, generate_scene(SPEC, 0), np.full((3, 4), 0.2), [1.0, 0.0, 1.0], "T")]
        monkeypatch.setattr(training, "predict_record_scores", lambda stack, T: [np.array([0.1, 0.9, 0.5])])
        state = make_state(ModelStack(resolution=16), alpha=0.4, gamma=0.5)
        out = correct_labels(state, recs)
        np.testing.assert_array_equal(out[0].labels, [0.4, 0.6, 0.4])
        np.testing.assert_array_equal(recs[0].labels, [1.0, 0.0, 1.0])

    def test_state_invariants(self):
        stack = ModelStack(resolution=16)
        for kw in ({"lr": 0.0}, {"alpha": 1.5}, {"correction_period": 0}):
            with pytest.raises(ValueError):
                make_state(stack, **{"lr": 1e-3, **kw})


class TestLosses:
    def test_bce_values(self):
        assert float(bce(1.0, torch.tensor(0.5))) == pytest.approx(np.log(2))
        assert float(bce(0.0, torch.tensor(0.0))) == pytest.approx(-np.log1p(-1e-7), rel=1e-6)
        assert np.isfinite(float(bce(1.0, torch.tensor(0.0))))

    def test_sup_is_mean_over_union(self):
        stack = ModelStack(resolution=16, dtype="float64")
        S, T = labeled(2, 5), labeled(2, 7, start=50, domain="T")
        fS, fT = encode_batch(stack, S), encode_batch(stack, T)
        p = training.predict_rationality(stack, torch.cat([fS.features, fT.features]))
        y = np.concatenate([fS.labels, fT.labels])
        manual = np.mean([-(t * np.log(q) + (1 - t) * np.log(1 - q)) for t, q in zip(y, p.detach().numpy())])
        assert loss_sup(stack, fS, fT).item() == pytest.approx(manual, rel=1e-12)

    def test_empty_T_reduces_to_supervised(self):
        stack = ModelStack(resolution=16, dtype="float64")
        fS = encode_batch(stack, labeled(2, 5))
        empty = encode_batch(stack, [])
        assert loss_sup(stack, fS, empty).item() == loss_sup(stack, fS).item()

    def test_uninitialized_pseudo_labels_rejected(self):
        stack = ModelStack(resolution=16)
        s = generate_scene(SPEC, 0)
        T = [PairRecord(0, s, sample_placements(s, 3, np.random.default_rng(0)), [np.nan] * 3, "T")]
        with pytest.raises(ValueError):
            loss_sup(stack, encode_batch(stack, labeled(1, 3)), encode_batch(stack, T))

    def test_permutation_invariance(self):
        stack = ModelStack(resolution=16, dtype="float64")
        S = labeled(4, 5)
        a = loss_sup(stack, encode_batch(stack, S)).item()
        b = loss_sup(stack, encode_batch(stack, S[::-1])).item()
        assert abs(a - b) < 1e-9


class TestSamplePairs:
    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.sampled_from([0.0, 1.0, 0.4, 0.6]), min_size=0, max_size=12), st.integers(0, 2**16))
    def test_properties(self, labels, seed):
        pairs = sample_pairs(np.array(labels), np.random.default_rng(seed), 12)
        k = len(labels)
        assert len(pairs) == min(k * (k - 1), 12)
        assert np.all(pairs[:, 0] != pairs[:, 1]) if len(pairs) else True
        assert len({tuple(p) for p in pairs}) == len(pairs)
        hard = np.array(labels) >= 0.5
        same = int(np.sum(hard[pairs[:, 0]] == hard[pairs[:, 1]])) if len(pairs) else 0
        n_same = int(np.sum(hard[:, None] == hard[None, :])) - k
        n_diff = k * (k - 1) - n_same
        half = len(pairs) // 2
        # balanced when both groups can supply their half
        if n_same >= half and n_diff >= len(pairs) - half:
            assert same == half

    def test_single_placement(self):
        assert sample_pairs(np.array([1.0]), np.random.default_rng(0)).shape == (0, 2)


class TestTrainStep:
    def test_divergence_detected(self):
        stack = ModelStack(resolution=16)
        state = make_state(stack, lr=1e-3)
        with torch.no_grad():
            next(stack.theta_sup.parameters()).fill_(float("nan"))
        with pytest.raises(DivergenceError) as exc:
            train_step(state, labeled(1, 3), [], LossWeights(0, 0), np.random.default_rng(0))
        assert "losses" in exc.value.dump

    def test_overfit_toy_set(self):
        stack = ModelStack(resolution=16, seed=0)
        state = make_state(stack, lr=5e-3)
        toy = labeled(4, 8, start=300)
        rng = np.random.default_rng(0)
        for _ in range(200):
            out = train_step(state, toy, [], LossWeights(0, 0), rng)
        assert out["sup"] < 0.1

    def test_breakdown_total(self):
        stack = ModelStack(resolution=16)
        state = make_state(stack, lr=1e-3)
        S = labeled(2, 6)
        T = [r.with_labels(r.labels) for r in labeled(2, 6, start=40, domain="T")]
        w = LossWeights(0.5, 0.1)
        out = train_step(state, S, T, w, np.random.default_rng(0))
        assert out["total"] == pytest.approx(out["sup"] + 0.5 * out["sim"] - 0.1 * out["dom"])

    def test_zero_weights_skip_components(self):
        stack = ModelStack(resolution=16)
        state = make_state(stack, lr=1e-3)
        out = train_step(state, labeled(2, 6), labeled(2, 6, 40, "T"), LossWeights(0, 0), np.random.default_rng(0))
        assert out["sim"] is None and out["dom"] is None


class TestInitPseudoLabels:
    def test_matches_thresholding_of_scores(self):
        stack = ModelStack(resolution=16)
        stack.pretrained = True
        T = [PairRecord(r.pair_id, r.scene, r.placements, [np.nan] * r.K, "T") for r in labeled(3, 10)]
        init = init_pseudo_labels(stack, T, 0.5)
        scores = training.predict_record_scores(stack, T)
        for r, s in zip(init, scores):
            np.testing.assert_array_equal(r.labels, (s > 0.5).astype(float))


class TestRunSSL:
    def test_history_records(self):
        cfg = tiny_config()
        res = run_ssl(cfg, tiny_split(cfg))
        assert [h["phase"] for h in res.history] == [0, 1, 2]
        for h in res.history:
            for key in ("epoch", "f1_seen", "bal_seen", "f1_novel", "bal_novel", "loss_sup", "loss_sim", "loss_dom"):
                assert key in h
        assert res.history[1]["loss_sim"] is not None and res.history[1]["loss_dom"] is not None
        assert all(r.initialized for r in res.train_T)

    def test_deterministic(self):
        cfg = tiny_config(seed=4)
        a = run_ssl(cfg, tiny_split(cfg)).history
        b = run_ssl(cfg, tiny_split(cfg)).history
        assert json.dumps(a) == json.dumps(b)

    def test_supervised_only_ignores_unlabeled(self):
        cfg = tiny_config(use_unlabeled=False)
        res = run_ssl(cfg, tiny_split(cfg))
        assert res.train_T == []
        assert all(h["loss_sim"] is None and h["loss_dom"] is None for h in res.history)

    def test_resume_matches_uninterrupted(self, tmp_path):
        cfg = tiny_config(seed=2)
        split = tiny_split(cfg)
        full = run_ssl(cfg, split).history
        run_ssl(cfg, split, checkpoint_dir=tmp_path, stop_after_phase=1)
        resumed = run_ssl(cfg, split, checkpoint_dir=tmp_path, resume=True).history
        assert json.dumps(resumed) == json.dumps(full)

    def test_resume_ignores_other_config(self, tmp_path):
        cfg = tiny_config(seed=2)
        split = tiny_split(cfg)
        run_ssl(cfg, split, checkpoint_dir=tmp_path, stop_after_phase=1)
        other = cfg.with_overrides(alpha=0.2)
        res = run_ssl(other, split, checkpoint_dir=tmp_path, resume=True)
        assert [h["phase"] for h in res.history] == [0, 1, 2]
        assert all(h["config_hash"] == other.config_hash() for h in res.history)

    def test_pretrain_cache_shared_across_modes(self, tmp_path):
        cfg = tiny_config(seed=1)
        split = tiny_split(cfg)
        cache = tmp_path / "pre.npz"
        a = run_ssl(cfg, split, pretrain_cache=cache).history
        assert cache.exists()
        b = run_ssl(cfg, split, pretrain_cache=cache).history
        assert json.dumps(a) == json.dumps(b)
        sup = run_ssl(cfg.with_overrides(use_unlabeled=False), split, pretrain_cache=cache).history
        assert sup[0]["f1_seen"] == a[0]["f1_seen"]

    def test_empty_labeled_pool(self):
        cfg = tiny_config()
        split = tiny_split(cfg)
        split.train_S = []
        with pytest.raises(ValueError):
            run_ssl(cfg, split)
