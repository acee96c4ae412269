"""Acceptance gate: one test group per criterion, each at its stated tolerance.

The benchmark criteria train the default configuration on three seeds; expect
roughly half an hour on one CPU core.
"""

import json

import numpy as np
import pytest
import torch

from micro import FixedForward, fd_check, grad_or_zero, micro_batches_default, micro_stack
from placement_ssl import model as model_mod
from placement_ssl.cli import EXIT_OK, main
from placement_ssl.config import load_config
from placement_ssl.data import PairRecord, build_splits, init_pseudo_labels
from placement_ssl.evaluation import f1_and_balanced_accuracy, top_k_sample
from placement_ssl.model import FOPA_STYLE, SOPA_STYLE, Heatmap, ModelStack
from placement_ssl.scene import SceneSpec, generate_scene
from placement_ssl import training
from placement_ssl.training import (
    LossWeights,
    correct_labels,
    joint_losses,
    loss_dom,
    loss_sim,
    loss_sup,
    make_state,
    run_ssl,
    train_step,
)

SEEDS = (0, 1, 2)
MODES = {
    "supervised-only": dict(use_unlabeled=False),
    "no-framework": dict(use_sim=False, use_dom=False),
    "full": {},
    "minus-correction": dict(label_correction=False),
    "minus-sim": dict(use_sim=False),
    "minus-dom": dict(use_dom=False),
}


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    """Final novel-split F1 per mode and seed on the default benchmark."""
    cache = tmp_path_factory.mktemp("pretrain")
    out = {mode: [] for mode in MODES}
    for seed in SEEDS:
        cfg = load_config(seed=seed)
        split = build_splits(cfg.scene_spec(), cfg.n_s, cfg.n_t, cfg.n_test, cfg.novel_categories, cfg.seed,
                             cfg.k_s, cfg.k_t, cfg.k_test)
        for mode, overrides in MODES.items():
            run = run_ssl(cfg.with_overrides(**overrides), split, pretrain_cache=cache / f"{cfg.pretrain_key()}.npz")
            out[mode].append(run.history[-1]["f1_novel"])
    return {mode: float(np.mean(v)) for mode, v in out.items()}


def _report(record_property, values: dict):
    for k, v in values.items():
        record_property(k, f"{v:.4f}" if isinstance(v, float) else v)


@pytest.mark.criterion("semi-supervised gain")
def test_semi_supervised_gain(benchmark, record_property):
    full, sup, nofw = benchmark["full"], benchmark["supervised-only"], benchmark["no-framework"]
    _report(record_property, {"full": full, "supervised_only": sup, "no_framework": nofw})
    assert full >= sup + 0.03
    assert full >= nofw + 0.01


@pytest.mark.criterion("ablation ordering")
def test_ablation_ordering(benchmark, record_property):
    full = benchmark["full"]
    removed = {m: benchmark[m] for m in ("minus-sim", "minus-dom", "minus-correction")}
    _report(record_property, {"full": full, **removed})
    for value in removed.values():
        assert full >= value - 0.005


def _fixed_scores(monkeypatch, module, scores):
    monkeypatch.setattr(module, "predict_record_scores", lambda stack, T: [np.asarray(s, float) for s in scores])


@pytest.mark.criterion("label correction arithmetic")
def test_label_correction(monkeypatch):
    scene = generate_scene(SceneSpec(), 0)
    T = [PairRecord(0, scene, np.full((1, 4), 0.2), [1.0], "T")]
    state = make_state(ModelStack(resolution=16), alpha=0.4, gamma=0.5)
    _fixed_scores(monkeypatch, training, [[0.1]])
    assert correct_labels(state, T)[0].labels[0] == 0.4

    _fixed_scores(monkeypatch, training, [[0.9]])
    T = [T[0].with_labels([0.0])]
    for m in range(1, 31):
        T = correct_labels(state, T)
        assert abs(T[0].labels[0] - (1 - 0.4**m)) < 1e-12


@pytest.fixture(scope="module")
def micro_batches():
    return micro_batches_default()


@pytest.mark.criterion("gradient correctness")
@pytest.mark.parametrize("style", [SOPA_STYLE, FOPA_STYLE])
def test_loss_gradients(style, micro_batches, record_property):
    stack = micro_stack(style)
    fwd = FixedForward(stack, *micro_batches)
    group = stack.group_parameters

    def sim():
        fS, fT = fwd()
        return loss_sim(stack, fS, fT, fwd.pS, fwd.pT)[0]

    def dom(coeff):
        fS, fT = fwd()
        _, sS, sT = loss_sim(stack, fS, fT, fwd.pS, fwd.pT)
        return loss_dom(stack, sS, sT, coeff)

    errors = {
        "sup": fd_check(stack, lambda: loss_sup(stack, *fwd()), group("theta_opa") + group("theta_sup")),
        "sim": fd_check(stack, sim, group("theta_opa") + group("theta_sim")),
        "dom_head": fd_check(stack, lambda: dom(0.1), group("theta_dom")),
        # a coefficient of -1 turns the reversal into the identity
        "dom_extractor": fd_check(stack, lambda: dom(-1.0), group("theta_opa") + group("theta_sim")),
    }

    w = LossWeights(lambda1=0.5, lambda2=0.1)
    S, T = micro_batches

    def losses():
        return joint_losses(stack, S, T, w, np.random.default_rng(3))

    def backward():
        return losses()["backward"]

    def reported():
        out = losses()
        return out["sup"] + w.lambda1 * out["sim"] - w.lambda2 * out["dom"]

    gen = group("theta_opa") + group("theta_sup") + group("theta_sim")
    errors["objective_gen"] = fd_check(stack, reported, gen, backprop_fn=backward)
    errors["objective_dom"] = fd_check(stack, lambda: losses()["dom"], group("theta_dom"), backprop_fn=backward)
    record_property(f"max_rel_err_{style}", f"{max(errors.values()):.1e}")
    for name, err in errors.items():
        assert err < 1e-4, name


@pytest.mark.criterion("gradient correctness")
@pytest.mark.parametrize("lam", [0.1, 0.5, 1.0])
def test_reversal_layer(lam, micro_batches):
    stack = micro_stack()
    S, T = micro_batches
    fwd = FixedForward(stack, S, T)
    gen = stack.group_parameters("theta_opa") + stack.group_parameters("theta_sim")

    def grads(reverse):
        stack.zero_grad()
        fS, fT = fwd()
        _, sS, sT = loss_sim(stack, fS, fT, fwd.pS, fwd.pT)
        if reverse:
            loss = loss_dom(stack, sS, sT, lam)
        else:
            p = torch.sigmoid(stack.theta_dom(torch.cat([sS.features, sT.features]))).squeeze(-1)
            y = torch.cat([torch.ones(len(sS.targets)), torch.zeros(len(sT.targets))]).double()
            loss = torch.nn.functional.binary_cross_entropy(p, y)
        loss.backward()
        return [grad_or_zero(p) for p in gen]

    reversed_, plain = grads(True), grads(False)
    assert any(torch.count_nonzero(p) for p in plain)
    for r, p in zip(reversed_, plain):
        assert torch.max(torch.abs(r + lam * p)) <= 1e-10


def _confusion_oracle(pred, truth):
    tp = sum(1 for p, t in zip(pred, truth) if p and t)
    fp = sum(1 for p, t in zip(pred, truth) if p and not t)
    fn = sum(1 for p, t in zip(pred, truth) if not p and t)
    tn = sum(1 for p, t in zip(pred, truth) if not p and not t)
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    bal = None if (tp + fn == 0 or tn + fp == 0) else (tp / (tp + fn) + tn / (tn + fp)) / 2
    return f1, bal


@pytest.mark.criterion("metric correctness")
@pytest.mark.filterwarnings("ignore:balanced accuracy is undefined")
def test_metrics():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        pred, truth = rng.random(n) < rng.random(), rng.random(n) < rng.random()
        assert f1_and_balanced_accuracy(pred, truth) == _confusion_oracle(pred, truth)
    f1, bal = f1_and_balanced_accuracy([1, 1, 1, 1], [1, 1, 1, 0])
    assert f1 == pytest.approx(6 / 7, abs=1e-15) and bal == 0.5


@pytest.mark.criterion("pseudo-label initialization")
def test_pseudo_label_threshold(monkeypatch):
    rng = np.random.default_rng(0)
    scores = rng.random(10_000)
    scores[:100] = 0.5
    scores[100:150] = np.nextafter(0.5, 1.0)
    scores[150:200] = np.nextafter(0.5, 0.0)
    chunks = np.split(scores, 100)
    scene = generate_scene(SceneSpec(), 0)
    T = [PairRecord(i, scene, np.full((100, 4), 0.2), [np.nan] * 100, "T") for i in range(100)]
    _fixed_scores(monkeypatch, model_mod, chunks)
    stack = ModelStack(resolution=16)
    stack.pretrained = True
    labels = np.concatenate([r.labels for r in init_pseudo_labels(stack, T, 0.5)])
    oracle = [1.0 if s > 0.5 else 0.0 for s in scores]
    assert labels.tolist() == oracle
    assert not labels[:100].any() and labels[100:150].all() and not labels[150:200].any()


@pytest.mark.criterion("overfit sanity")
def test_overfit(record_property):
    spec = SceneSpec()
    rng = np.random.default_rng(300)
    toy = []
    for i in range(4):
        scene = generate_scene(spec, 300 + i)
        from placement_ssl.scene import oracle_labels, sample_placements
        boxes = sample_placements(scene, 8, rng)
        toy.append(PairRecord(i, scene, boxes, oracle_labels(scene, boxes), "S"))
    state = make_state(ModelStack(resolution=16, seed=0), lr=5e-3)
    step_rng = np.random.default_rng(0)
    for _ in range(200):
        train_step(state, toy, [], LossWeights(0.0, 0.0), step_rng)
    with torch.no_grad():
        final = float(loss_sup(state.stack, training.encode_batch(state.stack, toy)))
    record_property("bce", f"{final:.4f}")
    assert final < 0.1


TINY = {"n_s": 8, "n_t": 8, "n_test": 4, "n_val": 3, "k_s": 4, "k_t": 6, "k_test": 6, "pretrain_epochs": 2,
        "correction_period": 1, "rounds": 2, "feature_dim": 8, "resolution": 16}


@pytest.mark.criterion("determinism")
def test_determinism(tmp_path):
    flags = [x for k, v in TINY.items() for x in ("--set", f"{k}={v}")]
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["gen-data", "--output-dir", str(out), *flags]) == EXIT_OK
        assert main(["train", "--output-dir", str(out), *flags]) == EXIT_OK
        outputs.append((out / "metrics" / "sopa_full.json").read_bytes())
    assert outputs[0] == outputs[1]
    assert len(json.loads(outputs[0])["history"]) == TINY["rounds"] + 1


@pytest.mark.criterion("top-k protocol")
def test_top_k():
    rng = np.random.default_rng(0)
    for i in range(100):
        scores = rng.random((3, 16, 16))
        if i % 2:
            scores = np.round(scores, 2)
        valid = rng.random(scores.shape) > 0.2
        hm = Heatmap(scores, valid, np.array([0.1, 0.2, 0.3]), 1.0)
        flat = np.where(valid, scores, -np.inf).ravel()
        order = sorted(range(flat.size), key=lambda j: (-flat[j], j))
        top = set(order[:50])
        _, cells = top_k_sample(hm, 50, 5, rng)
        picked = np.ravel_multi_index(cells.T, scores.shape)
        assert len(set(picked)) == 5 and set(picked) <= top
