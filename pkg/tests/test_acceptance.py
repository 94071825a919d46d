"""Acceptance suite: one test per criterion, each reporting a one-line result.

Run on its own with ``pytest tests/test_acceptance.py``; the terminal summary
prints a PASS/FAIL line for every criterion.
"""

import math
import time

import numpy as np
import pytest

from emr_transfer import autodiff as ad
from emr_transfer import checkpoint
from emr_transfer.adversarial import Batch, DomainClassifier, TransitionBundle, TransitionModel
from emr_transfer.cli import MANIFEST, run_command
from emr_transfer.dtw import build_transfer_map, dtw_distance
from emr_transfer.encoder import GRU_KEYS, McGruEncoder, PredictionHeads
from emr_transfer.evaluation import best_val, epochs_to_reach, kfold_split
from emr_transfer.losses import LossWeights, bce_loss, domain_ce_loss, kl_rep_loss, mse_loss
from emr_transfer.metrics import metric_auroc
from emr_transfer.models import SourceModel, load_model, save_model
from emr_transfer.pipeline import RunConfig, init_target_from_transition, prepare, train_teacher, train_transition
from emr_transfer.synthetic import GeneratorConfig, synth_generate

from helpers import permute_labels
from oracles import auroc_pairwise, central_diff, dtw_enumerate, rel_err


def detail(request, text):
    request.node.user_properties.append(("detail", text))


def _batch(rng, n, b, t):
    lengths = rng.integers(1, t + 1, size=b)
    lengths[0] = t
    mask = (np.arange(t)[None, :] < lengths[:, None]).astype(float)
    return rng.normal(size=(n, b, t)) * mask, mask


LOSSES = ("mse", "bce", "kl", "domain")


def _end_to_end_case(seed, loss):
    """Random encoder/projection/heads plus one loss; returns (forward fn, parameter tensors)."""
    rng = np.random.default_rng([seed, 11])
    n, h, rep = int(rng.integers(1, 5)), int(rng.integers(1, 6)), int(rng.integers(1, 6))
    b, t = int(rng.integers(1, 4)), int(rng.integers(1, 7))
    feats = [f"f{i}" for i in range(n)]
    enc = McGruEncoder.init(feats, h, rep, rng)
    heads = PredictionHeads.init(rep, rng)
    params = enc.parameters() + heads.parameters()
    for p in params:
        p.data += 0.1 * rng.normal(size=p.data.shape)  # move biases off zero
    x, mask = _batch(rng, n, b, t)
    y_los = rng.normal(size=b)
    y_out = rng.integers(0, 2, size=b).astype(float)
    teacher = rng.normal(size=(b, rep))
    x2, mask2 = _batch(rng, n, b, t)
    clf = DomainClassifier.init(n * h, rng, hidden=3)
    labels = np.array([0] * b + [1] * b)

    def forward():
        emb = enc.embed(x, mask)
        if loss == "domain":
            both = ad.concat([emb, enc.embed(x2, mask2)], axis=0)
            return domain_ce_loss(clf(ad.reshape(both, (2 * b, n * h))), labels)
        s = enc.project(emb)
        if loss == "kl":
            return kl_rep_loss(teacher, s)
        p_out, los = heads.forward(s)
        return mse_loss(los, y_los) if loss == "mse" else bce_loss(p_out, y_out)

    # only parameters on the path to the chosen loss
    if loss == "domain":
        params = [enc.params[k] for k in GRU_KEYS] + clf.parameters()
    elif loss == "kl":
        params = enc.parameters()
    return forward, params, dict(N=n, H=h, S=rep, B=b, T=t)


@pytest.mark.criterion(1, "gradient integrity")
def test_c1_gradient_integrity(request):
    start = time.perf_counter()
    worst = 0.0
    n_cases = 24
    for i in range(n_cases):
        loss = LOSSES[i % len(LOSSES)]
        forward, params, shape = _end_to_end_case(i, loss)
        for p in params:
            p.grad = None
        ad.backward(forward())
        # parameters off the loss path have no gradient; finite differences must agree on zero
        analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

        def f():
            with ad.no_grad():
                return float(forward().data)

        numeric = central_diff(f, [p.data for p in params], h=1e-5)
        err = max(rel_err(a, n) for a, n in zip(analytic, numeric))
        worst = max(worst, err)
        assert err < 1e-4, (loss, shape, err)
    elapsed = time.perf_counter() - start
    detail(request, f"{n_cases} configs, worst relative error {worst:.1e}, {elapsed:.1f}s")
    assert elapsed < 30


def _domain_branch_grads(model, src, tar, gamma, reverse):
    for p in model.parameters():
        p.grad = None
    enc = model.encoder
    f_src = ad.take(enc.embed(src.x, src.mask), model.shared_idx, axis=1)
    f_tar = enc.embed(tar.x, tar.mask, channels=model.shared_idx)
    both = ad.concat([f_src, f_tar], axis=0)
    flat = ad.reshape(both, (both.shape[0], both.shape[1] * both.shape[2]))
    if reverse:
        flat = ad.gradient_reverse(flat, gamma)
    labels = np.array([0] * src.size + [1] * tar.size)
    ad.backward(domain_ce_loss(model.classifier(flat), labels))
    return ({k: enc.params[k].grad.copy() for k in GRU_KEYS},
            {k: t.grad.copy() for k, t in model.classifier.params.items()})


@pytest.mark.criterion(2, "gradient reversal exactness")
def test_c2_gradient_reversal_exactness(request):
    start = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng([seed, 12])
        n_shared, n_priv = int(rng.integers(1, 4)), int(rng.integers(0, 3))
        feats = [f"s{i}" for i in range(n_shared)] + [f"p{i}" for i in range(n_priv)]
        model = TransitionModel.init(feats, feats[:n_shared], int(rng.integers(1, 5)), int(rng.integers(1, 5)),
                                     "regression", rng)
        gamma = float(rng.uniform(0.05, 3.0))
        b, t = int(rng.integers(1, 5)), int(rng.integers(1, 7))
        xs, ms = _batch(rng, len(feats), b, t)
        xt, mt = _batch(rng, n_shared, b, t)
        src, tar = Batch(xs, ms, rng.normal(size=b)), Batch(xt, mt)
        enc_r, clf_r = _domain_branch_grads(model, src, tar, gamma, True)
        enc_p, clf_p = _domain_branch_grads(model, src, tar, gamma, False)
        for k in GRU_KEYS:
            diff = np.max(np.abs(enc_r[k] - (-gamma) * enc_p[k]))
            worst = max(worst, float(diff))
            assert diff <= 1e-12, (seed, k, diff)
        for k in clf_r:
            assert clf_r[k].tobytes() == clf_p[k].tobytes()
    elapsed = time.perf_counter() - start
    detail(request, f"20 configs, max |g_rev + gamma g| = {worst:.1e}, classifier grads bit-identical")
    assert elapsed < 5


@pytest.mark.criterion(3, "KL properties")
def test_c3_kl_properties(request):
    start = time.perf_counter()
    rng = np.random.default_rng(13)
    worst_neg = 0.0
    for _ in range(1000):
        d = int(rng.integers(1, 9))
        scale = float(rng.choice([0.1, 1.0, 3.0]))
        a, b = rng.normal(size=d) * scale, rng.normal(size=d) * scale
        v = float(kl_rep_loss(a, b).data)
        worst_neg = min(worst_neg, v)
        assert v >= 0.0
        assert abs(float(kl_rep_loss(a, a).data)) < 1e-15
        c1, c2 = rng.uniform(-5, 5, size=2)
        assert abs(float(kl_rep_loss(a + c1, b + c2).data) - v) < 1e-12
    hand = float(kl_rep_loss([math.log(1), math.log(3)], [0.0, 0.0]).data)
    assert abs(hand - 0.130812) < 1e-6
    elapsed = time.perf_counter() - start
    detail(request, f"1000 pairs, min value {worst_neg:.1e}, worked pair {hand:.6f}")
    assert elapsed < 5


@pytest.mark.criterion(4, "DTW oracle equivalence")
def test_c4_dtw_oracle(request):
    start = time.perf_counter()
    rng = np.random.default_rng(14)
    for _ in range(1000):
        a = rng.normal(size=int(rng.integers(1, 7)))
        b = rng.normal(size=int(rng.integers(1, 7)))
        d = dtw_distance(a, b)
        assert d == dtw_enumerate(a, b)
        assert d == dtw_distance(b, a)
        assert dtw_distance(a, a) == 0.0
    elapsed = time.perf_counter() - start
    detail(request, f"1000 pairs exact vs enumeration, {elapsed:.1f}s")
    assert elapsed < 30


@pytest.mark.criterion(5, "AUROC oracle equivalence")
def test_c5_auroc_oracle(request):
    start = time.perf_counter()
    rng = np.random.default_rng(15)
    worst = 0.0
    for i in range(1000):
        n = int(rng.integers(2, 40))
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[1] = 0, 1
        # a third of the instances draw from a handful of values to force ties
        scores = rng.integers(0, 4, size=n).astype(float) if i % 3 == 0 else rng.normal(size=n)
        v = metric_auroc(scores, labels)
        worst = max(worst, abs(v - auroc_pairwise(scores, labels)))
        assert abs(v - auroc_pairwise(scores, labels)) <= 1e-12
        ranks = np.unique(scores, return_inverse=True)[1].astype(float)
        assert metric_auroc(ranks, labels) == v
        assert metric_auroc(scores * 8.0 + 0.5, labels) == v
    elapsed = time.perf_counter() - start
    detail(request, f"1000 instances, max deviation {worst:.1e}")
    assert elapsed < 10


LEAK_GEN = GeneratorConfig(n_source=60, n_target=40, n_shared=2, n_source_private=1, n_target_private=1,
                           t_min=3, t_max=6)


@pytest.mark.criterion(6, "leakage guards")
def test_c6_leakage_guards(request):
    start = time.perf_counter()
    rng = np.random.default_rng(16)
    for _ in range(500):
        n, k = int(rng.integers(2, 200)), int(rng.integers(2, 11))
        if n < k:
            continue
        ids = [f"p{i}" for i in rng.permutation(1000)[:n]]
        plan = kfold_split(ids, k, int(rng.integers(0, 2**31)))
        seen = [p for f in plan.folds for p in f]
        assert len(seen) == len(set(seen)) == n and set(seen) == set(ids)
        for i in range(k):
            train, test = plan.train_test(i)
            assert not set(train) & set(test) and len(train) + len(test) == n

    src, tar = prepare(*synth_generate(LEAK_GEN, 0))[:2]
    cfg = RunConfig(seed=0, lr=0.01, batch=16, epochs=3, patience=2, hidden=3, rep=4)
    teacher = train_teacher(src, cfg).model

    def transition_bytes(target):
        m = train_transition(teacher, src, target, cfg).model
        return checkpoint.dumps(m.state_dict(), m.meta())

    permuted = permute_labels(tar, np.random.default_rng(1))
    assert not np.array_equal(permuted.los(), tar.los())
    assert transition_bytes(tar) == transition_bytes(permuted)
    elapsed = time.perf_counter() - start
    detail(request, "500 fold plans disjoint; transition checkpoint unchanged by label permutation")
    assert elapsed < 120


# shared benchmark for the transfer-benefit and convergence criteria ---------

BENCH_SEEDS = range(5)
BENCH_TRAIN = 64
BENCH_STAGES = {"teacher": {"epochs": 25, "lr": 0.005}, "transition": {"epochs": 20, "lr": 0.005}}


@pytest.fixture(scope="module")
def benchmark():
    from emr_transfer.pipeline import run_experiment

    gen = GeneratorConfig(n_source=2000, n_target=BENCH_TRAIN + 200, n_shared=8, n_source_private=4,
                          n_target_private=4, shift=1.0)
    start = time.perf_counter()
    runs = []
    for seed in BENCH_SEEDS:
        src_raw, tar_raw = synth_generate(gen, seed)
        ids = tar_raw.ids
        src, train, test = prepare(src_raw, tar_raw.subset(ids[:BENCH_TRAIN]), tar_raw.subset(ids[BENCH_TRAIN:]))
        assert len(test) == 200
        cfg = RunConfig(seed=seed, overrides=BENCH_STAGES)
        runs.append(run_experiment(src, train, test, cfg, scratch=True))
    return runs, time.perf_counter() - start


@pytest.mark.slow
@pytest.mark.criterion(7, "synthetic transfer benefit")
def test_c7_transfer_benefit(request, benchmark):
    runs, elapsed = benchmark
    transfer = [r.metrics["mse"] for r in runs]
    scratch = [r.scratch_metrics["mse"] for r in runs]
    wins = sum(t < s for t, s in zip(transfer, scratch))
    improvement = 1.0 - np.mean(transfer) / np.mean(scratch)
    detail(request, f"transfer better in {wins}/5 seeds, mean MSE {np.mean(transfer):.2f} vs "
                    f"{np.mean(scratch):.2f} ({100 * improvement:.1f}% lower), benchmark {elapsed:.0f}s")
    assert wins >= 4
    assert improvement >= 0.03
    assert elapsed < 600


@pytest.mark.slow
@pytest.mark.criterion(8, "convergence speed")
def test_c8_convergence_speed(request, benchmark):
    runs, _ = benchmark
    pairs = []
    for r in runs:
        scratch_epoch, scratch_best = best_val(r.logs["scratch"])
        reach = epochs_to_reach(r.logs["target"], scratch_best)
        pairs.append((reach, scratch_epoch))
    faster = sum(reach is not None and reach < ep for reach, ep in pairs)
    detail(request, f"faster in {faster}/5 seeds; epochs (transfer, scratch) = {pairs}")
    assert faster >= 4


DET_GENERATOR = {"n_source": 50, "n_target": 36, "n_shared": 2, "n_source_private": 1, "n_target_private": 1,
                 "t_min": 3, "t_max": 5}


def _tree(out):
    return {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()
            and p.name != MANIFEST}


@pytest.mark.criterion(9, "CLI determinism")
def test_c9_cli_determinism(request, tmp_path):
    import json

    data = {k: {"observations": f"data/{k}_observations.csv", "outcomes": f"data/{k}_outcomes.csv",
                "schema": f"data/{k}_schema.json"} for k in ("source", "target")}
    doc = {"seed": 7, "data": {"generator": DET_GENERATOR, **data, "target_test": data["target"]},
           "model": {"hidden": 3, "rep": 4}, "train": {"lr": 0.01, "batch": 16, "epochs": 3, "patience": 2},
           "loss": {"alpha": 1, "beta": 1, "gamma": 1}, "cv": {"k": 3}}
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(doc))

    def run(out, *argv):
        assert run_command([argv[0], "--config", str(cfg), "--out", str(tmp_path / out), *argv[1:]]) == 0
        return tmp_path / out

    run("data", "simulate")
    for tag in ("a", "b"):
        t = run(f"{tag}/teacher", "train-teacher")
        s = run(f"{tag}/stage2", "train-transition", "--teacher", str(t / "teacher.json"))
        m = run(f"{tag}/map", "dtw-match")
        i = run(f"{tag}/init", "transfer", "--transition", str(s / "transition.json"), "--map",
                str(m / "transfer_map.csv"))
        run(f"{tag}/target", "train-target", "--model", str(i / "target_init.json"))
        run(f"{tag}/cv", "run-cv", "--seed", "7", "--ablation", "scratch")
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert a == b
    compared = len(a)
    assert any(k.endswith("report.json") for k in a) and any("curves" in k for k in a)
    assert any(k.endswith("target.json") for k in a)
    detail(request, f"{compared} artifacts byte-identical across repeated runs")


@pytest.mark.criterion(10, "checkpoint round trip and cross-stage loading")
def test_c10_checkpoint_round_trip(request, tmp_path):
    src, tar = prepare(*synth_generate(LEAK_GEN, 2))[:2]
    cfg = RunConfig(seed=2, lr=0.01, batch=16, epochs=2, patience=2, hidden=3, rep=4)
    teacher = train_teacher(src, cfg).model
    transition = train_transition(teacher, src, tar, cfg).model
    tmap = build_transfer_map(src, tar, seed=2)
    target = init_target_from_transition(transition, tar.features, tmap, cfg)
    for name, model in (("teacher", teacher), ("transition", transition), ("target", target)):
        save_model(model, tmp_path / f"{name}1.json")
        back = load_model(tmp_path / f"{name}1.json")
        save_model(back, tmp_path / f"{name}2.json")
        assert (tmp_path / f"{name}1.json").read_bytes() == (tmp_path / f"{name}2.json").read_bytes()
        for k, v in model.state_dict().items():
            assert back.state_dict()[k].tobytes() == v.tobytes()

    # teacher into the transition stage
    loaded_teacher = load_model(tmp_path / "teacher1.json")
    assert isinstance(loaded_teacher, SourceModel)
    again = train_transition(loaded_teacher, src, tar, cfg).model
    assert checkpoint.dumps(again.state_dict(), again.meta()) == checkpoint.dumps(transition.state_dict(),
                                                                                 transition.meta())
    # transition into the target stage: every target channel is a bit-exact copy of its mapped channel
    loaded_transition = load_model(tmp_path / "transition1.json")
    init = init_target_from_transition(loaded_transition, tar.features, tmap, cfg)
    mapping = tmap.as_dict()
    for f in tar.features:
        got, want = init.encoder.channel(f), transition.encoder.channel(mapping[f])
        for k in GRU_KEYS:
            assert getattr(got, k).tobytes() == getattr(want, k).tobytes()
    for k, v in target.state_dict().items():
        assert init.state_dict()[k].tobytes() == v.tobytes()
    detail(request, "save/load/save byte-identical for all stages; cross-stage parameters bit-exact")
