"""Acceptance criteria 1-10. Each test prints one [PASS]/[FAIL] line.

Training experiments use ``desk_scale_config``: the default synthetic data
and hyperparameters with learning rate 3e-4 (see the decisions ledger).
"""

import functools
import itertools
import json
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import pearsonr

from scbch import losses
from scbch import ndmath as nd
from scbch import retrieval as rt
from scbch.cli import main as cli_main
from scbch.dataset import SyntheticSpec, generate_synthetic
from scbch.experiment import desk_scale_config, evaluate, prepare_dataset, retrieval_runs, similarity_dump
from scbch.model import ModelConfig, init_parameters
from scbch.trainer import TrainConfig, make_batch, new_state, objective, train

from oracles import (ap_loop, attraction_loop, central_difference, cscc_loop, hamming_loop, jaccard_loop,
                     max_relative_error, quantization_loop, repulsion_loop)

SEEDS = (0, 1, 2)
ABLATIONS = ("cscc", "bsch", "weighting", "attraction")
KINK = 1e-3


def random_labels(rng, n, c, p=0.4):
    y = (rng.random((n, c)) < p).astype(float)
    y[y.sum(1) == 0, rng.integers(0, c)] = 1.0
    return y


# -- shared training runs -------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def desk_run(seed: int, noise_rate: float, code_length: int = 16, ablation: str | None = None) -> dict:
    """Train once per setting and keep only what the criteria need."""
    config = desk_scale_config(seed=seed, noise_rate=noise_rate, code_length=code_length)
    if ablation:
        config = replace(config, train=config.train.with_ablations([ablation]))
    dataset = prepare_dataset(config)
    snapshots = {}

    def keep_epoch_one(state, record):
        if record["epoch"] == 1:
            snapshots[1] = state.model.copy()

    started = time.perf_counter()
    state, history = train(dataset, config.train, on_epoch_end=keep_epoch_one)
    final = evaluate(state.model, dataset, config.eval)
    return {"config": config, "dataset": dataset, "model": state.model, "epoch1": snapshots[1],
            "history": history, "map": final["map_avg"], "seconds": time.perf_counter() - started}


def seed_mean_map(noise_rate, code_length=16, ablation=None):
    return float(np.mean([desk_run(s, noise_rate, code_length, ablation)["map"] for s in SEEDS]))


# -- 1. gradient correctness ---------------------------------------------------------------

def _kink_free_codes(rng, n, L, margin):
    while True:
        h1, h2 = rng.uniform(-0.95, 0.95, (n, L)), rng.uniform(-0.95, 0.95, (n, L))
        S = h1 @ h2.T / L
        gaps = (np.diag(S)[:, None] - margin) - np.concatenate([S, S.T], axis=1)
        if np.abs(gaps).min() > KINK and np.abs(np.concatenate([h1, h2])).min() > KINK:
            return h1, h2


def _term_errors(rng):
    n, L, C = 8, 16, 5
    xi, margin, beta = 1.0, 0.2, 0.3
    y = random_labels(rng, n, C)
    h1, h2 = _kink_free_codes(rng, n, L, margin)
    z1, z2 = rng.uniform(0.05, 0.95, (n, C)), rng.uniform(0.05, 0.95, (n, C))
    w = rng.uniform(0.5, 1.0, n)
    R = losses.jaccard_matrix(y)
    terms = {
        "cscc": (lambda a, b: losses.cscc_loss(a, b, y, w), z1, z2),
        "attraction": (lambda a, b: losses.attraction_loss(losses.similarity_matrix(a, b),
                                                           losses.positive_mask(R), xi), h1, h2),
        "repulsion": (lambda a, b: losses.repulsion_loss(losses.similarity_matrix(a, b), R, xi, margin), h1, h2),
        "quantization": (lambda a, b: losses.quantization_loss(a, b, beta), h1, h2),
    }
    errors = {}
    for name, (fn, a, b) in terms.items():
        tape = nd.Tape()
        grads = tape.backward(fn(tape.parameter(a, "a"), tape.parameter(b, "b")))
        fd = central_difference(lambda d: fn(d["a"], d["b"]).item(), {"a": a.copy(), "b": b.copy()})
        errors[name] = max(max_relative_error(grads[k], fd[k]) for k in ("a", "b"))
    return errors


def _composed_near_kink(model, batch, cfg):
    codes = []
    for modality, x in (("image", batch.image), ("text", batch.text)):
        layers = getattr(model.config, modality).num_layers
        out = x
        for k in range(layers):
            z = out @ model.params[f"{modality}.fc{k}.weight"] + model.params[f"{modality}.fc{k}.bias"]
            if k < layers - 1:
                if np.abs(z).min() < KINK:
                    return True
                out = np.maximum(z, 0.0)
            else:
                out = np.tanh(z)
        codes.append(out)
    h1, h2 = codes
    if min(np.abs(h1).min(), np.abs(h2).min()) < KINK:
        return True
    S = h1 @ h2.T / h1.shape[1]
    gaps = (np.diag(S)[:, None] - cfg.margin) - np.concatenate([S, S.T], axis=1)
    return np.abs(gaps).min() < KINK


def _composed_error(seed):
    """Full objective after warm-up, w.r.t. every network parameter."""
    for attempt in itertools.count():
        s = seed * 1000 + attempt
        ds = generate_synthetic(SyntheticSpec(n=8, num_classes=5, image_dim=6, text_dim=4, seed=s))
        cfg = TrainConfig(code_length=16, hidden_dim=16, epochs=5, warmup_epochs=1, seed=s)
        mc = ModelConfig.default(6, 4, 5, cfg.code_length, cfg.hidden_dim)
        model = new_state(cfg, mc).model
        batch = make_batch(ds, np.arange(8))
        if not _composed_near_kink(model, batch, cfg):
            break
    tape = nd.Tape()
    res = objective(batch, model, cfg, epoch=3, tape=tape)
    grads = tape.backward(res.loss)

    def value(params):
        model.params.update(params)
        return objective(batch, model, cfg, epoch=3, weights=res.raw_weights).loss.item()

    fd = central_difference(value, {k: v.copy() for k, v in model.params.items()})
    return max(max_relative_error(grads[k], fd[k]) for k in grads)


def test_criterion_1_gradient_correctness(acceptance_report):
    started = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {}
    for _ in range(5):
        for name, err in _term_errors(rng).items():
            worst[name] = max(worst.get(name, 0.0), err)
    worst["composed"] = max(_composed_error(seed) for seed in range(2))
    elapsed = time.perf_counter() - started
    passed = max(worst.values()) < 1e-4 and elapsed < 30
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    acceptance_report(1, passed, f"max rel err {detail} (< 1e-4); {elapsed:.1f}s")
    assert passed


# -- 2. oracle equivalence -------------------------------------------------------------------

def test_criterion_2_oracle_equivalence(acceptance_report):
    started = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        n, L, C = 8, 8, 5
        h1, h2 = rng.uniform(-1, 1, (n, L)), rng.uniform(-1, 1, (n, L))
        y = random_labels(rng, n, C)
        xi, m, beta = rng.uniform(0, 2), rng.uniform(0, 0.5), rng.uniform(0, 1)
        z1, z2 = rng.uniform(0, 1, (n, C)), rng.uniform(0, 1, (n, C))
        w = rng.uniform(0, 1, n)
        S = (h1 @ h2.T / L).tolist()
        R = [[jaccard_loop(a, b) for b in y] for a in y]
        M = [[1.0 if R[i][j] > 0 and i != j else 0.0 for j in range(n)] for i in range(n)]
        terms = losses.bsch_loss(h1, h2, y, xi, m, beta)
        worst = max(
            worst,
            abs(terms.attraction.item() - attraction_loop(S, M, xi)),
            abs(terms.repulsion.item() - repulsion_loop(S, R, xi, m)),
            abs(terms.quantization.item() - quantization_loop(h1.tolist(), h2.tolist(), beta)),
            abs(losses.cscc_loss(z1, z2, y, w).item() - cscc_loop(z1.tolist(), z2.tolist(), y.tolist(), w)),
        )
    elapsed = time.perf_counter() - started
    passed = worst <= 1e-10 and elapsed < 10
    acceptance_report(2, passed, f"max abs diff {worst:.2e} over 100 instances (<= 1e-10); {elapsed:.1f}s")
    assert passed


# -- 3. pairing taxonomy ------------------------------------------------------------------------

def test_criterion_3_pairing_taxonomy(acceptance_report):
    started = time.perf_counter()
    vectors = [np.array(v, dtype=float) for v in itertools.product([0, 1], repeat=4)]
    violations = 0
    for a, b in itertools.product(vectors, repeat=2):
        r = jaccard_loop(a, b)
        labels = np.stack([a, b])
        # membership as the loss actually sees it: gradient w.r.t. the off-diagonal similarity
        tape = nd.Tape()
        S = tape.parameter(np.array([[0.9, 0.1], [-0.2, 0.8]]), "S")
        R = losses.jaccard_matrix(labels)
        g_att = tape.backward(losses.attraction_loss(S, losses.positive_mask(R), 1.0))["S"][0, 1]
        g_rep = tape.backward(losses.repulsion_loss(S, R, 1.0, 0.2))["S"][0, 1]
        attracts, rep_weight = losses.pair_roles(r)
        checks = [
            (g_att != 0) == (r > 0),
            (g_rep != 0) == (r < 1),
            attracts == (r > 0),
            (rep_weight > 0) == (r < 1),
            ((g_att != 0) and (g_rep != 0)) == (0 < r < 1),
            (losses.pair_category(a, b) == "soft") == (0 < r < 1),
        ]
        violations += not all(checks)
    elapsed = time.perf_counter() - started
    passed = violations == 0 and elapsed < 5
    acceptance_report(3, passed, f"{violations} violations over 256 label pairs (C=4); {elapsed:.1f}s")
    assert passed


# -- 4. Hamming / MAP correctness -----------------------------------------------------------------

def test_criterion_4_hamming_and_map(acceptance_report):
    started = time.perf_counter()
    rng = np.random.default_rng(11)
    mismatches = 0
    for L in (16, 32, 64, 128):
        bits = rng.random((200, L)) < 0.5
        idx = rt.binarize(np.where(bits, 1.0, -1.0))
        d = rt.hamming_distances(idx, idx)
        rows = bits.tolist()
        for i in range(0, 200, 10):
            for j in range(200):
                mismatches += d[i, j] != hamming_loop(rows[i], rows[j])

    yq, yr = random_labels(rng, 50, 6, 0.3), random_labels(rng, 400, 6, 0.3)
    hq, hr = rng.normal(size=(50, 32)), rng.normal(size=(400, 32))
    run = rt.run_retrieval("I2T", rt.binarize(hq), rt.binarize(hr), yq, yr)
    bq, br = (hq >= 0).tolist(), (hr >= 0).tolist()
    aps = []
    for i in range(50):
        order = sorted(range(400), key=lambda j: (hamming_loop(bq[i], br[j]), j))
        aps.append(ap_loop([any(a and b for a, b in zip(yq[i], yr[j])) for j in order]))
    diff = abs(rt.mean_average_precision(run).map - sum(aps) / len(aps))
    elapsed = time.perf_counter() - started
    passed = mismatches == 0 and diff <= 1e-12 and elapsed < 10
    acceptance_report(4, passed, f"{mismatches} Hamming mismatches; MAP diff {diff:.1e} (<= 1e-12); {elapsed:.1f}s")
    assert passed


# -- 5. weight separation -------------------------------------------------------------------------

def test_criterion_5_weight_separation(acceptance_report):
    run = desk_run(0, 0.5)
    cfg = run["config"].train
    by_epoch = {r["epoch"]: r for r in run["history"]}
    gap = lambda e: by_epoch[e]["mean_weight_clean"] - by_epoch[e]["mean_weight_noisy"]
    first, last = gap(cfg.warmup_epochs + 1), gap(cfg.epochs)
    passed = last >= 0.05 and last > first and run["seconds"] < 180
    acceptance_report(5, passed, f"clean-noisy weight gap {first:.4f} at epoch {cfg.warmup_epochs + 1} -> "
                                 f"{last:.4f} at epoch {cfg.epochs} (>= 0.05, growing); {run['seconds']:.0f}s")
    assert passed


# -- 6. ablation direction -------------------------------------------------------------------------

def test_criterion_6_ablation_direction(acceptance_report):
    started = time.perf_counter()
    parts, passed = [], True
    for rho in (0.2, 0.5):
        full = seed_mean_map(rho)
        cells = {name: seed_mean_map(rho, ablation=name) for name in ABLATIONS}
        passed &= all(full >= v - 0.005 for v in cells.values())
        parts.append(f"rho={rho}: full {full:.4f} vs " + ", ".join(f"-{k} {v:.4f}" for k, v in cells.items()))
    elapsed = time.perf_counter() - started
    passed &= elapsed < 900
    acceptance_report(6, passed, "; ".join(parts) + f" (tie band 0.005); {elapsed:.0f}s")
    assert passed


# -- 7. noise / length trends -----------------------------------------------------------------------

def test_criterion_7_noise_and_length_trend(acceptance_report):
    started = time.perf_counter()
    low, high = seed_mean_map(0.2), seed_mean_map(0.8)
    short, long = seed_mean_map(0.5, 16), seed_mean_map(0.5, 32)
    elapsed = time.perf_counter() - started
    passed = low >= high - 0.01 and long >= short - 0.01 and elapsed < 900
    acceptance_report(7, passed, f"MAP rho=0.2 {low:.4f} vs rho=0.8 {high:.4f}; "
                                 f"L=32 {long:.4f} vs L=16 {short:.4f} (rho=0.5); {elapsed:.0f}s")
    assert passed


# -- 8. untrained baseline --------------------------------------------------------------------------

def test_criterion_8_untrained_baseline(acceptance_report):
    started = time.perf_counter()
    config = desk_scale_config(seed=0)
    dataset = prepare_dataset(config)
    mc = ModelConfig.default(dataset.image_dim, dataset.text_dim, dataset.num_classes, 16, 256)
    runs = retrieval_runs(init_parameters(mc, 0), dataset)
    fresh = np.mean([rt.mean_average_precision(r).map for r in runs.values()])
    prior = np.mean([rt.shuffled_ranking_map(r.relevance, seed=0) for r in runs.values()])
    elapsed = time.perf_counter() - started
    passed = abs(fresh - prior) <= 0.05 and elapsed < 60
    acceptance_report(8, passed, f"fresh-init MAP {fresh:.4f} vs shuffled-ranking MAP {prior:.4f} "
                                 f"(|diff| {abs(fresh - prior):.4f} <= 0.05); {elapsed:.1f}s")
    assert passed


# -- 9. determinism ---------------------------------------------------------------------------------

def _end_to_end(root, config_path):
    data = root / "dataset.txt"
    assert cli_main(["generate", "--config", str(config_path), "--out", str(root), "--file", str(data),
                     "--quiet"]) == 0
    assert cli_main(["train", "--config", str(config_path), "--out", str(root), "--dataset", str(data),
                     "--quiet"]) == 0
    assert cli_main(["eval", "--config", str(config_path), "--out", str(root), "--dataset", str(data),
                     "--checkpoint", str(root / "checkpoint.npz"), "--quiet"]) == 0
    metrics = [json.loads(line) for line in open(root / "metrics.jsonl")]
    for rec in metrics:
        rec.pop("wall_time_ms")
    report = [json.loads(line) for line in open(root / "eval_report.jsonl")]
    return metrics, report, (root / "checkpoint.npz").read_bytes()


def test_criterion_9_determinism(tmp_path, acceptance_report):
    started = time.perf_counter()
    config_path = tmp_path / "config.json"
    desk_scale_config(seed=0).save(config_path)
    first = _end_to_end(tmp_path / "a", config_path)
    second = _end_to_end(tmp_path / "b", config_path)
    elapsed = time.perf_counter() - started
    same = [first[k] == second[k] for k in range(3)]
    passed = all(same) and elapsed < 360
    maps = [r["MAP"] for r in first[1]]
    acceptance_report(9, passed, f"metrics log identical={same[0]}, eval report identical={same[1]}, "
                                 f"checkpoint identical={same[2]}; MAP {maps}; {elapsed:.0f}s")
    assert passed


# -- 10. similarity alignment --------------------------------------------------------------------------

def test_criterion_10_similarity_alignment(acceptance_report):
    run = desk_run(0, 0.5)
    started = time.perf_counter()
    off = ~np.eye(64, dtype=bool)
    r = {}
    for tag, model in (("epoch 1", run["epoch1"]), ("final", run["model"])):
        _, R, S = similarity_dump(model, run["dataset"], 64, seed=0)
        r[tag] = pearsonr(R[off], S[off]).statistic
    elapsed = time.perf_counter() - started
    passed = r["final"] > 0.3 and r["final"] > r["epoch 1"] and elapsed < 60
    acceptance_report(10, passed, f"Pearson(S, R) off-diagonal, 64 samples: epoch 1 {r['epoch 1']:.4f}, "
                                  f"final {r['final']:.4f} (> 0.3 and increasing); {elapsed:.1f}s")
    assert passed
