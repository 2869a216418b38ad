"""Acceptance suite: every criterion runs standalone and prints one line.

Run with `pytest tests/test_acceptance.py -s` to see the PASS lines as they
complete. Criteria 5 and 6 train real models on the synthetic 3-category
dataset and take a few minutes on a CPU.
"""

import math
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from normdistill.cli import cli
from normdistill.config import config_to_ini
from normdistill.constraint import ConstraintConfig, alignment_loss, constraint_loss, \
    decoded_alignment_loss
from normdistill.data import load_dataset
from normdistill.encoders import TextFeaturePair
from normdistill.fnp import control_map, distill_loss, promote
from normdistill.metrics import aupro, auroc, average_precision, evaluate
from normdistill.moe import Router, importance_loss, top_k_weights
from normdistill.pipeline import build_state, fit

from conftest import desk_config, tiny_config
from oracles import (aupro_bruteforce, auroc_bruteforce, average_precision_bruteforce,
                     central_difference_grad, cosine, promote_oracle, relative_error,
                     two_way_softmax_ce)

LN2 = math.log(2.0)


def _ok(number: int, name: str, detail: str = "") -> None:
    suffix = f" ({detail})" if detail else ""
    print(f"ACCEPTANCE {number} {name}: PASS{suffix}")


def test_criterion_1_analytic_identities():
    started = time.perf_counter()

    g = torch.randn(8, dtype=torch.float64)
    f = torch.randn(4, 4, 8, dtype=torch.float64)
    psi = control_map(f, TextFeaturePair(g, g.clone(), 1))
    assert torch.allclose(psi.values, torch.full((4, 4), 0.5, dtype=torch.float64), atol=1e-6)

    enc = [torch.randn(2, 3, 3, 4, dtype=torch.float64) for _ in range(3)]
    assert abs(float(distill_loss(enc, [e.clone() for e in enc]))) <= 1e-6
    assert abs(float(distill_loss(enc, [-e for e in enc])) - 6.0) <= 1e-6

    gn = F.normalize(torch.randn(6, dtype=torch.float64), dim=-1)
    pairs = [TextFeaturePair(gn, gn.clone(), i + 1) for i in range(3)]
    globals_ = [torch.randn(6, dtype=torch.float64) for _ in range(3)]
    assert abs(float(alignment_loss(globals_, pairs, tau=0.001)) - 3 * LN2) <= 1e-6

    cfg = ConstraintConfig(tau=0.001, gamma=0.1, theta=5)
    l1, l2 = torch.tensor(1.0), torch.tensor(7.0)
    assert abs(float(constraint_loss(4, cfg, l1, l2)) - 1.0) <= 1e-6
    assert abs(float(constraint_loss(5, cfg, l1, l2)) - 1.7) <= 1e-6

    elapsed = time.perf_counter() - started
    assert elapsed < 1.0
    _ok(1, "analytic identities", f"{elapsed:.3f}s")


def test_criterion_2_gradient_checks():
    started = time.perf_counter()
    rng = np.random.default_rng(7)
    shape = (2, 2, 8)

    # distillation loss wrt decoded patches (through the promotion path)
    g_n, g_a = rng.normal(size=8), rng.normal(size=8)
    pair = TextFeaturePair(torch.tensor(g_n), torch.tensor(g_a), 1)
    enc_np = [rng.normal(size=shape) for _ in range(3)]
    dec_np = [rng.normal(size=shape) for _ in range(3)]
    enc_promoted = [promote(torch.tensor(e), control_map(torch.tensor(e), pair)) for e in enc_np]
    dec = [torch.tensor(d, requires_grad=True) for d in dec_np]
    loss = distill_loss(enc_promoted, [promote(d, control_map(d, pair)) for d in dec])
    loss.backward()

    def distill_scalar(x, layer):
        ds = [np.array(d) for d in dec_np]
        ds[layer] = x
        total = 0.0
        for e, d in zip(enc_np, ds):
            ep = promote_oracle(e, 0.5 * (1 + np.tanh(e @ g_n - e @ g_a)))
            dp = promote_oracle(d, 0.5 * (1 + np.tanh(d @ g_n - d @ g_a)))
            total += 1.0 - cosine(ep, dp)
        return total

    for layer in range(3):
        numeric = central_difference_grad(lambda x, l=layer: distill_scalar(x, l),
                                          dec_np[layer], step=1e-4)
        assert relative_error(dec[layer].grad.numpy(), numeric) <= 1e-3

    # both alignment losses wrt their global vectors
    tau = 0.25
    pairs = [TextFeaturePair(F.normalize(torch.tensor(rng.normal(size=8)), dim=-1),
                             F.normalize(torch.tensor(rng.normal(size=8)), dim=-1), i + 1)
             for i in range(3)]
    for loss_fn in (alignment_loss, decoded_alignment_loss):
        e_init = [rng.normal(size=8) for _ in range(3)]
        e_t = [torch.tensor(e, requires_grad=True) for e in e_init]
        loss_fn(e_t, pairs, tau=tau).backward()

        def align_scalar(x, layer):
            es = [np.array(e) for e in e_init]
            es[layer] = x
            return sum(two_way_softmax_ce(es[i], pairs[i].g_normal.numpy(),
                                          pairs[i].g_abnormal.numpy(), tau) for i in range(3))

        for layer in range(3):
            numeric = central_difference_grad(lambda x, l=layer: align_scalar(x, l),
                                              e_init[layer], step=1e-4)
            assert relative_error(e_t[layer].grad.numpy(), numeric) <= 1e-3

    # importance loss wrt router weights
    torch.manual_seed(0)
    router = Router(embed_dim=8, num_experts=4).double()
    patches_np = rng.normal(size=(12, 8))
    patches = torch.tensor(patches_np)
    importance_loss(router(patches)).backward()
    w0 = router.linear.weight.detach().numpy().copy()
    b0 = router.linear.bias.detach().numpy().copy()

    def moe_scalar(w):
        logits = patches_np @ w.T + b0
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        scores = e / e.sum(axis=1, keepdims=True)
        imp = scores.sum(axis=0)
        return float(((imp - imp.mean()) ** 2).mean() / (imp.mean() ** 2 + 1e-10))

    numeric = central_difference_grad(moe_scalar, w0, step=1e-4)
    assert relative_error(router.linear.weight.grad.numpy(), numeric) <= 1e-3

    # promotion output wrt its input features (lambda and psi paths included)
    probe = rng.normal(size=shape)
    f_np = rng.normal(size=shape)
    f = torch.tensor(f_np, requires_grad=True)
    (promote(f, control_map(f, pair)).patches * torch.tensor(probe)).sum().backward()

    def promotion_scalar(x):
        out = promote_oracle(x, 0.5 * (1 + np.tanh(x @ g_n - x @ g_a)))
        return float((out * probe).sum())

    numeric = central_difference_grad(promotion_scalar, f_np, step=1e-4)
    assert relative_error(f.grad.numpy(), numeric) <= 1e-3

    elapsed = time.perf_counter() - started
    assert elapsed < 30.0
    _ok(2, "gradient checks", f"{elapsed:.1f}s")


def test_criterion_3_moe_routing_properties():
    gen = torch.Generator().manual_seed(42)
    for num_experts in range(1, 7):
        for top_k in range(1, min(num_experts, 4) + 1):
            scores = torch.randn(10_000, num_experts, generator=gen).softmax(dim=-1)
            indices, weights = top_k_weights(scores, top_k)
            full = torch.zeros_like(scores).scatter(1, indices, weights)
            nonzero = (full > 0).sum(dim=1)
            assert (nonzero == top_k).all()
            assert (full.sum(dim=1) - 1.0).abs().max() <= 1e-6

    uniform = torch.full((200, 5), 0.2)
    assert abs(float(importance_loss(uniform))) <= 1e-6
    collapse = torch.zeros(200, 5)
    collapse[:, 3] = 1.0
    assert abs(float(importance_loss(collapse)) - 4.0) <= 1e-6
    _ok(3, "MoE routing properties", "T in 1..6, K <= min(T, 4), 1e4 patches each")


def test_criterion_4_metric_oracles():
    rng = np.random.default_rng(123)
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)

    for _ in range(200):
        n = int(rng.integers(3, 65))
        scores = np.round(rng.normal(size=n), 1)
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        assert abs(auroc(scores, labels) - auroc_bruteforce(scores, labels)) <= 1e-9
        if labels.sum() == 0:
            labels[0] = 1
        assert abs(average_precision(scores, labels)
                   - average_precision_bruteforce(scores, labels)) <= 1e-9

    for _ in range(200):
        side = int(rng.integers(3, 9))  # up to 64 pixels per map
        maps = [np.round(rng.random((side, side)), 1)]
        mask = rng.random((side, side)) < 0.3
        if not mask.any():
            mask[1, 1] = True
        if mask.all():
            mask[0, 0] = False
        fast = aupro(maps, [mask], fpr_limit=0.3, connectivity=4)
        brute = aupro_bruteforce(maps, [mask], fpr_limit=0.3, connectivity=4)
        assert abs(fast - brute) <= 1e-6
    _ok(4, "metric oracles", "200 instances per metric")


def test_criterion_5_desk_scale_end_to_end(desk_dataset):
    started = time.perf_counter()
    cfg = desk_config(seed=0)
    train = load_dataset(desk_dataset, "train", resolution=cfg.train.resolution)
    test = load_dataset(desk_dataset, "test", resolution=cfg.train.resolution)
    assert len(train) == 3 * 64 and len(test) == 3 * 24

    state, _ = fit(train, cfg)
    report = evaluate(state, test)
    elapsed = time.perf_counter() - started
    assert report.mean.i_auroc >= 0.85, report.mean
    assert report.mean.p_auroc >= 0.85, report.mean
    assert elapsed <= 900.0
    _ok(5, "desk-scale end-to-end",
        f"I-AUROC={report.mean.i_auroc:.3f} P-AUROC={report.mean.p_auroc:.3f} {elapsed:.0f}s")


def test_criterion_6_guidance_ablation_direction(desk_dataset):
    cfg0 = desk_config()
    train = load_dataset(desk_dataset, "train", resolution=cfg0.train.resolution)
    test = load_dataset(desk_dataset, "test", resolution=cfg0.train.resolution)

    def arm(seed, guidance):
        cfg = desk_config(seed=seed)
        cfg.moe.enabled = False  # fusion on, MoE off
        cfg.train.prompt_guidance = guidance
        state, _ = fit(train, cfg)
        return evaluate(state, test).mean.i_auroc

    seeds = (0, 1, 2)
    with_guidance = [arm(s, True) for s in seeds]
    without = [arm(s, False) for s in seeds]
    mean_on = float(np.mean(with_guidance))
    mean_off = float(np.mean(without))
    assert mean_on >= mean_off - 0.01, (with_guidance, without)
    _ok(6, "cross-modal guidance ablation",
        f"guided={mean_on:.4f} unguided={mean_off:.4f}")


def test_criterion_7_train_determinism(micro_dataset, tmp_path):
    cfg = tiny_config(seed=5)
    cfg.train.epochs = 3
    cfg.data.root = str(micro_dataset)
    config_path = tmp_path / "run.ini"
    config_path.write_text(config_to_ini(cfg))

    logs, reports = [], []
    for name in ("first", "second"):
        out = tmp_path / name
        assert cli(["train", "--config", str(config_path), "--out-dir", str(out)]) == 0
        assert cli(["eval", "--checkpoint", str(out / "checkpoint.npz"),
                    "--report", str(out / "report.csv")]) == 0
        logs.append((out / "train_log.csv").read_bytes())
        reports.append((out / "report.csv").read_bytes())
    assert logs[0] == logs[1]
    assert reports[0] == reports[1]
    _ok(7, "train determinism", "loss logs and eval CSVs byte-identical")


def test_criterion_8_frozen_encoder_hashes(micro_dataset):
    import hashlib

    cfg = tiny_config(seed=6)
    cfg.train.epochs = 2
    train = load_dataset(micro_dataset, "train", resolution=cfg.train.resolution)
    images = torch.stack([s.pixels for s in train[:6]])

    def feature_hash(state):
        maps = state.vision_backend(images)
        blob = b"".join(m.patches.numpy().tobytes() + m.global_feature.numpy().tobytes()
                        for m in maps)
        return hashlib.sha256(blob).hexdigest()

    before = feature_hash(build_state(cfg))
    trained, _ = fit(train, cfg)
    after = feature_hash(trained)
    assert before == after
    _ok(8, "frozen encoder invariant", f"sha256 {after[:12]}…")
