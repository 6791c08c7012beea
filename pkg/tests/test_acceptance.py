"""Acceptance criteria 1-9. Each test prints one ``CRITERION n: PASS|FAIL`` line.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines inline; they
are also repeated in the pytest terminal summary.
"""
import os
import statistics
import time
from pathlib import Path

import mpmath
import numpy as np
import pytest
import torch

from acceptance_log import verdict
from fd_oracle import check_module_grads
from mfef import losses as L
from mfef.attention import AttentionConfig, DualAttention
from mfef.config import ExperimentConfig, bundled_config
from mfef.core_types import is_prob_dist, make_rng, reset_parameters
from mfef.data import CifarFormatError, load_dataset, parse_cifar_records, serialize_cifar_records
from mfef.fusion import FeatureFusion, FusionConfig
from mfef.msfe import MsfeConfig, MultiScaleExtraction, receptive_field_of_stage
from mfef.trainer import compute_losses, run_ablation, train

D = torch.float64
mpmath.mp.dps = 50


def smoke_config():
    return ExperimentConfig.loads(bundled_config("synthetic_smoke"))


@pytest.fixture(scope="module")
def smoke():
    cfg = smoke_config()
    train_set, test_set = load_dataset(cfg.dataset, seed=0)
    return cfg, train_set, test_set


@pytest.fixture(scope="module")
def smoke_run(smoke, tmp_path_factory):
    cfg, train_set, test_set = smoke
    out = tmp_path_factory.mktemp("smoke")
    t0 = time.perf_counter()
    rep = train(cfg.cohort, cfg.archs, train_set, test_set, seed=0, out_dir=out)
    return rep, time.perf_counter() - t0, out


# ---------------------------------------------------------------- criterion 1

def _mp_softmax(z, T):
    e = [mpmath.exp(mpmath.mpf(v) / T) for v in z]
    s = mpmath.fsum(e)
    return [x / s for x in e]


def test_criterion_1_loss_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {"softmax_t": 0.0, "cross_entropy": 0.0, "kl_div": 0.0}
    for _ in range(1000):
        k = int(rng.integers(2, 21))
        T = float(rng.uniform(0.5, 10.0))
        z = rng.normal(0, 4, size=k)
        z2 = rng.normal(0, 4, size=k)
        label = int(rng.integers(k))
        mT = mpmath.mpf(T)
        ps, qs = _mp_softmax(z, mT), _mp_softmax(z2, mT)
        ce_ref = -mpmath.log(max(ps[label], mpmath.mpf("1e-12")))
        kl_ref = mpmath.fsum(p * mpmath.log(p / q) for p, q in zip(ps, qs))

        p = L.softmax_t(torch.tensor(z[None], dtype=D), T)
        q = L.softmax_t(torch.tensor(z2[None], dtype=D), T)
        worst["softmax_t"] = max(worst["softmax_t"], max(abs(float(a) - float(b)) for a, b in zip(p[0].tolist(), ps)))
        ce = L.cross_entropy(p, torch.tensor([label]))
        worst["cross_entropy"] = max(worst["cross_entropy"], abs(float(ce) - float(ce_ref)))
        worst["kl_div"] = max(worst["kl_div"], abs(float(L.kl_div(p, q)) - float(kl_ref)))
    dt = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-10 and dt < 10
    verdict(1, ok, "max abs error " + ", ".join(f"{k}={v:.2e}" for k, v in worst.items())
            + f" (tol 1e-10), {dt:.1f}s (limit 10s)")


# ---------------------------------------------------------------- criterion 2

def _random_instance(m, rng, seed):
    """Random weights, including norm-layer affine terms: gamma=1, beta=0 is a
    scale-invariant point where some gradients vanish to round-off level."""
    reset_parameters(m, make_rng(seed))
    with torch.no_grad():
        for mod in m.modules():
            if isinstance(mod, torch.nn.BatchNorm2d):
                mod.weight.copy_(torch.from_numpy(rng.uniform(0.5, 1.5, mod.num_features)))
                mod.bias.copy_(torch.from_numpy(rng.normal(0, 0.5, mod.num_features)))
    return m.double()


def _randn(rng, *shape):
    return torch.from_numpy(rng.normal(size=shape)).requires_grad_(True)


def _msfe_instance(rng, seed):
    m = MultiScaleExtraction(8, MsfeConfig(groups=int(rng.choice([2, 3, 4]))))
    _random_instance(m, rng, seed)
    x, up = _randn(rng, 2, 8, 4, 4), torch.from_numpy(rng.normal(size=(2, 8, 4, 4)))
    return lambda: (m(x) * up).sum(), {"input": x, **dict(m.named_parameters())}, m


def _da_instance(rng, seed):
    m = DualAttention(8, AttentionConfig(reduction_ratio=2, spatial_kernel=3))
    _random_instance(m, rng, seed)
    x, up = _randn(rng, 2, 8, 4, 4), torch.from_numpy(rng.normal(size=(2, 8, 4, 4)))
    return lambda: (m(x) * up).sum(), {"input": x, **dict(m.named_parameters())}, m


def _fusion_instance(rng, seed):
    m = FeatureFusion([8, 8], FusionConfig(target_channels=8, num_classes=5))
    _random_instance(m, rng, seed)
    xs = [_randn(rng, 2, 8, 4, 4) for _ in range(2)]
    up = torch.from_numpy(rng.normal(size=(2, 5)))
    return lambda: (m(xs)[1] * up).sum(), {"x0": xs[0], "x1": xs[1], **dict(m.named_parameters())}, m


class _Composite(torch.nn.Module):
    """Student heads plus the extraction/attention/fusion path on given last-stage maps."""

    def __init__(self, classes=5):
        super().__init__()
        self.heads = torch.nn.ModuleList(torch.nn.Linear(8, classes) for _ in range(2))
        self.ext = torch.nn.ModuleList(MultiScaleExtraction(8, MsfeConfig(groups=2)) for _ in range(2))
        self.att = torch.nn.ModuleList(DualAttention(8, AttentionConfig(2, 3)) for _ in range(2))
        self.fusion = FeatureFusion([8, 8], FusionConfig(8, classes))

    def forward(self, fms):
        zs = [h(f.mean(dim=(2, 3))) for h, f in zip(self.heads, fms)]
        refined = [a(e(f)) for a, e, f in zip(self.att, self.ext, fms)]
        return {"logits": zs, "fusion_logits": self.fusion(refined)[1]}


def _composite_instance(rng, seed):
    m = _Composite()
    _random_instance(m, rng, seed)
    fms = [_randn(rng, 2, 8, 4, 4) for _ in range(2)]
    labels = torch.from_numpy(rng.integers(0, 5, size=2))
    T, ramp = 3.0, float(rng.uniform(0.1, 1.0))
    # freeze the soft targets at the evaluation point so the finite differences
    # see the same function autograd differentiates under the stop-gradient
    with torch.no_grad():
        out = m(fms)
        teachers = {"aggregate": L.softmax_t(L.aggregate_logits(out["logits"]), T),
                    "fusion": L.softmax_t(out["fusion_logits"], T)}
    loss = lambda: compute_losses(m(fms), labels, ramp, T, teachers)[0]  # noqa: E731
    return loss, {"f0": fms[0], "f1": fms[1], **dict(m.named_parameters())}, m


KINK_MARGIN = 1e-4  # 10 h


def _min_relu_input(module, loss_fn) -> float:
    """Smallest |input| seen by any ReLU; central differences are meaningless within h of a kink."""
    seen = []
    hooks = [m.register_forward_hook(lambda _m, i, _o: seen.append(float(i[0].detach().abs().min())))
             for m in module.modules() if isinstance(m, torch.nn.ReLU)]
    try:
        with torch.no_grad():
            loss_fn()
    finally:
        for h in hooks:
            h.remove()
    return min(seen, default=float("inf"))


def test_criterion_2_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst, rejected = {}, {}
    builders = {"msfe": (_msfe_instance, 40), "dual_attention": (_da_instance, 40),
                "fusion": (_fusion_instance, 40), "composite_loss": (_composite_instance, 12)}
    for name, (build, k) in builders.items():
        worst[name], rejected[name] = 0.0, 0
        accepted, seed = 0, 0
        while accepted < 20:
            loss_fn, tensors, module = build(rng, seed)
            seed += 1
            if _min_relu_input(module, loss_fn) < KINK_MARGIN:
                rejected[name] += 1
                continue
            errs = check_module_grads(loss_fn, tensors, rng, k=k)
            worst[name] = max(worst[name], max(errs.values()))
            accepted += 1
    dt = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and dt < 120
    verdict(2, ok, "20 instances each, max rel error " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
            + f" (tol 1e-4); draws within {KINK_MARGIN:g} of a ReLU kink redrawn: {rejected}; "
            f"{dt:.0f}s (limit 120s)")


# ---------------------------------------------------------------- criterion 3

def test_criterion_3_structural_invariants():
    t0 = time.perf_counter()
    failures = []
    g = torch.Generator().manual_seed(0)
    for C in (16, 32, 64):
        for p in (2, 3, 4):
            m = MultiScaleExtraction(C, MsfeConfig(groups=p))
            x = torch.randn(2, C, 6, 6, generator=g)
            if m(x).shape != x.shape:
                failures.append(f"msfe C={C} p={p}")
    for seed in range(10):
        a = DualAttention(16, AttentionConfig(4, 7))
        reset_parameters(a, make_rng(seed))
        x = torch.randn(2, 16, 6, 6, generator=g) * 4
        wc, xc = a.channel_attention(x)
        ws, _ = a.spatial_attention(xc)
        if not (bool(((wc > 0) & (wc < 1)).all()) and bool(((ws > 0) & (ws < 1)).all())):
            failures.append(f"attention range seed={seed}")
    for seed in range(50):
        z = torch.randn(4, 10, generator=g, dtype=D) * (seed + 1)
        for T in (0.5, 1.0, 3.0, 20.0):
            for p in (L.softmax_t(z, T), L.softmax_t(L.aggregate_logits([z, z.flip(1)]), T)):
                if not is_prob_dist(p):
                    failures.append(f"probdist seed={seed} T={T}")
    for k in (3, 5, 7):
        cfg = MsfeConfig(groups=4, conv_kernel=k)
        rf = [receptive_field_of_stage(cfg, s) for s in range(1, 5)]
        if any(b <= a for a, b in zip(rf, rf[1:])):
            failures.append(f"receptive field kernel={k}: {rf}")
    dt = time.perf_counter() - t0
    ok = not failures and dt < 30
    verdict(3, ok, ("all invariants hold" if not failures else f"violations: {failures[:5]}")
            + f" (9 MSFE configs, 10 attention draws, 400 distributions), {dt:.1f}s (limit 30s)")


# ---------------------------------------------------------------- criterion 4

def test_criterion_4_t_squared_balance():
    parts = L.total_loss([2.5], 0.0, 0.1, 0.2, ramp=1.0, T=3.0)
    exact_identity = parts.total == 2.5 + 1.0 * 3.0 ** 2 * (0.1 + 0.2)
    example = abs(parts.total - 5.2) < 1e-12
    rng = np.random.default_rng(4)
    identity_random = True
    for _ in range(200):
        ce = rng.uniform(0, 5, size=3).tolist()
        a, f, lam, T = rng.uniform(0, 2), rng.uniform(0, 2), rng.uniform(0, 1), rng.uniform(0.5, 8)
        b = L.total_loss(ce[:2], ce[2], a, f, lam, T)
        identity_random &= b.total == (ce[0] + ce[1]) + ce[2] + lam * (T * T) * (a + f)
    z = torch.from_numpy(rng.normal(size=(256, 10)) * 3)
    argmax_invariant = all(torch.equal(L.softmax_t(z, T).argmax(1), z.argmax(1)) for T in (0.25, 1, 3, 10, 100))
    ok = exact_identity and example and identity_random and argmax_invariant
    verdict(4, ok, f"T=3 parts (2.5, 0.1, 0.2) -> {parts.total!r} (expected 5.2); identity exact on 200 draws: "
            f"{identity_random}; argmax T-invariant: {argmax_invariant}")


# ---------------------------------------------------------------- criterion 5

def test_criterion_5_synthetic_convergence(smoke_run):
    rep, dt, _ = smoke_run
    s = rep.summary
    totals = [e["loss"]["total"] for e in rep.epochs]
    windows = [float(np.mean(totals[i:i + 5])) for i in range(0, len(totals), 5)]
    monotone = all(b < a for a, b in zip(windows, windows[1:]))
    students_ok = all(e < 5.0 for e in s["train_error_students"])
    fusion_ok = s["train_error_fusion"] is not None and s["train_error_fusion"] < 5.0
    ok = students_ok and fusion_ok and monotone and dt < 300
    verdict(5, ok, f"train error students {[round(e, 2) for e in s['train_error_students']]}%, "
            f"fusion {s['train_error_fusion']:.2f}% (limit 5%); 5-epoch window loss "
            f"{[round(w, 3) for w in windows]} monotone={monotone}; {dt:.0f}s (limit 300s)")


# ---------------------------------------------------------------- criterion 6

def _cifar_root():
    root = os.environ.get("MFEF_DATA_ROOT")
    if not root:
        return None
    p = Path(root)
    for cand in (p, p / "cifar-10-batches-bin"):
        if (cand / "data_batch_1.bin").exists() and (cand / "test_batch.bin").exists():
            return p
    return None


def test_criterion_6_cifar_subset_non_regression(tmp_path):
    root = _cifar_root()
    if root is None:
        verdict(6, False, "CIFAR-10 binary batches not found (set MFEF_DATA_ROOT to a directory holding "
                "cifar-10-batches-bin); the 5k/1k, 60-epoch, 3-seed res-20 comparison could not run")
        return
    cfg = ExperimentConfig.loads(bundled_config("cifar10_res20_subset"))
    cfg.dataset.root = str(root)
    train_set, test_set = load_dataset(cfg.dataset)
    mfef, single = [], []
    for seed in (0, 1, 2):
        rep = train(cfg.cohort, cfg.archs, train_set, test_set, seed=seed, policy=cfg.augment,
                    out_dir=tmp_path / f"mfef_{seed}")
        mfef.append(rep.summary["best_student_test_error"])
        # independent students: student 0 is a single supervised res-20
        base = run_ablation("A", cfg.cohort, cfg.archs, train_set, test_set, seed=seed, policy=cfg.augment,
                            out_dir=tmp_path / f"base_{seed}")
        single.append(base.summary["test_error_students"][0])
    m, b = statistics.median(mfef), statistics.median(single)
    verdict(6, m <= b, f"median best-student test error MFEF {m:.2f}% vs single res-20 {b:.2f}% "
            f"(runs {mfef} vs {single})")


# ---------------------------------------------------------------- criterion 7

def test_criterion_7_ablation_ordering(smoke):
    cfg, train_set, test_set = smoke
    med = {}
    for case in ("A", "C", "D", "E"):
        errs = []
        for seed in (0, 1, 2):
            tr, te = load_dataset(cfg.dataset, seed=seed)
            rep = run_ablation(case, cfg.cohort, cfg.archs, tr, te, seed=seed)
            errs.append(rep.summary["best_student_test_error"])
        med[case] = statistics.median(errs)
    ok = med["E"] <= med["D"] <= med["C"] and med["E"] <= med["A"]
    verdict(7, ok, "median best-student test error " + ", ".join(f"{c}={v:.2f}%" for c, v in med.items())
            + " (need E <= D <= C and E <= A, ties allowed)")


# ---------------------------------------------------------------- criterion 8

def test_criterion_8_determinism_and_resume(smoke, smoke_run, tmp_path):
    cfg, train_set, test_set = smoke
    first, _, first_dir = smoke_run
    again = train(cfg.cohort, cfg.archs, train_set, test_set, seed=0, out_dir=tmp_path / "again")
    rerun_equal = (again.summary == first.summary
                   and (tmp_path / "again" / "summary.json").read_bytes() == (first_dir / "summary.json").read_bytes())
    part = train(cfg.cohort, cfg.archs, train_set, test_set, seed=0, out_dir=tmp_path / "resume", stop_after=10)
    resumed = train(cfg.cohort, cfg.archs, train_set, test_set, seed=0, out_dir=tmp_path / "resume", resume=True)
    resume_equal = (len(part.epochs) == 10 and resumed.summary == first.summary
                    and resumed.epochs == first.epochs)
    verdict(8, rerun_equal and resume_equal, f"rerun summary byte-identical: {rerun_equal}; "
            f"10 epochs + checkpoint + resume to 30 equals straight run: {resume_equal}")


# ---------------------------------------------------------------- criterion 9

def test_criterion_9_cifar_format():
    rng = np.random.default_rng(9)
    x = rng.integers(0, 256, size=(200, 3, 32, 32), dtype=np.uint8)
    y = rng.integers(0, 10, size=200)
    buf = serialize_cifar_records(x, y)
    x2, y2, _ = parse_cifar_records(buf)
    round_trip = serialize_cifar_records(x2, y2) == buf and len(buf) == 200 * 3073

    bad = bytearray(buf)
    bad[57 * 3073] = 10
    try:
        parse_cifar_records(bytes(bad))
        label_diag = False
    except CifarFormatError as e:
        label_diag = e.offset == 57 * 3073 and str(57 * 3073) in str(e)
    try:
        parse_cifar_records(buf[:-1])
        trunc_diag = False
    except CifarFormatError as e:
        trunc_diag = e.offset == 199 * 3073 and str(199 * 3073) in str(e)
    ok = round_trip and label_diag and trunc_diag
    verdict(9, ok, f"byte-exact round trip: {round_trip}; bad label names offset: {label_diag}; "
            f"truncation names offset: {trunc_diag}")
