"""Acceptance criteria 1-9, each reported as one PASS/FAIL line.

The desk-scale criteria (5-8) share one fast-preset generator and snapshot pool,
trained once and cached under the pytest cache directory (delete
``.pytest_cache/d/itgan-acceptance`` to retrain).
"""
from __future__ import annotations

import filecmp
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from itgan import augment as A
from itgan import cli, gan
from itgan import condense as C
from itgan import data as D
from itgan import evaluate as E
from itgan import latents as L
from itgan import models as M
from itgan import tensor as T
from itgan.config import RunConfig
from itgan.inversion import invert_batch, inversion_objective
from conftest import ACCEPTANCE, fd_check, rand, tiny_generator
from test_tensor import FD_CASES

CFG = RunConfig.build("fast")
CHANCE = 0.1


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE[n] = line
    print(line)
    assert ok, line


# ------------------------------------------------------------------ artifacts


@pytest.fixture(scope="session")
def desk(request):
    """gen_shapes defaults split once, plus the fast-preset generator and pool."""
    cache = Path(request.config.cache.mkdir("itgan-acceptance"))
    splits = D.split_dataset(D.gen_shapes(seed=CFG["data.seed"]), seed=CFG["data.seed"])
    tag = CFG.hash[:12]
    g_path, p_path = cache / f"generator_{tag}.itgw", cache / f"pool_{tag}.itgw"
    T.set_deterministic(CFG["seed"])
    if not g_path.exists():
        G, _, _ = gan.pretrain(splits["train"], CFG.gan())
        M.save_weights(M.generator_weights(G), g_path)
    if not p_path.exists():
        pool = M.pool_build(splits["train"], splits["val"], CFG["pool.count"], epochs=CFG["pool.epochs"],
                            width=CFG["model.width"], seed=CFG["seed"])
        M.save_pool(pool, p_path)
    G = M.generator_from_weights(M.load_weights(g_path))
    return {**splits, "G": G, "pool": M.load_pool(p_path)}


# ------------------------------------------------------------- 1. gradients


def test_criterion_1_gradient_integrity():
    t0 = time.process_time()
    errs: dict[str, float] = {}
    with T.float64_mode():
        for name, (fn, shape) in sorted(FD_CASES.items()):
            x = rand(*shape, seed=11)
            errs[name] = fd_check(lambda: fn(x), x)
        G = M.generator_from_weights(M.generator_weights(tiny_generator())).double()
        psi = M.embedder_init_random(5, width=4).double()
        z = rand(3, 8, seed=5)
        reals = [rand(4, 1, 16, 16, seed=6)]
        omega = [A.AugmentParams("scale", scale=1.1)]
        loss_errs = {
            "L_con": fd_check(lambda: C.con_loss(psi, reals, [z], G, omega), z, h=1e-6),
            "R": fd_check(lambda: C.reg_loss(psi, [reals[0][:3]], [z], G, omega), z, h=1e-6),
        }
        net = M.embedder_init_random(1, n_classes=3, width=3).double()
        real, synth = rand(4, 1, 16, 16, seed=1), rand(3, 1, 16, 16, seed=2)
        yr, ys = torch.tensor([0, 1, 2, 0]), torch.tensor([1, 2, 0])
        loss_errs["grad-match"] = fd_check(lambda: C.grad_match_loss(net, real, synth, yr, ys), synth, h=1e-6)
    secs = time.process_time() - t0
    worst_op = max(errs, key=errs.get)
    worst_loss = max(loss_errs, key=loss_errs.get)
    ok = errs[worst_op] < 1e-5 and loss_errs[worst_loss] < 1e-4 and secs < 120
    verdict(1, ok, f"{len(errs)} ops max rel err {errs[worst_op]:.1e} ({worst_op}); loss paths max "
                   f"{loss_errs[worst_loss]:.1e} ({worst_loss}); {secs:.0f}s")


# --------------------------------------------------------- 2. loss identities


def test_criterion_2_loss_identities():
    G = tiny_generator()
    psi = M.embedder_init_random(5, width=4)
    z = [torch.randn(5, 8, generator=T.generator(c)) for c in range(2)]
    with torch.no_grad():
        reals = [G(zc, torch.full((5,), c)) for c, zc in enumerate(z)]
    omegas = [A.AugmentParams("rotate", angle_deg=7.0), A.AugmentParams("flip-h")]
    l_con = C.con_loss(psi, reals, z, G, omegas).item()
    r = C.reg_loss(psi, reals, z, G, omegas).item()
    y = torch.tensor([0, 1, 2, 3])
    zz = torch.randn(4, 8, generator=T.generator(3))
    inv = inversion_objective(G, psi, zz, y, G(zz, y).detach()).abs().max().item()
    lc, rr = torch.tensor(0.7), torch.tensor(1.9)
    total_ok = all(C.total_loss(lc, rr, lam).item() == ((1 - lam) * lc + lam * rr).item() for lam in (0.0, 0.5, 1.0))
    ok = l_con <= 1e-6 and r == 0.0 and inv == 0.0 and total_ok
    verdict(2, ok, f"L_con={l_con:.1e} R={r:.1e} inversion={inv:.1e} total_loss exact={total_ok}")


# ----------------------------------------------------------- 3. siamese


def test_criterion_3_siamese_contract():
    x = torch.randn(4, 1, 16, 16, generator=T.generator(0))
    rng = np.random.default_rng(0)
    failures = []
    for kind in A.KINDS:
        cfg = A.AugmentConfig(ops=(kind,))
        for _ in range(5):
            omega = A.sample_omega(rng, cfg, 16)
            a, b = A.siamese_apply(x, x.clone(), omega)
            if not torch.equal(a, b):
                failures.append(kind)
    flip = A.AugmentParams("flip-h")
    involution = torch.equal(A.apply(A.apply(x, flip), flip), x)
    identity = torch.equal(A.apply(x, A.NONE), x)
    ok = not failures and involution and identity
    verdict(3, ok, f"{len(A.KINDS)} kinds bit-identical (failures: {sorted(set(failures)) or 'none'}); "
                   f"flip-h involution={involution}; none identity={identity}")


# ---------------------------------------------- 4. frozen G and labels


def test_criterion_4_frozen_generator_and_labels(desk):
    t0 = time.process_time()
    G, pool, train = desk["G"], desk["pool"], desk["train"]
    z0 = L.random_latents(train, 10, G.latent_dim, seed=0)
    before = M.state(G)
    out, rep = C.condense_run(G, pool, train, z0, CFG.condense(0))
    bit_equal = M.weights_equal(before, M.state(G))
    label_diff = int((out.labels != z0.labels).sum() + (out.indices != z0.indices).sum())
    secs = time.process_time() - t0
    ok = bit_equal and label_diff == 0 and rep.frozen_ok and rep.labels_ok and secs < 300
    verdict(4, ok, f"{CFG['condense.iterations']} iterations; weights bit-equal={bit_equal}; "
                   f"label diff={label_diff}; {secs:.0f}s")


# ----------------------------------------------------- 5. inversion efficacy


def test_criterion_5_inversion_efficacy(desk):
    t0 = time.process_time()
    train = desk["train"]
    idx = np.concatenate([train.class_indices(c)[:7] for c in range(10)])[:64]
    x, y = train.images()[idx], train.targets()[idx]
    res = invert_batch(desk["G"], E.inversion_extractor(desk["pool"]), x, y, CFG.inversion(), T.generator(0))
    first, last = res.initial_objective.median().item(), res.objective.median().item()
    secs = time.process_time() - t0
    ok = last <= 0.5 * first and secs < 300
    verdict(5, ok, f"median objective {first:.3f} -> {last:.3f} (ratio {last / first:.2f}) over 64 images; {secs:.0f}s")


# ---------------------------------------------- 6 and 7. headline ordering


@pytest.fixture(scope="session")
def comparison(desk):
    G, train, val, test = desk["G"], desk["train"], desk["val"], desk["test"]
    gate = gan.sanity_gate(G, val, CFG["gan.gate_per_class"], CFG["gan.gate_epochs"], CFG["model.width"], CFG["seed"])
    # Class fidelity: a real-trained classifier should recognize the generator's classes.
    net, _ = E.train_classifier(train.images(), train.targets(), test, replace(CFG.eval(), epochs=10), 0)
    xs, ys = gan.sample_dataset(G, 100, seed=1)
    net.eval()
    with torch.no_grad():
        fidelity = float((net(xs).argmax(1) == ys).float().mean())
    t0 = time.process_time()
    results = E.compare_methods(G, desk["pool"], train, test, [50], [0, 1, 2], [100, 101, 102],
                                CFG.inversion(), CFG.condense(), CFG.eval())
    return {"gate": gate, "fidelity": fidelity, "seconds": time.process_time() - t0,
            "by": {r.method: r for r in results}}


def test_criterion_6_headline_ordering(comparison):
    by, gate, fid = comparison["by"], comparison["gate"], comparison["fidelity"]
    m = {k: r.mean for k, r in by.items()}
    pre = gate > 2 * CHANCE and fid > 2 * CHANCE
    ok = (pre and m["itgan"] > m["inversion"] and m["itgan"] >= m["gan-random"] + 0.01
          and m["real"] >= m["itgan"] - 0.01 and comparison["seconds"] < 1800)
    verdict(6, ok, "itgan {itgan:.3f} inversion {inversion:.3f} gan-random {gan-random:.3f} real {real:.3f}".format(**m)
            + f" (3x3 runs); gate {gate:.2f} fidelity {fid:.2f}; {comparison['seconds']:.0f}s")


def test_criterion_7_condensation_progress(comparison):
    traces = comparison["by"]["itgan"].extra["L_con_trace"]
    progress = [C.smoothed_progress(t) for t in traces]
    ok = len(progress) == 3 and all(last <= first for first, last in progress)
    detail = "; ".join(f"seed {i}: {f:.3f} -> {l:.3f}" for i, (f, l) in enumerate(progress))
    verdict(7, ok, f"smoothed L_con first/last 10%: {detail}")


# ------------------------------------------------------------- 8. ablations

ABLATION = E.AblationSettings(per_class=20, lambdas=(0.0, 0.5), latent_seeds=(0, 1, 2), train_seeds=(100,))


def test_criterion_8_ablation_trends(desk):
    t0 = time.process_time()
    out = E.ablation_suite(desk["G"], desk["pool"], desk["train"], desk["test"], ABLATION, CFG.inversion(),
                           replace(CFG.condense(), iterations=60), CFG.eval())
    secs = time.process_time() - t0
    earlier = [ACCEPTANCE.get(n, "") for n in range(1, 8)]
    prior_ok = all(": PASS" in line for line in earlier)
    trends = ", ".join(f"{k}={'pass' if t['passed'] else 'fail'} ({t['a']:.3f} vs {t['b']:.3f})"
                       for k, t in out["trends"].items())
    ok = out["completed"] and out["trends_passed"] >= 3 and prior_ok and secs < 3600
    verdict(8, ok, f"{out['trends_passed']}/4 trends [{trends}]; criteria 1-7 passing={prior_ok}; {secs:.0f}s")


# ------------------------------------------------------- 9. reproducibility

STAGES = ("dataset-gen", "gan-pretrain", "pool-build", "invert", "condense", "eval", "ablate", "report")


def _artifacts(run: Path) -> list[Path]:
    return sorted(p.relative_to(run) for p in run.rglob("*") if p.is_file() and p.name != "timings.jsonl")


def test_criterion_9_reproducibility(tmp_path):
    runs = [tmp_path / "a", tmp_path / "b"]
    codes = [[cli.main(["--run", str(r), "--preset", "smoke", s]) for s in STAGES] for r in runs]
    files_a, files_b = _artifacts(runs[0]), _artifacts(runs[1])
    differing = [str(f) for f in files_a if not filecmp.cmp(runs[0] / f, runs[1] / f, shallow=False)] \
        if files_a == files_b else ["<file sets differ>"]
    binaries = sum(f.suffix in (".itgw", ".itgz", ".itgd") for f in files_a)
    ok = codes == [[0] * len(STAGES)] * 2 and not differing and binaries > 0
    verdict(9, ok, f"{len(files_a)} files ({binaries} ITGW/ITGZ/ITGD) compared over {len(STAGES)} smoke stages; "
                   f"differing: {differing or 'none'}")


def test_ordering_numbers_are_finite(comparison):
    assert all(math.isfinite(r.mean) for r in comparison["by"].values())
