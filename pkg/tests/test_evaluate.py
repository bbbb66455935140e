from __future__ import annotations

import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from itgan import data as D
from itgan import evaluate as E
from itgan import latents as L
from itgan import report as R
from itgan import tensor as T
from itgan.condense import CondenseConfig
from itgan.inversion import InversionConfig

EVAL = E.EvalConfig(epochs=2, width=8, batch=32)
INV = InversionConfig(steps=2, restarts=1, batch=16)
COND = CondenseConfig(iterations=2, lr=0.01, batch_z=4, batch_real=8, width=8)


def _result(accs, method="itgan") -> E.ExperimentResult:
    runs = [E.Run(0, i, a, 2, {"epoch": [0, 1, 2], "train_acc": [0.1, 0.2, 0.3], "test_acc": [0.1, a / 2, a]})
            for i, a in enumerate(accs)]
    return E.ExperimentResult(method, "convnet", 5, runs, "abc")


def test_eval_config_validation():
    with pytest.raises(ValueError, match="even"):
        E.EvalConfig(epochs=3)
    with pytest.raises(ValueError, match="architecture"):
        E.EvalConfig(arch="mlp")
    fc = E.EvalConfig(epochs=10).fit_config()
    assert fc.lr_decay_at == 0.5 and fc.lr_decay == pytest.approx(0.1) and fc.momentum == 0.9


def test_aggregates_use_population_std():
    res = _result([0.5, 0.7, 0.9])
    assert res.mean == pytest.approx(0.7, abs=1e-12)
    assert res.std == pytest.approx(math.sqrt(((0.2**2) * 2) / 3), abs=1e-12)


def test_failed_runs_excluded_from_aggregates():
    res = _result([0.4, 0.6])
    res.runs.append(E.Run(0, 9, float("nan"), 2, {}, error="diverged"))
    assert res.accuracies == [0.4, 0.6] and res.mean == pytest.approx(0.5)
    assert math.isnan(E.ExperimentResult("x", "convnet", 1, []).mean)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=9))
def test_aggregates_recomputable(accs):
    res = _result(accs)
    back = E.ExperimentResult.from_json(json.loads(json.dumps(res.to_json())))
    assert abs(back.mean - float(np.mean(accs))) <= 1e-9
    assert abs(back.std - float(np.std(accs))) <= 1e-9
    assert back.accuracies == res.accuracies and back.config_hash == "abc"


def test_mean_curve():
    epochs, curve = _result([0.4, 0.8]).mean_curve()
    assert epochs == [0, 1, 2]
    assert curve == pytest.approx([0.1, 0.3, 0.6])


def test_materialize_counts_and_determinism(frozen_G, tiny_splits):
    Z = L.random_latents(tiny_splits["train"], 3, 8, seed=0)
    a, b = E.materialize(frozen_G, Z), E.materialize(frozen_G, Z, batch=5)
    assert len(a) == 12 and a.images.shape == (12, 1, 16, 16)
    assert torch.equal(a.labels, torch.from_numpy(Z.labels))
    assert torch.equal(a.images, E.materialize(frozen_G, Z).images)
    assert torch.allclose(a.images, b.images, atol=1e-6)


def test_quantization_bound(frozen_G, tiny_splits):
    synth = E.materialize(frozen_G, L.random_latents(tiny_splits["train"], 4, 8, seed=1))
    back = synth.to_dataset().images()
    assert (back - synth.images).abs().max().item() <= 1 / 127.5 + 1e-6
    x, _ = E._train_inputs(synth, E.EvalConfig(epochs=2, quantize=True))
    assert torch.equal(x, back)
    x, _ = E._train_inputs(synth, EVAL)
    assert x is synth.images


def test_zero_epochs_is_near_chance():
    ds = D.split_dataset(D.gen_shapes(n_classes=10, per_class=60, seed=0), seed=0)
    accs = []
    for seed in range(5):
        _, curves = E.train_classifier(ds["train"].images(), ds["train"].targets(), ds["test"],
                                       E.EvalConfig(epochs=0, width=8), seed)
        accs.append(curves.final_test_acc)
    assert abs(np.mean(accs) - 0.1) <= 0.05


def test_train_classifier_deterministic_and_rejects_empty(tiny_splits):
    tr, te = tiny_splits["train"], tiny_splits["test"]
    _, c1 = E.train_classifier(tr.images(), tr.targets(), te, EVAL, 3)
    _, c2 = E.train_classifier(tr.images(), tr.targets(), te, EVAL, 3)
    assert json.dumps(c1.as_dict()) == json.dumps(c2.as_dict()) and c1.epoch == [0, 1, 2]
    with pytest.raises(ValueError):
        E.train_classifier(torch.zeros(0, 1, 16, 16), torch.zeros(0, dtype=torch.long), te, EVAL, 0)


def test_evaluate_set_records_divergence(tiny_splits):
    tr, te = tiny_splits["train"], tiny_splits["test"]
    x = tr.images().clone()
    x[0, 0, 0, 0] = float("inf")
    runs = E.evaluate_set(x, tr.targets(), te, E.EvalConfig(epochs=2, width=8, augment=False, batch=256), [0, 1], 7)
    assert len(runs) == 2
    assert all(r.error and math.isnan(r.test_acc) and r.seed_latent == 7 for r in runs)


def test_compare_methods_tiny(frozen_G, pool, tiny_splits):
    events: list[dict] = []
    res = E.compare_methods(frozen_G, pool, tiny_splits["train"], tiny_splits["test"], [2], [0], [0, 1],
                            INV, COND, EVAL, emit=events.append)
    assert [r.method for r in res] == ["real", "gan-random", "inversion", "itgan"]
    assert all(len(r.runs) == 2 and r.config_hash for r in res)
    assert len({r.config_hash for r in res[1:]}) == 3
    itgan = res[-1]
    assert itgan.extra["frozen_ok"] == [True] and itgan.extra["labels_ok"] == [True]
    assert [e["method"] for e in events] == [r.method for r in res]
    json.loads(E.results_json(res))
    with pytest.raises(ValueError):
        E.compare_methods(frozen_G, pool, tiny_splits["train"], tiny_splits["test"], [2], [0], [0], methods=["dm"])


def test_seed_isolation(frozen_G, pool, tiny_splits):
    # Changing the classifier seed must not touch the latent set it trains on.
    args = (frozen_G, pool, tiny_splits["train"], tiny_splits["test"], [2], [0])
    a = E.compare_methods(*args, [0], INV, COND, EVAL, methods=["itgan"])[0]
    b = E.compare_methods(*args, [5], INV, COND, EVAL, methods=["itgan"])[0]
    assert a.extra["L_con_trace"] == b.extra["L_con_trace"]
    assert a.config_hash == b.config_hash


def test_cross_arch_matches_compare(frozen_G, pool, tiny_splits):
    tr, te = tiny_splits["train"], tiny_splits["test"]
    Z = L.random_latents(tr, 2, 8, seed=0)
    out = E.cross_arch_eval(frozen_G, Z, te, ["convnet", "vggish", "resnetish"], EVAL, [0])
    assert [r.arch for r in out] == ["convnet", "vggish", "resnetish"]
    assert all(len(r.runs) == 1 and r.size_per_class == 2 for r in out)
    gr = E.compare_methods(frozen_G, pool, tr, te, [2], [0], [0], INV, COND, EVAL, methods=["gan-random"])[0]
    assert out[0].runs[0].test_acc == gr.runs[0].test_acc
    back = [E.ExperimentResult.from_json(d) for d in json.loads(E.results_json(out))]
    assert E.results_json(back) == E.results_json(out)


def test_ablation_suite_completes(frozen_G, pool, tiny_splits, monkeypatch):
    real_split = E.split_and_run

    def flaky(G, pool_, ds, init, cfg, *a, **k):
        if cfg.lam == 0.5 and cfg.split_strategy == "random":
            raise T.NonFiniteError("injected")
        return real_split(G, pool_, ds, init, cfg, *a, **k)

    monkeypatch.setattr(E, "split_and_run", flaky)
    s = E.AblationSettings(per_class=4, splits=(1, 2), lambdas=(0.0, 0.5), latent_seeds=(0,), train_seeds=(0,))
    seen: list[dict] = []
    out = E.ablation_suite(frozen_G, pool, tiny_splits["train"], tiny_splits["test"], s, INV, COND, EVAL, emit=seen.append)
    assert out["completed"]
    names = set(out["conditions"])
    assert {"objective=distribution", "objective=gradient", "split=1x4", "split=2x2",
            "strategy=fixed,lambda=0", "strategy=random,lambda=0.5", "embedder=top", "embedder=random-init",
            "embedder=all"} <= names
    assert not out["conditions"]["strategy=random,lambda=0.5"]["ok"]
    # Identical configurations are trained once and shared.
    assert out["conditions"]["strategy=fixed,lambda=0"]["same_as"] == "split=2x2"
    assert out["conditions"]["embedder=all"]["same_as"] == "split=1x4"
    assert out["conditions"]["embedder=random-init"]["same_as"] == "objective=distribution"
    assert "injected" in out["conditions"]["strategy=random,lambda=0.5"]["error"]
    assert set(out["trends"]) == {"split_size", "fixed_vs_random", "top_bin_vs_random_init", "distribution_vs_gradient"}
    assert out["trends_passed"] == sum(t["passed"] for t in out["trends"].values())
    assert len(seen) == len(names)
    json.dumps(out)


def test_trend_with_missing_side_fails():
    assert not E._trend(True, float("nan"), 0.5)["passed"]
    assert E._trend(True, 0.4, 0.5)["passed"]


# --------------------------------------------------------------------- reports


def _write_eval(run_dir, runs):
    ev = run_dir / "eval"
    ev.mkdir(parents=True)
    sink = R.JsonLines(ev / "report.jsonl")
    for r in runs:
        sink({"event": "run", **r})
    (ev / "summary.json").write_text(json.dumps({"aggregates": R.aggregate(runs)}))


def _run(method, acc, seed):
    return {"method": method, "arch": "convnet", "size_per_class": 5, "seed_latent": 0, "seed_train": seed,
            "test_acc": acc, "epochs": 2, "error": None,
            "curves": {"epoch": [0, 1, 2], "train_acc": [0.0, 0.5, 0.6], "test_acc": [0.1, acc - 0.1, acc]}}


def test_render_idempotent_and_consistent(tmp_path):
    _write_eval(tmp_path, [_run("itgan", 0.8, 0), _run("itgan", 0.6, 1), _run("gan-random", 0.3, 0)])
    files = R.render(tmp_path)
    first = {k: p.read_bytes() for k, p in files.items()}
    files = R.render(tmp_path)
    assert {k: p.read_bytes() for k, p in files.items()} == first
    summary = json.loads(files["summary"].read_text())
    assert summary["consistency"]["ok"] and summary["consistency"]["max_abs_diff"] <= 1e-9
    sizes = files["sizes"].read_text().splitlines()
    assert sizes[0] == "method,arch,size_per_class,mean,std,n" and len(sizes) == 3
    curves = files["curves"].read_text().splitlines()
    assert len(curves) == 1 + 2 * 3


def test_render_detects_tampered_summary(tmp_path):
    _write_eval(tmp_path, [_run("itgan", 0.8, 0)])
    (tmp_path / "eval" / "summary.json").write_text(json.dumps({"aggregates": [
        {"method": "itgan", "arch": "convnet", "size_per_class": 5, "mean": 0.7, "std": 0.0}]}))
    assert not json.loads(R.render(tmp_path)["summary"].read_text())["consistency"]["ok"]


def test_render_requires_curves(tmp_path):
    r = _run("itgan", 0.8, 0)
    r["curves"] = {}
    _write_eval(tmp_path, [r])
    with pytest.raises(R.ReportError, match="curves"):
        R.render(tmp_path)
    with pytest.raises(FileNotFoundError):
        R.render(tmp_path / "nowhere")


def test_read_jsonl_reports_line_number(tmp_path):
    p = tmp_path / "r.jsonl"
    p.write_text('{"a": 1}\n\n{"b": \n')
    with pytest.raises(R.ReportError, match=r"r\.jsonl:3"):
        R.read_jsonl(p)
    p.write_text('{"a": 1}\n[1]\n')
    with pytest.raises(R.ReportError, match=":2"):
        R.read_jsonl(p)


def test_summary_csv_schema():
    text = R.summary_csv([_run("itgan", 0.8, 0)])
    header, row = text.splitlines()
    assert header == ",".join(R.SUMMARY_FIELDS)
    assert row == "itgan,convnet,5,0,0,0.8,2"
    assert len(R.curves_csv([_run("itgan", 0.8, 0)]).splitlines()) == 4
