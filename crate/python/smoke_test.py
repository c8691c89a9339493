#!/usr/bin/env python3
"""Smoke test for the timesqueeze_py extension module.

Builds nothing itself: run `cargo build -p timesqueeze-py` (or --release)
first, then `python3 python/smoke_test.py`. Loads the cdylib straight from
the target directory, so no install step is needed.
"""

import importlib.util
import json
import math
import sys
import tempfile
from importlib.machinery import ExtensionFileLoader
from pathlib import Path

REPO_ROOT = Path(__file__).resolve().parents[1]


def load_module():
    candidates = [
        REPO_ROOT / "target" / profile / name
        for profile in ("release", "debug")
        for name in ("libtimesqueeze_py.so", "timesqueeze_py.so")
    ]
    built = [p for p in candidates if p.exists()]
    if not built:
        sys.exit("extension not built; run `cargo build -p timesqueeze-py` first")
    so = max(built, key=lambda p: p.stat().st_mtime)
    loader = ExtensionFileLoader("timesqueeze_py", str(so))
    spec = importlib.util.spec_from_loader("timesqueeze_py", loader)
    module = importlib.util.module_from_spec(spec)
    loader.exec_module(module)
    print(f"loaded {so.relative_to(REPO_ROOT)}")
    return module


def check_synth(ts):
    a = ts.synth("sine_noise", 64, 7)
    b = ts.synth("sine_noise", 64, 7)
    c = ts.synth("sine_noise", 64, 8)
    assert len(a) == 64 and a == b, "same seed must reproduce the series"
    assert a != c, "different seeds must differ"
    bursty = ts.synth("piecewise_bursty", 96, 0, json.dumps({"plateau_len": 12, "burst_len": 4}))
    assert len(bursty) == 96
    print("synth ok")


def check_patching(ts):
    values = ts.synth("piecewise_bursty", 256, 1)
    boundaries, sizes = ts.detect_boundaries(values)
    assert boundaries[0] == 0, "first element always opens a patch"
    assert sum(sizes) == len(values), "sizes must tile the input"
    assert max(sizes) <= 8, "default max patch width is 8"
    scaled = [7.0 * v for v in values]
    assert ts.detect_boundaries(scaled) == (boundaries, sizes), "patching is scale invariant"

    flat = [3.5] * 24
    fb, fs = ts.detect_boundaries(flat)
    assert fb == [0, 8, 16] and fs == [8, 8, 8], "constant input splits only at max width"

    corpus = [ts.synth("piecewise_bursty", 256, s) for s in range(4)]
    cal = ts.calibrate_tau(corpus, 4.0)
    assert set(cal) == {"tau", "achieved_ratio", "iterations", "target_ratio"}
    assert abs(cal["achieved_ratio"] - 4.0) <= 0.02 * 4.0, cal
    assert cal["iterations"] <= 60
    print(f"patching ok (tau {cal['tau']:.4f}, ratio {cal['achieved_ratio']:.3f})")


def check_small_utils(ts):
    assert ts.huber(0.0) == 0.0
    assert ts.huber(0.5) == 0.125
    assert ts.huber(1.5) == 1.0
    assert ts.schedule_horizons(96, [1, 8, 32, 64]) == [(64, 64), (32, 32)]
    assert ts.schedule_horizons(5, [1, 8, 32, 64]) == [(8, 5)]
    print("huber and scheduling ok")


MODEL_JSON = json.dumps(
    {
        "enc_layers": 1,
        "dec_layers": 1,
        "horizons": [1, 4],
        "backbone": {"layers": 1, "heads": 2, "d_model": 8, "experts": 2, "top_k": 1, "d_expert": 12},
    }
)
TRAIN_JSON = json.dumps({"steps": 60, "batch_size": 4, "warmup_steps": 10, "seed": 3})


def check_forecaster(ts):
    values = ts.synth("sine_noise", 400, 11)

    model = ts.Forecaster(MODEL_JSON)
    assert "d_model=8" in repr(model)
    assert json.loads(model.config_json)["horizons"] == [1, 4]
    assert model.num_coords > 0

    curve = model.train(values, 48, 4, 4, TRAIN_JSON)
    assert len(curve) == 60 and curve[0][0] == 0
    assert all(math.isfinite(loss) for _, loss in curve)

    context = values[:48]
    pred = model.predict(context, 4)
    assert len(pred) == 4 and all(math.isfinite(p) for p in pred)
    assert model.predict(context, 4) == pred, "prediction must be deterministic"

    twin = ts.Forecaster(MODEL_JSON)
    twin.train(values, 48, 4, 4, TRAIN_JSON)
    assert twin.predict(context, 4) == pred, "same data and seed must give identical models"

    rows = model.evaluate(values[200:], 48, [1, 4], 16)
    assert [r["horizon"] for r in rows] == [1, 4]
    assert all(math.isfinite(r["mse"]) and math.isfinite(r["mae"]) for r in rows)

    boundaries, sizes = model.patch_plan(context)
    assert boundaries[0] == 0 and sum(sizes) == 48

    with tempfile.TemporaryDirectory() as tmp:
        model.save(tmp)
        clone = ts.Forecaster.load(tmp)
        assert clone.predict(context, 4) == pred, "checkpoint round trip changed predictions"
        assert json.loads(clone.config_json) == json.loads(model.config_json)

    print(f"forecaster ok (curve {curve[0][1]:.4f} -> {curve[-1][1]:.4f}, coords {model.num_coords})")


def check_errors(ts):
    try:
        ts.synth("no_such_kind", 8, 0)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown generator must raise ValueError")
    try:
        ts.Forecaster('{"horizons": []}')
    except ValueError:
        pass
    else:
        raise AssertionError("invalid config must raise ValueError")
    print("error mapping ok")


def main():
    ts = load_module()
    check_synth(ts)
    check_patching(ts)
    check_small_utils(ts)
    check_forecaster(ts)
    check_errors(ts)
    print("smoke test passed")


if __name__ == "__main__":
    main()
