#!/usr/bin/env python3
"""Smoke test for the `o2s` Python extension module.

Builds the extension with cargo if it is not already importable, then checks
hand-computed values of the scalar operations and runs the scene pipeline
(generate -> forward -> assign -> loss -> eval) end to end.

Run from anywhere: `python3 python/smoke_test.py`.
"""

import json
import math
import shutil
import subprocess
import sys
import sysconfig
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def ensure_module():
    try:
        import o2s  # noqa: F401
        return
    except ImportError:
        pass
    subprocess.run(["cargo", "build", "-p", "o2s-python"], cwd=ROOT, check=True)
    suffix = ".dylib" if sys.platform == "darwin" else ".so"
    built = ROOT / "target" / "debug" / f"libo2s{suffix}"
    if not built.exists():  # windows
        built = ROOT / "target" / "debug" / "o2s.dll"
    ext = sysconfig.get_config_var("EXT_SUFFIX") or ".so"
    stage = Path(tempfile.mkdtemp(prefix="o2s-py-"))
    shutil.copy(built, stage / f"o2s{ext}")
    sys.path.insert(0, str(stage))


def approx(a, b, tol=1e-9):
    assert abs(a - b) <= tol, f"{a} != {b} (tol {tol})"


def main():
    ensure_module()
    import o2s

    # --- scalar operations against hand values ---------------------------
    approx(o2s.focal_term(0.5, 0.0), -0.25 * math.log(0.5), 1e-12)
    approx(o2s.focal_term(0.5, 0.0), 0.17329, 1e-5)
    assert o2s.focal_term(0.3, 0.3) == 0.0
    h = 1e-6
    fd = (o2s.focal_term(0.4 + h, 1.0) - o2s.focal_term(0.4 - h, 1.0)) / (2 * h)
    approx(o2s.focal_term_derivative(0.4, 1.0), fd, 1e-5)
    try:
        o2s.focal_term(0.0, 0.5)
        raise AssertionError("focal_term(0, 0.5) must raise")
    except ValueError:
        pass

    assert o2s.smooth_l1(0.5, 1.0) == 0.125
    assert o2s.smooth_l1(2.0, 1.0) == 1.5
    assert o2s.f1_score(1.0, 1.0) == 1.0
    assert o2s.f1_score(0.0, 0.0) == 0.0

    # Single common row, half-width 5: centers 4 apart -> 3/7, 20 apart -> -1/3.
    approx(o2s.line_iou([10.0, 0.0], [True, False], [14.0, 0.0], [True, False], 5.0), 3 / 7, 0)
    approx(o2s.line_iou([0.0, 0.0], [True, False], [20.0, 0.0], [True, False], 5.0), -1 / 3, 0)

    pairs, total = o2s.hungarian([[4.0, 1.0], [2.0, 3.0]])
    assert pairs == [(0, 1), (1, 0)] and total == 3.0

    assert o2s.dynamic_k([1.0, 1.0, 1.0, 1.0, 0.2]) == 4
    assert o2s.dynamic_k([0.1, 0.05]) == 2  # raised to t_min
    assert o2s.dynamic_k([1.0] * 50, top_q=50) == 8  # capped at k_max

    pe = o2s.pe_scalar(0.25, 8)
    assert len(pe) == 8 and all(-1.0 <= v <= 1.0 for v in pe)
    approx(pe[0], math.sin(0.25 * math.tau), 1e-12)

    rows = o2s.sample_rows(rows=72)
    assert len(rows) == 72 and rows[0] == 0.0 and rows[-1] == 320.0

    # --- scene pipeline ---------------------------------------------------
    scene_json = o2s.generate_scene(seed=7, lanes=3, preds="perfect")
    assert scene_json == o2s.generate_scene(seed=7, lanes=3, preds="perfect"), "determinism"
    scene = json.loads(scene_json)
    assert len(scene["gts"]) == 3
    assert len(scene["predictions"]) == 6

    report = json.loads(o2s.assign_scene(scene_json))
    assert len(report["layers"]) == 6
    last = report["layers"][-1]
    fully = [p for p in last["positives"] if p["fully"]]
    assert len(fully) == 3 and all(p["d"] == 1.0 for p in fully)
    assert len({p["gt"] for p in fully}) == 3, "one fully positive per gt"

    loss = json.loads(o2s.loss_scene(scene_json))
    assert loss["total"] == 0.0, "perfect predictions must cost 0"

    evaluation = json.loads(o2s.eval_scene(scene_json))
    assert evaluation["f1"] == 1.0 and evaluation["fp"] == 0 and evaluation["fn"] == 0

    # Decoder forward at small width, then assign/loss from the trace.
    trace_json = o2s.forward_scene(scene_json, weights_seed=1, anchors=24, layers=2, dim=32, heads=4)
    trace = json.loads(trace_json)
    assert len(trace["layers"]) == 2
    assert len(trace["layers"][0]["predictions"]) == 24
    report = json.loads(o2s.assign_scene(scene_json, trace_json=trace_json))
    assert len(report["layers"]) == 2
    per_gt = {}
    for p in report["layers"][0]["positives"]:
        per_gt.setdefault(p["gt"], []).append(p["anchor"])
    assert len(per_gt) == 3, "every gt is served when anchors are plentiful"
    assert all(len(v) >= 2 for v in per_gt.values()), "every gt needs >= 2 positives"
    all_anchors = [a for v in per_gt.values() for a in v]
    assert len(all_anchors) == len(set(all_anchors)), "no anchor serves two gts"
    loss = json.loads(o2s.loss_scene(scene_json, trace_json=trace_json))
    assert loss["total"] > 0.0, "untrained decoder must have positive loss"
    assert loss["total"] == 2.0 * loss["cls"] + loss["reg"]

    bad = json.dumps({"geometry": "nope"})
    try:
        o2s.assign_scene(bad)
        raise AssertionError("malformed scene must raise")
    except ValueError:
        pass

    print("smoke test passed")


if __name__ == "__main__":
    main()
