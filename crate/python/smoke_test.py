"""Smoke test for the csiloop extension module.

Build and install first:
    pip install --no-build-isolation ./crates/py
"""

import math
import sys
import tempfile
from pathlib import Path

import csiloop


def main() -> int:
    probs = csiloop.softmax([1.0, 2.0, 3.0])
    assert abs(sum(probs) - 1.0) < 1e-12
    assert abs(probs[2] - 0.66524096) < 1e-8

    pairs = csiloop.pair([0, 10_000_000, 20_000_000], [(1_000_000, "walk"), (19_000_000, "run")], 5_000_000)
    assert [(c, l) for c, l, _ in pairs] == [(0, 0), (2, 1)], pairs

    grad = csiloop.gradcheck(instances=2)
    assert grad["passed"], grad
    assert not csiloop.gradcheck(instances=1, fault=1e-2)["passed"]
    assert csiloop.synccheck(cases=10)["passed"]
    assert csiloop.protofuzz(cases=200)["passed"]

    cfg = csiloop.Config(overrides=[
        "seeds=[7]",
        "model.epochs=2",
        "model.hidden_dim=8",
        "generator.train_sessions=2",
        "adaptation.epochs=2",
    ])
    try:
        cfg.with_overrides(["model.no_such_key=1"])
    except ValueError as e:
        assert "no_such_key" in str(e)
    else:
        raise AssertionError("unknown key accepted")

    model, acc = csiloop.train_baseline(cfg, 7)
    assert len(acc["per_class"]) == len(csiloop.activities())
    assert 0.0 <= acc["overall"] <= 100.0

    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "m.ckpt"
        model.save(str(path))
        assert csiloop.Model.load(str(path)) == model
    assert csiloop.Model.from_bytes(model.to_bytes()) == model

    window = [[0.5] * model.input_dim for _ in range(16)]
    name, conf, p = model.predict(window)
    assert name in csiloop.activities() and math.isclose(sum(p), 1.0) and conf == max(p)

    run = csiloop.run_closed_loop(cfg, model, 7)
    assert run["teacher_calls_outside"] == 0
    kinds = [e["kind"] for e in run["events"]]
    assert kinds[0] == "trigger", kinds
    print(f"baseline {acc['overall']:.1f}%  shifted {run['shifted']['overall']:.1f}%  "
          f"recovered {run['recovered']['overall']:.1f}%  events {kinds}")
    print("ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
