"""Smoke test for the `suan` extension module.

Build and run from the repository root:

    cargo build -p suan-py --release
    python3 python/smoke_test.py

The script loads target/release/libsuan.so (or the path in SUAN_LIB).
"""

import importlib.machinery
import importlib.util
import json
import math
import os
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load():
    path = os.environ.get("SUAN_LIB", os.path.join(ROOT, "target", "release", "libsuan.so"))
    if not os.path.exists(path):
        sys.exit(f"extension not found at {path}; run `cargo build -p suan-py --release` first")
    loader = importlib.machinery.ExtensionFileLoader("suan", path)
    spec = importlib.util.spec_from_file_location("suan", path, loader=loader)
    module = importlib.util.module_from_spec(spec)
    loader.exec_module(module)
    return module


def main():
    suan = load()

    label, margin = suan.prediction_margin([0.7, 0.2, 0.1])
    assert label == 0 and abs(margin - 0.5) < 1e-15

    v = suan.batch_margin_vector([[0.7, 0.2, 0.1], [0.1, 0.8, 0.1], [0.6, 0.3, 0.1]], 3)
    assert abs(v[0] - 0.4) < 1e-12 and abs(v[1] - 0.7) < 1e-12 and v[2] == 0.0

    reg = suan.MarginRegister(3)
    reg.update([0.2, 0.4, 0.0])
    reg.update([0.4, 0.0, 0.6])
    assert reg.update_count == 2
    assert all(abs(a - b) < 1e-15 for a, b in zip(reg.vector, [0.3, 0.2, 0.3]))
    assert reg.source_weights([1, 0]) == [reg.vector[1], reg.vector[0]]

    w = suan.normalize_weights([1.0, 2.0, 3.0, 4.0])
    assert abs(sum(w) / len(w) - 1.0) < 1e-12
    assert min(suan.normalize_weights([1.0, 2.0, 3.0, 4.0], 1)) == 0.0

    xi = suan.jaccard_index(list(range(20)), list(range(10)) + list(range(20, 31)))
    assert xi == 10 / 31 == suan.xi_from_fractions(0.5, 10 / 21)

    assert suan.infer([0.6, 0.4], 0.5) == 0
    assert suan.infer([0.4, 0.35, 0.25], 0.5) is None
    acc = suan.uda_accuracy([[0.9, 0.1], [0.5, 0.5], [0.3, 0.7]], [0, 2, 1], [0, 1], [0, 1, 2], 0.6)
    assert abs(acc - 1.0) < 1e-15

    n = 24.0
    expect = 4 * math.sqrt((3 * math.log(2 * n) + math.log(2 / 0.05)) / n)
    assert abs(suan.complexity_term(3, 0.8, 24.0) - expect) < 1e-12
    b = suan.risk_bound(3, 1.0, 24.0, 0.05, 0.3, 0.1)
    assert abs(b["total"] - (0.05 + 0.15 + expect + 0.1)) < 1e-12

    try:
        suan.normalize_weights([1.0], 2)
    except ValueError as e:
        assert "w0" in str(e)
    else:
        raise AssertionError("w0 = 2 accepted")

    assert all(passed for _, passed, _ in suan.run_checks())
    assert "max_steps = 2000" in suan.normalize_config()

    with tempfile.TemporaryDirectory() as out:
        summary = suan.run_experiment("[train]\nmax_steps = 300\n", out, seed=2)
        with open(os.path.join(out, "eval_report.json")) as f:
            report = json.load(f)
        assert abs(report["averaged_accuracy"] - summary["averaged_accuracy"]) < 1e-8
        print(f"run: mode {summary['mode']}, accuracy {summary['averaged_accuracy']:.4f}, "
              f"{summary['register_updates']} register updates")

    print("python smoke test ok")


if __name__ == "__main__":
    main()
