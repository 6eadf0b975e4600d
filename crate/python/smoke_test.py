"""Smoke test for the lowfreq_py extension.

Build and install first:
    pip install --no-build-isolation ./crates/python
"""

import math
import random
import tempfile

import lowfreq_py as lf


def close(a, b, tol=1e-9):
    return max(abs(x - y) for x, y in zip(a, b)) <= tol


def main():
    rng = random.Random(0)
    img = [rng.random() for _ in range(3 * 8 * 8)]
    coeffs = lf.dct2(img, 3, 8)
    assert close(lf.idct2(coeffs, 3, 8), img)
    assert math.isclose(sum(c * c for c in coeffs), sum(v * v for v in img), rel_tol=1e-9)

    k = lf.cutoff(0.25, 8)
    noise = lf.dct2(lf.sample_low_freq(3, 8, 0.25, seed=1), 3, 8)
    outside = [noise[c * 64 + i * 8 + j] for c in range(3) for i in range(8) for j in range(8) if i >= k or j >= k]
    assert max(map(abs, outside)) < 1e-9

    quantized = lf.apply_defense(img, 3, 8, {"kind": "bit_depth", "bits": 1})
    assert set(quantized) <= {0.0, 1.0}

    target = lf.Target({"kind": "mlp2", "dataset": "gray28"})
    (x, label), = target.images(1, seed=5)
    assert target.predict(x) == label
    assert len(target.logits(x)) == target.classes

    ba = target.boundary(x, label, {"variant": {"kind": "lf", "ratio": 0.25}, "max_queries": 2000}, seed=3)
    assert ba["summary"]["total_queries"] <= 2000
    assert target.predict(ba["adversarial"]) != label

    nes = target.nes(x, label, {"max_queries": 2000}, seed=3)
    assert nes["summary"]["total_queries"] <= 2000

    wb = target.whitebox(x, label, {"ratio": 0.5})
    assert wb["success"] and target.predict(wb["adversarial"]) != label

    with tempfile.TemporaryDirectory() as out:
        report = lf.run_experiment(
            "boundary",
            f"""
output_dir = "{out}"
[model]
kind = "linear"
dataset = "gray28"
[images]
count = 2
[boundary]
max_queries = 500
""",
        )
    assert report["runs"] == 2

    try:
        lf.Target({"kind": "nope"})
    except ValueError:
        pass
    else:
        raise AssertionError("bad model kind accepted")

    print("lowfreq_py smoke test ok:", ba["summary"]["total_queries"], "boundary queries,", round(wb["mse"], 6), "white-box mse")


if __name__ == "__main__":
    main()
