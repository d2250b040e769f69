"""Regenerate the reference-sample fixtures.

Each fixture is the first seeded draw (seed 0, 1, 2, ...) of ``n`` values whose
maximum lies within 5% of ``target_max``, the largest observation reported for
the corresponding worked example. Run from the repository root:

    python3 tests/fixtures/make_fixtures.py
"""

from pathlib import Path

import numpy as np

from tailfuse import streams
from tailfuse.harness import DistSpec, sample_reference

HERE = Path(__file__).parent

FIXTURES = {
    "ln11_reference.csv": (DistSpec("lognormal", {"mu": 1.0, "sigma": 1.0}), 100, 32.36495),
    "f27_reference.csv": (DistSpec("fisher_f", {"d1": 2.0, "d2": 7.0}), 100, 12.25072),
}


def first_matching(dist: DistSpec, n: int, target_max: float) -> tuple[int, np.ndarray]:
    for seed in range(100_000):
        x, _ = sample_reference(dist, n, streams.stream(seed, streams.REFERENCE))
        if abs(x.max() - target_max) <= 0.05 * target_max:
            return seed, x
    raise RuntimeError("no matching draw")


def main():
    for name, (dist, n, target) in FIXTURES.items():
        seed, x = first_matching(dist, n, target)
        lines = ["x"] + [format(v, ".17g") for v in x]
        (HERE / name).write_text("\n".join(lines) + "\n")
        print(f"{name}: seed {seed}, max {x.max():.6g}")


if __name__ == "__main__":
    main()
