"""Smoke test for the sparsekg extension module.

Build and install first:
    pip install maturin
    maturin develop --release -m crates/python/Cargo.toml
then run `python python/smoke_test.py`.
"""

import json
import math
import random

import sparsekg


def close(a, b, tol=1e-10):
    if isinstance(a, list):
        return len(a) == len(b) and all(close(x, y, tol) for x, y in zip(a, b))
    return abs(a - b) <= tol


def check_envelope():
    # two lines crossing at z = 0: E[max(0, Z)] = 1/sqrt(2 pi)
    h = sparsekg.compute_h([0.0, 0.0], [0.0, 1.0])
    assert abs(h - 1.0 / math.sqrt(2.0 * math.pi)) < 1e-12, h


def check_lasso():
    rng = random.Random(3)
    groups = [[0, 1], [2, 3, 4]]
    truth = [1.5, -1.5, 0.0, 0.0, 0.0]
    lasso = sparsekg.GroupLasso(groups)
    for n in range(1, 41):
        x = [rng.gauss(0.0, 1.0) for _ in truth]
        y = sum(a * b for a, b in zip(x, truth)) + 0.1 * rng.gauss(0.0, 1.0)
        lasso.update(x, y, 0.5 * math.sqrt(n))
    batch = sparsekg.lasso_solve(lasso.gram(), lasso.moment(), lasso.lam, groups)
    assert max(abs(a - b) for a, b in zip(lasso.beta, batch)) < 1e-6
    assert lasso.support_groups() == [0], lasso.support_groups()
    assert lasso.n_obs == 40


def check_belief():
    belief = sparsekg.SparseBelief([[0], [1]], variance=4.0)
    fused = belief.fuse([1.0, 2.0], [[4.0, 0.0], [0.0, 4.0]], [0, 1])
    assert close(fused.covariance, [[2.0, 0.0], [0.0, 2.0]])
    assert close(fused.mean, [0.5, 1.0])
    kg = fused.kg_values([[1.0, 0.0], [0.0, 1.0]], noise_var=1.0)
    assert len(kg) == 2 and all(v > 0.0 for v in kg)
    counts = fused.observe_support([1]).counts
    assert counts == [(1.0, 2.0), (2.0, 1.0)], counts
    restored = sparsekg.SparseBelief.from_json(fused.to_json())
    assert restored.mean == fused.mean


def check_splines():
    basis = sparsekg.SplineBasis(0.0, 1.0, 4)
    assert basis.dimension == 8
    for k in range(11):
        assert abs(sum(basis.eval(k / 10.0)) - 1.0) < 1e-12


def check_experiment():
    config = sparsekg.preset("fig1")
    config = config.replace("replications = 100", "replications = 1").replace("budget = 200", "budget = 5")
    config = "\n".join(line for line in config.splitlines() if not line.startswith("sweep"))
    files = dict(sparsekg.run_experiment(config))
    rows = files["results.csv"].strip().splitlines()
    assert len(rows) == 1 + 3 * 5, len(rows)
    summary = json.loads(files["summary.json"])
    assert len(summary["table"]) == 3


if __name__ == "__main__":
    check_envelope()
    check_lasso()
    check_belief()
    check_splines()
    check_experiment()
    print("sparsekg smoke test passed")
