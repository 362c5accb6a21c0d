import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fimgcn.graph import default_graph, label_partitions

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function over every coordinate of x (modified in place)."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        gf[i] = (up - down) / (2 * eps)
    return g


@pytest.fixture(scope="session")
def graph():
    return default_graph()


@pytest.fixture(scope="session")
def partition(graph):
    return label_partitions(graph)


def random_tree(rng: np.random.Generator, J: int):
    """Random labelled tree with a random root and a reference pose free of r-ties along edges."""
    from fimgcn.graph import build_graph

    names = [f"n{i}" for i in range(J)]
    perm = rng.permutation(J)
    edges = [(names[perm[i]], names[perm[rng.integers(0, i)]]) for i in range(1, J)]
    root = names[int(rng.integers(0, J))]
    while True:
        pose = rng.normal(size=(J, 3))
        r = np.linalg.norm(pose - pose[names.index(root)], axis=1)
        if all(r[names.index(a)] != r[names.index(b)] for a, b in edges):
            return build_graph(edges, pose, root, names)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
