import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from kgtransfer.kg import KnowledgeGraph

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_kg(rows, name="toy"):
    """KG from (subject, relation, object) name triples, vocabulary in first-seen order."""
    ents, rels = {}, {}
    out = []
    for s, r, o in rows:
        for e in (s, o):
            ents.setdefault(e, len(ents))
        rels.setdefault(r, len(rels))
        out.append((ents[s], rels[r], ents[o]))
    return KnowledgeGraph(name, list(ents), list(rels), np.array(out, dtype=np.int32).reshape(-1, 3))


def numeric_grad(f, x, eps=1e-5):
    """Central finite differences of scalar ``f`` with respect to array ``x`` (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


@pytest.fixture
def chain_kg():
    return make_kg([("a", "r1", "b"), ("b", "r2", "c")])


@pytest.fixture(scope="session")
def scenario():
    from kgtransfer.fixtures import generate_transfer_scenario
    return generate_transfer_scenario(seed=0)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
