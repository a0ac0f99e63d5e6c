import hashlib
import os
import pickle
import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


def _source_digest() -> str:
    src = Path(__file__).parent.parent / "src" / "tsclab"
    h = hashlib.sha256()
    for p in sorted(src.rglob("*.py")) + sorted(src.rglob("*.yaml")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


class RunBank:
    """Heavy experiment artifacts shared across acceptance criteria.

    Every item is built lazily and deterministically; with TSCLAB_TEST_CACHE=1
    results are pickled under a key derived from the package sources, so a
    code change invalidates the cache.
    """

    SOURCE_SEEDS = {"jn1": 100, "jn2": 101, "jn3": 102, "hz2": 103}
    SEEDS = [0, 1, 2, 3, 4]
    EPISODES = 30
    GRID = (2, 2)
    CROSS_GRID = (6, 6)
    CROSS_FLOW = "hz1"
    TARGET_FLOW = "jn3"

    def __init__(self, cache_root: Path | None):
        self.cache_root = cache_root
        if cache_root is not None:
            cache_root.mkdir(parents=True, exist_ok=True)
        self.timings: dict[str, float] = {}
        self._items: dict[str, object] = {}

    def _get(self, key: str, builder):
        if key in self._items:
            return self._items[key]
        path = None if self.cache_root is None else self.cache_root / f"{key}.pkl"
        if path is not None and path.exists():
            with open(path, "rb") as fh:
                obj, elapsed = pickle.load(fh)
        else:
            start = time.time()
            obj = builder()
            elapsed = time.time() - start
            if path is not None:
                with open(path, "wb") as fh:
                    pickle.dump((obj, elapsed), fh)
        self._items[key] = obj
        self.timings[key] = elapsed
        return obj

    # -- pre-trained source agents ------------------------------------------

    def source(self, flow_name: str):
        from tsclab.agent import pretrain
        from tsclab.sim import load_flow

        def build():
            model, stats = pretrain(self.GRID, load_flow(flow_name), self.EPISODES,
                                    seed=self.SOURCE_SEEDS[flow_name])
            return model, stats

        return self._get(f"src_{flow_name}", build)

    # -- within-network runs ---------------------------------------------------

    def scratch22(self):
        """From-scratch training on the target flow; doubles as the EDQ arm."""
        from tsclab.agent import pretrain
        from tsclab.sim import load_flow

        def build():
            flow = load_flow(self.TARGET_FLOW)
            return [pretrain(self.GRID, flow, self.EPISODES, seed=s)[1]
                    for s in self.SEEDS]

        return self._get("scratch22", build)

    def eq22(self):
        from tsclab.agent import pretrain
        from tsclab.sim import load_flow

        def build():
            flow = load_flow(self.TARGET_FLOW)
            return [pretrain(self.GRID, flow, self.EPISODES, seed=s,
                             with_decoder=False)[1] for s in self.SEEDS]

        return self._get("eq22", build)

    def transfer22(self):
        from tsclab.sim import load_flow
        from tsclab.transfer import AgentPool, transfer_train

        def build():
            sources = [self.source("jn1")[0], self.source("jn2")[0]]
            flow = load_flow(self.TARGET_FLOW)
            out = []
            for s in self.SEEDS:
                pool = AgentPool([m.copy() for m in sources])
                out.append(transfer_train(pool, self.GRID, flow, self.EPISODES,
                                          seed=s).stats)
            return out

        return self._get("transfer22", build)

    # distractor sources for the self-similarity check: moderately different
    # (jn1) and strongly different (hz2) demand patterns.  jn2 would be a
    # near-duplicate of jn3 in flow space and ties within modeling error.
    SELF_SIM_SOURCES = ("jn1", "hz2", "jn3")

    def self_similarity_events(self):
        """Episode-1 guide logs with the target-flow-pretrained agent pooled."""
        from tsclab.sim import load_flow
        from tsclab.transfer import AgentPool, transfer_train

        def build():
            sources = [self.source(n)[0] for n in self.SELF_SIM_SOURCES]
            flow = load_flow(self.TARGET_FLOW)
            out = []
            for s in self.SEEDS:
                pool = AgentPool([m.copy() for m in sources])
                out.append(transfer_train(pool, self.GRID, flow, episodes=1,
                                          seed=s).guide_events)
            return out

        return self._get("selfsim", build)

    # -- cross-network runs -------------------------------------------------------

    def scratch66(self):
        from tsclab.agent import pretrain
        from tsclab.sim import load_flow

        def build():
            flow = load_flow(self.CROSS_FLOW)
            return [pretrain(self.CROSS_GRID, flow, self.EPISODES, seed=s)[1]
                    for s in self.SEEDS]

        return self._get("scratch66", build)

    def transfer66(self):
        from tsclab.sim import load_flow
        from tsclab.transfer import AgentPool, transfer_train

        def build():
            sources = [self.source(n)[0] for n in ("jn1", "jn2", "jn3")]
            flow = load_flow(self.CROSS_FLOW)
            out = []
            for s in self.SEEDS:
                pool = AgentPool([m.copy() for m in sources])
                out.append(transfer_train(pool, self.CROSS_GRID, flow,
                                          self.EPISODES, seed=s).stats)
            return out

        return self._get("transfer66", build)

    def timing(self, *keys) -> float:
        return sum(self.timings.get(k, 0.0) for k in keys)


@pytest.fixture(scope="session")
def bank() -> RunBank:
    cache_root = None
    if os.environ.get("TSCLAB_TEST_CACHE"):
        cache_root = Path(__file__).parent / "_bank_cache" / _source_digest()
    return RunBank(cache_root)
