import numpy as np
import pytest

from depthalign.correspondence import build_pair_set, directed, fb_consistency_mask
from depthalign.geometry import Pose, so3_exp
from depthalign.synthgen import SceneSpec, gen_scene, render_depth, render_flow


class Oracle:
    """Rendered synthetic video: ground truth, depths, flows and consistency masks."""

    def __init__(self, spec):
        self.gt = gen_scene(spec)
        n = spec.n_frames
        self.n = n
        self.pairs = directed(build_pair_set(n))
        self.flows, self.visible = {}, {}
        for pr in self.pairs:
            self.flows[pr], self.visible[pr] = render_flow(self.gt, *pr)
        self.fb = {(i, j): fb_consistency_mask(self.flows[(i, j)], self.flows[(j, i)])
                   for i, j in self.pairs}
        self.depths = [render_depth(self.gt, k)[0] for k in range(n)]

    def flow(self, i, j):
        """Rendered flow and visibility for any pair, cached."""
        if (i, j) not in self.flows:
            self.flows[(i, j)], self.visible[(i, j)] = render_flow(self.gt, i, j)
        return self.flows[(i, j)], self.visible[(i, j)]


_cache = {}


def oracle(**kw):
    key = tuple(sorted(kw.items()))
    if key not in _cache:
        _cache[key] = Oracle(SceneSpec(**kw))
    return _cache[key]


@pytest.fixture(scope="session")
def arc6():
    return oracle(n_frames=6, trajectory="arc", width=96, height=64)


@pytest.fixture(scope="session")
def arc12():
    return oracle(n_frames=12, trajectory="arc")


def random_pose(rng, rot=0.3, trans=1.0):
    return Pose(so3_exp(rng.normal(scale=rot, size=3)), rng.normal(scale=trans, size=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report one line each at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE, key=str):
        terminalreporter.write_line(ACCEPTANCE[k])
