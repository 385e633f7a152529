import numpy as np
import pytest

from dclscam.tensor import Tensor

_ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one pass/fail line per acceptance criterion for the summary."""
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def probe(t, weights):
    """Scalar <t, weights> as a graph node, for turning any output into a loss."""
    from dclscam.tensor import _accumulate, _result

    w = np.asarray(weights, dtype=t.dtype).reshape(t.shape)
    return _result(np.array(np.sum(t.data * w)), [t], "probe", lambda g: _accumulate(t, g * w))


@pytest.fixture(scope="session")
def small_shapes(tmp_path_factory):
    """60 generated 32x32 samples over 3 classes."""
    from dclscam import datakit

    out = tmp_path_factory.mktemp("shapes")
    manifest = datakit.generate_shapes(60, 32, 3, 11, out)
    return datakit.load_dataset(manifest)


def frozen_grid_pair(seed=0, widths=(8, 8, 8)):
    """A dcls model on the dilation-2 grid and a dilated baseline with identical weights."""
    from dclscam import zoo
    from dclscam.dcls import grid_positions

    dcfg = zoo.TrainConfig(arch="dcls", seed=seed, pos_lr_mult=0.0, kernel_size=5, dcls_elements=9, widths=widths)
    bcfg = zoo.TrainConfig(arch="baseline", seed=seed, kernel_size=3, dilation=2, widths=widths)
    dm, bm = zoo.build(dcfg), zoo.build(bcfg)
    for spec in dm.dcls_specs():
        spec.positions.data[...] = grid_positions(spec.channels, 5, 2)
    dp, bp = dm.parameters(), bm.parameters()
    for name, p in bp.items():
        if name.endswith("dw.weight"):
            src = dp[name.replace("dw.weight", "dw.weights")].data
            p.data[...] = src.reshape(p.shape)
        else:
            p.data[...] = dp[name].data
    return dm, dcfg, bm, bcfg
