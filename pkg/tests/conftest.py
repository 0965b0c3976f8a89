import os
from pathlib import Path

import numpy as np
import pytest

from nlmaug.tensor_image import ImageTensor, LabeledDataset

MNIST_DIR = Path(os.environ.get("NLMAUG_MNIST_DIR", "/root/data/mnist"))
MNIST_FILES = (
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
)


def mnist_available() -> bool:
    return all(
        (MNIST_DIR / name).exists() or (MNIST_DIR / (name + ".gz")).exists() for name in MNIST_FILES
    )


requires_mnist = pytest.mark.skipif(
    not mnist_available(), reason=f"MNIST files not found in {MNIST_DIR} (set NLMAUG_MNIST_DIR)"
)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_image(rng, c=1, h=8, w=8) -> ImageTensor:
    return ImageTensor(rng.random((c, h, w)))


def smooth_image(rng, c=1, h=16, w=16, noise=0.03) -> ImageTensor:
    """Low-frequency field plus mild noise: gives non-degenerate NLM weights."""
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    out = np.empty((c, h, w))
    for ch in range(c):
        a, b, ph = rng.uniform(1, 4, size=3)
        base = 0.5 + 0.35 * np.sin(2 * np.pi * (a * yy + b * xx) + ph)
        out[ch] = base + noise * rng.standard_normal((h, w))
    return ImageTensor(np.clip(out, 0.0, 1.0))


def toy_dataset(rng, n=12, c=1, h=8, w=8, num_classes=10, tag="toy") -> LabeledDataset:
    return LabeledDataset(
        rng.random((n, c, h, w)), rng.integers(0, num_classes, n), num_classes, source_tag=tag
    )


# ---------------------------------------------------------------------------
# acceptance summary: tests tagged with @pytest.mark.criterion(n, title) get
# one PASS/FAIL line each at the end of the session

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    crit = _CRITERIA.get(report.nodeid)
    if crit is None:
        return
    if report.when == "call" or report.outcome in ("failed", "skipped"):
        if crit["outcome"] in (None, "passed"):
            crit["outcome"] = report.outcome


def pytest_collection_modifyitems(session, config, items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number, title = mark.args
            _CRITERIA[item.nodeid] = {"number": number, "title": title, "outcome": None}


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    by_number: dict[int, list] = {}
    for c in _CRITERIA.values():
        by_number.setdefault(c["number"], []).append(c)
    terminalreporter.section("acceptance criteria")
    for number in sorted(by_number):
        parts = by_number[number]
        outcomes = [p["outcome"] for p in parts]
        if any(o == "failed" for o in outcomes):
            verdict = "FAIL"
        elif all(o == "passed" for o in outcomes):
            verdict = "PASS"
        elif any(o == "skipped" for o in outcomes):
            verdict = "SKIP"
        else:
            verdict = "NOT RUN"
        terminalreporter.write_line(f"criterion {number}: {verdict}  {parts[0]['title']}")


# ---------------------------------------------------------------------------
# gradient-check helpers


def relu_preactivations(net, x):
    """All pre-ReLU values of ``net`` on NCHW batch ``x`` as one flat array."""
    from nlmaug.net import conv_forward

    a, P = net.arch, net.params
    h = x.transpose(0, 2, 3, 1)
    h = (h - np.array(a.input_mean)) / np.array(a.input_std)
    zs = [conv_forward(h, P["stem.w"], P["stem.b"])]
    h = np.maximum(zs[-1], 0)
    for i, (_, s) in enumerate(a.blocks):
        pre = f"block{i}."
        zs.append(conv_forward(h, P[pre + "conv1.w"], P[pre + "conv1.b"], s))
        z = conv_forward(np.maximum(zs[-1], 0), P[pre + "conv2.w"], P[pre + "conv2.b"])
        if pre + "proj.w" in P:
            z = z + conv_forward(h, P[pre + "proj.w"], P[pre + "proj.b"], s)
        else:
            z = z + h
        zs.append(z)
        h = np.maximum(z, 0)
    return np.concatenate([z.ravel() for z in zs])


def kink_free_net(arch, x, margin=5e-3, scale=0.3, max_tries=2000):
    """Fully random parameters whose ReLU inputs all stay ``margin`` away from zero.

    Central differences with a 1e-4 step are only meaningful where the loss is
    smooth; keeping every pre-activation clear of the kink guarantees that.
    """
    from nlmaug.net import init_params

    for seed in range(max_tries):
        net = init_params(arch, seed)
        r = np.random.default_rng(seed + 10_000)
        for k in net.params:
            net.params[k] = r.normal(0.0, scale, net.params[k].shape)
        if np.abs(relu_preactivations(net, x)).min() > margin:
            return net
    raise RuntimeError("no kink-free parameter draw found")


def finite_difference_check(net, x, y, step=1e-4, n_input=10, seed=0):
    """Worst relative error between analytic and central-difference gradients."""
    from nlmaug.net import backward, cross_entropy_loss, forward

    grads = backward(net, x, y)

    def loss():
        return cross_entropy_loss(forward(net, x), y)[0]

    def rel(a, n):
        return abs(a - n) / max(abs(a), abs(n), 1e-7)

    worst = 0.0
    for name, w in net.params.items():
        for idx in np.ndindex(w.shape):
            old = w[idx]
            w[idx] = old + step
            up = loss()
            w[idx] = old - step
            down = loss()
            w[idx] = old
            worst = max(worst, rel(grads.params[name][idx], (up - down) / (2 * step)))
    rng = np.random.default_rng(seed)
    flat = rng.choice(x.size, n_input, replace=False)
    for f in flat:
        idx = np.unravel_index(f, x.shape)
        old = x[idx]
        x[idx] = old + step
        up = loss()
        x[idx] = old - step
        down = loss()
        x[idx] = old
        worst = max(worst, rel(grads.input[idx], (up - down) / (2 * step)))
    return worst
