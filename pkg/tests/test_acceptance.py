"""Acceptance suite: one or more tests per criterion, summarised as PASS/FAIL lines.

Criteria 5 to 7 share one desk-scale experiment (3 seeds, baseline and
original + NLM(h=15)), which takes roughly 40 minutes on one CPU core.
Its artifacts are kept under ``.pytest_cache/d/acceptance/desk``.
"""

import struct
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.lib.stride_tricks import sliding_window_view

from nlmaug import dataset_io
from nlmaug.experiment import ExperimentConfig, load_raw_data, mean_rows, run_experiment
from nlmaug.net import Architecture, TrainConfig, cosine_lr, evaluate_accuracy, sgd_step
from nlmaug.nlm import NlmParams, denoise_batch, denoise_image, denoise_image_reference, denoise_pixel
from nlmaug.tensor_image import ImageTensor, LabeledDataset, PixelCoord, flip_horizontal, pad_mirror

from conftest import MNIST_DIR, finite_difference_check, kink_free_net, requires_mnist, smooth_image

H_GREY = (3, 5, 15)
SIGMAS = (0.0, 0.05)


def _params(h, sigma):
    return NlmParams(h / 255, sigma)


# ---------------------------------------------------------------------------
# 1


@st.composite
def nlm_inputs(draw):
    rgb = draw(st.booleans())
    if rgb:
        c, h, w = 3, 16, 16
    else:
        c, h, w = 1, draw(st.integers(16, 32)), draw(st.integers(16, 32))
    rng = np.random.default_rng(draw(st.integers(0, 2**32 - 1)))
    if draw(st.booleans()):
        return ImageTensor(rng.random((c, h, w)))
    return smooth_image(rng, c, h, w, noise=draw(st.sampled_from([0.0, 0.01, 0.05])))


class TestCriterion1:
    started = None

    @pytest.mark.criterion(1, "NLM kernel equals the per-pixel reference to 1e-12")
    @settings(max_examples=50, deadline=None, derandomize=True)
    @given(img=nlm_inputs())
    def test_kernel_matches_reference(self, img):
        if TestCriterion1.started is None:
            TestCriterion1.started = time.perf_counter()
        for h in H_GREY:
            for sigma in SIGMAS:
                p = _params(h, sigma)
                fast = denoise_image(img, p).data
                slow = denoise_image_reference(img, p).data
                np.testing.assert_allclose(fast, slow, rtol=0, atol=1e-12)

    @pytest.mark.criterion(1, "NLM kernel equals the per-pixel reference to 1e-12")
    def test_runtime(self):
        assert TestCriterion1.started is not None
        assert time.perf_counter() - TestCriterion1.started < 120


# ---------------------------------------------------------------------------
# 2


class TestCriterion2:
    @pytest.mark.criterion(2, "NLM analytic invariants")
    @pytest.mark.parametrize("c,h,w", [(1, 1, 1), (1, 5, 9), (3, 16, 16), (1, 28, 28)])
    def test_constant_image_exact(self, c, h, w):
        for value in (0.0, 1 / 255, 0.3, 77 / 255, 1.0):
            img = ImageTensor(np.full((c, h, w), value))
            for hh in H_GREY:
                for sigma in SIGMAS:
                    np.testing.assert_array_equal(denoise_image(img, _params(hh, sigma)).data, img.data)
                    np.testing.assert_array_equal(
                        denoise_image_reference(img, _params(hh, sigma)).data, img.data
                    )

    @pytest.mark.criterion(2, "NLM analytic invariants")
    def test_convex_combination_bounds(self):
        rng = np.random.default_rng(2)
        imgs = np.stack(
            [rng.random((1, 32, 32)) if i % 2 else smooth_image(rng, 1, 32, 32).data for i in range(98)]
        )
        assert imgs[:, 0].size >= 10**5
        p = _params(15, 0.0)
        out = denoise_batch(imgs, p)
        sr = p.search_radius
        windows = sliding_window_view(pad_mirror(imgs, sr), (2 * sr + 1, 2 * sr + 1), axis=(2, 3))
        lo, hi = windows.min(axis=(-2, -1)), windows.max(axis=(-2, -1))
        assert np.all(out >= lo) and np.all(out <= hi)

    @pytest.mark.criterion(2, "NLM analytic invariants")
    @pytest.mark.parametrize("h", H_GREY)
    def test_prefactor_injection_bitwise(self, h):
        # Bitwise equality is the stated contract; see the README for why
        # IEEE rounding makes it fail for non-power-of-two prefactors.
        img = smooth_image(np.random.default_rng(h), 1, 16, 16)
        p = _params(h, 0.0)
        k = 1.0 / p.h**2
        np.testing.assert_array_equal(denoise_image(img, p, prefactor=k).data, denoise_image(img, p).data)
        for r, col in [(0, 0), (7, 9), (15, 3)]:
            q = PixelCoord(r, col)
            assert denoise_pixel(img, q, 0, p, prefactor=k) == denoise_pixel(img, q, 0, p)

    @pytest.mark.criterion(2, "NLM analytic invariants")
    def test_flip_symmetry(self):
        rng = np.random.default_rng(4)
        for c, h, w in [(1, 16, 16), (1, 21, 30), (3, 16, 16)]:
            img = smooth_image(rng, c, h, w)
            for hh in H_GREY:
                p = _params(hh, 0.05)
                a = denoise_image(flip_horizontal(img), p).data
                b = flip_horizontal(denoise_image(img, p)).data
                np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


# ---------------------------------------------------------------------------
# 3


class TestCriterion3:
    @pytest.mark.criterion(3, "analytic gradients match central differences")
    def test_finite_differences(self):
        t0 = time.perf_counter()
        arch = Architecture(image_size=(8, 8), stem_channels=4, blocks=((4, 1), (6, 2)), head_pool=2)
        x = np.random.default_rng(3).random((4, 1, 8, 8))
        net = kink_free_net(arch, x)
        assert net.n_params <= 5000
        assert finite_difference_check(net, x, np.array([1, 4, 7, 2]), step=1e-4, n_input=10) < 1e-4
        assert time.perf_counter() - t0 < 60


# ---------------------------------------------------------------------------
# 4


class TestCriterion4:
    @pytest.mark.criterion(4, "cosine schedule and SGD update are exact")
    def test_cosine_lr(self):
        cfg = TrainConfig(epochs=30)
        assert cosine_lr(0, cfg) == 0.01
        assert abs(cosine_lr(15, cfg) - 0.005) <= 1e-15
        assert abs(cosine_lr(30, cfg)) <= 1e-15

    @pytest.mark.criterion(4, "cosine schedule and SGD update are exact")
    def test_sgd_step_scalar_cases(self):
        def one(v):
            return {"w": np.array([v], dtype=np.float64)}

        w, v = sgd_step(one(0.7), one(0.0), one(0.0), 0.01, TrainConfig(momentum=0.9, weight_decay=0.0))
        assert w["w"][0] == 0.7 and v["w"][0] == 0.0

        w, _ = sgd_step(one(1.0), one(0.0), one(0.0), 0.01, TrainConfig(momentum=0.0, weight_decay=5e-4))
        assert abs(w["w"][0] - 0.999995) <= 1e-15

        cfg = TrainConfig(momentum=0.9, weight_decay=0.0)
        g = 0.37
        w, v = sgd_step(one(0.0), one(g), one(0.0), 0.01, cfg)
        assert abs(v["w"][0] - g) <= 1e-15
        w, v = sgd_step(w, one(g), v, 0.01, cfg)
        assert abs(v["w"][0] - 1.9 * g) <= 1e-15


# ---------------------------------------------------------------------------
# 5-7: desk-scale experiment


DESK = dict(
    dataset="mnist",
    h_values=[15.0],
    train_subset=10000,
    test_subset=2000,
    epochs=3,
    batch_size=256,
    learning_rate=0.01,
    momentum=0.9,
    weight_decay=5e-4,
    seeds=[1, 2, 3],
)


@pytest.fixture(scope="session")
def desk_run(request):
    out = request.config.cache.mkdir("acceptance") / "desk"
    cfg = ExperimentConfig(data_dir=str(MNIST_DIR), output_dir=str(out), **DESK)
    _, test = load_raw_data(cfg)
    audit = {"checked": 0, "range": [], "budget": []}
    models = {}

    def on_batch(eps, clean, adv):
        audit["checked"] += len(adv)
        if adv.min() < 0.0 or adv.max() > 1.0:
            audit["range"].append(eps)
        if np.max(np.abs(adv - clean)) > eps:
            audit["budget"].append(eps)

    def on_model(model_id, seed, net, history, rows):
        models[(model_id, seed)] = {
            "clean": evaluate_accuracy(net, test),
            "rows": {r.eps: r.accuracy for r in rows},
            "train_seconds": sum(rec["seconds"] for rec in history),
        }

    rows = run_experiment(cfg, on_model=on_model, audit=on_batch)
    return {"rows": rows, "models": models, "audit": audit, "out": out}


@requires_mnist
class TestCriterion5:
    @pytest.mark.criterion(5, "desk-scale training reaches 90% for seeds 1, 2, 3")
    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_accuracy(self, desk_run, seed):
        acc = desk_run["models"][("baseline", seed)]["rows"][0.0]
        assert acc >= 0.90, f"seed {seed}: clean accuracy {acc:.4f}"

    @pytest.mark.criterion(5, "desk-scale training reaches 90% for seeds 1, 2, 3")
    def test_training_time(self, desk_run):
        total = sum(m["train_seconds"] for (mid, _), m in desk_run["models"].items() if mid == "baseline")
        assert total < 15 * 60, f"{total:.0f}s for three baseline trainings"


@requires_mnist
class TestCriterion6:
    def _means(self, desk_run):
        means = {(r.model_id, r.eps): r.accuracy for r in mean_rows(desk_run["rows"])}
        return means[("baseline", 0.0)], means[("baseline", 0.3)], means[("nlm-h15", 0.0)], means[("nlm-h15", 0.3)]

    @pytest.mark.criterion(6, "NLM(h=15) augmentation improves accuracy at eps=0.3")
    def test_gain_at_largest_eps(self, desk_run):
        _, base_03, _, nlm_03 = self._means(desk_run)
        assert nlm_03 - base_03 >= 0.02, f"baseline {base_03:.4f}, nlm-h15 {nlm_03:.4f}"

    @pytest.mark.criterion(6, "NLM(h=15) augmentation improves accuracy at eps=0.3")
    def test_smaller_drop(self, desk_run):
        base_0, base_03, nlm_0, nlm_03 = self._means(desk_run)
        assert nlm_0 - nlm_03 < base_0 - base_03, (
            f"drop baseline {base_0 - base_03:.4f}, nlm-h15 {nlm_0 - nlm_03:.4f}"
        )


@requires_mnist
class TestCriterion7:
    @pytest.mark.criterion(7, "FGSM outputs respect range and budget")
    def test_every_attacked_image_audited(self, desk_run):
        audit = desk_run["audit"]
        assert audit["checked"] == 6 * 7 * 2000
        assert audit["range"] == []
        assert audit["budget"] == []

    @pytest.mark.criterion(7, "FGSM outputs respect range and budget")
    def test_eps_zero_equals_clean_accuracy(self, desk_run):
        for key, m in desk_run["models"].items():
            assert m["rows"][0.0] == m["clean"], key

    @pytest.mark.criterion(7, "FGSM outputs respect range and budget")
    def test_accuracy_falls_with_eps(self, desk_run):
        for key, m in desk_run["models"].items():
            assert m["rows"][0.3] <= m["rows"][0.0], key


# ---------------------------------------------------------------------------
# 8


def _idx(magic, dims, payload):
    return struct.pack(f">I{len(dims)}I", magic, *dims) + bytes(payload)


class TestCriterion8:
    @requires_mnist
    @pytest.mark.criterion(8, "file formats and byte-identical reports")
    def test_official_mnist_files(self):
        for stem, magic, count in [
            ("train-images-idx3-ubyte", 2051, 60000),
            ("train-labels-idx1-ubyte", 2049, 60000),
            ("t10k-images-idx3-ubyte", 2051, 10000),
            ("t10k-labels-idx1-ubyte", 2049, 10000),
        ]:
            header = dataset_io.parse_idx_header(dataset_io.read_maybe_gz(MNIST_DIR / stem))
            assert header.magic == magic and header.dims[0] == count
        train = dataset_io.load_mnist_files(
            MNIST_DIR / "train-images-idx3-ubyte", MNIST_DIR / "train-labels-idx1-ubyte"
        )
        test = dataset_io.load_mnist_files(MNIST_DIR / "t10k-images-idx3-ubyte", MNIST_DIR / "t10k-labels-idx1-ubyte")
        assert len(train) == 60000 and len(test) == 10000
        assert train.image_shape == (1, 28, 28)
        assert set(np.unique(train.labels)) == set(range(10))

    @pytest.mark.criterion(8, "file formats and byte-identical reports")
    def test_corrupted_headers_rejected(self):
        images = _idx(2051, (2, 3, 3), range(18))
        labels = _idx(2049, (2,), [1, 7])
        assert len(dataset_io.load_mnist(images, labels)) == 2
        cases = [
            (_idx(2052, (2, 3, 3), range(18)), labels, dataset_io.BadMagic),
            (images, _idx(2051, (2,), [1, 7]), dataset_io.BadMagic),
            (labels, images, dataset_io.BadMagic),
            (images[:10], labels, dataset_io.TruncatedFile),
            (images[:-1], labels, dataset_io.TruncatedFile),
            (_idx(2051, (3, 3, 3), range(18)), labels, dataset_io.TruncatedFile),
            (images, _idx(2049, (3,), [1, 7, 2]), dataset_io.CountMismatch),
            (images, _idx(2049, (2,), [1, 10]), dataset_io.LabelOutOfRange),
            (b"", labels, dataset_io.TruncatedFile),
        ]
        for img_bytes, lbl_bytes, err in cases:
            with pytest.raises(err):
                dataset_io.load_mnist(img_bytes, lbl_bytes)

    @pytest.mark.criterion(8, "file formats and byte-identical reports")
    def test_cifar_hand_built_record(self):
        r = np.arange(1024) % 256
        g = (np.arange(1024) * 7) % 256
        b = 255 - r
        record = bytes([6]) + bytes(r.tolist()) + bytes(g.tolist()) + bytes(b.tolist())
        second = bytes([0]) + bytes(3072)
        ds = dataset_io.load_cifar10(record + second)
        np.testing.assert_array_equal(ds.labels, [6, 0])
        assert ds.images.shape == (2, 3, 32, 32)
        np.testing.assert_array_equal(ds.images[0, 0], r.reshape(32, 32) / 255)
        np.testing.assert_array_equal(ds.images[0, 1], g.reshape(32, 32) / 255)
        np.testing.assert_array_equal(ds.images[0, 2], b.reshape(32, 32) / 255)
        assert ds.images[0, 0, 0, 1] == 1 / 255 and ds.images[0, 2, 0, 0] == 1.0
        np.testing.assert_array_equal(ds.images[1], 0.0)
        with pytest.raises(dataset_io.BadRecordLength):
            dataset_io.load_cifar10(record[:-1])

    @pytest.mark.criterion(8, "file formats and byte-identical reports")
    def test_container_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        ds = LabeledDataset(rng.random((7, 3, 5, 4)), rng.integers(0, 10, 7), 10, "x-nlm-h15", 15.0)
        path = tmp_path / "d.nlmd"
        dataset_io.save_dataset(ds, path)
        back = dataset_io.load_dataset(path)
        np.testing.assert_array_equal(back.images, ds.images)
        np.testing.assert_array_equal(back.labels, ds.labels)
        assert (back.num_classes, back.source_tag, back.transform_h) == (10, "x-nlm-h15", 15.0)
        assert dataset_io.dataset_to_bytes(back) == path.read_bytes()

    @requires_mnist
    @pytest.mark.criterion(8, "file formats and byte-identical reports")
    def test_identical_runs_identical_csv(self, tmp_path):
        kw = dict(
            data_dir=str(MNIST_DIR), h_values=[15.0], train_subset=128, test_subset=64,
            epochs=1, batch_size=32, seeds=[1], grid_k=0,
        )
        for name in ("a", "b"):
            run_experiment(ExperimentConfig(output_dir=str(tmp_path / name), **kw))
        a = (tmp_path / "a" / "report.csv").read_bytes()
        assert a == (tmp_path / "b" / "report.csv").read_bytes()
        assert len(a.splitlines()) == 15
