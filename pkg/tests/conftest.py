import numpy as np
import pytest



@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_conv(x, w, stride, pad):
    """Direct nested-loop cross-correlation over a (T, B, C, H, W) input."""
    t_, b_, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.zeros((t_, b_, cin, h + 2 * pad, wd + 2 * pad))
    xp[:, :, :, pad:pad + h, pad:pad + wd] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((t_, b_, cout, oh, ow))
    for t in range(t_):
        for b in range(b_):
            for co in range(cout):
                for i in range(oh):
                    for j in range(ow):
                        acc = 0.0
                        for ci in range(cin):
                            for di in range(kh):
                                for dj in range(kw):
                                    acc += xp[t, b, ci, i * stride + di, j * stride + dj] * w[co, ci, di, dj]
                        out[t, b, co, i, j] = acc
    return out


def write_cifar_batch(path, labels, rng, templates=None):
    """Write a batch in the CIFAR-10 binary layout: label byte + 3072 CHW pixel bytes."""
    labels = np.asarray(labels, dtype=np.uint8)
    if templates is None:
        templates = rng.integers(0, 256, size=(10, 3072), dtype=np.uint8)
    records = np.empty((len(labels), 3073), dtype=np.uint8)
    records[:, 0] = labels
    noise = rng.integers(-40, 41, size=(len(labels), 3072), dtype=np.int16)
    records[:, 1:] = np.clip(templates[labels % 10].astype(np.int16) + noise, 0, 255)
    records.tofile(path)


def write_fake_cifar(root, seed=0):
    """Full-size CIFAR-10 binary tree (5 x 10000 train, 10000 test) of class-template images."""
    rng = np.random.default_rng(seed)
    templates = rng.integers(0, 256, size=(10, 3072), dtype=np.uint8)
    labels = np.arange(10_000) % 10
    for i in range(1, 6):
        write_cifar_batch(root / f"data_batch_{i}.bin", rng.permutation(labels), rng, templates)
    write_cifar_batch(root / "test_batch.bin", rng.permutation(labels), rng, templates)
    return root


@pytest.fixture(scope="session")
def fake_cifar(tmp_path_factory):
    # laid out like the official tarball, with the nested batches directory
    base = tmp_path_factory.mktemp("cifar")
    (base / "cifar-10-batches-bin").mkdir()
    write_fake_cifar(base / "cifar-10-batches-bin")
    return base


# PASS/FAIL lines from test_acceptance.py, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
