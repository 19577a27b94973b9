import numpy as np
import pytest
from scipy import ndimage

ACCEPTANCE_LINES: dict[int, str] = {}


def gray(name: str) -> np.ndarray:
    import skimage.data
    from skimage.color import rgb2gray

    im = getattr(skimage.data, name)()
    if im.ndim == 3:
        im = rgb2gray(im[..., :3])
    im = np.asarray(im, dtype=np.float64)
    if im.max() > 1.0:
        im = im / 255.0
    return im


TRAIN_IMAGES = ("camera", "astronaut", "coffee", "chelsea", "rocket", "coins")
HELDOUT_IMAGES = ("brick", "grass", "moon", "text", "clock")


def smooth_random(rng, shape=(128, 128), sigma=3.0) -> np.ndarray:
    img = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    img -= img.min()
    return img / img.max()


def blob_image(side=96, centers=((48.0, 48.0),), sigma=3.0, amplitude=1.0, background=0.0):
    ys, xs = np.mgrid[0:side, 0:side] + 0.5
    img = np.full((side, side), background, dtype=np.float64)
    for cx, cy in centers:
        img += amplitude * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma**2))
    return np.clip(img, 0.0, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def train_pairs():
    from orient_learn.data import synth_pairs

    return synth_pairs([gray(n) for n in TRAIN_IMAGES], 500, np.random.default_rng([2024, 1]))


@pytest.fixture(scope="session")
def heldout_pairs():
    from orient_learn.data import synth_pairs

    return synth_pairs([gray(n) for n in HELDOUT_IMAGES], 200, np.random.default_rng([2024, 2]))


@pytest.fixture
def record():
    def put(number: int, passed: bool, detail: str) -> None:
        ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    return put


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
