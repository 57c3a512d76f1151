import os

import numpy as np
import pytest

from fc2n.autograd import precision


@pytest.fixture(autouse=True)
def float64_build():
    """Verification tests run in 64-bit; training tests opt back into float32."""
    with precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_SKIMAGE_RGB = ["astronaut.png", "chelsea.png", "coffee.png", "rocket.jpg", "motorcycle_left.png",
                "ihc.png", "hubble_deep_field.jpg", "retina.jpg"]


def natural_images(max_side: int | None = None, names=_SKIMAGE_RGB) -> list[np.ndarray]:
    """Photographs bundled with scikit-image as float (H, W, 3) arrays; gray ones are replicated."""
    import skimage
    from PIL import Image

    root = os.path.join(os.path.dirname(skimage.__file__), "data")
    out = []
    for name in names:
        path = os.path.join(root, name)
        if not os.path.exists(path):
            continue
        with Image.open(path) as im:
            im = im.convert("RGB")
            if max_side and max(im.size) > max_side:
                ratio = max_side / max(im.size)
                im = im.resize((int(im.size[0] * ratio), int(im.size[1] * ratio)), Image.LANCZOS)
            out.append(np.asarray(im).astype(np.float64))
    return out


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
