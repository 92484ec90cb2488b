import random

import pytest

from gweval.geometry import BoundingBox
from gweval.ingest import Detection


def random_box(rng: random.Random, size: float = 100.0, grid: float = 1.0, max_side: float = 30.0) -> BoundingBox:
    """Box with corners on a ``grid`` lattice inside ``[0, size]^2``."""
    steps = int(size / grid)
    max_steps = max(1, int(max_side / grid))
    w = rng.randint(1, max_steps)
    h = rng.randint(1, max_steps)
    x = rng.randint(0, steps - w)
    y = rng.randint(0, steps - h)
    return BoundingBox(x * grid, y * grid, (x + w) * grid, (y + h) * grid)


def random_instance(rng: random.Random, max_boxes: int = 30, size: float = 100.0):
    """Random ground truth plus detections, half of them jittered copies of ground truth."""
    gt = [random_box(rng, size) for _ in range(rng.randint(0, max_boxes))]
    preds = []
    for _ in range(rng.randint(0, max_boxes)):
        if gt and rng.random() < 0.6:
            b = rng.choice(gt)
            dx, dy = rng.randint(-3, 3), rng.randint(-3, 3)
            try:
                b = BoundingBox(b.x_min + dx, b.y_min + dy, b.x_max + dx + rng.randint(-2, 2), b.y_max + dy)
            except ValueError:
                pass
        else:
            b = random_box(rng, size)
        # coarse confidences so ties occur
        preds.append(Detection(b, rng.choice([0.1, 0.3, 0.5, 0.5, 0.7, 0.9, 1.0])))
    return gt, preds


@pytest.fixture
def rng():
    return random.Random(1234)
