import random
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from taskgrid.sobel import GrayImage


def random_image(rng: random.Random, width: int, height: int) -> GrayImage:
    return GrayImage(width, height, bytes(rng.randrange(256) for _ in range(width * height)))
