"""
Procedural scenes for the toy captioner

A scene is a layout of one or two colored shapes on a 16x16 grid. The real
image and its synthetic companion are rendered from the same layout and share
one caption; the synthetic style adds a tint, a stripe texture and stronger
noise, standing in for generator artifacts.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from src import config


logger = logging.getLogger(__name__)


COLORS: Dict[str, Tuple[float, float, float]] = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.1, 0.2, 0.9),
    "yellow": (0.9, 0.9, 0.1),
    "white": (0.95, 0.95, 0.95),
    "purple": (0.6, 0.1, 0.8),
    "orange": (1.0, 0.55, 0.0),
    "cyan": (0.1, 0.85, 0.85),
}

SHAPES: Dict[str, np.ndarray] = {
    "square": np.ones((4, 4)),
    "bar": np.ones((2, 6)),
    "cross": np.array([[0, 0, 1, 0, 0],
                       [0, 0, 1, 0, 0],
                       [1, 1, 1, 1, 1],
                       [0, 0, 1, 0, 0],
                       [0, 0, 1, 0, 0]], dtype=float),
    "dot": np.ones((2, 2)),
    "ring": np.pad(np.zeros((3, 3)), 1, constant_values=1.0),
}

VERTICAL = ("top", "bottom")
HORIZONTAL = ("left", "right")
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
FUNCTION_WORDS = ("and",)


def build_vocabulary(size: int = config.VOCAB_SIZE) -> List[str]:
    """Toy vocabulary: specials, scene words, then filler tokens up to size"""
    words = list(SPECIAL_TOKENS) + list(FUNCTION_WORDS) + list(COLORS) + list(SHAPES)
    words += list(VERTICAL) + list(HORIZONTAL)
    if len(words) > size:
        raise ValueError(f"vocabulary needs at least {len(words)} entries")
    words += [f"<extra_{i}>" for i in range(size - len(words))]
    return words


VOCAB = build_vocabulary()
TOKEN_IDS = {word: index for index, word in enumerate(VOCAB)}


@dataclass(frozen=True)
class SceneObject:
    color: str
    shape: str
    vertical: str
    horizontal: str

    def words(self) -> List[str]:
        return [self.color, self.shape, self.vertical, self.horizontal]


@dataclass(frozen=True)
class Scene:
    objects: Tuple[SceneObject, ...]

    def caption_words(self) -> List[str]:
        words = []
        for index, obj in enumerate(self.objects):
            if index:
                words.append("and")
            words.extend(obj.words())
        return words


def encode_caption(words: Sequence[str]) -> List[int]:
    """<bos> words <eos> as ids"""
    return [config.BOS_ID] + [TOKEN_IDS.get(w, config.UNK_ID) for w in words] + [config.EOS_ID]


def decode_caption(ids: Sequence[int]) -> List[str]:
    """Words of an id sequence, without specials"""
    specials = {config.PAD_ID, config.BOS_ID, config.EOS_ID}
    return [VOCAB[i] for i in ids if i not in specials]


def sample_scene(rng: np.random.Generator, max_objects: int = 2) -> Scene:
    """Random layout with objects in distinct quadrants"""
    count = int(rng.integers(1, max_objects + 1))
    quadrants = rng.permutation(4)[:count]
    objects = []
    for quadrant in sorted(quadrants):
        objects.append(SceneObject(
            color=str(rng.choice(list(COLORS))),
            shape=str(rng.choice(list(SHAPES))),
            vertical=VERTICAL[quadrant // 2],
            horizontal=HORIZONTAL[quadrant % 2],
        ))
    return Scene(objects=tuple(objects))


def render(scene: Scene, rng: np.random.Generator, synthetic: bool = False,
           grid: int = config.IMAGE_GRID) -> np.ndarray:
    """
    Draw a scene as a grid x grid x 3 image in [0, 1].

    Args:
        scene: Layout to draw
        rng: Generator for placement jitter and noise
        synthetic: Use the synthetic rendering style
        grid: Image side in pixels

    Returns:
        Image array
    """
    half = grid // 2
    noise = 0.08 if synthetic else 0.03
    image = 0.1 + noise * rng.standard_normal((grid, grid, 3))

    for obj in scene.objects:
        mask = SHAPES[obj.shape]
        h, w = mask.shape
        top = (0 if obj.vertical == "top" else half) + int(rng.integers(0, half - h + 1))
        left = (0 if obj.horizontal == "left" else half) + int(rng.integers(0, half - w + 1))
        color = np.array(COLORS[obj.color])
        if synthetic:
            color = np.clip(0.75 * color + np.array([0.15, 0.05, 0.2]), 0.0, 1.0)
        region = image[top:top + h, left:left + w]
        region[mask > 0] = color

    if synthetic:
        stripes = 0.15 * np.sin(np.arange(grid) * np.pi / 2.0)
        image = image + stripes[None, :, None] + np.array([0.1, 0.0, 0.15])
    return np.clip(image, 0.0, 1.0)


def to_patches(image: np.ndarray, patch: int = config.PATCH_SIZE) -> np.ndarray:
    """Split an image into row-major patches: S x (patch * patch * channels)"""
    grid = image.shape[0]
    per_side = grid // patch
    blocks = image.reshape(per_side, patch, per_side, patch, image.shape[2])
    return blocks.transpose(0, 2, 1, 3, 4).reshape(per_side * per_side, -1)


@dataclass(frozen=True)
class SceneSample:
    """One triplet before batching: real patches, synthetic patches, caption ids"""
    scene: Scene
    real_patches: np.ndarray
    syn_patches: np.ndarray
    caption: Tuple[int, ...]


def make_samples(count: int, rng: np.random.Generator) -> List[SceneSample]:
    """Render `count` paired real/synthetic samples"""
    samples = []
    for _ in range(count):
        scene = sample_scene(rng)
        real = to_patches(render(scene, rng, synthetic=False))
        syn = to_patches(render(scene, rng, synthetic=True))
        samples.append(SceneSample(
            scene=scene,
            real_patches=real,
            syn_patches=syn,
            caption=tuple(encode_caption(scene.caption_words())),
        ))
    logger.debug(f"Rendered {count} paired scenes")
    return samples
