"""Byte-level tokenization, bundled corpora, batching, and synthetic images."""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from importlib import resources

import numpy as np

UNK_ID = 0  # bytes >= 128 fold onto NUL
CORPORA = ("arith", "code")


def tokenize(text: str | bytes) -> np.ndarray:
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    ids = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    ids[ids >= 128] = UNK_ID
    return ids


def detokenize(ids) -> str:
    return "".join("�" if i == UNK_ID else chr(i) for i in np.asarray(ids).tolist())


@dataclass(frozen=True)
class Corpus:
    name: str
    tokens: np.ndarray
    split: int  # first eval token

    @property
    def train(self) -> np.ndarray:
        return self.tokens[: self.split]

    @property
    def eval(self) -> np.ndarray:
        return self.tokens[self.split:]


def load_corpus(name: str, eval_frac: float = 0.1) -> Corpus:
    if name == "mixed":
        parts = [load_corpus(n, eval_frac) for n in CORPORA]
        train = np.concatenate([p.train for p in parts])
        return Corpus("mixed", np.concatenate([train] + [p.eval for p in parts]), len(train))
    if name not in CORPORA:
        raise ValueError(f"unknown corpus {name!r}; bundled corpora are {CORPORA}")
    text = resources.files("elasticlab.corpora").joinpath(f"{name}.txt").read_bytes()
    tokens = tokenize(text)
    return Corpus(name, tokens, int(len(tokens) * (1.0 - eval_frac)))


def windows(tokens: np.ndarray, length: int) -> np.ndarray:
    """Non-overlapping windows of ``length`` tokens, (N, length)."""
    n = len(tokens) // length
    return tokens[: n * length].reshape(n, length)


def epoch_batches(data: np.ndarray, batch_size: int, rng: np.random.Generator):
    """Shuffle the leading axis once and yield batches (last partial batch dropped unless it is the only one)."""
    order = rng.permutation(len(data))
    n_full = max(len(data) // batch_size, 1)
    for b in range(n_full):
        yield data[order[b * batch_size:(b + 1) * batch_size]]


def eval_batches(data: np.ndarray, batch_size: int, n_batches: int) -> list[np.ndarray]:
    """Deterministic leading batches of ``data`` for evaluation."""
    out = []
    for b in range(n_batches):
        chunk = data[b * batch_size:(b + 1) * batch_size]
        if len(chunk) == 0:
            break
        out.append(chunk)
    return out


# ---------------------------------------------------------------------------
# synthetic images
# ---------------------------------------------------------------------------

FAMILIES = ("stripes", "checkers", "blobs", "gradient")


def _pattern(family: str, variant: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    phase = rng.uniform(0, 2 * np.pi)
    freq = (2 + variant) * rng.uniform(0.9, 1.1)
    if family == "stripes":
        coord = xx if variant % 2 == 0 else yy
        return 0.5 + 0.5 * np.sin(2 * np.pi * freq * coord + phase)
    if family == "checkers":
        a = np.sin(2 * np.pi * freq * xx + phase)
        b = np.sin(2 * np.pi * freq * yy + phase)
        return 0.5 + 0.5 * np.sign(a * b)
    if family == "blobs":
        img = np.zeros((size, size))
        for _ in range(2 + variant):
            cy, cx = rng.uniform(0.15, 0.85, size=2)
            r = rng.uniform(0.08, 0.2)
            img += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        return np.clip(img, 0, 1)
    angle = rng.uniform(0, 2 * np.pi) if variant else phase
    return 0.5 + 0.5 * np.cos(angle) * (xx - 0.5) * 2 * 0.9 + 0.5 * np.sin(angle) * (yy - 0.5) * 0.9


def make_synthetic_images(n: int, grid: int = 8, classes: int = 4, seed: int = 0,
                          patch: int = 2, channels: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Class-conditional images cut into a grid x grid array of patches.

    Returns patches (n, grid**2, patch*patch*channels) in [0, 1] and integer labels.
    Each image is an elliptical object of random position and size on a dark
    noisy background.  The object carries its class texture (stripes, checkers,
    blobs, gradients) in the class hue, so classes are separable by color
    statistics while object versus background is shared by every class.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    rng = np.random.default_rng(seed)
    size = grid * patch
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    background = np.full((size, size, channels), 0.2)
    images = np.empty((n, size, size, channels))
    for idx, c in enumerate(labels):
        family = FAMILIES[c % len(FAMILIES)]
        variant = c // len(FAMILIES)
        base = _pattern(family, variant, size, rng)
        hue = (c / classes + rng.normal(0, 0.01)) % 1.0
        color = np.array(colorsys.hsv_to_rgb(hue, 0.8, 1.0))[:channels]
        fg = base[..., None] * color * 0.7 + 0.3 * color
        cy, cx = rng.uniform(0.3, 0.7, size=2)
        ry, rx = rng.uniform(0.2, 0.35, size=2)
        inside = (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0)[..., None]
        img = np.where(inside, fg, background) + rng.normal(0, 0.03, size=(size, size, channels))
        images[idx] = np.clip(img, 0, 1)
    patches = images.reshape(n, grid, patch, grid, patch, channels).transpose(0, 1, 3, 2, 4, 5)
    return patches.reshape(n, grid * grid, patch * patch * channels).astype(np.float32), labels


def class_subset(labels: np.ndarray, classes) -> np.ndarray:
    """Indices of examples whose label is in ``classes``."""
    return np.flatnonzero(np.isin(labels, list(classes)))
