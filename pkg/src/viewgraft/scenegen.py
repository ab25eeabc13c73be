"""Procedural two-factor scenes: object silhouette x camera view x background.

A view is a 2-D stand-in for a camera pose: the elevation squashes the
silhouette vertically and fixes where the ground line sits, the azimuth
rotates the silhouette and shifts the background texture. Non-plain
backgrounds carry anchoring artifacts (ground line, table edge, stripes)
from which the view can be read off the pixels. Masks are computed
analytically from the same geometry, so they are exact ground truth.

Rendering is deterministic: the same spec and seed always produce the
same bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ParameterError, ProtocolError, TokenError
from .numerics.matrix import Matrix

# --------------------------------------------------------------------------
# world enums

OBJECTS = (
    "circle",
    "square",
    "triangle",
    "cross",
    "ring",
    "star",
    "diamond",
    "hexagon",
    "crescent",
    "tee",
    "ell",
    "arrow",
    "bowtie",
)

ELEVATIONS = ("low", "mid", "high", "top")
AZIMUTHS = (0, 45, 90, 135, 180, 225, 270, 315)
VIEWS = tuple(f"{e}-{a:03d}" for e in ELEVATIONS for a in AZIMUTHS)

BACKGROUNDS = ("plain", "grass-noise", "forest-stripes", "table-edge", "beach-gradient")

# elevation -> (vertical squash factor, ground-line height fraction; None = no ground)
_ELEV = {"low": (0.35, 0.60), "mid": (0.55, 0.70), "high": (0.78, 0.80), "top": (1.0, None)}

# object radius as a fraction of the image side
_RADIUS = 0.32

_FILLS = {
    "circle": 0.95,
    "square": 0.88,
    "triangle": 0.62,
    "cross": 0.70,
    "ring": 0.78,
    "star": 0.55,
    "diamond": 0.66,
    "hexagon": 0.92,
    "crescent": 0.58,
    "tee": 0.74,
    "ell": 0.86,
    "arrow": 0.52,
    "bowtie": 0.82,
}


def split_view(view_id: str) -> tuple[str, int]:
    elev, az = view_id.split("-")
    return elev, int(az)


# --------------------------------------------------------------------------
# silhouettes (unit shape frame, everything inside |x|,|y| <= 1)


def _polygon(vertices):
    verts = [(float(x), float(y)) for x, y in vertices]

    def inside(x, y):
        # even-odd ray cast toward +x
        hit = np.zeros(x.shape, dtype=bool)
        n = len(verts)
        for i in range(n):
            x1, y1 = verts[i]
            x2, y2 = verts[(i + 1) % n]
            straddles = (y1 > y) != (y2 > y)
            with np.errstate(divide="ignore", invalid="ignore"):
                xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            hit ^= straddles & (x < xint)
        return hit

    return inside


def _circle(x, y):
    return x * x + y * y <= 1.0


def _ring(x, y):
    r2 = x * x + y * y
    return (r2 <= 1.0) & (r2 >= 0.55**2)


def _crescent(x, y):
    bite = (x - 0.45) ** 2 + y * y <= 0.81
    return _circle(x, y) & ~bite


def _star_vertices():
    pts = []
    for k in range(10):
        r = 1.0 if k % 2 == 0 else 0.45
        ang = -math.pi / 2 + k * math.pi / 5
        pts.append((r * math.cos(ang), r * math.sin(ang)))
    return pts


def _hexagon_vertices():
    return [(math.cos(k * math.pi / 3), math.sin(k * math.pi / 3)) for k in range(6)]


_SHAPES = {
    "circle": _circle,
    "ring": _ring,
    "crescent": _crescent,
    "square": _polygon([(-0.78, -0.78), (0.78, -0.78), (0.78, 0.78), (-0.78, 0.78)]),
    "diamond": _polygon([(0, -1), (1, 0), (0, 1), (-1, 0)]),
    "triangle": _polygon([(0, -1), (0.92, 0.72), (-0.92, 0.72)]),
    "cross": _polygon(
        [
            (-0.34, -1), (0.34, -1), (0.34, -0.34), (1, -0.34), (1, 0.34), (0.34, 0.34),
            (0.34, 1), (-0.34, 1), (-0.34, 0.34), (-1, 0.34), (-1, -0.34), (-0.34, -0.34),
        ]
    ),
    "star": _polygon(_star_vertices()),
    "hexagon": _polygon(_hexagon_vertices()),
    "tee": _polygon(
        [(-1, -1), (1, -1), (1, -0.45), (0.3, -0.45), (0.3, 1), (-0.3, 1), (-0.3, -0.45), (-1, -0.45)]
    ),
    "ell": _polygon([(-1, -1), (-0.3, -1), (-0.3, 0.45), (1, 0.45), (1, 1), (-1, 1)]),
    "arrow": _polygon(
        [(-1, -0.35), (0.1, -0.35), (0.1, -0.8), (1, 0), (0.1, 0.8), (0.1, 0.35), (-1, 0.35)]
    ),
    "bowtie": _polygon([(-1, -0.8), (1, 0.8), (1, -0.8), (-1, 0.8)]),
}


# --------------------------------------------------------------------------
# specs and rendered scenes


@dataclass(frozen=True)
class SceneSpec:
    object_id: str
    view_id: str
    background_id: str
    grid: int = 24

    def __post_init__(self):
        if self.object_id not in OBJECTS:
            raise ParameterError(f"unknown object {self.object_id!r}")
        if self.view_id not in VIEWS:
            raise ParameterError(f"unknown view {self.view_id!r}")
        if self.background_id not in BACKGROUNDS:
            raise ParameterError(f"unknown background {self.background_id!r}")
        if self.grid < 16:
            raise ParameterError(f"grid must be >= 16, got {self.grid}")


@dataclass(frozen=True)
class RenderedScene:
    image: Matrix  # values in [0, 1]
    mask: Matrix  # exactly the object-covered pixels, {0, 1}
    spec: SceneSpec


class Split(str, Enum):
    PRETRAIN = "pretrain"
    VIEW_SHOT = "view-shot"
    OBJECT_SHOTS = "object-shots"
    HELDOUT = "heldout-eval"


@dataclass
class Dataset:
    """Scenes paired with prompt token sequences.

    Items are used exactly as rendered; no geometric augmentation (flips,
    crops, rotations) is ever applied, since that would change the view.
    """

    items: list[tuple[RenderedScene, tuple[int, ...]]]
    split: Split


# --------------------------------------------------------------------------
# backgrounds

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _hash01(i, j, salt):
    # splitmix64-style avalanche of (pixel, salt) -> [0, 1)
    mixed = (int(salt) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    h = (
        i.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
        + j.astype(np.uint64) * np.uint64(0xBF58476D1CE4E5B9)
        + np.uint64(mixed)
    ) & _M64
    h ^= h >> np.uint64(30)
    h = (h * np.uint64(0xBF58476D1CE4E5B9)) & _M64
    h ^= h >> np.uint64(27)
    h = (h * np.uint64(0x94D049BB133111EB)) & _M64
    h ^= h >> np.uint64(31)
    return h.astype(np.float64) / float(2**64)


def render_background(view_id: str, background_id: str, grid: int, seed: int) -> Matrix:
    """The scene with the object removed; same bytes for the same arguments."""
    elev, az = split_view(view_id)
    _, ground = _ELEV[elev]
    rows = np.arange(grid)
    cols = np.arange(grid)
    jj, ii = np.meshgrid(cols, rows)
    u = (jj + 0.5) / grid
    v = (ii + 0.5) / grid
    shift = az / 360.0

    if background_id == "plain":
        img = np.full((grid, grid), 0.12)
    elif background_id == "grass-noise":
        salt = (int(seed) * 65_537 + az) & 0xFFFFFFFFFFFFFFFF
        img = 0.30 + 0.13 * _hash01(ii, jj, salt)
    elif background_id == "forest-stripes":
        trunk = np.modf(u * 5.0 + shift * 2.0)[0] < 0.35
        img = np.where(trunk, 0.40, 0.18)
        if ground is not None:
            img = np.where(v >= ground, 0.14, img)
    elif background_id == "table-edge":
        stripe = np.modf(u * 8.0 + shift * 3.0)[0] < 0.5
        surface = np.where(stripe, 0.36, 0.40)
        if ground is None:
            img = surface
        else:
            img = np.where(v >= ground, surface, 0.22)
    elif background_id == "beach-gradient":
        wave = 0.02 * np.sin(2.0 * math.pi * (u + shift))
        if ground is None:
            img = 0.36 + 0.08 * v + wave
        else:
            sky = 0.34 - 0.10 * (v / ground)
            sand = 0.38 + 0.06 * (v - ground) / max(1.0 - ground, 1e-6)
            img = np.where(v >= ground, sand, sky) + wave
    else:
        raise ParameterError(f"unknown background {background_id!r}")

    if ground is not None and background_id != "plain":
        # anchoring artifact: the ground line itself
        line = np.abs(v - ground) < 0.5 / grid
        depth = {"grass-noise": 0.04, "forest-stripes": 0.10, "beach-gradient": 0.06}.get(background_id)
        if depth is not None:
            img = np.where(line, np.maximum(img - depth, 0.02), img)
        else:  # table-edge: a bright rim reads as the table edge
            img = np.where(line, 0.455, img)

    if background_id != "plain":
        # continuous azimuth phase, so coarse pixel grids cannot alias two
        # azimuths onto identical textures
        img = img + 0.015 * np.sin(2.0 * math.pi * (u + shift))

    out = np.clip(img, 0.0, 1.0).astype(np.float32)
    out.setflags(write=False)
    return out


def _object_mask(object_id: str, view_id: str, grid: int) -> np.ndarray:
    elev, az = split_view(view_id)
    squash, ground = _ELEV[elev]
    cy = 0.5 if ground is None else ground - _RADIUS * squash
    rows = np.arange(grid)
    cols = np.arange(grid)
    jj, ii = np.meshgrid(cols, rows)
    u = (jj + 0.5) / grid
    v = (ii + 0.5) / grid
    x = (u - 0.5) / _RADIUS
    y = (v - cy) / (_RADIUS * squash)
    theta = math.radians(az)
    c, s = math.cos(theta), math.sin(theta)
    xs = c * x + s * y
    ys = -s * x + c * y
    return _SHAPES[object_id](xs, ys)


def render(spec: SceneSpec, seed: int = 0) -> RenderedScene:
    """Draw the object over its background under the view transform."""
    bg = render_background(spec.view_id, spec.background_id, spec.grid, seed)
    inside = _object_mask(spec.object_id, spec.view_id, spec.grid)
    image = np.where(inside, np.float32(_FILLS[spec.object_id]), bg).astype(np.float32)
    image.setflags(write=False)
    mask = inside.astype(np.float32)
    mask.setflags(write=False)
    return RenderedScene(image=image, mask=mask, spec=spec)


# --------------------------------------------------------------------------
# vocabulary and prompts

UID_POOL = tuple(f"rare{i:02d}" for i in range(24))


class Vocabulary:
    """Fixed token table: specials, class nouns, view words, reserved rare uids."""

    def __init__(self):
        self.words = ("<pad>", "a", "view", "of") + OBJECTS + VIEWS + UID_POOL
        self.ids = {w: i for i, w in enumerate(self.words)}
        self.pad_id = self.ids["<pad>"]

    def __len__(self):
        return len(self.words)

    def encode(self, word: str) -> int:
        try:
            return self.ids[word]
        except KeyError:
            raise TokenError(f"unknown token {word!r}") from None

    def decode(self, token_id: int) -> str:
        return self.words[token_id]


DEFAULT_VOCAB = Vocabulary()


def tokenize_prompt(
    view_uid: str | None,
    object_uid: str,
    class_name: str,
    vocab: Vocabulary = DEFAULT_VOCAB,
) -> tuple[int, ...]:
    """'a <view-uid> view of <object-uid> <class>'; without a view uid the
    view slots drop out, leaving the 4-token 'a of <object-uid> <class>'."""
    for uid in (view_uid, object_uid):
        if uid is None:
            continue
        if uid not in UID_POOL:
            raise TokenError(f"{uid!r} is not in the reserved uid pool")
    if class_name not in OBJECTS:
        raise TokenError(f"{class_name!r} is not a known class noun")
    if view_uid is not None and view_uid == object_uid:
        raise TokenError("view and object uids must differ")
    enc = vocab.encode
    if view_uid is None:
        return (enc("a"), enc("of"), enc(object_uid), enc(class_name))
    return (enc("a"), enc(view_uid), enc("view"), enc("of"), enc(object_uid), enc(class_name))


def detokenize_prompt(token_ids, vocab: Vocabulary = DEFAULT_VOCAB) -> tuple[str, ...]:
    return tuple(vocab.decode(t) for t in token_ids)


def pretrain_caption(spec: SceneSpec, vocab: Vocabulary = DEFAULT_VOCAB) -> tuple[int, ...]:
    """Fully descriptive caption used only for base-model training."""
    enc = vocab.encode
    return (enc("a"), enc(spec.view_id), enc("view"), enc("of"), enc(spec.object_id))


# --------------------------------------------------------------------------
# splits


@dataclass
class SplitBundle:
    view_shot: Dataset
    object_shots: Dataset
    heldout: Dataset


def make_splits(
    view_for_view_lora: str,
    object_for_view_lora: str,
    novel_object: str,
    n_object_shots: int,
    *,
    background_id: str = "table-edge",
    shot_backgrounds: tuple[str, ...] | None = None,
    grid: int = 24,
    seed: int = 0,
    uid_view: str = "rare00",
    uid_view_object: str = "rare01",
    uid_novel: str = "rare02",
    vocab: Vocabulary = DEFAULT_VOCAB,
) -> SplitBundle:
    """One view scene, a few novel-object scenes at other views, and the
    held-out ground truth pairing the novel object with the target view."""
    if novel_object == object_for_view_lora:
        raise ProtocolError("novel object must differ from the view-training object")
    if n_object_shots < 1:
        raise ParameterError("need at least one object shot")

    candidates = [w for w in VIEWS if w != view_for_view_lora]
    if n_object_shots > len(candidates):
        raise ParameterError(f"cannot pick {n_object_shots} distinct non-target views")
    step = max(1, len(candidates) // n_object_shots)
    shot_views = candidates[::step][:n_object_shots]
    if view_for_view_lora in shot_views:
        raise ProtocolError("object-shot views overlap the target view")

    backgrounds = shot_backgrounds if shot_backgrounds else BACKGROUNDS

    view_scene = render(SceneSpec(object_for_view_lora, view_for_view_lora, background_id, grid), seed)
    view_prompt = tokenize_prompt(uid_view, uid_view_object, object_for_view_lora, vocab)

    shots = []
    object_prompt = tokenize_prompt(None, uid_novel, novel_object, vocab)
    for i, w in enumerate(shot_views):
        bg = backgrounds[i % len(backgrounds)]
        shots.append((render(SceneSpec(novel_object, w, bg, grid), seed), object_prompt))

    heldout_scene = render(SceneSpec(novel_object, view_for_view_lora, background_id, grid), seed)
    heldout_prompt = tokenize_prompt(uid_view, uid_novel, novel_object, vocab)

    return SplitBundle(
        view_shot=Dataset(items=[(view_scene, view_prompt)], split=Split.VIEW_SHOT),
        object_shots=Dataset(items=shots, split=Split.OBJECT_SHOTS),
        heldout=Dataset(items=[(heldout_scene, heldout_prompt)], split=Split.HELDOUT),
    )


def pretrain_dataset(
    objects=OBJECTS,
    views=VIEWS,
    backgrounds=BACKGROUNDS,
    grid: int = 24,
    seed: int = 0,
    per_pair: int = 1,
    vocab: Vocabulary = DEFAULT_VOCAB,
) -> Dataset:
    """Full factor grid; each (object, view) pair occurs len(backgrounds) * per_pair times."""
    items = []
    for obj in objects:
        for w in views:
            for rep in range(per_pair):
                for k, bg in enumerate(backgrounds):
                    spec = SceneSpec(obj, w, bg, grid)
                    items.append((render(spec, seed + rep * 1000 + k), pretrain_caption(spec, vocab)))
    return Dataset(items=items, split=Split.PRETRAIN)


# --------------------------------------------------------------------------
# image files


def write_pgm(path, image: Matrix) -> None:
    """Binary PGM (P5, maxval 255) from an image in [0, 1]."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path) -> Matrix:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise ParameterError(f"{path} is not a binary PGM")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1
    w, h, maxval = fields
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    img = (data.reshape(h, w).astype(np.float32)) / float(maxval)
    img.setflags(write=False)
    return img
