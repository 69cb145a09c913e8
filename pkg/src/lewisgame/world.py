"""Deterministic synthetic shape world.

Scenes hold one to three attributed objects on a small grid. Each scene
gets a fixed-length attribute-vector observation (optionally a tiny
raster), plus templated reference captions used only for evaluation and
supervised warm starts. All randomness is keyed by explicit seeds;
regenerating with the same seed and spec is bitwise identical.
"""

from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .params import FormatError, UnsupportedVersionError, _Reader
from .tensor import F32

SHAPES = ("circle", "square", "triangle", "star", "cross")
COLORS = ("red", "green", "blue", "yellow", "purple", "orange")
SIZES = ("small", "big")
GLUE = ("a", "and", "left", "right", "above", "below", "of")
SPECIALS = ("<bos>", "<eos>", "<pad>", "<unk>")

BOS, EOS, PAD, UNK = 0, 1, 2, 3

DATASET_MAGIC = b"LGW1"
DATASET_VERSION = 1

_N_ATTR = len(SHAPES) * len(COLORS) * len(SIZES)  # 60 attribute combos
_SPLIT_CODES = {"train": 0, "val": 1, "test": 2}
_SPLIT_NAMES = {v: k for k, v in _SPLIT_CODES.items()}


class CapacityError(ValueError):
    """More distinct scenes requested than the world spec can hold."""


class SamplingError(ValueError):
    """A game batch request the dataset cannot satisfy."""


class Vocabulary:
    """Fixed token list: specials at ids 0-3, then attribute and glue words."""

    def __init__(self):
        self.tokens = SPECIALS + SIZES + COLORS + SHAPES + GLUE
        self.token_to_id = {w: i for i, w in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, words) -> list[int]:
        return [self.token_to_id.get(w, UNK) for w in words]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    def strip_specials(self, ids) -> list[int]:
        return [i for i in ids if i > UNK]


@dataclass(frozen=True)
class ObjectSpec:
    """One object: attribute indices into SHAPES/COLORS/SIZES plus a cell."""

    shape: int
    color: int
    size: int
    row: int
    col: int

    def words(self) -> tuple[str, str, str]:
        return SIZES[self.size], COLORS[self.color], SHAPES[self.shape]

    def code(self, grid: int) -> int:
        pos = self.row * grid + self.col
        return pos * _N_ATTR + self.shape * (len(COLORS) * len(SIZES)) \
            + self.color * len(SIZES) + self.size


@dataclass(frozen=True)
class Scene:
    """An ordered (row-major by cell) tuple of objects plus a stable id."""

    objects: tuple
    scene_id: int

    @classmethod
    def from_objects(cls, objects, grid: int) -> "Scene":
        objs = tuple(sorted(objects, key=lambda o: (o.row, o.col)))
        cells = {(o.row, o.col) for o in objs}
        if len(cells) != len(objs):
            raise ValueError("scene objects must occupy distinct cells")
        base = grid * grid * _N_ATTR + 1
        sid = 0
        for i, o in enumerate(objs):
            sid += (o.code(grid) + 1) * base ** i
        return cls(objs, sid)

    def attribute_words(self) -> set[str]:
        out = set()
        for o in self.objects:
            out.update(o.words())
        return out


@dataclass(frozen=True)
class WorldSpec:
    """Shape-world parameters; capacity and observation size derive from it."""

    grid: int = 4
    min_objects: int = 1
    max_objects: int = 3
    noise: float = 0.05
    raster: bool = False
    raster_size: int = 16

    def __post_init__(self):
        if not (1 <= self.min_objects <= self.max_objects <= 3):
            raise ValueError("object counts must satisfy 1 <= min <= max <= 3")
        if self.grid < 2:
            raise ValueError("grid must be at least 2")
        if self.raster and self.raster_size % self.grid:
            raise ValueError("raster_size must be a multiple of grid")
        # noise is serialized as f32; canonicalize so round-trips compare equal
        object.__setattr__(self, "noise", float(F32(self.noise)))

    @property
    def block_dim(self) -> int:
        return len(SHAPES) + len(COLORS) + len(SIZES) + 2 * self.grid

    @property
    def obs_dim(self) -> int:
        return self.max_objects * self.block_dim

    @property
    def input_dim(self) -> int:
        """Width of the vector the agents actually consume."""
        return self.raster_size ** 2 * 3 if self.raster else self.obs_dim

    def capacity(self) -> int:
        cells = self.grid * self.grid
        total = 0
        for c in range(self.min_objects, self.max_objects + 1):
            total += math.comb(cells, c) * _N_ATTR ** c
        return total


def _random_scene(rng, spec: WorldSpec) -> Scene:
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    cells = rng.choice(spec.grid * spec.grid, size=count, replace=False)
    objs = []
    for cell in cells:
        objs.append(ObjectSpec(
            shape=int(rng.integers(len(SHAPES))),
            color=int(rng.integers(len(COLORS))),
            size=int(rng.integers(len(SIZES))),
            row=int(cell) // spec.grid,
            col=int(cell) % spec.grid,
        ))
    return Scene.from_objects(objs, spec.grid)


def _enumerate_scenes(spec: WorldSpec):
    cells = range(spec.grid * spec.grid)
    for count in range(spec.min_objects, spec.max_objects + 1):
        for cell_combo in itertools.combinations(cells, count):
            for attrs in itertools.product(range(_N_ATTR), repeat=count):
                objs = []
                for cell, a in zip(cell_combo, attrs):
                    shape, rest = divmod(a, len(COLORS) * len(SIZES))
                    color, size = divmod(rest, len(SIZES))
                    objs.append(ObjectSpec(shape, color, size,
                                           cell // spec.grid, cell % spec.grid))
                yield Scene.from_objects(objs, spec.grid)


def draw_scenes(seed: int, n: int, spec: WorldSpec) -> list[Scene]:
    """Draw ``n`` distinct scenes, deterministically in ``seed``."""
    cap = spec.capacity()
    if n > cap:
        raise CapacityError(
            f"requested {n} scenes but the spec holds only {cap} distinct ones")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5C3E]))
    if cap <= 200_000:
        all_scenes = list(_enumerate_scenes(spec))
        order = rng.permutation(len(all_scenes))
        return [all_scenes[i] for i in order[:n]]
    seen = set()
    out = []
    while len(out) < n:
        s = _random_scene(rng, spec)
        if s.scene_id not in seen:
            seen.add(s.scene_id)
            out.append(s)
    return out


def observation_vector(scene: Scene, spec: WorldSpec, rng) -> np.ndarray:
    """One-hot attribute blocks per object slot, zero padded, plus noise."""
    vec = np.zeros(spec.obs_dim, F32)
    bd = spec.block_dim
    for i, o in enumerate(scene.objects):
        off = i * bd
        vec[off + o.shape] = 1
        vec[off + len(SHAPES) + o.color] = 1
        vec[off + len(SHAPES) + len(COLORS) + o.size] = 1
        vec[off + len(SHAPES) + len(COLORS) + len(SIZES) + o.row] = 1
        vec[off + len(SHAPES) + len(COLORS) + len(SIZES) + spec.grid + o.col] = 1
    if spec.noise > 0:
        vec += rng.normal(0.0, spec.noise, size=vec.size).astype(F32)
    return vec


# glyph masks on a 4x4 cell; small variants sit in the 2x2 center
_GLYPHS_BIG = {
    "circle": [(0, 1), (0, 2), (1, 0), (1, 3), (2, 0), (2, 3), (3, 1), (3, 2)],
    "square": [(r, c) for r in range(4) for c in range(4)
               if r in (0, 3) or c in (0, 3)],
    "triangle": [(0, 1), (0, 2), (1, 1), (1, 2), (2, 0), (2, 3), (3, 0), (3, 3)],
    "star": [(0, 0), (0, 3), (1, 1), (1, 2), (2, 1), (2, 2), (3, 0), (3, 3)],
    "cross": [(0, 1), (0, 2), (1, 1), (1, 2), (2, 1), (2, 2), (3, 1), (3, 2),
              (1, 0), (1, 3), (2, 0), (2, 3)],
}
_GLYPHS_SMALL = {
    "circle": [(1, 1), (1, 2), (2, 1), (2, 2)],
    "square": [(1, 1), (1, 2), (2, 1), (2, 2)],
    "triangle": [(1, 1), (2, 1), (2, 2)],
    "star": [(1, 1), (2, 2)],
    "cross": [(1, 1), (1, 2), (2, 1)],
}
_COLOR_RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "purple": (0.6, 0.0, 0.8),
    "orange": (1.0, 0.55, 0.0),
}


def render_raster(scene: Scene, spec: WorldSpec) -> np.ndarray:
    """Draw each object's glyph in its color on a black raster."""
    size = spec.raster_size
    cell = size // spec.grid
    img = np.zeros((size, size, 3), F32)
    for o in scene.objects:
        shape_word = SHAPES[o.shape]
        mask = _GLYPHS_BIG[shape_word] if SIZES[o.size] == "big" \
            else _GLYPHS_SMALL[shape_word]
        rgb = np.array(_COLOR_RGB[COLORS[o.color]], F32)
        r0, c0 = o.row * cell, o.col * cell
        scale = cell / 4.0
        for (gr, gc) in mask:
            rr = r0 + int(gr * scale)
            cc = c0 + int(gc * scale)
            span = max(1, int(scale))
            img[rr:rr + span, cc:cc + span] = rgb
    return img


def _relation(a: ObjectSpec, b: ObjectSpec) -> list[str]:
    if a.col < b.col:
        return ["left", "of"]
    if a.col > b.col:
        return ["right", "of"]
    return ["above"] if a.row < b.row else ["below"]


def build_captions(scene: Scene, vocab: Vocabulary) -> list[list[int]]:
    """Templated reference captions (1-3 per scene) as token-id lists."""
    def describe(o):
        return ["a", *o.words()]

    objs = list(scene.objects)
    orders = [objs]
    if len(objs) >= 2:
        orders.append(objs[::-1])
    if len(objs) == 3:
        orders.append(objs[1:] + objs[:1])
    captions = []
    for order in orders:
        words = describe(order[0])
        if len(order) >= 2:
            words += _relation(order[0], order[1]) + describe(order[1])
        for extra in order[2:]:
            words += ["and"] + describe(extra)
        ids = vocab.encode(words)
        if ids not in captions:
            captions.append(ids)
    return captions


@dataclass
class Dataset:
    """Immutable-after-construction collection of scenes for one split."""

    spec: WorldSpec
    seed: int
    split: str
    scenes: list
    observations: np.ndarray
    captions: list
    rasters: np.ndarray | None = None
    vocab: Vocabulary = field(default_factory=Vocabulary)

    def __len__(self) -> int:
        return len(self.scenes)

    def scene_ids(self) -> set[int]:
        return {s.scene_id for s in self.scenes}

    def model_inputs(self) -> np.ndarray:
        """What the agents see: attribute vectors, or flat rasters."""
        if self.spec.raster:
            return self.rasters.reshape(len(self), -1)
        return self.observations

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        same_raster = (
            (self.rasters is None and other.rasters is None)
            or (self.rasters is not None and other.rasters is not None
                and self.rasters.tobytes() == other.rasters.tobytes())
        )
        return (
            self.spec == other.spec
            and self.seed == other.seed
            and self.split == other.split
            and self.scenes == other.scenes
            and self.observations.tobytes() == other.observations.tobytes()
            and self.captions == other.captions
            and same_raster
        )


def _build_dataset(scenes, spec, seed, split, obs_rng) -> Dataset:
    vocab = Vocabulary()
    obs = np.stack([observation_vector(s, spec, obs_rng) for s in scenes]) \
        if scenes else np.zeros((0, spec.obs_dim), F32)
    rasters = None
    if spec.raster:
        rasters = np.stack([render_raster(s, spec) for s in scenes]) \
            if scenes else np.zeros((0, spec.raster_size, spec.raster_size, 3), F32)
    captions = [build_captions(s, vocab) for s in scenes]
    return Dataset(spec=spec, seed=seed, split=split, scenes=list(scenes),
                   observations=obs, captions=captions, rasters=rasters,
                   vocab=vocab)


def generate_dataset(seed: int, n_scenes: int, spec: WorldSpec,
                     split: str = "train") -> Dataset:
    """Deterministic dataset of ``n_scenes`` distinct scenes."""
    scenes = draw_scenes(seed, n_scenes, spec)
    obs_rng = np.random.default_rng(
        np.random.SeedSequence([int(seed), 0x0B5, _SPLIT_CODES[split]]))
    return _build_dataset(scenes, spec, seed, split, obs_rng)


def generate_splits(seed: int, spec: WorldSpec, n_train: int, n_val: int = 0,
                    n_test: int = 0) -> dict[str, Dataset]:
    """Disjoint train/val/test datasets drawn from one scene pool."""
    total = n_train + n_val + n_test
    scenes = draw_scenes(seed, total, spec)
    out = {}
    start = 0
    for split, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        if n == 0 and split != "train":
            continue
        obs_rng = np.random.default_rng(
            np.random.SeedSequence([int(seed), 0x0B5, _SPLIT_CODES[split]]))
        out[split] = _build_dataset(scenes[start:start + n], spec, seed,
                                    split, obs_rng)
        start += n
    return out


def mix_datasets(base: Dataset, extra: Dataset) -> Dataset:
    """Append scenes from a second world into a training dataset.

    Scene ids may collide across different specs; colliding extras are
    dropped so the distinct-id invariant holds.
    """
    if extra.spec.obs_dim != base.spec.obs_dim:
        raise ValueError("mixed worlds must share the observation layout")
    have = base.scene_ids()
    keep = [i for i, s in enumerate(extra.scenes) if s.scene_id not in have]
    scenes = base.scenes + [extra.scenes[i] for i in keep]
    obs = np.concatenate([base.observations, extra.observations[keep]]) \
        if keep else base.observations
    captions = base.captions + [extra.captions[i] for i in keep]
    rasters = base.rasters
    if base.rasters is not None and extra.rasters is not None and keep:
        rasters = np.concatenate([base.rasters, extra.rasters[keep]])
    return Dataset(spec=base.spec, seed=base.seed, split=base.split,
                   scenes=scenes, observations=obs, captions=captions,
                   rasters=rasters, vocab=base.vocab)


@dataclass(frozen=True)
class GameBatch:
    """One sampled round: target position plus K distinct scene indices."""

    target_pos: int
    scene_indices: np.ndarray


def sample_game_batch(dataset: Dataset, k: int, rng) -> GameBatch:
    """Uniformly draw K distinct scenes and a uniform target position."""
    if k < 2:
        raise SamplingError(f"need at least 2 candidates, got K={k}")
    if k > len(dataset):
        raise SamplingError(
            f"K={k} exceeds dataset size {len(dataset)}")
    idx = rng.choice(len(dataset), size=k, replace=False)
    target = int(rng.integers(k))
    return GameBatch(target_pos=target, scene_indices=idx)


# ---------------------------------------------------------------------------
# serialization (LGW1)


def save_dataset(dataset: Dataset, path: str) -> None:
    spec = dataset.spec
    chunks = [
        DATASET_MAGIC,
        struct.pack("<H", DATASET_VERSION),
        struct.pack("<BBBBH", spec.grid, spec.min_objects, spec.max_objects,
                    1 if spec.raster else 0, spec.raster_size),
        struct.pack("<f", spec.noise),
        struct.pack("<Q", dataset.seed),
        struct.pack("<B", _SPLIT_CODES[dataset.split]),
        struct.pack("<I", len(dataset)),
        struct.pack("<I", spec.obs_dim),
    ]
    for i, scene in enumerate(dataset.scenes):
        chunks.append(struct.pack("<Q", scene.scene_id))
        chunks.append(struct.pack("<B", len(scene.objects)))
        for o in scene.objects:
            chunks.append(struct.pack("<BBBBB", o.shape, o.color, o.size,
                                      o.row, o.col))
        chunks.append(dataset.observations[i].astype("<f4").tobytes())
        if spec.raster:
            chunks.append(dataset.rasters[i].astype("<f4").tobytes())
        caps = dataset.captions[i]
        chunks.append(struct.pack("<B", len(caps)))
        for cap in caps:
            chunks.append(struct.pack("<B", len(cap)))
            chunks.append(struct.pack(f"<{len(cap)}H", *cap))
    import os
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def load_dataset(path: str) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    magic = r.take(4)
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    version = r.u16()
    if version != DATASET_VERSION:
        raise UnsupportedVersionError(
            f"unsupported dataset version {version}", 4)
    grid, min_obj, max_obj, raster_flag, raster_size = struct.unpack(
        "<BBBBH", r.take(6))
    noise = r.f32()
    seed = r.u64()
    split = _SPLIT_NAMES.get(r.u8())
    if split is None:
        raise FormatError("bad split tag", r.off - 1)
    n_scenes = r.u32()
    obs_dim = r.u32()
    spec = WorldSpec(grid=grid, min_objects=min_obj, max_objects=max_obj,
                     noise=noise, raster=bool(raster_flag),
                     raster_size=raster_size)
    if spec.obs_dim != obs_dim:
        raise FormatError(
            f"observation dim {obs_dim} does not match spec {spec.obs_dim}",
            r.off - 4)
    scenes, obs_rows, raster_rows, captions = [], [], [], []
    for _ in range(n_scenes):
        sid = r.u64()
        count = r.u8()
        objs = []
        for _ in range(count):
            sh, co, si, row, col = struct.unpack("<BBBBB", r.take(5))
            objs.append(ObjectSpec(sh, co, si, row, col))
        scene = Scene.from_objects(objs, grid)
        if scene.scene_id != sid:
            raise FormatError(f"scene id mismatch for {sid}", r.off)
        scenes.append(scene)
        obs_rows.append(r.f32_array(obs_dim).copy())
        if spec.raster:
            raster_rows.append(
                r.f32_array(raster_size * raster_size * 3)
                .copy().reshape(raster_size, raster_size, 3))
        caps = []
        for _ in range(r.u8()):
            ln = r.u8()
            caps.append(list(struct.unpack(f"<{ln}H", r.take(2 * ln))))
        captions.append(caps)
    if r.off != len(blob):
        raise FormatError(f"{len(blob) - r.off} trailing bytes", r.off)
    obs = np.stack(obs_rows) if obs_rows else np.zeros((0, obs_dim), F32)
    rasters = np.stack(raster_rows) if raster_rows else None
    return Dataset(spec=spec, seed=seed, split=split, scenes=scenes,
                   observations=obs, captions=captions, rasters=rasters,
                   vocab=Vocabulary())
