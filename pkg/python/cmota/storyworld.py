"""Synthetic story world: scenes, sentences, renders and the exact scene oracle.

A scene is a background, up to three characters and one action. Images are
composed on a 32x32 base raster from flat-colour art aligned to the 8x8
patch grid:

- patch rows 0-1: sky colour of the background
- patch rows 2-3: ground colour of the background
- slots 0-2 (patch columns 0-2, rows 2-3): 8x16 character sprites with
  transparent pixels, filled left to right in roster order
- patch (3, 3): an opaque action icon, drawn only when characters are present

Larger ``image_size`` values are integer upscales of the base raster.
"""

from __future__ import annotations

import dataclasses
import logging
import struct
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from itertools import combinations
from typing import Any

import numpy as np

from cmota._config import WorldConfig
from cmota.errors import DimensionError, TemplateError
from cmota.storage import ArtifactStorage

logger = logging.getLogger("cmota")

BASE = 32
CELL = 8
SLOTS = 3

SKY_COLOURS = {
    "snow": (180, 200, 230),
    "forest": (110, 170, 210),
    "room": (200, 170, 130),
    "beach": (80, 170, 240),
}
GROUND_COLOURS = {
    "snow": (245, 245, 250),
    "forest": (40, 120, 50),
    "room": (120, 80, 50),
    "beach": (230, 210, 140),
}
CHARACTER_COLOURS = {
    "pororo": (70, 90, 200),
    "crong": (60, 200, 60),
    "eddy": (230, 140, 40),
    "loopy": (240, 120, 180),
    "poby": (200, 200, 60),
    "harry": (130, 60, 160),
}
ACTION_COLOURS = {
    "walk": (255, 0, 0),
    "run": (0, 255, 255),
    "jump": (255, 255, 0),
    "sit": (0, 0, 255),
    "wave": (255, 0, 255),
    "sleep": (90, 90, 90),
    "eat": (255, 128, 0),
    "laugh": (0, 160, 120),
}
BACKGROUND_PHRASES = {
    "snow": "in the snow",
    "forest": "in the forest",
    "room": "in the room",
    "beach": "on the beach",
}
EYE = (20, 20, 20)
FRIENDS = "the friends"

# 0 transparent, 1 body, 2 eye
_SPRITE = np.array(
    [
        [0, 0, 1, 1, 1, 1, 0, 0],
        [0, 0, 1, 1, 1, 1, 0, 0],
        [0, 1, 1, 1, 1, 1, 1, 0],
        [0, 1, 2, 1, 1, 2, 1, 0],
        [0, 1, 1, 1, 1, 1, 1, 0],
        [0, 1, 1, 1, 1, 1, 1, 0],
        [1, 1, 1, 1, 1, 1, 1, 1],
        [1, 1, 1, 1, 1, 1, 1, 1],
        [1, 1, 1, 1, 1, 1, 1, 1],
        [1, 1, 1, 1, 1, 1, 1, 1],
        [1, 1, 1, 1, 1, 1, 1, 1],
        [1, 1, 1, 1, 1, 1, 1, 1],
        [1, 1, 1, 1, 1, 1, 1, 1],
        [1, 1, 1, 1, 1, 1, 1, 1],
        [0, 1, 1, 0, 0, 1, 1, 0],
        [0, 1, 1, 0, 0, 1, 1, 0],
    ],
    dtype=np.uint8,
)

# (singular, plural) paraphrases per action; the last ones are held out for test
TEMPLATES: dict[str, tuple[tuple[str, str], ...]] = {
    "walk": (
        ("{s} walks", "{s} walk"),
        ("{s} is walking", "{s} are walking"),
        ("{s} takes a walk", "{s} take a walk"),
        ("{s} goes for a walk", "{s} go for a walk"),
        ("{s} strolls around", "{s} stroll around"),
        ("{s} wanders about", "{s} wander about"),
    ),
    "run": (
        ("{s} runs", "{s} run"),
        ("{s} is running", "{s} are running"),
        ("{s} dashes ahead", "{s} dash ahead"),
        ("{s} races along", "{s} race along"),
        ("{s} sprints fast", "{s} sprint fast"),
        ("{s} hurries off", "{s} hurry off"),
    ),
    "jump": (
        ("{s} jumps", "{s} jump"),
        ("{s} is jumping", "{s} are jumping"),
        ("{s} hops up", "{s} hop up"),
        ("{s} leaps high", "{s} leap high"),
        ("{s} bounces around", "{s} bounce around"),
        ("{s} springs into the air", "{s} spring into the air"),
    ),
    "sit": (
        ("{s} sits down", "{s} sit down"),
        ("{s} is sitting", "{s} are sitting"),
        ("{s} takes a seat", "{s} take a seat"),
        ("{s} rests quietly", "{s} rest quietly"),
        ("{s} sits still", "{s} sit still"),
        ("{s} settles down", "{s} settle down"),
    ),
    "wave": (
        ("{s} waves hello", "{s} wave hello"),
        ("{s} is waving", "{s} are waving"),
        ("{s} waves a hand", "{s} wave a hand"),
        ("{s} greets everyone", "{s} greet everyone"),
        ("{s} says hi", "{s} say hi"),
        ("{s} raises a hand", "{s} raise a hand"),
    ),
    "sleep": (
        ("{s} sleeps", "{s} sleep"),
        ("{s} is sleeping", "{s} are sleeping"),
        ("{s} takes a nap", "{s} take a nap"),
        ("{s} dozes off", "{s} doze off"),
        ("{s} falls asleep", "{s} fall asleep"),
        ("{s} rests with eyes closed", "{s} rest with eyes closed"),
    ),
    "eat": (
        ("{s} eats", "{s} eat"),
        ("{s} is eating", "{s} are eating"),
        ("{s} has a snack", "{s} have a snack"),
        ("{s} enjoys a meal", "{s} enjoy a meal"),
        ("{s} munches food", "{s} munch food"),
        ("{s} takes a bite", "{s} take a bite"),
    ),
    "laugh": (
        ("{s} laughs", "{s} laugh"),
        ("{s} is laughing", "{s} are laughing"),
        ("{s} giggles", "{s} giggle"),
        ("{s} bursts out laughing", "{s} burst out laughing"),
        ("{s} smiles widely", "{s} smile widely"),
        ("{s} chuckles happily", "{s} chuckle happily"),
    ),
}

SPLITS = ("train", "val", "test")
_MASK64 = (1 << 64) - 1


# -- types --------------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneSpec:
    """Ground truth of one frame. ``None`` fields mean "not detected"."""

    background: str | None
    characters: tuple[str, ...]
    action: str | None
    frame: int = 0

    def to_json(self) -> dict[str, Any]:
        return {
            "background": self.background,
            "characters": list(self.characters),
            "action": self.action,
            "frame": self.frame,
        }

    @classmethod
    def from_json(cls, record: dict[str, Any]) -> SceneSpec:
        return cls(
            background=record["background"],
            characters=tuple(record["characters"]),
            action=record["action"],
            frame=int(record["frame"]),
        )


@dataclass(frozen=True)
class TemplateSet:
    """Per-action paraphrases, split into train templates and held-out test ones."""

    templates: dict[str, tuple[tuple[str, str], ...]]
    held_out: int

    def __post_init__(self) -> None:
        for action, forms in self.templates.items():
            if len(forms) < 4:
                raise TemplateError(
                    f"action {action!r} has {len(forms)} templates, need at least 4"
                )
            if not 1 <= self.held_out < len(forms):
                raise TemplateError(
                    f"cannot hold out {self.held_out} of {len(forms)} templates for {action!r}"
                )

    def ids(self, action: str, split: str) -> range:
        n = len(self.forms(action))
        cut = n - self.held_out
        return range(cut, n) if split == "test" else range(cut)

    def forms(self, action: str) -> tuple[tuple[str, str], ...]:
        try:
            return self.templates[action]
        except KeyError:
            raise TemplateError(f"no templates for action {action!r}") from None


@dataclass(frozen=True)
class StorySample:
    story_id: str
    seed: int
    split: str
    background: str
    scenes: tuple[SceneSpec, ...]
    sentences: tuple[str, ...]
    template_ids: tuple[int, ...]
    aliased: tuple[bool, ...]
    images: tuple[np.ndarray, ...] = field(compare=False, repr=False)

    @property
    def frames(self) -> int:
        return len(self.scenes)

    def mentions_background(self, t: int) -> bool:
        return self.background in self.sentences[t].split()

    @property
    def later_frames_omit_background(self) -> bool:
        return not any(self.mentions_background(t) for t in range(1, self.frames))

    def to_json(self) -> dict[str, Any]:
        return {
            "story_id": self.story_id,
            "seed": self.seed,
            "split": self.split,
            "background": self.background,
            "frames": [
                {
                    "scene": scene.to_json(),
                    "sentence": sentence,
                    "template_id": template_id,
                    "aliased": aliased,
                }
                for scene, sentence, template_id, aliased in zip(
                    self.scenes, self.sentences, self.template_ids, self.aliased
                )
            ],
        }


@dataclass
class StoryDataset:
    world: WorldConfig
    seed: int
    splits: dict[str, list[StorySample]]

    def __getitem__(self, split: str) -> list[StorySample]:
        return self.splits[split]

    def all_images(self, split: str) -> Iterator[np.ndarray]:
        for story in self.splits.get(split, []):
            yield from story.images


def template_set(world: WorldConfig) -> TemplateSet:
    missing = [a for a in world.actions if a not in TEMPLATES]
    if missing:
        raise TemplateError(f"no templates for action(s) {missing}")
    return TemplateSet({a: TEMPLATES[a] for a in world.actions}, world.held_out_templates)


# -- seeds ----------------------------------------------------------------------------------


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns ``(next_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def story_seeds(seed: int, split: str, n: int) -> list[int]:
    """Per-story seeds for ``split``.

    The splitmix64 stream started at ``seed * 4 + split index``.
    """
    state = ((seed & _MASK64) * 4 + SPLITS.index(split)) & _MASK64
    seeds = []
    for _ in range(n):
        state, out = splitmix64(state)
        seeds.append(out)
    return seeds


# -- rendering ------------------------------------------------------------------------------


def _validate_scene(spec: SceneSpec, world: WorldConfig) -> None:
    if spec.background not in world.backgrounds or spec.background not in SKY_COLOURS:
        raise ValueError(f"unknown background {spec.background!r}")
    if len(spec.characters) > SLOTS:
        raise ValueError(f"at most {SLOTS} characters per scene, got {len(spec.characters)}")
    if len(set(spec.characters)) != len(spec.characters):
        raise ValueError(f"duplicate characters in {spec.characters}")
    for c in spec.characters:
        if c not in world.characters or c not in CHARACTER_COLOURS:
            raise ValueError(f"unknown character {c!r}")
    if spec.characters and (spec.action not in world.actions or spec.action not in ACTION_COLOURS):
        raise ValueError(f"unknown action {spec.action!r}")


def _sprite(character: str, ground: tuple[int, int, int]) -> np.ndarray:
    art = np.empty((2 * CELL, CELL, 3), dtype=np.uint8)
    art[:] = ground
    art[_SPRITE == 1] = CHARACTER_COLOURS[character]
    art[_SPRITE == 2] = EYE
    return art


def _icon(action: str) -> np.ndarray:
    art = np.empty((CELL, CELL, 3), dtype=np.uint8)
    art[:] = EYE
    art[1:-1, 1:-1] = ACTION_COLOURS[action]
    return art


def _base_render(spec: SceneSpec) -> np.ndarray:
    image = np.empty((BASE, BASE, 3), dtype=np.uint8)
    image[: 2 * CELL] = SKY_COLOURS[spec.background]
    ground = GROUND_COLOURS[spec.background]
    image[2 * CELL :] = ground
    for slot, character in enumerate(spec.characters):
        image[2 * CELL :, slot * CELL : (slot + 1) * CELL] = _sprite(character, ground)
    if spec.characters:
        image[3 * CELL :, 3 * CELL :] = _icon(spec.action)
    return image


def canonical_characters(characters: Iterable[str], world: WorldConfig) -> tuple[str, ...]:
    order = {c: i for i, c in enumerate(world.characters)}
    return tuple(sorted(set(characters), key=lambda c: order[c]))


def render_scene(spec: SceneSpec, world: WorldConfig | None = None) -> np.ndarray:
    """Compose the scene as a ``uint8`` ``[H, W, 3]`` image."""
    world = world or WorldConfig()
    _validate_scene(spec, world)
    spec = SceneSpec(spec.background, canonical_characters(spec.characters, world), spec.action)
    image = _base_render(spec)
    scale = world.image_size // BASE
    if scale > 1:
        image = image.repeat(scale, axis=0).repeat(scale, axis=1)
    return image


# -- detection ------------------------------------------------------------------------------


def _to_base(image: np.ndarray, world: WorldConfig) -> np.ndarray:
    expected = (world.image_size, world.image_size, world.channels)
    if image.shape != expected:
        raise DimensionError(f"image shape {image.shape} does not match world {expected}")
    data = np.asarray(image, dtype=np.float64)
    scale = world.image_size // BASE
    if scale > 1:
        data = data.reshape(BASE, scale, BASE, scale, 3).mean(axis=(1, 3))
    return data


def _background_region(image: np.ndarray) -> np.ndarray:
    return np.concatenate(
        [image[: 2 * CELL].reshape(-1, 3), image[2 * CELL : 3 * CELL, 3 * CELL :].reshape(-1, 3)]
    )


def _distance(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean(np.abs(a.astype(np.float64) - b.astype(np.float64))))


def _nearest(region: np.ndarray, candidates: dict[Any, np.ndarray]) -> tuple[Any, float]:
    best_key, best = None, np.inf
    for key, template in candidates.items():
        d = _distance(region, template)
        if d < best:
            best_key, best = key, d
    return best_key, best


def detect_scene(image: np.ndarray, world: WorldConfig | None = None, frame: int = 0) -> SceneSpec:
    """Nearest-template inversion of :func:`render_scene`.

    Each region (background, three character slots, action cell) is matched
    to its templates by mean absolute pixel difference; matches farther than
    ``world.detect_threshold`` report ``None`` (background, action) or an
    empty slot.
    """
    world = world or WorldConfig()
    base = _to_base(image, world)
    threshold = world.detect_threshold

    bg_templates = {
        b: _background_region(_base_render(SceneSpec(b, (), None))) for b in world.backgrounds
    }
    background, bg_dist = _nearest(_background_region(base), bg_templates)
    if bg_dist > threshold:
        background = None
    grounds = [background] if background is not None else list(world.backgrounds)

    found: list[str] = []
    for slot in range(SLOTS):
        region = base[2 * CELL :, slot * CELL : (slot + 1) * CELL]
        candidates: dict[Any, np.ndarray] = {}
        for b in grounds:
            ground = np.empty((2 * CELL, CELL, 3), dtype=np.uint8)
            ground[:] = GROUND_COLOURS[b]
            candidates[(b, None)] = ground
            for c in world.characters:
                candidates[(b, c)] = _sprite(c, GROUND_COLOURS[b])
        key, dist = _nearest(region, candidates)
        if key is not None and key[1] is not None and dist <= threshold:
            found.append(key[1])

    cell = base[3 * CELL :, 3 * CELL :]
    icons: dict[Any, np.ndarray] = {a: _icon(a) for a in world.actions}
    for b in grounds:
        ground = np.empty((CELL, CELL, 3), dtype=np.uint8)
        ground[:] = GROUND_COLOURS[b]
        icons[("ground", b)] = ground
    action, action_dist = _nearest(cell, icons)
    if isinstance(action, tuple) or action_dist > threshold:
        action = None

    return SceneSpec(background, canonical_characters(found, world), action, frame)


def enumerate_scenes(world: WorldConfig) -> Iterator[SceneSpec]:
    """Every valid scene with 1..max_characters characters."""
    for background in world.backgrounds:
        for k in range(1, world.max_characters + 1):
            for cast in combinations(world.characters, k):
                for action in world.actions:
                    yield SceneSpec(background, cast, action)


def atlas(world: WorldConfig) -> list[np.ndarray]:
    """Renders covering every distinct patch of the world (codebook coverage)."""
    images = []
    for i, (background, character) in enumerate(
        (b, c) for b in world.backgrounds for c in world.characters
    ):
        action = world.actions[i % len(world.actions)]
        images.append(render_scene(SceneSpec(background, (character,), action), world))
    return images


# -- sentences ------------------------------------------------------------------------------


def subject_phrase(characters: Sequence[str]) -> str:
    if len(characters) == 1:
        return characters[0]
    return " ".join(characters[:-1]) + " and " + characters[-1]


def realize_sentence(
    spec: SceneSpec,
    template_id: int,
    alias_friends: bool = False,
    *,
    background_phrase: bool = False,
    templates: TemplateSet | None = None,
) -> str:
    """Surface form of ``spec`` under one paraphrase template.

    ``alias_friends`` replaces the character names with "the friends" (plural).
    ``background_phrase`` appends the background location phrase.
    """
    templates = templates or TemplateSet(TEMPLATES, 2)
    if spec.action is None:
        raise TemplateError("cannot realize a scene without an action")
    forms = templates.forms(spec.action)
    if not 0 <= template_id < len(forms):
        raise TemplateError(f"action {spec.action!r} has no template {template_id}")
    if not spec.characters:
        raise TemplateError("cannot realize a scene without characters")
    plural = alias_friends or len(spec.characters) > 1
    subject = FRIENDS if alias_friends else subject_phrase(spec.characters)
    sentence = forms[template_id][1 if plural else 0].format(s=subject)
    if background_phrase:
        if spec.background is None:
            raise TemplateError("cannot mention an unknown background")
        sentence = f"{sentence} {BACKGROUND_PHRASES[spec.background]}"
    return sentence


def template_corpus(world: WorldConfig) -> list[str]:
    """Sentences whose words cover every realizable sentence of ``world``."""
    corpus = [subject_phrase(world.characters)]
    for action in world.actions:
        for singular, plural in TEMPLATES.get(action, ()):
            corpus.append(singular.format(s=FRIENDS))
            corpus.append(plural.format(s=FRIENDS))
    corpus.extend(BACKGROUND_PHRASES[b] for b in world.backgrounds)
    return corpus


# -- sampling -------------------------------------------------------------------------------


def sample_story(
    seed: int,
    world: WorldConfig | None = None,
    split: str = "train",
    story_id: str | None = None,
) -> StorySample:
    """Draw one story deterministically from ``seed``.

    All frames share one background. Only the first sentence may state it
    (with probability ``p_context``); frames after the first with two or
    more characters call them "the friends" with probability ``p_friends``.
    """
    world = world or WorldConfig()
    templates = template_set(world)
    rng = np.random.default_rng(seed)
    background = world.backgrounds[int(rng.integers(len(world.backgrounds)))]
    mention = bool(rng.random() < world.p_context)

    scenes, sentences, template_ids, aliased, images = [], [], [], [], []
    for t in range(world.frames):
        k = int(rng.integers(1, world.max_characters + 1))
        picks = rng.choice(len(world.characters), size=k, replace=False)
        cast = canonical_characters((world.characters[i] for i in picks), world)
        action = world.actions[int(rng.integers(len(world.actions)))]
        choices = templates.ids(action, split)
        template_id = choices[int(rng.integers(len(choices)))]
        alias = bool(t >= 1 and k >= 2 and rng.random() < world.p_friends)
        spec = SceneSpec(background, cast, action, t)
        sentence = realize_sentence(
            spec, template_id, alias, background_phrase=mention and t == 0, templates=templates
        )
        scenes.append(spec)
        sentences.append(sentence)
        template_ids.append(template_id)
        aliased.append(alias)
        images.append(render_scene(spec, world))

    return StorySample(
        story_id=story_id or f"{split}-{seed:020d}",
        seed=seed,
        split=split,
        background=background,
        scenes=tuple(scenes),
        sentences=tuple(sentences),
        template_ids=tuple(template_ids),
        aliased=tuple(aliased),
        images=tuple(images),
    )


def make_splits(
    n_train: int, n_val: int, n_test: int, seed: int, world: WorldConfig | None = None
) -> StoryDataset:
    """Train/val use the training templates; test uses only held-out ones."""
    world = world or WorldConfig()
    template_set(world)  # raises TemplateError when the partition is impossible
    splits: dict[str, list[StorySample]] = {}
    for split, n in zip(SPLITS, (n_train, n_val, n_test)):
        splits[split] = [
            sample_story(story_seed, world, split, f"{split}-{i:05d}")
            for i, story_seed in enumerate(story_seeds(seed, split, n))
        ]
    logger.debug("make_splits: %d/%d/%d stories", n_train, n_val, n_test)
    return StoryDataset(world=world, seed=seed, splits=splits)


# -- persistence ----------------------------------------------------------------------------

_RAW_HEADER = struct.Struct("<III")


def encode_raw_image(image: np.ndarray) -> bytes:
    """Header of three little-endian u32 (width, height, channels), then row-major bytes."""
    if image.ndim != 3 or image.dtype != np.uint8:
        raise DimensionError(f"raw images are uint8 HxWxC, got {image.dtype} {image.shape}")
    h, w, c = image.shape
    return _RAW_HEADER.pack(w, h, c) + np.ascontiguousarray(image).tobytes()


def decode_raw_image(blob: bytes) -> np.ndarray:
    if len(blob) < _RAW_HEADER.size:
        raise DimensionError("raw image blob shorter than its header")
    w, h, c = _RAW_HEADER.unpack_from(blob)
    payload = blob[_RAW_HEADER.size :]
    if len(payload) != w * h * c:
        raise DimensionError(f"raw image payload has {len(payload)} bytes, header says {w * h * c}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, c).copy()


def save_dataset(
    dataset: StoryDataset,
    storage: ArtifactStorage,
    prefix: str = "data",
    meta: dict[str, Any] | None = None,
) -> None:
    """Write raw frames, per-story records and an index carrying ``meta``."""
    index: dict[str, Any] = {
        **(meta or {}),
        "format": 1,
        "seed": dataset.seed,
        "world": dataclasses.asdict(dataset.world),
        "splits": {},
    }
    for split, stories in dataset.splits.items():
        records = []
        for story in stories:
            record = story.to_json()
            for t, (frame, image) in enumerate(zip(record["frames"], story.images)):
                key = f"images/{split}/{story.story_id}_{t}.raw"
                storage.write_bytes(f"{prefix}/{key}", encode_raw_image(image))
                frame["image"] = key
            storage.write_json(f"{prefix}/stories/{split}/{story.story_id}.json", record)
            records.append(record)
        index["splits"][split] = records
    storage.write_json(f"{prefix}/index.json", index)


def load_dataset(storage: ArtifactStorage, prefix: str = "data") -> StoryDataset:
    index = storage.read_json(f"{prefix}/index.json")
    fields = {k: tuple(v) if isinstance(v, list) else v for k, v in index["world"].items()}
    world = WorldConfig(**fields)
    splits: dict[str, list[StorySample]] = {}
    for split, records in index["splits"].items():
        stories = []
        for record in records:
            frames = record["frames"]
            stories.append(
                StorySample(
                    story_id=record["story_id"],
                    seed=int(record["seed"]),
                    split=record["split"],
                    background=record["background"],
                    scenes=tuple(SceneSpec.from_json(f["scene"]) for f in frames),
                    sentences=tuple(f["sentence"] for f in frames),
                    template_ids=tuple(int(f["template_id"]) for f in frames),
                    aliased=tuple(bool(f["aliased"]) for f in frames),
                    images=tuple(
                        decode_raw_image(storage.read_bytes(f"{prefix}/{f['image']}"))
                        for f in frames
                    ),
                )
            )
        splits[split] = stories
    return StoryDataset(world=world, seed=int(index["seed"]), splits=splits)
