"""Run-directory operations behind the CLI commands.

Each function reads and writes artifacts under one run directory and
raises :mod:`cmota.errors` exceptions; :mod:`cmota.cli` maps those to exit
codes.

Run directory layout::

    config.json
    data/index.json, data/images/<split>/<story>_<t>.raw, data/stories/<split>/<story>.json
    codebook.ckpt, codebook.json, vocab.json
    checkpoints/step-<step>.ckpt, checkpoints/latest.ckpt, checkpoints/last-good.ckpt
    metrics.ndjson
    eval/report.json, eval/results.ndjson, eval/per_character.tsv
    samples/frame-<t>.raw (.png), samples/captions.json
    memory/inspect.ndjson
"""

from __future__ import annotations

import io
import json
import logging
import time
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import numpy as np

from cmota._config import RunConfig, config_from_dict
from cmota._provenance import code_version
from cmota.checkpoint import (
    Checkpoint,
    check_config_hash,
    decode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from cmota.errors import (
    CheckpointError,
    ConfigError,
    ConfigHashMismatchError,
    MissingArtifactError,
    NumericalError,
)
from cmota.evaluation import MetricReport, append_to_ledger, evaluate, generate_story
from cmota.memory import MemoryTrace
from cmota.model import BiTransformer
from cmota.numerics.tensor import no_grad
from cmota.storage import ArtifactStorage, get_storage
from cmota.storyworld import (
    StoryDataset,
    atlas,
    encode_raw_image,
    load_dataset,
    make_splits,
    save_dataset,
    template_corpus,
)
from cmota.tokenizer import Codebook, Vocab, build_vocab, decode_text, encode_text, fit_codebook
from cmota.trainer import (
    EncodedStory,
    PseudoTextBank,
    Trainer,
    encode_stories,
    loss_t2i,
    make_pseudo_texts,
    offline_augment,
    offline_bank_from_checkpoint,
)

logger = logging.getLogger("cmota")

DATA_INDEX = "data/index.json"
CODEBOOK_KEY = "codebook.ckpt"
LATEST_KEY = "checkpoints/latest.ckpt"
LAST_GOOD_KEY = "checkpoints/last-good.ckpt"
METRICS_KEY = "metrics.ndjson"


def open_run(config: RunConfig) -> ArtifactStorage:
    storage = get_storage(config.out)
    if storage is None:
        raise ConfigError(f"unsupported output location: {config.out}")
    return storage


def resolve_vocab_size(config: RunConfig) -> RunConfig:
    """Fill ``model.text_vocab_size`` from the template corpus when left at 0."""
    if config.model.text_vocab_size:
        return config
    size = len(build_vocab(template_corpus(config.world)))
    return config.replace(model={"text_vocab_size": size})


def write_config(config: RunConfig, storage: ArtifactStorage) -> None:
    record = {"config_hash": config.config_hash, "config": config.to_dict()}
    storage.write_json("config.json", record)


# -- data and codebook -----------------------------------------------------------------


def generate_data(config: RunConfig, storage: ArtifactStorage) -> StoryDataset:
    start = time.time()
    world = config.world
    dataset = make_splits(world.n_train, world.n_val, world.n_test, config.seed, world)
    save_dataset(dataset, storage, meta={"data_hash": config.data_hash})
    write_config(config, storage)
    logger.info(
        "✓ cmota: wrote %d/%d/%d stories in %.3fs",
        world.n_train,
        world.n_val,
        world.n_test,
        time.time() - start,
    )
    return dataset


def require_dataset(
    config: RunConfig, storage: ArtifactStorage, *, force: bool = False
) -> StoryDataset:
    if not storage.exists(DATA_INDEX):
        raise MissingArtifactError(DATA_INDEX, "run `cmota gen-data` with the same config first")
    index = storage.read_json(DATA_INDEX)
    found = index.get("data_hash", "")
    if found != config.data_hash and not force:
        raise ConfigHashMismatchError(config.data_hash, found, DATA_INDEX)
    return load_dataset(storage)


def fit_codebook_artifact(
    config: RunConfig, storage: ArtifactStorage, *, force: bool = False
) -> tuple[Vocab, Codebook]:
    start = time.time()
    dataset = require_dataset(config, storage, force=force)
    vocab = build_vocab(template_corpus(config.world))
    codebook = fit_codebook(
        [*dataset.all_images("train"), *atlas(config.world)],
        config.model.codebook_size,
        config.tokenizer.patch,
        seed=config.tokenizer.seed,
        max_iter=config.tokenizer.kmeans_max_iter,
    )
    ckpt = Checkpoint(
        meta={"kind": "codebook", "codebook_hash": config.codebook_hash, "patch": codebook.patch},
        tensors={
            "codebook": codebook.entries,
            "vocab": np.frombuffer(vocab.to_bytes(), dtype=np.uint8),
        },
    )
    save_checkpoint(storage, CODEBOOK_KEY, ckpt)
    storage.write_json("codebook.json", codebook.to_json())
    storage.write_json("vocab.json", vocab.to_json())
    logger.info(
        "✓ cmota: fitted %d codebook entries in %.3fs", codebook.size, time.time() - start
    )
    return vocab, codebook


def _vocab_codebook(ckpt: Checkpoint, config: RunConfig) -> tuple[Vocab, Codebook]:
    try:
        vocab = Vocab.from_bytes(ckpt.tensors["vocab"].tobytes())
        entries = ckpt.tensors["codebook"]
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks {exc}") from exc
    codebook = Codebook(
        entries=entries, patch=config.tokenizer.patch, channels=config.world.channels
    )
    return vocab, codebook


def load_codebook(
    config: RunConfig, storage: ArtifactStorage, *, force: bool = False
) -> tuple[Vocab, Codebook]:
    if not storage.exists(CODEBOOK_KEY):
        raise MissingArtifactError(CODEBOOK_KEY, "run `cmota fit-codebook` first")
    ckpt = load_checkpoint(storage, CODEBOOK_KEY)
    found = ckpt.meta.get("codebook_hash", "")
    if found != config.codebook_hash and not force:
        raise ConfigHashMismatchError(config.codebook_hash, found, CODEBOOK_KEY)
    vocab, codebook = _vocab_codebook(ckpt, config)
    if len(vocab) != config.model.text_vocab_size:
        raise ConfigError(
            f"vocab has {len(vocab)} words but "
            f"model.text_vocab_size={config.model.text_vocab_size}"
        )
    return vocab, codebook


# -- training ----------------------------------------------------------------------------


def _step_key(step: int) -> str:
    return f"checkpoints/step-{step:06d}.ckpt"


def _with_artifacts(ckpt: Checkpoint, vocab: Vocab, codebook: Codebook) -> Checkpoint:
    ckpt.tensors["vocab"] = np.frombuffer(vocab.to_bytes(), dtype=np.uint8)
    ckpt.tensors["codebook"] = codebook.entries
    return ckpt


def read_checkpoint_file(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        return decode_checkpoint(path.read_bytes())
    except FileNotFoundError as exc:
        hint = "train the captioner arm first or fix train.captioner_checkpoint"
        raise MissingArtifactError(str(path), hint) from exc


def model_from_checkpoint(ckpt: Checkpoint) -> BiTransformer:
    config = config_from_dict(ckpt.meta["config"])
    model = BiTransformer(config.model, seed=config.seed)
    model.load_state_dict(ckpt.with_prefix("model"))
    return model


def _offline_bank(config: RunConfig, stories: Sequence[EncodedStory]) -> PseudoTextBank | None:
    if config.train.augmentation != "offline":
        return None
    if not config.train.captioner_checkpoint:
        raise ConfigError("offline augmentation needs train.captioner_checkpoint")
    captioner = model_from_checkpoint(read_checkpoint_file(config.train.captioner_checkpoint))
    captioner.eval()
    return offline_augment(stories, captioner, config.model)


def build_trainer(config: RunConfig, storage: ArtifactStorage, *, force: bool = False) -> Trainer:
    """Trainer over the run's training split, resumed from ``latest.ckpt`` when present."""
    dataset = require_dataset(config, storage, force=force)
    vocab, codebook = load_codebook(config, storage, force=force)
    stories = encode_stories(dataset["train"], vocab, codebook, config.model.t_text)
    model = BiTransformer(config.model, seed=config.seed)

    def save(trainer: Trainer) -> None:
        ckpt = _with_artifacts(trainer.to_checkpoint({"code": code_version()}), vocab, codebook)
        save_checkpoint(storage, _step_key(trainer.state.step), ckpt)
        save_checkpoint(storage, LATEST_KEY, ckpt)

    def on_failure(trainer: Trainer, exc: NumericalError) -> None:
        meta = {"code": code_version(), "failure": {"op": exc.op, **exc.diagnostics}}
        ckpt = _with_artifacts(trainer.to_checkpoint(meta), vocab, codebook)
        save_checkpoint(storage, LAST_GOOD_KEY, ckpt)
        logger.warning("⚠ cmota: saved %s before aborting", LAST_GOOD_KEY)

    ckpt = None
    if storage.exists(LATEST_KEY):
        ckpt = load_checkpoint(storage, LATEST_KEY)
        check_config_hash(ckpt, config, LATEST_KEY, force=force)
        offline = offline_bank_from_checkpoint(ckpt, config.model.t_text)
    else:
        offline = _offline_bank(config, stories)
    trainer = Trainer(
        model,
        config,
        stories,
        offline=offline,
        storage=storage,
        metrics_key=METRICS_KEY,
        checkpoint_fn=save,
        failure_fn=on_failure,
    )
    if ckpt is not None:
        trainer.load_checkpoint(ckpt)
        logger.info(
            "✓ cmota: resumed at epoch %d, step %d", trainer.state.epoch, trainer.state.step
        )
    return trainer


def train_run(
    config: RunConfig,
    storage: ArtifactStorage,
    *,
    force: bool = False,
    max_steps: int | None = None,
) -> Trainer:
    start = time.time()
    write_config(config, storage)
    trainer = build_trainer(config, storage, force=force)
    trainer.fit(max_steps=max_steps)
    assert trainer.checkpoint_fn is not None
    trainer.checkpoint_fn(trainer)
    logger.info(
        "✓ cmota: trained %d steps (%d parameters) in %.3fs",
        trainer.state.step,
        trainer.model.num_parameters(),
        time.time() - start,
    )
    return trainer


def load_trained(
    config: RunConfig, storage: ArtifactStorage, *, force: bool = False
) -> tuple[BiTransformer, Vocab, Codebook]:
    if not storage.exists(LATEST_KEY):
        raise MissingArtifactError(LATEST_KEY, "run `cmota train` first")
    ckpt = load_checkpoint(storage, LATEST_KEY)
    check_config_hash(ckpt, config, LATEST_KEY, force=force)
    model = BiTransformer(config.model, seed=config.seed)
    model.load_state_dict(ckpt.with_prefix("model"))
    model.eval()
    vocab, codebook = _vocab_codebook(ckpt, config)
    return model, vocab, codebook


# -- evaluation, sampling, inspection ------------------------------------------------------


def eval_run(config: RunConfig, storage: ArtifactStorage, *, force: bool = False) -> MetricReport:
    start = time.time()
    model, vocab, codebook = load_trained(config, storage, force=force)
    dataset = require_dataset(config, storage, force=force)
    report = evaluate(model, dataset["test"], vocab, codebook, config)
    report.extra["code"] = code_version()
    storage.write_json("eval/report.json", report.to_json())
    storage.write_text("eval/per_character.tsv", report.per_character_tsv())
    append_to_ledger(storage, report)
    logger.info(
        "✓ cmota: char-F1 %.3f, frame acc %.3f, BLEU-2 %.3f, patch FD %.4f, "
        "bg consistency %.3f (%.3fs)",
        report.char_f1,
        report.frame_acc,
        report.bleu2,
        report.patch_fd,
        report.bg_consistency,
        time.time() - start,
    )
    return report


def _write_png(storage: ArtifactStorage, key: str, image: np.ndarray) -> bool:
    try:
        from PIL import Image
    except ImportError:
        return False
    buffer = io.BytesIO()
    Image.fromarray(image).save(buffer, format="PNG")
    storage.write_bytes(key, buffer.getvalue())
    return True


def sample_run(
    config: RunConfig,
    storage: ArtifactStorage,
    sentences: Sequence[str] | None = None,
    *,
    force: bool = False,
    png: bool = True,
) -> dict[str, Any]:
    """Generate one story from ``sentences`` (default: the first test story) and caption it back."""
    model, vocab, codebook = load_trained(config, storage, force=force)
    if not sentences:
        sentences = require_dataset(config, storage, force=force)["test"][0].sentences
    texts = [encode_text(s, vocab, config.model.t_text) for s in sentences]
    generated = generate_story(model, texts, codebook, story_id="sample")
    story = EncodedStory("sample", tuple(texts), tuple(generated.tokens))
    captions = make_pseudo_texts(story, model, epoch=-1)

    wrote_png = False
    for t, image in enumerate(generated.images):
        storage.write_bytes(f"samples/frame-{t}.raw", encode_raw_image(image))
        if png:
            wrote_png = _write_png(storage, f"samples/frame-{t}.png", image) or wrote_png
    if png and not wrote_png:
        logger.warning("⚠ cmota: Pillow is not installed; wrote raw frames only")
    record = {
        "config_hash": config.config_hash,
        "sentences": list(sentences),
        "captions": [decode_text(c.tokens, vocab) for c in captions],
        "image_tokens": [z.tokens.tolist() for z in generated.tokens],
    }
    storage.write_json("samples/captions.json", record)
    logger.info("✓ cmota: wrote %d frames to samples/", len(generated.images))
    return record


def inspect_memory_run(
    config: RunConfig, storage: ArtifactStorage, *, force: bool = False, max_stories: int = 4
) -> int:
    """Dump memory attention weights as flat (frame, query, key, weight) NDJSON records."""
    model, vocab, codebook = load_trained(config, storage, force=force)
    dataset = require_dataset(config, storage, force=force)
    stories = encode_stories(dataset["test"][:max_stories], vocab, codebook, config.model.t_text)
    records: list[dict[str, Any]] = []
    with no_grad():
        for story in stories:
            trace = MemoryTrace()
            loss_t2i(story, model, trace=trace)
            records.extend(trace.weight_records(story_id=story.story_id))
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    storage.write_text("memory/inspect.ndjson", text)
    logger.info("✓ cmota: wrote %d memory attention records", len(records))
    return len(records)

