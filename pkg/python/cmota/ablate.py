"""Ablation arms: train and evaluate each arm over shared seeds, then tabulate medians."""

from __future__ import annotations

import itertools
import logging
import statistics
import time
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from cmota._config import RunConfig
from cmota._run_ops import (
    CODEBOOK_KEY,
    DATA_INDEX,
    LATEST_KEY,
    eval_run,
    fit_codebook_artifact,
    generate_data,
    open_run,
    train_run,
)
from cmota.errors import ConfigError
from cmota.evaluation import MetricReport
from cmota.model import parameter_count
from cmota.storage import ArtifactStorage

logger = logging.getLogger("cmota")

METRICS = ("char_f1", "frame_acc", "bleu2", "bleu3", "patch_fd", "bg_consistency")


@dataclass(frozen=True)
class Arm:
    name: str
    topology: str
    awm: bool
    bidirectional: bool
    augmentation: str = "none"
    # arm whose trained checkpoint (same seed) captions for offline augmentation
    captioner: str | None = None

    def overrides(self) -> dict[str, dict[str, Any]]:
        return {
            "model": {"topology": self.topology, "awm_enabled": self.awm},
            "train": {"bidirectional": self.bidirectional, "augmentation": self.augmentation},
        }


# Components added one at a time, then the memory-design and augmentation comparisons.
ARMS: dict[str, Arm] = {
    arm.name: arm
    for arm in (
        Arm("tr", "none", False, False),
        Arm("pma", "partial_level", False, False),
        Arm("pma_awm", "partial_level", True, False),
        Arm("pma_awm_bi", "partial_level", True, True),
        Arm("pma_awm_bi_online", "partial_level", True, True, "online"),
        Arm("all_level_awm_bi", "all_level", True, True),
        Arm("pma_awm_bi_offline", "partial_level", True, True, "offline", captioner="pma_awm_bi"),
    )
}


def factorial_arms() -> list[Arm]:
    """Every valid combination of topology, AWM, bidirectional training and augmentation.

    AWM needs a memory and augmentation needs the image-to-text direction.
    """
    arms = []
    for topology, awm, bi, aug in itertools.product(
        ("none", "all_level", "partial_level"),
        (False, True),
        (False, True),
        ("none", "offline", "online"),
    ):
        if (awm and topology == "none") or (aug != "none" and not bi):
            continue
        name = f"{topology}-awm_{'on' if awm else 'off'}-bi_{'on' if bi else 'off'}-{aug}"
        captioner = None
        if aug == "offline":
            captioner = f"{topology}-awm_{'on' if awm else 'off'}-bi_on-none"
        arms.append(Arm(name, topology, awm, bi, aug, captioner))
    return arms


def select_arms(name: str | None) -> list[Arm]:
    """Arms for ``--arm``: one named arm (plus its captioner), ``all``, or the default set."""
    if name is None:
        return list(ARMS.values())
    if name == "all":
        return factorial_arms()
    if name not in ARMS:
        raise ConfigError(f"unknown arm {name!r}; choose from {', '.join(ARMS)} or 'all'")
    arm = ARMS[name]
    if arm.captioner is not None:
        return [ARMS[arm.captioner], arm]
    return [arm]


def arm_config(base: RunConfig, arm: Arm, seed: int) -> RunConfig:
    out = Path(base.out) / "ablate" / arm.name / f"seed-{seed}"
    config = base.replace(seed=seed, out=str(out), **arm.overrides())
    if arm.captioner is not None:
        captioner = Path(base.out) / "ablate" / arm.captioner / f"seed-{seed}" / LATEST_KEY
        config = config.replace(train={"captioner_checkpoint": str(captioner)})
    return config.validate()


def run_arm_seed(config: RunConfig, *, force: bool = False) -> MetricReport:
    storage = open_run(config)
    if not storage.exists(DATA_INDEX):
        generate_data(config, storage)
    if not storage.exists(CODEBOOK_KEY):
        fit_codebook_artifact(config, storage, force=force)
    train_run(config, storage, force=force)
    return eval_run(config, storage, force=force)


@dataclass
class ArmResult:
    arm: Arm
    parameters: int
    reports: list[MetricReport] = field(default_factory=list)

    def median(self, metric: str) -> float:
        return statistics.median(getattr(r, metric) for r in self.reports)

    def row(self) -> dict[str, Any]:
        record: dict[str, Any] = {
            "arm": self.arm.name,
            "topology": self.arm.topology,
            "awm": self.arm.awm,
            "bidirectional": self.arm.bidirectional,
            "augmentation": self.arm.augmentation,
            "parameters": self.parameters,
            "seeds": len(self.reports),
        }
        record.update({metric: self.median(metric) for metric in METRICS})
        return record


def run_ablation(
    base: RunConfig,
    arms: Sequence[Arm],
    seeds: Iterable[int] | None = None,
    *,
    force: bool = False,
    storage: ArtifactStorage | None = None,
) -> list[ArmResult]:
    """Run ``arms`` in order for every seed and write the comparison table under ``ablate/``."""
    start = time.time()
    seeds = list(base.eval.seeds if seeds is None else seeds)
    if not seeds:
        raise ConfigError("ablation needs at least one seed")
    results = []
    for arm in arms:
        result = ArmResult(arm, parameter_count(arm_config(base, arm, seeds[0]).model))
        for seed in seeds:
            config = arm_config(base, arm, seed)
            report = run_arm_seed(config, force=force)
            report.extra.update({"arm": arm.name, "seed": seed})
            result.reports.append(report)
            logger.debug("ablate: %s seed %d done", arm.name, seed)
        results.append(result)
        logger.info(
            "✓ cmota: arm %s, median bg consistency %.3f",
            arm.name,
            result.median("bg_consistency"),
        )

    storage = storage or open_run(base)
    rows = [r.row() for r in results]
    storage.write_text("ablate/table.tsv", format_tsv(rows))
    storage.write_text("ablate/table.md", format_markdown(rows))
    for result in results:
        for report in result.reports:
            storage.append_record("ablate/results.ndjson", report.to_json())
    logger.info(
        "✓ cmota: ablation of %d arm(s) x %d seed(s) in %.3fs",
        len(arms),
        len(seeds),
        time.time() - start,
    )
    return results


_COLUMNS = (
    "arm",
    "topology",
    "awm",
    "bidirectional",
    "augmentation",
    "parameters",
    "seeds",
    *METRICS,
)


def _cell(value: Any) -> str:
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def format_tsv(rows: Sequence[dict[str, Any]]) -> str:
    lines = ["\t".join(_COLUMNS)]
    lines += ["\t".join(_cell(row[c]) for c in _COLUMNS) for row in rows]
    return "\n".join(lines) + "\n"


def format_markdown(rows: Sequence[dict[str, Any]]) -> str:
    lines = ["| " + " | ".join(_COLUMNS) + " |", "|" + "---|" * len(_COLUMNS)]
    lines += ["| " + " | ".join(_cell(row[c]) for c in _COLUMNS) + " |" for row in rows]
    return "\n".join(lines) + "\n"
