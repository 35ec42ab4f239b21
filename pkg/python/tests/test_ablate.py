"""Tests for ablation arms and the comparison table."""

from __future__ import annotations

from pathlib import Path

import pytest

from cmota._config import RunConfig, load_config
from cmota._run_ops import LATEST_KEY, resolve_vocab_size
from cmota.ablate import (
    ARMS,
    Arm,
    ArmResult,
    arm_config,
    factorial_arms,
    format_markdown,
    format_tsv,
    run_ablation,
    select_arms,
)
from cmota.errors import ConfigError
from cmota.evaluation import MetricReport
from cmota.storage import LocalStorage


def _report(bg: float) -> MetricReport:
    return MetricReport(
        char_f1=0.5,
        frame_acc=0.5,
        bleu2=0.5,
        bleu3=0.5,
        patch_fd=1.0,
        bg_consistency=bg,
        n_samples=2,
        config_hash="h",
    )


class TestArms:
    def test_default_set(self) -> None:
        names = [arm.name for arm in select_arms(None)]
        assert names[:4] == ["tr", "pma", "pma_awm", "pma_awm_bi"]
        assert len(names) == len(ARMS)

    def test_offline_arm_brings_its_captioner(self) -> None:
        arms = select_arms("pma_awm_bi_offline")
        assert [a.name for a in arms] == ["pma_awm_bi", "pma_awm_bi_offline"]

    def test_unknown_arm(self) -> None:
        with pytest.raises(ConfigError, match="unknown arm"):
            select_arms("everything")

    def test_factorial_skips_invalid_combinations(self) -> None:
        arms = factorial_arms()
        assert len(arms) == 20
        assert len({a.name for a in arms}) == 20
        assert not any(a.awm and a.topology == "none" for a in arms)
        assert not any(a.augmentation != "none" and not a.bidirectional for a in arms)
        names = {a.name for a in arms}
        assert all(a.captioner in names for a in arms if a.augmentation == "offline")

    def test_arm_config(self, tmp_path: Path) -> None:
        base = RunConfig(out=str(tmp_path)).replace(model={"text_vocab_size": 30})
        config = arm_config(base, ARMS["pma_awm"], seed=3)
        assert config.seed == 3
        assert config.model.topology == "partial_level"
        assert config.model.awm_enabled
        assert not config.train.bidirectional
        assert Path(config.out) == tmp_path / "ablate" / "pma_awm" / "seed-3"

    def test_offline_arm_points_at_captioner_checkpoint(self, tmp_path: Path) -> None:
        base = RunConfig(out=str(tmp_path)).replace(model={"text_vocab_size": 30})
        config = arm_config(base, ARMS["pma_awm_bi_offline"], seed=1)
        expected = tmp_path / "ablate" / "pma_awm_bi" / "seed-1" / LATEST_KEY
        assert Path(config.train.captioner_checkpoint) == expected
        assert config.train.augmentation == "offline"


class TestTable:
    def test_median_and_rows(self) -> None:
        reports = [_report(b) for b in (0.1, 0.9, 0.4)]
        result = ArmResult(Arm("x", "none", False, False), 123, reports)
        assert result.median("bg_consistency") == 0.4
        row = result.row()
        assert row["parameters"] == 123
        assert row["seeds"] == 3
        assert row["awm"] is False

    def test_formats(self) -> None:
        row = ArmResult(Arm("x", "none", False, True), 5, [_report(0.25)]).row()
        tsv = format_tsv([row]).splitlines()
        assert tsv[0].split("\t")[:3] == ["arm", "topology", "awm"]
        assert tsv[1].split("\t")[:4] == ["x", "none", "no", "yes"]
        assert tsv[1].endswith("\t0.2500")
        markdown = format_markdown([row]).splitlines()
        assert markdown[0].startswith("| arm | topology |")
        assert markdown[1].startswith("|---|")
        assert len(markdown) == 3


class TestRunAblation:
    def test_single_arm(self, tiny_run_toml: Path, tmp_path: Path) -> None:
        base = resolve_vocab_size(load_config(tiny_run_toml, cli={"out": str(tmp_path / "abl")}))
        results = run_ablation(base, [ARMS["tr"]])
        (result,) = results
        assert len(result.reports) == 1
        assert result.reports[0].extra["arm"] == "tr"
        storage = LocalStorage(tmp_path / "abl")
        assert storage.exists("ablate/table.md")
        assert storage.read_text("ablate/table.tsv").count("\n") == 2
        assert len(storage.read_records("ablate/results.ndjson")) == 1
        assert storage.exists("ablate/tr/seed-0/eval/report.json")

    def test_needs_a_seed(self, tmp_path: Path) -> None:
        with pytest.raises(ConfigError, match="seed"):
            run_ablation(RunConfig(out=str(tmp_path)), [ARMS["tr"]], seeds=[])
