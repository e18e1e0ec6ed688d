"""Run-config parsing: strict keys, overrides, canonical serialization."""

import json

import pytest

from visitrep.config import (
    Paths,
    RunConfig,
    TASK_ALIASES,
    load_run_config,
    write_run_config,
)
from visitrep.errors import ValidationError


class TestRunConfig:
    def test_defaults_validate(self):
        RunConfig().validate()

    def test_task_aliases_cover_all_four_tasks(self):
        assert set(TASK_ALIASES) == {"readmission", "mortality", "los", "codes"}
        assert RunConfig(task="los").internal_task == "los9"

    def test_json_round_trip(self):
        cfg = RunConfig(seed=11, task="readmission", paths=Paths(out="elsewhere"))
        again = RunConfig.from_json(cfg.to_json())
        assert again == cfg

    def test_partial_document_fills_defaults(self):
        cfg = RunConfig.from_json({"seed": 3, "eval": {"folds": 2}})
        assert cfg.seed == 3
        assert cfg.eval.folds == 2
        assert cfg.task == "mortality"
        assert cfg.code_embedder.d_code == 128

    def test_unknown_top_level_key(self):
        with pytest.raises(ValidationError, match="unknown keys.*fold_count"):
            RunConfig.from_json({"fold_count": 7})

    def test_unknown_section_key(self):
        with pytest.raises(ValidationError, match="config.synth: unknown keys"):
            RunConfig.from_json({"synth": {"patients": 10}})

    def test_unknown_task_name(self):
        with pytest.raises(ValidationError, match="unknown task 'triage'"):
            RunConfig.from_json({"task": "triage"})

    def test_tuple_fields_survive_json(self):
        doc = {
            "synth": {
                "vocab_sizes": [["dx", 4], ["med", 4]],
                "n_conditions": 3,
                "codes_per_condition": 2,
            },
            "eval": {"recall_ks": [3, 7]},
        }
        cfg = RunConfig.from_json(doc)
        assert cfg.synth.vocab_sizes == (("dx", 4), ("med", 4))
        assert cfg.eval.recall_ks == (3, 7)

    def test_file_round_trip(self, tmp_path):
        path = tmp_path / "config.json"
        cfg = RunConfig(seed=5, task="codes")
        write_run_config(cfg, path)
        assert load_run_config(path) == cfg

    def test_invalid_json_file(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text("{not json")
        with pytest.raises(ValidationError, match="not valid JSON"):
            load_run_config(path)

    def test_written_file_is_canonical(self, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        write_run_config(RunConfig(), a)
        write_run_config(RunConfig(), b)
        assert a.read_bytes() == b.read_bytes()
        keys = list(json.loads(a.read_text()))
        assert keys == sorted(keys)
