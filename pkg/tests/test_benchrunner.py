"""Tests for the config-driven benchmark runner and its CLI."""

import json
from pathlib import Path

import pytest
import yaml

from vljudge.benchrunner import (
    ConfigError,
    DatasetError,
    build_dataset,
    load_config,
    load_eval_items,
    load_reports,
    main,
    render_report,
    run_suite,
    validate_config,
)
from vljudge.datamodel import (
    CandidateResponse,
    ChartSample,
    ImageRef,
    JudgmentSpec,
    MetricReport,
    RawJudgment,
    write_jsonl,
)
from vljudge.mockserver import (
    MockInferenceServer,
    PREFERRED_MARKER,
    always_status,
    fixed_rate_policy,
)

PNG_BYTES = bytes.fromhex(
    "89504e470d0a1a0a0000000d49484452000000010000000108060000001f15c489"
    "0000000d4944415478da63fcffffff3f0005fe02fea72d64510000000049454e44ae426082"
)


@pytest.fixture(scope="module")
def image_ref(tmp_path_factory) -> ImageRef:
    path = tmp_path_factory.mktemp("charts") / "chart.png"
    path.write_bytes(PNG_BYTES)
    return ImageRef.for_file(path)


def make_item(i: int, image: ImageRef, marker_first: bool = False) -> dict:
    sample = ChartSample(
        id=f"sample-{i:03d}",
        image=image,
        task_kind="captioning",
        source="statista",
        gold_reference=f"Sales grew steadily through year {2000 + i}.",
        chart_type="bar",
    )
    text_a = f"Revenue item {i} rose sharply."
    if marker_first:
        text_a += f" {PREFERRED_MARKER}"
    responses = [
        CandidateResponse(model_id="student-a", text=text_a),
        CandidateResponse(model_id="student-b", text=f"Numbers item {i} changed."),
    ]
    return {
        "sample": sample.to_dict(),
        "responses": [r.to_dict() for r in responses],
        "gold": {
            "preference": "model_a",
            "scores": {"student-a": 4, "student-b": 2},
        },
    }


def write_run_config(tmp_path: Path, base_url: str, *, n_items: int = 3,
                     marker_first: bool = False, image: ImageRef,
                     **overrides) -> Path:
    items = [make_item(i, image, marker_first=marker_first)
             for i in range(n_items)]
    write_jsonl(tmp_path / "items.jsonl", items)
    config = {
        "run_name": "test-run",
        "datasets": [{"name": "charts", "path": "items.jsonl"}],
        "judges": [{
            "name": "mock-judge",
            "base_url": base_url,
            "max_concurrency": 2,
            "retry": {"max_attempts": 1, "backoff_base_s": 0.0, "jitter": 0.0},
        }],
        "matrix": {
            "eval_modes": ["pairwise", "pointwise"],
            "reference_modes": ["with_reference"],
            "criteria": ["factual_correctness", "informativeness"],
            "multi_criteria": False,
            "bias": False,
        },
        "output": {"dir": "out"},
    }
    for key, value in overrides.items():
        if key in ("eval_modes", "reference_modes", "criteria",
                   "multi_criteria", "bias"):
            config["matrix"][key] = value
        else:
            config[key] = value
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(config), encoding="utf-8")
    return path


# Config validation -----------------------------------------------------------


class TestConfigValidation:
    def base(self) -> dict:
        return {
            "datasets": [{"name": "d", "path": "items.jsonl"}],
            "judges": [{"name": "j", "base_url": "http://localhost:9"}],
            "matrix": {"eval_modes": ["pairwise"],
                       "criteria": ["factual_correctness"]},
            "output": {"dir": "out"},
        }

    def check(self, raw: dict, expected_path: str):
        with pytest.raises(ConfigError) as exc_info:
            validate_config(raw, Path("/tmp"))
        assert exc_info.value.path == expected_path
        assert expected_path in str(exc_info.value)

    def test_missing_datasets(self):
        raw = self.base()
        del raw["datasets"]
        self.check(raw, "datasets")

    def test_empty_judges(self):
        raw = self.base()
        raw["judges"] = []
        self.check(raw, "judges")

    def test_bad_base_url(self):
        raw = self.base()
        raw["judges"][0]["base_url"] = "localhost:9"
        self.check(raw, "judges[0].base_url")

    def test_missing_output_dir(self):
        raw = self.base()
        raw["output"] = {}
        self.check(raw, "output.dir")

    def test_unknown_eval_mode_indexed(self):
        raw = self.base()
        raw["matrix"]["eval_modes"] = ["pairwise", "listwise"]
        self.check(raw, "matrix.eval_modes[1]")

    def test_unknown_reference_mode(self):
        raw = self.base()
        raw["matrix"]["reference_modes"] = ["no_ref"]
        self.check(raw, "matrix.reference_modes[0]")

    def test_unknown_criterion(self):
        raw = self.base()
        raw["matrix"]["criteria"] = ["helpfulness"]
        self.check(raw, "matrix.criteria[0]")

    def test_duplicate_criteria(self):
        raw = self.base()
        raw["matrix"]["criteria"] = ["informativeness", "informativeness"]
        self.check(raw, "matrix.criteria")

    def test_multi_criteria_needs_two(self):
        raw = self.base()
        raw["matrix"]["multi_criteria"] = True
        self.check(raw, "matrix.multi_criteria")

    def test_duplicate_judge_names(self):
        raw = self.base()
        raw["judges"].append({"name": "j", "base_url": "http://localhost:9"})
        self.check(raw, "judges[1].name")

    def test_duplicate_dataset_names(self):
        raw = self.base()
        raw["datasets"].append({"name": "d", "path": "other.jsonl"})
        self.check(raw, "datasets[1].name")

    def test_wrong_type_reported(self):
        raw = self.base()
        raw["judges"][0]["max_concurrency"] = "four"
        self.check(raw, "judges[0].max_concurrency")

    def test_relative_paths_resolved_against_config_dir(self):
        config = validate_config(self.base(), Path("/srv/bench"))
        assert config.datasets[0].path == Path("/srv/bench/items.jsonl")
        assert config.output_dir == Path("/srv/bench/out")
        assert config.cache_dir == Path("/srv/bench/out/cache")

    def test_explicit_cache_dir(self):
        raw = self.base()
        raw["cache_dir"] = "shared-cache"
        config = validate_config(raw, Path("/srv/bench"))
        assert config.cache_dir == Path("/srv/bench/shared-cache")

    def test_criteria_sets_single_vs_multi(self):
        raw = self.base()
        raw["matrix"]["criteria"] = ["factual_correctness", "informativeness"]
        config = validate_config(raw, Path("/tmp"))
        assert config.criteria_sets() == [("factual_correctness",),
                                          ("informativeness",)]
        raw["matrix"]["multi_criteria"] = True
        config = validate_config(raw, Path("/tmp"))
        assert config.criteria_sets() == [("factual_correctness",
                                           "informativeness")]

    def test_load_config_json(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps(self.base()), encoding="utf-8")
        assert load_config(path)["output"] == {"dir": "out"}

    def test_load_config_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "absent.yaml")

    def test_load_config_unparseable(self, tmp_path):
        path = tmp_path / "config.yaml"
        path.write_text("datasets: [unclosed", encoding="utf-8")
        with pytest.raises(ConfigError, match="does not parse"):
            load_config(path)


# Dataset loading -------------------------------------------------------------


def _dataset_config(tmp_path: Path, rows) -> "DatasetConfig":
    from vljudge.benchrunner import DatasetConfig

    path = tmp_path / "items.jsonl"
    write_jsonl(path, rows)
    return DatasetConfig(name="charts", path=path)


class TestDatasetLoading:
    CRITERIA = ("factual_correctness",)

    def load(self, config, **kwargs):
        defaults = dict(need_pairwise=True, need_pointwise=True,
                        need_reference=True, criteria=self.CRITERIA)
        defaults.update(kwargs)
        return load_eval_items(config, **defaults)

    def test_missing_file(self, tmp_path):
        from vljudge.benchrunner import DatasetConfig

        config = DatasetConfig(name="charts", path=tmp_path / "absent.jsonl")
        with pytest.raises(DatasetError, match="charts"):
            self.load(config)

    def test_empty_file(self, tmp_path):
        config = _dataset_config(tmp_path, [])
        with pytest.raises(DatasetError, match="empty"):
            self.load(config)

    def test_malformed_json_line(self, tmp_path):
        path = tmp_path / "items.jsonl"
        path.write_text('{"sample": \n', encoding="utf-8")
        from vljudge.benchrunner import DatasetConfig

        config = DatasetConfig(name="charts", path=path)
        with pytest.raises(DatasetError, match="invalid JSON"):
            self.load(config)

    def test_pairwise_needs_two_responses(self, tmp_path, image_ref):
        item = make_item(0, image_ref)
        item["responses"] = item["responses"][:1]
        config = _dataset_config(tmp_path, [item])
        with pytest.raises(DatasetError, match="sample-000.*two responses"):
            self.load(config)
        assert len(self.load(config, need_pairwise=False)) == 1

    def test_with_reference_requires_gold_reference(self, tmp_path, image_ref):
        item = make_item(0, image_ref)
        del item["sample"]["gold_reference"]
        config = _dataset_config(tmp_path, [item])
        with pytest.raises(DatasetError, match="gold reference"):
            self.load(config)
        assert len(self.load(config, need_reference=False)) == 1

    def test_missing_gold_preference(self, tmp_path, image_ref):
        item = make_item(0, image_ref)
        del item["gold"]["preference"]
        config = _dataset_config(tmp_path, [item])
        with pytest.raises(DatasetError, match="preference"):
            self.load(config)
        assert len(self.load(config, need_pairwise=False)) == 1

    def test_missing_gold_score(self, tmp_path, image_ref):
        item = make_item(0, image_ref)
        del item["gold"]["scores"]["student-b"]
        config = _dataset_config(tmp_path, [item])
        with pytest.raises(DatasetError, match="student-b"):
            self.load(config)
        assert len(self.load(config, need_pointwise=False)) == 1

    def test_invalid_gold_preference_label(self, tmp_path, image_ref):
        item = make_item(0, image_ref)
        item["gold"]["preference"] = "model_c"
        config = _dataset_config(tmp_path, [item])
        with pytest.raises(DatasetError, match="model_c"):
            self.load(config)

    def test_invalid_gold_score(self, tmp_path, image_ref):
        item = make_item(0, image_ref)
        item["gold"]["scores"]["student-a"] = 9
        config = _dataset_config(tmp_path, [item])
        with pytest.raises(DatasetError, match="1..5"):
            self.load(config)

    def test_per_criterion_gold_forms(self, tmp_path, image_ref):
        item = make_item(0, image_ref)
        item["gold"] = {
            "preference": {"factual_correctness": "tie"},
            "scores": {"student-a": {"factual_correctness": 5},
                       "student-b": 1},
        }
        config = _dataset_config(tmp_path, [item])
        (loaded,) = self.load(config)
        assert loaded.preference_for("factual_correctness") == "tie"
        assert loaded.preference_for("informativeness") is None
        assert loaded.score_for("student-a", "factual_correctness") == 5
        assert loaded.score_for("student-b", "informativeness") == 1

    def test_sample_invariants_enforced(self, tmp_path, image_ref):
        item = make_item(0, image_ref)
        item["sample"]["task_kind"] = "open_qa"  # no query present
        config = _dataset_config(tmp_path, [item])
        with pytest.raises(DatasetError, match="query"):
            self.load(config)


# Suite execution -------------------------------------------------------------


class TestRunSuite:
    def test_matrix_cells_and_prompt_counts(self, tmp_path, image_ref):
        with MockInferenceServer() as server:
            config_path = write_run_config(tmp_path, server.base_url,
                                           n_items=3, image=image_ref)
            bundle = run_suite(config_path)
        assert len(bundle.reports) == 4  # 2 eval modes x 2 criteria
        counts = bundle.manifest["counts"]
        assert counts["prompts_pairwise"] == 2 * 3
        assert counts["prompts_pointwise"] == 2 * 3 * 2
        assert counts["prompts_bias"] == 0
        assert counts["judgments"] == 18
        assert counts["endpoint_failures"] == 0
        assert bundle.manifest["cache_hit_rate"] == 0.0
        modes = {(r.eval_mode, r.criteria[0]) for r in bundle.reports}
        assert modes == {
            ("pairwise", "factual_correctness"),
            ("pairwise", "informativeness"),
            ("pointwise", "factual_correctness"),
            ("pointwise", "informativeness"),
        }
        for report in bundle.reports:
            assert report.position_bias_rate is None
            assert report.format_adherence_rate == 1.0

    def test_bias_doubles_pairwise_prompts(self, tmp_path, image_ref):
        with MockInferenceServer() as server:
            config_path = write_run_config(tmp_path, server.base_url,
                                           n_items=3, image=image_ref,
                                           bias=True)
            bundle = run_suite(config_path)
        counts = bundle.manifest["counts"]
        assert counts["prompts_bias"] == counts["prompts_pairwise"] == 6
        for report in bundle.reports:
            if report.eval_mode == "pairwise":
                assert report.position_bias_rate is not None

    def test_first_slot_judge_has_maximal_position_bias(self, tmp_path,
                                                        image_ref):
        with MockInferenceServer(policy="first_slot") as server:
            config_path = write_run_config(tmp_path, server.base_url,
                                           n_items=4, image=image_ref,
                                           bias=True,
                                           eval_modes=["pairwise"])
            bundle = run_suite(config_path)
        for report in bundle.reports:
            assert report.position_bias_rate == 1.0

    def test_content_judge_has_zero_position_bias(self, tmp_path, image_ref):
        with MockInferenceServer(policy="content_preference") as server:
            config_path = write_run_config(tmp_path, server.base_url,
                                           n_items=4, image=image_ref,
                                           marker_first=True, bias=True,
                                           eval_modes=["pairwise"])
            bundle = run_suite(config_path)
        for report in bundle.reports:
            assert report.position_bias_rate == 0.0
            assert report.judgment_accuracy == 1.0

    def test_multi_criteria_single_prompt_per_item(self, tmp_path, image_ref):
        with MockInferenceServer() as server:
            config_path = write_run_config(tmp_path, server.base_url,
                                           n_items=3, image=image_ref,
                                           multi_criteria=True,
                                           eval_modes=["pairwise"])
            bundle = run_suite(config_path)
        counts = bundle.manifest["counts"]
        assert counts["prompts_pairwise"] == 3  # one prompt covers both criteria
        assert {r.criteria[0] for r in bundle.reports} == {
            "factual_correctness", "informativeness"}
        assert all(r.criteria_mode == "multi_criteria" for r in bundle.reports)

    def test_bundle_files_written(self, tmp_path, image_ref):
        with MockInferenceServer() as server:
            config_path = write_run_config(tmp_path, server.base_url,
                                           n_items=2, image=image_ref)
            bundle = run_suite(config_path)
        out = bundle.output_dir
        for name in ("manifest.json", "judgments.jsonl", "metrics.json",
                     "metrics.csv", "metrics.md"):
            assert (out / name).is_file(), name
        archive = (out / "judgments.jsonl").read_text().splitlines()
        assert len(archive) == bundle.manifest["counts"]["judgments"]
        row = json.loads(archive[0])
        assert row["order"] == "AB"
        assert row["adherence"] in {"strict", "repaired", "failed"}

    def test_warm_rerun_metrics_byte_identical(self, tmp_path, image_ref):
        with MockInferenceServer() as server:
            config_path = write_run_config(tmp_path, server.base_url,
                                           n_items=3, image=image_ref,
                                           bias=True)
            cold = run_suite(config_path)
            cold_metrics = (cold.output_dir / "metrics.json").read_bytes()
            cold_requests = server.request_count
            warm = run_suite(config_path)
            warm_metrics = (warm.output_dir / "metrics.json").read_bytes()
            assert server.request_count == cold_requests  # all cache hits
        assert cold_metrics == warm_metrics
        assert cold.manifest["cache_hit_rate"] == 0.0
        assert warm.manifest["cache_hit_rate"] == 1.0
        assert (cold.manifest["manifest_digest"]
                == warm.manifest["manifest_digest"])

    def test_peak_concurrency_respects_limit(self, tmp_path, image_ref):
        with MockInferenceServer() as server:
            config_path = write_run_config(tmp_path, server.base_url,
                                           n_items=6, image=image_ref)
            run_suite(config_path)
            assert 1 <= server.peak_concurrency <= 2

    def test_endpoint_failures_scored_as_failed(self, tmp_path, image_ref):
        with MockInferenceServer(policy=always_status(500)) as server:
            config_path = write_run_config(tmp_path, server.base_url,
                                           n_items=2, image=image_ref,
                                           eval_modes=["pairwise"])
            bundle = run_suite(config_path)
        assert bundle.endpoint_failure_rate == 1.0
        for report in bundle.reports:
            assert report.judgment_accuracy == 0.0
            assert report.format_adherence_rate == 0.0


# Report rendering ------------------------------------------------------------


def _sample_reports() -> list[MetricReport]:
    common = dict(judge_model="haiku", dataset="charts",
                  reference_mode="with_reference",
                  criteria_mode="single_criterion", n_items=8)
    return [
        MetricReport(eval_mode="pairwise", criteria=("factual_correctness",),
                     judgment_accuracy=0.75, position_bias_rate=0.25,
                     length_bias_rate=0.5, format_adherence_rate=1.0, **common),
        MetricReport(eval_mode="pairwise", criteria=("informativeness",),
                     judgment_accuracy=0.5, position_bias_rate=0.125,
                     length_bias_rate=0.25, format_adherence_rate=0.75, **common),
        MetricReport(eval_mode="pointwise", criteria=("factual_correctness",),
                     error_distance=1.25, spearman_rho=0.5,
                     format_adherence_rate=0.875, **common),
    ]


class TestRenderReport:
    def test_markdown_layout(self):
        text = render_report(_sample_reports(), "markdown",
                             {"n_cells": 3, "judgment_accuracy": 0.625})
        assert "| Metric | FC | I | Avg. |" in text
        assert "| Judgment accuracy (pairwise) | 0.7500 | 0.5000 | 0.6250 |" in text
        assert "| Error distance (pointwise) | 1.2500 | — | 1.2500 |" in text
        assert "**Format following (overall avg.): 0.8750**" in text
        assert "## Cross-cell averages" in text
        assert "- judgment_accuracy: 0.6250" in text

    def test_csv_and_json_delegate(self):
        reports = _sample_reports()
        csv_text = render_report(reports, "csv")
        assert csv_text.splitlines()[0].startswith("judge_model,dataset")
        payload = json.loads(render_report(reports, "json", {"n_cells": 3}))
        assert len(payload["cells"]) == 3
        assert payload["average"]["n_cells"] == 3

    def test_unknown_format_rejected(self):
        with pytest.raises(ValueError, match="unknown report format"):
            render_report(_sample_reports(), "html")

    def test_load_reports_round_trip(self, tmp_path):
        reports = _sample_reports()
        path = tmp_path / "metrics.json"
        path.write_text(render_report(reports, "json", {"n_cells": 3}))
        loaded, average = load_reports(tmp_path)
        assert loaded == reports
        assert average["n_cells"] == 3


# CLI -------------------------------------------------------------------------


class TestCli:
    def test_run_success_exit_zero(self, tmp_path, image_ref, capsys):
        with MockInferenceServer() as server:
            config_path = write_run_config(tmp_path, server.base_url,
                                           n_items=2, image=image_ref)
            code = main(["run", str(config_path)])
        assert code == 0
        assert "run complete" in capsys.readouterr().out

    def test_run_config_error_exit_two(self, tmp_path, capsys):
        config_path = tmp_path / "config.yaml"
        config_path.write_text(yaml.safe_dump({"judges": []}), encoding="utf-8")
        assert main(["run", str(config_path)]) == 2
        assert "config error" in capsys.readouterr().err

    def test_run_dataset_error_exit_three(self, tmp_path, image_ref, capsys):
        config_path = write_run_config(tmp_path, "http://localhost:9",
                                       n_items=1, image=image_ref)
        (tmp_path / "items.jsonl").unlink()
        assert main(["run", str(config_path)]) == 3
        assert "dataset error" in capsys.readouterr().err

    def test_run_endpoint_failures_exit_four(self, tmp_path, image_ref, capsys):
        with MockInferenceServer(policy=always_status(503)) as server:
            config_path = write_run_config(tmp_path, server.base_url,
                                           n_items=2, image=image_ref)
            code = main(["run", str(config_path)])
        assert code == 4
        assert "failure rate" in capsys.readouterr().err
        # the bundle is still written for inspection
        assert (tmp_path / "out" / "metrics.json").is_file()

    def test_report_formats(self, tmp_path, image_ref, capsys):
        with MockInferenceServer() as server:
            config_path = write_run_config(tmp_path, server.base_url,
                                           n_items=2, image=image_ref)
            main(["run", str(config_path)])
        capsys.readouterr()
        assert main(["report", str(tmp_path / "out")]) == 0
        md = capsys.readouterr().out
        assert "| Metric |" in md and "Avg." in md
        assert main(["report", str(tmp_path / "out"), "--format", "json"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["cells"]
        assert main(["report", str(tmp_path / "out"), "--format", "csv"]) == 0
        assert capsys.readouterr().out.startswith("judge_model,")

    def test_report_missing_bundle(self, tmp_path, capsys):
        assert main(["report", str(tmp_path / "nowhere")]) == 3
        assert "cannot load bundle" in capsys.readouterr().err

    def test_bench_reports_throughput(self, capsys):
        with MockInferenceServer(policy=fixed_rate_policy(1000.0, 100)) as server:
            code = main(["bench", server.base_url, "--model", "m",
                         "--runs", "2"])
        assert code == 0
        out = capsys.readouterr().out
        assert "tokens_per_sec=" in out and "ms_per_token=" in out
        rate = float(out.split("tokens_per_sec=")[1].split()[0])
        assert 100.0 < rate <= 1000.0

    def test_bench_endpoint_error_exit_four(self, capsys):
        with MockInferenceServer(policy=always_status(500)) as server:
            code = main(["bench", server.base_url, "--runs", "1",
                         "--max-attempts", "1"])
        assert code == 4
        assert "endpoint error" in capsys.readouterr().err

    def test_parse_command(self, tmp_path, image_ref, capsys):
        spec = JudgmentSpec(eval_mode="pointwise",
                            reference_mode="with_reference",
                            criteria=("informativeness",),
                            judge_model="teacher")
        rows = [
            RawJudgment(sample_id="s1", prompt_digest="d1",
                        raw_text='{"Score": 4, "Explanation": "ok"}',
                        latency_ms=1.0, spec=spec).to_dict(),
            RawJudgment(sample_id="s2", prompt_digest="d2",
                        raw_text="no json here",
                        latency_ms=1.0, spec=spec).to_dict(),
        ]
        path = tmp_path / "raw.jsonl"
        write_jsonl(path, rows)
        assert main(["parse", str(path)]) == 0
        captured = capsys.readouterr()
        lines = [json.loads(line) for line in captured.out.splitlines()]
        assert [l["adherence"] for l in lines] == ["strict", "failed"]
        assert "parsed 2 records: 1 strict, 0 repaired, 1 failed" in captured.err

    def test_parse_requires_spec(self, tmp_path, capsys):
        row = RawJudgment(sample_id="s1", prompt_digest="d",
                          raw_text="{}", latency_ms=1.0).to_dict()
        path = tmp_path / "raw.jsonl"
        write_jsonl(path, [row])
        assert main(["parse", str(path)]) == 3
        assert "no judgment spec" in capsys.readouterr().err


# Dataset building through the CLI ---------------------------------------------


def _teacher_pool(tmp_path: Path, image: ImageRef, n: int) -> Path:
    spec = JudgmentSpec(eval_mode="pointwise", reference_mode="with_reference",
                        criteria=("informativeness",), judge_model="teacher")
    rows = []
    for i in range(n):
        sample = ChartSample(id=f"pool-{i:03d}", image=image,
                             task_kind="captioning", source="pew",
                             gold_reference="A steady rise.")
        response = CandidateResponse(model_id="student", text=f"Trend {i} up.")
        rows.append({
            "sample": sample.to_dict(),
            "responses": [response.to_dict()],
            "spec": spec.to_dict(),
            "raw_text": '{"Score": 3, "Explanation": "fine"}',
        })
    path = tmp_path / "pool.jsonl"
    write_jsonl(path, rows)
    return path


def _build_config(tmp_path: Path, count: int) -> Path:
    config = {
        "pool": "pool.jsonl",
        "output": "train.jsonl",
        "seed": 7,
        "schema": [{"source": "pew", "eval_mode": "pointwise",
                    "label": "3", "count": count}],
    }
    path = tmp_path / "build.yaml"
    path.write_text(yaml.safe_dump(config), encoding="utf-8")
    return path


class TestBuildDataset:
    def test_build_writes_training_file(self, tmp_path, image_ref, capsys):
        _teacher_pool(tmp_path, image_ref, n=3)
        config_path = _build_config(tmp_path, count=2)
        assert main(["build-dataset", str(config_path)]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["n_records"] == 2
        assert summary["pool_candidates"] == 3
        lines = (tmp_path / "train.jsonl").read_text().splitlines()
        assert len(lines) == 2
        record = json.loads(lines[0])
        assert [m["role"] for m in record["messages"]] == ["user", "assistant"]

    def test_insufficient_pool_exit_three(self, tmp_path, image_ref, capsys):
        _teacher_pool(tmp_path, image_ref, n=1)
        config_path = _build_config(tmp_path, count=5)
        assert main(["build-dataset", str(config_path)]) == 3
        assert "dataset error" in capsys.readouterr().err

    def test_bad_schema_exit_two(self, tmp_path, image_ref, capsys):
        _teacher_pool(tmp_path, image_ref, n=1)
        config_path = _build_config(tmp_path, count=1)
        config = yaml.safe_load(config_path.read_text())
        config["schema"] = "percentile"
        config_path.write_text(yaml.safe_dump(config), encoding="utf-8")
        assert main(["build-dataset", str(config_path)]) == 2
        assert "config error" in capsys.readouterr().err

    def test_named_stock_schemas_accepted(self, tmp_path, image_ref):
        _teacher_pool(tmp_path, image_ref, n=1)
        config = {"pool": "pool.jsonl", "output": "train.jsonl",
                  "schema": "single_criterion"}
        path = tmp_path / "build.yaml"
        path.write_text(yaml.safe_dump(config), encoding="utf-8")
        with pytest.raises(DatasetError):  # pool far too small, but schema loads
            build_dataset(path)
