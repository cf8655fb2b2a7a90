import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedvae import artifacts
from fedvae.cli import main
from fedvae.config import (DataConfig, ExperimentConfig, MetricsConfig, ModelConfig, SearchConfig,
                           parse, serialize)
from fedvae.data import write_idx
from fedvae.experiment import evaluate_run, prepare_data, run_experiment, search_experiment
from fedvae.federation import FlConfig, RoundReport
from fedvae.search import (DEFAULT_SEARCH_SPACE, TrialResult, coerce_space, decode_index,
                           plan_trials, rank_trials, run_search, space_size)


def tiny(**fl) -> ExperimentConfig:
    return ExperimentConfig(
        data=DataConfig(num_classes=3, per_class=20, test_per_class=10),
        model=ModelConfig(latent_dim=2, channels=(4, 8)),
        federation=FlConfig(**{"num_clients": 3, "rounds": 2, "batch_size": 10, **fl}),
        metrics=MetricsConfig(replicates=2, samples=30, classifiers=("logreg", "cnn"), eval_every=1,
                              embedder_epochs=1, cnn_epochs=1, grid_per_class=4),
        seed=5)


class TestConfig:
    def test_round_trip_defaults(self):
        c = ExperimentConfig()
        assert parse(serialize(c)) == c

    def test_round_trip_infinity_and_space(self):
        c = ExperimentConfig(federation=FlConfig(privacy="ldp", epsilon=math.inf),
                             search=SearchConfig(space=(("lr", ("0.1", "0.01")),)))
        text = serialize(c)
        assert "epsilon = inf" in text
        assert parse(text) == c

    @given(st.floats(1e-6, 1.0), st.integers(1, 500), st.floats(0.01, 1.0), st.integers(0, 2**31))
    @settings(max_examples=50, deadline=None)
    def test_round_trip_property(self, lr, rounds, q, seed):
        c = ExperimentConfig(federation=FlConfig(lr=lr, rounds=rounds, client_rate=q), seed=seed)
        assert parse(serialize(c)) == c

    def test_rejects_unknown(self):
        with pytest.raises(ValueError):
            parse("[federation]\nlearning_rate = 0.1\n")
        with pytest.raises(ValueError):
            parse("[extras]\nx = 1\n")
        with pytest.raises(ValueError):
            parse("[federation]\nsync = sideways\n")

    def test_cross_section_validation(self):
        bad = ExperimentConfig(model=ModelConfig(architecture="large"),
                               federation=FlConfig(privacy="ldp"))
        with pytest.raises(ValueError):
            bad.validate()
        with pytest.raises(ValueError):
            DataConfig(partition="group")
        with pytest.raises(ValueError):
            DataConfig(source="idx")


class TestArtifacts:
    def test_pgm_header_and_size(self, tmp_path):
        grid = np.zeros((8, 80))
        artifacts.write_pgm(tmp_path / "g.pgm", grid)
        raw = (tmp_path / "g.pgm").read_bytes()
        assert raw.startswith(b"P5\n80 8\n255\n") and len(raw) == len(b"P5\n80 8\n255\n") + 640

    def test_quantization_and_read_back(self, tmp_path):
        img = np.array([[0.0, 1.0], [0.5, 1.2]])
        assert artifacts.quantize(img).tolist() == [[0, 255], [128, 255]]
        artifacts.write_pgm(tmp_path / "q.pgm", img)
        assert artifacts.read_pgm(tmp_path / "q.pgm").tolist() == [[0, 255], [128, 255]]
        with pytest.raises(ValueError):
            artifacts.quantize(np.array([np.nan]))

    def test_grid_one_row_per_class(self):
        imgs = np.stack([np.full((2, 2), v) for v in (0.1, 0.2, 0.3, 0.4)])
        grid = artifacts.image_grid(imgs, np.array([1, 0, 1, 0]), 2, 2)
        assert grid.shape == (4, 4)
        np.testing.assert_allclose(grid[:2, :2], 0.2)
        np.testing.assert_allclose(grid[2:, 2:], 0.3)

    def test_csv_columns_and_blanks(self, tmp_path):
        reports = [RoundReport(1, [0], [0.5], 0.5, 2.0, None, 1, 3),
                   RoundReport(2, [0], [0.4], 0.4, 1.5, 1.25, 1, 3, metrics={"fid": 3.0})]
        assert artifacts.write_metrics_csv(tmp_path / "m.csv", reports) == 2
        rows = artifacts.read_metrics_csv(tmp_path / "m.csv")
        assert rows[0]["epsilon"] == "" and rows[0]["fid"] == ""
        assert rows[1]["fid"] == "3.0" and rows[1]["epsilon"] == "1.25"
        header = (tmp_path / "m.csv").read_bytes().split(b"\r\n")[0].decode()
        assert tuple(header.split(",")) == artifacts.METRIC_COLUMNS

    def test_params_round_trip(self, tmp_path):
        from fedvae.nn import ParameterSet
        p = ParameterSet({"dec.0.w": np.arange(6.0).reshape(2, 3), "dec.1.b": np.ones(2)})
        artifacts.save_params(tmp_path / "p.npz", p)
        q = artifacts.load_params(tmp_path / "p.npz")
        assert list(q.keys()) == list(p.keys()) and q.allclose(p) and q.component == "decoder"


class TestSearch:
    def test_small_space_is_full_grid(self):
        space = coerce_space((("lr", ("0.1", "0.01", "0.001")), ("batch_size", (10, 20, 30, 60))))
        plan = plan_trials(space)
        assert len(plan) == 12 and len({tuple(p.values()) for p in plan}) == 12
        assert plan[0] == {"lr": 0.1, "batch_size": 10}

    def test_large_space_random_distinct(self):
        space = (("a", tuple(range(10))), ("b", tuple(range(10))), ("c", tuple(range(10))))
        plan = plan_trials(space, trials=100, seed=3)
        assert len(plan) == 100 and len({tuple(p.values()) for p in plan}) == 100
        assert plan_trials(space, trials=100, seed=3) == plan
        assert len(plan_trials((("a", tuple(range(200))),), trials=500)) == 200

    def test_default_axes(self):
        axes = dict(DEFAULT_SEARCH_SPACE)
        assert axes["clip_norm"] == (0.1, 0.2, 0.5, 0.75, 1.0, 1.5, 2.0)
        assert axes["noise_multiplier"] == (0.5, 0.6, 0.7, 0.8, 1.0, 1.2, 1.5, 2.0)
        assert space_size(DEFAULT_SEARCH_SPACE) >= 150

    def test_decode_index_mixed_radix(self):
        space = (("a", (0, 1)), ("b", (0, 1, 2)))
        assert [tuple(decode_index(space, i).values()) for i in range(6)] == \
            [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]

    def test_bad_axis(self):
        with pytest.raises(ValueError):
            coerce_space((("learning_rate", (1,)),))
        with pytest.raises(ValueError):
            coerce_space((("lr", ()),))

    def test_ranking(self):
        r = [TrialResult(0, {}, 5.0, 90.0), TrialResult(1, {}, 3.0, 50.0),
             TrialResult(2, {}, 3.0, 70.0), TrialResult(3, {}, math.nan, math.nan, error="boom")]
        assert [t.index for t in rank_trials(r)] == [2, 1, 0, 3]

    def test_run_search_isolated_dirs(self, tmp_path):
        seen = []

        def runner(cfg, i, d):
            seen.append((cfg.lr, d))
            if cfg.lr == 0.5:
                raise ValueError("diverged")
            return cfg.lr, 0.0

        ranked = run_search(FlConfig(), (("lr", (0.5, 0.1, 0.2)),), runner, tmp_path)
        assert [r.overrides["lr"] for r in ranked] == [0.1, 0.2, 0.5]
        assert ranked[-1].error == "diverged"
        assert len({d for _, d in seen}) == 3 and all(d.parent == tmp_path for _, d in seen)


class TestPipeline:
    def test_run_writes_artifacts(self, tmp_path):
        out = run_experiment(tiny(), tmp_path / "run")
        names = {p.name for p in (tmp_path / "run").iterdir()}
        assert {"config.ini", "seeds.json", "metrics.csv", "audit.log", "decoder.npz",
                "samples.pgm", "summary.json"} <= names
        rows = artifacts.read_metrics_csv(tmp_path / "run" / "metrics.csv")
        assert len(rows) == len(out.result.reports) == 2
        assert rows[-1]["fid"] != "" and rows[-1]["acc_logreg"] != "" and rows[-1]["acc_mlp"] == ""
        assert parse((tmp_path / "run" / "config.ini").read_text()) == tiny()
        grid = artifacts.read_pgm(tmp_path / "run" / "samples.pgm")
        assert grid.shape == (3 * 8, 4 * 8)
        summary = json.loads((tmp_path / "run" / "summary.json").read_text())
        assert len(summary["fid"]["values"]) == 2

    def test_cdp_round_count_equals_halting_round(self, tmp_path):
        cfg = tiny(privacy="cdp", client_rate=0.5, epsilon=8.0, noise_multiplier=1.0, rounds=100)
        out = run_experiment(cfg, tmp_path, evaluate=False)
        rows = artifacts.read_metrics_csv(tmp_path / "metrics.csv")
        assert out.result.stop_reason == "budget_spent" and len(rows) == len(out.result.reports)
        assert float(rows[-1]["epsilon"]) > 8.0 >= float(rows[-2]["epsilon"])
        assert "[global]" in (tmp_path / "audit.log").read_text()

    def test_ldp_audit_has_client_sections(self, tmp_path):
        run_experiment(tiny(privacy="ldp", noise_multiplier=1.0, batch_size=5), tmp_path, evaluate=False)
        assert "[client 0]" in (tmp_path / "audit.log").read_text()

    def test_idx_source(self, tmp_path):
        rng = np.random.default_rng(0)
        for split, n in (("train", 30), ("test", 12)):
            write_idx(tmp_path / f"{split}-img", rng.integers(0, 256, (n, 16, 16), dtype=np.uint8))
            write_idx(tmp_path / f"{split}-lab", (np.arange(n) % 3).astype(np.uint8))
        cfg = tiny().replace(data=DataConfig(
            source="idx", num_classes=3, train_images=str(tmp_path / "train-img"),
            train_labels=str(tmp_path / "train-lab"), test_images=str(tmp_path / "test-img"),
            test_labels=str(tmp_path / "test-lab")))
        prepared = prepare_data(cfg)
        assert prepared.train.image_shape == (8, 8) and len(prepared.test) == 12

    def test_grouped_source(self):
        cfg = tiny().replace(data=DataConfig(source="grouped", partition="group", num_classes=2,
                                             num_groups=15))
        p = prepare_data(cfg)
        assert len(p.shards) <= 15 and len(p.test) > 0

    def test_evaluate_and_search(self, tmp_path):
        run_experiment(tiny(), tmp_path / "run", evaluate=False)
        scores = evaluate_run(tmp_path / "run", k=1)
        assert "fid" in scores and (tmp_path / "run" / "evaluation.json").exists()
        cfg = tiny().replace(search=SearchConfig(space=(("lr", ("0.01", "0.001")),)))
        ranked = search_experiment(cfg, tmp_path / "search")
        assert len(ranked) == 2 and (tmp_path / "search" / "ranking.csv").exists()
        assert (tmp_path / "search" / "trial_0001" / "metrics.csv").exists()


class TestCli:
    def test_train_flags_and_env(self, tmp_path, monkeypatch, capsys):
        from fedvae.config import save
        save(tiny(), tmp_path / "c.ini")
        monkeypatch.setenv("FEDVAE_OUTPUT_DIR", str(tmp_path / "env"))
        assert main(["train", "--config", str(tmp_path / "c.ini"), "--rounds", "1", "--no-eval"]) == 0
        written = parse((tmp_path / "env" / "config.ini").read_text())
        assert written.federation.rounds == 1
        assert main(["train", "--config", str(tmp_path / "c.ini"), "--rounds", "1", "--no-eval",
                     "--output-dir", str(tmp_path / "flag")]) == 0
        assert (tmp_path / "flag" / "metrics.csv").exists()
        assert main(["synthesize", str(tmp_path / "flag"), "--per-class", "2",
                     "--out", str(tmp_path / "s.pgm")]) == 0
        assert artifacts.read_pgm(tmp_path / "s.pgm").shape == (24, 16)

    def test_error_exit_code(self, tmp_path, capsys):
        assert main(["train", "--privacy", "bogus", "--output-dir", str(tmp_path)]) == 1
        assert "unknown privacy mode" in capsys.readouterr().err
        assert main(["evaluate", str(tmp_path / "missing")]) == 1

    def test_flags_mirror_config_fields(self):
        import dataclasses
        from fedvae.cli import build_parser
        help_text = build_parser()._subparsers._group_actions[0].choices["train"].format_help()
        for f in dataclasses.fields(FlConfig):
            assert "--" + f.name.replace("_", "-") in help_text


def test_determinism(tmp_path):
    cfg = tiny(privacy="cdp", client_rate=0.7)
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    for name in ("metrics.csv", "samples.pgm"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
