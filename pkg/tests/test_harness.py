import numpy as np
import pytest

from metafit.errors import ConfigError
from metafit.harness import (
    ABLATION_HEADER,
    CURVE_HEADER,
    DOMAIN_SHIFT_HEADER,
    SUMMARY_HEADER,
    TRACE_HEADER,
    ExperimentConfig,
    apply_setting,
    gen_tasks,
    load_config_file,
    mixed_difficulty_tasks,
    run_fit,
    run_train,
)
from metafit.body_model import default_tree
from metafit.meta import MetaConfig
from metafit.optimizer import OptimizerConfig


def small_cfg(tmp_path, **kw):
    cfg = ExperimentConfig(out_dir=str(tmp_path / "out"), seed=11)
    cfg.meta = MetaConfig(inner_steps=1, epochs=1, batch_size=4, outer_lr=1e-3)
    for key, value in kw.items():
        setattr(cfg, key, value)
    return cfg


class TestConfigOverrides:
    def test_top_level_setting(self):
        cfg = ExperimentConfig()
        apply_setting(cfg, "count", "17")
        assert cfg.count == 17
        apply_setting(cfg, "profile", "hard")
        assert cfg.profile == "hard"
        apply_setting(cfg, "enable_meta", "false")
        assert cfg.enable_meta is False

    def test_nested_setting(self):
        cfg = ExperimentConfig()
        apply_setting(cfg, "opt.alpha_base", "2e-5")
        assert cfg.opt.alpha_base == 2e-5
        apply_setting(cfg, "meta.epochs", "3")
        assert cfg.meta.epochs == 3
        apply_setting(cfg, "energy.lambda_pose", "0")
        assert cfg.energy.lambda_pose == 0.0

    def test_unknown_key_rejected(self):
        cfg = ExperimentConfig()
        with pytest.raises(ConfigError):
            apply_setting(cfg, "nope", "1")
        with pytest.raises(ConfigError):
            apply_setting(cfg, "opt.nope", "1")

    def test_bad_value_rejected(self):
        cfg = ExperimentConfig()
        with pytest.raises(ConfigError):
            apply_setting(cfg, "count", "many")
        with pytest.raises(ConfigError):
            apply_setting(cfg, "enable_meta", "perhaps")

    def test_config_file(self, tmp_path):
        path = tmp_path / "exp.cfg"
        path.write_text(
            "# comment line\n"
            "profile = hard\n"
            "count = 7\n"
            "opt.max_iters = 5\n"
            "\n"
        )
        cfg = load_config_file(ExperimentConfig(), path)
        assert cfg.profile == "hard"
        assert cfg.count == 7
        assert cfg.opt.max_iters == 5

    def test_config_file_syntax_error(self, tmp_path):
        path = tmp_path / "exp.cfg"
        path.write_text("profile hard\n")
        with pytest.raises(ConfigError):
            load_config_file(ExperimentConfig(), path)


class TestGenTasks:
    def test_writes_file(self, tmp_path):
        cfg = small_cfg(tmp_path, count=5)
        path = gen_tasks(cfg)
        lines = open(path).read().splitlines()
        assert len(lines) == 5

    def test_unknown_profile(self, tmp_path):
        cfg = small_cfg(tmp_path, profile="weird")
        with pytest.raises(ConfigError):
            gen_tasks(cfg)


class TestRunFitAndTrain:
    def test_fit_perturb_mode_csv_schema(self, tmp_path):
        cfg = small_cfg(tmp_path, count=4, init_mode="perturb")
        tasks_path = gen_tasks(cfg)
        cfg.tasks_path = tasks_path
        records = run_fit(cfg)
        assert len(records) == 4
        trace = open(tmp_path / "out" / "trace.csv").read().splitlines()
        summary = open(tmp_path / "out" / "summary.csv").read().splitlines()
        assert trace[0] == TRACE_HEADER
        assert summary[0] == SUMMARY_HEADER
        assert len(summary) == 5
        # every numeric cell finite, pa <= mpjpe
        for line in summary[1:]:
            cells = line.split(",")
            assert float(cells[2]) <= float(cells[1]) + 1e-12
            for c in cells[1:5]:
                assert np.isfinite(float(c))

    def test_fit_requires_checkpoint_in_checkpoint_mode(self, tmp_path):
        cfg = small_cfg(tmp_path, count=2)
        cfg.tasks_path = gen_tasks(cfg)
        cfg.init_mode = "checkpoint"
        with pytest.raises(ConfigError):
            run_fit(cfg)

    def test_missing_tasks_file_is_os_error(self, tmp_path):
        cfg = small_cfg(tmp_path, tasks_path=str(tmp_path / "nope.jsonl"),
                        init_mode="perturb")
        with pytest.raises(OSError):
            run_fit(cfg)

    def test_train_then_fit_roundtrip(self, tmp_path):
        cfg = small_cfg(tmp_path, count=8)
        cfg.tasks_path = gen_tasks(cfg)
        ckpt, curve = run_train(cfg)
        curve_lines = open(tmp_path / "out" / "curve.csv").read().splitlines()
        assert curve_lines[0] == CURVE_HEADER
        assert len(curve_lines) == 2  # one epoch
        cfg.checkpoint_path = ckpt
        cfg.init_mode = "checkpoint"
        records = run_fit(cfg)
        assert len(records) == 8

    def test_fit_deterministic_bytes(self, tmp_path):
        cfg1 = small_cfg(tmp_path, count=3, init_mode="perturb")
        cfg1.tasks_path = gen_tasks(cfg1)
        run_fit(cfg1)
        first = open(tmp_path / "out" / "summary.csv", "rb").read()
        run_fit(cfg1)
        second = open(tmp_path / "out" / "summary.csv", "rb").read()
        assert first == second


class TestAblationGrid:
    def test_emits_exactly_fourteen_rows(self, tmp_path):
        from metafit.harness import run_ablation

        cfg = small_cfg(tmp_path, profile="moderate", train_count=8, test_count=3)
        rows, grid, variance = run_ablation(cfg)
        assert len(rows) == 14  # 2x2x2 flag grid + {0.01, 0.05} x {5, 10, 15}
        assert len(grid) == 8 and len(variance) == 6
        lines = open(tmp_path / "out" / "ablation.csv").read().splitlines()
        assert len(lines) == 15
        steps = [int(r[5]) for r in rows[8:]]
        assert steps == [5, 10, 15, 5, 10, 15]


class TestMixedSuite:
    def test_difficulty_spans_range(self):
        tree = default_tree()
        tasks = mixed_difficulty_tasks(tree, 50, np.random.default_rng(0))
        assert len(tasks) == 50
        weights = np.concatenate([t.obs.weights for t in tasks])
        assert np.any(weights < 1.0)

    def test_headers_are_stable(self):
        assert TRACE_HEADER == "task_id,t,energy,mean_sigma,active_count,update_norm"
        assert SUMMARY_HEADER == "task_id,mpjpe,pa_mpjpe,mean_final_sigma,iterations,stop_reason"
        assert CURVE_HEADER == "epoch,mean_final_loss,mean_heldout_mpjpe"
        assert ABLATION_HEADER.startswith("variant,enable_meta,enable_caching")
        assert DOMAIN_SHIFT_HEADER == "variant,source_mpjpe,target_mpjpe,delta_mpjpe"
