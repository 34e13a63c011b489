"""
ハーネス（設定・実行・出力・CLI）のテスト
"""
import csv
import json

import numpy as np
import pytest
from pydantic import ValidationError

from app.config import settings
from app.models.experiment import ExperimentConfig
from app.routes import jobs
from app.services import job_processor
from app.services.table_writer import MANIFEST_NAME, emit_tables


def _config(**overrides) -> ExperimentConfig:
    base = dict(model="r4", perturbation="K1", actions=[2.0, 2.0], torus_m=16)
    base.update(overrides)
    return ExperimentConfig(**base)


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestExperimentConfig:
    def test_rate_needs_paths(self):
        with pytest.raises(ValidationError):
            ExperimentConfig(experiment="rate", n_paths=0)
        with pytest.raises(ValidationError):
            ExperimentConfig(experiment="rate", n_paths=50)

    def test_epsilon_grid_decreasing(self):
        with pytest.raises(ValidationError):
            ExperimentConfig(experiment="average", epsilons=[0.05, 0.1])

    def test_torus_size_power_of_two(self):
        with pytest.raises(ValidationError):
            ExperimentConfig(experiment="average", torus_m=48)

    def test_unknown_key_rejected(self):
        with pytest.raises(ValidationError):
            ExperimentConfig(experiment="average", epsilon_grid=[0.1])

    def test_initial_state_exclusive(self):
        with pytest.raises(ValidationError):
            ExperimentConfig(experiment="average", y0=[1.0, 1.0, 0.0, 0.0], actions=[1.0, 1.0])

    def test_defaults_from_settings(self):
        cfg = ExperimentConfig(experiment="average")
        assert cfg.master_seed == settings.MASTER_SEED
        assert cfg.torus_m == settings.TORUS_GRID_SIZE

    def test_json_roundtrip(self):
        cfg = _config(experiment="rate", epsilons=[0.2, 0.1], n_paths=128, times=[0.1, 0.2])
        assert ExperimentConfig.model_validate_json(cfg.model_dump_json()) == cfg


class TestResolveSystem:
    def test_from_actions(self):
        model, pert, y0 = job_processor.resolve_system(_config(experiment="average", angles=[0.1, 0.2]))
        np.testing.assert_allclose(model.energies(y0), [4.0, 2.0])
        assert pert.name == "K1"

    def test_from_state(self):
        y0 = [1.0, 2.0, 0.5, -0.3]
        model, _, resolved = job_processor.resolve_system(
            ExperimentConfig(experiment="average", model="r4", y0=y0)
        )
        np.testing.assert_allclose(resolved, y0)
        np.testing.assert_allclose(model.chart_center, model.energies(resolved))


class TestRun:
    def test_average_table(self, tmp_path):
        bundle = job_processor.run(_config(experiment="average", horizon=0.5, ode_dt=0.1))
        table = bundle.table("averaged")
        assert table.columns == ["time", "Hbar_1", "Hbar_2", "rhs_1", "rhs_2"]
        np.testing.assert_allclose(table.rows[0][3:], [0.5, 0.5], atol=1e-12)
        np.testing.assert_allclose(table.rows[-1][1:3], [4.25, 2.25], atol=1e-12)

        manifest = json.loads(emit_tables(bundle, tmp_path).read_text())
        assert set(manifest["files"]) == {"averaged.csv"}
        assert manifest["config"]["experiment"] == "average"
        assert manifest["seed"] == bundle.seed
        assert _read_csv(tmp_path / "averaged.csv")[0] == table.columns

    def test_poisson_check(self):
        bundle = job_processor.run(_config(experiment="poisson-check"))
        rows = bundle.table("poisson").rows
        assert rows[0][0] == "analytic_cos" and rows[0][2] <= 1e-12
        assert len(rows) == 1 + 2 * job_processor.POISSON_RANDOM_CASES
        assert max(r[2] for r in rows) <= 1e-8
        assert bundle.flags == []

    def test_exitprob_flags_infinite_t_delta(self):
        bundle = job_processor.run(_config(experiment="exitprob", perturbation="zero", n_paths=4, horizon=1.0))
        assert "t_delta_infinite:not_applicable" in bundle.flags
        assert all(row[1] == 0.0 for row in bundle.table("exitprob").rows)

    def test_limit2_outputs(self):
        bundle = job_processor.run(
            ExperimentConfig(
                experiment="limit2", model="1dof", perturbation="q", actions=[15.0],
                torus_m=16, level_nodes=3, n_paths=20, horizon=0.1, dt=1e-2,
            )
        )
        assert {t.name for t in bundle.tables} == {"diffusion", "limit_moments"}
        assert "diffusion.json" in bundle.documents
        assert bundle.table("diffusion").columns == ["level_1", "a_11", "sigma_11", "b_1"]

    def test_simulate_is_byte_identical(self, tmp_path):
        cfg = _config(experiment="simulate", epsilon=0.1, n_paths=6, horizon=0.1, dt=1e-2)
        emit_tables(job_processor.run(cfg), tmp_path / "a")
        emit_tables(job_processor.run(cfg), tmp_path / "b")
        for name in ("energies.csv", "exits.csv", "drift.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    @pytest.mark.parametrize("workers", [2, 8])
    @pytest.mark.parametrize(
        "overrides",
        [
            dict(experiment="simulate", epsilon=0.1, n_paths=5, horizon=0.1, dt=1e-2),
            dict(experiment="rate", epsilons=[0.2, 0.1], n_paths=100, horizon=0.5, dt=1e-2, dt_scale=1.0),
            dict(experiment="exitprob", epsilons=[0.2, 0.1], n_paths=6, horizon=2.0, dt=1e-2, dt_scale=1.0),
        ],
        ids=["simulate", "rate", "exitprob"],
    )
    def test_worker_count_invariance(self, tmp_path, monkeypatch, overrides, workers):
        """ワーカー数を変えても CSV はすべてバイト単位で一致する"""
        monkeypatch.setattr(settings, "BATCH_SIZE", 2)
        cfg = _config(workers=1, **overrides)
        emit_tables(job_processor.run(cfg), tmp_path / "one")
        emit_tables(job_processor.run(cfg.model_copy(update={"workers": workers})), tmp_path / "many")
        names = sorted(p.name for p in (tmp_path / "one").glob("*.csv"))
        assert names and names == sorted(p.name for p in (tmp_path / "many").glob("*.csv"))
        for name in names:
            assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "many" / name).read_bytes(), name


class TestCli:
    def test_list_models(self, capsys):
        assert jobs.dispatch(["--list-models"]) == jobs.EXIT_OK
        names = {m["name"] for m in json.loads(capsys.readouterr().out)}
        assert "r4" in names

    def test_validation_error_exit_code(self, tmp_path, capsys):
        cfg = tmp_path / "rate.json"
        cfg.write_text(json.dumps({"experiment": "rate", "n_paths": 0}))
        assert jobs.dispatch(["rate", "--config", str(cfg), "--out", str(tmp_path / "out")]) == jobs.EXIT_INVALID
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error_class"] == "validation"
        assert any(f["field"] == "n_paths" or "n_paths" in f["message"] for f in err["fields"])

    def test_lab_error_exit_code(self, tmp_path, capsys):
        cfg = tmp_path / "avg.json"
        cfg.write_text(json.dumps({"experiment": "average", "model": "1dof", "perturbation": "K1"}))
        assert jobs.dispatch(["average", "--config", str(cfg), "--out", str(tmp_path / "out")]) == jobs.EXIT_INVALID
        assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error_class"] == "lab_error"

    def test_run_writes_manifest(self, tmp_path, capsys):
        cfg = tmp_path / "avg.json"
        cfg.write_text(json.dumps({"experiment": "average", "actions": [2.0, 2.0], "torus_m": 16, "ode_dt": 0.1}))
        out = tmp_path / "out"
        assert jobs.dispatch(["average", "--config", str(cfg), "--out", str(out), "--seed", "5"]) == jobs.EXIT_OK
        manifest = json.loads((out / MANIFEST_NAME).read_text())
        assert manifest["seed"] == 5
        assert manifest["config"]["output_dir"] == str(out)
