from pathlib import Path

import pytest

from miner_trainer import grid, train
from conftest import make_spec


def _template(toy_small, tmp_path) -> train.TrainSpec:
    return make_spec(toy_small, tmp_path / "grid")


def _stub_train_fn(loss_of):
    """A fake trainer reading final losses from a lookup function."""

    def fake(spec: train.TrainSpec) -> train.TrainResult:
        loss = loss_of(spec)
        return train.TrainResult(
            losses=[9.9, loss],
            adapter_dir=Path(spec.output_dir),
            loss_path=Path(spec.output_dir) / "loss.csv",
            spec=spec,
        )

    return fake


class TestEnumeration:
    def test_full_grid_has_108_combinations(self, toy_small, tmp_path):
        specs = grid.enumerate_grid(_template(toy_small, tmp_path))
        assert len(specs) == 108

    def test_every_combination_is_unique_and_valid(self, toy_small, tmp_path):
        specs = grid.enumerate_grid(_template(toy_small, tmp_path))
        combos = {
            (s.learning_rate, s.lora_rank, s.lora_alpha, s.lora_dropout) for s in specs
        }
        assert len(combos) == 108
        assert len({s.output_dir for s in specs}) == 108
        for spec in specs:
            spec.validate()

    def test_order_is_deterministic(self, toy_small, tmp_path):
        first = grid.enumerate_grid(_template(toy_small, tmp_path))
        second = grid.enumerate_grid(_template(toy_small, tmp_path))
        assert first == second
        assert (first[0].learning_rate, first[0].lora_rank) == (3e-3, 4)
        assert (first[-1].learning_rate, first[-1].lora_rank) == (1e-5, 16)

    def test_subset_axes_narrow_the_sweep(self, toy_small, tmp_path):
        specs = grid.enumerate_grid(
            _template(toy_small, tmp_path), learning_rates=[1e-3], ranks=[8]
        )
        assert len(specs) == 1 * 1 * 3 * 2
        assert all(s.learning_rate == 1e-3 and s.lora_rank == 8 for s in specs)

    def test_subset_values_outside_the_sweep_are_rejected(self, toy_small, tmp_path):
        with pytest.raises(train.ConfigError, match="learning_rate"):
            grid.enumerate_grid(_template(toy_small, tmp_path), learning_rates=[2e-3])


class TestSelection:
    def test_argmin_wins(self, toy_small, tmp_path):
        specs = grid.enumerate_grid(_template(toy_small, tmp_path))
        target = (1e-4, 8, 16, 0.1)

        def loss_of(spec):
            combo = (spec.learning_rate, spec.lora_rank, spec.lora_alpha, spec.lora_dropout)
            return 0.111 if combo == target else 2.0 + hash(combo) % 7 / 10

        result = grid.grid_search(specs, train_fn=_stub_train_fn(loss_of))
        chosen = (
            result.best.learning_rate,
            result.best.lora_rank,
            result.best.lora_alpha,
            result.best.lora_dropout,
        )
        assert chosen == target
        assert result.best_loss == 0.111

    def test_exact_tie_goes_to_lower_learning_rate(self, toy_small, tmp_path):
        specs = grid.enumerate_grid(_template(toy_small, tmp_path))

        def loss_of(spec):
            if spec.learning_rate in (3e-3, 1e-5):
                return 0.5
            return 1.0

        result = grid.grid_search(specs, train_fn=_stub_train_fn(loss_of))
        assert result.best.learning_rate == 1e-5

    def test_report_lists_loss_per_combination(self, toy_small, tmp_path):
        specs = grid.enumerate_grid(_template(toy_small, tmp_path))
        report = tmp_path / "report.tsv"
        result = grid.grid_search(
            specs, train_fn=_stub_train_fn(lambda s: s.lora_rank * 0.1), report_path=report
        )
        assert result.report_path == report
        lines = report.read_text().splitlines()
        assert lines[0] == "learning_rate\tlora_rank\tlora_alpha\tlora_dropout\tfinal_loss"
        assert len(lines) == 1 + 108
        assert lines[1].split("\t") == ["0.003", "4", "8", "0.05", "0.400000"]

    def test_parallel_workers_match_sequential(self, toy_small, tmp_path):
        specs = grid.enumerate_grid(_template(toy_small, tmp_path), ranks=[4])

        def loss_of(spec):
            return spec.learning_rate * 100 + spec.lora_alpha * 0.001

        sequential = grid.grid_search(specs, train_fn=_stub_train_fn(loss_of))
        parallel = grid.grid_search(specs, train_fn=_stub_train_fn(loss_of), workers=4)
        assert sequential.best == parallel.best
        assert sequential.rows == parallel.rows

    def test_empty_grid_is_an_error(self):
        with pytest.raises(train.ConfigError, match="empty"):
            grid.grid_search([])

    def test_bad_worker_count_is_an_error(self, toy_small, tmp_path):
        specs = grid.enumerate_grid(_template(toy_small, tmp_path), ranks=[4])
        with pytest.raises(train.ConfigError, match="workers"):
            grid.grid_search(specs, train_fn=_stub_train_fn(lambda s: 1.0), workers=0)


class TestRealTrainingThroughTheGrid:
    def test_single_point_grid_trains_for_real(self, toy_small, tmp_path):
        template = make_spec(toy_small, tmp_path / "grid", epochs=1)
        specs = grid.enumerate_grid(
            template, learning_rates=[1e-3], ranks=[8], alphas=[16], dropouts=[0.05]
        )
        assert len(specs) == 1
        result = grid.grid_search(specs, report_path=tmp_path / "report.tsv")
        assert result.best_loss < 10.0
        assert (Path(result.best.output_dir) / "adapter.pt").exists()
        assert result.report_path.read_text().count("\n") == 2
