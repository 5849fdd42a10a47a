import numpy as np
import pytest

from rlseq.core import FluenceGrid, LeafPair, MachineState, PlanSequence
from rlseq.dataio import (
    SynthConfig,
    count_components,
    gen_fluence,
    read_fluence,
    read_manifest,
    read_plan,
    write_fluence,
    write_manifest,
    write_plan,
)
from rlseq.errors import ContractError, ParseError


class TestGenFluence:
    def test_single_blob_unimodal(self):
        for seed in range(10):
            cfg = SynthConfig(shape=(8, 32), seed=seed)
            grid = gen_fluence(cfg)
            assert count_components(grid.values) == 1
            # along the peak row the profile falls away from the peak column
            r, c = np.unravel_index(np.argmax(grid.values), grid.shape)
            row = grid.values[r]
            assert np.all(np.diff(row[c:]) <= 1e-12)
            assert np.all(np.diff(row[: c + 1]) >= -1e-12)

    def test_seed_determinism(self):
        cfg = SynthConfig(seed=77)
        np.testing.assert_array_equal(gen_fluence(cfg).values, gen_fluence(cfg).values)

    def test_hard_mode_multiple_components(self):
        for seed in range(8):
            cfg = SynthConfig(shape=(8, 32), hard=True, seed=seed)
            grid = gen_fluence(cfg)
            assert count_components(grid.values) >= 2

    def test_has_zero_margin_cells(self):
        grid = gen_fluence(SynthConfig(seed=1))
        assert (grid.values == 0).any()
        assert (grid.values > 0).any()


class TestFluenceFormat:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        grid = FluenceGrid(rng.uniform(0, 9, size=(5, 7)))
        path = tmp_path / "a.flu"
        write_fluence(path, grid)
        np.testing.assert_array_equal(read_fluence(path).values, grid.values)

    def test_zero_rows_header_rejected(self, tmp_path):
        path = tmp_path / "bad.flu"
        path.write_text("FLU 1 0 4\n")
        with pytest.raises(ParseError):
            read_fluence(path)

    def test_negative_value_rejected(self, tmp_path):
        path = tmp_path / "bad.flu"
        path.write_text("FLU 1 1 2\n1.0 -1.0\n")
        with pytest.raises(ParseError, match="negative"):
            read_fluence(path)

    def test_wrong_token_count(self, tmp_path):
        path = tmp_path / "bad.flu"
        path.write_text("FLU 1 1 3\n1.0 2.0\n")
        with pytest.raises(ParseError, match="expected 3 values"):
            read_fluence(path)

    def test_non_numeric(self, tmp_path):
        path = tmp_path / "bad.flu"
        path.write_text("FLU 1 1 2\n1.0 abc\n")
        with pytest.raises(ParseError, match="non-numeric"):
            read_fluence(path)

    def test_nan_rejected(self, tmp_path):
        path = tmp_path / "bad.flu"
        path.write_text("FLU 1 1 2\n1.0 nan\n")
        with pytest.raises(ParseError, match="non-finite"):
            read_fluence(path)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "bad.flu"
        path.write_text("FLU 1 3 2\n1.0 2.0\n")
        with pytest.raises(ParseError):
            read_fluence(path)

    def test_error_messages_carry_line_numbers(self, tmp_path):
        path = tmp_path / "bad.flu"
        path.write_text("FLU 1 2 2\n1.0 2.0\n3.0 -4.0\n")
        with pytest.raises(ParseError, match=r":3:"):
            read_fluence(path)


def _small_plan():
    states = (
        MachineState((LeafPair(0, 3), LeafPair(1, 1)), 1.25),
        MachineState((LeafPair(1, 4), LeafPair(2, 3)), 0.5),
    )
    return PlanSequence(states, (2, 4))


class TestPlanFormat:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "p.pln"
        plan = _small_plan()
        write_plan(path, plan)
        loaded = read_plan(path)
        assert loaded.states == plan.states
        assert loaded.grid_shape == plan.grid_shape

    def test_mu_above_limit_rejected(self, tmp_path):
        path = tmp_path / "p.pln"
        path.write_text("PLN 1 1 1 4\nCP 1 MU 3.0\n0 2\n")
        with pytest.raises(ParseError, match="MU outside"):
            read_plan(path)

    def test_crossed_pair_rejected(self, tmp_path):
        path = tmp_path / "p.pln"
        path.write_text("PLN 1 1 1 4\nCP 1 MU 1.0\n3 1\n")
        with pytest.raises(ParseError):
            read_plan(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "p.pln"
        path.write_text("PLN 1 2 1 4\nCP 1 MU 1.0\n0 2\n")
        with pytest.raises(ParseError):
            read_plan(path)

    def test_out_of_order_cp(self, tmp_path):
        path = tmp_path / "p.pln"
        path.write_text("PLN 1 2 1 4\nCP 1 MU 1.0\n0 2\nCP 3 MU 1.0\n0 2\n")
        with pytest.raises(ParseError, match="out of order"):
            read_plan(path)

    def test_writer_rejects_out_of_range_mu(self, tmp_path):
        plan = PlanSequence((MachineState((LeafPair(0, 2),), 7.0),), (1, 4))
        with pytest.raises(ContractError):
            write_plan(tmp_path / "p.pln", plan)


class TestManifest:
    def test_round_trip_with_splits(self, tmp_path):
        man = tmp_path / "manifest.txt"
        write_manifest(man, {"train": ["a.flu", "b.flu"], "val": ["c.flu"]})
        got = read_manifest(man)
        assert [p.endswith("a.flu") for p in got["train"]] == [True, False]
        assert len(got["train"]) == 2 and len(got["val"]) == 1 and got["test"] == []

    def test_relative_paths_resolve_against_manifest_dir(self, tmp_path):
        sub = tmp_path / "corpus"
        sub.mkdir()
        man = sub / "manifest.txt"
        man.write_text("x.flu\n")
        got = read_manifest(man)
        assert got["train"][0] == str(sub / "x.flu")

    def test_default_split_is_train(self, tmp_path):
        man = tmp_path / "m.txt"
        man.write_text("a.flu\nb.flu\n")
        got = read_manifest(man)
        assert len(got["train"]) == 2

    def test_unknown_split_rejected(self, tmp_path):
        man = tmp_path / "m.txt"
        man.write_text("# split: holdout\na.flu\n")
        with pytest.raises(ParseError, match="unknown split"):
            read_manifest(man)

    def test_empty_manifest_rejected(self, tmp_path):
        man = tmp_path / "m.txt"
        man.write_text("# just a comment\n")
        with pytest.raises(ParseError):
            read_manifest(man)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ParseError):
            read_manifest(tmp_path / "nope.txt")


class TestFuzzLight:
    def test_random_round_trips(self, tmp_path, rng):
        for i in range(50):
            grid = FluenceGrid(rng.uniform(0, 20, size=(int(rng.integers(1, 6)), int(rng.integers(2, 9)))))
            path = tmp_path / f"f{i}.flu"
            write_fluence(path, grid)
            np.testing.assert_array_equal(read_fluence(path).values, grid.values)
