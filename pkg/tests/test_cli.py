import csv
import json
import statistics
from collections import defaultdict

import numpy as np
import pytest

from meterlink import cli
from meterlink.config import ConfigError, load, parse_lines
from meterlink.trainer import GridSpec

NOISELESS = ["synth.week_noise=0", "synth.vacation_prob=0", "synth.seasonal_amplitude=0"]


def run(command, out, *sets, config=None, extra=()):
    argv = [command, "--out", str(out)]
    if config is not None:
        argv += ["--config", str(config)]
    for s in sets:
        argv += ["--set", s]
    return cli.main(argv + list(extra))


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def data_sets(gen, n_aux=6, M=4):
    return [f"data.dataset={gen / 'dataset.csv'}", f"data.ground_truth={gen / 'ground_truth.csv'}",
            f"data.n_aux={n_aux}", f"data.M={M}"]


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    """Noiseless toy release, 24 households over 13 weeks, and a briefly trained GRU."""
    root = tmp_path_factory.mktemp("cli")
    gen = root / "gen"
    assert run("generate", gen, "synth.n_households=24", "synth.n_weeks=13", *NOISELESS, extra=["--seed", "5"]) == 0
    tr = root / "train"
    sets = data_sets(gen) + ["model.kind=gru", "model.L=2", "train.max_epochs=2", "train.lag=4"]
    assert run("train", tr, *sets) == 0
    return root, gen, tr


class TestConfigParsing:
    def test_flat_lines(self):
        raw = parse_lines("# comment\n\nseed = 3\nsynth.n_weeks=4\n")
        assert raw == {"seed": "3", "synth.n_weeks": "4"}

    def test_duplicate_key(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_lines("seed = 1\nseed = 2\n")

    def test_missing_equals(self):
        with pytest.raises(ConfigError):
            parse_lines("seed 1\n")

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            load("generate", overrides={"synth.bogus": "1"})

    def test_missing_path(self, tmp_path):
        with pytest.raises(ConfigError, match="does not exist"):
            load("report", overrides={"report.inputs": str(tmp_path / "nope")})

    def test_required_key(self):
        with pytest.raises(ConfigError, match="missing required"):
            load("report")

    def test_typed_values(self):
        cfg = load("generate", overrides={"synth.archetype_mix": "0.5,0.5,0,0,0", "synth.utilities": "2"})
        assert cfg["synth.archetype_mix"] == (0.5, 0.5, 0.0, 0.0, 0.0)
        assert cfg["synth.utilities"] == 2
        assert cfg["synth.seed"] is None

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            load("generate", overrides={"synth.n_weeks": "many"})

    def test_hash_ignores_workers(self):
        a = load("generate", overrides={"seed": "1", "workers": "1"})
        b = load("generate", overrides={"seed": "1", "workers": "8"})
        c = load("generate", overrides={"seed": "2"})
        assert a.hash == b.hash != c.hash

    def test_relative_paths_follow_config_file(self, tmp_path):
        (tmp_path / "r.csv").write_text("x\n")
        f = tmp_path / "run.cfg"
        f.write_text("report.inputs = r.csv\n")
        assert load("report", f)["report.inputs"] == (tmp_path / "r.csv",)


class TestGenerate:
    def test_deterministic_and_creates_dir(self, tmp_path):
        a, b = tmp_path / "a" / "nested", tmp_path / "b"
        sets = ["synth.n_households=6", "synth.n_weeks=2"]
        assert run("generate", a, *sets, extra=["--seed", "9"]) == 0
        assert run("generate", b, *sets, extra=["--seed", "9"]) == 0
        for name in ("dataset.csv", "ground_truth.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_seed_changes_output(self, tmp_path):
        sets = ["synth.n_households=6", "synth.n_weeks=2"]
        run("generate", tmp_path / "a", *sets, extra=["--seed", "1"])
        run("generate", tmp_path / "b", *sets, extra=["--seed", "2"])
        assert (tmp_path / "a/dataset.csv").read_bytes() != (tmp_path / "b/dataset.csv").read_bytes()

    def test_overwrite_refused(self, tmp_path):
        sets = ["synth.n_households=4", "synth.n_weeks=1"]
        assert run("generate", tmp_path, *sets) == 0
        assert run("generate", tmp_path, *sets) == cli.EXIT_CONFIG
        assert run("generate", tmp_path, *sets, extra=["--overwrite"]) == 0

    def test_invalid_synth_config(self, tmp_path):
        assert run("generate", tmp_path, "synth.utilities=3") == cli.EXIT_CONFIG

    def test_shape(self, toy):
        _, gen, _ = toy
        rows = read_rows(gen / "dataset.csv")
        assert len(rows) == 24 * 13 * 168
        links = read_rows(gen / "ground_truth.csv")
        assert len(links) == 24 * 13
        assert len({r["pseudonym"] for r in links}) == 24 * 13

    def test_preprocess_roundtrip(self, tmp_path):
        gen, out = tmp_path / "gen", tmp_path / "pre"
        assert run("generate", gen, "synth.n_households=5", "synth.n_weeks=1", "synth.utilities=2") == 0
        sets = [f"preprocess.input={gen / 'dataset.csv'}", f"preprocess.ground_truth={gen / 'ground_truth.csv'}",
                "preprocess.gas_clip_quantile=1.0"]
        assert run("preprocess", out, *sets) == 0
        assert (out / "ground_truth.csv").read_bytes() == (gen / "ground_truth.csv").read_bytes()
        a, b = read_rows(gen / "dataset.csv"), read_rows(out / "dataset.csv")
        assert len(b) == 5 * 168
        key = lambda r: (r["pseudonym"], int(r["timestamp_utc"]))
        for x, y in zip(sorted(a, key=key), sorted(b, key=key)):
            assert key(x) == key(y)
            assert float(x["elec_kwh"]) == pytest.approx(float(y["elec_kwh"]), rel=1e-12)
            assert float(x["gas_kwh"]) == pytest.approx(float(y["gas_kwh"]), rel=1e-12)

    def test_preprocess_aggregates(self, tmp_path):
        gen, out = tmp_path / "gen", tmp_path / "pre"
        assert run("generate", gen, "synth.n_households=3", "synth.n_weeks=1") == 0
        sets = [f"preprocess.input={gen / 'dataset.csv'}", "preprocess.aggregate_to=86400"]
        assert run("preprocess", out, *sets) == 0
        a, b = read_rows(gen / "dataset.csv"), read_rows(out / "dataset.csv")
        assert len(b) == 3 * 7
        assert sum(float(r["elec_kwh"]) for r in b) == pytest.approx(sum(float(r["elec_kwh"]) for r in a))


class TestTrain:
    def test_outputs(self, toy):
        _, _, tr = toy
        for name in cli.OUTPUTS["train"]:
            assert (tr / name).is_file()

    def test_invalid_architecture(self, toy, tmp_path):
        _, gen, _ = toy
        assert run("train", tmp_path, *data_sets(gen), "model.kind=resnet") == cli.EXIT_CONFIG

    def test_too_many_weeks_is_data_error(self, toy, tmp_path):
        _, gen, _ = toy
        assert run("train", tmp_path, *data_sets(gen, M=40), "model.kind=gru") == cli.EXIT_DATA

    def test_divergence_exit_code(self, toy, tmp_path):
        _, gen, _ = toy
        sets = data_sets(gen) + ["model.kind=gru", "model.L=2", "train.max_epochs=2", "train.learning_rate=1e300"]
        assert run("train", tmp_path, *sets) == cli.EXIT_NUMERIC

    def test_grid_combinations(self, toy, tmp_path):
        _, gen, _ = toy
        sets = data_sets(gen) + ["model.kind=gru", "train.max_epochs=1", "grid.enabled=true",
                                 "grid.learning_rates=0.001,0.005", "grid.weight_decays=0.01",
                                 "grid.layers=2", "grid.lags=4,7"]
        assert run("train", tmp_path, *sets) == 0
        assert len(read_rows(tmp_path / "grid.csv")) == 2 * 1 * 1 * 2

    def test_full_grid_size(self):
        # learning rates x weight decays x layer range x lags
        assert len(GridSpec().points("transformer")) == 2 * 2 * 2 * 4
        assert len(GridSpec().points("mlp")) == 2 * 2 * 1 * 4


class TestAttack:
    def test_noiseless_scenario_one(self, toy, tmp_path):
        _, gen, tr = toy
        sets = data_sets(gen) + [f"attack.checkpoints={tr / 'checkpoint.npz'}", "attack.runs=2"]
        assert run("attack", tmp_path, *sets) == 0
        rows = read_rows(tmp_path / "results.csv")
        rank1 = [r for r in rows if r["rank"] == "1"]
        assert len(rank1) == 2
        assert all(float(r["probability"]) == 1.0 for r in rank1)

    def test_rows_attributable(self, toy, tmp_path):
        _, gen, tr = toy
        sets = data_sets(gen) + [f"attack.checkpoints={tr / 'checkpoint.npz'}", "attack.runs=1"]
        assert run("attack", tmp_path, *sets) == 0
        rows = read_rows(tmp_path / "results.csv")
        ckpt = (tr / "train.json").read_text()
        for r in rows:
            assert r["config_hash"] and r["seed"] == "0"
            assert r["checkpoint_id"] and r["checkpoint_id"] in ckpt

    def test_gap_sweep_blocks(self, toy, tmp_path):
        _, gen, _ = toy
        sets = data_sets(gen) + ["attack.checkpoints=l2", "attack.runs=1", "attack.gaps=1,2,3,4,5,6,7,8"]
        assert run("attack", tmp_path, *sets) == 0
        variants = {r["variant"] for r in read_rows(tmp_path / "results.csv")}
        assert variants == {f"G={G};period=1;round=none" for G in range(1, 9)}

    def test_rounding_blocks(self, toy, tmp_path):
        _, gen, _ = toy
        sets = data_sets(gen) + ["attack.checkpoints=l2", "attack.runs=1", "attack.rounding=1,2,3"]
        assert run("attack", tmp_path, *sets) == 0
        variants = {r["variant"] for r in read_rows(tmp_path / "results.csv")}
        assert variants == {f"G=1;period=1;round={n}" for n in (1, 2, 3)}

    def test_gap_beyond_horizon(self, toy, tmp_path):
        _, gen, _ = toy
        sets = data_sets(gen) + ["attack.checkpoints=l2", "attack.runs=1", "attack.gaps=20"]
        assert run("attack", tmp_path, *sets) == cli.EXIT_DATA

    def test_noiseless_roc_rejected(self, toy, tmp_path):
        # every match is correct, so no impostor gaps exist
        _, gen, _ = toy
        sets = data_sets(gen) + ["attack.checkpoints=l2", "attack.runs=1", "attack.roc=true"]
        assert run("attack", tmp_path, *sets) == cli.EXIT_DATA

    def test_population_and_roc(self, tmp_path):
        gen = tmp_path / "gen"
        assert run("generate", gen, "synth.n_households=24", "synth.n_weeks=6", "synth.week_noise=0.6") == 0
        sets = data_sets(gen) + ["attack.checkpoints=l2", "attack.runs=1", "attack.scenarios=I,II",
                                 "attack.population_sizes=2,5", "attack.roc=true"]
        assert run("attack", tmp_path, *sets) == 0
        rows = read_rows(tmp_path / "results.csv")
        pop = {(r["scenario"], r["population"]) for r in rows if r["variant"] == "population"}
        assert pop == {(s, n) for s in ("I", "II") for n in ("2", "5")}
        assert (tmp_path / "roc_I.csv").is_file() and (tmp_path / "roc_II.csv").is_file()
        auc = json.loads((tmp_path / "attack.json").read_text())["auc"]
        assert set(auc) == {"I", "II"} and all(0 <= a <= 1 for v in auc.values() for a in v)

    def test_deterministic(self, toy, tmp_path):
        _, gen, tr = toy
        sets = data_sets(gen) + [f"attack.checkpoints={tr / 'checkpoint.npz'}", "attack.runs=2",
                                 "attack.scenarios=I,II"]
        assert run("attack", tmp_path / "a", *sets) == 0
        assert run("attack", tmp_path / "b", *sets) == 0
        assert (tmp_path / "a/results.csv").read_bytes() == (tmp_path / "b/results.csv").read_bytes()

    def test_missing_checkpoint(self, toy, tmp_path):
        _, gen, _ = toy
        sets = data_sets(gen) + [f"attack.checkpoints={tmp_path / 'none.npz'}"]
        assert run("attack", tmp_path / "o", *sets) == cli.EXIT_CONFIG


class TestBaseline:
    def test_methods(self, toy, tmp_path):
        _, gen, _ = toy
        sets = data_sets(gen) + ["attack.runs=1", "attack.scenarios=I,II", "baseline.forest_trees=5",
                                 "baseline.svm_epochs=10"]
        assert run("baseline", tmp_path, *sets) == 0
        rows = read_rows(tmp_path / "results.csv")
        seen = {(r["method"], r["scenario"]) for r in rows}
        for m in ("random", "l2", "buchmann", "tudor"):
            assert {(m, "I"), (m, "II")} <= seen
        assert ("jawurek", "I") in seen and ("faisal", "I") in seen
        assert ("jawurek", "II") not in seen
        r1 = {(r["method"], r["scenario"]): float(r["probability"]) for r in rows if r["rank"] == "1"}
        assert r1[("random", "I")] == pytest.approx(1 / 6)
        # noiseless weeks: raw features match perfectly
        assert r1[("l2", "I")] == 1.0 and r1[("tudor", "I")] == 1.0

    def test_unknown_method(self, toy, tmp_path):
        _, gen, _ = toy
        assert run("baseline", tmp_path, *data_sets(gen), "baseline.methods=oracle") == cli.EXIT_CONFIG


def write_results(path, rows):
    cols = ["run", "scenario", "population", "rank", "probability", "method", "variant", "config_hash", "seed",
            "checkpoint_id"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, restval="")
        w.writeheader()
        w.writerows(rows)


class TestReport:
    def test_reaggregation(self, tmp_path):
        rng = np.random.default_rng(2)
        raw = []
        for run_ in range(10):
            for method in ("m1", "m2"):
                for R in (1, 2):
                    raw.append({"run": run_, "scenario": "I", "population": 50, "rank": R, "method": method,
                                "variant": "v", "probability": repr(float(rng.random()))})
        write_results(tmp_path / "results_a.csv", raw[:20])
        write_results(tmp_path / "results_b.csv", raw[20:])
        out = tmp_path / "rep"
        assert run("report", out, f"report.inputs={tmp_path}") == 0
        table = read_rows(out / "summary.csv")
        groups = defaultdict(list)
        for r in raw:
            groups[(r["method"], str(r["rank"]))].append(float(r["probability"]))
        assert len(table) == len(groups) == 4
        for t in table:
            v = groups[(t["method"], t["rank"])]
            assert float(t["mean"]) == pytest.approx(statistics.fmean(v), rel=1e-12)
            assert float(t["std"]) == pytest.approx(statistics.pstdev(v), rel=1e-9)
            assert t["n_runs"] == "10"

    def test_single_run_std_zero(self, tmp_path):
        write_results(tmp_path / "results.csv", [{"run": 0, "scenario": "II", "population": 5, "rank": 1,
                                                  "method": "x", "variant": "v", "probability": "0.4"}])
        out = tmp_path / "rep"
        assert run("report", out, f"report.inputs={tmp_path / 'results.csv'}") == 0
        (t,) = read_rows(out / "summary.csv")
        assert float(t["mean"]) == 0.4 and float(t["std"]) == 0.0

    def test_rank_filter(self, tmp_path):
        rows = [{"run": 0, "scenario": "I", "population": 5, "rank": R, "method": "x", "variant": "v",
                 "probability": "0.5"} for R in (1, 2, 3)]
        write_results(tmp_path / "results.csv", rows)
        out = tmp_path / "rep"
        assert run("report", out, f"report.inputs={tmp_path / 'results.csv'}", "report.ranks=1,3") == 0
        assert [t["rank"] for t in read_rows(out / "summary.csv")] == ["1", "3"]

    def test_missing_columns(self, tmp_path):
        (tmp_path / "results.csv").write_text("a,b\n1,2\n")
        assert run("report", tmp_path / "rep", f"report.inputs={tmp_path / 'results.csv'}") == cli.EXIT_DATA

    def test_end_to_end(self, toy, tmp_path):
        _, gen, tr = toy
        sets = data_sets(gen) + [f"attack.checkpoints={tr / 'checkpoint.npz'}", "attack.runs=3"]
        assert run("attack", tmp_path / "at", *sets) == 0
        assert run("report", tmp_path / "rep", f"report.inputs={tmp_path / 'at'}") == 0
        r1 = [t for t in read_rows(tmp_path / "rep/summary.csv") if t["rank"] == "1"]
        assert len(r1) == 1 and float(r1[0]["mean"]) == 1.0 and r1[0]["n_runs"] == "3"


class TestParser:
    def test_subcommands(self):
        ap = cli.build_parser()
        for name in ("generate", "preprocess", "train", "attack", "baseline", "report"):
            args = ap.parse_args([name, "--out", "x", "--seed", "1", "--workers", "2", "--overwrite"])
            assert args.command == name and args.seed == 1 and args.workers == 2 and args.overwrite

    def test_bad_set_syntax(self, tmp_path):
        assert cli.main(["generate", "--out", str(tmp_path), "--set", "noequals"]) == cli.EXIT_CONFIG

    def test_missing_config_file(self, tmp_path):
        assert cli.main(["generate", "--out", str(tmp_path), "--config", str(tmp_path / "x.cfg")]) == cli.EXIT_CONFIG

    def test_workers_validated(self, tmp_path):
        assert cli.main(["generate", "--out", str(tmp_path), "--workers", "0"]) == cli.EXIT_CONFIG
