"""Command line entry point: ``meterlink <command> --config run.cfg --out DIR``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure during training.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import shutil
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import attack, baselines
from .config import ConfigError, RunConfig, load
from .data import (PreprocessConfig, RoundingSpec, aggregate_granularity, fit_scaling, gas_clip_threshold,
                   ingest_readings, load_release, preprocess, read_linkage, repseudonymize, split_weeks,
                   write_dataset, write_linkage)
from .embedders import KINDS, EmbedderConfig, EmbeddingModel
from .experiments import user_split
from .numkit import OptimizerConfig
from .synth import SynthConfig, generate
from .trainer import GridSpec, TrainConfig, TrainingDiverged, grid_search, stage_configs, train, write_history

log = logging.getLogger("meterlink")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(RuntimeError):
    pass


OUTPUTS = {
    "generate": ("dataset.csv", "ground_truth.csv"),
    "preprocess": ("dataset.csv",),
    "train": ("checkpoint.npz", "history.csv", "train.json"),
    "attack": ("results.csv", "attack.json"),
    "baseline": ("results.csv",),
    "report": ("summary.csv",),
}


def _prepare_out(out: Path, command: str, overwrite: bool) -> None:
    existing = [n for n in OUTPUTS[command] if (out / n).exists()]
    if existing and not overwrite:
        raise ConfigError(f"{out}: outputs exist ({', '.join(existing)}); pass --overwrite to replace them")
    out.mkdir(parents=True, exist_ok=True)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# generate / preprocess


def cmd_generate(cfg: RunConfig, out: Path) -> None:
    kw = cfg.section("synth")
    kw["seed"] = cfg["seed"] if kw["seed"] is None else kw["seed"]
    try:
        synth = SynthConfig(**kw)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    ds, users = generate(synth)
    weeks, scheme = repseudonymize(split_weeks(ds), cfg["generate.scheme_seed"] if cfg["generate.scheme_seed"]
                                   is not None else synth.seed)
    write_dataset(out / "dataset.csv", weeks)
    write_linkage(out / "ground_truth.csv", scheme, period_column="week_index")
    log.info("generated %d households x %d weeks", synth.n_households, synth.n_weeks)


def cmd_preprocess(cfg: RunConfig, out: Path) -> None:
    pc = PreprocessConfig(gas_clip_quantile=cfg["preprocess.gas_clip_quantile"])
    raw = ingest_readings(cfg["preprocess.input"], delta_t=cfg["preprocess.delta_t"])
    thr = gas_clip_threshold(raw, pc.gas_clip_quantile) if pc.gas_clip_quantile < 1 else None
    ds = preprocess(raw, pc, gas_threshold=thr)
    if cfg["preprocess.aggregate_to"] is not None:
        ds = aggregate_granularity(ds, cfg["preprocess.aggregate_to"])
    write_dataset(out / "dataset.csv", ds)
    if cfg["preprocess.ground_truth"] is not None:
        shutil.copyfile(cfg["preprocess.ground_truth"], out / "ground_truth.csv")
    log.info("preprocessed %d records of %d slots", ds.N, ds.T)


# --------------------------------------------------------------------------
# data for train / attack / baseline


def load_attack_data(cfg: RunConfig) -> attack.AttackData:
    """Weekly datasets keyed by user id and the configured auxiliary/reference split."""
    try:
        parts = load_release(cfg["data.dataset"], cfg=PreprocessConfig(gas_clip_quantile=1.0))
        scheme = read_linkage(cfg["data.ground_truth"])
        weeks = []
        for w, part in enumerate(parts):
            ids = [scheme.user_of(p, w) for p in part.pseudonyms]
            order = np.argsort(ids, kind="stable")
            weeks.append(part.subset([part.pseudonyms[i] for i in order]).renamed(sorted(ids)))
    except (KeyError, ValueError, FileNotFoundError) as e:
        raise DataError(str(e)) from None
    users = weeks[0].pseudonyms
    if any(w.pseudonyms != users for w in weeks):
        raise DataError("weeks cover different households")
    n_aux = cfg["data.n_aux"]
    if not 1 <= n_aux <= len(users) // 2:
        raise ConfigError(f"data.n_aux must lie in 1..{len(users) // 2}")
    if cfg["data.fold"] not in (0, 1):
        raise ConfigError("data.fold must be 0 or 1")
    if cfg["data.M"] > len(weeks):
        raise DataError(f"data.M={cfg['data.M']} exceeds the {len(weeks)} available weeks")
    aux, ref, _ = user_split(users, n_aux, cfg["data.fold"])
    return attack.AttackData(weeks, aux, ref)


def _aux(cfg: RunConfig, data: attack.AttackData):
    aux = data.aux(cfg["data.M"])
    u = cfg["data.utilities"]
    if u is not None:
        if u > aux.F:
            raise DataError(f"data.utilities={u} but the dataset has {aux.F}")
        aux = aux.with_values(aux.values[:, :, :u])
    return aux


# --------------------------------------------------------------------------
# train


def cmd_train(cfg: RunConfig, out: Path, workers: int) -> None:
    kind = cfg["model.kind"]
    if kind not in KINDS:
        raise ConfigError(f"unknown architecture {kind!r}; expected one of {', '.join(KINDS)}")
    try:
        opt = OptimizerConfig(learning_rate=cfg["train.learning_rate"], weight_decay=cfg["train.weight_decay"],
                              patience=cfg["train.patience"], max_epochs=cfg["train.max_epochs"])
        base = TrainConfig(batch_size=cfg["train.batch_size"], margin=cfg["train.margin"], lag=cfg["train.lag"],
                           optimizer=opt, seed=cfg["seed"])
        model_cfg = EmbedderConfig(kind, L=cfg["model.L"])
    except ValueError as e:
        raise ConfigError(str(e)) from None
    data = load_attack_data(cfg)
    aux = _aux(cfg, data)
    M = cfg["data.M"]
    summary = {"config_hash": cfg.hash, "seed": cfg["seed"], "kind": kind}
    if cfg["grid.enabled"]:
        try:
            grid = GridSpec(cfg["grid.learning_rates"], cfg["grid.weight_decays"], cfg["grid.layers"],
                            cfg["grid.lags"])
            stage_configs(M, base)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        res = grid_search(kind, grid, aux, M, base, workers=workers)
        final = res.final
        summary["grid_points"] = len(res.stage1)
        summary["best_point"] = list(res.best_point)
        with (out / "grid.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["learning_rate", "weight_decay", "layers", "lag", "score"])
            for g in res.stage1:
                w.writerow([*g.point, repr(g.score)])
    else:
        try:
            tcfg = stage_configs(M, base)[2]
        except ValueError as e:
            raise ConfigError(str(e)) from None
        final = train(EmbedderConfig(kind, L=model_cfg.L, F=aux.F), aux, tcfg)
    summary["checkpoint_id"] = final.model.save(out / "checkpoint.npz")
    summary["best_epoch"] = final.best_epoch
    summary["best_val_rank1"] = final.best_val
    write_history(out / "history.csv", final.history)
    _write_json(out / "train.json", summary)
    log.info("best epoch %d, validation rank-1 %.3f", final.best_epoch, final.best_val)


# --------------------------------------------------------------------------
# attack


def _load_models(cfg: RunConfig, data: attack.AttackData) -> list[tuple[object, str, str]]:
    """(embedder, method label, checkpoint id) per configured checkpoint; ``l2`` selects raw features."""
    models = []
    for p in cfg["attack.checkpoints"]:
        if p.name == "l2":
            aux = _aux(cfg, data)
            models.append((attack.IdentityEmbedder(fit_scaling(split_weeks(aux))), "l2", ""))
            continue
        if not p.is_file():
            raise ConfigError(f"checkpoint not found: {p}")
        try:
            m = EmbeddingModel.load(p)
        except (KeyError, ValueError, OSError) as e:
            raise DataError(f"{p}: unreadable checkpoint ({e})") from None
        models.append((m, m.config.kind, m.checkpoint_id))
    return models


def _per_run(items: list, runs: int) -> list:
    if len(items) == 1:
        return items * runs
    if len(items) != runs:
        raise ConfigError(f"{len(items)} checkpoints for {runs} runs; give one or one per run")
    return items


def cmd_attack(cfg: RunConfig, out: Path) -> None:
    data = load_attack_data(cfg)
    runs = cfg["attack.runs"]
    models = _per_run(_load_models(cfg, data), runs)
    rows, summary = [], {"config_hash": cfg.hash, "auc": {}}
    ranks = cfg["attack.ranks"]
    attrs = {"config_hash": cfg.hash, "seed": cfg["seed"]}
    variants = list(itertools.product(cfg["attack.gaps"], cfg["attack.period_weeks"], cfg["attack.rounding"]))
    for scenario in cfg["attack.scenarios"]:
        for G, k, n in variants:
            try:
                ec = attack.ExperimentConfig(scenario=scenario, M=cfg["data.M"], G=G, period_weeks=k,
                                             utilities=cfg["data.utilities"],
                                             rounding=RoundingSpec(n) if n is not None else None,
                                             runs=runs, seed=cfg["seed"], offset=cfg["attack.offset"])
            except ValueError as e:
                raise ConfigError(str(e)) from None
            variant = f"G={G};period={k};round={'none' if n is None else n}"
            try:
                res = attack.run_scenario(ec, [m for m, _, _ in models], data)
            except ValueError as e:
                raise DataError(str(e)) from None
            for r, (curve, (_, method, ckpt)) in enumerate(zip(res.curves, models)):
                rows += attack.curve_rows(curve, r, scenario, ranks=_ranks(ranks, curve.N), method=method,
                                          variant=variant, checkpoint_id=ckpt, **attrs)
            if cfg["attack.roc"] and (G, k, n) == variants[0]:
                curves = [attack.roc_curve(attack.gap_scores(o.results)) for o in res.outcomes]
                attack.write_roc(out / f"roc_{scenario}.csv", curves)
                summary["auc"][scenario] = [c.auc for c in curves]
        sizes = cfg["attack.population_sizes"]
        if sizes:
            w1, w2 = attack.ExperimentConfig(M=cfg["data.M"], offset=cfg["attack.offset"]).test_weeks()
            users = data.reference_users(scenario)
            for r, (m, method, ckpt) in enumerate(models):
                rel = attack.make_release(data, users, w1, w2, cfg["seed"] * 1000 + r,
                                          utilities=cfg["data.utilities"])
                acc = attack.population_scaling(m, rel, sizes, cfg["attack.population_repeats"],
                                                seed=cfg["seed"] * 1000 + r)
                for size, p in acc.items():
                    rows.append({"run": r, "scenario": scenario, "population": size, "rank": 1,
                                 "probability": repr(p), "method": method, "variant": "population",
                                 "checkpoint_id": ckpt, **attrs})
    attack.write_results(out / "results.csv", rows)
    _write_json(out / "attack.json", summary)
    log.info("wrote %d result rows", len(rows))


def _ranks(ranks, N: int):
    if ranks is None:
        return None
    return [R for R in ranks if 1 <= R <= N]


# --------------------------------------------------------------------------
# baseline


def _classifier_targets(data: attack.AttackData, week: int, users, utilities):
    ds = data.weeks[week].subset(users)
    if utilities is not None and utilities < ds.F:
        ds = ds.with_values(ds.values[:, :, :utilities])
    return ds


def cmd_baseline(cfg: RunConfig, out: Path) -> None:
    data = load_attack_data(cfg)
    M, runs, u = cfg["data.M"], cfg["attack.runs"], cfg["data.utilities"]
    methods = cfg["baseline.methods"]
    known = {"random", "l2", "buchmann", "tudor", "jawurek", "faisal"}
    bad = [m for m in methods if m not in known]
    if bad:
        raise ConfigError(f"unknown baseline methods: {', '.join(bad)}")
    aux_weeks = [w.subset(data.aux_users) for w in data.weeks[:M]]
    if u is not None:
        aux_weeks = [w.with_values(w.values[:, :, :u]) for w in aux_weeks]
    attrs = {"config_hash": cfg.hash, "seed": cfg["seed"], "variant": "G=1;period=1;round=none",
             "checkpoint_id": ""}
    ranks = cfg["attack.ranks"]
    rows = []
    for scenario in cfg["attack.scenarios"]:
        ec = attack.ExperimentConfig(scenario=scenario, M=M, runs=runs, seed=cfg["seed"], offset=cfg["attack.offset"],
                                     utilities=u)
        w1, w2 = ec.test_weeks()
        users = data.reference_users(scenario)
        if w2[-1] >= len(data.weeks):
            raise DataError("test weeks beyond the available data")
        for method in methods:
            if method in ("jawurek", "faisal") and scenario != "I":
                log.warning("%s classifies auxiliary users only; skipped in scenario %s", method, scenario)
                continue
            fitted = _fit_baseline(method, cfg, aux_weeks) if method in ("buchmann", "jawurek") else None
            for r in range(runs):
                curve = _baseline_curve(method, cfg, data, aux_weeks, fitted, users, w1[0], w2[0], ec, r)
                rows += attack.curve_rows(curve, r, scenario, ranks=_ranks(ranks, curve.N), method=method, **attrs)
    attack.write_results(out / "results.csv", rows)
    log.info("wrote %d baseline rows", len(rows))


def _fit_baseline(method: str, cfg: RunConfig, aux_weeks):
    if method == "buchmann":
        return baselines.buchmann_calibrate(aux_weeks)
    jc = baselines.JawurekConfig().fit(np.concatenate([w.values for w in aux_weeks]))
    grids, labels = baselines.weekly_training_set(aux_weeks)
    svm = baselines.SVMConfig(reg=cfg["baseline.svm_reg"], epochs=cfg["baseline.svm_epochs"])
    return jc, baselines.jawurek_train(baselines.jawurek_features(grids, jc), labels, svm)


def _baseline_curve(method, cfg, data, aux_weeks, fitted, users, t1, t2, ec, r) -> attack.RankCurve:
    if method == "random":
        return baselines.random_guess_curve(len(users))
    u = cfg["data.utilities"]
    if method in ("jawurek", "faisal"):
        tgt = _classifier_targets(data, t2, users, u)
        truths = list(tgt.pseudonyms)
        if method == "jawurek":
            jc, clf = fitted
            res = baselines.jawurek_match(clf, baselines.jawurek_features(tgt, jc), tgt.pseudonyms, truths)
        else:
            grids, labels = baselines.weekly_training_set(aux_weeks)
            days = baselines.daily_samples(grids)
            fc = baselines.ForestConfig(trees=cfg["baseline.forest_trees"], seed=cfg["seed"] * 1000 + r)
            model = baselines.faisal_train(days.reshape(-1, days.shape[-1]), np.repeat(labels, 7), fc)
            res = baselines.faisal_match(model, tgt, truths=truths)
        return attack.curve_from_results(res)
    rel = attack.make_release(data, users, [t1], [t2], ec.seed * 1000 + r, utilities=u)
    ref, tgt = rel.reference_weeks[0], rel.target_weeks[0]
    truths = [rel.truth[t] for t in tgt.pseudonyms]
    if method == "l2":
        res = baselines.l2_raw_match(ref, tgt, fit_scaling(aux_weeks), truths)
    elif method == "buchmann":
        res = baselines.buchmann_match(ref, tgt, fitted, truths)
    else:
        res = baselines.tudor_match(ref, tgt, truths)
    return attack.curve_from_results(res)


# --------------------------------------------------------------------------
# report

SUMMARY_KEYS = ("method", "variant", "scenario", "population", "rank")


def _result_files(inputs) -> list[Path]:
    files = []
    for p in inputs:
        p = Path(p)
        files += sorted(p.rglob("results*.csv")) if p.is_dir() else [p]
    if not files:
        raise DataError("no results files found")
    return files


def aggregate(rows, ranks=None) -> list[dict]:
    """Mean and population std (ddof=0) of ``probability`` over runs per summary key."""
    groups = defaultdict(list)
    for r in rows:
        if ranks is not None and int(r["rank"]) not in ranks:
            continue
        key = tuple(r[k] for k in SUMMARY_KEYS)
        groups[key].append(float(r["probability"]))
    out = []
    for key in sorted(groups, key=lambda k: (k[0], k[1], k[2], int(k[3]), int(k[4]))):
        v = np.array(groups[key])
        out.append({**dict(zip(SUMMARY_KEYS, key)), "mean": repr(float(v.mean())),
                    "std": repr(float(v.std())), "n_runs": len(v)})
    return out


def cmd_report(cfg: RunConfig, out: Path) -> None:
    rows = []
    for f in _result_files(cfg["report.inputs"]):
        with f.open(newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(SUMMARY_KEYS + ("probability",)) - set(reader.fieldnames or ())
            if missing:
                raise DataError(f"{f}: missing columns {sorted(missing)}")
            rows += list(reader)
    table = aggregate(rows, cfg["report.ranks"])
    with (out / "summary.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=[*SUMMARY_KEYS, "mean", "std", "n_runs"], lineterminator="\n")
        w.writeheader()
        w.writerows(table)
    for t in table:
        if t["rank"] == "1":
            print(f"{t['method']:<12} {t['variant']:<28} {t['scenario']:<3} N={t['population']:<6} "
                  f"rank-1 {float(t['mean']):.3f} +/- {float(t['std']):.3f} ({t['n_runs']} runs)")


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="meterlink", description="Profiling attacks on smart meter data.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in OUTPUTS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="flat key = value config file")
        p.add_argument("--seed", type=int, help="global seed (overrides the config)")
        p.add_argument("--workers", type=int, help="parallel jobs (grid search)")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--overwrite", action="store_true", help="replace existing outputs")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {}
        for s in args.set:
            if "=" not in s:
                raise ConfigError(f"--set expects KEY=VALUE, got {s!r}")
            k, v = s.split("=", 1)
            overrides[k.strip()] = v.strip()
        if args.seed is not None:
            overrides["seed"] = str(args.seed)
        if args.workers is not None:
            overrides["workers"] = str(args.workers)
        cfg = load(args.command, args.config, overrides)
        if cfg["workers"] < 1:
            raise ConfigError("workers must be at least 1")
        _prepare_out(args.out, args.command, args.overwrite)
        run = {
            "generate": lambda: cmd_generate(cfg, args.out),
            "preprocess": lambda: cmd_preprocess(cfg, args.out),
            "train": lambda: cmd_train(cfg, args.out, cfg["workers"]),
            "attack": lambda: cmd_attack(cfg, args.out),
            "baseline": lambda: cmd_baseline(cfg, args.out),
            "report": lambda: cmd_report(cfg, args.out),
        }[args.command]
        run()
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
