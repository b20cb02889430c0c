"""``fetsim`` command line: synthesize | link | train | evaluate | ablate | accountant."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .accountant import epsilon_curve
from .config import dump_config, load_config, validate_config
from .errors import BudgetExhausted, ConfigError, ContractError, NumericError
from .experiments import (FeTLearner, JsonLinesWriter, SoloLearner, Top1SimLearner, desk_config,
                          evaluate, load_table, make_data, run_ablation, run_experiment,
                          summary_row, write_csv)
from .linkage import (Linker, read_party_csv, save_link_index, link_cache_name,
                      split_features, standardize, write_party_csv, PRIMARY)
from .model import load_checkpoint, save_checkpoint

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_BUDGET = 3
EXIT_NUMERIC = 4

logger = logging.getLogger("fetsim")


# -- helpers -------------------------------------------------------------------------


def resolve_seed(cli_seed: int | None, fallback: int = 0) -> int:
    if cli_seed is not None:
        return cli_seed
    env = os.environ.get("FETSIM_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"FETSIM_SEED={env!r} is not an integer", ["FETSIM_SEED"]) from None
    return fallback


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def build_hash() -> str:
    """Git commit of the source tree if available, else a digest of the package sources."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], cwd=here, capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    h = hashlib.sha256()
    for path in sorted(here.glob("*.py")):
        h.update(path.read_bytes())
    return "src-" + h.hexdigest()[:16]


def write_manifest(out_dir: Path, command: str, config: dict, seed: int, inputs: list,
                   outputs: list) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "build": build_hash(),
        "seed": seed,
        "config": config,
        "inputs": {str(p): file_digest(p) for p in inputs if Path(p).is_file()},
        "outputs": sorted(str(Path(p).name) for p in outputs),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def parse_grid(text: str) -> list:
    values = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        low = item.lower()
        if low in ("true", "false"):
            values.append(low == "true")
            continue
        try:
            values.append(int(item))
        except ValueError:
            try:
                values.append(float(item))
            except ValueError:
                values.append(item)
    if not values:
        raise ConfigError("empty grid", ["--grid"])
    return values


def _apply_overrides(config, args) -> None:
    if getattr(args, "model", None):
        config.train.model = args.model
    if getattr(args, "parties", None) is not None:
        config.model.num_parties = args.parties
    if getattr(args, "sigma", None) is not None:
        config.privacy.noise_multiplier = args.sigma
        config.privacy.enabled = args.sigma > 0
    if getattr(args, "eps_cap", None) is not None:
        config.privacy.epsilon = args.eps_cap
    if getattr(args, "epochs", None) is not None:
        config.train.epochs = args.epochs
    if getattr(args, "data", None):
        config.data.source = args.data
    if getattr(args, "rows", None) is not None:
        config.data.rows = args.rows


def _experiment_config(args):
    config = load_config(args.config, base=desk_config())
    _apply_overrides(config, args)
    config.train.seed = resolve_seed(args.seed, config.train.seed)
    return validate_config(config)


# -- subcommands ---------------------------------------------------------------------


def cmd_synthesize(args) -> int:
    """Split a table (or MNIST) into ``k`` fuzzy-keyed party CSV files."""
    from .experiments import DataConfig

    seed = resolve_seed(args.seed)
    data_cfg = DataConfig(source=args.input, rows=args.rows or 0, key_dims=args.key_dims,
                          label_column=args.label_column)
    X, y, names = load_table(data_cfg, args.task, seed)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xDA7A,)))
    if args.standardize:
        X = standardize(X)
    parties = split_features(X, y, args.parties, rng, key_dims=args.key_dims,
                             key_noise=args.key_noise, feature_names=names)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, party in enumerate(parties):
        path = out / f"party_{i}.csv"
        write_party_csv(path, party)
        written.append(path)
    inputs = [args.input] if Path(args.input).is_file() else []
    write_manifest(out, "synthesize", vars_json(args), seed, inputs, written)
    print(f"wrote {len(written)} party files to {out}")
    return EXIT_OK


def vars_json(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def cmd_link(args) -> int:
    seed = resolve_seed(args.seed)
    primary = read_party_csv(args.primary, role=PRIMARY)
    secondaries = [read_party_csv(p) for p in args.secondary]
    linker = Linker(secondaries, args.neighbors, args.q, seed)
    indices = linker.neighbor_indices(primary.keys, args.epoch, 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / link_cache_name(seed, args.q, args.neighbors, args.epoch)
    save_link_index(path, indices, seed, args.q, args.neighbors, args.epoch)
    write_manifest(out, "link", vars_json(args), seed, [args.primary, *args.secondary], [path])
    print(path)
    return EXIT_OK


def _learner_state_path(out: Path) -> Path:
    return out / "model.npz"


def cmd_train(args) -> int:
    config = _experiment_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    summary_path = out / "summary.csv"
    (out / "config.ini").write_text(dump_config(config), encoding="utf-8")
    writer = JsonLinesWriter(metrics_path)
    inputs = [config.data.source] if Path(config.data.source).is_file() else []
    if args.config:
        inputs.append(args.config)
    outputs = [metrics_path, summary_path, out / "config.ini"]
    status = EXIT_OK
    try:
        metrics, learner = run_experiment(config, on_epoch=writer, return_learner=True)
    except BudgetExhausted as exc:
        metrics = exc.metrics
        status = EXIT_BUDGET
        learner = None
        print(f"halted: {exc}", file=sys.stderr)
    row = summary_row(metrics)
    write_csv(summary_path, [row])
    if learner is not None:
        model_path = _learner_state_path(out)
        if isinstance(learner, FeTLearner):
            save_checkpoint(model_path, learner.model, {"seed": config.train.seed})
        else:
            np.savez(model_path, **{f"module/{k}": v for k, v in learner.state().items()})
        outputs.append(model_path)
    write_manifest(out, "train", config.to_dict(), config.train.seed, inputs, outputs)
    if status == EXIT_OK:
        name = "accuracy" if config.train.task == "classification" else "rmse"
        print(f"{config.train.model} test {name} = {metrics.test_metric:.4f} "
              f"(best epoch {metrics.best_epoch}, eps {metrics.epsilon:.3f})")
    return status


def cmd_evaluate(args) -> int:
    run = Path(args.run)
    manifest = json.loads((run / "manifest.json").read_text(encoding="utf-8"))
    config = load_config(run / "config.ini")
    validate_config(config)
    seed = manifest["seed"]
    data = make_data(config, seed)
    model_path = _learner_state_path(run)
    if config.train.model == "fet":
        model, _ = load_checkpoint(model_path)
        learner = FeTLearner(data, model.config, config.privacy, seed=seed)
        learner.model = learner.module = model
    else:
        cls = SoloLearner if config.train.model == "solo" else Top1SimLearner
        learner = cls(data, seed=seed)
        with np.load(model_path) as archive:
            learner.load({k[len("module/"):]: archive[k] for k in archive.files})
    value = evaluate(learner, data, args.split, batch_size=config.train.eval_batch_size)
    print(json.dumps({"split": args.split, "metric": value, "model": config.train.model}))
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _experiment_config(args)
    grid = parse_grid(args.grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"ablation_{args.suite}.csv"
    seeds = [config.train.seed + i for i in range(args.seeds)]
    run_ablation(args.suite, grid, config, seeds=seeds, jobs=args.jobs, out_csv=csv_path)
    inputs = [args.config] if args.config else []
    write_manifest(out, "ablate", {**config.to_dict(), "suite": args.suite, "grid": grid},
                   config.train.seed, inputs, [csv_path])
    print(csv_path)
    return EXIT_OK


def cmd_accountant(args) -> int:
    sigmas = [float(s) for s in parse_grid(args.sigmas)]
    rows = epsilon_curve(sigmas, args.q, args.steps, args.delta, args.parties, args.method)
    if args.out:
        write_csv(args.out, rows)
    else:
        print("sigma,eps_with_mpc,eps_rdp_no_mpc")
        for r in rows:
            print(f"{r['sigma']!r},{r['eps_with_mpc']!r},{r['eps_rdp_no_mpc']!r}")
    return EXIT_OK


def write_config_reference(args) -> int:
    from .config import config_reference

    text = config_reference()
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return EXIT_OK


# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fetsim", description=__doc__)
    parser.add_argument("--version", action="version", version=f"fetsim {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", help="split a table into fuzzy-keyed party CSVs")
    p.add_argument("--input", required=True, help="CSV path, 'mnist' or 'synthetic'")
    p.add_argument("--parties", "-k", type=int, required=True, help="total parties incl. primary")
    p.add_argument("--key-noise", type=float, default=0.05)
    p.add_argument("--key-dims", type=int, default=4)
    p.add_argument("--rows", type=int, default=0)
    p.add_argument("--task", choices=["classification", "regression"], default="classification")
    p.add_argument("--label-column", default="label")
    p.add_argument("--standardize", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("link", help="compute and cache kNN linkage indices")
    p.add_argument("--primary", required=True)
    p.add_argument("--secondary", nargs="+", required=True)
    p.add_argument("--neighbors", "-K", type=int, default=10)
    p.add_argument("--q", type=float, default=1.0)
    p.add_argument("--epoch", type=int, default=0)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_link)

    for name, func, help_text in (("train", cmd_train, "train one model"),
                                  ("ablate", cmd_ablate, "run an ablation grid")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="INI file with [model] [privacy] [linkage] [train]")
        p.add_argument("--model", choices=["fet", "solo", "top1sim"])
        p.add_argument("--parties", type=int, help="number of secondary parties")
        p.add_argument("--sigma", type=float, help="noise multiplier (enables privacy if > 0)")
        p.add_argument("--eps-cap", type=float, help="halt before epsilon exceeds this")
        p.add_argument("--epochs", type=int)
        p.add_argument("--data", help="mnist, synthetic or CSV path")
        p.add_argument("--rows", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)
    p = sub.choices["ablate"]
    p.add_argument("--suite", required=True)
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("evaluate", help="re-evaluate a trained run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("accountant", help="epsilon-sigma curve as CSV")
    p.add_argument("--sigmas", required=True, help="comma-separated noise multipliers")
    p.add_argument("--q", type=float, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--delta", type=float, default=1e-5)
    p.add_argument("--parties", "-k", type=int, default=1)
    p.add_argument("--method", choices=["rdp", "moments"], default="rdp")
    p.add_argument("--out")
    p.set_defaults(func=cmd_accountant)

    p = sub.add_parser("config-reference", help="print the configuration key reference")
    p.add_argument("--out")
    p.set_defaults(func=write_config_reference)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        keys = f" [{', '.join(exc.keys)}]" if exc.keys else ""
        print(f"validation error: {exc}{keys}", file=sys.stderr)
        return EXIT_VALIDATION
    except BudgetExhausted as exc:
        print(f"budget halt: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ContractError, FileNotFoundError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
