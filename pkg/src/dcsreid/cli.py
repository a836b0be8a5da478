"""``dcsreid`` command line: gen | train | search | eval | verify.

Results go to stdout as one JSON document; logs go to stderr.  Options are
resolved as built-in defaults, then ``--config FILE`` (a JSON object, or a
previous run's manifest), then explicit flags.  Each run writes one
``manifest-<command>.json`` into its output directory; passing that manifest
back as ``--config`` replays the run.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .exceptions import DCSError

SCHEMA_VERSION = 1
OUT_ENV = "DCSREID_OUT"

log = logging.getLogger("dcsreid")

DEFAULTS: dict[str, dict] = {
    "gen": dict(kind="separable", identities=10, per_identity=None, tokens=None, channels=8,
                noise=0.3, seed=0, out=None),
    "train": dict(data=None, epochs=60, eta=1.0, no_ibb=False, no_triplet=False, no_dcs=False,
                  attention=None, tau_start=5.0, tau_end=0.5, seed=0, lr=0.05, P=5, K=4,
                  margin=0.0, pool="flatten", stage_widths=[], arch=None, resume=None,
                  eval_every=10, plots=True),
    "search": dict(data=None, epochs=20, seed=0, latency_weight=0.1, mask_params_as_arch=False,
                   retrain_epochs=0, plots=True),
    "eval": dict(checkpoint=None, data=None, max_rank=10, plots=True),
    "verify": dict(instances=1000, grad_configs=100, seed=0),
}


def _out_dir(value) -> Path:
    path = Path(value if value else os.environ.get(OUT_ENV, "runs"))
    path.mkdir(parents=True, exist_ok=True)
    return path


def _widths(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dcsreid", description="Synthetic re-identification experiments: gen | train | search | eval | verify.")
    parser.add_argument("--version", action="version", version=f"dcsreid {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON config file or a previous run's manifest")
        p.add_argument("--out-dir", dest="out_dir", help=f"output directory (default ${OUT_ENV} or ./runs)")
        return p

    p = add("gen", "generate a synthetic identity dataset")
    p.add_argument("--kind", choices=["separable", "hard"])
    p.add_argument("--identities", type=int)
    p.add_argument("--per-identity", dest="per_identity", type=int)
    p.add_argument("--tokens", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="dataset file (default <out-dir>/dataset.json)")

    p = add("train", "train a model on a dataset file")
    p.add_argument("--data", help="dataset file from `gen`")
    p.add_argument("--epochs", type=int)
    p.add_argument("--eta", type=float, help="weight of the IBB term")
    p.add_argument("--no-ibb", dest="no_ibb", action="store_true", help="drop the IBB term")
    p.add_argument("--no-triplet", dest="no_triplet", action="store_true")
    p.add_argument("--no-dcs", dest="no_dcs", action="store_true", help="vanilla attention instead of DCS")
    p.add_argument("--attention", choices=["dcs", "vanilla", "nonlocal", "none"])
    p.add_argument("--tau-start", dest="tau_start", type=float)
    p.add_argument("--tau-end", dest="tau_end", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--P", type=int, help="identities per batch")
    p.add_argument("--K", type=int, help="samples per identity in a batch")
    p.add_argument("--margin", type=float, help="triplet margin")
    p.add_argument("--pool", choices=["flatten", "mean"])
    p.add_argument("--stage-widths", dest="stage_widths", type=_widths, help="e.g. 16,16")
    p.add_argument("--arch", help="architecture JSON from `search` (overrides backbone flags)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--no-plots", dest="plots", action="store_false")

    p = add("search", "micro architecture search, then derive a fixed architecture")
    p.add_argument("--data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--latency-weight", dest="latency_weight", type=float)
    p.add_argument("--mask-params-as-arch", dest="mask_params_as_arch", action="store_true",
                   help="optimise DCS mask projections with the architecture parameters")
    p.add_argument("--retrain-epochs", dest="retrain_epochs", type=int,
                   help="if > 0, retrain the derived architecture and report its metrics")
    p.add_argument("--no-plots", dest="plots", action="store_false")

    p = add("eval", "retrieval metrics of a checkpoint on a dataset's query/gallery split")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--max-rank", dest="max_rank", type=int)
    p.add_argument("--no-plots", dest="plots", action="store_false")

    p = add("verify", "randomised bound suites and gradient checks (no inputs needed)")
    p.add_argument("--instances", type=int)
    p.add_argument("--grad-configs", dest="grad_configs", type=int)
    p.add_argument("--seed", type=int)
    return parser


def resolve(command: str, given: dict) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = dict(DEFAULTS[command])
    cfg["out_dir"] = None
    path = given.pop("config", None)
    if path:
        try:
            loaded = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DCSError(f"cannot read config {path}: {exc}") from exc
        if isinstance(loaded, dict) and "config" in loaded and "command" in loaded:
            if loaded["command"] != command:
                raise DCSError(f"manifest is for `{loaded['command']}`, not `{command}`")
            loaded = loaded["config"]
        if not isinstance(loaded, dict):
            raise DCSError(f"config {path} must hold a JSON object")
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise DCSError(f"unknown config keys for `{command}`: {sorted(unknown)}")
        cfg.update(loaded)
    cfg.update(given)
    return cfg


def _require(cfg: dict, *keys):
    missing = [k for k in keys if not cfg.get(k)]
    if missing:
        raise DCSError(f"missing required option(s): {', '.join('--' + k.replace('_', '-') for k in missing)}")


def write_manifest(command: str, cfg: dict, artifacts: dict, started: float, out_dir: Path) -> Path:
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config": cfg,
        "seed": cfg.get("seed"),
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "tool_version": __version__,
        "started_at": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "wall_clock_seconds": time.time() - started,
    }
    path = out_dir / f"manifest-{command}.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


# -- commands -------------------------------------------------------------

def cmd_gen(cfg: dict, out_dir: Path) -> tuple[dict, dict]:
    from .data import generate, generate_hard, save_dataset

    kw = dict(identities=cfg["identities"], channels=cfg["channels"], noise=cfg["noise"], seed=cfg["seed"])
    for key in ("per_identity", "tokens"):
        if cfg[key] is not None:
            kw[key] = cfg[key]
    ds = generate_hard(**kw) if cfg["kind"] == "hard" else generate(**kw)
    path = Path(cfg["out"]) if cfg["out"] else out_dir / "dataset.json"
    save_dataset(ds, path)
    log.info("wrote %d samples to %s", len(ds), path)
    result = {"dataset": str(path), "samples": len(ds), "identities": ds.num_classes,
              "tokens": ds.tokens, "channels": ds.channels, "spec": ds.spec}
    return result, {"dataset": path}


def _train_config(cfg: dict):
    from .train import TrainConfig

    attention = cfg["attention"] or ("vanilla" if cfg["no_dcs"] else "dcs")
    return TrainConfig(epochs=cfg["epochs"], eta=cfg["eta"], use_ibb=not cfg["no_ibb"],
                       use_triplet=not cfg["no_triplet"], tau_start=cfg["tau_start"],
                       tau_end=cfg["tau_end"], seed=cfg["seed"], lr=cfg["lr"], P=cfg["P"], K=cfg["K"],
                       margin=cfg["margin"], pool=cfg["pool"], stage_widths=tuple(cfg["stage_widths"]),
                       attention_mode=attention, eval_every=cfg["eval_every"])


def cmd_train(cfg: dict, out_dir: Path) -> tuple[dict, dict]:
    from .data import load_dataset
    from .model import ModelSpec
    from .train import checkpoint_load, checkpoint_save, fit, retrieval_metrics, write_history

    _require(cfg, "data")
    ds = load_dataset(cfg["data"])
    config = _train_config(cfg)
    spec = ModelSpec.from_dict(json.loads(Path(cfg["arch"]).read_text())) if cfg["arch"] else None
    state = None
    if cfg["resume"]:
        state, _ = checkpoint_load(cfg["resume"])
    ckpt = out_dir / "checkpoint.json"
    state = fit(config, ds, spec=spec, state=state, diagnostic_path=out_dir / "diverged.json")
    checkpoint_save(state, config, ckpt)
    hist = out_dir / "history.csv"
    write_history(state.history, hist)
    artifacts = {"checkpoint": ckpt, "history": hist}
    if cfg["plots"] and state.history:
        from .plotting import plot_history

        artifacts["history_plot"] = plot_history(state.history, out_dir / "history.png")
    metrics = retrieval_metrics(state.network, ds)
    last = state.history[-1] if state.history else {}
    result = {"epochs": state.epoch, "mAP": metrics["map"], "rank1": metrics["rank1"],
              "ib": last.get("ib"), "ibb": last.get("ibb"),
              "parameters": state.network.num_parameters()}
    return result, artifacts


def cmd_search(cfg: dict, out_dir: Path) -> tuple[dict, dict]:
    from .data import load_dataset
    from .search import SearchConfig, SuperNetSpec, derive_architecture, run_search, write_trajectory

    _require(cfg, "data")
    ds = load_dataset(cfg["data"])
    spec = SuperNetSpec(ds.tokens, ds.channels, ds.num_classes)
    config = SearchConfig(epochs=cfg["epochs"], seed=cfg["seed"], latency_weight=cfg["latency_weight"],
                          mask_params_as_arch=cfg["mask_params_as_arch"])
    state = run_search(spec, ds, config)
    arch = derive_architecture(state.V, spec)
    arch_path = out_dir / "architecture.json"
    arch_path.write_text(json.dumps(arch.to_dict(), indent=2))
    traj = out_dir / "trajectory.csv"
    write_trajectory(state.trajectory, traj)
    artifacts = {"architecture": arch_path, "trajectory": traj}
    if cfg["plots"] and state.trajectory:
        from .plotting import plot_search

        artifacts["search_plot"] = plot_search(state.trajectory, out_dir / "search.png")
    result = {"widths": [s.width for s in arch.stages],
              "logits": [v.data.tolist() for v in state.V],
              "supernet": spec.to_dict()}
    if cfg["retrain_epochs"]:
        from .train import TrainConfig, fit, retrieval_metrics

        trained = fit(TrainConfig(epochs=cfg["retrain_epochs"], seed=cfg["seed"], eval_every=0), ds, spec=arch)
        result["retrain"] = retrieval_metrics(trained.network, ds)
    return result, artifacts


def cmd_eval(cfg: dict, out_dir: Path) -> tuple[dict, dict]:
    from .data import eval_indices, load_dataset
    from .evaluation import evaluate
    from .train import checkpoint_load

    _require(cfg, "checkpoint", "data")
    state, _ = checkpoint_load(cfg["checkpoint"])
    ds = load_dataset(cfg["data"])
    q, g = eval_indices(ds)
    net = state.network
    res = evaluate(net.embed(ds.grid(q)), ds.labels[q], net.embed(ds.grid(g)), ds.labels[g], cfg["max_rank"])
    metrics = res.to_json()
    path = out_dir / "metrics.json"
    path.write_text(json.dumps(metrics, indent=2))
    artifacts = {"metrics": path}
    if cfg["plots"]:
        from .plotting import plot_cmc

        artifacts["cmc_plot"] = plot_cmc(res.cmc, out_dir / "cmc.png")
    return metrics, artifacts


def cmd_verify(cfg: dict, out_dir: Path) -> tuple[dict, dict]:
    from .verify import bound_suite, gradient_suite

    bounds = bound_suite(cfg["instances"], seed=cfg["seed"])
    grads = gradient_suite(cfg["grad_configs"], seed=cfg["seed"])
    checks = {k: v["passed"] for k, v in bounds.items() if isinstance(v, dict)}
    checks.update({f"gradient:{k}": v["passed"] for k, v in grads.items() if isinstance(v, dict)})
    report = {"bounds": bounds, "gradients": grads, "checks": checks, "passed": all(checks.values())}
    path = out_dir / "verify.json"
    path.write_text(json.dumps(report, indent=2))
    return report, {"report": path}


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "search": cmd_search, "eval": cmd_eval, "verify": cmd_verify}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    return obj


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    given = {k: v for k, v in vars(args).items() if k not in ("command", "verbose")}
    started = time.time()
    try:
        cfg = resolve(args.command, given)
        out_dir = _out_dir(cfg["out_dir"])
        result, artifacts = COMMANDS[args.command](cfg, out_dir)
        manifest = write_manifest(args.command, cfg, artifacts, started, out_dir)
    except DCSError as exc:
        print(f"dcsreid {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    payload = {"schema_version": SCHEMA_VERSION, "command": args.command, **_jsonable(result),
               "artifacts": {k: str(v) for k, v in artifacts.items()}, "manifest": str(manifest)}
    print(json.dumps(payload, indent=2))
    if args.command == "verify" and not result["passed"]:
        failed = [k for k, ok in result["checks"].items() if not ok]
        print(f"dcsreid verify: violations in {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
