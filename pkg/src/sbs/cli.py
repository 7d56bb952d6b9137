"""``sbs`` command line: search, finetune, report, prop1, oracle, sweep.

Every command writes into a fresh temporary directory next to the target and
renames it into place when done, so an output directory is either complete or
absent.  Each output directory holds one ``manifest.json``.

Exit codes: 0 success, 1 runtime failure, 2 invalid input.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import shutil
import sys
import tempfile
from collections.abc import Callable
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from . import autodiff as ad
from .baselines import (
    OracleBudgetError,
    RegressionTask,
    brute_force_configs,
    evaluate_config,
    oracle_to_csv,
    rank_of,
    run_prop1_experiment,
)
from .config import CompressionConfig, ConfigMismatchError, LayerSpec
from .costmodel import CostReport, discrete_cost
from .data import make_blobs
from .fixtures import resnet18_specs
from .model import NonFiniteError
from .runconfig import ConfigError, RunConfig, load_run_config
from .trainer import (
    SearchRunConfig,
    TraceRow,
    build_model,
    finetune,
    load_checkpoint,
    pretrain,
    save_checkpoint,
    search,
    trace_to_csv,
)

log = logging.getLogger("sbs")

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2
OUT_ENV = "SBS_OUT_DIR"


class UsageError(ValueError):
    """Bad command-line input (exit 2)."""


# ---------------------------------------------------------------------------
# output plumbing


def content_hash(data: bytes) -> str:
    """Git blob hash: ``sha1(b"blob <len>\\0" + data)``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def resolve_out(out: str | None, default_name: str) -> Path:
    if out:
        return Path(out)
    return Path(os.environ.get(OUT_ENV, "runs")) / default_name


class Staging:
    """Temp directory that becomes ``target`` on :meth:`commit`."""

    def __init__(self, target: Path):
        self.target = target
        target.parent.mkdir(parents=True, exist_ok=True)
        self.path = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))

    def write_text(self, name: str, text: str) -> Path:
        p = self.path / name
        p.parent.mkdir(parents=True, exist_ok=True)
        # newline="" keeps the CSV writer's CRLF intact
        with open(p, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        return p

    def write_json(self, name: str, obj) -> Path:
        return self.write_text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def commit(self, command: str, inputs: dict) -> Path:
        artifacts = {}
        for p in sorted(self.path.rglob("*")):
            if p.is_file():
                artifacts[p.relative_to(self.path).as_posix()] = content_hash(p.read_bytes())
        manifest = {
            "command": command,
            "version": __version__,
            "seed": inputs.get("seed"),
            "config": inputs,
            "input_hash": content_hash(_canonical({"command": command, "config": inputs})),
            "artifacts": artifacts,
        }
        self.write_json("manifest.json", manifest)
        if self.target.exists():
            shutil.rmtree(self.target)
        os.replace(self.path, self.target)
        return self.target

    def abort(self) -> None:
        shutil.rmtree(self.path, ignore_errors=True)


def _staged(target: Path, command: str, inputs: dict, body: Callable[[Staging], None]) -> Path:
    st = Staging(target)
    try:
        body(st)
        return st.commit(command, inputs)
    except BaseException:
        st.abort()
        raise


# ---------------------------------------------------------------------------
# commands


def _load(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise UsageError("--seed: must be a non-negative integer")
        cfg = cfg.with_seed(args.seed)
    return cfg


def _search_run(cfg: RunConfig, st: Staging, lam: float | None = None) -> dict:
    run = cfg.search if lam is None else cfg.search.replace(lam=lam)
    data = cfg.dataset()
    model = build_model(data, run, cfg.model.hidden, cfg.model.fixed_first_last)
    pretrain(model, data, run)
    result = search(model, data, run)
    save_checkpoint(model, st.path / "checkpoint", result.config)
    st.write_json("config.json", result.config.to_dict())
    st.write_text("metrics.csv", trace_to_csv(result.trace))
    cost = discrete_cost(model.specs, result.config)
    last = result.trace[-1]
    return {"lam": run.lam, "bops": cost.bops, "bop_ratio": cost.bop_ratio, "ce_loss": last.ce_loss,
            "config": result.config.summary()}


def cmd_search(args) -> int:
    cfg = _load(args)
    target = resolve_out(args.out, f"search-seed{cfg.seed}")
    summary = {}
    _staged(target, "search", cfg.to_dict(), lambda st: summary.update(_search_run(cfg, st)))
    print(f"{target}: {summary['config']} bops={summary['bops']:.6g} ratio={summary['bop_ratio']:.4g}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _load(args)
    ckpt = Path(args.checkpoint)
    if ckpt.is_dir():
        ckpt = ckpt / "checkpoint.json"
    if not ckpt.exists():
        raise UsageError(f"--checkpoint: {ckpt} not found")
    model, stored = load_checkpoint(ckpt)
    comp = CompressionConfig.from_json(Path(args.compression).read_text()) if args.compression else stored
    if comp is None:
        raise UsageError("--compression: checkpoint holds no config; pass one")
    comp.check_against(model.specs)
    data = cfg.dataset()
    inputs = cfg.to_dict() | {"checkpoint_hash": content_hash(ckpt.read_bytes()),
                              "compression": comp.to_dict()}
    target = resolve_out(args.out, f"finetune-seed{cfg.seed}")

    def body(st: Staging):
        _, acc = finetune(model, comp, data, cfg.search)
        save_checkpoint(model, st.path / "checkpoint", comp)
        st.write_json("config.json", comp.to_dict())
        cost = discrete_cost(model.specs, comp)
        logits = model.forward(data.x_train, "fixed", comp).logits
        ce = float(ad.cross_entropy(logits, data.y_train).value)
        st.write_text("metrics.csv", trace_to_csv([TraceRow(cfg.search.epochs_finetune, "finetune", ce,
                                                            cost.bops, cost.bops, comp.summary())]))
        st.write_json("accuracy.json", {"test_accuracy": acc})
        print(f"{target}: test accuracy {acc:.4f}")

    _staged(target, "finetune", inputs, body)
    return EXIT_OK


def report_csv(specs: list[LayerSpec], comp: CompressionConfig) -> tuple[str, CostReport]:
    rep = discrete_cost(specs, comp)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["layer", "w_bits", "a_bits", "pruning_rate", "bops", "memory"])
    for lc, row in zip(comp.layers, rep.per_layer):
        w.writerow([lc.name, lc.w_bits, lc.a_bits, format(row.pruning_rate, ".6g"), format(row.bops, ".12g"),
                    format(row.memory_kb, ".12g")])
    w.writerow(["total", "", "", "", format(rep.bops, ".12g"), format(rep.memory_kb, ".12g")])
    w.writerow(["ratio", "", "", "", format(rep.bop_ratio, ".12g"), format(rep.memory_ratio, ".12g")])
    return buf.getvalue(), rep


def _report_specs(layers: str) -> list[LayerSpec]:
    if layers == "resnet18":
        return resnet18_specs()
    p = Path(layers)
    if p.is_dir():
        p = p / "checkpoint.json"
    if not p.exists():
        raise UsageError(f"--layers: expected 'resnet18' or a checkpoint path, got {layers!r}")
    return load_checkpoint(p)[0].specs


def cmd_report(args) -> int:
    specs = _report_specs(args.layers)
    if args.uniform is not None:
        if args.uniform < 1:
            raise UsageError("--uniform: bitwidth must be >= 1")
        comp = CompressionConfig.uniform(specs, args.uniform)
    elif args.compression:
        comp = CompressionConfig.from_json(Path(args.compression).read_text())
    else:
        raise UsageError("report needs --compression FILE or --uniform BITS")
    text, rep = report_csv(specs, comp)
    sys.stdout.write(text.replace("\r\n", "\n"))
    inputs = {"layers": args.layers, "compression": comp.to_dict()}
    target = resolve_out(args.out, "report")

    def body(st: Staging):
        st.write_text("report.csv", text)
        st.write_text("report.json", rep.to_json())

    _staged(target, "report", inputs, body)
    return EXIT_OK


def cmd_prop1(args) -> int:
    cfg = _load(args)
    p = cfg.prop1
    task = RegressionTask(p.n, p.d, 1.0, p.noise_std, cfg.seed)
    target = resolve_out(args.out, f"prop1-seed{cfg.seed}")

    def body(st: Staging):
        rec = run_prop1_experiment(task, p.steps, p.seeds, lr=p.lr, lr_gate=p.lr)
        st.write_text("prop1.csv", rec.to_csv())
        st.write_json("prop1.json", rec.summary())
        print(f"final loss single={rec.final_single.mean():.6g} multi={rec.final_multi.mean():.6g} "
              f"max gap={rec.relative_gap.max():.3%} residual/full={rec.residual_to_full_ratio:.4g}")

    _staged(target, "prop1", cfg.to_dict(), body)
    return EXIT_OK


def oracle_run_config(cfg: RunConfig) -> tuple[SearchRunConfig, dict]:
    o = cfg.oracle
    run = cfg.search.replace(ladder=o.ladder, group_size=o.group_size, epochs_pretrain=o.epochs_pretrain,
                             epochs_search=o.epochs_search, lr_threshold=o.lr_threshold)
    return run, {"n_train": o.n_train, "n_test": o.n_test}


def cmd_oracle(args) -> int:
    cfg = _load(args)
    run, sizes = oracle_run_config(cfg)
    data = make_blobs(sizes["n_train"], sizes["n_test"], cfg.data.classes, cfg.data.dim, cfg.data.spread, seed=cfg.seed)
    target = resolve_out(args.out, f"oracle-seed{cfg.seed}")

    def body(st: Staging):
        model = build_model(data, run, (cfg.oracle.hidden,))
        pretrain(model, data, run)
        ranking = brute_force_configs(model, data, run.lam, run, steps=cfg.oracle.steps, jobs=args.jobs)
        found = search(model.clone(), data, run)
        entry = evaluate_config(model, found.config, data, run.lam, run, steps=cfg.oracle.steps)
        r = rank_of(entry, ranking)
        st.write_text("oracle.csv", oracle_to_csv(ranking))
        st.write_text("metrics.csv", trace_to_csv(found.trace))
        st.write_json("search.json", {"config": found.config.summary(), "objective": entry.objective,
                                      "rank": r, "total": len(ranking), "percentile": r / len(ranking)})
        print(f"{len(ranking)} configs; search found {found.config.summary()} at rank {r} "
              f"({r / len(ranking):.1%})")

    _staged(target, "oracle", cfg.to_dict(), body)
    return EXIT_OK


def _sweep_one(args):
    cfg, lam, path = args
    st = Staging(Path(path))
    try:
        row = _search_run(cfg, st, lam)
        st.commit("search", cfg.to_dict() | {"search": cfg.to_dict()["search"] | {"lam": lam}})
    except BaseException:
        st.abort()
        raise
    return row


def cmd_sweep(args) -> int:
    cfg = _load(args)
    if args.jobs < 1:
        raise UsageError("--jobs: must be >= 1")
    target = resolve_out(args.out, f"sweep-seed{cfg.seed}")

    def body(st: Staging):
        jobs = [(cfg, lam, str(st.path / f"lam_{lam:g}")) for lam in cfg.sweep.lambdas]
        if args.jobs > 1:
            with ProcessPoolExecutor(args.jobs) as ex:
                rows = list(ex.map(_sweep_one, jobs))
        else:
            rows = [_sweep_one(j) for j in jobs]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["lam", "bops", "bop_ratio", "ce_loss", "config"])
        for r in rows:
            w.writerow([format(r["lam"], ".12g"), format(r["bops"], ".12g"), format(r["bop_ratio"], ".12g"),
                        format(r["ce_loss"], ".12g"), r["config"]])
        st.write_text("summary.csv", buf.getvalue())
        sys.stdout.write(buf.getvalue().replace("\r\n", "\n"))

    _staged(target, "sweep", cfg.to_dict(), body)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sbs", description="Joint bit-sharing quantization and pruning search.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, jobs=False):
        p.add_argument("--config", metavar="PATH", help="YAML run configuration")
        p.add_argument("--out", metavar="DIR", help=f"output directory (default: ${OUT_ENV}/<command>-seed<N>)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        if jobs:
            p.add_argument("--jobs", type=int, default=1, help="parallel workers")
        return p

    common(sub.add_parser("search", help="pre-train, search, write checkpoint/config/metrics")).set_defaults(fn=cmd_search)
    p = common(sub.add_parser("finetune", help="fine-tune a checkpoint at a fixed config"))
    p.add_argument("--checkpoint", required=True, metavar="PATH", help="search output dir or checkpoint.json")
    p.add_argument("--compression", metavar="PATH", help="config JSON (default: the checkpoint's)")
    p.set_defaults(fn=cmd_finetune)
    p = sub.add_parser("report", help="per-layer bitwidth/pruning/BOPs table")
    p.add_argument("--layers", default="resnet18", help="'resnet18' or a checkpoint path")
    p.add_argument("--compression", metavar="PATH", help="config JSON")
    p.add_argument("--uniform", type=int, metavar="BITS", help="uniform bitwidth, no pruning")
    p.add_argument("--out", metavar="DIR")
    p.set_defaults(fn=cmd_report)
    common(sub.add_parser("prop1", help="single-path vs multi-path quantized regression")).set_defaults(fn=cmd_prop1)
    common(sub.add_parser("oracle", help="brute-force ranking of the tiny fixture"), jobs=True).set_defaults(fn=cmd_oracle)
    common(sub.add_parser("sweep", help="search over a list of lambdas"), jobs=True).set_defaults(fn=cmd_sweep)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_INVALID if e.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, UsageError, ConfigMismatchError, OracleBudgetError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (json.JSONDecodeError, KeyError) as e:
        print(f"error: malformed input: {e}", file=sys.stderr)
        return EXIT_INVALID
    except NonFiniteError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, RuntimeError, ValueError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
