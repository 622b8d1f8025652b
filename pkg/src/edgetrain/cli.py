"""``edgetrain`` command line: build -> diff -> plan -> estimate, plus run, emit and report.

Every stage writes its artifacts and a ``manifest.json`` into ``--out`` and
prints one JSON line on stdout (stage, output directory, content hash). A
stage that consumes another stage's directory can read that line from stdin,
so stages chain with pipes::

    edgetrain build cct | edgetrain diff --strategy lora-2 | edgetrain plan | edgetrain estimate

Exit codes: 0 success, 1 user error, 2 internal invariant violation. Errors
are reported as a single JSON line on stderr.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import autodiff, builders, codegen, ir, memplan, peft, perf, pipeline
from .interp import grad_checksum, run_training_step

MODELS = ("cct", "cct-tiny", "deep-ae", "toy-mlp")


class UserError(Exception):
    pass


class ProvenanceError(UserError):
    pass


USER_ERRORS = (UserError, ir.IRError, peft.StrategyError, memplan.PlanError, perf.CostError,
               autodiff.ConfigError, builders.ConfigError, codegen.EmitError, codegen.BuildError,
               FileNotFoundError, json.JSONDecodeError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError(message)


def _sha(*parts: bytes) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p)
        h.update(b"\0")
    return h.hexdigest()


def _dump(path: Path, obj) -> bytes:
    raw = (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode()
    path.write_bytes(raw)
    return raw


def _out_dir(args, stage: str, key: str) -> Path:
    out = Path(args.out) if args.out else Path("edgetrain-out") / f"{stage}-{key[:12]}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _finish(stage: str, out: Path, manifest: dict, summary: list[str]) -> dict:
    manifest = {"stage": stage, **manifest}
    body = json.dumps(manifest, sort_keys=True).encode()
    manifest["artifact_hash"] = _sha(body)
    _dump(out / "manifest.json", manifest)
    (out / "summary.txt").write_text("\n".join(summary) + "\n")
    line = {"stage": stage, "out": str(out), "artifact_hash": manifest["artifact_hash"]}
    for k in ("graph_hash", "plan_hash"):
        if k in manifest:
            line[k] = manifest[k]
    print(json.dumps(line, sort_keys=True))
    return manifest


def _stdin_dir(expected: tuple[str, ...]) -> Path:
    if sys.stdin is None or sys.stdin.isatty():
        raise UserError(f"no input artifact given (pass a directory from a {'/'.join(expected)} stage)")
    lines = [ln for ln in sys.stdin.read().splitlines() if ln.strip()]
    if not lines:
        raise UserError("no input artifact on stdin")
    try:
        doc = json.loads(lines[-1])
    except json.JSONDecodeError:
        raise UserError("stdin does not carry an edgetrain stage line") from None
    return Path(doc["out"])


def _manifest(path: Path, stages: tuple[str, ...]) -> dict:
    mf = path / "manifest.json"
    if not mf.exists():
        raise UserError(f"{path} is not an edgetrain artifact directory (no manifest.json)")
    m = json.loads(mf.read_text())
    if m.get("stage") not in stages:
        raise ProvenanceError(f"{path} holds a {m.get('stage')!r} artifact; expected {' or '.join(stages)}")
    return m


def _write_graph(out: Path, g: ir.Graph, stem: str) -> str:
    text, blob = ir.serialize_graph(g)
    (out / f"{stem}.json").write_text(text)
    (out / f"{stem}.bin").write_bytes(blob)
    return _sha(text.encode(), blob)


def _load_graph(d: Path, stages: tuple[str, ...]):
    m = _manifest(d, stages)
    stem = m["graph_file"]
    text = (d / f"{stem}.json").read_text()
    blob = (d / f"{stem}.bin").read_bytes()
    h = _sha(text.encode(), blob)
    if h != m["graph_hash"]:
        raise ProvenanceError(f"graph in {d} has hash {h[:12]}, manifest says {m['graph_hash'][:12]}")
    return ir.parse_graph(text, blob), m


def _graph_dir(args, stages) -> Path:
    return Path(args.graph) if args.graph else _stdin_dir(stages)


def _load_training(args):
    g, m = _load_graph(_graph_dir(args, ("diff",)), ("diff",))
    return autodiff.TrainingGraph.from_graph(g), m


def _load_plan(d: Path, graph_hash: str):
    m = _manifest(d, ("plan",))
    if m["graph_hash"] != graph_hash:
        raise ProvenanceError(f"plan in {d} was made for graph {m['graph_hash'][:12]}, not {graph_hash[:12]}")
    doc = json.loads((d / "plan.json").read_text())
    if _sha((d / "plan.json").read_bytes()) != m["plan_hash"]:
        raise ProvenanceError(f"plan.json in {d} does not match its manifest")
    plan = memplan.AllocationPlan.from_dict(doc["allocation"])
    return plan, memplan.tiles_from_dict(doc["tiles"]), m


def _parse_json_arg(text: str | None) -> dict:
    if not text:
        return {}
    p = Path(text)
    try:
        return json.loads(p.read_text() if p.exists() else text)
    except json.JSONDecodeError as e:
        raise UserError(f"--cfg is neither a JSON file nor JSON text: {e}") from None


# ---------------------------------------------------------------------------
# stages


def cmd_build(args) -> int:
    try:
        return _build(args, _parse_json_arg(args.cfg))
    except TypeError as e:  # unknown config keys
        raise UserError(f"bad --cfg for {args.model}: {e}") from None


def _build(args, cfg: dict) -> int:
    if args.model in ("cct", "cct-tiny"):
        cfg.setdefault("seed", args.seed)
        cfg.setdefault("dtype", args.dtype)
        for k in ("conv_channels",):
            if k in cfg:
                cfg[k] = tuple(cfg[k])
        c = builders.tiny_cct_config(**cfg) if args.model == "cct-tiny" else builders.CctConfig(**cfg)
        g = builders.build_cct(c)
        cfg_doc = asdict(c)
    elif args.model == "deep-ae":
        cfg.setdefault("seed", args.seed)
        cfg.setdefault("dtype", args.dtype)
        if "widths" in cfg:
            cfg["widths"] = tuple(cfg["widths"])
        c = builders.DeepAeConfig(**cfg)
        g = builders.build_deep_ae(c)
        cfg_doc = asdict(c)
    else:
        widths = cfg.pop("widths", [16, 32, 10])
        batch = cfg.pop("batch", 1)
        if cfg:
            raise UserError(f"unknown toy-mlp keys: {sorted(cfg)}")
        g = builders.build_toy_mlp(widths, batch, args.seed, args.dtype)
        cfg_doc = {"widths": widths, "batch": batch, "seed": args.seed, "dtype": args.dtype}
    text, blob = ir.serialize_graph(g)
    h = _sha(text.encode(), blob)
    out = _out_dir(args, "build", h)
    _write_graph(out, g, "graph")
    _finish("build", out, {"model": args.model, "config": _jsonable(cfg_doc), "graph_file": "graph",
                           "graph_hash": h},
            [f"model {args.model}", f"parameters {g.param_count()} ({g.param_bytes()} bytes)",
             f"forward FLOPs {perf.graph_flops(g)}"])
    return 0


def cmd_diff(args) -> int:
    g, parent = _load_graph(_graph_dir(args, ("build",)), ("build",))
    strategy = None
    if args.strategy:
        strategy = peft.load_strategy(args.strategy, len(peft.block_indices(g)) or 0)
        g = peft.apply_strategy(g, strategy)
    cfg = autodiff.TrainConfig(learning_rate=args.lr, loss=args.loss or _loss_of(g),
                               update_placement=args.placement)
    tg = autodiff.build_training_graph(g, cfg)
    text, blob = ir.serialize_graph(tg.graph)
    h = _sha(text.encode(), blob)
    out = _out_dir(args, "diff", _sha(h.encode(), parent["graph_hash"].encode()))
    _write_graph(out, tg.graph, "train")
    flops = peft.strategy_flops(tg)
    tb = peft.trainable_bytes(g)
    _finish("diff", out, {"parent_hash": parent["graph_hash"], "graph_file": "train", "graph_hash": h,
                          "strategy": strategy.to_dict() if strategy else None, "train_config": asdict(cfg),
                          "trainable_bytes": tb, "flops": flops,
                          "nodes": {"forward": tg.forward_count, "backward": tg.backward_count,
                                    "update": tg.update_count}},
            [f"strategy {strategy.name if strategy else 'all trainable'}",
             f"trainable {tb} bytes ({tb / 1e6:.4f} MB)", f"step FLOPs {flops} ({flops / 1e6:.2f} M)",
             f"nodes fw/bw/update {tg.forward_count}/{tg.backward_count}/{tg.update_count}"])
    return 0


def _loss_of(g: ir.Graph) -> str:
    op = next(n.op for n in g.nodes if g.loss in n.outputs)
    return "mse" if op == "MseLoss" else "cross-entropy"


def cmd_plan(args) -> int:
    gdir = _graph_dir(args, ("diff",))
    g, dm = _load_graph(gdir, ("diff",))
    tg = autodiff.TrainingGraph.from_graph(g)
    hier = memplan.MemHierarchy.parse(args.mem) if args.mem else memplan.MemHierarchy()
    plan, tiles, ledger = memplan.plan_training_graph(tg, hier, accel=not args.cluster_only, policy=args.policy)
    plan.check()
    text = memplan.plan_to_json(plan, tiles, ledger) + "\n"
    ph = _sha(text.encode())
    out = _out_dir(args, "plan", _sha(ph.encode(), dm["graph_hash"].encode()))
    (out / "plan.json").write_text(text)
    rep = memplan.peak_report(plan)
    _finish("plan", out, {"graph_dir": str(gdir.resolve()), "graph_hash": dm["graph_hash"], "plan_hash": ph,
                          "policy": args.policy, "hierarchy": asdict(hier), "peaks": rep,
                          "transfers": ledger.totals()},
            [f"policy {args.policy}", f"L2 peak {plan.peaks['L2']} B, L3 peak {plan.peaks['L3']} B",
             f"dynamic peak {rep['dynamic_peak']} B", f"L3<->L2 traffic {ledger.total('L3', 'L2')} B",
             f"tiled GEMM-like nodes {len(tiles)}"])
    return 0


def _hw(args, hier) -> perf.HwConfig:
    if args.hw in (None, "calibrated"):
        return pipeline.calibrated_hw(hier=hier)
    if args.hw == "default":
        return perf.HwConfig()
    return perf.HwConfig.parse(args.hw)


def cmd_estimate(args) -> int:
    if args.plan:
        pdir = Path(args.plan)
    elif args.graph:
        raise UserError("--graph needs --plan")
    else:
        pdir = _stdin_dir(("plan",))
    pm = _manifest(pdir, ("plan",))
    gdir = Path(args.graph) if args.graph else Path(pm["graph_dir"])
    g, dm = _load_graph(gdir, ("diff",))
    tg = autodiff.TrainingGraph.from_graph(g)
    plan, tiles, _ = _load_plan(pdir, dm["graph_hash"])
    hw = _hw(args, plan.hierarchy)
    w = perf.Workload.from_plan(tg, plan, tiles)
    acc, clu = perf.estimate_workload(w, hw, True), perf.estimate_workload(w, hw, False)
    doc = {"hw": hw.to_dict(), "accelerated": acc.to_dict(), "cluster": clu.to_dict(),
           "steps_per_second": acc.steps_per_second}
    out = _out_dir(args, "estimate", _sha(pm["plan_hash"].encode(), json.dumps(hw.to_dict()).encode()))
    raw = _dump(out / "estimate.json", doc)
    _finish("estimate", out, {"graph_hash": dm["graph_hash"], "plan_hash": pm["plan_hash"],
                              "estimate_hash": _sha(raw), "trainable_bytes": dm.get("trainable_bytes"),
                              "flops": acc.total_flops, "latency_ms": acc.latency_ms,
                              "cluster_ms": clu.latency_ms, "speedup": acc.speedup},
            [f"FLOPs {acc.total_flops / 1e6:.2f} M", f"accelerated {acc.latency_ms:.2f} ms "
             f"({acc.steps_per_second:.2f} steps/s)", f"cluster only {clu.latency_ms:.2f} ms",
             f"speedup {acc.speedup:.2f}x", f"{acc.flop_per_cycle:.2f} FLOP/cycle"])
    return 0


def synthetic_batches(g: ir.Graph, steps: int, seed: int, fixed: bool = True):
    """Random inputs; a fixed batch by default so that loss curves are comparable."""
    rng = np.random.default_rng(seed)

    def one():
        b = {}
        for t in g.inputs:
            shape = g.tensors[t].shape
            if t == "labels":
                b[t] = np.eye(shape[1])[rng.integers(0, shape[1], shape[0])]
            else:
                b[t] = rng.standard_normal(shape)
        return b

    first = one()
    for _ in range(steps):
        yield first if fixed else one()


def _load_data(path: str, g: ir.Graph) -> dict:
    with np.load(path) as z:
        data = {k: z[k] for k in z.files}
    missing = [t for t in g.inputs if t not in data]
    if missing:
        raise UserError(f"data file lacks graph input {missing[0]!r}")
    return data


def cmd_run(args) -> int:
    tg, dm = _load_training(args)
    if args.steps < 1:
        raise UserError("--steps must be positive")
    if args.data:
        data = _load_data(args.data, tg.graph)
        batches = (data for _ in range(args.steps))
    else:
        batches = synthetic_batches(tg.graph, args.steps, args.seed)
    weights = None
    losses, checks = [], []
    for b in batches:
        r = run_training_step(tg, b, lr=args.lr, weights=weights)
        weights = r.weights
        losses.append(r.loss)
        checks.append(grad_checksum(r.grads))
    out = _out_dir(args, "run", _sha(dm["graph_hash"].encode(), f"{args.steps}:{args.seed}:{args.lr}".encode()))
    raw = _dump(out / "run.json", {"losses": losses, "grad_checksums": checks})
    _finish("run", out, {"graph_hash": dm["graph_hash"], "steps": args.steps, "seed": args.seed,
                         "run_hash": _sha(raw), "initial_loss": losses[0], "final_loss": losses[-1]},
            [f"steps {args.steps}", f"loss {losses[0]:.6g} -> {losses[-1]:.6g}"])
    return 0


def cmd_emit(args) -> int:
    pdir = Path(args.plan) if args.plan else _stdin_dir(("plan",))
    pm = _manifest(pdir, ("plan",))
    gdir = Path(args.graph) if args.graph else Path(pm["graph_dir"])
    g, dm = _load_graph(gdir, ("diff",))
    tg = autodiff.TrainingGraph.from_graph(g)
    plan, tiles, _ = _load_plan(pdir, dm["graph_hash"])
    batch = _load_data(args.data, g) if args.data else next(synthetic_batches(g, 1, args.seed))
    prog = codegen.emit(tg, plan, None if args.untiled else tiles, batch)
    out = _out_dir(args, "emit", _sha(pm["plan_hash"].encode(), str(args.untiled).encode(), str(args.seed).encode()))
    prog.write(out)
    extra, summary = {}, [f"C sources in {out}", f"reference loss {prog.expected['loss']:.9g}"]
    if args.build:
        res = codegen.run(codegen.build(out, args.profile))
        extra = {"c_loss": res["loss"], "c_grad_checksum": res["grad_checksum"],
                 "loss_rel_diff": codegen.rel_diff(res["loss"], prog.expected["loss"]),
                 "checksum_rel_diff": codegen.rel_diff(res["grad_checksum"], prog.expected["grad_checksum"])}
        summary.append(f"C loss {res['loss']:.9g} (rel diff {extra['loss_rel_diff']:.2e})")
    _finish("emit", out, {"graph_hash": dm["graph_hash"], "plan_hash": pm["plan_hash"], "tiled": not args.untiled,
                          "files": {k: _sha(v if isinstance(v, bytes) else v.encode())
                                    for k, v in sorted(prog.files.items())},
                          "expected": prog.expected, **extra}, summary)
    return 0


TABLE_COLS = ("strategy", "trainable_bytes", "trainable_mb", "flops_fw", "flops_bw", "flops_update", "flops_total_m")
MEMORY_COLS = ("strategy", "dynamic_peak_mb", "l3_peak_mb", "transfer_l3_l2_mb", "transfer_l2_l1_mb")
LATENCY_COLS = ("strategy", "cluster_ms", "accel_ms", "speedup", "steps_per_s", "flop_per_cycle")


def _csv(path: Path, rows, cols) -> None:
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([f"{r[c]:.6g}" if isinstance(r[c], float) else r[c] for c in cols])


def cmd_report(args) -> int:
    hier = memplan.MemHierarchy.parse(args.mem) if args.mem else memplan.MemHierarchy()
    names = pipeline.FIVE + (("Full-FT",) if args.full else ())
    cfg = builders.CctConfig(seed=args.seed)
    runs = pipeline.run_presets(names, cfg, hier)
    hw = _hw(args, hier) if args.hw not in (None, "calibrated") else pipeline.calibrated_hw(runs, hier)
    rows = pipeline.preset_rows(runs, hw)
    out = Path(args.out or args.run_dir or "edgetrain-report")
    out.mkdir(parents=True, exist_ok=True)
    _csv(out / "table_strategies.csv", rows, TABLE_COLS)
    _csv(out / "memory.csv", rows, MEMORY_COLS)
    _csv(out / "latency.csv", rows, LATENCY_COLS)
    hashes = {p: pipeline.graph_hash(r.tg.graph) for p, r in runs.items()}
    files = {n: _sha((out / n).read_bytes()) for n in ("table_strategies.csv", "memory.csv", "latency.csv")}
    _finish("report", out, {"presets": list(names), "graph_hashes": hashes, "hw": hw.to_dict(),
                            "hierarchy": asdict(hier), "files": files},
            [f"{r['strategy']:8s} {r['trainable_mb']:.4f} MB trainable  {r['flops_total_m']:.1f} MFLOP  "
             f"dyn {r['dynamic_peak_mb']:.3f} MB  {r['accel_ms']:.1f} ms" for r in rows])
    return 0


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


# ---------------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="edgetrain", description="training-graph compiler for extreme-edge devices")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    def common(sp, graph=True):
        sp.add_argument("--out", help="output directory (default: edgetrain-out/<stage>-<hash>)")
        sp.add_argument("--seed", type=int, default=0)
        if graph:
            sp.add_argument("--graph", help="input artifact directory (default: read the stage line on stdin)")

    b = sub.add_parser("build", help="build a model graph")
    b.add_argument("model", choices=MODELS)
    b.add_argument("--cfg", help="JSON object or file with builder overrides")
    b.add_argument("--dtype", choices=("FP32", "FP64"), default="FP32")
    common(b, graph=False)
    b.set_defaults(fn=cmd_build)

    d = sub.add_parser("diff", help="apply a strategy and differentiate")
    d.add_argument("--strategy", help="preset name (LP, FT-1, LoRA-1, FT-2, LoRA-2, Full-FT) or JSON file")
    d.add_argument("--lr", type=float, default=0.01)
    d.add_argument("--loss", choices=("cross-entropy", "mse"))
    d.add_argument("--placement", choices=("end", "eager"), default="end")
    common(d)
    d.set_defaults(fn=cmd_diff)

    pl = sub.add_parser("plan", help="liveness, tiling, allocation and transfer ledger")
    pl.add_argument("--mem", help="capacities, e.g. L1=128K,L2=2M,L3=32M")
    pl.add_argument("--policy", choices=memplan.POLICIES, default="l3-home")
    pl.add_argument("--cluster-only", action="store_true")
    common(pl)
    pl.set_defaults(fn=cmd_plan)

    r = sub.add_parser("run", help="train with the reference interpreter")
    r.add_argument("--data", help=".npz file with one array per graph input")
    r.add_argument("--steps", type=int, default=1)
    r.add_argument("--lr", type=float, default=None, help="override the graph's learning rate")
    common(r)
    r.set_defaults(fn=cmd_run)

    e = sub.add_parser("estimate", help="latency under the SoC cost model")
    e.add_argument("--plan", help="plan artifact directory")
    e.add_argument("--hw", help="'calibrated' (default), 'default', JSON, a JSON file, or key=value,...")
    common(e)
    e.set_defaults(fn=cmd_estimate)

    c = sub.add_parser("emit", help="emit (and optionally build and run) the C program")
    c.add_argument("--plan", help="plan artifact directory")
    c.add_argument("--data", help=".npz file with one array per graph input")
    c.add_argument("--untiled", action="store_true")
    c.add_argument("--build", action="store_true", help="compile and run, comparing with the interpreter")
    c.add_argument("--profile", choices=tuple(codegen.PROFILES), default="strict")
    common(c)
    c.set_defaults(fn=cmd_emit)

    rp = sub.add_parser("report", help="all presets on the CCT: CSV tables")
    rp.add_argument("run_dir", nargs="?", help="output directory (same as --out)")
    rp.add_argument("--mem")
    rp.add_argument("--hw")
    rp.add_argument("--full", action="store_true", help="add the Full-FT row")
    common(rp, graph=False)
    rp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = make_parser().parse_args(argv)
        return args.fn(args)
    except USER_ERRORS as e:
        return _fail(e, 1)
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except Exception as e:  # noqa: BLE001
        return _fail(e, 2)


def _fail(e: BaseException, code: int) -> int:
    msg = str(e).replace("\n", " ")
    sys.stderr.write(json.dumps({"error": type(e).__name__, "message": msg, "exit_code": code}) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
