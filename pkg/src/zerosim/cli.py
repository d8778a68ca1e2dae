"""Command-line harness: plan, train, verify, frag, report.

Settings resolve as command-line flags, then environment variables
(``ZEROSIM_ROSTER``, ``ZEROSIM_SEED``), then a flat ``key = value`` config
file given with ``--config``, then built-in defaults.

Exit codes: 0 success, 1 verification or protocol failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from pathlib import Path
from typing import Callable

from . import fragsim, planner
from .model import ModelSpec, param_count
from .mpadam import AdamHyper
from .numerics import NonFiniteError
from .planner import GB, STAGES, ModelShape, Stage
from .transport import ProtocolError, parse_roster
from .zerodp import (
    Fault,
    RunConfig,
    compare_to_baseline,
    digest,
    make_layout,
    run_equivalence_suite,
    run_sim,
    run_tcp,
    tcp_rank_main,
)

log = logging.getLogger("zerosim")

ENV_ROSTER = "ZEROSIM_ROSTER"
ENV_SEED = "ZEROSIM_SEED"


class UsageError(Exception):
    """Bad arguments or configuration (exit code 2)."""


# ---------------------------------------------------------------------------
# configuration


def read_config(path: str) -> dict[str, str]:
    """Flat ``key = value`` file; '#' starts a comment; keys use dashes or underscores."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{lineno}: expected key = value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


# dest -> (converter, default); None values stay None when nothing sets them
_SETTINGS: dict[str, tuple[Callable[[str], object], object]] = {
    "stage": (Stage.parse, Stage.POSGP),
    "ranks": (int, 4),
    "steps": (int, 50),
    "seed": (int, 7),
    "batch_size": (int, 16),
    "input_dim": (int, 2),
    "hidden_dim": (int, 8),
    "output_dim": (int, 1),
    "layers": (int, 2),
    "bucket": (int, None),
    "lr": (float, AdamHyper.lr),
    "beta1": (float, AdamHyper.beta1),
    "beta2": (float, AdamHyper.beta2),
    "eps": (float, AdamHyper.eps),
    "loss_scale": (float, AdamHyper.loss_scale),
    "transport": (str, "sim"),
    "roster": (str, None),
    "rank": (int, None),
    "timeout": (float, 60.0),
    "out": (str, None),
}

_ENV = {"roster": ENV_ROSTER, "seed": ENV_SEED}


def resolve(args: argparse.Namespace, keys) -> None:
    """Fill every unset ``keys`` attribute from env, config file, then defaults."""
    config = read_config(args.config) if getattr(args, "config", None) else {}
    for key in keys:
        conv, default = _SETTINGS[key]
        if getattr(args, key, None) is not None:
            continue
        raw = None
        if key in _ENV and os.environ.get(_ENV[key]):
            raw = os.environ[_ENV[key]]
        elif key in config:
            raw = config[key]
        try:
            value = conv(raw) if raw is not None else default
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {exc}") from None
        setattr(args, key, value)


def _run_config(args: argparse.Namespace, stage: Stage) -> RunConfig:
    try:
        cfg = RunConfig(
            stage=stage,
            n_ranks=args.ranks,
            spec=ModelSpec(args.input_dim, args.hidden_dim, args.output_dim, args.layers),
            steps=args.steps,
            seed=args.seed,
            batch_size=args.batch_size,
            bucket_capacity=args.bucket,
            hyper=AdamHyper(args.lr, args.beta1, args.beta2, args.eps, args.loss_scale),
        )
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.transport not in ("sim", "tcp"):
        raise UsageError(f"transport must be sim or tcp, got {args.transport!r}")
    return cfg


def _load_roster(path: str | None, n_ranks: int):
    if path is None:
        return None
    try:
        roster = parse_roster(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise UsageError(f"roster {path}: {exc}") from None
    if len(roster) != n_ranks:
        raise UsageError(f"roster {path} lists {len(roster)} ranks but --ranks is {n_ranks}")
    return roster


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _fault(text: str) -> Fault:
    parts = text.split(":")
    if len(parts) not in (4, 5):
        raise argparse.ArgumentTypeError("fault is stage:N:step:index[:delta]")
    try:
        stage = Stage.parse(parts[0])
        nums = [int(p) for p in parts[1:4]]
        delta = float(parts[4]) if len(parts) == 5 else 1.0
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return Fault(stage, nums[0], nums[1], nums[2], delta)


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# plan


def cmd_plan(args: argparse.Namespace) -> int:
    if args.table:
        _emit(planner.emit_table(args.table, exact=args.exact), args.out)
        return 0
    if args.psi is None:
        raise UsageError("plan needs --table or --psi")
    if args.psi <= 0 or args.dp < 1 or args.mp < 1:
        raise UsageError("--psi must be positive and --dp/--mp at least 1")
    try:
        stages = [Stage.parse(args.stage)] if args.stage else list(STAGES)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    act = 0.0
    act_host = 0.0
    if args.hidden:
        try:
            shape = ModelShape(args.psi, args.hidden, args.seq, args.batch, args.transformer_layers)
            a = planner.activation_bytes(shape, args.checkpointed, args.mp, args.pa, args.pa_cpu)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        act, act_host = a.device, a.host
    temp = planner.temp_buffer_bytes(args.psi, not args.fp16_buffer, args.cb_limit) if args.buffers else 0

    buf = io.StringIO()
    buf.write(f"# schema=1 report=plan psi={args.psi:g} dp={args.dp} mp={args.mp} k={args.k} units=bytes\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "params_f16", "grads_f16", "optimizer", "activations", "activations_host",
                "temp_buffers", "model_states", "total", "model_states_gb", "max_model_size"])
    for stage in stages:
        ms = planner.model_state_bytes(args.psi, args.k, args.dp, stage)
        per_dev = [v / args.mp for v in (ms.params_f16, ms.grads_f16, ms.optimizer)]
        states = sum(per_dev)
        w.writerow([
            stage.value, *(f"{v:.0f}" for v in per_dev), f"{act:.0f}", f"{act_host:.0f}", f"{temp:.0f}",
            f"{states:.0f}", f"{states + act + temp:.0f}", planner.printed_gb(states / GB),
            f"{planner.max_model_size(stage, args.dp, args.mp, args.device_mem_gb * GB, args.k):.4g}",
        ])
    _emit(buf.getvalue(), args.out)
    return 0


# ---------------------------------------------------------------------------
# train


def train_csv(stage: Stage, cfg: RunConfig, rank0, transport: str) -> str:
    psi = param_count(cfg.spec)
    layout = make_layout(psi, cfg.n_ranks)
    buf = io.StringIO()
    buf.write(f"# schema=1 report=train stage={stage.value} ranks={cfg.n_ranks} transport={transport} "
              f"seed={cfg.seed} psi={psi} padded={layout.padded}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss", "sent_elements", "state_bytes"])
    losses = rank0.global_losses() if cfg.steps else []
    for rep, loss in zip(rank0.reports, losses):
        sb = rep.state_bytes
        w.writerow([rep.step, repr(loss), rep.elements_sent, int(sb.params_f16 + sb.grads_f16 + sb.optimizer)])
    buf.write(f"# digest={digest(rank0.final_master, psi)}\n")
    return buf.getvalue()


def cmd_train(args: argparse.Namespace) -> int:
    resolve(args, [k for k in _SETTINGS if k != "out"])
    cfg = _run_config(args, args.stage)
    if args.transport == "sim":
        if args.rank is not None:
            raise UsageError("--rank only applies to --transport tcp")
        runs = run_sim(args.stage, cfg, gather_losses=True)
    elif args.rank is not None:
        # join an externally launched mesh as one rank
        roster = _load_roster(args.roster, cfg.n_ranks)
        if roster is None:
            raise UsageError(f"--rank needs --roster or {ENV_ROSTER}")
        if not 0 <= args.rank < cfg.n_ranks:
            raise UsageError(f"--rank {args.rank} outside 0..{cfg.n_ranks - 1}")
        res = tcp_rank_main(args.rank, roster, [args.stage], cfg, timeout=args.timeout, gather_losses=True)
        if args.rank != 0:
            return 0
        runs = [res[args.stage]]
    else:
        roster = _load_roster(args.roster, cfg.n_ranks)
        runs = run_tcp([args.stage], cfg, roster, timeout=args.timeout, gather_losses=True)[args.stage]
    _emit(train_csv(args.stage, cfg, runs[0], args.transport), args.out)
    return 0


# ---------------------------------------------------------------------------
# verify


def _verify_tcp(args, spec: ModelSpec, fault: Fault | None) -> tuple[list[str], bool]:
    lines, ok = [], True
    psi = param_count(spec)
    for seed in args.seeds:
        for n in args.ranks:
            cfg = _run_config(argparse.Namespace(**{**vars(args), "ranks": n, "seed": seed}), Stage.BASELINE)
            roster = _load_roster(args.roster, n) if args.roster and len(args.ranks) == 1 else None
            tcp = run_tcp(STAGES, cfg, roster, fault, record=True, timeout=args.timeout)
            sim_base = run_sim(Stage.BASELINE, cfg, fault)
            ref = digest(sim_base[0].final_master, psi)
            for stage in STAGES:
                got = digest(tcp[stage][0].final_master, psi)
                d = None if stage is Stage.BASELINE else compare_to_baseline(
                    stage, tcp[Stage.BASELINE], tcp[stage], n, seed)
                status = "ok" if d is None and got == ref else "FAIL"
                ok &= status == "ok"
                lines.append(f"{status} N={n} seed={seed} stage={stage.value} tcp_digest={got} sim_digest={ref}")
                if d is not None:
                    lines.append("  " + d.describe())
    return lines, ok


def cmd_verify(args: argparse.Namespace) -> int:
    resolve(args, ["steps", "batch_size", "input_dim", "hidden_dim", "output_dim", "layers", "bucket",
                   "lr", "beta1", "beta2", "eps", "loss_scale", "transport", "roster", "timeout"])
    config = read_config(args.config) if args.config else {}
    try:
        if args.seeds is None:
            if os.environ.get(ENV_SEED):
                args.seeds = [int(os.environ[ENV_SEED])]
            else:
                args.seeds = _int_list(config.get("seeds", "1,7"))
        if args.ranks is None:
            args.ranks = _int_list(config.get("ranks", "1,2,4,8"))
    except (ValueError, argparse.ArgumentTypeError) as exc:
        raise UsageError(f"bad seeds or ranks: {exc}") from None
    for n in args.ranks:
        _run_config(argparse.Namespace(**{**vars(args), "ranks": n, "seed": 0}), Stage.BASELINE)
    spec = ModelSpec(args.input_dim, args.hidden_dim, args.output_dim, args.layers)
    fault = args.inject_fault

    if args.transport == "tcp":
        lines, ok = _verify_tcp(args, spec, fault)
    else:
        hyper = AdamHyper(args.lr, args.beta1, args.beta2, args.eps, args.loss_scale)
        verdict = run_equivalence_suite(spec, args.ranks, args.steps, tuple(args.seeds), fault,
                                        args.batch_size, args.bucket, hyper)
        failed = {(d.n_ranks, d.seed, d.stage): d for d in verdict.divergences}
        lines = []
        for n, seed, stage in verdict.checked:
            d = failed.get((n, seed, stage))
            lines.append(f"{'ok' if d is None else 'FAIL'} N={n} seed={seed} stage={stage.value}")
            if d is not None:
                lines.append("  " + d.describe())
        ok = verdict.ok
    lines.append(f"verdict: {'all stages match baseline' if ok else 'divergence found'}")
    _emit("\n".join(lines) + "\n", args.out)
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# frag


def cmd_frag(args: argparse.Namespace) -> int:
    gen = (args.layers, args.ckpt_size, args.temp_size, args.grads_size)
    if args.trace and any(v is not None for v in gen):
        raise UsageError("give either --trace or generator sizes, not both")
    header_cap = None
    if any(v is not None for v in gen):
        if any(v is None for v in gen):
            raise UsageError("generator needs --layers, --ckpt-size, --temp-size and --grads-size")
        try:
            events = fragsim.gen_training_trace(*gen)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    else:
        path = args.trace or fragsim.fixture_path()
        try:
            text = sys.stdin.read() if path == "-" else Path(path).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read trace {path}: {exc}") from None
        try:
            events, header_cap = fragsim.parse_trace(text)
        except fragsim.TraceError as exc:
            raise UsageError(f"{path}: {exc}") from None
    capacity = args.capacity if args.capacity is not None else header_cap
    if capacity is None:
        capacity = fragsim.md_capacity_needed(events) if events else 0
    if capacity < 0:
        raise UsageError("--capacity must be non-negative")
    policies = fragsim.POLICIES if args.policy == "both" else (args.policy,)
    reports = [fragsim.simulate(capacity, events, p, args.fit) for p in policies]
    _emit(fragsim.report_csv(reports), args.out)
    return 0


# ---------------------------------------------------------------------------
# report


def analytic_checks_csv() -> str:
    buf = io.StringIO()
    buf.write("# schema=1 report=checks\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["check", "value", "unit"])
    t = planner.trillion_check()
    w.writerow(["trillion_model_states", t["total_bytes"], "bytes"])
    w.writerow(["trillion_per_device_1024", float(t["per_device_bytes"]), "bytes"])
    gpt2 = ModelShape(1.5e9, 1600, 1024, 32, 48)
    w.writerow(["gpt2_activations", planner.activation_bytes(gpt2).device, "bytes"])
    w.writerow(["gpt2_fused_fp32_buffer", planner.temp_buffer_bytes(1.5e9), "bytes"])
    big = ModelShape(100e9, 8192, 1024, 32, 125)
    w.writerow(["100b_checkpoints", planner.activation_bytes(big, checkpointed=True).device, "bytes"])
    w.writerow(["100b_checkpoints_pa_mp16",
                planner.activation_bytes(big, checkpointed=True, mp_degree=16, pa=True).device, "bytes"])
    blk = planner.mp_comm_per_block(1, 1024, 8192)
    w.writerow(["mp_volume_per_block_b1_s1024_h8192", blk.mp_volume, "elements"])
    w.writerow(["pa_overhead_ratio", str(blk.ratio), "fraction"])
    for stage in STAGES:
        w.writerow([f"dp_volume_{stage.value}", planner.dp_comm_volume(stage, 1), "psi"])
    return buf.getvalue()


def cmd_report(args: argparse.Namespace) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for table in ("table1", "table2", "fig1"):
        (out / f"{table}.csv").write_text(planner.emit_table(table))
        (out / f"{table}_exact.csv").write_text(planner.emit_table(table, exact=True))
    (out / "checks.csv").write_text(analytic_checks_csv())
    events, cap = fragsim.load_fixture()
    reports = [fragsim.simulate(cap, events, p) for p in fragsim.POLICIES]
    (out / "frag.csv").write_text(fragsim.report_csv(reports))
    for name in sorted(p.name for p in out.iterdir()):
        print(out / name)
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_run_options(p: argparse.ArgumentParser, with_stage: bool) -> None:
    if with_stage:
        p.add_argument("--stage", type=Stage.parse, help="base, os, os+g or os+g+p (default os+g+p)")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int, help="global batch, split evenly over ranks (default 16)")
    p.add_argument("--input-dim", type=int)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--output-dim", type=int)
    p.add_argument("--layers", type=int, help="hidden layers (default 2)")
    p.add_argument("--bucket", type=int, help="gradient bucket capacity in elements (default: whole partition)")
    p.add_argument("--lr", type=float)
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--loss-scale", type=float)
    p.add_argument("--transport", choices=("sim", "tcp"))
    p.add_argument("--roster", help=f"host:port per line in rank order (env {ENV_ROSTER})")
    p.add_argument("--timeout", type=float, help="socket timeout in seconds (default 60)")
    p.add_argument("--config", help="flat key = value settings file")
    p.add_argument("--out", help="write output here instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zerosim", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="analytic memory model and table reproduction")
    p.add_argument("--table", choices=("table1", "table2", "fig1"))
    p.add_argument("--exact", action="store_true", help="raw bytes / parameter counts instead of printed precision")
    p.add_argument("--psi", type=float, help="parameter count")
    p.add_argument("--dp", type=int, default=1, help="data-parallel degree")
    p.add_argument("--mp", type=int, default=1, help="model-parallel degree")
    p.add_argument("--k", type=int, default=planner.ADAM_K, help="optimizer bytes per parameter")
    p.add_argument("--stage", help="limit to one stage")
    p.add_argument("--device-mem-gb", type=float, default=32.0)
    p.add_argument("--hidden", type=int, help="hidden size, enables the activation estimate")
    p.add_argument("--seq", type=int, default=1024)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--transformer-layers", type=int, default=48)
    p.add_argument("--checkpointed", action="store_true")
    p.add_argument("--pa", action="store_true", help="partition checkpoints over the MP group")
    p.add_argument("--pa-cpu", action="store_true", help="offload partitioned checkpoints to host")
    p.add_argument("--buffers", action="store_true", help="include the fused gradient buffer")
    p.add_argument("--fp16-buffer", action="store_true")
    p.add_argument("--cb-limit", type=float, help="constant buffer cap in bytes")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("train", help="train one stage and print per-step CSV plus a digest")
    _add_run_options(p, with_stage=True)
    p.add_argument("--ranks", type=int)
    p.add_argument("--seed", type=int, help=f"(env {ENV_SEED})")
    p.add_argument("--rank", type=int, help="join a tcp mesh as this rank instead of launching all")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("verify", help="bitwise equivalence of every stage against baseline")
    _add_run_options(p, with_stage=False)
    p.add_argument("--ranks", type=_int_list, help="comma-separated rank counts (default 1,2,4,8)")
    p.add_argument("--seeds", type=_int_list, help=f"comma-separated seeds (default 1,7; env {ENV_SEED})")
    p.add_argument("--inject-fault", type=_fault, metavar="STAGE:N:STEP:INDEX[:DELTA]",
                   help="perturb one gradient element on rank 0")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("frag", help="heap fragmentation under both placement policies")
    p.add_argument("--trace", help="trace file ('-' for stdin); default is the shipped fixture")
    p.add_argument("--layers", type=int)
    p.add_argument("--ckpt-size", type=int)
    p.add_argument("--temp-size", type=int)
    p.add_argument("--grads-size", type=int)
    p.add_argument("--capacity", type=int, help="heap bytes (default: trace header or md_defrag need)")
    p.add_argument("--policy", choices=("both",) + fragsim.POLICIES, default="both")
    p.add_argument("--fit", choices=fragsim.FITS, default="first")
    p.add_argument("--out")
    p.set_defaults(func=cmd_frag)

    p = sub.add_parser("report", help="write every table and analytic check as CSV files")
    p.add_argument("--out-dir", default="zerosim-report")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"zerosim {args.command}: {exc}", file=sys.stderr)
        return 2
    except (ProtocolError, NonFiniteError) as exc:
        print(f"zerosim {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
