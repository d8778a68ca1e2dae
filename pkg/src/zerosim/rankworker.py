"""Entry point for one socket-transport rank.

Usage: ``python -m zerosim.rankworker JOB.json RANK OUT.npz``.  The job file
carries the roster, stages and run config; results land in ``OUT.npz`` for
the coordinator to collect.
"""

from __future__ import annotations

import json
import sys

import numpy as np

from .collectives import PRIMITIVES, CommStats, PrimitiveCounts
from .planner import MemoryEstimate, Stage
from .zerodp import RankRun, StepReport, config_from_dict, fault_from_dict, tcp_rank_main


def _report_to_dict(rep: StepReport) -> dict:
    return {
        "step": rep.step, "rank": rep.rank, "loss": rep.loss,
        "comm": {k: vars(v) for k, v in rep.comm.counts.items()},
        "state": [rep.state_bytes.params_f16, rep.state_bytes.grads_f16, rep.state_bytes.optimizer],
        "bucket_peak": rep.bucket_peak, "bucket_rounds": rep.bucket_rounds,
        "peak_cached_chunks": rep.peak_cached_chunks,
    }


def _report_from_dict(d: dict) -> StepReport:
    comm = CommStats({k: PrimitiveCounts(**d["comm"][k]) for k in PRIMITIVES})
    p, g, o = d["state"]
    return StepReport(d["step"], d["rank"], d["loss"], comm, MemoryEstimate(p, g, o),
                      d["bucket_peak"], d["bucket_rounds"], d["peak_cached_chunks"])


def save_result(path: str, results: dict[Stage, RankRun]) -> None:
    arrays = {}
    meta = {}
    for stage, run in results.items():
        key = stage.value
        meta[key] = {"rank": run.rank, "reports": [_report_to_dict(r) for r in run.reports],
                     "snapshots": len(run.masters)}
        for i, (m, p) in enumerate(zip(run.masters, run.params)):
            arrays[f"{key}/master/{i}"] = m
            arrays[f"{key}/params/{i}"] = p
        if run.final_master is not None:
            arrays[f"{key}/final"] = run.final_master
        if run.all_losses is not None:
            arrays[f"{key}/losses"] = run.all_losses
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_result(path: str) -> dict[Stage, RankRun]:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        out = {}
        for key, m in meta.items():
            n = m["snapshots"]
            run = RankRun(
                m["rank"],
                [_report_from_dict(r) for r in m["reports"]],
                [z[f"{key}/master/{i}"] for i in range(n)],
                [z[f"{key}/params/{i}"] for i in range(n)],
                z[f"{key}/final"] if f"{key}/final" in z else None,
                z[f"{key}/losses"] if f"{key}/losses" in z else None,
            )
            out[Stage(key)] = run
    return out


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 3:
        print(__doc__, file=sys.stderr)
        return 2
    job_path, rank, out = argv[0], int(argv[1]), argv[2]
    with open(job_path) as fh:
        job = json.load(fh)
    roster = [tuple(a) for a in job["roster"]]
    results = tcp_rank_main(rank, roster, job["stages"], config_from_dict(job["config"]),
                            fault_from_dict(job["fault"]), job["record"], job["timeout"],
                            job.get("gather_losses", False))
    save_result(out, results)
    return 0


if __name__ == "__main__":
    sys.exit(main())
