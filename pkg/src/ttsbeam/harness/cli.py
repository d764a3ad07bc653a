"""``ttsbeam`` command line.

Every subcommand accepts ``--config`` (YAML file or preset name),
``--seed`` and ``--out`` (defaults to stdout).  Exit status is 0 on
success and 2 when a run ends infeasible or with a failed diagnostic.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .. import baselines as bl
from ..cssca import optimize_long_term
from . import experiments as ex
from .config import SCHEMES, ExperimentConfig
from .metrics import fmt, records_to_csv

EXIT_OK = 0
EXIT_DIAGNOSTIC = 2

log = logging.getLogger("ttsbeam")


def _emit(text: str, out):
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.override(seed=int(args.seed))
    return cfg


def _status(records) -> int:
    bad = [r for r in records if r.infeasible_slots > 0 or not np.isfinite(r.power_w)]
    for r in bad:
        log.warning("%s (%s): %d of %d slots infeasible", r.scheme, r.axis, r.infeasible_slots, r.n_slots)
    return EXIT_DIAGNOSTIC if bad else EXIT_OK


# -- subcommands ----------------------------------------------------------------

def cmd_optimize(args) -> int:
    cfg = _load(args)
    res = optimize_long_term(cfg.scsi(), cfg.long_term())
    _emit(res.to_json() + "\n", args.out)
    if args.trace:
        res.write_trace(args.trace, timing=args.timing)
    if res.diagnostics:
        log.warning("%d subproblems fell back after solver diagnostics", len(res.diagnostics))
    return EXIT_DIAGNOSTIC if res.cap_active else EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    if args.policy:
        pol = json.loads(Path(args.policy).read_text())
        theta, lam = np.asarray(pol["theta"]), np.asarray(pol["lambda"])
        d = cfg.data["delay"]
        rec = ex.evaluate_policy(theta, lam, cfg.scsi(), cfg.n_slots, cfg.long_term().J, cfg.R, cfg.seed,
                                 float(d["delay_ms"]), float(d["user_speed_kmh"]))
        rec.with_context(seed=cfg.seed, config_hash=cfg.hash())
    else:
        rec = ex.run_scheme(cfg, ex.PDD_LABEL, cfg.seed)
    _emit(records_to_csv([rec], args.timing), args.out)
    return _status([rec])


def cmd_baseline(args) -> int:
    cfg = _load(args)
    schemes = [args.scheme] if args.scheme else [s for s in SCHEMES if s != ex.PDD_LABEL]
    recs = [ex.run_scheme(cfg, s, cfg.seed) for s in schemes]
    _emit(records_to_csv(recs, args.timing), args.out)
    return _status(recs)


def cmd_sweep(args) -> int:
    cfg = _load(args)
    if args.seed is not None:
        cfg = cfg.override(sweep={"seeds": [int(args.seed)]})
    if args.axis:
        cfg = cfg.override(sweep={"axis": args.axis})
    if args.values:
        vals = [[float(v) for v in s.split("/")] if "/" in s else float(s) for s in args.values.split(",")]
        cfg = cfg.override(sweep={"values": vals})
    if args.schemes:
        cfg = cfg.override(sweep={"schemes": args.schemes.split(",")})
    recs = ex.run_sweep(cfg)
    _emit(records_to_csv(recs, args.timing), args.out)
    return _status(recs)


def cmd_quantize(args) -> int:
    cfg = _load(args)
    bits = [None] + [int(b) for b in (args.bits.split(",") if args.bits else cfg.data["quantize"]["bits"])]
    recs = ex.quantize_pipeline(cfg, bits)
    _emit(records_to_csv(recs, args.timing), args.out)
    return _status(recs)


def cmd_overhead(args) -> int:
    cfg = _load(args)
    d = cfg.dims
    M = d.M if args.M is None else args.M
    K = d.K if args.K is None else args.K
    N = d.N if args.N is None else args.N
    T_s = cfg.T_s if args.T_s is None else args.T_s
    tts, icsi, itv_tts, itv_icsi = ex.overhead_report(M, K, N, T_s)
    text = ("quantity,TTS,I-CSI\n"
            f"channel_coefficients_per_slot,{tts},{icsi}\n"
            f"phase_updates_per_interval,{itv_tts},{itv_icsi}\n")
    _emit(text, args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rows = ex.gradcheck(n_instances=args.instances, seed=0 if args.seed is None else int(args.seed),
                        tol=args.tol)
    lines = ["instance,output,wrt,rel_error,result"]
    lines += [f"{r.instance},{r.output},{r.wrt},{fmt(r.rel_error)},{'pass' if r.passed else 'FAIL'}"
              for r in rows]
    n_fail = sum(not r.passed for r in rows)
    _emit("\n".join(lines) + "\n", args.out)
    log.info("gradcheck: %d/%d passed", len(rows) - n_fail, len(rows))
    return EXIT_DIAGNOSTIC if n_fail else EXIT_OK


def cmd_rate_table(args) -> int:
    cfg = _load(args)
    unequal = [float(r) for r in args.targets.split(",")]
    rows = ex.rate_target_table(cfg, unequal)
    lines = ["scheme,power_unequal_dBm,power_equal_dBm,diff_dB"]
    lines += [f"{s},{fmt(pu)},{fmt(pe)},{fmt(dd)}" for s, pu, pe, dd in rows]
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK if all(np.isfinite(r[3]) for r in rows) else EXIT_DIAGNOSTIC


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ttsbeam", description="Two-timescale IRS beamforming experiments")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", default="desk-scale", help="YAML file or preset name")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="output file (default: stdout)")
        sp.add_argument("--timing", action="store_true", help="fill the wall_ms column")
        sp.set_defaults(func=fn)
        return sp

    sp = add("optimize", cmd_optimize, "long-term optimization; writes theta/lambda JSON")
    sp.add_argument("--trace", default=None, help="per-iteration CSV trace path")
    sp = add("evaluate", cmd_evaluate, "held-out evaluation of the proposed scheme")
    sp.add_argument("--policy", default=None, help="JSON from `optimize` (trains if omitted)")
    sp = add("baseline", cmd_baseline, "run benchmark schemes")
    sp.add_argument("--scheme", choices=[s for s in SCHEMES if s != ex.PDD_LABEL], default=None)
    sp = add("sweep", cmd_sweep, "scheme x axis value x seed sweep")
    sp.add_argument("--axis", choices=["beta", "N", "delay", "targets"], default=None)
    sp.add_argument("--values", default=None, help="comma list; targets use '/' e.g. 2.5/3.5,3/3")
    sp.add_argument("--schemes", default=None, help="comma list of scheme labels")
    sp = add("quantize", cmd_quantize, "discrete-phase projection and multiplier re-fit")
    sp.add_argument("--bits", default=None, help="comma list of resolutions in bits")
    sp = add("overhead", cmd_overhead, "estimation and signaling overhead counts")
    for k in ("M", "K", "N", "T_s"):
        sp.add_argument(f"--{k}", type=int, default=None)
    sp = add("gradcheck", cmd_gradcheck, "unrolled gradients vs finite differences")
    sp.add_argument("--instances", type=int, default=20)
    sp.add_argument("--tol", type=float, default=1e-5)
    sp = add("rate-table", cmd_rate_table, "power under unequal vs equal rate targets")
    sp.add_argument("--targets", required=True, help="comma list of unequal per-user targets")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_DIAGNOSTIC


if __name__ == "__main__":
    sys.exit(main())
