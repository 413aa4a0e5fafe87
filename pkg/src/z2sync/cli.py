"""Command-line driver: ``z2sync {gen,sync,sweep,diag,check-scales}``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .io import LongCSV, config_hash, save_instance, write_manifest

FLAG_TYPES = {
    "d": int, "n": int, "p": float, "eta": float, "seed": int, "range_L": int, "scale_L": int, "kappa": int,
    "t": float, "sweeps": int, "replicas": int, "reps": int, "p_grid": str, "eta_grid": str, "L_grid": str,
    "sample_pairs": int, "threads": int, "out_dir": str,
}


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file (flags win)")
    for name, kind in FLAG_TYPES.items():
        flag = "--" + name.replace("_", "-")
        parser.add_argument(flag, dest=name, type=str, default=None, metavar=kind.__name__.upper())


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="z2sync", description="Z2 synchronization by block renormalization")
    sub = ap.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen", help="generate an instance file")
    _common(g)
    g.add_argument("--goe", action="store_true", help="also store the range-L GOE observations")
    s = sub.add_parser("sync", help="run the full pipeline on one instance")
    _common(s)
    w = sub.add_parser("sweep", help="effective-noise or threshold sweep")
    _common(w)
    w.add_argument("--kind", choices=("threshold", "noise"), default="threshold")
    dg = sub.add_parser("diag", help="overlap diagnostics on one block pair")
    _common(dg)
    dg.add_argument("--what", choices=("nishimori", "correlation", "locking", "susceptibility"),
                    default="nishimori")
    c = sub.add_parser("check-scales", help="evaluate the scale conditions for kappa and d")
    _common(c)
    return ap


class UsageError(Exception):
    pass


def _outputs(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen(cfg: ExperimentConfig, args) -> list[str]:
    from .model import generate_instance

    out = _outputs(cfg)
    params = cfg.model_params(range_L=cfg.range_L or 1)
    inst = generate_instance(params, goe=args.goe)
    save_instance(inst, out / "instance.z2s")
    return ["instance.z2s"]


def cmd_sync(cfg: ExperimentConfig, args) -> list[str]:
    from .diagnostics import run_pipeline
    from .multiscale import honest_good_audit, write_level_csv

    out = _outputs(cfg)
    res = run_pipeline(cfg.model_params(), cfg.scale_L, cfg.kappa, cfg.t, cfg.sweeps, cfg.threads, cfg.sample_pairs)
    emb = cfg.embedded()
    h = config_hash(emb)
    audit = honest_good_audit(res.sync.state, res.renorm.tilde_theta, res.renorm.delta_hat)
    with LongCSV(out / "sync.csv", emb) as t:
        t.row("risk", res.risk.value, res.risk.se)
        t.row("risk_exact", res.risk_exact)
        t.row("p_hat", res.p_hat)
        t.row("delta_hat", res.renorm.delta_hat)
        t.row("block_pair_error", res.block_errors)
        t.row("coverage", float(res.covered.mean()))
        t.row("blocks", res.part.n_blocks)
        t.row("levels", res.sync.state.H.K)
        for row in audit:
            lv = {"level": row["level"]}
            t.row("honest_rate", row["honest_rate"], params=lv)
            t.row("bad_freq", row["bad_freq"], row["bad_se"], params=lv)
            t.row("bad_bound", row["bound"], params=lv)
            t.row("incoherent_quartets", row["incoherent_quartets"], params=lv)
    res.renorm.write_csv(out / "sync_edges.csv", out / "sync_blocks.csv", h)
    write_level_csv(audit, out / "sync_levels.csv", h)
    return ["sync.csv", "sync_edges.csv", "sync_blocks.csv", "sync_levels.csv"]


def cmd_sweep(cfg: ExperimentConfig, args) -> list[str]:
    from .diagnostics import threshold_scan
    from .renorm import effective_noise_curve

    out = _outputs(cfg)
    emb = cfg.embedded()
    emb["kind"] = args.kind
    with LongCSV(out / "sweep.csv", emb) as t:
        if args.kind == "threshold":
            if not cfg.p_grid:
                raise ConfigError("p_grid", "empty grid", [])

            def flush(row):
                pt = {"p": row["p"]}
                t.row("risk", row["risk"], row["risk_se"], pt)
                t.row("risk_exact", row["risk_exact"], row["risk_exact_se"], pt)
                t.row("p_hat", row["p_hat"], row["p_hat_se"], pt)
                t.row("coverage", row["coverage"], params=pt)

            threshold_scan(cfg.model_params(), cfg.p_grid, cfg.scale_L, cfg.reps, cfg.kappa, cfg.t, cfg.sweeps,
                           cfg.threads, on_row=flush)
        else:
            if not cfg.L_grid:
                raise ConfigError("L_grid", "empty grid", [])
            for L in cfg.L_grid:
                row = effective_noise_curve(cfg.model_params(), [L], cfg.reps, cfg.t, cfg.sweeps, cfg.threads)[0]
                t.row("p_hat", row["p_hat"], row["se"], {"scale_L": L})
    return ["sweep.csv"]


def cmd_diag(cfg: ExperimentConfig, args) -> list[str]:
    from . import diagnostics as dg
    from .geometry import build_partition
    from .model import generate_instance
    from .sideinfo import build_block_side_info

    out = _outputs(cfg)
    params = cfg.model_params()
    inst = generate_instance(params, goe=False)
    part = build_partition(params.n, params.d, cfg.scale_L)
    if part.grid.shape[0] < 2:
        raise ConfigError("n", "box must hold two adjacent interior blocks for diagnostics", cfg.n)
    side = build_block_side_info(inst, part, cfg.t)
    b, b2 = 0, part.grid.index(part.grid.coords[0] + np.eye(params.d, dtype=np.int64)[0])
    emb = cfg.embedded()
    emb["what"] = args.what
    with LongCSV(out / "diag.csv", emb) as t:
        if args.what == "nishimori":
            from .gibbs import block_hamiltonian

            ham = block_hamiltonian(inst, part, side, b)
            truth = inst.theta.ravel()[part.vertex_index[b]]
            rep = dg.nishimori_experiment([inst], [ham], cfg.sweeps, truths=[truth])
            for k in ("r12", "r10", "r12_sq", "r10_sq", "r12_abs", "r10_abs"):
                t.row(k, getattr(rep, k))
        elif args.what == "correlation":
            from .gibbs import block_hamiltonian

            est = dg.pair_correlation(inst, block_hamiltonian(inst, part, side, b), cfg.replicas, cfg.sweeps)
            t.row("phi_e", est.phi_e, est.phi_e_se)
            t.row("phi_v", est.phi_v, est.phi_v_se)
        elif args.what == "locking":
            rep = dg.locking_deficit(inst, part, side, b, b2, cfg.sweeps, replicas=cfg.replicas)
            t.row("V_one_block", rep["V_one"], rep["V_one_se"])
            t.row("V_two_block", rep["V_two"], rep["V_two_se"])
        else:
            rep = dg.susceptibility(inst, part, side, b, b2, cfg.replicas, cfg.sweeps)
            for k in ("tr2", "tr3", "opnorm"):
                t.row(k, rep[k])
    return ["diag.csv"]


def cmd_check_scales(cfg: ExperimentConfig, args) -> list[str]:
    from .multiscale import check_scale_conditions

    out = _outputs(cfg)
    rep = check_scale_conditions(cfg.kappa, cfg.d)
    emb = {"kappa": cfg.kappa, "d": cfg.d}
    with LongCSV(out / "scales.csv", emb) as t:
        for k in ("A1", "A2", "A3"):
            t.row(k, rep[k], params={"bound": rep[k + "_bound"]})
            t.row(k + "_pass", int(rep[k + "_pass"]))
        t.row("A2_tail", rep["A2_tail"])
        t.row("A3_tail", rep["A3_tail"])
        t.row("all_pass", int(rep["all_pass"]))
    print(json.dumps(rep, sort_keys=True))
    return ["scales.csv"]


COMMANDS = {"gen": cmd_gen, "sync": cmd_sync, "sweep": cmd_sweep, "diag": cmd_diag, "check-scales": cmd_check_scales}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    flags = {k: getattr(args, k) for k in FLAG_TYPES}
    try:
        cfg = load_config(args.config, flags)
        cfg.goe = bool(getattr(args, "goe", False))
        if args.command != "check-scales":
            cfg.validate(args.command)
        else:
            if cfg.kappa < 1:
                raise ConfigError("kappa", "must be >= 1", cfg.kappa)
            if cfg.d < 2:
                raise ConfigError("d", "must be an integer >= 2", cfg.d)
        outputs = COMMANDS[args.command](cfg, args)
    except ConfigError as err:
        print(json.dumps(err.to_dict(), default=str), file=sys.stderr)
        return 2
    except (ValueError, KeyError) as err:
        print(json.dumps({"error": str(err), "parameter": None}), file=sys.stderr)
        return 1
    emb = cfg.embedded()
    write_manifest(Path(cfg.out_dir) / f"manifest_{args.command}.json", emb, outputs,
                   {"command": args.command})
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
