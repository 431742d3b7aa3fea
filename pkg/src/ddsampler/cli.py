"""Operator entry point.

Subcommands: ``train`` (Algorithm-1 sampler training), ``bridge`` (IPF),
``eval`` (metric report for a checkpoint), ``mcmc`` (learning-free baseline
chains), and ``serve-fixture-check`` (wire-protocol fidelity sweep against
an external energy server). Every run writes a self-describing directory:
resolved config, CSV logs, checkpoints, PPM plots and a manifest with
content hashes. Exit codes: 0 ok, 2 config error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, config as cfgmod, ppm
from .bridge import ipf_run
from .diffusion import MaskedKernel
from .errors import ConfigError, SamplerError
from .metrics import (
    EvalConfig,
    SampleSet,
    correlation_error,
    elbo,
    eubo,
    forward_terminal_samples,
    magnetisation_error,
    mmd,
    sinkhorn,
    tv_to_oracle,
)
from .mcmc import make_step_fn, run_chains
from .nn import PolicyNet
from .rpc import EnergySession, RemoteTarget
from .targets import ENUMERATION_LIMIT, EnumerationOracle, GrayCodeTarget, LatticeTarget
from .training import run as train_run, save_run_state

METRIC_COLUMNS = [
    "epoch", "loss", "c", "beta", "on_policy",
    "elbo", "elbo_se", "eubo", "eubo_se", "tv", "log_z",
]


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def _write_manifest(run_dir: Path, cfg: dict, overrides: dict, started: str) -> None:
    files = {
        p.name: _sha256(p)
        for p in sorted(run_dir.iterdir())
        if p.is_file() and p.name != "manifest.json"
    }
    manifest = {
        "config": cfg,
        "overrides": overrides,
        "version": __version__,
        "started": started,
        "finished": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "files": files,
    }
    tmp = run_dir / "manifest.json.tmp"
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, run_dir / "manifest.json")


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _resolve_config(args) -> tuple:
    if args.preset:
        cfg = cfgmod.get_preset(args.preset)
    elif args.config:
        cfg = cfgmod.load_config(args.config)
    else:
        raise ConfigError("either --config or --preset is required")
    overrides = {}
    if getattr(args, "epochs", None) is not None:
        cfg.setdefault("train", {})["epochs"] = args.epochs
        overrides["epochs"] = args.epochs
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
        overrides["seed"] = args.seed
    if getattr(args, "energy_cmd", None):
        cfg.setdefault("energy_rpc", {})["cmd"] = args.energy_cmd
        overrides["energy_cmd"] = args.energy_cmd
    if getattr(args, "energy_addr", None):
        cfg.setdefault("energy_rpc", {})["addr"] = args.energy_addr
        overrides["energy_addr"] = args.energy_addr
    return cfg, overrides


def _open_session(cfg: dict):
    rpc = cfg.get("energy_rpc") or {}
    if rpc.get("cmd"):
        return EnergySession.connect_command(rpc["cmd"])
    if rpc.get("addr"):
        return EnergySession.connect_tcp(rpc["addr"])
    return None


def _build_target(cfg: dict, session=None):
    if session is not None:
        return RemoteTarget(session, name="remote:" + cfg["target"].get("name", "?"))
    return cfgmod.build_target(cfg["target"])


def _maybe_oracle(target, limit=1 << 14):
    if target.spec.C ** target.spec.d <= min(limit, ENUMERATION_LIMIT):
        return EnumerationOracle(target)
    return None


def _config_step_fn(tcfg, target, cfg: dict):
    """Exploration kernel bound to the config's declared target structure.

    Lattice structure comes from the config block so Swendsen-Wang works
    even when the energy itself is served remotely.
    """
    if not tcfg.mcmc_explore:
        return None
    from .targets import LatticeParams

    block = cfg["target"]
    lattice = None
    if block.get("name") == "ising":
        lattice = LatticeParams.ising(block["L"], block["beta"])
    elif block.get("name") == "potts":
        lattice = LatticeParams.potts(block["L"], block["q"], block["beta"], block.get("J", 1.0))
    return make_step_fn(
        tcfg.mcmc_kind, target, H=tcfg.mcmc_h, stay_prob=tcfg.mcmc_stay_prob,
        lattice=lattice,
    )


def _write_metric_csv(path: Path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for rec in history:
            writer.writerow({k: rec.get(k, "") for k in METRIC_COLUMNS})


def _dump_samples(path: Path, samples: np.ndarray) -> None:
    with open(path, "w") as fh:
        for row in samples:
            fh.write(" ".join(map(str, row)) + "\n")


def _emit_sample_plots(run_dir: Path, target, samples: np.ndarray) -> None:
    plots = run_dir / "plots"
    plots.mkdir(exist_ok=True)
    if isinstance(target, LatticeTarget):
        img = ppm.lattice_grid_image(samples[:16], target.params.L, target.params.q)
        ppm.write_ppm(plots / "samples.ppm", img)
    elif isinstance(target, GrayCodeTarget) and target.cfg.D == 2:
        pts = target.decode(samples)
        ppm.write_ppm(
            plots / "samples.ppm", ppm.histogram2d_image(pts, bounds=target.cfg.R)
        )


def cmd_train(args) -> int:
    cfg, overrides = _resolve_config(args)
    errors = cfgmod.validate_config(cfg)
    if errors or "train" not in cfg:
        for e in errors or ["config has no train block"]:
            print(f"config error: {e}", file=sys.stderr)
        return 2
    started = _now()
    run_dir = Path(args.out or f"runs/train-{cfg.get('seed', 0)}")
    run_dir.mkdir(parents=True, exist_ok=True)
    cfgmod.dump_config(cfg, run_dir / "config.json")

    session = _open_session(cfg)
    try:
        target = _build_target(cfg, session)
        kernel = cfgmod.build_kernel(cfg["kernel"], target.spec)
        tcfg = cfgmod.build_train_config(cfg)
        hidden = cfg.get("net", {}).get("hidden", [128, 128])
        state = train_run(
            tcfg,
            target,
            kernel,
            hidden=tuple(hidden),
            step_fn=_config_step_fn(tcfg, target, cfg),
            diag_path=run_dir / "abort_state.pkl",
            progress=(lambda rec: print(
                f"epoch {rec['epoch']} loss {rec['loss']:.6f}"
                + (f" elbo {rec['elbo']:.4f}" if "elbo" in rec else "")
            )) if args.verbose else None,
        )
        _write_metric_csv(run_dir / "metrics.csv", state.history)
        state.net.save(run_dir / "params.ckpt")
        save_run_state(state, run_dir / "run_state.pkl")
        eval_kernel = kernel.retimed() if isinstance(kernel, MaskedKernel) else kernel
        rng = np.random.default_rng([tcfg.seed, 424243])
        samples = forward_terminal_samples(state.net, eval_kernel, 2048, rng)
        _dump_samples(run_dir / "samples.txt", samples)
        _emit_sample_plots(run_dir, target, samples)
    except SamplerError as exc:
        print(f"runtime abort: {exc}", file=sys.stderr)
        return 3
    finally:
        if session is not None:
            session.close()
    _write_manifest(run_dir, cfg, overrides, started)
    print(f"run directory: {run_dir}")
    return 0


def cmd_bridge(args) -> int:
    cfg, overrides = _resolve_config(args)
    errors = cfgmod.validate_config(cfg)
    if errors or "bridge" not in cfg:
        for e in errors or ["config has no bridge block"]:
            print(f"config error: {e}", file=sys.stderr)
        return 2
    started = _now()
    run_dir = Path(args.out or f"runs/bridge-{cfg.get('seed', 0)}")
    run_dir.mkdir(parents=True, exist_ok=True)
    cfgmod.dump_config(cfg, run_dir / "config.json")
    try:
        target = cfgmod.build_target(cfg["target"])
        kernel = cfgmod.build_kernel(cfg["kernel"], target.spec)
        bcfg = cfgmod.build_bridge_config(cfg)
        gray = target.cfg if isinstance(target, GrayCodeTarget) else None
        p0 = cfgmod.build_p0_sampler(cfg["bridge"]["p0"], target.spec, gray)
        oracle = _maybe_oracle(target, limit=4096)
        p0_exact = None
        if oracle is not None:
            rng0 = np.random.default_rng([bcfg.seed, 5])
            draws = p0(20000, rng0)
            p0_exact = oracle.empirical_distribution(draws)
        pair, diags = ipf_run(bcfg, p0, target, kernel, oracle=oracle, p0_exact=p0_exact)

        with open(run_dir / "diagnostics.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["iteration", "backward_loss", "forward_loss", "tv_forward_terminal", "tv_backward_initial"]
            )
            for dg in diags:
                writer.writerow(
                    [
                        dg.iteration,
                        dg.backward_losses[-1] if dg.backward_losses else "",
                        dg.forward_losses[-1] if dg.forward_losses else "",
                        "" if dg.tv_forward_terminal is None else dg.tv_forward_terminal,
                        "" if dg.tv_backward_initial is None else dg.tv_backward_initial,
                    ]
                )
        if pair.fwd_net is not None:
            pair.fwd_net.save(run_dir / "forward.ckpt")
        pair.bwd_net.save(run_dir / "backward.ckpt")
        _emit_bridge_plots(run_dir, pair, target, cfg)
    except SamplerError as exc:
        print(f"runtime abort: {exc}", file=sys.stderr)
        return 3
    _write_manifest(run_dir, cfg, overrides, started)
    print(f"run directory: {run_dir}")
    return 0


def _emit_bridge_plots(run_dir: Path, pair, target, cfg: dict) -> None:
    """Per-step marginal heatmaps of the learned forward process."""
    if not isinstance(target, GrayCodeTarget) or target.cfg.D > 2:
        return
    plots = run_dir / "plots"
    plots.mkdir(exist_ok=True)
    rng = np.random.default_rng([cfg.get("seed", 0), 99991])
    gray = target.cfg
    kernel = pair.kernel
    p0 = cfgmod.build_p0_sampler(cfg["bridge"]["p0"], target.spec, gray)
    x0 = p0(4096, rng)
    traj = pair.rollout_forward_from(x0, rng)
    if gray.D == 1:
        bins = 1 << gray.b
        hist = np.zeros((traj.states.shape[0], bins))
        for n in range(traj.states.shape[0]):
            ks = ((gray.decode(traj.states[n] - 1) + gray.R) / (2 * gray.R) * bins).astype(int)
            hist[n] = np.bincount(np.clip(ks[:, 0], 0, bins - 1), minlength=bins)
        ppm.write_ppm(plots / "marginals.ppm", ppm.marginal_strip_image(hist))
    else:
        for n in range(traj.states.shape[0]):
            pts = gray.decode(traj.states[n] - 1)
            ppm.write_ppm(
                plots / f"step_{n:03d}.ppm",
                ppm.histogram2d_image(pts, bounds=gray.R, bins=1 << min(gray.b, 6)),
            )


def cmd_eval(args) -> int:
    try:
        cfg = cfgmod.load_config(args.config)
        cfgmod.require_valid(cfg)
        net = PolicyNet.load(args.checkpoint)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        session = _open_session(cfg)
        target = _build_target(cfg, session)
        kernel = cfgmod.build_kernel(cfg["kernel"], target.spec)
        from .diffusion import policy_input_dim, policy_output_dim

        if net.in_dim != policy_input_dim(kernel.spec) or net.out_dim != policy_output_dim(kernel.spec):
            print(
                f"config error: checkpoint dims ({net.in_dim}->{net.out_dim}) do not match "
                f"target space (expected {policy_input_dim(kernel.spec)}->{policy_output_dim(kernel.spec)})",
                file=sys.stderr,
            )
            return 2
        rows = evaluation_report(net, kernel, target, cfg)
    except SamplerError as exc:
        print(f"runtime abort: {exc}", file=sys.stderr)
        return 3
    out = Path(args.out or "eval_report.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value", "se_or_flag"])
        for row in rows:
            writer.writerow(row)
    print(f"report: {out}")
    return 0


def evaluation_report(net: PolicyNet, kernel, target, cfg: dict):
    """All applicable metrics for one checkpoint (deterministic given seed)."""
    ecfg_block = cfg.get("eval", {})
    ecfg = EvalConfig(
        m_eval=ecfg_block.get("m_eval", 2048),
        sinkhorn_eps=ecfg_block.get("sinkhorn_eps", 1e-3),
        sinkhorn_metric=ecfg_block.get("sinkhorn_metric", "hamming"),
        sinkhorn_max_iter=ecfg_block.get("sinkhorn_max_iter", 5000),
    )
    rng = np.random.default_rng([cfg.get("seed", 0), 31337])
    eval_kernel = kernel.retimed() if isinstance(kernel, MaskedKernel) else kernel
    rows = []
    value, se = elbo(net, eval_kernel, target, ecfg.m_eval, rng)
    rows.append(["elbo", f"{value:.10g}", f"{se:.10g}"])
    oracle = _maybe_oracle(target)
    samples = forward_terminal_samples(net, eval_kernel, ecfg.m_eval, rng)
    true_samples = None
    if oracle is not None:
        rows.append(["log_z_exact", f"{oracle.log_z:.10g}", ""])
        rows.append(["tv", f"{tv_to_oracle(samples, oracle):.10g}", ""])
        true_samples = oracle.sample(ecfg.m_eval, rng)
        ub, ub_se = eubo(net, eval_kernel, target, true_samples, rng)
        rows.append(["eubo", f"{ub:.10g}", f"{ub_se:.10g}"])
    if true_samples is not None:
        decoded = target.decode(samples) if isinstance(target, GrayCodeTarget) else None
        decoded_true = (
            target.decode(true_samples) if isinstance(target, GrayCodeTarget) else None
        )
        res = sinkhorn(
            SampleSet(samples, decoded), SampleSet(true_samples, decoded_true), ecfg,
            C=target.spec.C,
        )
        rows.append(
            ["sinkhorn", f"{res.value:.10g}", "converged" if res.converged else "max-iter"]
        )
        if decoded is not None:
            rows.append(["mmd", f"{mmd(decoded, decoded_true):.10g}", ""])
        if isinstance(target, LatticeTarget):
            kind = "ising" if target.params.q == 2 else "potts"
            rows.append(
                ["magnetisation_error",
                 f"{magnetisation_error(samples, true_samples, target.params, kind):.10g}", ""]
            )
            rows.append(
                ["correlation_error",
                 f"{correlation_error(samples, true_samples, target.params, kind):.10g}", ""]
            )
    return rows


def cmd_mcmc(args) -> int:
    cfg, overrides = _resolve_config(args)
    errors = cfgmod.validate_config(cfg)
    if errors or "mcmc_baseline" not in cfg:
        for e in errors or ["config has no mcmc_baseline block"]:
            print(f"config error: {e}", file=sys.stderr)
        return 2
    started = _now()
    run_dir = Path(args.out or f"runs/mcmc-{cfg.get('seed', 0)}")
    run_dir.mkdir(parents=True, exist_ok=True)
    cfgmod.dump_config(cfg, run_dir / "config.json")
    try:
        target = cfgmod.build_target(cfg["target"])
        b = cfg["mcmc_baseline"]
        if b["kernel"] == "sw" and not isinstance(target, LatticeTarget):
            print("config error: Swendsen-Wang requires a lattice target", file=sys.stderr)
            return 2
        lattice = target.params if isinstance(target, LatticeTarget) else None
        step_fn = make_step_fn(
            b["kernel"], target, H=b.get("H", 1), stay_prob=b.get("stay_prob", 0.9),
            lattice=lattice,
        )
        rng = np.random.default_rng(cfg.get("seed", 0))
        init = rng.integers(1, target.spec.C + 1, size=(b.get("chains", 128), target.spec.d))
        samples = run_chains(
            init, step_fn, b.get("burn_in", 2000), b.get("samples_per_chain", 128),
            b.get("thinning", 200), rng,
        )
        _dump_samples(run_dir / "samples.txt", samples)
        _emit_sample_plots(run_dir, target, samples)
        rows = [["n_samples", str(samples.shape[0]), ""]]
        oracle = _maybe_oracle(target)
        if oracle is not None:
            rows.append(["log_z_exact", f"{oracle.log_z:.10g}", ""])
            rows.append(["tv", f"{tv_to_oracle(samples, oracle):.10g}", ""])
        with open(run_dir / "report.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value", "se_or_flag"])
            writer.writerows(rows)
    except SamplerError as exc:
        print(f"runtime abort: {exc}", file=sys.stderr)
        return 3
    _write_manifest(run_dir, cfg, overrides, started)
    print(f"run directory: {run_dir}")
    return 0


def cmd_serve_fixture_check(args) -> int:
    try:
        cfg = cfgmod.load_config(args.config)
        if "target" not in cfg:
            raise ConfigError("config needs a target block")
        local = cfgmod.build_target(cfg["target"])
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.energy_cmd:
            session = EnergySession.connect_command(args.energy_cmd)
        elif args.energy_addr:
            session = EnergySession.connect_tcp(args.energy_addr)
        else:
            print("config error: --energy-cmd or --energy-addr required", file=sys.stderr)
            return 2
        with session:
            remote = RemoteTarget(session)
            if (remote.spec.d, remote.spec.C) != (local.spec.d, local.spec.C):
                print(
                    f"runtime abort: server advertises d={remote.spec.d}, C={remote.spec.C}; "
                    f"local target has d={local.spec.d}, C={local.spec.C}",
                    file=sys.stderr,
                )
                return 3
            rng = np.random.default_rng(args.seed or 0)
            states = rng.integers(1, local.spec.C + 1, size=(args.sweep, local.spec.d))
            diff = np.abs(remote.energy(states) - local.energy(states)).max()
        print(f"max abs difference over {args.sweep} states: {diff:.3e}")
        return 0 if diff <= 1e-12 else 3
    except SamplerError as exc:
        print(f"runtime abort: {exc}", file=sys.stderr)
        return 3


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ddsampler", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, with_energy=True):
        p.add_argument("--config", help="path to a JSON experiment config")
        p.add_argument("--preset", help="named preset configuration")
        p.add_argument("--out", help="run directory")
        p.add_argument("--seed", type=int)
        if with_energy:
            p.add_argument("--energy-cmd", help="external energy server command")
            p.add_argument("--energy-addr", help="external energy server host:port")

    p_train = sub.add_parser("train", help="train a diffusion sampler")
    add_common(p_train)
    p_train.add_argument("--epochs", type=int, help="override train.epochs")
    p_train.add_argument("--verbose", action="store_true")
    p_train.set_defaults(fn=cmd_train)

    p_bridge = sub.add_parser("bridge", help="train a data-to-energy bridge")
    add_common(p_bridge, with_energy=False)
    p_bridge.set_defaults(fn=cmd_bridge)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--out")
    p_eval.add_argument("--energy-cmd")
    p_eval.add_argument("--energy-addr")
    p_eval.set_defaults(fn=cmd_eval)

    p_mcmc = sub.add_parser("mcmc", help="run baseline MCMC chains")
    add_common(p_mcmc, with_energy=False)
    p_mcmc.set_defaults(fn=cmd_mcmc)

    p_check = sub.add_parser(
        "serve-fixture-check", help="sweep an energy server against the local fixture"
    )
    p_check.add_argument("--config", required=True)
    p_check.add_argument("--energy-cmd")
    p_check.add_argument("--energy-addr")
    p_check.add_argument("--sweep", type=int, default=10000)
    p_check.add_argument("--seed", type=int, default=0)
    p_check.set_defaults(fn=cmd_serve_fixture_check)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
