"""Command-line entry point: ``qsa <command> ...``."""

from __future__ import annotations

import argparse
import json
import secrets
import sys
from pathlib import Path

from . import adversary, compile as comp, extract, protocol, qsim
from .errors import QSAError
from .rng import stream


def _master(args) -> bytes:
    if getattr(args, "master", None):
        raw = bytes.fromhex(args.master)
        if len(raw) < 32:
            raise QSAError("master secret must be at least 32 bytes of hex")
        return raw
    return protocol.default_master(args.seed)


def _compiler_config(args) -> comp.CompilerConfig:
    spsa = comp.SPSAConfig(steps=args.steps, restarts=args.restarts, a=args.gain)
    return comp.CompilerConfig(delta=args.delta, layers=args.layers, spsa=spsa, seed=args.seed)


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def cmd_compile(args) -> int:
    master = _master(args)
    cfg = _compiler_config(args)
    if args.kind == "symmetric":
        plant = comp.plant_for_index(master, args.index, args.n, args.plant_depth)
        ch = comp.compile_symmetric(plant, args.n, cfg)
    elif args.kind == "asymmetric":
        plant = comp.plant_for_index(master, args.index, args.n, args.plant_depth)
        ch = comp.compile_asymmetric(plant, args.n, cfg)
    elif args.kind == "multiparty":
        plants = [comp.plant_for_index(master, args.index + p, args.n, args.plant_depth) for p in range(args.parties)]
        ch = comp.compile_multiparty(plants, args.n, cfg)
    else:
        if args.n % args.blocksize:
            raise QSAError("n must be a multiple of the block size")
        blocks = args.n // args.blocksize
        plant = comp.product_plant(master, args.index, args.blocksize, blocks, args.plant_depth)
        ch = comp.compile_blockwise(plant, args.n, args.blocksize, cfg)
    text = comp.bundle_json(ch.public, args.m, args.index)
    _emit(text, args.out)
    if args.witness:
        Path(args.witness).write_text(json.dumps(ch.witness(), sort_keys=True))
    print(json.dumps({"digest": comp.circuit_digest(ch.public).hex(), "delta_hat": ch.delta_hat, "status": ch.status}), file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    public, meta = comp.read_bundle(Path(args.bundle).read_text())
    master = _master(args)
    psi = comp.plant_state(comp.plant_for_index(master, int(meta["index"]), public.n, args.plant_depth))
    noise = qsim.NoiseModel(p2=args.p2, readout=args.readout) if args.p2 > 0 else None
    shots = args.shots if args.shots > 0 else None
    cfg = extract.EvalConfig(shots=shots, noise=noise, seed=args.seed, trajectories=args.trajectories)
    f = extract.evaluate_one(public, psi, args.regime, args.m or int(meta["m"]), cfg)
    print(json.dumps({"theta": f.theta_hat, "bucket": f.bucket, "m": f.m, "low_signal": f.low_signal}))
    return 0


def cmd_attack(args) -> int:
    rng = stream(args.seed, f"attack-{args.kind}")
    if args.kind == "chained":
        master = _master(args)
        cfg = _compiler_config(args)
        chs = [
            comp.compile_symmetric(comp.plant_for_index(master, i, args.n, args.plant_depth), args.n, cfg)
            for i in range(args.k)
        ]
        report = adversary.chained_qpe_attack(chs, args.m, args.trials, rng)
        print(json.dumps(report.to_dict(), sort_keys=True))
    elif args.kind == "guess":
        f = adversary.default_fidelity_grid()
        curve = adversary.p_u_curve(args.n, args.m, f, args.trials, rng)
        res = adversary.state_guess_success(args.n, args.m, args.k, args.trials, rng, f, curve)
        print(json.dumps({"p_success": res.p_success, "min_entropy": res.min_entropy,
                          "k_for_256": adversary.min_key_count(f, curve, args.n)}))
    else:
        u = qsim.haar_from_rng(2**args.n, rng)
        hist = adversary.bin_mass_histogram(u, qsim.haar_state(2**args.n, rng), 2**args.m)
        print("bin,mass")
        for i, p in enumerate(hist):
            print(f"{i},{p:.6g}")
    return 0


def cmd_sweep(args) -> int:
    master = _master(args)
    cfg = _compiler_config(args)
    instances = []
    for r in range(args.reps):
        plant = comp.plant_for_index(master, r, args.n, args.plant_depth)
        ch = comp.compile_symmetric(plant, args.n, cfg)
        instances.append((ch, comp.plant_state(plant), extract.quantize_phase(ch.phase(), args.m)))
    grid = [float(x) for x in args.p2_grid.split(",")]
    rows = extract.noise_sweep(instances, grid, args.m, args.shots, args.seed, args.trajectories, args.readout)
    _emit(extract.sweep_csv(rows), args.out)
    return 0


def cmd_cost(args) -> int:
    params = adversary.CostModelParams()
    if args.kind == "quantum-eve":
        s = adversary.quantum_eve_cost(args.n, params)
    elif args.kind == "classical-eve":
        s = adversary.classical_eve_cost(args.n, params)
    elif args.kind == "honest":
        s = adversary.honest_classical_cost(args.n, params)
    elif args.kind == "memory":
        dense, sv = adversary.memory_cutoffs(args.ram, args.m)
        print(f"dense_evd_max_n={dense} state_vector_max_n={sv}")
        return 0
    elif args.kind == "bell":
        print(adversary.bell_budget(args.shots, args.n, args.m, args.k))
        return 0
    else:
        print(f"{adversary.survival_budget(args.gates, args.target):.4g}")
        return 0
    print(f"{s:.4g} s = {s / adversary.YEAR_SECONDS:.4g} years")
    return 0


def cmd_keygen(args) -> int:
    print(protocol.default_master(args.seed).hex() if args.deterministic else secrets.token_hex(32))
    return 0


def _schedule(args) -> protocol.Schedule:
    return protocol.compile_schedule(_master(args), args.n, args.m, args.k, args.plant_depth, _compiler_config(args), args.schedule_id)


def cmd_serve(args) -> int:
    schedule = _schedule(args)

    def report(outcome: protocol.SessionOutcome) -> None:
        print(json.dumps({"accepted": outcome.accepted, "reason": outcome.reason}), flush=True)
        if args.log:
            with open(args.log, "a") as fh:
                fh.write(outcome.log_lines())

    with protocol.VerifierServer((args.host, args.port), schedule, report) as server:
        print(f"listening on {server.server_address[0]}:{server.server_address[1]}", flush=True)
        if args.sessions:
            for _ in range(args.sessions):
                server.handle_request()
            # handlers run on daemon threads; let them finish before exiting
            server.wait_for(args.sessions)
        else:
            server.serve_forever()
    return 0


def cmd_connect(args) -> int:
    noise = qsim.NoiseModel(p2=args.p2, readout=args.readout) if args.p2 > 0 else None
    shots = args.shots if args.shots > 0 else None
    cfg = protocol.ProverConfig(args.regime, extract.EvalConfig(shots=shots, noise=noise, seed=args.seed, trajectories=args.trajectories))
    outcome = protocol.connect(args.host, args.port, _master(args), cfg)
    print(json.dumps({"accepted": outcome.accepted, "reason": outcome.reason}))
    return 0 if outcome.accepted else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qsa", description="Spectral authentication simulator")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, compile_flags=False):
        sp.add_argument("--seed", default="0")
        sp.add_argument("--master", help="hex master secret; derived from --seed when absent")
        sp.add_argument("--n", "-n", type=int, default=4)
        sp.add_argument("--m", "-m", type=int, default=4)
        sp.add_argument("--plant-depth", type=int, default=2)
        if compile_flags:
            sp.add_argument("--delta", type=float, default=0.1)
            sp.add_argument("--layers", type=int, default=4)
            sp.add_argument("--steps", type=int, default=2000)
            sp.add_argument("--restarts", type=int, default=1)
            sp.add_argument("--gain", type=float, default=4.0, help="SPSA step gain")

    def noisy(sp):
        sp.add_argument("--shots", type=int, default=0, help="0 selects exact probabilities")
        sp.add_argument("--p2", type=float, default=0.0)
        sp.add_argument("--readout", type=float, default=0.01)
        sp.add_argument("--trajectories", type=int, default=None)

    sp = sub.add_parser("compile")
    sp.add_argument("kind", choices=["symmetric", "asymmetric", "multiparty", "blockwise"])
    common(sp, True)
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--parties", type=int, default=2)
    sp.add_argument("--blocksize", "-blocksize", type=int, default=4)
    sp.add_argument("--out")
    sp.add_argument("--witness")
    sp.set_defaults(func=cmd_compile)

    sp = sub.add_parser("eval")
    sp.add_argument("bundle")
    common(sp)
    sp.set_defaults(m=None)
    sp.add_argument("--regime", choices=["M", "C", "Q"], default="Q")
    noisy(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("attack")
    sp.add_argument("kind", choices=["chained", "guess", "binmass"])
    common(sp, True)
    sp.add_argument("--k", type=int, default=2)
    sp.add_argument("--trials", type=int, default=1000)
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("sweep")
    common(sp, True)
    sp.add_argument("--reps", type=int, default=20)
    sp.add_argument("--shots", type=int, default=4000)
    sp.add_argument("--trajectories", type=int, default=512)
    sp.add_argument("--readout", type=float, default=0.01)
    sp.add_argument("--p2-grid", default="0.0001,0.001,0.005,0.01,0.02")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("cost")
    sp.add_argument("kind", choices=["quantum-eve", "classical-eve", "honest", "memory", "bell", "survival"])
    sp.add_argument("--n", type=int, default=27)
    sp.add_argument("--m", type=int, default=2)
    sp.add_argument("--k", type=int, default=36)
    sp.add_argument("--shots", type=int, default=110)
    sp.add_argument("--ram", type=float, default=4.85 * adversary.PIB)
    sp.add_argument("--gates", type=int, default=555)
    sp.add_argument("--target", type=float, default=0.95)
    sp.set_defaults(func=cmd_cost)

    sp = sub.add_parser("keygen")
    sp.add_argument("--seed", default="0")
    sp.add_argument("--deterministic", action="store_true", help="derive from --seed instead of the OS")
    sp.set_defaults(func=cmd_keygen)

    for name, func in (("serve", cmd_serve), ("connect", cmd_connect)):
        sp = sub.add_parser(name)
        common(sp, name == "serve")
        sp.add_argument("--host", default="127.0.0.1")
        sp.add_argument("--port", type=int, default=7878)
        if name == "serve":
            sp.add_argument("--k", type=int, default=10)
            sp.add_argument("--schedule-id", default="default")
            sp.add_argument("--sessions", type=int, default=0, help="stop after this many; 0 serves forever")
            sp.add_argument("--log", help="append session logs as JSON lines")
        else:
            sp.add_argument("--regime", choices=["M", "C", "Q"], default="Q")
            noisy(sp)
        sp.set_defaults(func=func)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (QSAError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
