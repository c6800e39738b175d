"""``msim`` command-line entry point.

Exit codes: 0 success, 1 a verification check failed, 2 usage error, 3 runtime
or I/O failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _apply_thread_cap() -> None:
    # must run before numpy is first imported to take effect
    cap = os.environ.get("MSIM_THREADS")
    if cap:
        if not cap.isdigit() or int(cap) < 1:
            raise SystemExit(f"msim: MSIM_THREADS must be a positive integer, got {cap!r}")
        for var in _THREAD_VARS:
            os.environ[var] = cap


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msim", description="Momentum-conserving mesh simulation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a training dataset")
    g.add_argument("--kind", choices=("shell", "solid", "pinned"), required=True)
    g.add_argument("--count", type=int, required=True, help="number of scenes")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--size", type=int, nargs=2, metavar=("MIN", "MAX"),
                   help="vertices per side (default 4 8 shells, 2 4 solids)")
    g.add_argument("--steps", type=int, default=30, help="reference steps per scene")

    t = sub.add_parser("train", help="self-supervised training")
    t.add_argument("--data", required=True)
    t.add_argument("--pinned-data", help="optional pinned-cloth dataset mixed 50/50")
    t.add_argument("--epochs", type=int, default=1)
    t.add_argument("--steps", type=int, help="optimizer steps (overrides --epochs)")
    t.add_argument("--lr", type=float, default=1e-5)
    t.add_argument("--layers", type=int, default=4)
    t.add_argument("--latent", type=int, default=128)
    t.add_argument("--batch-size", type=int, default=4)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--impulse-scale", type=float, default=0.05)
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--baseline", action="store_true", help="train the per-vertex baseline")
    t.add_argument("--resume", action="store_true", help="continue from --ckpt")
    t.add_argument("--ckpt", required=True)

    r = sub.add_parser("rollout", help="roll out a scene")
    r.add_argument("--model", required=True,
                   help="checkpoint path, 'reference', 'baseline:PATH' or 'baseline:random'")
    r.add_argument("--scene", required=True)
    r.add_argument("--steps", type=int, required=True)
    r.add_argument("--diag", help="CSV diagnostics output")
    r.add_argument("--traj", help="binary state stream output")
    r.add_argument("--fd-velocity", action="store_true",
                   help="feed finite-difference velocities instead of projected ones")
    r.add_argument("--seed", type=int, default=0, help="seed for baseline:random")

    v = sub.add_parser("verify", help="run property suites")
    v.add_argument("suites", nargs="+",
                   choices=("basis-rank", "gradients", "conservation", "projection", "all"))

    d = sub.add_parser("diag", help="export diagnostics for a saved trajectory")
    d.add_argument("--traj", required=True)
    d.add_argument("--mesh", required=True)
    d.add_argument("--out", required=True)
    return p


def _gen_data(args) -> int:
    from msim.harness.data import (DataRanges, gen_dataset, gen_pinned_dataset, ranges_dict,
                                   save_dataset)

    kw = {"steps": args.steps}
    if args.size:
        kw["solid_size" if args.kind == "solid" else "shell_size"] = tuple(args.size)
    ranges = DataRanges(**kw)
    if args.kind == "pinned":
        samples = gen_pinned_dataset(args.count, args.seed, ranges)
    else:
        samples = gen_dataset(args.kind, args.count, args.seed, ranges)
    save_dataset(samples, args.out, {"kind": args.kind, "seed": args.seed,
                                     "ranges": ranges_dict(ranges)})
    print(f"wrote {len(samples)} samples from {args.count} scenes to {args.out}")
    return 0


def _train(args) -> int:
    from msim.harness.data import load_dataset
    from msim.harness.train import TrainConfig, fit_normalizer, resume, steps_per_epoch, train
    from msim.momentum_gnn import BaselineGNN, ModelConfig, MomentumGNN

    data = load_dataset(args.data)
    pinned = load_dataset(args.pinned_data) if args.pinned_data else None
    if not data:
        print("msim: dataset is empty", file=sys.stderr)
        return 3
    if args.resume:
        model, opt, cfg, start = resume(args.ckpt)
        if args.steps is not None:
            cfg.steps = args.steps
    else:
        kind = data[0].mesh.kind
        mcfg = ModelConfig(kind=kind, layers=args.layers, latent=args.latent, hidden=args.latent,
                           impulse_scale=args.impulse_scale, seed=args.seed)
        model = (BaselineGNN if args.baseline else MomentumGNN)(mcfg)
        fit_normalizer(model, data + (pinned or []))
        steps = args.steps if args.steps is not None else \
            args.epochs * steps_per_epoch(len(data), args.batch_size)
        cfg = TrainConfig(steps=steps, lr=args.lr, batch_size=args.batch_size, seed=args.seed,
                          checkpoint_every=args.checkpoint_every)
        opt, start = None, 0
    result, _ = train(model, data, cfg, pinned, opt, start, args.ckpt)
    for k, m in enumerate(result.epoch_means):
        print(f"epoch {k + 1} mean loss {m:.6g}")
    print(f"trained to step {max(result.steps_done, start)}; checkpoint {args.ckpt}")
    return 0


def _rollout(args) -> int:
    from msim import meshio
    from msim.harness.rollout import load_scene, rollout
    from msim.momentum_gnn import BaselineGNN, ModelConfig, load_model
    from msim.trajectory import diag_export

    scene = load_scene(args.scene)
    if args.model == "reference":
        model = None
    elif args.model.startswith("baseline:"):
        src = args.model.split(":", 1)[1]
        if src == "random":
            model = BaselineGNN(ModelConfig(kind=scene.mesh.kind, zero_decoders=False,
                                            seed=args.seed))
        else:
            model = load_model(src)[0]
            if not isinstance(model, BaselineGNN):
                print(f"msim: {src} is not a baseline checkpoint", file=sys.stderr)
                return 3
    else:
        model = load_model(args.model)[0]
    traj = rollout(scene, args.steps, model, project=False if args.fd_velocity else None)
    if args.diag:
        diag_export(traj, args.diag)
    if args.traj:
        meshio.save_state_stream(traj.states, args.traj)
    p, L = traj.momenta
    print(f"{traj.provenance} rollout: {args.steps} steps, final |p| {abs(p[-1]).max():.3e}, "
          f"|L| {abs(L[-1]).max():.3e}")
    return 0


def _verify(args) -> int:
    from msim.harness.verify import SUITES

    names = list(SUITES) if "all" in args.suites else list(dict.fromkeys(args.suites))
    ok = True
    for name in names:
        print(f"[{name}]")
        for check in SUITES[name]():
            print("  " + check.line())
            ok &= check.passed
    return 0 if ok else 1


def _diag(args) -> int:
    from msim import meshio
    from msim.trajectory import diag_export

    mesh = meshio.load_mesh(args.mesh)
    states = meshio.load_state_stream(args.traj)
    for s in states:
        mesh.validate_state(s)
    diag_export(None, args.out, mesh=mesh, states=states)
    print(f"wrote {len(states)} rows to {args.out}")
    return 0


_COMMANDS = {"gen-data": _gen_data, "train": _train, "rollout": _rollout, "verify": _verify,
             "diag": _diag}


def main(argv=None) -> int:
    _apply_thread_cap()
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (OSError, ValueError, RuntimeError, KeyError, FloatingPointError) as exc:
        print(f"msim {args.command}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
