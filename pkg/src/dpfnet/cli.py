"""Command line: gen-data, train, sample, autoencode, eval, interpolate.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import geometry, io, metrics
from .core import Rng
from .errors import DPFError, NumericError, ParameterError
from .model import DPFNet
from .train import TrainState, format_progress, train

log = logging.getLogger("dpfnet")

TRACE_DEFAULT = "0,32,48,56,60,62,63"


def _threads():
    n = os.environ.get("DPF_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(n)))


def _config_from(args) -> io.Config:
    cfg = io.load_config(args.config) if getattr(args, "config", None) else io.Config()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ParameterError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for key in ("epochs", "seed", "latent_dim", "points", "batch_size", "data_dir", "family",
                "count", "point_layers"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    return cfg.update(overrides)


def _write_config_echo(directory, cfg: io.Config) -> None:
    io.atomic_write(os.path.join(directory, "config.txt"), cfg.dumps())


def _load_dataset(cfg: io.Config) -> list[geometry.Mesh]:
    if cfg.data_dir:
        paths = sorted(os.path.join(cfg.data_dir, f) for f in os.listdir(cfg.data_dir)
                       if f.lower().endswith((".off", ".obj")))
        if not paths:
            raise DPFError(f"no OFF/OBJ meshes in {cfg.data_dir}")
        meshes = [geometry.load_mesh(p) for p in paths]
    else:
        meshes = geometry.synth_dataset(cfg.family, cfg.count, seed=cfg.seed,
                                        resolution=cfg.resolution, normalize=False)
    if cfg.normalization == "shape":
        meshes = [geometry.normalize_mesh(m)[0] for m in meshes]
    elif cfg.normalization == "global":
        c = geometry.aggregate_centroid(meshes)
        meshes = [geometry.normalize_mesh(m, centroid=c, rescale=False)[0] for m in meshes]
    elif cfg.normalization != "none":
        raise ParameterError(f"unknown normalization {cfg.normalization!r}")
    return meshes


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    if args.count < 1:
        raise ParameterError("--count must be >= 1")
    ranges = json.loads(args.ranges) if args.ranges else None
    params = geometry.synth_params(args.family, args.count, ranges, args.seed)
    os.makedirs(args.out, exist_ok=True)
    lines = [f"# family={args.family} count={args.count} seed={args.seed} "
             f"resolution={args.resolution}"]
    for i, p in enumerate(params):
        name = f"{args.family}_{i:04d}.off"
        mesh = geometry.synth_shape(args.family, p, args.resolution)
        geometry.save_off(mesh, os.path.join(args.out, name))
        lines.append(name + " " + " ".join(f"{k}={v!r}" for k, v in p.items()))
    io.atomic_write(os.path.join(args.out, "manifest.txt"), "\n".join(lines) + "\n")
    print(f"wrote {args.count} meshes to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config_from(args)
    data = _load_dataset(cfg)
    tcfg = cfg.train_config()
    if args.resume:
        ck = io.load_checkpoint(args.resume)
        io.check_resume_compatible(ck.config, cfg)
        net = io.restore_net(ck)
        state = io.restore_state(ck)
    else:
        net = DPFNet(cfg.model_config(), seed=cfg.seed)
        state = TrainState.fresh(tcfg)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    loss_log = open(args.loss_log or args.out + ".loss.txt", "a" if args.resume else "w",
                    encoding="utf-8")

    def sink(rec):
        line = format_progress(rec)
        print(line, flush=True)
        loss_log.write(line + "\n")

    def on_epoch(st):
        if tcfg.checkpoint_interval and st.epoch % tcfg.checkpoint_interval == 0:
            io.save_checkpoint(f"{args.out}.epoch{st.epoch}", io.checkpoint_from(net, cfg, st))

    try:
        state = train(net, data, tcfg, sink, state, on_epoch)
    finally:
        loss_log.close()
    io.save_checkpoint(args.out, io.checkpoint_from(net, cfg, state))
    print(f"saved checkpoint {args.out} (epoch {state.epoch}, step {state.step})")
    return 0


def _load_net(path):
    ck = io.load_checkpoint(path)
    return io.restore_net(ck), ck.config


def cmd_sample(args) -> int:
    net, cfg = _load_net(args.checkpoint)
    if args.k < 1 or args.n < 1:
        raise ParameterError("-k and -n must be >= 1")
    os.makedirs(args.out, exist_ok=True)
    cfg = dataclasses.replace(cfg, seed=args.seed)
    _write_config_echo(args.out, cfg)
    rng = Rng(args.seed)
    ext = ".bin" if args.binary else ".xyz"
    if args.trace:
        ks = [int(x) for x in args.trace_layers.split(",")]
        ks = [min(k, len(net.point_flow.layers)) for k in ks] if args.clip_trace else ks
        zs = net.prior.sample(args.k, rng)
        for i in range(args.k):
            clouds = net.point_flow.trace(zs[i:i + 1], args.n, ks, rng)
            for k, c in zip(ks, clouds):
                io.write_cloud(os.path.join(args.out, f"sample_{i:04d}_layer{k:02d}{ext}"), c)
    else:
        for i, c in enumerate(net.generate(args.k, args.n, rng)):
            io.write_cloud(os.path.join(args.out, f"sample_{i:04d}{ext}"), c)
    print(f"wrote {args.k} clouds to {args.out}")
    return 0


def _read_input(path, n_points: int, rng: Rng) -> np.ndarray:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    if path.lower().endswith((".off", ".obj")):
        mesh, _ = geometry.normalize_mesh(geometry.load_mesh(path))
        return geometry.sample_surface(mesh, n_points, rng)
    pts = io.read_cloud(path)
    if len(pts) == 0:
        raise geometry.EmptyInputError(f"{path}: no points")
    return pts


def cmd_autoencode(args) -> int:
    net, cfg = _load_net(args.checkpoint)
    rng = Rng(args.seed)
    X = _read_input(args.input, args.input_points, rng)
    out = net.reconstruct(X, args.n, Rng(args.seed + 1), args.mode)
    io.write_cloud(args.out, out)
    io.atomic_write(args.out + ".config.txt", dataclasses.replace(cfg, seed=args.seed).dumps())
    print(f"wrote {len(out)} points to {args.out}")
    return 0


def cmd_interpolate(args) -> int:
    if args.steps < 2:
        raise ParameterError("--steps must be >= 2")
    net, cfg = _load_net(args.checkpoint)
    rng = Rng(args.seed)
    X1 = _read_input(args.a, args.input_points, rng)
    X2 = _read_input(args.b, args.input_points, rng)
    frames = net.interpolate(X1, X2, args.steps, args.n, Rng(args.seed + 1))
    os.makedirs(args.out, exist_ok=True)
    _write_config_echo(args.out, cfg)
    for i, f in enumerate(frames):
        io.write_cloud(os.path.join(args.out, f"frame_{i:02d}.xyz"), f)
    print(f"wrote {len(frames)} frames to {args.out}")
    return 0


def cmd_eval(args) -> int:
    gen_paths = io.list_clouds(args.gen)
    ref = [io.read_cloud(p) for p in io.list_clouds(args.ref)]
    if not gen_paths or not ref:
        raise DPFError("gen and ref directories must contain .xyz or .bin clouds")
    want = [m.strip() for m in args.metrics.split(",") if m.strip()]
    if args.repeats < 1 or len(gen_paths) % args.repeats:
        raise ParameterError(f"{len(gen_paths)} generated clouds do not split into {args.repeats} sets")
    size = len(gen_paths) // args.repeats
    if "nna" in want and size != len(ref):
        raise ParameterError(f"1-NNA needs equal set sizes ({size} generated vs {len(ref)} reference)")
    grid = metrics.VoxelGrid(args.grid_resolution)
    rows = []
    for r in range(args.repeats):
        gen = [io.read_cloud(p) for p in gen_paths[r * size:(r + 1) * size]]
        rep = metrics.evaluate_sets(gen, ref, want, grid, args.emd_mode, args.tau)
        rows.append({k: v for k, v in rep.as_dict().items() if not np.isnan(v)})
    sections = [("config", {"gen": args.gen, "ref": args.ref, "metrics": ",".join(want),
                            "repeats": args.repeats, "grid_resolution": args.grid_resolution,
                            "emd_mode": args.emd_mode, "tau": args.tau})]
    sections += [(f"repeat {i}", row) for i, row in enumerate(rows)]
    if args.repeats > 1:
        summary = {}
        for k in rows[0]:
            vals = np.array([row[k] for row in rows])
            summary[f"{k}_mean"] = float(vals.mean())
            summary[f"{k}_std"] = float(vals.std(ddof=1))
        sections.append(("summary", summary))
    io.write_report(args.out, sections)
    for name, vals in sections[1:]:
        print(f"[{name}] " + " ".join(f"{k}={v:.6g}" for k, v in vals.items()))
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpfnet", description=__doc__,
                                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    g = sub.add_parser("gen-data", help="write synthetic meshes and a manifest", formatter_class=fmt)
    g.add_argument("--family", default="torus", choices=sorted(geometry.SHAPE_PARAMS))
    g.add_argument("--count", type=int, default=50)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--resolution", type=int, default=32)
    g.add_argument("--ranges", help='JSON, e.g. \'{"minor": [0.2, 0.3]}\'')
    g.add_argument("--out", default="data")
    g.set_defaults(fn=cmd_gen_data)

    defaults = io.Config()
    t = sub.add_parser("train", help="fit a model", formatter_class=fmt,
                       epilog="config keys (file or --set): " + ", ".join(
                           f"{f.name}={getattr(defaults, f.name)}" for f in dataclasses.fields(defaults)))
    t.add_argument("--config", help="flat key = value file; flags override it")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--latent-dim", dest="latent_dim", type=int)
    t.add_argument("--point-layers", dest="point_layers", type=int)
    t.add_argument("--points", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--data-dir", dest="data_dir")
    t.add_argument("--family")
    t.add_argument("--count", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--loss-log")
    t.add_argument("--out", default="model.dpfn")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="generate point clouds", formatter_class=fmt)
    s.add_argument("checkpoint")
    s.add_argument("-k", type=int, default=1, help="number of clouds")
    s.add_argument("-n", type=int, default=2048, help="points per cloud")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--trace", action="store_true", help="write intermediate flow layers")
    s.add_argument("--trace-layers", default=TRACE_DEFAULT)
    s.add_argument("--clip-trace", action="store_true",
                   help="clip trace layers to the model depth instead of failing")
    s.add_argument("--binary", action="store_true", help="write .bin instead of .xyz")
    s.add_argument("--out", default="samples")
    s.set_defaults(fn=cmd_sample)

    a = sub.add_parser("autoencode", help="reconstruct a cloud or mesh", formatter_class=fmt)
    a.add_argument("checkpoint")
    a.add_argument("input", help=".xyz/.bin cloud or .off/.obj mesh")
    a.add_argument("-n", type=int, default=2048)
    a.add_argument("--input-points", type=int, default=2048, help="points sampled from mesh inputs")
    a.add_argument("--mode", choices=("mean", "sample"), default="mean")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", default="recon.xyz")
    a.set_defaults(fn=cmd_autoencode)

    e = sub.add_parser("eval", help="compare generated and reference sets", formatter_class=fmt)
    e.add_argument("gen")
    e.add_argument("ref")
    e.add_argument("--metrics", default="cd,emd,jsd,mmd,cov,nna,f1")
    e.add_argument("--repeats", type=int, default=1,
                   help="split gen into this many equal sets, one report section each")
    e.add_argument("--grid-resolution", type=int, default=28)
    e.add_argument("--emd-mode", choices=("exact", "approx"), default="exact")
    e.add_argument("--tau", type=float, default=1e-3)
    e.add_argument("--out", default="report.txt")
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("interpolate", help="decode a latent path between two inputs",
                       formatter_class=fmt)
    i.add_argument("checkpoint")
    i.add_argument("a")
    i.add_argument("b")
    i.add_argument("--steps", type=int, default=7)
    i.add_argument("-n", type=int, default=2048)
    i.add_argument("--input-points", type=int, default=2048)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out", default="interp")
    i.set_defaults(fn=cmd_interpolate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _threads():
            return args.fn(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except ParameterError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except DPFError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
