"""Command-line interface: dataset rendering, training, evaluation,
gradient checking, and point-sampling visualization."""

from __future__ import annotations

import argparse
import dataclasses
import sys

import numpy as np

from . import gradchecks
from . import metrics as metrics_mod
from . import network as net
from . import seem as seem_mod
from . import synthdata as sd
from . import trainer


class ConfigError(ValueError):
    pass


def parse_config_file(path) -> dict:
    """UTF-8 `key = value` lines with `#` comments; keys must be TrainConfig
    fields (fail-closed on unknown keys); values coerced to the field type."""
    fields = {f.name: f.type for f in dataclasses.fields(trainer.TrainConfig)}
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', "
                                  f"got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in fields:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = _coerce(key, value, fields[key], path, lineno)
    return out


def _coerce(key, value, ftype, path, lineno):
    try:
        if ftype in ("int", int):
            return int(value)
        if ftype in ("float", float):
            return float(value)
        if ftype in ("bool", bool):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(value)
        return value
    except ValueError:
        raise ConfigError(f"{path}:{lineno}: bad value {value!r} for {key!r}")


def _parse_size(text):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise ConfigError(f"size must be HxW (e.g. 64x192), got {text!r}")


def cmd_render_dataset(args):
    h, w = _parse_size(args.size)
    cfg = sd.DatasetConfig(height=h, width=w)
    sd.render_dataset(args.out, args.count, args.seed, cfg)
    print(f"rendered {args.count} scenes to {args.out}")
    return 0


def cmd_train(args):
    overrides = parse_config_file(args.config) if args.config else {}
    if args.no_seem:
        overrides["use_seem"] = False
    if args.no_attention:
        overrides["use_attention"] = False
    cfg = trainer.TrainConfig(**overrides)
    dataset = trainer.load_dataset(args.data)
    record, _ = trainer.train(cfg, dataset, out_dir=args.out)
    if record.aborted:
        print(f"aborted: {record.aborted}", file=sys.stderr)
        return 1
    last_val = record.validations[-1][1] if record.validations else None
    print(f"trained {cfg.steps} steps in {record.wall_clock:.1f}s; "
          f"final loss {record.steps[-1][1].total:.6f}"
          + (f"; val AbsRel {last_val.abs_rel:.4f}" if last_val else ""))
    return 0


def cmd_eval(args):
    digest, params = net.load_checkpoint(args.checkpoint)
    ncfg = net.NetworkConfig()
    if digest != ncfg.digest():
        # recover the ablation flags the checkpoint was trained with
        candidates = [net.NetworkConfig(use_seem=s, use_attention=a)
                      for s in (True, False) for a in (True, False)]
        matches = [c for c in candidates if c.digest() == digest]
        if not matches:
            raise net.CheckpointError(
                f"{args.checkpoint}: config digest does not match any known "
                "network configuration")
        ncfg = matches[0]
    model = net.Model(ncfg, seed=0, dtype=np.float32)
    for name in model.params:
        if name not in params:
            raise net.CheckpointError(f"{args.checkpoint}: missing {name}")
        model.params[name] = params[name].astype(np.float32)
    samples = trainer.load_dataset(args.data)
    reports = []
    for s in samples:
        out = model.forward(s.target.astype(np.float32)[None], sample_seed=0)
        depth = net.disparity_to_depth(out.disparities[0], ncfg).data[0, 0]
        reports.append(metrics_mod.evaluate(depth, s.depth, median_scale=True,
                                            min_depth=ncfg.min_depth,
                                            max_depth=ncfg.max_depth))
    agg = metrics_mod.merge_reports(reports)
    metrics_mod.write_csv(args.csv, reports, agg)
    print(f"evaluated {len(reports)} samples -> {args.csv}; "
          f"AbsRel {agg.abs_rel:.4f} d1 {agg.delta1:.4f}")
    return 0


def cmd_gradcheck(args):
    results = gradchecks.run(args.module)
    width = max(len(n) for n in results)
    ok = True
    for name, err in results.items():
        status = "ok" if err < gradchecks.TOLERANCE else "FAIL"
        ok &= err < gradchecks.TOLERANCE
        print(f"{name:{width}s}  {err:.3e}  {status}")
    print(f"tolerance {gradchecks.TOLERANCE:g}: "
          + ("all passed" if ok else "FAILURES above"))
    return 0 if ok else 1


def cmd_sample_points(args):
    mask = sd.read_pgm(args.mask).astype(np.float64)
    if mask.max() > 1:
        mask = mask / mask.max()
    cfg = seem_mod.SamplerConfig(n_points=args.n, mu=args.mu,
                                 disturb_radius=args.c, seed=args.seed)
    points = seem_mod.sample_points(seem_mod.edge_response(mask), cfg)
    h, w = mask.shape
    rgb = np.repeat(((mask >= 0.5) * 0.7 + 0.15)[None], 3, axis=0)
    colors = {seem_mod.LABEL_EDGE: (1.0, 0.0, 0.0),
              seem_mod.LABEL_DISTURBED: (1.0, 0.6, 0.0),
              seem_mod.LABEL_RANDOM: (0.0, 0.4, 1.0)}
    for (x, y), lab in zip(points.coords, points.labels):
        xi, yi = int(round(x)), int(round(y))
        if 0 <= yi < h and 0 <= xi < w:
            for ch in range(3):
                rgb[ch, yi, xi] = colors[int(lab)][ch]
    sd.write_ppm(args.out, rgb)
    for (x, y), lab in zip(points.coords, points.labels):
        print(f"{x:g} {y:g} {seem_mod.LABEL_NAMES[int(lab)]}")
    counts = points.counts
    print(f"# wrote {args.out}; counts edge={counts[0]} "
          f"disturbed={counts[1]} random={counts[2]}", file=sys.stderr)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="edgedepth",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("render-dataset", help="render synthetic scene triplets")
    r.add_argument("--out", required=True)
    r.add_argument("--count", type=int, required=True)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--size", default="64x192")
    r.set_defaults(fn=cmd_render_dataset)

    t = sub.add_parser("train", help="train on a rendered dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--no-seem", action="store_true")
    t.add_argument("--no-attention", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint, write metrics CSV")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--csv", required=True)
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    g.add_argument("--module", default=None,
                   choices=[n for n, _ in gradchecks.ALL_CHECKS])
    g.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("sample-points", help="visualize edge-point sampling")
    s.add_argument("--mask", required=True)
    s.add_argument("--n", type=int, default=300)
    s.add_argument("--mu", type=float, default=0.4)
    s.add_argument("--c", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sample_points)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except (ConfigError, sd.ParseError, net.CheckpointError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
