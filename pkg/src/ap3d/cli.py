"""Command-line entry point: ``ap3d <command> [options]``.

Options may also come from ``--config file.json`` whose keys are the option
names with underscores (``input_shape``, ``max_shift``...).  Flags given on the
command line win over the file, the file wins over defaults, and the merged
result is written to ``<outdir>/config.resolved.json``.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _pair(text: str) -> tuple[int, int]:
    parts = [int(v) for v in str(text).split(",")]
    if len(parts) != 2:
        raise ValueError(f"expected two comma-separated integers, got {text!r}")
    return parts[0], parts[1]


# option name -> (default, argparse type or "flag", help)
_SYNTH_OPTS = {
    "ids": (16, int, "number of identities"),
    "tracklets": (4, int, "tracklets per identity"),
    "frames": (32, int, "frames per tracklet"),
    "height": (64, int, "frame height"),
    "width": (32, int, "frame width"),
    "max_shift": (8.0, float, "largest box shift in canvas pixels"),
    "scale_min": (0.75, float, "smallest box scale"),
    "scale_max": (1.25, float, "largest box scale"),
    "deformation": (3.0, float, "posture sway amplitude in canvas pixels"),
    "noise": (0.05, float, "pixel noise standard deviation"),
    "no_jitter": (False, "flag", "disable shift, scale, sway and noise"),
}
_TRAIN_OPTS = {
    "preset": ("desk", str, "desk (30 epochs, decay every 10) or full (240 epochs, decay every 60)"),
    "epochs": (None, int, "override the preset epoch count"),
    "lr": (None, float, "override the preset learning rate"),
    "decay_every": (None, int, "epochs between x0.1 learning-rate steps"),
    "clip_len": (4, int, "frames per training clip"),
    "stride": (8, int, "frame stride inside a training clip"),
    "persons": (8, int, "identities per batch"),
    "clips": (4, int, "clips per identity in a batch"),
    "margin": (0.3, float, "triplet margin"),
    "weight_decay": (5e-4, float, "Adam weight decay"),
}
_MODEL_OPTS = {
    "arch": ("tiny-ap-p3d-c", str, "<resnet18|resnet34|resnet50|tiny>-<c2d|i3d|ap-i3d|p3d-a|...|ap-p3d-c|nl>"),
    "policy": ("per2-stage23", str, "none, one-block, per2-stage23, two-blocks-stage23 or all-stage23"),
    "stage": (None, int, "residual stage 2..5 for the one-block policy (stage 1 is the stem)"),
    "base_width": (None, int, "channels of the first residual stage"),
    "scale_s": (None, float, "APM similarity scale"),
    "no_ca": (False, "flag", "disable contrastive attention"),
}

COMMANDS = {
    "count": {
        "arch": ("resnet50-c2d", str, _MODEL_OPTS["arch"][2]),
        "policy": _MODEL_OPTS["policy"],
        "stage": _MODEL_OPTS["stage"],
        "input_shape": ("4x3x256x128", str, "T x C x H x W of one clip"),
        "convention": ("layers", str, "layers (convolutions and linear layers) or all (also activation matmuls)"),
    },
    "gradcheck": {
        "scope": ("primitives", str, "primitives, apm, blocks or network"),
        "tol": (1e-4, float, "largest accepted relative error"),
        "corrupt": (None, str, "test hook: scale the backward of this op to force a failure"),
    },
    "synth": {**_SYNTH_OPTS, "split": ("both", str, "train, test or both")},
    "train": {**_MODEL_OPTS, **_SYNTH_OPTS, **_TRAIN_OPTS,
              "data": (None, str, "exported dataset directory (default: generate the synthetic train split)")},
    "eval": {
        "model": (None, str, "directory written by train (spec.json + model.ckpt)"),
        "data": (None, str, "exported test split (default: regenerate the synthetic test split)"),
        "clip_len_test": (32, int, "frames per test chunk"),
        **_SYNTH_OPTS,
    },
    "sweep": {
        "axis": ("scale_s", str, "stage_placement, block_count, backbone, ca_switch or scale_s"),
        "values": (None, str, "comma-separated sweep points (default: the axis' standard set)"),
        "base_width": (16, int, "channels of the first residual stage"),
        **_SYNTH_OPTS, **_TRAIN_OPTS,
    },
    "heatmap": {
        **_MODEL_OPTS,
        "model": (None, str, "directory written by train (default: a freshly initialised model)"),
        "tracklet": (0, int, "index into the synthetic test split"),
        "frames": ("0,1", str, "central,adjacent frame indices"),
        "query": ("4,2", str, "row,col of the query position on the APM input map"),
        "s": (None, float, "similarity scale; repeat for several maps (default 1 and 4)"),
        "clip_len": (4, int, "frames fed to the backbone"),
        **{k: v for k, v in _SYNTH_OPTS.items() if k != "frames"},
    },
}
_SUMMARY = {
    "count": "print parameter and MAC counts for an architecture",
    "gradcheck": "finite-difference gradient checks (exit 1 on failure)",
    "synth": "write the synthetic misaligned video dataset",
    "train": "train a network on synthetic or exported data",
    "eval": "evaluate a trained run on the test split",
    "sweep": "train and evaluate along one ablation axis",
    "heatmap": "export registration similarity maps for several s",
}
_COMMON = {
    "seed": (0, int, "global random seed"),
    "outdir": (None, str, "output directory (default runs/<command>)"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ap3d", description="Appearance-preserving 3D convolution toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name, help=_SUMMARY[name])
        p.add_argument("--config", help="JSON file with option values")
        for key, (default, typ, help_) in {**_COMMON, **opts}.items():
            flag = "--" + key.replace("_", "-")
            if typ == "flag":
                p.add_argument(flag, dest=key, action="store_const", const=True, default=None, help=help_)
            elif key == "s":
                p.add_argument(flag, dest=key, type=float, action="append", default=None, help=help_)
            else:
                p.add_argument(flag, dest=key, type=typ, default=None, help=help_ if "default" in help_ else f"{help_} (default {default})")
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    opts = {**_COMMON, **COMMANDS[command]}
    resolved = {k: v[0] for k, v in opts.items()}
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = set(file_cfg) - set(opts) - {"command"}
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
        file_cfg.pop("command", None)
        resolved.update(file_cfg)
    for k in opts:
        v = getattr(args, k, None)
        if v is not None:
            resolved[k] = v
    if resolved["outdir"] is None:
        resolved["outdir"] = str(Path("runs") / command)
    return resolved


def _write_resolved(command: str, cfg: dict) -> Path:
    out = Path(cfg["outdir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(json.dumps({"command": command, **cfg}, indent=2, sort_keys=True))
    return out


# -- builders shared by several commands ----------------------------------------

def _synth_config(cfg: dict):
    from .traineval import Jitter, SynthConfig

    jitter = Jitter.none() if cfg["no_jitter"] else Jitter(cfg["max_shift"], (cfg["scale_min"], cfg["scale_max"]),
                                                           cfg["deformation"], cfg["noise"])
    return SynthConfig(num_identities=cfg["ids"], tracklets_per_id=cfg["tracklets"],
                       frames_per_tracklet=cfg["frames"], out_size=(cfg["height"], cfg["width"]),
                       jitter=jitter, seed=cfg["seed"])


def _train_config(cfg: dict):
    from .traineval import TrainConfig

    if cfg["preset"] not in ("desk", "full"):
        raise UsageError(f"preset must be desk or full, got {cfg['preset']!r}")
    overrides = dict(clip_len=cfg["clip_len"], frame_stride=cfg["stride"], persons_per_batch=cfg["persons"],
                     clips_per_person=cfg["clips"], margin=cfg["margin"], weight_decay=cfg["weight_decay"],
                     seed=cfg["seed"])
    for key in ("epochs", "lr", "decay_every"):
        if cfg[key] is not None:
            overrides[key] = cfg[key]
    return getattr(TrainConfig, cfg["preset"])(**overrides)


def _network_spec(cfg: dict, num_classes: int):
    from .network import arch_spec

    extra = {}
    if cfg.get("base_width") is not None:
        extra["base_width"] = cfg["base_width"]
    stage = cfg.get("stage")
    if stage is not None and not 2 <= stage <= 5:
        raise UsageError(f"--stage must be 2..5, got {stage}")
    spec = arch_spec(cfg["arch"], policy=cfg["policy"], num_classes=num_classes,
                     stage=None if stage is None else stage - 1, **extra)
    apm = spec.apm
    if cfg.get("scale_s") is not None:
        apm = replace(apm, scale_s=cfg["scale_s"])
    if cfg.get("no_ca"):
        apm = replace(apm, use_contrastive_attention=False)
    return replace(spec, apm=apm)


def _load_model(model_dir: str):
    from .network import NetworkSpec, build_network
    from .tensorcore import load_checkpoint

    d = Path(model_dir)
    spec = NetworkSpec.from_json((d / "spec.json").read_text())
    model = build_network(spec)
    model.load_state_dict({k: v.astype(np.float32) for k, v in load_checkpoint(d / "model.ckpt").items()})
    return model


# -- commands -------------------------------------------------------------------

def cmd_count(cfg: dict, out: Path) -> int:
    from .network import build_network
    from .traineval import count_params, mac_breakdown, parse_input_shape
    from .traineval.analysis import CONVENTIONS

    if cfg["convention"] not in CONVENTIONS:
        raise UsageError(f"convention must be one of {sorted(CONVENTIONS)}")
    shape = parse_input_shape(cfg["input_shape"])
    model = build_network(_network_spec(cfg, 0), seed=cfg["seed"])
    params = count_params(model)
    breakdown = mac_breakdown(model, shape)
    macs = sum(breakdown[k] for k in CONVENTIONS[cfg["convention"]])
    print(f"params={params / 1e6:.2f}M gmacs={macs / 1e9:.2f}")
    print(f"params_exact={params} macs_exact={macs} convention={cfg['convention']} "
          + " ".join(f"{k}={v}" for k, v in breakdown.items()))
    (out / "count.json").write_text(json.dumps({"params": params, "macs": macs, "breakdown": breakdown,
                                                "convention": cfg["convention"]}, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(cfg: dict, out: Path) -> int:
    import contextlib

    from .tensorcore import corrupt_backward
    from .verify import SCOPES, format_reports, run_scope

    if cfg["scope"] not in SCOPES:
        raise UsageError(f"scope must be one of {SCOPES}")
    guard = corrupt_backward(cfg["corrupt"]) if cfg["corrupt"] else contextlib.nullcontext()
    with guard:
        reports = run_scope(cfg["scope"], seed=cfg["seed"], tol=cfg["tol"])
    table = format_reports(reports)
    print(table)
    (out / "gradcheck.txt").write_text(table + "\n")
    failed = [r.name for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} passed")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_synth(cfg: dict, out: Path) -> int:
    from .traineval import export_dataset, generate_synthetic

    if cfg["split"] not in ("train", "test", "both"):
        raise UsageError("split must be train, test or both")
    sc = _synth_config(cfg)
    for split in (("train", "test") if cfg["split"] == "both" else (cfg["split"],)):
        ds = generate_synthetic(sc, split)
        export_dataset(ds, out / split)
        print(f"{split}: {len(ds)} tracklets, {sum(len(t) for t in ds)} frames -> {out / split}")
    return EXIT_OK


def _dataset(cfg: dict, split: str):
    from .traineval import generate_synthetic, load_dataset

    if cfg.get("data"):
        return load_dataset(cfg["data"])
    return generate_synthetic(_synth_config(cfg), split)


def cmd_train(cfg: dict, out: Path) -> int:
    from .network import build_network
    from .tensorcore import default_dtype, save_checkpoint
    from .traineval import evaluate, split_query_gallery, train

    train_set = _dataset(cfg, "train")
    num_ids = len({t.person_id for t in train_set})
    tc = _train_config(cfg)
    spec = _network_spec(cfg, num_ids)
    with default_dtype(np.float32):
        model = build_network(spec, seed=cfg["seed"])
        validate = None
        if not cfg.get("data"):
            query, gallery = split_query_gallery(_dataset(cfg, "test"))
            validate = lambda m: evaluate(m, query, gallery).rank1  # noqa: E731
        result = train(model, train_set, tc, log_path=out / "train_log.jsonl", validate=validate,
                       validate_every=5 if validate else 0)
    (out / "spec.json").write_text(spec.to_json())
    save_checkpoint(out / "model.ckpt", model.state_dict())
    last = result.history[-1]
    print(f"epochs={tc.epochs} loss={last['loss']:.4f} seconds={result.seconds:.1f}"
          + (f" rank1={last['rank1']:.3f}" if "rank1" in last else ""))
    return EXIT_OK


def cmd_eval(cfg: dict, out: Path) -> int:
    from .tensorcore import default_dtype
    from .traineval import count_flops, count_params, evaluate, rows_to_csv, split_query_gallery

    if not cfg["model"]:
        raise UsageError("eval needs --model <train output directory>")
    with default_dtype(np.float32):
        model = _load_model(cfg["model"])
        query, gallery = split_query_gallery(_dataset(cfg, "test"))
        result = evaluate(model, query, gallery, cfg["clip_len_test"])
        macs = count_flops(model, (1, cfg["clip_len_test"], 3, cfg["height"], cfg["width"]))
    s = result.summary()
    row = {"setting": Path(cfg["model"]).name, **s, "params": count_params(model), "gmacs": macs / 1e9}
    (out / "metrics.csv").write_text(rows_to_csv([row]))
    print(" ".join(f"{k}={v:.4f}" for k, v in s.items()))
    return EXIT_OK


def cmd_sweep(cfg: dict, out: Path) -> int:
    from .traineval import SweepConfig, ablation_sweep, rows_to_csv
    from .traineval.sweep import normalize_axis

    try:
        axis = normalize_axis(cfg["axis"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    values = [v.strip() for v in cfg["values"].split(",")] if cfg["values"] else None
    sc = SweepConfig(synth=_synth_config(cfg), train=_train_config(cfg), base_width=cfg["base_width"],
                     seed=cfg["seed"])
    rows = ablation_sweep(axis, sc, values, out_csv=out / f"sweep_{axis}.csv")
    sys.stdout.write(rows_to_csv(rows))
    return EXIT_OK


def cmd_heatmap(cfg: dict, out: Path) -> int:
    from .apm import export_heatmap, similarity_heatmap
    from .blocks import Ap3dWrapper
    from .network import build_network
    from .tensorcore import default_dtype, no_grad
    from .traineval import generate_synthetic
    from .traineval.metrics import normalize_frames

    central_i, adjacent_i = _pair(cfg["frames"])
    query = _pair(cfg["query"])
    scales = cfg["s"] or [1.0, 4.0]
    with default_dtype(np.float64):
        model = _load_model(cfg["model"]) if cfg["model"] else build_network(_network_spec(cfg, 0), seed=cfg["seed"])
        wrappers = [m for m in model.modules() if isinstance(m, Ap3dWrapper)]
        if not wrappers:
            raise UsageError("model has no AP3D block; pick an ap-* architecture")
        wrapper = wrappers[0]
        length = max(cfg["clip_len"], central_i + 1, adjacent_i + 1)
        tracklets = generate_synthetic(_synth_config({**cfg, "frames": length}), "test")
        if not 0 <= cfg["tracklet"] < len(tracklets):
            raise UsageError(f"tracklet index outside 0..{len(tracklets) - 1}")
        frames = normalize_frames(tracklets[cfg["tracklet"]].frames)
        if not (0 <= central_i < len(frames) and 0 <= adjacent_i < len(frames)):
            raise UsageError(f"frame indices must lie in 0..{len(frames) - 1}")
        captured = []
        original = wrapper.forward
        wrapper.forward = lambda x: captured.append(x) or original(x)
        try:
            model.eval()
            with no_grad():
                model(frames[None])
        finally:
            del wrapper.forward
        fmap = captured[0].data[0]  # (C, T, h, w)
        central, adjacent = fmap[:, central_i], fmap[:, adjacent_i]
        for s in scales:
            try:
                hm = similarity_heatmap(central, adjacent, wrapper.apm, query, s)
            except IndexError as exc:
                raise UsageError(str(exc)) from None
            csv_path, _ = export_heatmap(hm, out / f"heatmap_s{s:g}")
            print(f"s={s:g} peak={hm.max():.4f} sum={hm.sum():.6f} -> {csv_path}")
    return EXIT_OK


HANDLERS = {"count": cmd_count, "gradcheck": cmd_gradcheck, "synth": cmd_synth, "train": cmd_train,
            "eval": cmd_eval, "sweep": cmd_sweep, "heatmap": cmd_heatmap}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve(args.command, args)
        out = _write_resolved(args.command, cfg)
        return HANDLERS[args.command](cfg, out)
    except (UsageError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"ap3d {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
