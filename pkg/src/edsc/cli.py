"""Command-line entry point: ``edsc <command> ...``.

Run configuration is a plain ``key=value`` text file (``#`` starts a
comment); ``--set key=value`` flags override file values. Every command that
writes outputs also writes the fully resolved configuration next to them as
``config.txt``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("edsc")

# key -> (type, default)
DEFAULTS = {
    "model.kernel_size": (int, 5),
    "model.hetconv_p": (int, 4),
    "model.widths": ("ints", (16, 32, 64, 128)),
    "model.convs_per_level": (int, 2),
    "model.estimator_widths": ("ints", (16, 16, 16)),
    "model.multi_time": (bool, False),
    "model.use_mask": (bool, True),
    "model.use_bias": (bool, True),
    "train.lr": (float, 1e-3),
    "train.epochs": (int, 60),
    "train.halve_every": (int, 20),
    "train.batch": (int, 4),
    "train.crop": (int, 32),
    "train.full_frame_epochs": (int, 0),
    "train.loss": (str, "charbonnier"),
    "train.feature_weight": (float, 0.01),
    "train.epsilon": (float, 1e-6),
    "train.init": (str, ""),
    "seed": (int, 0),
    "data.size": (int, 64),
    "data.velocity": ("floats", (4.0, 0.0)),
    "data.bg_velocity": ("floats", (0.0, 0.0)),
    "data.object_size": ("ints", (16, 16)),
    "data.rotation": (float, 0.0),
    "data.count": (int, 96),
    "data.val_count": (int, 16),
    "data.max_speed": (float, 6.0),
    "data.max_bg_speed": (float, 4.0),
    "out.dir": (str, "out"),
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _parse_value(key: str, raw):
    kind = DEFAULTS[key][0]
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if kind == "ints":
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if kind == "floats":
            return tuple(float(x) for x in raw.split(",") if x.strip())
        if kind is bool:
            low = raw.lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return low in ("1", "true", "yes")
        return kind(raw)
    except ValueError:
        raise UsageError(f"bad value for {key}: {raw!r}") from None


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key=value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in DEFAULTS:
            raise UsageError(f"config line {lineno}: unknown key {k!r}")
        out[k] = _parse_value(k, v)
    return out


def resolve_config(path: Optional[str], overrides: list) -> dict:
    """Defaults, then the file, then ``key=value`` overrides (flags win)."""
    cfg = {k: v for k, (_, v) in DEFAULTS.items()}
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc}") from None
        cfg.update(parse_config_text(text))
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        if k not in DEFAULTS:
            raise UsageError(f"unknown config key {k!r}")
        cfg[k] = _parse_value(k, v)
    return cfg


def format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_config(cfg: dict, directory: Path) -> Path:
    path = Path(directory) / "config.txt"
    path.write_text("".join(f"{k}={format_value(cfg[k])}\n" for k in sorted(cfg)))
    return path


def model_config(cfg: dict):
    from .model import ModelConfig

    try:
        return ModelConfig(
            kernel_size=cfg["model.kernel_size"], hetconv_p=cfg["model.hetconv_p"], widths=cfg["model.widths"],
            convs_per_level=cfg["model.convs_per_level"], estimator_widths=cfg["model.estimator_widths"],
            multi_time=cfg["model.multi_time"], use_mask=cfg["model.use_mask"], use_bias=cfg["model.use_bias"],
            seed=cfg["seed"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def train_config(cfg: dict):
    from .training import LossConfig, TrainConfig

    try:
        loss = LossConfig(kind=cfg["train.loss"], epsilon=cfg["train.epsilon"], feature_weight=cfg["train.feature_weight"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    crop = cfg["train.crop"]
    return TrainConfig(
        epochs=cfg["train.epochs"], lr=cfg["train.lr"], halve_every=cfg["train.halve_every"], batch=cfg["train.batch"],
        crop=crop if crop > 0 else None, full_frame_epochs=cfg["train.full_frame_epochs"], seed=cfg["seed"], loss=loss,
    )


def _prepare_out(directory: Path, force: bool) -> Path:
    directory = Path(directory)
    if directory.exists() and any(directory.iterdir()) and not force:
        raise DataError(f"output directory {directory} is not empty (use --force to overwrite)")
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def _parse_times(args) -> Optional[list]:
    if args.times:
        try:
            return [float(x) for x in args.times.split(",") if x.strip()]
        except ValueError:
            raise UsageError(f"bad --times {args.times!r}") from None
    if args.t is not None:
        return [args.t]
    return None


def _load_frame(path):
    from .fileio import read_image

    try:
        return read_image(path)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from None


def _load_ckpt(path):
    from .fileio import load_checkpoint

    try:
        return load_checkpoint(path)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from None


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    from .data import MotionSpec, gen_sequence
    from .fileio import write_image
    from .sampling import write_flo

    cfg = resolve_config(args.spec, args.set)
    size = cfg["data.size"]
    try:
        spec = MotionSpec(
            size=(size, size), velocity=cfg["data.velocity"], bg_velocity=cfg["data.bg_velocity"],
            object_size=cfg["data.object_size"], rotation=cfg["data.rotation"],
            divisor=2 ** (len(cfg["model.widths"]) - 1),
        )
        seq = gen_sequence(spec, cfg["seed"])
    except ValueError as exc:
        raise DataError(str(exc)) from None
    out = _prepare_out(Path(args.out or cfg["out.dir"]), args.force)
    cfg["out.dir"] = str(out)
    lines = ["index,t,file,kind"]
    for i, (t, frame) in enumerate(zip(seq.times, seq.frames)):
        name = f"frame_{i:03d}.ppm"
        write_image(out / name, frame)
        kind = "input" if i in (0, len(seq.times) - 1) else "target"
        lines.append(f"{i},{t:.6f},{name},{kind}")
    write_flo(out / "flow_1to2.flo", seq.gt_flow_1to2)
    (out / "manifest.csv").write_text("\n".join(lines) + "\n")
    write_config(cfg, out)
    print(f"frames={len(seq.frames)} out={out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import make_dataset
    from .fileio import save_checkpoint
    from .metrics import psnr
    from .model import build_model
    from .training import TrainingDiverged, train, validate

    cfg = resolve_config(args.config, args.set)
    mcfg = model_config(cfg)
    tcfg = train_config(cfg)
    out = Path(args.out or cfg["out.dir"])
    out.mkdir(parents=True, exist_ok=True)
    cfg["out.dir"] = str(out)
    write_config(cfg, out)
    if cfg["train.init"]:
        params = _load_ckpt(cfg["train.init"])
        if params.config.multi_time != mcfg.multi_time or params.config.kernel_size != mcfg.kernel_size:
            raise UsageError("train.init checkpoint does not match the model configuration")
    else:
        params = build_model(mcfg)
    common = dict(size=cfg["data.size"], max_speed=cfg["data.max_speed"], max_bg_speed=cfg["data.max_bg_speed"],
                  multi_time=mcfg.multi_time)
    try:
        data = make_dataset(cfg["data.count"], seed=cfg["seed"] * 1000 + 1, **common)
        val = make_dataset(cfg["data.val_count"], seed=cfg["seed"] * 1000 + 2, **common)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    ckpt = out / "model.ckpt"
    try:
        params, tlog = train(params, data, tcfg, val=val, log_path=out / "train_log.csv", checkpoint_path=ckpt,
                             on_epoch=lambda r: print(f"epoch={r.epoch} lr={r.lr:g} loss={r.train_loss:.6f} val_psnr={r.val_psnr:.4f}",
                                                      file=sys.stderr))
    except TrainingDiverged as exc:
        print(f"error: training diverged ({exc}); last good checkpoint at {ckpt}", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(ckpt, params)
    mid = 0.5
    overlay = np.mean([psnr(0.5 * (v.frame1 + v.frame2), v.targets[mid]) for v in val]) if val else float("nan")
    copy = np.mean([psnr(v.frame1, v.targets[mid]) for v in val]) if val else float("nan")
    final = tlog.records[-1].val_psnr if tlog.records else validate(params, val)
    print(f"val_psnr={final:.4f} overlay_psnr={overlay:.4f} copy_psnr={copy:.4f} checkpoint={ckpt}")
    return EXIT_OK


def cmd_interp(args) -> int:
    from .fileio import write_image
    from .model import interpolate, interpolate_naive_rescale

    params = _load_ckpt(args.ckpt)
    f1, f2 = _load_frame(args.frame1), _load_frame(args.frame2)
    if f1.shape != f2.shape:
        raise DataError(f"frame shapes differ: {f1.shape} vs {f2.shape}")
    times = _parse_times(args)
    multi = params.config.multi_time
    if args.naive_rescale:
        if multi:
            raise UsageError("--naive-rescale needs a single-time checkpoint")
        times = times or [0.5]
        if any(not 0 < t < 1 for t in times):
            raise UsageError("time steps must lie in (0, 1)")
    elif multi:
        if not times:
            raise UsageError("multi-time checkpoint: give --t or --times")
        if any(not 0 < t < 1 for t in times):
            raise UsageError("time steps must lie in (0, 1)")
    else:
        if times and any(abs(t - 0.5) > 1e-12 for t in times):
            raise UsageError("single-time checkpoint only synthesizes t=0.5")
        times = [0.5]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t in times:
        if args.naive_rescale:
            frame = interpolate_naive_rescale(params, f1, f2, t)
        else:
            frame = interpolate(params, f1, f2, t if multi else None)
        name = out / f"interp_t{t:.4f}.ppm"
        write_image(name, np.clip(frame, 0.0, 1.0))
        print(f"t={t:.4f} file={name}")
    return EXIT_OK


def _ppm_files(path: Path) -> list:
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix == ".ppm")
    if path.exists():
        return [path]
    raise DataError(f"{path} does not exist")


def _manifest_inputs(gt_dir: Path):
    manifest = gt_dir / "manifest.csv"
    if not manifest.exists():
        return None
    rows = [line.split(",") for line in manifest.read_text().splitlines()[1:] if line.strip()]
    inputs = [gt_dir / r[2] for r in rows if r[3] == "input"]
    targets = {r[2] for r in rows if r[3] == "target"}
    return inputs, targets


def cmd_eval(args) -> int:
    from .metrics import evaluate, format_eval_line, occlusion_mask
    from .sampling import read_flo

    pred_path, gt_path = Path(args.pred), Path(args.gt)
    preds = _ppm_files(pred_path)
    gts = _ppm_files(gt_path)
    manifest = _manifest_inputs(gt_path) if gt_path.is_dir() else None
    if manifest is not None:
        gts = [g for g in gts if g.name in manifest[1]]
    by_name = {g.name: g for g in gts}
    if all(p.name in by_name for p in preds):
        pairs = [(p, by_name[p.name]) for p in preds]
    elif len(preds) == len(gts):
        pairs = list(zip(preds, gts))
    else:
        raise DataError(f"cannot pair {len(preds)} predictions with {len(gts)} ground-truth frames")
    if not pairs:
        raise DataError("nothing to evaluate")
    mask = None
    if args.flow:
        try:
            flow = read_flo(args.flow)
        except (OSError, ValueError) as exc:
            raise DataError(str(exc)) from None
        if args.frame1 and args.frame2:
            i1, i2 = Path(args.frame1), Path(args.frame2)
        elif manifest is not None and len(manifest[0]) == 2:
            i1, i2 = manifest[0]
        else:
            raise UsageError("--flow needs --frame1/--frame2 or a gt directory with a manifest")
        I1, I2 = _load_frame(i1), _load_frame(i2)
        try:
            mask = occlusion_mask(I1, I2, flow)
        except ValueError as exc:
            raise DataError(str(exc)) from None
    rows = []
    for p, g in pairs:
        P, G = _load_frame(p), _load_frame(g)
        try:
            vals = evaluate(P, G, mask)
        except ValueError as exc:
            raise DataError(f"{p.name}: {exc}") from None
        print(f"{p.name}: {format_eval_line(vals)}", file=sys.stderr)
        rows.append(vals)
    mean = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
    print(format_eval_line(mean))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import end_to_end_check, run_op_suite

    failed = 0
    worst: dict = {}
    for name, seed, rep in run_op_suite(range(args.seeds), tol=args.tol):
        worst[name] = max(worst.get(name, 0.0), rep.max_rel_error)
        failed += not rep.passed
    for name, err in worst.items():
        print(f"op={name} max_rel_err={err:.3e} {'PASS' if err <= args.tol else 'FAIL'}")
    rep = end_to_end_check(seed=0)
    failed += not rep.passed
    print(f"op=end_to_end max_rel_err={rep.max_rel_error:.3e} {'PASS' if rep.passed else 'FAIL'}")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


def _parse_res(res: str) -> tuple:
    try:
        h, w = (int(x) for x in res.lower().split("x"))
    except ValueError:
        raise UsageError(f"--res expects HxW, got {res!r}") from None
    return h, w


def cmd_count(args) -> int:
    from dataclasses import replace

    from .model import count_macs, count_params

    cfg = resolve_config(args.config, args.set)
    mcfg = model_config(cfg)
    H, W = _parse_res(args.res) if args.res else (cfg["data.size"], cfg["data.size"])
    p = mcfg.hetconv_p
    closed = (9 / p + 1 - 1 / p) / 9
    dense = replace(mcfg, hetconv_p=1)
    ratio = count_macs(mcfg, H, W, "backbone") / count_macs(dense, H, W, "backbone")
    print(
        f"params={count_params(mcfg)} macs={count_macs(mcfg, H, W)} flops={2 * count_macs(mcfg, H, W)} "
        f"backbone_macs={count_macs(mcfg, H, W, 'backbone')} estimator_macs={count_macs(mcfg, H, W, 'estimators')} "
        f"backbone_mac_ratio_vs_p1={ratio:.6f} closed_form_ratio={closed:.6f} res={H}x{W}"
    )
    return EXIT_OK


def _green(weights: np.ndarray) -> np.ndarray:
    """Greyscale-to-green map: larger absolute weight, greener pixel."""
    w = np.abs(weights)
    w = w / w.max() if w.max() > 0 else w
    img = np.zeros(w.shape + (3,))
    img[..., 0] = 0.15 * (1 - w)
    img[..., 1] = w
    img[..., 2] = 0.15 * (1 - w)
    return img


def cmd_viz_kernels(args) -> int:
    from .deformable import effective_sampling_map
    from .fileio import write_image
    from .model import forward, frames_to_tensor, tensor_to_frames

    params = _load_ckpt(args.ckpt)
    f1, f2 = _load_frame(args.frame1), _load_frame(args.frame2)
    try:
        x, y = (int(v) for v in args.pixel.split(","))
    except ValueError:
        raise UsageError(f"--pixel expects x,y, got {args.pixel!r}") from None
    t = args.t if params.config.multi_time else None
    if params.config.multi_time and t is None:
        raise UsageError("multi-time checkpoint: give --t")
    dtype = params.dtype
    frozen = params.frozen()
    out, fields = forward(frozen, frames_to_tensor(f1, dtype=dtype), frames_to_tensor(f2, dtype=dtype), t)
    try:
        m1, m2 = effective_sampling_map(fields, (x, y))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    write_image(d / "weights_frame1.ppm", _green(m1))
    write_image(d / "weights_frame2.ppm", _green(m2))
    write_image(d / "synthesized.ppm", np.clip(tensor_to_frames(out)[0], 0, 1))
    print(f"pixel={x},{y} mass1={m1.sum():.6f} mass2={m2.sum():.6f} out={d}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="edsc", description="Deformable separable convolution frame interpolation.")
    parser.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible run")
    parser.add_argument("--threads", type=int, default=None, help="BLAS threads (1 = bit reproducible)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add_set(p):
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config value")

    p = sub.add_parser("gen-data", help="render a synthetic sequence")
    p.add_argument("--spec", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--force", action="store_true")
    add_set(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on synthetic data")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    add_set(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("interp", help="synthesize intermediate frames")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--frame1", required=True)
    p.add_argument("--frame2", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--t", type=float, default=None)
    g.add_argument("--times", default=None)
    p.add_argument("--naive-rescale", action="store_true", help="scale midpoint offsets linearly to t")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_interp)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--flow", default=None)
    p.add_argument("--frame1", default=None)
    p.add_argument("--frame2", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("count", help="parameter and MAC accounting")
    p.add_argument("--config", default=None)
    p.add_argument("--res", default=None, help="HxW")
    add_set(p)
    p.set_defaults(fn=cmd_count)

    p = sub.add_parser("viz-kernels", help="where one output pixel samples from")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--frame1", required=True)
    p.add_argument("--frame2", required=True)
    p.add_argument("--pixel", required=True, help="x,y")
    p.add_argument("--t", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_viz_kernels)
    return parser


def main(argv: Optional[list] = None) -> int:
    from threadpoolctl import threadpool_limits

    from .tensor import NonFiniteError

    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = 1 if args.deterministic else args.threads
    if threads is not None and threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        if threads is None:
            return args.fn(args)
        with threadpool_limits(limits=threads):
            return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
