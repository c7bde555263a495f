"""Command-line entry point: track, eval, train, synth, flow, gradcheck.

Exit codes: 0 success, 1 validation failure (bad config, bad arguments,
failed gradient check), 2 I/O failure (missing or malformed files).
"""
import argparse
import dataclasses
import os
import re
import sys

import numpy as np
from PIL import Image

from . import gradcheck
from .config import RunConfig, load_config
from .errors import FormatError, InvalidInputError
from .featext import to_gray
from .flowwarp import estimate_flow, write_flo
from .tracker import run_sequence
from .traineval.metrics import evaluate, read_rects, write_rects
from .traineval.synth import synth_sequence
from .traineval.train import save_bundle, train

IMAGE_EXTS = (".png", ".pgm", ".ppm", ".pnm", ".jpg", ".jpeg", ".bmp")
GT_NAME = "groundtruth_rect.txt"


class CliIOError(Exception):
    """A file or directory the command needs is missing or unreadable."""


# --- image and sequence I/O ------------------------------------------------------

def read_image(path):
    """8-bit grayscale or RGB image as float64 in [0, 1], shape (H, W, 1|3)."""
    try:
        with Image.open(path) as im:
            im = im.convert("L") if im.mode in ("L", "I", "I;16", "1", "P", "LA") else im.convert("RGB")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise CliIOError(f"cannot read image {path}: {exc}") from None
    return arr[:, :, None] if arr.ndim == 2 else arr


def write_image(arr, path):
    a = np.clip(np.round(np.asarray(arr) * 255.0), 0, 255).astype(np.uint8)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    Image.fromarray(a).save(path)


def _numbered(name):
    stem, ext = os.path.splitext(name)
    return ext.lower() in IMAGE_EXTS and re.fullmatch(r"\d+", stem) is not None


def frame_paths(seq_dir):
    """Numbered image files of a sequence, from ``seq_dir/img`` if it exists."""
    img_dir = os.path.join(seq_dir, "img")
    d = img_dir if os.path.isdir(img_dir) else seq_dir
    if not os.path.isdir(d):
        raise CliIOError(f"sequence directory {seq_dir} does not exist")
    names = sorted((n for n in os.listdir(d) if _numbered(n)), key=lambda n: int(os.path.splitext(n)[0]))
    if not names:
        raise CliIOError(f"no numbered frames in {d}")
    return [os.path.join(d, n) for n in names]


def read_sequence(seq_dir):
    frames = [read_image(p) for p in frame_paths(seq_dir)]
    gt_path = os.path.join(seq_dir, GT_NAME)
    if not os.path.exists(gt_path):
        raise CliIOError(f"missing {gt_path}")
    return frames, read_rects(gt_path)


def write_sequence(frames, boxes, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    width = max(4, len(str(len(frames))))
    for k, f in enumerate(frames, 1):
        write_image(f, os.path.join(out_dir, f"{k:0{width}d}.png"))
    write_rects(boxes, os.path.join(out_dir, GT_NAME))


def format_diag(d):
    gates = ",".join(f"{g:.4f}" for g in d.gates)
    weights = ",".join(f"{w:.4f}" for w in d.frame_weights)
    return (f"frame={d.frame + 1} peak={d.peak:.6f} pnr={d.pnr:.4f} scale={d.scale:.6f} "
            f"updated={int(d.updated)} gates={gates} weights={weights}")


def _config(path):
    if not path:
        return RunConfig()
    if not os.path.exists(path):
        raise CliIOError(f"config file {path} does not exist")
    return load_config(path)


# --- subcommands -----------------------------------------------------------------

def cmd_track(args):
    cfg = _config(args.config)
    tcfg = cfg.tracker
    if args.flow_dir:
        if not os.path.isdir(args.flow_dir):
            raise CliIOError(f"flow directory {args.flow_dir} does not exist")
        tcfg = dataclasses.replace(tcfg, flow="dir", flow_dir=args.flow_dir)
    frames, gt = read_sequence(args.seq)
    boxes, diags = run_sequence(frames, gt[0], tcfg)
    write_rects(boxes, args.out)
    if args.diag:
        with open(args.diag, "w") as fh:
            fh.write("".join(format_diag(d) + "\n" for d in diags))
    return 0


def cmd_eval(args):
    for p in (args.pred, args.gt):
        if not os.path.exists(p):
            raise CliIOError(f"{p} does not exist")
    report = evaluate(read_rects(args.pred), read_rects(args.gt))
    with open(args.out, "w") as fh:
        fh.write(report.to_json() + "\n")
    print(f"precision@20={report.precision_at_20:.4f} auc={report.auc:.4f}")
    return 0


def _training_sequences(data_dir):
    if not os.path.isdir(data_dir):
        raise CliIOError(f"data directory {data_dir} does not exist")
    if os.path.exists(os.path.join(data_dir, GT_NAME)):
        return [read_sequence(data_dir)]
    subs = sorted(os.path.join(data_dir, n) for n in os.listdir(data_dir)
                  if os.path.exists(os.path.join(data_dir, n, GT_NAME)))
    if not subs:
        raise CliIOError(f"no sequences (directories with {GT_NAME}) under {data_dir}")
    return [read_sequence(s) for s in subs]


def cmd_train(args):
    cfg = _config(args.config)
    seqs = [([_gray(f) for f in frames], boxes) for frames, boxes in _training_sequences(args.data)]
    result = train(seqs, cfg.train, progress=lambda e, l: print(f"epoch={e + 1} loss={l:.6f}"))
    save_bundle(result.models, args.out)
    return 0


def _gray(frame):
    return frame if frame.shape[2] == 1 else to_gray(frame)[:, :, None]


def cmd_synth(args):
    cfg = _config(args.config)
    frames, boxes = synth_sequence(cfg.synth)
    write_sequence(frames, boxes, args.out)
    return 0


def cmd_flow(args):
    cfg = _config(args.config)
    a, b = _gray(read_image(args.a)), _gray(read_image(args.b))
    write_flo(estimate_flow(a, b, cfg.flow), args.out)
    return 0


def cmd_gradcheck(args):
    ok = True
    for r in gradcheck.run_suite(args.seed, args.instances):
        ok &= r.ok
        print(f"{r.component:14s} max_rel_error={r.max_error:.3e} time={r.seconds:.2f}s "
              f"{'ok' if r.ok else 'FAIL'}")
    return 0 if ok else 1


def build_parser():
    p = argparse.ArgumentParser(prog="flowcf", description="Flow-guided correlation filter tracking toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("track", help="track one sequence directory")
    t.add_argument("--seq", required=True)
    t.add_argument("--config", default="")
    t.add_argument("--out", required=True)
    t.add_argument("--diag", default="")
    t.add_argument("--flow-dir", default="")
    t.set_defaults(func=cmd_track)

    e = sub.add_parser("eval", help="precision/success metrics of a prediction rect file")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    tr = sub.add_parser("train", help="toy end-to-end training")
    tr.add_argument("--data", required=True)
    tr.add_argument("--config", default="")
    tr.add_argument("--out", required=True)
    tr.set_defaults(func=cmd_train)

    s = sub.add_parser("synth", help="render a synthetic sequence")
    s.add_argument("--config", default="")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    f = sub.add_parser("flow", help="estimate flow between two images")
    f.add_argument("--a", required=True)
    f.add_argument("--b", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--config", default="")
    f.set_defaults(func=cmd_flow)

    g = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--instances", type=int, default=10)
    g.set_defaults(func=cmd_gradcheck)
    return p


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except (CliIOError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
