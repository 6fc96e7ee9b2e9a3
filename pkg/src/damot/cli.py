"""Command-line entry point: synth, track, eval, train-da, ablate, report.

Every command writes a run manifest (config hash, seeds, input digests) next
to its outputs, exits nonzero on error, and keeps stdout for the report
(diagnostics go to stderr).
"""

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .assoc import run_emd, run_sort
from .metrics import evaluate_sequence, pool_combined, report_to_csv
from .mot_io import RunConfig, load_config, parse_detections, parse_mot_file, \
    write_mot_file
from .synth import SOURCE_SPEC, TARGET_SPEC, AgentAppearance, DomainSpec, \
    gen_synthetic_sequence
from .train import evaluate_toy, train
from .autodiff import save_checkpoint


def _max_workers() -> int:
    env = os.environ.get("DA_MOT_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: str, command: str, config_text: str,
                    seeds, inputs: dict):
    manifest = {
        "command": command,
        "config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
        "seeds": seeds,
        "input_digests": {p: _sha256(p) for p in inputs},
        "input_roles": inputs,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_frames(path: str, images: np.ndarray):
    """Frame tensor file: one text header line `frames,channels,H,W`, then
    the raw little-endian float64 data."""
    f, c, h, w = images.shape
    with open(path, "wb") as fh:
        fh.write(f"{f},{c},{h},{w}\n".encode("ascii"))
        fh.write(images.astype("<f8").tobytes())


def read_frames(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").strip()
        f, c, h, w = (int(v) for v in header.split(","))
        data = np.frombuffer(fh.read(), dtype="<f8")
    return data.reshape(f, c, h, w).copy()


# ---------------------------------------------------------------------------
# Spec files
# ---------------------------------------------------------------------------

def load_domain_spec(text: str) -> DomainSpec:
    """Parse a `key = value` domain spec file."""
    values = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()
    appearance = AgentAppearance(
        radius=float(values.pop("radius", 4.0)),
        intensity=float(values.pop("intensity", 0.9)),
        profile=values.pop("profile", "flat"),
    )
    return DomainSpec(
        background=values.pop("background", "plain"),
        appearance=appearance,
        agent_count_range=(int(values.pop("count_min", 2)),
                           int(values.pop("count_max", 4))),
        speed_distribution=(float(values.pop("speed_mean", 1.5)),
                            float(values.pop("speed_std", 0.5))),
        pause_probability=float(values.pop("pause_probability", 0.1)),
        background_level=float(values.pop("background_level", 0.1)),
    )


def _resolve_spec(arg: str) -> tuple:
    if arg == "source":
        return SOURCE_SPEC, "builtin:source"
    if arg == "target":
        return TARGET_SPEC, "builtin:target"
    with open(arg) as fh:
        text = fh.read()
    return load_domain_spec(text), text


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec, spec_text = _resolve_spec(args.spec)
    domain = "target" if args.spec == "target" else "source"
    images, seq = gen_synthetic_sequence(spec, args.frames, args.seed,
                                         name=os.path.basename(args.out) or "synth",
                                         domain=domain)
    os.makedirs(args.out, exist_ok=True)
    write_frames(os.path.join(args.out, "frames.bin"), images)
    with open(os.path.join(args.out, "gt.txt"), "w") as fh:
        fh.write(write_mot_file(seq))
    _write_manifest(args.out, "synth", spec_text, [args.seed], {})
    print(f"wrote {seq.frame_count} frames, {len(seq.tracks)} tracks to {args.out}")
    return 0


def cmd_track(args) -> int:
    with open(args.dets) as fh:
        per_frame = parse_detections(fh.read())
    runner = {"sort": run_sort, "emd": run_emd}[args.method]
    seq = runner(per_frame, name=args.method)
    with open(args.out, "w") as fh:
        fh.write(write_mot_file(seq))
    out_dir = os.path.dirname(os.path.abspath(args.out))
    _write_manifest(out_dir, "track", args.method, [], {args.dets: "detections"})
    print(f"{args.method}: {len(seq.tracks)} tracks over {seq.frame_count} frames")
    return 0


def _seq_files(directory: str) -> dict:
    return {os.path.splitext(f)[0]: os.path.join(directory, f)
            for f in sorted(os.listdir(directory)) if f.endswith(".txt")}


def cmd_eval(args) -> int:
    gt_files = _seq_files(args.gt)
    pred_files = _seq_files(args.pred)
    if set(gt_files) != set(pred_files):
        only_gt = sorted(set(gt_files) - set(pred_files))
        only_pred = sorted(set(pred_files) - set(gt_files))
        print(f"sequence name mismatch: gt-only={only_gt} pred-only={only_pred}",
              file=sys.stderr)
        return 1
    if not gt_files:
        print("no sequences found", file=sys.stderr)
        return 1

    def score(name):
        with open(gt_files[name]) as fh:
            gt = parse_mot_file(fh.read(), name=name)
        with open(pred_files[name]) as fh:
            pred = parse_mot_file(fh.read(), name=name,
                                  frame_count=gt.frame_count)
        return name, evaluate_sequence(gt, pred, args.iou)

    with ThreadPoolExecutor(max_workers=_max_workers()) as pool:
        reports = dict(pool.map(score, sorted(gt_files)))
    report = pool_combined(reports)
    csv_text = report_to_csv(report)
    with open(args.out, "w") as fh:
        fh.write(csv_text)
    inputs = {p: "gt" for p in gt_files.values()}
    inputs.update({p: "pred" for p in pred_files.values()})
    _write_manifest(os.path.dirname(os.path.abspath(args.out)), "eval",
                    f"iou={args.iou}", [], inputs)
    sys.stdout.write(csv_text)
    return 0


def _load_sequence_dirs(root: str, with_labels: bool):
    """Each sequence is a subdirectory holding frames.bin (+ gt.txt)."""
    out = []
    paths = []
    for entry in sorted(os.listdir(root)):
        d = os.path.join(root, entry)
        frames_path = os.path.join(d, "frames.bin")
        if not os.path.isfile(frames_path):
            continue
        images = read_frames(frames_path)
        paths.append(frames_path)
        if with_labels:
            gt_path = os.path.join(d, "gt.txt")
            with open(gt_path) as fh:
                seq = parse_mot_file(fh.read(), name=entry,
                                     frame_count=images.shape[0])
            paths.append(gt_path)
            out.append((images, seq))
        else:
            out.append(images)
    if not out:
        raise FileNotFoundError(f"no sequences under {root}")
    return out, paths


def _run_training(cfg: RunConfig, config_text: str, source_dir: str,
                  target_dir: str, out_dir: str):
    source_data, src_paths = _load_sequence_dirs(source_dir, with_labels=True)
    target_images, tgt_paths = _load_sequence_dirs(target_dir, with_labels=False)
    os.makedirs(out_dir, exist_ok=True)

    step_rows = ["step,l_mot,l_local,l_global,l_track,total"]

    def on_step(step, b):
        step_rows.append(f"{step},{b.l_mot!r},{b.l_local!r},{b.l_global!r},"
                         f"{b.l_track!r},{b.total!r}")

    model, history = train(cfg, source_data, target_images, step_fn=on_step)
    with open(os.path.join(out_dir, "history.csv"), "w") as fh:
        fh.write(history.to_csv())
    with open(os.path.join(out_dir, "steps.csv"), "w") as fh:
        fh.write("".join(r + "\n" for r in step_rows))
    save_checkpoint(model.parameters(), os.path.join(out_dir, "model.ckpt"))
    inputs = {p: "source" for p in src_paths}
    inputs.update({p: "target" for p in tgt_paths})
    _write_manifest(out_dir, "train-da", config_text, [cfg.trainer.seed], inputs)
    return model, history


def cmd_train_da(args) -> int:
    with open(args.config) as fh:
        config_text = fh.read()
    cfg = load_config(config_text)
    model, history = _run_training(cfg, config_text, args.source, args.target,
                                   args.out)
    last = history.epochs[-1]
    print(f"trained {len(history.epochs)} epochs: total={last.total:.4f} "
          f"probe_acc={last.probe_acc:.3f} mmd={last.mmd:.6f}")
    return 0


ABLATION_GRID = [   # (D_el, D_eg, D_tr) toggles
    (False, False, False),
    (True, False, False),
    (False, True, False),
    (True, True, False),
    (True, True, True),
]


def cmd_ablate(args) -> int:
    from dataclasses import replace
    with open(args.config) as fh:
        config_text = fh.read()
    base = load_config(config_text)
    source_data, _ = _load_sequence_dirs(args.source, with_labels=True)
    target_images, _ = _load_sequence_dirs(args.target, with_labels=False)
    test_data, test_paths = _load_sequence_dirs(args.target_test, with_labels=True)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [base.trainer.seed]

    rows = ["Del,Deg,Dtr,MOTA,IDF1,HOTA,FP,IDSW"]
    for el, eg, tr in ABLATION_GRID:
        vals = np.zeros(5)
        for seed in seeds:
            cfg = replace(base,
                          lambda_local=base.lambda_local if el else 0.0,
                          lambda_global=base.lambda_global if eg else 0.0,
                          lambda_track=base.lambda_track if tr else 0.0,
                          trainer=replace(base.trainer, seed=seed))
            model, _ = train(cfg, source_data, target_images)
            rep = evaluate_toy(model, test_data, iou_threshold=base.iou_match_threshold)
            clear, idr, hota = rep.combined
            vals += np.array([clear.mota, idr.idf1, hota.hota,
                              clear.fp / clear.frame_count, clear.idsw])
        mota, idf1, hota, fpf, idsw = (float(v) for v in vals / len(seeds))
        mark = lambda b: "+" if b else "-"
        rows.append(f"{mark(el)},{mark(eg)},{mark(tr)},{mota!r},{idf1!r},"
                    f"{hota!r},{fpf!r},{idsw!r}")

    os.makedirs(args.out, exist_ok=True)
    csv_text = "".join(r + "\n" for r in rows)
    with open(os.path.join(args.out, "ablation.csv"), "w") as fh:
        fh.write(csv_text)
    _write_manifest(args.out, "ablate", config_text, seeds,
                    {p: "target-test" for p in test_paths})
    sys.stdout.write(csv_text)
    return 0


def cmd_report(args) -> int:
    manifest_path = os.path.join(args.run, "manifest.json")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    print(f"command: {manifest['command']}")
    print(f"config:  {manifest['config_sha256']}")
    print(f"seeds:   {manifest['seeds']}")
    for artifact in ("history.csv", "ablation.csv"):
        path = os.path.join(args.run, artifact)
        if os.path.isfile(path):
            print(f"-- {artifact} --")
            with open(path) as fh:
                sys.stdout.write(fh.read())
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="damot")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic sequence")
    p.add_argument("--spec", required=True,
                   help="'source', 'target', or a key=value spec file")
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("track", help="run a detection-linking baseline")
    p.add_argument("--method", choices=("sort", "emd"), required=True)
    p.add_argument("--dets", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_track)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("train-da", help="run adversarial domain-adaptive training")
    p.add_argument("--config", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_da)

    p = sub.add_parser("ablate", help="run the 5-row discriminator ablation grid")
    p.add_argument("--config", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--target-test", required=True)
    p.add_argument("--seeds", default="", help="comma-separated seed list")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("report", help="print the report for a finished run")
    p.add_argument("--run", required=True)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:   # noqa: BLE001 -- single reporting point
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
