"""Command-line entry point.

Every subcommand writes its artifacts atomically under ``--out`` together with
a ``manifest.yaml`` recording the argv, resolved configuration, input hashes
and seed. ``kpdiscovery --replay <manifest> [--out DIR]`` re-runs a command
from its manifest.

Configuration precedence (for ``train`` and ``classify``): explicit flag, then
``--set key=value``, then the ``--config`` file, then built-in defaults.
"""
from __future__ import annotations

import argparse
import io as _io
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .config import PRESETS, ConfigError, dump, load_config, loss_weights, model_config, parse_value
from .io import (atomic_write_bytes, atomic_write_text, file_sha256, load_tracks,
                 read_csv, read_manifest, save_tracks_csv, save_tracks_npz, write_csv, write_manifest)

log = logging.getLogger("kpdiscovery")

# flag dest -> dotted config key
TRAIN_FLAGS = {
    "source": "data.source", "gap": "data.gap", "stride": "data.stride", "resolution": "data.resolution",
    "max_frames": "data.max_frames", "target": "target.kind", "k": "model.k", "sigma": "model.sigma",
    "encoder": "model.encoder", "extractor": "loss.extractor", "epochs": "train.epochs",
    "batch_size": "train.batch_size", "learning_rate": "train.learning_rate", "seed": "train.seed",
    "steps_per_epoch": "train.steps_per_epoch", "device": "train.device",
}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------- helpers

def _overrides(args, flag_map: dict[str, str]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = parse_value(value)
    for dest, key in flag_map.items():
        v = getattr(args, dest, None)
        if v is not None:
            out[key] = v
    return out


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _save_figure(fig, path: Path) -> None:
    buf = _io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    atomic_write_bytes(path, buf.getvalue())
    import matplotlib.pyplot as plt

    plt.close(fig)


def _figure(**kw):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt.subplots(**kw)


def _load_table(path) -> tuple[list[str], np.ndarray]:
    header, rows = read_csv(path)
    return header, np.array(rows, dtype=np.float64).reshape(len(rows), len(header))


def load_annotations(path) -> np.ndarray:
    """Annotated keypoints from a ``frame,kp_id,u,v`` CSV or an npz with ``keypoints``; returns ``(T, M, 2)``."""
    if str(path).endswith(".npz"):
        with np.load(path) as z:
            return np.asarray(z["keypoints"], dtype=np.float64)
    header, arr = _load_table(path)
    try:
        cols = [header.index(c) for c in ("frame", "kp_id", "u", "v")]
    except ValueError:
        raise ValueError(f"{path}: annotation CSV needs columns frame,kp_id,u,v") from None
    arr = arr[:, cols]
    frames, kps = np.unique(arr[:, 0]), np.unique(arr[:, 1])
    if len(arr) != len(frames) * len(kps):
        raise ValueError(f"{path}: annotations are not a complete (frame, kp_id) grid")
    arr = arr[np.lexsort((arr[:, 1], arr[:, 0]))]
    return arr[:, 2:4].reshape(len(frames), len(kps), 2)


def load_labels(path) -> np.ndarray:
    """Per-frame labels from a ``frame,label`` CSV or a ``.npy`` vector."""
    if str(path).endswith(".npy"):
        return np.load(path)
    header, arr = _load_table(path)
    if header[:2] != ["frame", "label"]:
        raise ValueError(f"{path}: label CSV needs columns frame,label")
    arr = arr[np.argsort(arr[:, 0], kind="stable")]
    return arr[:, 1].astype(np.int64)


def _agent_tracks(tracks: dict, n_agents: int) -> dict:
    """Reshape ``kp_id = agent * K + k`` tracks into ``(T, A, K, ...)`` arrays."""
    if n_agents == 1:
        return tracks
    T, AK = tracks["confidence"].shape
    if AK % n_agents:
        raise ValueError(f"{AK} keypoint columns cannot be split into {n_agents} agents")
    k = AK // n_agents
    return {
        "frame": tracks["frame"],
        "keypoints": tracks["keypoints"].reshape(T, n_agents, k, 2),
        "confidence": tracks["confidence"].reshape(T, n_agents, k),
        "covariance": tracks["covariance"].reshape(T, n_agents, k, 3),
    }


# --------------------------------------------------------------------------- subcommands

def cmd_train(args) -> dict:
    import torch

    from .data import load_frames
    from .objectives import build_extractor
    from .trainer import PairDataset, TrainConfig, build_model, train

    cfg = load_config(args.config, _overrides(args, TRAIN_FLAGS), preset=args.preset)
    if not cfg["data"]["source"]:
        raise ConfigError("data.source", "no frame source given")
    out = _out_dir(args)
    if cfg["train"]["threads"]:
        torch.set_num_threads(int(cfg["train"]["threads"]))
    frames = load_frames(cfg["data"]["source"], cfg["data"]["resolution"], cfg["data"]["max_frames"])
    tc = TrainConfig.from_config(cfg)
    dataset = PairDataset.from_videos([frames], gap=cfg["data"]["gap"], stride=cfg["data"]["stride"],
                                      target_kind=tc.target_kind, window=tc.ssim_window, c1=tc.ssim_c1,
                                      c2=tc.ssim_c2, negation=tc.negation)
    from .data import write_pair_manifest

    write_pair_manifest(dataset.pairs.tolist(), out / "pairs.txt")
    model = build_model(model_config(cfg), cfg["train"]["seed"])
    lc = cfg["loss"]
    extractor = build_extractor(lc["extractor"], lc["perceptual_blocks"], lc["extractor_pretrained"], cfg["train"]["seed"])
    result = train(dataset, tc, model, loss_weights(cfg), extractor, out_dir=out, resume=args.resume,
                   max_steps=args.max_steps)
    atomic_write_text(out / "config.yaml", dump(cfg))
    log.info("trained %d steps over %d epochs (converged=%s)", len(result.history), result.epochs_run, result.converged)
    return {"config": cfg, "inputs": {"source": cfg["data"]["source"], "config": args.config, "resume": args.resume},
            "seed": cfg["train"]["seed"]}


def cmd_discover(args) -> dict:
    from .data import load_frames
    from .estimator import predict_tracks
    from .heatfeat import extract_agents
    from .model import load_checkpoint

    model, _ = load_checkpoint(args.checkpoint)
    frames = load_frames(args.video, model.config.resolution)
    tracks = predict_tracks(model, frames, batch_size=args.batch_size, keep_raw=args.n_agents > 1)
    kp, conf, cov = tracks.keypoints, tracks.confidence, tracks.covariance
    if args.n_agents > 1:
        peaks = [extract_agents(r, args.n_agents, sigma=model.config.sigma) for r in tracks.raw]
        kp = np.stack([p.keypoints for p in peaks]).reshape(len(peaks), -1, 2)
        conf = np.stack([p.confidence for p in peaks]).reshape(len(peaks), -1)
        cov = np.stack([p.covariance for p in peaks]).reshape(len(peaks), -1, 3)
    out = _out_dir(args)
    save_tracks_csv(out / "tracks.csv", kp, conf, cov)
    save_tracks_npz(out / "tracks.npz", kp, conf, cov)
    return {"inputs": {"checkpoint": args.checkpoint, "video": args.video}}


def cmd_extract_features(args) -> dict:
    from .behavior import generic_features

    tracks = _agent_tracks(load_tracks(args.tracks), args.n_agents)
    fs = generic_features(tracks["keypoints"], tracks["confidence"], tracks["covariance"], args.include,
                          frames=tracks["frame"])
    out = _out_dir(args)
    buf = _io.BytesIO()
    np.savez(buf, values=fs.values, names=np.array(fs.names), frames=fs.frames)
    atomic_write_bytes(out / "features.npz", buf.getvalue())
    atomic_write_text(out / "feature_names.txt", "\n".join(fs.names) + "\n")
    return {"inputs": {"tracks": args.tracks}}


def _features_from(path, include, n_agents) -> np.ndarray:
    if str(path).endswith(".npz"):
        with np.load(path) as z:
            if "values" in z:
                return z["values"]
    from .behavior import generic_features

    tracks = _agent_tracks(load_tracks(path), n_agents)
    return generic_features(tracks["keypoints"], tracks["confidence"], tracks["covariance"], include,
                            frames=tracks["frame"]).values


def cmd_classify(args) -> dict:
    from .behavior import TemporalConvClassifier, seed_sweep

    cfg = load_config(args.config, _overrides(args, {}))
    cc = cfg["classify"]
    X = _features_from(args.tracks, cc["include"], args.n_agents)
    y = load_labels(args.labels)
    if len(X) != len(y):
        raise ValueError(f"{len(X)} feature frames but {len(y)} labels")
    split = int(round(len(X) * (1 - cc["test_fraction"])))
    classes = sorted(set(np.unique(y).tolist()) - set(args.ignore or []))

    def make(seed):
        return TemporalConvClassifier(hidden=cc["hidden"], n_layers=cc["n_layers"], kernel_size=cc["kernel_size"],
                                      frame_gap=cc["frame_gap"], epochs=cc["epochs"],
                                      learning_rate=cc["learning_rate"], seed=seed)

    res = seed_sweep(make, [X[:split]], [y[:split]], [X[split:]], [y[split:]], cc["seeds"], classes)
    out = _out_dir(args)
    rows = [(c, res["per_class_mean"][c], res["per_class_std"][c]) for c in res["per_class_mean"]]
    rows.append(("MAP", res["map_mean"], res["map_std"]))
    write_csv(out / "ap.csv", ("class", "ap_mean", "ap_std"), rows)
    print(f"MAP {res['map_mean']:.4f} +/- {res['map_std']:.4f} over {len(cc['seeds'])} seeds")
    return {"config": cfg, "inputs": {"tracks": args.tracks, "labels": args.labels, "config": args.config},
            "seed": list(cc["seeds"])}


def cmd_evaluate_regression(args) -> dict:
    from .evalkit import fit_keypoint_regression

    tr = load_tracks(args.train_tracks)["keypoints"]
    te = load_tracks(args.test_tracks)["keypoints"]
    atr, ate = load_annotations(args.train_annotations), load_annotations(args.test_annotations)
    groups = None
    if args.groups:
        groups = Path(args.groups).read_text().split()
    res = fit_keypoint_regression(tr, atr, te, ate, groups)
    out = _out_dir(args)
    rows = [("train", res.train_error), ("test", res.test_error)] + sorted(res.per_group.items())
    write_csv(out / "regression.csv", ("split", "percent_error"), rows)
    write_csv(out / "coefficients.csv", [f"y{j}" for j in range(res.coef.shape[1])], res.coef.tolist())
    pred = (te.reshape(len(te), -1) @ res.coef).reshape(ate.shape)
    fig, ax = _figure(figsize=(5, 5))
    ax.scatter(ate[..., 0].ravel(), ate[..., 1].ravel(), s=4, label="annotated")
    ax.scatter(pred[..., 0].ravel(), pred[..., 1].ravel(), s=4, label="regressed")
    ax.set_xlim(0, 1), ax.set_ylim(1, 0), ax.legend()
    ax.set_title(f"test %-MSE {res.test_error:.3f}")
    _save_figure(fig, out / "regression.png")
    print(f"train {res.train_error:.4f}  test {res.test_error:.4f}")
    return {"inputs": {"train_tracks": args.train_tracks, "test_tracks": args.test_tracks,
                       "train_annotations": args.train_annotations, "test_annotations": args.test_annotations}}


def cmd_analyze_pulse(args) -> dict:
    from .evalkit import pulse_spectrogram, select_confident

    tracks = load_tracks(args.tracks)
    idx = select_confident(tracks["confidence"], args.top, args.min_confidence)
    if len(idx) < 2:
        raise ValueError("fewer than two keypoints pass the confidence selection")
    spec = pulse_spectrogram(tracks["keypoints"][:, idx], args.fps, args.window, args.overlap)
    out = _out_dir(args)
    write_csv(out / "pulse.csv", ("time_s", "dominant_hz"), zip(spec.times, spec.dominant))
    fig, ax = _figure(figsize=(7, 4))
    ax.pcolormesh(spec.times, spec.frequencies, spec.magnitude, shading="nearest")
    ax.plot(spec.times, spec.dominant, "w.", ms=4)
    ax.set_xlabel("time (s)"), ax.set_ylabel("frequency (Hz)")
    _save_figure(fig, out / "spectrogram.png")
    print(f"dominant {spec.overall_dominant:.3f} Hz (bin width {spec.resolution:.3f} Hz)")
    return {"inputs": {"tracks": args.tracks}}


def cmd_analyze_wind(args) -> dict:
    from .evalkit import WindSample, WindSpeedModel, clip_samples

    if args.samples:
        header, arr = _load_table(args.samples)
        if header[:2] != ["phi_bar", "U_bar"]:
            raise ValueError(f"{args.samples}: sample CSV needs columns phi_bar,U_bar[,I_u]")
        samples = [WindSample(r[0], r[1], r[2] if len(r) > 2 else None) for r in arr]
    elif args.tracks and args.wind:
        kp = load_tracks(args.tracks)["keypoints"]
        header, arr = _load_table(args.wind)
        if header[0] != "U":
            raise ValueError(f"{args.wind}: wind CSV needs a per-frame U column")
        samples = clip_samples(kp, args.fps, arr[:, 0], args.clip_seconds,
                               arr[:, 1] if arr.shape[1] > 1 else None)
    else:
        raise UsageError("analyze-wind needs --samples, or --tracks with --wind")
    phi = np.array([s.phi_bar for s in samples])
    u = np.array([s.U_bar for s in samples])
    model = WindSpeedModel(args.exponent).fit(phi, u)
    r2 = model.score(phi, u)
    out = _out_dir(args)
    write_csv(out / "wind_samples.csv", ("phi_bar", "U_bar", "I_u"),
              ((s.phi_bar, s.U_bar, "" if s.I_u is None else s.I_u) for s in samples))
    write_csv(out / "wind_fit.csv", ("exponent", "C0", "r2", "n"), [(args.exponent, model.coef_, r2, len(samples))])
    g = phi**args.exponent
    fig, ax = _figure(figsize=(5, 4))
    ax.scatter(g, u, s=10)
    xs = np.linspace(0, g.max(), 50)
    ax.plot(xs, model.coef_ * xs, "r-", label=f"C0={model.coef_:.3g}, R2={r2:.3f}")
    ax.set_xlabel(f"phi_bar^{args.exponent:g}"), ax.set_ylabel("U_bar (m/s)"), ax.legend()
    _save_figure(fig, out / "wind_fit.png")
    print(f"C0 {model.coef_:.5g}  R2 {r2:.4f}")
    return {"inputs": {"samples": args.samples, "tracks": args.tracks, "wind": args.wind}}


def cmd_synth(args) -> dict:
    from .data import generate_synthetic, make_scene

    video = generate_synthetic(make_scene(args.agents, args.size, args.diameter), args.frames, args.seed)
    out = _out_dir(args)
    buf = _io.BytesIO()
    np.save(buf, (video.frames * 255).round().astype(np.uint8))
    atomic_write_bytes(out / "frames.npy", buf.getvalue())
    nt = video.normalized_tracks
    T, A, P, _ = nt.shape
    write_csv(out / "ground_truth.csv", ("frame", "agent", "part", "u", "v"),
              ((t, a, p, nt[t, a, p, 0], nt[t, a, p, 1]) for t in range(T) for a in range(A) for p in range(P)))
    write_csv(out / "poses.csv", ("frame", "agent", "x", "y", "theta"),
              ((t, a, *video.poses[t, a]) for t in range(T) for a in range(A)))
    if A >= 2:
        d = np.linalg.norm(video.poses[:, 0, :2] - video.poses[:, 1, :2], axis=-1)
        labels = (d < args.proximity * args.diameter).astype(int)
        write_csv(out / "labels.csv", ("frame", "label"), zip(range(T), labels))
    return {"seed": args.seed}


# --------------------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kpdiscovery", description="Keypoint discovery from frame-difference reconstruction.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--replay", metavar="MANIFEST", help="re-run the command recorded in a manifest.yaml")
    p.add_argument("--out", help="with --replay: write to this directory instead of the recorded one")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(func=func)
        return sp

    t = add("train", cmd_train, "Train a keypoint model on frame pairs of one video.")
    t.add_argument("--config", help="YAML/JSON configuration file")
    t.add_argument("--preset", choices=sorted(PRESETS), help="per-dataset defaults applied before --config")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config key (repeatable)")
    t.add_argument("--resume", help="resume from a state.pt written by an earlier run")
    t.add_argument("--max-steps", type=int, help="stop after this many optimisation steps")
    t.add_argument("--source", help="frame directory, video file or .npy/.npz stack (data.source)")
    t.add_argument("--gap", type=int, help="frame gap between reference and future frame (data.gap)")
    t.add_argument("--stride", type=int, help="step between consecutive pairs (data.stride)")
    t.add_argument("--resolution", type=int, help="square input side, multiple of 32 (data.resolution)")
    t.add_argument("--max-frames", type=int, help="use at most this many frames (data.max_frames)")
    t.add_argument("--target", choices=("ssim", "abs_diff", "raw_diff", "image"), help="reconstruction target (target.kind)")
    t.add_argument("--k", type=int, help="number of keypoints (model.k)")
    t.add_argument("--sigma", type=float, help="rendering std in normalized units (model.sigma)")
    t.add_argument("--encoder", help="resnet18|resnet34|resnet50|tiny (model.encoder)")
    t.add_argument("--extractor", choices=("vgg16", "tiny"), help="perceptual feature extractor (loss.extractor)")
    t.add_argument("--epochs", type=int, help="epoch cap (train.epochs)")
    t.add_argument("--batch-size", type=int, help="pairs per batch (train.batch_size)")
    t.add_argument("--learning-rate", type=float, help="Adam learning rate (train.learning_rate)")
    t.add_argument("--seed", type=int, help="random seed (train.seed)")
    t.add_argument("--steps-per-epoch", type=int, help="cap on batches per epoch (train.steps_per_epoch)")
    t.add_argument("--device", help="torch device (train.device)")

    d = add("discover", cmd_discover, "Run a trained model over a video and export keypoint tracks.")
    d.add_argument("--checkpoint", required=True, help="checkpoint.pt from train")
    d.add_argument("--video", required=True, help="frame directory, video file or .npy/.npz stack")
    d.add_argument("--out", required=True, help="output directory (tracks.csv, tracks.npz)")
    d.add_argument("--n-agents", type=int, default=1, help="identical agents per frame; >1 enables multi-peak extraction")
    d.add_argument("--batch-size", type=int, default=64, help="frames per forward pass")

    e = add("extract-features", cmd_extract_features, "Compute per-frame trajectory features from keypoint tracks.")
    e.add_argument("--tracks", required=True, help="tracks.csv or tracks.npz")
    e.add_argument("--out", required=True, help="output directory (features.npz, feature_names.txt)")
    e.add_argument("--include", nargs="+", default=["pose", "conf", "cov"], choices=("pose", "conf", "cov"),
                   help="optional feature groups")
    e.add_argument("--n-agents", type=int, default=1, help="split kp_id columns into this many agents")

    c = add("classify", cmd_classify, "Train the temporal-conv classifier and report per-class AP and MAP.")
    c.add_argument("--tracks", required=True, help="tracks file or features.npz")
    c.add_argument("--labels", required=True, help="per-frame labels (frame,label CSV or .npy)")
    c.add_argument("--config", help="configuration file (classify.* keys)")
    c.add_argument("--out", required=True, help="output directory (ap.csv)")
    c.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config key (repeatable)")
    c.add_argument("--n-agents", type=int, default=1, help="split kp_id columns into this many agents")
    c.add_argument("--ignore", type=int, nargs="*", help="label values excluded from MAP (e.g. 'other')")

    r = add("evaluate-regression", cmd_evaluate_regression, "Linear regression from discovered to annotated keypoints.")
    r.add_argument("--train-tracks", required=True, help="discovered tracks on training images")
    r.add_argument("--train-annotations", required=True, help="frame,kp_id,u,v CSV for training images")
    r.add_argument("--test-tracks", required=True, help="discovered tracks on test images")
    r.add_argument("--test-annotations", required=True, help="frame,kp_id,u,v CSV for test images")
    r.add_argument("--groups", help="whitespace-separated group name per test image")
    r.add_argument("--out", required=True, help="output directory (regression.csv, regression.png)")

    pu = add("analyze-pulse", cmd_analyze_pulse, "Spectrogram of the mean inter-keypoint distance.")
    pu.add_argument("--tracks", required=True, help="tracks.csv or tracks.npz")
    pu.add_argument("--fps", type=float, required=True, help="frame rate of the tracks")
    pu.add_argument("--window", type=float, default=4.0, help="window length in seconds")
    pu.add_argument("--overlap", type=float, default=0.5, help="window overlap fraction")
    pu.add_argument("--top", type=int, help="use the N keypoints of highest mean confidence")
    pu.add_argument("--min-confidence", type=float, help="use keypoints whose mean confidence reaches this value")
    pu.add_argument("--out", required=True, help="output directory (pulse.csv, spectrogram.png)")

    w = add("analyze-wind", cmd_analyze_wind, "Fit mean wind speed against sway amplitude.")
    w.add_argument("--samples", help="phi_bar,U_bar[,I_u] CSV")
    w.add_argument("--tracks", help="keypoint tracks of the swaying plant")
    w.add_argument("--wind", help="per-frame U[,I_u] CSV aligned with --tracks")
    w.add_argument("--fps", type=float, default=30.0, help="frame rate for --tracks")
    w.add_argument("--clip-seconds", type=float, default=600.0, help="clip length for --tracks")
    w.add_argument("--exponent", type=float, default=0.5, help="power applied to phi_bar")
    w.add_argument("--out", required=True, help="output directory (wind_fit.csv, wind_fit.png)")

    s = add("synth", cmd_synth, "Render a synthetic video of moving sprites with ground truth.")
    s.add_argument("--agents", type=int, default=2, help="number of sprites")
    s.add_argument("--frames", type=int, default=500, help="number of frames")
    s.add_argument("--seed", type=int, default=0, help="random seed")
    s.add_argument("--size", type=int, default=64, help="square frame side in pixels")
    s.add_argument("--diameter", type=float, default=16.0, help="sprite diameter in pixels")
    s.add_argument("--proximity", type=float, default=1.5,
                   help="label frames 1 when the first two sprites are closer than this many diameters")
    s.add_argument("--out", required=True, help="output directory (frames.npy, ground_truth.csv, ...)")
    return p


def _replay_argv(manifest_path: str, out: str | None) -> list[str]:
    manifest = read_manifest(manifest_path)
    argv = list(manifest["argv"])
    for name, rec in (manifest.get("inputs") or {}).items():
        if Path(rec["path"]).exists() and file_sha256(rec["path"]) != rec["sha256"]:
            log.warning("input %s (%s) changed since the recorded run", name, rec["path"])
    if out is not None:
        i = argv.index("--out")
        argv[i + 1] = out
    return argv


def run(argv: Sequence[str]) -> int:
    argv = list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.replay:
        if args.command:
            parser.error("--replay takes no subcommand")
        argv = _replay_argv(args.replay, args.out)
        args = parser.parse_args(argv)
    elif args.command is None:
        parser.error("a subcommand is required")
    try:
        record = args.func(args) or {}
        sub_argv = argv[argv.index(args.command):]
        write_manifest(args.out, args.command, sub_argv, record.get("config"), record.get("inputs"), record.get("seed"))
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 1
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    return run(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
