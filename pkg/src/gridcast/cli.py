"""Operator commands wiring the pipeline end to end.

Subcommands: gen-data, train, predict, eval, ablate, bench-attn. Every
command reads an optional ``key=value`` config file, applies ``--set``
overrides on top, then any direct flags, and writes a run manifest (resolved
config, its hash, library versions) next to its artifacts.

Exit codes: 0 success, 1 bad configuration or arguments, 2 missing input
file, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

import gridcast
from gridcast.attention import HeadMask, bench_temporal_attention
from gridcast.dst import (BOX_DTYPE, EpisodeRecord, SensorModel,
                          generate_episode, pignistic, read_episode,
                          write_episode)
from gridcast.metrics import PersistenceModel, evaluate
from gridcast.plots import svg_line_chart, write_pgm
from gridcast.prednet import build_variant, count_params, load_checkpoint
from gridcast.tensor import GridcastError
from gridcast.training import TrainConfig, train

__all__ = ["main", "ConfigError", "MissingInputError"]


class ConfigError(Exception):
    """Unknown key, unparseable value, or out-of-range setting."""


class MissingInputError(Exception):
    """A required input file or directory does not exist."""


class _ArgError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; we reserve 2 for missing
    # inputs, so surface parse problems as config errors instead
    def error(self, message):
        raise _ArgError(message)


# ---------------------------------------------------------------------------
# Config schemas

def _as_int(v) -> int:
    return int(str(v), 10)


def _as_float(v) -> float:
    return float(v)


def _as_str(v) -> str:
    return str(v)


def _as_opt_float(v):
    s = str(v).strip().lower()
    return None if s in ("", "none") else float(v)


def _as_opt_int(v):
    s = str(v).strip().lower()
    return None if s in ("", "none") else _as_int(v)


def _as_int_list(v) -> tuple[int, ...]:
    if isinstance(v, (tuple, list)):
        return tuple(int(x) for x in v)
    items = [tok for tok in str(v).replace(",", " ").split() if tok]
    if not items:
        raise ValueError("empty list")
    return tuple(int(tok) for tok in items)


# key -> (converter, default, help)
SCHEMAS: dict[str, dict[str, tuple]] = {
    "gen-data": {
        "episodes": (_as_int, 8, "number of episodes to simulate"),
        "scenario": (_as_str, "mixed",
                     "passing | intersection | clutter | mixed"),
        "length": (_as_int, 30, "frames per episode"),
        "grid": (_as_int, 32, "grid side length in cells"),
        "resolution": (_as_float, 1.0 / 3.0, "cell edge length in meters"),
        "alpha": (_as_float, 0.98, "per-step mass discount toward unknown"),
        "n_rays": (_as_int, 240, "range rays per scan"),
        "max_range": (_as_float, 5.0, "sensor range in meters"),
        "noise_sigma": (_as_float, 0.02, "range noise std dev in meters"),
        "p_occ": (_as_float, 0.7, "occupied mass painted at a return"),
        "p_free": (_as_float, 0.6, "free mass painted along a ray"),
        "seed": (_as_int, 0, "world and sensor randomness seed"),
    },
    "train": {
        "data": (_as_str, "", "episode file or directory (required)"),
        "variant": (_as_str, "taa",
                    "convlstm | taa | saa | predrnnpp"),
        "scale": (_as_str, "desk", "desk | full"),
        "n_heads": (_as_int, 4, "attention heads per attention layer"),
        "horizon": (_as_int, 4, "temporal attention history span"),
        "gate_param_mode": (_as_str, "spatial",
                            "per-cell (spatial) or per-channel gate "
                            "biases (stacks only)"),
        "n_context": (_as_int, 5, "observed frames per sample"),
        "pred_len": (_as_int, 15, "predicted frames per sample"),
        "epochs": (_as_int, 200, "training epochs"),
        "samples_per_epoch": (_as_int, 32, "windows drawn per epoch"),
        "batch_size": (_as_int, 4, "samples per optimizer step"),
        "lr": (_as_float, 1e-3, "Adam learning rate"),
        "beta1": (_as_float, 0.9, "Adam first-moment decay"),
        "beta2": (_as_float, 0.999, "Adam second-moment decay"),
        "eps": (_as_float, 1e-8, "Adam denominator offset"),
        "clip_norm": (_as_float, 1.0, "global gradient norm bound"),
        "target_ratio": (_as_opt_float, None,
                         "stop once loss falls to this fraction of epoch 1"),
        "truncate_every": (_as_opt_int, None,
                           "cut gradient flow every k unrolled steps"),
        "seed": (_as_int, 0, "parameter init and sampling seed"),
    },
    "predict": {
        "checkpoint": (_as_str, "", "trained model checkpoint (required)"),
        "data": (_as_str, "", "episode file or directory (required)"),
        "episode_index": (_as_int, 0, "which episode to predict from"),
        "n_context": (_as_int, 5, "observed frames"),
        "pred_len": (_as_int, 15, "frames to extrapolate"),
        "seed": (_as_int, 0, "unused; recorded for provenance"),
    },
    "eval": {
        "checkpoint": (_as_str, "",
                       "checkpoint path, or 'persistence' for the baseline"),
        "data": (_as_str, "", "episode file or directory (required)"),
        "n_context": (_as_int, 5, "observed frames"),
        "pred_len": (_as_int, 25, "evaluation horizon"),
        "seed": (_as_int, 0, "unused; recorded for provenance"),
    },
    "ablate": {
        "checkpoint": (_as_str, "", "trained model checkpoint (required)"),
        "data": (_as_str, "", "episode file or directory (required)"),
        "episode_index": (_as_int, 0, "which episode to predict from"),
        "heads": (_as_opt_int, None,
                  "heads to drop one at a time (default: all)"),
        "n_context": (_as_int, 5, "observed frames"),
        "pred_len": (_as_int, 15, "frames to extrapolate"),
        "seed": (_as_int, 0, "unused; recorded for provenance"),
    },
    "bench-attn": {
        "horizons": (_as_int_list, (1, 2, 4, 6),
                     "attention horizons to time"),
        "grid": (_as_int, 16, "grid side length"),
        "channels": (_as_int, 32, "input feature channels"),
        "d_att": (_as_int, 8, "attended channels"),
        "heads": (_as_int, 4, "attention heads"),
        "repeats": (_as_int, 20, "timed repetitions per horizon"),
        "seed": (_as_int, 0, "weight and input seed"),
    },
}


def parse_config_file(path: Path) -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key=value, "
                              f"got {raw.strip()!r}")
        entries[key.strip()] = value.strip()
    return entries


def _parse_overrides(pairs) -> dict[str, str]:
    out: dict[str, str] = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"override must be KEY=VALUE, got {pair!r}")
        out[key.strip()] = value.strip()
    return out


def resolve_config(command: str, config_path, overrides,
                   flag_values: dict) -> dict:
    schema = SCHEMAS[command]
    cfg = {k: default for k, (_, default, _) in schema.items()}

    def apply(entries: dict, source: str):
        for key, value in entries.items():
            if key not in schema:
                raise ConfigError(
                    f"unknown key {key!r} for {command} ({source}); "
                    f"valid keys: {', '.join(sorted(schema))}")
            conv = schema[key][0]
            try:
                cfg[key] = conv(value)
            except (ValueError, TypeError) as exc:
                raise ConfigError(
                    f"bad value for {key}: {value!r} ({exc})") from exc

    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise MissingInputError(f"config file not found: {path}")
        apply(parse_config_file(path), "config file")
    apply(_parse_overrides(overrides), "--set")
    apply(flag_values, "flag")
    return cfg


# ---------------------------------------------------------------------------
# Shared helpers

def _load_episode_files(data: str):
    if not data:
        raise ConfigError("data path is required")
    path = Path(data)
    if path.is_dir():
        files = sorted(path.glob("*.gcep"))
        if not files:
            raise MissingInputError(f"no .gcep episodes in {path}")
    elif path.exists():
        files = [path]
    else:
        raise MissingInputError(f"data path not found: {path}")
    return [read_episode(f) for f in files], files


def _load_model(checkpoint: str):
    if not checkpoint:
        raise ConfigError("checkpoint path is required")
    path = Path(checkpoint)
    if not path.exists():
        raise MissingInputError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _pick_episode(episodes, index: int) -> EpisodeRecord:
    if not 0 <= index < len(episodes):
        raise ConfigError(f"episode_index {index} out of range "
                          f"(have {len(episodes)})")
    return episodes[index]


def _prediction_record(ep: EpisodeRecord, preds: np.ndarray,
                       n_context: int) -> EpisodeRecord:
    """Package predicted frames as an episode aligned to the source window."""
    pred_len = preds.shape[0]
    lo = min(n_context, ep.length - 1)
    hi = min(n_context + pred_len, ep.length)
    poses = ep.poses[lo:hi]
    if len(poses) < pred_len:
        poses = np.concatenate(
            [poses, np.repeat(poses[-1:], pred_len - len(poses), axis=0)])
    rows = []
    for t in range(pred_len):
        src = n_context + t
        if src < ep.length:
            for rec in ep.boxes_at(src):
                rows.append((t, rec["id"], rec["cx"], rec["cy"], rec["ex"],
                             rec["ey"], rec["heading"]))
    return EpisodeRecord(preds.astype(np.float32), poses.astype(np.float32),
                         np.array(rows, dtype=BOX_DTYPE), ep.resolution)


def _write_manifest(out: Path, command: str, cfg: dict,
                    outputs: list[str]) -> None:
    serializable = {k: (list(v) if isinstance(v, tuple) else v)
                    for k, v in cfg.items()}
    canonical = json.dumps(serializable, sort_keys=True)
    manifest = {
        "command": command,
        "config": serializable,
        "config_hash": hashlib.sha256(canonical.encode()).hexdigest(),
        "seed": cfg.get("seed"),
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "gridcast": gridcast.__version__,
        },
        "outputs": outputs,
        "written_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


# ---------------------------------------------------------------------------
# Command runners

def run_gen_data(cfg: dict, out: Path) -> list[str]:
    names = {"mixed": ("passing", "intersection", "clutter")}
    cycle = names.get(cfg["scenario"], (cfg["scenario"],))
    sensor = SensorModel(n_rays=cfg["n_rays"], max_range=cfg["max_range"],
                         noise_sigma=cfg["noise_sigma"], p_occ=cfg["p_occ"],
                         p_free=cfg["p_free"])
    rng = np.random.default_rng(cfg["seed"])
    outputs = []
    for i in range(cfg["episodes"]):
        scenario = cycle[i % len(cycle)]
        ep = generate_episode(scenario, cfg["length"], rng,
                              (cfg["grid"], cfg["grid"]), cfg["resolution"],
                              sensor, cfg["alpha"])
        name = f"ep_{i:03d}.gcep"
        write_episode(out / name, ep)
        outputs.append(name)
    print(f"wrote {len(outputs)} episodes to {out}")
    return outputs


def run_train(cfg: dict, out: Path) -> list[str]:
    episodes, _ = _load_episode_files(cfg["data"])
    grid = episodes[0].grid_hw
    if cfg["variant"] == "predrnnpp":
        model_kw = dict(grid_hw=grid)
    else:
        model_kw = dict(n_heads=cfg["n_heads"], horizon=cfg["horizon"],
                        grid_hw=grid, gate_param_mode=cfg["gate_param_mode"])
    model = build_variant(cfg["variant"], cfg["scale"], cfg["seed"],
                          **model_kw)
    tc = TrainConfig(n_context=cfg["n_context"], pred_len=cfg["pred_len"],
                     epochs=cfg["epochs"],
                     samples_per_epoch=cfg["samples_per_epoch"],
                     lr=cfg["lr"], beta1=cfg["beta1"], beta2=cfg["beta2"],
                     eps=cfg["eps"], seed=cfg["seed"],
                     batch_size=cfg["batch_size"],
                     clip_norm=cfg["clip_norm"],
                     target_ratio=cfg["target_ratio"],
                     truncate_every=cfg["truncate_every"])
    ckpt = out / "model.ckpt"
    result = train(model, episodes, tc, ckpt_path=ckpt, log=print)
    (out / "curve.txt").write_text(result.curve_text())
    (out / "curve.svg").write_text(svg_line_chart(
        {"train": (list(range(1, len(result.losses) + 1)), result.losses)},
        title=f"L1 loss ({cfg['variant']}, {count_params(model)} params)",
        x_label="epoch", y_label="loss"))
    print(f"best loss {result.best_loss:.6f} at epoch {result.best_epoch}")
    return ["model.ckpt", "curve.txt", "curve.svg"]


def run_predict(cfg: dict, out: Path) -> list[str]:
    model, _ = _load_model(cfg["checkpoint"])
    episodes, _ = _load_episode_files(cfg["data"])
    ep = _pick_episode(episodes, cfg["episode_index"])
    n, p = cfg["n_context"], cfg["pred_len"]
    if ep.length < n:
        raise GridcastError(f"episode too short for {n} context frames")
    preds = model.predict(ep.masses[:n].astype(np.float64), p)
    record = _prediction_record(ep, preds, n)
    outputs = ["prediction.gcep"]
    write_episode(out / "prediction.gcep", record)
    for t in range(p):
        frame = record.frame(t)
        name = f"frame_{t:03d}.pgm"
        write_pgm(out / name, pignistic(frame))
        outputs.append(name)
    print(f"wrote {p} predicted frames to {out}")
    return outputs


def _metric_chart(report, attr: str, err_attr: str, label: str) -> str:
    xs = list(range(1, report.horizon + 1))
    mean = getattr(report, attr)
    err = getattr(report, err_attr)
    return svg_line_chart(
        {label: (xs, list(mean)),
         "+stderr": (xs, list(mean + err)),
         "-stderr": (xs, list(mean - err))},
        title=f"{label} vs prediction horizon ({report.model_id})",
        x_label="steps ahead", y_label=label)


def run_eval(cfg: dict, out: Path) -> list[str]:
    if cfg["checkpoint"] == "persistence":
        model = PersistenceModel()
        model_id = "persistence"
    else:
        model, _ = _load_model(cfg["checkpoint"])
        model_id = getattr(model, "kind", "model")
    episodes, files = _load_episode_files(cfg["data"])
    report = evaluate(model, episodes, cfg["n_context"], cfg["pred_len"],
                      model_id=model_id,
                      dataset_id=Path(cfg["data"]).name or "episodes")
    (out / "report.txt").write_text(report.to_text())
    outputs = ["report.txt"]
    for attr, err_attr, label in (("mse_steps", "mse_err", "MSE"),
                                  ("is_steps", "is_err", "IS"),
                                  ("mobbm_steps", "mobbm_err", "MOBBM")):
        name = f"eval_{label.lower()}.svg"
        (out / name).write_text(_metric_chart(report, attr, err_attr, label))
        outputs.append(name)
    summary = report.summary()
    print(f"evaluated {len(episodes)} episodes over {report.horizon} steps: "
          f"mse={summary['mse']:.5g} is={summary['is']:.5g} "
          f"mobbm={summary['mobbm']:.5g}")
    return outputs


def run_ablate(cfg: dict, out: Path) -> list[str]:
    model, _ = _load_model(cfg["checkpoint"])
    kinds = getattr(getattr(model, "cfg", None), "cell_kinds", ())
    if not any(k != "convlstm" for k in kinds):
        raise GridcastError("checkpoint model has no attention heads")
    n_heads = model.cfg.n_heads
    heads = cfg["heads"] if cfg["heads"] is not None else n_heads
    if not 1 <= heads <= n_heads:
        raise ConfigError(f"heads must be in [1, {n_heads}], got {heads}")
    episodes, _ = _load_episode_files(cfg["data"])
    ep = _pick_episode(episodes, cfg["episode_index"])
    n, p = cfg["n_context"], cfg["pred_len"]
    frames = ep.masses[:n].astype(np.float64)
    runs = [("full", HeadMask.full(n_heads))]
    runs += [(f"drop{h}", HeadMask.drop(n_heads, h)) for h in range(heads)]
    preds = {}
    outputs = []
    for label, mask in runs:
        preds[label] = model.predict(frames, p, mask)
        name = f"pred_{label}.gcep"
        write_episode(out / name, _prediction_record(ep, preds[label], n))
        outputs.append(name)
    labels = [label for label, _ in runs]
    lines = ["# pairwise L2 distance between prediction sets",
             "labels: " + " ".join(labels)]
    for a in labels:
        row = [f"{np.linalg.norm(preds[a] - preds[b]):.6g}" for b in labels]
        lines.append(f"{a} " + " ".join(row))
    (out / "differences.txt").write_text("\n".join(lines) + "\n")
    outputs.append("differences.txt")
    print("\n".join(lines))
    return outputs


def run_bench_attn(cfg: dict, out: Path) -> list[str]:
    results = bench_temporal_attention(
        grid=cfg["grid"], f_in=cfg["channels"], d_att=cfg["d_att"],
        n_heads=cfg["heads"], horizons=tuple(cfg["horizons"]),
        runs=cfg["repeats"], seed=cfg["seed"])
    base_h = min(results)
    lines = ["# temporal attention wall time, forward+backward",
             "# horizon median_seconds time_per_history_frame"]
    for ha in sorted(results):
        lines.append(f"{ha} {results[ha]:.6g} {results[ha] / ha:.6g}")
    ratio = results[max(results)] / results[base_h]
    span = max(results) / base_h
    lines.append(f"# {base_h}->{max(results)} horizon ratio: "
                 f"{ratio:.3g} (linear would be {span:.3g})")
    text = "\n".join(lines) + "\n"
    (out / "bench.txt").write_text(text)
    (out / "bench.svg").write_text(svg_line_chart(
        {"taaconv": (sorted(results), [results[h] for h in sorted(results)])},
        title="temporal attention cost vs horizon",
        x_label="history length", y_label="seconds"))
    print(text, end="")
    return ["bench.txt", "bench.svg"]


RUNNERS = {
    "gen-data": run_gen_data,
    "train": run_train,
    "predict": run_predict,
    "eval": run_eval,
    "ablate": run_ablate,
    "bench-attn": run_bench_attn,
}


# ---------------------------------------------------------------------------
# Argument parsing

_FLAGS = {
    # command -> [(flag, schema key, help suffix)]
    "gen-data": [("--episodes", "episodes"), ("--scenario", "scenario"),
                 ("--length", "length"), ("--seed", "seed")],
    "train": [("--data", "data"), ("--variant", "variant"),
              ("--epochs", "epochs"), ("--seed", "seed")],
    "predict": [("--checkpoint", "checkpoint"), ("--data", "data"),
                ("--N", "n_context"), ("--P", "pred_len")],
    "eval": [("--checkpoint", "checkpoint"), ("--data", "data"),
             ("--N", "n_context"), ("--P", "pred_len")],
    "ablate": [("--checkpoint", "checkpoint"), ("--data", "data"),
               ("--heads", "heads"), ("--N", "n_context"),
               ("--P", "pred_len")],
    "bench-attn": [("--horizons", "horizons"), ("--repeats", "repeats"),
                   ("--seed", "seed")],
}

_SUMMARIES = {
    "gen-data": "simulate scenarios into fused occupancy episodes",
    "train": "fit a predictive stack on episode files",
    "predict": "extrapolate one episode and emit frame images",
    "eval": "score a model (or the persistence baseline) over episodes",
    "ablate": "re-predict with each attention head zeroed",
    "bench-attn": "time temporal attention across history lengths",
}


def build_parser() -> _Parser:
    parser = _Parser(prog="gridcast",
                     description="Occupancy grid prediction pipeline.")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="command")
    for command, summary in _SUMMARIES.items():
        sp = sub.add_parser(command, help=summary, description=summary,
                            epilog="config keys: " + "; ".join(
                                f"{k}={d!r}: {h}" for k, (_, d, h)
                                in sorted(SCHEMAS[command].items())))
        sp.add_argument("--config", metavar="FILE",
                        help="key=value config file")
        sp.add_argument("--set", action="append", dest="overrides",
                        metavar="KEY=VALUE", default=[],
                        help="override one config key (repeatable)")
        sp.add_argument("--out", metavar="DIR",
                        help="artifact directory (default runs/<command>)")
        for flag, key in _FLAGS[command]:
            help_text = SCHEMAS[command][key][2]
            sp.add_argument(flag, dest=f"flag_{key}", metavar=key.upper(),
                            default=argparse.SUPPRESS, help=help_text)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        flag_values = {name[5:]: value for name, value in vars(args).items()
                       if name.startswith("flag_")}
        cfg = resolve_config(args.command, args.config, args.overrides,
                             flag_values)
        out = Path(args.out) if args.out else Path("runs") / args.command
        out.mkdir(parents=True, exist_ok=True)
        outputs = RUNNERS[args.command](cfg, out)
        _write_manifest(out, args.command, cfg, outputs)
        return 0
    except (_ArgError, ConfigError) as exc:
        print(f"gridcast: config error: {exc}", file=sys.stderr)
        return 1
    except MissingInputError as exc:
        print(f"gridcast: missing input: {exc}", file=sys.stderr)
        return 2
    except (GridcastError, FloatingPointError, OSError) as exc:
        print(f"gridcast: runtime error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
