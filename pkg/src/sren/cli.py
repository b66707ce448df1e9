"""``sren`` command line: basis | geometry | equivcheck | train | eval | sweep | gendata.

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 missing artifact, 5 NaN.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from sren import equivariance as eq
from sren.data import MODES, load_idx, make_srt_variant, pad_to, save_dataset, split
from sren.errors import (ConfigError, IdxFormatError, InvalidArgument, InvalidParameter, MissingArtifact,
                         NumericalFailure)
from sren.fourier_argand import (BasisConfig, CoeffTable, analyze_coefficients, build_basis, evaluate,
                                 polar_grid)
from sren.geometry import compute_geometry
from sren.io import read_pgm, read_srtn, to_uint8, write_pgm, write_srtn
from sren.network import GeometrySource, TrainConfig, build_model, evaluate as evaluate_model, load_model, \
    save_model, train
from sren.tensorcore import FeatureMap, make_sim2

log = logging.getLogger("sren")

SCHEMA = 1

DEFAULTS = {
    "schema": SCHEMA,
    "seed": 0,
    "output_dir": "runs/default",
    "basis": BasisConfig().to_dict(),
    "quad": [512, 256],
    "grid": {"n_lambda": 9, "n_gamma": 16, "lambda_range": [0.5, 2.0], "conf_threshold": 0.0},
    "model": {"channels": [16, 32, 64], "layers_per_block": 2, "support": 3, "pool_after": [True, False, False],
              "baseline": False},
    "train": {k: v for k, v in TrainConfig().to_dict().items() if k != "seed"},
    "data": {"images": "data/mnist5k-images-idx3-ubyte.gz", "labels": "data/mnist5k-labels-idx1-ubyte.gz",
             "n_train": 2000, "n_test": 2000, "pad": 56, "mode": "plain"},
    "equiv": {"inputs": "mnist", "n_inputs": 20, "n_layers": 4, "channels": 8, "canvas": 112, "n_random": 4,
              "scale_range": [1.0, 2.0], "crop": None},
    "sweep": {"angles_deg": [0, 45, 90, 135, 180, 225, 270, 315], "scales": [1.0, 1.25, 1.5, 1.75, 2.0, 2.5]},
}

# stream ids for the counter-based seed split
STREAM_SPLIT, STREAM_VARIANT, STREAM_EQUIV, STREAM_MODEL, STREAM_BASIS = range(5)


def stream_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


def _check_keys(cfg: dict, ref: dict, path: str = "") -> None:
    for k, v in cfg.items():
        if k not in ref:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(ref[k], dict) and ref[k] and not isinstance(v, dict):
            raise ConfigError(f"config key {path + k!r} must be an object")
        if isinstance(ref[k], dict) and ref[k]:
            _check_keys(v, ref[k], path + k + ".")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: malformed JSON ({e})") from e
        except OSError as e:
            raise ConfigError(f"{path}: cannot read config ({e})") from e
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
        if user.get("schema", SCHEMA) != SCHEMA:
            raise ConfigError(f"unsupported config schema {user.get('schema')!r}")
        _check_keys(user, DEFAULTS)
        cfg = _merge(cfg, user)
    for item in overrides:
        apply_override(cfg, item)
    validate(cfg)
    return cfg


def apply_override(cfg: dict, item: str) -> None:
    """``key.path=value``; the value is parsed as JSON when possible."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key.path=value")
    key, raw = item.split("=", 1)
    parts = key.lstrip("-").split(".")
    node, ref = cfg, DEFAULTS
    for p in parts[:-1]:
        if not isinstance(ref.get(p), dict):
            raise ConfigError(f"unknown config key {key!r}")
        node, ref = node[p], ref[p]
    if parts[-1] not in ref:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node[parts[-1]] = value


def validate(cfg: dict) -> None:
    try:
        BasisConfig.from_dict(cfg["basis"])
        TrainConfig(**cfg["train"])
        g = cfg["grid"]
        if g["n_lambda"] < 1 or g["n_gamma"] < 1 or not 0 < g["lambda_range"][0] < g["lambda_range"][1]:
            raise ConfigError("invalid search grid")
        if cfg["data"]["mode"] not in MODES:
            raise ConfigError(f"data.mode must be one of {MODES}")
        m = cfg["model"]
        if len(m["pool_after"]) != len(m["channels"]):
            raise ConfigError("model.pool_after needs one flag per block")
    except (InvalidParameter, TypeError, KeyError) as e:
        raise ConfigError(str(e)) from e


def geometry_source(cfg: dict) -> GeometrySource:
    g = cfg["grid"]
    return GeometrySource.create(BasisConfig.from_dict(cfg["basis"]), g["n_lambda"], g["n_gamma"],
                                 tuple(g["lambda_range"]), g["conf_threshold"])


def _out(cfg: dict, sub: str = "") -> Path:
    p = Path(cfg["output_dir"]) / sub
    p.mkdir(parents=True, exist_ok=True)
    return p


def _emit(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


# -- commands ----------------------------------------------------------------


def cmd_basis(cfg: dict, args) -> int:
    config = BasisConfig.from_dict(cfg["basis"])
    basis = build_basis(config)
    out = _out(cfg, "basis")
    write_srtn(out / "atoms.srtn", basis.atoms)
    write_srtn(out / "mask.srtn", basis.mask.astype(np.float64))

    quad = tuple(cfg["quad"])
    rng = np.random.default_rng(stream_seed(cfg["seed"], STREAM_BASIS))
    shape = (2 * config.K1 + 1, 2 * config.K2 + 1)
    truth = CoeffTable(rng.standard_normal(shape) + 1j * rng.standard_normal(shape), config.K1, config.K2)
    theta, rho = polar_grid(config, quad)
    r = np.exp(rho)
    r[-1] = np.nextafter(config.b, 0.0)
    samples = evaluate(truth, config, r[None, :], theta[:, None])
    got = analyze_coefficients(samples, config, quad)
    resynth = evaluate(got, config, r[None, :], theta[:, None])
    report = {
        "orders": len(config.orders),
        "quad": list(quad),
        "coarse": got.coarse,
        "coeff_rel_error": float(np.linalg.norm(got.values - truth.values) / np.linalg.norm(truth.values)),
        "round_trip_l2": float(np.linalg.norm(resynth - samples) / np.linalg.norm(samples)),
    }
    (out / "report.json").write_text(json.dumps(report, indent=1))
    _emit(report)
    return 0


def _read_image(path) -> np.ndarray:
    p = Path(path)
    try:
        if p.suffix.lower() == ".pgm":
            img = read_pgm(p)
        else:
            img = read_srtn(p)
    except (OSError, InvalidArgument, ValueError) as e:
        raise OSError(f"cannot read image {path}: {e}") from e
    img = np.asarray(img, dtype=np.float64)
    if img.ndim not in (2, 3) or not np.all(np.isfinite(img)):
        raise OSError(f"{path}: expected a finite 2D or C x H x W tensor, got shape {img.shape}")
    return img


def cmd_geometry(cfg: dict, args) -> int:
    img = _read_image(args.image)
    geo = geometry_source(cfg)
    field = compute_geometry(img, geo.basis, geo.grid, geo.conf_threshold)
    out = _out(cfg, "geometry")
    write_srtn(out / "scale.srtn", field.scale)
    write_srtn(out / "orientation.srtn", field.orientation)
    write_srtn(out / "confidence.srtn", field.confidence.astype(np.float64))
    write_srtn(out / "matrices.srtn", field.matrices)
    lam = geo.grid.lambdas
    write_pgm(out / "scale.pgm", to_uint8(np.log(field.scale), math.log(lam[0]), math.log(lam[-1]) if len(lam) > 1
                                          else math.log(lam[0]) + 1.0))
    write_pgm(out / "orientation.pgm", to_uint8(field.orientation, 0.0, 2.0 * math.pi))
    write_pgm(out / "confidence.pgm", field.confidence.astype(np.uint8) * 255)
    conf = field.confidence
    modal = None
    if conf.any():
        vals, counts = np.unique(field.orientation[conf], return_counts=True)
        modal = float(vals[np.argmax(counts)])
    summary = {"shape": list(field.shape), "confident_fraction": float(conf.mean()), "modal_orientation": modal,
               "median_scale": float(np.median(field.scale[conf])) if conf.any() else None}
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    _emit(summary)
    return 0


def _load_split(cfg: dict):
    d = cfg["data"]
    ds = load_idx(d["images"], d["labels"])
    return split(ds, d["n_train"], d["n_test"], stream_seed(cfg["seed"], STREAM_SPLIT))


def equiv_inputs(cfg: dict) -> list[FeatureMap]:
    e = cfg["equiv"]
    n, size = e["n_inputs"], e["canvas"]
    if e["inputs"] == "mnist":
        _, test = _load_split(cfg)
        return [FeatureMap(img) for img in pad_to(test.images[:n], size)]
    if e["inputs"] == "texture":
        return texture_inputs(n, size, stream_seed(cfg["seed"], STREAM_EQUIV))
    raise ConfigError(f"equiv.inputs must be 'mnist' or 'texture', got {e['inputs']!r}")


def texture_inputs(n: int, size: int, seed: int, sigma: float = 1.5) -> list[FeatureMap]:
    """Band-limited random textures (Gaussian-filtered white noise)."""
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    return [FeatureMap(gaussian_filter(rng.standard_normal((size, size)), sigma)) for _ in range(n)]


def equiv_transforms(cfg: dict) -> list:
    e = cfg["equiv"]
    rng = np.random.default_rng([stream_seed(cfg["seed"], STREAM_EQUIV), 1])
    lo, hi = e["scale_range"]
    ts = [make_sim2(1.0, 0.0), make_sim2(1.0, math.pi / 2), make_sim2(1.3, math.pi / 4)]
    ts += [make_sim2(rng.uniform(lo, hi), rng.uniform(0, 2 * math.pi)) for _ in range(e["n_random"])]
    return ts


def run_equivcheck(cfg: dict, inputs, transforms):
    e = cfg["equiv"]
    geo = geometry_source(cfg)
    crop = e["crop"] if e["crop"] is not None else eq.default_crop(geo.basis.config, cfg["grid"]["lambda_range"][1])
    stack = eq.random_stack(geo, e["n_layers"], e["channels"], seed=stream_seed(cfg["seed"], STREAM_EQUIV))
    base = eq.same_weights(stack, None)
    rows = []
    for name, blocks in (("sren", stack), ("baseline", base)):
        per_input = []
        for i, f in enumerate(inputs):
            for T in transforms:
                per_input += eq.report_rows(f"{name}/{i}", eq.layer_reports(blocks, f, T, crop))
        rows += per_input + eq.mean_rows(f"{name}/mean", per_input)
    return rows


def summarize_equiv(rows) -> dict:
    def pick(run, pred):
        vals = [r["error"] for r in rows if r["run_id"] == run and pred(r)]
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")

    quarter = lambda r: r["s"] == 1.0 and abs(r["theta"] - math.pi / 2) < 1e-12  # noqa: E731
    probe = lambda r: abs(r["s"] - 1.3) < 1e-12 and abs(r["theta"] - math.pi / 4) < 1e-12  # noqa: E731
    identity = lambda r: r["s"] == 1.0 and r["theta"] == 0.0  # noqa: E731
    out = {
        "identity_error": pick("sren/mean", identity),
        "quarter_turn_layer1": pick("sren/mean", lambda r: quarter(r) and r["layer"] == 1),
        "quarter_turn_all_layers": pick("sren/mean", quarter),
        "random_all_layers": pick("sren/mean", lambda r: not (identity(r) or quarter(r) or probe(r))),
        "probe_sren": pick("sren/mean", probe),
        "probe_baseline": pick("baseline/mean", probe),
    }
    out["probe_ratio"] = out["probe_baseline"] / out["probe_sren"] if out["probe_sren"] > 0 else float("inf")
    return out


def cmd_equivcheck(cfg: dict, args) -> int:
    rows = run_equivcheck(cfg, equiv_inputs(cfg), equiv_transforms(cfg))
    out = _out(cfg, "equivariance")
    eq.write_csv(out / "equivariance.csv", rows)
    summary = summarize_equiv(rows)
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    _emit(summary)
    return 0


def _padded(ds, cfg):
    from sren.data import LabeledDataset

    return LabeledDataset(pad_to(ds.images, cfg["data"]["pad"]), ds.labels, dict(ds.meta, padding=cfg["data"]["pad"]))


def cmd_train(cfg: dict, args) -> int:
    train_set, _ = _load_split(cfg)
    train_set = _padded(train_set, cfg)
    m = cfg["model"]
    baseline = m["baseline"] or args.baseline
    geo = None if baseline else geometry_source(cfg)
    model = build_model(geo, tuple(m["channels"]), m["layers_per_block"], m["support"], 1,
                        int(train_set.labels.max()) + 1 if len(train_set) else 10, m["pool_after"],
                        seed=stream_seed(cfg["seed"], STREAM_MODEL))
    model_dir = Path(args.model_dir) if args.model_dir else _out(cfg, "baseline" if baseline else "model")
    model_dir.mkdir(parents=True, exist_ok=True)
    tc = TrainConfig(**cfg["train"], seed=cfg["seed"])
    model, history = train(model, train_set, tc, metrics_path=model_dir / "metrics.csv")
    save_model(model, model_dir)
    (model_dir / "config.json").write_text(json.dumps(cfg, indent=1))
    _emit({"model_dir": str(model_dir), "final": history[-1] if history else None,
           "parameters": model.n_parameters()})
    return 0


def _require_model(path):
    if path is None or not (Path(path) / "manifest.json").is_file():
        raise MissingArtifact(f"no model directory at {path}")
    return load_model(path)


def variant_set(cfg: dict, mode: str):
    _, test = _load_split(cfg)
    return make_srt_variant(test, stream_seed(cfg["seed"], STREAM_VARIANT), mode, size=cfg["data"]["pad"])


def cmd_eval(cfg: dict, args) -> int:
    model = _require_model(args.model_dir)
    mode = args.mode or cfg["data"]["mode"]
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    acc, per_class = evaluate_model(model, variant_set(cfg, mode))
    with open(Path(args.model_dir) / "metrics.csv", "a", newline="") as fh:
        csv.writer(fh).writerow([f"eval:{mode}", "", f"{acc:.6f}"])
    _emit({"mode": mode, "accuracy": acc, "per_class": [None if math.isnan(v) else v for v in per_class]})
    return 0


def cmd_sweep(cfg: dict, args) -> int:
    model = _require_model(args.model_dir)
    test = variant_set(cfg, "plain")
    s = cfg["sweep"]
    rows = eq.stability_sweep(model, test, [math.radians(a) for a in s["angles_deg"]], s["scales"])
    out = _out(cfg, "sweep")
    name = Path(args.model_dir).name
    eq.write_sweep_csv(out / f"{name}_sweep.csv", rows)
    _emit({"rows": rows, "angle_spread": eq.spread(rows, "angle"), "scale_spread": eq.spread(rows, "scale")})
    return 0


def cmd_gendata(cfg: dict, args) -> int:
    mode = args.mode or cfg["data"]["mode"]
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    ds = variant_set(cfg, mode)
    out = save_dataset(ds, _out(cfg, f"data_{mode}"))
    _emit({"dir": str(out), "count": len(ds), "rejected_draws": ds.meta.get("rejected", 0)})
    return 0


COMMANDS = {"basis": cmd_basis, "geometry": cmd_geometry, "equivcheck": cmd_equivcheck, "train": cmd_train,
            "eval": cmd_eval, "sweep": cmd_sweep, "gendata": cmd_gendata}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sren", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON run config (schema 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("basis", help="dump atoms and the analysis/synthesis round trip")
    g = sub.add_parser("geometry", help="per-pixel scale/orientation of one image")
    g.add_argument("image", help="SRTN tensor or PGM image")
    sub.add_parser("equivcheck", help="equivariance error CSV for random SimConv stacks")
    t = sub.add_parser("train", help="train on the undistorted subset")
    t.add_argument("--baseline", action="store_true", help="force the identity field (plain convolution)")
    t.add_argument("--model-dir")
    e = sub.add_parser("eval", help="accuracy on a distorted test subset")
    e.add_argument("--model-dir", required=True)
    e.add_argument("--mode", choices=MODES)
    s = sub.add_parser("sweep", help="accuracy under fixed rotations and scalings")
    s.add_argument("--model-dir", required=True)
    d = sub.add_parser("gendata", help="write a distorted test subset")
    d.add_argument("--mode", choices=MODES)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = []
    for item in extra:
        if not item.startswith("--") or "=" not in item:
            print(f"sren: unrecognized argument {item!r}", file=sys.stderr)
            return 2
        overrides.append(item[2:])
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, InvalidParameter) as e:
        print(f"sren: config error: {e}", file=sys.stderr)
        return 2
    except MissingArtifact as e:
        print(f"sren: {e}", file=sys.stderr)
        return 4
    except NumericalFailure as e:
        print(f"sren: numerical failure: {e}", file=sys.stderr)
        return 5
    except (OSError, IdxFormatError) as e:
        print(f"sren: I/O error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
