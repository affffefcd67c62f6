"""Command-line entry point: train, interpolate, diagnose, evaluate."""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import datahub, evalsuite, geointerp, manifold
from . import diffcore as dc
from .diffcore import ContractViolation, FormatError, NumericalError
from .vae import (
    METRIC_FIELDS,
    Architecture,
    TrainConfig,
    TrainingDiverged,
    VaeModel,
    fit_variance_head,
    load_checkpoint,
    point_architecture,
    save_checkpoint,
    train,
)

log = logging.getLogger("vtae")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DATASETS = ("mnist", "fashion", "emnist", "donut", "glyphs")
# 2-D point data: short schedule, larger steps, stronger geodesic-distance term
DONUT_TRAIN_DEFAULTS = {"latent_a": 2, "latent_b": 0, "lr": 1e-3, "epochs": 30, "weight_decay": 0.0,
                        "loss_weights": [1.0, 1.0, 10.0]}

SECTION_KEYS = {
    "dataset": {"name", "data_dir", "transpose", "n", "n_train", "n_test", "inner", "outer", "seed",
                "ranges", "holdout_digit"},
    "model": set(Architecture.__dataclass_fields__) | {"noise_scale"},
    "train": set(TrainConfig.__dataclass_fields__) | {"variance_head", "grid", "validation_fraction"},
    "interpolate": {"endpoints", "z1", "z2", "steps", "lr", "weights", "n_samples", "frames", "restarts"},
    "diagnose": {"samples", "latent_source", "batch"},
    "evaluate": {"iw_k", "noise", "levels", "n_test", "holdout_digit"},
}
TOP_KEYS = set(SECTION_KEYS) | {"seed", "deterministic", "out", "checkpoint", "plots"}


class ConfigError(ContractViolation):
    pass


# -- configuration ----------------------------------------------------------------

def default_config() -> dict:
    return {
        "seed": 0,
        "deterministic": False,
        "out": "out",
        "checkpoint": None,
        "plots": True,
        "dataset": {"name": None, "data_dir": None, "transpose": None, "n_train": None,
                    "n_test": None, "holdout_digit": None},
        "model": {},
        "train": {},
        "interpolate": {"endpoints": None, "z1": None, "z2": None, "steps": 500, "lr": 0.01,
                        "weights": list(geointerp.DEFAULT_WEIGHTS), "n_samples": 32, "frames": 10,
                        "restarts": 2},
        "diagnose": {"samples": 8000, "latent_source": None, "batch": 500},
        "evaluate": {"iw_k": 50, "noise": None, "levels": list(evalsuite.DEFAULT_LEVELS), "n_test": 100,
                     "holdout_digit": None},
    }


def validate_keys(cfg: dict) -> None:
    unknown = [k for k in cfg if k not in TOP_KEYS]
    for sec, allowed in SECTION_KEYS.items():
        val = cfg.get(sec)
        if val is None:
            continue
        if not isinstance(val, dict):
            raise ConfigError(f"config section {sec!r} must be an object")
        unknown += [f"{sec}.{k}" for k in val if k not in allowed]
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from exc


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the JSON file, then command-line flags."""
    cfg = default_config()
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        validate_keys(file_cfg)
        cfg = _merge(cfg, file_cfg)
    flags = {
        "seed": args.seed, "out": args.out, "checkpoint": getattr(args, "checkpoint", None),
        "dataset.name": args.dataset, "dataset.data_dir": args.data_dir,
        "dataset.n_train": args.n_train, "dataset.holdout_digit": args.holdout_digit,
        "train.lr": getattr(args, "lr", None), "train.epochs": getattr(args, "epochs", None),
        "train.k_neighbors": getattr(args, "k_neighbors", None),
        "evaluate.noise": getattr(args, "noise", None), "evaluate.iw_k": getattr(args, "iw_k", None),
        "diagnose.samples": getattr(args, "samples", None),
        "diagnose.latent_source": getattr(args, "latent_source", None),
        "interpolate.endpoints": getattr(args, "endpoints", None),
        "interpolate.steps": getattr(args, "steps", None),
    }
    if getattr(args, "levels", None):
        flags["evaluate.levels"] = _floats(args.levels)
    if getattr(args, "z1", None):
        flags["interpolate.z1"] = _floats(args.z1)
    if getattr(args, "z2", None):
        flags["interpolate.z2"] = _floats(args.z2)
    for key, val in flags.items():
        if val is None:
            continue
        node = cfg
        *path, last = key.split(".")
        for p in path:
            node = node.setdefault(p, {})
        node[last] = val
    if args.transpose:
        cfg["dataset"]["transpose"] = True
    if args.deterministic:
        cfg["deterministic"] = True
    if args.no_plots:
        cfg["plots"] = False
    if cfg["dataset"]["name"] is not None and cfg["dataset"]["name"] not in DATASETS:
        raise ConfigError(f"unknown dataset {cfg['dataset']['name']!r}")
    validate_keys(cfg)
    return cfg


# -- datasets -----------------------------------------------------------------------

def load_dataset(spec: dict, split: str = "train", seed: int = 0) -> datahub.Dataset:
    name = spec.get("name") or "mnist"
    # synthetic test splits are fresh draws from the next seed
    gen_seed = spec.get("seed", seed) + (split != "train")
    if name == "donut":
        ds = datahub.make_donut(spec.get("n", 2000), spec.get("inner", 0.8), spec.get("outer", 1.2), gen_seed)
    elif name == "glyphs":
        ds, _ = datahub.make_glyphs(spec.get("n", 4000), spec.get("ranges"), gen_seed)
    else:
        if not spec.get("data_dir"):
            raise FormatError(f"dataset {name!r} needs --data-dir pointing at IDX files")
        ds = datahub.load_idx_dir(spec["data_dir"], split, transpose=bool(spec.get("transpose")))
    ds = dataclasses.replace(ds, split=split)
    limit = spec.get("n_train") if split == "train" else spec.get("n_test")
    if limit:
        ds = ds.subset(np.arange(min(int(limit), len(ds))))
    return ds


def build_architecture(cfg: dict, data: datahub.Dataset) -> Architecture:
    model_cfg = {k: v for k, v in cfg["model"].items() if k != "noise_scale"}
    tcfg = cfg["train"]
    if data.images.ndim == 2:
        base = point_architecture(dim=data.images.shape[1], latent=tcfg.get("latent_a", 2))
        return Architecture.from_dict(_merge(base.to_dict(), model_cfg))
    model_cfg.setdefault("latent_a", tcfg.get("latent_a", 44))
    model_cfg.setdefault("latent_b", tcfg.get("latent_b", 6))
    model_cfg.setdefault("input_shape", list(data.images.shape[1:]))
    return Architecture(**model_cfg)


# -- output helpers -----------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return v


def write_rows(path: Path, fields, rows) -> Path:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(fields)
        for r in rows:
            wr.writerow([_fmt(r[f]) for f in fields])
    return path


def write_manifest(out: Path, command: str, cfg: dict, files: list, extra: dict | None = None) -> Path:
    doc = {"command": command, "seed": cfg["seed"], "deterministic": cfg["deterministic"],
           "config": cfg, "outputs": sorted(str(Path(f).relative_to(out)) for f in files)}
    if extra:
        doc.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default))
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def _require_checkpoint(cfg: dict):
    if not cfg.get("checkpoint"):
        raise ConfigError("this command needs --checkpoint")
    return load_checkpoint(cfg["checkpoint"])


# -- commands -----------------------------------------------------------------------

def _train_once(cfg: dict, data: datahub.Dataset, tcfg: TrainConfig):
    arch = build_architecture(cfg, data)
    model = VaeModel(arch, seed=tcfg.seed, noise_scale=cfg["model"].get("noise_scale", tcfg.noise_scale))
    result = train(model, data.images, tcfg)
    use_head = cfg["train"].get("variance_head", arch.likelihood == "gaussian")
    if use_head:
        fit_variance_head(model, data.images, seed=tcfg.seed)
    return model, result


def _train_config(cfg: dict, overrides: dict | None = None) -> TrainConfig:
    raw = {k: v for k, v in cfg["train"].items() if k not in ("variance_head", "grid", "validation_fraction")}
    raw.setdefault("seed", cfg["seed"])
    if cfg["dataset"].get("name") == "donut":
        for k, v in DONUT_TRAIN_DEFAULTS.items():
            raw.setdefault(k, v)
    raw.update(overrides or {})
    return TrainConfig.from_dict(raw)


def cmd_train(cfg: dict) -> dict:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    cfg["dataset"]["name"] = cfg["dataset"].get("name") or "mnist"
    data = load_dataset(cfg["dataset"], "train", cfg["seed"])
    holdout = cfg["dataset"].get("holdout_digit")
    if holdout is not None:
        data, _ = datahub.split_holdout(data, int(holdout))
    if len(data) == 0:
        raise FormatError("training split is empty")
    grid = cfg["train"].get("grid")
    files = []
    extra = {}
    if grid:
        model, result, extra["grid"] = _grid_search(cfg, data, grid, out, files)
    else:
        model, result = _train_once(cfg, data, _train_config(cfg))
    ckpt = save_checkpoint(model, out / "checkpoint", config=cfg, epoch=len(result.metrics),
                           extra={"dataset": cfg["dataset"]})
    files += [ckpt / "manifest.json"]
    files.append(write_rows(out / "metrics.csv", METRIC_FIELDS, result.metrics))
    files.append(write_rows(out / "loss_breakdown.csv", ["epoch", "neg_recon", "kl", "gd", "entropy"],
                            result.breakdown))
    series = evalsuite.grad_ratio_track(result.grad_records)
    files.append(write_rows(out / "grad_ratios.csv", ["epoch", "layer", "pooling", "ratio", "flag"], series))
    if cfg["plots"]:
        from . import plotting

        files.append(plotting.plot_training(result.metrics, out / "training.png", series))
    files.append(write_manifest(out, "train", cfg, files, extra))
    return {"metrics": result.metrics, "breakdown": result.breakdown, "model": model}


def _grid_search(cfg, data, grid: dict, out: Path, files: list):
    """Train every combination in ``grid``; keep the best validation ELBO."""
    import itertools

    from .vae import evaluate_epoch

    keys = sorted(grid)
    frac = float(cfg["train"].get("validation_fraction", 0.1))
    rng = np.random.default_rng(cfg["seed"])
    perm = rng.permutation(len(data))
    n_val = max(1, int(round(frac * len(data))))
    val, fit = data.subset(np.sort(perm[:n_val])), data.subset(np.sort(perm[n_val:]))
    rows, best = [], None
    for combo in itertools.product(*(grid[k] for k in keys)):
        over = dict(zip(keys, combo))
        model, result = _train_once(cfg, fit, _train_config(cfg, over))
        score = evaluate_epoch(model, val.images, seed=cfg["seed"])["elbo"]
        rows.append({**{k: over[k] for k in keys}, "val_elbo": score})
        if best is None or score > best[0]:
            best = (score, over, model, result)
    files.append(write_rows(out / "grid.csv", keys + ["val_elbo"], rows))
    return best[2], best[3], {"selected": best[1], "val_elbo": best[0]}


def _parse_pairs(spec) -> list[tuple[int, int]]:
    if spec is None:
        return []
    if isinstance(spec, str):
        try:
            return [tuple(int(v) for v in p.split(",")) for p in spec.split(";") if p.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad endpoint spec {spec!r}; expected 'i,j;k,l'") from exc
    return [tuple(int(v) for v in p) for p in spec]


def cmd_interpolate(cfg: dict) -> dict:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    model, manifest = _require_checkpoint(cfg)
    icfg = cfg["interpolate"]
    pairs = _parse_pairs(icfg.get("endpoints"))
    latents = []
    if pairs:
        spec = _merge(manifest.get("dataset", {}), {k: v for k, v in cfg["dataset"].items() if v is not None})
        data = load_dataset(spec, "train", cfg["seed"])
        n = len(data)
        for i, j in pairs:
            for idx in (i, j):
                if not 0 <= idx < n:
                    raise ConfigError(f"endpoint index {idx} out of range for {n} dataset rows")
        with dc.no_grad():
            mean, _ = model.encoder_stats(data.images)
        codes = mean.data
        latents = [(codes[i], codes[j], i, j) for i, j in pairs]
    elif icfg.get("z1") is not None and icfg.get("z2") is not None:
        z1 = np.asarray(icfg["z1"], dtype=np.float64)
        z2 = np.asarray(icfg["z2"], dtype=np.float64)
        jdim = model.arch.latent_dim
        if z1.size != jdim or z2.size != jdim:
            raise ConfigError(f"latent endpoints need {jdim} entries, got {z1.size} and {z2.size}")
        latents = [(z1, z2, "", "")]
    else:
        raise ConfigError("interpolate needs --endpoints i,j or --z1/--z2")
    sampling = geointerp.CurveSampling(n=int(icfg["n_samples"]))
    weights = tuple(float(w) for w in icfg["weights"])
    mean_dec = model.decode_joint
    files, summary = [], []
    for k, (z1, z2, i, j) in enumerate(latents):
        fit = geointerp.fit_geodesic(model.geometry_decoder, z1, z2, sampling, weights,
                                     steps=int(icfg["steps"]), lr=float(icfg["lr"]),
                                     restarts=int(icfg["restarts"]), seed=cfg["seed"])
        lin = geointerp.CubicCurve.linear(z1, z2)
        tag = f"pair{k:02d}"
        meta = {"endpoints": [i, j]}
        files += geointerp.export_curve(out / f"{tag}_geodesic.csv", fit.curve, model.geometry_decoder,
                                        sampling, weights, fit.losses, cfg["seed"], extra=meta)
        files += geointerp.export_curve(out / f"{tag}_linear.csv", lin, model.geometry_decoder,
                                        sampling, weights, seed=cfg["seed"], extra=meta)
        m = int(icfg["frames"])
        s = np.linspace(0.0, 1.0, m)
        g_dec = geointerp.decoded_points(mean_dec, fit.curve, m)
        l_dec = geointerp.decoded_points(mean_dec, lin, m)
        dfields = ["s"] + [f"x_{d + 1}" for d in range(g_dec.shape[1])]
        for name, arr in (("geodesic", g_dec), ("linear", l_dec)):
            rows = [dict(zip(dfields, [s[r], *arr[r]])) for r in range(m)]
            files.append(write_rows(out / f"{tag}_decoded_{name}.csv", dfields, rows))
        row = {"pair": k, "i": i, "j": j,
               "geodesic_length": geointerp.decoded_length(mean_dec, fit.curve),
               "linear_length": geointerp.decoded_length(mean_dec, lin),
               "geodesic_loss": fit.losses["total"],
               "best_step": fit.best_step, "diverged": fit.diverged}
        if model.arch.input_shape == (2,):
            dense_g = geointerp.decoded_points(mean_dec, fit.curve, 400)
            dense_l = geointerp.decoded_points(mean_dec, lin, 400)
            row["geodesic_min_radius"] = float(np.hypot(*dense_g.T).min())
            row["linear_min_radius"] = float(np.hypot(*dense_l.T).min())
        summary.append(row)
        if cfg["plots"]:
            from . import plotting

            sp = sampling.s
            speeds = {"geodesic": geointerp.decode_curve(model.geometry_decoder, fit.curve, sampling).speed,
                      "linear": geointerp.decode_curve(model.geometry_decoder, lin, sampling).speed}
            files.append(plotting.plot_speed(sp, speeds, out / f"{tag}_speed.png"))
            if model.arch.input_shape == (2,):
                spec = manifest.get("dataset", {})
                bg = load_dataset(spec, "train", cfg["seed"]).images if spec.get("name") == "donut" else None
                radii = (spec.get("inner", 0.8), spec.get("outer", 1.2)) if bg is not None else None
                files.append(plotting.plot_paths_2d(dense_g, dense_l, out / f"{tag}_paths.png", bg, radii))
            elif model.arch.is_image:
                files.append(plotting.plot_frames(g_dec, l_dec, model.arch.input_shape,
                                                  out / f"{tag}_frames.png"))
    fields = list(summary[0])
    files.append(write_rows(out / "interpolation_summary.csv", fields, summary))
    files.append(write_manifest(out, "interpolate", cfg, files))
    return {"summary": summary}


def _latent_samples(cfg: dict, model: VaeModel, manifest: dict, n: int) -> np.ndarray:
    rng = np.random.default_rng(cfg["seed"])
    source = cfg["diagnose"].get("latent_source")
    spec = manifest.get("dataset")
    if source is None:
        source = "posterior" if spec else "prior"
    if source == "prior":
        return rng.standard_normal((n, model.arch.latent_dim))
    if source != "posterior":
        raise ConfigError(f"latent_source must be 'prior' or 'posterior', got {source!r}")
    if not spec:
        raise ConfigError("posterior sampling needs the checkpoint's dataset spec")
    data = load_dataset(spec, "train", cfg["seed"])
    pick = rng.integers(0, len(data), n)
    with dc.no_grad():
        mean, lv = model.encoder_stats(data.images[pick])
    return mean.data + np.exp(0.5 * lv.data) * rng.standard_normal(mean.shape)


def diagnose_model(model: VaeModel, z: np.ndarray, batch: int = 500):
    """Condition number and magnification factor of the mean decoder at each row of ``z``."""
    cond, mf = [], []
    for lo in range(0, len(z), batch):
        jac = manifold.decoder_jacobian(model.decode_joint, z[lo:lo + batch])
        cond.append(np.atleast_1d(manifold.condition_number(jac)))
        mf.append(np.atleast_1d(manifold.magnification_factor(jac)))
    return np.concatenate(cond), np.concatenate(mf)


def cmd_diagnose(cfg: dict) -> dict:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    model, manifest = _require_checkpoint(cfg)
    n = int(cfg["diagnose"]["samples"])
    if n < 1:
        raise ConfigError("samples must be at least 1")
    z = _latent_samples(cfg, model, manifest, n)
    cond, mf = diagnose_model(model, z, int(cfg["diagnose"]["batch"]))
    mf_norm = manifold.normalize_mf(mf)
    rows = [{"z_index": i, "condition_number": cond[i], "mf": mf[i], "normalized_mf": mf_norm[i]}
            for i in range(n)]
    files = [write_rows(out / "diagnostics.csv", ["z_index", "condition_number", "mf", "normalized_mf"], rows)]
    finite = cond[np.isfinite(cond)]
    agg = {"n": n, "median_condition_number": float(np.median(cond)),
           "finite_condition_numbers": int(finite.size),
           "mean_mf": float(mf.mean()), "degenerate_points": int((mf == 0).sum())}
    (out / "diagnostics.json").write_text(json.dumps(agg, indent=2, sort_keys=True))
    files.append(out / "diagnostics.json")
    if cfg["plots"]:
        from . import plotting

        files.append(plotting.plot_diagnostics(cond, mf_norm, out / "diagnostics.png"))
    files.append(write_manifest(out, "diagnose", cfg, files))
    return {"condition_number": cond, "mf": mf, "mf_normalized": mf_norm, **agg}


def cmd_evaluate(cfg: dict) -> dict:
    out = Path(cfg["out"])
    model, manifest = _require_checkpoint(cfg)
    ecfg = cfg["evaluate"]
    spec = _merge(manifest.get("dataset", {}), {k: v for k, v in cfg["dataset"].items() if v is not None})
    spec["n_test"] = ecfg.get("n_test") or spec.get("n_test")
    test = load_dataset(spec, "test", cfg["seed"])
    holdout = ecfg.get("holdout_digit")
    if holdout is None:
        holdout = spec.get("holdout_digit")
    outliers = None
    if holdout is not None:
        test, outliers = datahub.split_holdout(test, int(holdout))
    if len(test) == 0:
        raise FormatError("test split is empty; no report written")
    out.mkdir(parents=True, exist_ok=True)
    k = int(ecfg["iw_k"])
    x = test.images
    files, result = [], {}
    rng = np.random.default_rng(cfg["seed"])
    ll = evalsuite.iw_loglik(model, x, k, rng=rng)
    dims = model.arch.data_dim
    rows = [{"split": test.split, "index": i, "iw_loglik": float(v),
             "bits_per_dim": evalsuite.bits_per_dim(float(v), dims)} for i, v in enumerate(ll)]
    rep = evalsuite.EvalReport(rows, "iw_loglik", {"seed": cfg["seed"], "K": k, "n": len(x)})
    files += rep.write(out / "iw_loglik")
    result["iw"] = rep
    kinds = [ecfg["noise"]] if ecfg.get("noise") else list(evalsuite.NOISE_KINDS)
    if model.arch.is_image:
        denoise = {}
        for kind in kinds:
            rep = evalsuite.denoise_sweep(model, x, kind, ecfg["levels"], k, seed=cfg["seed"], split=test.split)
            files += rep.write(out / f"denoise_{kind}")
            denoise[kind] = {float(lv): v["mean"] for lv, v in rep.aggregates().items()}
            result[f"denoise_{kind}"] = rep
        result["denoise"] = denoise
    if outliers is not None and len(outliers):
        roc = evalsuite.roc_outlier(model, x, outliers.images)
        roc.write_csv(out / "roc.csv")
        (out / "roc.json").write_text(json.dumps(
            {"auc": roc.auc, "protocol": f"digit {holdout} held out as outliers", "n_inliers": len(x),
             "n_outliers": len(outliers)}, indent=2, sort_keys=True))
        files += [out / "roc.csv", out / "roc.json"]
        result["roc"] = roc
    if cfg["plots"]:
        from . import plotting

        if "denoise" in result:
            files.append(plotting.plot_denoise(result["denoise"], out / "denoise.png"))
        if "roc" in result:
            files.append(plotting.plot_roc(result["roc"].fpr, result["roc"].tpr, result["roc"].auc,
                                           out / "roc.png"))
    files.append(write_manifest(out, "evaluate", cfg, files))
    return result


def cmd_prepare_sample(args) -> int:
    path = datahub.write_sample_mnist(args.out)
    print(path)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "interpolate": cmd_interpolate, "diagnose": cmd_diagnose,
            "evaluate": cmd_evaluate}


# -- argument parsing ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its values")
    common.add_argument("--seed", type=int)
    common.add_argument("--deterministic", action="store_true", help="single-threaded numerics")
    common.add_argument("--out", help="output directory")
    common.add_argument("--dataset", choices=DATASETS)
    common.add_argument("--data-dir", help="directory holding IDX files")
    common.add_argument("--transpose", action="store_true", help="transpose IDX images (EMNIST layout)")
    common.add_argument("--n-train", type=int, help="use only the first N training rows")
    common.add_argument("--holdout-digit", type=int, help="label held out as the outlier class")
    common.add_argument("--no-plots", action="store_true", help="skip PNG figures")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="vtae", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", parents=[common], help="fit a model and write a checkpoint, metrics and loss breakdown")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--k-neighbors", type=int)
    p = sub.add_parser("interpolate", parents=[common], help="fit geodesic curves between latent endpoints")
    p.add_argument("--checkpoint")
    p.add_argument("--endpoints", help="dataset index pairs 'i,j;k,l'")
    p.add_argument("--z1", help="comma-separated latent start")
    p.add_argument("--z2", help="comma-separated latent end")
    p.add_argument("--steps", type=int)
    p = sub.add_parser("diagnose", parents=[common], help="condition number and magnification factor over latent samples")
    p.add_argument("--checkpoint")
    p.add_argument("--samples", type=int)
    p.add_argument("--latent-source", choices=("prior", "posterior"))
    p = sub.add_parser("evaluate", parents=[common], help="IW log-likelihood, denoising sweep and outlier ROC")
    p.add_argument("--checkpoint")
    p.add_argument("--noise", choices=evalsuite.NOISE_KINDS)
    p.add_argument("--levels", help="comma-separated noise levels")
    p.add_argument("--iw-k", type=int)
    p = sub.add_parser("prepare-sample", help="write the bundled 5000-image MNIST sample as IDX files")
    p.add_argument("out")
    return parser


def _thread_limit(deterministic: bool):
    if not deterministic:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "prepare-sample":
        return cmd_prepare_sample(args)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        with _thread_limit(cfg["deterministic"]):
            COMMANDS[args.command](cfg)
    except FormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, NumericalError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ContractViolation as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
