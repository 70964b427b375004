"""End-to-end experiment pipeline.

Subcommands: phantom, split, preprocess, train, sweep, predict, evaluate.
Every stage is a pure function of (inputs, config, seed); re-running a
stage with the same inputs reproduces its outputs byte for byte (exactly
so in float64 mode). All randomness flows from the one global seed through
named sub-seeds.
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import analysis, autodiff, baselines, phantom, preprocess, unet3d, volgrid
from .errors import ConfigError, InternalError, LrrsegError
from .seeding import derive_seed

__all__ = ["ExperimentConfig", "load_config", "run_phantom", "run_split", "run_preprocess",
           "run_train", "run_sweep", "run_predict", "run_evaluate", "main"]

AI_METHODS = ("ai_random", "ai_finetune")
ALL_METHODS = ("ai_random", "ai_finetune", "suvmax", "gtv")


@dataclasses.dataclass
class ExperimentConfig:
    manifest: str
    out: str
    seed: int = 0
    preset: str = "desk"  # "desk" | "clinical"
    crop_dims: tuple = None  # None -> computed from the train+val cases
    padding_fraction: float = 0.15
    methods: tuple = ALL_METHODS
    train: unet3d.TrainConfig = dataclasses.field(default_factory=unet3d.TrainConfig)
    fp64: bool = False

    def __post_init__(self):
        self.methods = tuple(self.methods)
        if self.crop_dims is not None:
            self.crop_dims = tuple(self.crop_dims)
        if self.preset not in ("desk", "clinical"):
            raise ConfigError(f"preset must be 'desk' or 'clinical', got {self.preset!r}")
        bad = [m for m in self.methods if m not in ALL_METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; choose from {ALL_METHODS}")
        if not self.methods:
            raise ConfigError("method list is empty")

    @property
    def unet(self) -> unet3d.UNetConfig:
        return unet3d.DESK_PRESET if self.preset == "desk" else unet3d.CLINICAL_PRESET

    @property
    def dtype(self):
        return np.float64 if self.fp64 else np.float32

    @property
    def split_path(self) -> str:
        return os.path.join(self.out, "split.json")


def load_config(path: str) -> ExperimentConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as f:
        raw = json.load(f)
    train = unet3d.TrainConfig(**raw.pop("train", {}))
    crop = raw.pop("crop_dims", None)
    try:
        cfg = ExperimentConfig(train=train, crop_dims=tuple(crop) if crop else None, **raw)
    except TypeError as e:
        raise ConfigError(f"bad config {path}: {e}") from None
    return cfg


def _require(path: str, hint: str) -> str:
    if not os.path.exists(path):
        raise IOError(f"missing {path} ({hint})")
    return path


# ---------------------------------------------------------------------------
# Stage implementations
# ---------------------------------------------------------------------------

def _to_tuple(value):
    return tuple(_to_tuple(v) for v in value) if isinstance(value, list) else value


def run_phantom(out_dir: str, n: int, n_pretrain: int = 0, seed: int = 0,
                params_file: str = None) -> str:
    overrides = {}
    if params_file is not None:
        with open(_require(params_file, "phantom parameter file")) as f:
            overrides = {k: _to_tuple(v) for k, v in json.load(f).items()}
    params = dataclasses.replace(phantom.PhantomParams(seed=seed), **overrides)
    cases, key = phantom.generate_cohort(params, n, n_pretrain)
    return phantom.write_cohort(out_dir, cases, key)


def run_split(cfg: ExperimentConfig) -> preprocess.CohortSplit:
    entries = preprocess.read_manifest(_require(cfg.manifest, "cohort manifest"))
    relapse_ids = [e["id"] for e in entries if e["role"] == "relapse-task"]
    split = preprocess.split_cohort(relapse_ids, cfg.seed)
    os.makedirs(cfg.out, exist_ok=True)
    preprocess.save_split(cfg.split_path, split)
    return split


def _load_normalized(cfg: ExperimentConfig):
    cases = [preprocess.normalize_case(c)
             for c in preprocess.load_cohort(_require(cfg.manifest, "cohort manifest"))]
    return {c.id: c for c in cases}


def _resolve_crop(cfg: ExperimentConfig, by_id, split) -> preprocess.CropSpec:
    spec_path = os.path.join(cfg.out, "crop_spec.json")
    if cfg.crop_dims is not None:
        spec = preprocess.CropSpec(cfg.crop_dims, cfg.padding_fraction)
    elif os.path.exists(spec_path):
        with open(spec_path) as f:
            d = json.load(f)
        spec = preprocess.CropSpec(tuple(d["dims"]), d["padding_fraction"])
    else:
        fit_cases = [by_id[i] for i in split.train + split.val]
        spec = preprocess.compute_crop_extent(fit_cases, cfg.padding_fraction,
                                              cfg.unet.levels)
    spec.validate_pooling(cfg.unet.pool_factor)
    os.makedirs(cfg.out, exist_ok=True)
    with open(spec_path, "w") as f:
        json.dump({"dims": list(spec.dims), "padding_fraction": spec.padding_fraction}, f)
        f.write("\n")
    return spec


def _load_split(cfg: ExperimentConfig) -> preprocess.CohortSplit:
    return preprocess.load_split(_require(cfg.split_path, "run the split stage first"))


def run_preprocess(cfg: ExperimentConfig) -> str:
    """Materialize the normalized crops of every split case as VF32 files."""
    by_id = _load_normalized(cfg)
    split = _load_split(cfg)
    spec = _resolve_crop(cfg, by_id, split)
    out = os.path.join(cfg.out, "preprocessed")
    os.makedirs(out, exist_ok=True)
    for cid in split.train + split.val + split.test:
        case = by_id[cid]
        center = preprocess.gtv_centroid_voxel(case.gtv)
        ct_crop = volgrid.crop_centered(case.ct, center, spec.dims,
                                        fill=preprocess.CT_FILL_NORMALIZED)
        pet_crop = volgrid.crop_centered(case.pet, center, spec.dims, fill=preprocess.PET_FILL)
        volgrid.save_vf32(os.path.join(out, f"{cid}_input_ct"), ct_crop, "ct")
        volgrid.save_vf32(os.path.join(out, f"{cid}_input_pet"), pet_crop, "pet")
        if case.relapse is not None:
            label_crop = volgrid.crop_centered(case.relapse, center, spec.dims, fill=0)
            volgrid.save_vf32(os.path.join(out, f"{cid}_label"), label_crop, "mask")
    return out


def _checkpoint_base(cfg, name) -> str:
    return os.path.join(cfg.out, "checkpoints", name)


def _save_run(cfg, method, run, result) -> None:
    model_path = _checkpoint_base(cfg, f"{method}_run{run}")
    unet3d.write_history_csv(os.path.join(cfg.out, f"history_{method}_run{run}.csv"),
                             result.history)
    autodiff.save_checkpoint(model_path, result.best_weights)


def run_train(cfg: ExperimentConfig) -> dict:
    """Train the requested CNN strategies; writes checkpoints, histories,
    and a summary with each method's validation performance."""
    by_id = _load_normalized(cfg)
    split = _load_split(cfg)
    spec = _resolve_crop(cfg, by_id, split)
    spec.validate_pooling(cfg.unet.pool_factor)
    os.makedirs(os.path.join(cfg.out, "checkpoints"), exist_ok=True)

    train_samples = preprocess.make_samples([by_id[i] for i in split.train], spec)
    val_samples = preprocess.make_samples([by_id[i] for i in split.val], spec)
    summary = {"seed": cfg.seed, "preset": cfg.preset, "crop_dims": list(spec.dims),
               "methods": {}}

    if "ai_random" in cfg.methods:
        tcfg = dataclasses.replace(cfg.train, seed=derive_seed(cfg.seed, "ai_random"))
        best, results = unet3d.train_ensemble(cfg.unet, train_samples, val_samples, tcfg,
                                              dtype=cfg.dtype)
        for run, r in enumerate(results):
            _save_run(cfg, "ai_random", run, r)
        best_run = int(np.argmax([r.best_val_dice for r in results]))
        autodiff.save_checkpoint(_checkpoint_base(cfg, "ai_random_best"), best.best_weights)
        summary["methods"]["ai_random"] = {
            "best_val_dice": best.best_val_dice, "best_epoch": best.best_epoch,
            "best_run": best_run,
            "member_val_dice": [r.best_val_dice for r in results]}

    if "ai_finetune" in cfg.methods:
        pretrain_ids = [c.id for c in by_id.values() if c.meta.get("role") == "pretrain-task"]
        if len(pretrain_ids) < 3:
            raise ConfigError("ai_finetune needs at least 3 pretraining-task cases")
        pre_split = preprocess.split_cohort(sorted(pretrain_ids),
                                            derive_seed(cfg.seed, "pretrain-split"))
        pre_train = preprocess.make_samples([by_id[i] for i in pre_split.train + pre_split.test],
                                            spec, target="gtv")
        pre_val = preprocess.make_samples([by_id[i] for i in pre_split.val], spec, target="gtv")
        pcfg = dataclasses.replace(cfg.train, seed=derive_seed(cfg.seed, "pretrain"))
        pre_result = unet3d.pretrain_tumour(cfg.unet, pre_train, pre_val, pcfg, dtype=cfg.dtype)
        autodiff.save_checkpoint(_checkpoint_base(cfg, "pretrain"), pre_result.best_weights)
        unet3d.write_history_csv(os.path.join(cfg.out, "history_pretrain.csv"),
                                 pre_result.history)

        fcfg = dataclasses.replace(cfg.train, seed=derive_seed(cfg.seed, "ai_finetune"))
        best, results = unet3d.finetune(pre_result.best_weights, cfg.unet, train_samples,
                                        val_samples, fcfg, dtype=cfg.dtype)
        for run, r in enumerate(results):
            _save_run(cfg, "ai_finetune", run, r)
        best_run = int(np.argmax([r.best_val_dice for r in results]))
        autodiff.save_checkpoint(_checkpoint_base(cfg, "ai_finetune_best"), best.best_weights)
        summary["methods"]["ai_finetune"] = {
            "best_val_dice": best.best_val_dice, "best_epoch": best.best_epoch,
            "best_run": best_run, "pretrain_val_dice": pre_result.best_val_dice,
            "member_val_dice": [r.best_val_dice for r in results]}

    with open(os.path.join(cfg.out, "train_summary.json"), "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
        f.write("\n")
    return summary


def run_sweep(cfg: ExperimentConfig) -> baselines.SuvSweepResult:
    """SUVmax percentile sweep on the validation cases.

    Thresholding happens on the raw PET: percentages of SUVmax are defined
    in SUV units, the z-score is a CNN-input transform only."""
    split = _load_split(cfg)
    raw = {c.id: c for c in preprocess.load_cohort(_require(cfg.manifest, "cohort manifest"))}
    result = baselines.suvmax_sweep([raw[i] for i in split.val])
    os.makedirs(cfg.out, exist_ok=True)
    baselines.write_sweep_csv(os.path.join(cfg.out, "sweep.csv"), result)
    with open(os.path.join(cfg.out, "sweep_summary.json"), "w") as f:
        json.dump({"best_percent": result.best_percent,
                   "best_mean_dice": result.best_mean_dice}, f, indent=1, sort_keys=True)
        f.write("\n")
    return result


def _load_model(cfg: ExperimentConfig, method: str) -> unet3d.UNet3D:
    base = _checkpoint_base(cfg, f"{method}_best")
    _require(base + ".json", f"train {method} first")
    model = unet3d.UNet3D(cfg.unet, dtype=cfg.dtype)
    model.set_weights(autodiff.load_checkpoint(base))
    return model


def _best_percent(cfg: ExperimentConfig) -> int:
    path = os.path.join(cfg.out, "sweep_summary.json")
    if not os.path.exists(path):
        run_sweep(cfg)
    with open(path) as f:
        return int(json.load(f)["best_percent"])


def _predictions_for(cfg, method, test_ids, normalized, raw, spec):
    """Test-set predictions of one method, as Mask3D on the full case grid."""
    if method in AI_METHODS:
        model = _load_model(cfg, method)
        thr = cfg.train.binarize_threshold
        return [unet3d.predict_mask(model, normalized[i], spec, thr) for i in test_ids]
    if method == "suvmax":
        percent = _best_percent(cfg)
        return [baselines.suvmax_threshold_predict(raw[i].pet, raw[i].gtv, raw[i].brain, percent)
                for i in test_ids]
    if method == "gtv":
        return [baselines.gtv_baseline_predict(raw[i]) for i in test_ids]
    raise ConfigError(f"unknown method {method!r}")


def run_predict(cfg: ExperimentConfig, methods=None) -> str:
    """Write test-set prediction masks as predictions/<case>_<method>.vf32."""
    methods = tuple(methods or cfg.methods)
    normalized = _load_normalized(cfg)
    raw = {c.id: c for c in preprocess.load_cohort(cfg.manifest)}
    split = _load_split(cfg)
    spec = _resolve_crop(cfg, normalized, split)
    pred_dir = os.path.join(cfg.out, "predictions")
    os.makedirs(pred_dir, exist_ok=True)
    for method in methods:
        preds = _predictions_for(cfg, method, split.test, normalized, raw, spec)
        for cid, mask in zip(split.test, preds):
            volgrid.save_vf32(os.path.join(pred_dir, f"{cid}_{method}"), mask, "mask")
    return pred_dir


def run_evaluate(cfg: ExperimentConfig, ci: bool = False) -> dict:
    """Evaluate every configured method on the held-out test cases.

    Model and operating-point selection happened upstream on validation
    data only; this stage is the first to touch test labels, and only to
    score the already-fixed predictors.
    """
    normalized = _load_normalized(cfg)
    raw = {c.id: c for c in preprocess.load_cohort(cfg.manifest)}
    split = _load_split(cfg)
    spec = _resolve_crop(cfg, normalized, split)
    test_cases = [raw[i] for i in split.test]

    def compute():
        method_preds = {m: _predictions_for(cfg, m, split.test, normalized, raw, spec)
                        for m in cfg.methods}
        best_cnn = None
        summary_path = os.path.join(cfg.out, "train_summary.json")
        ai_present = [m for m in cfg.methods if m in AI_METHODS]
        if ai_present:
            with open(_require(summary_path, "train the CNN methods first")) as f:
                tsum = json.load(f)["methods"]
            best_cnn = max(ai_present, key=lambda m: tsum[m]["best_val_dice"])
        reports, comparisons = analysis.build_report(method_preds, test_cases, best_cnn)
        return method_preds, reports, comparisons, best_cnn

    method_preds, reports, comparisons, best_cnn = compute()
    if ci:
        preds2, reports2, comparisons2, _ = compute()
        for m in cfg.methods:
            for a, b in zip(method_preds[m], preds2[m]):
                if not np.array_equal(a.data, b.data):
                    raise InternalError(f"evaluate re-run produced different {m} predictions")
        if [r.summary() for r in reports] != [r.summary() for r in reports2] or \
                comparisons != comparisons2:
            raise InternalError("evaluate re-run produced a different report")

    pred_dir = os.path.join(cfg.out, "predictions")
    os.makedirs(pred_dir, exist_ok=True)
    for method, preds in method_preds.items():
        for cid, mask in zip(split.test, preds):
            volgrid.save_vf32(os.path.join(pred_dir, f"{cid}_{method}"), mask, "mask")
    extra = {"best_cnn": best_cnn, "seed": cfg.seed,
             "suvmax_percent": _best_percent(cfg) if "suvmax" in cfg.methods else None,
             "test_cases": list(split.test)}
    analysis.write_report_json(os.path.join(cfg.out, "report.json"), reports, comparisons, extra)
    analysis.write_report_text(os.path.join(cfg.out, "report.txt"), reports, comparisons)
    with open(os.path.join(cfg.out, "report.json")) as f:
        return json.load(f)


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--manifest", help="cohort manifest path (overrides config)")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--seed", type=int, help="global seed (overrides config)")
    p.add_argument("--preset", choices=("desk", "clinical"), help="network preset")
    p.add_argument("--methods", help="comma-separated subset of " + ",".join(ALL_METHODS))
    p.add_argument("--fp64", action="store_true", help="64-bit verification mode")


def _config_from_args(args) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        if not args.manifest or not args.out:
            raise ConfigError("either --config or both --manifest and --out are required")
        cfg = ExperimentConfig(manifest=args.manifest, out=args.out)
    updates = {}
    if args.manifest:
        updates["manifest"] = args.manifest
    if args.out:
        updates["out"] = args.out
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.preset:
        updates["preset"] = args.preset
    if args.methods:
        updates["methods"] = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    if args.fp64:
        updates["fp64"] = True
    return dataclasses.replace(cfg, **updates) if updates else cfg


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="lrrseg",
                                     description="recurrence-prediction experiment pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True, help="relapse-task cases")
    p.add_argument("--n-pretrain", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--params", help="JSON file overriding PhantomParams fields")

    for name in ("split", "preprocess", "train", "sweep", "predict"):
        _add_common(sub.add_parser(name))
    pe = sub.add_parser("evaluate")
    _add_common(pe)
    pe.add_argument("--ci", action="store_true",
                    help="recompute and compare to catch non-determinism")

    args = parser.parse_args(argv)
    try:
        if args.command == "phantom":
            manifest = run_phantom(args.out, args.n, args.n_pretrain, args.seed, args.params)
            print(f"wrote cohort manifest {manifest}")
            return 0
        cfg = _config_from_args(args)
        if args.command == "split":
            split = run_split(cfg)
            print(f"split {len(split.train)}/{len(split.val)}/{len(split.test)} "
                  f"-> {cfg.split_path}")
        elif args.command == "preprocess":
            print(f"wrote crops to {run_preprocess(cfg)}")
        elif args.command == "train":
            summary = run_train(cfg)
            for m, s in summary["methods"].items():
                print(f"{m}: best val dice {s['best_val_dice']:.4f} "
                      f"(run {s['best_run']}, epoch {s['best_epoch']})")
        elif args.command == "sweep":
            result = run_sweep(cfg)
            print(f"best percent {result.best_percent} "
                  f"(mean val dice {result.best_mean_dice:.4f})")
        elif args.command == "predict":
            print(f"wrote predictions to {run_predict(cfg)}")
        elif args.command == "evaluate":
            report = run_evaluate(cfg, ci=args.ci)
            print(f"wrote {os.path.join(cfg.out, 'report.json')} "
                  f"({len(report['methods'])} methods)")
    except LrrsegError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except IOError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
