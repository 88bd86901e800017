"""Command-line front end: ``svreg {register,synth,tune,eval,warp} --config cfg.json``.

Exit codes: 0 success, 1 invalid configuration or inputs, 2 I/O failure,
3 numerical abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from threadpoolctl import threadpool_limits

from .field import GridMismatchError, warp, warp_nearest
from .hyperopt import PrunerConfig, SamplerConfig, SearchSpace, TpeStudy, TrialPruned, run_study
from .metrics import LandmarkSet, dice, report, tre
from .optimize import AdamConfig, NonFiniteLossError, RegistrationConfig, register
from .regularizer import BetaPrior, GaussianPrior, prior_from_dict, prior_to_dict
from .similarity import NccConfig, one_hot
from .storage import (
    file_sha256,
    load_volume,
    read_json,
    read_landmarks,
    save_volume,
    write_json,
    write_landmarks,
)
from .synth import SCENARIOS, make_pair

log = logging.getLogger("svreg")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(ValueError):
    """Configuration or input content is invalid (exit code 1)."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BetaPriorModel(_Strict):
    kind: Literal["beta"] = "beta"
    alpha_prime: float = Field(0.175, ge=0)
    lambda_max: float = Field(3.354, ge=0)


class GaussianPriorModel(_Strict):
    kind: Literal["gaussian"]
    sigma_prime: float = Field(0.525, ge=0)
    lambda_mean: float = Field(3.796, gt=0)


class UniformModel(_Strict):
    kind: Literal["uniform"]
    value: float = Field(ge=0)


PriorModel = BetaPriorModel | GaussianPriorModel | UniformModel


class RegistrationSettings(_Strict):
    prior: PriorModel = Field(default_factory=BetaPriorModel, discriminator="kind")
    prior_file: str | None = None
    iterations: int = Field(400, ge=1)
    learning_rate: float = Field(1e-2, gt=0)
    n_squaring: int = Field(7, ge=0)
    ncc_window: int = Field(9, ge=1)
    sigma_i: float = Field(1.0, gt=0)
    lambda_resolution_factor: float = Field(0.25, gt=0, le=1)
    dice_weight: float = Field(0.0, ge=0)

    def resolved_prior(self):
        if self.prior_file is not None:
            best = read_json(self.prior_file)
            try:
                return prior_from_dict(best["prior"])
            except (KeyError, TypeError) as exc:
                raise ConfigError(f"{self.prior_file}: not a best-params file ({exc})") from exc
        return prior_from_dict(self.prior.model_dump())

    def to_registration(self, seed: int) -> RegistrationConfig:
        return RegistrationConfig(
            ncc=NccConfig(window=self.ncc_window, sigma_i=self.sigma_i),
            prior=self.resolved_prior(),
            n_squaring=self.n_squaring,
            iterations=self.iterations,
            adam=AdamConfig(lr=self.learning_rate),
            lambda_resolution_factor=self.lambda_resolution_factor,
            dice_weight=self.dice_weight,
            seed=seed,
        )


class _Common(_Strict):
    seed: int = 0
    out_dir: str = "."
    threads: int | None = Field(None, ge=1)


class RegisterConfig(_Common, RegistrationSettings):
    moving: str
    fixed: str
    moving_labels: str | None = None
    fixed_labels: str | None = None
    moving_landmarks: str | None = None
    fixed_landmarks: str | None = None


class SynthConfig(_Common):
    scenarios: list[str]
    seed: int | None = None


class TuneConfig(_Common, RegistrationSettings):
    scenarios: list[str]
    prior_kind: Literal["beta", "gaussian"] = "beta"
    space: dict[str, tuple[float, float]] | None = None
    metric: Literal["dice", "tre"] = "tre"
    n_trials: int = Field(50, ge=0)
    study_file: str | None = None
    pruning: bool = True


class EvalConfig(_Common):
    displacement: str
    moving_labels: str | None = None
    fixed_labels: str | None = None
    moving_landmarks: str | None = None
    fixed_landmarks: str | None = None


class WarpConfig(_Common):
    displacement: str
    image: str
    mode: Literal["auto", "linear", "nearest"] = "auto"
    output: str = "warped.npy"


DEFAULT_SPACES = {
    "beta": {"lambda_max": (0.5, 5.0), "alpha_prime": (0.0, 0.2)},
    "gaussian": {"lambda_mean": (0.5, 5.0), "sigma_prime": (0.0, 1.0)},
}

COMMANDS = {
    "register": RegisterConfig,
    "synth": SynthConfig,
    "tune": TuneConfig,
    "eval": EvalConfig,
    "warp": WarpConfig,
}


def config_hash(cfg: BaseModel) -> str:
    """SHA-256 of the canonical JSON of every setting that can change results."""
    data = cfg.model_dump(mode="json", exclude={"out_dir", "threads"})
    return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()


def _out(cfg: _Common, name: str) -> Path:
    return Path(cfg.out_dir) / name


def _check_grids(a_meta: dict, b_meta: dict, a_shape, b_shape, what: str) -> None:
    if tuple(a_shape) != tuple(b_shape):
        raise GridMismatchError(f"{what}: grids {tuple(a_shape)} and {tuple(b_shape)} differ")
    if not np.allclose(a_meta["spacing"], b_meta["spacing"]):
        raise GridMismatchError(f"{what}: spacings {a_meta['spacing']} and {b_meta['spacing']} differ")


def _load_landmarks(cfg) -> tuple[LandmarkSet, LandmarkSet] | None:
    if cfg.moving_landmarks is None and cfg.fixed_landmarks is None:
        return None
    if cfg.moving_landmarks is None or cfg.fixed_landmarks is None:
        raise ConfigError("moving_landmarks and fixed_landmarks must be given together")
    return read_landmarks(cfg.moving_landmarks), read_landmarks(cfg.fixed_landmarks)


def _load_label_pair(cfg, shape, meta):
    if cfg.moving_labels is None and cfg.fixed_labels is None:
        return None
    if cfg.moving_labels is None or cfg.fixed_labels is None:
        raise ConfigError("moving_labels and fixed_labels must be given together")
    ml, ml_meta = load_volume(cfg.moving_labels)
    fl, fl_meta = load_volume(cfg.fixed_labels)
    _check_grids(meta, ml_meta, shape, ml.shape, "moving labels")
    _check_grids(meta, fl_meta, shape, fl.shape, "fixed labels")
    return ml.astype(np.int64), fl.astype(np.int64)


def cmd_register(cfg: RegisterConfig) -> int:
    moving, m_meta = load_volume(cfg.moving)
    fixed, f_meta = load_volume(cfg.fixed)
    _check_grids(f_meta, m_meta, fixed.shape, moving.shape, "moving image")
    spacing = f_meta["spacing"]
    reg_cfg = cfg.to_registration(cfg.seed)
    labels = _load_label_pair(cfg, fixed.shape, f_meta)
    lms = _load_landmarks(cfg)

    label_stacks = None
    if labels is not None and reg_cfg.dice_weight > 0:
        classes = sorted(int(c) for c in np.union1d(np.unique(labels[0]), np.unique(labels[1])) if c != 0)
        label_stacks = (one_hot(labels[0], classes), one_hot(labels[1], classes))
    result = register(moving, fixed, reg_cfg, labels=label_stacks)

    digest = config_hash(cfg)
    extra = {"config_hash": digest}
    save_volume(_out(cfg, "displacement.npy"), result.displacement, spacing, vector=True, extra=extra)
    save_volume(_out(cfg, "inverse_displacement.npy"), result.inverse_displacement, spacing, vector=True, extra=extra)
    save_volume(_out(cfg, "velocity.npy"), result.velocity, spacing, vector=True, extra=extra)
    save_volume(_out(cfg, "lambda.npy"), result.lambda_field, spacing, extra=extra)
    rep = report(result, labels=labels, landmarks=None if lms is None else (*lms, spacing))
    rep["config_hash"] = digest
    rep["config"] = cfg.model_dump(mode="json")
    write_json(_out(cfg, "report.json"), rep)
    log.info("registration done in %.1f s; report written to %s", result.wall_time, _out(cfg, "report.json"))
    return EXIT_OK


def _landmark_grid(foreground: np.ndarray, step: int = 16) -> np.ndarray:
    idx = np.argwhere(foreground)
    keep = np.all(idx % step == step // 2, axis=1)
    return idx[keep].astype(np.float64)


def synth_bundle(name: str, seed: int | None = None) -> dict:
    """Arrays and landmarks of a named scenario (``seed`` replaces the frozen one)."""
    if name not in SCENARIOS:
        raise ConfigError(f"unknown scenario {name!r}; valid names: {', '.join(sorted(SCENARIOS))}")
    sc = SCENARIOS[name] if seed is None else dataclasses.replace(SCENARIOS[name], seed=seed)
    pair = make_pair(sc)
    d = pair["true_disp"].shape[0]
    fixed_pts = _landmark_grid(pair["foreground"])
    offsets = np.stack([pair["true_disp"][a][tuple(fixed_pts.astype(int).T)] for a in range(d)], axis=1)
    return {
        "arrays": {
            "moving": pair["moving"],
            "fixed": pair["fixed"],
            "true_displacement": pair["true_disp"],
            "band_mask": pair["mask"],
            "foreground": pair["foreground"],
            "moving_labels": pair["labels"],
            "fixed_labels": pair["fixed_labels"],
        },
        "landmarks": {
            "fixed_landmarks": LandmarkSet(fixed_pts),
            "moving_landmarks": LandmarkSet(fixed_pts + offsets),
        },
        "scenario": dataclasses.asdict(sc),
    }


def cmd_synth(cfg: SynthConfig) -> int:
    for name in cfg.scenarios:
        if name not in SCENARIOS:
            raise ConfigError(f"unknown scenario {name!r}; valid names: {', '.join(sorted(SCENARIOS))}")
    digest = config_hash(cfg)
    for name in cfg.scenarios:
        bundle = synth_bundle(name, cfg.seed)
        root = _out(cfg, name)
        files = {}
        for key, arr in bundle["arrays"].items():
            path = root / f"{key}.npy"
            save_volume(path, arr, vector=key == "true_displacement", extra={"config_hash": digest})
            files[path.name] = file_sha256(path)
            files[path.with_suffix(".json").name] = file_sha256(path.with_suffix(".json"))
        for key, lms in bundle["landmarks"].items():
            path = root / f"{key}.csv"
            write_landmarks(path, lms)
            files[path.name] = file_sha256(path)
        manifest = {"scenario": name, "parameters": bundle["scenario"], "config_hash": digest, "files": files}
        write_json(root / "manifest.json", manifest)
        log.info("wrote scenario %s to %s", name, root)
    return EXIT_OK


def _trial_prior(kind: str, params: dict):
    if kind == "beta":
        return BetaPrior(alpha_prime=params["alpha_prime"], lambda_max=params["lambda_max"])
    return GaussianPrior(sigma_prime=params["sigma_prime"], lambda_mean=params["lambda_mean"])


def tuning_objective(cfg: TuneConfig):
    """Objective closure: mean validation metric over the configured scenarios."""
    cases = [synth_bundle(name) for name in cfg.scenarios]
    base = cfg.to_registration(cfg.seed)
    interval = PrunerConfig().interval_steps

    def case_metric(case, disp) -> float:
        arr = case["arrays"]
        if cfg.metric == "dice":
            return dice(warp_nearest(arr["moving_labels"], disp), arr["fixed_labels"])["mean"]
        lm = case["landmarks"]
        return tre(lm["moving_landmarks"], lm["fixed_landmarks"], disp).mean

    def objective(trial) -> float:
        prior = _trial_prior(cfg.prior_kind, trial.params)
        reg_cfg = dataclasses.replace(base, prior=prior)
        scores = []
        for i, case in enumerate(cases):
            arr = case["arrays"]

            def callback(it, ev, offset=i * reg_cfg.iterations, case=case):
                step = offset + it
                if step % interval == 0:
                    trial.report(step, float(np.mean(scores + [case_metric(case, ev.disp)])))
                    if cfg.pruning and trial.should_prune(step):
                        raise TrialPruned()

            res = register(arr["moving"], arr["fixed"], reg_cfg, callback=callback)
            scores.append(case_metric(case, res.displacement))
        return float(np.mean(scores))

    return objective


def cmd_tune(cfg: TuneConfig) -> int:
    for name in cfg.scenarios:
        if name not in SCENARIOS:
            raise ConfigError(f"unknown scenario {name!r}; valid names: {', '.join(sorted(SCENARIOS))}")
    space = SearchSpace.from_dict(cfg.space or DEFAULT_SPACES[cfg.prior_kind])
    expected = set(DEFAULT_SPACES[cfg.prior_kind])
    if {p.name for p in space.params} != expected:
        raise ConfigError(f"{cfg.prior_kind} search space must define {sorted(expected)}")
    study_path = Path(cfg.study_file) if cfg.study_file else _out(cfg, "study.json")
    if study_path.exists():
        study = TpeStudy.load(study_path)
        log.info("resuming study with %d trials", len(study.trials))
    else:
        direction = "maximize" if cfg.metric == "dice" else "minimize"
        study = TpeStudy(direction, SamplerConfig(seed=cfg.seed), PrunerConfig(enabled=cfg.pruning))
    remaining = max(0, cfg.n_trials - len(study.trials))
    best = run_study(tuning_objective(cfg), space, remaining, study, path=study_path)
    study.save(study_path)
    if best is None:
        log.error("no trial completed")
        return EXIT_NUMERIC
    write_json(
        _out(cfg, "best_params.json"),
        {
            "prior": prior_to_dict(_trial_prior(cfg.prior_kind, best.params)),
            "metric": cfg.metric,
            "value": best.final,
            "trial": best.id,
            "config_hash": config_hash(cfg),
        },
    )
    return EXIT_OK


def cmd_eval(cfg: EvalConfig) -> int:
    disp, d_meta = load_volume(cfg.displacement)
    if not d_meta["vector"]:
        raise ConfigError(f"{cfg.displacement} is not a vector field")
    shape = disp.shape[1:]
    out = {"displacement": cfg.displacement, "config_hash": config_hash(cfg)}
    labels = _load_label_pair(cfg, shape, d_meta)
    if labels is not None:
        scores = dice(warp_nearest(labels[0], disp), labels[1])
        out["dice_mean"] = scores["mean"]
        out["dice_per_class"] = {str(k): v for k, v in scores["per_class"].items()}
    lms = _load_landmarks(cfg)
    if lms is not None:
        res = tre(lms[0], lms[1], disp, d_meta["spacing"])
        out["tre_mean_mm"] = res.mean
        out["tre_mm"] = [float(x) for x in res.distances]
        out["tre_excluded"] = res.excluded
    write_json(_out(cfg, "metrics.json"), out)
    return EXIT_OK


def cmd_warp(cfg: WarpConfig) -> int:
    disp, d_meta = load_volume(cfg.displacement)
    image, i_meta = load_volume(cfg.image)
    _check_grids(d_meta, i_meta, disp.shape[1:], image.shape, "image")
    nearest = cfg.mode == "nearest" or (cfg.mode == "auto" and image.dtype.kind in "iub")
    out = warp_nearest(image, disp) if nearest else warp(image.astype(np.float64), disp)
    save_volume(_out(cfg, cfg.output), out, i_meta["spacing"], extra={"config_hash": config_hash(cfg)})
    return EXIT_OK


HANDLERS = {"register": cmd_register, "synth": cmd_synth, "tune": cmd_tune, "eval": cmd_eval, "warp": cmd_warp}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="svreg", description="Spatially varying regularization for registration.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON configuration document")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir")
        p.add_argument("--threads", type=int)
    return parser


def load_config(command: str, path, overrides: dict) -> BaseModel:
    """Parse and validate a command's configuration; flags replace top-level keys."""
    try:
        data = read_json(path)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: configuration must be a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return COMMANDS[command].model_validate(data)


def _thread_count(flag: int | None, cfg_value: int | None) -> int | None:
    if flag is not None:
        return flag
    if cfg_value is not None:
        return cfg_value
    env = os.environ.get("SVREG_THREADS")
    return int(env) if env else None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.command, args.config, {"seed": args.seed, "out_dir": args.out_dir, "threads": args.threads})
        threads = _thread_count(args.threads, cfg.threads)
        with threadpool_limits(limits=threads):
            return HANDLERS[args.command](cfg)
    except (ValidationError, ConfigError, GridMismatchError) as exc:
        print(f"svreg {args.command}: invalid configuration or input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as exc:
        print(f"svreg {args.command}: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"svreg {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"svreg {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
