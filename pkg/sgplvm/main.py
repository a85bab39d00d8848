# Command line entry point

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np
import torch

from sgplvm.core.config import RunConfig
from sgplvm.core.exceptions import (
    ConfigError,
    DataFormatError,
    InputError,
    ModelStateError,
    NonFiniteBoundError,
    NumericError,
    ShapeError,
)
from sgplvm.core.logging import configure_logging
from sgplvm.models.checkpoint import Checkpoint
from sgplvm.models.matrix_file import MatrixFile
from sgplvm.numerics.gaussian import LatentGaussian
from sgplvm.repositories import checkpoints, grids, matrix_files
from sgplvm.services import (
    inference_service,
    metrics_service,
    prediction_service,
    synthesis_service,
    training_service,
)
from sgplvm.services.prediction_service import upsample_grid
from sgplvm.services.training_service import TRACE_COLUMNS
from sgplvm.storage import atomic_write
from sgplvm.utils.helpers import destandardize, destandardize_variance

logger = logging.getLogger("sgplvm")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """Parser whose usage errors exit with code 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(path: Optional[str]) -> RunConfig:
    return RunConfig.from_file(path) if path else RunConfig()


def _write_rows(path: Path, rows: Iterable[Sequence]) -> None:
    with atomic_write(path, "w") as handle:
        writer = csv.writer(handle)
        for row in rows:
            writer.writerow(row)


def _raw(model, mean: torch.Tensor, var: torch.Tensor):
    return destandardize(mean, model.y_mean, model.y_scale), destandardize_variance(var, model.y_scale)


def _grid_arrays(out: MatrixFile, factors) -> None:
    for i, x in enumerate(factors):
        out[f"Xs{i}"] = x.numpy()


# Commands

def _require_same_data(model, grid, source: str) -> None:
    """A resumed run must see the data its checkpoint was trained on."""
    saved = model.grid
    same = (
        saved.n_xi == grid.n_xi
        and saved.spatial_shape == grid.spatial_shape
        and saved.d_y == grid.d_y
        and all(torch.equal(a, b) for a, b in zip(saved.xs_factors, grid.xs_factors))
        and (saved.timestamps is None) == (grid.timestamps is None)
        and (saved.timestamps is None or torch.allclose(saved.timestamps, grid.timestamps))
        and torch.allclose(destandardize(saved.y, model.y_mean, model.y_scale), grid.y, rtol=1e-9, atol=1e-9)
    )
    if not same:
        raise DataFormatError(f"{source} does not match the data {model.grid!r} the checkpoint was trained on")


def cmd_train(args, cfg: RunConfig) -> int:
    grid = grids.load_grid(args.data, cfg.layout)
    moments = None
    if args.resume:
        checkpoint = checkpoints.load(args.resume)
        model, moments = checkpoint.model, checkpoint.moments
        _require_same_data(model, grid, ", ".join(args.data))
        logger.info("Resuming from %s", args.resume)
    else:
        model = training_service.initialize(grid, cfg.model, cfg.train)

    trace_path = Path(args.trace) if args.trace else Path(f"{args.out}.trace.csv")
    try:
        result = training_service.train(model, cfg.train, resume=moments)
    except NonFiniteBoundError as exc:
        _write_trace(trace_path, exc.trace)
        raise
    checkpoints.save(args.out, Checkpoint(model, result.moments))
    _write_trace(trace_path, result.trace)
    logger.info("Bound %.6f -> %.6f, checkpoint written to %s",
                result.initial_bound, result.final_bound, args.out)
    return EXIT_OK


def _write_trace(path: Path, trace: List[dict]) -> None:
    rows = [list(TRACE_COLUMNS)]
    rows += [[repr(row[c]) for c in TRACE_COLUMNS] for row in trace]
    _write_rows(path, rows)


def _cases(args, cfg: RunConfig, model):
    return grids.load_cases(
        args.test, args.mask, cfg.layout, model.grid.spatial_shape, model.y_mean, model.y_scale
    )


def cmd_infer(args, cfg: RunConfig) -> int:
    model = checkpoints.load(args.ckpt).model
    cases = _cases(args, cfg, model)
    results = inference_service.infer_many(model, cases, cfg.infer, threads=args.threads)
    out = MatrixFile()
    out["mean"] = torch.cat([r.posterior.mean for r in results]).numpy()
    out["variance"] = torch.cat([r.posterior.variance for r in results]).numpy()
    out["bound"] = np.array([[r.bound] for r in results]).reshape(-1, 1)
    matrix_files.save(args.out, out)
    return EXIT_OK


def cmd_impute(args, cfg: RunConfig) -> int:
    model = checkpoints.load(args.ckpt).model
    infer_cfg = cfg.infer.model_copy(update={
        k: v for k, v in (("n_mog", args.n_mog), ("seed", args.seed)) if v is not None
    })
    cases = _cases(args, cfg, model)
    results = inference_service.impute_many(model, cases, infer_cfg, threads=args.threads)

    filled, variances, truths, means, pred_vars = [], [], [], [], []
    for case, result in zip(cases, results):
        full = case.y_true.clone()
        var = torch.zeros_like(full)
        full[result.missing_idx] = result.prediction.mean
        var[result.missing_idx] = result.prediction.variance
        raw_mean, raw_var = _raw(model, full, var)
        filled.append(raw_mean)
        variances.append(raw_var)
        truths.append(case.y_true[result.missing_idx].numpy())
        means.append(result.prediction.mean.numpy())
        pred_vars.append(result.prediction.variance.numpy())

    out = MatrixFile()
    out["Y"] = torch.cat(filled).numpy()
    out["variance"] = torch.cat(variances).numpy()
    out["mask"] = torch.stack([
        torch.isin(torch.arange(c.n_s), c.observed_idx).to(torch.float64) for c in cases
    ]).numpy()
    matrix_files.save(args.out, out)

    if args.metrics:
        report = metrics_service.report(
            truths, means, pred_vars,
            noise_var=float(1.0 / model.beta.detach()),
            y_scale=model.y_scale.numpy(),
            y_offset=model.y_mean.numpy(),
            raw_mnlp=args.raw_mnlp,
        )
        _write_rows(Path(args.metrics), report.to_csv_rows())
    return EXIT_OK


def _parse_times(text: str) -> torch.Tensor:
    try:
        return torch.tensor([float(v) for v in text.split(",") if v.strip()], dtype=torch.float64)
    except ValueError:
        raise UsageError(f"--times expects comma-separated numbers, got {text!r}") from None


def cmd_predict(args, cfg: RunConfig) -> int:
    model = checkpoints.load(args.ckpt).model
    factors = upsample_grid(model.grid.xs_factors, args.spatial_scale)
    if args.times is not None:
        q_star = prediction_service.dynamical_latent_at(model, _parse_times(args.times))
        pred = prediction_service.predict_mixture(model, q_star, factors, args.n_mog, args.seed).summary()
    else:
        latents = matrix_files.load(args.latents)
        mean = torch.from_numpy(latents["mean"] if "mean" in latents else latents.first())
        if "variance" in latents:
            q_star = LatentGaussian(mean, torch.from_numpy(latents["variance"]))
            pred = prediction_service.predict_mixture(model, q_star, factors, args.n_mog, args.seed).summary()
        else:
            pred = prediction_service.predict_at(model, mean, factors)
    raw_mean, raw_var = _raw(model, pred.mean, pred.variance)
    out = MatrixFile({"mean": raw_mean.numpy(), "variance": raw_var.numpy()})
    _grid_arrays(out, factors)
    matrix_files.save(args.out, out)
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    pred = matrix_files.load(args.pred)
    mean = pred["mean"] if "mean" in pred else pred.first()
    variance = pred["variance"] if "variance" in pred else np.zeros_like(mean)
    truth = matrix_files.load(args.truth)
    y_true = truth["Y"] if "Y" in truth else truth.first()
    if y_true.shape != mean.shape or variance.shape != mean.shape:
        raise ShapeError(f"predictions {mean.shape} / {variance.shape} do not match truth {y_true.shape}")

    if args.mask:
        mask = matrix_files.load(args.mask).first()
        n_cases = mask.shape[0]
        evaluated = mask.reshape(n_cases, -1) == 0
    else:
        n_cases = args.n_cases
        if mean.shape[0] % n_cases:
            raise ShapeError(f"{mean.shape[0]} rows do not split into {n_cases} cases")
        evaluated = np.ones((n_cases, mean.shape[0] // n_cases), dtype=bool)
    if evaluated.size != mean.shape[0]:
        raise ShapeError(f"mask covers {evaluated.size} points, predictions have {mean.shape[0]} rows")

    def per_case(values):
        blocks = values.reshape(n_cases, -1, values.shape[1])
        return [blocks[i][evaluated[i]] for i in range(n_cases)]

    report = metrics_service.report(per_case(y_true), per_case(mean), per_case(variance), noise_var=args.noise_var)
    _write_rows(Path(args.out), report.to_csv_rows())
    return EXIT_OK


def cmd_export_latents(args, cfg: RunConfig) -> int:
    model = checkpoints.load(args.ckpt).model
    with torch.no_grad():
        q = model.latent_marginals()
    out = MatrixFile({
        "mean": q.mean.detach().numpy(),
        "variance": q.variance.detach().numpy(),
        "inverse_lengthscales": (1.0 / model.latent_kernel.lengthscales.detach()).numpy(),
    })
    if model.q_latent.is_dynamical:
        out["t"] = model.q_latent.timestamps.numpy()
    matrix_files.save(args.out, out)
    return EXIT_OK


def cmd_synth(args, cfg: RunConfig) -> int:
    params = cfg.synth
    data = synthesis_service.generate(params)
    split = synthesis_service.split(data)
    out_dir = Path(args.out_dir)
    suffix = ".csv" if args.format == "csv" else ".bin"

    test = MatrixFile({"Y": split.test_images.reshape(-1, params.d_y).numpy()})
    if split.test_times is not None:
        test["t"] = split.test_times.numpy()
    grids.save(out_dir / f"train{suffix}", split.train)
    matrix_files.save(out_dir / f"test{suffix}", test)
    matrix_files.save(out_dir / f"mask{suffix}", MatrixFile({"mask": split.mask.numpy()}))
    matrix_files.save(out_dir / f"latents{suffix}", MatrixFile({"latents": data.latents.numpy()}))

    shape = ", ".join(str(s) for s in params.spatial_shape)
    lines = [
        f"# synthetic {params.kind} data, seed {params.seed}",
        f"layout.spatial_shape = {shape}",
        f"layout.d_y = {params.d_y}",
        f"model.d_xi = {params.d_xi}",
        f"model.m_xi = {min(split.train.n_xi, 20)}",
    ]
    if params.kind == "dynamic_video":
        lines.append("model.prior = dynamical")
    with atomic_write(out_dir / "config.txt", "w") as handle:
        handle.write("\n".join(lines) + "\n")
    logger.info("Wrote synthetic dataset to %s", out_dir)
    return EXIT_OK


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="sgplvm", description="Structured Bayesian GP-LVM")
    parser.add_argument("--log-level", default="INFO", help="logging level (default INFO)")
    parser.add_argument("--threads", type=int, default=1, help="worker threads for per-case work")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    p = sub.add_parser("train", help="fit a model to training data")
    p.add_argument("--data", nargs="+", required=True, help="one or more data files")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.add_argument("--trace", help="bound trace CSV, default <out>.trace.csv")
    p.add_argument("--resume", help="checkpoint to continue training from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="infer test latents")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--mask", help="observation mask, 1 = observed")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("impute", help="fill in missing values of test images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--mask", required=True, help="observation mask, 1 = observed")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", help="metrics report CSV over the missing values")
    p.add_argument("--n-mog", type=int, dest="n_mog")
    p.add_argument("--seed", type=int)
    p.add_argument("--raw-mnlp", action="store_true", dest="raw_mnlp", help="MNLP in raw data units")
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("predict", help="generate predictions at latent points or times")
    p.add_argument("--ckpt", required=True)
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--latents", help="file with latent means (and optional variances)")
    source.add_argument("--times", help="comma-separated times, dynamical models only")
    p.add_argument("--spatial-scale", type=int, default=1, dest="spatial_scale",
                   help="k-fold spatial upsampling of the training grid")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--n-mog", type=int, default=20, dest="n_mog")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="RMSE and MNLP of predictions against truth")
    p.add_argument("--pred", required=True, help="file with mean and variance")
    p.add_argument("--truth", required=True)
    p.add_argument("--mask", help="evaluate where the mask is 0")
    p.add_argument("--n-cases", type=int, default=1, dest="n_cases")
    p.add_argument("--noise-var", type=float, default=0.0, dest="noise_var")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-latents", help="dump latent posteriors and inverse lengthscales")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_latents)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--format", choices=("binary", "csv"), default="binary")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    try:
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        cfg = _load_config(getattr(args, "config", None))
        return args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"sgplvm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, ShapeError, InputError, ModelStateError) as exc:
        print(f"sgplvm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"sgplvm: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
