"""Command-line entry point: ``train``, ``sample``, ``adapt``, ``eval`` and ``report``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import accounting
from .adapt import build_freeze_plan, posttrain
from .blocks import BatchError, FiTv2, ModelConfig, grid_positions
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RESUMABLE_KEYS, ConfigError, RunConfig
from .evaluate import evaluate_model, metrics_csv, parse_resolution
from .flow import (
    FlowConfig,
    IntegrationError,
    TimestepSampler,
    TrainConfig,
    ema_model,
    init_state,
    ode_sample,
    train_loop,
)
from .numerics import NumericError
from .pipeline import (
    DataError,
    DatasetSpec,
    ImageSample,
    TokenDataset,
    _parse_resolutions,
    read_dataset,
    synth_dataset,
    write_dataset,
)
from .positional import RopeConfigError

log = logging.getLogger("fitv2")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# config -> objects
# ---------------------------------------------------------------------------


def model_config(run: RunConfig) -> ModelConfig:
    m = run.section("model")
    try:
        return ModelConfig(
            layers=m["layers"],
            hidden=m["hidden"],
            heads=m["heads"],
            patch=m["patch"],
            in_channels=m["channels"],
            max_tokens=m["max_tokens"],
            num_classes=m["num_classes"],
            lora_rank=m["lora_rank"] or None,
            rope_base=run["rope.base"],
        )
    except ValueError as e:
        raise ConfigError(f"model: {e}") from None


def flow_config(run: RunConfig, deterministic: bool = False) -> FlowConfig:
    f = run.section("flow")
    ode = f["ode"]
    if deterministic and ode == "adaptive":
        log.warning("reproducibility mode uses fixed-step solvers; replacing adaptive with rk4")
        ode = "rk4"
    try:
        sampler = TimestepSampler(f["sampler"], f["mean"], f["std"])
        return FlowConfig(sampler, ode, f["steps"], f["rtol"], f["atol"], f["cfg"])
    except ValueError as e:
        raise ConfigError(f"flow: {e}") from None


def rope_options(run: RunConfig) -> dict:
    return dict(yarn_alpha=run["rope.yarn_alpha"], yarn_beta=run["rope.yarn_beta"])


def train_config(run: RunConfig) -> TrainConfig:
    t = run.section("train")
    return TrainConfig(
        batch_size=t["batch"],
        lr=t["lr"],
        warmup=t["warmup"],
        weight_decay=t["weight_decay"],
        ema_decay=t["ema"],
        class_drop=t["class_drop"],
    )


def dataset_spec(run: RunConfig, resolutions: str | None = None) -> DatasetSpec:
    try:
        res = _parse_resolutions(resolutions or run["data.resolutions"])
    except ValueError:
        raise ConfigError(f"cannot parse resolutions {resolutions or run['data.resolutions']!r}") from None
    try:
        return DatasetSpec(
            num_samples=run["data.num_samples"],
            num_classes=run["model.num_classes"],
            channels=run["model.channels"],
            seed=run["data.seed"],
            resolutions=res,
        )
    except ValueError as e:
        raise ConfigError(f"data: {e}") from None


def load_samples(run: RunConfig, resolutions: str | None = None) -> list[ImageSample]:
    path = run["data.path"]
    if path:
        if not Path(path).exists():
            raise DataError(f"dataset directory not found: {path}")
        return read_dataset(path)
    return synth_dataset(dataset_spec(run, resolutions))


def token_dataset(run: RunConfig, samples, max_tokens: int) -> TokenDataset:
    try:
        return TokenDataset.from_samples(
            samples,
            max_tokens,
            run["model.patch"],
            run["data.preprocess"],
            rng=np.random.default_rng(run["data.seed"]),
        )
    except BatchError as e:
        raise DataError(str(e)) from None


def write_loss_csv(path: Path, losses, lrs) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss", "lr"])
        for i, (loss, lr) in enumerate(zip(losses, lrs)):
            w.writerow([i, repr(float(loss)), repr(float(lr))])


def _prepare_out(out: Path, run: RunConfig) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(run.to_text())
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(run: RunConfig, out: Path, resume: str | None = None, deterministic: bool = False):
    out = _prepare_out(out, run)
    seed = run["seed"]
    if resume:
        ck = load_checkpoint(resume)
        if ck.state is None:
            raise ConfigError(f"checkpoint {resume} holds no training state to resume")
        saved = RunConfig.parse(ck.run_config, f"{resume}/manifest")
        diff = saved.diff(run, ignore=RESUMABLE_KEYS)
        if diff:
            lines = "\n".join(f"  {k}: checkpoint={a!r} run={b!r}" for k, a, b in diff)
            raise ConfigError(f"run config does not match checkpoint {resume}:\n{lines}")
        model, state = ck.model, ck.state
    else:
        model = FiTv2(model_config(run), seed=seed)
        state = init_state(model, seed)
    samples = load_samples(run)
    ds = token_dataset(run, samples, model.config.max_tokens)
    tcfg = train_config(run)
    sampler = flow_config(run, deterministic).sampler
    total = run["train.steps"]
    every = run["train.checkpoint_every"] or total
    log.info("training %d parameters on %d samples", model.num_parameters(), len(ds))
    while state.step < total:
        chunk = min(every - state.step % every, total - state.step)
        train_loop(model, ds, tcfg, sampler, chunk, state=state)
        log.info("step %d loss %.5f", state.step, float(np.mean(state.losses[-chunk:])))
        save_checkpoint(out / "checkpoints" / f"step_{state.step:06d}", model, state, run.to_text())
        write_loss_csv(out / "loss.csv", state.losses, state.lrs)
    save_checkpoint(out / "checkpoint", model, state, run.to_text())
    write_loss_csv(out / "loss.csv", state.losses, state.lrs)
    return model, state


def _labels(n: int, labels: str | None, num_classes: int) -> np.ndarray:
    if labels:
        out = np.array([int(x) for x in labels.split(",")], dtype=np.int64)
        if len(out) != n:
            out = np.resize(out, n)
    else:
        out = np.arange(n) % num_classes
    if out.min() < 0 or out.max() >= num_classes:
        raise ConfigError(f"labels must lie in [0, {num_classes})")
    return out


def write_ppm(path: Path, img: np.ndarray) -> None:
    """First three channels mapped from [-1, 1] to 8-bit RGB."""
    rgb = np.clip((img[:3].transpose(1, 2, 0) + 1) * 127.5, 0, 255).astype(np.uint8)
    H, W, _ = rgb.shape
    path.write_bytes(f"P6\n{W} {H}\n255\n".encode() + rgb.tobytes())


def cmd_sample(
    run: RunConfig,
    out: Path,
    checkpoint: str,
    height: int,
    width: int,
    n: int = 4,
    labels: str | None = None,
    use_ema: bool = True,
    ppm: bool = False,
    deterministic: bool = False,
):
    out = _prepare_out(out, run)
    ck = load_checkpoint(checkpoint)
    model = ema_model(ck.model, ck.state) if use_ema and ck.state is not None else ck.model
    cfg = model.config
    if height % cfg.patch or width % cfg.patch:
        raise ConfigError(f"{height}x{width} is not divisible by the patch size {cfg.patch}")
    flow = flow_config(run, deterministic)
    method = run["rope.method"]
    attn = run["extrapolation.attn_scale"]
    grid = (height // cfg.patch, width // cfg.patch)
    lab = _labels(n, labels, cfg.num_classes)
    rng = np.random.default_rng(run["seed"])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        images, info = ode_sample(model, grid, lab, flow, rng, method, attn, rope_kw=rope_options(run))
    for w in caught:
        log.warning("%s", w.message)
    sdir = out / "samples"
    write_dataset(sdir, [ImageSample(im, int(c)) for im, c in zip(images, lab)])
    ph, pw = grid_positions(*grid)
    meta = dict(
        checkpoint=checkpoint,
        height=height,
        width=width,
        grid=f"{grid[0]}x{grid[1]}",
        tokens=grid[0] * grid[1],
        budget=cfg.max_tokens,
        method=info.method,
        s=repr(info.s),
        s_h=repr(info.s_h),
        s_w=repr(info.s_w),
        s_attn=repr(info.s_attn),
        ode=flow.ode,
        steps=flow.steps,
        cfg=flow.cfg_scale,
        nfe=info.nfe,
        seed=run["seed"],
        ema=use_ema and ck.state is not None,
        positions=";".join(f"{h},{w}" for h, w in zip(ph, pw)),
    )
    (sdir / "meta.txt").write_text("".join(f"{k} = {v}\n" for k, v in meta.items()))
    if ppm:
        for i, im in enumerate(images):
            write_ppm(sdir / f"{i:06d}.ppm", im)
    return images, info


def cmd_adapt(run: RunConfig, out: Path, source: str, lmax: int | None = None, steps: int | None = None):
    out = _prepare_out(out, run)
    ck = load_checkpoint(source)
    model = ema_model(ck.model, ck.state) if ck.state is not None else ck.model
    lmax = run["adapt.max_tokens"] if lmax is None else lmax
    steps = run["adapt.steps"] if steps is None else steps
    if lmax <= model.config.max_tokens:
        raise ConfigError(f"--lmax {lmax} must exceed the checkpoint budget {model.config.max_tokens}")
    plan = build_freeze_plan(model)
    samples = load_samples(run, run["adapt.resolutions"])
    ds = token_dataset(run, samples, lmax)
    hi, state = posttrain(
        model, plan, ds, lmax, steps, train_config(run), flow_config(run).sampler, seed=run["seed"]
    )
    report = plan.report()
    (out / "freeze_plan.txt").write_text(report)
    save_checkpoint(out / "checkpoint", hi, state, run.to_text(), meta=dict(adapted_from=str(source)))
    write_loss_csv(out / "loss.csv", state.losses, state.lrs)
    print(f"trainable {plan.trainable} / {plan.total} = {plan.fraction:.4%}")
    return hi, plan, state


def cmd_eval(run: RunConfig, out: Path, checkpoint: str, resolutions: str | None = None, deterministic: bool = False):
    out = _prepare_out(out, run)
    ck = load_checkpoint(checkpoint)
    model = ema_model(ck.model, ck.state) if ck.state is not None else ck.model
    res = [parse_resolution(r) for r in (resolutions or run["eval.resolutions"]).split(",") if r.strip()]
    rows = evaluate_model(
        model,
        dataset_spec(run),
        res,
        flow_config(run, deterministic),
        run["eval.per_class"],
        run["rope.method"],
        run["extrapolation.attn_scale"],
        seed=run["seed"],
        rope_kw=rope_options(run),
    )
    text = metrics_csv(rows)
    (out / "metrics.csv").write_text(text)
    print(text, end="")
    return rows


def report_table(custom: ModelConfig | None = None, tokens: int = 256) -> str:
    lines = [f"{'model':<8}{'layers':>7}{'hidden':>8}{'heads':>6}{'params':>16}{'GFLOPs':>10}"]
    rows = accounting.report_rows(tokens=tokens)
    if custom is not None:
        rows.append(
            dict(
                model="custom",
                layers=custom.layers,
                hidden=custom.hidden,
                heads=custom.heads,
                params=accounting.count_parameters(custom)["total"],
                gflops=accounting.estimate_flops(custom, custom.max_tokens)["total"] / 1e9,
            )
        )
    for r in rows:
        lines.append(
            f"{r['model']:<8}{r['layers']:>7}{r['hidden']:>8}{r['heads']:>6}{r['params']:>16,}{r['gflops']:>10.2f}"
        )
    return "\n".join(lines) + "\n"


def cmd_report(run: RunConfig | None, out: Path | None = None) -> str:
    text = report_table(model_config(run) if run is not None else None)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text)
    print(text, end="")
    return text


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", default="runs/out", help="output directory")
    common.add_argument("--deterministic", action="store_true", help="reproducibility mode")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fitv2", description="flexible-resolution diffusion transformer")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train on the (synthetic) dataset")
    t.add_argument("--resume", help="checkpoint directory to continue from")

    s = sub.add_parser("sample", parents=[common], help="draw samples from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--height", type=int, required=True, help="latent height in pixels")
    s.add_argument("--width", type=int, required=True, help="latent width in pixels")
    s.add_argument("--n", type=int, default=4)
    s.add_argument("--labels", help="comma-separated class ids")
    s.add_argument("--method", help="extrapolation method (overrides rope.method)")
    s.add_argument("--attn-scale", action="store_true", help="enable the attention-logit scale")
    s.add_argument("--cfg", type=float, help="guidance scale (overrides flow.cfg)")
    s.add_argument("--no-ema", action="store_true")
    s.add_argument("--ppm", action="store_true", help="also export portable pixmaps")

    a = sub.add_parser("adapt", parents=[common], help="high-resolution post-training")
    a.add_argument("--from", dest="source", required=True)
    a.add_argument("--lmax", type=int)
    a.add_argument("--steps", type=int)

    e = sub.add_parser("eval", parents=[common], help="sample-quality metrics")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--resolutions", help="comma-separated HxW list")

    sub.add_parser("report", parents=[common], help="parameter / FLOP table")
    return p


def resolve_config(args) -> RunConfig:
    run = RunConfig.load(args.config) if args.config else RunConfig()
    run.apply_overrides(args.set)
    if args.seed is not None:
        run.set("seed", args.seed)
    if args.command == "sample":
        if args.method:
            run.set("rope.method", args.method)
        if args.attn_scale:
            run.set("extrapolation.attn_scale", True)
        if args.cfg is not None:
            run.set("flow.cfg", args.cfg)
    return run


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s", force=True
    )
    out = Path(args.out)
    try:
        run = resolve_config(args)
        if args.command == "train":
            cmd_train(run, out, args.resume, args.deterministic)
        elif args.command == "sample":
            cmd_sample(
                run,
                out,
                args.checkpoint,
                args.height,
                args.width,
                args.n,
                args.labels,
                not args.no_ema,
                args.ppm,
                args.deterministic,
            )
        elif args.command == "adapt":
            cmd_adapt(run, out, args.source, args.lmax, args.steps)
        elif args.command == "eval":
            cmd_eval(run, out, args.checkpoint, args.resolutions, args.deterministic)
        elif args.command == "report":
            cmd_report(run if args.config or args.set else None, out if args.config else None)
    except (ConfigError, RopeConfigError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError, BatchError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, IntegrationError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
