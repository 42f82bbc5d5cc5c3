"""Command-line pipeline: pretrain -> teq -> quantize -> eval / inspect.

Every command reads an optional JSON config file whose keys mirror the
command's flags (unknown keys are rejected); explicit flags win over the
config file. Outputs are deterministic for a fixed seed, so rerunning a
command overwrites its files byte-identically.

Exit codes: 0 success, 2 usage/validation, 3 data/format, 4 training
divergence.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import checkpoint as ckpt
from . import metrics, plots, trainer
from .errors import (
    ContractError,
    DataError,
    DivergenceError,
    FormatError,
    NumericError,
    ShapeError,
)
from .model import ModelConfig, build_model, find_fusion_sites, quantize_model
from .quant import QuantSpec

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4


def load_corpus(path) -> np.ndarray:
    """Byte-level tokenization: the file's bytes are the token stream."""
    data = Path(path).read_bytes()
    if not data:
        raise DataError(f"{path}: empty corpus")
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (FormatError, DataError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_DATA)
        except DivergenceError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_DIVERGENCE)
        except (ContractError, ShapeError, NumericError, ValueError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_USAGE)

    return wrapper


def apply_config(ctx: click.Context, config_path) -> None:
    """Fill non-explicit options from a JSON config file; reject unknown keys."""
    if config_path is None:
        return
    try:
        cfg = json.loads(Path(config_path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{config_path}: invalid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise FormatError(f"{config_path}: config must be a JSON object")
    known = {p.name for p in ctx.command.params}
    unknown = set(cfg) - known
    if unknown:
        raise click.UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for key, value in cfg.items():
        src = ctx.get_parameter_source(key)
        if src is not None and src.name == "COMMANDLINE":
            continue  # explicit flags win
        ctx.params[key] = value


def validate_group_size(ctx, param, value):
    if value != -1 and value < 1:
        raise click.BadParameter("must be -1 (whole row) or a positive divisor")
    return value


_config_option = click.option(
    "--config", "config_path", type=click.Path(exists=True, dir_okay=False),
    default=None, help="JSON file with defaults for this command's flags.",
)
_seed_option = click.option(
    "--seed", type=int, default=0, envvar="TEQ_SEED", show_default=True,
    help="Global RNG seed (TEQ_SEED env var as fallback).",
)


@click.group()
def main():
    """Weight-only low-bit quantization with trainable equivalent transformations."""


@main.command("pretrain")
@_config_option
@click.option("--corpus", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.option("--d-model", type=click.IntRange(min=1), default=64, show_default=True)
@click.option("--n-heads", type=click.IntRange(min=1), default=4, show_default=True)
@click.option("--n-layers", type=click.IntRange(min=1), default=2, show_default=True)
@click.option("--max-seq-len", type=click.IntRange(min=1), default=128, show_default=True)
@click.option("--steps", type=click.IntRange(min=1), default=1500, show_default=True)
@click.option("--batch-size", type=click.IntRange(min=1), default=8, show_default=True)
@click.option("--seq-len", type=click.IntRange(min=2), default=64, show_default=True)
@click.option("--lr", type=float, default=3e-3, show_default=True)
@_seed_option
@click.pass_context
@handle_errors
def cmd_pretrain(ctx, config_path, **_):
    """Train the desk-scale byte-level transformer and write a checkpoint."""
    apply_config(ctx, config_path)
    p = ctx.params
    tokens = load_corpus(p["corpus"])
    config = ModelConfig(
        d_model=p["d_model"], n_heads=p["n_heads"], n_layers=p["n_layers"],
        vocab_size=256, max_seq_len=p["max_seq_len"],
    )
    model = build_model(config, seed=p["seed"])
    cfg = trainer.PretrainConfig(
        lr=p["lr"], steps=p["steps"], batch_size=p["batch_size"],
        seq_len=p["seq_len"], seed=p["seed"],
    )
    losses = trainer.pretrain(model, tokens, cfg)
    ckpt.save_checkpoint(model, p["out_path"])
    click.echo(f"final loss: {losses[-1]:.4f} (uniform baseline {np.log(config.vocab_size):.4f})")
    click.echo(f"checkpoint: {p['out_path']}")


@main.command("teq")
@_config_option
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--corpus", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--bits", type=click.IntRange(min=2), default=4, show_default=True)
@click.option("--group-size", type=int, default=-1, callback=validate_group_size,
              show_default=True)
@click.option("--steps", type=click.IntRange(min=1), default=1000, show_default=True)
@click.option("--lr", type=float, default=1e-3, show_default=True)
@click.option("--seq-len", type=click.IntRange(min=2), default=64, show_default=True)
@click.option("--init", type=click.Choice(["ones", "inv-sqrt", "auto"]), default="auto",
              show_default=True)
@click.option("--out-scales", type=click.Path(dir_okay=False), required=True)
@click.option("--out-trace", type=click.Path(dir_okay=False), required=True)
@_seed_option
@click.pass_context
@handle_errors
def cmd_teq(ctx, config_path, **_):
    """Train per-site scale vectors through simulated quantization."""
    apply_config(ctx, config_path)
    p = ctx.params
    model = ckpt.load_checkpoint(p["model_path"])
    tokens = load_corpus(p["corpus"])
    strategy = {"ones": "ones", "inv-sqrt": "inv_sqrt_cin", "auto": "auto"}[p["init"]]
    cfg = trainer.TrainConfig(
        lr=p["lr"], steps=p["steps"], seq_len=p["seq_len"], seed=p["seed"],
        init_strategy=strategy,
        quant=QuantSpec(n_bits=p["bits"], group_size=p["group_size"]),
    )
    if strategy == "auto":
        winner, scales, trace = trainer.select_init(model, tokens, cfg)
        click.echo(f"selected init: {winner}")
    else:
        scales, trace = trainer.train(model, tokens, cfg)
    ckpt.save_scales(scales, p["out_scales"])
    trainer.write_trace(trace, p["out_trace"])
    plots.plot_trace(trace, str(Path(p["out_trace"]).with_suffix(".png")))
    click.echo(f"final calibration loss: {trainer.final_loss(trace):.4f}")
    click.echo(f"scales: {p['out_scales']}  trace: {p['out_trace']}")


@main.command("quantize")
@_config_option
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--method", type=click.Choice(["rtn", "teq"]), default="rtn", show_default=True)
@click.option("--scales", "scales_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Scale file; required for --method teq.")
@click.option("--bits", type=click.IntRange(min=2), default=4, show_default=True)
@click.option("--group-size", type=int, default=-1, callback=validate_group_size,
              show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@_seed_option
@click.pass_context
@handle_errors
def cmd_quantize(ctx, config_path, **_):
    """Quantize a checkpoint with plain RTN or fuse-then-RTN."""
    apply_config(ctx, config_path)
    p = ctx.params
    if p["method"] == "teq" and p["scales_path"] is None:
        raise click.UsageError("--method teq requires --scales")
    model = ckpt.load_checkpoint(p["model_path"])
    scales = ckpt.load_scales(p["scales_path"]) if p["method"] == "teq" else None
    spec = QuantSpec(n_bits=p["bits"], group_size=p["group_size"])
    qmodel = quantize_model(model, spec, scales)
    ckpt.save_checkpoint(qmodel, p["out_path"])

    probe = np.random.default_rng(p["seed"]).integers(
        0, model.config.vocab_size, size=(2, min(64, model.config.max_seq_len))
    )
    mses = metrics.layer_quant_loss(model, qmodel, probe)
    for name in sorted(mses):
        click.echo(f"layer_mse {name}: {mses[name]:.3e}")
    click.echo(f"total layer mse: {sum(mses.values()):.3e}")
    click.echo(f"quantized checkpoint: {p['out_path']}")


@main.command("eval")
@_config_option
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--corpus", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--reference", "reference_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Float checkpoint for per-layer MSE; defaults to the model itself.")
@click.option("--seq-len", type=click.IntRange(min=2), default=64, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@_seed_option
@click.pass_context
@handle_errors
def cmd_eval(ctx, config_path, **_):
    """Compute perplexity and per-layer quantization loss; write a report."""
    apply_config(ctx, config_path)
    p = ctx.params
    model = ckpt.load_checkpoint(p["model_path"])
    reference = (
        ckpt.load_checkpoint(p["reference_path"]) if p["reference_path"] else model
    )
    tokens = load_corpus(p["corpus"])
    ppl = metrics.perplexity(model, tokens, seq_len=p["seq_len"])
    probe = np.random.default_rng(p["seed"]).integers(
        0, model.config.vocab_size, size=(2, min(64, model.config.max_seq_len))
    )
    mses = metrics.layer_quant_loss(reference, model, probe)
    report = metrics.EvalReport(
        perplexity=ppl,
        per_layer_mse=mses,
        model_hash=metrics.model_hash(model),
        config={
            "seq_len": p["seq_len"],
            "seed": p["seed"],
            "model": str(p["model_path"]),
            "corpus": str(p["corpus"]),
        },
    )
    metrics.write_report(report, p["out_path"])
    click.echo(f"perplexity: {ppl:.4f}")
    click.echo(f"report: {p['out_path']}")


@main.command("inspect")
@_config_option
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--scales", "scales_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--bins", type=click.IntRange(min=1), default=50, show_default=True)
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
@_seed_option
@click.pass_context
@handle_errors
def cmd_inspect(ctx, config_path, **_):
    """Export the scale histogram and the trainable-parameter accounting."""
    apply_config(ctx, config_path)
    p = ctx.params
    model = ckpt.load_checkpoint(p["model_path"])
    scales = ckpt.load_scales(p["scales_path"])
    out_dir = Path(p["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    hist = metrics.scale_histogram(scales, bins=p["bins"])
    metrics.write_histogram(hist, out_dir / "histogram.csv")
    plots.plot_histogram(hist, out_dir / "histogram.png")

    sites = find_fusion_sites(model)
    acc = metrics.param_accounting(model, sites)
    metrics.write_accounting(acc, out_dir / "accounting.csv")

    frac = hist.in_range_fraction(0.75, 1.25)
    click.echo(f"scales in [0.75, 1.25]: {frac:.3f}")
    click.echo(
        f"teq params: {acc.teq_params} / {acc.total_params} "
        f"(ratio {acc.ratio:.6f})"
    )
    click.echo(f"outputs: {out_dir}/histogram.csv, histogram.png, accounting.csv")


if __name__ == "__main__":
    main()
