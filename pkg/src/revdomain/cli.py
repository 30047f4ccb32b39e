"""Command-line pipeline: data generation, training, transformation, prediction, evaluation."""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
import zlib
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import nn
from .adaptation import DaConfig, DiscriminatorNet, TransformerNet, heldout_accuracy, train_da, transform, write_log
from .config import ConfigError, RunConfig, config_load
from .depth import CrfDepthEstimator
from .io import ManifestRecord, load_depths, load_images, read_manifest, write_depth, write_manifest, write_pgm
from .metrics import evaluate, improvement_summary, write_summary
from .render import RenderConfig, SceneConfig, TextureConfig, ViewConfig, generate_dataset

logger = logging.getLogger("revdomain")

TRANSFORMER_CKPT = "transformer.ckpt"
DISCRIMINATOR_CKPT = "discriminator.ckpt"
DEPTH_CKPT = "depth.ckpt"


class UsageError(Exception):
    pass


def stage_seed(seed: int, stage: str) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(stage.encode())]).generate_state(1)[0])


def render_config(cfg: RunConfig) -> RenderConfig:
    return RenderConfig(
        scene=SceneConfig(fold_amplitude=cfg["fold_amplitude"]),
        view=ViewConfig(width=cfg["image_width"], height=cfg["image_height"], fov_degrees=cfg["fov_degrees"],
                        light_power=cfg["light_power"]),
        texture=TextureConfig(cfg["texture_noise"], cfg["texture_streak_weight"], cfg["texture_streaks"],
                              cfg["texture_streak_width"]),
        texture_strength=cfg["texture_strength"],
    )


def da_config(cfg: RunConfig) -> DaConfig:
    return DaConfig(
        lam=cfg["lambda"], n_t=cfg["n_t"], n_d=cfg["n_d"], steps=cfg["da_steps"], batch_size=cfg["batch_size"],
        pretrain_t=cfg["pretrain_t"], pretrain_d=cfg["pretrain_d"], lr_t=cfg["lr_t"], lr_d=cfg["lr_d"],
        momentum=cfg["da_momentum"], buffer_capacity=cfg["buffer_capacity"], channels=cfg["da_channels"],
        n_blocks=cfg["da_blocks"], disc_channels=cfg["disc_channels"], crop=cfg["crop"],
        seed=stage_seed(cfg["seed"], "da"),
    )


def depth_estimator(cfg: RunConfig) -> CrfDepthEstimator:
    return CrfDepthEstimator(
        p_target=cfg["p_target"], compactness=cfg["compactness"], histogram_bins=cfg["histogram_bins"],
        gamma_intensity=cfg["gamma_intensity"], gamma_histogram=cfg["gamma_histogram"],
        conv_channels=cfg["depth_conv_channels"], hidden=cfg["depth_hidden"], epochs=cfg["depth_epochs"],
        learning_rate=cfg["depth_lr"], momentum=cfg["momentum"], weight_decay=cfg["weight_decay"],
        lr_decay_factor=cfg["lr_decay_factor"], lr_decay_every=cfg["lr_decay_every"],
        lambda_beta=cfg["lambda_beta"], beta_init=cfg["beta_init"], random_state=stage_seed(cfg["seed"], "depth"),
        verbose=True,
    )


SPLIT_CHOICES = ["train", "val", "test", "heldout"]


def _select(records: List[ManifestRecord], split: Optional[str]) -> List[ManifestRecord]:
    """Records of one split; ``heldout`` means everything outside ``train``."""
    if split is None:
        return list(records)
    if split == "heldout":
        chosen = [r for r in records if r.split != "train"]
    else:
        chosen = [r for r in records if r.split == split]
    if not chosen:
        raise ValueError(f"no records in split {split!r}")
    return chosen


def _rel(path, base: Path) -> str:
    return os.path.relpath(path, base)


# -- stages -----------------------------------------------------------------------

def gen_synth(cfg: RunConfig, out: Path, n: Optional[int] = None) -> Path:
    cfg.echo(out)
    ds = generate_dataset(n or cfg["n_synth"], stage_seed(cfg["seed"], "synth"), out, config=render_config(cfg))
    logger.info("wrote %d synthetic pairs to %s", len(ds.records), ds.path)
    return ds.path


def gen_pseudoreal(cfg: RunConfig, out: Path, n: Optional[int] = None) -> Path:
    cfg.echo(out)
    ds = generate_dataset(n or cfg["n_pseudo"], stage_seed(cfg["seed"], "pseudo"), out, textured=True,
                          config=render_config(cfg))
    logger.info("wrote %d pseudo-real pairs to %s", len(ds.records), ds.path)
    return ds.path


def train_depth(cfg: RunConfig, data: Path, out: Path) -> Path:
    cfg.echo(out)
    records = read_manifest(data)
    train = _select(records, "train")
    val = [r for r in records if r.split == "val"][:cfg["depth_val_max"]]
    est = depth_estimator(cfg)
    kw = {}
    if val:
        kw = {"X_val": load_images(val), "y_val": load_depths(val)}
    t0 = time.time()
    est.fit(load_images(train), load_depths(train), **kw)
    logger.info("depth model trained in %.1fs, best epoch %d", time.time() - t0, est.best_epoch_)
    ckpt = out / DEPTH_CKPT
    est.save(ckpt)
    with open(out / "depth_history.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_nll", "val_log10", "beta"])
        for h in est.history_:
            w.writerow([h["epoch"], repr(h["train_nll"]), repr(h["val_log10"]), " ".join(map(repr, h["beta"]))])
    return ckpt


def train_adapter(cfg: RunConfig, real: Path, synth: Path, out: Path):
    cfg.echo(out)
    x = load_images(_select(read_manifest(real), "train"))
    g = load_images(_select(read_manifest(synth), "train"))
    t0 = time.time()
    result = train_da(x, g, da_config(cfg), log_every=cfg["log_every"])
    logger.info("adaptation trained in %.1fs", time.time() - t0)
    nn.save_params(out / TRANSFORMER_CKPT, {k: p.data for k, p in result.tnet.params.items()})
    nn.save_params(out / DISCRIMINATOR_CKPT, {k: p.data for k, p in result.dnet.params.items()})
    write_log(out / "da_log.csv", result.log)
    return result


def load_transformer(path) -> TransformerNet:
    values = nn.load_params(path)
    channels = values["in.w"].shape[-1]
    n_blocks = sum(1 for k in values if k.endswith(".w1"))
    tnet = TransformerNet(channels, n_blocks)
    nn.assign_params(tnet.params, values)
    return tnet


def load_discriminator(path) -> DiscriminatorNet:
    values = nn.load_params(path)
    dnet = DiscriminatorNet(tuple(values[f"conv{i}.w"].shape[-1] for i in range(5)))
    nn.assign_params(dnet.params, values)
    return dnet


def transform_images(cfg: RunConfig, model: Path, inputs: Path, out: Path, split: Optional[str] = None) -> Path:
    cfg.echo(out)
    tnet = load_transformer(model)
    records = _select(read_manifest(inputs), split)
    (out / "images").mkdir(parents=True, exist_ok=True)
    new = []
    for r in records:
        img = transform(load_images([r])[0], tnet)
        rel = f"images/{r.index:05d}.pgm"
        write_pgm(out / rel, img)
        new.append(ManifestRecord(r.index, rel, _rel(r.depth_path, out), r.seed, r.split))
    manifest = out / "manifest.tsv"
    write_manifest(manifest, new)
    return manifest


def _depth_preview(depth: np.ndarray) -> np.ndarray:
    finite = np.isfinite(depth)
    out = np.ones(depth.shape)
    if finite.any():
        lo, hi = depth[finite].min(), depth[finite].max()
        out[finite] = (depth[finite] - lo) / (hi - lo) if hi > lo else 0.0
    return out


def predict_depths(cfg: RunConfig, model: Path, inputs: Path, out: Path, split: Optional[str] = None,
                   pgm: bool = False) -> Path:
    cfg.echo(out)
    est = CrfDepthEstimator.load(model)
    records = _select(read_manifest(inputs), split)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    if pgm:
        (out / "preview").mkdir(exist_ok=True)
    new = []
    for r in records:
        pred = est.predict_one(load_images([r])[0])
        rel = f"depth/{r.index:05d}.dpth"
        write_depth(out / rel, pred)
        if pgm:
            write_pgm(out / f"preview/{r.index:05d}.pgm", _depth_preview(pred))
        new.append(ManifestRecord(r.index, _rel(r.image_path, out), rel, r.seed, r.split))
    manifest = out / "manifest.tsv"
    write_manifest(manifest, new)
    return manifest


def eval_manifests(pred: Path, truth: Path, tag: str, split: Optional[str] = None, out: Optional[Path] = None):
    report = evaluate(read_manifest(pred), _select(read_manifest(truth), split), tag)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        report.write_csv(out / f"metrics_{tag}.csv")
    return report


def repro(cfg: RunConfig, out: Path) -> str:
    """Both domains, depth on synthetic, adaptation, then raw vs transformed evaluation."""
    cfg.echo(out)
    t0 = time.time()
    synth = gen_synth(cfg, out / "synth")
    pseudo = gen_pseudoreal(cfg, out / "pseudo")
    depth = train_depth(cfg, synth, out / "depth")
    da = train_adapter(cfg, pseudo, synth, out / "da")
    transformed = transform_images(cfg, out / "da" / TRANSFORMER_CKPT, pseudo, out / "transformed", split="heldout")
    pred_raw = predict_depths(cfg, depth, pseudo, out / "pred_raw", split="heldout")
    pred_da = predict_depths(cfg, depth, transformed, out / "pred_transformed", split="heldout")
    raw = eval_manifests(pred_raw, pseudo, "raw", "heldout", out)
    adapted = eval_manifests(pred_da, pseudo, "transformed", "heldout", out)

    # adversarial equilibrium and texture removal on held-out images
    test = _select(read_manifest(pseudo), "heldout")
    clean = {r.index: r for r in read_manifest(pseudo.parent / "clean_manifest.tsv")}
    x_test = load_images(test)
    g_test = load_images(_select(read_manifest(synth), "heldout"))
    acc = heldout_accuracy(x_test, g_test, da.tnet, da.dnet)
    paired = test[:cfg["heldout_paired"]]
    x_pair = load_images(paired)
    c_pair = load_images([clean[r.index] for r in paired])
    t_pair = transform(x_pair, da.tnet)
    l1_t = float(np.mean(np.abs(t_pair - c_pair)))
    l1_x = float(np.mean(np.abs(x_pair - c_pair)))
    text = improvement_summary(raw, adapted)
    text += (f"n_test\t{len(raw.rows)}\nheldout_disc_acc\t{acc:.10g}\n"
             f"texture_l1_transformed\t{l1_t:.10g}\ntexture_l1_raw\t{l1_x:.10g}\n"
             f"n_paired\t{len(paired)}\n")
    write_summary(out / "summary.txt", text)
    logger.info("repro finished in %.1fs", time.time() - t0)
    return text


# -- argument handling ----------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--config", type=Path, help="key=value config file")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-q", "--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="revdomain", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("gen-synth", "gen-pseudoreal"):
        s = sub.add_parser(name, parents=[common])
        s.add_argument("--n", type=int, help="number of pairs (overrides the config)")
    s = sub.add_parser("train-depth", parents=[common])
    s.add_argument("--data", type=Path, required=True, help="synthetic manifest")
    s = sub.add_parser("train-da", parents=[common])
    s.add_argument("--real", type=Path, required=True, help="real/pseudo-real manifest")
    s.add_argument("--synth", type=Path, required=True, help="synthetic manifest")
    s = sub.add_parser("transform", parents=[common])
    s.add_argument("--model", type=Path, required=True, help="transformer checkpoint")
    s.add_argument("--input", type=Path, required=True, help="manifest of images to transform")
    s.add_argument("--split", choices=SPLIT_CHOICES)
    s = sub.add_parser("predict", parents=[common])
    s.add_argument("--model", type=Path, required=True, help="depth checkpoint")
    s.add_argument("--input", type=Path, required=True, help="manifest of images")
    s.add_argument("--split", choices=SPLIT_CHOICES)
    s.add_argument("--pgm", action="store_true", help="also write 8-bit depth previews")
    s = sub.add_parser("eval", parents=[common])
    s.add_argument("--pred", type=Path, required=True, help="manifest of predicted depth maps")
    s.add_argument("--truth", type=Path, required=True, help="manifest of true depth maps")
    s.add_argument("--split", choices=SPLIT_CHOICES, help="restrict the truth manifest")
    s.add_argument("--tag", default="pred")
    sub.add_parser("repro", parents=[common])
    return p


NEEDS_OUT = {"gen-synth", "gen-pseudoreal", "train-depth", "train-da", "transform", "predict", "repro"}


def run(args) -> int:
    cfg = config_load(args.config, args.set)
    if args.seed is not None:
        cfg.set("seed", str(args.seed))
    if args.command in NEEDS_OUT and args.out is None:
        raise UsageError(f"{args.command} needs --out")
    cmd = args.command
    if cmd == "gen-synth":
        print(gen_synth(cfg, args.out, args.n))
    elif cmd == "gen-pseudoreal":
        print(gen_pseudoreal(cfg, args.out, args.n))
    elif cmd == "train-depth":
        print(train_depth(cfg, args.data, args.out))
    elif cmd == "train-da":
        train_adapter(cfg, args.real, args.synth, args.out)
        print(args.out / TRANSFORMER_CKPT)
    elif cmd == "transform":
        print(transform_images(cfg, args.model, args.input, args.out, args.split))
    elif cmd == "predict":
        print(predict_depths(cfg, args.model, args.input, args.out, args.split, args.pgm))
    elif cmd == "eval":
        report = eval_manifests(args.pred, args.truth, args.tag, args.split, args.out)
        if args.out is not None:
            cfg.echo(args.out)
        print("mean," + ",".join(f"{v:.10g}" for v in report.means))
    elif cmd == "repro":
        sys.stdout.write(repro(cfg, args.out))
    return 0


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)  # exits with status 2 on bad flags
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s",
                        stream=sys.stderr)
    try:
        return run(args)
    except (ConfigError, UsageError) as exc:
        parser.print_usage(sys.stderr)
        print(f"revdomain: error: usage: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - one-line report for any runtime failure
        msg = " ".join(str(exc).split())
        print(f"revdomain: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
