"""Command line front end: train, eval, inspect, gradcheck.

Configuration is a flat key=value file mirroring the model, schedule, and
corpus knobs; flags override file keys.  Every run writes its artifacts
under a fresh directory named by config hash and timestamp.  Exit codes
are stable: 0 success, 1 usage or config problems, 2 numeric failure,
3 verification failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .tensor import Tensor
from .network import (ModelConfig, SaipNet, ScheduleConfig, TrainState,
                      lr_schedule, train_step, save_checkpoint, load_checkpoint,
                      CheckpointError)
from . import datalab as dl
from .saff import predict_lowpass_kernels, predict_highpass_kernels
from .gradaudit import MODULES as AUDIT_MODULES, TOLERANCES, audit_module

TRAIN_SEED_BASE = 100_000
EVAL_SEED_BASE = 900_000
_NOISE_SEED_SALT = 37


@dataclass(frozen=True)
class RunConfig:
    image_size: int = 64
    num_classes: int = 4
    base_channels: int = 24
    patch_size: int = 4
    blocks_per_stage: tuple = (1, 1, 2, 1)
    heads_per_stage: tuple = (1, 2, 4, 8)
    kv_strides: tuple = (2, 2, 1, 1)
    stem_channels: int = 0
    cdc_dilations: tuple = (1, 2, 3)
    lam: float = 0.5
    use_saff: bool = True
    use_cdc: bool = True
    use_stem: bool = True
    use_attention_encoder: bool = True
    base_lr: float = 2e-3
    warmup_steps: int = 50
    total_steps: int = 600
    power: float = 1.0
    batch_size: int = 4
    seed: int = 0
    train_scenes: int = 256
    eval_scenes: int = 64
    checkpoint_every: int = 200
    tile_size: int = 0
    tile_overlap: int = 0

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                s = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                s = "true" if v else "false"
            else:
                s = repr(v) if isinstance(v, float) else str(v)
            lines.append(f"{f.name}={s}")
        return "\n".join(lines) + "\n"


def parse_config(text: str, base: RunConfig = None) -> RunConfig:
    """Parse flat key=value lines; unknown keys are rejected."""
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, _, sval = line.partition("=")
        key, sval = key.strip(), sval.strip()
        if key not in fields:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        default = getattr(RunConfig(), key)
        if isinstance(default, bool):
            if sval not in ("true", "false"):
                raise ValueError(f"config line {lineno}: {key} must be true or false")
            values[key] = sval == "true"
        elif isinstance(default, tuple):
            values[key] = tuple(int(x) for x in sval.split(","))
        elif isinstance(default, float):
            values[key] = float(sval)
        elif isinstance(default, int):
            values[key] = int(sval)
        else:
            values[key] = sval
    return replace(base or RunConfig(), **values)


def model_config(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(
        image_size=cfg.image_size, num_classes=cfg.num_classes,
        base_channels=cfg.base_channels, patch_size=cfg.patch_size,
        blocks_per_stage=cfg.blocks_per_stage, heads_per_stage=cfg.heads_per_stage,
        kv_strides=cfg.kv_strides, stem_channels=cfg.stem_channels,
        cdc_dilations=cfg.cdc_dilations, lam=cfg.lam,
        use_saff=cfg.use_saff, use_cdc=cfg.use_cdc, use_stem=cfg.use_stem,
        use_attention_encoder=cfg.use_attention_encoder,
    )


def corpus_config(cfg: RunConfig) -> dl.CorpusConfig:
    return dl.CorpusConfig(num_classes=cfg.num_classes,
                           height=cfg.image_size, width=cfg.image_size)


def run_dir_for(cfg: RunConfig, out_root: str) -> Path:
    digest = hashlib.sha256(cfg.to_text().encode()).hexdigest()[:8]
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = Path(out_root) / f"{digest}-{stamp}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def train_seeds(cfg: RunConfig) -> np.ndarray:
    return TRAIN_SEED_BASE + np.arange(cfg.train_scenes)


def eval_seeds(cfg: RunConfig) -> np.ndarray:
    return EVAL_SEED_BASE + np.arange(cfg.eval_scenes)


def _predict_scene(net: SaipNet, image: np.ndarray, cfg: RunConfig) -> np.ndarray:
    """Class logits for one (3, H, W) image, tiled if configured."""
    if cfg.tile_size and cfg.tile_size < max(image.shape[1:]):
        tiling = dl.tile_image(image, cfg.tile_size, cfg.tile_overlap)
        maps = [net(t[None]).data[0] for t in tiling.tiles]
        return dl.stitch(maps, tiling)
    return net(image[None]).data[0]


def evaluate_model(net: SaipNet, cfg: RunConfig, seeds, noise: dl.NoiseSpec = None) -> dl.MetricsReport:
    """Confusion-matrix metrics over the scenes for `seeds`."""
    corpus = corpus_config(cfg)
    conf = np.zeros((cfg.num_classes, cfg.num_classes), dtype=np.int64)
    for s in seeds:
        sample = dl.generate_scene(int(s), corpus)
        image = sample.image
        if noise is not None:
            image = dl.add_noise(image, replace(noise, seed=int(s) + _NOISE_SEED_SALT))
        pred = _predict_scene(net, image, cfg).argmax(axis=0)
        conf += dl.confusion_matrix(pred, sample.mask, cfg.num_classes)
    return dl.metrics(conf)


def run_training(cfg: RunConfig, run_dir: Path, log=None) -> dict:
    """Train per config; writes loss.csv, checkpoints, metrics.csv."""
    corpus = corpus_config(cfg)
    net = SaipNet(model_config(cfg), np.random.default_rng(cfg.seed))
    sched = ScheduleConfig(base_lr=cfg.base_lr, warmup_steps=cfg.warmup_steps,
                           total_steps=cfg.total_steps, power=cfg.power)
    state = TrainState(net, sched, lam=cfg.lam)
    pool = train_seeds(cfg)
    brng = np.random.default_rng(cfg.seed + 1)
    rows = ["step,loss,lr"]
    for step in range(cfg.total_steps):
        batch = brng.choice(pool, size=cfg.batch_size, replace=False)
        images, masks = dl.corpus_batch(corpus, batch)
        loss = train_step(state, images, masks)
        rows.append(f"{step},{loss:.8f},{lr_schedule(state.step, sched):.8e}")
        if log and (step % 100 == 0 or step == cfg.total_steps - 1):
            log(f"step {step} loss {loss:.4f}")
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(net, str(run_dir / f"step{step + 1:06d}.ckpt"))
    (run_dir / "loss.csv").write_bytes(("\n".join(rows) + "\n").encode())
    save_checkpoint(net, str(run_dir / "final.ckpt"))
    report = evaluate_model(net, cfg, eval_seeds(cfg))
    (run_dir / "metrics.csv").write_bytes(dl.metrics_csv(report).encode())
    return {"net": net, "report": report, "run_dir": run_dir}


def _apply_ablations(cfg: RunConfig, ablate) -> RunConfig:
    for name in ablate or []:
        flag = {"saff": "use_saff", "cdc": "use_cdc", "stem": "use_stem",
                "encoder": "use_attention_encoder"}.get(name)
        if flag is None:
            raise ValueError(f"unknown ablation {name!r}, expected saff|cdc|stem|encoder")
        cfg = replace(cfg, **{flag: False})
    return cfg


def _load_run_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = parse_config(Path(args.config).read_text(), cfg)
    for key in ("seed", "total_steps"):
        v = getattr(args, key, None)
        if v is not None:
            cfg = replace(cfg, **{key: v})
    return _apply_ablations(cfg, getattr(args, "ablate", None))


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    run_dir = run_dir_for(cfg, args.out)
    (run_dir / "config.txt").write_text(cfg.to_text())
    result = run_training(cfg, run_dir, log=lambda m: print(m, flush=True))
    print(f"run_dir {run_dir}")
    print(f"held-out mIoU {result['report'].miou:.6f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    noise = None
    if args.noise is not None:
        if args.noise not in dl.NOISE_PRESETS:
            names = ", ".join(sorted(dl.NOISE_PRESETS))
            print(f"error: unknown noise preset {args.noise!r}; presets: {names}",
                  file=sys.stderr)
            return 1
        noise = dl.NOISE_PRESETS[args.noise]
    net = SaipNet(model_config(cfg), np.random.default_rng(cfg.seed))
    load_checkpoint(net, args.checkpoint)
    report = evaluate_model(net, cfg, eval_seeds(cfg))
    print(dl.metrics_csv(report), end="")
    if noise is not None:
        noisy = evaluate_model(net, cfg, eval_seeds(cfg), noise=noise)
        print(f"noisy_mIoU,{noisy.miou:.6f},")
        print(f"drop_mIoU,{report.miou - noisy.miou:.6f},")
    return 0


def _to_gray(arr: np.ndarray) -> np.ndarray:
    lo, hi = float(arr.min()), float(arr.max())
    if hi - lo < 1e-12:
        return np.zeros(arr.shape)
    return (arr - lo) * (255.0 / (hi - lo))


def _field_entropy(weights: Tensor) -> np.ndarray:
    """Mean per-location entropy of |tap| distributions: (N,G,K²,H,W) -> (H,W)."""
    w = np.abs(weights.data[0]) + 1e-12
    p = w / w.sum(axis=1, keepdims=True)
    return -(p * np.log(p)).sum(axis=1).mean(axis=0)


def cmd_inspect(args) -> int:
    cfg = _load_run_config(args)
    net = SaipNet(model_config(cfg), np.random.default_rng(cfg.seed))
    load_checkpoint(net, args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sample = dl.generate_scene(args.scene_seed, corpus_config(cfg))
    what = args.what
    if what == "stem-kernels":
        if net.stem is None:
            print("error: model was trained without the stem", file=sys.stderr)
            return 1
        kernels = net.stem.lhpf2.kernels().data  # (C_stem, 1, K*K)
        c, _, kk = kernels.shape
        k = int(round(kk ** 0.5))
        for ch in range(c):
            dl.write_image(str(out / f"stem-kernel-{ch:02d}.pgm"),
                           _to_gray(kernels[ch, 0].reshape(k, k)))
        print(f"wrote {c} kernel maps ({k}x{k}) to {out}")
        return 0
    x = Tensor(sample.image[None]) * (1.0 / 127.5) - 1.0
    if what == "saff-kernels":
        if not cfg.use_saff or net.stem is None:
            print("error: saff kernel maps need the stem fusion head", file=sys.stderr)
            return 1
        head = net.head_fuse
        guide = net.stem(x)
        lp = predict_lowpass_kernels(guide, head.lp1.weight, head.lp1.bias,
                                     head.groups, stride=head.ratio)
        hp = predict_highpass_kernels(guide, head.hp1.weight, head.hp1.bias, head.k)
        dl.write_image(str(out / "lp-entropy.pgm"), _to_gray(_field_entropy(lp.weights)))
        dl.write_image(str(out / "hp-entropy.pgm"), _to_gray(_field_entropy(hp.weights)))
        print(f"wrote lp/hp entropy maps to {out}")
        return 0
    if what == "offsets":
        if not cfg.use_saff:
            print("error: offset maps need the fusion blocks", file=sys.stderr)
            return 1
        from .saff import offset_generator, highpass_filter
        pyramid = net.encoder(x)
        y = pyramid[3]
        mags = []
        for i, l in enumerate((2, 1, 0)):
            blk = net.fusions[i]
            y = blk(pyramid[l], y)
            if net.cdcs:
                y = net.cdcs[i](y)
        if net.stem is not None:
            guide = net.stem(x)
            blk = net.head_fuse
            hp = predict_highpass_kernels(guide, blk.hp1.weight, blk.hp1.bias, blk.k)
            z = blk._lp_path(guide, y, blk.lp1) + highpass_filter(guide, hp) + guide
            off = offset_generator(z, blk.off_d, blk.off_a).offsets.data[0]
        else:
            print("error: offset dump uses the stem head fusion", file=sys.stderr)
            return 1
        mag = np.sqrt((off ** 2).sum(axis=0))
        dl.write_image(str(out / "offset-magnitude.pgm"), _to_gray(mag))
        print(f"offsets min {off.min():.4f} max {off.max():.4f}")
        return 0
    if what == "features":
        logits = net(sample.image[None]).data[0]
        n = min(args.channels, logits.shape[0])
        for ch in range(n):
            dl.write_image(str(out / f"feature-{ch:02d}.pgm"), _to_gray(logits[ch]))
        print(f"wrote {n} feature maps to {out}")
        return 0
    print(f"error: unknown selector {what!r}", file=sys.stderr)
    return 1


def cmd_gradcheck(args) -> int:
    if args.module not in AUDIT_MODULES:
        print(f"error: unknown module {args.module!r}, expected one of "
              f"{', '.join(AUDIT_MODULES)}", file=sys.stderr)
        return 1
    worst, tensor = audit_module(args.module, seeds=args.seeds, bits=args.bits,
                                 seed_base=args.seed)
    tol = TOLERANCES[args.bits]
    print(f"module {args.module} bits {args.bits} max_rel_error {worst:.6e} "
          f"tolerance {tol:.0e} worst_tensor {tensor}")
    if worst > tol:
        print(f"error: gradient tolerance breached by {tensor!r}", file=sys.stderr)
        return 3
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="saipnet",
                                description="frequency-aware segmentation workbench")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model on the synthetic corpus")
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--out", default="runs", help="parent directory for run artifacts")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--total-steps", dest="total_steps", type=int, default=None)
    t.add_argument("--ablate", action="append", choices=["saff", "cdc", "stem", "encoder"])
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on held-out scenes")
    e.add_argument("checkpoint")
    e.add_argument("--config", help="key=value config file")
    e.add_argument("--noise", help="noise preset name")
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--ablate", action="append", choices=["saff", "cdc", "stem", "encoder"])
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="dump learned filters and features as PGM")
    i.add_argument("checkpoint")
    i.add_argument("what", choices=["stem-kernels", "saff-kernels", "offsets", "features"])
    i.add_argument("--config", help="key=value config file")
    i.add_argument("--out", default="inspect")
    i.add_argument("--scene-seed", dest="scene_seed", type=int, default=EVAL_SEED_BASE)
    i.add_argument("--channels", type=int, default=4)
    i.add_argument("--seed", type=int, default=None)
    i.add_argument("--ablate", action="append", choices=["saff", "cdc", "stem", "encoder"])
    i.set_defaults(func=cmd_inspect)

    g = sub.add_parser("gradcheck", help="finite-difference audit of one module")
    g.add_argument("--module", required=True)
    g.add_argument("--bits", type=int, choices=[32, 64], default=32)
    g.add_argument("--seeds", type=int, default=20)
    g.add_argument("--seed", type=int, default=1000)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        return args.func(args)
    except FloatingPointError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
