"""Command-line pipeline: synth, train, generate, features, classify,
sweep-k, verify.

Every command resolves its configuration before doing any work
(precedence: flag > --config JSON > built-in default), echoes the
resolved values to ``config_echo.json`` in the output directory, and on
completion writes ``files.json`` listing each produced file with its
SHA-256, so a run can be audited and reproduced from the directory
alone. Writes are atomic throughout.

Exit codes: 0 success, 1 verification or validation failure (including
training divergence), 2 I/O or configuration errors.

If the environment variable MARTAGAN_OUTPUT_ROOT is set, relative
output directories are created under it.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import checkpoint, classify, data, verify
from . import train as train_mod
from .ioutil import atomic_open, sha256_file
from .model import ArchConfig, Discriminator, Generator, generate, sample_z
from .train import Adam, TrainConfig, TrainingDiverged

OUTPUT_ROOT_ENV = "MARTAGAN_OUTPUT_ROOT"


class RunDir:
    """Output directory with file registration for the hash manifest."""

    def __init__(self, out, command):
        if out is None:
            raise ValueError(f"{command} requires an output directory (--out or config)")
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not os.path.isabs(out):
            out = os.path.join(root, out)
        self.root = out
        self.command = command
        self._rels = []
        os.makedirs(out, exist_ok=True)

    def path(self, rel):
        """Absolute path for a run-relative file, registered for hashing."""
        p = os.path.join(self.root, rel)
        d = os.path.dirname(p)
        if d:
            os.makedirs(d, exist_ok=True)
        if rel not in self._rels:
            self._rels.append(rel)
        return p

    def write_json(self, rel, obj):
        with atomic_open(self.path(rel), "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def finish(self):
        files = {}
        for rel in self._rels:
            p = os.path.join(self.root, rel)
            files[rel] = {"sha256": sha256_file(p), "bytes": os.path.getsize(p)}
        manifest = {"command": self.command, "files": files}
        with atomic_open(os.path.join(self.root, "files.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _load_config_file(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as e:
        raise ValueError(f"{path}: cannot read config: {e}") from e
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return cfg


def _resolve(args, defaults):
    """Merge flag > config-file > default for every known key."""
    file_cfg = _load_config_file(getattr(args, "config", None))
    unknown = set(file_cfg) - set(defaults)
    if unknown:
        raise ValueError(f"config has unknown keys: {sorted(unknown)}")
    out = {}
    for key, default in defaults.items():
        v = getattr(args, key, None)
        if v is None:
            v = file_cfg.get(key, default)
        out[key] = v
    return out


def _require(cfg, command, *keys):
    for key in keys:
        if cfg[key] is None:
            flag = "--" + key.replace("_", "-")
            raise ValueError(f"{command} requires {flag} (flag or config)")


def _image_grid(images, cols=None):
    """Tile (N,C,H,W) into one (C, rows*H, cols*W) image, padding with -1."""
    images = np.asarray(images)
    n, c, h, w = images.shape
    if cols is None:
        cols = int(np.ceil(np.sqrt(n)))
    rows = (n + cols - 1) // cols
    canvas = np.full((c, rows * h, cols * w), -1.0, dtype=np.float32)
    for i in range(n):
        r, k = divmod(i, cols)
        canvas[:, r * h : (r + 1) * h, k * w : (k + 1) * w] = images[i]
    return canvas


def _save_grid(run, rel_base, images):
    grid = _image_grid(images)
    if grid.shape[0] in (1, 3):
        rel = rel_base + ".png"
        data.save_png(run.path(rel), grid)
    else:
        from .autodiff.tnsr import save_tnsr

        rel = rel_base + ".tnsr"
        save_tnsr(run.path(rel), grid)
    return rel


def _load_dataset(manifest_path):
    manifest = data.load_manifest(manifest_path)
    records = data.load_images(manifest, root=os.path.dirname(os.path.abspath(manifest_path)))
    images, labels = data.records_to_arrays(records)
    return manifest, images, labels


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

SYNTH_DEFAULTS = {
    "out": None,
    "classes": 4,
    "per_class": 50,
    "size": 32,
    "channels": 3,
    "seed": 7,
    "families": None,
}


def cmd_synth(args):
    cfg = _resolve(args, SYNTH_DEFAULTS)
    _require(cfg, "synth", "out")
    families = cfg["families"]
    if isinstance(families, str):
        families = tuple(f.strip() for f in families.split(",") if f.strip())
    spec = data.SyntheticSpec(
        n_classes=cfg["classes"],
        per_class=cfg["per_class"],
        size=cfg["size"],
        channels=cfg["channels"],
        seed=cfg["seed"],
        **({"families": tuple(families)} if families else {}),
    )
    run = RunDir(cfg["out"], "synth")
    echo = dict(cfg, command="synth", out=run.root, families=list(spec.families))
    run.write_json("config_echo.json", echo)

    records, manifest = data.synth_dataset(spec)
    data.write_dataset(run.root, records, manifest)
    written = data.load_manifest(os.path.join(run.root, "manifest.json"))
    run.path("manifest.json")
    n = 0
    for cls in written.classes:
        for rel in cls["items"]:
            run.path(rel)
            n += 1
    run.finish()
    print(f"wrote {n} images across {len(written.classes)} classes to {run.root}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

TRAIN_DEFAULTS = {
    "data": None,
    "out": None,
    "z_dim": 100,
    "base_width": 16,
    "max_width": 512,
    "fusion_depth": 3,
    "init_std": 0.02,
    "lr": 2e-4,
    "beta1": 0.5,
    "beta2": 0.999,
    "eps": 1e-8,
    "batch_size": 64,
    "epochs": 1,
    "max_iterations": None,
    "d_steps": 1,
    "loss_mode": "final",
    "non_saturating": False,
    "seed": 0,
    "save_interval": 100,
    "resume": False,
}


def _merged_csv_prefix(path, start_iteration):
    """Existing loss.csv bytes up to (not including) start_iteration.

    Rows are kept verbatim so a resumed run's file is byte-identical to
    an uninterrupted one.
    """
    with open(path, "rb") as fh:
        lines = fh.read().splitlines(keepends=True)
    if not lines:
        return train_mod.render_loss_rows([], header=True).encode()
    kept = [lines[0]]
    for ln in lines[1:]:
        s = ln.strip()
        if not s:
            continue
        if int(s.split(b",")[0]) < start_iteration:
            kept.append(ln)
    return b"".join(kept)


def cmd_train(args):
    cfg = _resolve(args, TRAIN_DEFAULTS)
    _require(cfg, "train", "data", "out")
    run = RunDir(cfg["out"], "train")
    manifest, images, _labels = _load_dataset(cfg["data"])

    latest = os.path.join(run.root, "checkpoint_latest.mrta")
    resumed = bool(cfg["resume"]) and os.path.exists(latest)
    if resumed:
        gen, disc, opt_g, opt_d, arch, tcfg, start = checkpoint.load_training_checkpoint(latest)
        if arch.image_size != manifest.image_size or arch.channels != manifest.channels:
            raise ValueError(
                f"checkpoint architecture is {arch.image_size}x{arch.image_size}"
                f"x{arch.channels} but dataset is {manifest.image_size}"
                f"x{manifest.image_size}x{manifest.channels}"
            )
    else:
        arch = ArchConfig(
            image_size=manifest.image_size,
            channels=manifest.channels,
            z_dim=cfg["z_dim"],
            base_width=cfg["base_width"],
            max_width=cfg["max_width"],
            fusion_depth=cfg["fusion_depth"],
            init_std=cfg["init_std"],
        )
        tcfg = TrainConfig(
            lr=cfg["lr"],
            beta1=cfg["beta1"],
            beta2=cfg["beta2"],
            eps=cfg["eps"],
            batch_size=cfg["batch_size"],
            epochs=cfg["epochs"],
            d_steps_per_g_step=cfg["d_steps"],
            loss_mode=cfg["loss_mode"],
            non_saturating=bool(cfg["non_saturating"]),
            seed=cfg["seed"],
            max_iterations=cfg["max_iterations"],
        )
        gen = Generator(arch, seed=tcfg.seed)
        disc = Discriminator(arch, seed=tcfg.seed)
        opt_g = Adam(gen.named_params(), tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
        opt_d = Adam(disc.named_params(), tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
        start = 0

    echo = {
        "command": "train",
        "data": os.path.abspath(cfg["data"]),
        "out": run.root,
        "arch": arch.to_dict(),
        "train": tcfg.to_dict(),
        "save_interval": cfg["save_interval"],
        "resume": resumed,
    }
    run.write_json("config_echo.json", echo)

    total = train_mod.total_iterations(tcfg, images.shape[0])
    if start >= total:
        run.path("checkpoint_latest.mrta")
        run.finish()
        print(f"checkpoint is at iteration {start} of {total}; nothing to do")
        return 0

    loss_path = run.path("loss.csv")
    if resumed and os.path.exists(loss_path):
        prefix = _merged_csv_prefix(loss_path, start)
    else:
        prefix = train_mod.render_loss_rows([], header=True).encode()
    new_records = []
    preview_z = sample_z(64, arch.z_dim, np.random.default_rng([tcfg.seed, 30]), arch.np_dtype)

    def flush_csv():
        with atomic_open(loss_path) as fh:
            fh.write(prefix + train_mod.render_loss_rows(new_records).encode())

    def save_state(it_done):
        ckpt = run.path(f"checkpoint_{it_done:06d}.mrta")
        checkpoint.save_training_checkpoint(ckpt, gen, disc, opt_g, opt_d, arch, tcfg, it_done)
        with open(ckpt, "rb") as fh:
            blob = fh.read()
        with atomic_open(run.path("checkpoint_latest.mrta")) as fh:
            fh.write(blob)
        _save_grid(run, f"samples_{it_done:06d}", generate(gen, preview_z))
        flush_csv()

    interval = cfg["save_interval"]

    def on_iteration(it, record):
        new_records.append(record)
        if interval and (it + 1) % interval == 0 and it + 1 < total:
            save_state(it + 1)

    try:
        train_mod.train(
            gen, disc, images, tcfg,
            start_iteration=start, opt_g=opt_g, opt_d=opt_d, on_iteration=on_iteration,
        )
    except TrainingDiverged as e:
        new_records.append(e.record)
        flush_csv()
        run.finish()
        print(f"error: training diverged at iteration {e.record.iteration} (non-finite loss)",
              file=sys.stderr)
        return 1

    save_state(total)
    run.finish()
    last = new_records[-1]
    print(
        f"trained iterations {start}..{total - 1}: "
        f"d_loss={last.d_loss:.4f} g_final={last.g_final:.4f} -> {run.root}"
    )
    return 0


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

GENERATE_DEFAULTS = {"checkpoint": None, "out": None, "count": 64, "seed": 0}


def cmd_generate(args):
    cfg = _resolve(args, GENERATE_DEFAULTS)
    _require(cfg, "generate", "checkpoint", "out")
    if cfg["count"] < 1:
        raise ValueError(f"count must be >= 1, got {cfg['count']}")
    run = RunDir(cfg["out"], "generate")
    gen, _disc, _og, _od, arch, _tcfg, it = checkpoint.load_training_checkpoint(cfg["checkpoint"])
    echo = dict(
        cfg, command="generate", checkpoint=os.path.abspath(cfg["checkpoint"]),
        out=run.root, checkpoint_iteration=it, arch=arch.to_dict(),
    )
    run.write_json("config_echo.json", echo)
    z = sample_z(cfg["count"], arch.z_dim, np.random.default_rng([cfg["seed"], 31]), arch.np_dtype)
    rel = _save_grid(run, "grid", generate(gen, z))
    run.finish()
    print(f"wrote {cfg['count']} samples to {os.path.join(run.root, rel)}")
    return 0


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

FEATURES_DEFAULTS = {
    "checkpoint": None,
    "data": None,
    "out": None,
    "fusion_depth": None,
    "batch_size": 64,
}


def cmd_features(args):
    cfg = _resolve(args, FEATURES_DEFAULTS)
    _require(cfg, "features", "checkpoint", "data", "out")
    run = RunDir(cfg["out"], "features")
    _gen, disc, _og, _od, arch, _tcfg, it = checkpoint.load_training_checkpoint(cfg["checkpoint"])
    _manifest, images, labels = _load_dataset(cfg["data"])
    depth = cfg["fusion_depth"] if cfg["fusion_depth"] is not None else arch.fusion_depth
    feats = classify.extract_features(
        disc, images, batch_size=cfg["batch_size"], fusion_depth=depth
    )
    echo = dict(
        cfg, command="features", checkpoint=os.path.abspath(cfg["checkpoint"]),
        data=os.path.abspath(cfg["data"]), out=run.root, fusion_depth=depth,
        checkpoint_iteration=it, feature_dim=int(feats.shape[1]),
    )
    run.write_json("config_echo.json", echo)
    classify.save_features(run.path("features.feat"), feats, labels)
    run.finish()
    print(f"extracted {feats.shape[0]} feature vectors of dim {feats.shape[1]} (depth {depth})")
    return 0


# ---------------------------------------------------------------------------
# classify
# ---------------------------------------------------------------------------

CLASSIFY_DEFAULTS = {
    "features": None,
    "data": None,
    "out": None,
    "c_reg": 1.0,
    "k": 5,
    "standardize": False,
    "shuffle_labels": False,
    "seed": 0,
}


def cmd_classify(args):
    cfg = _resolve(args, CLASSIFY_DEFAULTS)
    _require(cfg, "classify", "out")
    if (cfg["features"] is None) == (cfg["data"] is None):
        raise ValueError("classify needs exactly one input: --features FILE or --data MANIFEST")
    run = RunDir(cfg["out"], "classify")
    if cfg["features"] is not None:
        feats, labels = classify.load_features(cfg["features"])
        source = {"features": os.path.abspath(cfg["features"])}
    else:
        _manifest, images, labels = _load_dataset(cfg["data"])
        feats = images.reshape(images.shape[0], -1)
        source = {"data": os.path.abspath(cfg["data"]), "raw_pixels": True}
    if cfg["shuffle_labels"]:
        labels = np.random.default_rng([cfg["seed"], 21]).permutation(labels)
    echo = dict(cfg, command="classify", out=run.root, **source)
    run.write_json("config_echo.json", echo)

    report = classify.cross_validate(
        feats, labels, k=cfg["k"], c_reg=cfg["c_reg"], seed=cfg["seed"],
        standardize=bool(cfg["standardize"]),
    )
    run.write_json("metrics.json", report.to_dict())
    run.finish()
    print(f"overall accuracy: {report.overall_mean:.2f} +/- {report.overall_std:.2f} %"
          f"  (pooled {report.overall_accuracy:.2f} %)")
    for c in report.classes:
        pc = report.per_class[int(c)]
        print(f"  class {c}: {pc['mean']:.2f} +/- {pc['std']:.2f} %")
    return 0


# ---------------------------------------------------------------------------
# sweep-k
# ---------------------------------------------------------------------------

SWEEP_DEFAULTS = {
    "checkpoint": None,
    "data": None,
    "out": None,
    "max_depth": None,
    "k": 5,
    "c_reg": 1.0,
    "seed": 0,
    "batch_size": 64,
}


def cmd_sweep_k(args):
    cfg = _resolve(args, SWEEP_DEFAULTS)
    _require(cfg, "sweep-k", "checkpoint", "data", "out")
    run = RunDir(cfg["out"], "sweep-k")
    _gen, disc, _og, _od, arch, _tcfg, it = checkpoint.load_training_checkpoint(cfg["checkpoint"])
    _manifest, images, labels = _load_dataset(cfg["data"])
    max_depth = cfg["max_depth"] if cfg["max_depth"] is not None else arch.n_stages
    if not 1 <= max_depth <= arch.n_stages:
        raise ValueError(f"max_depth {max_depth} out of range for {arch.n_stages} stages")
    echo = dict(
        cfg, command="sweep-k", checkpoint=os.path.abspath(cfg["checkpoint"]),
        data=os.path.abspath(cfg["data"]), out=run.root, max_depth=max_depth,
        checkpoint_iteration=it,
    )
    run.write_json("config_echo.json", echo)

    lines = ["fusion_depth,feature_dim,overall_mean,overall_std"]
    print("depth  feature_dim  accuracy")
    for depth in range(1, max_depth + 1):
        feats = classify.extract_features(
            disc, images, batch_size=cfg["batch_size"], fusion_depth=depth
        )
        report = classify.cross_validate(
            feats, labels, k=cfg["k"], c_reg=cfg["c_reg"], seed=cfg["seed"]
        )
        run.write_json(f"metrics_k{depth}.json", report.to_dict())
        lines.append(
            f"{depth},{feats.shape[1]},{report.overall_mean:.4f},{report.overall_std:.4f}"
        )
        print(f"f{depth:<5d} {feats.shape[1]:>11d}  "
              f"{report.overall_mean:.2f} +/- {report.overall_std:.2f} %")
    with atomic_open(run.path("sweep_k.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    run.finish()
    return 0


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

VERIFY_DEFAULTS = {"seeds": 5, "fault": None, "out": None}


def cmd_verify(args):
    cfg = _resolve(args, VERIFY_DEFAULTS)
    results = verify.run_verification(seeds=cfg["seeds"], fault=cfg["fault"])
    print(verify.format_report(results))
    ok = verify.all_passed(results)
    if cfg["out"] is not None:
        run = RunDir(cfg["out"], "verify")
        run.write_json("config_echo.json", dict(cfg, command="verify", out=run.root))
        run.write_json(
            "verify_report.json",
            {
                "all_passed": ok,
                "checks": [
                    {
                        "name": r.name,
                        "max_error": r.max_error,
                        "threshold": r.threshold,
                        "passed": r.passed,
                        "detail": r.detail,
                    }
                    for r in results
                ],
            },
        )
        run.finish()
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="JSON config file; flags override its keys")
    p.add_argument("--out", help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="martagan",
        description="Adversarial representation learning for texture imagery: "
        "train a GAN, fuse discriminator features, classify with a linear SVM.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    boolopt = argparse.BooleanOptionalAction

    p = sub.add_parser("synth", help="write a procedural synthetic dataset")
    _add_common(p)
    p.add_argument("--classes", type=int)
    p.add_argument("--per-class", type=int, dest="per_class")
    p.add_argument("--size", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--families", help="comma-separated texture families")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="adversarial training with periodic checkpoints")
    _add_common(p)
    p.add_argument("--data", help="dataset manifest JSON")
    p.add_argument("--z-dim", type=int, dest="z_dim")
    p.add_argument("--base-width", type=int, dest="base_width")
    p.add_argument("--max-width", type=int, dest="max_width")
    p.add_argument("--fusion-depth", type=int, dest="fusion_depth")
    p.add_argument("--init-std", type=float, dest="init_std")
    p.add_argument("--lr", type=float)
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-iterations", type=int, dest="max_iterations")
    p.add_argument("--d-steps", type=int, dest="d_steps")
    p.add_argument("--loss-mode", choices=("final", "perceptual_only"), dest="loss_mode")
    p.add_argument("--non-saturating", action=boolopt, dest="non_saturating")
    p.add_argument("--seed", type=int)
    p.add_argument("--save-interval", type=int, dest="save_interval")
    p.add_argument("--resume", action=boolopt)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample a grid of images from a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("features", help="extract fused discriminator features")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--fusion-depth", type=int, dest="fusion_depth")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("classify", help="cross-validated linear SVM on features")
    _add_common(p)
    p.add_argument("--features", help="feature file from the features command")
    p.add_argument("--data", help="dataset manifest (raw-pixel baseline)")
    p.add_argument("--c-reg", type=float, dest="c_reg")
    p.add_argument("--k", type=int)
    p.add_argument("--standardize", action=boolopt)
    p.add_argument("--shuffle-labels", action=boolopt, dest="shuffle_labels")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("sweep-k", help="accuracy vs fusion depth")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--max-depth", type=int, dest="max_depth")
    p.add_argument("--k", type=int)
    p.add_argument("--c-reg", type=float, dest="c_reg")
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.set_defaults(func=cmd_sweep_k)

    p = sub.add_parser("verify", help="numeric self-checks; non-zero exit on failure")
    _add_common(p)
    p.add_argument("--seeds", type=int)
    p.add_argument("--fault", choices=("conv2d",),
                   help="perturb the named op's backward (expect failures)")
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingDiverged as e:
        print(f"error: training diverged at iteration {e.record.iteration}", file=sys.stderr)
        return 1
    except (ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
