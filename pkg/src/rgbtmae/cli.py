"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger("rgbtmae")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class CommandResult:
    code: int = EXIT_OK
    summary: str = ""
    artifacts: list = field(default_factory=list)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _kv(items) -> dict:
    out = {}
    for it in items or []:
        if "=" not in it:
            raise UsageError(f"--set expects key=value, got {it!r}")
        k, v = it.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def _load_manifest(path):
    from .curation import ManifestError, read_manifest

    try:
        return read_manifest(path)
    except (ManifestError, OSError) as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e


def _dataset(manifest, size):
    from .data import PairDataset

    try:
        return PairDataset.from_manifest(manifest, size)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot load pairs: {e}") from e


def _model(path):
    from .engine import load_model

    try:
        return load_model(path)
    except (OSError, KeyError, ValueError) as e:
        raise DataError(f"cannot load checkpoint {path}: {e}") from e


# -- subcommands ------------------------------------------------------------

def cmd_gen_corpus(a) -> CommandResult:
    from .synthetic import SceneSpec, generate_corpus

    d = json.loads(Path(a.spec).read_text()) if a.spec else {}
    if a.seed is not None:
        d["seed"] = a.seed
    try:
        spec = SceneSpec.from_dict(d)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad scene spec: {e}") from e
    out = generate_corpus(spec, a.n, a.out)
    return CommandResult(summary=f"wrote {a.n} pairs to {out}", artifacts=[str(out)])


def cmd_curate(a) -> CommandResult:
    from .curation import ManifestError, build_manifest

    try:
        m = build_manifest(a.roots, a.out, a.ssim_threshold, a.dedup_threshold, a.cap,
                           a.seed or 0, a.quality_mode, a.dedup_mode, a.stride, a.workers)
    except ManifestError as e:
        raise DataError(str(e)) from e
    return CommandResult(summary=m.summary_text(), artifacts=[a.out])


def cmd_pretrain(a) -> CommandResult:
    from .engine import load_config, run_pretraining

    over = _kv(a.set)
    if a.seed is not None:
        over["seed"] = str(a.seed)
    if a.epochs is not None:
        over["epochs"] = str(a.epochs)
    try:
        cfg = load_config(a.config, over)
    except (OSError, ValueError, TypeError) as e:
        raise UsageError(f"bad config: {e}") from e
    if a.resume:
        from .engine import TrainConfig, read_checkpoint

        try:
            cfg = TrainConfig.from_dict(read_checkpoint(a.resume)[0]["config"])
        except (OSError, KeyError, ValueError) as e:
            raise DataError(f"cannot read checkpoint {a.resume}: {e}") from e
    ds = _dataset(_load_manifest(a.manifest), cfg.img_size)
    ck = run_pretraining(cfg, ds, a.out, resume=a.resume, log_every=a.log_every)
    out = Path(a.out)
    return CommandResult(summary=f"checkpoint {ck}",
                         artifacts=[str(ck), str(out / "metrics.jsonl")])


def _pairs(manifest, size):
    ds = _dataset(manifest, size)
    return [ds.pair(i) for i in range(len(ds))]


def cmd_extract(a) -> CommandResult:
    from .analysis import extract_fused, pair_labels

    model, meta = _model(a.checkpoint)
    pairs = _pairs(_load_manifest(a.manifest), model.cfg.img_size)
    feats = extract_fused(model, pairs, str(a.checkpoint))
    arrays = {"features": feats.features.astype(np.float32)}
    if all(p.object_mask is not None for p in pairs):
        arrays["labels"] = pair_labels(pairs, model.cfg.patch_size)
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    np.savez(a.out, checkpoint=np.array(str(a.checkpoint)), **arrays)
    return CommandResult(summary=f"features {feats.features.shape} -> {a.out}",
                         artifacts=[a.out])


def cmd_probe(a) -> CommandResult:
    from .analysis import linear_probe

    rows = []
    for path in a.features:
        try:
            with np.load(path) as z:
                f, y = z["features"], z["labels"]
        except (OSError, KeyError) as e:
            raise DataError(f"{path}: features with labels required ({e})") from e
        rng = np.random.default_rng(a.seed or 0)
        r = linear_probe(f.astype(np.float64), y, rng, a.train_fraction)
        rows.append({"features": path, "accuracy": r.accuracy,
                     "train_accuracy": r.train_accuracy, "n_train": r.n_train,
                     "n_test": r.n_test})
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    with open(a.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    text = "\n".join(f"{r['features']}: accuracy {r['accuracy']:.4f}" for r in rows)
    return CommandResult(summary=text, artifacts=[a.out])


def cmd_analyze(a) -> CommandResult:
    from .analysis import wasserstein_report, write_gmm_csv
    from .engine import read_checkpoint

    if not (a.wasserstein or a.gmm):
        raise UsageError("analyze needs --wasserstein and/or --gmm")
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    arts, lines = [], []
    if a.wasserstein:
        if not a.checkpoints or not a.manifest:
            raise UsageError("--wasserstein needs --checkpoints and --manifest")
        models = {}
        for c in a.checkpoints:
            models[Path(c).parent.name + "/" + Path(c).name] = _model(c)[0]
        size = next(iter(models.values())).cfg.img_size
        pairs = _pairs(_load_manifest(a.manifest), size)
        res = wasserstein_report(models, pairs, out, a.projections, a.seed or 0)
        for k, d in res.items():
            lines.append(f"{k}: n={len(d)} median sliced W1 {np.median(d):.4f}")
        arts += [str(out / "wasserstein.csv"), str(out / "wasserstein_hist.png")]
    if a.gmm:
        for c in a.checkpoints or []:
            meta, _ = read_checkpoint(c)
            g = meta["gmm"]
            p = out / f"gmm_{Path(c).stem.split('.')[0]}.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["k", "pi", "mu", "sigma2"])
                for k in range(len(g["means"])):
                    w.writerow([k, g["weights"][k], g["means"][k], g["variances"][k]])
            arts.append(str(p))
        if a.metrics:
            p = out / "gmm_trajectory.csv"
            n = write_gmm_csv(a.metrics, p)
            lines.append(f"gmm trajectory rows: {n}")
            arts.append(str(p))
        if not a.checkpoints and not a.metrics:
            raise UsageError("--gmm needs --checkpoints or --metrics")
    return CommandResult(summary="\n".join(lines), artifacts=arts)


def cmd_plot_masks(a) -> CommandResult:
    from PIL import Image

    from .cmss import cmss_from_arrays, to_heatmap
    from .data import InputNorm, to_tensors
    from .engine import read_checkpoint
    from .gmm import GmmState
    from .masking import MaskBudget, schedule_at, select_visible

    model, meta = _model(a.checkpoint)
    cfg = model.cfg
    tc = meta["config"]
    gmm = GmmState.from_dict(meta["gmm"])
    pairs = _pairs(_load_manifest(a.manifest), cfg.img_size)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    arts = []
    norm = InputNorm(tc["norm_mean"], tc["norm_std"])
    scale = 8 if cfg.grid_side <= 16 else 4
    for i in a.index:
        if not 0 <= i < len(pairs):
            raise DataError(f"pair index {i} out of range ({len(pairs)} pairs)")
        p = pairs[i]
        r, t = to_tensors(p.rgb[None], p.thermal[None], norm)
        import torch

        with torch.no_grad():
            er = model.embed(model.patchify(r))[0].double().numpy()
            et = model.embed(model.patchify(t))[0].double().numpy()
        cm = cmss_from_arrays(er, et, tc["cmss_eps"])
        heat = to_heatmap(cm, cfg.patch_size)
        hp = out / f"pair{i:05d}_cmss.png"
        Image.fromarray(heat, "L").save(hp)
        arts.append(str(hp))
        for prog in a.progress:
            sc = schedule_at(prog, gmm)
            rng = np.random.default_rng(np.random.SeedSequence([a.seed or 0, i]))
            plan = select_visible(cm, sc, MaskBudget(tc["mask_ratio"]), "rgb", rng)
            vis = np.kron(plan.visible, np.ones((cfg.patch_size,) * 2, dtype=bool))
            over = p.rgb.astype(np.float64)
            over[~vis] *= 0.25
            heat_rgb = np.repeat(heat[..., None], 3, axis=2).astype(np.float64)
            heat_rgb[vis] = 0.5 * heat_rgb[vis] + 0.5 * np.array([60, 120, 255])
            panel = np.concatenate([heat_rgb, over], axis=1).round().astype(np.uint8)
            img = Image.fromarray(panel, "RGB").resize(
                (panel.shape[1] * scale // 2, panel.shape[0] * scale // 2), Image.NEAREST)
            pp = out / f"pair{i:05d}_p{prog:.3f}_{sc.phase_label}.png"
            img.save(pp)
            arts.append(str(pp))
    return CommandResult(summary=f"wrote {len(arts)} images to {out}", artifacts=arts)


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rgbtmae", description="RGB-thermal masked autoencoder toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    s = sub.add_parser("gen-corpus", help="render a synthetic paired corpus")
    s.add_argument("--spec", help="JSON scene spec (defaults if omitted)")
    s.add_argument("--n", type=int, required=True, help="number of pairs")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, help="override the spec seed")
    s.set_defaults(func=cmd_gen_corpus)

    s = sub.add_parser("curate", help="score, deduplicate and balance pairs into a manifest")
    s.add_argument("--roots", nargs="+", required=True, help="dirs holding rgb/ and thermal/")
    s.add_argument("--ssim-threshold", type=float, default=0.80)
    s.add_argument("--dedup-threshold", type=float, default=0.95)
    s.add_argument("--dedup-mode", choices=("similarity", "stride"), default="similarity")
    s.add_argument("--stride", type=int, default=1, help="keep every n-th frame (stride mode)")
    s.add_argument("--quality-mode", choices=("gray_vs_thermal", "thermal_vs_gray"),
                   default="gray_vs_thermal")
    s.add_argument("--cap", type=float, default=0.2, help="max fraction per source")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True, help="manifest path (JSON lines)")
    s.set_defaults(func=cmd_curate)

    s = sub.add_parser("pretrain", help="pre-train the Siamese masked autoencoder")
    s.add_argument("--config", help="flat key = value config file")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--set", nargs="*", metavar="KEY=VALUE", help="config overrides")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--resume", help="checkpoint to resume from")
    s.add_argument("--log-every", type=int, default=50)
    s.add_argument("--workers", type=int, default=1, help="accepted for symmetry; loading is eager")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("extract", help="fused encoder features for every kept pair")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help=".npz output")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("probe", help="object/background linear probe on extracted features")
    s.add_argument("--features", nargs="+", required=True, help=".npz files from extract")
    s.add_argument("--train-fraction", type=float, default=0.7)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True, help="CSV output")
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("analyze", help="Wasserstein report and mixture dumps")
    s.add_argument("--wasserstein", action="store_true")
    s.add_argument("--gmm", action="store_true")
    s.add_argument("--checkpoints", nargs="*")
    s.add_argument("--manifest")
    s.add_argument("--metrics", help="metrics.jsonl for the mixture trajectory")
    s.add_argument("--projections", type=int, default=64)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("plot-masks", help="CMSS heatmaps and visible-patch overlays")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--index", type=int, nargs="+", default=[0])
    s.add_argument("--progress", type=float, nargs="+",
                   default=[0.125, 0.275, 0.425, 0.5, 0.583, 0.75, 0.917])
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot_masks)
    return p


def dispatch(argv=None) -> CommandResult:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
        if a.command is None:
            raise UsageError(parser.format_usage())
    except UsageError as e:
        print(str(e).rstrip(), file=sys.stderr)
        return CommandResult(EXIT_USAGE, str(e))
    logging.basicConfig(level=logging.DEBUG if a.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        res = a.func(a)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return CommandResult(EXIT_USAGE, str(e))
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return CommandResult(EXIT_DATA, str(e))
    except Exception as e:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return CommandResult(EXIT_RUNTIME, str(e))
    if res.summary:
        print(res.summary)
    return res


def main(argv=None) -> int:
    try:
        return dispatch(argv).code
    except SystemExit as e:  # --help
        return int(e.code or 0)


if __name__ == "__main__":
    sys.exit(main())
