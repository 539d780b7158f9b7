"""Command-line entry point.

Subcommands: generate-data, import, train, transfer, evaluate. Every run
resolves its configuration (defaults < config file < flags), executes, and
writes a RunRecord with the fully materialized config so the run can be
reproduced bit-identically. Artifacts land under
``output_dir/{checkpoints,volumes,reports,logs}``; the default output root
comes from $PIPESTYLE_OUTPUT_ROOT (falling back to ./pipestyle-runs).
"""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import os
import sys

import numpy as np

from . import __version__
from .errors import ConfigInvalid, PipestyleError, UnknownDomain
from .volume import DomainLabel, StatMap, load_canonical, save_canonical, import_nifti, split_groups
from .synthetic import SyntheticConfig, generate_dataset, load_manifest
from .classifier import ClassifierTrainConfig, train_classifier, save_classifier, load_classifier
from .diffusion import (
    ALL_TARGETS,
    DiffusionTrainConfig,
    GuidanceConfig,
    load_diffusion,
    make_condition,
    sample_transfer,
    save_diffusion,
    train_diffusion,
    transfer_handle,
)
from .gan import GanFrameworkConfig, GanTrainingData, gan_transfer, load_gan, save_gan, train_gan
from .evaluation import (
    TransferHandle,
    cross_task_evaluation,
    evaluate_transfers,
    layer_correlation_csv,
    layerwise_feature_correlation,
)

TRAIN_KINDS = ("classifier", "pix2pix", "cyclegan", "stargan", "ddpm")


def _output_root() -> str:
    return os.environ.get("PIPESTYLE_OUTPUT_ROOT", os.path.join(os.getcwd(), "pipestyle-runs"))


def _ensure_dirs(output_dir: str) -> dict:
    paths = {name: os.path.join(output_dir, name) for name in ("checkpoints", "volumes", "reports", "logs")}
    for p in paths.values():
        os.makedirs(p, exist_ok=True)
    return paths


def _atomic_write_json(doc: dict, path: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    os.replace(tmp, path)


class RunRecorder:
    """Collects artifacts and writes the run record atomically at the end."""

    def __init__(self, command: str, config: dict, output_dir: str):
        self.command = command
        self.config = config
        self.output_dir = output_dir
        self.artifacts: list[str] = []
        self.started = datetime.datetime.now(datetime.timezone.utc).isoformat()

    def add(self, path: str) -> str:
        self.artifacts.append(os.path.abspath(path))
        return path

    def finish(self) -> str:
        record = {
            "command": self.command,
            "config": self.config,
            "version": __version__,
            "started_utc": self.started,
            "finished_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "artifacts": self.artifacts,
        }
        path = os.path.join(self.output_dir, "logs", f"run-{self.command}.json")
        _atomic_write_json(record, path)
        return path


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigInvalid(f"cannot read config file {path}: {exc}") from exc


def _resolve(cfg: dict, section: str, key: str, flag_value, default):
    """defaults < config file < explicit flag."""
    if flag_value is not None:
        return flag_value
    return cfg.get(section, {}).get(key, default)


def _parse_directions(spec: str) -> list[tuple[str, str]]:
    directions = []
    for part in spec.split(","):
        if ":" not in part:
            raise ConfigInvalid(f"direction {part!r} must be 'source:target'")
        src, tgt = part.split(":", 1)
        directions.append((src.strip(), tgt.strip()))
    return directions


class _CsvLossLog:
    def __init__(self, path: str):
        self.path = path
        self._fh = open(path, "w", encoding="utf-8", newline="")
        self._writer = None

    def __call__(self, **terms):
        if self._writer is None:
            self._writer = csv.writer(self._fh, lineterminator="\n")
            self._writer.writerow(list(terms.keys()))
        self._writer.writerow([terms[k] for k in terms])

    def close(self):
        self._fh.close()


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_generate_data(args) -> int:
    cfg = _load_config_file(args.config)
    syn = cfg.get("data", {}).get("synthetic", {})
    config = SyntheticConfig(
        n_groups=args.n_groups if args.n_groups is not None else syn.get("n_groups", 200),
        shape=tuple(args.shape) if args.shape else tuple(syn.get("shape", (24, 28, 24))),
        K=args.k if args.k is not None else syn.get("K", 4),
        n_blobs=args.n_blobs if args.n_blobs is not None else syn.get("n_blobs", 6),
        style_seed=args.style_seed if args.style_seed is not None else syn.get("style_seed", 11),
        content_seed=args.content_seed if args.content_seed is not None else syn.get("content_seed", 101),
    )
    out_dir = args.out or os.path.join(_output_root(), "dataset")
    resolved = {"seed": None, "output_dir": out_dir, "data": {"synthetic": vars(config) | {"shape": list(config.shape)}}}
    os.makedirs(os.path.join(out_dir, "logs"), exist_ok=True)
    recorder = RunRecorder("generate-data", resolved, out_dir)
    manifest = generate_dataset(config, out_dir)
    manifest_path = recorder.add(os.path.join(out_dir, "manifest.json"))
    recorder.finish()
    print(manifest_path)
    return 0


def cmd_import(args) -> int:
    out_dir = args.out_dir or os.path.join(_output_root(), "imported")
    paths = _ensure_dirs(out_dir)
    recorder = RunRecorder("import", {"nifti": args.nifti, "output_dir": out_dir}, out_dir)
    out_path = os.path.join(paths["volumes"], args.name + ".json")
    import_nifti(
        args.nifti,
        out_path,
        domain=DomainLabel(args.domain_index, args.domain_name),
        group_id=args.group_id,
        task_id=args.task_id,
    )
    recorder.add(out_path)
    recorder.finish()
    print(out_path)
    return 0


def _train_split(manifest, train_fraction: float, seed: int):
    split = split_groups(manifest.group_ids, train_fraction, seed)
    train = [g for g in manifest.group_ids if g in split.train_groups]
    test = [g for g in manifest.group_ids if g in split.test_groups]
    return train, test


def _maps_for_groups(manifest, groups):
    return [manifest.load_map(g, d.name) for g in groups for d in manifest.domains]


def cmd_train(args) -> int:
    cfg = _load_config_file(args.config)
    kind = _resolve(cfg, "model", "kind", args.kind, None)
    if kind not in TRAIN_KINDS:
        raise ConfigInvalid(f"model.kind must be one of {TRAIN_KINDS}, got {kind!r}")
    manifest_path = _resolve(cfg, "data", "manifest", args.manifest, None)
    if not manifest_path:
        raise ConfigInvalid("data.manifest is required for training")
    manifest = load_manifest(manifest_path)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    epochs = _resolve(cfg, "model", "epochs", args.epochs, _default_epochs(kind))
    lr = _resolve(cfg, "model", "lr", args.lr, 1e-4)
    batch = _resolve(cfg, "model", "batch_size", args.batch_size, _default_batch(kind))
    train_fraction = _resolve(cfg, "eval", "train_fraction", args.train_fraction, 0.8)
    output_dir = args.out or cfg.get("output_dir") or os.path.join(_output_root(), kind)
    paths = _ensure_dirs(output_dir)

    resolved = {
        "seed": seed,
        "output_dir": output_dir,
        "data": {"manifest": os.path.abspath(manifest_path)},
        "model": {"kind": kind, "epochs": epochs, "lr": lr, "batch_size": batch},
        "eval": {"train_fraction": train_fraction},
    }
    train_groups, test_groups = _train_split(manifest, train_fraction, seed)
    loss_log = _CsvLossLog(os.path.join(paths["logs"], "train_loss.csv"))
    recorder = RunRecorder("train", resolved, output_dir)
    ckpt = os.path.join(paths["checkpoints"], f"{kind}.pt")
    try:
        if kind == "classifier":
            handle = train_classifier(
                _maps_for_groups(manifest, train_groups),
                manifest.domains,
                ClassifierTrainConfig(epochs=epochs, lr=lr, batch_size=batch, seed=seed),
                val_maps=_maps_for_groups(manifest, test_groups),
                log=loss_log,
            )
            save_classifier(handle, ckpt)
        elif kind == "ddpm":
            cond_mode = _resolve(cfg, "model", "cond_mode", args.cond, "one_hot").replace("-", "_")
            guidance = GuidanceConfig(
                w=_resolve(cfg, "model", "guidance_w", args.guidance, 2.0),
                p_uncond=_resolve(cfg, "model", "p_uncond", args.p_uncond, 0.1),
                t_start=_resolve(cfg, "model", "t_start", args.t_start, None),
            )
            clf = load_classifier(args.classifier) if args.classifier else None
            if cond_mode == "latent" and clf is None:
                raise ConfigInvalid("latent conditioning requires --classifier")
            dconf = DiffusionTrainConfig(
                T=_resolve(cfg, "model", "T", args.timesteps, 500),
                cond_mode=cond_mode,
                epochs=epochs,
                lr=lr,
                batch_size=batch,
                base_channels=_resolve(cfg, "model", "base_channels", args.base_channels, 32),
                seed=seed,
                guidance=guidance,
            )
            resolved["model"] |= {"cond_mode": cond_mode, "T": dconf.T, "guidance": vars(guidance)}
            handle = train_diffusion(
                _maps_for_groups(manifest, train_groups), manifest.domains, dconf, classifier=clf, log=loss_log
            )
            save_diffusion(handle, ckpt)
        else:
            direction = None
            dir_spec = _resolve(cfg, "model", "direction", args.direction, None)
            if dir_spec:
                direction = tuple(_parse_directions(dir_spec)[0])
            gconf = GanFrameworkConfig(
                kind=kind,
                epochs=epochs,
                lr=lr,
                batch_size=batch,
                seed=seed,
                direction=direction,
                base_channels=_resolve(cfg, "model", "base_channels", args.base_channels, 16),
            )
            resolved["model"] |= {"direction": direction, "lambdas": {
                "rec": gconf.lambda_rec, "cyc": gconf.lambda_cyc, "cls": gconf.lambda_cls}}
            data = GanTrainingData.from_manifest(manifest, train_groups)
            handle = train_gan(gconf, data, log=loss_log)
            save_gan(handle, ckpt)
    finally:
        loss_log.close()
    recorder.add(ckpt)
    recorder.add(loss_log.path)
    recorder.finish()
    print(ckpt)
    return 0


def _default_epochs(kind: str) -> int:
    return {"classifier": 150, "ddpm": 200}.get(kind, 200)


def _default_batch(kind: str) -> int:
    return {"classifier": 64, "ddpm": 8}.get(kind, 8)


def _checkpoint_kind(path: str) -> str:
    with open(path + ".json", "r", encoding="utf-8") as fh:
        return json.load(fh).get("kind", "")


def cmd_transfer(args) -> int:
    kind = _checkpoint_kind(args.ckpt)
    source = load_canonical(args.source)
    output_dir = args.out or os.path.join(_output_root(), "transfer")
    paths = _ensure_dirs(output_dir)
    resolved = {
        "seed": args.seed or 0,
        "output_dir": output_dir,
        "model": {"ckpt": os.path.abspath(args.ckpt), "kind": kind},
        "transfer": {
            "source": os.path.abspath(args.source),
            "target": args.target,
            "cond": args.cond,
            "n_targets": args.n_targets,
            "guidance_w": args.guidance,
            "t_start": args.t_start,
        },
    }
    recorder = RunRecorder("transfer", resolved, output_dir)
    if kind in ("pix2pix", "cyclegan", "stargan"):
        if args.cond or args.n_targets or args.guidance is not None or args.t_start is not None:
            print("warning: DM-only flags ignored for GAN checkpoints", file=sys.stderr)
        handle = load_gan(args.ckpt)
        target = _named_domain(handle.domains, args.target)
        out_map = gan_transfer(handle, source, target)
    elif kind == "ddpm":
        dm = load_diffusion(args.ckpt)
        target = _named_domain(dm.domains, args.target)
        guidance = GuidanceConfig(
            w=args.guidance if args.guidance is not None else dm.guidance.w,
            p_uncond=dm.guidance.p_uncond,
            t_start=args.t_start if args.t_start is not None else dm.guidance.t_start,
        )
        cond_mode = (args.cond or dm.cond_mode).replace("-", "_")
        rng = np.random.default_rng(args.seed or 0)
        if cond_mode == "one_hot":
            cond = make_condition(target, "one_hot", K=len(dm.domains))
        else:
            if not args.manifest:
                raise ConfigInvalid("latent conditioning needs --manifest for the target pool")
            manifest = load_manifest(args.manifest)
            pool = [manifest.load_map(g, target.name) for g in manifest.group_ids]
            clf = load_classifier(args.classifier) if args.classifier else None
            if clf is None:
                raise ConfigInvalid("latent conditioning requires --classifier")
            n_targets = args.n_targets or ALL_TARGETS
            if n_targets != ALL_TARGETS:
                n_targets = int(n_targets)
            cond = make_condition(
                target, "latent", n_targets=n_targets, target_pool=pool, classifier=clf, rng=rng
            )
        out_map = sample_transfer(source, cond, guidance, dm.schedule, dm, rng)
    else:
        raise ConfigInvalid(f"checkpoint kind {kind!r} does not support transfer")
    out_path = os.path.join(paths["volumes"], f"{source.group_id}__{args.target}__generated.json")
    save_canonical(out_map, out_path)
    recorder.add(out_path)
    recorder.finish()
    print(out_path)
    return 0


def _named_domain(domains, name: str) -> DomainLabel:
    for d in domains:
        if d.name == name:
            return d
    raise UnknownDomain(f"unknown domain {name!r}; valid: {sorted(d.name for d in domains)}")


def cmd_evaluate(args) -> int:
    manifest = load_manifest(args.manifest)
    if not args.classifier:
        raise ConfigInvalid("--classifier checkpoint is required for evaluation")
    clf = load_classifier(args.classifier)
    directions = _parse_directions(args.directions)
    seed = args.seed or 0
    train_groups, test_groups = _train_split(manifest, args.train_fraction, seed)
    output_dir = args.out or os.path.join(_output_root(), "evaluate")
    paths = _ensure_dirs(output_dir)
    resolved = {
        "seed": seed,
        "output_dir": output_dir,
        "data": {"manifest": os.path.abspath(args.manifest)},
        "eval": {
            "directions": [list(d) for d in directions],
            "n_images": args.n_images,
            "train_fraction": args.train_fraction,
            "model": args.model,
            "cross_task": args.cross_task,
            "layer_corr": args.layer_corr,
        },
    }
    recorder = RunRecorder("evaluate", resolved, output_dir)

    model = _evaluation_model(args, manifest, train_groups, clf, seed)
    report = evaluate_transfers(
        model, manifest, directions, n_images=args.n_images, groups=test_groups, classifier=clf, seed=seed
    )
    csv_path = os.path.join(paths["reports"], "metrics.csv")
    json_path = os.path.join(paths["reports"], "metrics.json")
    report.to_csv(csv_path)
    report.to_json(json_path)
    recorder.add(csv_path)
    recorder.add(json_path)

    if args.cross_task:
        foreign = load_manifest(args.cross_task)
        _, foreign_test = _train_split(foreign, args.train_fraction, seed)
        xreport = cross_task_evaluation(
            model,
            foreign,
            directions,
            n_images=args.n_images,
            groups=foreign_test,
            classifier=clf,
            seed=seed,
            train_task=manifest.config.task_id,
        )
        xcsv = os.path.join(paths["reports"], "metrics_cross_task.csv")
        xjson = os.path.join(paths["reports"], "metrics_cross_task.json")
        xreport.to_csv(xcsv)
        xreport.to_json(xjson)
        recorder.add(xcsv)
        recorder.add(xjson)

    if args.layer_corr:
        pairs = [(s, t) for s, t in directions]
        rows = layerwise_feature_correlation(clf, manifest, pairs, test_groups[: args.n_images])
        lcsv = os.path.join(paths["reports"], "layer_correlations.csv")
        layer_correlation_csv(rows, lcsv)
        recorder.add(lcsv)

    recorder.finish()
    print(csv_path)
    return 0


def _evaluation_model(args, manifest, train_groups, clf, seed: int):
    if args.model == "identity":
        return TransferHandle(
            fn=lambda source, target: source, domains=manifest.domains, name="identity",
            task_id=manifest.config.task_id,
        )
    kind = _checkpoint_kind(args.model)
    if kind in ("pix2pix", "cyclegan", "stargan"):
        return load_gan(args.model).transfer_fn()
    if kind == "ddpm":
        dm = load_diffusion(args.model)
        pools = None
        if dm.cond_mode == "latent":
            pools = {
                d.name: [manifest.load_map(g, d.name) for g in train_groups] for d in manifest.domains
            }
        n_targets = args.n_targets or ALL_TARGETS
        if n_targets != ALL_TARGETS:
            n_targets = int(n_targets)
        return transfer_handle(
            dm, target_pools=pools, classifier=clf, n_targets=n_targets, seed=seed,
            task_id=manifest.config.task_id,
        )
    raise ConfigInvalid(f"cannot evaluate checkpoint of kind {kind!r}")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pipestyle", description=__doc__)
    parser.add_argument("--version", action="version", version=f"pipestyle {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="render a synthetic multi-pipeline dataset")
    g.add_argument("--config")
    g.add_argument("--n-groups", type=int)
    g.add_argument("--shape", type=int, nargs=3, metavar=("NX", "NY", "NZ"))
    g.add_argument("--k", type=int)
    g.add_argument("--n-blobs", type=int)
    g.add_argument("--style-seed", type=int)
    g.add_argument("--content-seed", type=int)
    g.add_argument("--out")
    g.set_defaults(fn=cmd_generate_data)

    i = sub.add_parser("import", help="import a NIfTI volume into canonical format")
    i.add_argument("--nifti", required=True)
    i.add_argument("--name", required=True, help="output stem")
    i.add_argument("--domain-index", type=int, required=True)
    i.add_argument("--domain-name", required=True)
    i.add_argument("--group-id", required=True)
    i.add_argument("--task-id", required=True)
    i.add_argument("--out-dir")
    i.set_defaults(fn=cmd_import)

    t = sub.add_parser("train", help="train a classifier, GAN or diffusion model")
    t.add_argument("--config")
    t.add_argument("--kind", choices=TRAIN_KINDS)
    t.add_argument("--manifest")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--train-fraction", type=float)
    t.add_argument("--direction", help="source:target for one-to-one GANs")
    t.add_argument("--cond", choices=["one-hot", "latent"], help="DM conditioning mode")
    t.add_argument("--classifier", help="classifier checkpoint for latent conditioning")
    t.add_argument("--timesteps", type=int, help="DM diffusion steps T")
    t.add_argument("--guidance", type=float, help="DM guidance weight w")
    t.add_argument("--p-uncond", type=float)
    t.add_argument("--t-start", type=int)
    t.add_argument("--base-channels", type=int)
    t.add_argument("--out")
    t.set_defaults(fn=cmd_train)

    x = sub.add_parser("transfer", help="restyle one volume into a target pipeline")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--source", required=True, help="canonical volume header path")
    x.add_argument("--target", required=True, help="target domain name")
    x.add_argument("--cond", choices=["one-hot", "latent"])
    x.add_argument("--n-targets", help="N or 'all'")
    x.add_argument("--guidance", type=float)
    x.add_argument("--t-start", type=int)
    x.add_argument("--manifest", help="dataset manifest supplying latent target pools")
    x.add_argument("--classifier")
    x.add_argument("--seed", type=int)
    x.add_argument("--out")
    x.set_defaults(fn=cmd_transfer)

    e = sub.add_parser("evaluate", help="compute transfer metrics reports")
    e.add_argument("--model", required=True, help="checkpoint path or 'identity'")
    e.add_argument("--manifest", required=True)
    e.add_argument("--classifier", required=True)
    e.add_argument("--directions", required=True, help="comma-separated source:target pairs")
    e.add_argument("--n-images", type=int, default=20)
    e.add_argument("--n-targets", help="DM latent pool size: N or 'all'")
    e.add_argument("--train-fraction", type=float, default=0.8)
    e.add_argument("--seed", type=int)
    e.add_argument("--cross-task", help="foreign-task manifest")
    e.add_argument("--layer-corr", action="store_true")
    e.add_argument("--out")
    e.set_defaults(fn=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except PipestyleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
