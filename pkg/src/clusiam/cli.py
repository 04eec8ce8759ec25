"""Command line surface.

Subcommands: gen-data, train, eval, cluster, gradcheck, ablate,
dump-embeddings. Every TrainConfig field is available as a flag and as a
config-file key (flags win); the resolved config and a run manifest land in
the output directory. Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import clustering, dataset as data_mod, gradcheck, model as model_mod, trainer
from .config import read_config_file, resolve_config, write_config_file
from .trainer import TrainConfig

log = logging.getLogger(__name__)

SEED_ENV_VAR = "CACL_SEED"

ABLATION_ROWS = {
    # Row name -> TrainConfig overrides relative to the resolved base config.
    "full": {},
    "wo_LI": {"drop_instance": True},
    "wo_LC": {"drop_cluster": True},
    "wo_inter": {"drop_inter": True},
    "wo_intra": {"drop_intra": True},
    "wo_LI_LC": {"drop_instance": True, "drop_cluster": True},
    "wo_refine": {"refine": False},
    "view_plain": {"view": "plain"},
    "view_jitter": {"view": "jitter"},
    "symmetric": {"mode": "symmetric"},
    "no_stopgrad": {"stop_grad": False},
    "symmetric_no_stopgrad": {"mode": "symmetric", "stop_grad": False},
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool" or isinstance(f.default, bool):
            parser.add_argument(flag, dest=f.name, default=None, action=argparse.BooleanOptionalAction)
        elif f.name == "hidden_dims":
            parser.add_argument(flag, dest=f.name, default=None,
                                type=lambda s: tuple(int(x) for x in s.split(",")))
        else:
            parser.add_argument(flag, dest=f.name, default=None, type=type(f.default))
    parser.add_argument("--config", default=None, help="flat key=value config file")


def _resolved_config(args) -> TrainConfig:
    file_values = read_config_file(args.config) if args.config else {}
    overrides = {f.name: getattr(args, f.name) for f in fields(TrainConfig)}
    if overrides.get("seed") is None and "seed" not in file_values:
        env_seed = os.environ.get(SEED_ENV_VAR)
        if env_seed is not None:
            overrides["seed"] = int(env_seed)
    return resolve_config(file_values, overrides)


def _write_manifest(out_dir: Path, cfg: TrainConfig, inputs: dict, outputs: list[str]) -> None:
    digest = hashlib.sha256(json.dumps({"config": cfg.as_dict(), "inputs": inputs},
                                       sort_keys=True).encode()).hexdigest()
    doc = {
        "config": cfg.as_dict(),
        "inputs": inputs,
        "inputs_hash": digest,
        "outputs": outputs,
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out_dir / "manifest.json").write_text(json.dumps(doc, indent=1))


def _load_dataset(args) -> data_mod.ReidDataset:
    manifest = Path(args.data) / "manifest.json"
    if manifest.exists():
        return data_mod.load_manifest(manifest)
    return data_mod.load_ppm_dir(args.data)


def cmd_gen_data(args) -> int:
    spec = data_mod.SyntheticSpec(
        n_identities=args.identities,
        images_per_identity=args.images_per_identity,
        n_cameras=args.cameras,
        height=args.height,
        width=args.width,
        noise_sigma=args.noise_sigma,
        seed=args.seed if args.seed is not None else int(os.environ.get(SEED_ENV_VAR, "0")),
    )
    ds = data_mod.generate(spec)
    ds = data_mod.split(ds, np.random.default_rng(np.random.SeedSequence((spec.seed, 1))))
    out = Path(args.out)
    paths = data_mod.save_ppm_dir(ds, out)
    data_mod.write_manifest(out / "manifest.json", ds, paths, spec)
    print(f"wrote {len(paths)} images and manifest.json to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolved_config(args)
    ds = _load_dataset(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config_file(out / "config.resolved", cfg)
    state = trainer.train(cfg, ds, out_dir=out)
    _write_manifest(out, cfg, {"data": str(args.data)},
                    ["epochs.csv", "batches.csv", "checkpoint_final.json", "config.resolved"])
    if state.history:
        last = state.history[-1]
        print(f"trained {cfg.epochs} epochs; best mAP {state.best_map:.4f}; "
              f"final mAP {last.map:.4f}")
    else:
        print("trained 0 epochs; history empty")
    return 0


def cmd_eval(args) -> int:
    net, _ = model_mod.load_checkpoint(args.checkpoint)
    ds = _load_dataset(args)
    result = trainer.evaluate_branch(net, ds, branch=args.branch)
    if result is None:
        raise RuntimeError("dataset has no query/gallery split to evaluate on")
    doc = result.as_dict()
    print(json.dumps(doc))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(json.dumps(doc, indent=1))
        csv_path = out / "eval.csv"
        new = not csv_path.exists()
        with open(csv_path, "a", newline="") as f:
            writer = csv.writer(f)
            if new:
                writer.writerow(["checkpoint", "branch", "mAP", "cmc1", "cmc5", "cmc10"])
            writer.writerow([args.checkpoint, args.branch, doc["mAP"], doc["cmc1"],
                             doc["cmc5"], doc["cmc10"]])
    return 0


def cmd_cluster(args) -> int:
    cfg = _resolved_config(args)
    net, _ = model_mod.load_checkpoint(args.checkpoint)
    ds = _load_dataset(args)
    indices = ds.train_indices or list(range(len(ds)))
    feats = model_mod.encode(ds.images(indices), net.encoder1)
    assignment = clustering.cluster_features(
        feats, eps=cfg.cluster_eps, eps_fine=cfg.cluster_eps_fine,
        min_pts=cfg.cluster_min_pts, min_cluster_size=cfg.min_cluster_size,
        refine_enabled=cfg.refine,
    )
    doc = {str(idx): int(assignment.labels[pos]) for pos, idx in enumerate(indices)}
    text = json.dumps(doc, indent=1)
    print(f"{assignment.n_clusters} clusters, "
          f"labeled fraction {assignment.labeled_fraction():.3f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "clusters.json").write_text(text)
    else:
        print(text)
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(n_points=args.points, tol=args.tol)
    width = max(len(r.name) for r in results)
    ok = True
    for r in results:
        status = "pass" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  max rel err {r.max_rel_error:.3e}  {status}")
        ok = ok and r.passed
    if not ok:
        raise RuntimeError("gradient check failed")
    return 0


def cmd_ablate(args) -> int:
    base = _resolved_config(args)
    ds = _load_dataset(args)
    rows = [r.strip() for r in args.rows.split(",") if r.strip()]
    unknown = [r for r in rows if r not in ABLATION_ROWS]
    if unknown:
        raise RuntimeError(f"unknown ablation rows {unknown}; known: {sorted(ABLATION_ROWS)}")
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = []
    for row in rows:
        metrics = np.zeros(4)
        for seed in seeds:
            cfg = resolve_config(base.as_dict(), {**ABLATION_ROWS[row], "seed": seed,
                                                  "hidden_dims": tuple(base.hidden_dims)})
            state = trainer.train(cfg, ds)
            last = state.history[-1]
            metrics += (state.best_map, last.cmc1, last.cmc5, last.cmc10)
        metrics /= len(seeds)
        table.append([row, len(seeds)] + [float(m) for m in metrics])
        print(f"{row}: mAP {metrics[0]:.4f}")
    with open(out / "ablation.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["row", "seeds", "mAP", "cmc1", "cmc5", "cmc10"])
        writer.writerows(table)
    return 0


def cmd_dump_embeddings(args) -> int:
    cfg = _resolved_config(args)
    net, _ = model_mod.load_checkpoint(args.checkpoint)
    ds = _load_dataset(args)
    indices = ds.train_indices or list(range(len(ds)))
    feats = model_mod.encode(ds.images(indices), net.encoder1)
    assignment = clustering.cluster_features(
        feats, eps=cfg.cluster_eps, eps_fine=cfg.cluster_eps_fine,
        min_pts=cfg.cluster_min_pts, min_cluster_size=cfg.min_cluster_size,
        refine_enabled=cfg.refine,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "embeddings.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "identity", "camera", "pseudo_label"]
                        + [f"f{j}" for j in range(feats.shape[1])])
        for pos, idx in enumerate(indices):
            s = ds.samples[idx]
            writer.writerow([idx, s.identity, s.camera, int(assignment.labels[pos])]
                            + [repr(float(v)) for v in feats[pos]])
    print(f"wrote embeddings for {len(indices)} images to {out / 'embeddings.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clusiam",
                                     description="cluster-guided contrastive re-id toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic PPM dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--identities", type=int, default=20)
    p.add_argument("--images-per-identity", type=int, default=10)
    p.add_argument("--cameras", type=int, default=3)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--noise-sigma", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on the query/gallery split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--branch", type=int, default=1, choices=(1, 2))
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cluster", help="cluster a checkpoint's features and dump JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    _add_config_flags(p)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--points", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train a matrix of loss/view ablations")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rows", default="full,wo_LI,wo_LC,wo_intra,wo_inter")
    p.add_argument("--seeds", default="0")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-embeddings", help="write features and pseudo labels as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_dump_embeddings)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors exit with code 2
        return int(exc.code or 0)
    try:
        return args.func(args) or 0
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
