"""Command-line entry points: ``shapetok <command> ...``.

Every command prints a JSON report (or writes it to ``--report``), writes a
``<output>.manifest.json`` with the fully resolved arguments and config, and
exits non-zero with a one-line diagnostic on failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .extract import GridSpec, decimate, extract, remove_floaters
from .geom import (ShapeSpec, procedural_dataset, read_manifest, read_obj, s_iou, sample_surface,
                   v_iou, write_manifest, write_obj)
from .net import NetConfig
from .ssl import SSLConfig
from .vq import SHORTCUT, QUANTIZE, TokenSequence

DEFAULT_CONFIG = {"net": NetConfig().to_json(), "train": {}}


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(2)


# ------------------------------------------------------------------ helpers

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` assignments; the path must already exist."""
    cfg = json.loads(json.dumps(config))
    for item in overrides or []:
        if "=" not in item:
            raise CLIError(f"override {item!r} is not of the form key.path=value")
        key, val = item.split("=", 1)
        node, parts = cfg, key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise CLIError(f"override {key!r}: no config section {p!r}")
            node = node[p]
        node[parts[-1]] = _parse_value(val)
    return cfg


def _resolve_train_config(args) -> tuple:
    from .train import TrainConfig
    base = json.loads(json.dumps(DEFAULT_CONFIG))
    if args.config:
        user = json.loads(Path(args.config).read_text())
        unknown = set(user) - {"net", "train"}
        if unknown:
            raise CLIError(f"unknown config sections: {sorted(unknown)}")
        base["net"].update(user.get("net", {}))
        base["train"].update(user.get("train", {}))
    base["train"].setdefault("ssl", SSLConfig().to_json())
    cfg = apply_overrides(base, args.set)
    cfg["train"]["seed"] = args.seed
    if args.steps is not None:
        cfg["train"]["steps"] = args.steps
    try:
        net = NetConfig.from_json(cfg["net"])
        tcfg = TrainConfig.from_json(cfg["train"])
    except TypeError as e:
        raise CLIError(f"bad config: {e}") from e
    return net, tcfg, {"net": net.to_json(), "train": tcfg.to_json()}


def _load_model(path):
    from .train import Tokenizer, load_checkpoint
    return Tokenizer.from_checkpoint(load_checkpoint(path))


def _load_specs(path, ids=None) -> list[tuple[str, ShapeSpec]]:
    rows = read_manifest(path)
    if ids:
        keep = set(ids)
        rows = [r for r in rows if r[0] in keep]
        missing = keep - {r[0] for r in rows}
        if missing:
            raise CLIError(f"ids not in manifest: {sorted(missing)}")
    if not rows:
        raise CLIError(f"no shapes in {path}")
    return rows


def _write_manifest(out: Path, command: str, args, resolved: dict | None = None) -> Path:
    path = Path(str(out) + ".manifest.json")
    argv = {k: v for k, v in vars(args).items() if k not in ("func",)}
    doc = {"tool": "shapetok", "version": __version__, "command": command, "args": argv}
    if resolved is not None:
        doc["config"] = resolved
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    return path


# ----------------------------------------------------------------- commands

def cmd_gen_data(args):
    specs = procedural_dataset(args.n, args.seed)
    write_manifest(specs, args.out)
    m = _write_manifest(args.out, "gen-data", args)
    kinds = {}
    for s in specs:
        kinds[s.kind] = kinds.get(s.kind, 0) + 1
    return {"manifest": str(args.out), "n": len(specs), "kinds": kinds, "run_manifest": str(m)}


def cmd_train(args):
    from .train import Tokenizer, fit, load_checkpoint, prepare_stage2, save_checkpoint
    net, tcfg, resolved = _resolve_train_config(args)
    rows = _load_specs(args.data)
    specs = [s for _, s in rows]
    model = None
    if args.init:
        model = Tokenizer.from_checkpoint(load_checkpoint(args.init))
        if tcfg.stage == "tsdf":
            prepare_stage2(model, lr=tcfg.lr)
        resolved["net"] = model.cfg.to_json()
    elif tcfg.stage == "tsdf" and not tcfg.cold_start:
        raise CLIError("stage 'tsdf' needs --init <stage-1 checkpoint> or train.cold_start=true")
    report = {"checkpoint": str(args.out), "stage": tcfg.stage}
    if not args.generator:
        res = fit(specs, tcfg, net, model)
        model = res.model
        hist = res.history
        report.update(steps=len(hist), final_step=model.step,
                      final_loss=hist[-1].total if hist else None,
                      final_parts=hist[-1].parts if hist else None)
    else:
        if model is None:
            raise CLIError("--generator needs --init <trained tokenizer checkpoint>")
        report.update(_train_generator(model, rows, args))
    save_checkpoint(model, args.out, tcfg)
    report["run_manifest"] = str(_write_manifest(args.out, "train", args, resolved))
    return report


def _train_generator(model, rows, args) -> dict:
    from .gen import GenConfig, train_ar
    specs = [s for _, s in rows]
    labels = [s.label for s in specs]
    toks = [model.tokenize(s) for s in specs]
    gcfg = GenConfig(K=model.cfg.codebook_size, n_latent=model.cfg.n_latent, n_classes=max(labels) + 1)
    gen, hist = train_ar(toks, labels, [s.bbox_dims() for s in specs], gcfg,
                         steps=args.steps or 2000, seed=args.seed)
    model.gen_config, model.gen_arrays = gen.to_state()
    return {"generator_steps": len(hist), "generator_final_loss": hist[-1] if hist else None}


def _surface_from_input(model, args) -> np.ndarray:
    if args.mesh:
        mesh = read_obj(args.mesh)
        return sample_surface(mesh, model.cfg.n_points, [args.seed, 0xE1])
    rows = _load_specs(args.manifest, [args.id])
    from .geom import surface_points
    return surface_points(rows[0][1], model.cfg.n_points, [args.seed, 0xE1])


def cmd_tokenize(args):
    if bool(args.mesh) == bool(args.manifest):
        raise CLIError("give exactly one of --mesh or --manifest/--id")
    model = _load_model(args.ckpt)
    tokens = model.tokenize(_surface_from_input(model, args))
    tokens.save(args.out)
    m = _write_manifest(args.out, "tokenize", args)
    return {"tokens": str(args.out), "n": len(tokens), "K": tokens.K, "indices": tokens.indices.tolist(),
            "run_manifest": str(m)}


def _mesh_from_tokens(model, tokens, grid, coarse, hierarchical=True):
    mesh, stats = extract(model.field(tokens), GridSpec(grid, coarse), hierarchical=hierarchical)
    return mesh, stats


def cmd_detokenize(args):
    model = _load_model(args.ckpt)
    tokens = TokenSequence.load(args.tokens)
    mesh, stats = _mesh_from_tokens(model, tokens, args.grid, args.coarse, not args.dense)
    if mesh.n_faces and args.keep_ratio:
        mesh = remove_floaters(mesh, args.keep_ratio)
    if mesh.n_faces and args.decimate:
        mesh = decimate(mesh, args.decimate)
    write_obj(mesh, args.out)
    m = _write_manifest(args.out, "detokenize", args)
    rep = {"mesh": str(args.out), "vertices": len(mesh.vertices), "faces": mesh.n_faces,
           "watertight": bool(mesh.n_faces and mesh.is_watertight()), "run_manifest": str(m)}
    if args.stats:
        rep["stats"] = stats.to_json()
    return rep


def cmd_eval(args):
    rows = _load_specs(args.data, args.ids)
    if bool(args.ckpt) == bool(args.pred):
        raise CLIError("give exactly one of --ckpt or --pred")
    results = []
    if args.ckpt:
        model = _load_model(args.ckpt)
        for sid, spec in rows:
            occ = model.occupancy(spec, args.path, seed=args.seed)
            results.append({"id": sid, "v_iou": v_iou(occ, spec, args.n, args.seed),
                            "s_iou": s_iou(occ, spec, args.n, args.seed)})
    else:
        pred = dict(read_manifest(args.pred))
        for sid, spec in rows:
            if sid not in pred:
                raise CLIError(f"prediction manifest lacks id {sid!r}")
            results.append({"id": sid, "v_iou": v_iou(pred[sid], spec, args.n, args.seed),
                            "s_iou": s_iou(pred[sid], spec, args.n, args.seed)})
    report = {"shapes": results, "mean_v_iou": float(np.mean([r["v_iou"] for r in results])),
              "mean_s_iou": float(np.mean([r["s_iou"] for r in results])), "path": args.path}
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
        report["run_manifest"] = str(_write_manifest(args.out, "eval", args))
    return report


def cmd_generate(args):
    from .gen import GenModel, sample
    model = _load_model(args.ckpt)
    if model.gen_config is None:
        raise CLIError("checkpoint has no generator (train with --generator first)")
    gen = GenModel.from_state(model.gen_config, model.gen_arrays)
    label = None if args.label is None or args.label < 0 else args.label
    tokens = sample(gen, label, args.bbox, s=args.scale, temperature=args.temperature, seed=args.seed)
    tokens.save(args.out)
    rep = {"tokens": str(args.out), "indices": tokens.indices.tolist()}
    if args.mesh:
        mesh, _ = _mesh_from_tokens(model, tokens, args.grid, args.coarse)
        write_obj(mesh, args.mesh)
        rep["mesh"] = str(args.mesh)
        rep["faces"] = mesh.n_faces
    rep["run_manifest"] = str(_write_manifest(args.out, "generate", args))
    return rep


def cmd_scene_validate(args):
    from .scene import load_scene, validate
    bounds = (tuple(args.bounds[:3]), tuple(args.bounds[3:])) if args.bounds else None
    scene = load_scene(args.scene)
    rep = validate(scene, bounds) if bounds else validate(scene)
    out = {"scene": str(args.scene), "objects": len(scene), **rep.to_json()}
    if args.out:
        Path(args.out).write_text(json.dumps(out, indent=2) + "\n")
        out["run_manifest"] = str(_write_manifest(args.out, "scene-validate", args))
    return out


def cmd_scene_instantiate(args):
    from .scene import TokenSource, instantiate, load_scene, merge
    scene = load_scene(args.scene)
    if args.source == "tokens":
        if not (args.ckpt and args.tokens_dir):
            raise CLIError("--source tokens needs --ckpt and --tokens-dir")
        source = TokenSource(_load_model(args.ckpt), Path(args.tokens_dir), args.grid, args.coarse)
    else:
        source = "procedural"
    placed = instantiate(scene, source)
    mesh = merge(placed)
    write_obj(mesh, args.out)
    m = _write_manifest(args.out, "scene-instantiate", args)
    return {"mesh": str(args.out), "objects": [
        {"id": p.id, "faces": p.mesh.n_faces, "bounds": [b.tolist() for b in p.mesh.bounds()]}
        for p in placed], "run_manifest": str(m)}


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="shapetok", description="Shape tokenizer pipeline.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--report", help="write the JSON report here instead of stdout")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", help="write a procedural shape manifest")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--n", required=True, type=int)
    s.add_argument("--seed", required=True, type=int)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train the tokenizer (or, with --generator, the token generator)")
    s.add_argument("--data", required=True, help="shape manifest (JSONL)")
    s.add_argument("--out", required=True, type=Path, help="checkpoint to write")
    s.add_argument("--seed", required=True, type=int)
    s.add_argument("--config", help="JSON file with 'net' and 'train' sections")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override, repeatable")
    s.add_argument("--steps", type=int)
    s.add_argument("--init", help="checkpoint to continue from (stage-1 weights for the tsdf stage)")
    s.add_argument("--generator", action="store_true", help="train the token generator on top of --init")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("tokenize", help="encode a shape into a token file")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--mesh", help="watertight OBJ in the [-1, 1] cube")
    s.add_argument("--manifest")
    s.add_argument("--id")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_tokenize)

    s = sub.add_parser("detokenize", help="decode a token file into an OBJ mesh")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--tokens", required=True)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--grid", type=int, default=64)
    s.add_argument("--coarse", type=int, default=8)
    s.add_argument("--dense", action="store_true", help="evaluate every grid vertex")
    s.add_argument("--stats", action="store_true", help="include evaluation counts in the report")
    s.add_argument("--keep-ratio", type=float, default=0.1, help="floater removal ratio, 0 disables")
    s.add_argument("--decimate", type=int, help="target face count")
    s.set_defaults(func=cmd_detokenize)

    s = sub.add_parser("eval", help="V-IoU / S-IoU against manifest shapes")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt")
    s.add_argument("--pred", help="manifest of predicted shapes, matched by id")
    s.add_argument("--ids", nargs="*")
    s.add_argument("--path", choices=[QUANTIZE, SHORTCUT], default=QUANTIZE)
    s.add_argument("--n", type=int, default=100_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("generate", help="sample shape tokens from the generator")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--class", dest="label", type=int, help="class label; omit or -1 for unconditional")
    s.add_argument("--bbox", type=float, nargs=3, metavar=("X", "Y", "Z"))
    s.add_argument("--scale", type=float, default=1.0, help="guidance scale s")
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--seed", required=True, type=int)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--mesh", type=Path, help="also decode to this OBJ")
    s.add_argument("--grid", type=int, default=64)
    s.add_argument("--coarse", type=int, default=8)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("scene-validate", help="layout warnings for a scene file")
    s.add_argument("--scene", required=True)
    s.add_argument("--bounds", type=float, nargs=6, metavar="V", help="xmin ymin zmin xmax ymax zmax")
    s.add_argument("--out", type=Path)
    s.set_defaults(func=cmd_scene_validate)

    s = sub.add_parser("scene-instantiate", help="place one mesh per scene object")
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--source", choices=["procedural", "tokens"], default="procedural")
    s.add_argument("--ckpt")
    s.add_argument("--tokens-dir")
    s.add_argument("--grid", type=int, default=64)
    s.add_argument("--coarse", type=int, default=8)
    s.set_defaults(func=cmd_scene_instantiate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        report = args.func(args)
    except Exception as e:  # one-line diagnostic for any failure
        msg = " ".join(str(e).split()) or type(e).__name__
        sys.stderr.write(f"shapetok {args.command}: {type(e).__name__}: {msg}\n")
        return 1
    text = json.dumps(report, indent=2, default=str)
    if args.report:
        Path(args.report).write_text(text + "\n")
    else:
        print(text)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
