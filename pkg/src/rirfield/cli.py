"""
Command-line entry point.

Every subcommand writes its outputs under ``--out`` together with
``run.json``, the resolved configuration and seed. The seed comes from
``--seed`` if given, else ``AFK_SEED``, else the config file, else 0.

Exit codes: 0 success, 1 pipeline error, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .errors import IoError, MissingGeometry, RirFieldError
from .geometry import BoundingBox, bounding_box, box_mesh, load_obj
from .nafield.checkpoint import load_checkpoint, save_adapter, save_checkpoint
from .retrieval import (
    build_index,
    load_index,
    rank_rooms,
    retrieve_geometry,
    save_index,
    select_pretraining_rooms,
    select_random_rooms,
    write_ranking_csv,
)
from .rir import (
    BandSpec,
    broadband_rt60,
    drr,
    metric_errors,
    multiband_rt60,
    read_wav,
    write_metric_report,
    write_wav,
)
from .simulator import generate_corpus, read_jsonl, write_jsonl
from .training import (
    TABLE1_CONDITIONS,
    Corpus,
    Enrollment,
    Example,
    RoomGeometry,
    evaluate_conditions,
    finetune,
    geometry_from_row,
    infer,
    pretrain,
)

logger = logging.getLogger("rirfield")


# --- helpers ----------------------------------------------------------------


def _resolve(args) -> dict:
    cfg = cfgmod.load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"cannot create output directory {out}: {e}") from e
    return out


def _record_run(out: Path, args, cfg: dict) -> None:
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config") and v is not None}
    run = {"command": args.command, "seed": cfg["seed"], "config": cfg, "flags": flags}
    (out / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True, default=str) + "\n")


def _plan(**items) -> int:
    for k, v in items.items():
        print(f"{k}: {v}")
    return 0


def _load_manifest(path: str | Path) -> tuple[list[dict], Path]:
    path = Path(path)
    return read_jsonl(path), path.parent


def _wav(row: dict, root: Path):
    p = Path(row["wav_path"])
    return read_wav(p if p.is_absolute() else root / p)


def _examples(rows: list[dict], root: Path) -> list[Example]:
    return [
        Example(r["rir_id"], r["room_id"], np.asarray(r["src"], float), np.asarray(r["rcv"], float), _wav(r, root))
        for r in rows
    ]


def _geometry(args, default_room: str | None) -> RoomGeometry:
    """Geometry from ``--mesh``, ``--bbox``, or a ``--rooms`` table row."""
    if getattr(args, "mesh", None):
        mesh = load_obj(args.mesh)
        return RoomGeometry(Path(args.mesh).stem, bounding_box(mesh), mesh)
    if getattr(args, "bbox", None):
        v = [float(x) for x in args.bbox.split(",")]
        if len(v) != 6:
            raise MissingGeometry("--bbox needs six comma-separated numbers")
        box = BoundingBox(np.array(v[:3]), np.array(v[3:]))
        return RoomGeometry("bbox", box, box_mesh(box))
    if getattr(args, "rooms", None):
        room_id = args.room_id or default_room
        rows = {r["room_id"]: r for r in read_jsonl(args.rooms)}
        if room_id not in rows:
            raise MissingGeometry(f"room {room_id} is not in {args.rooms}")
        return geometry_from_row(rows[room_id], Path(args.rooms).parent)
    raise MissingGeometry("no geometry given; pass --mesh, --bbox or --rooms")


def _add_geometry_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("geometry")
    g.add_argument("--mesh", help="room mesh (.obj)")
    g.add_argument("--bbox", help="x0,y0,z0,x1,y1,z1 bounding box in meters")
    g.add_argument("--rooms", help="room table (rooms.jsonl)")
    g.add_argument("--room-id", help="row of --rooms to use (default: the enrollment room)")


# --- subcommands ------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = _resolve(args)
    for key in ("rooms", "pairs_per_room"):
        if getattr(args, key) is not None:
            cfg["corpus"][key] = getattr(args, key)
    recipe = cfgmod.corpus_recipe(cfg)
    if args.dry_run:
        return _plan(rooms=recipe.rooms, pairs_per_room=recipe.pairs_per_room, seed=cfg["seed"], out=args.out)
    out = _out_dir(args)
    _record_run(out, args, cfg)
    rooms, records = generate_corpus(recipe, int(cfg["seed"]), out)
    print(f"wrote {len(records)} RIRs from {len(rooms)} rooms to {out}")
    return 0


def cmd_analyze(args) -> int:
    bands = BandSpec.parse(args.bands)
    if args.dry_run:
        return _plan(rir=args.rir, bands=",".join(f"{c:g}" for c in bands.centers))
    ir = read_wav(args.rir)
    fp = multiband_rt60(ir, bands)
    print(f"{'band_hz':>8}  {'rt60_s':>8}")
    for c, t in zip(bands.centers, fp.rt60_s):
        print(f"{c:8g}  {t:8.4f}")
    print(f"{'broad':>8}  {broadband_rt60(ir):8.4f}")
    print(f"drr_db: {drr(ir):.3f}")
    if args.out is not None:
        out = _out_dir(args)
        cfg = _resolve(args)
        _record_run(out, args, cfg)
        with open(out / "analysis.csv", "w") as fh:
            fh.write("band_hz,rt60_s\n")
            for c, t in zip(bands.centers, fp.rt60_s):
                fh.write(f"{c:g},{t:.6f}\n")
            fh.write(f"drr_db,{drr(ir):.6f}\n")
    return 0


def cmd_build_index(args) -> int:
    cfg = _resolve(args)
    bands = BandSpec.parse(args.bands) if args.bands else cfgmod.bands(cfg)
    rows, root = _load_manifest(args.manifest)
    if args.dry_run:
        return _plan(records=len(rows), bands=len(bands), out=Path(args.out) / "index.rtix")
    index = build_index(rows, bands, root)
    out = _out_dir(args)
    _record_run(out, args, cfg)
    save_index(out / "index.rtix", index)
    print(f"indexed {len(index)} RIRs ({index.skipped} skipped) from {len(index.room_ids())} rooms")
    return 0


def cmd_retrieve(args) -> int:
    cfg = _resolve(args)
    r = cfg["retrieval"]
    m = args.M if args.M is not None else int(r["M"])
    limit = args.limit if args.limit is not None else int(r["limit"])
    random = args.random or bool(r.get("random", False))
    index = load_index(args.index)
    rows, root = _load_manifest(args.enrollment)
    if args.dry_run:
        return _plan(enrollment=len(rows), index=len(index), M=m, limit=limit, random=random, seed=cfg["seed"])
    fps = [multiband_rt60(_wav(row, root), index.bands) for row in rows]
    ranking = rank_rooms(index, fps, m)
    selected = select_pretraining_rooms(ranking, limit)
    if random:
        selected = select_random_rooms(index, len(selected), int(cfg["seed"]))
    out = _out_dir(args)
    _record_run(out, args, cfg)
    write_ranking_csv(out / "ranking.csv", ranking)
    (out / "selected_rooms.txt").write_text("".join(s + "\n" for s in selected))
    if args.rooms:
        room_id, row = retrieve_geometry(ranking, {x["room_id"]: x for x in read_jsonl(args.rooms)})
        (out / "geometry.json").write_text(json.dumps(row, sort_keys=True) + "\n")
        print(f"geometry from {room_id}")
    print(f"ranked {len(ranking)} rooms, selected {len(selected)}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _resolve(args)
    corpus = Corpus.load(args.corpus)
    if args.room_list:
        rooms = [s.strip() for s in Path(args.room_list).read_text().splitlines() if s.strip()]
    else:
        rooms = corpus.room_ids()
    fcfg = cfgmod.field_config(cfg)
    recipe, _, _ = cfgmod.recipes(cfg)
    n = sum(len(corpus.records_for(r)) for r in rooms)
    if args.dry_run:
        return _plan(rooms=" ".join(rooms), rirs=n, epochs=recipe.epochs, seed=recipe.seed)
    out = _out_dir(args)
    _record_run(out, args, cfg)
    history: list[float] = []
    params = pretrain(rooms, corpus, fcfg, recipe, history)
    save_checkpoint(out / "base.nafc", params)
    _write_history(out / "history.csv", history)
    print(f"pre-trained on {n} RIRs from {len(rooms)} rooms; final loss {history[-1]:.5f}")
    return 0


def _write_history(path: Path, history: list[float]) -> None:
    path.write_text("epoch,loss\n" + "".join(f"{i},{v:.8f}\n" for i, v in enumerate(history)))


def cmd_finetune(args) -> int:
    cfg = _resolve(args)
    rows, root = _load_manifest(args.enrollment)
    _, full, lora = cfgmod.recipes(cfg)
    recipe = lora if args.method == "lora" else full
    if args.rank is not None:
        recipe = replace(recipe, lora_rank=args.rank)
    base, fcfg = None, cfgmod.field_config(cfg)
    if args.checkpoint:
        fcfg, base, _ = load_checkpoint(args.checkpoint)
        if base is None:
            raise MissingGeometry(f"{args.checkpoint} holds no base weights") from None
    geom = _geometry(args, rows[0]["room_id"] if rows else None)
    if args.dry_run:
        return _plan(enrollment=len(rows), method=args.method, epochs=recipe.epochs, geometry=geom.room_id)
    out = _out_dir(args)
    _record_run(out, args, cfg)
    enrollment = Enrollment.build(_examples(rows, root), geom, fcfg.num_bounce_points)
    history: list[float] = []
    params, adapter = finetune(base, enrollment, recipe, fcfg, history)
    if adapter is not None:
        save_adapter(out / "adapters.nafc", fcfg, adapter)
    else:
        save_checkpoint(out / "finetuned.nafc", params)
    _write_history(out / "history.csv", history)
    print(f"fine-tuned ({args.method}) on {len(rows)} RIRs; final loss {history[-1]:.5f}")
    return 0


def cmd_generate(args) -> int:
    cfg = _resolve(args)
    fcfg, params, adapter = load_checkpoint(args.checkpoint)
    if params is None:
        raise MissingGeometry(f"{args.checkpoint} holds no base weights")
    if args.adapters:
        _, _, adapter = load_checkpoint(args.adapters)
    pairs = read_jsonl(args.pairs)
    geom = _geometry(args, pairs[0].get("room_id") if pairs else None)
    if args.dry_run:
        return _plan(pairs=len(pairs), adapters=bool(adapter), geometry=geom.room_id)
    out = _out_dir(args)
    _record_run(out, args, cfg)
    irs = infer(params, adapter, [(p["src"], p["rcv"]) for p in pairs], geom, iterations=args.iterations)
    manifest = []
    for i, (p, ir) in enumerate(zip(pairs, irs)):
        pid = str(p.get("pair_id", p.get("rir_id", f"pair{i:04d}")))
        rel = f"wavs/{pid}.wav"
        (out / "wavs").mkdir(exist_ok=True)
        write_wav(out / rel, ir)
        manifest.append({"rir_id": pid, "room_id": p.get("room_id", geom.room_id), "wav_path": rel,
                         "src": list(p["src"]), "rcv": list(p["rcv"]), "sample_rate": ir.sample_rate})
    write_jsonl(out / "manifest.jsonl", manifest)
    print(f"wrote {len(irs)} RIRs to {out / 'wavs'}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _resolve(args)
    if args.pred:
        return _evaluate_pairs(args, cfg)
    if args.target_room:
        cfg["experiment"]["target_room"] = args.target_room
    settings = cfgmod.experiment_settings(cfg)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [int(cfg["seed"])]
    target = cfg["experiment"]["target_room"]
    if args.dry_run:
        return _plan(corpus=args.corpus or "simulated", target=target, seeds=seeds, conditions=len(TABLE1_CONDITIONS),
                     limit=settings.limit, M=settings.m)
    out = _out_dir(args)
    _record_run(out, args, cfg)
    if args.corpus:
        corpus = Corpus.load(args.corpus)
    else:
        generate_corpus(cfgmod.corpus_recipe(cfg), int(cfg["seed"]), out / "corpus")
        corpus = Corpus.load(out / "corpus")
    for s in seeds:
        report = evaluate_conditions(corpus, target, TABLE1_CONDITIONS, settings, s)
        name = "report.csv" if len(seeds) == 1 else f"report_seed{s}.csv"
        report.write_csv(out / name)
        (out / name.replace("report", "rooms").replace(".csv", ".json")).write_text(
            json.dumps({"retrieved": report.retrieved_rooms, "random": report.random_rooms}, indent=2) + "\n"
        )
        sys.stdout.write(report.to_csv())
    return 0


def _evaluate_pairs(args, cfg: dict) -> int:
    if not args.ref:
        raise MissingGeometry("--pred needs --ref")
    bands = cfgmod.bands(cfg)
    pred, proot = _load_manifest(args.pred)
    ref, rroot = _load_manifest(args.ref)
    refs = {r["rir_id"]: r for r in ref}
    if args.dry_run:
        return _plan(pred=len(pred), matched=sum(p["rir_id"] in refs for p in pred))
    out = _out_dir(args)
    _record_run(out, args, cfg)
    rows = []
    for p in sorted(pred, key=lambda r: r["rir_id"]):
        r = refs.get(p["rir_id"])
        if r is None:
            logger.warning("no reference for %s", p["rir_id"])
            continue
        rows.append((r["room_id"], p["rir_id"], metric_errors(_wav(p, proot), _wav(r, rroot), bands)))
    write_metric_report(out / "metrics.csv", rows)
    errs = np.array([e.as_tuple() for _, _, e in rows]) if rows else np.zeros((1, 3))
    print(f"{len(rows)} pairs: rt60 {errs[:, 0].mean():.4f} edf {errs[:, 1].mean():.4f} dB drr {errs[:, 2].mean():.4f} dB")
    return 0


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (TOML)")
    common.add_argument("--seed", type=int, help="master seed (overrides AFK_SEED and the config)")
    common.add_argument("--dry-run", action="store_true", help="print the resolved plan and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="rirfield", description="RIR retrieval, neural field training and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, func, help, out_default="out"):
        p = sub.add_parser(name, parents=[common], help=help, description=help)
        p.add_argument("--out", default=out_default, help=f"output directory (default: {out_default})")
        p.set_defaults(func=func)
        return p

    p = add("simulate", cmd_simulate, "Simulate a synthetic shoebox corpus.")
    p.add_argument("--rooms", type=int)
    p.add_argument("--pairs-per-room", type=int)

    p = add("analyze", cmd_analyze, "Print per-band RT60 and DRR of one RIR.", out_default=None)
    p.add_argument("--rir", required=True)
    p.add_argument("--bands", default="default", help='"default" or comma-separated centers in Hz')

    p = add("build-index", cmd_build_index, "Fingerprint a manifest into an RTIX index.")
    p.add_argument("--manifest", required=True)
    p.add_argument("--bands")

    p = add("retrieve", cmd_retrieve, "Rank corpus rooms by similarity to an enrollment set.")
    p.add_argument("--enrollment", required=True, help="enrollment manifest (JSONL)")
    p.add_argument("--index", required=True)
    p.add_argument("-M", type=int, help="neighbors per enrollment RIR")
    p.add_argument("--limit", type=int, help="rooms kept for pre-training")
    p.add_argument("--random", action="store_true", help="pick as many rooms uniformly at random instead")
    p.add_argument("--rooms", help="room table; also writes geometry.json for the best room with geometry")

    p = add("pretrain", cmd_pretrain, "Pre-train a base field on corpus rooms.")
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--room-list", help="file with one room id per line (default: all rooms)")

    p = add("finetune", cmd_finetune, "Adapt a field to an enrollment set.")
    p.add_argument("--checkpoint", help="base checkpoint (omit to train from scratch)")
    p.add_argument("--enrollment", required=True)
    p.add_argument("--method", choices=("lora", "full"), default="lora")
    p.add_argument("--rank", type=int)
    _add_geometry_flags(p)

    p = add("generate", cmd_generate, "Synthesize one RIR per source/receiver pair.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--adapters")
    p.add_argument("--pairs", required=True, help="JSONL rows with pair_id, src, rcv")
    p.add_argument("--iterations", type=int, default=32, help="Griffin-Lim iterations")
    _add_geometry_flags(p)

    p = add("evaluate", cmd_evaluate, "Run the condition comparison, or score predictions against references.")
    p.add_argument("--corpus", help="corpus directory (default: simulate one under --out)")
    p.add_argument("--target-room")
    p.add_argument("--seeds", help="comma-separated master seeds")
    p.add_argument("--pred", help="predicted manifest; with --ref writes metrics.csv")
    p.add_argument("--ref", help="reference manifest")
    return parser


def _origin(exc: BaseException, default: str) -> str:
    """Innermost package module on the traceback, e.g. ``retrieval``."""
    name, tb = default, exc.__traceback__
    while tb is not None:
        mod = tb.tb_frame.f_globals.get("__name__", "")
        if mod.startswith("rirfield.") and mod != "rirfield.cli":
            name = mod.split(".", 1)[1]
        tb = tb.tb_next
    return name


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (RirFieldError, OSError, ValueError, KeyError) as e:
        print(f"error [{_origin(e, args.command)}] {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
