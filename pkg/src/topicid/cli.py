"""Command-line entry point: ``topicid <command> ...``.

Exit codes: 0 success, 2 argument/config error, 3 data-provenance violation,
4 missing artifact, 1 anything else.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import evaluation as ev
from . import systems as S
from .config import MULTI_STAGE, STAGES, SYSTEM_NAMES, ConfigError, apply_overrides, default_config, load_config
from .corpus import LabelError, ManifestError, SynthSpec, load_manifest, summarize, synthesize_corpus
from .numcore import CheckpointError

log = logging.getLogger("topicid")

EXIT_OK, EXIT_OTHER, EXIT_ARGS, EXIT_PROVENANCE, EXIT_MISSING = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _prepare_out(path: Path, force: bool, is_file: bool = False):
    if path.exists() and (is_file or any(path.iterdir())):
        if not force:
            raise CliError(EXIT_ARGS, f"{path} already exists; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    if is_file:
        path.parent.mkdir(parents=True, exist_ok=True)
    else:
        path.mkdir(parents=True, exist_ok=True)


def _load_data(path: str, label_map=None, max_duration_s: float = 50.0):
    p = Path(path)
    if not p.exists():
        raise CliError(EXIT_ARGS, f"manifest not found: {p}")
    try:
        return load_manifest(p, label_map, max_duration_s)
    except (ManifestError, LabelError) as exc:
        raise CliError(EXIT_ARGS, f"{p}: {exc}") from None


def _load_run(path: str) -> S.TrainedSystem:
    p = Path(path)
    if p.is_file():
        p = p.parent
    try:
        return S.load_system(p)
    except (FileNotFoundError, CheckpointError) as exc:
        raise CliError(EXIT_MISSING, f"cannot load run {p}: {exc}") from None


def _parse_sets(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise CliError(EXIT_ARGS, f"--set expects key=value, got {item!r}")
        out[key.strip()] = value
    return out


# -- commands -----------------------------------------------------------------------
def cmd_synth_data(args) -> int:
    if args.spec:
        spec_path = Path(args.spec)
        if not spec_path.exists():
            raise CliError(EXIT_ARGS, f"spec file not found: {spec_path}")
        try:
            spec = SynthSpec.from_file(spec_path)
        except ValueError as exc:
            raise CliError(EXIT_ARGS, str(exc)) from None
    else:
        spec = SynthSpec()
    out = Path(args.out)
    _prepare_out(out, args.force)
    manifest = synthesize_corpus(spec, out, args.seed)
    print(summarize(load_manifest(manifest)))
    print(f"manifest: {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    stage = args.stage or ("pretrain" if args.system in MULTI_STAGE else "single")
    if args.system not in MULTI_STAGE and stage != "single":
        raise CliError(EXIT_ARGS, f"{args.system} has no {stage} stage")
    if stage == "finetune" and not args.init:
        raise CliError(EXIT_ARGS, f"{args.system} --stage finetune requires --init")
    cfg = default_config(args.system, stage, args.seed)
    if args.config:
        cfg = load_config(args.config, base=cfg)
    overrides = {"system.name": args.system, "system.stage": stage, "system.seed": str(args.seed)}
    cfg = apply_overrides(cfg, {**_parse_sets(args.set or []), **overrides})

    init = _load_run(args.init) if args.init else None
    asr = _load_run(args.asr_run) if args.asr_run else None
    label_map = init.label_map if init is not None else None
    corpus = _load_data(args.data, label_map, cfg.data.max_duration_s)
    out = Path(args.out)
    _prepare_out(out, args.force)
    system = S.train_system(cfg, corpus, init=init, asr_system=asr, run_dir=out)

    if system.history:
        from .plotting import plot_history

        plot_history(system.history, out / "training_curves.png", f"{cfg.name} ({cfg.stage})")
    final = {k: v for k, v in system.history[-1].items() if k.startswith("dev_")} if system.history else {}
    if system.selected_epoch is not None:
        print(f"selected epoch (lowest dev WER): {system.selected_epoch}")
    print(f"{cfg.name} {cfg.stage}: " + "  ".join(f"{k}={v:.4f}" for k, v in final.items()))
    print(f"run directory: {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    system = _load_run(args.run)
    corpus = _load_data(args.data, system.label_map).split(args.split)
    if len(corpus) == 0:
        raise CliError(EXIT_ARGS, f"split {args.split!r} is empty in {args.data}")
    out = Path(args.out) if args.out else Path(args.run) / f"eval-{args.split}"
    _prepare_out(out, args.force)
    preds = S.predict(system, corpus, split=args.split)
    truth = dict(zip(corpus.ids(), corpus.labels().tolist()))
    report = ev.evaluate(preds, truth, system.label_map.canonical_order)
    ev.write_report(out / "report.txt", [(system.name, args.split, report)])
    with open(out / "predictions.tsv", "w") as fh:
        fh.write("utterance_id\ttopic\tpredicted\n")
        for uid, k in preds.entries.items():
            fh.write(f"{uid}\t{system.label_map.canonical_order[truth[uid]]}\t{system.label_map.canonical_order[k]}\n")
    if preds.hypotheses:
        with open(out / "transcripts.tsv", "w") as fh:
            fh.write("utterance_id\ttranscript\n")
            for uid, text in preds.hypotheses.items():
                fh.write(f"{uid}\t{text}\n")
    from .plotting import plot_confusion

    plot_confusion(report, out / "confusion.png", f"{system.name} on {args.split}")
    print(ev.human_readable(system.name, args.split, report))
    return EXIT_OK


def _run_names(paths: list[str]) -> list[str]:
    names = [Path(p).resolve().name for p in paths]
    return [f"{n}#{i}" if names.count(n) > 1 else n for i, n in enumerate(names)]


def cmd_agree(args) -> int:
    runs = [_load_run(p) for p in args.runs]
    corpus = _load_data(args.data, runs[0].label_map).split(args.split)
    names = _run_names(args.runs)
    sets = [S.predict(r, corpus, split=args.split) for r in runs]
    for name, ps in zip(names, sets):
        ps.system_name = name
    matrix = ev.agreement_matrix(sets)
    out = Path(args.out)
    _prepare_out(out, args.force)
    ev.write_agreement(out / "agreement.tsv", names, matrix)
    from .plotting import plot_agreement

    plot_agreement(names, matrix, out / "agreement.png")
    print((out / "agreement.tsv").read_text(), end="")
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    runs = [_load_run(p) for p in args.runs]
    corpus = _load_data(args.data, runs[0].label_map).split(args.split)
    names = _run_names(args.runs)
    out = Path(args.out)
    _prepare_out(out, args.force, is_file=True)
    rows = []
    topic_of = {r.id: r.topic for r in corpus}
    for name, run in zip(names, runs):
        ids, mat = S.embed(run, corpus)
        rows += [ev.EmbeddingRow(name, uid, topic_of[uid], vec) for uid, vec in zip(ids, mat)]
    ev.export_embeddings(rows, out, with_pca=args.pca)
    if args.pca:
        from .plotting import plot_embeddings

        panels = {}
        for name in names:
            mine = [r for r in rows if r.system == name]
            panels[name] = (ev.pca_2d(np.stack([r.vector for r in mine])), [r.topic for r in mine])
        plot_embeddings(panels, out.with_suffix(".png"))
    print(f"wrote {len(rows)} rows to {out}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="topicid", description="Spoken topic identification toolkit")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="write a synthetic corpus")
    s.add_argument("--spec", help="INI corpus spec (default: built-in benchmark spec)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth_data)

    t = sub.add_parser("train", help="train one system")
    t.add_argument("--system", required=True, choices=SYSTEM_NAMES)
    t.add_argument("--config", help="INI config file")
    t.add_argument("--data", required=True, help="manifest.jsonl")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--init", help="run directory (or checkpoint) of the pretrained stage")
    t.add_argument("--stage", choices=STAGES[1:])
    t.add_argument("--asr-run", help="trained asr_standalone run for text_pipeline / text_semi_sup")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, e.g. optimizer.lr=0.001")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--threads", type=int, default=1)
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a run on one split")
    e.add_argument("--run", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("dev", "test"), default="dev")
    e.add_argument("--out", help="output directory (default: RUN/eval-SPLIT)")
    e.add_argument("--threads", type=int, default=1)
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("agree", help="pairwise model agreement")
    a.add_argument("--runs", nargs="+", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--split", choices=("dev", "test"), default="test")
    a.add_argument("--out", required=True)
    a.add_argument("--threads", type=int, default=1)
    a.add_argument("--force", action="store_true")
    a.set_defaults(func=cmd_agree)

    x = sub.add_parser("export-embeddings", help="dump utterance embeddings")
    x.add_argument("--runs", nargs="+", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--split", choices=("train", "dev", "test"), default="test")
    x.add_argument("--out", required=True, help="output TSV file")
    x.add_argument("--pca", action="store_true", help="append 2-D principal components and plot them")
    x.add_argument("--threads", type=int, default=1)
    x.add_argument("--force", action="store_true")
    x.set_defaults(func=cmd_export_embeddings)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_ARGS
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        with threadpool_limits(limits=max(1, getattr(args, "threads", 1))):
            return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except S.DataProvenanceError as exc:
        print(f"error: data provenance rule violated: {exc}", file=sys.stderr)
        return EXIT_PROVENANCE
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except (FileNotFoundError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
