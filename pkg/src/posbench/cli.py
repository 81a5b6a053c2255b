"""Command-line entry point: ingest/synthesize corpora, train the toy
encoder, run probes, evaluate runs, and render report figures, all driven by
a TOML config with flag overrides.

Exit codes: 0 success, 1 validation/config error, 2 runtime or transport
error. Artifacts are deterministic: identical config + seed reproduces
byte-identical files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover - py310 path
    import tomli as tomllib

from . import analysis, corpus as corpus_mod, figures, train as train_mod
from .embed import (
    NativeBackend,
    RemoteBackend,
    embed_batch,
    init_params,
    load_params,
    save_params,
)
from .errors import (
    ConfigError,
    PosbenchError,
    TransportError,
    ValidationError,
)
from .mocks import make_filler
from .retrieval import (
    DEFAULT_K,
    Metrics,
    build_index,
    compute_metrics,
    read_run,
    search_all,
    write_run,
)

SCHEMA_VERSION = 1
WORKSPACE_ENV = "POSBENCH_WORKSPACE"


@dataclass
class RunConfig:
    path: Path | None
    workspace: Path
    seed: int
    raw: dict

    def section(self, name: str) -> dict:
        value = self.raw.get(name, {})
        if not isinstance(value, dict):
            raise ConfigError(f"config section [{name}] must be a table")
        return value

    def get(self, section: str, key: str, default=None, required: bool = False):
        table = self.section(section)
        if key in table:
            return table[key]
        if required:
            raise ConfigError(f"config is missing required key {section}.{key}")
        return default


def load_config(args) -> RunConfig:
    raw: dict = {}
    path = None
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        with open(path, "rb") as fh:
            try:
                raw = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: invalid TOML ({exc})") from exc

    workspace = (
        args.workspace or raw.get("workspace") or os.environ.get(WORKSPACE_ENV)
    )
    if not workspace:
        raise ConfigError(
            "no workspace: pass --workspace, set `workspace` in the config, "
            f"or export {WORKSPACE_ENV}"
        )
    seed = args.seed if args.seed is not None else raw.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    return RunConfig(path=path, workspace=Path(workspace), seed=seed, raw=raw)


# ---------------------------------------------------------------------------
# workspace plumbing


def _fingerprint(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(obj: dict, path: Path) -> None:
    path.write_text(
        json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


def _read_manifest(workspace: Path) -> dict:
    path = workspace / "manifest.json"
    if not path.exists():
        raise ValidationError(
            f"{workspace} has no manifest.json; run `posbench ingest` or "
            f"`posbench synth` first"
        )
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ValidationError(
            f"workspace schema {manifest.get('schema_version')!r} != {SCHEMA_VERSION}"
        )
    return manifest


def _load_workspace_corpus(workspace: Path) -> corpus_mod.Corpus:
    docs = corpus_mod.load_corpus(workspace / "corpus.jsonl")
    queries = corpus_mod.load_queries(workspace / "queries.jsonl")
    return corpus_mod.Corpus(documents=docs, queries=queries)


def _write_corpus_files(
    workspace: Path,
    docs,
    queries,
    qrels: dict[str, set[str]],
    alignments,
    manifest_extra: dict,
) -> dict:
    workspace.mkdir(parents=True, exist_ok=True)
    corpus_mod.write_corpus_jsonl(docs, workspace / "corpus.jsonl")
    corpus_mod.write_queries_jsonl(queries, workspace / "queries.jsonl")
    corpus_mod.write_qrels_tsv(qrels, workspace / "qrels.tsv")
    corpus_mod.write_alignments_jsonl(alignments, workspace / "alignments.jsonl")
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "corpus_fingerprint": _fingerprint(workspace / "corpus.jsonl"),
        "counts": {
            "documents": len(docs),
            "queries": len(queries),
            "judged_queries": len(qrels),
            "alignments": len(alignments),
        },
        **manifest_extra,
    }
    _write_json(manifest, workspace / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(config: RunConfig, args) -> int:
    fmt = config.get("corpus", "format", "jsonl")
    docs_path = config.get("corpus", "docs", required=True)
    queries_path = config.get("corpus", "queries", required=True)
    qrels_path = config.get("corpus", "qrels", required=True)
    passages_path = config.get("corpus", "passages")

    docs = corpus_mod.load_corpus(docs_path, format=fmt)
    queries = corpus_mod.load_queries(queries_path, format=fmt)
    qrels = corpus_mod.load_qrels(qrels_path)
    bundle = corpus_mod.Corpus(documents=docs, queries=queries)

    alignments: list[corpus_mod.PassageAlignment] = []
    unaligned = 0
    if passages_path:
        passages = corpus_mod.load_passages(passages_path)
        alignments, unaligned = corpus_mod.align_passages(passages, qrels, bundle)

    manifest = _write_corpus_files(
        config.workspace,
        docs,
        queries,
        qrels,
        alignments,
        {"source": "ingest", "unaligned": unaligned, "seed": config.seed},
    )
    counts = manifest["counts"]
    print(
        f"ingested {counts['documents']} docs, {counts['queries']} queries, "
        f"{counts['alignments']} alignments ({unaligned} unaligned) "
        f"-> {config.workspace}"
    )
    return 0


def _position_law(config: RunConfig) -> corpus_mod.PositionLaw:
    law = config.get("synth", "position_law", required=True)
    if law == "uniform":
        return corpus_mod.Uniform()
    if law == "fixed":
        return corpus_mod.Fixed(float(config.get("synth", "fraction", required=True)))
    if law == "front_skewed":
        return corpus_mod.FrontSkewed(
            float(config.get("synth", "median_fraction", required=True))
        )
    raise ConfigError(f"unknown synth.position_law {law!r}")


def _int_pair(value, key: str) -> tuple[int, int]:
    if (
        not isinstance(value, (list, tuple))
        or len(value) != 2
        or not all(isinstance(v, int) for v in value)
    ):
        raise ConfigError(f"{key} must be a [lo, hi] integer pair, got {value!r}")
    return (value[0], value[1])


def cmd_synth(config: RunConfig, args) -> int:
    spec = corpus_mod.SynthSpec(
        num_docs=int(config.get("synth", "num_docs", required=True)),
        doc_char_len=_int_pair(
            config.get("synth", "doc_char_len", required=True), "synth.doc_char_len"
        ),
        passage_char_len=_int_pair(
            config.get("synth", "passage_char_len", required=True),
            "synth.passage_char_len",
        ),
        position_law=_position_law(config),
        vocabulary_size=int(config.get("synth", "vocabulary_size", required=True)),
        seed=config.seed,
    )
    docs, queries, alignments = corpus_mod.synth_corpus(spec)
    qrels = corpus_mod.qrels_from_alignments(alignments)
    _write_corpus_files(
        config.workspace,
        docs,
        queries,
        qrels,
        alignments,
        {"source": "synth", "seed": config.seed},
    )
    stats = corpus_mod.passage_position_stats(alignments, docs)
    _write_json(
        {
            "p5": stats.p5,
            "p25": stats.p25,
            "p50": stats.p50,
            "p75": stats.p75,
            "p95": stats.p95,
            "mean": stats.mean,
        },
        config.workspace / "stats.json",
    )
    print(
        f"synthesized {len(docs)} docs -> {config.workspace} "
        f"(passage start p50={stats.p50:g} chars, mean={stats.mean:.1f})"
    )
    return 0


def _train_config(config: RunConfig) -> train_mod.TrainConfig:
    t = config.section("train")
    kwargs = {}
    for field_name in (
        "batch_size",
        "hard_negatives_per_query",
        "epochs",
        "learning_rate",
        "lr_schedule",
        "chunk_size",
        "refresh_every_epochs",
        "in_batch_negatives",
        "temperature",
        "mining_depth",
        "max_input_tokens",
    ):
        if field_name in t:
            kwargs[field_name] = t[field_name]
    unknown = set(t) - set(kwargs) - {"init_checkpoint"}
    if unknown:
        raise ConfigError(f"unknown [train] keys: {sorted(unknown)}")
    return train_mod.TrainConfig(seed=config.seed, **kwargs)


def _init_encoder(config: RunConfig, args):
    init_checkpoint = getattr(args, "init_checkpoint", None) or config.get(
        "train", "init_checkpoint"
    )
    if init_checkpoint:
        path = Path(init_checkpoint)
        if not path.is_absolute():
            path = config.workspace / path
        return load_params(path)
    enc = config.section("encoder")
    return init_params(
        dim=int(enc.get("dim", 32)),
        vocab_hash_buckets=int(enc.get("vocab_hash_buckets", 4096)),
        seed=int(enc.get("init_seed", 0)),
        pooling=enc.get("pooling", "mean"),
        decay=float(enc.get("decay", 0.0)),
        normalize=bool(enc.get("normalize", False)),
    )


def cmd_train(config: RunConfig, args) -> int:
    workspace = config.workspace
    manifest = _read_manifest(workspace)
    bundle = _load_workspace_corpus(workspace)
    qrels = corpus_mod.load_qrels(workspace / "qrels.tsv")
    tconf = _train_config(config)
    params = _init_encoder(config, args)

    result = train_mod.train_contrastive(
        params, bundle, tconf, mode=args.mode, qrels=qrels
    )

    train_mod.write_loss_log(result, workspace / f"loss_{args.mode}.csv")
    for epoch, pool in result.negative_pools:
        train_mod.write_negative_pool(
            pool, workspace / f"negatives_epoch{epoch}.jsonl"
        )
    for epoch, snapshot in result.checkpoints:
        save_params(snapshot, workspace / f"checkpoint_{args.mode}_epoch{epoch}.bin")
    final_path = workspace / "checkpoint.bin"
    save_params(result.params, final_path)
    save_params(result.params, workspace / f"checkpoint_{args.mode}.bin")
    _write_json(
        {
            "mode": args.mode,
            "epochs": tconf.epochs,
            "seed": tconf.seed,
            "corpus_fingerprint": manifest["corpus_fingerprint"],
            "final_loss": result.epoch_losses[-1],
        },
        workspace / "checkpoint.json",
    )
    print(
        f"trained ({args.mode}, {tconf.epochs} epochs, "
        f"{len(result.loss_log)} steps), final epoch loss "
        f"{result.epoch_losses[-1]:.6f} -> {final_path}"
    )
    return 0


def _build_backend(config: RunConfig, args):
    url = getattr(args, "backend_url", None) or config.get("backend", "endpoint_url")
    max_tokens = int(config.get("backend", "max_input_tokens", 2048))
    if url:
        return RemoteBackend(
            url,
            pooling_name=config.get("backend", "pooling", "mean"),
            max_input_tokens=max_tokens,
        )
    params_name = config.get("backend", "params", "checkpoint.bin")
    params_path = Path(params_name)
    if not params_path.is_absolute():
        params_path = config.workspace / params_path
    params = load_params(params_path)
    sidecar = config.workspace / "checkpoint.json"
    if params_path.name == "checkpoint.bin" and sidecar.exists():
        trained_on = json.loads(sidecar.read_text(encoding="utf-8")).get(
            "corpus_fingerprint"
        )
        current = _read_manifest(config.workspace)["corpus_fingerprint"]
        if trained_on != current:
            raise ValidationError(
                "checkpoint.bin was trained on a different corpus than the "
                "workspace currently holds; re-train or point backend.params "
                "elsewhere"
            )
    return NativeBackend(params, max_input_tokens=max_tokens)


def _emit_both(report, stem: Path, fmt: str) -> list[Path]:
    written = []
    if fmt in ("json", "both"):
        analysis.emit_report(report, stem.with_suffix(".json"), format="json")
        written.append(stem.with_suffix(".json"))
    if fmt in ("csv", "both"):
        analysis.emit_report(report, stem.with_suffix(".csv"), format="csv")
        written.append(stem.with_suffix(".csv"))
    return written


def cmd_probe(config: RunConfig, args) -> int:
    workspace = config.workspace
    _read_manifest(workspace)
    bundle = _load_workspace_corpus(workspace)
    fmt = args.format or "both"
    k = args.k or int(config.get("probe", "k", DEFAULT_K))

    if args.probe == "insertion":
        alignments = corpus_mod.load_alignments(workspace / "alignments.jsonl")
        qrels = corpus_mod.load_qrels(workspace / "qrels.tsv")
        backend = _build_backend(config, args)
        report = analysis.run_insertion_probe(
            backend, bundle, alignments, qrels=qrels, k=k
        )
        written = _emit_both(report, workspace / "position_report", fmt)
        worst = min(report.deltas.values(), key=lambda d: d.mrr)
        print(
            f"insertion probe: baseline MRR@{k} {report.baseline.mrr_at_k:.4f}, "
            f"worst position delta {worst.mrr:+.4f} -> {written[0].parent}"
        )
    elif args.probe == "segment":
        backend = _build_backend(config, args)
        report = analysis.run_segment_probe(
            backend,
            bundle.documents,
            k_segments=int(config.get("probe", "k_segments", 10)),
            sample_size=int(config.get("probe", "sample_size", 24000)),
        )
        written = _emit_both(report, workspace / "segment_report", fmt)
        print(
            f"segment probe ({report.pooling}): segment-1 mean "
            f"{report.segments[0].mean:.4f}, segment-{len(report.segments)} mean "
            f"{report.segments[-1].mean:.4f} -> {written[0].parent}"
        )
    elif args.probe == "span":
        url = getattr(args, "backend_url", None) or config.get(
            "backend", "endpoint_url"
        )
        mock = config.get("probe", "mock")
        if url:
            filler = RemoteBackend(
                url, max_input_tokens=int(config.get("backend", "max_input_tokens", 2048))
            )
        elif mock:
            filler = make_filler(mock, bundle.documents)
        else:
            raise TransportError(
                "span probe needs a fill_spans backend: pass --backend-url "
                "or set probe.mock in the config"
            )
        report = analysis.run_span_probe(
            filler,
            bundle.documents,
            window_len=int(config.get("probe", "window_len", 256)),
            instances_per_window=int(config.get("probe", "instances_per_window", 16)),
            span_len=int(config.get("probe", "span_len", 3)),
            seed=config.seed,
            max_len=int(config.get("backend", "max_input_tokens", 2048)),
        )
        written = _emit_both(report, workspace / "span_report", fmt)
        summary = ", ".join(
            f"({w.window_start},{w.window_end})={w.mean_acc:.2f}" for w in report.windows
        )
        print(f"span probe: {summary} -> {written[0].parent}")
    else:  # pragma: no cover - argparse restricts choices
        raise ConfigError(f"unknown probe {args.probe!r}")
    return 0


def cmd_eval(config: RunConfig, args) -> int:
    workspace = config.workspace
    qrels = corpus_mod.load_qrels(workspace / "qrels.tsv")
    k = args.k or int(config.get("probe", "k", DEFAULT_K))
    if args.run_file:
        run = read_run(args.run_file)
    else:
        bundle = _load_workspace_corpus(workspace)
        backend = _build_backend(config, args)
        index = build_index(
            [d.id for d in bundle.documents],
            embed_batch(backend, [d.text for d in bundle.documents]),
        )
        judged = [q for q in bundle.queries if q.id in qrels]
        if not judged:
            raise ValidationError("no judged queries to evaluate")
        q_vecs = embed_batch(backend, [q.text for q in judged])
        run = search_all(index, [q.id for q in judged], q_vecs, k=k)
        write_run(run, workspace / "run.trec")
    metrics = compute_metrics(run, qrels, k=k)
    _write_json(
        {"mrr_at_k": metrics.mrr_at_k, "recall_at_k": metrics.recall_at_k, "k": k},
        workspace / "metrics.json",
    )
    print(f"mrr_at_{k}={metrics.mrr_at_k:.6f} recall_at_{k}={metrics.recall_at_k:.6f}")
    return 0


def cmd_report(config: RunConfig, args) -> int:
    workspace = config.workspace
    fig_dir = workspace / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    rendered: list[Path] = []

    pos_path = workspace / "position_report.json"
    if pos_path.exists():
        report = analysis.read_position_report(pos_path)
        if not (workspace / "position_report.csv").exists():
            analysis.emit_report(report, workspace / "position_report.csv", format="csv")
        rendered.append(
            figures.render_position_figure(report, fig_dir / "position_deltas.png")
        )
    seg_path = workspace / "segment_report.json"
    if seg_path.exists():
        report = analysis.read_segment_report(seg_path)
        if not (workspace / "segment_report.csv").exists():
            analysis.emit_report(report, workspace / "segment_report.csv", format="csv")
        rendered.append(
            figures.render_segment_figure(report, fig_dir / "segment_similarity.png")
        )
    span_path = workspace / "span_report.json"
    if span_path.exists():
        report = analysis.read_span_report(span_path)
        if not (workspace / "span_report.csv").exists():
            analysis.emit_report(report, workspace / "span_report.csv", format="csv")
        rendered.append(
            figures.render_span_figure(report, fig_dir / "span_accuracy.png")
        )
    align_path = workspace / "alignments.jsonl"
    if align_path.exists():
        alignments = corpus_mod.load_alignments(align_path)
        if alignments:
            rendered.append(
                figures.render_start_histogram(
                    [a.char_start for a in alignments], fig_dir / "passage_starts.png"
                )
            )
    if not rendered:
        raise ValidationError(
            f"nothing to report: no report files or alignments in {workspace}"
        )
    for path in rendered:
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--workspace", help="workspace directory (overrides config/env)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--backend-url", dest="backend_url", help="remote backend endpoint")
    p.add_argument("--k", type=int, default=None, help="metric cutoff override")
    p.add_argument(
        "--format",
        choices=("json", "csv", "both"),
        default=None,
        help="report emission format",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="posbench",
        description="Positional-bias diagnostics for text embedding models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load, validate, and align a corpus")
    _add_common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the toy encoder")
    _add_common(p)
    p.add_argument(
        "--mode",
        choices=(train_mod.MODE_CROP_PRETRAIN, train_mod.MODE_SUPERVISED_FINETUNE),
        required=True,
    )
    p.add_argument(
        "--init-checkpoint",
        dest="init_checkpoint",
        help="start from this checkpoint instead of a fresh init",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("probe", help="run a position probe")
    _add_common(p)
    p.add_argument("--probe", choices=("insertion", "segment", "span"), required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("eval", help="compute MRR/recall for a run")
    _add_common(p)
    p.add_argument("--run-file", dest="run_file", help="TREC run file to score")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render figures + delimited tables")
    _add_common(p)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args)
        return args.func(config, args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except PosbenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())
