"""End-to-end pipeline: ingest -> filter 1 -> filter 2 -> embed -> rank -> eval.

Every stage writes its artifacts plus a manifest holding a fingerprint (sha256
over the stage's config, its input files, and its upstream fingerprints).
Reruns skip stages whose fingerprint matches ("skipped (cached)"); a mismatch
against an existing checkpoint is an error unless forced, so stale artifacts
are never silently mixed with fresh ones. Worker count is excluded from
fingerprints because results do not depend on it.

Inter-stage checkpoints are sorted sentence-id text files: diffable, and
downstream stages re-read the corpus and select by id.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

from . import corpus, embed, evaluate, filter_linear, filter_lstm, rank
from .errors import BdirankError, DataError, StaleCheckpointError, UsageError

logger = logging.getLogger(__name__)

CORPUS_FLOW = ("ingest", "filter1", "filter2", "embed", "rank")
STAGES = ("train-linear", "train-lstm") + CORPUS_FLOW + ("eval",)


@dataclass
class PipelineConfig:
    corpus: Path
    labeled: Path
    queries: Path
    output_dir: Path
    embeddings: Path | None = None
    qrels: list[Path] = field(default_factory=list)
    threshold1: float = 0.5
    threshold2: float = 0.5
    cutoff: int = 1000
    seed: int = 42
    workers: int = 1
    dim: int = embed.DEFAULT_DIM
    tag: str = "bdirank"
    rule: str = "majority"
    multi_assign: bool = False


_REQUIRED_PATHS = ("corpus", "labeled", "queries", "output_dir")
_KNOWN_PATH_KEYS = _REQUIRED_PATHS + ("embeddings", "qrels")
_KNOWN_PARAM_KEYS = (
    "threshold1", "threshold2", "cutoff", "seed", "workers",
    "dim", "tag", "rule", "multi_assign",
)


def validate_config(path: Path | str) -> PipelineConfig:
    """Parse and normalize the INI config; unknown sections or keys, missing
    required keys, and type errors are usage errors. Referenced input files
    must exist. Relative paths resolve against the config file's directory."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as e:
        raise UsageError(f"config parse error: {e}") from e

    for section in parser.sections():
        if section not in ("paths", "params"):
            raise UsageError(f"unknown config section [{section}]")
    paths = parser["paths"] if parser.has_section("paths") else {}
    params = parser["params"] if parser.has_section("params") else {}
    for key in paths:
        if key not in _KNOWN_PATH_KEYS:
            raise UsageError(f"unknown key {key!r} in [paths]")
    for key in params:
        if key not in _KNOWN_PARAM_KEYS:
            raise UsageError(f"unknown key {key!r} in [params]")
    for key in _REQUIRED_PATHS:
        if key not in paths or not paths[key].strip():
            raise UsageError(f"missing required key {key!r} in [paths]")

    base = path.parent

    def resolve(raw: str) -> Path:
        p = Path(raw.strip())
        return p if p.is_absolute() else base / p

    def get_typed(key: str, cast: Callable, default):
        if key not in params:
            return default
        raw = params[key].strip()
        try:
            if cast is bool:
                if raw.lower() in ("1", "true", "yes", "on"):
                    return True
                if raw.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(raw)
            return cast(raw)
        except ValueError:
            raise UsageError(f"config key {key!r}: cannot parse {raw!r} as {cast.__name__}") from None

    config = PipelineConfig(
        corpus=resolve(paths["corpus"]),
        labeled=resolve(paths["labeled"]),
        queries=resolve(paths["queries"]),
        output_dir=resolve(paths["output_dir"]),
        embeddings=resolve(paths["embeddings"]) if paths.get("embeddings", "").strip() else None,
        qrels=[resolve(p) for p in paths.get("qrels", "").split()],
        threshold1=get_typed("threshold1", float, 0.5),
        threshold2=get_typed("threshold2", float, 0.5),
        cutoff=get_typed("cutoff", int, 1000),
        seed=get_typed("seed", int, 42),
        workers=get_typed("workers", int, 1),
        dim=get_typed("dim", int, embed.DEFAULT_DIM),
        tag=get_typed("tag", str, "bdirank"),
        rule=get_typed("rule", str, "majority"),
        multi_assign=get_typed("multi_assign", bool, False),
    )

    if config.workers < 1:
        raise UsageError("workers must be >= 1")
    if config.cutoff < 1:
        raise UsageError("cutoff must be >= 1")
    if config.dim < 2:
        raise UsageError("dim must be >= 2")
    if not 0.0 <= config.threshold1 <= 1.0 or not 0.0 <= config.threshold2 <= 1.0:
        raise UsageError("thresholds must be in [0, 1]")
    if config.rule not in evaluate.RULES:
        raise UsageError(f"rule must be one of {evaluate.RULES}")

    for name in ("corpus", "labeled", "queries", "embeddings"):
        p = getattr(config, name)
        if p is not None and not p.exists():
            raise DataError(f"{name} file not found: {p}")
    for p in config.qrels:
        if not p.exists():
            raise DataError(f"qrels file not found: {p}")
    return config


def _digest_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fingerprint(parts: list[str]) -> str:
    return hashlib.sha256("\n".join(parts).encode("utf-8")).hexdigest()


@dataclass
class StageRecord:
    stage: str
    input_count: int
    output_count: int
    wall_time: float
    cached: bool


@dataclass
class ReductionLedger:
    rows: list[StageRecord] = field(default_factory=list)

    def validate(self) -> None:
        """Filter stages never grow; corpus-flow counts chain stage to stage."""
        by_name = {r.stage: r for r in self.rows}
        for name in ("filter1", "filter2"):
            r = by_name.get(name)
            if r and r.output_count > r.input_count:
                raise DataError(f"stage {name} grew the corpus: "
                                f"{r.input_count} -> {r.output_count}")
        flow = [by_name[n] for n in CORPUS_FLOW if n in by_name]
        for prev, cur in zip(flow, flow[1:]):
            if cur.input_count != prev.output_count:
                raise DataError(
                    f"count chain broken: {prev.stage} output {prev.output_count} "
                    f"!= {cur.stage} input {cur.input_count}"
                )

    def append_to(self, path: Path) -> None:
        new = not path.exists()
        with open(path, "a", encoding="utf-8") as fh:
            if new:
                fh.write("stage\tinput_count\toutput_count\twall_seconds\tcached\n")
            for r in self.rows:
                fh.write(f"{r.stage}\t{r.input_count}\t{r.output_count}"
                         f"\t{r.wall_time:.3f}\t{int(r.cached)}\n")


def _read_ids(path: Path) -> set[str]:
    with open(path, "r", encoding="utf-8") as fh:
        return {line.rstrip("\n") for line in fh if line.rstrip("\n")}


def _write_ids(path: Path, ids) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sid in sorted(ids):
            fh.write(sid + "\n")


def _stream_corpus(path: Path, keep: set[str] | None = None) -> Iterator[corpus.SentenceRecord]:
    with open(path, "rb") as fh:
        for rec in corpus.parse_trec_corpus(fh):
            if keep is None or rec.sentence_id in keep:
                yield rec


class PipelineRun:
    """One pipeline execution over a validated config."""

    def __init__(self, config: PipelineConfig, *, force: bool = False):
        self.config = config
        self.force = force
        self.out = config.output_dir
        self.manifest_dir = self.out / "manifests"
        self.fingerprints: dict[str, str] = {}
        self.ledger = ReductionLedger()

    # Artifact paths
    @property
    def linear_model_path(self) -> Path:
        return self.out / "linear.bdlf"

    @property
    def lstm_model_path(self) -> Path:
        return self.out / "lstm.bdls"

    def ids_path(self, stage: str) -> Path:
        return self.out / f"{stage}_ids.txt"

    @property
    def embeddings_path(self) -> Path:
        return self.config.embeddings or (self.out / "sentences.bdem")

    @property
    def run_path(self) -> Path:
        return self.out / "run.txt"

    def _execute(
        self,
        name: str,
        fp_parts: list[str],
        outputs: list[Path],
        compute: Callable[[], tuple[int, int, dict]],
    ) -> None:
        """Run one stage under the checkpoint protocol and record it."""
        fingerprint = _fingerprint([name] + fp_parts)
        self.fingerprints[name] = fingerprint
        manifest_path = self.manifest_dir / f"{name}.json"
        manifest = None
        if manifest_path.exists():
            with open(manifest_path, "r", encoding="utf-8") as fh:
                manifest = json.load(fh)
        if manifest is not None and manifest.get("fingerprint") == fingerprint:
            if all(p.exists() for p in outputs):
                self.ledger.rows.append(
                    StageRecord(name, manifest["input_count"], manifest["output_count"],
                                0.0, cached=True)
                )
                logger.info("stage %s: skipped (cached)", name)
                return
            logger.info("stage %s: checkpoint outputs missing; recomputing", name)
        elif manifest is not None and not self.force:
            raise StaleCheckpointError(
                f"stage {name}: checkpoint was built from different inputs or config"
                " (use --force to rebuild)"
            )
        started = time.perf_counter()
        try:
            input_count, output_count, extra = compute()
        except StaleCheckpointError:
            raise
        except BdirankError as e:
            e.args = (f"stage {name}: {e.args[0]}",) + e.args[1:]
            raise
        wall = time.perf_counter() - started
        record = StageRecord(name, input_count, output_count, wall, cached=False)
        self.ledger.rows.append(record)
        payload = {
            "stage": name,
            "fingerprint": fingerprint,
            "input_count": input_count,
            "output_count": output_count,
            "wall_seconds": wall,
            **extra,
        }
        with open(manifest_path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        logger.info("stage %s: %d -> %d (%.2fs)", name, input_count, output_count, wall)

    # Stage bodies -------------------------------------------------------

    def _train_linear(self) -> tuple[int, int, dict]:
        with open(self.config.labeled, "rb") as fh:
            examples, counts = corpus.parse_labeled_csv(fh)
        train, val = corpus.split_train_validation(examples, 0.1, self.config.seed)
        model, acc = filter_linear.train_linear(
            train, filter_linear.TrainConfig(seed=self.config.seed), val
        )
        with open(self.linear_model_path, "wb") as fh:
            filter_linear.save_model(model, fh)
        return counts.total, counts.total, {"validation_accuracy": acc}

    def _train_lstm(self) -> tuple[int, int, dict]:
        with open(self.config.labeled, "rb") as fh:
            examples, counts = corpus.parse_labeled_csv(fh)
        train, val = corpus.split_train_validation(examples, 0.1, self.config.seed)
        model, history = filter_lstm.lstm_train(
            train, val, filter_lstm.LstmConfig(seed=self.config.seed)
        )
        with open(self.lstm_model_path, "wb") as fh:
            filter_lstm.save_model(model, fh)
        best = max(h.validation_accuracy for h in history)
        return counts.total, counts.total, {"validation_accuracy": best}

    def _ingest(self) -> tuple[int, int, dict]:
        stats = corpus.CorpusStats()
        ids: set[str] = set()
        with open(self.config.corpus, "rb") as fh:
            for rec in corpus.parse_trec_corpus(fh, stats):
                if rec.sentence_id in ids:
                    raise DataError(f"duplicate sentence_id {rec.sentence_id!r} in corpus")
                ids.add(rec.sentence_id)
        _write_ids(self.ids_path("ingest"), ids)
        return len(ids), len(ids), {
            "dropped_empty": stats.dropped_empty,
            "user_count": stats.user_count,
        }

    def _filter1(self) -> tuple[int, int, dict]:
        with open(self.linear_model_path, "rb") as fh:
            model = filter_linear.load_model(fh)
        keep = _read_ids(self.ids_path("ingest"))
        report = filter_linear.FilterReport()
        survivors = filter_linear.filter_pass1(
            model,
            _stream_corpus(self.config.corpus, keep),
            self.config.threshold1,
            workers=self.config.workers,
            report=report,
        )
        _write_ids(self.ids_path("filter1"), (rec.sentence_id for rec in survivors))
        return report.input_count, report.output_count, {}

    def _filter2(self) -> tuple[int, int, dict]:
        with open(self.lstm_model_path, "rb") as fh:
            model = filter_lstm.load_model(fh)
        keep = _read_ids(self.ids_path("filter1"))
        report = filter_linear.FilterReport()
        survivors = filter_lstm.filter_pass2(
            model,
            _stream_corpus(self.config.corpus, keep),
            self.config.threshold2,
            workers=self.config.workers,
            report=report,
        )
        _write_ids(self.ids_path("filter2"), (rec.sentence_id for rec in survivors))
        return report.input_count, report.output_count, {}

    def _embed(self) -> tuple[int, int, dict]:
        keep = _read_ids(self.ids_path("filter2"))
        if self.config.embeddings is not None:
            with open(self.config.embeddings, "rb") as fh:
                collection = embed.load_embedding_file(fh, provider=str(self.config.embeddings))
            missing = [sid for sid in sorted(keep) if sid not in collection.vectors]
            if missing:
                raise DataError(
                    f"embedding file lacks {len(missing)} surviving sentences"
                    f" (first: {missing[0]!r})"
                )
            return len(keep), len(keep), {
                "provider": collection.provider,
                "dimension": collection.dimension,
            }
        pairs = (
            (rec.sentence_id, embed.hash_embed(rec.text, self.config.dim, self.config.seed))
            for rec in _stream_corpus(self.config.corpus, keep)
        )
        with open(self.embeddings_path, "wb") as fh:
            count = embed.write_embedding_file(fh, self.config.dim, pairs)
        return len(keep), count, {"provider": f"hash(seed={self.config.seed})",
                                  "dimension": self.config.dim}

    def _rank(self) -> tuple[int, int, dict]:
        with open(self.embeddings_path, "rb") as fh:
            collection = embed.load_embedding_file(fh, provider=str(self.embeddings_path))
        keep = _read_ids(self.ids_path("filter2"))
        if self.config.embeddings is not None:
            # The provided file may cover more than the survivors; rank only them.
            stream = ((sid, collection.vectors[sid]) for sid in sorted(keep))
        else:
            stream = iter(collection.vectors.items())
        queries = rank.load_queries(self.config.queries, collection.dimension, self.config.seed)
        pools = rank.rank_corpus(
            stream,
            queries,
            self.config.cutoff,
            workers=self.config.workers,
            multi_assign=self.config.multi_assign,
        )
        with open(self.run_path, "wb") as fh:
            lines = rank.write_run_file(pools, fh, self.config.tag)
        return len(keep), lines, {"cutoff": self.config.cutoff}

    def _eval(self) -> tuple[int, int, dict]:
        with open(self.run_path, "r", encoding="utf-8") as fh:
            rankings = evaluate.parse_run_file(fh)
        assessors = []
        for qpath in self.config.qrels:
            with open(qpath, "r", encoding="utf-8") as fh:
                assessors.append(evaluate.parse_qrels(fh))
        qrels = evaluate.aggregate(assessors, self.config.rule)
        report = evaluate.evaluate_run(rankings, qrels)
        with open(self.out / "report.tsv", "w", encoding="utf-8") as fh:
            fh.write(evaluate.format_report(report))
        with open(self.out / "report.json", "w", encoding="utf-8") as fh:
            json.dump(evaluate.report_as_dict(report), fh, indent=2)
            fh.write("\n")
        n_lines = sum(len(r) for r in rankings.values())
        return n_lines, len(report.per_symptom), {"macro_ap": report.macro.ap}

    # Fingerprint inputs ---------------------------------------------------

    def _stage_plan(self) -> list[tuple[str, Callable[[], list[str]], list[Path], Callable]]:
        cfg = self.config
        labeled_fp = lambda: [_digest_file(cfg.labeled), f"seed={cfg.seed}"]
        plan: list[tuple[str, Callable[[], list[str]], list[Path], Callable]] = [
            (
                "train-linear",
                lambda: labeled_fp() + ["epochs=20,lr=0.1,batch=32,val=0.1"],
                [self.linear_model_path],
                self._train_linear,
            ),
            (
                "train-lstm",
                lambda: labeled_fp() + ["epochs=20,lr=0.05,batch=32,maxlen=64,val=0.1"],
                [self.lstm_model_path],
                self._train_lstm,
            ),
            (
                "ingest",
                lambda: [_digest_file(cfg.corpus)],
                [self.ids_path("ingest")],
                self._ingest,
            ),
            (
                "filter1",
                lambda: [
                    self.fingerprints["ingest"],
                    self.fingerprints["train-linear"],
                    f"threshold={cfg.threshold1}",
                ],
                [self.ids_path("filter1")],
                self._filter1,
            ),
            (
                "filter2",
                lambda: [
                    self.fingerprints["filter1"],
                    self.fingerprints["train-lstm"],
                    f"threshold={cfg.threshold2}",
                ],
                [self.ids_path("filter2")],
                self._filter2,
            ),
            (
                "embed",
                lambda: [self.fingerprints["filter2"]]
                + (
                    [_digest_file(cfg.embeddings)]
                    if cfg.embeddings is not None
                    else [f"hash,dim={cfg.dim},seed={cfg.seed}"]
                ),
                [self.embeddings_path],
                self._embed,
            ),
            (
                "rank",
                lambda: [
                    self.fingerprints["embed"],
                    _digest_file(cfg.queries),
                    f"cutoff={cfg.cutoff},tag={cfg.tag},multi={cfg.multi_assign}",
                ],
                [self.run_path],
                self._rank,
            ),
        ]
        if cfg.qrels:
            plan.append(
                (
                    "eval",
                    lambda: [
                        self.fingerprints["rank"],
                        *(_digest_file(q) for q in cfg.qrels),
                        f"rule={cfg.rule}",
                    ],
                    [self.out / "report.tsv", self.out / "report.json"],
                    self._eval,
                )
            )
        return plan

    def run(self) -> ReductionLedger:
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest_dir.mkdir(exist_ok=True)
        for name, fp_parts, outputs, compute in self._stage_plan():
            self._execute(name, fp_parts(), outputs, compute)
        self.ledger.validate()
        self.ledger.append_to(self.out / "ledger.tsv")
        return self.ledger

    def status(self) -> list[tuple[str, str]]:
        """(stage, state) pairs: 'fresh', 'stale', or 'missing'."""
        states = []
        for name, fp_parts, outputs, _compute in self._stage_plan():
            fingerprint = _fingerprint([name] + fp_parts())
            self.fingerprints[name] = fingerprint
            manifest_path = self.manifest_dir / f"{name}.json"
            if not manifest_path.exists():
                states.append((name, "missing"))
                continue
            with open(manifest_path, "r", encoding="utf-8") as fh:
                manifest = json.load(fh)
            if manifest.get("fingerprint") != fingerprint:
                states.append((name, "stale"))
            elif not all(p.exists() for p in outputs):
                states.append((name, "missing"))
            else:
                states.append((name, "fresh"))
        return states


def run_pipeline(config: PipelineConfig, *, force: bool = False) -> ReductionLedger:
    return PipelineRun(config, force=force).run()
