"""File-to-file pipeline stages behind the CLI.

Every stage reads and writes JSONL/JSON/CSV only, takes an optional transport
(so tests can inject fixture endpoints), and reports per-record failures in an
``<output>.errors.jsonl`` file next to its main output.
"""

from __future__ import annotations

import contextlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Iterator

from rerankkit.acquisition import (
    ScoredPair,
    TeacherScorer,
    assemble_sample,
    generate_ce_targets,
    load_cached_scores,
    rewrite_pairs,
    sample_by_dataset,
    sample_to_record,
    scored_from_record,
    scored_to_record,
    search_web,
    validate_samples,
)
from rerankkit.balance import CellHistogram, balance, bin_pair, split_by_query
from rerankkit.config import PipelineConfig
from rerankkit.errors import RerankKitError, ValidationError
from rerankkit.judges import Judge, annotate_pairs, panel_report
from rerankkit.protocol import Label, QueryDocPair, render_prompt
from rerankkit.quality_eval import aggregate_report, evaluate_pair, per_pair_csv
from rerankkit.rank_eval import checkpoint_metrics, force_insert_positives, ndcg_at_k, read_qrels, read_run
from rerankkit.scorer import (
    LabelLogits,
    LossWeights,
    SftTarget,
    TeacherScore,
    loss_listwise_kl,
    loss_point,
    loss_rank_infonce,
    loss_sft,
    loss_total,
    relevance_score,
)
from rerankkit.tokens import get_counter
from rerankkit.transport import (
    ChatClient,
    HttpTransport,
    JsonlCache,
    RecordingTransport,
    ReplayTransport,
    Transport,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# file helpers


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise ValidationError(f"{path}:{lineno}: expected a JSON object")
            out.append(rec)
    return out


def dumps_record(rec: Any) -> str:
    return json.dumps(rec, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def write_jsonl(path, records: Iterable[dict]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(dumps_record(rec) + "\n")
            n += 1
    return n


def write_json(path, obj: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, ensure_ascii=False, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def error_path(output) -> Path:
    output = Path(output)
    return output.with_name(output.name + ".errors.jsonl")


def error_record(stage: str, pair_id: str | None, exc: BaseException) -> dict:
    rec = {"stage": stage, "pair_id": pair_id, "error_type": type(exc).__name__, "message": str(exc)}
    status = getattr(exc, "status", None)
    if status is not None:
        rec["status"] = status
    return rec


@dataclass
class StageResult:
    outputs: dict[str, Path]
    n_records: int
    errors: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.errors


def _finish(stage_output, result: StageResult) -> StageResult:
    ep = error_path(stage_output)
    if result.errors:
        write_jsonl(ep, result.errors)
        result.outputs["errors"] = ep
    elif ep.exists():
        ep.unlink()  # stale from an earlier failed run
    return result


# ---------------------------------------------------------------------------
# shared wiring


def build_transport(config: PipelineConfig) -> Transport:
    if config.transport.mode == "replay":
        return ReplayTransport.from_file(config.transport.transcripts_path)
    return HttpTransport()


@contextlib.contextmanager
def open_transport(config: PipelineConfig, transport: Transport | None) -> Iterator[Transport]:
    """Use ``transport`` if given, else build one from config; optionally save a transcript."""
    inner = transport if transport is not None else build_transport(config)
    if config.transport.record_path:
        rec = RecordingTransport(inner)
        try:
            yield rec
        finally:
            rec.save(config.transport.record_path)
    else:
        yield inner


def cache(config: PipelineConfig, name: str) -> JsonlCache:
    return JsonlCache(Path(config.cache_dir) / f"{name}.jsonl")


def _pairs_from_records(records: list[dict], stage: str, errors: list[dict]) -> list[tuple[int, QueryDocPair]]:
    out = []
    seen: set[str] = set()
    for i, rec in enumerate(records):
        try:
            pair = QueryDocPair.from_record(rec)
            if pair.pair_id in seen:
                raise ValidationError(f"duplicate pair_id {pair.pair_id!r}")
            seen.add(pair.pair_id)
            out.append((i, pair))
        except RerankKitError as exc:
            errors.append(error_record(stage, rec.get("pair_id"), exc))
    return out


def _with_token_count(pair: QueryDocPair, counter) -> QueryDocPair:
    if pair.doc_token_count is not None:
        return pair
    return replace(pair, doc_token_count=counter(pair.document))


# ---------------------------------------------------------------------------
# stages


def cmd_collect(
    out_file,
    config: PipelineConfig,
    *,
    queries_file=None,
    corpus_file=None,
    transport: Transport | None = None,
) -> StageResult:
    """Gather pairs from an open corpus, web search, and keyword rewrites of both."""
    acq = config.acquisition
    errors: list[dict] = []
    pairs: list[QueryDocPair] = []
    if corpus_file is not None:
        records = sample_by_dataset(read_jsonl(corpus_file), acq.per_dataset_cap, config.seed, acq.dataset_key)
        pairs.extend(p for _, p in _pairs_from_records(records, "collect", errors))
    with open_transport(config, transport) as tp:
        if queries_file is not None:
            if not acq.providers:
                raise ValidationError("web collection needs at least one acquisition.providers entry")
            providers = [p.build() for p in acq.providers]
            search_cache = cache(config, "search")
            for rec in read_jsonl(queries_file):
                query = rec.get("query")
                for provider in providers:
                    try:
                        pairs.extend(
                            search_web(query or "", provider, acq.top_k, tp,
                                       language=rec.get("language", "unknown"), cache=search_cache)
                        )
                    except RerankKitError as exc:
                        errors.append({**error_record("collect", None, exc), "query": query, "provider": provider.name})
        if acq.rewriter is not None and acq.rewrite_rate > 0 and pairs:
            client = ChatClient(acq.rewriter.build(), tp)
            try:
                pairs.extend(rewrite_pairs(pairs, client, acq.rewrite_rate, config.seed, cache(config, "rewrite")))
            except RerankKitError as exc:
                errors.append(error_record("collect", None, exc))
    unique: dict[str, QueryDocPair] = {}
    for p in pairs:
        unique.setdefault(p.pair_id, p)
    if not unique:
        raise ValidationError("collection produced no pairs")
    n = write_jsonl(out_file, (p.to_record() for p in unique.values()))
    by_source: dict[str, int] = {}
    for p in unique.values():
        by_source[p.source.value] = by_source.get(p.source.value, 0) + 1
    return _finish(out_file, StageResult({"pairs": Path(out_file)}, n, errors, {"by_source": by_source}))


def cmd_annotate(pairs_file, out_file, config: PipelineConfig, *, transport: Transport | None = None) -> StageResult:
    """Attach a teacher score and an ensemble label to every pair."""
    records = read_jsonl(pairs_file)
    if not records:
        raise ValidationError("no pairs")
    jcfg = config.judges
    if not jcfg.panel:
        raise ValidationError("judges.panel is empty")
    errors: list[dict] = []
    counter = get_counter(config.tokenizer)
    indexed = [(i, _with_token_count(p, counter)) for i, p in _pairs_from_records(records, "annotate", errors)]

    cached_scores = load_cached_scores(config.teacher.cached_scores_path) if config.teacher.cached_scores_path else None
    with open_transport(config, transport) as tp:
        scorer = TeacherScorer(config.teacher.build(), tp, cache(config, "teacher"), cached_scores)
        judge_cache = JsonlCache(jcfg.cache_path) if jcfg.cache_path else cache(config, "judges")
        panel = [Judge(j.build(), tp, judge_cache) for j in jcfg.panel]

        teacher: dict[int, Any] = {}
        for i, pair in indexed:
            try:
                teacher[i] = scorer.score(pair)
            except RerankKitError as exc:
                errors.append(error_record("annotate.teacher", pair.pair_id, exc))
        labels = annotate_pairs(
            [p for _, p in indexed], panel, jcfg.rubric, threshold=jcfg.threshold, short_circuit=jcfg.short_circuit
        )

    out: list[dict] = []
    for (i, pair), label in zip(indexed, labels):
        if isinstance(label, Exception):
            errors.append(error_record("annotate.judges", pair.pair_id, label))
            continue
        if i in teacher:
            out.append(scored_to_record(ScoredPair(pair, teacher[i], label)))
    n = write_jsonl(out_file, out)
    pos = sum(r["label"] == Label.POSITIVE.value for r in out)
    return _finish(out_file, StageResult({"labeled": Path(out_file)}, n, errors, {"positive": pos, "negative": n - pos}))


def cmd_balance(labeled_file, out_file, config: PipelineConfig, *, report_file=None) -> StageResult:
    records = read_jsonl(labeled_file)
    if not records:
        raise ValidationError("no labeled records")
    counter = get_counter(config.tokenizer)
    samples = []
    for rec in records:
        sp = scored_from_record(rec)
        length = sp.pair.doc_token_count if sp.pair.doc_token_count is not None else counter(sp.pair.document)
        samples.append((sp.teacher.y, length))
    keep, report = balance(samples, config.balance.target_h, config.seed)
    n = write_jsonl(out_file, (records[i] for i in keep))
    report_file = Path(report_file) if report_file else Path(out_file).with_suffix(".report.json")
    before = CellHistogram.from_cells([bin_pair(*s) for s in samples])
    after = CellHistogram.from_cells([bin_pair(*samples[i]) for i in keep])
    write_json(report_file, {**report.to_dict(), "histogram_before": before.counts.tolist(), "histogram_after": after.counts.tolist()})
    Path(report_file).with_suffix(".before.csv").write_text(before.to_csv(), encoding="utf-8")
    Path(report_file).with_suffix(".after.csv").write_text(after.to_csv(), encoding="utf-8")
    return _finish(out_file, StageResult({"balanced": Path(out_file), "report": report_file}, n, [], report.to_dict()))


def cmd_build_samples(balanced_file, out_file, config: PipelineConfig, *, transport: Transport | None = None) -> StageResult:
    """Negatives get the bare ``no`` target; positives get generated contribution/evidence."""
    records = read_jsonl(balanced_file)
    if not records:
        raise ValidationError("no balanced records")
    scored = [scored_from_record(r) for r in records]
    errors: list[dict] = []
    positives = [sp for sp in scored if sp.ensemble is not None and sp.ensemble.label is Label.POSITIVE]
    targets: dict[str, Any] = {}
    gen_cfg = config.acquisition.generator
    with open_transport(config, transport) as tp:
        if positives:
            if gen_cfg is None:
                raise ValidationError("positive pairs need acquisition.generator to build targets")
            client = ChatClient(gen_cfg.build(), tp)
            ce_cache = cache(config, "ce")

            def one(sp: ScoredPair):
                try:
                    return generate_ce_targets(sp, client, ce_cache, max_attempts=config.acquisition.generator_attempts)
                except RerankKitError as exc:
                    return exc

            # one generation per distinct (query, document) so concurrent duplicates cannot race the cache
            unique: dict[tuple[str, str], ScoredPair] = {}
            for sp in positives:
                unique.setdefault((sp.pair.query, sp.pair.document), sp)
            with ThreadPoolExecutor(max_workers=gen_cfg.max_concurrent) as pool:
                done = dict(zip(unique, pool.map(one, unique.values())))
            for sp in positives:
                targets[sp.pair.pair_id] = done[(sp.pair.query, sp.pair.document)]

    out = []
    for sp in scored:
        try:
            if sp.pair.pair_id in targets:
                res = targets[sp.pair.pair_id]
                if isinstance(res, Exception):
                    raise res
                sample = assemble_sample(sp, res.sft_target)
            else:
                sample = assemble_sample(sp)
        except RerankKitError as exc:
            errors.append(error_record("build-samples", sp.pair.pair_id, exc))
            continue
        rec = sample_to_record(sample, sp)
        rec["prompt"] = render_prompt(sp.pair, config.protocol.instruction, config.protocol.system_prompt).rendered_text
        out.append(rec)
    for msg in validate_samples(out):
        errors.append({"stage": "build-samples", "pair_id": None, "error_type": "ValidationError", "message": msg})
    n = write_jsonl(out_file, out)
    pos = sum(r["label"] == Label.POSITIVE.value for r in out)
    return _finish(out_file, StageResult({"samples": Path(out_file)}, n, errors, {"positive": pos, "negative": n - pos}))


def cmd_split(samples_file, train_file, dev_file, config: PipelineConfig) -> StageResult:
    records = read_jsonl(samples_file)
    train, dev = split_by_query(records, config.split.dev_fraction, config.split_seed)
    write_jsonl(train_file, train)
    write_jsonl(dev_file, dev)
    summary = {
        "train": len(train),
        "dev": len(dev),
        "train_queries": len({r["query"] for r in train}),
        "dev_queries": len({r["query"] for r in dev}),
    }
    return StageResult({"train": Path(train_file), "dev": Path(dev_file)}, len(records), [], summary)


def cmd_eval_rank(qrels_file, run_file, out_file, config: PipelineConfig, *, force_insert: bool | None = None) -> StageResult:
    qrels = read_qrels(qrels_file)
    run = read_run(run_file)
    force = config.eval.force_insert if force_insert is None else force_insert
    if force:
        run = force_insert_positives(run, qrels, config.eval.depth)
    res = ndcg_at_k(qrels, run, config.eval.k)
    report = {**res.to_dict(), "force_insert": force, "depth": config.eval.depth if force else None}
    write_json(out_file, report)
    return StageResult({"report": Path(out_file)}, len(run), [], {"mean": res.mean, "n_evaluated": res.n_evaluated})


def _gold(rec: dict):
    for key in ("gold_label", "label"):
        if rec.get(key) is not None:
            return rec[key]
    return None


def _model_output(rec: dict):
    return rec.get("model_output", rec.get("output"))


def cmd_eval_quality(
    outputs_file,
    out_file,
    config: PipelineConfig,
    *,
    skip_judge: bool = False,
    csv_file=None,
    transport: Transport | None = None,
) -> StageResult:
    """Records carry ``pair_id, query, document, gold_label, model_output`` (raw generated text)."""
    records = read_jsonl(outputs_file)
    if not records:
        raise ValidationError("no model outputs")
    missing = [str(r.get("pair_id")) for r in records if _gold(r) is None]
    if missing:
        raise ValidationError(f"missing gold labels for {len(missing)} record(s): {', '.join(missing[:10])}")
    no_output = [str(r.get("pair_id")) for r in records if not isinstance(_model_output(r), str)]
    if no_output:
        raise ValidationError(f"records without a model_output string: {', '.join(no_output[:10])}")
    ev = config.eval
    errors: list[dict] = []
    counter = get_counter(config.tokenizer)
    results = []
    with open_transport(config, transport) as tp:
        extractor = ChatClient(ev.extractor.build(), tp) if ev.extractor is not None else None
        judge = None
        if not skip_judge:
            if ev.quality_judge is None:
                raise ValidationError("eval.quality_judge is not configured (use --skip-judge for rule-based metrics)")
            judge = ChatClient(ev.quality_judge.build(), tp)
        qcache = cache(config, "quality")
        for rec in records:
            try:
                pair = QueryDocPair.from_record(rec)
                results.append(
                    evaluate_pair(pair, _gold(rec), _model_output(rec), extractor=extractor, judge=judge,
                                  cache=qcache, tokenizer=counter)
                )
            except RerankKitError as exc:
                errors.append(error_record("eval-quality", rec.get("pair_id"), exc))
    if not results:
        raise ValidationError("every record failed evaluation")
    report = aggregate_report(results).to_dict()
    report["skip_judge"] = skip_judge
    write_json(out_file, report)
    outputs = {"report": Path(out_file)}
    csv_file = Path(csv_file) if csv_file else Path(out_file).with_suffix(".pairs.csv")
    csv_file.write_text(per_pair_csv(results), encoding="utf-8")
    outputs["pairs"] = csv_file
    return _finish(out_file, StageResult(outputs, len(results), errors, report["table_row"]))


def cmd_judge_kappa(labeled_file, out_file, config: PipelineConfig, *, k: int | None = None) -> StageResult:
    """Pairwise kappa over the judges that voted on every record, plus greedy panel selection."""
    records = read_jsonl(labeled_file)
    if not records:
        raise ValidationError("no labeled records")
    judge_sets = [frozenset((r.get("votes") or {}).keys()) for r in records]
    if len(set(judge_sets)) != 1:
        raise ValidationError("judges did not all vote on every record (disable short_circuit for kappa runs)")
    ids = sorted(judge_sets[0])
    votes = {j: [r["votes"][j] for r in records] for j in ids}
    size = k if k is not None else min(config.judges.panel_size, len(ids))
    report = panel_report(votes, size)
    payload = report.to_dict()
    write_json(out_file, payload)
    return StageResult({"report": Path(out_file)}, len(records), [], {"selected": payload["selected"]})


def _loss_row(rec: dict, config: PipelineConfig) -> dict:
    lc = config.loss
    row: dict[str, Any] = {"pair_id": rec.get("pair_id")}
    if "l_yes" in rec and "l_no" in rec:
        row["s"] = relevance_score(LabelLogits(float(rec["l_yes"]), float(rec["l_no"])))
    elif "s" in rec:
        row["s"] = float(rec["s"])
    if "teacher_score" in rec and "s" in row:
        row["loss_point"] = loss_point(row["s"], TeacherScore(float(rec["teacher_score"])))
    if "token_logprobs" in rec:
        mask = rec.get("mask") or [True] * len(rec["token_logprobs"])
        row["loss_sft"] = loss_sft(SftTarget(list(rec["token_logprobs"]), [bool(m) for m in mask]))
    if "loss_point" in row and "loss_sft" in row:
        row["loss_total"] = loss_total(row["loss_point"], row["loss_sft"], LossWeights(lc.gamma_point, lc.gamma_sft))
    if "student_scores" in rec and "teacher_scores" in rec:
        row["loss_listwise_kl"] = loss_listwise_kl(
            rec["student_scores"], rec["teacher_scores"], lc.temperature, direction=lc.kl_direction
        )
        if "positive_index" in rec:
            row["loss_rank_infonce"] = loss_rank_infonce(
                rec["student_scores"], rec["teacher_scores"], int(rec["positive_index"]), eps=lc.infonce_eps
            )
    if len(row) == 1:
        raise ValidationError("record has no recognised loss inputs")
    return row


def cmd_loss_oracle(in_file, out_file, config: PipelineConfig) -> StageResult:
    """Batch evaluation of the score and loss formulas; adds checkpoint metrics when possible."""
    records = read_jsonl(in_file)
    if not records:
        raise ValidationError("no loss records")
    rows, errors, used = [], [], []
    for rec in records:
        try:
            rows.append(_loss_row(rec, config))
            used.append(rec)
        except (RerankKitError, ValueError, TypeError, KeyError) as exc:
            errors.append(error_record("loss-oracle", rec.get("pair_id"), exc))
    write_jsonl(out_file, rows)
    summary: dict[str, Any] = {}
    scored = [(row["s"], rec) for row, rec in zip(rows, used) if "s" in row and "teacher_score" in rec and "label" in rec]
    if len(scored) >= 2:
        m = checkpoint_metrics(
            [s for s, _ in scored],
            [float(r["teacher_score"]) for _, r in scored],
            [int(Label.coerce(r["label"]) is Label.POSITIVE) for _, r in scored],
        )
        summary["checkpoint"] = m.to_dict()
    for key in ("loss_point", "loss_sft", "loss_total", "loss_listwise_kl", "loss_rank_infonce"):
        vals = [r[key] for r in rows if key in r]
        if vals:
            summary[f"mean_{key}"] = math.fsum(vals) / len(vals)
    outputs = {"rows": Path(out_file)}
    if summary:
        summary_file = Path(out_file).with_suffix(".summary.json")
        write_json(summary_file, summary)
        outputs["summary"] = summary_file
    return _finish(out_file, StageResult(outputs, len(rows), errors, summary))
