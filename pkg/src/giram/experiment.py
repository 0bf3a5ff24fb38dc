"""Block-by-block continual loop: train base, then per block update, deploy, evaluate."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffmath as dm
from .backbone import (Backbone, ModelPair, RecurrentBackbone, finetune, make_model_pair, retrain_all,
                       train_base)
from .config import ExperimentConfig
from .fusion import ConsistencyTable, consistency_scores, deploy_prefixes, update_stage
from .ingest import (CategoryMap, ConfigError, DataError, GridSpec, Trajectory, load_category_map,
                     prepare, split_val_test)
from .keyenc import CoordStats, KeyEncoder
from .keygen import KeyGenerator
from .memory import InterestMemory, load_memory, save_memory
from .metrics import CUTOFFS, ranks_of_truth, summarize
from .retrieval import RrfConfig
from .synth import category_map as synth_category_map
from .synth import generate

log = logging.getLogger(__name__)

METRIC_COLUMNS = [f"Acc@{k}" for k in CUTOFFS] + ["MRR"]
REPORT_HEADER = ["block", "method"] + METRIC_COLUMNS + ["N"]
GIRAM_VARIANTS = {
    "giram": {},
    "giram-nogkr": {"generative_retrieval": False},
    "giram-nocs": {"use_consistency": False},
}


class ExperimentError(RuntimeError):
    def __init__(self, block: int, phase: str, cause: Exception):
        super().__init__(f"block {block}, phase {phase}: {cause}")
        self.block = block
        self.phase = phase
        self.cause = cause


@dataclass
class RunResult:
    rows: list[dict] = field(default_factory=list)  # one per (block, method)
    timing: dict[str, dict[int, float]] = field(default_factory=dict)
    memory_bytes: dict[str, int] = field(default_factory=dict)
    snapshot_bytes: dict[str, int] = field(default_factory=dict)

    def mean(self, method: str, metric: str = "Acc@5") -> float:
        vals = [r[metric] for r in self.rows if r["method"] == method]
        return float(np.mean(vals))

    def per_block(self, method: str, metric: str = "Acc@5") -> dict[int, float]:
        return {r["block"]: r[metric] for r in self.rows if r["method"] == method}


class _Phase:
    """Context manager tagging any failure with block index and phase name."""

    def __init__(self, block: int, phase: str):
        self.block, self.phase = block, phase

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, ExperimentError):
            raise ExperimentError(self.block, self.phase, exc) from exc
        return False


def load_data(cfg: ExperimentConfig):
    d = cfg.data
    if d.path:
        cmap = load_category_map(d.category_map) if d.category_map else CategoryMap()
        source = d.path
    else:
        cmap = synth_category_map(cfg.synth)
        source = generate(cfg.synth)
    return prepare(source, n_blocks=d.n_blocks, min_count=d.min_count,
                   interval=d.interval_days * 86400, cmap=cmap)


def _evaluate(scores: Sequence[np.ndarray], test: Sequence[Trajectory], vocab, last_only: bool) -> np.ndarray:
    ranks = []
    for s, t in zip(scores, test):
        truth = vocab.poi_ids(t)[1:]
        if last_only:
            s, truth = s[-1:], truth[-1:]
        ranks.append(ranks_of_truth(s, truth))
    return np.concatenate(ranks)


def _resume_point(ck_root: Path, cfg: ExperimentConfig) -> tuple[Path, dict] | None:
    """Newest block checkpoint that finished writing and belongs to this config."""
    found = []
    for d in ck_root.glob("block_*"):
        state_file = d / "state.json"
        hash_file = d / "config_hash.txt"
        if not (state_file.exists() and hash_file.exists()):
            continue
        if hash_file.read_text().strip() != cfg.digest():
            continue
        state = json.loads(state_file.read_text())
        found.append((state["next_step"], d, state))
    if not found:
        return None
    _, d, state = max(found, key=lambda x: x[0])
    return d, state


def run_experiment(cfg: ExperimentConfig, write: bool = True, resume: bool = False) -> RunResult:
    """Run every selected method over the block stream.

    With ``resume`` the loop restarts after the newest complete block
    checkpoint in ``output_dir`` whose config hash matches; reports are
    byte-identical to an uninterrupted run.
    """
    out_dir = Path(cfg.output_dir)
    ck_root = out_dir / "checkpoints"
    resumed = _resume_point(ck_root, cfg) if resume else None
    with _Phase(0, "ingest"):
        vocab, base, blocks = load_data(cfg)
        if len(blocks) < 2:
            raise ConfigError("need at least two incremental blocks to update and evaluate")
        all_checkins = base.checkins + [c for b in blocks for c in b.checkins]
        grid = GridSpec.covering(all_checkins, cfg.data.grid_rows, cfg.data.grid_cols)
        stats = CoordStats.fit(base.checkins)
        encoder = KeyEncoder(vocab, grid, stats, replace(cfg.keyenc, seed=cfg.seed + 1))
    bb_cfg = replace(cfg.backbone, seed=cfg.seed)
    methods = list(cfg.methods)
    variants = [m for m in methods if m in GIRAM_VARIANTS]
    result = RunResult(timing={m: {} for m in methods})

    with _Phase(0, "train_base"):
        t0 = time.perf_counter()
        if resumed is not None:
            base_model = RecurrentBackbone(vocab, bb_cfg)
            base_model.load_state_dict(dm.load_checkpoint(ck_root / "base" / "model.npz"))
            base_time = resumed[1]["base_time"]
        else:
            base_model = train_base(base, vocab, bb_cfg)
            base_time = time.perf_counter() - t0
            if write and cfg.checkpoint:
                (ck_root / "base").mkdir(parents=True, exist_ok=True)
                dm.save_checkpoint(ck_root / "base" / "model.npz", base_model.state_dict())

    personalized: Backbone = base_model
    memories = {v: InterestMemory(cfg.capacity, cfg.fusion.top_k) for v in variants}
    fusion_cfgs = {v: replace(cfg.fusion, **GIRAM_VARIANTS[v]) for v in variants}
    rrf = RrfConfig(cfg.rrf_a)
    table = ConsistencyTable()
    start = 1
    if resumed is not None:
        with _Phase(0, "resume"):
            ck, state = resumed
            start = state["next_step"]
            if "personalized" in state["models"]:
                personalized = base_model.clone()
                saved = dm.load_checkpoint(ck / "model_personalized.npz")
                personalized.load_state_dict({k: v for k, v in saved.items() if not k.startswith("adam.")})
                personalized.load_optimizer_state(saved)
            for v in variants:
                memories[v] = load_memory(ck / f"memory_{v}.npz")
            result.rows = state["rows"]
            for m, per in state["timing"].items():
                result.timing[m] = {int(b): t for b, t in per.items()}
            result.memory_bytes = state["memory_bytes"]
            result.snapshot_bytes = state["snapshot_bytes"]
            log.info("resuming from %s", ck)
    elif variants:
        with _Phase(0, "memory_init"):
            # the base model seeds the memory; with f_c = f_p every user scores 1
            base_pair = ModelPair(base_model, base_model)
            for v in variants:
                update_stage(memories[v], base_pair, base, encoder, fusion_cfgs[v])

    retrained: Backbone | None = None
    for i in range(start, len(blocks)):
        upd, target = blocks[i - 1], blocks[i]
        block_no = target.index
        models: dict[str, Backbone] = {}
        generator: KeyGenerator | None = None
        seed_i = cfg.seed * 1000 + i

        if "static" in methods:
            models["static"] = base_model
            result.timing["static"][block_no] = 0.0

        if "finetune" in methods or variants:
            with _Phase(block_no, "finetune"):
                t0 = time.perf_counter()
                if variants:
                    pair = make_model_pair(personalized, upd, bb_cfg.finetune_epochs, seed=seed_i)
                else:
                    pair = None
                    personalized = finetune(personalized, upd, bb_cfg.finetune_epochs, seed=seed_i)
                finetune_time = time.perf_counter() - t0
            if pair is not None:
                personalized = pair.personalized
            if "finetune" in methods:
                models["finetune"] = personalized
                result.timing["finetune"][block_no] = finetune_time / (2 if variants else 1)

        if "retrain" in methods:
            with _Phase(block_no, "retrain"):
                t0 = time.perf_counter()
                retrained = retrain_all([base, *blocks[:i]], vocab, bb_cfg)
                result.timing["retrain"][block_no] = time.perf_counter() - t0
            models["retrain"] = retrained

        if variants:
            with _Phase(block_no, "update"):
                t0 = time.perf_counter()
                table = consistency_scores(pair, upd)
                shared = time.perf_counter() - t0
                for v in variants:
                    t1 = time.perf_counter()
                    update_stage(memories[v], pair, upd, encoder, fusion_cfgs[v], table)
                    result.timing[v][block_no] = finetune_time + shared + time.perf_counter() - t1
                    result.memory_bytes[v] = max(result.memory_bytes.get(v, 0), memories[v].payload_bytes())
            if any(fusion_cfgs[v].generative_retrieval for v in variants):
                with _Phase(block_no, "keygen"):
                    t0 = time.perf_counter()
                    keys = np.stack(encoder.encode_many(upd.trajectories))
                    generator = KeyGenerator(cfg.keyenc.d_k, replace(cfg.keygen, seed=seed_i))
                    generator.fit(keys)
                    elapsed = time.perf_counter() - t0
                    for v in variants:
                        if fusion_cfgs[v].generative_retrieval:
                            result.timing[v][block_no] += elapsed

        with _Phase(block_no, "evaluate"):
            _, test = split_val_test(target, seed_i)
            recent = personalized.score_many(test, prefixes=True) if (variants or models) else []
            for m in methods:
                if m in GIRAM_VARIANTS:
                    continue
                scores = models[m].score_many(test, prefixes=True)
                ranks = _evaluate(scores, test, vocab, cfg.data.last_only)
                result.rows.append({"block": block_no, "method": m, **summarize(ranks)})
            if variants:
                prefix_keys = encoder.encode_many(test, prefixes=True)
                for v in variants:
                    fused = [deploy_prefixes(memories[v].get(t.user_id), r, k[:-1], generator, t,
                                             table, fusion_cfgs[v], rrf, seed_i)
                             for t, r, k in zip(test, recent, prefix_keys)]
                    ranks = _evaluate(fused, test, vocab, cfg.data.last_only)
                    result.rows.append({"block": block_no, "method": v, **summarize(ranks)})

        if write and cfg.checkpoint:
            with _Phase(block_no, "checkpoint"):
                ck = out_dir / "checkpoints" / f"block_{block_no}"
                ck.mkdir(parents=True, exist_ok=True)
                for m, model in models.items():
                    dm.save_checkpoint(ck / f"model_{m}.npz", model.state_dict())
                chained = "finetune" in methods or variants
                if chained:
                    dm.save_checkpoint(ck / "model_personalized.npz",
                                       {**personalized.state_dict(), **personalized.optimizer_state()})
                if variants:
                    dm.save_checkpoint(ck / "model_collective.npz", pair.collective.state_dict())
                    dm.save_checkpoint(ck / "encoder.npz", encoder.state_dict())
                    (ck / "consistency.json").write_text(table.to_json())
                    for v in variants:
                        save_memory(memories[v], ck / f"memory_{v}.npz")
                        result.snapshot_bytes[v] = max(result.snapshot_bytes.get(v, 0),
                                                       (ck / f"memory_{v}.npz").stat().st_size)
                    if generator is not None:
                        dm.save_checkpoint(ck / "generator.npz", generator.state_dict())
                (ck / "config_hash.txt").write_text(cfg.digest() + "\n")
                # written last: its presence marks the checkpoint complete
                state = {"next_step": i + 1, "base_time": base_time, "rows": result.rows,
                         "models": ["personalized"] if chained else [],
                         "timing": {m: {str(b): t for b, t in v.items()} for m, v in result.timing.items()},
                         "memory_bytes": result.memory_bytes, "snapshot_bytes": result.snapshot_bytes}
                (ck / "state.json").write_text(json.dumps(state, indent=1, sort_keys=True))
        log.info("block %d done: %s", block_no,
                 ", ".join(f"{r['method']}={r['Acc@5']:.4f}" for r in result.rows if r["block"] == block_no))

    result.rows.sort(key=lambda r: (r["block"], methods.index(r["method"])))
    result.timing["_base_train"] = {0: base_time}
    if write:
        write_reports(result, cfg, out_dir)
    return result


# ---------------------------------------------------------------- reports

def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def metrics_csv(result: RunResult, methods: Sequence[str]) -> str:
    """Long form: one row per (block, method) plus a 'mean' row per method."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for r in result.rows:
        w.writerow([r["block"], r["method"]] + [_fmt(r[c]) for c in METRIC_COLUMNS] + [r["N"]])
    for m in methods:
        rows = [r for r in result.rows if r["method"] == m]
        w.writerow(["mean", m] + [_fmt(float(np.mean([r[c] for r in rows]))) for c in METRIC_COLUMNS]
                   + [sum(r["N"] for r in rows)])
    return buf.getvalue()


def table_csv(result: RunResult, methods: Sequence[str]) -> str:
    """Wide form mirroring the usual results table: per block, then Mean, 4 metrics each."""
    blocks = sorted({r["block"] for r in result.rows})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method"] + [f"T{b}:{c}" for b in blocks for c in METRIC_COLUMNS]
               + [f"Mean:{c}" for c in METRIC_COLUMNS])
    for m in methods:
        by_block = {r["block"]: r for r in result.rows if r["method"] == m}
        cells = [_fmt(by_block[b][c]) for b in blocks for c in METRIC_COLUMNS]
        means = [_fmt(float(np.mean([by_block[b][c] for b in blocks]))) for c in METRIC_COLUMNS]
        w.writerow([m] + cells + means)
    return buf.getvalue()


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != REPORT_HEADER:
            raise DataError(f"{path}: unexpected report columns {reader.fieldnames}")
        rows = []
        for row in reader:
            parsed = {"block": row["block"] if row["block"] == "mean" else int(row["block"]),
                      "method": row["method"], "N": int(row["N"])}
            parsed.update({c: float(row[c]) for c in METRIC_COLUMNS})
            rows.append(parsed)
    return rows


def write_reports(result: RunResult, cfg: ExperimentConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    methods = list(cfg.methods)
    (out_dir / "metrics.csv").write_text(metrics_csv(result, methods))
    (out_dir / "table.csv").write_text(table_csv(result, methods))
    summary = {
        "config_hash": cfg.digest(),
        "methods": {m: {c: round(result.mean(m, c), 6) for c in METRIC_COLUMNS} for m in methods},
        "peak_memory_payload_bytes": result.memory_bytes,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out_dir / "config.json").write_text(cfg.to_json() + "\n")
    # wall-clock numbers vary run to run, so they live apart from the reports
    timing = {m: {str(b): round(t, 4) for b, t in v.items()} for m, v in result.timing.items()}
    (out_dir / "timing.json").write_text(json.dumps(
        {"seconds": timing, "snapshot_bytes": result.snapshot_bytes}, indent=2, sort_keys=True) + "\n")
