"""Training loops, schedules, experiment orchestration, and reporting.

Training regimes:
  * pretrain: encoder + decoder on current-page-only inputs (memory length P);
  * adapter: encoder frozen, adapter at its own learning rate, decoder
    fine-tuned at a lower one, single optimizer with two parameter groups.

Learning rates decay per epoch by a fixed factor, clamped at a floor.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import corpus as corpus_mod
from . import metrics as metrics_mod
from .corpus import CharTokenizer, ContextSample, SplitManifest
from .model import (Model, ModelConfig, PageTriplet, init_adapter_params,
                    init_model, load_checkpoint, save_checkpoint, save_tensors,
                    load_tensors)
from .tensor import NumericError, Parameter, Tensor, cross_entropy_logits, no_grad

log = logging.getLogger("mugat")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr_adapter: float = 5e-4
    lr_decoder: float = 5e-5
    lr_pretrain: float = 5e-4
    gamma: float = 0.9996
    lr_floor: float = 2e-6
    batch_size: int = 16
    init_seed: int = 1
    data_seed: int = 2
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dtype: str = "float32"  # training precision; tests use float64

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if self.lr_floor >= min(self.lr_adapter, self.lr_decoder, self.lr_pretrain):
            raise ValueError("lr_floor must be below every learning rate")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


def lr_at(lr0: float, gamma: float, floor: float, epoch: int) -> float:
    """Closed-form schedule: lr0 * gamma**epoch clamped at the floor."""
    return max(lr0 * gamma ** epoch, floor)


class AdamW:
    """Adam with decoupled weight decay; one optimizer, per-group rates."""

    def __init__(self, groups: list[tuple[str, list[Parameter], float]],
                 cfg: TrainConfig):
        self.groups = groups
        self.cfg = cfg
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.lr: dict[str, float] = {name: lr0 for name, _, lr0 in groups}
        for _, params, _ in groups:
            for p in params:
                self.m[p.name] = np.zeros_like(p.data)
                self.v[p.name] = np.zeros_like(p.data)

    def set_epoch(self, epoch: int) -> None:
        for name, _, lr0 in self.groups:
            self.lr[name] = lr_at(lr0, self.cfg.gamma, self.cfg.lr_floor, epoch)

    def step(self, grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for gname, params, _ in self.groups:
            lr = self.lr[gname]
            for p in params:
                g = grads.get(p.name)
                if g is None:
                    continue
                m = self.m[p.name]
                v = self.v[p.name]
                m *= c.beta1
                m += (1 - c.beta1) * g
                v *= c.beta2
                v += (1 - c.beta2) * g * g
                update = (m / bc1) / (np.sqrt(v / bc2) + c.eps)
                p.data = p.data - lr * (update + c.weight_decay * p.data)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {"opt.t": np.array([self.t], dtype=np.int64)}
        for name in self.m:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        self.t = int(tensors["opt.t"][0])
        for name in self.m:
            self.m[name] = tensors[f"opt.m.{name}"].copy()
            self.v[name] = tensors[f"opt.v.{name}"].copy()


# ----------------------------------------------------------------------
# Corpus access helpers
# ----------------------------------------------------------------------


@dataclass
class CorpusData:
    manifest: SplitManifest
    pixels: dict
    gen_cfg: corpus_mod.GenConfig
    seed: int
    tokenizer: CharTokenizer = field(default_factory=CharTokenizer)

    @classmethod
    def load(cls, corpus_dir: str) -> "CorpusData":
        manifest, pixels, gen_cfg, seed = corpus_mod.load_corpus(corpus_dir)
        return cls(manifest, pixels, gen_cfg, seed)

    def model_config(self, N: int = 4, L: int = 2, **overrides) -> ModelConfig:
        longest = max(len(s.markup) for s in self.manifest.all_samples())
        kw = dict(image_h=self.gen_cfg.page_h, image_w=self.gen_cfg.page_w,
                  N=N, L=L, vocab_size=self.tokenizer.vocab_size,
                  max_target_len=max(64, longest + 2))
        kw.update(overrides)
        return ModelConfig(**kw)

    def neighbor_pixels(self, sample: ContextSample, delta: int) -> Optional[np.ndarray]:
        return self.pixels.get((sample.doc_id, sample.page_index + delta))

    def triplet(self, sample: ContextSample) -> PageTriplet:
        return PageTriplet(
            curr=self.pixels[(sample.doc_id, sample.page_index)],
            prev=self.neighbor_pixels(sample, -1) if sample.prev_available else None,
            next=self.neighbor_pixels(sample, +1) if sample.next_available else None,
        )


def pad_token_batch(token_lists: list[list[int]], pad_id: int) -> np.ndarray:
    T = max(len(t) for t in token_lists)
    out = np.full((len(token_lists), T), pad_id, dtype=np.int64)
    for i, ids in enumerate(token_lists):
        out[i, :len(ids)] = ids
    return out


def precompute_embeddings(model: Model, data: CorpusData,
                          batch_size: int = 32) -> tuple[dict, np.ndarray]:
    """Frozen-encoder page embeddings for every page, plus the empty page."""
    keys = sorted(data.pixels)
    emb: dict = {}
    with no_grad():
        for i in range(0, len(keys), batch_size):
            chunk = keys[i:i + batch_size]
            stack = np.stack([data.pixels[k] for k in chunk])
            out = model.encode_pages(stack).data
            for k, e in zip(chunk, out):
                emb[k] = e
    empty = model.empty_page_embedding().matrix.data
    return emb, empty


def batch_memory_frozen(model: Model, batch: list[ContextSample], emb: dict,
                        empty: np.ndarray) -> Tensor:
    """Decoder memory for a batch, from precomputed (frozen) embeddings."""
    curr = Tensor(np.stack([emb[(s.doc_id, s.page_index)] for s in batch]))
    if model.cfg.N == 0:
        return model.build_memory(curr, None)

    def side(s: ContextSample, delta: int, available: bool) -> np.ndarray:
        key = (s.doc_id, s.page_index + delta)
        if available and key in emb:
            return emb[key]
        return empty

    prev = Tensor(np.stack([side(s, -1, s.prev_available) for s in batch]))
    nxt = Tensor(np.stack([side(s, +1, s.next_available) for s in batch]))
    latents = model.adapter_forward(prev, curr, nxt)
    return model.build_memory(curr, latents)


def batch_loss(model: Model, batch: list[ContextSample], data: CorpusData,
               frozen: Optional[tuple[dict, np.ndarray]] = None) -> Tensor:
    """Teacher-forced loss of one batch. With `frozen` embeddings the encoder
    stays out of the graph (adapter regime); otherwise the current page is
    encoded in-graph and memory is the page alone (pretrain regime)."""
    tok = data.tokenizer
    ids = pad_token_batch([tok.tokenize(s.markup) for s in batch], tok.PAD)
    inputs, targets = ids[:, :-1], ids[:, 1:]
    if frozen is not None:
        memory = batch_memory_frozen(model, batch, *frozen)
    else:
        stack = np.stack([data.pixels[(s.doc_id, s.page_index)] for s in batch])
        memory = model.build_memory(model.encode_pages(stack), None)
    logits = model.decode_logits(memory, inputs)
    return cross_entropy_logits(logits, targets, pad_id=tok.PAD)


# ----------------------------------------------------------------------
# Training loops
# ----------------------------------------------------------------------


def _epoch_batches(samples: list, batch_size: int, data_seed: int,
                   epoch: int) -> list[list]:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=data_seed, spawn_key=(epoch,)))
    order = rng.permutation(len(samples))
    shuffled = [samples[i] for i in order]
    return [shuffled[i:i + batch_size] for i in range(0, len(shuffled), batch_size)]


def _train(model: Model, data: CorpusData, cfg: TrainConfig,
           groups: list[tuple[str, list[Parameter], float]],
           frozen: Optional[tuple] = None,
           start_epoch: int = 0, opt_state: Optional[dict] = None,
           epochs: Optional[int] = None,
           checkpoint_path: Optional[str] = None,
           max_steps_per_epoch: Optional[int] = None) -> tuple[AdamW, list[float]]:
    trainable = [p for _, ps, _ in groups for p in ps]
    opt = AdamW(groups, cfg)
    if opt_state:
        opt.load_state_tensors(opt_state)
    losses: list[float] = []
    total_epochs = cfg.epochs if epochs is None else epochs
    train_samples = data.manifest.train
    for epoch in range(start_epoch, total_epochs):
        opt.set_epoch(epoch)
        batches = _epoch_batches(train_samples, cfg.batch_size, cfg.data_seed, epoch)
        if max_steps_per_epoch:
            batches = batches[:max_steps_per_epoch]
        epoch_loss = 0.0
        for batch in batches:
            try:
                loss = batch_loss(model, batch, data, frozen=frozen)
                grads = {}
                for p in trainable:
                    p.tensor.grad = None
                loss.backward()
                for p in trainable:
                    g = p.tensor.grad
                    if g is not None:
                        if not np.all(np.isfinite(g)):
                            raise NumericError(f"non-finite gradient for parameter '{p.name}'")
                        grads[p.name] = g
            except NumericError:
                if checkpoint_path:
                    save_checkpoint(checkpoint_path, model)
                raise
            opt.step(grads)
            model.note_update()
            epoch_loss += loss.item()
        mean = epoch_loss / max(1, len(batches))
        losses.append(mean)
        log.info("epoch %d: loss %.4f (lr %s)", epoch, mean,
                 {k: f"{v:.2e}" for k, v in opt.lr.items()})
    return opt, losses


def pretrain_single_page(data: CorpusData, model_cfg: ModelConfig, cfg: TrainConfig,
                         out_ckpt: Optional[str] = None,
                         epochs: Optional[int] = None) -> tuple[Model, list[float]]:
    """Train encoder + decoder on current-page-only inputs (no adapter)."""
    base_cfg = dataclasses.replace(model_cfg, N=0)
    model = init_model(base_cfg, cfg.init_seed, dtype=cfg.np_dtype)
    groups = [("pretrain", model.group("encoder") + model.group("decoder"), cfg.lr_pretrain)]
    _, losses = _train(model, data, cfg, groups, frozen=None,
                       checkpoint_path=out_ckpt, epochs=epochs)
    if out_ckpt:
        save_checkpoint(out_ckpt, model)
    return model, losses


def grow_from_base(base_ckpt: str, model_cfg: ModelConfig, init_seed: int,
                   dtype) -> Model:
    """Rebuild a base (contextless) checkpoint under `model_cfg` and add
    freshly initialized adapter parameters."""
    base, _ = load_checkpoint(base_ckpt, expect_cfg=model_cfg)
    params = {n: Parameter(p.data.astype(dtype), n) for n, p in base.params.items()
              if not n.startswith("adapter.")}
    model = Model(model_cfg, params)
    init_adapter_params(model, init_seed)
    return model


def train_adapter(base_ckpt: str, data: CorpusData, model_cfg: ModelConfig,
                  cfg: TrainConfig, out_ckpt: Optional[str] = None,
                  epochs: Optional[int] = None) -> tuple[Model, list[float]]:
    """Freeze the encoder, train the adapter (own lr), fine-tune the decoder
    (lower lr); single optimizer with two parameter groups."""
    model = grow_from_base(base_ckpt, model_cfg, cfg.init_seed, cfg.np_dtype)
    model.set_group_trainable("encoder", False)
    frozen = precompute_embeddings(model, data)
    groups = []
    if model.cfg.N > 0:
        groups.append(("adapter", model.group("adapter"), cfg.lr_adapter))
    groups.append(("decoder", model.group("decoder"), cfg.lr_decoder))
    _, losses = _train(model, data, cfg, groups, frozen=frozen,
                       checkpoint_path=out_ckpt, epochs=epochs)
    if out_ckpt:
        save_checkpoint(out_ckpt, model)
    return model, losses


# ----------------------------------------------------------------------
# Evaluation
# ----------------------------------------------------------------------


@dataclass
class EvalResult:
    table: dict
    records: list
    predictions: list  # (sample, predicted markup)
    hidden_field: dict

    def to_json(self) -> dict:
        return {"table": self.table, "hidden_field": self.hidden_field}


def hidden_field_stats(pairs: list[tuple[ContextSample, str]], data: CorpusData) -> dict:
    """Accuracy of the carried-over date token on pages that begin with
    continuation rows. `with_prev` restricts to samples whose scenario makes
    the previous page available."""
    totals = {"all": [0, 0], "with_prev": [0, 0]}
    for sample, pred in pairs:
        info = corpus_mod.continuation_info(sample, data.pixels)
        if info is None:
            continue
        gt_date, _ = info
        rows = corpus_mod.parse_markup(pred)
        pred_date = rows[0][0] if rows else ""
        hit = int(pred_date == gt_date)
        totals["all"][0] += hit
        totals["all"][1] += 1
        if sample.prev_available:
            totals["with_prev"][0] += hit
            totals["with_prev"][1] += 1
    return {k: {"correct": c, "count": n, "accuracy": (c / n if n else float("nan"))}
            for k, (c, n) in totals.items()}


def evaluate(model: Model, samples: list[ContextSample], data: CorpusData,
             batch_size: int = 16,
             frozen: Optional[tuple] = None) -> EvalResult:
    """Greedy-parse every sample, score all metrics, aggregate per scenario."""
    if not samples:
        raise ValueError("evaluate: empty split")
    tok = data.tokenizer
    if frozen is None:
        frozen = precompute_embeddings(model, data)
    records = []
    predictions = []
    for i in range(0, len(samples), batch_size):
        batch = samples[i:i + batch_size]
        with no_grad():
            memory = batch_memory_frozen(model, batch, *frozen)
            ids = model.greedy_decode(memory, tok.BOS, tok.EOS)
        for s, out in zip(batch, ids):
            pred = tok.detokenize(out)
            predictions.append((s, pred))
            records.append(metrics_mod.score_pair(pred, s.markup, s.scenario))
    table = metrics_mod.aggregate(records)
    hidden = hidden_field_stats(predictions, data)
    return EvalResult(table, records, predictions, hidden)


def write_eval_report(result: EvalResult, report_path: str) -> None:
    """CSV + mirrored JSON + figure next to each other."""
    base, _ = os.path.splitext(report_path)
    metrics_mod.write_report(result.table, base + ".csv", base + ".json",
                             extra={"hidden_field": result.hidden_field,
                                    "notes": "meteor: exact-match unigrams only; "
                                             "word sets built without case folding"})
    metrics_mod.plot_report(result.table, base + ".png")


# ----------------------------------------------------------------------
# Experiments
# ----------------------------------------------------------------------


def ablate_grid(data: CorpusData, base_ckpt: str, cfg: TrainConfig, out_dir: str,
                L_values=(2, 4), N_values=(2, 4, 8),
                epochs: Optional[int] = None) -> list[dict]:
    """Train one adapter per (L, N) cell from the same base checkpoint and
    seed; emit a combined table plus one checkpoint per cell."""
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for L in L_values:
        for N in N_values:
            model_cfg = data.model_config(N=N, L=L)
            ckpt = os.path.join(out_dir, f"adapter_L{L}_N{N}.ckpt")
            model, losses = train_adapter(base_ckpt, data, model_cfg, cfg,
                                          out_ckpt=ckpt, epochs=epochs)
            result = evaluate(model, data.manifest.test, data, cfg.batch_size)
            row = {"L": L, "N": N, "checkpoint": ckpt,
                   "final_train_loss": losses[-1] if losses else float("nan"),
                   "metrics": result.table["overall"],
                   "hidden_field": result.hidden_field}
            rows.append(row)
            log.info("grid cell L=%d N=%d: ED %.4f", L, N, result.table["overall"]["ed"])
    _write_grid_report(rows, out_dir)
    return rows


def _write_grid_report(rows: list[dict], out_dir: str) -> None:
    import csv as csv_mod
    tmp = os.path.join(out_dir, "grid.csv.tmp")
    with open(tmp, "w", newline="") as f:
        w = csv_mod.writer(f)
        w.writerow(["L", "N", "count"] + list(metrics_mod.METRIC_NAMES) + ["ed_x100"])
        for r in rows:
            m = r["metrics"]
            w.writerow([r["L"], r["N"], m["count"]]
                       + [f"{m[k]:.4f}" for k in metrics_mod.METRIC_NAMES]
                       + [f"{m['ed'] * 100:.4f}"])
    os.replace(tmp, os.path.join(out_dir, "grid.csv"))
    tmp = os.path.join(out_dir, "grid.json.tmp")
    with open(tmp, "w") as f:
        json.dump(rows, f, indent=2, sort_keys=True, default=str)
        f.write("\n")
    os.replace(tmp, os.path.join(out_dir, "grid.json"))


def context_experiment(data: CorpusData, cfg: TrainConfig, out_dir: str,
                       seeds: int = 3, base_ckpt: Optional[str] = None,
                       pretrain_epochs: Optional[int] = None,
                       adapter_epochs: Optional[int] = None,
                       N: int = 4, L: int = 2) -> dict:
    """Train a no-context baseline (N=0) and the context model with identical
    budgets over `seeds` seeds; report hidden-field accuracy per model,
    per-scenario metrics, and the 1/K chance bound."""
    os.makedirs(out_dir, exist_ok=True)
    has_continuation = any(
        corpus_mod.continuation_info(s, data.pixels) is not None
        for s in data.manifest.all_samples())
    if not has_continuation:
        raise corpus_mod.CorpusError("corpus has no continuation rows; "
                                     "context experiment is undefined")
    model_cfg = data.model_config(N=N, L=L)
    if base_ckpt is None:
        base_ckpt = os.path.join(out_dir, "base.ckpt")
        t0 = time.time()
        pretrain_single_page(data, model_cfg, cfg, out_ckpt=base_ckpt,
                             epochs=pretrain_epochs)
        log.info("pretrain done in %.1fs", time.time() - t0)

    runs = []
    for k in range(seeds):
        seed_cfg = dataclasses.replace(cfg, init_seed=cfg.init_seed + 1000 * k,
                                       data_seed=cfg.data_seed + 1000 * k)
        per_model = {}
        for label, n_latent in (("baseline", 0), ("context", N)):
            mc = data.model_config(N=n_latent, L=L)
            ckpt = os.path.join(out_dir, f"{label}_seed{k}.ckpt")
            t0 = time.time()
            model, _ = train_adapter(base_ckpt, data, mc, seed_cfg,
                                     out_ckpt=ckpt, epochs=adapter_epochs)
            result = evaluate(model, data.manifest.test, data, cfg.batch_size)
            log.info("seed %d %s: ED %.4f hidden %s (%.1fs)", k, label,
                     result.table["overall"]["ed"], result.hidden_field,
                     time.time() - t0)
            per_model[label] = {"table": result.table,
                                "hidden_field": result.hidden_field,
                                "checkpoint": ckpt}
        runs.append(per_model)

    report = summarize_context_runs(runs, data.gen_cfg.k_date)
    tmp = os.path.join(out_dir, "context_report.json.tmp")
    with open(tmp, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, os.path.join(out_dir, "context_report.json"))
    _write_context_csv(report, out_dir)
    _plot_context(report, os.path.join(out_dir, "context_report.png"))
    return report


def summarize_context_runs(runs: list[dict], k_date: int) -> dict:
    """Mean per-scenario ED and hidden-field accuracy across seeds."""
    out = {"chance_bound": 1.0 / k_date, "seeds": len(runs), "runs": runs,
           "mean": {}}
    for label in ("baseline", "context"):
        scen_ed = {}
        for scen in metrics_mod.SCENARIOS + ("overall",):
            vals = [r[label]["table"][scen]["ed"] for r in runs
                    if scen in r[label]["table"]]
            if vals:
                scen_ed[scen] = sum(vals) / len(vals)
        hf = {}
        for subset in ("all", "with_prev"):
            vals = [r[label]["hidden_field"][subset]["accuracy"] for r in runs
                    if r[label]["hidden_field"][subset]["count"] > 0]
            hf[subset] = sum(vals) / len(vals) if vals else float("nan")
        out["mean"][label] = {"ed": scen_ed, "hidden_field_accuracy": hf}
    return out


def _write_context_csv(report: dict, out_dir: str) -> None:
    import csv as csv_mod
    tmp = os.path.join(out_dir, "context_report.csv.tmp")
    with open(tmp, "w", newline="") as f:
        w = csv_mod.writer(f)
        w.writerow(["model", "scenario", "mean_ed", "mean_ed_x100"])
        for label, agg in report["mean"].items():
            for scen, ed in agg["ed"].items():
                w.writerow([label, scen, f"{ed:.4f}", f"{ed * 100:.4f}"])
        w.writerow([])
        w.writerow(["model", "hidden_field_subset", "accuracy"])
        for label, agg in report["mean"].items():
            for subset, acc in agg["hidden_field_accuracy"].items():
                w.writerow([label, subset, f"{acc:.4f}"])
        w.writerow(["chance_bound", "", f"{report['chance_bound']:.4f}"])
    os.replace(tmp, os.path.join(out_dir, "context_report.csv"))


def _plot_context(report: dict, fig_path: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    scenarios = list(metrics_mod.SCENARIOS)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    width = 0.35
    for k, label in enumerate(("baseline", "context")):
        eds = [report["mean"][label]["ed"].get(s, float("nan")) for s in scenarios]
        ax1.bar([i + (k - 0.5) * width for i in range(len(scenarios))], eds,
                width=width, label=label)
    ax1.set_xticks(range(len(scenarios)))
    ax1.set_xticklabels(scenarios, rotation=20)
    ax1.set_ylabel("mean normalized edit distance")
    ax1.legend()
    accs = [report["mean"][label]["hidden_field_accuracy"]["with_prev"]
            for label in ("baseline", "context")]
    ax2.bar(["baseline", "context"], accs)
    ax2.axhline(report["chance_bound"], color="red", linestyle="--", label="chance")
    ax2.set_ylabel("hidden-field accuracy")
    ax2.set_ylim(0, 1.05)
    ax2.legend()
    fig.tight_layout()
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)


# ----------------------------------------------------------------------
# Resumable state (params + optimizer moments + epoch)
# ----------------------------------------------------------------------


def save_train_state(path: str, model: Model, opt: AdamW, next_epoch: int) -> None:
    extra = opt.state_tensors()
    extra["opt.next_epoch"] = np.array([next_epoch], dtype=np.int64)
    save_checkpoint(path, model, extra=extra)


def load_train_state(path: str, model_cfg: ModelConfig
                     ) -> tuple[Model, dict, int]:
    model, extra = load_checkpoint(path, expect_cfg=model_cfg)
    next_epoch = int(extra.pop("opt.next_epoch")[0])
    return model, extra, next_epoch
