"""Optimization loop, schedules, checkpointing, evaluation, ablation harness.

Everything a run produces lands under a directory whose name carries the
config hash, so two runs with the same config collide on purpose and two
different configs never do.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import (
    CheckpointError, load_checkpoint, restore_params, save_checkpoint,
)
from .instruct import CorpusSampler, MixerConfig, export_corpus
from .losses import LossConfig, NonFiniteLossError
from .lm import Vocabulary
from .metrics import EvalRecord, MetricsReport, evaluate_dataset, format_report, report_to_kv
from .model import AnchorSegModel, ModelConfig, VARIANTS
from .synth import (
    DatasetConfig, ManifestRecord, generate_dataset, generate_texture_image,
    image_to_u8, load_image, load_manifest, load_mask, mask_to_u8, write_f64,
    write_pgm,
)

DEFAULT_INSTRUCTION = "Please segment the anomalies in this image."

ABLATION_LABELS = {
    "full": "full",
    "no-seg-anchor": "w/o [SEG]",
    "no-relative-anchors": "w/o [NOR][ANO]",
    "no-spam": "w/o SPAM",
}


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 3e-4
    warmup_iters: int = 100
    total_iters: int = 1200
    batch_size: int = 8
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 5.0
    adapter_only: bool = False
    adapter_rank: int = 4
    lambda_bce: float = 0.5
    lambda_dice: float = 2.0
    alpha: float = 0.5
    seed: int = 0
    source_weights: tuple[float, float, float, float] = (0.4, 0.25, 0.25, 0.1)
    rejection_templates: bool = True
    variant: str = "full"
    seen_categories: tuple[str, ...] = ("stripes", "checker", "bottle")
    unseen_category: str = "mesh"
    train_per_category: int = 400
    eval_count: int = 100
    anomaly_fraction: float = 0.6
    eval_max_new: int = 48
    log_every: int = 50

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.warmup_iters > self.total_iters:
            raise ValueError("warmup_iters must not exceed total_iters")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")


def config_to_kv(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(cfg):
        val = getattr(cfg, f.name)
        if isinstance(val, tuple):
            val = ",".join(str(v) for v in val)
        lines.append(f"{f.name} = {val}")
    return "\n".join(lines) + "\n"


def config_from_kv(text: str) -> TrainConfig:
    raw = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, val = line.partition("=")
        raw[key.strip()] = val.strip()
    kwargs = {}
    for f in fields(TrainConfig):
        if f.name not in raw:
            continue
        val = raw[f.name]
        if f.type in ("int", int):
            kwargs[f.name] = int(val)
        elif f.type in ("float", float):
            kwargs[f.name] = float(val)
        elif f.type in ("bool", bool):
            kwargs[f.name] = val.lower() in ("1", "true", "yes")
        elif "tuple[float" in str(f.type):
            kwargs[f.name] = tuple(float(v) for v in val.split(",") if v)
        elif "tuple[str" in str(f.type):
            kwargs[f.name] = tuple(v for v in val.split(",") if v)
        else:
            kwargs[f.name] = val
    return TrainConfig(**kwargs)


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(config_to_kv(cfg).encode("utf-8")).hexdigest()[:8]


def dataset_config(cfg: TrainConfig) -> DatasetConfig:
    return DatasetConfig(
        seen_categories=cfg.seen_categories, unseen_category=cfg.unseen_category,
        train_per_category=cfg.train_per_category, eval_count=cfg.eval_count,
        anomaly_fraction=cfg.anomaly_fraction, seed=cfg.seed,
    )


def loss_config(cfg: TrainConfig) -> LossConfig:
    return LossConfig(lambda_bce=cfg.lambda_bce, lambda_dice=cfg.lambda_dice,
                      alpha=cfg.alpha)


# ---------------------------------------------------------------------------
# Schedule and optimizer
# ---------------------------------------------------------------------------

def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Linear warmup to cfg.lr at warmup_iters, then linear decay to 0."""
    if iteration < 0:
        raise ValueError("iteration must be nonnegative")
    if iteration <= cfg.warmup_iters:
        if cfg.warmup_iters == 0:
            return cfg.lr
        return cfg.lr * iteration / cfg.warmup_iters
    span = cfg.total_iters - cfg.warmup_iters
    if span <= 0:
        return 0.0
    return cfg.lr * max(0.0, (cfg.total_iters - iteration) / span)


def decay_excluded(name: str) -> bool:
    """Gains, biases, and the anchor query tokens skip weight decay."""
    return name.endswith(".bias") or name.endswith(".gain") or name.endswith("queries")


class AdamState:
    def __init__(self, params: dict[str, T.Tensor]):
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def to_dict(self):
        return {"t": self.t, "m": self.m, "v": self.v}


def optimizer_step(params: dict[str, T.Tensor], state: AdamState, lr: float,
                   cfg: TrainConfig) -> None:
    """Bias-corrected Adam with decoupled multiplicative weight decay."""
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise NonFiniteLossError(f"non-finite gradient on {name}")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        if cfg.weight_decay and not decay_excluded(name):
            p.data *= 1.0 - lr * cfg.weight_decay
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


def clip_gradients(params: dict[str, T.Tensor], max_norm: float) -> float:
    """Global-norm clip; returns the pre-clip norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def build_vocabulary() -> Vocabulary:
    from .instruct import vocabulary_corpus
    return Vocabulary.build(vocabulary_corpus())


def build_model(cfg: TrainConfig, vocab: Vocabulary | None = None) -> AnchorSegModel:
    vocab = vocab or build_vocabulary()
    return AnchorSegModel(vocab, ModelConfig(
        variant=cfg.variant, encoder_seed=cfg.seed, init_seed=cfg.seed,
        adapter_only=cfg.adapter_only, adapter_rank=cfg.adapter_rank,
    ))


def train_step(model: AnchorSegModel, sampler: CorpusSampler, batch_index: int,
               cfg: TrainConfig, params: dict, state: AdamState) -> tuple[float, float, float]:
    """One optimization step over a mixed batch; returns (L_txt, L_seg, L)."""
    T.reset_graph()
    T.zero_grads(params.values())
    lcfg = loss_config(cfg)
    samples = sampler.batch(batch_index * cfg.batch_size, cfg.batch_size)
    text_sum = None
    seg_sum = None
    for s in samples:
        image = sampler.image_of(s)
        gt = sampler.mask_of(s) if s.has_mask else None
        out = model.training_pass(s.instruction, s.response, image, gt,
                                  s.supervised_heads, lcfg, cache_key=s.image_id)
        text_sum = out["text"] if text_sum is None else T.add(text_sum, out["text"])
        if out["seg"] is not None:
            seg_sum = out["seg"] if seg_sum is None else T.add(seg_sum, out["seg"])
    inv_b = 1.0 / len(samples)
    batch_text = T.mul_scalar(text_sum, inv_b)
    batch_seg = T.mul_scalar(seg_sum, inv_b) if seg_sum is not None else None
    batch_total = T.add(batch_text, batch_seg) if batch_seg is not None else batch_text
    T.backward(batch_total)
    clip_gradients(params, cfg.grad_clip)
    optimizer_step(params, state, lr_at(state.t + 1, cfg), cfg)
    l_txt = batch_text.item()
    l_seg = batch_seg.item() if batch_seg is not None else 0.0
    return l_txt, l_seg, l_txt + l_seg


def train(cfg: TrainConfig, out_root, data_root=None, corpus_preview: int = 1000,
          quiet: bool = False) -> Path:
    """Full training run; returns the run directory."""
    out_root = Path(out_root)
    run_dir = out_root / f"run-{config_hash(cfg)}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(config_to_kv(cfg), encoding="utf-8")

    if data_root is None:
        data_root = run_dir / "data"
        if not (data_root / "manifest.tsv").exists():
            generate_dataset(data_root, dataset_config(cfg))
    data_root = Path(data_root)
    records = load_manifest(data_root / "manifest.tsv")

    vocab = build_vocabulary()
    vocab.save(run_dir / "vocab.txt")
    model = build_model(cfg, vocab)
    sampler = CorpusSampler(data_root, records, MixerConfig(cfg.source_weights, cfg.seed),
                            rejection_templates=cfg.rejection_templates)

    if corpus_preview:
        export_corpus(sampler.batch(0, min(corpus_preview, cfg.total_iters * cfg.batch_size)),
                      run_dir / "corpus.jsonl")

    probe = generate_texture_image(cfg.seen_categories[0], 424242)
    probe_hash = model.encoder_fingerprint(probe)

    params = model.trainable_parameters()
    state = AdamState(params)
    log_lines = []
    for it in range(1, cfg.total_iters + 1):
        l_txt, l_seg, l_tot = train_step(model, sampler, it - 1, cfg, params, state)
        if it % cfg.log_every == 0 or it == 1:
            line = (f"iter {it:5d}  lr {lr_at(it, cfg):.3e}  "
                    f"L_txt {l_txt:.4f}  L_seg {l_seg:.4f}  L {l_tot:.4f}")
            log_lines.append(line)
            if not quiet:
                print(line)
        if it % 100 == 0 and model.encoder_fingerprint(probe) != probe_hash:
            raise RuntimeError("frozen encoder output changed during training")

    (run_dir / "train_log.txt").write_text("\n".join(log_lines) + "\n", encoding="utf-8")
    save_checkpoint(run_dir / "checkpoint.bin", model.named_parameters(),
                    cfg.total_iters, config_to_kv(cfg), state.to_dict())
    return run_dir


def load_model_from_checkpoint(path) -> tuple[AnchorSegModel, TrainConfig]:
    stored = load_checkpoint(path)
    cfg = config_from_kv(stored["config_text"])
    model = build_model(cfg)
    restore_params(model.named_parameters(), stored["params"])
    return model, cfg


# ---------------------------------------------------------------------------
# Evaluation and single-image segmentation
# ---------------------------------------------------------------------------

def run_eval(model: AnchorSegModel, cfg: TrainConfig, data_root, out_dir,
             instruction: str = DEFAULT_INSTRUCTION, split: str = "test",
             quiet: bool = False) -> MetricsReport:
    """Segment every manifest record in `split`, write masks, maps, and report."""
    data_root = Path(data_root)
    out_dir = Path(out_dir)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    (out_dir / "probmaps").mkdir(parents=True, exist_ok=True)
    records = [r for r in load_manifest(data_root / "manifest.tsv") if r.split == split]
    if not records:
        raise ValueError(f"no records in split {split!r}")
    eval_records = []
    transcript_lines = []
    for r in records:
        image = load_image(data_root, r)
        gt = load_mask(data_root, r)
        result = model.segment(image, instruction, max_new=cfg.eval_max_new,
                               cache_key=r.sample_id)
        mask = result.mask()
        score = result.score_map()
        write_pgm(out_dir / "masks" / f"{r.sample_id}.pgm", mask_to_u8(mask))
        write_pgm(out_dir / "probmaps" / f"{r.sample_id}.pgm", image_to_u8(score))
        write_f64(out_dir / "probmaps" / f"{r.sample_id}.f64", score)
        flag_text = ";".join(result.flags) if result.flags else "-"
        transcript_lines.append(f"{r.sample_id}\t{result.response}\t{flag_text}")
        eval_records.append(EvalRecord(
            image_id=r.sample_id, category=r.category, is_anomalous=r.is_anomalous,
            score_map=score, mask=mask, gt=gt))
    report = evaluate_dataset(eval_records)
    (out_dir / "transcripts.tsv").write_text("\n".join(transcript_lines) + "\n",
                                             encoding="utf-8")
    rendered = format_report(report, title=f"evaluation on split {split!r}")
    (out_dir / "report.txt").write_text(rendered, encoding="utf-8")
    (out_dir / "metrics.kv").write_text(report_to_kv(report), encoding="utf-8")
    if not quiet:
        print(rendered, end="")
    return report


def run_segment(model: AnchorSegModel, cfg: TrainConfig, image_path, instruction,
                out_dir) -> "SegmentResult":
    from .synth import read_pgm, u8_to_image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    image = u8_to_image(read_pgm(image_path))
    result = model.segment(image, instruction, max_new=cfg.eval_max_new)
    write_pgm(out_dir / "mask.pgm", mask_to_u8(result.mask()))
    write_pgm(out_dir / "prob.pgm", image_to_u8(result.score_map()))
    write_f64(out_dir / "prob.f64", result.score_map())
    lines = [f"User: {instruction}", f"Assistant: {result.response}"]
    for flag in result.flags:
        lines.append(f"[flag] {flag}")
    (out_dir / "transcript.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return result


# ---------------------------------------------------------------------------
# Ablation harness
# ---------------------------------------------------------------------------

def run_ablation(base_cfg: TrainConfig, out_root, seeds: tuple[int, ...] = (0, 1, 2),
                 variants: tuple[str, ...] = VARIANTS, quiet: bool = False) -> dict:
    """Train every variant over the seeds, evaluate, and emit a side-by-side table."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    results: dict[str, dict[int, dict[str, float]]] = {v: {} for v in variants}
    for variant in variants:
        for seed in seeds:
            cfg = replace(base_cfg, variant=variant, seed=seed)
            run_dir = train(cfg, out_root, quiet=True)
            model, _ = load_model_from_checkpoint(run_dir / "checkpoint.bin")
            report = run_eval(model, cfg, run_dir / "data", run_dir / "eval", quiet=True)
            results[variant][seed] = dict(report.mean)
            if not quiet:
                print(f"[ablate] {variant:>22} seed {seed}: "
                      f"IoU_ano {report.mean['iou_ano']:.3f} IoU_nor {report.mean['iou_nor']:.3f}")

    def median(variant, key):
        return float(np.median([results[variant][s][key] for s in seeds]))

    lines = ["ablation (median over seeds %s)" % (list(seeds),),
             f"{'variant':<18}{'AP':>8}{'F1-Max':>8}{'IoU_nor':>9}{'IoU_ano':>9}"]
    lines.append("-" * len(lines[-1]))
    for variant in variants:
        label = ABLATION_LABELS[variant]
        lines.append(f"{label:<18}"
                     f"{median(variant, 'ap') * 100:>8.1f}"
                     f"{median(variant, 'f1_max') * 100:>8.1f}"
                     f"{median(variant, 'iou_nor') * 100:>9.1f}"
                     f"{median(variant, 'iou_ano') * 100:>9.1f}")
    trend_holds = None
    if "full" in variants and "no-relative-anchors" in variants:
        trend_holds = median("full", "iou_nor") >= median("no-relative-anchors", "iou_nor")
        lines.append("")
        lines.append(f"relative-anchor trend (median IoU_nor full >= w/o [NOR][ANO]): "
                     f"{'holds' if trend_holds else 'violated'}")
    table = "\n".join(lines) + "\n"
    (out_root / "ablation_report.txt").write_text(table, encoding="utf-8")
    if not quiet:
        print(table, end="")
    return {"results": results, "table": table, "trend_holds": trend_holds}
