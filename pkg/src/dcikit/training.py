"""End-to-end training and evaluation of the toy interleaved pipeline.

A run loads a manifest, builds a vocabulary from it, splits 9:1 per
dataset, trains with Adam for a fixed number of epochs, then evaluates
the validation split by greedy generation. Everything is deterministic
given (seed, config, manifest): batch order comes from the documented
LCG and all arithmetic is float64.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import metrics as mt
from .autodiff import Tape, Tensor
from .connector import ConnectorConfig, connect, init_projector_params
from .data import (Lcg, SampleRecord, fnv1a64, load_manifest,
                   load_record_images, split_per_dataset)
from .decoder import (DecoderConfig, Vocab, assemble_interleaved_sequence,
                      build_plan, forward_loss, greedy_generate,
                      init_decoder_params)
from .errors import ConfigurationError
from .transformer import wrap_params
from .vision import VisionConfig, encode_all_layers, init_vision_params

PAPER_STYLE_LR = 2e-5  # the --paper-lr value; suits large models, not this toy


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError("learning rate must be positive")


@dataclass(frozen=True)
class RunConfig:
    vision: VisionConfig
    connector: ConnectorConfig
    decoder: DecoderConfig
    optimizer: OptimizerConfig = OptimizerConfig()
    epochs: int = 1
    batch_size: int = 8
    seed: int = 0
    split_ratio: float = 0.9
    eval_max_new: int = 8
    manifest: str = ""
    out_dir: str = ""

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be >= 1")
        if self.connector.layers != self.vision.layers:
            raise ConfigurationError("connector layer count must match the vision encoder")
        if self.connector.width != self.vision.width:
            raise ConfigurationError("connector width must match the vision encoder")
        if self.connector.lm_width != self.decoder.lm_width:
            raise ConfigurationError("connector output width must match the decoder")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, obj: Mapping) -> "RunConfig":
        """Build from a plain dict; connector widths default to the
        matching vision/decoder values when omitted."""
        vision = VisionConfig(**obj["vision"])
        decoder = DecoderConfig(**obj["decoder"])
        conn = dict(obj.get("connector", {}))
        conn.setdefault("layers", vision.layers)
        conn.setdefault("width", vision.width)
        conn.setdefault("lm_width", decoder.lm_width)
        connector = ConnectorConfig(**conn)
        optimizer = OptimizerConfig(**obj.get("optimizer", {}))
        extras = {k: obj[k] for k in ("epochs", "batch_size", "seed", "split_ratio",
                                      "eval_max_new", "manifest", "out_dir") if k in obj}
        return cls(vision=vision, connector=connector, decoder=decoder,
                   optimizer=optimizer, **extras)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def default_run_config(manifest: str = "", out_dir: str = "", dci: bool = True,
                       layers: int = 6, groups: int = 3, seed: int = 0,
                       **overrides) -> RunConfig:
    """The toy defaults: an 8px image, 6 encoder blocks in 3 groups."""
    vision = VisionConfig(image_size=8, patch_size=4, width=16,
                          layers=layers, heads=2, seed=seed)
    decoder = DecoderConfig(lm_width=32, blocks=2, heads=2,
                            vocab_size=0, max_len=0, seed=seed)
    connector = ConnectorConfig(layers=layers, groups=groups, width=vision.width,
                                hidden=32, lm_width=decoder.lm_width, dci_enabled=dci)
    return RunConfig(vision=vision, connector=connector, decoder=decoder,
                     manifest=manifest, out_dir=out_dir, seed=seed, **overrides)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, opt: OptimizerConfig) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, in place."""
    state.t += 1
    b1t = 1.0 - opt.beta1 ** state.t
    b2t = 1.0 - opt.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ConfigurationError(
                f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        state.m[name] = opt.beta1 * state.m[name] + (1.0 - opt.beta1) * g
        state.v[name] = opt.beta2 * state.v[name] + (1.0 - opt.beta2) * g * g
        m_hat = state.m[name] / b1t
        v_hat = state.v[name] / b2t
        p -= opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    return params, state


# ---------------------------------------------------------------------------
# loss log and run comparison


@dataclass
class LossLog:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    meta: dict[str, str] = field(default_factory=dict)

    def append(self, step: int, loss: float) -> None:
        if self.steps and step <= self.steps[-1]:
            raise ConfigurationError("steps must be strictly increasing")
        if not math.isfinite(loss):
            raise ConfigurationError(f"non-finite loss {loss} at step {step}")
        self.steps.append(step)
        self.losses.append(loss)

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            fh.write("step,loss\n")
            for s, l in zip(self.steps, self.losses):
                fh.write(f"{s},{l!r}\n")

    @classmethod
    def from_csv(cls, path: str | Path) -> "LossLog":
        log = cls()
        with Path(path).open("r", encoding="utf-8") as fh:
            header = fh.readline().strip()
            if header != "step,loss":
                raise ConfigurationError(f"unexpected loss log header {header!r}")
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                s, l = line.split(",")
                log.append(int(s), float(l))
        return log


def _window_stats(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.var())


@dataclass(frozen=True)
class LossComparison:
    """Early means, final-window means and variances of two runs.

    Reports the quantities a faster-early-convergence or late-variance
    story would rest on; it takes no side on which run should win.
    """

    first_k: int
    a_first_mean: float
    b_first_mean: float
    a_final_mean: float
    b_final_mean: float
    a_final_var: float
    b_final_var: float

    @property
    def first_mean_delta(self) -> float:
        return self.b_first_mean - self.a_first_mean

    @property
    def final_mean_delta(self) -> float:
        return self.b_final_mean - self.a_final_mean

    @property
    def final_var_delta(self) -> float:
        return self.b_final_var - self.a_final_var

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["first_mean_delta"] = self.first_mean_delta
        d["final_mean_delta"] = self.final_mean_delta
        d["final_var_delta"] = self.final_var_delta
        return d


def compare_loss_curves(log_a: LossLog, log_b: LossLog, first_k: int) -> LossComparison:
    """Compare two loss logs over their first and last ``first_k`` steps."""
    if not log_a.losses or not log_b.losses:
        raise ConfigurationError("both loss logs must be non-empty")
    if first_k < 1 or first_k > min(len(log_a.losses), len(log_b.losses)):
        raise ValueError(f"first_k={first_k} outside the range of the shorter log")
    a_first, _ = _window_stats(log_a.losses[:first_k])
    b_first, _ = _window_stats(log_b.losses[:first_k])
    a_final_mean, a_final_var = _window_stats(log_a.losses[-first_k:])
    b_final_mean, b_final_var = _window_stats(log_b.losses[-first_k:])
    return LossComparison(first_k=first_k,
                          a_first_mean=a_first, b_first_mean=b_first,
                          a_final_mean=a_final_mean, b_final_mean=b_final_mean,
                          a_final_var=a_final_var, b_final_var=b_final_var)


# ---------------------------------------------------------------------------
# parameter serialization

_PARAMS_MAGIC = b"DCKP"
_PARAMS_VERSION = 1


def save_params(params: Mapping[str, np.ndarray], path: str | Path) -> None:
    """Flat little-endian layout: magic, version, count, then per entry
    name (u16 length + utf-8), ndim (u8), dims (u32 each), float64 data."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(_PARAMS_MAGIC)
        fh.write(struct.pack("<II", _PARAMS_VERSION, len(params)))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != _PARAMS_MAGIC:
        raise ConfigurationError(f"{path}: not a parameter file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != _PARAMS_VERSION:
        raise ConfigurationError(f"{path}: unsupported version {version}")
    pos = 12
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos)
        pos += 8 * n
        params[name] = arr.reshape(shape).astype(np.float64)
    return params


# ---------------------------------------------------------------------------
# model assembly and the loop


def init_all_params(vision_cfg: VisionConfig, conn_cfg: ConnectorConfig,
                    dec_cfg: DecoderConfig, seed: int) -> dict[str, np.ndarray]:
    params = {}
    params.update(init_vision_params(vision_cfg, seed ^ fnv1a64("vision")))
    params.update(init_projector_params(conn_cfg, seed ^ fnv1a64("connector")))
    params.update(init_decoder_params(dec_cfg, seed ^ fnv1a64("decoder")))
    return params


def _images_to_tensors(images: Sequence[np.ndarray]) -> list[Tensor]:
    return [Tensor.const(img.astype(np.float64) / 255.0) for img in images]


def _vision_tokens(images: Sequence[np.ndarray], leaves: dict[str, Tensor],
                   vision_cfg: VisionConfig, conn_cfg: ConnectorConfig) -> list[Tensor]:
    tokens = []
    for img in _images_to_tensors(images):
        stack = encode_all_layers(img, vision_cfg, leaves)
        tokens.append(connect(stack, conn_cfg, leaves))
    return tokens


def sample_loss(record: SampleRecord, images: Sequence[np.ndarray],
                leaves: dict[str, Tensor], vocab: Vocab, vision_cfg: VisionConfig,
                conn_cfg: ConnectorConfig, dec_cfg: DecoderConfig) -> Tensor:
    """Answer-span cross-entropy for one sample."""
    vt = _vision_tokens(images, leaves, vision_cfg, conn_cfg)
    plan = build_plan(vocab, record.prompt, record.answer,
                      [vision_cfg.tokens] * len(vt))
    seq = assemble_interleaved_sequence(plan, vt, leaves["decoder.embed"])
    return forward_loss(seq, leaves, dec_cfg)


def _finalize_decoder(dec_cfg: DecoderConfig, vocab: Vocab, records: Sequence[SampleRecord],
                      vision_tokens: int, max_new: int) -> DecoderConfig:
    """Fill vocab size and grow max_len to fit every expanded sequence."""
    longest = 0
    for r in records:
        n_img = len(r.images)
        text = 1 + len(vocab.tokenize(r.prompt)) + len(vocab.tokenize(r.answer)) + 1
        longest = max(longest, text - n_img + n_img * vision_tokens)
    needed = longest + max_new + 2
    return dataclasses.replace(dec_cfg, vocab_size=vocab.size,
                               max_len=max(dec_cfg.max_len, needed))


@dataclass
class TrainResult:
    config: RunConfig
    params: dict[str, np.ndarray]
    loss_log: LossLog
    report: mt.MetricReport
    scored: list[mt.ScoredSample]
    vocab: Vocab


def train(cfg: RunConfig, records: Sequence[SampleRecord] | None = None,
          root: str | Path | None = None,
          progress: Callable[[int, float], None] | None = None) -> TrainResult:
    """Run the full loop and, when cfg.out_dir is set, write loss_log.csv,
    params.bin, vocab.json, run_config.json, report.txt and scores.csv."""
    if records is None:
        records = load_manifest(cfg.manifest)
        root = Path(cfg.manifest).parent
    if root is None:
        raise ConfigurationError("records passed directly need a root directory")
    root = Path(root)

    texts = []
    for r in records:
        texts.extend([r.prompt, r.answer])
        texts.extend(r.choices or [])
    vocab = Vocab.build(texts)
    dec_cfg = _finalize_decoder(cfg.decoder, vocab, records,
                                cfg.vision.tokens, cfg.eval_max_new)
    effective = dataclasses.replace(cfg, decoder=dec_cfg)

    train_recs, val_recs = split_per_dataset(records, cfg.split_ratio, cfg.seed)
    params = init_all_params(cfg.vision, cfg.connector, dec_cfg, cfg.seed)
    state = AdamState.for_params(params)
    log = LossLog(meta={"config_hash": effective.config_hash(),
                        "dci": str(cfg.connector.dci_enabled), "seed": str(cfg.seed)})

    image_cache = {r.id: load_record_images(r, root) for r in records}

    step = 0
    for epoch in range(cfg.epochs):
        order = list(range(len(train_recs)))
        Lcg(cfg.seed ^ fnv1a64(f"epoch-{epoch}")).shuffle(order)
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_recs[i] for i in order[start:start + cfg.batch_size]]
            tape = Tape()
            leaves = wrap_params(params, tape)
            losses = [sample_loss(r, image_cache[r.id], leaves, vocab,
                                  cfg.vision, cfg.connector, dec_cfg) for r in batch]
            batch_loss = ad.reduce_mean(losses)
            ad.backward(batch_loss)
            grads = {name: (tape.gradients[leaf.node_id].data
                            if leaf.node_id in tape.gradients else np.zeros_like(params[name]))
                     for name, leaf in leaves.items()}
            adam_step(params, grads, state, cfg.optimizer)
            step += 1
            log.append(step, batch_loss.item())
            if progress is not None:
                progress(step, log.losses[-1])

    report, scored = evaluate(params, val_recs, root, vocab,
                              cfg.vision, cfg.connector, dec_cfg,
                              max_new=cfg.eval_max_new)

    if cfg.out_dir:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        log.to_csv(out / "loss_log.csv")
        save_params(params, out / "params.bin")
        (out / "vocab.json").write_text(json.dumps(vocab.to_json(), sort_keys=True) + "\n",
                                        encoding="utf-8")
        (out / "run_config.json").write_text(
            json.dumps(effective.to_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8")
        (out / "report.txt").write_text(mt.render_report(report), encoding="utf-8")
        write_scores_csv(scored, out / "scores.csv",
                         {r.dataset: r.task for r in records})

    return TrainResult(config=effective, params=params, loss_log=log,
                       report=report, scored=scored, vocab=vocab)


def default_metric(record: SampleRecord) -> str:
    return "accuracy" if record.answer_type == "mcq" else "rouge_l"


def evaluate(params: Mapping[str, np.ndarray], records: Sequence[SampleRecord],
             root: str | Path, vocab: Vocab, vision_cfg: VisionConfig,
             conn_cfg: ConnectorConfig, dec_cfg: DecoderConfig, max_new: int = 8,
             metric_overrides: Mapping[str, str] | None = None,
             ) -> tuple[mt.MetricReport, list[mt.ScoredSample]]:
    """Greedy-generate an answer per sample and score it with the dataset's
    metric (override map first, else mcq -> accuracy, open -> rouge_l)."""
    overrides = dict(metric_overrides or {})
    for name, metric in overrides.items():
        if metric not in mt.METRICS:
            raise ConfigurationError(f"unknown metric tag {metric!r} for dataset {name!r}")
    root = Path(root)
    leaves = wrap_params(dict(params), None)
    scored: list[mt.ScoredSample] = []
    task_by_dataset: dict[str, str] = {}
    for record in sorted(records, key=lambda r: r.id):
        task_by_dataset[record.dataset] = record.task
        images = load_record_images(record, root)
        vt = _vision_tokens(images, leaves, vision_cfg, conn_cfg)
        plan = build_plan(vocab, record.prompt, None, [vision_cfg.tokens] * len(vt))
        text = greedy_generate(plan, vt, leaves, dec_cfg, vocab, max_new)
        metric = overrides.get(record.dataset, default_metric(record))
        if metric == "accuracy":
            score = mt.accuracy_score(text, record.answer, record.choices)
        else:
            score = mt.rouge_l(text, record.answer)
        scored.append(mt.ScoredSample(sample_id=record.id, dataset=record.dataset,
                                      metric=metric, prediction=text,
                                      gold=record.answer, score=score))
    return mt.report_from_samples(scored, task_by_dataset), scored


def write_scores_csv(scored: Sequence[mt.ScoredSample], path: str | Path,
                     task_by_dataset: Mapping[str, str]) -> None:
    """Per-sample delimited scores; the raw material for report rendering."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("id,dataset,task,metric,score,prediction,gold\n")
        for s in scored:
            task = task_by_dataset.get(s.dataset, "unknown")
            pred = s.prediction.replace(",", ";")
            gold = s.gold.replace(",", ";")
            fh.write(f"{s.sample_id},{s.dataset},{task},{s.metric},{s.score!r},{pred},{gold}\n")


def read_scores_csv(path: str | Path) -> tuple[list[mt.ScoredSample], dict[str, str]]:
    samples: list[mt.ScoredSample] = []
    task_by_dataset: dict[str, str] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "id,dataset,task,metric,score,prediction,gold":
            raise ConfigurationError(f"unexpected scores header {header!r}")
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            sid, dataset, task, metric, score, pred, gold = line.split(",", 6)
            task_by_dataset[dataset] = task
            samples.append(mt.ScoredSample(sample_id=sid, dataset=dataset, metric=metric,
                                           prediction=pred, gold=gold, score=float(score)))
    return samples, task_by_dataset
