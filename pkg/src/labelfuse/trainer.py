"""Deterministic training loop with Adam and versioned checkpoints.

Everything is a pure function of (config, corpus): parameter init, label
construction, per-epoch shuffling and the optimizer state all derive from
the config seed, so identical inputs reproduce identical logs, parameters
and checkpoint bytes. Batch gradients are averaged, not summed, keeping
the learning rate insensitive to batch size.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import evalkit
from .corpus import Corpus
from .diffcore import Matrix, backward
from .encoders import DEFAULT_DIM
from .errors import (
    CheckpointIntegrityError,
    ConfigError,
    DivergenceError,
    DimensionError,
    NonFiniteError,
    UnsupportedVersionError,
)
from .fusion import (
    DEFAULT_LOSS_WEIGHTS,
    FusionMode,
    ModelParams,
    forward,
    init_model,
    unimodal_forward,
)
from .labelkit import (
    LabelBank,
    SPEECH_INIT_MODES,
    TEXT_INIT_MODES,
    build_speech_labels,
    build_text_labels,
    speech_view,
    text_view,
    tfidf_topk,
)

CHECKPOINT_VERSION = 1
_CHECKPOINT_MAGIC = b"LABELFUSE-CKPT\n"

MODALITIES = ("multimodal", "text", "speech")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    learning_rate: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    mu_main: float = DEFAULT_LOSS_WEIGHTS[0]
    mu_constraint: float = DEFAULT_LOSS_WEIGHTS[1]
    mu_guide_text: float = DEFAULT_LOSS_WEIGHTS[2]
    mu_guide_speech: float = DEFAULT_LOSS_WEIGHTS[3]
    fusion_mode: str = "constraint"
    modality: str = "multimodal"
    text_label_init: str = "tfidf"
    speech_label_init: str = "codebook"
    top_k_text: int = 9
    top_k_speech: int = 100
    labels_trainable: bool = False
    normalize_label_attention: bool = False
    text_dim: int = DEFAULT_DIM
    speech_dim: int = DEFAULT_DIM
    seed: int = 0

    @property
    def loss_weights(self) -> tuple[float, float, float, float]:
        return (self.mu_main, self.mu_constraint, self.mu_guide_text, self.mu_guide_speech)

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if min(self.loss_weights) < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.fusion_mode not in {m.value for m in FusionMode}:
            raise ConfigError(f"unknown fusion_mode {self.fusion_mode!r}")
        if self.modality not in MODALITIES:
            raise ConfigError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.text_label_init not in TEXT_INIT_MODES:
            raise ConfigError(f"unknown text_label_init {self.text_label_init!r}")
        if self.speech_label_init not in SPEECH_INIT_MODES:
            raise ConfigError(f"unknown speech_label_init {self.speech_label_init!r}")
        if self.top_k_text < 1 or self.top_k_speech < 1:
            raise ConfigError("top-k values must be >= 1")
        if self.text_dim < 1 or self.speech_dim < 1:
            raise ConfigError("dims must be >= 1")
        if self.speech_label_init == "text-embedding" and self.text_dim != self.speech_dim:
            raise DimensionError(
                f"text-embedding speech label init needs text_dim == speech_dim "
                f"({self.text_dim} != {self.speech_dim})"
            )


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss_main: float
    loss_constraint: float
    loss_guide_text: float
    loss_guide_speech: float
    loss_total: float
    train_wa: float
    train_ua: float
    heldout_wa: float
    heldout_ua: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def to_lines(self) -> list[str]:
        lines = [
            "epoch,loss_main,loss_constraint,loss_guide_text,loss_guide_speech,"
            "loss_total,train_wa,train_ua,heldout_wa,heldout_ua"
        ]
        for r in self.records:
            lines.append(
                f"{r.epoch},{r.loss_main:.12g},{r.loss_constraint:.12g},"
                f"{r.loss_guide_text:.12g},{r.loss_guide_speech:.12g},{r.loss_total:.12g},"
                f"{r.train_wa:.12g},{r.train_ua:.12g},{r.heldout_wa:.12g},{r.heldout_ua:.12g}"
            )
        return lines


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def adam_update(
    value: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    t: int,
    learning_rate: float,
    beta1: float,
    beta2: float,
    epsilon: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One bias-corrected Adam step on a single parameter array."""
    if not (value.shape == grad.shape == m.shape == v.shape):
        raise DimensionError(
            f"adam shapes differ: value {value.shape}, grad {grad.shape}, "
            f"m {m.shape}, v {v.shape}"
        )
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return value - learning_rate * m_hat / (np.sqrt(v_hat) + epsilon), m, v


class Adam:
    """Moment state for a named parameter set; skips params with no grad."""

    def __init__(self, config: TrainConfig) -> None:
        self.learning_rate = config.learning_rate
        self.beta1 = config.adam_beta1
        self.beta2 = config.adam_beta2
        self.epsilon = config.adam_epsilon
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, named_params, grad_scale: float = 1.0) -> None:
        self.t += 1
        for name, node in named_params:
            if node.grad is None:
                continue
            grad = node.grad.array * grad_scale
            if name not in self.m:
                self.m[name] = np.zeros(grad.shape)
                self.v[name] = np.zeros(grad.shape)
            new_value, self.m[name], self.v[name] = adam_update(
                node.value.array,
                grad,
                self.m[name],
                self.v[name],
                self.t,
                self.learning_rate,
                self.beta1,
                self.beta2,
                self.epsilon,
            )
            node.value = Matrix(new_value)


# ---------------------------------------------------------------------------
# Model assembly
# ---------------------------------------------------------------------------


def build_label_bank(train_corpus: Corpus, config: TrainConfig, codebook: Matrix,
                     embedding_table: Matrix) -> LabelBank:
    """Label matrices per the configured init modes, from the train split only."""
    spec = train_corpus.spec
    text_desc = None
    if config.text_label_init == "tfidf":
        text_desc = tfidf_topk(text_view(train_corpus), config.top_k_text)
    speech_desc = None
    if config.speech_label_init == "codebook":
        speech_desc = tfidf_topk(speech_view(train_corpus), config.top_k_speech)

    text_labels = build_text_labels(
        text_desc,
        embedding_table,
        config.text_label_init,
        seed=config.seed + 101,
        label_word_ids=list(range(spec.classes)),
        classes=spec.classes,
    )
    speech_labels = build_speech_labels(
        speech_desc,
        codebook,
        config.speech_label_init,
        seed=config.seed + 202,
        text_labels=text_labels,
        classes=spec.classes,
    )
    return LabelBank(
        text_labels=text_labels,
        speech_labels=speech_labels,
        trainable=config.labels_trainable,
        text_mode=config.text_label_init,
        speech_mode=config.speech_label_init,
    )


def build_model(train_corpus: Corpus, config: TrainConfig) -> ModelParams:
    """Seeded model with label rows initialised from the train split.

    The embedding table and codebook are drawn first on their own stream, so
    tfidf/codebook label modes average the very rows the encoders use.
    """
    config.validate()
    spec = train_corpus.spec
    from .encoders import EMBED_INIT_STD

    table_rng = np.random.default_rng([config.seed, 3])
    embedding_table = Matrix(
        table_rng.normal(0.0, EMBED_INIT_STD, size=(spec.vocab_text, config.text_dim))
    )
    codebook = Matrix(
        table_rng.normal(0.0, EMBED_INIT_STD, size=(spec.vocab_speech, config.speech_dim))
    )
    bank = build_label_bank(train_corpus, config, codebook, embedding_table)
    return init_model(
        spec.vocab_text,
        spec.vocab_speech,
        config.text_dim,
        config.speech_dim,
        bank,
        seed=config.seed,
        codebook=codebook,
        embedding_table=embedding_table,
    )


def _utterance_loss(utt, model: ModelParams, config: TrainConfig):
    if config.modality == "multimodal":
        result = forward(
            utt,
            model,
            FusionMode(config.fusion_mode),
            config.loss_weights,
            config.normalize_label_attention,
        )
        b = result.breakdown
        return result.loss, (b.main, b.constraint, b.guide_text, b.guide_speech, b.total)
    result = unimodal_forward(utt, config.modality, model, config.loss_weights)
    total = float(result.loss.value.array[0, 0])
    if config.modality == "text":
        parts = (result.main, 0.0, result.guidance, 0.0, total)
    else:
        parts = (result.main, 0.0, 0.0, result.guidance, total)
    return result.loss, parts


def train(
    train_corpus: Corpus,
    heldout_corpus: Corpus,
    config: TrainConfig,
    resume_from: "Checkpoint | None" = None,
) -> tuple[ModelParams, TrainLog, "Checkpoint"]:
    """Train a model; returns (params, log, final checkpoint).

    Deterministic: identical (config, corpora) give bitwise-identical logs
    and checkpoints. Resuming from an intermediate checkpoint continues the
    exact trajectory of an uninterrupted run.
    """
    config.validate()
    if not len(train_corpus) or not len(heldout_corpus):
        raise ConfigError("both corpus splits must be non-empty")

    model = build_model(train_corpus, config)
    optimizer = Adam(config)
    log = TrainLog()
    start_epoch = 0
    if resume_from is not None:
        if dataclasses.replace(resume_from.config, epochs=config.epochs) != config:
            raise ConfigError("checkpoint config differs from the resume config (beyond epochs)")
        if resume_from.epoch > config.epochs:
            raise ConfigError(
                f"checkpoint already covers {resume_from.epoch} epochs, config asks for {config.epochs}"
            )
        restore_into_model(resume_from, model)
        restore_into_optimizer(resume_from, optimizer)
        log = TrainLog(list(resume_from.log_records))
        start_epoch = resume_from.epoch

    params = model.named_trainable()
    for epoch in range(start_epoch, config.epochs):
        order = np.random.default_rng([config.seed, 1000 + epoch]).permutation(len(train_corpus))
        sums = np.zeros(5)
        for batch_no, start in enumerate(range(0, len(order), config.batch_size)):
            batch = order[start : start + config.batch_size]
            for _, node in params:
                node.zero_grad()
            for idx in batch:
                utt = train_corpus.utterances[int(idx)]
                try:
                    loss, parts = _utterance_loss(utt, model, config)
                    backward(loss)
                except NonFiniteError as exc:
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch}, batch {batch_no}: {exc}"
                    ) from exc
                sums += np.array(parts)
            optimizer.step(params, grad_scale=1.0 / len(batch))
        averages = sums / len(order)
        train_eval = evalkit.evaluate(model_predictor(model, config), train_corpus)
        heldout_eval = evalkit.evaluate(model_predictor(model, config), heldout_corpus)
        log.records.append(
            EpochRecord(
                epoch=epoch,
                loss_main=float(averages[0]),
                loss_constraint=float(averages[1]),
                loss_guide_text=float(averages[2]),
                loss_guide_speech=float(averages[3]),
                loss_total=float(averages[4]),
                train_wa=train_eval.weighted_accuracy,
                train_ua=train_eval.unweighted_accuracy,
                heldout_wa=heldout_eval.weighted_accuracy,
                heldout_ua=heldout_eval.unweighted_accuracy,
            )
        )

    final_metrics = {}
    if log.records:
        final_metrics = {
            "heldout_wa": log.records[-1].heldout_wa,
            "heldout_ua": log.records[-1].heldout_ua,
        }
    checkpoint = make_checkpoint(model, optimizer, config, config.epochs, log, final_metrics)
    return model, log, checkpoint


def model_predictor(model: ModelParams, config: TrainConfig):
    """Per-utterance class prediction matching the configured modality."""
    from .fusion import predict, unimodal_logits

    if config.modality == "multimodal":
        mode = FusionMode(config.fusion_mode)

        def fn(utt):
            return predict(
                utt, model, mode, normalize_label_attention=config.normalize_label_attention
            )

    else:

        def fn(utt):
            return int(np.argmax(unimodal_logits(utt, config.modality, model).array[0]))

    return fn


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    format_version: int
    config: TrainConfig
    epoch: int
    arrays: dict[str, Matrix]  # parameters and optimizer moments
    adam_step_count: int
    log_records: tuple[EpochRecord, ...]
    metrics: dict[str, float]


def make_checkpoint(
    model: ModelParams,
    optimizer: Adam,
    config: TrainConfig,
    epoch: int,
    log: TrainLog,
    metrics: dict[str, float],
) -> Checkpoint:
    arrays: dict[str, Matrix] = {name: node.value for name, node in model.named_arrays()}
    for name, m in optimizer.m.items():
        arrays[f"adam.m.{name}"] = Matrix(m)
    for name, v in optimizer.v.items():
        arrays[f"adam.v.{name}"] = Matrix(v)
    return Checkpoint(
        format_version=CHECKPOINT_VERSION,
        config=config,
        epoch=epoch,
        arrays=arrays,
        adam_step_count=optimizer.t,
        log_records=tuple(log.records),
        metrics=dict(metrics),
    )


def restore_into_model(checkpoint: Checkpoint, model: ModelParams) -> None:
    for name, node in model.named_arrays():
        stored = checkpoint.arrays.get(name)
        if stored is None:
            raise CheckpointIntegrityError(f"checkpoint is missing array {name!r}")
        if stored.shape != node.value.shape:
            raise DimensionError(
                f"checkpoint array {name!r} has shape {stored.shape}, expected {node.value.shape}"
            )
        node.value = stored


def restore_into_optimizer(checkpoint: Checkpoint, optimizer: Adam) -> None:
    optimizer.t = checkpoint.adam_step_count
    for name, matrix in checkpoint.arrays.items():
        if name.startswith("adam.m."):
            optimizer.m[name[len("adam.m.") :]] = matrix.array.copy()
        elif name.startswith("adam.v."):
            optimizer.v[name[len("adam.v.") :]] = matrix.array.copy()


def model_from_checkpoint(checkpoint: Checkpoint) -> ModelParams:
    """Self-contained model rebuild; shapes and values come from the arrays."""
    from .diffcore import constant, parameter
    from .encoders import SpeechEncoderParams, TextEncoderParams
    from .fusion import FusionParams

    a = checkpoint.arrays

    def need(name: str) -> Matrix:
        if name not in a:
            raise CheckpointIntegrityError(f"checkpoint is missing array {name!r}")
        return a[name]

    wrap = parameter if checkpoint.config.labels_trainable else constant
    return ModelParams(
        text=TextEncoderParams(
            embedding=parameter(need("text.embedding")),
            query_w=parameter(need("text.query_w")),
            key_w=parameter(need("text.key_w")),
            value_w=parameter(need("text.value_w")),
        ),
        speech=SpeechEncoderParams(
            codebook=constant(need("speech.codebook")),
            query_w=parameter(need("speech.query_w")),
            key_w=parameter(need("speech.key_w")),
            value_w=parameter(need("speech.value_w")),
            post_w=parameter(need("speech.post_w")),
        ),
        fusion=FusionParams(
            cross_map=parameter(need("fusion.cross_map")),
            classifier_w=parameter(need("fusion.classifier_w")),
            classifier_b=parameter(need("fusion.classifier_b")),
            text_head_w=parameter(need("fusion.text_head_w")),
            text_head_b=parameter(need("fusion.text_head_b")),
            speech_head_w=parameter(need("fusion.speech_head_w")),
            speech_head_b=parameter(need("fusion.speech_head_b")),
        ),
        text_labels=wrap(need("labels.text")),
        speech_labels=wrap(need("labels.speech")),
        labels_trainable=checkpoint.config.labels_trainable,
    )


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    """Versioned container: magic, JSON manifest, raw little-endian blobs."""
    names = sorted(checkpoint.arrays)
    blob = bytearray()
    entries = []
    for name in names:
        matrix = checkpoint.arrays[name]
        raw = matrix.array.astype("<f8").tobytes(order="C")
        entries.append(
            {
                "name": name,
                "rows": matrix.rows,
                "cols": matrix.cols,
                "offset": len(blob),
                "crc32": zlib.crc32(raw),
            }
        )
        blob.extend(raw)
    manifest = {
        "format_version": checkpoint.format_version,
        "config": dataclasses.asdict(checkpoint.config),
        "epoch": checkpoint.epoch,
        "adam_step_count": checkpoint.adam_step_count,
        "log_records": [dataclasses.asdict(r) for r in checkpoint.log_records],
        "metrics": checkpoint.metrics,
        "arrays": entries,
    }
    payload = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        fh.write(bytes(blob))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(_CHECKPOINT_MAGIC):
        raise CheckpointIntegrityError("not a checkpoint file (bad magic)")
    header_end = len(_CHECKPOINT_MAGIC) + 8
    if len(data) < header_end:
        raise CheckpointIntegrityError("truncated checkpoint header")
    (manifest_len,) = struct.unpack("<Q", data[len(_CHECKPOINT_MAGIC) : header_end])
    manifest_end = header_end + manifest_len
    if len(data) < manifest_end:
        raise CheckpointIntegrityError("truncated checkpoint manifest")
    try:
        manifest = json.loads(data[header_end:manifest_end])
    except json.JSONDecodeError as exc:
        raise CheckpointIntegrityError(f"corrupted manifest: {exc.msg}") from None

    version = manifest.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(
            f"checkpoint format version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )
    blob = data[manifest_end:]
    arrays: dict[str, Matrix] = {}
    for entry in manifest["arrays"]:
        size = entry["rows"] * entry["cols"] * 8
        chunk = blob[entry["offset"] : entry["offset"] + size]
        if len(chunk) != size:
            raise CheckpointIntegrityError(f"truncated array {entry['name']!r}")
        if zlib.crc32(chunk) != entry["crc32"]:
            raise CheckpointIntegrityError(f"checksum mismatch for array {entry['name']!r}")
        values = np.frombuffer(chunk, dtype="<f8").reshape(entry["rows"], entry["cols"])
        arrays[entry["name"]] = Matrix(values)

    cfg = dict(manifest["config"])
    config = TrainConfig(**cfg)
    records = tuple(EpochRecord(**r) for r in manifest["log_records"])
    return Checkpoint(
        format_version=version,
        config=config,
        epoch=manifest["epoch"],
        arrays=arrays,
        adam_step_count=manifest["adam_step_count"],
        log_records=records,
        metrics=dict(manifest["metrics"]),
    )
