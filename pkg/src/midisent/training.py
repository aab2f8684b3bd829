"""Alternating optimisation of the variational networks (phi) and the main
networks (theta), encoder pre-training, and resumable training state.

One training step draws a batch, runs the encoder and decoupler once, then

1. updates q1, q2, q3 ``inner_steps`` times on detached embeddings, and
2. updates theta once on the weighted total objective with q1..q3 frozen.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Batch, Corpus, sample_batch
from .errors import CheckpointError, ConfigError
from .mi import vclub_embedding, vclub_label
from .model import (PHI_GROUPS, THETA_GROUPS, DisentangleModel, ModelConfig, SpeakerHead,
                    frozen, load_checkpoint, save_checkpoint, save_model)
from .objectives import (LossTerms, LossWeights, MarginConfig, aam_softmax_loss, nll_categorical,
                         nll_gaussian, speaker_cls_loss, total_loss)
from .optim import FINETUNE_SCHEDULE, Adam, ScheduleConfig, clip_grad_norm, lr_at_step

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "lr", "cls_s", "cls_d", "mi_sd", "mi_dy", "mi_sy", "total")
ENCODER_SHAPE_KEYS = ("feat_dim", "frames", "embed_dim", "enc_hidden")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 4                    # K
    batches_per_epoch: int = 200
    n_speakers: int = 10               # batch holds 2 utterances per speaker
    inner_steps: int = 1               # M
    weights: LossWeights = field(default_factory=LossWeights)
    margin: MarginConfig = field(default_factory=MarginConfig)
    schedule: ScheduleConfig = FINETUNE_SCHEDULE
    weight_decay: float = 2e-5
    var_lr: float = 1e-4
    grad_clip: float = 5.0
    seed: int = 0
    debug: bool = False

    def __post_init__(self):
        if self.inner_steps < 1:
            raise ConfigError("inner_steps (M) must be >= 1")
        if self.n_speakers < 2:
            raise ConfigError("a batch needs at least 2 speakers (N >= 4 utterances)")
        if self.epochs < 1 or self.batches_per_epoch < 1:
            raise ConfigError("epochs and batches_per_epoch must be >= 1")
        if self.weight_decay < 0 or self.var_lr <= 0 or self.grad_clip < 0:
            raise ConfigError("weight_decay, var_lr and grad_clip must be nonnegative (var_lr > 0)")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.batches_per_epoch


@dataclass(frozen=True)
class StepRecord:
    step: int
    epoch: int
    lr: float
    cls_s: float
    cls_d: float
    mi_sd: float
    mi_dy: float
    mi_sy: float
    total: float

    def as_row(self) -> str:
        vals = [str(self.step), str(self.epoch)] + [repr(float(getattr(self, c))) for c in LOG_COLUMNS[2:]]
        return "\t".join(vals)

    @classmethod
    def from_row(cls, line: str) -> StepRecord:
        parts = line.rstrip("\n").split("\t")
        return cls(int(parts[0]), int(parts[1]), *map(float, parts[2:]))


def batch_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, 7, step])


# ----------------------------------------------------------------------
# alternating-update building blocks
# ----------------------------------------------------------------------
def variational_step(model: DisentangleModel, xs: T.Tensor, xd: T.Tensor, ys, yd,
                     optimizers: list[Adam], inner_steps: int = 1, grad_clip: float = 0.0) -> tuple[float, float, float]:
    """``inner_steps`` NLL updates of q1, q2, q3 on detached embeddings; returns the last NLL values."""
    if inner_steps < 1:
        raise ConfigError("inner_steps (M) must be >= 1")
    xs, xd = xs.detach(), xd.detach()
    losses = (0.0, 0.0, 0.0)
    for _ in range(inner_steps):
        nll = (nll_gaussian(model.q1, xs, xd),
               nll_categorical(model.q2, xd, ys),
               nll_categorical(model.q3, xs, yd))
        for i, (loss, opt) in enumerate(zip(nll, optimizers), start=1):
            model.group(PHI_GROUPS[i - 1]).zero_grad()
            T.backward(loss)
            if grad_clip:
                clip_grad_norm(opt.params, grad_clip)
            opt.step()
        losses = tuple(float(l.data) for l in nll)
    return losses


def compute_terms(model: DisentangleModel, xs: T.Tensor, xd: T.Tensor, ys, yd,
                  margin: MarginConfig, head: SpeakerHead | None = None) -> LossTerms:
    """The five loss terms on one batch; q1..q3 are frozen so gradients reach theta only."""
    head = model.speaker_head if head is None else head
    n = xs.shape[0] // 2
    ys = np.asarray(ys)
    with frozen(model.q1, model.q2, model.q3):
        return LossTerms(
            cls_s=speaker_cls_loss(xs[:n], xs[n:], ys[:n], head, margin),
            cls_d=aam_softmax_loss(xd, yd, model.device_head.p("weight"), margin.scale, margin.margin),
            mi_sd=vclub_embedding(model.q1, xs, xd),
            mi_dy=vclub_label(model.q2, xd, ys),
            mi_sy=vclub_label(model.q3, xs, yd),
        )


def main_step(model: DisentangleModel, xs: T.Tensor, xd: T.Tensor, ys, yd, optimizer: Adam,
              weights: LossWeights, margin: MarginConfig, lr: float, grad_clip: float = 0.0) -> tuple[LossTerms, float]:
    """One Adam step on theta for the weighted total objective; returns the terms and total."""
    terms = compute_terms(model, xs, xd, ys, yd, margin)
    loss = total_loss(terms, weights)
    for g in THETA_GROUPS:
        model.group(g).zero_grad()
    T.backward(loss)
    if grad_clip:
        clip_grad_norm(optimizer.params, grad_clip)
    optimizer.step(lr)
    return terms, float(loss.data)


# ----------------------------------------------------------------------
# fine-tuning
# ----------------------------------------------------------------------
@dataclass
class FinetuneResult:
    model: DisentangleModel
    records: list[StepRecord]
    isolation_violations: int = 0
    checks: int = 0


class Finetuner:
    """Runs the alternating phi/theta updates over a corpus, with optional save/resume."""

    def __init__(self, corpus: Corpus, model_cfg: ModelConfig, cfg: TrainConfig,
                 init_encoder: str | Path | None = None):
        if corpus.spec.num_speakers != model_cfg.num_speakers or corpus.spec.num_devices != model_cfg.num_devices:
            raise ConfigError("model speaker/device counts must match the corpus")
        self.corpus = corpus
        self.cfg = cfg
        self.model = DisentangleModel(model_cfg, seed=cfg.seed)
        if init_encoder is not None:
            load_encoder(self.model, init_encoder)
        self.opt_main = Adam(self.model.theta(), lr=cfg.schedule.lr_max, weight_decay=cfg.weight_decay)
        self.opt_var = [Adam(self.model.phi(i), lr=cfg.var_lr, weight_decay=cfg.weight_decay) for i in (1, 2, 3)]
        self.step = 0
        self.records: list[StepRecord] = []
        self.violations = 0
        self.checks = 0

    def train_step(self) -> StepRecord:
        cfg, model = self.cfg, self.model
        batch: Batch = sample_batch(self.corpus, cfg.n_speakers, batch_rng(cfg.seed, self.step))
        lr = lr_at_step(self.step, cfg.batches_per_epoch, cfg.schedule)
        xs, xd = model.embed(batch.features, training=True)

        theta_before = T.checksum(model.theta_state()) if cfg.debug else None
        variational_step(model, xs, xd, batch.speaker_ids, batch.device_ids, self.opt_var,
                         cfg.inner_steps, cfg.grad_clip)
        if cfg.debug:
            self._isolation(theta_before, T.checksum(model.theta_state()), "variational step changed theta")
            phi_before = T.checksum(model.phi())

        terms, total = main_step(model, xs, xd, batch.speaker_ids, batch.device_ids, self.opt_main,
                                 cfg.weights, cfg.margin, lr, cfg.grad_clip)
        if cfg.debug:
            self._isolation(phi_before, T.checksum(model.phi()), "main step changed phi")

        rec = StepRecord(self.step, self.step // cfg.batches_per_epoch, lr, *terms.values(), total)
        self.records.append(rec)
        self.step += 1
        return rec

    def _isolation(self, before: str, after: str, msg: str) -> None:
        self.checks += 1
        if before != after:
            self.violations += 1
            log.error("%s at step %d", msg, self.step)

    def run(self, log_path=None, state_path=None, out_path=None, meta: dict | None = None) -> FinetuneResult:
        log_fh = _open_log(log_path, self.step)
        try:
            while self.step < self.cfg.total_steps:
                rec = self.train_step()
                if log_fh:
                    log_fh.write(rec.as_row() + "\n")
                if (self.step % self.cfg.batches_per_epoch == 0) and state_path:
                    if log_fh:
                        log_fh.flush()
                    self.save_state(state_path)
        finally:
            if log_fh:
                log_fh.close()
        if out_path:
            save_model(out_path, self.model, meta=meta)
        return FinetuneResult(self.model, self.records, self.violations, self.checks)

    # -- resumable state ---------------------------------------------------
    def save_state(self, path) -> None:
        arrays = self.model.state_arrays()
        arrays.update(self.opt_main.state_arrays("opt.main"))
        for i, opt in enumerate(self.opt_var, start=1):
            arrays.update(opt.state_arrays(f"opt.q{i}"))
        save_checkpoint(path, self.model.cfg, list(self.model.groups()), arrays,
                        {"kind": "finetune-state", "step": self.step})

    def load_state(self, path) -> None:
        header, arrays = load_checkpoint(path)
        if header["meta"].get("kind") != "finetune-state":
            raise CheckpointError(f"{path} is not a fine-tuning state file")
        self.model.load_arrays(arrays, list(self.model.groups()))
        self.opt_main.load_arrays(arrays, "opt.main")
        for i, opt in enumerate(self.opt_var, start=1):
            opt.load_arrays(arrays, f"opt.q{i}")
        self.step = int(header["meta"]["step"])


def finetune(corpus: Corpus, model_cfg: ModelConfig, cfg: TrainConfig, init_encoder=None,
             out_path=None, log_path=None, state_path=None, resume: bool = False,
             meta: dict | None = None) -> FinetuneResult:
    tuner = Finetuner(corpus, model_cfg, cfg, init_encoder)
    if resume and state_path and Path(state_path).exists():
        tuner.load_state(state_path)
    return tuner.run(log_path, state_path, out_path, meta)


# ----------------------------------------------------------------------
# encoder pre-training
# ----------------------------------------------------------------------
class Pretrainer:
    """Trains the encoder with a temporary speaker head on the speaker loss alone."""

    def __init__(self, corpus: Corpus, model_cfg: ModelConfig, cfg: TrainConfig):
        self.corpus = corpus
        self.cfg = cfg
        model_cfg = replace(model_cfg, num_speakers=corpus.spec.num_speakers,
                            num_devices=corpus.spec.num_devices)
        self.model = DisentangleModel(model_cfg, seed=cfg.seed)
        self.head = SpeakerHead(model_cfg.num_speakers, model_cfg.embed_dim,
                                np.random.default_rng([cfg.seed, 13]),
                                cfg.margin.ap_scale_init, cfg.margin.ap_bias_init)
        self.opt = Adam(self.model.encoder.parameters() + self.head.parameters(),
                        lr=cfg.schedule.lr_max, weight_decay=cfg.weight_decay)
        self.step = 0
        self.records: list[StepRecord] = []

    def train_step(self) -> StepRecord:
        cfg = self.cfg
        batch = sample_batch(self.corpus, cfg.n_speakers, batch_rng(cfg.seed, self.step))
        lr = lr_at_step(self.step, cfg.batches_per_epoch, cfg.schedule)
        x = self.model.encoder(batch.features, training=True)
        n = batch.n_speakers
        loss = speaker_cls_loss(x[:n], x[n:], batch.speaker_ids[:n], self.head, cfg.margin)
        self.model.encoder.zero_grad()
        self.head.zero_grad()
        T.backward(loss)
        if cfg.grad_clip:
            clip_grad_norm(self.opt.params, cfg.grad_clip)
        self.opt.step(lr)
        value = float(loss.data)
        rec = StepRecord(self.step, self.step // cfg.batches_per_epoch, lr, value, 0.0, 0.0, 0.0, 0.0, value)
        self.records.append(rec)
        self.step += 1
        return rec

    def run(self, log_path=None, state_path=None, out_path=None, meta: dict | None = None) -> DisentangleModel:
        log_fh = _open_log(log_path, self.step)
        try:
            while self.step < self.cfg.total_steps:
                rec = self.train_step()
                if log_fh:
                    log_fh.write(rec.as_row() + "\n")
                if (self.step % self.cfg.batches_per_epoch == 0) and state_path:
                    if log_fh:
                        log_fh.flush()
                    self.save_state(state_path)
        finally:
            if log_fh:
                log_fh.close()
        if out_path:
            save_encoder(out_path, self.model, meta)
        return self.model

    def save_state(self, path) -> None:
        arrays = self.model.encoder.state_arrays("encoder.")
        arrays.update(self.head.state_arrays("pretrain_head."))
        arrays.update(self.opt.state_arrays("opt.pretrain"))
        save_checkpoint(path, self.model.cfg, ["encoder", "pretrain_head"], arrays,
                        {"kind": "pretrain-state", "step": self.step})

    def load_state(self, path) -> None:
        header, arrays = load_checkpoint(path)
        if header["meta"].get("kind") != "pretrain-state":
            raise CheckpointError(f"{path} is not a pre-training state file")
        self.model.encoder.load_arrays(arrays, "encoder.")
        self.head.load_arrays(arrays, "pretrain_head.")
        self.opt.load_arrays(arrays, "opt.pretrain")
        self.step = int(header["meta"]["step"])


def pretrain_encoder(corpus: Corpus, model_cfg: ModelConfig, cfg: TrainConfig, out_path=None,
                     log_path=None, state_path=None, resume: bool = False,
                     meta: dict | None = None) -> Pretrainer:
    trainer = Pretrainer(corpus, model_cfg, cfg)
    if resume and state_path and Path(state_path).exists():
        trainer.load_state(state_path)
    trainer.run(log_path, state_path, out_path, meta)
    return trainer


def save_encoder(path, model: DisentangleModel, meta: dict | None = None) -> None:
    save_checkpoint(path, model.cfg, ["encoder"], model.encoder.state_arrays("encoder."),
                    {"kind": "encoder", **(meta or {})})


def load_encoder(model: DisentangleModel, path) -> None:
    """Copy encoder weights from any checkpoint carrying the encoder group."""
    header, arrays = load_checkpoint(path)
    if "encoder" not in header["groups"]:
        raise CheckpointError(f"{path} has no encoder parameters")
    theirs = header["config"]
    ours = model.cfg.to_dict()
    for key in ENCODER_SHAPE_KEYS:
        if int(theirs.get(key, -1)) != ours[key]:
            raise CheckpointError(f"encoder checkpoint has {key}={theirs.get(key)}, model expects {ours[key]}")
    model.encoder.load_arrays(arrays, "encoder.")


# ----------------------------------------------------------------------
# metrics log
# ----------------------------------------------------------------------
def _open_log(path, resume_step: int):
    """Open the tab-separated metrics log, keeping the header and the first ``resume_step`` rows."""
    if not path:
        return None
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = "\t".join(LOG_COLUMNS) + "\n"
    kept = []
    if resume_step and path.exists():
        kept = path.read_text().splitlines(keepends=True)[1:1 + resume_step]
        if len(kept) != resume_step:
            raise CheckpointError(f"metrics log {path} has fewer rows than the resumed step {resume_step}")
    fh = open(path, "w")
    fh.write(header)
    fh.writelines(kept)
    return fh


def read_log(path) -> list[StepRecord]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].split("\t") != list(LOG_COLUMNS):
        raise CheckpointError(f"{path} is not a metrics log")
    return [StepRecord.from_row(line) for line in lines[1:] if line.strip()]
