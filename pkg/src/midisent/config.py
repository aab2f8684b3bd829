"""Flat ``key = value`` run configuration shared by every subcommand.

Files hold one assignment per line; ``#`` starts a comment.  Keys are fixed
(see :data:`SCHEMA`) and unknown keys are rejected.  Later sources override
earlier ones: schema defaults, then the file, then command-line flags.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

from .data import CorpusSpec, eval_spec, finetune_spec, pretrain_spec
from .errors import CheckpointError, ConfigError
from .model import ModelConfig
from .objectives import OBJECTIVES, LossWeights, MarginConfig
from .optim import FINETUNE_SCHEDULE, PRETRAIN_SCHEDULE, ScheduleConfig
from .training import TrainConfig


@dataclass(frozen=True)
class Key:
    name: str
    kind: type
    default: object
    help: str


def _keys(prefix: str, kind: type, names: str, help: str) -> list[Key]:
    return [Key(f"{prefix}.{n}", kind, None, help) for n in names.split()]


SCHEMA: list[Key] = [
    Key("seed", int, 0, "master seed for data, initialisation and batching"),
    Key("mode", str, "finetune", "train mode: pretrain | finetune"),
    Key("objective", str, "full", "loss preset: " + " | ".join(OBJECTIVES)),
    Key("corpus", str, None, "input corpus file"),
    Key("out", str, None, "output file or directory"),
    Key("log", str, None, "metrics log path (train)"),
    Key("state", str, None, "resumable training-state path (train)"),
    Key("init_encoder", str, None, "encoder checkpoint to start fine-tuning from"),
    Key("checkpoint", str, None, "model checkpoint (eval, export-emb)"),
    Key("trials", str, None, "trial protocol (eval); generated from the corpus when absent"),
    Key("probe_corpus", str, None, "corpus for the linear probes (eval); defaults to corpus"),
    Key("export", str, None, "optional embedding export path (eval)"),
    Key("num_trials", int, 2000, "trials generated when no protocol is given"),
    Key("branch", str, "speaker", "embedding scored in eval: speaker | device | initial"),
    Key("mindcf.c_miss", float, 1.0, "miss cost"),
    Key("mindcf.c_fa", float, 1.0, "false-alarm cost"),
    Key("mindcf.p_target", float, 0.05, "target prior"),
    Key("mindcf.normalize", bool, False, "divide MinDCF by the best trivial cost"),
    Key("mi.rhos", str, "0,0.3,0.6,0.9", "comma-separated correlations for the Gaussian sweep"),
    Key("mi.dims", str, "1", "comma-separated dimensions for the Gaussian sweep"),
    Key("mi.n", int, 4096, "samples per Gaussian configuration"),
    Key("mi.steps", int, 2000, "Adam steps when fitting q1"),
    Key("mi.lr", float, 1e-3, "Adam rate when fitting q1"),
    Key("mi.hidden", int, 16, "hidden width of q1 in the sweep"),
    Key("mi.joints", int, 1000, "random joints in the discrete suite"),
    Key("mi.joint_shape", str, "4,4", "shape of each random joint"),
] + (
    _keys("data", int, "num_speakers num_devices utts_per_pair feat_dim frames device_seed",
          "corpus shape override (gen-data)")
    + _keys("data", float, "speaker_scale device_scale noise_scale", "generator scale override (gen-data)")
    + _keys("model", int, "embed_dim enc_hidden var_hidden", "model width override")
    + _keys("train", int, "epochs batches_per_epoch n_speakers inner_steps", "training loop override")
    + _keys("train", float, "weight_decay var_lr grad_clip", "optimiser override")
    + [Key("train.debug", bool, False, "checksum parameter isolation every step")]
    + _keys("schedule", float, "cycle_epochs lr_max lr_min decay", "SGDR override")
    + [Key("schedule.num_cycles", int, None, "SGDR override")]
    + _keys("weights", float, "cls_s cls_d mi_sd mi_dy mi_sy", "per-term weight override of the preset")
    + _keys("margin", float, "scale margin ap_scale_init ap_bias_init", "margin / prototypical override")
)
KEYS = {k.name: k for k in SCHEMA}


def _convert(key: Key, raw) -> object:
    if raw is None or not isinstance(raw, str):
        return raw
    try:
        if key.kind is bool:
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        return key.kind(raw.strip())
    except ValueError:
        raise ConfigError(f"{key.name}: cannot parse {raw!r} as {key.kind.__name__}") from None


class RunConfig:
    """Merged configuration; read values with ``cfg["key"]``."""

    def __init__(self, values: dict | None = None):
        self._values = {k.name: k.default for k in SCHEMA}
        self.update(values or {})

    def update(self, values: dict) -> None:
        for name, raw in values.items():
            if name not in KEYS:
                raise ConfigError(f"unknown configuration key {name!r}")
            self._values[name] = _convert(KEYS[name], raw)

    def __getitem__(self, name: str):
        return self._values[name]

    def as_dict(self) -> dict:
        return {k: v for k, v in sorted(self._values.items()) if v is not None}

    def to_text(self) -> str:
        return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n" for k, v in self.as_dict().items())

    def require(self, *names: str) -> None:
        missing = [n for n in names if self._values[n] is None]
        if missing:
            raise ConfigError(f"missing required setting(s): {', '.join(missing)}")

    def _group(self, prefix: str) -> dict:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self._values.items() if k.startswith(prefix + ".") and v is not None}

    # -- typed views -------------------------------------------------------
    def corpus_specs(self) -> dict[str, CorpusSpec]:
        over = self._group("data")
        seed = self["seed"]
        return {"pretrain": pretrain_spec(seed, **over), "finetune": finetune_spec(seed, **over),
                "eval": eval_spec(seed, **over)}

    def model_config(self, spec: CorpusSpec) -> ModelConfig:
        return ModelConfig(feat_dim=spec.feat_dim, frames=spec.frames, num_speakers=spec.num_speakers,
                           num_devices=spec.num_devices, **self._group("model"))

    def loss_weights(self) -> LossWeights:
        if self["objective"] not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {', '.join(OBJECTIVES)}")
        base = OBJECTIVES[self["objective"]]
        return LossWeights(**{**asdict(base), **self._group("weights")})

    def schedule(self) -> ScheduleConfig:
        base = PRETRAIN_SCHEDULE if self["mode"] == "pretrain" else FINETUNE_SCHEDULE
        return ScheduleConfig(**{**asdict(base), **self._group("schedule")})

    def train_config(self) -> TrainConfig:
        if self["mode"] not in ("pretrain", "finetune"):
            raise ConfigError("mode must be pretrain or finetune")
        schedule = self.schedule()
        over = self._group("train")
        if self["mode"] == "pretrain" and "epochs" not in over:
            over["epochs"] = int(round(schedule.total_epochs))
        return TrainConfig(weights=self.loss_weights(), margin=MarginConfig(**self._group("margin")),
                           schedule=schedule, seed=self["seed"], **over)

    def float_list(self, name: str) -> list[float]:
        try:
            return [float(v) for v in self[name].split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"{name}: expected comma-separated numbers") from None

    def int_list(self, name: str) -> list[int]:
        return [int(v) for v in self.float_list(name)]


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise CheckpointError(f"cannot read config {path}: {exc}") from exc
        cfg.update(parse_config_text(text, str(path)))
    cfg.update(overrides or {})
    return cfg
