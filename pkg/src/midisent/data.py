"""Synthetic corpora with known speaker/device factors, batch sampling, and
correlated Gaussian pairs for the MI oracles.

An utterance of speaker ``s`` recorded on device ``d`` has frames

    column_t = g_d * (z_s + noise_scale * eps_t) + b_d

with ``z_s ~ N(0, speaker_scale^2 I)``, ``g_d = exp(device_scale * a_d)`` and
``b_d = device_scale * c_d`` for standard normal ``a_d, c_d``.  Every random
draw comes from a counter-seeded generator, so a corpus is a pure function of
its :class:`CorpusSpec`.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError, DegenerateBatchError, ValidationError

CORPUS_MAGIC = b"MIDISENT-CORPUS"
CORPUS_VERSION = 1

# generator stream tags
_SPEAKER_STREAM, _DEVICE_STREAM, _UTT_STREAM = 1, 2, 3


@dataclass(frozen=True)
class CorpusSpec:
    num_speakers: int = 20
    num_devices: int = 3
    utts_per_pair: int = 10
    feat_dim: int = 8
    frames: int = 20
    speaker_scale: float = 1.0
    device_scale: float = 0.5
    noise_scale: float = 0.5
    seed: int = 0
    device_seed: int = 0

    def __post_init__(self):
        if self.num_speakers < 2:
            raise ConfigError("num_speakers must be >= 2")
        if self.num_devices < 1:
            raise ConfigError("num_devices must be >= 1")
        if self.utts_per_pair < 1 or self.feat_dim < 1 or self.frames < 2:
            raise ConfigError("utts_per_pair, feat_dim must be >= 1 and frames >= 2")
        if min(self.speaker_scale, self.device_scale, self.noise_scale) < 0:
            raise ConfigError("scales must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> CorpusSpec:
        kinds = {f.name: f.type for f in fields(cls)}
        return cls(**{k: (float(v) if kinds[k] in ("float", float) else int(v)) for k, v in d.items()})


def pretrain_spec(seed: int = 0, **overrides) -> CorpusSpec:
    """Many speakers, one recording device (no device labels to learn from)."""
    return CorpusSpec(**{"num_speakers": 100, "num_devices": 1, "utts_per_pair": 20,
                         "seed": seed, "device_seed": seed + 1000, **overrides})


def finetune_spec(seed: int = 0, **overrides) -> CorpusSpec:
    """Few speakers, three devices."""
    return CorpusSpec(**{"num_speakers": 20, "num_devices": 3, "utts_per_pair": 10,
                         "seed": seed + 1, "device_seed": seed, **overrides})


def eval_spec(seed: int = 0, **overrides) -> CorpusSpec:
    """Unseen speakers on the fine-tuning devices."""
    return CorpusSpec(**{"num_speakers": 40, "num_devices": 3, "utts_per_pair": 5,
                         "seed": seed + 2, "device_seed": seed, **overrides})


@dataclass
class Corpus:
    spec: CorpusSpec
    features: np.ndarray        # [U, F, T]
    speaker_ids: np.ndarray     # [U]
    device_ids: np.ndarray      # [U]
    utt_ids: list[str]

    def __len__(self) -> int:
        return len(self.utt_ids)

    def index_of(self) -> dict[str, int]:
        return {u: i for i, u in enumerate(self.utt_ids)}

    def by_speaker(self) -> dict[int, np.ndarray]:
        return {int(s): np.flatnonzero(self.speaker_ids == s) for s in np.unique(self.speaker_ids)}


def device_params(spec: CorpusSpec) -> tuple[np.ndarray, np.ndarray]:
    """Gain and offset per device, shape [V, F] each."""
    rng = np.random.default_rng([spec.device_seed, _DEVICE_STREAM])
    a = rng.standard_normal((spec.num_devices, spec.feat_dim))
    c = rng.standard_normal((spec.num_devices, spec.feat_dim))
    return np.exp(spec.device_scale * a), spec.device_scale * c


def speaker_latents(spec: CorpusSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, _SPEAKER_STREAM])
    return spec.speaker_scale * rng.standard_normal((spec.num_speakers, spec.feat_dim))


def utt_id(speaker: int, device: int, k: int) -> str:
    return f"spk{speaker:03d}-dev{device}-utt{k:03d}"


def generate_corpus(spec: CorpusSpec) -> Corpus:
    z = speaker_latents(spec)
    gain, offset = device_params(spec)
    n = spec.num_speakers * spec.num_devices * spec.utts_per_pair
    feats = np.empty((n, spec.feat_dim, spec.frames))
    spk = np.empty(n, dtype=np.int64)
    dev = np.empty(n, dtype=np.int64)
    ids = []
    u = 0
    for s in range(spec.num_speakers):
        for d in range(spec.num_devices):
            for k in range(spec.utts_per_pair):
                eps = np.random.default_rng([spec.seed, _UTT_STREAM, u]).standard_normal(
                    (spec.feat_dim, spec.frames))
                frames = z[s][:, None] + spec.noise_scale * eps
                feats[u] = gain[d][:, None] * frames + offset[d][:, None]
                spk[u], dev[u] = s, d
                ids.append(utt_id(s, d, k))
                u += 1
    return Corpus(spec, feats, spk, dev, ids)


@dataclass
class Batch:
    """``n`` speakers, two utterances each: rows [0, n) are first utterances, rows [n, 2n) second."""

    features: np.ndarray
    speaker_ids: np.ndarray
    device_ids: np.ndarray
    corpus_index: np.ndarray

    @property
    def n_speakers(self) -> int:
        return len(self.speaker_ids) // 2


def sample_batch(corpus: Corpus, n_speakers: int, rng: np.random.Generator) -> Batch:
    """Draw ``n_speakers`` distinct speakers and two distinct utterances of each."""
    groups = {s: idx for s, idx in corpus.by_speaker().items() if len(idx) >= 2}
    if n_speakers < 1 or n_speakers > len(groups):
        raise DegenerateBatchError(
            f"asked for {n_speakers} speakers, {len(groups)} have at least two utterances")
    eligible = np.array(sorted(groups))
    chosen = rng.choice(eligible, size=n_speakers, replace=False)
    first, second = [], []
    for s in chosen:
        a, b = rng.choice(groups[int(s)], size=2, replace=False)
        first.append(a)
        second.append(b)
    index = np.array(first + second, dtype=np.int64)
    return Batch(corpus.features[index], corpus.speaker_ids[index], corpus.device_ids[index], index)


def gaussian_pair_stream(rho, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """n pairs with y_k = rho_k x_k + sqrt(1 - rho_k^2) eps_k, x and eps standard normal."""
    rho = np.atleast_1d(np.asarray(rho, dtype=np.float64))
    if np.any(np.abs(rho) >= 1.0):
        raise ValidationError("correlations must satisfy |rho| < 1")
    rng = np.random.default_rng([seed, 29])
    x = rng.standard_normal((n, rho.size))
    eps = rng.standard_normal((n, rho.size))
    return x, rho * x + np.sqrt(1.0 - rho * rho) * eps


# ----------------------------------------------------------------------
# corpus files
# ----------------------------------------------------------------------
def save_corpus(corpus: Corpus, path, extra: dict | None = None) -> None:
    """Binary container (magic line, JSON header, int64 labels, float64 features) plus a text manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"version": CORPUS_VERSION, "spec": corpus.spec.to_dict(), "num_utts": len(corpus),
              "utt_ids": corpus.utt_ids, "extra": extra or {}}
    with open(path, "wb") as fh:
        fh.write(CORPUS_MAGIC + b" %d\n" % CORPUS_VERSION)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(np.ascontiguousarray(corpus.speaker_ids, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(corpus.device_ids, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(corpus.features, dtype="<f8").tobytes())
    write_manifest(corpus, manifest_path(path))


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".manifest.txt")


def write_manifest(corpus: Corpus, path) -> None:
    lines = [f"{u} {s} {d}\n" for u, s, d in zip(corpus.utt_ids, corpus.speaker_ids, corpus.device_ids)]
    Path(path).write_text("".join(lines))


def load_corpus(path) -> Corpus:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read corpus {path}: {exc}") from exc
    first, _, rest = raw.partition(b"\n")
    if not first.startswith(CORPUS_MAGIC) or int(first.split()[1]) != CORPUS_VERSION:
        raise CheckpointError(f"{path} is not a version-{CORPUS_VERSION} corpus file")
    head, _, payload = rest.partition(b"\n")
    header = json.loads(head)
    spec = CorpusSpec.from_dict(header["spec"])
    n = header["num_utts"]
    shape = (n, spec.feat_dim, spec.frames)
    expected = 16 * n + 8 * int(np.prod(shape))
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload length {len(payload)} != {expected}")
    spk = np.frombuffer(payload, "<i8", n, 0).astype(np.int64)
    dev = np.frombuffer(payload, "<i8", n, 8 * n).astype(np.int64)
    feats = np.frombuffer(payload, "<f8", int(np.prod(shape)), 16 * n).reshape(shape).astype(np.float64)
    return Corpus(spec, feats, spk, dev, list(header["utt_ids"]))
