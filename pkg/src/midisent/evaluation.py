"""Verification scoring, EER / MinDCF, linear probes and embedding export.

ROC convention: a trial is accepted when ``score >= threshold``.  Thresholds
are swept over the midpoints between adjacent unique scores plus the two
sentinels -inf (accept all) and +inf (reject all).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Corpus
from .errors import DegenerateBatchError, LabelError, ValidationError
from .model import DisentangleModel

BRANCHES = ("speaker", "device", "initial")


# ----------------------------------------------------------------------
# scores
# ----------------------------------------------------------------------
@dataclass
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray   # bool, True for target trials

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=bool)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1 or len(self.scores) < 2:
            raise ValidationError("scores and labels must be equal-length vectors of length >= 2")
        if not np.isfinite(self.scores).all():
            raise ValidationError("scores must be finite")
        if self.labels.all() or not self.labels.any():
            raise DegenerateBatchError("need at least one target and one nontarget trial")

    @property
    def targets(self) -> np.ndarray:
        return self.scores[self.labels]

    @property
    def nontargets(self) -> np.ndarray:
        return self.scores[~self.labels]


def cosine_score(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValidationError("cannot score a zero vector")
    return float(np.clip(np.dot(a / na, b / nb), -1.0, 1.0))


def sweep_thresholds(scores: ScoreSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, FAR, FRR) with thresholds ascending from -inf to +inf."""
    u = np.unique(scores.scores)
    thr = np.concatenate([[-np.inf], (u[:-1] + u[1:]) / 2.0, [np.inf]])
    tar = np.sort(scores.targets)
    non = np.sort(scores.nontargets)
    frr = np.searchsorted(tar, thr, side="left") / len(tar)
    far = (len(non) - np.searchsorted(non, thr, side="left")) / len(non)
    return thr, far, frr


def _interp_threshold(t0: float, t1: float, w: float) -> float:
    if not np.isfinite(t0):
        return float(t1)
    if not np.isfinite(t1):
        return float(t0)
    return float(t0 + w * (t1 - t0))


def eer_from_curve(thr, far, frr) -> tuple[float, float]:
    """Locate FAR = FRR on a swept curve, interpolating linearly between neighbours."""
    k = int(np.argmax(frr >= far))
    if frr[k] == far[k]:
        return float(far[k]), float(thr[k])
    d0 = far[k - 1] - frr[k - 1]
    d1 = far[k] - frr[k]
    w = d0 / (d0 - d1)
    eer = far[k - 1] + w * (far[k] - far[k - 1])
    return float(eer), _interp_threshold(thr[k - 1], thr[k], w)


def compute_eer(scores: ScoreSet) -> tuple[float, float]:
    """Equal error rate in [0, 1] and the (interpolated) threshold where it occurs."""
    return eer_from_curve(*sweep_thresholds(scores))


def compute_mindcf(scores: ScoreSet, c_miss: float = 1.0, c_fa: float = 1.0, p_target: float = 0.05,
                   normalize: bool = False) -> tuple[float, float]:
    """min over thresholds of c_miss * p_target * FRR + c_fa * (1 - p_target) * FAR.

    Unnormalised by default; ``normalize`` divides by the cost of the better
    trivial system, min(c_miss * p_target, c_fa * (1 - p_target)).
    """
    if not 0.0 < p_target < 1.0 or c_miss < 0 or c_fa < 0:
        raise ValidationError("need 0 < p_target < 1 and nonnegative costs")
    thr, far, frr = sweep_thresholds(scores)
    dcf = c_miss * p_target * frr + c_fa * (1.0 - p_target) * far
    k = int(np.argmin(dcf))
    value = float(dcf[k])
    if normalize:
        value /= min(c_miss * p_target, c_fa * (1.0 - p_target))
    return value, float(thr[k])


# ----------------------------------------------------------------------
# trial protocols
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class Trial:
    enroll: str
    test: str
    is_target: bool


def read_trials(path) -> list[Trial]:
    """Parse ``label enroll_id test_id`` lines, label in {target, nontarget}."""
    trials = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] not in ("target", "nontarget"):
            raise ValidationError(f"{path}:{lineno}: expected 'target|nontarget enroll test'")
        trials.append(Trial(parts[1], parts[2], parts[0] == "target"))
    validate_trials(trials)
    return trials


def validate_trials(trials: list[Trial]) -> None:
    labels = {t.is_target for t in trials}
    if labels != {True, False}:
        raise DegenerateBatchError("trial protocol needs both target and nontarget trials")


def write_trials(trials: list[Trial], path) -> None:
    lines = [f"{'target' if t.is_target else 'nontarget'} {t.enroll} {t.test}\n" for t in trials]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("".join(lines))


def make_trials(corpus: Corpus, n_trials: int, seed: int = 0, target_fraction: float = 0.5) -> list[Trial]:
    """Random enrollment/test pairs of distinct utterances, half of them same-speaker."""
    rng = np.random.default_rng([seed, 31])
    by_spk = {s: idx for s, idx in corpus.by_speaker().items() if len(idx) >= 2}
    speakers = np.array(sorted(by_spk))
    if len(speakers) < 2:
        raise DegenerateBatchError("need two speakers with at least two utterances each")
    n_target = int(round(n_trials * target_fraction))
    trials = []
    for k in range(n_trials):
        if k < n_target:
            s = rng.choice(speakers)
            a, b = rng.choice(by_spk[int(s)], size=2, replace=False)
        else:
            s1, s2 = rng.choice(speakers, size=2, replace=False)
            a, b = rng.choice(by_spk[int(s1)]), rng.choice(by_spk[int(s2)])
        trials.append(Trial(corpus.utt_ids[a], corpus.utt_ids[b], k < n_target))
    order = rng.permutation(n_trials)
    return [trials[i] for i in order]


# ----------------------------------------------------------------------
# embeddings
# ----------------------------------------------------------------------
def extract_embeddings(model: DisentangleModel, features: np.ndarray, branch: str = "speaker",
                       chunk: int = 512) -> np.ndarray:
    """Eval-mode embeddings for [U, F, T] features; branch is speaker (x^s), device (x^d) or initial (x)."""
    if branch not in BRANCHES:
        raise ValidationError(f"branch must be one of {BRANCHES}")
    out = []
    with T.no_grad():
        for start in range(0, len(features), chunk):
            X = features[start:start + chunk]
            x = model.encoder(X, training=False)
            if branch == "initial":
                out.append(x.data)
                continue
            xs, xd = model.decoupler(x, training=False)
            out.append((xs if branch == "speaker" else xd).data)
    return np.concatenate(out, axis=0)


def score_trials(embeddings: np.ndarray, index: dict[str, int], trials: list[Trial]) -> ScoreSet:
    scores = np.empty(len(trials))
    for k, t in enumerate(trials):
        try:
            a, b = index[t.enroll], index[t.test]
        except KeyError as exc:
            raise ValidationError(f"trial references unknown utterance {exc.args[0]!r}") from None
        scores[k] = cosine_score(embeddings[a], embeddings[b])
    return ScoreSet(scores, np.array([t.is_target for t in trials]))


def run_trials(corpus: Corpus, model: DisentangleModel, trials: list[Trial], branch: str = "speaker") -> ScoreSet:
    """Cosine-score every trial row in order using eval-mode embeddings."""
    if corpus.spec.feat_dim != model.cfg.feat_dim or corpus.spec.frames != model.cfg.frames:
        raise ValidationError("model and corpus feature dimensions differ")
    validate_trials(trials)
    emb = extract_embeddings(model, corpus.features, branch)
    return score_trials(emb, corpus.index_of(), trials)


def linear_probe(embeddings: np.ndarray, labels: np.ndarray, held_out: float = 0.2, seed: int = 0) -> float:
    """Held-out accuracy of a multinomial logistic-regression probe on standardised embeddings."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.preprocessing import StandardScaler

    X = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    classes = np.unique(y)
    if len(X) != len(y):
        raise ValidationError("embeddings and labels differ in length")
    if len(classes) < 2:
        raise LabelError("probe needs at least two classes")
    if len(y) < 10 * len(classes):
        raise DegenerateBatchError(f"need at least {10 * len(classes)} samples for {len(classes)} classes")
    rng = np.random.default_rng([seed, 37])
    perm = rng.permutation(len(y))
    n_test = int(round(held_out * len(y)))
    test, train = perm[:n_test], perm[n_test:]
    missing = set(classes) - set(np.unique(y[train]))
    if missing:
        raise LabelError(f"classes {sorted(missing)} absent from the training split")
    scaler = StandardScaler().fit(X[train])
    clf = LogisticRegression(max_iter=2000)
    clf.fit(scaler.transform(X[train]), y[train])
    return float(np.mean(clf.predict(scaler.transform(X[test])) == y[test]))


@dataclass(frozen=True)
class ProbeReport:
    speaker_on_xs: float
    device_on_xs: float
    speaker_on_xd: float
    device_on_xd: float


def probe_report(model: DisentangleModel, corpus: Corpus, seed: int = 0) -> ProbeReport:
    xs = extract_embeddings(model, corpus.features, "speaker")
    xd = extract_embeddings(model, corpus.features, "device")
    return ProbeReport(
        linear_probe(xs, corpus.speaker_ids, seed=seed),
        linear_probe(xs, corpus.device_ids, seed=seed),
        linear_probe(xd, corpus.speaker_ids, seed=seed),
        linear_probe(xd, corpus.device_ids, seed=seed),
    )


def export_embeddings(corpus: Corpus, model: DisentangleModel, path) -> None:
    """Tab-separated rows: utt_id, speaker_id, device_id, D values of x^s, D values of x^d."""
    xs = extract_embeddings(model, corpus.features, "speaker")
    xd = extract_embeddings(model, corpus.features, "device")
    lines = []
    for u, s, d, a, b in zip(corpus.utt_ids, corpus.speaker_ids, corpus.device_ids, xs, xd):
        vals = [u, str(int(s)), str(int(d))] + [repr(float(v)) for v in a] + [repr(float(v)) for v in b]
        lines.append("\t".join(vals) + "\n")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("".join(lines))
