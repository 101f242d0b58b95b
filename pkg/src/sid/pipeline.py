"""End-to-end detection pipelines over user sequences.

Two scenarios: two-class classification trained with other users' data
(subscription service), and one-class local detection trained on the owner's
data only. The one-class pipelines score windows by next-step prediction
errors of a per-user recurrent model and decide via a mean-error threshold, a
KS majority vote against reference error distributions, or a one-class SVM
over the KS feature vector.
"""

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .detection import (
    ConfusionCounts,
    KsDecisionConfig,
    MetricError,
    build_ped,
    confusion_metrics,
    ks_reject,
    ks_statistic,
    split_by_sequence,
    vote_decide,
)
from .models import ModelBundle, infer_krr, infer_lr, infer_mlp, infer_ocsvm, infer_svm, sigmoid
from .data import krr_features
from .training import train, train_ocsvm

TWO_CLASS_KINDS = ("lr", "linear_svm", "kernel_svm", "krr", "mlp")
ONE_CLASS_KINDS = ("lstm", "gru", "ocsvm")
PIPELINES = ("vote", "ocsvm", "threshold")


class PipelineError(ValueError):
    pass


def safe_metrics(counts: ConfusionCounts) -> dict[str, Fraction]:
    """confusion_metrics, but a detector that never fires scores 0 precision/F1
    instead of failing the whole evaluation."""
    try:
        return confusion_metrics(counts)
    except MetricError:
        if counts.tn + counts.fp < 1 or counts.tp + counts.fn < 1:
            raise
        tnr = Fraction(counts.tn, counts.tn + counts.fp)
        tpr = Fraction(counts.tp, counts.tp + counts.fn)
        total = counts.tn + counts.fp + counts.tp + counts.fn
        return {
            "tnr": tnr,
            "tpr": tpr,
            "accuracy": Fraction(counts.tn + counts.tp, total),
            "recall": tpr,
            "precision": Fraction(0),
            "f1": Fraction(0),
        }


@dataclass(frozen=True)
class LadConfig:
    rnn_window: int = 200  # readings per detection window
    rnn_step: int = 100
    hidden: int = 16
    epochs: int = 40
    lr: float = 0.05
    train_fraction: float = 0.5
    validation_fraction: float = 0.35  # tail of the train windows
    ref_source: str = "validation"  # where reference PEDs come from
    threshold_quantile: float = 0.95
    ks: KsDecisionConfig = field(default_factory=KsDecisionConfig)


def batched_window_errors(m: ModelBundle, windows) -> np.ndarray:
    """Per-window next-step squared errors, (B, T-1); state resets per window."""
    x = np.asarray(windows, dtype=np.float64)
    B, T, D = x.shape
    if m.kind == "lstm":
        H = len(m["bc"])
        h = np.zeros((B, H))
        c = np.zeros((B, H))
    else:
        H = len(m["bz"])
        h = np.zeros((B, H))
    errors = np.empty((B, T - 1))
    for t in range(T - 1):
        xt = x[:, t, :]
        if m.kind == "lstm":
            cand = np.tanh(xt @ m["Wc"].T + h @ m["Uc"].T + m["bc"])
            f = sigmoid(xt @ m["Wf"].T + h @ m["Uf"].T + m["bf"])
            i = sigmoid(xt @ m["Wi"].T + h @ m["Ui"].T + m["bi"])
            o = sigmoid(xt @ m["Wo"].T + h @ m["Uo"].T + m["bo"])
            c = f * c + i * cand
            h = o * np.tanh(c)
        else:
            z = sigmoid(xt @ m["Wz"].T + h @ m["Uz"].T + m["bz"])
            r = sigmoid(xt @ m["Wr"].T + h @ m["Ur"].T + m["br"])
            cand = sigmoid(xt @ m["Wh"].T + (r * h) @ m["Ur"].T + m["bh"])
            h = (1.0 - z) * h + z * cand
        pred = h @ m["Wout"].T + m["bout"]
        errors[:, t] = ((pred - x[:, t + 1, :]) ** 2).sum(axis=1)
    return errors


def window_error_samples(m: ModelBundle, windows, n_errors: int) -> np.ndarray:
    """The last n_errors prediction errors of each window, (B, n_errors)."""
    errs = batched_window_errors(m, windows)
    if errs.shape[1] < n_errors:
        raise PipelineError(
            f"windows yield {errs.shape[1]} errors, need {n_errors}"
        )
    return errs[:, -n_errors:]


@dataclass
class LadModel:
    """A trained per-user detector with its references and thresholds."""

    user: object
    bundle: ModelBundle
    ref_samples: np.ndarray  # (refs, n_errors)
    mean_threshold: float
    ocsvm: ModelBundle | None
    cfg: LadConfig

    def reference_peds(self, bins=None):
        bins = self.cfg.ks.bins if bins is None else bins
        return [build_ped(s, bins) for s in self.ref_samples]

    def decide(self, window_errors: np.ndarray, pipeline: str) -> bool:
        """True = anomaly (impostor)."""
        if pipeline == "threshold":
            return bool(window_errors.mean() > self.mean_threshold)
        if pipeline == "vote":
            n = self.cfg.ks.window_errors
            rejections = [
                ks_reject(ks_statistic(window_errors, ref), n, n, self.cfg.ks)
                for ref in self.ref_samples
            ]
            return vote_decide(rejections, self.cfg.ks)
        if pipeline == "ocsvm":
            feats = np.array(
                [ks_statistic(window_errors, ref) for ref in self.ref_samples]
            )
            anomaly, _ = infer_ocsvm(self.ocsvm, feats)
            return anomaly
        raise PipelineError(f"unknown pipeline {pipeline!r}")


def fit_lad_model(user, windows, kind: str, cfg: LadConfig, seed: int,
                  bundle: ModelBundle | None = None) -> LadModel:
    """Train the user's recurrent model and derive references and thresholds.

    Passing a pre-trained bundle skips training but still derives the
    references and thresholds from this user's windows.
    """
    if kind not in ("lstm", "gru"):
        raise PipelineError("local detection trains an lstm or gru per user")
    data = np.stack([w.data for w in windows])
    rng = np.random.default_rng(seed)
    n_val = max(int(round(cfg.validation_fraction * len(data))), 1)
    n_val = min(n_val, len(data) - 1) if len(data) > 1 else 1
    fit, val = data[: len(data) - n_val], data[len(data) - n_val :]
    if cfg.ref_source == "train":
        ref_pool_windows = fit
    else:
        ref_pool_windows = val
    if bundle is None:
        bundle = train(
            kind,
            fit,
            {"hidden": cfg.hidden, "lr": cfg.lr, "epochs": cfg.epochs},
            seed=seed,
        )
    elif bundle.kind != kind:
        raise PipelineError(f"bundle kind {bundle.kind!r} does not match {kind!r}")
    n = cfg.ks.window_errors
    pool = window_error_samples(bundle, ref_pool_windows, n)
    picks = rng.choice(len(pool), size=min(cfg.ks.refs, len(pool)), replace=False)
    ref_samples = pool[np.sort(picks)]
    val_errors = window_error_samples(bundle, val, n)
    mean_threshold = float(np.quantile(val_errors.mean(axis=1), cfg.threshold_quantile))
    train_feats = np.array(
        [[ks_statistic(w, ref) for ref in ref_samples] for w in pool]
    )
    ocsvm = train_ocsvm(train_feats, gamma=2.0, nu=0.1, seed=seed)
    return LadModel(
        user=user,
        bundle=bundle,
        ref_samples=ref_samples,
        mean_threshold=mean_threshold,
        ocsvm=ocsvm,
        cfg=cfg,
    )


def evaluate_lad(model: LadModel, test_windows, pipeline: str) -> ConfusionCounts:
    """Owner windows are negatives; every other user's windows are positives."""
    cfg = model.cfg
    n = cfg.ks.window_errors
    counts = ConfusionCounts()
    by_owner: dict[bool, list] = {True: [], False: []}
    for w in test_windows:
        by_owner[w.user == model.user].append(w.data)
    for is_owner, rows in by_owner.items():
        if not rows:
            continue
        errors = window_error_samples(model.bundle, np.stack(rows), n)
        for werr in errors:
            anomaly = model.decide(werr, pipeline)
            if is_owner:
                counts = counts + ConfusionCounts(fp=int(anomaly), tn=int(not anomaly))
            else:
                counts = counts + ConfusionCounts(tp=int(anomaly), fn=int(not anomaly))
    return counts


def run_lad(sequences, kind: str, pipeline: str, cfg: LadConfig, seed: int,
            bundles: dict | None = None, only_user=None):
    """Per-user one-class evaluation; returns (report rows, aggregate counts).

    `bundles` optionally maps user -> pre-trained ModelBundle; `only_user`
    restricts the evaluation to a single owner's detector.
    """
    train_w, test_w = split_by_sequence(
        sequences, cfg.train_fraction, seed, cfg.rnn_window, cfg.rnn_step
    )
    users = sorted({w.user for w in train_w}, key=str)
    if only_user is not None:
        if only_user not in users:
            raise PipelineError(f"user {only_user!r} not present in the data")
        users = [only_user]
    rows = []
    total = ConfusionCounts()
    for user in users:
        own = [w for w in train_w if w.user == user]
        bundle = (bundles or {}).get(user)
        model = fit_lad_model(user, own, kind, cfg, seed, bundle=bundle)
        counts = evaluate_lad(model, test_w, pipeline)
        total = total + counts
        metrics = safe_metrics(counts)
        rows.append({"user": user, "model": kind, "pipeline": pipeline, **metrics})
    return rows, total


# ---------------------------------------------------------------------------
# Two-class scenario
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IdaasConfig:
    window_len: int = 64
    step: int = 4
    train_fraction: float = 0.5
    hyper: dict = field(default_factory=dict)


def _idaas_features(kind: str, windows) -> np.ndarray:
    if kind == "krr":
        return np.stack([krr_features(w.data) for w in windows])
    return np.stack([w.data.reshape(-1) for w in windows])


def _idaas_predict(kind: str, bundle: ModelBundle, feats: np.ndarray) -> np.ndarray:
    if kind == "lr":
        return np.array([infer_lr(bundle, f) >= 0.5 for f in feats])
    if kind in ("linear_svm", "kernel_svm"):
        return np.array([infer_svm(bundle, f)[0] > 0 for f in feats])
    if kind == "krr":
        return np.array([infer_krr(bundle, f)[0] > 0 for f in feats])
    if kind == "mlp":
        return np.array([int(np.argmax(infer_mlp(bundle, f))) == 1 for f in feats])
    raise PipelineError(f"unknown two-class kind {kind!r}")


def run_idaas(sequences, kind: str, cfg: IdaasConfig, seed: int):
    """Per-user two-class evaluation: own windows vs all other users' windows."""
    if kind not in TWO_CLASS_KINDS:
        raise PipelineError(f"{kind!r} is not a two-class model kind")
    train_w, test_w = split_by_sequence(
        sequences, cfg.train_fraction, seed, cfg.window_len, cfg.step
    )
    users = sorted({w.user for w in train_w}, key=str)
    rows = []
    total = ConfusionCounts()
    for user in users:
        feats_train = _idaas_features(kind, train_w)
        labels_train = np.array([int(w.user != user) for w in train_w])
        hyper = dict(cfg.hyper)
        if kind == "krr":
            hyper = {k: v for k, v in hyper.items() if k == "lam"}
        elif kind == "mlp" and "sizes" not in hyper:
            hyper["sizes"] = [feats_train.shape[1], 50, 2]
        bundle = train(kind, (feats_train, labels_train), hyper, seed=seed)
        feats_test = _idaas_features(kind, test_w)
        predicted = _idaas_predict(kind, bundle, feats_test)
        counts = ConfusionCounts()
        for w, flagged in zip(test_w, predicted):
            impostor = w.user != user
            if impostor:
                counts = counts + ConfusionCounts(tp=int(flagged), fn=int(not flagged))
            else:
                counts = counts + ConfusionCounts(fp=int(flagged), tn=int(not flagged))
        total = total + counts
        rows.append({"user": user, "model": kind, "pipeline": "idaas", **safe_metrics(counts)})
    return rows, total
