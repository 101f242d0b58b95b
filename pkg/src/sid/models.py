"""Floating-point reference models: the oracle the simulated programs must match.

Bundles are plain named-tensor containers. Inference is pure float64 numpy;
each routine follows the corresponding closed-form equation exactly, so these
functions double as the ground truth for the fixed-point compiler tests.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

BUNDLE_MAGIC = b"SIDB"
BUNDLE_VERSION = 1

KINDS = ("lr", "linear_svm", "kernel_svm", "krr", "mlp", "ocsvm", "lstm", "gru")


class ShapeError(ValueError):
    pass


@dataclass
class ModelBundle:
    kind: str
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        self.tensors = {k: np.asarray(v, dtype=np.float64) for k, v in self.tensors.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.tensors[name]
        except KeyError:
            raise ShapeError(f"{self.kind} bundle is missing tensor {name!r}") from None

    def scalar(self, name: str) -> float:
        return float(np.asarray(self[name]).reshape(-1)[0])


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def gaussian_kernel(u, v, gamma: float):
    diff = np.asarray(u, dtype=np.float64) - np.asarray(v, dtype=np.float64)
    return np.exp(-gamma * np.dot(diff, diff))


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def _expect_vector(x, dim, what):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (dim,):
        raise ShapeError(f"{what}: expected shape ({dim},), got {x.shape}")
    return x


def infer_lr(m: ModelBundle, x) -> float:
    """Probability of the positive (impostor) class: sigmoid(w.x + b)."""
    w = m["w"]
    x = _expect_vector(x, len(w), "lr input")
    return float(sigmoid(np.dot(w, x) + m.scalar("b")))


def svm_score(m: ModelBundle, x) -> float:
    coef, sv, b = m["coef"], m["sv"], m.scalar("b")
    if sv.ndim != 2 or len(coef) != len(sv):
        raise ShapeError("svm bundle needs one coefficient per support vector")
    x = _expect_vector(x, sv.shape[1], "svm input")
    if m.kind == "kernel_svm":
        gamma = m.scalar("gamma")
        k = np.exp(-gamma * ((sv - x) ** 2).sum(axis=1))
        return float(np.dot(coef, k) + b)
    return float(np.dot(coef, sv @ x) + b)


def infer_svm(m: ModelBundle, x) -> tuple[int, float]:
    """Class in {+1, -1} and the raw margin score. A zero score ties to +1."""
    score = svm_score(m, x)
    return (1 if score >= 0.0 else -1), score


def infer_krr(m: ModelBundle, features) -> tuple[int, float]:
    w = m["w"]
    f = _expect_vector(features, len(w), "krr features")
    score = float(np.dot(w, f) + m.scalar("b"))
    return (1 if score >= 0.0 else -1), score


def mlp_logits(m: ModelBundle, x) -> np.ndarray:
    """Pre-softmax output scores: sigmoid hidden layers, affine final layer."""
    n_layers = int(m.scalar("n_layers"))
    h = np.asarray(x, dtype=np.float64)
    for layer in range(n_layers):
        w, b = m[f"W{layer}"], m[f"b{layer}"]
        if w.shape[1] != len(h):
            raise ShapeError(f"mlp layer {layer}: weight shape {w.shape} vs input {len(h)}")
        h = w @ h + b
        if layer < n_layers - 1:
            h = sigmoid(h)
    return h


def infer_mlp(m: ModelBundle, x) -> np.ndarray:
    """Class probabilities (softmax over the final affine layer)."""
    return softmax(mlp_logits(m, x))


def ocsvm_score(m: ModelBundle, x) -> float:
    coef, sv = m["coef"], m["sv"]
    x = _expect_vector(x, sv.shape[1], "ocsvm input")
    gamma = m.scalar("gamma")
    k = np.exp(-gamma * ((sv - x) ** 2).sum(axis=1))
    return float(np.dot(coef, k) - m.scalar("rho"))


def infer_ocsvm(m: ModelBundle, x) -> tuple[bool, float]:
    """(is_anomaly, score): anomalous iff the margin score is negative."""
    score = ocsvm_score(m, x)
    return score < 0.0, score


def step_lstm(m: ModelBundle, h, c, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One cell update plus the affine readout prediction.

    cand = tanh(Wc x + Uc h + bc); f, i, o = sigmoid gates;
    c' = f*c + i*cand; h' = o * tanh(c'); pred = Wout h' + bout.
    """
    h = np.asarray(h, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    hidden = len(m["bc"])
    if h.shape != (hidden,) or c.shape != (hidden,):
        raise ShapeError(f"lstm state must have shape ({hidden},)")
    cand = np.tanh(m["Wc"] @ x + m["Uc"] @ h + m["bc"])
    f = sigmoid(m["Wf"] @ x + m["Uf"] @ h + m["bf"])
    i = sigmoid(m["Wi"] @ x + m["Ui"] @ h + m["bi"])
    o = sigmoid(m["Wo"] @ x + m["Uo"] @ h + m["bo"])
    c_new = f * c + i * cand
    h_new = o * np.tanh(c_new)
    pred = m["Wout"] @ h_new + m["bout"]
    return h_new, c_new, pred


def step_gru(m: ModelBundle, h, x) -> tuple[np.ndarray, np.ndarray]:
    """One update following the printed equations exactly.

    z = sigmoid(Wz x + Uz h + bz); r = sigmoid(Wr x + Ur h + br);
    h' = (1-z)*h + z*sigmoid(Wh x + Ur (r*h) + bh).
    Note the candidate reuses Ur and a sigmoid, as printed.
    """
    h = np.asarray(h, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    hidden = len(m["bz"])
    if h.shape != (hidden,):
        raise ShapeError(f"gru state must have shape ({hidden},)")
    z = sigmoid(m["Wz"] @ x + m["Uz"] @ h + m["bz"])
    r = sigmoid(m["Wr"] @ x + m["Ur"] @ h + m["br"])
    cand = sigmoid(m["Wh"] @ x + m["Ur"] @ (r * h) + m["bh"])
    h_new = (1.0 - z) * h + z * cand
    pred = m["Wout"] @ h_new + m["bout"]
    return h_new, pred


def rnn_hidden_size(m: ModelBundle) -> int:
    return len(m["bc"]) if m.kind == "lstm" else len(m["bz"])


def predict_series(m: ModelBundle, readings) -> np.ndarray:
    """Squared-L2 next-step prediction errors over a reading sequence.

    errors[t-1] = ||prediction from readings[..t-1] - readings[t]||^2,
    one error per transition, so a length-T sequence yields T-1 errors.
    """
    readings = np.asarray(readings, dtype=np.float64)
    if readings.ndim != 2 or len(readings) < 2:
        raise ShapeError("need at least two readings to score predictions")
    hidden = rnn_hidden_size(m)
    h = np.zeros(hidden)
    c = np.zeros(hidden)
    errors = np.empty(len(readings) - 1)
    for t in range(len(readings) - 1):
        if m.kind == "lstm":
            h, c, pred = step_lstm(m, h, c, readings[t])
        else:
            h, pred = step_gru(m, h, readings[t])
        diff = pred - readings[t + 1]
        errors[t] = float(np.dot(diff, diff))
    return errors


# ---------------------------------------------------------------------------
# Bundle files: "SIDB", version, kind, then (name, rank, dims, float64 payload).
# ---------------------------------------------------------------------------

def bundle_to_bytes(m: ModelBundle) -> bytes:
    out = bytearray(BUNDLE_MAGIC)
    kind = m.kind.encode()
    out += struct.pack("<IH", BUNDLE_VERSION, len(kind))
    out += kind
    out += struct.pack("<I", len(m.tensors))
    for name in sorted(m.tensors):
        data = np.ascontiguousarray(m.tensors[name], dtype="<f8")
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<H", data.ndim)
        out += struct.pack(f"<{data.ndim}I", *data.shape)
        out += data.tobytes()
    return bytes(out)


def bundle_from_bytes(blob: bytes) -> ModelBundle:
    if blob[:4] != BUNDLE_MAGIC:
        raise ValueError("bad bundle magic")
    version, kind_len = struct.unpack_from("<IH", blob, 4)
    if version != BUNDLE_VERSION:
        raise ValueError(f"unsupported bundle version {version}")
    pos = 10
    kind = blob[pos : pos + kind_len].decode()
    pos += kind_len
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + name_len].decode()
        pos += name_len
        (rank,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(blob, dtype="<f8", count=n, offset=pos)
        pos += 8 * n
        tensors[name] = data.reshape(shape).astype(np.float64)
    return ModelBundle(kind=kind, tensors=tensors)


def save_bundle(path, m: ModelBundle) -> None:
    with open(path, "wb") as fh:
        fh.write(bundle_to_bytes(m))


def load_bundle(path) -> ModelBundle:
    with open(path, "rb") as fh:
        return bundle_from_bytes(fh.read())
