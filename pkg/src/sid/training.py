"""Desk-scale trainers for every model kind.

All trainers are deterministic given (dataset, hyperparameters, seed) and use
plain gradient methods: mini-batch gradient descent on cross-entropy for the
classifiers, subgradient descent on hinge loss for the SVMs, a closed-form
solve for ridge regression, projected gradient on the dual for the one-class
SVM, and truncated backpropagation-through-time with gradient-norm clipping
for the recurrent models. Learning rates and epoch counts are defaults tuned
for the small synthetic workloads in the test suite, nothing more.
"""

import numpy as np

from .models import ModelBundle, sigmoid, softmax


class TrainingError(RuntimeError):
    pass


def _check_finite(value, what):
    if not np.all(np.isfinite(value)):
        raise TrainingError(f"non-finite {what} encountered; aborting")


def _as_xy(dataset):
    X, y = dataset
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if len(X) == 0:
        raise TrainingError("empty dataset")
    if len(X) != len(y):
        raise TrainingError("X and y lengths differ")
    return X, y


# ---------------------------------------------------------------------------
# Logistic regression
# ---------------------------------------------------------------------------

def train_lr(dataset, lr=0.1, epochs=200, batch=32, seed=0) -> ModelBundle:
    X, y = _as_xy(dataset)
    y = y.astype(np.float64)
    rng = np.random.default_rng(seed)
    w = np.zeros(X.shape[1])
    b = 0.0
    idx = np.arange(len(X))
    for _ in range(epochs):
        rng.shuffle(idx)
        for start in range(0, len(idx), batch):
            sel = idx[start : start + batch]
            p = sigmoid(X[sel] @ w + b)
            grad = p - y[sel]
            w -= lr * (X[sel].T @ grad) / len(sel)
            b -= lr * grad.mean()
        _check_finite(w, "lr weights")
    return ModelBundle("lr", {"w": w, "b": b})


# ---------------------------------------------------------------------------
# MLP (sigmoid hidden layers, softmax cross-entropy)
# ---------------------------------------------------------------------------

def init_mlp(sizes, seed=0) -> ModelBundle:
    rng = np.random.default_rng(seed)
    tensors = {"n_layers": len(sizes) - 1}
    for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        tensors[f"W{i}"] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_out, fan_in))
        tensors[f"b{i}"] = np.zeros(fan_out)
    return ModelBundle("mlp", tensors)


def mlp_loss_and_grads(m: ModelBundle, X, y):
    """Mean cross-entropy and gradients for every weight/bias tensor."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n_layers = int(m.scalar("n_layers"))
    acts = [X]
    pre = []
    h = X
    for layer in range(n_layers):
        z = h @ m[f"W{layer}"].T + m[f"b{layer}"]
        pre.append(z)
        h = sigmoid(z) if layer < n_layers - 1 else z
        acts.append(h)
    logits = acts[-1]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1)) + logits.max(axis=1)
    loss = float(np.mean(logz - logits[np.arange(len(y)), y]))

    probs = np.exp(logits - logz[:, None])
    delta = probs
    delta[np.arange(len(y)), y] -= 1.0
    delta /= len(y)
    grads = {}
    for layer in reversed(range(n_layers)):
        grads[f"W{layer}"] = delta.T @ acts[layer]
        grads[f"b{layer}"] = delta.sum(axis=0)
        if layer:
            back = delta @ m[f"W{layer}"]
            s = acts[layer]  # sigmoid output of the previous hidden layer
            delta = back * s * (1.0 - s)
    return loss, grads


def train_mlp(dataset, sizes=None, lr=0.5, epochs=200, batch=32, seed=0) -> ModelBundle:
    X, y = _as_xy(dataset)
    y = y.astype(np.int64)
    if sizes is None:
        sizes = [X.shape[1], 50, int(y.max()) + 1]
    m = init_mlp(sizes, seed=seed)
    rng = np.random.default_rng(seed + 1)
    idx = np.arange(len(X))
    for _ in range(epochs):
        rng.shuffle(idx)
        for start in range(0, len(idx), batch):
            sel = idx[start : start + batch]
            loss, grads = mlp_loss_and_grads(m, X[sel], y[sel])
            _check_finite(loss, "mlp loss")
            for name, g in grads.items():
                m.tensors[name] = m.tensors[name] - lr * g
    return m


# ---------------------------------------------------------------------------
# SVMs (hinge subgradient; kernel variant keeps training points as candidates)
# ---------------------------------------------------------------------------

def _as_pm1(y):
    y = np.asarray(y, dtype=np.float64)
    return np.where(y > 0, 1.0, -1.0)


def train_linear_svm(dataset, lr=0.05, epochs=200, lam=1e-3, seed=0) -> ModelBundle:
    X, y = _as_xy(dataset)
    y = _as_pm1(y)
    rng = np.random.default_rng(seed)
    w = np.zeros(X.shape[1])
    b = 0.0
    idx = np.arange(len(X))
    for _ in range(epochs):
        rng.shuffle(idx)
        for i in idx:
            margin = y[i] * (np.dot(w, X[i]) + b)
            w *= 1.0 - lr * lam
            if margin < 1.0:
                w += lr * y[i] * X[i]
                b += lr * y[i]
    _check_finite(w, "svm weights")
    # Inner-product form with a single weighted "support vector".
    return ModelBundle("linear_svm", {"coef": [1.0], "sv": [w], "b": b})


def train_kernel_svm(dataset, gamma=0.5, lr=0.05, epochs=100, lam=1e-3, seed=0) -> ModelBundle:
    X, y = _as_xy(dataset)
    y = _as_pm1(y)
    rng = np.random.default_rng(seed)
    n = len(X)
    sq = ((X[:, None, :] - X[None, :, :]) ** 2).sum(axis=2)
    K = np.exp(-gamma * sq)
    alpha = np.zeros(n)  # signed coefficients a_i = alpha_i * y_i folded in
    b = 0.0
    idx = np.arange(n)
    for _ in range(epochs):
        rng.shuffle(idx)
        for i in idx:
            margin = y[i] * (K[i] @ alpha + b)
            alpha *= 1.0 - lr * lam
            if margin < 1.0:
                alpha[i] += lr * y[i]
                b += lr * y[i]
    _check_finite(alpha, "kernel svm coefficients")
    keep = np.abs(alpha) > 1e-12
    return ModelBundle(
        "kernel_svm",
        {"coef": alpha[keep], "sv": X[keep], "b": b, "gamma": gamma},
    )


# ---------------------------------------------------------------------------
# Kernel ridge regression (closed form)
# ---------------------------------------------------------------------------

def train_krr(dataset, lam=1e-3) -> ModelBundle:
    X, y = _as_xy(dataset)
    y = _as_pm1(y)
    x_mean = X.mean(axis=0)
    y_mean = y.mean()
    Xc = X - x_mean
    K = Xc @ Xc.T
    alpha = np.linalg.solve(K + lam * np.eye(len(X)), y - y_mean)
    w = Xc.T @ alpha
    b = y_mean - np.dot(w, x_mean)
    return ModelBundle("krr", {"w": w, "b": b, "lam": lam})


# ---------------------------------------------------------------------------
# One-class SVM (projected gradient on the dual)
# ---------------------------------------------------------------------------

def _project_capped_simplex(v, cap):
    """Project v onto {0 <= a <= cap, sum a = 1} by bisection on the shift."""
    lo = v.min() - 1.0
    hi = v.max() + 1.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        total = np.clip(v - mid, 0.0, cap).sum()
        if total > 1.0:
            lo = mid
        else:
            hi = mid
    return np.clip(v - 0.5 * (lo + hi), 0.0, cap)


def train_ocsvm(X, gamma=0.5, nu=0.2, iters=300, lr=0.1, seed=0) -> ModelBundle:
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise TrainingError("empty dataset")
    n = len(X)
    cap = 1.0 / max(nu * n, 1.0)
    if cap * n < 1.0:
        raise TrainingError(f"nu={nu} is infeasible for {n} samples")
    sq = ((X[:, None, :] - X[None, :, :]) ** 2).sum(axis=2)
    K = np.exp(-gamma * sq)
    alpha = _project_capped_simplex(np.full(n, 1.0 / n), cap)
    for _ in range(iters):
        alpha = _project_capped_simplex(alpha - lr * (K @ alpha), cap)
    _check_finite(alpha, "ocsvm dual variables")
    scores = K @ alpha
    margin = (alpha > 1e-9) & (alpha < cap - 1e-9)
    rho = float(np.median(scores[margin])) if margin.any() else float(np.median(scores))
    keep = alpha > 1e-9
    return ModelBundle(
        "ocsvm", {"coef": alpha[keep], "sv": X[keep], "rho": rho, "gamma": gamma}
    )


# ---------------------------------------------------------------------------
# Recurrent models: batched BPTT on next-step mean squared error
# ---------------------------------------------------------------------------

def init_lstm(hidden, dim, seed=0, scale=0.2) -> ModelBundle:
    rng = np.random.default_rng(seed)
    tensors = {}
    for gate in "cfio":
        tensors[f"W{gate}"] = rng.normal(0, scale / np.sqrt(dim), size=(hidden, dim))
        tensors[f"U{gate}"] = rng.normal(0, scale / np.sqrt(hidden), size=(hidden, hidden))
        tensors[f"b{gate}"] = np.zeros(hidden)
    tensors["Wout"] = rng.normal(0, scale / np.sqrt(hidden), size=(dim, hidden))
    tensors["bout"] = np.zeros(dim)
    return ModelBundle("lstm", tensors)


def init_gru(hidden, dim, seed=0, scale=0.2) -> ModelBundle:
    rng = np.random.default_rng(seed)
    tensors = {}
    for gate in "zr":
        tensors[f"W{gate}"] = rng.normal(0, scale / np.sqrt(dim), size=(hidden, dim))
        tensors[f"U{gate}"] = rng.normal(0, scale / np.sqrt(hidden), size=(hidden, hidden))
        tensors[f"b{gate}"] = np.zeros(hidden)
    tensors["Wh"] = rng.normal(0, scale / np.sqrt(dim), size=(hidden, dim))
    tensors["bh"] = np.zeros(hidden)
    tensors["Wout"] = rng.normal(0, scale / np.sqrt(hidden), size=(dim, hidden))
    tensors["bout"] = np.zeros(dim)
    return ModelBundle("gru", tensors)


def _zero_grads(m: ModelBundle):
    return {name: np.zeros_like(t) for name, t in m.tensors.items()}


def lstm_loss_and_grads(m: ModelBundle, batch, h0=None, c0=None):
    """Forward + full backward over a (B, T, D) batch of sequences.

    Loss is the mean over (sequence, transition) of the squared L2 next-step
    error. Returns (loss, grads, final h, final c); gradients do not flow into
    h0/c0, which is what makes chunked calls a truncated BPTT.
    """
    x = np.asarray(batch, dtype=np.float64)
    B, T, D = x.shape
    H = len(m["bc"])
    h = np.zeros((B, H)) if h0 is None else h0
    c = np.zeros((B, H)) if c0 is None else c0
    steps = T - 1
    cache = []
    loss = 0.0
    for t in range(steps):
        xt = x[:, t, :]
        cand = np.tanh(xt @ m["Wc"].T + h @ m["Uc"].T + m["bc"])
        f = sigmoid(xt @ m["Wf"].T + h @ m["Uf"].T + m["bf"])
        i = sigmoid(xt @ m["Wi"].T + h @ m["Ui"].T + m["bi"])
        o = sigmoid(xt @ m["Wo"].T + h @ m["Uo"].T + m["bo"])
        c_new = f * c + i * cand
        hc = np.tanh(c_new)
        h_new = o * hc
        pred = h_new @ m["Wout"].T + m["bout"]
        err = pred - x[:, t + 1, :]
        loss += float((err**2).sum())
        cache.append((xt, h, c, cand, f, i, o, c_new, hc, h_new, err))
        h, c = h_new, c_new
    scale = 1.0 / (B * steps)
    loss *= scale

    grads = _zero_grads(m)
    dh = np.zeros((B, H))
    dc = np.zeros((B, H))
    for t in reversed(range(steps)):
        xt, h_prev, c_prev, cand, f, i, o, c_new, hc, h_new, err = cache[t]
        dpred = 2.0 * scale * err
        grads["Wout"] += dpred.T @ h_new
        grads["bout"] += dpred.sum(axis=0)
        dh = dh + dpred @ m["Wout"]
        do = dh * hc
        dc = dc + dh * o * (1.0 - hc**2)
        df = dc * c_prev
        di = dc * cand
        dcand = dc * i
        dc_prev = dc * f
        dzc = dcand * (1.0 - cand**2)
        dzf = df * f * (1.0 - f)
        dzi = di * i * (1.0 - i)
        dzo = do * o * (1.0 - o)
        dh_prev = np.zeros((B, H))
        for gate, dz in (("c", dzc), ("f", dzf), ("i", dzi), ("o", dzo)):
            grads[f"W{gate}"] += dz.T @ xt
            grads[f"U{gate}"] += dz.T @ h_prev
            grads[f"b{gate}"] += dz.sum(axis=0)
            dh_prev += dz @ m[f"U{gate}"]
        dh, dc = dh_prev, dc_prev
    return loss, grads, h, c


def gru_loss_and_grads(m: ModelBundle, batch, h0=None):
    """GRU counterpart of lstm_loss_and_grads; the candidate reuses Ur."""
    x = np.asarray(batch, dtype=np.float64)
    B, T, D = x.shape
    H = len(m["bz"])
    h = np.zeros((B, H)) if h0 is None else h0
    steps = T - 1
    cache = []
    loss = 0.0
    for t in range(steps):
        xt = x[:, t, :]
        z = sigmoid(xt @ m["Wz"].T + h @ m["Uz"].T + m["bz"])
        r = sigmoid(xt @ m["Wr"].T + h @ m["Ur"].T + m["br"])
        rh = r * h
        cand = sigmoid(xt @ m["Wh"].T + rh @ m["Ur"].T + m["bh"])
        h_new = (1.0 - z) * h + z * cand
        pred = h_new @ m["Wout"].T + m["bout"]
        err = pred - x[:, t + 1, :]
        loss += float((err**2).sum())
        cache.append((xt, h, z, r, rh, cand, h_new, err))
        h = h_new
    scale = 1.0 / (B * steps)
    loss *= scale

    grads = _zero_grads(m)
    dh = np.zeros((B, H))
    for t in reversed(range(steps)):
        xt, h_prev, z, r, rh, cand, h_new, err = cache[t]
        dpred = 2.0 * scale * err
        grads["Wout"] += dpred.T @ h_new
        grads["bout"] += dpred.sum(axis=0)
        dh = dh + dpred @ m["Wout"]
        dz = dh * (cand - h_prev)
        dcand = dh * z
        dh_prev = dh * (1.0 - z)
        dac = dcand * cand * (1.0 - cand)
        grads["Wh"] += dac.T @ xt
        grads["bh"] += dac.sum(axis=0)
        grads["Ur"] += dac.T @ rh  # candidate-side use of Ur
        drh = dac @ m["Ur"]
        dr = drh * h_prev
        dh_prev += drh * r
        dar = dr * r * (1.0 - r)
        grads["Wr"] += dar.T @ xt
        grads["br"] += dar.sum(axis=0)
        grads["Ur"] += dar.T @ h_prev  # gate-side use of Ur
        dh_prev += dar @ m["Ur"]
        daz = dz * z * (1.0 - z)
        grads["Wz"] += daz.T @ xt
        grads["bz"] += daz.sum(axis=0)
        grads["Uz"] += daz.T @ h_prev
        dh_prev += daz @ m["Uz"]
        dh = dh_prev
    return loss, grads, h


def _clip_grads(grads, clip):
    total = np.sqrt(sum(float((g**2).sum()) for g in grads.values()))
    if clip and total > clip:
        factor = clip / total
        for g in grads.values():
            g *= factor
    return total


def _train_rnn(kind, sequences, hidden, lr, epochs, clip, trunc, seed):
    x = np.asarray(sequences, dtype=np.float64)
    if x.ndim == 2:
        x = x[None, :, :]
    if x.size == 0:
        raise TrainingError("empty dataset")
    B, T, D = x.shape
    if T < 2:
        raise TrainingError("sequences must have at least two readings")
    m = init_lstm(hidden, D, seed=seed) if kind == "lstm" else init_gru(hidden, D, seed=seed)
    step_fn = lstm_loss_and_grads if kind == "lstm" else gru_loss_and_grads
    losses = []
    for _ in range(epochs):
        epoch_loss = 0.0
        h = np.zeros((B, hidden))
        c = np.zeros((B, hidden))
        # Chunked passes: state carries across chunks, gradients do not.
        for start in range(0, T - 1, trunc):
            chunk = x[:, start : min(start + trunc + 1, T), :]
            if chunk.shape[1] < 2:
                break
            if kind == "lstm":
                loss, grads, h, c = lstm_loss_and_grads(m, chunk, h, c)
            else:
                loss, grads, h = gru_loss_and_grads(m, chunk, h)
            _check_finite(loss, f"{kind} loss")
            _clip_grads(grads, clip)
            for name, g in grads.items():
                m.tensors[name] = m.tensors[name] - lr * g
            epoch_loss += loss * (chunk.shape[1] - 1)
        losses.append(epoch_loss / (T - 1))
    m.tensors["epoch_losses"] = np.asarray(losses)
    return m


def train_lstm(sequences, hidden=16, lr=0.05, epochs=200, clip=5.0, trunc=20, seed=0):
    return _train_rnn("lstm", sequences, hidden, lr, epochs, clip, trunc, seed)


def train_gru(sequences, hidden=16, lr=0.05, epochs=200, clip=5.0, trunc=20, seed=0):
    return _train_rnn("gru", sequences, hidden, lr, epochs, clip, trunc, seed)


# ---------------------------------------------------------------------------
# Dispatcher
# ---------------------------------------------------------------------------

def train(kind: str, dataset, hyper=None, seed=0) -> ModelBundle:
    """Train a bundle of the given kind; `hyper` overrides per-kind defaults."""
    hyper = dict(hyper or {})
    hyper.setdefault("seed", seed)
    trainers = {
        "lr": train_lr,
        "mlp": train_mlp,
        "linear_svm": train_linear_svm,
        "kernel_svm": train_kernel_svm,
        "lstm": train_lstm,
        "gru": train_gru,
    }
    if kind == "krr":
        hyper.pop("seed", None)
        return train_krr(dataset, **hyper)
    if kind == "ocsvm":
        return train_ocsvm(dataset, **hyper)
    if kind not in trainers:
        raise ValueError(f"unknown model kind {kind!r}")
    return trainers[kind](dataset, **hyper)
