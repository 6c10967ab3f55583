"""Hand-derived single-step updates for a 9-parameter toy model.

The toy has a 1x1x1 input, one feature h = relu(w * x), a 2-way label head
z = h * u, and a domain head with one-head attention of width 1 over a single
token followed by a 2-way linear layer. With one token the attention map is
identically 1, so the domain logits reduce to r = (h * v * o) * c and the
query/key weights receive zero gradient. Everything below is written out in
float64 numpy without the autodiff engine.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from adlda import tensor as T
from adlda.model import AdldaModel, ModelSpec, adlda_loss, build_model
from adlda.trainer import SGD, train_step

TOY_SPEC = ModelSpec(
    input_shape=(1, 1, 1),
    class_count=2,
    domain_count=2,
    extractor="mlp",
    mlp_hidden=(1,),
    tokens=1,
    attn_heads=1,
    domain_hidden=(),
    bias=False,
)

TOY_VALUES = {
    "feature.mlp.0.weight": 0.8,
    "label_head.linear.weight": [0.6, -0.4],
    "domain_head.attention.query.weight": 0.3,
    "domain_head.attention.key.weight": -0.7,
    "domain_head.attention.value.weight": 0.9,
    "domain_head.attention.output.weight": -1.1,
    "domain_head.mlp.0.weight": [0.5, -0.2],
}

TOY_BATCH = (
    np.array([0.9, 1.4, 0.3, 2.0, 0.7, 1.1], dtype=np.float64).reshape(-1, 1, 1, 1),
    np.array([0, 1, 1, 0, 1, 0]),  # class labels
    np.array([0, 0, 1, 1, 1, 0]),  # domain labels
)


def toy_model(values: Dict[str, object] = TOY_VALUES) -> AdldaModel:
    with T.precision(np.float64):
        model = build_model(TOY_SPEC, seed=0)
    for name, p in model.named_parameters():
        p.data = np.asarray(values[name], dtype=np.float64).reshape(p.shape)
    return model


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def hand_updates(values: Dict[str, object], batch, lam: float, eta: float) -> Dict[str, np.ndarray]:
    """Apply the three update rules to ``values`` for one batch, by hand."""
    x, y, d = batch
    x = x.reshape(-1)
    n, k = len(x), 2
    w = float(np.asarray(values["feature.mlp.0.weight"]).reshape(()))
    u = np.asarray(values["label_head.linear.weight"], dtype=np.float64).reshape(2)
    q = float(np.asarray(values["domain_head.attention.query.weight"]).reshape(()))
    kk = float(np.asarray(values["domain_head.attention.key.weight"]).reshape(()))
    v = float(np.asarray(values["domain_head.attention.value.weight"]).reshape(()))
    o = float(np.asarray(values["domain_head.attention.output.weight"]).reshape(()))
    c = np.asarray(values["domain_head.mlp.0.weight"], dtype=np.float64).reshape(2)

    pre = w * x
    mask = (pre > 0).astype(np.float64)
    h = pre * mask

    # label path: L_Y = mean_i CE(h_i u, y_i)
    p = _softmax(h[:, None] * u[None, :])
    dz = (p - np.eye(2)[y]) / n
    dly_du = (h[:, None] * dz).sum(axis=0)
    dly_dh = dz @ u

    # domain path: L_D' = sum_i omega_i CE(g_i c, d_i), g_i = h_i v o
    counts = np.bincount(d, minlength=k).astype(np.float64)
    omega = 1.0 / (k * counts[d])
    g = h * v * o
    qd = _softmax(g[:, None] * c[None, :])
    dr = omega[:, None] * (qd - np.eye(k)[d])
    dld_dc = (g[:, None] * dr).sum(axis=0)
    dld_dg = dr @ c
    dld_dv = float((dld_dg * h * o).sum())
    dld_do = float((dld_dg * h * v).sum())
    dld_dh = dld_dg * v * o

    dly_dw = float((dly_dh * mask * x).sum())
    dld_dw = float((dld_dh * mask * x).sum())

    return {
        "feature.mlp.0.weight": np.array([[w - eta * (dly_dw - lam * dld_dw)]]),
        "label_head.linear.weight": (u - eta * dly_du).reshape(1, 2),
        "domain_head.attention.query.weight": np.array([[q]]),
        "domain_head.attention.key.weight": np.array([[kk]]),
        "domain_head.attention.value.weight": np.array([[v - eta * dld_dv]]),
        "domain_head.attention.output.weight": np.array([[o - eta * dld_do]]),
        "domain_head.mlp.0.weight": (c - eta * dld_dc).reshape(1, 2),
    }


@dataclass
class OracleResult:
    lam: float
    max_abs_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_abs_error <= self.tolerance


def check_train_step(lam: float, eta: float = 0.1, tolerance: float = 1e-10) -> OracleResult:
    """Compare one engine ``train_step`` against ``hand_updates``."""
    with T.precision(np.float64):
        model = toy_model()
        model.set_lambda(lam)
        x, y, d = TOY_BATCH
        train_step(model, x, y, d, SGD(model.trainable_parameters(), eta, momentum=0.0))
    expected = hand_updates(TOY_VALUES, TOY_BATCH, lam, eta)
    err = max(float(np.max(np.abs(p.data - expected[n]))) for n, p in model.named_parameters())
    return OracleResult(lam, err, tolerance)


def check_lambda_zero_label_only(eta: float = 0.1, tolerance: float = 1e-12) -> OracleResult:
    """With lambda = 0 the extractor update equals plain SGD on L_Y alone."""
    with T.precision(np.float64):
        model = toy_model()
        model.set_lambda(0.0)
        x, y, d = TOY_BATCH
        train_step(model, x, y, d, SGD(model.trainable_parameters(), eta, momentum=0.0))

        ref = toy_model()
        ref.zero_grad()
        out = ref.forward(x, d)
        _, ly, _ = adlda_loss(out, y, d, ref.domain_count)
        T.backward(ly)
    errs = []
    for (n, p), (_, r) in zip(model.group("feature") + model.group("label"), ref.group("feature") + ref.group("label")):
        errs.append(float(np.max(np.abs(p.data - (r.data - eta * r.grad)))))
    return OracleResult(0.0, max(errs), tolerance)


ORACLE_LAMBDAS = (0.0, 0.3, 1.0)


def run_oracles() -> List[Tuple[str, OracleResult]]:
    results = [(f"train_step lambda={lam}", check_train_step(lam)) for lam in ORACLE_LAMBDAS]
    results.append(("lambda=0 extractor update", check_lambda_zero_label_only()))
    return results
