"""Classification losses: plain softmax cross-entropy and the angular-margin loss.

The angular head classifies by the angle between a feature vector and unit
class-weight vectors. The margin multiplier m sharpens the decision boundary
for the true class; cos(m*theta) is replaced by its piecewise monotone
extension so the loss decreases over the whole angle range, and the margined
logit is annealed against the plain logit to keep early training stable.
"""

from __future__ import annotations

import numpy as np
from numpy.polynomial import chebyshev

from .tensor import Parameter, Tensor, TensorError, _wrap


class LossError(TensorError):
    pass


def _check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise LossError("labels must be a 1D integer array")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= num_classes:
        raise LossError(f"label out of range [0, {num_classes})")
    return labels


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_ce(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true class."""
    B, K = logits.data.shape
    y = _check_labels(labels, K)
    logp = _log_softmax(logits.data)
    loss = -logp[np.arange(B), y].mean()

    def backward(g):
        if logits.requires_grad:
            grad = np.exp(logp)
            grad[np.arange(B), y] -= 1.0
            logits._accumulate(float(g) * grad / B)

    return _wrap(np.float64(loss), (logits,), backward)


class AngularHead:
    """Bias-free classifier weights with an integer angular margin.

    Weight rows are renormalized to unit length on every forward pass
    (projection, not penalty). The annealing weight follows
    lam = max(lam_min, lam0 / (1 + decay * step)).
    """

    def __init__(self, feature_dim: int, num_classes: int = 2, margin: int = 4,
                 lam0: float = 1000.0, lam_min: float = 5.0, decay: float = 0.12,
                 rng: np.random.Generator | None = None):
        if margin < 1 or int(margin) != margin:
            raise LossError("margin m must be an integer >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.W = Parameter(rng.normal(0, 1.0 / np.sqrt(feature_dim),
                                      (num_classes, feature_dim)))
        self.margin = int(margin)
        self.lam0 = lam0
        self.lam_min = lam_min
        self.decay = decay
        # Chebyshev coefficients of cos(m*theta) as a polynomial in cos(theta)
        self._cheb = np.zeros(self.margin + 1)
        self._cheb[self.margin] = 1.0
        self._cheb_d = chebyshev.chebder(self._cheb)

    def parameters(self) -> list[Parameter]:
        return [self.W]

    def lam(self, step: int) -> float:
        return max(self.lam_min, self.lam0 / (1.0 + self.decay * step))

    def renormalize(self):
        norms = np.linalg.norm(self.W.data, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise LossError("zero-norm class weight vector")
        self.W.data /= norms

    def psi(self, cos_theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Monotone extension of cos(m*theta) and its derivative w.r.t. cos(theta)."""
        c = np.clip(cos_theta, -1.0, 1.0)
        theta = np.arccos(c)
        k = np.minimum(np.floor(self.margin * theta / np.pi), self.margin - 1)
        sign = np.where(k % 2 == 0, 1.0, -1.0)
        val = sign * chebyshev.chebval(c, self._cheb) - 2.0 * k
        dval = sign * chebyshev.chebval(c, self._cheb_d)
        return val, dval


def plain_logits(features: np.ndarray, head: AngularHead) -> np.ndarray:
    """Unmargined angular logits ||x|| * cos(theta_j) = x . w_j (unit rows)."""
    head.renormalize()
    return features @ head.W.data.T


def asoftmax_loss(features: Tensor, labels, head: AngularHead, step: int = 0) -> Tensor:
    """Angular-margin cross-entropy, mean over the batch."""
    B, dim = features.data.shape
    K = head.W.data.shape[0]
    if head.W.data.shape[1] != dim:
        raise LossError(f"feature dim {dim} does not match head dim {head.W.data.shape[1]}")
    y = _check_labels(labels, K)
    norms = np.linalg.norm(features.data, axis=1)
    if np.any(norms == 0):
        raise LossError("zero-norm feature vector: angle undefined")
    head.renormalize()
    W = head.W.data
    logits = features.data @ W.T            # r * cos(theta_j)
    r = norms
    cos_y = np.clip(logits[np.arange(B), y] / r, -1.0, 1.0)
    psi_v, psi_d = head.psi(cos_y)
    lam = head.lam(step)
    target_logit = (lam * logits[np.arange(B), y] + r * psi_v) / (1.0 + lam)
    mod = logits.copy()
    mod[np.arange(B), y] = target_logit
    logp = _log_softmax(mod)
    loss = -logp[np.arange(B), y].mean()

    def backward(g):
        dl = np.exp(logp)
        dl[np.arange(B), y] -= 1.0
        dl *= float(g) / B
        if features.requires_grad or head.W.requires_grad:
            u = features.data / r[:, None]
            wy = W[y]
            dl_y = dl[np.arange(B), y].copy()
            dl_off = dl.copy()
            dl_off[np.arange(B), y] = 0.0
            if features.requires_grad:
                gx = dl_off @ W
                # target logit: (lam * r*cos + r*psi(cos)) / (1 + lam)
                d_rc = wy                                # d(r cos)/dx
                d_rpsi = psi_v[:, None] * u + psi_d[:, None] * (wy - cos_y[:, None] * u)
                gx += dl_y[:, None] * (lam * d_rc + d_rpsi) / (1.0 + lam)
                features._accumulate(gx)
            if head.W.requires_grad:
                gW = dl_off.T @ features.data
                coef = dl_y * (lam + psi_d) / (1.0 + lam)
                np.add.at(gW, y, coef[:, None] * features.data)
                head.W._accumulate(gW)

    return _wrap(np.float64(loss), (features, head.W), backward)


def extract_features(network, x: Tensor) -> Tensor:
    """Post-global-pool, pre-classifier feature vectors, one per sample."""
    return network.forward_features(x, train=False)
