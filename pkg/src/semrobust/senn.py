"""Self-explaining classifier with learned basis concepts.

The model is a pair of networks over the same input: a conceptizer
producing k concept activations h(x) in (0, 1), and a parametrizer
producing per-class relevance scores theta(x) of shape [k, n_classes].
Class scores are the additive aggregation logit_c = sum_i theta[i, c] * h[i],
so the pair (h, theta) *is* the explanation of every prediction.

Hidden activations are tanh and pooling is average pooling, which keeps
every shipped map smooth enough for sharp finite-difference gradient
checks.
"""

import copy
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin

from .diffcore import adam_init, adam_step, loss_grads
from .errors import DegenerateDenominator, DivergedTraining
from .validation import check_images, check_labels, check_is_fitted


class _ConvFeatures(torch.nn.Module):
    """Two conv + avg-pool blocks, then a dense layer to out_dim."""

    def __init__(self, side, channels, hidden, out_dim):
        super().__init__()
        c1, c2 = channels
        self.side = side
        self.conv1 = torch.nn.Conv2d(1, c1, 5, padding=2)
        self.conv2 = torch.nn.Conv2d(c1, c2, 5, padding=2)
        self.fc1 = torch.nn.Linear(c2 * (side // 4) ** 2, hidden)
        self.out = torch.nn.Linear(hidden, out_dim)

    def forward(self, x):
        z = x.reshape(-1, 1, self.side, self.side)
        z = F.avg_pool2d(torch.tanh(self.conv1(z)), 2)
        z = F.avg_pool2d(torch.tanh(self.conv2(z)), 2)
        z = torch.tanh(self.fc1(z.flatten(1)))
        return self.out(z)


class _DenseFeatures(torch.nn.Module):
    def __init__(self, in_dim, hidden, out_dim):
        super().__init__()
        self.fc1 = torch.nn.Linear(in_dim, hidden)
        self.out = torch.nn.Linear(hidden, out_dim)

    def forward(self, x):
        return self.out(torch.tanh(self.fc1(x)))


def make_backbone(arch, in_dim, channels, hidden, out_dim):
    """Pick the conv stack for square inputs with side divisible by 4,
    otherwise (tiny toy inputs) a dense stack."""
    side = int(round(in_dim ** 0.5))
    if arch == "auto":
        arch = "conv" if side * side == in_dim and side % 4 == 0 and side >= 8 else "dense"
    if arch == "conv":
        if side * side != in_dim or side % 4 or side < 8:
            raise ValueError(f"conv backbone needs a square side divisible by 4, got {in_dim} pixels")
        return _ConvFeatures(side, channels, hidden, out_dim)
    if arch == "dense":
        return _DenseFeatures(in_dim, hidden, out_dim)
    raise ValueError(f"unknown arch {arch!r}")


class _SennNet(torch.nn.Module):
    def __init__(self, in_dim, n_concepts, n_classes, channels, hidden, arch):
        super().__init__()
        self.n_concepts = n_concepts
        self.n_classes = n_classes
        self.conceptizer = make_backbone(arch, in_dim, channels, hidden, n_concepts)
        self.parametrizer = make_backbone(arch, in_dim, channels, hidden, n_concepts * n_classes)
        self.decoder = _DenseFeatures(n_concepts, hidden, in_dim)

    def concepts(self, x):
        return torch.sigmoid(self.conceptizer(x))

    def relevances(self, x):
        return self.parametrizer(x).reshape(-1, self.n_concepts, self.n_classes)

    def logits(self, x):
        return torch.einsum("bk,bkc->bc", self.concepts(x), self.relevances(x))

    def forward(self, x):
        h = self.concepts(x)
        th = self.relevances(x)
        return torch.einsum("bk,bkc->bc", h, th), h, th

    def reconstruct(self, h):
        return torch.sigmoid(self.decoder(h))


def aggregate_logits(concepts, relevances):
    """Additive aggregation logit_c = sum_i relevances[..., i, c] * concepts[..., i]."""
    concepts = np.asarray(concepts, dtype=np.float64)
    relevances = np.asarray(relevances, dtype=np.float64)
    return np.einsum("...k,...kc->...c", concepts, relevances)


def _stability_gap(x, h, th, logits):
    """Per-example squared gap between the input gradient of the
    predicted-class logit and its fixed-theta linearization theta^T J_h.

    Requires x to be a leaf with requires_grad=True; builds a
    differentiable graph so the gap can be used as a training penalty.
    """
    pred = logits.argmax(dim=1)
    cols = pred.view(-1, 1, 1).expand(-1, h.shape[1], 1)
    th_pred = th.gather(2, cols).squeeze(2)
    f_pred = logits.gather(1, pred.view(-1, 1)).sum()
    (grad_f,) = torch.autograd.grad(f_pred, x, create_graph=True)
    lin = (th_pred.detach() * h).sum()
    (grad_lin,) = torch.autograd.grad(lin, x, create_graph=True)
    return ((grad_f - grad_lin) ** 2).sum(dim=1)


class SennClassifier(BaseEstimator, ClassifierMixin):
    """Concept-based self-explaining classifier.

    Parameters
    ----------
    n_concepts : number of basis concepts k.
    hidden_dim : width of the dense layer in each backbone.
    conv_channels : channel counts of the two conv blocks.
    arch : "conv", "dense" or "auto" (conv for 28x28-style inputs).
    stability_weight : weight of the relevance-stability penalty.
    recon_weight : weight of the concept-reconstruction penalty that keeps
        concepts information-bearing (so concept galleries mean something).
    epochs, batch_size, lr, seed : training loop knobs.
    """

    def __init__(self, n_concepts=12, hidden_dim=128, conv_channels=(8, 16),
                 arch="auto", stability_weight=2e-4, recon_weight=2e-5,
                 epochs=10, batch_size=128, lr=1e-3, seed=0):
        self.n_concepts = n_concepts
        self.hidden_dim = hidden_dim
        self.conv_channels = conv_channels
        self.arch = arch
        self.stability_weight = stability_weight
        self.recon_weight = recon_weight
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    # -- training -----------------------------------------------------------

    def fit(self, X, y):
        X = check_images(X)
        y = check_labels(y, X.shape[0])
        classes = np.unique(y)
        if classes.size < 2:
            raise ValueError("need at least two classes")
        y_idx = np.searchsorted(classes, y)
        torch.manual_seed(self.seed)
        net = _SennNet(X.shape[1], self.n_concepts, classes.size,
                       tuple(self.conv_channels), self.hidden_dim, self.arch)
        self.classes_ = classes
        self.n_features_in_ = X.shape[1]
        self.history_, self.step_losses_ = self._train(net, X, y_idx)
        self.net_ = net.eval()
        return self

    def _loss_terms(self, net, xb, yb):
        use_stab = self.stability_weight > 0
        use_rec = self.recon_weight > 0
        if use_stab:
            xb = xb.clone().requires_grad_(True)
        h = net.concepts(xb)
        th = net.relevances(xb)
        logits = torch.einsum("bk,bkc->bc", h, th)
        ce = F.cross_entropy(logits, yb)
        stab = _stability_gap(xb, h, th, logits).mean() if use_stab else None
        rec = ((net.reconstruct(h) - xb) ** 2).sum(dim=1).mean() if use_rec else None
        loss = ce
        if stab is not None:
            loss = loss + self.stability_weight * stab
        if rec is not None:
            loss = loss + self.recon_weight * rec
        return loss, ce, stab, rec

    def _train(self, net, X, y_idx):
        params = dict(net.named_parameters())
        state = adam_init(params)
        rng = np.random.default_rng(self.seed)
        Xt = torch.from_numpy(X)
        yt = torch.from_numpy(y_idx)
        history, step_losses = [], []
        for epoch in range(self.epochs):
            perm = rng.permutation(X.shape[0])
            totals = np.zeros(4)
            n_batches = 0
            for start in range(0, X.shape[0], self.batch_size):
                idx = perm[start:start + self.batch_size]
                loss, ce, stab, rec = self._loss_terms(net, Xt[idx], yt[idx])
                if not torch.isfinite(loss):
                    raise DivergedTraining(f"loss {float(loss.detach())} at epoch {epoch}")
                new_params, state = adam_step(params, loss_grads(loss, params),
                                              state, lr=self.lr)
                with torch.no_grad():
                    for k, p in params.items():
                        p.copy_(new_params[k])
                totals += [float(loss.detach()), float(ce.detach()),
                           float(stab.detach()) if stab is not None else 0.0,
                           float(rec.detach()) if rec is not None else 0.0]
                step_losses.append(float(loss.detach()))
                n_batches += 1
            mean = totals / max(n_batches, 1)
            history.append({"epoch": epoch, "loss": mean[0], "ce": mean[1],
                            "stability": mean[2], "recon": mean[3]})
        return history, np.asarray(step_losses)

    # -- inference ----------------------------------------------------------

    def _forward_np(self, X, batch=1024):
        check_is_fitted(self, "net_")
        X = check_images(X, self.n_features_in_)
        logits, concepts, relevances = [], [], []
        with torch.no_grad():
            for s in range(0, X.shape[0], batch):
                lo, h, th = self.net_(torch.from_numpy(X[s:s + batch]))
                logits.append(lo.numpy())
                concepts.append(h.numpy())
                relevances.append(th.numpy())
        return (np.concatenate(logits), np.concatenate(concepts),
                np.concatenate(relevances))

    def forward_explain(self, X):
        """Logits plus the explanation pair (concepts, relevances)."""
        return self._forward_np(X)

    def decision_function(self, X):
        return self._forward_np(X)[0]

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    def explain(self, X):
        """Concept activations [n, k] and relevance scores [n, k, n_classes]."""
        _, h, th = self._forward_np(X)
        return h, th

    def concepts(self, X):
        return self.explain(X)[0]

    def relevances(self, X):
        return self.explain(X)[1]

    def reconstruct(self, X):
        """Decoder view of the concept bottleneck (diagnostic)."""
        check_is_fitted(self, "net_")
        X = check_images(X, self.n_features_in_)
        with torch.no_grad():
            return self.net_.reconstruct(self.net_.concepts(torch.from_numpy(X))).numpy()


def stability_penalty(model, x):
    """Training stability penalty at a single input, in double precision:
    || grad_x f_pred(x) - theta_pred(x)^T J_h(x) ||^2."""
    check_is_fitted(model, "net_")
    x = check_images(x, model.n_features_in_).astype(np.float64)
    if x.shape[0] != 1:
        raise ValueError("stability_penalty evaluates one input at a time")
    net = copy.deepcopy(model.net_).double()
    xt = torch.from_numpy(x).requires_grad_(True)
    h = net.concepts(xt)
    th = net.relevances(xt)
    logits = torch.einsum("bk,bkc->bc", h, th)
    return float(_stability_gap(xt, h, th, logits)[0])


# --- concept gallery --------------------------------------------------------

@dataclass
class ConceptGallery:
    """Per concept, the training images that activate it most."""

    indices: np.ndarray      # [k, m] training indices, activation-descending
    activations: np.ndarray  # [k, m]


def build_concept_gallery(model, X_train, top_m=4):
    """Rank training images by each concept's activation; ties break toward
    the lowest example index."""
    h = model.concepts(X_train)
    m = min(top_m, h.shape[0])
    order = np.argsort(-h, axis=0, kind="stable")[:m]
    activations = np.take_along_axis(h, order, axis=0)
    return ConceptGallery(indices=order.T.astype(np.int64).copy(),
                          activations=activations.T.astype(np.float64).copy())


def export_gallery(gallery, X_train, out_dir, prefix="concept"):
    """Write gallery images as PGM files plus a plain-text index."""
    from .dataio import write_pgm

    out_dir.mkdir(parents=True, exist_ok=True)
    side = int(round(X_train.shape[1] ** 0.5))
    lines = ["concept rank example_index activation filename"]
    for i in range(gallery.indices.shape[0]):
        for r in range(gallery.indices.shape[1]):
            idx = int(gallery.indices[i, r])
            name = f"{prefix}_{i:02d}_rank{r}_ex{idx}.pgm"
            write_pgm(out_dir / name, X_train[idx].reshape(side, side))
            lines.append(f"{i} {r} {idx} {gallery.activations[i, r]:.6f} {name}")
    (out_dir / "gallery_index.txt").write_text("\n".join(lines) + "\n")


# --- explanation-sensitivity ratio ------------------------------------------

@dataclass
class LipschitzEstimate:
    value: float
    x_star: np.ndarray
    epsilon: float


def local_lipschitz(model, x, epsilon, steps=30, restarts=3, step_size=None,
                    seed=0, extra_starts=None):
    """Lower bound on max_{x* in the eps-ball} ||theta(x*) - theta(x)||_2 /
    (||h(x*) - h(x)||_2 + 1e-12), found by sign-gradient ascent from random
    starts inside the ball.

    `extra_starts` are projected into the ball and used as additional warm
    starts, which makes the estimate monotone when growing epsilon with the
    smaller ball's maximizer carried over. Raises DegenerateDenominator if
    no probe moved the concept vector at all.
    """
    from .attack import AttackConfig, pgd

    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    check_is_fitted(model, "net_")
    x = check_images(x, model.n_features_in_)
    if x.shape[0] != 1:
        raise ValueError("local_lipschitz evaluates one input at a time")
    net = model.net_
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        xt = torch.from_numpy(x).to(dtype)
        h0 = _concept_vector(net, xt)
        t0 = _relevance_vector(net, xt)
    seen = {"max_den": 0.0}

    def ratio(xb):
        xb = xb.to(dtype)
        num = torch.linalg.vector_norm(_relevance_vector(net, xb) - t0, dim=1)
        den = torch.linalg.vector_norm(_concept_vector(net, xb) - h0, dim=1)
        seen["max_den"] = max(seen["max_den"], float(den.max()))
        return num / (den + 1e-12)

    starts = []
    rng = np.random.default_rng(seed)
    for _ in range(max(restarts, 1)):
        jitter = rng.uniform(-epsilon, epsilon, size=x.shape)
        starts.append(np.clip(x.astype(np.float64) + jitter, 0.0, 1.0))
    for xs in (extra_starts or []):
        starts.append(np.asarray(xs, dtype=np.float64).reshape(1, -1))

    cfg = AttackConfig(epsilon=epsilon, steps=steps,
                       step_size=step_size or max(epsilon / 10.0, 1e-3),
                       seed=seed)
    best_value, best_x = -np.inf, x.astype(np.float64)
    for xs in starts:
        result = pgd(ratio, x, cfg, sense="maximize", x_start=xs)
        if float(result.value[0]) > best_value:
            best_value = float(result.value[0])
            best_x = result.x[0]
    if seen["max_den"] == 0.0:
        raise DegenerateDenominator("no probe moved the concept vector")
    return LipschitzEstimate(value=best_value, x_star=best_x, epsilon=epsilon)


def _concept_vector(net, xb):
    if hasattr(net, "concepts"):
        return net.concepts(xb)
    return net.distances(xb)


def _relevance_vector(net, xb):
    return net.relevances(xb).flatten(1)
