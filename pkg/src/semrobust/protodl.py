"""Prototype-based self-explaining classifier.

An autoencoder maps images to a latent space holding m learned prototype
vectors. The basis concepts h(x) are the (squared, by default) Euclidean
distances from the encoded input to each prototype, and a constant linear
head turns those distances into class scores. Because the head never
depends on the input, the relevance half of the explanation can't move at
all; only the distances can.

Each prototype decodes back to an image, so explanations can be shown as
"the input is near this picture".
"""

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin

from .diffcore import adam_init, adam_step, loss_grads
from .errors import (AllPrototypesSameLabel, DivergedTraining, IndexOutOfRange,
                     NoPrototypeForLabel)
from .senn import _DenseFeatures
from .validation import check_images, check_labels, check_is_fitted


def _conv_out(s):
    return (s - 1) // 2 + 1


class _ConvEncoder(torch.nn.Module):
    """Three stride-2 conv layers, then a dense map to the latent space."""

    def __init__(self, side, channels, latent_dim):
        super().__init__()
        c1, c2 = channels
        self.side = side
        self.conv1 = torch.nn.Conv2d(1, c1, 3, stride=2, padding=1)
        self.conv2 = torch.nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.conv3 = torch.nn.Conv2d(c2, c2, 3, stride=2, padding=1)
        self.s3 = _conv_out(_conv_out(_conv_out(side)))
        self.fc = torch.nn.Linear(c2 * self.s3 ** 2, latent_dim)

    def forward(self, x):
        z = x.reshape(-1, 1, self.side, self.side)
        z = torch.tanh(self.conv1(z))
        z = torch.tanh(self.conv2(z))
        z = torch.tanh(self.conv3(z))
        return self.fc(z.flatten(1))


class _ConvDecoder(torch.nn.Module):
    """Mirror of _ConvEncoder with transposed convolutions."""

    def __init__(self, side, channels, latent_dim):
        super().__init__()
        c1, c2 = channels
        s1 = _conv_out(side)
        s2 = _conv_out(s1)
        s3 = _conv_out(s2)
        self.c2, self.s3 = c2, s3
        self.fc = torch.nn.Linear(latent_dim, c2 * s3 ** 2)
        self.deconv1 = torch.nn.ConvTranspose2d(
            c2, c2, 3, stride=2, padding=1, output_padding=s2 - 2 * s3 + 1)
        self.deconv2 = torch.nn.ConvTranspose2d(
            c2, c1, 3, stride=2, padding=1, output_padding=s1 - 2 * s2 + 1)
        self.deconv3 = torch.nn.ConvTranspose2d(
            c1, 1, 3, stride=2, padding=1, output_padding=side - 2 * s1 + 1)

    def forward(self, z):
        z = torch.tanh(self.fc(z)).reshape(-1, self.c2, self.s3, self.s3)
        z = torch.tanh(self.deconv1(z))
        z = torch.tanh(self.deconv2(z))
        return torch.sigmoid(self.deconv3(z)).flatten(1)


class _DenseDecoder(torch.nn.Module):
    def __init__(self, latent_dim, hidden, out_dim):
        super().__init__()
        self.body = _DenseFeatures(latent_dim, hidden, out_dim)

    def forward(self, z):
        return torch.sigmoid(self.body(z))


class _ProtoNet(torch.nn.Module):
    def __init__(self, in_dim, n_prototypes, n_classes, latent_dim, channels,
                 hidden, arch, squared):
        super().__init__()
        side = int(round(in_dim ** 0.5))
        if arch == "auto":
            arch = "conv" if side * side == in_dim and side >= 8 else "dense"
        if arch == "conv":
            self.encoder = _ConvEncoder(side, channels, latent_dim)
            self.decoder = _ConvDecoder(side, channels, latent_dim)
        elif arch == "dense":
            self.encoder = _DenseFeatures(in_dim, hidden, latent_dim)
            self.decoder = _DenseDecoder(latent_dim, hidden, in_dim)
        else:
            raise ValueError(f"unknown arch {arch!r}")
        self.prototypes = torch.nn.Parameter(torch.randn(n_prototypes, latent_dim) * 0.5)
        self.head = torch.nn.Parameter(torch.randn(n_classes, n_prototypes) * 0.1)
        self.squared = squared

    def encode(self, x):
        return self.encoder(x)

    def decode(self, z):
        return self.decoder(z)

    def latent_sq_distances(self, z):
        return ((z[:, None, :] - self.prototypes[None, :, :]) ** 2).sum(dim=2)

    def distances(self, x):
        d2 = self.latent_sq_distances(self.encode(x))
        return d2 if self.squared else torch.sqrt(d2)

    def logits(self, x):
        return self.distances(x) @ self.head.t()

    def relevances(self, x):
        n = x.shape[0]
        return self.head.t()[None, :, :].expand(n, -1, -1)

    def forward(self, x):
        return self.logits(x)


class PrototypeClassifier(BaseEstimator, ClassifierMixin):
    """Autoencoder + latent prototypes + constant linear head.

    Parameters
    ----------
    n_prototypes : number of learned prototype vectors m.
    latent_dim : dimension of the autoencoder latent space.
    squared_distances : store h_j as squared latent distance (default) or
        plain distance; the squared form keeps gradients smooth at zero.
    recon_weight : weight of the autoencoder reconstruction loss.
    ground_proto_weight / ground_data_weight : weights of the two grounding
        terms pulling each prototype toward some training latent and each
        training latent toward some prototype.
    """

    def __init__(self, n_prototypes=15, latent_dim=40, hidden_dim=128,
                 conv_channels=(8, 16), arch="auto", squared_distances=True,
                 recon_weight=0.1, ground_proto_weight=0.05,
                 ground_data_weight=0.05, epochs=20, batch_size=128,
                 lr=1e-3, seed=0):
        self.n_prototypes = n_prototypes
        self.latent_dim = latent_dim
        self.hidden_dim = hidden_dim
        self.conv_channels = conv_channels
        self.arch = arch
        self.squared_distances = squared_distances
        self.recon_weight = recon_weight
        self.ground_proto_weight = ground_proto_weight
        self.ground_data_weight = ground_data_weight
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
        net = _ProtoNet(X.shape[1], self.n_prototypes, classes.size,
                        self.latent_dim, tuple(self.conv_channels),
                        self.hidden_dim, self.arch, self.squared_distances)
        self.classes_ = classes
        self.n_features_in_ = X.shape[1]
        self.history_, self.step_losses_ = self._train(net, X, y_idx)
        self.net_ = net.eval()
        self.proto_labels_, self.head_labels_ = self._assign_labels(X, y)
        if np.setdiff1d(classes, self.proto_labels_).size:
            missing = np.setdiff1d(classes, self.proto_labels_)
            warnings.warn(f"classes {missing.tolist()} have no prototype; "
                          "training quality is suspect")
        self._record_recon_stats(X)
        return self

    def _loss_terms(self, net, xb, yb):
        z = net.encode(xb)
        d2 = net.latent_sq_distances(z)
        h = d2 if net.squared else torch.sqrt(d2)
        logits = h @ net.head.t()
        ce = F.cross_entropy(logits, yb)
        loss = ce
        rec = g_proto = g_data = None
        if self.recon_weight > 0:
            rec = ((net.decode(z) - xb) ** 2).sum(dim=1).mean()
            loss = loss + self.recon_weight * rec
        if self.ground_proto_weight > 0:
            g_proto = d2.min(dim=0).values.mean()
            loss = loss + self.ground_proto_weight * g_proto
        if self.ground_data_weight > 0:
            g_data = d2.min(dim=1).values.mean()
            loss = loss + self.ground_data_weight * g_data
        return loss, ce, rec, g_proto, g_data

    def _train(self, net, X, y_idx):
        params = dict(net.named_parameters())
        state = adam_init(params)
        rng = np.random.default_rng(self.seed)
        Xt = torch.from_numpy(X)
        yt = torch.from_numpy(y_idx)
        history, step_losses = [], []
        for epoch in range(self.epochs):
            perm = rng.permutation(X.shape[0])
            totals = np.zeros(5)
            n_batches = 0
            for start in range(0, X.shape[0], self.batch_size):
                idx = perm[start:start + self.batch_size]
                loss, ce, rec, g_p, g_d = self._loss_terms(net, Xt[idx], yt[idx])
                if not torch.isfinite(loss):
                    raise DivergedTraining(f"loss {float(loss.detach())} at epoch {epoch}")
                new_params, state = adam_step(params, loss_grads(loss, params),
                                              state, lr=self.lr)
                with torch.no_grad():
                    for k, p in params.items():
                        p.copy_(new_params[k])
                step_losses.append(float(loss.detach()))
                totals += [float(loss.detach()), float(ce.detach()),
                           float(rec.detach()) if rec is not None else 0.0,
                           float(g_p.detach()) if g_p is not None else 0.0,
                           float(g_d.detach()) if g_d is not None else 0.0]
                n_batches += 1
            mean = totals / max(n_batches, 1)
            history.append({"epoch": epoch, "loss": mean[0], "ce": mean[1],
                            "recon": mean[2], "ground_proto": mean[3],
                            "ground_data": mean[4]})
        return history, np.asarray(step_losses)

    def _assign_labels(self, X, y):
        """Label each prototype by its nearest training latent; also derive
        the label the head itself credits (most negative weight), logged as
        a diagnostic when the two disagree."""
        Z = self.encode(X)
        P = self.net_.prototypes.detach().numpy()
        d2 = ((P[:, None, :] - Z[None, :, :]) ** 2).sum(axis=2)
        nearest = d2.argmin(axis=1)
        proto_labels = y[nearest].astype(np.int64)
        W = self.net_.head.detach().numpy()
        head_labels = self.classes_[W.argmin(axis=0)].astype(np.int64)
        if (proto_labels != head_labels).any():
            disagree = np.flatnonzero(proto_labels != head_labels).tolist()
            warnings.warn(f"nearest-latent and head-weight labels disagree "
                          f"for prototypes {disagree}")
        return proto_labels, head_labels

    def _record_recon_stats(self, X):
        err = (((self.reconstruct(X) - X) ** 2).sum(axis=1)).astype(np.float64)
        self.recon_stats_ = {"mean": float(err.mean()), "std": float(err.std())}

    # -- inference ----------------------------------------------------------

    def _batched(self, X, fn, batch=1024):
        check_is_fitted(self, "net_")
        X = check_images(X, self.n_features_in_)
        outs = []
        with torch.no_grad():
            for s in range(0, X.shape[0], batch):
                outs.append(fn(torch.from_numpy(X[s:s + batch])).numpy())
        return np.concatenate(outs)

    def prototype_distances(self, X):
        """Basis concepts h(x): distance from encode(x) to every prototype."""
        return self._batched(X, self.net_.distances)

    def decision_function(self, X):
        return self._batched(X, self.net_.logits)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    def relevances(self, X):
        """Constant relevance scores: the same head matrix for every input."""
        check_is_fitted(self, "net_")
        X = check_images(X, self.n_features_in_)
        W = self.net_.head.detach().numpy()
        return np.broadcast_to(W.T[None, :, :], (X.shape[0],) + W.T.shape).copy()

    def encode(self, X):
        return self._batched(X, self.net_.encode)

    def reconstruct(self, X):
        return self._batched(X, lambda xb: self.net_.decode(self.net_.encode(xb)))

    def decode_prototype(self, j):
        """Decode prototype j to an image, clamped to [0, 1]."""
        check_is_fitted(self, "net_")
        if not 0 <= j < self.n_prototypes:
            raise IndexOutOfRange(f"prototype {j} of {self.n_prototypes}")
        side = int(round(self.n_features_in_ ** 0.5))
        with torch.no_grad():
            img = self.net_.decode(self.net_.prototypes[j][None, :])[0].numpy()
        return np.clip(img, 0.0, 1.0).reshape(side, side)


def assign_proto_labels(model, X, y):
    """Re-derive the prototype labels from a training set. Returns
    (nearest_latent_labels, head_weight_labels)."""
    check_is_fitted(model, "net_")
    X = check_images(X, model.n_features_in_)
    y = check_labels(y, X.shape[0])
    return model._assign_labels(X, y)


# --- distance algebra --------------------------------------------------------

def overall_distance_D(h, proto_labels, label):
    """Root-mean-square of h over the prototypes carrying `label`."""
    h = np.asarray(h, dtype=np.float64)
    mask = np.asarray(proto_labels) == label
    if not mask.any():
        raise NoPrototypeForLabel(f"no prototype labeled {label}")
    return float(np.sqrt((h[mask] ** 2).mean()))


def rest_distance_R(h, proto_labels, label):
    """Root-mean-square of h over the prototypes NOT carrying `label`."""
    h = np.asarray(h, dtype=np.float64)
    mask = np.asarray(proto_labels) != label
    if not mask.any():
        raise AllPrototypesSameLabel(f"every prototype is labeled {label}")
    return float(np.sqrt((h[mask] ** 2).mean()))


def interp_loss_Lh(h, proto_labels, label, lam):
    """Interpretation-inconsistency value D - lam * R."""
    return overall_distance_D(h, proto_labels, label) - lam * rest_distance_R(
        h, proto_labels, label)


def export_prototypes(model, out_dir):
    """Write decoded prototypes as proto_<j>_label_<Y(j)>.pgm plus an index."""
    from .dataio import write_pgm

    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["prototype label head_label filename"]
    for j in range(model.n_prototypes):
        name = f"proto_{j}_label_{int(model.proto_labels_[j])}.pgm"
        write_pgm(out_dir / name, model.decode_prototype(j))
        lines.append(f"{j} {int(model.proto_labels_[j])} "
                     f"{int(model.head_labels_[j])} {name}")
    (out_dir / "prototype_index.txt").write_text("\n".join(lines) + "\n")
