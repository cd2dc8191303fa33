"""Per-instance memory bank and the view-invariant contrastive losses.

The bank keeps one exponentially averaged embedding per training instance.
The raw average is stored unnormalized (its trajectory has a simple closed
form), while all similarity consumers read the unit-normalized rows.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F


@dataclass
class ContrastConfig:
    tau: float = 0.04
    negatives: int = 128

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.negatives < 1:
            raise ValueError("need at least one negative")


class ConfigurationError(RuntimeError):
    pass


class MemoryBank:
    """One embedding per instance, blended as ``alpha*old + (1-alpha)*new``.

    ``alpha`` weights the stored value, so the default 0.2 lets each fresh
    embedding dominate its row.
    """

    def __init__(self, features, momentum=0.2):
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2:
            raise ValueError("features must be (N, D)")
        if not 0.0 <= momentum <= 1.0:
            raise ValueError("momentum must be in [0, 1]")
        self.ema = feats.copy()
        self.momentum = float(momentum)
        self.epoch = 0

    def __len__(self):
        return self.ema.shape[0]

    @property
    def rows(self):
        """Unit-normalized view of the bank."""
        norms = np.linalg.norm(self.ema, axis=1, keepdims=True)
        return self.ema / np.maximum(norms, 1e-12)

    def update(self, instance_index, f):
        i = int(instance_index)
        if not 0 <= i < len(self):
            raise IndexError(f"instance index {i} out of range")
        vec = np.asarray(f, dtype=np.float64).reshape(-1)
        if vec.shape != (self.ema.shape[1],):
            raise ValueError("embedding dimension mismatch")
        a = self.momentum
        self.ema[i] = a * self.ema[i] + (1.0 - a) * vec

    def state_arrays(self):
        return {"memory_bank": self.ema.copy()}

    @staticmethod
    def from_state(arrays, momentum, epoch=0):
        bank = MemoryBank(arrays["memory_bank"], momentum)
        bank.epoch = epoch
        return bank


@dataclass
class ContrastBatchSample:
    """Indices and memory rows for one anchor's contrastive terms."""

    anchor_index: int
    positive_index: int
    negative_indices: np.ndarray
    f_pos: np.ndarray
    negatives: np.ndarray
    f: np.ndarray = None        # filled by the trainer with live encodings
    f_new: np.ndarray = None


def sample_pairs(bank, labels, anchor_index, rng, cfg):
    """Draw the memory positive and negatives for one anchor.

    Returns None for noise-labeled anchors. If the anchor's cluster has no
    other member, its own memory row serves as the positive. Negatives are
    drawn uniformly without replacement from every instance carrying a
    different label (noise instances included).
    """
    lab = labels.labels[anchor_index]
    if lab < 0:
        return None
    members = np.flatnonzero(labels.labels == lab)
    mates = members[members != anchor_index]
    if mates.size == 0:
        positive = int(anchor_index)
    else:
        positive = int(rng.choice(mates))
    pool = np.flatnonzero(labels.labels != lab)
    if cfg.negatives > pool.size:
        raise ConfigurationError(
            f"{cfg.negatives} negatives requested but only {pool.size} eligible")
    neg_idx = rng.choice(pool, size=cfg.negatives, replace=False)
    rows = bank.rows
    return ContrastBatchSample(
        anchor_index=int(anchor_index),
        positive_index=positive,
        negative_indices=np.sort(neg_idx),
        f_pos=rows[positive],
        negatives=rows[np.sort(neg_idx)],
    )


def _unit(v, name):
    t = torch.as_tensor(v) if not isinstance(v, torch.Tensor) else v
    n = t.norm(dim=-1, keepdim=True)
    if (n < 1e-12).any():
        raise ValueError(f"{name}: zero-norm vector")
    return t / n


def cosine_sim(u, v):
    return (_unit(u, "u") * _unit(v, "v")).sum(-1)


def _log_ratio(pos_sim, neg_sims, tau):
    """log(1 + sum(exp(neg/tau)) / exp(pos/tau)), stable at small tau."""
    if neg_sims.numel() == 0:
        return pos_sim * 0.0
    z = torch.logsumexp(neg_sims / tau, dim=-1) - pos_sim / tau
    return F.softplus(z)


def view_invariant_loss(f, f_pos, f_new, negatives, tau):
    """Positive pair (f, f_pos); negatives push against the synthesized view."""
    negs = cosine_sim(_unit(f_new, "f_new").unsqueeze(0), _unit(negatives, "negatives"))
    return _log_ratio(cosine_sim(f, f_pos), negs, tau)


def synth_original_loss(f, f_new, negatives, tau):
    """Positive pair (f_new, f); negatives push against the synthesized view."""
    negs = cosine_sim(_unit(f_new, "f_new").unsqueeze(0), _unit(negatives, "negatives"))
    return _log_ratio(cosine_sim(f_new, f), negs, tau)


def synth_memory_loss(f_pos, f_new, negatives, tau):
    """Positive pair (f_new, f_pos); negatives push against the synthesized view."""
    negs = cosine_sim(_unit(f_new, "f_new").unsqueeze(0), _unit(negatives, "negatives"))
    return _log_ratio(cosine_sim(f_new, f_pos), negs, tau)


def instance_contrast_loss(f, f_pos, negatives, tau):
    """Generation-free variant: negatives push against the original view."""
    negs = cosine_sim(_unit(f, "f").unsqueeze(0), _unit(negatives, "negatives"))
    return _log_ratio(cosine_sim(f, f_pos), negs, tau)
