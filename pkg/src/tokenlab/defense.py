"""Token-budget countermeasure.

Per-block caps on active tokens are calibrated as the ceiling of the mean
active count over a clean holdout set. At inference, blocks whose active
set exceeds the cap shed the excess: the random policy drops a seeded
uniform choice, the confidence policy keeps the mechanism's highest-ranked
tokens (significance score / lowest cumulative halting / keep-probability).
The class token is never counted against the cap and is never removed;
for persistent mechanisms a removal carries through all deeper blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from .model import ModelConfig, ModelWeights, RunContext, model_forward

POLICIES = ("random", "confidence")


@dataclass
class DefenseConfig:
    caps: list
    policy: str = "confidence"
    seed: int = 0
    mechanism: str = ""
    holdout_size: int = 0

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown removal policy '{self.policy}'")
        self.caps = [int(c) for c in self.caps]
        if any(c < 1 for c in self.caps):
            raise ValueError("caps must be >= 1")

    def to_dict(self):
        return {
            "caps": list(self.caps),
            "policy": self.policy,
            "seed": self.seed,
            "mechanism": self.mechanism,
            "holdout_size": self.holdout_size,
        }

    @staticmethod
    def from_dict(d):
        return DefenseConfig(**d)


class DefenseRuntime:
    """Stateful enforcement hook handed to a forward pass.

    Call :meth:`begin` with the batch's image ids before each forward so the
    random policy draws reproducibly per image.
    """

    def __init__(self, config: DefenseConfig):
        self.config = config
        self._rngs = None

    def begin(self, image_ids):
        ids = np.atleast_1d(np.asarray(image_ids))
        if self.config.policy == "random":
            self._rngs = [np.random.default_rng((self.config.seed, int(i))) for i in ids]
        else:
            self._rngs = [None] * len(ids)

    def prune(self, block_index, active, scores=None):
        """Return a copy of ``active`` with at most cap non-class tokens.

        ``scores`` ranks tokens for the confidence policy (higher = keep);
        ignored by the random policy.
        """
        cap = self.config.caps[block_index - 1]
        out = np.array(active, dtype=bool, copy=True)
        if self._rngs is None:
            self.begin(np.arange(out.shape[0]))
        counts = out[:, 1:].sum(axis=-1)
        for b in np.flatnonzero(counts > cap):
            idx = np.flatnonzero(out[b, 1:]) + 1
            excess = int(counts[b] - cap)
            if self.config.policy == "random":
                drop = self._rngs[b].permutation(idx)[:excess]
            else:
                if scores is None:
                    raise ValueError("confidence policy needs per-token scores")
                order = idx[np.argsort(scores[b, idx], kind="stable")]
                drop = order[:excess]
            out[b, drop] = False
            out[b, 0] = True
        return out


def calibrate_caps(weights: ModelWeights, mechanism, holdout_images, policy="confidence",
                   seed=0, batch_size=64) -> DefenseConfig:
    """Caps from a clean holdout: ceil of the mean active-token count per block."""
    images = np.asarray(holdout_images)
    if images.shape[0] == 0:
        raise ValueError("empty holdout set")
    cfg = weights.config
    totals = np.zeros(cfg.depth, dtype=np.float64)
    ctx = RunContext(mode="eval")
    for s in range(0, images.shape[0], batch_size):
        x = images[s:s + batch_size]
        _, trace = model_forward(x, weights, mechanism, ctx=ctx)
        totals += trace.active_counts.sum(axis=1)
    means = totals / images.shape[0]
    caps = [min(int(math.ceil(m)), cfg.seq_len) for m in means]
    return DefenseConfig(
        caps=caps,
        policy=policy,
        seed=seed,
        mechanism=mechanism.kind if mechanism is not None else "none",
        holdout_size=int(images.shape[0]),
    )
