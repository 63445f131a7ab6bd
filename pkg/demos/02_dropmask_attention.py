"""DropMask self-attention: no token may attend to a masked key.

Three properties demonstrated on random inputs:
  1. blindness: with renormalize=True (the default) the masked keys are
     excluded before the softmax, so scrambling the content at masked
     positions leaves the outputs at unmasked positions bitwise
     unchanged,
  2. the contrast: renormalize=False drops the masked keys' terms from
     the weighted sum only after a full softmax, so the surviving
     weights sum to less than one and still share a normalizer with the
     masked keys (content blindness is exact only in renormalized mode),
  3. zero masked positions reduce both modes to standard attention,
     bitwise.

Run: python demos/02_dropmask_attention.py [--length N] [--seed N]
"""

import argparse

import numpy as np

from hybridbert import Tape
from hybridbert.attention import (
    AttentionWeights,
    DropMaskConfig,
    dropmask_self_attention,
    multi_head_self_attention,
)
from hybridbert.tensor import Tensor


def forward(x, w, masked, cfg):
    with Tape():
        return dropmask_self_attention(Tensor(x), w, None, masked, cfg).data


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--length", type=int, default=12)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    d, heads, l = 32, 4, args.length
    w = AttentionWeights.init(d, heads, rng, dtype=np.float64, std=0.3)
    x = rng.normal(size=(l, d))
    masked = np.zeros(l, dtype=bool)
    masked[rng.choice(l, size=max(1, l // 4), replace=False)] = True
    print(f"masked positions: {np.flatnonzero(masked).tolist()}")

    # 1 + 2. scramble the masked rows, watch the unmasked outputs
    scrambled = x.copy()
    scrambled[masked] = rng.normal(size=(int(masked.sum()), d)) * 100.0
    for renorm in (True, False):
        cfg = DropMaskConfig(enabled=True, renormalize=renorm)
        base = forward(x, w, masked, cfg)
        delta = np.abs(forward(scrambled, w, masked, cfg) - base)[~masked].max()
        tag = "bitwise blind" if delta == 0.0 else "normalizer still sees them"
        print(f"renormalize={renorm!s:5}  unmasked delta after scramble: {delta:.1e}  ({tag})")

    # 3. zero masks: DropMask collapses to the standard mixer
    none = np.zeros(l, dtype=bool)
    with Tape():
        plain = multi_head_self_attention(Tensor(x), w).data
    for renorm in (True, False):
        out = forward(x, w, none, DropMaskConfig(True, renorm))
        same = np.array_equal(out, plain)
        print(f"zero masks, renormalize={renorm!s:5}: identical to standard = {same}")

    # weight budget: drop-after-softmax loses the masked keys' mass
    q = rng.normal(size=d)
    logits = x @ w.w_k.data @ q / np.sqrt(d // heads)
    full = np.exp(logits - logits.max())
    full /= full.sum()
    print(f"post-softmax mass surviving a drop: {full[~masked].sum():.4f} < 1"
          f" (renormalized mode rescales it back to 1)")


if __name__ == "__main__":
    main()
