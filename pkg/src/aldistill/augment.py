"""Seeded range-image augmentations.

Every transform returns a new :class:`RangeImage` of the same shape and
channel count; the input is never modified.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .projection import IGNORE, RangeImage

TRANSFORMS = (
    "random_pixel_dropout",
    "coarse_dropout",
    "gaussian_noise",
    "cyclic_shift",
    "instance_cut_paste",
)


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _check_range(name, rng_range, lo=0):
    a, b = (rng_range, rng_range) if np.isscalar(rng_range) else tuple(rng_range)
    if int(a) != a or int(b) != b or a > b or a < lo:
        raise ValueError(f"{name} must be an integer range lo <= hi with lo >= {lo}, got {rng_range!r}")
    return int(a), int(b)


def random_pixel_dropout(img: RangeImage, p: float, seed=None) -> RangeImage:
    """Invalidate each valid pixel independently with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1], got {p}")
    out = img.copy()
    drop = (_rng(seed).random(img.shape) < p) & img.valid
    out.invalidate(drop)
    return out


def coarse_dropout(img: RangeImage, n_holes_range=(1, 5), hole_w_range=None,
                   hole_h_range=None, seed=None) -> RangeImage:
    """Cut ``n`` axis-aligned rectangular holes.

    Ranges are inclusive ``(lo, hi)`` pairs or a single integer. Hole sizes
    default to 1..5% of the image side. The top-left corner is uniform over
    the placements that keep the hole inside the image (the Albumentations
    rule), so an image-sized hole blanks everything.
    """
    h, w = img.shape
    if hole_w_range is None:
        hole_w_range = (1, max(1, round(0.05 * w)))
    if hole_h_range is None:
        hole_h_range = (1, max(1, round(0.05 * h)))
    n_lo, n_hi = _check_range("n_holes_range", n_holes_range)
    w_lo, w_hi = _check_range("hole_w_range", hole_w_range, lo=1)
    h_lo, h_hi = _check_range("hole_h_range", hole_h_range, lo=1)
    if w_hi > w or h_hi > h:
        raise ValueError(f"hole size up to {w_hi}x{h_hi} exceeds image {w}x{h}")
    rng = _rng(seed)
    mask = np.zeros(img.shape, bool)
    for _ in range(int(rng.integers(n_lo, n_hi + 1))):
        hw = int(rng.integers(w_lo, w_hi + 1))
        hh = int(rng.integers(h_lo, h_hi + 1))
        x0 = int(rng.integers(0, w - hw + 1))
        y0 = int(rng.integers(0, h - hh + 1))
        mask[y0:y0 + hh, x0:x0 + hw] = True
    out = img.copy()
    out.invalidate(mask & img.valid)
    return out


def gaussian_noise_channel(img: RangeImage, channel: str, sigma: float, seed=None) -> RangeImage:
    """Add i.i.d. N(0, sigma^2) to one channel on valid pixels only."""
    if channel not in ("r", "remission"):
        raise ValueError(f"noise channel must be 'r' or 'remission', got {channel!r}")
    if channel not in img.channel_set:
        raise ValueError(f"channel {channel!r} not present in {img.channel_set}")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    out = img.copy()
    if sigma == 0:
        return out
    k = img.channel_set.index(channel)
    vals = out.channels[..., k]
    noisy = vals + _rng(seed).normal(0.0, sigma, size=vals.shape)
    if channel == "remission":
        noisy = np.clip(noisy, 0.0, 1.0)
    else:
        noisy = np.maximum(noisy, 1e-6)
    out.channels[..., k] = np.where(img.valid, noisy, vals)
    return out


def cyclic_shift(img: RangeImage, k: int) -> RangeImage:
    """Roll every per-pixel plane horizontally by ``k`` columns."""
    k = int(k) % img.width
    out = RangeImage(
        np.roll(img.channels, k, axis=1),
        np.roll(img.labels, k, axis=1),
        np.roll(img.instances, k, axis=1),
        np.roll(img.valid, k, axis=1),
        img.channel_set,
    )
    return out


def instance_cut_paste(target: RangeImage, donor: RangeImage, class_whitelist,
                       max_instances: int = 3, seed=None) -> RangeImage:
    """Paste whole donor instances into ``target`` at the same pixel positions.

    A donor pixel replaces the target pixel only when the target pixel is
    invalid or farther away, so pasted objects respect occlusion. Returns a
    copy whose ``meta["cut_paste"]`` records the pasted ``(class, instance)``
    pairs and whether any donor instance was eligible.
    """
    if donor.shape != target.shape or donor.channel_set != target.channel_set:
        raise ValueError("donor and target must share shape and channel layout")
    out = target.copy()
    eligible = donor.valid & (donor.instances > 0) & np.isin(donor.labels, list(class_whitelist))
    keys = np.unique(np.stack([donor.labels[eligible], donor.instances[eligible]], 1), axis=0)
    if len(keys) == 0 or max_instances < 1:
        out.meta["cut_paste"] = {"eligible": bool(len(keys)), "pasted": []}
        return out
    rng = _rng(seed)
    n = min(int(max_instances), len(keys))
    chosen = keys[np.sort(rng.choice(len(keys), size=n, replace=False))]
    r_t = target.channel("r")
    r_d = donor.channel("r")
    for cls, inst in chosen:
        m = eligible & (donor.labels == cls) & (donor.instances == inst)
        m &= ~target.valid | (r_d < r_t)
        out.channels[m] = donor.channels[m]
        out.labels[m] = donor.labels[m]
        out.instances[m] = donor.instances[m]
        out.valid[m] = True
    out.meta["cut_paste"] = {"eligible": True, "pasted": [(int(c), int(i)) for c, i in chosen]}
    return out


# --------------------------------------------------------------------------- #
# policies
# --------------------------------------------------------------------------- #
@dataclass
class AugStep:
    name: str
    prob: float = 0.5
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.name!r}; choose from {TRANSFORMS}")
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError(f"{self.name}: probability must lie in [0, 1], got {self.prob}")


@dataclass
class AugPolicy:
    """Ordered transforms, each fired with its own probability.

    The RNG for one application is derived from ``(seed, sample_hash, step)``,
    so byte-identical samples see identical augmentations at the same step.
    """

    steps: list[AugStep] = field(default_factory=list)
    seed: int = 0

    @classmethod
    def default(cls, seed=0, prob=0.5, sparse_classes=(2, 3, 4)):
        return cls(
            [
                AugStep("random_pixel_dropout", prob, {"p": 0.1}),
                AugStep("coarse_dropout", prob, {"n_holes_range": (1, 5)}),
                AugStep("gaussian_noise", prob, {"channel": "r", "sigma": 0.1}),
                AugStep("gaussian_noise", prob, {"channel": "remission", "sigma": 0.03}),
                AugStep("cyclic_shift", prob, {}),
                AugStep("instance_cut_paste", prob,
                        {"class_whitelist": tuple(sparse_classes), "max_instances": 3}),
            ],
            seed,
        )

    def rng_for(self, sample_hash: int, step: int) -> np.random.Generator:
        h = int(sample_hash) & 0xFFFFFFFFFFFFFFFF
        return np.random.default_rng(
            np.random.SeedSequence([int(self.seed), h & 0xFFFFFFFF, h >> 32, int(step)])
        )


def apply_policy(policy: AugPolicy, img: RangeImage, sample_hash: int, step: int,
                 donor: RangeImage | None = None) -> RangeImage:
    """Apply ``policy`` to ``img``. Cut-paste is skipped when no donor is given."""
    rng = policy.rng_for(sample_hash, step)
    out = img
    for st in policy.steps:
        fire = rng.random() < st.prob
        sub_seed = int(rng.integers(2**63))
        if not fire:
            continue
        p = st.params
        if st.name == "random_pixel_dropout":
            out = random_pixel_dropout(out, p.get("p", 0.1), sub_seed)
        elif st.name == "coarse_dropout":
            out = coarse_dropout(out, p.get("n_holes_range", (1, 5)), p.get("hole_w_range"),
                                 p.get("hole_h_range"), sub_seed)
        elif st.name == "gaussian_noise":
            out = gaussian_noise_channel(out, p.get("channel", "r"), p.get("sigma", 0.1), sub_seed)
        elif st.name == "cyclic_shift":
            k = p.get("k")
            if k is None:
                k = np.random.default_rng(sub_seed).integers(out.width)
            out = cyclic_shift(out, k)
        elif st.name == "instance_cut_paste" and donor is not None:
            out = instance_cut_paste(out, donor, p.get("class_whitelist", (2, 3, 4)),
                                     p.get("max_instances", 3), sub_seed)
    return out if out is not img else img.copy()
