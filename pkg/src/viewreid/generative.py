"""View-synthesis cycle and its losses.

One pass swaps the structure conditioning of an image to a rotated view and
back again; reconstruction is enforced on pixels and on identity features,
and a patch discriminator pushes all generated images toward the real
distribution.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .nets import decode, discriminate, encode_identity, encode_structure


@dataclass
class GanLossConfig:
    image_weight: float = 5.0
    feature_weight: float = 5.0

    def __post_init__(self):
        if self.image_weight < 0 or self.feature_weight < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class CycleOutputs:
    recon_same: torch.Tensor   # decoded with the original structure
    synth_new: torch.Tensor    # decoded with the rotated structure
    recon_cycle: torch.Tensor  # re-encoded synth view decoded back to original
    f: torch.Tensor            # contrast vector of the input image
    f_id: torch.Tensor         # identity feature map of the input image
    f_new: torch.Tensor        # contrast vector of synth_new
    f_id_new: torch.Tensor
    f_id_cycle: torch.Tensor


def make_new_structure(dataset, sample, rng):
    """Pick a rotated structure for one sample: offset uniform in 45..315.

    ``dataset`` supplies the per-instance structure oracle; the offset is
    never zero, so the synthesized view is always a genuinely new azimuth.
    """
    delta = 45 * int(rng.integers(1, 8))
    new_az = (sample.view.azimuth_deg + delta) % 360
    return dataset.structure_at(sample.instance_index, new_az), new_az


def synth_cycle(bundle, x, s_ori, s_new):
    """Forward pass of the generation cycle with shared parameters."""
    f, f_id = encode_identity(bundle, x)
    n = f_id.shape[0]
    h_both = encode_structure(bundle, torch.cat([torch.as_tensor(s_ori, dtype=f_id.dtype),
                                                 torch.as_tensor(s_new, dtype=f_id.dtype)]))
    h_ori = h_both[:n]
    decoded = decode(bundle, torch.cat([f_id, f_id]), h_both)
    recon_same, synth_new = decoded[:n], decoded[n:]
    f_new, f_id_new = encode_identity(bundle, synth_new)
    recon_cycle = decode(bundle, f_id_new, h_ori)
    _, f_id_cycle = encode_identity(bundle, recon_cycle)
    return CycleOutputs(recon_same, synth_new, recon_cycle,
                        f, f_id, f_new, f_id_new, f_id_cycle)


def _mean_l1(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def loss_img(x, recon_same, recon_cycle):
    """Pixel reconstruction: mean L1 to the direct and the cycled decode."""
    return _mean_l1(x, recon_same) + _mean_l1(x, recon_cycle)


def loss_feat(f_id, f_id_new, f_id_cycle):
    """Identity-feature reconstruction across the generation cycle."""
    return _mean_l1(f_id, f_id_new) + _mean_l1(f_id, f_id_cycle)


def _patch_means(maps, n_sets, term):
    """Per-image-set flat mean of a per-patch term, pooled over all scales.

    ``maps`` come from one discriminator pass over ``n_sets`` concatenated
    image sets of equal size; the mean for a set runs over every patch score
    of every scale.
    """
    flat = torch.cat([term(m).flatten(1) for m in maps], dim=1)
    per_set = flat.reshape(n_sets, -1)
    return per_set.mean(dim=1)


def discriminator_loss(bundle, x, fakes):
    """Score real vs generated; the real term appears once per generated image.

    Value is the negated log-likelihood, so a perfectly confident
    discriminator reaches 0 and an indifferent one (p=0.5 everywhere) sits at
    ``3 * 2 * ln 2``.
    """
    x = torch.as_tensor(x, dtype=fakes[0].dtype) if not torch.is_tensor(x) else x
    stacked = torch.cat([x] + [fake.detach() for fake in fakes])
    maps = discriminate(bundle, stacked)
    real = _patch_means([m[: x.shape[0]] for m in maps], 1, lambda s: F.softplus(-s))[0]
    fake_means = _patch_means([m[x.shape[0]:] for m in maps], len(fakes),
                              lambda s: F.softplus(s))
    return len(fakes) * real + fake_means.sum()


def generator_adversarial_loss(bundle, fakes):
    """Non-saturating generator objective over the three generated images."""
    maps = discriminate(bundle, torch.cat(list(fakes)))
    return _patch_means(maps, len(fakes), lambda s: F.softplus(-s)).sum()


def loss_adv(bundle, x, recon_same, synth_new, recon_cycle):
    """(discriminator loss, generator loss) for one cycle.

    Generated images enter the discriminator loss detached, so its gradients
    reach only the discriminator; the generator loss is the only adversarial
    path back to the encoder/decoder side.
    """
    fakes = (recon_same, synth_new, recon_cycle)
    return discriminator_loss(bundle, x, fakes), generator_adversarial_loss(bundle, fakes)


def loss_gan(cfg, l_img, l_feat, l_adv):
    """Weighted total of the generation losses."""
    return cfg.image_weight * l_img + cfg.feature_weight * l_feat + l_adv
