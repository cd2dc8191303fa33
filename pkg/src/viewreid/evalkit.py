"""Retrieval and generation metrics.

mAP/CMC over cosine rankings, Frechet distance between Gaussian feature
fits, windowed structural similarity, and the per-rotation generation
quality table. The Frechet feature extractor is a frozen random conv net
with a hard-coded seed so scores are comparable across runs of this repo.
"""

import numpy as np
import scipy.linalg
import torch

from . import world
from .nets import ShapeConfig, decode, encode_identity, encode_structure, init_networks

FID_EXTRACTOR_SEED = 0xF1D
FID_DIM = 64


def extract_features(bundle, images, batch_size=64):
    """Encode a stack of images to unit-norm feature rows (numpy)."""
    bundle.train_mode(False)
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            f, _ = encode_identity(bundle, np.asarray(images[i:i + batch_size]))
            out.append(f.cpu().numpy())
    return np.concatenate(out, axis=0)


def retrieval_protocol(identity_ids, camera_styles):
    """Default query/gallery split: first instance per (identity, style) is a
    query; everything else is gallery."""
    n = len(identity_ids)
    seen = set()
    query = []
    for i in range(n):
        key = (int(identity_ids[i]), int(camera_styles[i]))
        if key not in seen:
            seen.add(key)
            query.append(i)
    gallery = [i for i in range(n) if i not in set(query)]
    return np.array(query), np.array(gallery)


def map_cmc(features, query_idx, gallery_idx, identity_ids, ranks=(1, 5, 10)):
    """Mean average precision and rank-k accuracies under cosine ranking.

    A gallery item identical to the query instance is excluded. Ties are
    broken by ascending gallery position. Queries whose identity is absent
    from the gallery are skipped with a warning count.
    """
    feats = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    feats = feats / np.maximum(norms, 1e-12)
    ids = np.asarray(identity_ids)

    aps = []
    hits = np.zeros(len(ranks))
    skipped = 0
    for q in query_idx:
        keep = np.array([g != q for g in gallery_idx])
        gal = np.asarray(gallery_idx)[keep]
        sims = feats[gal] @ feats[q]
        order = np.lexsort((np.arange(len(gal)), -sims))
        relevant = (ids[gal[order]] == ids[q])
        n_rel = int(relevant.sum())
        if n_rel == 0:
            skipped += 1
            continue
        positions = np.flatnonzero(relevant)
        precisions = (np.arange(1, n_rel + 1)) / (positions + 1)
        aps.append(precisions.mean())
        for k, r in enumerate(ranks):
            hits[k] += 1.0 if relevant[:r].any() else 0.0
    n_valid = len(aps)
    if n_valid == 0:
        raise ValueError("no valid queries")
    return float(np.mean(aps)), [float(h / n_valid) for h in hits], skipped


def _gaussian_stats(features, eps=1e-6):
    f = np.asarray(features, dtype=np.float64)
    if not np.isfinite(f).all():
        raise ValueError("non-finite features")
    mu = f.mean(axis=0)
    centered = f - mu
    cov = centered.T @ centered / max(1, f.shape[0] - 1)
    cov += eps * np.eye(f.shape[1])
    return mu, cov


def fid(real_features, gen_features, eps=1e-6):
    """Frechet distance between Gaussian fits of two feature sets."""
    mu1, cov1 = _gaussian_stats(real_features, eps)
    mu2, cov2 = _gaussian_stats(gen_features, eps)
    covmean = scipy.linalg.sqrtm(cov1 @ cov2)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    value = float(np.sum((mu1 - mu2) ** 2) + np.trace(cov1 + cov2 - 2.0 * covmean))
    return max(value, 0.0)


_fid_extractor = None


def fid_feature_extractor():
    """Frozen randomly initialized encoder used for all Frechet scores."""
    global _fid_extractor
    if _fid_extractor is None:
        shapes = ShapeConfig(embed_dim=FID_DIM, id_width=8)
        bundle = init_networks(FID_EXTRACTOR_SEED, shapes)
        bundle.train_mode(False)
        for p in bundle.id_enc.parameters():
            p.requires_grad_(False)
        _fid_extractor = bundle
    return _fid_extractor


def fid_features(images):
    return extract_features(fid_feature_extractor(), images)


def _gaussian_window(size, sigma):
    ax = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    w = np.outer(w, w)
    return w / w.sum()


def _to_gray(image_chw):
    weights = np.array([0.299, 0.587, 0.114])
    return np.tensordot(weights, np.asarray(image_chw, dtype=np.float64), axes=1)


def ssim(x, y, window=7, sigma=1.5, c1=0.01 ** 2, c2=0.03 ** 2):
    """Mean structural similarity on the grayscale images, valid windows only."""
    gx, gy = _to_gray(x), _to_gray(y)
    if gx.shape != gy.shape:
        raise ValueError("shape mismatch")
    w = _gaussian_window(window, sigma)

    def filt(img):
        from scipy.signal import convolve2d
        return convolve2d(img, w, mode="valid")

    mu_x, mu_y = filt(gx), filt(gy)
    xx = filt(gx * gx) - mu_x ** 2
    yy = filt(gy * gy) - mu_y ** 2
    xy = filt(gx * gy) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
    return float((num / den).mean())


def generate_views(bundle, dataset, offsets):
    """Generate one image per (instance, offset); returns (len(offsets), N, 3, H, W)."""
    bundle.train_mode(False)
    images = dataset.images
    out = np.zeros((len(offsets), len(dataset), 3, world.IMAGE_H, world.IMAGE_W),
                   dtype=np.float64)
    with torch.no_grad():
        for oi, delta in enumerate(offsets):
            structures = np.stack([
                dataset.structure_at(i, (dataset.azimuth_of(i) + delta) % 360)
                for i in range(len(dataset))
            ])
            for i in range(0, len(dataset), 64):
                _, f_id = encode_identity(bundle, images[i:i + 64])
                h = encode_structure(bundle, structures[i:i + 64])
                out[oi, i:i + 64] = decode(bundle, f_id, h).cpu().numpy()
    return out


ROTATION_OFFSETS = (45, 90, 135, 180, 225, 270, 315)


def per_view_fid(bundle, dataset, offsets=ROTATION_OFFSETS):
    """Frechet score of generated images at each rotation offset vs all real."""
    real = fid_features(dataset.images)
    views = generate_views(bundle, dataset, offsets)
    return {int(d): fid(real, fid_features(views[i])) for i, d in enumerate(offsets)}


def generation_metrics(bundle, dataset):
    """Overall Frechet score and mean structural similarity.

    One view per instance is generated, cycling deterministically through the
    seven rotation offsets; similarity pairs each real image with its own
    generated view (same identity by construction).
    """
    offsets = [ROTATION_OFFSETS[i % len(ROTATION_OFFSETS)] for i in range(len(dataset))]
    images = dataset.images
    gen = np.zeros_like(images, dtype=np.float64)
    bundle.train_mode(False)
    with torch.no_grad():
        structures = np.stack([
            dataset.structure_at(i, (dataset.azimuth_of(i) + offsets[i]) % 360)
            for i in range(len(dataset))
        ])
        for i in range(0, len(dataset), 64):
            _, f_id = encode_identity(bundle, images[i:i + 64])
            h = encode_structure(bundle, structures[i:i + 64])
            gen[i:i + 64] = decode(bundle, f_id, h).cpu().numpy()
    score = fid(fid_features(images), fid_features(gen))
    sims = [ssim(images[i], gen[i]) for i in range(len(dataset))]
    return score, float(np.mean(sims))


FIGURE_MASK_MARGIN = 0.06


def _support_mask(image_chw):
    """Figure support relative to the border luminance.

    The frame border is always background, so its median luminance tracks the
    camera style's brightness shift; anything clearly above it is figure.
    """
    lum = _to_gray(image_chw)
    border = np.concatenate([lum[0], lum[-1], lum[:, 0], lum[:, -1]])
    return (lum > np.median(border) + FIGURE_MASK_MARGIN).astype(np.float64)


def silhouette_overlap(image_chw, silhouette):
    """Soft IoU between an image's support mask and a silhouette channel."""
    mask = _support_mask(image_chw)
    inter = np.minimum(mask, silhouette).sum()
    union = np.maximum(mask, silhouette).sum()
    return inter / max(union, 1e-12)


def rotation_identification(bundle, dataset, instance_index):
    """For each rotation offset, check that the generated view's silhouette
    matches the requested azimuth best among all eight candidates.

    Returns (hits, total) over the seven offsets.
    """
    base_az = dataset.azimuth_of(instance_index)
    candidates = {az: dataset.structure_at(instance_index, az)[0] for az in world.AZIMUTHS}
    image = dataset.images[instance_index]
    hits = 0
    bundle.train_mode(False)
    with torch.no_grad():
        _, f_id = encode_identity(bundle, image)
        for delta in ROTATION_OFFSETS:
            target_az = (base_az + delta) % 360
            h = encode_structure(bundle, dataset.structure_at(instance_index, target_az))
            gen = decode(bundle, f_id, h)[0].cpu().numpy()
            scores = {az: silhouette_overlap(gen, sil) for az, sil in candidates.items()}
            best = max(scores, key=scores.get)
            hits += 1 if best == target_az else 0
    return hits, len(ROTATION_OFFSETS)


def cluster_curve(metrics_records):
    """(epoch, cluster count) series from logged labeling records."""
    return [(rec["epoch"], rec["cluster_count"])
            for rec in metrics_records
            if rec.get("type") == "labeling" and rec.get("phase") == "joint"]
