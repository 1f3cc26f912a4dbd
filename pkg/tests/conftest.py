# File: tests/conftest.py
import os

import hypothesis
import numpy as np
import pytest

from geosurge.config import FusionConfig
from geosurge.geodesy import GeoPoint
from geosurge.partition import Sample

hypothesis.settings.register_profile("fast", max_examples=25, deadline=None)
hypothesis.settings.register_profile("thorough", max_examples=300, deadline=None)
hypothesis.settings.load_profile(os.environ.get("GEOSURGE_HYPOTHESIS_PROFILE", "fast"))


def random_samples(seed, n, prefix="s"):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    lats = np.degrees(np.arcsin(np.clip(v[:, 2], -1.0, 1.0)))
    lons = np.degrees(np.arctan2(v[:, 1], v[:, 0]))
    return [Sample(f"{prefix}{k:05d}", GeoPoint(float(a), float(b))) for k, (a, b) in enumerate(zip(lats, lons))]


def clustered_samples(seed, centers, per_cluster, spread_deg=0.5):
    rng = np.random.default_rng(seed)
    out = []
    for c, (lat, lon) in enumerate(centers):
        for k in range(per_cluster):
            dlat, dlon = rng.normal(0.0, spread_deg, size=2)
            p = GeoPoint(float(np.clip(lat + dlat, -90, 90)), lon + dlon)
            out.append(Sample(f"c{c:02d}_{k:04d}", p, cluster=c))
    return out


@pytest.fixture
def toy_fusion_config():
    return FusionConfig(kv_dim=16, token_dim=8, latent_dim=4, heads=2, attn_dim=8, mlp_hidden=16,
                        blocks=1, embed_dim=8, num_classes=3, patch_size=2, seg_height=4, seg_width=4)
