"""Shared synthetic-scene fixtures (session-scoped; everything is seeded)."""

import numpy as np
import pytest

from deskavatar.annotate import OracleLandmarkTracker, OracleSegmenter, RenderContext, oracle_segmentation
from deskavatar.geomopt import ProviderBundle, View
from deskavatar.pipeline import fixture as fx


@pytest.fixture(scope="session")
def head():
    return fx.synthetic_head()


@pytest.fixture(scope="session")
def small_head():
    return fx.synthetic_head(rows=32, cols=40)


@pytest.fixture(scope="session")
def albedo256():
    return fx.procedural_albedo(256, seed=1)


@pytest.fixture(scope="session")
def cameras256():
    return fx.five_view_cameras(256)


@pytest.fixture(scope="session")
def lighting():
    return fx.lighting_rig(2)


@pytest.fixture(scope="session")
def providers():
    return ProviderBundle(OracleLandmarkTracker(), OracleSegmenter())


@pytest.fixture(scope="session")
def front_view(head, albedo256, cameras256, lighting):
    cam = cameras256[0]
    img = fx.render_view(head, albedo256, lighting, cam)
    seg = oracle_segmentation(head, cam)
    return View(cam, img, seg, lighting, real_context=RenderContext(head, cam),
                name="front")


@pytest.fixture(scope="session")
def five_views(head, albedo256, cameras256, lighting):
    views = []
    for i, cam in enumerate(cameras256):
        img = fx.render_view(head, albedo256, lighting, cam)
        seg = oracle_segmentation(head, cam)
        views.append(View(cam, img, seg, lighting,
                          real_context=RenderContext(head, cam), name=f"v{i}"))
    return views


@pytest.fixture(scope="session")
def demo_rig(small_head):
    return fx.demo_rig(small_head)


def fresh_views(views):
    """Mutable copies (refinement mutates cameras/surrogates)."""
    return [View(v.camera, v.real_image, v.seg_real, v.lighting,
                 real_context=v.real_context, name=v.name) for v in views]
