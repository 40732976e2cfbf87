import filecmp
import time

import numpy as np
import pytest

from sonarseg.errors import ParameterError
from sonarseg.sonar import DEFAULT_GEOMETRY, polar_to_cartesian
from sonarseg.synth import (MANIFEST_NAME, Fish, SceneSpec, clutter_only_spec, generate_corpus,
                            generate_sample, generate_scene, read_manifest, regenerate_corpus,
                            render_scene, scene_rng, wittling_spec)

FAN = DEFAULT_GEOMETRY.fan_mask()
QUIET = dict(include_surface_reflection=False, include_bottom_return=False, include_vessel=False,
             speckle_strength=0.0, noise_floor=0.0)


def test_empty_scene_is_blank():
    spec = SceneSpec(school_count=(0, 0), **QUIET)
    frame, mask = generate_scene(spec, np.random.default_rng(0))
    assert not mask.pixels.any()
    assert polar_to_cartesian(frame).pixels.max() < 1e-12


@pytest.mark.parametrize("r_m,theta", [(6.0, 0.0), (10.0, 0.4), (15.0, -0.7)])
def test_single_commanded_fish_lands_where_placed(r_m, theta):
    spec = SceneSpec(school_count=(0, 0), **QUIET)
    row, col = DEFAULT_GEOMETRY.to_pixel(r_m, theta)
    f = Fish(float(row), float(col), height=3.0, width=6.0, tilt=0.1, intensity=0.8)
    scene = render_scene(spec, np.random.default_rng(0), fish=[f])
    rr, cc = np.nonzero(scene.mask.pixels)
    assert 2 * 3 <= rr.size <= 4 * 8
    assert np.hypot(rr.mean() + 0.5 - row, cc.mean() + 0.5 - col) <= 2.0
    img = polar_to_cartesian(scene.frame).pixels
    # the rendered echo sits on the labeled pixels
    assert img[scene.mask.pixels == 1].mean() > 0.5
    assert img[(scene.mask.pixels == 0) & FAN].mean() < 0.01


def test_fixed_seed_is_bit_identical():
    a, sa = generate_sample(SceneSpec(seed=3), 4)
    b, sb = generate_sample(SceneSpec(seed=3), 4)
    assert a.image.pixels.tobytes() == b.image.pixels.tobytes()
    assert a.mask.pixels.tobytes() == b.mask.pixels.tobytes()
    assert sa.frame.intensities.tobytes() == sb.frame.intensities.tobytes()
    c, _ = generate_sample(SceneSpec(seed=3), 5)
    assert c.mask.pixels.tobytes() != a.mask.pixels.tobytes()


def test_standard_corpus_has_over_5000_fish():
    spec = SceneSpec(seed=0)
    total = sum(len(generate_sample(spec, i)[1].fish) for i in range(50))
    assert total >= 5000


@pytest.mark.parametrize("spec", [SceneSpec(seed=1), wittling_spec(1), clutter_only_spec(1)])
def test_scene_invariants(spec):
    for i in range(6):
        sample, scene = generate_sample(spec, i)
        m = sample.mask.pixels.astype(bool)
        img = sample.image.pixels
        assert not m[~FAN].any()
        assert not img[~FAN].any()
        assert img.min() >= 0.0 and img.max() <= 1.0
        # clutter is never labeled
        assert not (m & scene.clutter_mask).any()
        if m.any():
            background = img[FAN & ~m].mean()
            assert img[m].mean() >= 2.0 * background


def test_clutter_only_preset_has_clutter_and_no_fish():
    for i in range(4):
        sample, scene = generate_sample(clutter_only_spec(0), i)
        assert not sample.mask.pixels.any()
        assert scene.clutter_mask.sum() > 200


def test_wittling_preset_fish_are_larger_and_closer():
    herring = [f for i in range(5) for f in generate_sample(SceneSpec(seed=2), i)[1].fish]
    wittling = [f for i in range(5) for f in generate_sample(wittling_spec(2), i)[1].fish]
    assert np.mean([f.width for f in wittling]) > np.mean([f.width for f in herring])
    assert np.mean([f.row for f in wittling]) > np.mean([f.row for f in herring])
    assert len(wittling) < len(herring)


@pytest.mark.parametrize("kw", [dict(width=0), dict(height=0), dict(fish_height_px=(0.0, 2.0)),
                                dict(speckle_strength=1.5), dict(school_count=(3, 1))])
def test_degenerate_spec_rejected(kw):
    with pytest.raises(ParameterError):
        generate_scene(SceneSpec(**kw), np.random.default_rng(0))


def test_corpus_regenerates_from_manifest(tmp_path):
    spec = SceneSpec(seed=11)
    ids = generate_corpus(spec, 5, tmp_path / "a")
    assert ids == [f"scene_{i:05d}" for i in range(5)]
    read_spec, n = read_manifest(tmp_path / "a" / MANIFEST_NAME)
    assert (read_spec, n) == (spec, 5)
    regenerate_corpus(tmp_path / "a" / MANIFEST_NAME, tmp_path / "b")
    for sub in ("images", "masks"):
        cmp = filecmp.dircmp(tmp_path / "a" / sub, tmp_path / "b" / sub)
        assert len(cmp.left_list) == 5 and not cmp.diff_files and not cmp.left_only
        for name in cmp.common_files:
            assert (tmp_path / "a" / sub / name).read_bytes() == (tmp_path / "b" / sub / name).read_bytes()
    assert (tmp_path / "a" / MANIFEST_NAME).read_bytes() == (tmp_path / "b" / MANIFEST_NAME).read_bytes()


def test_corpus_rejects_nonpositive_n(tmp_path):
    with pytest.raises(ParameterError):
        generate_corpus(SceneSpec(), 0, tmp_path)


def test_scene_streams_are_independent():
    a = scene_rng(SceneSpec(seed=0), 1).random(4)
    b = scene_rng(SceneSpec(seed=1), 0).random(4)
    assert not np.array_equal(a, b)


@pytest.mark.slow
def test_thousand_scene_corpus_under_a_minute(tmp_path):
    t0 = time.perf_counter()
    generate_corpus(SceneSpec(seed=0), 1000, tmp_path)
    assert time.perf_counter() - t0 < 60.0
