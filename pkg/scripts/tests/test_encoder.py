"""
Synthetic encoder, scene generation and FGADFEAT files.
"""

import numpy as np
import pytest

from detector.constants import HIGHRES_FACTOR
from detector.core import is_unit
from detector.encoder import (
    FEATURE_HEADER,
    EncoderError,
    FeatureFormatError,
    SyntheticEncoder,
    SyntheticScene,
    encode_scene,
    encode_scene_highres,
    encode_text,
    feature_bytes,
    get_encoder,
    load_feature_file,
    parse_feature_bytes,
    save_feature_file,
    tokenize,
)
from detector.synthetic import SceneLayout, SuiteConfig, build_suite, layout_arrays
from scripts.tests.base import PCB_CONFIG, isolated_config, small_spec


def _layout() -> SceneLayout:
    return SceneLayout.model_validate({
        "height": 15,
        "width": 15,
        "background": "board",
        "components": [
            {"name": "capacitor", "boxes": [[2, 2, 7, 7]], "attribute": [0.3]},
            {"name": "led", "boxes": [[2, 9, 6, 13]]},
        ],
    })


def _scene(spec, noise_seed=5) -> SyntheticScene:
    ids, attrs, concepts = layout_arrays(_layout(), spec.attribute_dim)
    return SyntheticScene(
        component_ids=ids,
        attributes=attrs,
        anomaly_mask=np.zeros(ids.shape, dtype=bool),
        perturbations=np.zeros(ids.shape + (spec.feature_dim,)),
        concepts=concepts,
        noise_seed=noise_seed,
    )


def test_tokenize():
    assert tokenize("Gold and Silver pins, a row") == ["gold", "and", "silver", "pins", "a", "row"]
    assert tokenize("  ,; ") == []


def test_encode_scene_is_deterministic_and_unit_norm():
    spec = small_spec(noise_sigma=0.1)
    scene = _scene(spec)
    a = encode_scene(scene, spec)
    b = encode_scene(scene, spec)
    assert np.array_equal(a.tokens, b.tokens)
    assert a.tokens.shape == (15, 15, spec.feature_dim)
    assert all(is_unit(t) for t in a.flat())
    assert is_unit(a.class_token)
    # a fresh encoder reproduces the cached one bit-for-bit
    fresh = SyntheticEncoder(spec).encode_cells(scene, (scene.noise_seed,))
    assert np.array_equal(fresh.tokens, a.tokens)


def test_noise_depends_on_scene_seed():
    spec = small_spec(noise_sigma=0.1)
    a = encode_scene(_scene(spec, 1), spec)
    b = encode_scene(_scene(spec, 2), spec)
    assert not np.array_equal(a.tokens, b.tokens)


def test_zero_noise_cells_of_a_component_coincide():
    spec = small_spec()
    grid = encode_scene(_scene(spec), spec)
    np.testing.assert_allclose(grid.tokens[2, 2], grid.tokens[6, 6], atol=1e-15)
    assert not np.allclose(grid.tokens[2, 2], grid.tokens[0, 0])


def test_highres_shape_and_worker_independence():
    spec = small_spec(noise_sigma=0.05)
    scene = _scene(spec)
    serial = encode_scene_highres(scene, spec, HIGHRES_FACTOR, workers=1)
    threaded = encode_scene_highres(scene, spec, HIGHRES_FACTOR, workers=4)
    assert serial.tokens.shape == (60, 60, spec.feature_dim)
    assert serial.resolution_tag == "highres"
    assert np.array_equal(serial.tokens, threaded.tokens)
    assert np.array_equal(serial.class_token, threaded.class_token)
    assert np.array_equal(encode_scene_highres(scene, spec, 1).tokens, encode_scene(scene, spec).tokens)
    with pytest.raises(EncoderError):
        encode_scene_highres(scene, spec, 0)


def test_text_encoder_reproduces_word_concepts():
    spec = small_spec(text_bias=0.0)
    enc = get_encoder(spec)
    feat = encode_text([enc.embed_word("capacitor")], spec)
    np.testing.assert_allclose(feat, enc.concept("capacitor"), atol=1e-9)


def test_text_encoder_rejects_bad_sequences():
    spec = small_spec()
    with pytest.raises(EncoderError):
        encode_text([], spec)
    with pytest.raises(EncoderError):
        encode_text([np.zeros(spec.token_embedding_dim + 1)], spec)


def test_prototype_mixes_name_concept():
    spec = small_spec(text_alignment=0.5)
    enc = get_encoder(spec)
    proto = enc.prototype("capacitor")
    assert abs(float(proto @ enc.concept("capacitor")) - 0.5) < 1e-12
    assert is_unit(proto)


def test_scene_validation():
    spec = small_spec()
    scene = _scene(spec)
    perts = scene.perturbations.copy()
    perts[0, 0, 0] = 1.0
    with pytest.raises(EncoderError):
        SyntheticScene(scene.component_ids, scene.attributes, scene.anomaly_mask, perts)
    ids = scene.component_ids.copy()
    ids[ids == 1] = 3
    with pytest.raises(EncoderError):
        SyntheticScene(ids, scene.attributes, scene.anomaly_mask, scene.perturbations)


def test_scene_dict_round_trip(tmp_path):
    cfg = isolated_config(PCB_CONFIG, tmp_path)
    suite = build_suite(cfg.layout, cfg.suite, cfg.encoder, 0, cfg.category)
    scene = suite.tests[-1]
    back = SyntheticScene.from_dict(scene.to_dict())
    assert np.array_equal(back.perturbations, scene.perturbations)
    assert np.array_equal(back.anomaly_mask, scene.anomaly_mask)
    assert back.concepts == scene.concepts


def test_suite_is_seeded():
    spec = small_spec(noise_sigma=0.05)
    cfg = SuiteConfig(n_shots=2, n_test_normal=2, n_test_anomalous=3, anomaly_cells=4)
    a = build_suite(_layout(), cfg, spec, 7)
    b = build_suite(_layout(), cfg, spec, 7)
    c = build_suite(_layout(), cfg, spec, 8)
    assert a.image_labels == [False, False, True, True, True]
    for s, t in zip(a.tests, b.tests):
        assert np.array_equal(s.perturbations, t.perturbations)
    assert any(not np.array_equal(s.anomaly_mask, t.anomaly_mask) or s.noise_seed != t.noise_seed
               for s, t in zip(a.tests, c.tests))
    for scene in a.tests[2:]:
        assert scene.anomaly_mask.sum() == 4
        # anomalies sit on components
        assert np.all(scene.component_ids[scene.anomaly_mask] > 0)
        norms = np.linalg.norm(scene.perturbations[scene.anomaly_mask], axis=1)
        np.testing.assert_allclose(norms, cfg.perturbation_magnitude, atol=1e-12)


def test_feature_file_round_trip_is_f32_exact(tmp_path):
    spec = small_spec(noise_sigma=0.05)
    grid = encode_scene(_scene(spec), spec)
    path = tmp_path / "q.fgadfeat"
    save_feature_file(grid, path)
    loaded = load_feature_file(path)
    assert np.array_equal(loaded.tokens, grid.tokens.astype(np.float32).astype(np.float64))
    assert np.array_equal(loaded.class_token, grid.class_token.astype(np.float32).astype(np.float64))
    # a second write of the loaded grid is byte-identical
    assert feature_bytes(loaded) == path.read_bytes()


def test_feature_file_errors_name_the_field():
    spec = small_spec()
    data = bytearray(feature_bytes(encode_scene(_scene(spec), spec)))

    def field_of(blob) -> str:
        with pytest.raises(FeatureFormatError) as exc_info:
            parse_feature_bytes(bytes(blob))
        return exc_info.value.field

    assert field_of(b"short") == "header"
    bad_magic = bytearray(data)
    bad_magic[:8] = b"NOTAFEAT"
    assert field_of(bad_magic) == "magic"
    bad_version = bytearray(data)
    bad_version[8:12] = (2).to_bytes(4, "little")
    assert field_of(bad_version) == "version"
    bad_T = bytearray(data)
    bad_T[12:16] = (224).to_bytes(4, "little")
    assert field_of(bad_T) == "T"
    assert field_of(data[:-4]) == "length"
    nan = bytearray(data)
    nan[FEATURE_HEADER.size:FEATURE_HEADER.size + 4] = np.array([np.nan], dtype="<f4").tobytes()
    assert field_of(nan) == "payload"


def test_random_header_corruption_is_always_reported():
    spec = small_spec()
    grid = encode_scene(_scene(spec), spec)
    data = feature_bytes(grid)
    original = parse_feature_bytes(data)
    rng = np.random.default_rng(0)
    for _ in range(300):
        blob = bytearray(data)
        pos = int(rng.integers(FEATURE_HEADER.size))
        blob[pos] ^= int(rng.integers(1, 256))
        try:
            decoded = parse_feature_bytes(bytes(blob))
        except FeatureFormatError:
            continue
        assert np.array_equal(decoded.tokens, original.tokens), f"byte {pos} decoded to another grid"
        assert np.array_equal(decoded.class_token, original.class_token)
