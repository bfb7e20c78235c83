"""
Inference branches against per-token brute-force oracles.
"""

import numpy as np
import pytest

from detector.core import ScoreMap, cosine
from detector.encoder import get_encoder
from detector.prompt_bank import IMAGE, build_prompt_set, encode_all, init_parameters
from detector.query_former import family_banks, init_query_former, qf_forward
from detector.scoring import (
    FamilyPrompts,
    NormalMemory,
    ScoringConfig,
    ScoringError,
    anomaly_probability,
    assign_prompts,
    build_memory,
    family_prompts,
    fuse_pixel,
    image_prompts,
    image_score,
    infer,
    reweight_image_level,
    score_pad,
    score_pad_average,
    score_vad,
)
from scripts.tests.base import pcb_document, random_grid, small_spec

SCALE = 10.0


@pytest.fixture(scope="module")
def model():
    spec = small_spec(feature_dim=8, token_embedding_dim=12)
    enc = get_encoder(spec)
    pset = build_prompt_set(pcb_document(), ["damaged", "broken"], 2, seed=0)
    table, gates = init_parameters(pset, enc.embedding_dim, seed=0)
    encoded = encode_all(pset, table, gates, enc)
    params, queries = init_query_former(8, encoded.num_components, 0)
    intrinsics = qf_forward(queries, *family_banks(encoded), params)
    return encoded, intrinsics


def _prob(z, p_n, p_a, scale=SCALE):
    en = np.exp(scale * cosine(z, p_n))
    ea = np.exp(scale * cosine(z, p_a))
    return ea / (en + ea)


def test_scoring_config_defaults():
    cfg = ScoringConfig()
    assert cfg.reweight_scale == 1.0
    assert cfg.dynamic_assignment is True


def test_score_vad_oracle():
    for seed in range(50):
        query = random_grid(seed)
        mem = build_memory([random_grid(100 + seed), random_grid(200 + seed)])
        assert mem.size == 24
        m_v = score_vad(query, mem)
        for i, z in enumerate(query.flat()):
            expected = min((1 - cosine(z, r)) / 2 for r in mem.bank)
            assert abs(m_v.scores.ravel()[i] - expected) < 1e-12


def test_score_vad_is_zero_on_a_shot():
    shot = random_grid(7)
    assert not np.any(score_vad(shot, build_memory([shot])).scores > 1e-12)


def test_anomaly_probability_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        z, p_n, p_a = rng.normal(size=(3, 6))
        assert abs(anomaly_probability(z, p_n, p_a, SCALE)[0] - _prob(z, p_n, p_a)) < 1e-12
    # saturated logits stay finite
    z = np.array([1.0, 0.0])
    assert anomaly_probability(z, z, -z, 1e4)[0] == 0.0
    assert anomaly_probability(z, -z, z, 1e4)[0] == 1.0


def test_assign_prompts_oracle():
    for seed in range(50):
        query = random_grid(seed)
        intrinsics = np.random.default_rng(seed).normal(size=(4, query.dim))
        assign = assign_prompts(query, intrinsics)
        for i, z in enumerate(query.flat()):
            assert assign.ravel()[i] == int(np.argmax([cosine(z, q) for q in intrinsics]))
    with pytest.raises(ScoringError):
        assign_prompts(random_grid(0), np.zeros((0, 8)))


def test_score_pad_and_reweight_oracle():
    rng = np.random.default_rng(3)
    for seed in range(50):
        query = random_grid(seed)
        fams = [FamilyPrompts(*rng.normal(size=(2, query.dim))) for _ in range(3)]
        assign = rng.integers(0, 3, size=(query.h, query.w))
        m_hat = score_pad(query, assign, fams, SCALE)
        flat = m_hat.scores.ravel()
        for i, z in enumerate(query.flat()):
            fam = fams[assign.ravel()[i]]
            assert abs(flat[i] - _prob(z, fam.p_n, fam.p_a)) < 1e-12

        image = fams[0]
        s = np.array([_prob(z, image.p_n, image.p_a) for z in query.flat()])
        w = np.exp(s) / np.exp(s).sum()
        expected = np.clip(query.num_tokens * w * flat, 0, 1)
        m_p = reweight_image_level(m_hat, query, image, SCALE)
        np.testing.assert_allclose(m_p.scores.ravel(), expected, atol=1e-12)


def test_reweight_scale_multiplies_probabilities():
    rng = np.random.default_rng(9)
    query = random_grid(4)
    image = FamilyPrompts(*rng.normal(size=(2, query.dim)))
    m_hat = ScoreMap(rng.uniform(0.0, 0.05, size=(query.h, query.w)))
    s = np.array([_prob(z, image.p_n, image.p_a) for z in query.flat()])
    for reweight_scale in (1.0, 100.0):
        w = np.exp(reweight_scale * (s - s.max()))
        w /= w.sum()
        expected = np.clip(query.num_tokens * w * m_hat.scores.ravel(), 0, 1)
        m_p = reweight_image_level(m_hat, query, image, SCALE, reweight_scale)
        np.testing.assert_allclose(m_p.scores.ravel(), expected, atol=1e-12)
    # the logit scale acts on the cosines inside s, not on the reweighting
    flat = reweight_image_level(m_hat, query, image, 1e-3).scores
    sharp = reweight_image_level(m_hat, query, image, SCALE).scores
    assert not np.allclose(flat, sharp)


def test_score_pad_average_oracle():
    rng = np.random.default_rng(4)
    query = random_grid(1)
    fams = [FamilyPrompts(*rng.normal(size=(2, query.dim))) for _ in range(3)]
    avg = score_pad_average(query, fams, SCALE).scores.ravel()
    for i, z in enumerate(query.flat()):
        assert abs(avg[i] - np.mean([_prob(z, f.p_n, f.p_a) for f in fams])) < 1e-12


def test_score_pad_errors():
    query = random_grid(0)
    fams = [FamilyPrompts(np.ones(8), -np.ones(8))]
    with pytest.raises(ScoringError):
        score_pad(query, np.zeros((2, 2), dtype=int), fams, SCALE)
    with pytest.raises(ScoringError):
        score_pad(query, np.ones((query.h, query.w), dtype=int), fams, SCALE)
    with pytest.raises(ScoringError):
        reweight_image_level(ScoreMap(np.zeros((2, 2))), query, fams[0], SCALE)


def test_fuse_pixel_and_image_score_oracle():
    rng = np.random.default_rng(5)
    for seed in range(50):
        query = random_grid(seed)
        m_v = ScoreMap(rng.uniform(0, 1, size=(query.h, query.w)))
        m_p = ScoreMap(rng.uniform(0, 1, size=(query.h, query.w)))
        m_pix = fuse_pixel(m_v, m_p)
        np.testing.assert_allclose(m_pix.scores, m_v.scores * m_p.scores / (m_v.scores + m_p.scores), atol=1e-12)
        image = FamilyPrompts(*rng.normal(size=(2, query.dim)))
        s_i = _prob(query.class_token, image.p_n, image.p_a)
        peak = m_pix.max()
        assert abs(image_score(query, image, m_pix, SCALE) - peak * s_i / (peak + s_i)) < 1e-12
    with pytest.raises(ScoringError):
        fuse_pixel(ScoreMap(np.zeros((2, 2))), ScoreMap(np.zeros((2, 3))))


def test_memory_errors():
    with pytest.raises(ScoringError):
        build_memory([])
    with pytest.raises(ScoringError):
        NormalMemory(np.zeros((0, 4)))
    with pytest.raises(ScoringError):
        score_vad(random_grid(0, d=8), build_memory([random_grid(1, d=6)]))


def test_infer_composes_the_branches(model):
    encoded, intrinsics = model
    query = random_grid(11, d=8)
    mem = build_memory([random_grid(12, d=8)])
    result = infer(query, mem, intrinsics, encoded, SCALE)

    np.testing.assert_array_equal(result.m_v.scores, score_vad(query, mem).scores)
    np.testing.assert_array_equal(result.assignment, assign_prompts(query, intrinsics))
    assert result.assignment.max() < encoded.num_components + 2
    expected_hat = score_pad(query, result.assignment, family_prompts(encoded), SCALE)
    np.testing.assert_array_equal(result.m_hat.scores, expected_hat.scores)
    np.testing.assert_array_equal(result.m_pix.scores, fuse_pixel(result.m_v, result.m_p).scores)
    assert result.image_score == image_score(query, image_prompts(encoded), result.m_pix, SCALE)
    assert 0.0 <= result.image_score <= 1.0

    averaged = infer(query, mem, intrinsics, encoded, SCALE, dynamic_assignment=False)
    expected_avg = score_pad_average(query, family_prompts(encoded), SCALE)
    np.testing.assert_array_equal(averaged.m_hat.scores, expected_avg.scores)


def test_query_equal_to_a_shot_scores_zero(model):
    encoded, intrinsics = model
    shot = random_grid(13, d=8)
    result = infer(shot, build_memory([shot]), intrinsics, encoded, SCALE)
    assert result.m_pix.max() < 1e-12
    assert result.image_score < 1e-12


def test_image_prompts_use_the_image_bank(model):
    encoded, _ = model
    img = image_prompts(encoded)
    np.testing.assert_array_equal(img.p_n, encoded.bank(IMAGE).p_n)
    assert len(family_prompts(encoded)) == encoded.num_components + 2
