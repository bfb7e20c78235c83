"""
Alignment losses against direct formulas, and training behaviour on the
single-component fixture.
"""

import csv

import numpy as np
import pytest

from detector.alignment import (
    TERMS,
    EpochLoss,
    TrainConfig,
    TrainingError,
    loss_clip,
    loss_mean,
    loss_reg,
    loss_triplet,
    token_weights,
    train_align,
    write_trace_csv,
)
from detector.core import NumericDomainError
from detector.encoder import encode_scene, get_encoder
from detector.pipeline import aggregate_scene, fit_alignment, initial_prompt_set, make_suite
from detector.prompt_bank import BACKGROUND, FOREGROUND, IMAGE, component_level, init_parameters
from detector.region_aggregation import RegionMap
from scripts.tests.base import SINGLE_CONFIG, isolated_config, single_document

WINDOW = 20
# Final clip loss on the single-component fixture stays below this share of the first epoch
CLIP_REDUCTION = 0.1


def _unit(v):
    return v / np.linalg.norm(v)


def test_loss_clip_oracle():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        tokens = np.stack([_unit(v) for v in rng.normal(size=(6, 5))])
        weights = rng.uniform(1.0, 1.5, size=6)
        p_n = rng.normal(size=5)
        abnormal = rng.normal(size=(3, 5))
        expected = 0.0
        for z, w in zip(tokens, weights):
            logits = [10.0 * z @ _unit(p) for p in [p_n, *abnormal]]
            expected += w * -np.log(np.exp(logits[0]) / np.sum(np.exp(logits)))
        expected /= weights.sum()
        value, _, _ = loss_clip(tokens, weights, p_n, abnormal, scale=10.0)
        assert abs(value - expected) < 1e-12


def test_loss_clip_errors():
    with pytest.raises(NumericDomainError):
        loss_clip(np.ones((2, 3)), np.ones(2), np.ones(3), np.zeros((0, 3)))
    with pytest.raises(NumericDomainError):
        loss_clip(np.ones((2, 3)), np.ones(2), np.ones(3), np.ones((1, 3)), scale=0.0)


def test_loss_triplet_oracle_and_hinge():
    rng = np.random.default_rng(0)
    for _ in range(50):
        z, p_n, p_a = (_unit(v) for v in rng.normal(size=(3, 4)))
        expected = max(np.linalg.norm(z - p_n) - np.linalg.norm(z - p_a) + 1.0, 0.0)
        assert abs(loss_triplet(z, p_n, p_a, 1.0)[0] - expected) < 1e-12
    z = np.array([1.0, 0.0])
    value, g_z, g_pn, g_pa = loss_triplet(z, z.copy(), -z, 0.5)
    assert value == 0.0
    assert not np.any(g_z) and not np.any(g_pn) and not np.any(g_pa)


def test_loss_triplet_is_translation_invariant():
    rng = np.random.default_rng(4)
    for _ in range(50):
        z, p_n, p_a = rng.normal(size=(3, 6))
        offset = rng.normal(size=6)
        moved = loss_triplet(z + offset, p_n + offset, p_a + offset, 1.0)[0]
        assert abs(moved - loss_triplet(z, p_n, p_a, 1.0)[0]) < 1e-12


def test_loss_mean_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        a, b = rng.normal(size=(2, 6))
        expected = float(np.sum((_unit(a) - _unit(b)) ** 2))
        assert abs(loss_mean(a, b)[0] - expected) < 1e-12
    with pytest.raises(NumericDomainError):
        loss_mean(np.zeros(3), np.ones(3))


def test_loss_reg_oracle():
    rng = np.random.default_rng(2)
    for _ in range(50):
        p_img, c0, c1, p_b = rng.normal(size=(4, 5))
        expected = 0.7 * np.linalg.norm(p_img - c0 - c1 - p_b)
        assert abs(loss_reg(p_img, [c0, c1], p_b, 0.7)[0] - expected) < 1e-12
    value, g_img, g_comps = loss_reg(p_img, [c0], p_b, 0.0)
    assert value == 0.0 and not np.any(g_img) and not np.any(g_comps[0])
    with pytest.raises(NumericDomainError):
        loss_reg(p_img, [], p_b)


def test_token_weights():
    labels = np.array([[0, 1], [2, 2]])
    for level, inside in [
        (IMAGE, [1, 1, 1, 1]),
        (FOREGROUND, [0, 1, 1, 1]),
        (BACKGROUND, [1, 0, 0, 0]),
        (component_level(1), [0, 0, 1, 1]),
    ]:
        w = token_weights(labels, level, 1.5)
        assert abs(w.mean() - 1.0) < 1e-12
        raw = np.where(np.array(inside, dtype=bool), 1.5, 1.0)
        np.testing.assert_allclose(w, raw / raw.mean(), atol=1e-15)


def test_train_config_defaults():
    cfg = TrainConfig()
    assert (cfg.epsilon, cfg.lambda_reg, cfg.n_ab, cfg.gamma, cfg.learning_rate) == (1.0, 1.0, 4, 1.5, 2e-3)
    assert cfg.logit_scale == 100.0


def _single_inputs(tmp_path, **train_updates):
    cfg = isolated_config(SINGLE_CONFIG, tmp_path)
    if train_updates:
        cfg = cfg.model_copy(update={"train": cfg.train.model_copy(update=train_updates)})
    shots = make_suite(cfg).shots
    pset = initial_prompt_set(cfg, single_document())
    maps = [aggregate_scene(cfg, pset, s) for s in shots]
    grids = [encode_scene(s, cfg.encoder) for s in shots]
    return cfg, grids, maps


def test_single_component_training_reduces_clip_loss(tmp_path):
    cfg, grids, maps = _single_inputs(tmp_path)
    trace = fit_alignment(cfg, single_document(), grids, maps).trace
    assert len(trace) == 200
    initial = trace[0].l_clip
    assert initial > 0
    assert trace[-1].l_clip < CLIP_REDUCTION * initial
    for start in range(len(trace) - WINDOW + 1):
        end = start + WINDOW - 1
        assert trace[end].total <= trace[start].total, f"total rose over epochs {start}..{end}"


def test_training_is_deterministic(tmp_path):
    cfg, grids, maps = _single_inputs(tmp_path, epochs=15)
    a = fit_alignment(cfg, single_document(), grids, maps)
    b = fit_alignment(cfg, single_document(), grids, maps)
    assert [(e.l_clip, e.l_trip, e.l_mean, e.l_reg) for e in a.trace] == \
           [(e.l_clip, e.l_trip, e.l_mean, e.l_reg) for e in b.trace]
    for slot, emb in a.table.embeddings.items():
        assert np.array_equal(emb, b.table.embeddings[slot])
    assert a.gates.raw == b.gates.raw


def test_disabled_terms_stay_zero(tmp_path):
    cfg, grids, maps = _single_inputs(tmp_path, epochs=3, use_trip=False, use_reg=False)
    trace = fit_alignment(cfg, single_document(), grids, maps).trace
    assert all(e.l_trip == 0.0 and e.l_reg == 0.0 for e in trace)
    assert all(e.l_clip > 0.0 for e in trace)


def test_train_align_input_errors(tmp_path):
    cfg, grids, maps = _single_inputs(tmp_path, epochs=1)
    enc = get_encoder(cfg.encoder)
    pset = initial_prompt_set(cfg, single_document())
    table, gates = init_parameters(pset, enc.embedding_dim, 0)
    with pytest.raises(TrainingError):
        train_align([], [], pset, table, gates, enc, cfg.train)
    with pytest.raises(TrainingError):
        train_align(grids, [], pset, table, gates, enc, cfg.train)
    with pytest.raises(TrainingError):
        train_align(grids, [RegionMap(np.ones((2, 2)), 1)], pset, table, gates, enc, cfg.train)
    # inputs are not modified
    before = {s: v.copy() for s, v in table.embeddings.items()}
    train_align(grids, maps, pset, table, gates, enc, cfg.train)
    assert all(np.array_equal(before[s], table.embeddings[s]) for s in before)


def test_write_trace_csv(tmp_path):
    trace = [EpochLoss(0, 1.0, 0.5, 0.25, 0.125), EpochLoss(1, 0.5, 0.5, 0.25, 0.0)]
    path = tmp_path / "trace.csv"
    write_trace_csv(trace, path)
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["epoch", *TERMS, "total"]
    assert rows[1] == ["0", "1.0", "0.5", "0.25", "0.125", "1.875"]
    assert float(rows[2][-1]) == 1.25
