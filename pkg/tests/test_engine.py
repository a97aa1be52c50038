import math

import numpy as np
import pytest

from evonet import engine
from evonet.checkpoint import CheckpointError, digest, dumps_checkpoint, loads_checkpoint
from evonet.data import HsiCube, PatchSet, add_gaussian_noise, extract_patches, synth_cube
from evonet.engine import (
    EvolutionConfig, TrainingDivergedError, denoise_array, denoise_cube, derive_seed, evaluate_fitness, evolve,
    final_train, stream,
)
from evonet.genome import BlockGene, Chromosome, EncodingConfig, TailGene, build_network, param_count, validate
from evonet.operators import VariationConfig
from evonet.tensor import BatchNorm, Conv, Network, ReflectPad, ReLU

TINY_ENC = EncodingConfig(n_min=1, n_max=2, f_min=3, f_max=6)


def tiny_cfg(**kw):
    base = dict(population_size=4, generations=2, encoding=TINY_ENC, batch_size=4, eval_epochs=2, seed=3)
    base.update(kw)
    return EvolutionConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    clean = synth_cube(16, 16, 3, np.random.default_rng(0))
    noisy = add_gaussian_noise(clean, 0.1, np.random.default_rng(1))
    ps = extract_patches(clean, noisy, 8, 4)
    return ps.subset(range(6)), ps.subset(range(6, 9))


def chromosome(kernel=3, maps=4, mean=0.0, std=0.1, tail_mean=0.0, tail_std=0.1):
    return Chromosome((BlockGene(kernel, maps, mean, std),), TailGene(tail_mean, tail_std))


def test_derive_seed_streams_are_distinct():
    seeds = {derive_seed(0, engine.WEIGHTS, g, i) for g in range(5) for i in range(10)}
    assert len(seeds) == 50
    assert derive_seed(7, 1, 2) == derive_seed(7, 1, 2) != derive_seed(8, 1, 2)
    assert stream(1, 2).random() == stream(1, 2).random()


def test_config_profiles_and_validation():
    full = EvolutionConfig.full()
    assert (full.population_size, full.generations, full.eval_lr, full.final_lr, full.batch_size) == \
        (30, 10, 0.004, 0.001, 100)
    assert full.eval_epochs == 1 and full.final_patience == 5
    desk = EvolutionConfig.desk()
    assert (desk.population_size, desk.generations) == (8, 5)
    for bad in ({"population_size": 1}, {"generations": 0}, {"eval_epochs": 0}, {"batch_size": 0}):
        with pytest.raises(ValueError):
            EvolutionConfig(**bad)


def test_fitness_is_deterministic_and_counts_params(tiny_data):
    train, evals = tiny_data
    c = chromosome()
    a = evaluate_fitness(c, train, evals, tiny_cfg(), 11)
    b = evaluate_fitness(c, train, evals, tiny_cfg(), 11)
    assert a == b
    assert a.complexity == param_count(c, 3, TINY_ENC)
    assert math.isfinite(a.mse)


def test_fitness_trains_below_data_variance():
    # zero-noise data: a short training run beats predicting nothing
    clean = synth_cube(16, 16, 3, np.random.default_rng(2))
    ps = extract_patches(clean, clean, 8, 2)
    c = chromosome(kernel=1, maps=6, mean=0.0, std=0.3, tail_std=0.1)
    rec = evaluate_fitness(c, ps, ps, tiny_cfg(eval_epochs=30, batch_size=2), 5)
    assert rec.mse < np.mean(ps.clean ** 2)


def test_divergence_becomes_inf(tiny_data, monkeypatch):
    def boom(*args, **kwargs):
        raise TrainingDivergedError("nan")
    monkeypatch.setattr(engine, "train_epoch", boom)
    train, evals = tiny_data
    rec = evaluate_fitness(chromosome(), train, evals, tiny_cfg(), 0)
    assert rec.mse == math.inf


def test_evolve_minimal_run(tiny_data):
    train, evals = tiny_data
    history, best = evolve(tiny_cfg(generations=1), train, evals)
    assert validate(best, TINY_ENC) == []
    assert [g["generation"] for g in history.generations] == [0, 1]
    assert len(history.records) == 8


def test_evolve_history_properties(tiny_data):
    train, evals = tiny_data
    cfg = tiny_cfg(generations=3)
    h1, b1 = evolve(cfg, train, evals)
    h2, b2 = evolve(cfg, train, evals)
    assert h1.to_jsonl() == h2.to_jsonl() and b1 == b2
    best = h1.summary()["best_mse"]
    assert all(a >= b for a, b in zip(best, best[1:]))
    for r in h1.records:
        assert validate(Chromosome.from_dict(r["genome"]), TINY_ENC) == []
        assert r["digest"] == Chromosome.from_dict(r["genome"]).digest()
    uids = {r["uid"] for r in h1.records}
    for g in h1.generations:
        assert set(g["population"]) <= uids


def test_copies_hit_the_cache(tiny_data):
    train, evals = tiny_data
    cfg = tiny_cfg(variation=VariationConfig(p_crossover=0.0, p_mutation=0.0))
    history, _ = evolve(cfg, train, evals)
    later = [r for r in history.records if r["generation"] > 0]
    assert all(r["cache_hit"] and r["operator"] == "copy" for r in later)
    assert history.summary()["evaluations"] == len({r["digest"] for r in history.records})


def test_parallel_matches_serial(tiny_data):
    train, evals = tiny_data
    h1, _ = evolve(tiny_cfg(), train, evals, jobs=1)
    h2, _ = evolve(tiny_cfg(), train, evals, jobs=2)
    assert h1.to_jsonl() == h2.to_jsonl()


def test_final_train_patience_on_constant_loss(tiny_data):
    train, evals = tiny_data
    c = chromosome(mean=0.1, std=0.0, tail_mean=0.0, tail_std=0.0)
    cfg = tiny_cfg(final_lr=0.0, final_patience=1)
    result = final_train(c, PatchSet.concat([train, evals]), cfg, np.random.default_rng(0))
    assert len(result.curve) == 2 and result.best_epoch == 1
    assert result.network.mode == "eval"


def test_final_train_keeps_best_epoch(tiny_data):
    train, evals = tiny_data
    cfg = tiny_cfg(final_lr=0.01, final_patience=3, final_max_epochs=40)
    result = final_train(chromosome(), PatchSet.concat([train, evals]), cfg, np.random.default_rng(1))
    best = result.curve[result.best_epoch - 1]
    assert best["holdout_mse"] == min(r["holdout_mse"] for r in result.curve)
    assert best["train_mse"] <= result.curve[0]["train_mse"]
    again = final_train(chromosome(), PatchSet.concat([train, evals]), cfg, np.random.default_rng(1))
    assert digest(again.network) == digest(result.network)


def identity_model(c):
    w = np.eye(c).reshape(c, c, 1, 1)
    return Network([Conv(w, np.zeros(c))]).eval()


def test_denoise_identity(rng):
    cube = HsiCube(rng.random((20, 13, 3)))
    out = denoise_cube(identity_model(3), cube, tile=8, overlap=3)
    np.testing.assert_allclose(out.data, cube.data, atol=1e-6)


def test_zero_overlap_is_concatenation(rng):
    net = build_network(chromosome(maps=5), 2, TINY_ENC, rng).eval()
    cube = HsiCube(rng.random((16, 24, 2)))
    out = denoise_cube(net, cube, tile=8, overlap=0)
    chw = cube.data.transpose(2, 0, 1)
    for r in (0, 8):
        for q in (0, 8, 16):
            tile = net.forward(chw[None, :, r:r + 8, q:q + 8])[0]
            np.testing.assert_array_equal(out.data[r:r + 8, q:q + 8].transpose(2, 0, 1), tile)


def test_pointwise_network_ignores_tiling(rng):
    # a 1x1 network has no spatial context, so every tiling gives the same answer
    net = build_network(Chromosome((BlockGene(1, 4, 0.0, 0.3),), TailGene(0.0, 0.3)), 2,
                        EncodingConfig(n_min=1, n_max=2, f_min=2, f_max=6, tail_kernel=1), rng).eval()
    cube = HsiCube(rng.random((20, 20, 2)))
    a = denoise_cube(net, cube, tile=8, overlap=2).data
    b = denoise_cube(net, cube, tile=12, overlap=5).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_tiling_difference_bounded_by_tile_border_effect(rng):
    net = build_network(chromosome(maps=4), 2, TINY_ENC, rng).eval()
    cube = HsiCube(rng.random((24, 24, 2)))
    whole = denoise_cube(net, cube, tile=24, overlap=0).data
    tiled = denoise_cube(net, cube, tile=12, overlap=4).data
    diff = np.abs(whole - tiled).max(axis=2)
    starts = engine._tile_starts(24, 12, 8)
    hits = np.zeros((24, 24), int)
    edge = np.zeros((24, 24), bool)
    effect = 0.0
    chw = cube.data.transpose(2, 0, 1)
    for r in starts:
        for q in starts:
            hits[r:r + 12, q:q + 12] += 1
            inner = np.ones((12, 12), bool)
            # two stacked 3x3 convs: outputs within 2 px of a cut edge see mirrored context
            if r > 0:
                inner[:2] = False
            if r + 12 < 24:
                inner[-2:] = False
            if q > 0:
                inner[:, :2] = False
            if q + 12 < 24:
                inner[:, -2:] = False
            edge[r:r + 12, q:q + 12] |= ~inner
            out = net.forward(chw[None, :, r:r + 12, q:q + 12])[0].transpose(1, 2, 0)
            effect = max(effect, np.abs(out - whole[r:r + 12, q:q + 12]).max())
    clean_zone = (hits == 1) & ~edge
    assert clean_zone.sum() > 100
    assert diff[clean_zone].max() < 1e-12
    assert 0 < diff.max() <= effect + 1e-12


def test_denoise_errors(rng):
    cube = HsiCube(rng.random((8, 8, 2)))
    with pytest.raises(ValueError):
        denoise_cube(identity_model(3), cube)
    with pytest.raises(ValueError):
        denoise_cube(identity_model(2), cube, tile=4, overlap=4)


def test_denoise_array_restores_mode(rng):
    net = build_network(chromosome(), 2, TINY_ENC, rng)
    net.train()
    denoise_array(net, rng.random((3, 2, 6, 6)))
    assert net.mode == "train"


def test_checkpoint_roundtrip(rng):
    net = build_network(Chromosome((BlockGene(3, 4, 0.0, 0.2), BlockGene(1, 5, 0.1, 0.2)), TailGene(0, 0.1)),
                        2, TINY_ENC, rng)
    net.train()
    net.forward(rng.random((4, 2, 8, 8)))  # move BN running stats off their defaults
    raw = dumps_checkpoint(net, {"note": "x"})
    back, meta = loads_checkpoint(raw)
    assert meta == {"note": "x"}
    assert [type(l) for l in back.layers] == [Conv, ReflectPad, BatchNorm, ReLU, Conv, BatchNorm, ReLU,
                                              Conv, ReflectPad]
    x = rng.random((2, 2, 8, 8))
    net.eval()
    np.testing.assert_array_equal(back.forward(x), net.forward(x))
    assert digest(back) == digest(net)
    assert raw[:4] == b"EVNC"


def test_checkpoint_errors(rng):
    raw = dumps_checkpoint(identity_model(2))
    for bad in (raw[:6], b"XXXX" + raw[4:], raw[:-3], raw + b"\0"):
        with pytest.raises(CheckpointError):
            loads_checkpoint(bad)
