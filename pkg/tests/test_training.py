"""Training stack: assignment coupling, loss, optimizer, and the fit loop."""

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from torusflow import autodiff as ad
from torusflow.configuration import ipl_system
from torusflow.geometry import geodesic_interp, torus_distance, torus_log
from torusflow.training import (
    TrainConfig,
    TrainingError,
    _couple_batch,
    adam_step,
    AdamState,
    base_log_density,
    clip_global_norm,
    global_grad_norm,
    hungarian,
    make_train_batch,
    ot_couple,
    sample_base_batch,
    si_loss,
    si_loss_grads,
    si_loss_value,
    train,
    write_history,
    zero_grads,
)
from torusflow.velocity_net import GnnConfig, TorusGnn, load_checkpoint


def test_hungarian_matches_scipy():
    rng = np.random.default_rng(0)
    for n in (1, 2, 3, 5, 8, 13):
        for _ in range(20):
            cost = rng.uniform(0, 10, size=(n, n))
            mine = hungarian(cost)
            rows, cols = linear_sum_assignment(cost)
            assert sorted(mine.tolist()) == list(range(n))
            assert cost[np.arange(n), mine].sum() == pytest.approx(
                cost[rows, cols].sum(), rel=1e-12
            )


def test_hungarian_handles_ties_and_integers():
    cost = np.array([[1.0, 1.0], [1.0, 1.0]])
    assign = hungarian(cost)
    assert sorted(assign.tolist()) == [0, 1]
    with pytest.raises(TrainingError):
        hungarian(np.array([[np.inf, 1.0], [1.0, 0.0]]))
    with pytest.raises(TrainingError):
        hungarian(np.zeros((2, 3)))


def test_ot_couple_is_optimal_within_species():
    rng = np.random.default_rng(1)
    system = ipl_system(6)
    L = system.box_length
    template = system.species_template()
    species1 = np.stack([rng.permutation(template) for _ in range(8)])
    pos1 = rng.uniform(0, L, size=(8, 6, 2))
    species0 = np.stack([rng.permutation(template) for _ in range(8)])
    pos0 = rng.uniform(0, L, size=(8, 6, 2))

    s_out, p_out, perm = ot_couple(species0, pos0, species1, pos1, L)
    assert np.array_equal(s_out, species1)  # labels line up elementwise
    got = np.sum(torus_distance(p_out, pos1, L) ** 2, axis=1)

    # independent optimum: per species group, brute force over permutations
    import itertools

    for b in range(8):
        best = 0.0
        for s in range(system.n_species):
            idx1 = np.where(species1[b] == s)[0]
            idx0 = np.where(species0[b] == s)[0]
            d2 = torus_distance(
                pos0[b, idx0][:, None, :], pos1[b, idx1][None, :, :], L
            ) ** 2
            best += min(
                sum(d2[perm_i, j] for j, perm_i in enumerate(p))
                for p in itertools.permutations(range(idx1.size))
            )
        assert got[b] == pytest.approx(best, rel=1e-10)
        # perm really indexes the base side
        assert np.array_equal(p_out[b], pos0[b, perm[b]])
        assert np.array_equal(s_out[b], species0[b, perm[b]])


def test_ot_couple_never_worse_than_any_valid_pairing():
    rng = np.random.default_rng(2)
    system = ipl_system(10)
    L = system.box_length
    template = system.species_template()
    species = np.tile(template, (16, 1))
    pos1 = rng.uniform(0, L, size=(16, 10, 2))
    pos0 = rng.uniform(0, L, size=(16, 10, 2))
    _, p_out, _ = ot_couple(species, pos0, species, pos1, L)
    opt = np.sum(torus_distance(p_out, pos1, L) ** 2)
    naive = np.sum(torus_distance(pos0, pos1, L) ** 2)
    assert opt <= naive + 1e-12


def test_ot_couple_plain_cost_differs():
    rng = np.random.default_rng(3)
    system = ipl_system(6)
    L = system.box_length
    species = np.tile(system.species_template(), (4, 1))
    pos0 = rng.uniform(0, L, size=(4, 6, 2))
    pos1 = rng.uniform(0, L, size=(4, 6, 2))
    _, p_sq, _ = ot_couple(species, pos0, species, pos1, L, cost="squared")
    _, p_pl, _ = ot_couple(species, pos0, species, pos1, L, cost="plain")
    sq_cost = np.sum(torus_distance(p_sq, pos1, L) ** 2)
    pl_cost = np.sum(torus_distance(p_pl, pos1, L))
    # each objective is at least as good under its own optimizer
    assert sq_cost <= np.sum(torus_distance(p_pl, pos1, L) ** 2) + 1e-12
    assert pl_cost <= np.sum(torus_distance(p_sq, pos1, L)) + 1e-12
    with pytest.raises(TrainingError):
        ot_couple(species, pos0, species, pos1, L, cost="cubic")


def test_ot_couple_rejects_composition_mismatch():
    system = ipl_system(6)
    L = system.box_length
    s1 = np.tile(system.species_template(), (2, 1))
    s0 = s1.copy()
    s0[0, 0] = 1  # composition now differs
    pos = np.full((2, 6, 2), 1.0)
    with pytest.raises(TrainingError):
        ot_couple(s0, pos, s1, pos, L)


def test_non_ot_coupling_still_aligns_species():
    rng = np.random.default_rng(4)
    system = ipl_system(8)
    cfg = TrainConfig(use_ot=False, epochs=1)
    template = system.species_template()
    species1 = np.stack([rng.permutation(template) for _ in range(6)])
    pos1 = rng.uniform(0, system.box_length, size=(6, 8, 2))
    s0, p0, perm = _couple_batch(system, cfg, rng, species1, pos1)
    assert np.array_equal(s0, species1)
    assert p0.shape == pos1.shape
    # permutation rows are valid permutations
    assert np.array_equal(np.sort(perm, axis=1), np.tile(np.arange(8), (6, 1)))


def test_sample_base_batch_properties():
    rng = np.random.default_rng(5)
    system = ipl_system(10)
    species, positions = sample_base_batch(system, rng, 200)
    assert species.shape == (200, 10)
    assert positions.shape == (200, 10, 2)
    assert np.all(positions >= 0) and np.all(positions < system.box_length)
    template = np.sort(system.species_template())
    assert np.array_equal(np.sort(species, axis=1), np.tile(template, (200, 1)))
    # labels actually move around
    assert not np.array_equal(species[0], species[1]) or not np.array_equal(
        species[1], species[2]
    )


def test_base_log_density_value():
    system = ipl_system(10)
    expect = -10 * 2 * np.log(system.box_length)
    assert base_log_density(system) == pytest.approx(expect, rel=1e-15)


def test_make_train_batch_geometry():
    rng = np.random.default_rng(6)
    system = ipl_system(6)
    L = system.box_length
    species = np.tile(system.species_template(), (5, 1))
    pos0 = rng.uniform(0, L, size=(5, 6, 2))
    pos1 = rng.uniform(0, L, size=(5, 6, 2))
    t = rng.uniform(size=5)
    perm = np.tile(np.arange(6), (5, 1))
    batch = make_train_batch(system, species, pos0, pos1, perm, t)
    assert np.array_equal(batch.target, torus_log(pos0, pos1, L))
    assert np.array_equal(
        batch.positions_t, geodesic_interp(t[:, None, None], pos0, pos1, L)
    )
    with pytest.raises(TrainingError):
        make_train_batch(system, species, pos0, pos1, perm, np.array([0.5, 1.5, 0, 0, 0]))


def tiny_setup(n_frames=24, seed=7):
    system = ipl_system(4)
    cfg = GnnConfig(box_length=system.box_length, depth=1, width=8, edge_dim=8)
    model = TorusGnn(cfg)
    rng = np.random.default_rng(seed)
    species = np.stack(
        [rng.permutation(system.species_template()) for _ in range(n_frames)]
    )
    positions = rng.uniform(0, system.box_length, size=(n_frames, 4, 2))
    return system, model, species, positions


def test_si_loss_at_identity_field_equals_target_power():
    system, model, species, positions = tiny_setup()
    rng = np.random.default_rng(8)
    params = model.init_params(rng)  # zero displacement head
    pos0 = rng.uniform(0, system.box_length, size=positions.shape)
    perm = np.tile(np.arange(4), (positions.shape[0], 1))
    batch = make_train_batch(
        system, species, pos0, positions, perm, rng.uniform(size=positions.shape[0])
    )
    loss = si_loss(model, params, batch)
    expect = float(np.sum(batch.target**2)) / positions.shape[0]
    assert float(loss.data) == pytest.approx(expect, rel=1e-12)


def test_micro_batching_changes_nothing():
    system, model, species, positions = tiny_setup()
    rng = np.random.default_rng(9)
    from torusflow.verify_suite import randomized_params

    params_a = randomized_params(model, rng)
    params_b = {k: ad.Tensor(p.data.copy(), requires_grad=True) for k, p in params_a.items()}
    pos0 = rng.uniform(0, system.box_length, size=positions.shape)
    perm = np.tile(np.arange(4), (positions.shape[0], 1))
    batch = make_train_batch(
        system, species, pos0, positions, perm, rng.uniform(size=positions.shape[0])
    )

    full = si_loss_value(model, params_a, batch, micro_batch=1000)
    split = si_loss_value(model, params_a, batch, micro_batch=5)
    assert split == pytest.approx(full, rel=1e-12)

    loss_a = si_loss_grads(model, params_a, batch, micro_batch=1000)
    loss_b = si_loss_grads(model, params_b, batch, micro_batch=5)
    assert loss_b == pytest.approx(loss_a, rel=1e-12)
    # the last layer's node-refresh blocks are idle by construction; every
    # other parameter must carry a gradient, identically for both splits
    last = model.config.depth - 1
    idle = {f"layer{last}/{blk}/{t}" for blk in ("gate", "node0", "node1") for t in ("w", "b")}
    for k in params_a:
        ga, gb = params_a[k].grad, params_b[k].grad
        if k in idle:
            assert ga is None and gb is None
            continue
        assert ga is not None and gb is not None
        assert np.max(np.abs(ga - gb)) < 1e-11


def test_adam_step_hand_oracle():
    p = ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.5, -1.0])
    params = {"w": p}
    state = AdamState()
    adam_step(params, state, lr=0.1)
    # first step: m_hat = grad, v_hat = grad^2, update = -lr * sign-ish
    expect = np.array([1.0, -2.0]) - 0.1 * np.array([0.5, -1.0]) / (
        np.sqrt(np.array([0.25, 1.0])) + 1e-8
    )
    assert np.allclose(p.data, expect, atol=1e-12)
    assert state.step == 1

    p.grad = np.array([0.5, -1.0])
    adam_step(params, state, lr=0.1)
    m = 0.9 * (0.1 * np.array([0.5, -1.0])) + 0.1 * np.array([0.5, -1.0])
    v = 0.999 * (0.001 * np.array([0.25, 1.0])) + 0.001 * np.array([0.25, 1.0])
    m_hat = m / (1 - 0.9**2)
    v_hat = v / (1 - 0.999**2)
    assert np.allclose(p.data, expect - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8), atol=1e-12)


def test_grad_clipping():
    p1 = ad.Tensor(np.zeros(2), requires_grad=True)
    p2 = ad.Tensor(np.zeros(1), requires_grad=True)
    p1.grad = np.array([3.0, 0.0])
    p2.grad = np.array([4.0])
    params = {"a": p1, "b": p2}
    assert global_grad_norm(params) == pytest.approx(5.0)
    returned = clip_global_norm(params, 1.0)
    assert returned == pytest.approx(5.0)
    assert global_grad_norm(params) == pytest.approx(1.0)
    # below the bound nothing moves
    before = p1.grad.copy()
    clip_global_norm(params, 10.0)
    assert np.array_equal(p1.grad, before)
    zero_grads(params)
    assert p1.grad is None and global_grad_norm(params) == 0.0


def test_train_loop_runs_and_checkpoints(tmp_path):
    system, model, species, positions = tiny_setup(n_frames=30)
    cfg = TrainConfig(
        epochs=4,
        batch_size=16,
        micro_batch=8,
        learning_rate=1e-2,
        clip_norm=2.0,
        val_fraction=0.2,
        seed=3,
    )
    ckpt = tmp_path / "toy.ckpt"
    hist = tmp_path / "toy.csv"
    result = train(
        model,
        system,
        species,
        positions,
        cfg,
        checkpoint_path=str(ckpt),
        history_path=str(hist),
        provenance={"system": system.to_dict()},
    )
    assert len(result.history) == 4
    assert 1 <= result.best_epoch <= 4
    assert np.isfinite(result.best_val_loss)
    assert all(np.isfinite(v) for _, tr, v in result.history for v in (tr, v))
    assert len(result.grad_norms) == 4 * 2  # two macro batches per epoch

    cfg2, params2, header = load_checkpoint(str(ckpt))
    assert header["loss_summary"]["best_epoch"] == result.best_epoch
    assert header["provenance"]["system"]["n_particles"] == 4
    for k, p in result.params.items():
        assert np.array_equal(params2[k].data, p.data)

    rows = hist.read_text().strip().splitlines()
    assert rows[0].startswith("epoch")
    assert len(rows) == 5


def test_train_is_deterministic():
    system, model, species, positions = tiny_setup(n_frames=20)
    cfg = TrainConfig(
        epochs=2, batch_size=16, micro_batch=8, learning_rate=1e-3, seed=12
    )
    r1 = train(model, system, species, positions, cfg)
    r2 = train(model, system, species, positions, cfg)
    assert r1.history == r2.history
    for k in r1.params:
        assert np.array_equal(r1.params[k].data, r2.params[k].data)


def test_train_reduces_loss_on_structured_data():
    # frames drawn from a tight blob are far from uniform; even a few epochs
    # of fitting must beat the untrained identity field on train loss
    system, model, species, positions = tiny_setup(n_frames=40, seed=20)
    rng = np.random.default_rng(21)
    center = rng.uniform(0, system.box_length, size=(1, 4, 2))
    blob = (center + 0.05 * rng.standard_normal((40, 4, 2))) % system.box_length
    cfg = TrainConfig(
        epochs=8, batch_size=32, micro_batch=16, learning_rate=3e-3, seed=5
    )
    result = train(model, system, species, blob, cfg)
    first = result.history[0][1]
    last = result.history[-1][1]
    assert last < first


def test_write_history_format(tmp_path):
    path = tmp_path / "h.csv"
    write_history(str(path), [(1, 0.5, 0.6), (2, 0.4, 0.55)])
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss"
    assert lines[1].startswith("1,")
    assert len(lines) == 3
