import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import central_difference

from learned_sirt import lsirt, nn
from learned_sirt.classic import SirtConfig, sirt
from learned_sirt.exceptions import NumericError, ShapeError
from learned_sirt.geometry import make_cone_geometry, make_grid, make_parallel_geometry
from learned_sirt.lsirt import (ArrayDataset, LsirtConfig, PhantomDataset, apply_tiled, create_batch_element,
                                lr_at, lsirt_step, make_model, reconstruct, train)
from learned_sirt.phantoms import gen_triangles
from learned_sirt.projector import get_projector
from learned_sirt.rng import make_rng

GRID16 = make_grid((16, 16))
GEO16 = make_parallel_geometry(8, 23)
GRID64 = make_grid((64, 64))
GEO64 = make_parallel_geometry(20, 93)


def random_state(seed, grid=GRID16, geo=GEO16):
    rng = np.random.default_rng(seed)
    truth = gen_triangles(seed, grid.dims)
    y = get_projector(geo, grid).forward(truth) + 0.05 * rng.standard_normal(geo.sino_shape)
    return rng.random(grid.dims), rng.random(grid.dims), y, truth


def identity_model(c_in, ndim=2):
    """Network whose first output channel copies input channel 0."""
    model = nn.Model(c_in, 2 if c_in == 3 else 1, ndim, np.float64)
    centre = (1,) * ndim
    model.params["a1"][:] = 1.0
    model.params["a2"][:] = 1.0
    model.params["w1"][(0, 0) + centre] = 1.0
    model.params["w2"][(0, 0) + centre] = 1.0
    model.params["w3"][(0, 0) + centre] = 1.0
    return model


def test_alpha_zero_step_is_sirt_step():
    proj = get_projector(GEO16, GRID16)
    model = make_model(LsirtConfig(), 2, seed=3)
    x, h, y, _ = random_state(0)
    sc = proj.scalings()
    x_next, _ = lsirt_step(x, h, y, model, proj, 0.0, sc)
    expected = x + sc.col_inv * proj.adjoint(sc.row_inv * (y - proj.forward(x)))
    assert np.allclose(x_next, expected, rtol=1e-13, atol=1e-13)


def test_zero_model_shrinks_iterate():
    proj = get_projector(GEO16, GRID16)
    model = nn.Model(3, 2, 2)
    x, h, y, _ = random_state(1)
    p = proj.scaled_gradient(x, y)
    x_next, gamma = lsirt_step(x, h, y, model, proj, 0.1)
    assert not gamma.any()
    assert np.allclose(x_next, 0.9 * x + p, rtol=1e-14, atol=0)


@pytest.mark.parametrize("c_in", [3, 1])
def test_exact_data_fixed_point(c_in):
    proj = get_projector(GEO16, GRID16)
    truth = gen_triangles(2, (16, 16))
    y = proj.forward(truth)
    x_next, gamma = lsirt_step(truth, GRID16.zeros(), y, identity_model(c_in), proj, 0.1)
    assert np.array_equal(gamma[0], truth)
    assert np.allclose(x_next, truth, rtol=0, atol=1e-12)


def test_lsirt_star_sees_only_the_iterate():
    proj = get_projector(GEO16, GRID16)
    model = make_model(LsirtConfig(variant="lsirt-star"), 2, seed=4)
    assert (model.c_in, model.c_out) == (1, 1)
    x, h, y, _ = random_state(2)
    a, _ = lsirt_step(x, h, y, model, proj, 0.1)
    b, _ = lsirt_step(x, 5.0 * h + 1.0, y, model, proj, 0.1)
    assert np.array_equal(a, b)


def test_non_finite_iterate_raises():
    proj = get_projector(GEO16, GRID16)
    x, h, y, _ = random_state(3)
    x[0, 0] = np.nan
    with pytest.raises(NumericError):
        lsirt_step(x, h, y, nn.Model(3, 2, 2), proj, 0.1)


def test_wrong_channel_count_rejected():
    proj = get_projector(GEO16, GRID16)
    x, h, y, _ = random_state(4)
    with pytest.raises(ShapeError):
        lsirt_step(x, h, y, nn.Model(2, 1, 2), proj, 0.1)


@pytest.mark.parametrize("kwargs", [
    {"alpha": -0.1}, {"alpha": 1.5}, {"n_warmup": 100, "n_total": 100}, {"batch_size": 0},
    {"n_train_steps": -1}, {"lr_schedule": "cosine"}, {"variant": "unet"}, {"noise_variance": -1.0},
    {"patch_size": (2, 8, 8)},
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        LsirtConfig(**kwargs)


def test_fresh_element_without_warmup_is_zero():
    proj = get_projector(GEO16, GRID16)
    cfg = LsirtConfig(n_warmup=0, n_total=10)
    el = create_batch_element(PhantomDataset("triangles", (16, 16)), make_rng(0, "phantom"),
                              make_model(cfg, 2), cfg, proj)
    assert not el.x.any() and not el.h.any()
    assert el.age == 0
    assert el.y.shape == GEO16.sino_shape


@pytest.mark.parametrize("alpha", [0.0, 0.1])
def test_warmup_reduces_residual(alpha):
    proj = get_projector(GEO64, GRID64)
    cfg = LsirtConfig(alpha=alpha, n_warmup=50, noise_variance=0.0)
    el = create_batch_element(PhantomDataset("triangles", (64, 64)), make_rng(0, "phantom"),
                              make_model(cfg, 2), cfg, proj)
    assert el.age == 50
    residual = np.linalg.norm(proj.forward(el.x) - el.y)
    if alpha == 0.0:
        # the warmup is plain scaled SIRT
        assert residual < np.linalg.norm(el.y) / 10
    else:
        # the (1 - alpha) shrink keeps the iterate away from the data; it
        # still improves on the zero start
        assert residual < np.linalg.norm(el.y)


def test_batch_element_deterministic():
    proj = get_projector(GEO16, GRID16)
    cfg = LsirtConfig(n_warmup=5, n_total=10)
    model = make_model(cfg, 2)
    dataset = PhantomDataset("triangles", (16, 16))
    a = create_batch_element(dataset, make_rng(7, "phantom"), model, cfg, proj)
    b = create_batch_element(dataset, make_rng(7, "phantom"), model, cfg, proj)
    for name in ("x", "h", "y", "t"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_dataset_shape_mismatch():
    proj = get_projector(GEO16, GRID16)
    cfg = LsirtConfig(n_warmup=0, n_total=10)
    with pytest.raises(ShapeError):
        create_batch_element(ArrayDataset([np.zeros((8, 8))]), make_rng(0, "phantom"), make_model(cfg, 2),
                             cfg, proj)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        ArrayDataset([])
    with pytest.raises(ValueError):
        PhantomDataset("lungs", (16, 16))


def test_zero_training_steps_leave_model_unchanged():
    cfg = LsirtConfig(n_warmup=2, n_total=6, batch_size=2, n_train_steps=0)
    init = make_model(cfg, 2, seed=5)
    model, history = train(PhantomDataset("triangles", (16, 16)), GEO16, GRID16, cfg, seed=5,
                           model=init.copy())
    assert history == []
    for name in nn.Model.PARAM_NAMES:
        assert np.array_equal(model.params[name], init.params[name])


def test_training_deterministic_and_logged(tmp_path):
    cfg = LsirtConfig(n_warmup=2, n_total=6, batch_size=2, n_train_steps=12, lr=1e-3, checkpoint_every=5)
    dataset = PhantomDataset("triangles", (16, 16))
    a, hist_a = train(dataset, GEO16, GRID16, cfg, seed=1, run_dir=str(tmp_path / "a"))
    b, hist_b = train(dataset, GEO16, GRID16, cfg, seed=1)
    assert hist_a == hist_b
    for name in nn.Model.PARAM_NAMES:
        assert np.array_equal(a.params[name], b.params[name])
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == ["config.json", "final.ckpt", "metrics.csv", "step_0000005.ckpt", "step_0000010.ckpt"]
    rows = (tmp_path / "a" / "metrics.csv").read_text().splitlines()
    assert rows[0] == "step,loss,lr,wall_time"
    assert len(rows) == 13


def test_element_lifetime(monkeypatch):
    # record every element the training loop creates and read off how many
    # gradient-bearing steps it received before being replaced
    created = []
    original = lsirt.create_batch_element

    def recording(*args, **kwargs):
        el = original(*args, **kwargs)
        created.append(el)
        return el

    monkeypatch.setattr(lsirt, "create_batch_element", recording)
    cfg = LsirtConfig(n_warmup=2, n_total=20, batch_size=4, n_train_steps=3000, noise_variance=0.0,
                      lr_schedule="constant", lr=1e-5)
    grid = make_grid((8, 8))
    train(PhantomDataset("triangles", (8, 8)), make_parallel_geometry(2, 13), grid, cfg, seed=0)
    finished = created[:-cfg.batch_size]  # the last batch_size may still be alive
    lifetimes = [el.age - cfg.n_warmup for el in finished]
    assert len(lifetimes) > 300
    expected = cfg.n_total - cfg.n_warmup
    assert abs(np.mean(lifetimes) - expected) <= 0.1 * expected


def test_lr_schedule():
    cfg = LsirtConfig(lr=2e-4, n_train_steps=1000)
    assert lr_at(0, cfg) == 2e-4
    assert lr_at(499, cfg) == 2e-4
    assert lr_at(500, cfg) == 5e-5
    assert lr_at(749, cfg) == 5e-5
    assert lr_at(875, cfg) == pytest.approx(2.5e-5)
    assert lr_at(1000, cfg) == 0.0
    lin = LsirtConfig(lr=1e-4, n_train_steps=100, lr_schedule="linear")
    assert lr_at(0, lin) == 1e-4
    assert lr_at(50, lin) == pytest.approx(5e-5)
    const = LsirtConfig(lr=3e-4, lr_schedule="constant")
    assert lr_at(79_999, const) == 3e-4


@pytest.mark.parametrize("variant", ["lsirt", "lsirt-star"])
def test_alpha_zero_reconstruction_bitwise_sirt(variant):
    cfg = LsirtConfig(alpha=0.0, n_warmup=5, n_total=30, variant=variant)
    _, _, y, _ = random_state(6)
    x, _ = reconstruct(y, GEO16, GRID16, make_model(cfg, 2, seed=6), cfg)
    assert np.array_equal(x, sirt(y, GEO16, GRID16, SirtConfig(n_iter=30)))


def test_reconstruct_snapshots():
    cfg = LsirtConfig(n_warmup=2, n_total=12)
    model = make_model(cfg, 2, seed=7)
    _, _, y, _ = random_state(7)
    x, snaps = reconstruct(y, GEO16, GRID16, model, cfg, snapshots=(5, 12, 400))
    assert sorted(snaps) == [5, 12]
    assert np.array_equal(snaps[12], x)
    x5, _ = reconstruct(y, GEO16, GRID16, model, cfg, n_iter=5)
    assert np.array_equal(snaps[5], x5)


def test_reconstruct_dimension_mismatch():
    cfg = LsirtConfig(n_warmup=2, n_total=4)
    with pytest.raises(ShapeError):
        reconstruct(np.zeros(GEO16.sino_shape), GEO16, GRID16, make_model(cfg, 3), cfg)


def test_tiled_full_volume_is_plain_forward():
    model = make_model(LsirtConfig(), 2, seed=8)
    inp = np.random.default_rng(8).standard_normal((3, 20, 20)).astype(np.float32)
    assert np.array_equal(apply_tiled(model, inp, (20, 20)), model(inp))


def test_tiled_forward_3d_bitwise():
    model = make_model(LsirtConfig(), 3, seed=9)
    inp = np.random.default_rng(9).standard_normal((3, 64, 64, 64)).astype(np.float32)
    assert np.array_equal(apply_tiled(model, inp, (32, 32, 32), margin=3), model(inp))


@given(seed=st.integers(0, 2**32 - 1), dims=st.tuples(st.integers(7, 30), st.integers(7, 30)),
       tile=st.integers(7, 16))
def test_tiled_forward_2d_bitwise(seed, dims, tile):
    model = make_model(LsirtConfig(variant="lsirt-star"), 2, seed=seed % 1000)
    inp = np.random.default_rng(seed).standard_normal((1,) + dims).astype(np.float32)
    assert np.array_equal(apply_tiled(model, inp, tile), model(inp))


def test_tiling_preconditions():
    model = make_model(LsirtConfig(), 2)
    inp = np.zeros((3, 32, 32), dtype=np.float32)
    with pytest.raises(ValueError):
        apply_tiled(model, inp, 16, margin=2)
    with pytest.raises(ValueError):
        apply_tiled(model, inp, 6, margin=3)


def test_tiled_reconstruction_matches_plain():
    cfg = LsirtConfig(n_warmup=2, n_total=8)
    model = make_model(cfg, 2, seed=10)
    _, _, y, _ = random_state(10)
    plain, _ = reconstruct(y, GEO16, GRID16, model, cfg)
    tiled, _ = reconstruct(y, GEO16, GRID16, model, cfg, tile=8)
    assert np.array_equal(plain, tiled)


def test_parameter_gradients_treat_state_as_constant():
    cfg = LsirtConfig(n_warmup=2, n_total=6)
    proj = get_projector(GEO16, GRID16)
    sc = proj.scalings()
    model = make_model(cfg, 2, seed=11).copy(np.float64)
    x, h, y, truth = random_state(11)
    el = lsirt.BatchElement(x=x.copy(), h=h.copy(), y=y, t=truth, age=2)
    _, grads = lsirt._train_element(el, model, proj, sc, cfg, make_rng(0, "train"), 1.0)
    assert np.array_equal(el.h, x)

    # oracle: per-step loss as a function of the parameters alone, with the
    # network input frozen at its value before the step
    inp = np.stack([x, h, proj.scaled_gradient(x, y, sc)])

    rng = np.random.default_rng(11)
    for name in ("w1", "a1", "w3", "b3"):
        param = model.params[name]
        picks = rng.choice(param.size, size=min(param.size, 12), replace=False)

        def objective(values, name=name, picks=picks):
            saved = model.params[name]
            trial = saved.copy()
            trial.flat[picks] = values
            model.params[name] = trial
            try:
                out, tape = nn.forward(model, inp)
                loss, _ = nn.loss_and_grad(out, x, truth, cfg.omega)
                piece = b"".join(np.packbits(p > 0).tobytes() for p in tape.pre)
                return loss, piece
            finally:
                model.params[name] = saved

        fd = central_difference(objective, param.flat[picks], 1e-4, piecewise=True)
        got = grads[name].flat[picks]
        assert np.linalg.norm(got - fd) <= 1e-5 * np.linalg.norm(fd), name


@given(dims=st.tuples(st.integers(3, 40), st.integers(3, 40)), data=st.data())
def test_patch_corners_on_lattice(dims, data):
    patch = tuple(data.draw(st.integers(3, n)) for n in dims)
    rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
    corner = lsirt._random_patch(rng, dims, patch)
    for c, s, n in zip(corner, patch, dims):
        assert 0 <= c <= n - s
        assert c % s == 0 or c == n - s


def test_patch_training_step_matches_full_forward():
    grid = make_grid((12, 12, 12))
    geo = make_cone_geometry(6, 16, 16, 1.5, 40.0, 80.0)
    proj = get_projector(geo, grid)
    sc = proj.scalings()
    cfg = LsirtConfig(n_warmup=1, n_total=4, patch_size=(6, 6, 6))
    model = make_model(cfg, 3, seed=12).copy(np.float64)
    rng = np.random.default_rng(12)
    x, h, truth = rng.random((3,) + grid.dims)
    y = proj.forward(truth)
    el = lsirt.BatchElement(x=x.copy(), h=h.copy(), y=y, t=truth, age=1)
    loss, _ = lsirt._train_element(el, model, proj, sc, cfg, make_rng(1, "train"), 1.0)

    corner = lsirt._random_patch(make_rng(1, "train"), grid.dims, cfg.patch_size)
    sl = tuple(slice(c, c + 6) for c in corner)
    p = proj.scaled_gradient(x, y, sc)
    full = model(np.stack([x, h, p]))
    expected, _ = nn.loss_and_grad(full[(slice(None),) + sl], x[sl], truth[sl], cfg.omega)
    assert loss == pytest.approx(expected, rel=1e-12)
    # the iterate itself is updated on the whole volume
    assert np.allclose(el.x, 0.9 * x + 0.1 * full[0] + p, rtol=1e-12, atol=1e-12)


def test_patch_training_runs_deterministically():
    grid = make_grid((10, 10, 10))
    geo = make_cone_geometry(4, 14, 14, 1.5, 40.0, 80.0)
    cfg = LsirtConfig(n_warmup=1, n_total=4, batch_size=2, n_train_steps=3, patch_size=(5, 5, 5))
    dataset = PhantomDataset("ellipsoids", (10, 10, 10))
    a, hist_a = train(dataset, geo, grid, cfg, seed=2)
    b, hist_b = train(dataset, geo, grid, cfg, seed=2)
    assert hist_a == hist_b and all(np.isfinite(loss) for _, loss, _ in hist_a)
    assert np.array_equal(a.params["w1"], b.params["w1"])


def test_desk_training_lowers_the_loss(desk):
    desk.train("lsirt", "lsirt")
    losses = [loss for _, loss, _ in desk.histories["lsirt"]]
    assert np.mean(losses[-100:]) <= losses[0] - 2.0


def test_desk_final_iterate_beats_warmup_iterate(desk):
    final, early = desk.lsirt_psnr("lsirt", "lsirt", snapshot=desk.run.lsirt.n_warmup)
    assert np.mean(final) >= np.mean(early)
