import math

import numpy as np
import pytest

from cebm import autodiff as ad
from cebm.autodiff import NonFiniteError, ShapeError, Tensor
from cebm.expfam import (
    GaussianNaturalParams,
    gaussian_log_density,
    log_normalizer_b,
    natural_to_mean,
    posterior_params,
)
from cebm.model import (
    BaselineEbm,
    CebmModel,
    EncoderConfig,
    GmmCebmModel,
    LayerSpec,
    build_model,
    efh_as_cebm_energy,
    efh_energy,
    encoder_template,
)


def mlp(k=3, shape=(1, 4, 4)):
    return encoder_template("mlp", shape, k)


def rand_x(rng, n, shape=(1, 4, 4)):
    return rng.uniform(0, 1, size=(n,) + shape)


def numeric_param_grads(model, x, names, h=1e-5):
    out = {}
    for name in names:
        p = model.params[name]
        flat = p.reshape(-1)
        g = np.empty(flat.size)
        for i in range(flat.size):
            v = flat[i]
            flat[i] = v + h
            fp = model.energy(x).sum()
            flat[i] = v - h
            fm = model.energy(x).sum()
            flat[i] = v
            g[i] = (fp - fm) / (2 * h)
        out[name] = g.reshape(p.shape)
    return out


def numeric_input_grad(model, x, h=1e-5):
    g = np.empty_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        v = flat[i]
        flat[i] = v + h
        fp = model.energy(x).sum()
        flat[i] = v - h
        fm = model.energy(x).sum()
        flat[i] = v
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel(a, n):
    return float(np.max(np.abs(a - n) / (np.abs(a) + 1e-8)))


# ---- encoder and statistics --------------------------------------------------

def test_zero_weight_encoder_statistics():
    m = CebmModel.zeros(mlp(3), stat_head_scale=2.0)
    t1, t2 = m.encode(rand_x(np.random.default_rng(0), 5))
    np.testing.assert_array_equal(t1, 0.0)
    np.testing.assert_allclose(t2, -2.0 * math.log(2.0), rtol=1e-15)


def test_statistics_shape_and_sign():
    rng = np.random.default_rng(1)
    m = CebmModel.init(mlp(5), rng)
    t1, t2 = m.encode(rand_x(rng, 7))
    assert t1.shape == t2.shape == (7, 5)
    assert np.all(t2 < 0)


def test_encoder_input_shape_checked():
    m = CebmModel.init(mlp(2), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        m.encode(np.zeros((3, 1, 5, 5)))
    with pytest.raises(NonFiniteError):
        m.encode(np.full((1, 1, 4, 4), np.nan))


def test_encoder_single_example_gets_batch_axis():
    m = CebmModel.init(mlp(2), np.random.default_rng(0))
    t1, _ = m.encode(np.zeros((1, 4, 4)))
    assert t1.shape == (1, 2)


def test_encoder_pixel_sensitivity_bounded():
    rng = np.random.default_rng(2)
    m = CebmModel.init(mlp(4), rng)
    x = rand_x(rng, 1)
    # Lipschitz bound: product of spectral norms; swish slope <= 1.1, softplus <= 1
    bound = 1.1 ** 2
    for name in ("layer0.w", "layer1.w", "head.w"):
        bound *= np.linalg.norm(m.params[name], 2)
    t0 = np.concatenate(m.encode(x), axis=1)
    for pix in range(16):
        xp = x.copy()
        xp.reshape(-1)[pix] += 1e-6
        ratio = np.linalg.norm(np.concatenate(m.encode(xp), axis=1) - t0) / 1e-6
        assert 0 < ratio <= bound


def test_head_emits_2k_outputs():
    m = CebmModel.init(encoder_template("desk-conv", (1, 8, 8), 6), np.random.default_rng(0))
    assert m.params["head.w"].shape[1] == 12


# ---- joint and marginal energies ---------------------------------------------

def test_joint_energy_zero_encoder_at_origin():
    m = CebmModel.zeros(mlp(3))
    x = np.zeros((1, 1, 4, 4))
    assert m.energy_joint(x, np.zeros(3))[0] == 0.0


def test_joint_energy_rejects_non_finite_z():
    m = CebmModel.zeros(mlp(1))
    with pytest.raises(NonFiniteError):
        m.energy_joint(np.zeros((1, 1, 4, 4)), [np.inf])


def test_joint_minus_marginal_is_negative_log_posterior():
    rng = np.random.default_rng(3)
    k = 4
    m = CebmModel.init(mlp(k), rng)
    x = rand_x(rng, 6)
    post = m.posterior(x)
    z = rng.normal(size=(6, k))
    lhs = m.energy_joint(x, z) - m.energy_marginal(x)
    rhs = -gaussian_log_density(post, z) - k * 0.5 * math.log(2 * math.pi)
    np.testing.assert_allclose(lhs, rhs, atol=1e-8)


def test_marginal_zero_statistics():
    m = CebmModel.zero_statistics(mlp(3))
    t1, t2 = m.encode(np.ones((1, 1, 4, 4)))
    assert np.all(t1 == 0) and np.all(t2 == 0)
    assert m.energy_marginal(np.ones((2, 1, 4, 4))).tolist() == [0.0, 0.0]


def test_marginal_closed_form_k1():
    cfg = encoder_template("linear", (1,), 1)
    m = CebmModel.zeros(cfg)
    # t1 = 1 from the bias; t2 = -softplus(b) = -0.5 for b = log(expm1(0.5))
    m.params["head.b"] = np.array([1.0, math.log(math.expm1(0.5))])
    t1, t2 = m.encode(np.zeros((1, 1)))
    assert t1[0, 0] == 1.0 and t2[0, 0] == pytest.approx(-0.5, abs=1e-15)
    expected = -(0.25 - 0.5 * math.log(2.0))
    assert m.energy_marginal(np.zeros((1, 1)))[0] == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.09657, abs=1e-5)


def test_marginal_permutation_invariant():
    rng = np.random.default_rng(4)
    k = 5
    m = CebmModel.init(mlp(k), rng, bias=GaussianNaturalParams(rng.normal(size=k), -rng.uniform(0.2, 2, k)))
    perm = rng.permutation(k)
    cols = np.concatenate([perm, perm + k])
    p2 = dict(m.params)
    p2["head.w"] = m.params["head.w"][:, cols]
    p2["head.b"] = m.params["head.b"][cols]
    m2 = CebmModel(m.config, p2, bias=GaussianNaturalParams(m.bias.lam1[perm], m.bias.lam2[perm]))
    x = rand_x(rng, 4)
    np.testing.assert_allclose(m.energy_marginal(x), m2.energy_marginal(x), atol=1e-13)


def test_marginal_matches_expfam_formula():
    rng = np.random.default_rng(5)
    m = CebmModel.init(mlp(3), rng)
    x = rand_x(rng, 5)
    expected = -log_normalizer_b(m.posterior(x)) + log_normalizer_b(m.bias)
    np.testing.assert_allclose(m.energy_marginal(x), expected, atol=1e-12)


def test_posterior_examples():
    m = CebmModel.zero_statistics(mlp(2))
    p = m.posterior(np.zeros((1, 1, 4, 4)))
    np.testing.assert_array_equal(p.lam1[0], m.bias.lam1)
    np.testing.assert_array_equal(p.lam2[0], m.bias.lam2)
    rng = np.random.default_rng(6)
    m = CebmModel.init(mlp(2), rng)
    x = rand_x(rng, 3)
    t1, t2 = m.encode(x)
    np.testing.assert_array_equal(natural_to_mean(m.posterior(x)).m1,
                                  natural_to_mean(posterior_params(m.bias, t1, t2)).m1)


def grid_oracle(model, xs, zgrid):
    """Brute-force joint normalization on an (x, z) grid for K = 1."""
    dz = zgrid[1] - zgrid[0]
    e_joint = np.stack([model.energy_joint(xs, np.full((len(xs), 1), z)) for z in zgrid], axis=1)
    w = np.exp(-(e_joint - e_joint.min()))
    post_grid = w / (w.sum(axis=1, keepdims=True) * dz)
    post = model.posterior(xs)
    analytic = np.exp(np.stack([gaussian_log_density(post, np.full((len(xs), 1), z)) for z in zgrid], axis=1))
    density_err = float(np.max(np.abs(post_grid - analytic)))
    # marginal: sum_z exp(-E(x, z)) dz should be proportional to exp(-E(x))
    log_mass = np.log(np.exp(-e_joint - (-e_joint).max()).sum(axis=1) * dz) + (-e_joint).max()
    log_ratio = log_mass - (-model.energy_marginal(xs))
    spread = float(np.max(np.exp(log_ratio - log_ratio.mean())) - np.min(np.exp(log_ratio - log_ratio.mean())))
    return density_err, spread


@pytest.mark.parametrize("seed", range(3))
def test_grid_factorization_oracle(seed):
    rng = np.random.default_rng(seed)
    m = CebmModel.init(encoder_template("mlp", (1,), 1), rng)
    xs = np.linspace(0, 1, 41)[:, None]
    err, spread = grid_oracle(m, xs, np.linspace(-6, 6, 2001))
    assert err < 1e-3
    assert spread < 1e-6


def test_posterior_always_valid_for_random_weights():
    rng = np.random.default_rng(7)
    for trial in range(4):
        m = CebmModel.init(mlp(8), rng)
        m.params = {k: v * (1 + 9 * trial) for k, v in m.params.items()}
        x = rng.uniform(-0.5, 1.5, size=(2500, 1, 4, 4))
        post = m.posterior(x)
        assert np.all(post.lam2 < 0)


# ---- gradients ------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["cebm", "gmm", "baseline"])
@pytest.mark.parametrize("template", ["mlp", "desk-conv"])
def test_energy_gradients_finite_difference(kind, template):
    rng = np.random.default_rng(8)
    cfg = encoder_template(template, (1, 8, 8), 2)
    if kind == "cebm":
        m = CebmModel.init(cfg, rng)
    elif kind == "gmm":
        m = GmmCebmModel.init(cfg, rng, components=3)
    else:
        m = BaselineEbm.init(cfg, rng)
    x = rand_x(rng, 2, (1, 8, 8))
    _, gx = m.energy_and_input_grad(x)
    assert rel(gx, numeric_input_grad(m, x)) < 1e-4
    _, gp = m.energy_and_param_grads(x)
    names = [n for n in m.trainable if m.params[n].size <= 200]
    num = numeric_param_grads(m, x, names)
    for n in names:
        assert rel(gp[n], num[n]) < 1e-4, n


# ---- GMM ---------------------------------------------------------------------------

def gmm_with(components_lam1, components_raw2, head_b, k):
    cfg = encoder_template("linear", (1,), k)
    m = GmmCebmModel.init(cfg, np.random.default_rng(0), components=len(components_lam1))
    m.params = {n: np.zeros_like(v) for n, v in m.params.items()}
    m.params["mix.lam1"] = np.asarray(components_lam1, float).reshape(-1, k)
    m.params["mix.raw2"] = np.asarray(components_raw2, float).reshape(-1, k)
    m.params["head.b"] = np.asarray(head_b, float)
    return m


def softplus(v):
    return math.log1p(math.exp(v))


def b1(l1, l2):
    return -l1 * l1 / (4 * l2) - 0.5 * math.log(-2 * l2)


def test_gmm_identical_components_offset():
    rng = np.random.default_rng(9)
    cfg = mlp(3)
    g = GmmCebmModel.init(cfg, rng, components=4)
    g.params["mix.lam1"] = np.tile(g.params["mix.lam1"][:1], (4, 1))
    g.params["mix.raw2"] = np.tile(g.params["mix.raw2"][:1], (4, 1))
    single = CebmModel(cfg, {k: v for k, v in g.params.items() if not k.startswith("mix")},
                       bias=GaussianNaturalParams(g.components().lam1[0], g.components().lam2[0]))
    x = rand_x(rng, 5)
    np.testing.assert_allclose(g.gmm_energy_marginal(x), single.energy_marginal(x) - math.log(4), atol=1e-12)
    probs, _ = g.component_posterior(x)
    np.testing.assert_allclose(probs, 0.25, atol=1e-15)


def test_gmm_single_component_equals_cebm_exactly():
    rng = np.random.default_rng(10)
    cfg = mlp(3)
    g = GmmCebmModel.init(cfg, rng, components=1)
    comp = g.components()
    single = CebmModel(cfg, {k: v for k, v in g.params.items() if not k.startswith("mix")},
                       bias=GaussianNaturalParams(comp.lam1[0], comp.lam2[0]))
    x = rand_x(rng, 8)
    np.testing.assert_array_equal(g.gmm_energy_marginal(x), single.energy_marginal(x))


def test_gmm_two_component_hand_case():
    raw_a, raw_b = 0.3, -0.4
    head_raw = 0.2
    m = gmm_with([[0.5], [-1.0]], [[raw_a], [raw_b]], [0.7, head_raw], 1)
    t1, t2 = 0.7, -softplus(head_raw)
    gaps = []
    for l1, raw in ((0.5, raw_a), (-1.0, raw_b)):
        l2 = -softplus(raw)
        gaps.append(b1(l1 + t1, l2 + t2) - b1(l1, l2))
    expected = -math.log(math.exp(gaps[0]) + math.exp(gaps[1]))
    x = np.zeros((1, 1))
    assert m.gmm_energy_marginal(x)[0] == pytest.approx(expected, abs=1e-12)
    probs, post = m.component_posterior(x)
    z = math.exp(gaps[0]) + math.exp(gaps[1])
    np.testing.assert_allclose(probs[0], [math.exp(gaps[0]) / z, math.exp(gaps[1]) / z], atol=1e-14)
    assert post.lam1.shape == (1, 2, 1)
    assert abs(probs.sum() - 1) < 1e-12


def test_gmm_dominant_component_is_stable():
    m = gmm_with([[0.0], [-2000.0]], [[0.0], [0.0]], [2000.0, 0.0], 1)
    x = np.zeros((1, 1))
    e = m.gmm_energy_marginal(x)
    assert np.isfinite(e).all()
    t2 = -math.log(2)
    gap0 = b1(2000.0, -math.log(2) + t2) - b1(0.0, -math.log(2))
    assert gap0 > 1e5
    assert e[0] == pytest.approx(-gap0, rel=1e-12)


def test_gmm_responsibility_saturates():
    m = gmm_with([[0.0], [0.0]], [[0.0], [0.0]], [0.0, 0.0], 1)
    assert m.component_posterior(np.zeros((1, 1)))[0][0, 0] == pytest.approx(0.5)
    # t1 = 10; component 1 cancels it, component 0 does not
    m = gmm_with([[0.0], [-10.0]], [[0.0], [0.0]], [10.0, 0.0], 1)
    l2 = -math.log(2)
    gap0 = b1(10.0, 2 * l2) - b1(0.0, l2)
    gap1 = b1(0.0, 2 * l2) - b1(-10.0, l2)
    assert gap0 - gap1 > 50
    probs, _ = m.component_posterior(np.zeros((1, 1)))
    assert probs[0, 0] >= 1 - 1e-20
    assert probs[0, 1] <= 1e-20


def test_gmm_components_stay_valid():
    m = GmmCebmModel.init(mlp(2), np.random.default_rng(0), components=10)
    m.params["mix.raw2"] = m.params["mix.raw2"] - 30.0
    assert np.all(m.components().lam2 < 0)
    assert m.num_components == 10
    np.testing.assert_allclose(m.components().variance, 1 / (2 * np.logaddexp(0, m.params["mix.raw2"])))


def test_gmm_init_unit_variance():
    m = GmmCebmModel.init(mlp(2), np.random.default_rng(0))
    np.testing.assert_allclose(m.components().variance, 1.0, rtol=1e-12)
    assert m.num_components == 10


# ---- EFH reduction ---------------------------------------------------------------

def test_efh_examples():
    assert efh_energy([0.0, 0.0], [0.0], [0.0, 0.0], [0.0], [[0.0], [0.0]]) == 0.0
    assert efh_energy([1.0], [1.0], [2.0], [3.0], [[4.0]]) == -9.0


def test_efh_shape_mismatch():
    with pytest.raises(ShapeError):
        efh_energy([1.0, 2.0], [1.0], [2.0], [3.0], [[4.0]])


def test_efh_reduction_random_instances():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(1000):
        d, k = rng.integers(1, 8, size=2)
        x, z = rng.normal(size=d), rng.normal(size=k)
        tx, tz, txz = rng.normal(size=d), rng.normal(size=k), rng.normal(size=(d, k))
        a = efh_energy(x, z, tx, tz, txz)
        b = efh_as_cebm_energy(x, z, tx, tz, txz)
        worst = max(worst, abs(a - b))
    assert worst < 1e-12


# ---- baseline and plumbing ---------------------------------------------------------

def test_baseline_zero_head():
    rng = np.random.default_rng(12)
    m = BaselineEbm.init(mlp(2), rng)
    m.params["energy.w"][:] = 0
    m.params["energy.b"][:] = 0
    np.testing.assert_array_equal(m.energy(rand_x(rng, 4)), 0.0)


def test_baseline_feature_width():
    m = BaselineEbm.init(mlp(2), np.random.default_rng(0))
    assert m.features(np.zeros((3, 1, 4, 4))).shape == (3, 64)


def test_build_model_round_trip():
    rng = np.random.default_rng(13)
    x = rand_x(rng, 3)
    for m in (CebmModel.init(mlp(2), rng, stat_head_scale=0.5), GmmCebmModel.init(mlp(2), rng, components=3),
              BaselineEbm.init(mlp(2), rng)):
        m2 = build_model(m.meta(), m.params)
        assert type(m2) is type(m)
        np.testing.assert_array_equal(m.energy(x), m2.energy(x))


def test_encoder_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig((1, 4, 4), (), latent_dim=0)
    with pytest.raises(ValueError):
        EncoderConfig((1, 4, 4), (LayerSpec("dense", 4), LayerSpec("conv", 4)), 2)
    with pytest.raises(ValueError):
        encoder_template("resnet", (1, 4, 4))
    cfg = encoder_template("desk-conv", (1, 12, 12), 4)
    assert EncoderConfig.from_dict(cfg.to_dict()) == cfg


def test_energy_graph_is_differentiable_on_tape():
    rng = np.random.default_rng(14)
    m = CebmModel.init(mlp(2), rng)
    x = Tensor(rand_x(rng, 2), requires_grad=True)
    tape = ad.Tape()
    with tape:
        e = ad.sum(m.energy_graph(x, m.bind(True)))
    g = ad.backward(tape, e)
    assert x in g and len(g) == len(m.params) + 1
