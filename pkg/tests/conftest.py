import numpy as np
import pytest

from promptseg.autograd import Tape, Tensor, shadow_precision


def rel_err(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(np.max(np.abs(numeric)), 1e-12)
    return np.max(np.abs(analytic - numeric)) / denom


def numeric_grad(fn, leaf, eps=1e-4, coords=None):
    """Central finite differences of scalar fn() w.r.t. leaf.data, in place.

    ``coords`` optionally restricts the sweep to a subset of flat indices.
    """
    flat = leaf.data.reshape(-1)
    grad = np.zeros_like(flat)
    idx = range(flat.size) if coords is None else coords
    for j in idx:
        saved = flat[j]
        flat[j] = saved + eps
        fp = fn()
        flat[j] = saved - eps
        fm = fn()
        flat[j] = saved
        grad[j] = (fp - fm) / (2.0 * eps)
    return grad.reshape(leaf.data.shape)


def check_gradients(make_loss, leaf_arrays, tol=1e-3, eps=1e-4, max_coords=None, rng=None):
    """Compare tape gradients of a scalar loss against finite differences.

    ``make_loss`` maps freshly wrapped leaves to a scalar Tensor; the check
    runs in float64 shadow precision so the FD oracle is clean.
    """
    with shadow_precision():
        leaves = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in leaf_arrays]
        with Tape() as tape:
            loss = make_loss(*leaves)
        tape.backward(loss)
        errs = []
        for leaf in leaves:
            assert leaf.grad is not None, "leaf did not receive a gradient"
            coords = None
            if max_coords is not None and leaf.data.size > max_coords:
                r = rng if rng is not None else np.random.default_rng(0)
                coords = sorted(r.choice(leaf.data.size, size=max_coords, replace=False).tolist())
            num = numeric_grad(lambda: make_loss(*leaves).item(), leaf, eps=eps, coords=coords)
            if coords is None:
                errs.append(rel_err(leaf.grad, num))
            else:
                flat_a = leaf.grad.reshape(-1)[coords]
                flat_n = num.reshape(-1)[coords]
                errs.append(rel_err(flat_a, flat_n))
        worst = max(errs)
        assert worst < tol, f"gradient mismatch: rel err {worst:.3e} >= {tol}"
        return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def base_world():
    """Reference base-style train/val scenes shared by oracle-dependent modules."""
    from promptseg.datasets import DomainSpec, make_domain
    from promptseg.scenes import SceneSpec

    train = make_domain(DomainSpec(name="base", scene=SceneSpec(seed=100), count=128))
    val = make_domain(DomainSpec(name="base_val", scene=SceneSpec(seed=101), count=16))
    return train, val


@pytest.fixture(scope="session")
def base_oracle(base_world):
    """Oracle pretrained once per session with the reference recipe."""
    from promptseg.oracle import pretrain_oracle, seal

    train, _ = base_world
    model, losses = pretrain_oracle(train, iters=1500, seed=5)
    return model, seal(model), losses


def tiny_experiment(**kw):
    """A drastically shrunk experiment config for plumbing tests."""
    from promptseg.config import (
        ApfConfig,
        DataConfig,
        ExperimentConfig,
        OracleConfig,
        SpgConfig,
    )

    base = dict(
        data=DataConfig(size=16, base_train=10, base_val=3, styled_train=5,
                        styled_val=3, target_val=3),
        oracle=OracleConfig(iters=40, batch=4, widths=(8, 12, 16), kernel=3),
        spg=SpgConfig(iters=4, batch=4, pad=3, depth=4, meta_iters=4),
        apf=ApfConfig(iters=6, batch=4, embed_dim=8),
        seeds=(0,),
        out_dir="",
    )
    base.update(kw)
    return ExperimentConfig(**base).validate()
