"""Per-frame adaptation: GD from an initialization and Bayesian GD on the free energy.

The ``*_batch`` functions work on a stack of frames of equal size, with data
``y (T, N, 2)`` and targets ``x (T, N)``; parameters carry a leading task axis.
With ``create_graph=True`` the returned parameters are graph nodes whose
gradient with respect to the hyperparameters includes all second-order terms.
"""
from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import NumericalError, Tensor
from .channels import FrameDataset
from .models import (
    RHO_MAX,
    RHO_MIN,
    BayesHyper,
    FreqHyper,
    ModelParams,
    VariationalParams,
    kl_terms,
    reparametrize,
)

BURNIN_RATE_FACTOR = 0.05


def stack_part(frames: Sequence[FrameDataset], part: str = "train") -> tuple:
    """``(y, x)`` arrays with a leading frame axis for one split of each frame."""
    ys = [f.y_train if part == "train" else f.y_test for f in frames]
    xs = [f.targets(part) for f in frames]
    return np.stack(ys), np.stack(xs)


def _leaf(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _step_error(exc: NumericalError, what: str, step: int) -> NumericalError:
    return NumericalError(f"{what}: {exc} at inner step {step}", exc.node_id, exc.op)


def gd_adapt_batch(
    model,
    y: np.ndarray,
    x: np.ndarray,
    init,
    eta: float,
    n_steps: int,
    create_graph: bool = False,
    first_order: bool = False,
) -> Tensor:
    """``n_steps`` full-batch GD steps per frame from ``init`` (``(D,)`` or ``(T, D)``)."""
    T = y.shape[0]
    init = ad.as_tensor(init)
    phi = ad.broadcast_to(init, (T, model.dim)) if init.ndim == 1 else init
    if n_steps == 0 or y.shape[1] == 0:
        return phi
    for i in range(n_steps):
        try:
            # a constant init has nothing to differentiate through
            if create_graph and phi.requires_grad:
                loss = model.loss(phi.reshape(T, 1, model.dim), y, x).sum()
                (g,) = ad.gradients(loss, [phi], create_graph=not first_order)
                phi = phi - g * eta
            else:
                leaf = _leaf(phi.data)
                loss = model.loss(leaf.reshape(T, 1, model.dim), y, x).sum()
                (g,) = ad.gradients(loss, [leaf])
                phi = Tensor(leaf.data - eta * g.data)
        except NumericalError as exc:
            raise _step_error(exc, "gd_adapt", i) from exc
    return phi


def free_energy_batch(model, y, x, nu, rho, prior_nu, prior_rho, e, kl_coeff: float) -> Tensor:
    """Estimated free energy per frame, ``N * mean_r L(nu + exp(rho) e_r) + c * KL``.

    ``nu, rho (T, D)``; ``e (T, R, D)``; returns ``(T,)``.
    """
    n = y.shape[1]
    phis = reparametrize(nu, rho, e)
    data_term = model.loss(phis, y, x).mean(axis=-1) * float(n)
    if kl_coeff == 0.0:
        return data_term
    return data_term + kl_terms(nu, rho, prior_nu, prior_rho) * kl_coeff


def bayes_adapt_batch(
    model,
    y: np.ndarray,
    x: np.ndarray,
    prior_nu,
    prior_rho,
    eta: float,
    n_steps: int,
    R: int,
    rng: np.random.Generator,
    kl_coeff: float,
    create_graph: bool = False,
    first_order: bool = False,
    init_nu=None,
    init_rho=None,
) -> tuple:
    """Variational GD ``q <- q - (eta / N) grad F_hat`` starting from the prior.

    Fresh noise is drawn at every step and shared by that step's forward and
    backward pass. Returns ``(nu, rho)`` of shape ``(T, D)``.
    """
    T, n = y.shape[0], y.shape[1]
    D = model.dim
    prior_nu, prior_rho = ad.as_tensor(prior_nu), ad.as_tensor(prior_rho)
    nu = ad.as_tensor(prior_nu if init_nu is None else init_nu)
    rho = ad.as_tensor(prior_rho if init_rho is None else init_rho)
    nu = ad.broadcast_to(nu, (T, D)) if nu.ndim == 1 else nu
    rho = ad.broadcast_to(rho, (T, D)) if rho.ndim == 1 else rho
    if n_steps == 0 or n == 0:
        return nu, rho
    lr = eta / n
    for i in range(n_steps):
        e = rng.standard_normal((T, R, D))
        try:
            if create_graph and (nu.requires_grad or rho.requires_grad):
                F = free_energy_batch(model, y, x, nu, rho, prior_nu, prior_rho, e, kl_coeff).sum()
                g_nu, g_rho = ad.gradients(F, [nu, rho], create_graph=not first_order)
                nu = nu - g_nu * lr
                rho = ad.clip(rho - g_rho * lr, RHO_MIN, RHO_MAX)
            else:
                lnu, lrho = _leaf(nu.data), _leaf(rho.data)
                F = free_energy_batch(
                    model, y, x, lnu, lrho, prior_nu.data, prior_rho.data, e, kl_coeff
                ).sum()
                g_nu, g_rho = ad.gradients(F, [lnu, lrho])
                nu = Tensor(lnu.data - lr * g_nu.data)
                rho = Tensor(np.clip(lrho.data - lr * g_rho.data, RHO_MIN, RHO_MAX))
        except NumericalError as exc:
            raise _step_error(exc, "bayes_adapt", i) from exc
    return nu, rho


# single-frame entry points


def train_log_loss(frame: FrameDataset, phi: ModelParams, model, part: str = "train") -> float:
    """Average negative log-likelihood of one split under a point parameter."""
    y, x = stack_part([frame], part)
    if y.shape[1] == 0:
        raise ValueError("log-loss of an empty data set is undefined")
    with ad.no_grad():
        return float(model.loss(np.asarray(phi.theta).reshape(1, 1, -1), y, x).data[0, 0])


def freq_adapt(
    frame: FrameDataset,
    xi,
    eta: float,
    n_steps: int,
    model,
    differentiable: bool = False,
    first_order: bool = False,
) -> Union[ModelParams, Tensor]:
    """GD on the frame's training split from ``xi``.

    With ``differentiable=True`` a graph node ``(D,)`` is returned instead of
    plain parameters.
    """
    init = xi.init if isinstance(xi, FreqHyper) else xi
    y, x = stack_part([frame], "train")
    phi = gd_adapt_batch(model, y, x, init, eta, n_steps, differentiable, first_order)
    if differentiable:
        return phi[0]
    return ModelParams(phi.data[0].copy(), getattr(model, "shape", None))


def free_energy_estimate(
    frame: FrameDataset,
    q: VariationalParams,
    xi: BayesHyper,
    R: int,
    rng: np.random.Generator,
    kl_coeff: float,
    model,
    e: Optional[np.ndarray] = None,
) -> float:
    if R < 1:
        raise ValueError("R must be at least 1")
    if kl_coeff < 0:
        raise ValueError("kl_coeff must be non-negative")
    y, x = stack_part([frame], "train")
    if e is None:
        e = rng.standard_normal((1, R, model.dim))
    e = np.asarray(e).reshape(1, R, model.dim)
    with ad.no_grad():
        F = free_energy_batch(
            model, y, x, q.nu[None], q.rho[None], xi.nu, xi.rho, e, kl_coeff
        )
    return float(F.data[0])


def bayes_adapt(
    frame: FrameDataset,
    xi: BayesHyper,
    eta: float,
    n_steps: int,
    R: int,
    rng: np.random.Generator,
    kl_coeff: float,
    model,
    differentiable: bool = False,
    first_order: bool = False,
):
    """Variational adaptation of one frame; returns VariationalParams, or
    ``(nu, rho)`` graph nodes when ``differentiable``."""
    y, x = stack_part([frame], "train")
    nu, rho = bayes_adapt_batch(
        model, y, x, xi.nu, xi.rho, eta, n_steps, R, rng, kl_coeff, differentiable, first_order
    )
    if differentiable:
        return nu[0], rho[0]
    return VariationalParams(nu.data[0].copy(), rho.data[0].copy())


def burnin_adapt_batch(
    frames: Sequence[FrameDataset],
    hyper,
    model,
    eta: float,
    n_steps: int,
    n_steps_total: int,
    n_subset: int,
    rng: np.random.Generator,
    R: int = 100,
    kl_coeff: float = 0.1,
    rate_factor: float = BURNIN_RATE_FACTOR,
) -> tuple:
    """Two-phase meta-test adaptation of a stack of equally sized frames.

    Phase one runs ``n_steps`` updates at ``eta`` on a seeded random subset of
    ``n_subset`` pilots; phase two runs ``n_steps_total - n_steps`` updates at
    ``rate_factor * eta`` on all pilots. Returns ``(T, D)`` arrays: the adapted
    parameters (frequentist) or ``(nu, rho)`` (Bayesian).
    """
    if n_steps_total < n_steps:
        raise ValueError("total burn-in steps must be at least the first-phase steps")
    y, x = stack_part(frames, "train")
    n_all = y.shape[1]
    if n_subset > n_all:
        raise ValueError("subset larger than the available pilots")
    perms = np.stack([rng.permutation(n_all)[:n_subset] for _ in frames])
    ys = np.take_along_axis(y, perms[..., None], axis=1)
    xs = np.take_along_axis(x, perms, axis=1)
    n_late = n_steps_total - n_steps
    if isinstance(hyper, FreqHyper):
        phi = gd_adapt_batch(model, ys, xs, hyper.init, eta, n_steps)
        phi = gd_adapt_batch(model, y, x, phi, rate_factor * eta, n_late)
        return (phi.data,)
    nu, rho = bayes_adapt_batch(model, ys, xs, hyper.nu, hyper.rho, eta, n_steps, R, rng, kl_coeff)
    nu, rho = bayes_adapt_batch(
        model, y, x, hyper.nu, hyper.rho, rate_factor * eta, n_late, R, rng, kl_coeff,
        init_nu=nu, init_rho=rho,
    )
    return nu.data, rho.data


def metatest_adapt_burnin(
    frame: FrameDataset,
    hyper,
    model,
    eta: float,
    n_steps: int,
    n_steps_total: int,
    n_subset: int,
    rng: np.random.Generator,
    R: int = 100,
    kl_coeff: float = 0.1,
):
    out = burnin_adapt_batch([frame], hyper, model, eta, n_steps, n_steps_total, n_subset, rng, R, kl_coeff)
    if isinstance(hyper, FreqHyper):
        return ModelParams(out[0][0], getattr(model, "shape", None))
    return VariationalParams(out[0][0], out[1][0])
