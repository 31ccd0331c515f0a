"""Latent-weight calibration for the auxiliary-loss strength.

The weight is treated as a Gamma(alpha, beta) variable whose posterior mean
under an exponential pseudo-likelihood in the auxiliary loss L is
alpha / (beta + L). In "em" mode the weight is refreshed with that mean
every n_lambda epochs from the epoch-mean auxiliary loss; in "fixed" mode
it never changes.
"""

from dataclasses import dataclass, replace

from .errors import ConfigError, ContractError

MODES = ("fixed", "em")

# grid used by the fixed-weight ablation harness
FIXED_LAMBDA_GRID = (0.01, 0.1, 0.5, 1.0, 2.0, 5.0)


@dataclass(frozen=True)
class LambdaState:
    mode: str
    alpha_prior: float
    beta_prior: float
    lambda_current: float
    steps_since_update: int
    n_lambda: int


def initial_state(mode="em", alpha=1.0, beta=1.0, n_lambda=1, fixed_value=1.0):
    """Start at the prior mean (em) or the configured constant (fixed)."""
    if mode not in MODES:
        raise ConfigError(f"lambda mode must be one of {MODES}, got {mode!r}")
    if alpha <= 0 or beta <= 0:
        raise ConfigError("Gamma prior parameters must be positive")
    if n_lambda < 1:
        raise ConfigError(f"n_lambda must be >= 1, got {n_lambda}")
    if mode == "fixed" and fixed_value < 0:
        raise ConfigError(f"fixed lambda must be >= 0, got {fixed_value}")
    lam = alpha / beta if mode == "em" else float(fixed_value)
    return LambdaState(
        mode=mode,
        alpha_prior=float(alpha),
        beta_prior=float(beta),
        lambda_current=lam,
        steps_since_update=0,
        n_lambda=int(n_lambda),
    )


def lambda_posterior_mean(alpha, beta, loss):
    """alpha / (beta + loss); strictly decreasing in the loss."""
    if loss < 0:
        raise ContractError(f"auxiliary loss must be >= 0, got {loss}")
    return alpha / (beta + loss)


def maybe_update(state, epoch_mean_loss):
    """Advance the schedule by one epoch; refresh lambda when it is due."""
    if state.mode == "fixed":
        return state
    if state.steps_since_update + 1 >= state.n_lambda:
        lam = lambda_posterior_mean(
            state.alpha_prior, state.beta_prior, epoch_mean_loss
        )
        return replace(state, lambda_current=lam, steps_since_update=0)
    return replace(state, steps_since_update=state.steps_since_update + 1)
