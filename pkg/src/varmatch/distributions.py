"""Diagonal Gaussian variational distributions over 4-d box encodings.

The variational family is ``N(mu, diag(sigma^2))`` per anchor, parameterized
by ``log_sigma`` so plain gradient steps keep ``sigma > 0``.  The prior is the
standard normal, for which the KL divergence and its gradient are closed form.

Noise is drawn from counter-based Philox streams: a stream is addressed by a
``(seed, stream)`` pair where ``stream`` is up to three integer indices placed
in the high words of the Philox counter.  The same address always yields the
same draws, independent of thread count or draw order elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1

# tags keep independent purposes on disjoint key spaces
TAG_NOISE = 1
TAG_SCENE = 2
TAG_SHUFFLE = 3
TAG_GENERIC = 4


def philox_generator(seed: int, tag: int = TAG_GENERIC, stream=()) -> np.random.Generator:
    """Independent generator addressed by (seed, tag, up to 3 stream indices).

    Stream indices go in the high counter words, so each stream has 2^64
    blocks of headroom before it could collide with a neighbor.
    """
    if isinstance(stream, (int, np.integer)):
        stream = (stream,)
    stream = tuple(int(s) for s in stream)
    if len(stream) > 3:
        raise ValueError("at most 3 stream indices")
    counter = np.zeros(4, dtype=np.uint64)
    for i, s in enumerate(stream):
        counter[i + 1] = s & _MASK64
    key = np.array([int(seed) & _MASK64, int(tag) & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=key))


@dataclass(frozen=True)
class NoiseDraw:
    """Standard-normal draw with its provenance, for replayable experiments."""

    epsilon: np.ndarray
    seed: int
    stream: tuple


def draw_noise(seed: int, stream, shape) -> NoiseDraw:
    """Draw standard-normal noise from the stream addressed by (seed, stream)."""
    if isinstance(stream, (int, np.integer)):
        stream = (stream,)
    stream = tuple(int(s) for s in stream)
    eps = philox_generator(seed, TAG_NOISE, stream).standard_normal(shape)
    return NoiseDraw(epsilon=eps, seed=int(seed), stream=stream)


def reparameterize(mu: np.ndarray, sigma: np.ndarray, epsilon: np.ndarray) -> np.ndarray:
    """z = mu + sigma * epsilon, the pathwise sampling map."""
    return np.asarray(mu) + np.asarray(sigma) * np.asarray(epsilon)


def kl_to_standard_normal(mu: np.ndarray, log_sigma: np.ndarray) -> np.ndarray:
    """KL(N(mu, sigma^2) || N(0, 1)) summed over the last axis.

    Per component: 0.5 * (mu^2 + sigma^2 - 1 - 2*log_sigma).
    """
    mu = np.asarray(mu, dtype=float)
    log_sigma = np.asarray(log_sigma, dtype=float)
    sigma2 = np.exp(2.0 * log_sigma)
    return 0.5 * np.sum(mu * mu + sigma2 - 1.0 - 2.0 * log_sigma, axis=-1)


def kl_gradient(mu: np.ndarray, log_sigma: np.ndarray):
    """Analytic (d KL / d mu, d KL / d log_sigma), componentwise."""
    mu = np.asarray(mu, dtype=float)
    log_sigma = np.asarray(log_sigma, dtype=float)
    return mu.copy(), np.exp(2.0 * log_sigma) - 1.0


def kl_monte_carlo(mu: np.ndarray, log_sigma: np.ndarray, n_samples: int, seed: int) -> float:
    """Monte-Carlo estimate of the KL to the standard normal (oracle path).

    Averages log q(z) - log p(z) over reparameterized samples; converges to
    :func:`kl_to_standard_normal`.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    mu = np.asarray(mu, dtype=float)
    log_sigma = np.asarray(log_sigma, dtype=float)
    sigma = np.exp(log_sigma)
    eps = draw_noise(seed, (0,), (int(n_samples),) + mu.shape).epsilon
    z = mu + sigma * eps
    # log q - log p with the common -0.5*log(2*pi) terms cancelling
    log_q = -log_sigma - 0.5 * eps * eps
    log_p = -0.5 * z * z
    return float(np.mean(np.sum(log_q - log_p, axis=-1)))
