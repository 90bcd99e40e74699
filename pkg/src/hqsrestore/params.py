"""The full trainable parameter set: the shared prior and one fidelity weight per problem class."""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InputError
from .imaging import DEFAULT_PEAK
from .prior import PriorProx


@dataclass(frozen=True)
class ModelParams:
    """Prior parameters plus ``log(lambda)`` for every problem class.

    Fidelity weights are kept as logarithms so any real vector is a valid
    model.  ``metadata`` carries provenance and is never used numerically.
    """

    prior: PriorProx
    log_lambdas: dict = field(default_factory=dict)
    peak: float = DEFAULT_PEAK
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        logs = {str(k): float(v) for k, v in self.log_lambdas.items()}
        if not all(math.isfinite(v) for v in logs.values()):
            raise InputError("log-lambda values must be finite")
        object.__setattr__(self, "log_lambdas", logs)
        object.__setattr__(self, "metadata", dict(self.metadata))
        if not self.peak > 0:
            raise InputError("peak must be positive")

    @classmethod
    def create(cls, prior, lambdas=None, peak=DEFAULT_PEAK, metadata=None):
        lambdas = lambdas or {}
        for k, v in lambdas.items():
            if not v > 0:
                raise InputError(f"lambda for {k!r} must be positive")
        return cls(prior, {k: math.log(v) for k, v in lambdas.items()}, peak, metadata or {})

    @property
    def class_ids(self):
        return sorted(self.log_lambdas)

    @property
    def lambdas(self):
        return {k: math.exp(v) for k, v in sorted(self.log_lambdas.items())}

    def lam(self, class_id):
        try:
            return math.exp(self.log_lambdas[class_id])
        except KeyError:
            raise ConfigurationError(
                f"model has no fidelity weight for class {class_id!r}; "
                f"known classes: {self.class_ids}; pass a lambda override"
            ) from None

    @property
    def n_params(self):
        return self.prior.n_params + len(self.log_lambdas)

    def to_vector(self):
        logs = np.array([self.log_lambdas[k] for k in self.class_ids])
        return np.concatenate([self.prior.to_vector(), logs])

    def with_vector(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_params:
            raise InputError(f"expected {self.n_params} parameters, got {vec.size}")
        n = self.prior.n_params
        prior = self.prior.with_vector(vec[:n])
        logs = dict(zip(self.class_ids, vec[n:].tolist()))
        return ModelParams(prior, logs, self.peak, self.metadata)

    def with_prior(self, prior):
        return ModelParams(prior, self.log_lambdas, self.peak, self.metadata)

    def with_metadata(self, **items):
        meta = dict(self.metadata)
        meta.update(items)
        return ModelParams(self.prior, self.log_lambdas, self.peak, meta)

    def equals(self, other):
        return (
            isinstance(other, ModelParams)
            and self.prior.equals(other.prior)
            and self.log_lambdas == other.log_lambdas
            and self.peak == other.peak
        )
