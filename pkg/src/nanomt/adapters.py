"""Per-task residual adapter modules and their parameter bundles.

An adapter is a single-hidden-layer feed-forward block with its own layer
normalization, wrapped in a residual connection. One module sits after every
encoder layer and every decoder layer; the modules for one task form a bundle
whose parameter names are disjoint from the base model and from every other
bundle, so tasks can be trained and served independently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError
from .store import ParameterStore

LN_EPS = 1e-6


@dataclass(frozen=True)
class AdapterConfig:
    """Capacity knob for one task's adapters.

    ``bottleneck`` is the inner projection width; 0 means "no adapter" and is
    a first-class configuration. It may exceed the model width to
    over-parametrize a hard task.
    """

    bottleneck: int
    init_scale: float = 0.01

    def __post_init__(self):
        if self.bottleneck < 0:
            raise ContractError(f"bottleneck must be >= 0, got {self.bottleneck}")
        if self.init_scale <= 0:
            raise ContractError(f"init_scale must be > 0, got {self.init_scale}")


@dataclass
class AdapterModule:
    """Parameters for one attachment site: LN gain/bias plus two projections.

    ``w_up`` starts at zero so a fresh module is an exact no-op: the residual
    path returns its input unchanged, bit for bit.
    """

    ln_gain: Tensor   # [d]
    ln_bias: Tensor   # [d]
    w_down: Tensor    # [d, b]
    w_up: Tensor      # [b, d]

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("ln_gain", self.ln_gain), ("ln_bias", self.ln_bias),
                ("w_down", self.w_down), ("w_up", self.w_up)]

    @property
    def width(self) -> int:
        return self.w_down.shape[0]


def adapter_forward(z: Tensor, module: AdapterModule) -> Tensor:
    """Route layer output ``z`` (shape [..., d]) through one adapter module.

    Normalize, project down, relu, project back up, add the residual.
    """
    d = z.shape[-1]
    if d != module.width:
        raise DimensionError(
            f"adapter width {module.width} does not match input width {d}"
        )
    normed = ad.layer_norm(z, module.ln_gain, module.ln_bias, LN_EPS)
    hidden = ad.relu(ad.matmul(normed, module.w_down))
    return ad.add(ad.matmul(hidden, module.w_up), z)


def _site_names(num_layers: int) -> list[str]:
    return [f"encoder.{i}" for i in range(num_layers)] + \
           [f"decoder.{i}" for i in range(num_layers)]


class AdapterBundle:
    """All adapter modules for a single task, one per attachment site."""

    def __init__(self, task_id: str, config: AdapterConfig, num_layers: int,
                 d_model: int, modules: dict[str, AdapterModule]):
        self.task_id = task_id
        self.config = config
        self.num_layers = num_layers
        self.d_model = d_model
        self.modules = modules

    @classmethod
    def create(cls, task_id: str, num_layers: int, d_model: int,
               config: AdapterConfig, seed: int) -> "AdapterBundle":
        """Fresh bundle: w_down ~ Normal(0, init_scale^2), w_up = 0, LN identity.

        Deterministic per seed. With bottleneck 0 the bundle has no modules.
        """
        rng = np.random.default_rng(seed)
        modules: dict[str, AdapterModule] = {}
        if config.bottleneck > 0:
            b = config.bottleneck
            for site in _site_names(num_layers):
                modules[site] = AdapterModule(
                    ln_gain=Tensor(np.ones(d_model)),
                    ln_bias=Tensor(np.zeros(d_model)),
                    w_down=Tensor(rng.normal(0.0, config.init_scale, (d_model, b))),
                    w_up=Tensor(np.zeros((b, d_model))),
                )
        return cls(task_id, config, num_layers, d_model, modules)

    @classmethod
    def from_arrays(cls, task_id: str, config: AdapterConfig, num_layers: int,
                    d_model: int, arrays: dict[str, np.ndarray]) -> "AdapterBundle":
        """Rebuild a bundle from checkpoint tensors keyed by full parameter name."""
        modules: dict[str, AdapterModule] = {}
        if config.bottleneck > 0:
            prefix = f"adapter.{task_id}."
            for site in _site_names(num_layers):
                fields = {}
                for field in ("ln_gain", "ln_bias", "w_down", "w_up"):
                    key = f"{prefix}{site}.{field}"
                    if key not in arrays:
                        raise ContractError(f"bundle is missing tensor {key!r}")
                    fields[field] = Tensor(arrays[key])
                modules[site] = AdapterModule(**fields)
        return cls(task_id, config, num_layers, d_model, modules)

    def module_for(self, side: str, layer: int) -> AdapterModule | None:
        return self.modules.get(f"{side}.{layer}")

    def param_items(self) -> list[tuple[str, Tensor]]:
        items = []
        for site in _site_names(self.num_layers):
            if site in self.modules:
                for suffix, tensor in self.modules[site].parameters():
                    items.append((f"adapter.{self.task_id}.{site}.{suffix}", tensor))
        return items

    def register(self, store: ParameterStore) -> None:
        """Add this bundle's parameters to a store under its task partition."""
        for name, tensor in self.param_items():
            store.add(name, tensor, task=self.task_id, frozen=True)

    def param_count(self) -> int:
        return sum(t.size for _, t in self.param_items())


def create_bundle(task_id: str, num_layers: int, d_model: int,
                  config: AdapterConfig, seed: int,
                  store: ParameterStore | None = None) -> AdapterBundle:
    """Create a bundle and, if a store is given, register it there."""
    bundle = AdapterBundle.create(task_id, num_layers, d_model, config, seed)
    if store is not None:
        bundle.register(store)
    return bundle


def set_trainable(store: ParameterStore, task_id: str) -> None:
    """Make exactly one bundle trainable; base and all other bundles freeze."""
    store.set_trainable_task(task_id)


def count_adapter_params(d: int, b: int, sites: int) -> int:
    """Parameter count of ``sites`` adapter modules: sites * (2*d*b + 2*d).

    By convention b = 0 creates no modules, so the count is 0.
    """
    if d < 0 or b < 0 or sites < 0:
        raise ContractError(f"negative argument: d={d}, b={b}, sites={sites}")
    if b == 0:
        return 0
    return sites * (2 * d * b + 2 * d)
