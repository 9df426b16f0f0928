"""Neural parameterizations of the symplectic potential and the Hamiltonian.

Architecture: plain MLPs with the self-scalable tanh activation
``h -> tanh(h) + mu * h * tanh(h)`` (its slope parameters are trained with
the weights), an affine input normalization fitted on the training set, the
angular pre-processing used for the guiding center, and an optional affine
rescale of the Hamiltonian output. All derivatives come from
:mod:`degenlag.autodiff`, so one model object serves both the integrators
(numpy-valued evaluations) and the training losses (recorded graphs).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .core import (
    DegenerateModel,
    ModelEvaluation,
    Order,
    PhaseState,
    SecondOrderBlock,
)
from .models import canonical_wrapper


def sstanh(h, mu):
    """Self-scalable tanh: tanh(h) + mu * h * tanh(h), componentwise."""
    t = ad.tanh(h)
    return ad.add(t, ad.mul(mu, ad.mul(h, t)))


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


@dataclass
class MlpSpec:
    """Alternating affine / self-scalable tanh layers, final layer affine."""

    layer_widths: List[int]  # input, hidden..., output
    final_bias: bool = True

    def __post_init__(self):
        if len(self.layer_widths) < 2:
            raise ValueError("need at least input and output widths")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1


class Mlp:
    """Parameter container and forward pass for one MLP.

    Parameter order per hidden layer: weight, bias, activation slope mu;
    final layer: weight (and bias unless disabled).
    """

    def __init__(self, spec: MlpSpec):
        self.spec = spec

    def init_params(self, rng: np.random.Generator) -> List[np.ndarray]:
        widths = self.spec.layer_widths
        params: List[np.ndarray] = []
        for layer in range(self.spec.n_layers):
            w_in, w_out = widths[layer], widths[layer + 1]
            last = layer == self.spec.n_layers - 1
            params.append(glorot_uniform(rng, w_out, w_in))
            if not last:
                params.append(np.zeros(w_out))
                params.append(np.zeros(w_out))  # mu: starts as plain tanh
            elif self.spec.final_bias:
                params.append(np.zeros(w_out))
        return params

    def n_params(self) -> int:
        return sum(p.size for p in self.init_params(np.random.default_rng(0)))

    def forward(self, x, params: Sequence):
        """x: (N, in) -> (N, out); accepts Vars or arrays throughout."""
        i = 0
        h = x
        for layer in range(self.spec.n_layers):
            last = layer == self.spec.n_layers - 1
            w = params[i]
            i += 1
            h = ad.matmul(h, ad.swapaxes(w, -1, -2))
            if not last:
                b, mu = params[i], params[i + 1]
                i += 2
                h = ad.add(h, b)
                h = sstanh(h, mu)
            elif self.spec.final_bias:
                h = ad.add(h, params[i])
                i += 1
        return h


@dataclass
class InputNormalizer:
    """Affine per-coordinate map sending the training range onto [0, 1].

    Points outside the training box extrapolate affinely; there is no
    clamping, so simulated trajectories stay smooth when they exit the box.
    """

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if np.any(self.hi <= self.lo):
            raise ValueError("normalizer needs max > min per coordinate")

    @staticmethod
    def fit(data: np.ndarray) -> "InputNormalizer":
        return InputNormalizer(np.min(data, axis=0), np.max(data, axis=0))

    def forward(self, x):
        return ad.mul(ad.sub(x, self.lo), 1.0 / (self.hi - self.lo))


class IdentityPreprocessor:
    """No-op coordinate pass-through (the non-angular experiments)."""

    kind = "identity"
    n_params = 0

    def __init__(self, dim: int):
        self.in_dim = dim
        self.out_dim = dim

    def init_params(self, rng) -> List[np.ndarray]:
        return []

    def forward(self, z, params):
        return z


class AngularPreprocessor:
    """Guiding-center input map: drop phi, cosine-embed theta, repeat r and u.

    (theta, phi, r, u) -> [cos(theta + shift_i)]_k, [r]_k, [u]_k with k
    learnable phase shifts; output is exactly 2 pi periodic in theta and
    independent of phi (hard-coded axisymmetry).
    """

    kind = "angular"
    n_params = 1

    def __init__(self, k: int = 6):
        self.k = int(k)
        self.in_dim = 4
        self.out_dim = 3 * self.k

    def init_params(self, rng) -> List[np.ndarray]:
        return [rng.uniform(0.0, 2.0 * np.pi, size=self.k)]

    def forward(self, z, params):
        (phases,) = params
        ones = np.ones(self.k)
        theta = ad.getitem(z, (slice(None), slice(0, 1)))
        r = ad.getitem(z, (slice(None), slice(2, 3)))
        u = ad.getitem(z, (slice(None), slice(3, 4)))
        ang = ad.cos(ad.add(ad.mul(theta, ones), phases))
        return ad.concat([ang, ad.mul(r, ones), ad.mul(u, ones)], axis=1)


Preprocessor = Union[IdentityPreprocessor, AngularPreprocessor]


class NeuralDegenerateModel(DegenerateModel):
    """Separate MLPs for the potential theta and the Hamiltonian H.

    The model implements the full :class:`DegenerateModel` contract (so the
    DVI and the reference solver run on it unchanged); training code works
    on the same parameter list through :meth:`theta_on_graph` and
    :meth:`h_on_graph`.
    """

    def __init__(
        self,
        dimension: int,
        theta_mlp: Mlp,
        h_mlp: Mlp,
        preproc: Preprocessor,
        normalizer: InputNormalizer,
        h_rescale: Optional[Tuple[float, float]] = None,
        seed: int = 0,
        name: str = "neural",
    ):
        self.dimension = dimension
        self.theta_mlp = theta_mlp
        self.h_mlp = h_mlp
        self.preproc = preproc
        self.normalizer = normalizer
        self.h_rescale = h_rescale
        self.seed = seed
        self.name = name
        rng = np.random.default_rng(seed)
        self._pre_params = preproc.init_params(rng)
        self._theta_params = theta_mlp.init_params(rng)
        self._h_params = h_mlp.init_params(rng)
        self.params: List[np.ndarray] = self._pre_params + self._theta_params + self._h_params
        self._n_pre = len(self._pre_params)
        self._n_theta = len(self._theta_params)

    # -- parameter bookkeeping ------------------------------------------

    def split_params(self, params: Sequence):
        pre = params[: self._n_pre]
        theta = params[self._n_pre : self._n_pre + self._n_theta]
        h = params[self._n_pre + self._n_theta :]
        return pre, theta, h

    def set_params(self, params: Sequence[np.ndarray]) -> None:
        if len(params) != len(self.params):
            raise ValueError("parameter list length mismatch")
        self.params = [np.asarray(p, dtype=float).copy() for p in params]

    # -- batched graph-mode forwards -------------------------------------

    def _preprocess(self, z_batch, pre_params):
        return self.normalizer.forward(self.preproc.forward(z_batch, pre_params))

    def theta_on_graph(self, z_batch, params: Sequence):
        """theta for a (N, 2d) batch; differentiable in z and parameters."""
        pre, theta, _ = self.split_params(params)
        return self.theta_mlp.forward(self._preprocess(z_batch, pre), theta)

    def h_on_graph(self, z_batch, params: Sequence):
        """H for a (N, 2d) batch as a (N, 1) column."""
        pre, _, h = self.split_params(params)
        out = self.h_mlp.forward(self._preprocess(z_batch, pre), h)
        if self.h_rescale is not None:
            lo, hi = self.h_rescale
            out = ad.add(lo, ad.mul(hi - lo, out))
        return out

    # -- DegenerateModel interface ---------------------------------------

    def _flat_theta(self, zv):
        batch = ad.reshape(zv, (1, 2 * self.dimension))
        return ad.reshape(self.theta_on_graph(batch, self.params), (self.dimension,))

    def _flat_h(self, zv):
        batch = ad.reshape(zv, (1, 2 * self.dimension))
        return ad.reshape(self.h_on_graph(batch, self.params), (1,))

    def evaluate(self, z: PhaseState, order: Order = Order.FIRST) -> ModelEvaluation:
        d = self.dimension
        zf = z.z
        theta = ad.val(self._flat_theta(ad.var(zf)))
        ham = float(ad.val(self._flat_h(ad.var(zf)))[0])
        if order is Order.VALUE:
            return ModelEvaluation(theta=theta, hamiltonian=ham)
        jac_theta = ad.input_jacobian(self._flat_theta, zf)
        grad_h = ad.input_jacobian(self._flat_h, zf)[0]
        second = None
        if order is Order.SECOND:
            theta_zz = ad.second_order_eval(self._flat_theta, zf)
            h_zz = ad.second_order_eval(self._flat_h, zf)[0]
            theta_zz = 0.5 * (theta_zz + np.swapaxes(theta_zz, 1, 2))
            h_zz = 0.5 * (h_zz + h_zz.T)
            second = SecondOrderBlock(theta_zz=theta_zz, h_zz=h_zz)
        return ModelEvaluation(
            theta=theta,
            hamiltonian=ham,
            d_x_theta=jac_theta[:, :d],
            d_y_theta=jac_theta[:, d:],
            grad_x_h=grad_h[:d],
            grad_y_h=grad_h[d:],
            second_order=second,
        )

    # -- persistence ------------------------------------------------------

    def manifest(self) -> dict:
        return {
            "format": 1,
            "dimension": self.dimension,
            "theta_widths": self.theta_mlp.spec.layer_widths,
            "theta_final_bias": self.theta_mlp.spec.final_bias,
            "h_widths": self.h_mlp.spec.layer_widths,
            "h_final_bias": self.h_mlp.spec.final_bias,
            "preprocessor": self.preproc.kind,
            "angular_k": getattr(self.preproc, "k", None),
            "normalizer_lo": self.normalizer.lo.tolist(),
            "normalizer_hi": self.normalizer.hi.tolist(),
            "h_rescale": list(self.h_rescale) if self.h_rescale else None,
            "seed": self.seed,
            "name": self.name,
            "param_shapes": [list(p.shape) for p in self.params],
        }

    def save(self, path) -> None:
        """JSON manifest plus a flat little-endian float64 parameter blob."""
        path = Path(path)
        with open(path, "w") as fh:
            json.dump(self.manifest(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        flat = np.concatenate([p.ravel() for p in self.params]) if self.params else np.zeros(0)
        flat.astype("<f8").tofile(path.with_suffix(".bin"))

    @staticmethod
    def load(path) -> "NeuralDegenerateModel":
        path = Path(path)
        with open(path) as fh:
            man = json.load(fh)
        if man.get("format") != 1:
            raise ValueError("unknown checkpoint format")
        preproc: Preprocessor
        if man["preprocessor"] == "angular":
            preproc = AngularPreprocessor(k=man["angular_k"])
        else:
            preproc = IdentityPreprocessor(2 * man["dimension"])
        model = NeuralDegenerateModel(
            dimension=man["dimension"],
            theta_mlp=Mlp(MlpSpec(man["theta_widths"], man["theta_final_bias"])),
            h_mlp=Mlp(MlpSpec(man["h_widths"], man["h_final_bias"])),
            preproc=preproc,
            normalizer=InputNormalizer(
                np.array(man["normalizer_lo"]), np.array(man["normalizer_hi"])
            ),
            h_rescale=tuple(man["h_rescale"]) if man["h_rescale"] else None,
            seed=man["seed"],
            name=man["name"],
        )
        flat = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
        shapes = [tuple(s) for s in man["param_shapes"]]
        sizes = [int(np.prod(s)) if s else 1 for s in shapes]
        if flat.size != sum(sizes):
            raise ValueError("checkpoint parameter blob has wrong length")
        params, ofs = [], 0
        for s, n in zip(shapes, sizes):
            params.append(flat[ofs : ofs + n].reshape(s))
            ofs += n
        model.set_params(params)
        return model


def build_neural_model(
    dimension: int,
    hidden: Sequence[int],
    train_inputs: np.ndarray,
    angular: bool = False,
    angular_k: int = 6,
    final_bias: bool = True,
    h_rescale: Optional[Tuple[float, float]] = None,
    seed: int = 0,
    name: str = "neural",
) -> NeuralDegenerateModel:
    """Assemble the standard two-network model with normalization fitted
    on the (preprocessed) training inputs."""
    preproc: Preprocessor
    preproc = AngularPreprocessor(angular_k) if angular else IdentityPreprocessor(2 * dimension)
    rng = np.random.default_rng(seed)
    pre_params = preproc.init_params(rng)
    pre_out = ad.val(preproc.forward(ad.var(train_inputs), pre_params))
    normalizer = InputNormalizer.fit(pre_out)
    widths = [preproc.out_dim, *hidden]
    model = NeuralDegenerateModel(
        dimension=dimension,
        theta_mlp=Mlp(MlpSpec(widths + [dimension], final_bias)),
        h_mlp=Mlp(MlpSpec(widths + [1], final_bias)),
        preproc=preproc,
        normalizer=normalizer,
        h_rescale=h_rescale,
        seed=seed,
        name=name,
    )
    return model


class VectorFieldNet:
    """Structureless baseline: one MLP mapping z directly to zdot.

    Usable with RK4 and the reference solver; it is not a DegenerateModel,
    so the DVI rejects it at the type level.
    """

    def __init__(self, dimension: int, hidden: Sequence[int], normalizer: InputNormalizer, seed=0):
        self.dimension = dimension
        self.mlp = Mlp(MlpSpec([2 * dimension, *hidden, 2 * dimension]))
        self.normalizer = normalizer
        self.seed = seed
        self.params = self.mlp.init_params(np.random.default_rng(seed))

    def forward_on_graph(self, z_batch, params):
        return self.mlp.forward(self.normalizer.forward(z_batch), params)

    def __call__(self, z_flat: np.ndarray) -> np.ndarray:
        batch = np.asarray(z_flat, dtype=float).reshape(1, -1)
        return ad.val(self.forward_on_graph(batch, self.params)).ravel()


class NeuralHamiltonian:
    """Adapter exposing a learned H through the canonical-model interface."""

    def __init__(self, dimension: int, hidden: Sequence[int], normalizer: InputNormalizer, seed=0):
        self.dimension = dimension
        self.mlp = Mlp(MlpSpec([2 * dimension, *hidden, 1]))
        self.normalizer = normalizer
        self.params = self.mlp.init_params(np.random.default_rng(seed))
        self.name = "neural-h"

    def _flat(self, zv):
        batch = ad.reshape(zv, (1, 2 * self.dimension))
        return ad.reshape(self.mlp.forward(self.normalizer.forward(batch), self.params), (1,))

    def h_eval(self, z_flat: np.ndarray, order: Order):
        v = float(ad.val(self._flat(ad.var(z_flat)))[0])
        if order is Order.VALUE:
            return v, None, None
        g = ad.input_jacobian(self._flat, z_flat)[0]
        if order is Order.FIRST:
            return v, g, None
        hess = ad.second_order_eval(self._flat, z_flat)[0]
        return v, g, 0.5 * (hess + hess.T)


def canonical_neural_model(
    dimension: int, hidden: Sequence[int], train_inputs: np.ndarray, seed: int = 0
):
    """The canonical-structure baseline: a single learned H with theta = y."""
    normalizer = InputNormalizer.fit(train_inputs)
    return canonical_wrapper(NeuralHamiltonian(dimension, hidden, normalizer, seed), dimension)
